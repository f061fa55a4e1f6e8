//! Model core: tensors, layer kernels, the network, and its file format.

pub mod layers;
pub mod net;
pub mod serialize;
pub mod tensor;

pub use net::{
    build_model, make_divisible, strip_output, zeroed_parameters, ArchitectureConfig, BlockSpec,
    Gradients, Parameters, TensorRole,
};
pub use serialize::{load_model, read_header_value, save_model};
pub use tensor::{Scalar, Tensor};

use crate::dsp::{FrontendConfig, LogMelSpectrogram};
use crate::error::Result;
use crate::labels::LabelVocabulary;

/// A deployable unit: weights plus the vocabulary and front-end settings
/// they were trained against. Everything needed to score raw audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: Parameters<f32>,
    pub vocab: LabelVocabulary,
    pub frontend: FrontendConfig,
}

impl Model {
    /// Sigmoid scores for one feature matrix, in vocabulary order.
    pub fn predict(&self, features: &LogMelSpectrogram) -> Result<Vec<f32>> {
        let x = features_to_tensor(std::slice::from_ref(features));
        let logits = self.params.forward_eval(&x)?;
        Ok(layers::sigmoid(&logits).data().to_vec())
    }

    /// Keep only the listed output labels; see [`strip_output`].
    pub fn strip(&self, keep: &[String]) -> Result<Model> {
        let (params, vocab) = strip_output(&self.params, keep, &self.vocab)?;
        Ok(Model {
            params,
            vocab,
            frontend: self.frontend.clone(),
        })
    }
}

/// Stack equally shaped feature matrices into an `[N, 1, frames, mels]` batch.
pub fn features_to_tensor(specs: &[LogMelSpectrogram]) -> Tensor<f32> {
    assert!(!specs.is_empty());
    let frames = specs[0].n_frames();
    let mels = specs[0].n_mels();
    let mut data = Vec::with_capacity(specs.len() * frames * mels);
    for s in specs {
        assert_eq!(s.n_frames(), frames, "feature stacks must share a frame count");
        assert_eq!(s.n_mels(), mels, "feature stacks must share a mel count");
        data.extend_from_slice(s.data());
    }
    Tensor::from_vec(&[specs.len(), 1, frames, mels], data)
}
