//! Network assembly: inverted-residual backbone, pooled embedding, linear
//! classifier. Construction, initialization, forward in both modes, reverse
//! accumulation, parameter traversal, and output stripping live here.
//!
//! Tensor names follow the traversal order used everywhere (save files,
//! optimizer state, gradient maps): `stem.*`, `blocks.<i>.expand.*`,
//! `blocks.<i>.depthwise.*`, `blocks.<i>.project.*`, `head.*`,
//! `classifier.weight`, `classifier.bias`. Running statistics travel with
//! the model but are not trainable parameters.

use indexmap::IndexMap;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelVocabulary;

use super::layers::{
    batchnorm_eval_forward, batchnorm_train_backward, batchnorm_train_forward, conv2d_backward,
    conv2d_forward, depthwise_backward, depthwise_forward, global_avg_pool_backward,
    global_avg_pool_forward, linear_backward, linear_forward, relu6_backward, relu6_forward,
    BnBatchStats,
};
use super::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub expansion: usize,
    pub out_channels: usize,
    pub repeat: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub stem_channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub embedding_dim: usize,
    #[serde(default = "default_width_mult")]
    pub width_mult: f64,
    pub n_labels: usize,
}

fn default_width_mult() -> f64 {
    1.0
}

impl ArchitectureConfig {
    /// The full-scale configuration: 3x3 stride-2 stem into seven
    /// inverted-residual stages, then a 1280-wide embedding.
    pub fn reference(n_labels: usize) -> Self {
        let table = [
            (1, 16, 1, 1),
            (6, 24, 2, 2),
            (6, 32, 3, 2),
            (6, 64, 4, 2),
            (6, 96, 3, 1),
            (6, 160, 3, 2),
            (6, 320, 1, 1),
        ];
        ArchitectureConfig {
            stem_channels: 32,
            blocks: table
                .iter()
                .map(|&(expansion, out_channels, repeat, stride)| BlockSpec {
                    expansion,
                    out_channels,
                    repeat,
                    stride,
                })
                .collect(),
            embedding_dim: 1280,
            width_mult: 1.0,
            n_labels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_labels == 0 {
            return Err(Error::Config("architecture: n_labels must be positive".into()));
        }
        if self.stem_channels == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("architecture: zero-width layer".into()));
        }
        if !(self.width_mult > 0.0 && self.width_mult.is_finite()) {
            return Err(Error::Config(format!(
                "architecture: width_mult {} out of range",
                self.width_mult
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.expansion == 0 || b.out_channels == 0 || b.repeat == 0 {
                return Err(Error::Config(format!("architecture: block {i} has a zero field")));
            }
            if !(b.stride == 1 || b.stride == 2) {
                return Err(Error::Config(format!(
                    "architecture: block {i} stride {} not in {{1, 2}}",
                    b.stride
                )));
            }
        }
        Ok(())
    }

    /// Channel widths after applying the width multiplier. The identity
    /// multiplier keeps the table verbatim; any other value rounds through
    /// [`make_divisible`], and the embedding only grows, never shrinks.
    pub fn resolved_channels(&self) -> (usize, Vec<usize>, usize) {
        if self.width_mult == 1.0 {
            return (
                self.stem_channels,
                self.blocks.iter().map(|b| b.out_channels).collect(),
                self.embedding_dim,
            );
        }
        let a = self.width_mult;
        let stem = make_divisible(self.stem_channels as f64 * a, 8);
        let outs = self
            .blocks
            .iter()
            .map(|b| make_divisible(b.out_channels as f64 * a, 8))
            .collect();
        let emb = if a > 1.0 {
            make_divisible(self.embedding_dim as f64 * a, 8)
        } else {
            self.embedding_dim
        };
        (stem, outs, emb)
    }
}

/// Round to the nearest multiple of `divisor`, never below it, and never
/// below 90% of the requested width.
pub fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = ((v + d / 2.0) / d).floor() * d;
    if new_v < d {
        new_v = d;
    }
    if new_v < 0.9 * v {
        new_v += d;
    }
    new_v as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnParams<T> {
    pub weight: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub expand: Option<ConvBnParams<T>>,
    pub depthwise: ConvBnParams<T>,
    pub project: ConvBnParams<T>,
    pub stride: usize,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T = f32> {
    cfg: ArchitectureConfig,
    pub stem: ConvBnParams<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub head: ConvBnParams<T>,
    pub classifier_weight: Tensor<T>,
    pub classifier_bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    ConvWeight,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
    LinearWeight,
    LinearBias,
}

impl TensorRole {
    pub fn is_trainable(self) -> bool {
        !matches!(self, TensorRole::RunningMean | TensorRole::RunningVar)
    }
}

pub type Gradients<T> = IndexMap<String, Tensor<T>>;

/// How conv weights come up: He-uniform over the fan-in, or all zeros for a
/// skeleton about to be filled from a file.
enum WeightInit<'a> {
    He(&'a mut ChaCha8Rng),
    Zero,
}

impl WeightInit<'_> {
    fn conv(&mut self, shape: &[usize], fan_in: usize) -> Tensor<f32> {
        match self {
            WeightInit::Zero => Tensor::zeros(shape),
            WeightInit::He(rng) => {
                let limit = (6.0 / fan_in as f64).sqrt() as f32;
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random::<f32>() * 2.0 * limit - limit).collect();
                Tensor::from_vec(shape, data)
            }
        }
    }

    fn conv_bn(&mut self, shape: &[usize; 4], fan_in: usize) -> ConvBnParams<f32> {
        let c = shape[0];
        ConvBnParams {
            weight: self.conv(shape, fan_in),
            gamma: match self {
                WeightInit::Zero => Tensor::zeros(&[c]),
                WeightInit::He(_) => Tensor::full(&[c], 1.0),
            },
            beta: Tensor::zeros(&[c]),
            running_mean: Tensor::zeros(&[c]),
            running_var: match self {
                WeightInit::Zero => Tensor::zeros(&[c]),
                WeightInit::He(_) => Tensor::full(&[c], 1.0),
            },
        }
    }
}

fn construct(cfg: &ArchitectureConfig, init: &mut WeightInit) -> Parameters<f32> {
    let (stem_ch, outs, emb) = cfg.resolved_channels();
    let stem = init.conv_bn(&[stem_ch, 1, 3, 3], 9);
    let mut blocks = Vec::new();
    let mut in_ch = stem_ch;
    for (spec, &out) in cfg.blocks.iter().zip(&outs) {
        for r in 0..spec.repeat {
            let stride = if r == 0 { spec.stride } else { 1 };
            let hidden = in_ch * spec.expansion;
            let expand = (spec.expansion != 1)
                .then(|| init.conv_bn(&[hidden, in_ch, 1, 1], in_ch));
            let depthwise = init.conv_bn(&[hidden, 1, 3, 3], 9);
            let project = init.conv_bn(&[out, hidden, 1, 1], hidden);
            blocks.push(BlockParams {
                expand,
                depthwise,
                project,
                stride,
                residual: stride == 1 && in_ch == out,
            });
            in_ch = out;
        }
    }
    let head = init.conv_bn(&[emb, in_ch, 1, 1], in_ch);
    let classifier_weight = init.conv(&[cfg.n_labels, emb], emb);
    let classifier_bias = Tensor::zeros(&[cfg.n_labels]);
    Parameters {
        cfg: cfg.clone(),
        stem,
        blocks,
        head,
        classifier_weight,
        classifier_bias,
    }
}

/// Fresh parameters for `cfg`, sized to the vocabulary, seeded He-uniform
/// conv weights, unit scale and zero shift norms, zero classifier bias.
pub fn build_model(cfg: &ArchitectureConfig, v: &LabelVocabulary, seed: u64) -> Result<Parameters<f32>> {
    cfg.validate()?;
    if cfg.n_labels != v.len() {
        return Err(Error::Config(format!(
            "architecture expects {} labels, vocabulary has {}",
            cfg.n_labels,
            v.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(construct(cfg, &mut WeightInit::He(&mut rng)))
}

/// All-zero skeleton with the right shapes, for filling from a file.
pub fn zeroed_parameters(cfg: &ArchitectureConfig) -> Result<Parameters<f32>> {
    cfg.validate()?;
    Ok(construct(cfg, &mut WeightInit::Zero))
}

fn visit_convbn<'a, T>(
    prefix: &str,
    p: &'a ConvBnParams<T>,
    f: &mut dyn FnMut(String, &'a Tensor<T>, TensorRole),
) {
    f(format!("{prefix}.weight"), &p.weight, TensorRole::ConvWeight);
    f(format!("{prefix}.gamma"), &p.gamma, TensorRole::Gamma);
    f(format!("{prefix}.beta"), &p.beta, TensorRole::Beta);
    f(format!("{prefix}.running_mean"), &p.running_mean, TensorRole::RunningMean);
    f(format!("{prefix}.running_var"), &p.running_var, TensorRole::RunningVar);
}

fn visit_convbn_mut<T>(
    prefix: &str,
    p: &mut ConvBnParams<T>,
    f: &mut dyn FnMut(String, &mut Tensor<T>, TensorRole),
) {
    f(format!("{prefix}.weight"), &mut p.weight, TensorRole::ConvWeight);
    f(format!("{prefix}.gamma"), &mut p.gamma, TensorRole::Gamma);
    f(format!("{prefix}.beta"), &mut p.beta, TensorRole::Beta);
    f(format!("{prefix}.running_mean"), &mut p.running_mean, TensorRole::RunningMean);
    f(format!("{prefix}.running_var"), &mut p.running_var, TensorRole::RunningVar);
}

impl<T: Scalar> Parameters<T> {
    pub fn config(&self) -> &ArchitectureConfig {
        &self.cfg
    }

    /// Walk every tensor in canonical order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>, TensorRole)) {
        visit_convbn("stem", &self.stem, f);
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(e) = &b.expand {
                visit_convbn(&format!("blocks.{i}.expand"), e, f);
            }
            visit_convbn(&format!("blocks.{i}.depthwise"), &b.depthwise, f);
            visit_convbn(&format!("blocks.{i}.project"), &b.project, f);
        }
        visit_convbn("head", &self.head, f);
        f("classifier.weight".to_string(), &self.classifier_weight, TensorRole::LinearWeight);
        f("classifier.bias".to_string(), &self.classifier_bias, TensorRole::LinearBias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>, TensorRole)) {
        visit_convbn_mut("stem", &mut self.stem, f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            if let Some(e) = &mut b.expand {
                visit_convbn_mut(&format!("blocks.{i}.expand"), e, f);
            }
            visit_convbn_mut(&format!("blocks.{i}.depthwise"), &mut b.depthwise, f);
            visit_convbn_mut(&format!("blocks.{i}.project"), &mut b.project, f);
        }
        visit_convbn_mut("head", &mut self.head, f);
        f("classifier.weight".to_string(), &mut self.classifier_weight, TensorRole::LinearWeight);
        f("classifier.bias".to_string(), &mut self.classifier_bias, TensorRole::LinearBias);
    }

    /// Trainable parameter count; running statistics excluded.
    pub fn count_parameters(&self) -> usize {
        let mut n = 0usize;
        self.visit(&mut |_, t, role| {
            if role.is_trainable() {
                n += t.numel();
            }
        });
        n
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let conv = |p: &ConvBnParams<T>| ConvBnParams {
            weight: p.weight.cast(),
            gamma: p.gamma.cast(),
            beta: p.beta.cast(),
            running_mean: p.running_mean.cast(),
            running_var: p.running_var.cast(),
        };
        Parameters {
            cfg: self.cfg.clone(),
            stem: conv(&self.stem),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    expand: b.expand.as_ref().map(&conv),
                    depthwise: conv(&b.depthwise),
                    project: conv(&b.project),
                    stride: b.stride,
                    residual: b.residual,
                })
                .collect(),
            head: conv(&self.head),
            classifier_weight: self.classifier_weight.cast(),
            classifier_bias: self.classifier_bias.cast(),
        }
    }
}

pub struct ConvBnCache<T> {
    x: Tensor<T>,
    z: Tensor<T>,
    stats: BnBatchStats,
    a: Tensor<T>,
}

pub struct BlockCache<T> {
    expand: Option<ConvBnCache<T>>,
    depthwise: ConvBnCache<T>,
    project: ConvBnCache<T>,
}

pub struct ForwardCache<T> {
    stem: ConvBnCache<T>,
    blocks: Vec<BlockCache<T>>,
    head: ConvBnCache<T>,
    pooled: Tensor<T>,
    spatial: (usize, usize),
}

#[derive(Clone, Copy)]
enum ConvKind {
    Full,
    Depthwise,
}

fn unit_forward_train<T: Scalar>(
    p: &mut ConvBnParams<T>,
    x: Tensor<T>,
    kind: ConvKind,
    stride: usize,
    pad: usize,
    act: bool,
) -> Result<(Tensor<T>, ConvBnCache<T>)> {
    let z = match kind {
        ConvKind::Full => conv2d_forward(&x, &p.weight, (stride, stride), (pad, pad))?,
        ConvKind::Depthwise => depthwise_forward(&x, &p.weight, (stride, stride), (pad, pad))?,
    };
    let (a, stats) = batchnorm_train_forward(
        &z,
        &p.gamma,
        &p.beta,
        &mut p.running_mean,
        &mut p.running_var,
        BN_MOMENTUM,
        BN_EPS,
    );
    let out = if act { relu6_forward(&a) } else { a.clone() };
    Ok((out, ConvBnCache { x, z, stats, a }))
}

fn unit_forward_eval<T: Scalar>(
    p: &ConvBnParams<T>,
    x: &Tensor<T>,
    kind: ConvKind,
    stride: usize,
    pad: usize,
    act: bool,
) -> Result<Tensor<T>> {
    let z = match kind {
        ConvKind::Full => conv2d_forward(x, &p.weight, (stride, stride), (pad, pad))?,
        ConvKind::Depthwise => depthwise_forward(x, &p.weight, (stride, stride), (pad, pad))?,
    };
    let a = batchnorm_eval_forward(&z, &p.gamma, &p.beta, &p.running_mean, &p.running_var, BN_EPS);
    Ok(if act { relu6_forward(&a) } else { a })
}

/// Gradient of one conv-bn(-relu6) unit. Consumes the upstream gradient and
/// hands back the gradient at the unit input, pushing parameter gradients
/// into `grads` under `prefix`.
fn unit_backward<T: Scalar>(
    p: &ConvBnParams<T>,
    cache: &ConvBnCache<T>,
    dy: Tensor<T>,
    kind: ConvKind,
    stride: usize,
    pad: usize,
    act: bool,
    prefix: &str,
    grads: &mut Gradients<T>,
) -> Result<Tensor<T>> {
    let da = if act { relu6_backward(&cache.a, &dy) } else { dy };
    let (dz, dgamma, dbeta) = batchnorm_train_backward(&cache.z, &p.gamma, &cache.stats, BN_EPS, &da);
    let (dx, dw) = match kind {
        ConvKind::Full => conv2d_backward(&cache.x, &p.weight, &dz, (stride, stride), (pad, pad))?,
        ConvKind::Depthwise => depthwise_backward(&cache.x, &p.weight, &dz, (stride, stride), (pad, pad))?,
    };
    grads.insert(format!("{prefix}.weight"), dw);
    grads.insert(format!("{prefix}.gamma"), dgamma);
    grads.insert(format!("{prefix}.beta"), dbeta);
    Ok(dx)
}

fn add_into<T: Scalar>(acc: &mut Tensor<T>, other: &Tensor<T>) {
    assert_eq!(acc.shape(), other.shape());
    for (a, &b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a = *a + b;
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, expect_ch: usize) -> Result<()> {
    let (n, c, _, _) = x.dims4();
    if n == 0 {
        return Err(Error::EmptyInput("network forward"));
    }
    if c != expect_ch {
        return Err(Error::Shape(format!(
            "network expects {expect_ch} input channel(s), got {c}"
        )));
    }
    if !x.all_finite() {
        return Err(Error::Numeric("non-finite network input".into()));
    }
    Ok(())
}

impl<T: Scalar> Parameters<T> {
    /// Training-mode forward: batch statistics normalize, running statistics
    /// update in place, and every intermediate needed by [`Self::backward`]
    /// is captured.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        check_input(x, self.stem.weight.shape()[1])?;
        let (out, stem) = unit_forward_train(&mut self.stem, x.clone(), ConvKind::Full, 2, 1, true)?;
        let mut cur = out;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let input = cur.clone();
            let (expand_cache, expanded) = match &mut b.expand {
                Some(e) => {
                    let (out, c) = unit_forward_train(e, cur, ConvKind::Full, 1, 0, true)?;
                    (Some(c), out)
                }
                None => (None, cur),
            };
            let (dw_out, dw_cache) =
                unit_forward_train(&mut b.depthwise, expanded, ConvKind::Depthwise, b.stride, 1, true)?;
            let (proj_out, proj_cache) =
                unit_forward_train(&mut b.project, dw_out, ConvKind::Full, 1, 0, false)?;
            cur = proj_out;
            if b.residual {
                add_into(&mut cur, &input);
            }
            blocks.push(BlockCache {
                expand: expand_cache,
                depthwise: dw_cache,
                project: proj_cache,
            });
        }
        let (head_out, head) = unit_forward_train(&mut self.head, cur, ConvKind::Full, 1, 0, true)?;
        let (_, _, h, w) = head_out.dims4();
        let pooled = global_avg_pool_forward(&head_out);
        let logits = linear_forward(&pooled, &self.classifier_weight, &self.classifier_bias);
        Ok((
            logits,
            ForwardCache {
                stem,
                blocks,
                head,
                pooled,
                spatial: (h, w),
            },
        ))
    }

    /// Inference-mode forward using running statistics; no state changes.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_input(x, self.stem.weight.shape()[1])?;
        let mut cur = unit_forward_eval(&self.stem, x, ConvKind::Full, 2, 1, true)?;
        for b in &self.blocks {
            let input = cur.clone();
            let expanded = match &b.expand {
                Some(e) => unit_forward_eval(e, &cur, ConvKind::Full, 1, 0, true)?,
                None => cur,
            };
            let dw_out = unit_forward_eval(&b.depthwise, &expanded, ConvKind::Depthwise, b.stride, 1, true)?;
            let mut proj_out = unit_forward_eval(&b.project, &dw_out, ConvKind::Full, 1, 0, false)?;
            if b.residual {
                add_into(&mut proj_out, &input);
            }
            cur = proj_out;
        }
        let head_out = unit_forward_eval(&self.head, &cur, ConvKind::Full, 1, 0, true)?;
        let pooled = global_avg_pool_forward(&head_out);
        Ok(linear_forward(&pooled, &self.classifier_weight, &self.classifier_bias))
    }

    /// Reverse pass for the most recent [`Self::forward_train`]. Returns
    /// gradients for every trainable tensor, keyed and ordered exactly as
    /// [`Self::visit`] walks them.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> Result<Gradients<T>> {
        let mut grads: Gradients<T> = IndexMap::new();

        let (dpooled, dcw, dcb) = linear_backward(&cache.pooled, &self.classifier_weight, dlogits);
        grads.insert("classifier.weight".to_string(), dcw);
        grads.insert("classifier.bias".to_string(), dcb);

        let dr = global_avg_pool_backward(&dpooled, cache.spatial.0, cache.spatial.1);
        let mut dy = unit_backward(&self.head, &cache.head, dr, ConvKind::Full, 1, 0, true, "head", &mut grads)?;

        for (i, (b, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let skip = b.residual.then(|| dy.clone());
            let d_dw_out = unit_backward(
                &b.project,
                &bc.project,
                dy,
                ConvKind::Full,
                1,
                0,
                false,
                &format!("blocks.{i}.project"),
                &mut grads,
            )?;
            let d_exp_out = unit_backward(
                &b.depthwise,
                &bc.depthwise,
                d_dw_out,
                ConvKind::Depthwise,
                b.stride,
                1,
                true,
                &format!("blocks.{i}.depthwise"),
                &mut grads,
            )?;
            let mut d_in = match (&b.expand, &bc.expand) {
                (Some(e), Some(ec)) => unit_backward(
                    e,
                    ec,
                    d_exp_out,
                    ConvKind::Full,
                    1,
                    0,
                    true,
                    &format!("blocks.{i}.expand"),
                    &mut grads,
                )?,
                (None, None) => d_exp_out,
                _ => unreachable!("cache structure mirrors parameters"),
            };
            if let Some(skip) = skip {
                add_into(&mut d_in, &skip);
            }
            dy = d_in;
        }

        unit_backward(&self.stem, &cache.stem, dy, ConvKind::Full, 2, 1, true, "stem", &mut grads)?;

        // Canonical ordering, so optimizer traversal is deterministic.
        let mut ordered = IndexMap::with_capacity(grads.len());
        self.visit(&mut |name, _, role| {
            if role.is_trainable() {
                let g = grads
                    .shift_remove(&name)
                    .unwrap_or_else(|| panic!("missing gradient for {name}"));
                ordered.insert(name, g);
            }
        });
        assert!(grads.is_empty(), "unmatched gradients: {:?}", grads.keys().collect::<Vec<_>>());
        Ok(ordered)
    }
}

/// Restrict the classifier to `keep`, preserving backbone tensors bit for
/// bit. Kept names are regrouped into the canonical block order, event
/// labels then keyword labels, each in the order given.
pub fn strip_output(
    p: &Parameters<f32>,
    keep: &[String],
    v: &LabelVocabulary,
) -> Result<(Parameters<f32>, LabelVocabulary)> {
    if p.cfg.n_labels != v.len() {
        return Err(Error::Config(format!(
            "model has {} outputs but vocabulary has {}",
            p.cfg.n_labels,
            v.len()
        )));
    }
    if keep.is_empty() {
        return Err(Error::InvalidArgument("keep list is empty".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for name in keep {
        if !seen.insert(name.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate keep label {name:?}")));
        }
        if v.index_of(name).is_none() {
            return Err(Error::InvalidArgument(format!("keep label {name:?} not in vocabulary")));
        }
    }

    let kept_at: Vec<String> = keep.iter().filter(|n| !v.is_kws_index(v.index_of(n).unwrap())).cloned().collect();
    let kept_kws: Vec<String> = keep.iter().filter(|n| v.is_kws_index(v.index_of(n).unwrap())).cloned().collect();
    let new_vocab = LabelVocabulary::new(kept_at.clone(), kept_kws.clone())?;

    let emb = p.classifier_weight.shape()[1];
    let mut w = Vec::with_capacity(new_vocab.len() * emb);
    let mut b = Vec::with_capacity(new_vocab.len());
    for name in kept_at.iter().chain(kept_kws.iter()) {
        let old = v.index_of(name).unwrap();
        w.extend_from_slice(&p.classifier_weight.data()[old * emb..(old + 1) * emb]);
        b.push(p.classifier_bias.data()[old]);
    }

    let mut cfg = p.cfg.clone();
    cfg.n_labels = new_vocab.len();
    let stripped = Parameters {
        cfg,
        stem: p.stem.clone(),
        blocks: p.blocks.clone(),
        head: p.head.clone(),
        classifier_weight: Tensor::from_vec(&[new_vocab.len(), emb], w),
        classifier_bias: Tensor::from_vec(&[new_vocab.len()], b),
    };
    Ok((stripped, new_vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::merge_vocabularies;

    fn tiny_vocab() -> LabelVocabulary {
        merge_vocabularies(
            &["Speech".to_string(), "ev1".to_string(), "ev2".to_string()],
            &["kw0".to_string(), "kw1".to_string()],
        )
        .unwrap()
    }

    fn tiny_cfg(n_labels: usize) -> ArchitectureConfig {
        ArchitectureConfig {
            stem_channels: 4,
            blocks: vec![
                BlockSpec { expansion: 1, out_channels: 4, repeat: 1, stride: 1 },
                BlockSpec { expansion: 2, out_channels: 6, repeat: 2, stride: 2 },
            ],
            embedding_dim: 8,
            width_mult: 1.0,
            n_labels,
        }
    }

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect())
    }

    #[test]
    fn make_divisible_rounds_to_multiples() {
        assert_eq!(make_divisible(32.0, 8), 32);
        assert_eq!(make_divisible(16.0, 8), 16);
        assert_eq!(make_divisible(12.0, 8), 16);
        // Rounds down to 8, but 8 < 0.9 * 11, so the next multiple wins.
        assert_eq!(make_divisible(11.0, 8), 16);
        assert_eq!(make_divisible(3.0, 8), 8);
        assert_eq!(make_divisible(91.0, 8), 88);
    }

    #[test]
    fn reference_channels_identity_and_scaled() {
        let cfg = ArchitectureConfig::reference(537);
        let (stem, outs, emb) = cfg.resolved_channels();
        assert_eq!(stem, 32);
        assert_eq!(outs, vec![16, 24, 32, 64, 96, 160, 320]);
        assert_eq!(emb, 1280);

        let mut half = cfg.clone();
        half.width_mult = 0.5;
        let (stem, outs, emb) = half.resolved_channels();
        assert_eq!(stem, 16);
        assert_eq!(outs, vec![8, 16, 16, 32, 48, 80, 160]);
        assert_eq!(emb, 1280);
    }

    #[test]
    fn reference_parameter_count() {
        let at: Vec<String> = std::iter::once("Speech".to_string())
            .chain((1..527).map(|i| format!("ev{i}")))
            .collect();
        let kws: Vec<String> = (0..10).map(|i| format!("kw{i}")).collect();
        let v = merge_vocabularies(&at, &kws).unwrap();
        let cfg = ArchitectureConfig::reference(537);
        let p = build_model(&cfg, &v, 1).unwrap();
        let count = p.count_parameters();
        // Backbone 2,223,296 plus a 537 x 1280 classifier with bias.
        assert_eq!(count, 2_911_193);
        assert!((count as f64 - 2.9e6).abs() <= 0.05 * 2.9e6);
    }

    #[test]
    fn classifier_grows_by_embedding_plus_one_per_label() {
        let v3 = tiny_vocab();
        let p3 = build_model(&tiny_cfg(5), &v3, 7).unwrap();
        let at: Vec<String> = vec!["Speech".into(), "ev1".into(), "ev2".into(), "ev3".into()];
        let kws: Vec<String> = vec!["kw0".into(), "kw1".into(), "kw2".into()];
        let v7 = merge_vocabularies(&at, &kws).unwrap();
        let p7 = build_model(&tiny_cfg(7), &v7, 7).unwrap();
        assert_eq!(p7.count_parameters() - p3.count_parameters(), 2 * (8 + 1));
    }

    #[test]
    fn init_is_seed_deterministic() {
        let v = tiny_vocab();
        let a = build_model(&tiny_cfg(5), &v, 11).unwrap();
        let b = build_model(&tiny_cfg(5), &v, 11).unwrap();
        let c = build_model(&tiny_cfg(5), &v, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn build_rejects_vocab_size_mismatch_and_bad_stride() {
        let v = tiny_vocab();
        assert!(matches!(
            build_model(&tiny_cfg(4), &v, 0),
            Err(Error::Config(_))
        ));
        let mut cfg = tiny_cfg(5);
        cfg.blocks[0].stride = 3;
        assert!(matches!(build_model(&cfg, &v, 0), Err(Error::Config(_))));
    }

    #[test]
    fn eval_forward_shape_and_batch_independence() {
        let v = tiny_vocab();
        let p = build_model(&tiny_cfg(5), &v, 3).unwrap();
        let x = rand_input(&[2, 1, 12, 10], 5);
        let y = p.forward_eval(&x).unwrap();
        assert_eq!(y.shape(), &[2, 5]);
        assert!(y.all_finite());

        // Each batch row scores identically to a standalone forward.
        for b in 0..2 {
            let one = Tensor::from_vec(&[1, 1, 12, 10], x.data()[b * 120..(b + 1) * 120].to_vec());
            let yb = p.forward_eval(&one).unwrap();
            assert_eq!(&y.data()[b * 5..(b + 1) * 5], yb.data());
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let v = tiny_vocab();
        let mut p = build_model(&tiny_cfg(5), &v, 3).unwrap();
        let empty = Tensor::<f32>::zeros(&[0, 1, 8, 8]);
        assert!(matches!(p.forward_eval(&empty), Err(Error::EmptyInput(_))));
        let mut bad = rand_input(&[1, 1, 8, 8], 1);
        bad.data_mut()[3] = f32::INFINITY;
        assert!(matches!(p.forward_eval(&bad), Err(Error::Numeric(_))));
        assert!(matches!(p.forward_train(&bad), Err(Error::Numeric(_))));
        let two_ch = Tensor::<f32>::zeros(&[1, 2, 8, 8]);
        assert!(matches!(p.forward_eval(&two_ch), Err(Error::Shape(_))));
    }

    #[test]
    fn train_forward_updates_running_stats_and_backward_covers_all_parameters() {
        let v = tiny_vocab();
        let mut p = build_model(&tiny_cfg(5), &v, 3).unwrap();
        let before = p.stem.running_mean.clone();
        let x = rand_input(&[2, 1, 12, 10], 5);
        let (logits, cache) = p.forward_train(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 5]);
        assert_ne!(p.stem.running_mean, before);

        let dl = rand_input(&[2, 5], 6);
        let grads = p.backward(&cache, &dl).unwrap();
        let mut want = Vec::new();
        p.visit(&mut |name, t, role| {
            if role.is_trainable() {
                want.push((name, t.shape().to_vec()));
            }
        });
        assert_eq!(grads.len(), want.len());
        for ((gname, g), (wname, wshape)) in grads.iter().zip(&want) {
            assert_eq!(gname, wname);
            assert_eq!(g.shape(), &wshape[..]);
            assert!(g.all_finite());
        }
    }

    #[test]
    fn strip_regroups_interleaved_keep_into_block_order() {
        let v = tiny_vocab();
        let p = build_model(&tiny_cfg(5), &v, 21).unwrap();
        let keep: Vec<String> = ["kw1", "ev2", "Speech"].iter().map(|s| s.to_string()).collect();
        let (sp, sv) = strip_output(&p, &keep, &v).unwrap();
        assert_eq!(sv.at_labels(), &["ev2".to_string(), "Speech".to_string()]);
        assert_eq!(sv.kws_labels(), &["kw1".to_string()]);
        assert_eq!(sv.speech_index(), Some(1));
        assert_eq!(sp.config().n_labels, 3);
        assert_eq!(
            p.count_parameters() - sp.count_parameters(),
            2 * (8 + 1),
            "two dropped labels, embedding 8"
        );

        // Kept classifier rows are bit-identical to their originals.
        let emb = 8usize;
        for (new_i, name) in ["ev2", "Speech", "kw1"].iter().enumerate() {
            let old = v.index_of(name).unwrap();
            assert_eq!(
                &sp.classifier_weight.data()[new_i * emb..(new_i + 1) * emb],
                &p.classifier_weight.data()[old * emb..(old + 1) * emb]
            );
            assert_eq!(sp.classifier_bias.data()[new_i], p.classifier_bias.data()[old]);
        }
        assert_eq!(sp.stem, p.stem);
        assert_eq!(sp.blocks, p.blocks);
        assert_eq!(sp.head, p.head);
    }

    #[test]
    fn strip_to_keywords_only_drops_speech_index() {
        let v = tiny_vocab();
        let p = build_model(&tiny_cfg(5), &v, 21).unwrap();
        let (sp, sv) = strip_output(&p, &["kw0".to_string(), "kw1".to_string()], &v).unwrap();
        assert_eq!(sv.num_at(), 0);
        assert_eq!(sv.num_kws(), 2);
        assert_eq!(sv.speech_index(), None);
        assert_eq!(sp.config().n_labels, 2);
    }

    #[test]
    fn strip_keeps_keyword_scores_identical() {
        let v = tiny_vocab();
        let p = build_model(&tiny_cfg(5), &v, 33).unwrap();
        let x = rand_input(&[1, 1, 16, 12], 9);
        let full = p.forward_eval(&x).unwrap();
        let (sp, sv) = strip_output(&p, &["kw0".to_string(), "kw1".to_string()], &v).unwrap();
        let stripped = sp.forward_eval(&x).unwrap();
        for (k, name) in sv.kws_labels().iter().enumerate() {
            let old = v.index_of(name).unwrap();
            assert_eq!(stripped.data()[k], full.data()[old], "score for {name} drifted");
        }
    }

    #[test]
    fn strip_validates_keep_list() {
        let v = tiny_vocab();
        let p = build_model(&tiny_cfg(5), &v, 21).unwrap();
        assert!(matches!(strip_output(&p, &[], &v), Err(Error::InvalidArgument(_))));
        let dup = vec!["kw0".to_string(), "kw0".to_string()];
        assert!(matches!(strip_output(&p, &dup, &v), Err(Error::InvalidArgument(_))));
        let missing = vec!["nope".to_string()];
        assert!(matches!(strip_output(&p, &missing, &v), Err(Error::InvalidArgument(_))));
    }
}
