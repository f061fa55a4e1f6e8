//! Finite-difference verification of the reverse pass.
//!
//! The whole network runs at f64 here, so central differences resolve the
//! analytic gradient to a handful of ulps. The probe architecture is small
//! but walks every structural path: a block without expansion, one with it,
//! an identity shortcut, and both strides. Training-mode forward mutates
//! running statistics, so every loss probe starts from a fresh clone.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ukat::labels::merge_vocabularies;
use ukat::model::net::{build_model, ArchitectureConfig, BlockSpec, Parameters};
use ukat::model::tensor::Tensor;
use ukat::train::bce_with_logits;

fn probe_arch(n_labels: usize) -> ArchitectureConfig {
    ArchitectureConfig {
        stem_channels: 2,
        blocks: vec![
            BlockSpec { expansion: 1, out_channels: 2, repeat: 1, stride: 1 },
            BlockSpec { expansion: 2, out_channels: 3, repeat: 2, stride: 2 },
        ],
        embedding_dim: 4,
        width_mult: 1.0,
        n_labels,
    }
}

fn probe_setup() -> (Parameters<f64>, Tensor<f64>, Tensor<f64>) {
    let vocab = merge_vocabularies(
        &["Speech".into(), "e1".into()],
        &["k1".into()],
    )
    .unwrap();
    let params = build_model(&probe_arch(3), &vocab, 7).unwrap();
    let base: Parameters<f64> = params.cast();

    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let x = Tensor::from_vec(
        &[2, 1, 8, 6],
        (0..2 * 8 * 6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
    );
    let y = Tensor::from_vec(
        &[2, 3],
        (0..6).map(|_| 0.05 + 0.9 * rng.random::<f64>()).collect(),
    );
    (base, x, y)
}

fn loss_of(base: &Parameters<f64>, x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let mut p = base.clone();
    let (logits, _) = p.forward_train(x).unwrap();
    bce_with_logits(&logits, y).unwrap().0
}

fn perturbed(base: &Parameters<f64>, name: &str, i: usize, h: f64) -> Parameters<f64> {
    let mut p = base.clone();
    p.visit_mut(&mut |n, t, _| {
        if n == name {
            t.data_mut()[i] += h;
        }
    });
    p
}

#[test]
fn every_trainable_gradient_matches_finite_differences() {
    let (base, x, y) = probe_setup();

    let mut pc = base.clone();
    let (logits, cache) = pc.forward_train(&x).unwrap();
    let (_, dlogits) = bce_with_logits(&logits, &y).unwrap();
    let grads = pc.backward(&cache, &dlogits).unwrap();

    let mut trainable: Vec<(String, usize)> = Vec::new();
    base.visit(&mut |name, t, role| {
        if role.is_trainable() {
            trainable.push((name, t.numel()));
        }
    });

    let h = 1e-5;
    let mut checked = 0usize;
    for (name, n) in &trainable {
        let g = &grads[name.as_str()];
        assert_eq!(g.numel(), *n, "{name}");
        for i in 0..*n {
            let lp = loss_of(&perturbed(&base, name, i, h), &x, &y);
            let lm = loss_of(&perturbed(&base, name, i, -h), &x, &y);
            let fd = (lp - lm) / (2.0 * h);
            let a = g.data()[i];
            // Central-difference noise is about loss * eps / h, near 1e-11;
            // the floor keeps that from dominating near-zero gradients.
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                (a - fd).abs() / denom < 1e-4,
                "{name}[{i}]: analytic {a:.3e}, finite difference {fd:.3e}"
            );
            checked += 1;
        }
    }
    assert_eq!(checked, base.count_parameters(), "every trainable element probed");
    assert!(checked > 200, "probe network unexpectedly small: {checked}");
}

#[test]
fn f32_and_f64_forward_passes_agree() {
    let (base, x, _) = probe_setup();
    let base32: Parameters<f32> = base.cast();
    let x32: Tensor<f32> = x.cast();

    let hi = base.forward_eval(&x).unwrap();
    let lo = base32.forward_eval(&x32).unwrap();
    assert_eq!(hi.shape(), lo.shape());
    for (a, b) in hi.iter().zip(lo.iter()) {
        assert!((a - *b as f64).abs() < 1e-3, "{a} vs {b}");
    }
}
