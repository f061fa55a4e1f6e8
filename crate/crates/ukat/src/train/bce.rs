//! Multi-label binary cross entropy on raw logits.
//!
//! Loss and gradient come from the numerically safe rearrangement
//! `max(z, 0) - z * y + ln(1 + exp(-|z|))`, which never exponentiates a
//! positive argument. The scalar loss accumulates in `f64` and is the mean
//! over every element of the batch-by-label matrix.

use crate::error::{Error, Result};
use crate::model::tensor::{sc, Scalar, Tensor};

/// Mean elementwise BCE and its gradient with respect to the logits,
/// `(sigmoid(z) - y) / N`.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if logits.shape() != targets.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    if logits.numel() == 0 {
        return Err(Error::EmptyInput("loss"));
    }

    let n = logits.numel() as f64;
    let mut total = 0.0f64;
    let mut grad = Tensor::zeros(logits.shape());
    let gd = grad.data_mut();
    for (i, (&zt, &yt)) in logits.iter().zip(targets.iter()).enumerate() {
        let z = zt.to_f64().unwrap();
        let y = yt.to_f64().unwrap();
        if !z.is_finite() {
            return Err(Error::Numeric(format!("non-finite logit at index {i}")));
        }
        if !(0.0..=1.0).contains(&y) {
            return Err(Error::InvalidArgument(format!(
                "target {y} at index {i} outside [0, 1]"
            )));
        }
        total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let sig = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        };
        gd[i] = sc((sig - y) / n);
    }
    Ok((total / n, grad))
}
