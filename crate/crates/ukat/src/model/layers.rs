//! Layer kernels: plain convolution, depthwise convolution, batch norm,
//! ReLU6, global mean pooling, and the linear head. Each op has an explicit
//! backward companion taking the tensors its gradient needs.
//!
//! Data layout is NCHW throughout. Normalization statistics and pooling
//! means accumulate in `f64` regardless of the working width; convolution
//! inner products accumulate in the working width, in a fixed loop order,
//! so results are bit-reproducible run to run.

use crate::error::{Error, Result};

use super::tensor::{sc, Scalar, Tensor};

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn out_dims(h: usize, w: usize, kh: usize, kw: usize, stride: (usize, usize), pad: (usize, usize)) -> Result<(usize, usize)> {
    match (
        conv_out_dim(h, kh, stride.0, pad.0),
        conv_out_dim(w, kw, stride.1, pad.1),
    ) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => Ok((ho, wo)),
        _ => Err(Error::Shape(format!(
            "convolution input {h}x{w} too small for kernel {kh}x{kw} stride {stride:?} pad {pad:?}"
        ))),
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<T>> {
    let (n, ci, h, wd) = x.dims4();
    let (co, wci, kh, kw) = w.dims4();
    assert_eq!(ci, wci, "conv weight expects {wci} input channels, input has {ci}");
    let (ho, wo) = out_dims(h, wd, kh, kw, stride, pad)?;
    let (sh, sw) = stride;
    let (ph, pw) = pad;

    let mut y = Tensor::zeros(&[n, co, ho, wo]);
    let xd = x.data();
    let wt = w.data();
    let yd = y.data_mut();
    for b in 0..n {
        for oc in 0..co {
            let yplane = &mut yd[(b * co + oc) * ho * wo..][..ho * wo];
            for ic in 0..ci {
                let xplane = &xd[(b * ci + ic) * h * wd..][..h * wd];
                let wk = &wt[(oc * ci + ic) * kh * kw..][..kh * kw];
                for oy in 0..ho {
                    let iy0 = (oy * sh) as isize - ph as isize;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * wd..][..wd];
                        let wrow = &wk[ky * kw..][..kw];
                        let yrow = &mut yplane[oy * wo..][..wo];
                        for ox in 0..wo {
                            let ix0 = (ox * sw) as isize - pw as isize;
                            let mut acc = T::zero();
                            for (kx, &wv) in wrow.iter().enumerate() {
                                let ix = ix0 + kx as isize;
                                if ix >= 0 && ix < wd as isize {
                                    acc = acc + xrow[ix as usize] * wv;
                                }
                            }
                            yrow[ox] = yrow[ox] + acc;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, ci, h, wd) = x.dims4();
    let (co, _, kh, kw) = w.dims4();
    let (ho, wo) = out_dims(h, wd, kh, kw, stride, pad)?;
    assert_eq!(dy.shape(), &[n, co, ho, wo], "upstream gradient shape mismatch");
    let (sh, sw) = stride;
    let (ph, pw) = pad;

    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let xd = x.data();
    let wt = w.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    for b in 0..n {
        for oc in 0..co {
            let dyplane = &dyd[(b * co + oc) * ho * wo..][..ho * wo];
            for ic in 0..ci {
                let xoff = (b * ci + ic) * h * wd;
                let woff = (oc * ci + ic) * kh * kw;
                for oy in 0..ho {
                    let iy0 = (oy * sh) as isize - ph as isize;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = iy as usize * wd;
                        for ox in 0..wo {
                            let g = dyplane[oy * wo + ox];
                            let ix0 = (ox * sw) as isize - pw as isize;
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix >= 0 && ix < wd as isize {
                                    let xi = xoff + row + ix as usize;
                                    let wi = woff + ky * kw + kx;
                                    dxd[xi] = dxd[xi] + g * wt[wi];
                                    dwd[wi] = dwd[wi] + g * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}

pub fn depthwise_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<Tensor<T>> {
    let (n, c, h, wd) = x.dims4();
    let (wc, one, kh, kw) = w.dims4();
    assert_eq!(c, wc, "depthwise weight expects {wc} channels, input has {c}");
    assert_eq!(one, 1, "depthwise weight must have a unit channel dim");
    let (ho, wo) = out_dims(h, wd, kh, kw, stride, pad)?;
    let (sh, sw) = stride;
    let (ph, pw) = pad;

    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let xd = x.data();
    let wt = w.data();
    let yd = y.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let xplane = &xd[(b * c + ch) * h * wd..][..h * wd];
            let wk = &wt[ch * kh * kw..][..kh * kw];
            let yplane = &mut yd[(b * c + ch) * ho * wo..][..ho * wo];
            for oy in 0..ho {
                let iy0 = (oy * sh) as isize - ph as isize;
                for ox in 0..wo {
                    let ix0 = (ox * sw) as isize - pw as isize;
                    let mut acc = T::zero();
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = &xplane[iy as usize * wd..][..wd];
                        let wrow = &wk[ky * kw..][..kw];
                        for (kx, &wv) in wrow.iter().enumerate() {
                            let ix = ix0 + kx as isize;
                            if ix >= 0 && ix < wd as isize {
                                acc = acc + xrow[ix as usize] * wv;
                            }
                        }
                    }
                    yplane[oy * wo + ox] = acc;
                }
            }
        }
    }
    Ok(y)
}

pub fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, wd) = x.dims4();
    let (_, _, kh, kw) = w.dims4();
    let (ho, wo) = out_dims(h, wd, kh, kw, stride, pad)?;
    assert_eq!(dy.shape(), &[n, c, ho, wo], "upstream gradient shape mismatch");
    let (sh, sw) = stride;
    let (ph, pw) = pad;

    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let xd = x.data();
    let wt = w.data();
    let dyd = dy.data();
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let plane = (b * c + ch) * h * wd;
            let dyplane = &dyd[(b * c + ch) * ho * wo..][..ho * wo];
            let woff = ch * kh * kw;
            for oy in 0..ho {
                let iy0 = (oy * sh) as isize - ph as isize;
                for ox in 0..wo {
                    let g = dyplane[oy * wo + ox];
                    let ix0 = (ox * sw) as isize - pw as isize;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = ix0 + kx as isize;
                            if ix >= 0 && ix < wd as isize {
                                let xi = plane + iy as usize * wd + ix as usize;
                                let wi = woff + ky * kw + kx;
                                dxd[xi] = dxd[xi] + g * wt[wi];
                                dwd[wi] = dwd[wi] + g * xd[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}

/// Per-channel batch statistics captured by the training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide by n) variance; this is what normalization uses.
    pub var: Vec<f64>,
}

/// Training-mode batch norm. Normalizes with biased batch statistics and
/// folds them into the running estimates in place; the running variance
/// update uses the unbiased correction `n / (n - 1)` and is skipped when a
/// channel sees a single value.
pub fn batchnorm_train_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    momentum: f64,
    eps: f64,
) -> (Tensor<T>, BnBatchStats) {
    let (n, c, h, w) = x.dims4();
    assert_eq!(gamma.numel(), c);
    let per = n * h * w;
    let xd = x.data();

    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for b in 0..n {
            let plane = &xd[(b * c + ch) * h * w..][..h * w];
            for &v in plane {
                acc += v.to_f64().unwrap();
            }
        }
        let m = acc / per as f64;
        let mut acc2 = 0.0f64;
        for b in 0..n {
            let plane = &xd[(b * c + ch) * h * w..][..h * w];
            for &v in plane {
                let d = v.to_f64().unwrap() - m;
                acc2 += d * d;
            }
        }
        mean[ch] = m;
        var[ch] = acc2 / per as f64;
    }

    let mut y = Tensor::zeros(x.shape());
    let yd = y.data_mut();
    for ch in 0..c {
        let g = gamma.data()[ch].to_f64().unwrap();
        let be = beta.data()[ch].to_f64().unwrap();
        let inv = 1.0 / (var[ch] + eps).sqrt();
        for b in 0..n {
            let off = (b * c + ch) * h * w;
            for i in off..off + h * w {
                let xh = (xd[i].to_f64().unwrap() - mean[ch]) * inv;
                yd[i] = sc(xh * g + be);
            }
        }
    }

    for ch in 0..c {
        let rm = running_mean.data()[ch].to_f64().unwrap();
        running_mean.data_mut()[ch] = sc((1.0 - momentum) * rm + momentum * mean[ch]);
        if per > 1 {
            let unbiased = var[ch] * per as f64 / (per - 1) as f64;
            let rv = running_var.data()[ch].to_f64().unwrap();
            running_var.data_mut()[ch] = sc((1.0 - momentum) * rv + momentum * unbiased);
        }
    }

    (y, BnBatchStats { mean, var })
}

pub fn batchnorm_train_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BnBatchStats,
    eps: f64,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = x.dims4();
    assert_eq!(dy.shape(), x.shape());
    let per = (n * h * w) as f64;
    let xd = x.data();
    let dyd = dy.data();

    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    let dxd = dx.data_mut();
    for ch in 0..c {
        let m = stats.mean[ch];
        let inv = 1.0 / (stats.var[ch] + eps).sqrt();
        let g = gamma.data()[ch].to_f64().unwrap();

        let mut s1 = 0.0f64;
        let mut s2 = 0.0f64;
        for b in 0..n {
            let off = (b * c + ch) * h * w;
            for i in off..off + h * w {
                let d = dyd[i].to_f64().unwrap();
                s1 += d;
                s2 += d * (xd[i].to_f64().unwrap() - m) * inv;
            }
        }
        dbeta.data_mut()[ch] = sc(s1);
        dgamma.data_mut()[ch] = sc(s2);

        let k1 = s1 / per;
        let k2 = s2 / per;
        for b in 0..n {
            let off = (b * c + ch) * h * w;
            for i in off..off + h * w {
                let xh = (xd[i].to_f64().unwrap() - m) * inv;
                let d = dyd[i].to_f64().unwrap();
                dxd[i] = sc(g * inv * (d - k1 - xh * k2));
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn batchnorm_eval_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    assert_eq!(gamma.numel(), c);
    let xd = x.data();
    let mut y = Tensor::zeros(x.shape());
    let yd = y.data_mut();
    for ch in 0..c {
        let m = running_mean.data()[ch].to_f64().unwrap();
        let inv = 1.0 / (running_var.data()[ch].to_f64().unwrap() + eps).sqrt();
        let g = gamma.data()[ch].to_f64().unwrap();
        let be = beta.data()[ch].to_f64().unwrap();
        for b in 0..n {
            let off = (b * c + ch) * h * w;
            for i in off..off + h * w {
                yd[i] = sc((xd[i].to_f64().unwrap() - m) * inv * g + be);
            }
        }
    }
    y
}

pub fn relu6_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let six = sc::<T>(6.0);
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = v.max(T::zero()).min(six);
    }
    y
}

/// Gradient w.r.t. the pre-activation; zero outside the open interval (0, 6).
pub fn relu6_backward<T: Scalar>(pre: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    assert_eq!(pre.shape(), dy.shape());
    let six = sc::<T>(6.0);
    let mut dx = dy.clone();
    for (d, &p) in dx.data_mut().iter_mut().zip(pre.data()) {
        if p <= T::zero() || p >= six {
            *d = T::zero();
        }
    }
    dx
}

pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let per = (h * w) as f64;
    let xd = x.data();
    let mut y = Tensor::zeros(&[n, c]);
    let yd = y.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let plane = &xd[(b * c + ch) * h * w..][..h * w];
            let mut acc = 0.0f64;
            for &v in plane {
                acc += v.to_f64().unwrap();
            }
            yd[b * c + ch] = sc(acc / per);
        }
    }
    y
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c) = dy.dims2();
    let scale = sc::<T>(1.0 / (h * w) as f64);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let dxd = dx.data_mut();
    for b in 0..n {
        for ch in 0..c {
            let g = dy.data()[b * c + ch] * scale;
            let off = (b * c + ch) * h * w;
            for v in &mut dxd[off..off + h * w] {
                *v = g;
            }
        }
    }
    dx
}

pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, f) = x.dims2();
    let (l, wf) = w.dims2();
    assert_eq!(f, wf, "linear weight expects {wf} features, input has {f}");
    assert_eq!(b.numel(), l);
    let mut y = Tensor::zeros(&[n, l]);
    let yd = y.data_mut();
    for bi in 0..n {
        let xrow = &x.data()[bi * f..][..f];
        for li in 0..l {
            let wrow = &w.data()[li * f..][..f];
            let mut acc = T::zero();
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc = acc + *xv * *wv;
            }
            yd[bi * l + li] = acc + b.data()[li];
        }
    }
    y
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, f) = x.dims2();
    let (l, _) = w.dims2();
    assert_eq!(dy.shape(), &[n, l]);
    let mut dx = Tensor::zeros(&[n, f]);
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[l]);
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    let dbd = db.data_mut();
    for bi in 0..n {
        let xrow = &x.data()[bi * f..][..f];
        for li in 0..l {
            let g = dy.data()[bi * l + li];
            dbd[li] = dbd[li] + g;
            let wrow = &w.data()[li * f..][..f];
            let dwrow = &mut dwd[li * f..][..f];
            let dxrow = &mut dxd[bi * f..][..f];
            for i in 0..f {
                dxrow[i] = dxrow[i] + g * wrow[i];
                dwrow[i] = dwrow[i] + g * xrow[i];
            }
        }
    }
    (dx, dw, db)
}

/// Numerically stable logistic function, elementwise.
pub fn sigmoid<T: Scalar>(z: &Tensor<T>) -> Tensor<T> {
    let mut y = z.clone();
    for v in y.data_mut() {
        *v = sigmoid_scalar(*v);
    }
    y
}

pub fn sigmoid_scalar<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(shape, data)
    }

    /// Reference convolution: explicit padded copy, plain quintuple loop.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: (usize, usize), pad: (usize, usize)) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4();
        let (co, _, kh, kw) = w.dims4();
        let hp = h + 2 * pad.0;
        let wp = wd + 2 * pad.1;
        let mut padded = vec![0.0f64; n * ci * hp * wp];
        for b in 0..n {
            for c in 0..ci {
                for y in 0..h {
                    for xx in 0..wd {
                        padded[((b * ci + c) * hp + y + pad.0) * wp + xx + pad.1] =
                            x.data()[((b * ci + c) * h + y) * wd + xx];
                    }
                }
            }
        }
        let ho = (hp - kh) / stride.0 + 1;
        let wo = (wp - kw) / stride.1 + 1;
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        for b in 0..n {
            for oc in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = oy * stride.0 + ky;
                                    let ix = ox * stride.1 + kx;
                                    acc += padded[((b * ci + ic) * hp + iy) * wp + ix]
                                        * w.data()[((oc * ci + ic) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out.data_mut()[((b * co + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for (stride, pad) in [((1, 1), (0, 0)), ((1, 1), (1, 1)), ((2, 2), (1, 1)), ((2, 1), (1, 0))] {
            let x = rand_tensor(&[2, 3, 7, 6], &mut rng);
            let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
            let got = conv2d_forward(&x, &w, stride, pad).unwrap();
            let want = conv_naive(&x, &w, stride, pad);
            assert_eq!(got.shape(), want.shape(), "stride {stride:?} pad {pad:?}");
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "stride {stride:?} pad {pad:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_hand_example() {
        // 1x1x3x3 ramp, single 2x2 kernel of ones, no padding: each output
        // is the sum of a 2x2 neighborhood.
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0; 4]);
        let y = conv2d_forward(&x, &w, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv_rejects_too_small_input() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, (1, 1), (0, 0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn depthwise_matches_blockdiagonal_full_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let c = 3;
        let x = rand_tensor(&[2, c, 6, 5], &mut rng);
        let w = rand_tensor(&[c, 1, 3, 3], &mut rng);
        // Equivalent full conv: out channel i reads only in channel i.
        let mut full = Tensor::zeros(&[c, c, 3, 3]);
        for ch in 0..c {
            for k in 0..9 {
                full.data_mut()[(ch * c + ch) * 9 + k] = w.data()[ch * 9 + k];
            }
        }
        for (stride, pad) in [((1, 1), (1, 1)), ((2, 2), (1, 1))] {
            let got = depthwise_forward(&x, &w, stride, pad).unwrap();
            let want = conv2d_forward(&x, &full, stride, pad).unwrap();
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batchnorm_train_statistics_and_running_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let x = rand_tensor(&[4, 2, 3, 3], &mut rng);
        let gamma = Tensor::from_vec(&[2], vec![1.5, 0.5]);
        let beta = Tensor::from_vec(&[2], vec![0.1, -0.2]);
        let mut rm = Tensor::from_vec(&[2], vec![0.0, 0.0]);
        let mut rv = Tensor::from_vec(&[2], vec![1.0, 1.0]);
        let (y, stats) = batchnorm_train_forward(&x, &gamma, &beta, &mut rm, &mut rv, 0.1, 1e-5);

        let per = 4 * 3 * 3;
        for ch in 0..2 {
            let mut vals = Vec::new();
            for b in 0..4 {
                for i in 0..9 {
                    vals.push(x.data()[(b * 2 + ch) * 9 + i]);
                }
            }
            let m: f64 = vals.iter().sum::<f64>() / per as f64;
            let v: f64 = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / per as f64;
            assert!((stats.mean[ch] - m).abs() < 1e-12);
            assert!((stats.var[ch] - v).abs() < 1e-12);
            assert!((rm.data()[ch] - 0.1 * m).abs() < 1e-12);
            let unbiased = v * per as f64 / (per - 1) as f64;
            assert!((rv.data()[ch] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);

            // Normalized output matches the definition elementwise.
            let g = gamma.data()[ch];
            let be = beta.data()[ch];
            for b in 0..4 {
                for i in 0..9 {
                    let idx = (b * 2 + ch) * 9 + i;
                    let want = (x.data()[idx] - m) / (v + 1e-5).sqrt() * g + be;
                    assert!((y.data()[idx] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batchnorm_single_element_skips_running_var() {
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0f64]);
        let gamma = Tensor::from_vec(&[1], vec![1.0]);
        let beta = Tensor::from_vec(&[1], vec![0.0]);
        let mut rm = Tensor::from_vec(&[1], vec![0.0]);
        let mut rv = Tensor::from_vec(&[1], vec![1.0]);
        let (_, stats) = batchnorm_train_forward(&x, &gamma, &beta, &mut rm, &mut rv, 0.1, 1e-5);
        assert_eq!(stats.var[0], 0.0);
        assert!((rm.data()[0] - 0.3).abs() < 1e-12);
        assert_eq!(rv.data()[0], 1.0);
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0f64, 3.0]);
        let gamma = Tensor::from_vec(&[1], vec![2.0]);
        let beta = Tensor::from_vec(&[1], vec![1.0]);
        let rm = Tensor::from_vec(&[1], vec![1.0]);
        let rv = Tensor::from_vec(&[1], vec![4.0]);
        let y = batchnorm_eval_forward(&x, &gamma, &beta, &rm, &rv, 0.0);
        assert!((y.data()[0] - 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn relu6_clamps_both_sides() {
        let x = Tensor::from_vec(&[5], vec![-1.0f32, 0.0, 3.0, 6.0, 9.0]);
        let y = relu6_forward(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 3.0, 6.0, 6.0]);
        let dy = Tensor::from_vec(&[5], vec![1.0f32; 5]);
        let dx = relu6_backward(&x, &dy);
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_means_and_spreads() {
        let x = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0]);
        let y = global_avg_pool_forward(&x);
        assert_eq!(y.shape(), &[1, 2]);
        assert!((y.data()[0] - 2.5).abs() < 1e-12);
        assert!((y.data()[1] - 10.0).abs() < 1e-12);
        let dy = Tensor::from_vec(&[1, 2], vec![4.0f64, 8.0]);
        let dx = global_avg_pool_backward(&dy, 2, 2);
        assert!(dx.data().iter().take(4).all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(dx.data().iter().skip(4).all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn linear_matches_manual_matmul() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 0.5, -1.0, 2.0]);
        let w = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5]);
        let b = Tensor::from_vec(&[2], vec![0.25, -0.5]);
        let y = linear_forward(&x, &w, &b);
        assert_eq!(y.shape(), &[2, 2]);
        let want = [
            1.0 - 3.0 + 0.25,
            2.0 + 2.0 + 1.5 - 0.5,
            0.5 - 2.0 + 0.25,
            1.0 - 1.0 + 1.0 - 0.5,
        ];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let z = Tensor::from_vec(&[4], vec![-500.0f32, 0.0, 500.0, 4.0]);
        let y = sigmoid(&z);
        assert_eq!(y.data()[0], 0.0);
        assert_eq!(y.data()[1], 0.5);
        assert_eq!(y.data()[2], 1.0);
        assert!((y.data()[3] - 0.98201376).abs() < 1e-6);
        assert!(y.all_finite());
    }
}
