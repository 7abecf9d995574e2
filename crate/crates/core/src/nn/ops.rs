//! Layer kernels. The batched model calls the per-sample `*_sample` routines;
//! the public single-sample wrappers exist for direct use and testing.

use rand::Rng;

use super::{Mode, NnError, Tensor};

/// `c[m x n] = beta * c + a[m x k] . b[k x n]`, with `a` and `b` addressed by
/// (row stride, column stride) and `c` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every index the kernel touches inside
    // the three slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Patch matrix for a 3x3 same-padded convolution: row `y * w + x` holds the
/// zero-padded neighbourhood of pixel `(y, x)` ordered `(ky, kx, channel)`.
fn im2col3x3(x: &[f64], h: usize, w: usize, c: usize, cols: &mut [f64]) {
    let row_len = 9 * c;
    for y in 0..h {
        for xx in 0..w {
            let row = &mut cols[(y * w + xx) * row_len..][..row_len];
            for ky in 0..3 {
                let iy = y as isize + ky as isize - 1;
                for kx in 0..3 {
                    let ix = xx as isize + kx as isize - 1;
                    let dst = &mut row[(ky * 3 + kx) * c..][..c];
                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                        dst.fill(0.0);
                    } else {
                        let src = (iy as usize * w + ix as usize) * c;
                        dst.copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 3x3 cross-correlation plus bias, no activation.
/// `x` is `[h][w][cin]`, `weights` is `[3][3][cin][cout]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_forward_sample(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weights: &[f64],
    bias: &[f64],
    cout: usize,
    out: &mut [f64],
) {
    let k = 9 * cin;
    let mut cols = vec![0.0; h * w * k];
    im2col3x3(x, h, w, cin, &mut cols);
    for px in out.chunks_exact_mut(cout) {
        px.copy_from_slice(bias);
    }
    gemm(h * w, k, cout, &cols, (k, 1), weights, (cout, 1), 1.0, out);
}

/// Gradients of the pre-activation conv output `dpre` with respect to the
/// weights (accumulated into `dw`, `db`) and optionally the input.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward_sample(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    weights: &[f64],
    cout: usize,
    dpre: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let k = 9 * cin;
    let hw = h * w;
    let mut cols = vec![0.0; hw * k];
    im2col3x3(x, h, w, cin, &mut cols);
    // dw[k x cout] += cols^T . dpre
    gemm(k, hw, cout, &cols, (1, k), dpre, (cout, 1), 1.0, dw);
    for px in dpre.chunks_exact(cout) {
        for (d, g) in db.iter_mut().zip(px) {
            *d += g;
        }
    }
    if let Some(dx) = dx {
        // dcols[hw x k] = dpre . weights^T, then scatter back onto the input.
        gemm(hw, cout, k, dpre, (cout, 1), weights, (1, cout), 0.0, &mut cols);
        dx.fill(0.0);
        for y in 0..h {
            for xx in 0..w {
                let row = &cols[(y * w + xx) * k..][..k];
                for ky in 0..3 {
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = xx as isize + kx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = &mut dx[(iy as usize * w + ix as usize) * cin..][..cin];
                        for (d, g) in dst.iter_mut().zip(&row[(ky * 3 + kx) * cin..][..cin]) {
                            *d += g;
                        }
                    }
                }
            }
        }
    }
}

/// 3x3 same-padded convolution of one `[H][W][Cin]` image with
/// `[3][3][Cin][Cout]` weights and `[Cout]` bias. ReLU is left to the layer.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    let (&[h, wd, cin], &[3, 3, wcin, cout], &[bc]) = (x.shape(), w.shape(), b.shape()) else {
        return Err(NnError::Shape(format!(
            "conv2d expects [H,W,C], [3,3,Cin,Cout], [Cout]; got {:?}, {:?}, {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    };
    if wcin != cin || bc != cout {
        return Err(NnError::Shape(format!("conv2d channel mismatch: input {cin}, kernel {wcin}->{cout}, bias {bc}")));
    }
    let mut out = vec![0.0; h * wd * cout];
    conv3x3_forward_sample(x.data(), h, wd, cin, w.data(), b.data(), cout, &mut out);
    Tensor::new(vec![h, wd, cout], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Non-overlapping 2x2 pooling with stride 2; an odd trailing row or column
/// is dropped. For max pooling `argmax` receives, per output cell, the input
/// index of the first maximum in row-major window order.
pub(crate) fn pool_sample(
    x: &[f64],
    h: usize,
    w: usize,
    c: usize,
    mode: PoolMode,
    out: &mut [f64],
    mut argmax: Option<&mut [u32]>,
) {
    let (oh, ow) = (h / 2, w / 2);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let idx = [
                    ((2 * oy) * w + 2 * ox) * c + ch,
                    ((2 * oy) * w + 2 * ox + 1) * c + ch,
                    ((2 * oy + 1) * w + 2 * ox) * c + ch,
                    ((2 * oy + 1) * w + 2 * ox + 1) * c + ch,
                ];
                let o = (oy * ow + ox) * c + ch;
                match mode {
                    PoolMode::Avg => {
                        out[o] = 0.25 * (x[idx[0]] + x[idx[1]] + x[idx[2]] + x[idx[3]]);
                    }
                    PoolMode::Max => {
                        let mut best = idx[0];
                        for &i in &idx[1..] {
                            if x[i] > x[best] {
                                best = i;
                            }
                        }
                        out[o] = x[best];
                        if let Some(am) = argmax.as_deref_mut() {
                            am[o] = best as u32;
                        }
                    }
                }
            }
        }
    }
}

pub fn pool2d_forward(x: &Tensor, mode: PoolMode) -> Result<Tensor, NnError> {
    let &[h, w, c] = x.shape() else {
        return Err(NnError::Shape(format!("pool expects [H,W,C], got {:?}", x.shape())));
    };
    if h < 2 || w < 2 {
        return Err(NnError::Shape(format!("pool needs at least 2x2 input, got {h}x{w}")));
    }
    let mut out = vec![0.0; (h / 2) * (w / 2) * c];
    pool_sample(x.data(), h, w, c, mode, &mut out, None);
    Tensor::new(vec![h / 2, w / 2, c], out)
}

/// Inverted-dropout keep mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub(crate) fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let scale = 1.0 / (1.0 - rate);
    (0..len).map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale }).collect()
}

/// Dropout with inverted scaling in train mode; identity in infer mode or
/// when `rate == 0`.
pub fn dropout<R: Rng + ?Sized>(x: &Tensor, rate: f64, mode: Mode, rng: &mut R) -> Tensor {
    if mode == Mode::Infer || rate == 0.0 {
        return x.clone();
    }
    let mask = dropout_mask(x.len(), rate, rng);
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// `y = x . w + b` for `x: [n]`, `w: [n][m]`, `b: [m]`.
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, NnError> {
    let (&[n], &[wn, m], &[bm]) = (x.shape(), w.shape(), b.shape()) else {
        return Err(NnError::Shape(format!(
            "dense expects [n], [n,m], [m]; got {:?}, {:?}, {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    };
    if wn != n || bm != m {
        return Err(NnError::Shape(format!("dense mismatch: input {n}, weights {wn}x{m}, bias {bm}")));
    }
    let mut out = b.data().to_vec();
    gemm(1, n, m, x.data(), (n, 1), w.data(), (m, 1), 1.0, &mut out);
    Tensor::new(vec![m], out)
}

/// Running statistics and hyperparameters of a batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(units: usize, momentum: f64, epsilon: f64) -> Self {
        Self {
            gamma: vec![1.0; units],
            beta: vec![0.0; units],
            running_mean: vec![0.0; units],
            running_var: vec![1.0; units],
            momentum,
            epsilon,
        }
    }
}

/// Per-unit batch statistics: `(mean, biased variance)`.
pub(crate) fn batch_moments(x: &[f64], batch: usize, units: usize) -> (Vec<f64>, Vec<f64>) {
    let n = batch as f64;
    let mut mean = vec![0.0; units];
    for row in x.chunks_exact(units) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; units];
    for row in x.chunks_exact(units) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

/// Batch normalization of `x: [batch][units]`. Train mode normalizes by the
/// batch moments and folds them into the running statistics
/// (`running = momentum * running + (1 - momentum) * batch`); infer mode uses
/// the running statistics.
pub fn batchnorm_forward(x: &Tensor, state: &mut BatchNormState, mode: Mode) -> Result<Tensor, NnError> {
    let &[batch, units] = x.shape() else {
        return Err(NnError::Shape(format!("batchnorm expects [batch, units], got {:?}", x.shape())));
    };
    if units != state.gamma.len() {
        return Err(NnError::Shape(format!("batchnorm has {} units, input {units}", state.gamma.len())));
    }
    let (mean, var) = match mode {
        Mode::Train => {
            if batch < 2 {
                return Err(NnError::BatchTooSmall(batch));
            }
            let (mean, var) = batch_moments(x.data(), batch, units);
            for j in 0..units {
                state.running_mean[j] = state.momentum * state.running_mean[j] + (1.0 - state.momentum) * mean[j];
                state.running_var[j] = state.momentum * state.running_var[j] + (1.0 - state.momentum) * var[j];
            }
            (mean, var)
        }
        Mode::Infer => (state.running_mean.clone(), state.running_var.clone()),
    };
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(units) {
        for j in 0..units {
            row[j] = state.gamma[j] * (row[j] - mean[j]) / (var[j] + state.epsilon).sqrt() + state.beta[j];
        }
    }
    Tensor::new(vec![batch, units], out)
}

/// Max-subtracted softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
