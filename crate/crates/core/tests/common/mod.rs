//! Independent reference implementations shared by the integration suites.
//! Nothing here calls into the code paths it is used to check.

#![allow(dead_code)]

use liftrisk::nn::{LayerSpec, Model, Pass, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Naive same-padded 3x3 cross-correlation, nested loops over every index.
pub fn conv_oracle(x: &[f64], h: usize, w: usize, cin: usize, k: &[f64], b: &[f64], cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w * cout];
    for y in 0..h {
        for xx in 0..w {
            for co in 0..cout {
                let mut acc = b[co];
                for ky in 0..3 {
                    for kx in 0..3 {
                        for ci in 0..cin {
                            let iy = y as i64 + ky as i64 - 1;
                            let ix = xx as i64 + kx as i64 - 1;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                continue;
                            }
                            let xv = x[(iy as usize * w + ix as usize) * cin + ci];
                            let kv = k[((ky * 3 + kx) * cin + ci) * cout + co];
                            acc += xv * kv;
                        }
                    }
                }
                out[(y * w + xx) * cout + co] = acc;
            }
        }
    }
    out
}

pub fn dense_oracle(x: &[f64], w: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    (0..m).map(|j| b[j] + x.iter().enumerate().map(|(i, xi)| xi * w[i * m + j]).sum::<f64>()).collect()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn onehot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * classes + l] = 1.0;
    }
    t
}

/// Mean cross-entropy plus the L2 penalty, evaluated from a fresh train-mode
/// forward pass. The dropout generator is reseeded so every evaluation draws
/// the same masks.
pub fn training_loss(model: &Model, x: &Tensor, y: &Tensor, dropout_seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let trace = model.forward(x, Pass::Train(&mut rng)).unwrap();
    let k = y.shape()[1];
    let n = y.batch() as f64;
    let mut ce = 0.0;
    for (p, t) in trace.probs.data().chunks(k).zip(y.data().chunks(k)) {
        for (pi, ti) in p.iter().zip(t) {
            if *ti > 0.0 {
                ce -= ti * pi.ln();
            }
        }
    }
    let lambda = match model.specs().last() {
        Some(LayerSpec::SoftmaxOutput { l2_lambda, .. }) => *l2_lambda,
        _ => unreachable!(),
    };
    ce / n + lambda * model.output_weights().data().iter().map(|w| w * w).sum::<f64>()
}

/// Relative error with a floor on the denominator so that gradients that
/// are zero up to rounding compare on an absolute scale.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
}

/// Compares analytic parameter gradients against central differences on up
/// to `samples` randomly chosen coordinates (all of them when fewer exist).
pub fn check_param_grads(model: &mut Model, x: &Tensor, y: &Tensor, samples: usize, seed: u64, h: f64) -> GradCheck {
    let dropout_seed = seed ^ 0xD0;
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let trace = model.forward(x, Pass::Train(&mut rng)).unwrap();
    let grads = model.loss_gradients(&trace, y).unwrap();
    let sizes: Vec<usize> = grads.iter().map(|g| g.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut coords: Vec<(usize, usize)> =
        sizes.iter().enumerate().flat_map(|(t, &n)| (0..n).map(move |i| (t, i))).collect();
    let mut pick = ChaCha8Rng::seed_from_u64(seed);
    if total > samples {
        coords = (0..samples).map(|_| coords[pick.random_range(0..total)]).collect();
    }
    let mut max_rel: f64 = 0.0;
    for &(t, i) in &coords {
        let orig = model.params()[t].data()[i];
        model.params_mut()[t].data_mut()[i] = orig + h;
        let up = training_loss(model, x, y, dropout_seed);
        model.params_mut()[t].data_mut()[i] = orig - h;
        let down = training_loss(model, x, y, dropout_seed);
        model.params_mut()[t].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        max_rel = max_rel.max(rel_err(grads[t].data()[i], numeric));
    }
    GradCheck { checked: coords.len(), max_rel }
}

/// Same check for the gradient with respect to the input batch.
pub fn check_input_grads(model: &Model, x: &Tensor, y: &Tensor, samples: usize, seed: u64, h: f64) -> GradCheck {
    let dropout_seed = seed ^ 0xD0;
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let trace = model.forward(x, Pass::Train(&mut rng)).unwrap();
    let n = y.batch() as f64;
    let dz: Vec<f64> = trace.probs.data().iter().zip(y.data()).map(|(p, t)| (p - t) / n).collect();
    let dz = Tensor::new(y.shape().to_vec(), dz).unwrap();
    let analytic = model.backward(&trace, &dz, true).unwrap().input.unwrap();
    let mut pick = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel: f64 = 0.0;
    let count = samples.min(x.len());
    for s in 0..count {
        let i = if x.len() > samples { pick.random_range(0..x.len()) } else { s };
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let up = training_loss(model, &xp, y, dropout_seed);
        xp.data_mut()[i] -= 2.0 * h;
        let down = training_loss(model, &xp, y, dropout_seed);
        max_rel = max_rel.max(rel_err(analytic.data()[i], (up - down) / (2.0 * h)));
    }
    GradCheck { checked: count, max_rel }
}

/// Direct evaluation of the binary Matthews correlation coefficient.
pub fn mcc_oracle(tp: f64, fn_: f64, fp: f64, tn: f64) -> f64 {
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / den
    }
}

/// Direct-form I evaluation of the cascade's overall difference equation,
/// obtained by multiplying out the section polynomials.
pub fn difference_equation_oracle(sections: &[liftrisk::signal::Biquad], x: &[f64]) -> Vec<f64> {
    let mut b = vec![1.0];
    let mut a = vec![1.0];
    let mul = |p: &[f64], q: &[f64]| {
        let mut r = vec![0.0; p.len() + q.len() - 1];
        for (i, pi) in p.iter().enumerate() {
            for (j, qj) in q.iter().enumerate() {
                r[i + j] += pi * qj;
            }
        }
        r
    };
    for s in sections {
        b = mul(&b, &[s.b0, s.b1, s.b2]);
        a = mul(&a, &[1.0, s.a1, s.a2]);
    }
    let mut y = vec![0.0; x.len()];
    for n in 0..x.len() {
        let mut acc = 0.0;
        for (k, bk) in b.iter().enumerate() {
            if n >= k {
                acc += bk * x[n - k];
            }
        }
        for (k, ak) in a.iter().enumerate().skip(1) {
            if n >= k {
                acc -= ak * y[n - k];
            }
        }
        y[n] = acc;
    }
    y
}
