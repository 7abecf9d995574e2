mod common;

use common::random_vec;
use liftrisk::nn::{Activation, LayerSpec, Model, Pass, Tensor};
use liftrisk::trainer::{
    adam_step, argmax, onehot, predict, train, AdamState, EarlyStopping, TrainConfig, TrainError, Verdict,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scalar Adam written out directly from the update rule.
struct ScalarAdam {
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    fn step(&mut self, theta: f64, g: f64, alpha: f64) -> f64 {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mhat = self.m / (1.0 - b1.powi(self.t));
        let vhat = self.v / (1.0 - b2.powi(self.t));
        theta - alpha * mhat / (vhat.sqrt() + eps)
    }
}

fn scalar_cfg(alpha: f64) -> TrainConfig {
    TrainConfig { learning_rate: alpha, ..TrainConfig::default() }
}

#[test]
fn adam_first_step_closed_form() {
    let mut theta = Tensor::from_vec(vec![0.0]);
    let mut st = AdamState::new(&[&[1]]);
    adam_step(&mut [&mut theta], &[Tensor::from_vec(vec![1.0])], &mut st, &scalar_cfg(1e-3)).unwrap();
    let want = -1e-3 / (1.0 + 1e-8);
    assert!((theta.data()[0] - want).abs() < 1e-12);
    assert!((theta.data()[0] + 9.99999e-4).abs() < 1e-9);
    assert_eq!(st.t, 1);
}

#[test]
fn adam_quadratic_matches_scalar_reference() {
    let cfg = scalar_cfg(0.1);
    let mut theta = Tensor::from_vec(vec![1.0]);
    let mut st = AdamState::new(&[&[1]]);
    let mut reference = ScalarAdam { m: 0.0, v: 0.0, t: 0 };
    let mut r = 1.0;
    for _ in 0..200 {
        let g = 2.0 * theta.data()[0];
        adam_step(&mut [&mut theta], &[Tensor::from_vec(vec![g])], &mut st, &cfg).unwrap();
        r = reference.step(r, 2.0 * r, 0.1);
        assert!((theta.data()[0] - r).abs() < 1e-14);
    }
    assert!(theta.data()[0].abs() < 0.05, "{}", theta.data()[0]);
}

#[test]
fn injected_loss_sequence_stops_and_restores() {
    let losses = [1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9];
    let mut es = EarlyStopping::new(3, 0.0);
    let mut last = 0;
    for (i, &l) in losses.iter().enumerate() {
        last = i + 1;
        if es.observe(last, l) == Verdict::Stop {
            break;
        }
    }
    assert_eq!(last, 5);
    assert_eq!(es.stopped_epoch(), Some(5));
    assert_eq!(es.best_epoch(), 2);
    assert_eq!(es.best_loss(), 0.9);
}

#[test]
fn min_delta_requires_strict_margin() {
    let mut es = EarlyStopping::new(2, 0.05);
    assert_eq!(es.observe(1, 1.0), Verdict::Improved);
    assert_eq!(es.observe(2, 0.96), Verdict::Wait);
    assert_eq!(es.observe(3, 0.94), Verdict::Improved);
    assert_eq!(es.observe(4, 0.94), Verdict::Wait);
    assert_eq!(es.observe(5, 0.93), Verdict::Stop);
    assert_eq!(es.best_epoch(), 3);
}

fn small_mlp(seed: u64, dropout: f64) -> Model {
    Model::new(
        &[6],
        vec![
            LayerSpec::Dense { units: 10, activation: Activation::Relu },
            LayerSpec::Dropout { rate: dropout },
            LayerSpec::SoftmaxOutput { classes: 3, l2_lambda: 1e-4 },
        ],
        seed,
    )
    .unwrap()
}

/// Three Gaussian-ish clusters in 6 dimensions.
fn cluster_data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        let c = i % 3;
        let mut x = random_vec(&mut rng, 6, 0.5);
        x[c] += 1.5;
        xs.push(x);
        ys.push(c);
    }
    (xs, ys)
}

fn cfg(max_epochs: usize) -> TrainConfig {
    TrainConfig { batch_size: 8, learning_rate: 1e-2, max_epochs, patience: 4, ..TrainConfig::default() }
}

#[test]
fn one_sample_loss_is_non_increasing() {
    let mut m = small_mlp(3, 0.0);
    let h = train(&mut m, &[vec![0.3, -0.2, 0.5, 0.1, 0.0, -0.4]], &[1], &cfg(5)).unwrap();
    let l: Vec<f64> = h.epochs.iter().map(|e| e.loss).collect();
    assert_eq!(l.len(), 5);
    assert!(l.windows(2).all(|w| w[1] <= w[0]), "{l:?}");
    assert!(l.windows(2).any(|w| w[1] < w[0]));
}

#[test]
fn training_learns_clusters_and_restores_best() {
    let (xs, ys) = cluster_data(60, 5);
    let mut m = small_mlp(9, 0.25);
    let h = train(&mut m, &xs, &ys, &cfg(200)).unwrap();
    let min = h.epochs.iter().map(|e| e.loss).fold(f64::INFINITY, f64::min);
    assert_eq!(h.best_loss(), min);
    assert_eq!(h.epochs[h.restored_from_epoch - 1].loss, min);
    assert!(h.epochs.iter().all(|e| e.loss >= h.best_loss()));
    assert!(h.epochs.last().unwrap().loss < h.epochs[0].loss);
    let acc = predict(&m, &xs).unwrap().iter().zip(&ys).filter(|(p, &y)| p.class == y).count() as f64 / xs.len() as f64;
    assert!(acc > 0.9, "{acc}");
    if let Some(s) = h.stopped_epoch {
        assert_eq!(s, h.epochs_run());
        assert_eq!(s - h.best_epoch, 4);
    }
}

#[test]
fn training_is_deterministic() {
    let (xs, ys) = cluster_data(30, 1);
    let run = || {
        let mut m = small_mlp(2, 0.25);
        let h = train(&mut m, &xs, &ys, &cfg(15)).unwrap();
        (h, m.params().iter().flat_map(|p| p.data().iter().map(|v| v.to_bits())).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn training_ignores_presentation_order() {
    let (xs, ys) = cluster_data(30, 4);
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.reverse();
    idx.swap(3, 17);
    let xs2: Vec<Vec<f64>> = idx.iter().map(|&i| xs[i].clone()).collect();
    let ys2: Vec<usize> = idx.iter().map(|&i| ys[i]).collect();
    let mut a = small_mlp(8, 0.25);
    let mut b = small_mlp(8, 0.25);
    let ha = train(&mut a, &xs, &ys, &cfg(10)).unwrap();
    let hb = train(&mut b, &xs2, &ys2, &cfg(10)).unwrap();
    assert_eq!(ha, hb);
    for (p, q) in a.params().iter().zip(b.params()) {
        assert_eq!(p.data(), q.data());
    }
}

#[test]
fn l2_term_alone_shrinks_output_weights() {
    // A zero input makes the data term's weight gradient vanish exactly.
    let lambda = 0.5;
    let mut m = Model::new(&[4], vec![LayerSpec::SoftmaxOutput { classes: 3, l2_lambda: lambda }], 13).unwrap();
    let x = Tensor::zeros(&[2, 4]);
    let y = onehot(&[0, 2], 3);
    let lr = 0.1;
    let mut prev = m.output_weights().sum_sq();
    assert!(prev > 0.0);
    let w0 = m.output_weights().data().to_vec();
    for step in 1..=20 {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trace = m.forward(&x, Pass::Train(&mut rng)).unwrap();
        let grads = m.loss_gradients(&trace, &y).unwrap();
        for (p, g) in m.params_mut().into_iter().zip(&grads) {
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
        let now = m.output_weights().sum_sq();
        assert!(now < prev);
        prev = now;
        let factor = (1.0 - 2.0 * lambda * lr).powi(step);
        for (w, w0) in m.output_weights().data().iter().zip(&w0) {
            assert!((w - w0 * factor).abs() < 1e-14);
        }
    }
}

#[test]
fn train_rejects_bad_input() {
    let mut m = small_mlp(1, 0.0);
    assert!(matches!(train(&mut m, &[], &[], &cfg(3)), Err(TrainError::EmptyDataset)));
    assert!(train(&mut m, &[vec![0.0; 6]], &[5], &cfg(3)).is_err());
    assert!(train(&mut m, &[vec![0.0; 6]], &[0, 1], &cfg(3)).is_err());
    let bad = TrainConfig { patience: 0, ..cfg(3) };
    assert!(matches!(train(&mut m, &[vec![0.0; 6]], &[0], &bad), Err(TrainError::Config(_))));
}

#[test]
fn argmax_examples() {
    assert_eq!(argmax(&[0.2, 0.3, 0.5]), 2);
    assert_eq!(argmax(&[0.5, 0.5, 0.0]), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn adam_matches_reference_on_random_gradients(gs in prop::collection::vec(-10.0f64..10.0, 1..30), alpha in 1e-4f64..0.5) {
        let cfg = scalar_cfg(alpha);
        let mut theta = Tensor::from_vec(vec![0.7]);
        let mut st = AdamState::new(&[&[1]]);
        let mut reference = ScalarAdam { m: 0.0, v: 0.0, t: 0 };
        let mut r = 0.7;
        for g in gs {
            adam_step(&mut [&mut theta], &[Tensor::from_vec(vec![g])], &mut st, &cfg).unwrap();
            r = reference.step(r, g, alpha);
            prop_assert!((theta.data()[0] - r).abs() < 1e-13);
        }
    }

    #[test]
    fn argmax_picks_first_maximum(p in prop::collection::vec(0u8..4, 1..8)) {
        let v: Vec<f64> = p.iter().map(|&x| x as f64).collect();
        let i = argmax(&v);
        prop_assert!(v.iter().all(|&x| x <= v[i]));
        prop_assert!(v[..i].iter().all(|&x| x < v[i]));
    }
}
