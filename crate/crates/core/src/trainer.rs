//! Loss, Adam, early stopping and the minibatch training loop.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::nn::{Model, NnError, Pass, Tensor};

/// Floor applied to probabilities inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Rows per inference batch in `predict`.
const PREDICT_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("{inputs} inputs but {labels} labels")]
    LengthMismatch { inputs: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("loss became non-finite ({loss}) in epoch {epoch}")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            l2_lambda: 1e-5,
            learning_rate: 1e-3,
            dropout_rate: 0.25,
            batch_size: 32,
            patience: 10,
            min_delta: 0.0,
            max_epochs: 500,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::Config(msg.to_string()));
        if !(self.l2_lambda >= 0.0) {
            return bad("l2_lambda must be >= 0");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be >= 0");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("adam epsilon must be > 0");
        }
        Ok(())
    }
}

/// Mean categorical cross-entropy over the batch plus `lambda` times the
/// squared norm of the model's output weights.
pub fn loss(probs: &Tensor, onehot: &Tensor, model: &Model, lambda: f64) -> f64 {
    let k = onehot.shape().last().copied().unwrap_or(1).max(1);
    let n = onehot.len() / k;
    let mut ce = 0.0;
    for (p, y) in probs.data().chunks(k).zip(onehot.data().chunks(k)) {
        for (pi, yi) in p.iter().zip(y) {
            if *yi != 0.0 {
                ce -= yi * pi.max(PROB_FLOOR).ln();
            }
        }
    }
    let data = if n == 0 { 0.0 } else { ce / n as f64 };
    let l2 = if lambda == 0.0 { 0.0 } else { lambda * model.output_weights().sum_sq() };
    data + l2
}

pub fn onehot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (row, &l) in t.data_mut().chunks_mut(classes).zip(labels) {
        row[l] = 1.0;
    }
    t
}

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: &[&[usize]]) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn for_model(model: &Model) -> Self {
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        Self::new(&refs)
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::Shape(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ))
        .into());
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(NnError::Shape(format!("param {i}: {:?} vs grad {:?}", p.shape(), g.shape())).into());
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            p[j] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Wait,
    Stop,
}

/// Patience-based stopping on a monitored loss. Epochs are 1-based.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    best_epoch: usize,
    wait: usize,
    stopped_epoch: Option<usize>,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { patience, min_delta, best: f64::INFINITY, best_epoch: 0, wait: 0, stopped_epoch: None }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.best_epoch = epoch;
            self.wait = 0;
            return Verdict::Improved;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.stopped_epoch = Some(epoch);
            Verdict::Stop
        } else {
            Verdict::Wait
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    pub fn stopped_epoch(&self) -> Option<usize> {
        self.stopped_epoch
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Epoch at which patience ran out, `None` when the epoch cap was hit.
    pub stopped_epoch: Option<usize>,
    pub restored_from_epoch: usize,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.epochs.len()
    }

    pub fn best_loss(&self) -> f64 {
        self.epochs[self.restored_from_epoch - 1].loss
    }

    /// `epoch,loss,accuracy` rows; `comments` become leading `# ` lines.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut s = String::new();
        for c in comments {
            let _ = writeln!(s, "# {c}");
        }
        s.push_str("epoch,loss,accuracy\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:e},{:e}", e.epoch, e.loss, e.accuracy);
        }
        s
    }
}

fn check_labels(inputs: usize, labels: &[usize], classes: usize) -> Result<(), TrainError> {
    if inputs != labels.len() {
        return Err(TrainError::LengthMismatch { inputs, labels: labels.len() });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(TrainError::Label { label, classes });
    }
    Ok(())
}

/// Sample order independent of how the caller listed them.
fn canonical_order(inputs: &[Vec<f64>], labels: &[usize]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..inputs.len()).collect();
    idx.sort_by(|&a, &b| {
        labels[a].cmp(&labels[b]).then_with(|| {
            inputs[a]
                .iter()
                .zip(&inputs[b])
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    idx
}

/// Minibatch boundaries; a trailing batch of one sample is folded into the
/// previous batch so batch normalization always sees at least two.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().map(|b| b.len()) == Some(1) {
        let n = out.len();
        let start = order.len() - out[n - 2].len() - 1;
        out.truncate(n - 2);
        out.push(&order[start..]);
    }
    out
}

/// Trains `model` in place with Adam and early stopping on the epoch's
/// training loss, then restores the best-loss parameters.
pub fn train(
    model: &mut Model,
    inputs: &[Vec<f64>],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let classes = model.classes();
    check_labels(inputs.len(), labels, classes)?;
    let sample_shape = model.input_shape().to_vec();

    let mut order = canonical_order(inputs, labels);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_D80F_0000_0001);
    let mut adam = AdamState::for_model(model);
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut best = model.clone();
    let mut records = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in batches(&order, cfg.batch_size) {
            let rows: Vec<&[f64]> = batch.iter().map(|&i| inputs[i].as_slice()).collect();
            let x = Tensor::stack(&rows, &sample_shape)?;
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let y = onehot(&batch_labels, classes);
            let trace = model.forward(&x, Pass::Train(&mut dropout_rng))?;
            let l = loss(&trace.probs, &y, model, model.l2_lambda());
            if !l.is_finite() {
                return Err(TrainError::Diverged { epoch, loss: l });
            }
            loss_sum += l * batch.len() as f64;
            correct += trace.probs.data().chunks(classes).zip(&batch_labels).filter(|(p, &t)| argmax(p) == t).count();
            let grads = model.loss_gradients(&trace, &y)?;
            model.update_running_stats(&trace);
            adam_step(&mut model.params_mut(), &grads, &mut adam, cfg)?;
        }
        let epoch_loss = loss_sum / inputs.len() as f64;
        let accuracy = correct as f64 / inputs.len() as f64;
        log::debug!("epoch {epoch}: loss {epoch_loss:.6} accuracy {accuracy:.4}");
        records.push(EpochRecord { epoch, loss: epoch_loss, accuracy });
        if model.params().iter().any(|p| !p.all_finite()) {
            return Err(TrainError::Diverged { epoch, loss: f64::NAN });
        }
        match stopper.observe(epoch, epoch_loss) {
            Verdict::Improved => best = model.clone(),
            Verdict::Wait => {}
            Verdict::Stop => break,
        }
    }
    *model = best;
    Ok(TrainHistory {
        epochs: records,
        best_epoch: stopper.best_epoch(),
        stopped_epoch: stopper.stopped_epoch(),
        restored_from_epoch: stopper.best_epoch(),
    })
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate().skip(1) {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub probs: Vec<f64>,
}

/// Inference-mode class predictions.
pub fn predict(model: &Model, inputs: &[Vec<f64>]) -> Result<Vec<Prediction>, TrainError> {
    let shape = model.input_shape().to_vec();
    let k = model.classes();
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(PREDICT_CHUNK) {
        let rows: Vec<&[f64]> = chunk.iter().map(|v| v.as_slice()).collect();
        let trace = model.forward(&Tensor::stack(&rows, &shape)?, Pass::Infer)?;
        for p in trace.probs.data().chunks(k) {
            out.push(Prediction { class: argmax(p), probs: p.to_vec() });
        }
    }
    Ok(out)
}
