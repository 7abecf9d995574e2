use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::ops::{self, gemm, PoolMode};
use super::spec::{format_stack, Activation, LayerSpec};
use super::{Mode, NnError, Tensor};

/// How a forward pass runs. Training needs a random source for dropout.
pub enum Pass<'a> {
    Train(&'a mut dyn RngCore),
    Infer,
}

impl Pass<'_> {
    fn mode(&self) -> Mode {
        match self {
            Pass::Train(_) => Mode::Train,
            Pass::Infer => Mode::Infer,
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    spec: LayerSpec,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    params: Vec<Tensor>,
    /// Non-trainable state (batch-norm running mean and variance).
    state: Vec<Tensor>,
}

/// A sequential layer stack with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl PartialEq for Layer {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params && self.state == other.state
    }
}

enum Cache {
    Conv { input: Tensor, output: Tensor },
    Pool { argmax: Option<Vec<u32>> },
    Dropout { mask: Option<Vec<f64>> },
    Flatten,
    Dense { input: Tensor, output: Tensor },
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, moments: Option<(Vec<f64>, Vec<f64>)> },
    Softmax { input: Tensor },
}

/// Intermediates recorded by one forward pass, consumed by `backward`.
pub struct Trace {
    mode: Mode,
    caches: Vec<Cache>,
    pub logits: Tensor,
    pub probs: Tensor,
}

impl Trace {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

/// Parameter gradients in `Model::params` order, plus the input gradient
/// when requested.
pub struct Gradients {
    pub params: Vec<Tensor>,
    pub input: Option<Tensor>,
}

fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-limit..limit)).collect()).expect("shape")
}

impl Model {
    /// Validates that the stack composes on `input_shape` (per sample) and
    /// initializes weights Glorot-uniform from `seed`, biases to zero.
    pub fn new(input_shape: &[usize], specs: Vec<LayerSpec>, seed: u64) -> Result<Self, NnError> {
        let last = specs.len().checked_sub(1).ok_or_else(|| NnError::Spec("empty layer stack".into()))?;
        let softmaxes = specs.iter().filter(|s| matches!(s, LayerSpec::SoftmaxOutput { .. })).count();
        if softmaxes != 1 || !matches!(specs[last], LayerSpec::SoftmaxOutput { .. }) {
            return Err(NnError::Spec("stack needs exactly one softmax output, as the last layer".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let in_shape = shape.clone();
            let shape_err = |what: &str| NnError::Shape(format!("{spec} {what}, got input {in_shape:?}"));
            let (out_shape, params, state) = match &spec {
                LayerSpec::Conv2d { filters } => {
                    let &[h, w, c] = in_shape.as_slice() else { return Err(shape_err("needs [H,W,C]")) };
                    if *filters == 0 {
                        return Err(shape_err("needs at least one filter"));
                    }
                    let wt = glorot(&[3, 3, c, *filters], 9 * c, 9 * filters, &mut rng);
                    (vec![h, w, *filters], vec![wt, Tensor::zeros(&[*filters])], vec![])
                }
                LayerSpec::AvgPool | LayerSpec::MaxPool => {
                    let &[h, w, c] = in_shape.as_slice() else { return Err(shape_err("needs [H,W,C]")) };
                    if h < 2 || w < 2 {
                        return Err(shape_err("needs at least 2x2"));
                    }
                    (vec![h / 2, w / 2, c], vec![], vec![])
                }
                LayerSpec::Dropout { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(NnError::Spec(format!("dropout rate {rate} outside [0, 1)")));
                    }
                    (in_shape.clone(), vec![], vec![])
                }
                LayerSpec::Flatten => (vec![in_shape.iter().product()], vec![], vec![]),
                LayerSpec::Dense { units, .. } => {
                    let &[n] = in_shape.as_slice() else { return Err(shape_err("needs a flat input")) };
                    let wt = glorot(&[n, *units], n, *units, &mut rng);
                    (vec![*units], vec![wt, Tensor::zeros(&[*units])], vec![])
                }
                LayerSpec::BatchNorm { .. } => {
                    let &[n] = in_shape.as_slice() else { return Err(shape_err("needs a flat input")) };
                    (
                        vec![n],
                        vec![Tensor::filled(&[n], 1.0), Tensor::zeros(&[n])],
                        vec![Tensor::zeros(&[n]), Tensor::filled(&[n], 1.0)],
                    )
                }
                LayerSpec::SoftmaxOutput { classes, l2_lambda } => {
                    let &[n] = in_shape.as_slice() else { return Err(shape_err("needs a flat input")) };
                    if *l2_lambda < 0.0 || *classes < 2 {
                        return Err(NnError::Spec(format!("invalid softmax output `{spec}`")));
                    }
                    let wt = glorot(&[n, *classes], n, *classes, &mut rng);
                    (vec![*classes], vec![wt, Tensor::zeros(&[*classes])], vec![])
                }
            };
            shape = out_shape.clone();
            layers.push(Layer { spec, in_shape, out_shape, params, state });
        }
        Ok(Self { input_shape: input_shape.to_vec(), layers })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    /// Text form of the stack, as stored in checkpoints.
    pub fn spec_text(&self) -> String {
        format_stack(&self.input_shape, &self.specs())
    }

    /// Per-sample output shape of every layer, in order.
    pub fn shape_trace(&self) -> Vec<Vec<usize>> {
        self.layers.iter().map(|l| l.out_shape.clone()).collect()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().expect("non-empty").out_shape[0]
    }

    pub fn l2_lambda(&self) -> f64 {
        match self.layers.last().map(|l| &l.spec) {
            Some(LayerSpec::SoftmaxOutput { l2_lambda, .. }) => *l2_lambda,
            _ => unreachable!("validated at construction"),
        }
    }

    /// Weight matrix `[inputs][classes]` of the softmax output layer.
    pub fn output_weights(&self) -> &Tensor {
        &self.layers.last().expect("non-empty").params[0]
    }

    pub fn output_weights_mut(&mut self) -> &mut Tensor {
        &mut self.layers.last_mut().expect("non-empty").params[0]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Non-trainable tensors (batch-norm running statistics).
    pub fn state(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.state.iter()).collect()
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.state.iter_mut()).collect()
    }

    /// Runs the stack on `x: [batch, ..input_shape]`, recording intermediates.
    pub fn forward(&self, x: &Tensor, mut pass: Pass<'_>) -> Result<Trace, NnError> {
        if x.shape().len() != self.input_shape.len() + 1 || x.sample_shape() != self.input_shape.as_slice() {
            return Err(NnError::Shape(format!("model expects [batch, {:?}], got {:?}", self.input_shape, x.shape())));
        }
        let mode = pass.mode();
        let batch = x.batch();
        let mut act = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut logits = None;
        for layer in &self.layers {
            let out_len: usize = layer.out_shape.iter().product();
            let mut out_shape = vec![batch];
            out_shape.extend_from_slice(&layer.out_shape);
            let (next, cache) = match &layer.spec {
                LayerSpec::Conv2d { filters } => {
                    let &[h, w, cin] = layer.in_shape.as_slice() else { unreachable!() };
                    let (wt, bias) = (layer.params[0].data(), layer.params[1].data());
                    let in_len = h * w * cin;
                    let mut out = vec![0.0; batch * out_len];
                    out.par_chunks_mut(out_len).zip(act.data().par_chunks(in_len)).for_each(|(o, xi)| {
                        ops::conv3x3_forward_sample(xi, h, w, cin, wt, bias, *filters, o);
                        o.iter_mut().for_each(|v| *v = v.max(0.0));
                    });
                    let out = Tensor::new(out_shape, out)?;
                    (out.clone(), Cache::Conv { input: act, output: out })
                }
                LayerSpec::AvgPool | LayerSpec::MaxPool => {
                    let &[h, w, c] = layer.in_shape.as_slice() else { unreachable!() };
                    let pool = if layer.spec == LayerSpec::AvgPool { PoolMode::Avg } else { PoolMode::Max };
                    let in_len = h * w * c;
                    let mut out = vec![0.0; batch * out_len];
                    let argmax = match pool {
                        PoolMode::Avg => {
                            out.par_chunks_mut(out_len).zip(act.data().par_chunks(in_len)).for_each(|(o, xi)| {
                                ops::pool_sample(xi, h, w, c, pool, o, None);
                            });
                            None
                        }
                        PoolMode::Max => {
                            let mut am = vec![0u32; batch * out_len];
                            out.par_chunks_mut(out_len)
                                .zip(am.par_chunks_mut(out_len))
                                .zip(act.data().par_chunks(in_len))
                                .for_each(|((o, a), xi)| ops::pool_sample(xi, h, w, c, pool, o, Some(a)));
                            Some(am)
                        }
                    };
                    (Tensor::new(out_shape, out)?, Cache::Pool { argmax })
                }
                LayerSpec::Dropout { rate } => match &mut pass {
                    Pass::Train(rng) if *rate > 0.0 => {
                        let mask = ops::dropout_mask(act.len(), *rate, &mut **rng);
                        let data = act.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                        (Tensor::new(out_shape, data)?, Cache::Dropout { mask: Some(mask) })
                    }
                    _ => (act, Cache::Dropout { mask: None }),
                },
                LayerSpec::Flatten => (act.reshape(&out_shape)?, Cache::Flatten),
                LayerSpec::Dense { units, activation } => {
                    let n = layer.in_shape[0];
                    let mut out = Vec::with_capacity(batch * units);
                    for _ in 0..batch {
                        out.extend_from_slice(layer.params[1].data());
                    }
                    gemm(batch, n, *units, act.data(), (n, 1), layer.params[0].data(), (*units, 1), 1.0, &mut out);
                    if *activation == Activation::Relu {
                        out.iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                    let out = Tensor::new(out_shape, out)?;
                    (out.clone(), Cache::Dense { input: act, output: out })
                }
                LayerSpec::BatchNorm { epsilon, .. } => {
                    let units = layer.in_shape[0];
                    let (mean, var, moments) = match mode {
                        Mode::Train => {
                            if batch < 2 {
                                return Err(NnError::BatchTooSmall(batch));
                            }
                            let (m, v) = ops::batch_moments(act.data(), batch, units);
                            (m.clone(), v.clone(), Some((m, v)))
                        }
                        Mode::Infer => (layer.state[0].data().to_vec(), layer.state[1].data().to_vec(), None),
                    };
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
                    let (gamma, beta) = (layer.params[0].data(), layer.params[1].data());
                    let mut xhat = act.into_data();
                    let mut out = vec![0.0; xhat.len()];
                    for (xr, or) in xhat.chunks_exact_mut(units).zip(out.chunks_exact_mut(units)) {
                        for j in 0..units {
                            xr[j] = (xr[j] - mean[j]) * inv_std[j];
                            or[j] = gamma[j] * xr[j] + beta[j];
                        }
                    }
                    (Tensor::new(out_shape, out)?, Cache::BatchNorm { xhat, inv_std, moments })
                }
                LayerSpec::SoftmaxOutput { classes, .. } => {
                    let n = layer.in_shape[0];
                    let mut z = Vec::with_capacity(batch * classes);
                    for _ in 0..batch {
                        z.extend_from_slice(layer.params[1].data());
                    }
                    gemm(batch, n, *classes, act.data(), (n, 1), layer.params[0].data(), (*classes, 1), 1.0, &mut z);
                    let z = Tensor::new(out_shape.clone(), z)?;
                    let probs: Vec<f64> = z.data().chunks_exact(*classes).flat_map(ops::softmax).collect();
                    logits = Some(z);
                    (Tensor::new(out_shape, probs)?, Cache::Softmax { input: act })
                }
            };
            caches.push(cache);
            act = next;
        }
        Ok(Trace { mode, caches, logits: logits.expect("softmax is last"), probs: act })
    }

    /// Folds the batch moments recorded in a train-mode trace into the
    /// batch-norm running statistics.
    pub fn update_running_stats(&mut self, trace: &Trace) {
        for (layer, cache) in self.layers.iter_mut().zip(&trace.caches) {
            if let (LayerSpec::BatchNorm { momentum, .. }, Cache::BatchNorm { moments: Some((m, v)), .. }) =
                (&layer.spec, cache)
            {
                let momentum = *momentum;
                for (r, b) in layer.state[0].data_mut().iter_mut().zip(m) {
                    *r = momentum * *r + (1.0 - momentum) * b;
                }
                for (r, b) in layer.state[1].data_mut().iter_mut().zip(v) {
                    *r = momentum * *r + (1.0 - momentum) * b;
                }
            }
        }
    }

    /// Back-propagates `dlogits` (gradient with respect to the pre-softmax
    /// scores) through the recorded trace.
    pub fn backward(&self, trace: &Trace, dlogits: &Tensor, want_input: bool) -> Result<Gradients, NnError> {
        if dlogits.shape() != trace.logits.shape() {
            return Err(NnError::Shape(format!(
                "dlogits {:?} does not match logits {:?}",
                dlogits.shape(),
                trace.logits.shape()
            )));
        }
        let batch = dlogits.batch();
        let mut grad = dlogits.data().to_vec();
        let mut per_layer: Vec<Vec<Tensor>> = vec![Vec::new(); self.layers.len()];
        for (i, (layer, cache)) in self.layers.iter().zip(&trace.caches).enumerate().rev() {
            let need_dx = i > 0 || want_input;
            let in_len: usize = layer.in_shape.iter().product();
            let out_len: usize = layer.out_shape.iter().product();
            match (&layer.spec, cache) {
                (LayerSpec::SoftmaxOutput { classes, .. }, Cache::Softmax { input }) => {
                    let k = *classes;
                    let (n, dz) = (in_len, &grad);
                    let mut dw = vec![0.0; n * k];
                    gemm(n, batch, k, input.data(), (1, n), dz, (k, 1), 0.0, &mut dw);
                    let db = column_sums(dz, k);
                    let mut dx = vec![0.0; batch * n];
                    if need_dx {
                        gemm(batch, k, n, dz, (k, 1), layer.params[0].data(), (1, k), 0.0, &mut dx);
                    }
                    per_layer[i] = vec![Tensor::new(vec![n, k], dw)?, Tensor::new(vec![k], db)?];
                    grad = dx;
                }
                (LayerSpec::BatchNorm { .. }, Cache::BatchNorm { xhat, inv_std, moments }) => {
                    let units = in_len;
                    let gamma = layer.params[0].data();
                    let mut dgamma = vec![0.0; units];
                    let mut dbeta = vec![0.0; units];
                    for (dy, xh) in grad.chunks_exact(units).zip(xhat.chunks_exact(units)) {
                        for j in 0..units {
                            dgamma[j] += dy[j] * xh[j];
                            dbeta[j] += dy[j];
                        }
                    }
                    let mut dx = vec![0.0; grad.len()];
                    if moments.is_some() {
                        // Batch statistics depend on every sample in the batch.
                        let n = batch as f64;
                        for (row, (dy, xh)) in
                            dx.chunks_exact_mut(units).zip(grad.chunks_exact(units).zip(xhat.chunks_exact(units)))
                        {
                            for j in 0..units {
                                let dxhat = dy[j] * gamma[j];
                                row[j] =
                                    inv_std[j] / n * (n * dxhat - gamma[j] * dbeta[j] - xh[j] * gamma[j] * dgamma[j]);
                            }
                        }
                    } else {
                        for (row, dy) in dx.chunks_exact_mut(units).zip(grad.chunks_exact(units)) {
                            for j in 0..units {
                                row[j] = dy[j] * gamma[j] * inv_std[j];
                            }
                        }
                    }
                    per_layer[i] = vec![Tensor::new(vec![units], dgamma)?, Tensor::new(vec![units], dbeta)?];
                    grad = dx;
                }
                (LayerSpec::Dropout { .. }, Cache::Dropout { mask }) => {
                    if let Some(mask) = mask {
                        grad.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
                    }
                }
                (LayerSpec::Flatten, Cache::Flatten) => {}
                (LayerSpec::Dense { units, activation }, Cache::Dense { input, output }) => {
                    let (n, m) = (in_len, *units);
                    if *activation == Activation::Relu {
                        relu_backward(&mut grad, output.data());
                    }
                    let mut dw = vec![0.0; n * m];
                    gemm(n, batch, m, input.data(), (1, n), &grad, (m, 1), 0.0, &mut dw);
                    let db = column_sums(&grad, m);
                    let mut dx = vec![0.0; batch * n];
                    if need_dx {
                        gemm(batch, m, n, &grad, (m, 1), layer.params[0].data(), (1, m), 0.0, &mut dx);
                    }
                    per_layer[i] = vec![Tensor::new(vec![n, m], dw)?, Tensor::new(vec![m], db)?];
                    grad = dx;
                }
                (LayerSpec::AvgPool | LayerSpec::MaxPool, Cache::Pool { argmax }) => {
                    let &[h, w, c] = layer.in_shape.as_slice() else { unreachable!() };
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = vec![0.0; batch * in_len];
                    dx.par_chunks_mut(in_len).zip(grad.par_chunks(out_len)).enumerate().for_each(|(s, (d, g))| {
                        match argmax {
                            Some(am) => {
                                for (o, &src) in am[s * out_len..(s + 1) * out_len].iter().enumerate() {
                                    d[src as usize] += g[o];
                                }
                            }
                            None => {
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        for ch in 0..c {
                                            let gv = 0.25 * g[(oy * ow + ox) * c + ch];
                                            for (dy, dxo) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                                d[((2 * oy + dy) * w + 2 * ox + dxo) * c + ch] += gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                    grad = dx;
                }
                (LayerSpec::Conv2d { filters }, Cache::Conv { input, output }) => {
                    let &[h, w, cin] = layer.in_shape.as_slice() else { unreachable!() };
                    let cout = *filters;
                    relu_backward(&mut grad, output.data());
                    let wt = layer.params[0].data();
                    let wlen = wt.len();
                    let mut dx = vec![0.0; if need_dx { batch * in_len } else { 0 }];
                    let partials: Vec<(Vec<f64>, Vec<f64>)> = if need_dx {
                        dx.par_chunks_mut(in_len)
                            .zip(input.data().par_chunks(in_len))
                            .zip(grad.par_chunks(out_len))
                            .map(|((d, xi), g)| {
                                let (mut dw, mut db) = (vec![0.0; wlen], vec![0.0; cout]);
                                ops::conv3x3_backward_sample(xi, h, w, cin, wt, cout, g, &mut dw, &mut db, Some(d));
                                (dw, db)
                            })
                            .collect()
                    } else {
                        input
                            .data()
                            .par_chunks(in_len)
                            .zip(grad.par_chunks(out_len))
                            .map(|(xi, g)| {
                                let (mut dw, mut db) = (vec![0.0; wlen], vec![0.0; cout]);
                                ops::conv3x3_backward_sample(xi, h, w, cin, wt, cout, g, &mut dw, &mut db, None);
                                (dw, db)
                            })
                            .collect()
                    };
                    // Fixed reduction order keeps results independent of thread count.
                    let (mut dw, mut db) = (vec![0.0; wlen], vec![0.0; cout]);
                    for (pw, pb) in &partials {
                        dw.iter_mut().zip(pw).for_each(|(a, b)| *a += b);
                        db.iter_mut().zip(pb).for_each(|(a, b)| *a += b);
                    }
                    per_layer[i] =
                        vec![Tensor::new(layer.params[0].shape().to_vec(), dw)?, Tensor::new(vec![cout], db)?];
                    grad = dx;
                }
                _ => unreachable!("cache recorded for a different layer kind"),
            }
        }
        let input = if want_input {
            let mut shape = vec![batch];
            shape.extend_from_slice(&self.input_shape);
            Some(Tensor::new(shape, grad)?)
        } else {
            None
        };
        Ok(Gradients { params: per_layer.into_iter().flatten().collect(), input })
    }

    /// Gradients of mean categorical cross-entropy plus the L2 penalty on the
    /// output weights. Requires a train-mode trace.
    pub fn loss_gradients(&self, trace: &Trace, onehot: &Tensor) -> Result<Vec<Tensor>, NnError> {
        if trace.mode != Mode::Train {
            return Err(NnError::NoTrainForward);
        }
        if onehot.shape() != trace.probs.shape() {
            return Err(NnError::Shape(format!(
                "labels {:?} do not match outputs {:?}",
                onehot.shape(),
                trace.probs.shape()
            )));
        }
        let n = onehot.batch() as f64;
        let dz: Vec<f64> = trace.probs.data().iter().zip(onehot.data()).map(|(p, y)| (p - y) / n).collect();
        let dz = Tensor::new(onehot.shape().to_vec(), dz)?;
        let mut grads = self.backward(trace, &dz, false)?.params;
        let lambda = self.l2_lambda();
        let w_index = grads.len() - 2;
        if lambda > 0.0 {
            for (g, w) in grads[w_index].data_mut().iter_mut().zip(self.output_weights().data()) {
                *g += 2.0 * lambda * w;
            }
        }
        Ok(grads)
    }
}

fn relu_backward(grad: &mut [f64], output: &[f64]) {
    for (g, y) in grad.iter_mut().zip(output) {
        if *y <= 0.0 {
            *g = 0.0;
        }
    }
}

fn column_sums(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in x.chunks_exact(cols) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}
