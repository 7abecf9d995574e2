//! End-to-end wiring: configuration file, preprocessing chain, checkpoints,
//! and the train/evaluate runs shared by the CLI and the test suites.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::imaging::{image_height, to_channel_matrix, wrap_image, EncodedImage, ImagingError};
use crate::metrics::{confusion, MetricsError, MetricsReport};
use crate::nn::{parse_stack, ArchSize, Model, ModelPreset, NnError, Tensor};
use crate::signal::{
    design_bandpass, filter_trial, fit_scaler, pad_or_truncate, BandpassFilter, ChannelScaler, ScalerMode, SignalError,
    TrialRecording, AXES, CHANNELS,
};
use crate::synthdata::{split_dataset, DataError, Manifest, RiskLabel, Split};
use crate::trainer::{predict, train, Prediction, TrainConfig, TrainError, TrainHistory};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"LRISK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: {msg}")]
    ConfigSyntax { line: usize, msg: String },
    #[error("invalid value for `{key}`: {msg}")]
    ConfigValue { key: String, msg: String },
    #[error("image width mismatch: checkpoint uses {checkpoint}, config requests {config}")]
    WidthMismatch { checkpoint: usize, config: usize },
    #[error("trial sampled at {got} Hz, preprocessing was fitted at {expected} Hz")]
    SampleRate { got: f64, expected: f64 },
    #[error("no {0} trials")]
    EmptySplit(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub filter_order: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    /// Analysis window length in frames.
    pub frames: usize,
    pub scaler: ScalerMode,
    pub image_width: usize,
    pub preset: ModelPreset,
    pub arch: ArchSize,
    pub train: TrainConfig,
    pub train_fraction: f64,
    /// Run locations; not part of the embedded configuration text.
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            filter_order: 2,
            low_hz: 2.0,
            high_hz: 12.0,
            frames: 750,
            scaler: ScalerMode::Standardize,
            image_width: 95,
            preset: ModelPreset::VggBAvg,
            arch: ArchSize::FULL,
            train: TrainConfig::default(),
            train_fraction: 0.75,
            data_dir: None,
            out_dir: None,
        }
    }
}

const KEYS: &[&str] = &[
    "profile",
    "filter_order",
    "low_hz",
    "high_hz",
    "frames",
    "scaler",
    "image_width",
    "preset",
    "conv_filters",
    "dense_units",
    "l2_lambda",
    "learning_rate",
    "dropout_rate",
    "batch_size",
    "patience",
    "min_delta",
    "max_epochs",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
    "seed",
    "train_fraction",
    "data_dir",
    "out_dir",
];

fn value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, PipelineError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| PipelineError::ConfigValue { key: key.to_string(), msg: format!("`{v}`: {e}") })
}

impl PipelineConfig {
    /// 250-frame window, width-55 images and the reduced network widths.
    pub fn desk() -> Self {
        Self { frames: 250, image_width: 55, arch: ArchSize::DESK, ..Self::default() }
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [image_height(self.frames, self.image_width), self.image_width, AXES]
    }

    /// Parses flat `key = value` lines; `#` starts a comment. A
    /// `profile = desk` line selects the desk defaults before the other keys
    /// apply, wherever it appears.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content.split_once('=').ok_or_else(|| PipelineError::ConfigSyntax {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(PipelineError::UnknownKey { line, key: k.to_string() });
            }
            if pairs.iter().any(|(_, key, _): &(usize, &str, &str)| *key == k) {
                return Err(PipelineError::ConfigSyntax { line, msg: format!("duplicate key `{k}`") });
            }
            pairs.push((line, k, v));
        }
        let mut cfg = match pairs.iter().find(|(_, k, _)| *k == "profile").map(|p| p.2) {
            None | Some("default") => Self::default(),
            Some("desk") => Self::desk(),
            Some(other) => {
                return Err(PipelineError::ConfigValue {
                    key: "profile".into(),
                    msg: format!("`{other}` (expected default or desk)"),
                })
            }
        };
        for (_, k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), PipelineError> {
        let t = &mut self.train;
        match key {
            "profile" => {}
            "filter_order" => self.filter_order = value(key, v)?,
            "low_hz" => self.low_hz = value(key, v)?,
            "high_hz" => self.high_hz = value(key, v)?,
            "frames" => self.frames = value(key, v)?,
            "scaler" => self.scaler = value(key, v)?,
            "image_width" => self.image_width = value(key, v)?,
            "preset" => self.preset = value(key, v)?,
            "conv_filters" => {
                let parts: Vec<usize> = v.split(',').map(|p| value(key, p.trim())).collect::<Result<_, _>>()?;
                self.arch.conv_filters = parts.try_into().map_err(|_| PipelineError::ConfigValue {
                    key: key.into(),
                    msg: format!("`{v}`: expected three comma-separated counts"),
                })?;
            }
            "dense_units" => self.arch.dense_units = value(key, v)?,
            "l2_lambda" => t.l2_lambda = value(key, v)?,
            "learning_rate" => t.learning_rate = value(key, v)?,
            "dropout_rate" => t.dropout_rate = value(key, v)?,
            "batch_size" => t.batch_size = value(key, v)?,
            "patience" => t.patience = value(key, v)?,
            "min_delta" => t.min_delta = value(key, v)?,
            "max_epochs" => t.max_epochs = value(key, v)?,
            "adam_beta1" => t.beta1 = value(key, v)?,
            "adam_beta2" => t.beta2 = value(key, v)?,
            "adam_epsilon" => t.epsilon = value(key, v)?,
            "seed" => t.seed = value(key, v)?,
            "train_fraction" => self.train_fraction = value(key, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            _ => unreachable!("key list checked by caller"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |key: &str, msg: &str| Err(PipelineError::ConfigValue { key: key.into(), msg: msg.into() });
        if self.filter_order == 0 {
            return bad("filter_order", "must be >= 1");
        }
        if !(self.low_hz > 0.0 && self.high_hz > self.low_hz) {
            return bad("low_hz", "need 0 < low_hz < high_hz");
        }
        if self.frames == 0 {
            return bad("frames", "must be >= 1");
        }
        if self.image_width < crate::signal::SENSORS {
            return bad("image_width", "must be >= 12");
        }
        if self.arch.conv_filters.contains(&0) || self.arch.dense_units == 0 {
            return bad("conv_filters", "layer widths must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction", "must lie in (0, 1)");
        }
        self.train.validate().map_err(|e| PipelineError::ConfigValue { key: "train".into(), msg: e.to_string() })
    }

    /// Canonical `key = value` text of every setting except run locations.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let [f1, f2, f3] = self.arch.conv_filters;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("filter_order", self.filter_order.to_string());
        kv("low_hz", self.low_hz.to_string());
        kv("high_hz", self.high_hz.to_string());
        kv("frames", self.frames.to_string());
        kv("scaler", self.scaler.as_str().into());
        kv("image_width", self.image_width.to_string());
        kv("preset", self.preset.name().into());
        kv("conv_filters", format!("{f1},{f2},{f3}"));
        kv("dense_units", self.arch.dense_units.to_string());
        kv("l2_lambda", t.l2_lambda.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("dropout_rate", t.dropout_rate.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("patience", t.patience.to_string());
        kv("min_delta", t.min_delta.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("adam_beta1", t.beta1.to_string());
        kv("adam_beta2", t.beta2.to_string());
        kv("adam_epsilon", t.epsilon.to_string());
        kv("seed", t.seed.to_string());
        kv("train_fraction", self.train_fraction.to_string());
        s
    }

    /// Config lines for embedding as CSV comments.
    pub fn comment_lines(&self) -> Vec<String> {
        self.to_text().lines().map(str::to_string).collect()
    }

    pub fn build_model(&self) -> Result<Model, NnError> {
        let layers = self.preset.layers(self.arch, RiskLabel::ALL.len(), self.train.dropout_rate, self.train.l2_lambda);
        Model::new(&self.image_shape(), layers, self.train.seed)
    }
}

/// Filter, pad or truncate, scale, then encode as an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub filter: BandpassFilter,
    pub frames: usize,
    pub width: usize,
    pub scaler: ChannelScaler,
}

impl Preprocessor {
    fn design(cfg: &PipelineConfig, sample_rate_hz: f64) -> Result<BandpassFilter, PipelineError> {
        let f = design_bandpass(cfg.filter_order, cfg.low_hz, cfg.high_hz, sample_rate_hz)?;
        for w in &f.warnings {
            log::warn!("{w}");
        }
        Ok(f)
    }

    /// Fits the scaler on the conditioned training trials.
    pub fn fit(cfg: &PipelineConfig, training: &[&TrialRecording]) -> Result<Self, PipelineError> {
        let first = training.first().ok_or(PipelineError::EmptySplit("training"))?;
        let filter = Self::design(cfg, first.sample_rate_hz)?;
        let conditioned =
            training.iter().map(|t| Self::condition_with(&filter, cfg.frames, t)).collect::<Result<Vec<_>, _>>()?;
        let scaler = fit_scaler(&conditioned, cfg.scaler)?;
        Ok(Self { filter, frames: cfg.frames, width: cfg.image_width, scaler })
    }

    pub fn from_parts(cfg: &PipelineConfig, sample_rate_hz: f64, scaler: ChannelScaler) -> Result<Self, PipelineError> {
        Ok(Self { filter: Self::design(cfg, sample_rate_hz)?, frames: cfg.frames, width: cfg.image_width, scaler })
    }

    fn condition_with(f: &BandpassFilter, frames: usize, t: &TrialRecording) -> Result<TrialRecording, PipelineError> {
        if t.sample_rate_hz != f.sample_rate_hz {
            return Err(PipelineError::SampleRate { got: t.sample_rate_hz, expected: f.sample_rate_hz });
        }
        Ok(pad_or_truncate(&filter_trial(t, f), frames))
    }

    /// Filtered, length-normalized trial before scaling.
    pub fn condition(&self, t: &TrialRecording) -> Result<TrialRecording, PipelineError> {
        Self::condition_with(&self.filter, self.frames, t)
    }

    pub fn encode(&self, t: &TrialRecording) -> Result<EncodedImage, PipelineError> {
        let scaled = self.scaler.apply(&self.condition(t)?);
        Ok(wrap_image(&to_channel_matrix(&scaled)?, self.width)?)
    }

    pub fn encode_all(&self, trials: &[&TrialRecording]) -> Result<Vec<EncodedImage>, PipelineError> {
        trials.iter().map(|t| self.encode(t)).collect()
    }
}

/// Trained model plus everything needed to reproduce its preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: PipelineConfig,
    pub model: Model,
    pub preprocessor: Preprocessor,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PipelineError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| PipelineError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, PipelineError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, PipelineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, PipelineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, PipelineError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn text(&mut self) -> Result<String, PipelineError> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| PipelineError::Checkpoint("text chunk is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<Tensor, PipelineError> {
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        Ok(Tensor::new(shape, data)?)
    }
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for d in t.shape() {
        out.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    /// Layout: magic, u32 version, layer-stack text, config text, sample
    /// rate, scaler mode byte, u32 tensor count, then tensors (parameters,
    /// batch-norm state, scaler parameters) as u32 rank, u64 dims and
    /// little-endian f64 values. Text chunks carry a u64 byte length.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_text(&mut out, &self.model.spec_text());
        put_text(&mut out, &self.config.to_text());
        out.extend_from_slice(&self.preprocessor.filter.sample_rate_hz.to_le_bytes());
        out.push(match self.preprocessor.scaler.mode() {
            ScalerMode::Standardize => 0,
            ScalerMode::MinMax => 1,
        });
        let params = self.model.params();
        let state = self.model.state();
        let scaler: Vec<f64> = self.preprocessor.scaler.params().iter().flat_map(|&(a, b)| [a, b]).collect();
        let scaler = Tensor::new(vec![CHANNELS, 2], scaler).expect("scaler shape");
        out.extend_from_slice(&((params.len() + state.len() + 1) as u32).to_le_bytes());
        for t in params.into_iter().chain(state).chain([&scaler]) {
            put_tensor(&mut out, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(5)? != CHECKPOINT_MAGIC {
            return Err(PipelineError::Checkpoint("bad magic".into()));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(PipelineError::Checkpoint(format!("unsupported version {version}")));
        }
        let (input, layers) = parse_stack(&c.text()?)?;
        let config = PipelineConfig::parse(&c.text()?)?;
        let rate = c.f64()?;
        let mode = match c.u8()? {
            0 => ScalerMode::Standardize,
            1 => ScalerMode::MinMax,
            m => return Err(PipelineError::Checkpoint(format!("unknown scaler mode {m}"))),
        };
        let mut model = Model::new(&input, layers, 0)?;
        let count = c.u32()? as usize;
        let (np, ns) = (model.params().len(), model.state().len());
        if count != np + ns + 1 {
            return Err(PipelineError::Checkpoint(format!("expected {} tensors, found {count}", np + ns + 1)));
        }
        let load = |slot: &mut Tensor, c: &mut Cursor| -> Result<(), PipelineError> {
            let t = c.tensor()?;
            if t.shape() != slot.shape() {
                return Err(PipelineError::Checkpoint(format!(
                    "tensor shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
            Ok(())
        };
        for slot in model.params_mut() {
            load(slot, &mut c)?;
        }
        for slot in model.state_mut() {
            load(slot, &mut c)?;
        }
        let scaler = c.tensor()?;
        if scaler.shape() != [CHANNELS, 2] {
            return Err(PipelineError::Checkpoint(format!("scaler shape {:?}", scaler.shape())));
        }
        if c.pos != bytes.len() {
            return Err(PipelineError::Checkpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
        }
        let pairs = scaler.data().chunks(2).map(|p| (p[0], p[1])).collect();
        let preprocessor = Preprocessor::from_parts(&config, rate, ChannelScaler::from_params(mode, pairs)?)?;
        if model.input_shape() != config.image_shape() {
            return Err(PipelineError::Checkpoint(format!(
                "model input {:?} does not match configured image {:?}",
                model.input_shape(),
                config.image_shape()
            )));
        }
        Ok(Self { config, model, preprocessor })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        fs::write(path, self.to_bytes()).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = fs::read(path).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}

pub fn class_names() -> Vec<&'static str> {
    RiskLabel::ALL.iter().map(|r| r.name()).collect()
}

fn labels(m: &Manifest, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| m.entries[i].risk().index()).collect()
}

/// Manifest with every trial assigned; an already complete assignment is
/// kept, otherwise the configured seeded split is drawn.
pub fn assign_split(cfg: &PipelineConfig, m: &Manifest) -> Result<Manifest, PipelineError> {
    if m.is_split() && !m.entries.is_empty() {
        Ok(m.clone())
    } else {
        Ok(split_dataset(m, cfg.train_fraction, cfg.seed())?)
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub indices: Vec<usize>,
    pub truths: Vec<usize>,
    pub predictions: Vec<Prediction>,
    pub report: MetricsReport,
}

/// Predicts the trials of one split and scores them.
pub fn evaluate(
    ck: &Checkpoint,
    trials: &[TrialRecording],
    m: &Manifest,
    split: Split,
) -> Result<Evaluation, PipelineError> {
    let indices = m.indices(split);
    if indices.is_empty() {
        return Err(PipelineError::EmptySplit(split.as_str()));
    }
    let refs: Vec<&TrialRecording> = indices.iter().map(|&i| &trials[i]).collect();
    let inputs: Vec<Vec<f64>> = ck.preprocessor.encode_all(&refs)?.into_iter().map(|img| img.pixels).collect();
    let predictions = predict(&ck.model, &inputs)?;
    let truths = labels(m, &indices);
    let preds: Vec<usize> = predictions.iter().map(|p| p.class).collect();
    let cm = confusion(&preds, &truths, RiskLabel::ALL.len())?.with_names(&class_names())?;
    Ok(Evaluation { indices, truths, predictions, report: MetricsReport::new(cm)? })
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub manifest: Manifest,
    pub history: TrainHistory,
    pub evaluation: Evaluation,
}

/// Split, preprocess, train and evaluate on the test split.
pub fn run_training(cfg: &PipelineConfig, trials: &[TrialRecording], m: &Manifest) -> Result<TrainRun, PipelineError> {
    cfg.validate()?;
    let manifest = assign_split(cfg, m)?;
    let train_idx = manifest.indices(Split::Train);
    let refs: Vec<&TrialRecording> = train_idx.iter().map(|&i| &trials[i]).collect();
    let preprocessor = Preprocessor::fit(cfg, &refs)?;
    let inputs: Vec<Vec<f64>> = preprocessor.encode_all(&refs)?.into_iter().map(|img| img.pixels).collect();
    let y = labels(&manifest, &train_idx);
    let mut model = cfg.build_model()?;
    log::info!("training {} on {} trials ({} parameters)", cfg.preset, inputs.len(), model.param_count());
    let history = train(&mut model, &inputs, &y, &cfg.train)?;
    let checkpoint = Checkpoint { config: cfg.clone(), model, preprocessor };
    let evaluation = evaluate(&checkpoint, trials, &manifest, Split::Test)?;
    Ok(TrainRun { checkpoint, manifest, history, evaluation })
}
