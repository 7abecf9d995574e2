//! Synthetic lifting trials, the zone-to-risk table, dataset splitting and
//! the on-disk CSV layout.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::signal::{SignalError, TrialRecording, AXES, CHANNELS, DEFAULT_SAMPLE_RATE_HZ, SENSORS};

pub const ZONES: u8 = 12;
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const TRIALS_DIR: &str = "trials";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("zone {0} outside 1..=12")]
    Zone(u8),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{path}, line {line}: {msg}")]
    Malformed { path: PathBuf, line: u64, msg: String },
    #[error("{path}, line {line}: expected {expected} columns, found {found}")]
    ColumnCount { path: PathBuf, line: u64, expected: usize, found: usize },
    #[error("{path}: trial has no frames")]
    Empty { path: PathBuf },
    #[error("duplicate trial file {0} in manifest")]
    DuplicateFile(String),
    #[error("invalid split fraction {0}")]
    Fraction(f64),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RiskLabel {
    Low,
    Medium,
    High,
}

impl RiskLabel {
    pub const ALL: [RiskLabel; 3] = [RiskLabel::Low, RiskLabel::Medium, RiskLabel::High];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RiskLabel::Low => "low",
            RiskLabel::Medium => "medium",
            RiskLabel::High => "high",
        }
    }
}

impl fmt::Display for RiskLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RiskLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown risk class `{s}` (expected low, medium or high)"))
    }
}

/// Risk class of an ACGIH lifting zone.
pub fn zone_to_risk(zone: u8) -> Result<RiskLabel, DataError> {
    match zone {
        4 | 5 => Ok(RiskLabel::Low),
        6..=9 => Ok(RiskLabel::Medium),
        1..=3 | 10..=12 => Ok(RiskLabel::High),
        _ => Err(DataError::Zone(zone)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetProfile {
    pub n_subjects: u32,
    pub trials_per_zone_per_subject: u32,
    pub sample_rate_hz: f64,
    /// Length of the analysis window that trials are padded or cut to.
    pub max_seconds: f64,
    pub seed: u64,
}

impl Default for DatasetProfile {
    fn default() -> Self {
        Self {
            n_subjects: 10,
            trials_per_zone_per_subject: 6,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            max_seconds: 30.0,
            seed: 42,
        }
    }
}

impl DatasetProfile {
    /// Same trial count with a 10 s (250-frame) analysis window.
    pub fn desk() -> Self {
        Self { max_seconds: 10.0, ..Self::default() }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn target_frames(&self) -> usize {
        (self.max_seconds * self.sample_rate_hz).round() as usize
    }

    pub fn total_trials(&self) -> usize {
        (self.n_subjects * self.trials_per_zone_per_subject) as usize * ZONES as usize
    }

    /// Trials per risk class, indexed by `RiskLabel::index`.
    pub fn class_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for zone in 1..=ZONES {
            c[zone_to_risk(zone).expect("valid zone").index()] +=
                (self.n_subjects * self.trials_per_zone_per_subject) as usize;
        }
        c
    }
}

/// Shape of the synthetic signal family: noise plus two windowed sinusoid
/// bursts whose amplitude, spacing and sensor emphasis grow with risk.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub duration_s: (f64, f64),
    pub noise_sd: f64,
    pub dc_offset_sd: f64,
    pub drift_sd: f64,
    pub burst_hz: (f64, f64),
    pub burst_seconds: f64,
    pub first_onset_s: (f64, f64),
    /// Gap between burst onsets per class.
    pub gap_s: [f64; 3],
    pub gap_jitter_s: f64,
    pub amplitude: [f64; 3],
    pub amplitude_jitter: f64,
    pub subject_gain: (f64, f64),
    pub subject_offset_s: f64,
    /// Relative amplitude on back and wrist sensors per class; the rest get
    /// `background_emphasis`.
    pub emphasis: [f64; 3],
    pub background_emphasis: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            duration_s: (10.0, 15.0),
            noise_sd: 0.15,
            dc_offset_sd: 0.5,
            drift_sd: 0.2,
            burst_hz: (3.0, 8.0),
            burst_seconds: 1.2,
            first_onset_s: (0.8, 2.0),
            gap_s: [2.0, 2.8, 3.6],
            gap_jitter_s: 0.3,
            amplitude: [0.6, 1.0, 1.5],
            amplitude_jitter: 0.1,
            subject_gain: (0.8, 1.2),
            subject_offset_s: 0.3,
            emphasis: [1.0, 1.3, 1.6],
            background_emphasis: 0.35,
        }
    }
}

/// Wrist and back sensors (left/right wrist, back; accel and gyro).
pub fn emphasized_sensor(s: usize) -> bool {
    (2..=7).contains(&s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            _ => Err(format!("unknown split `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub trial_file: String,
    pub subject_id: u32,
    pub zone: u8,
    pub trial_index: u32,
    pub frame_count: usize,
    pub split: Split,
}

impl ManifestEntry {
    pub fn risk(&self) -> RiskLabel {
        zone_to_risk(self.zone).expect("manifest zones are validated")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub sample_rate_hz: f64,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.entries.iter().enumerate().filter(|(_, e)| e.split == split).map(|(i, _)| i).collect()
    }

    pub fn is_split(&self) -> bool {
        self.entries.iter().all(|e| e.split != Split::Unassigned)
    }

    fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            zone_to_risk(e.zone)?;
            if !seen.insert(e.trial_file.as_str()) {
                return Err(DataError::DuplicateFile(e.trial_file.clone()));
            }
        }
        Ok(())
    }
}

pub fn trial_file_name(subject: u32, zone: u8, index: u32) -> String {
    format!("{TRIALS_DIR}/trial_{subject}_{zone}_{index}.csv")
}

struct Subject {
    gain: f64,
    offset_s: f64,
    axis_weight: [f64; AXES],
}

fn hann_burst(out: &mut [f64], onset: f64, seconds: f64, hz: f64, phase: f64, amp: f64, rate: f64) {
    let start = (onset * rate).floor().max(0.0) as usize;
    let len = (seconds * rate).round() as usize;
    for i in 0..len {
        let n = start + i;
        if n >= out.len() {
            break;
        }
        let t = n as f64 / rate;
        let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / (len - 1).max(1) as f64).cos();
        out[n] += amp * w * (2.0 * PI * hz * (t - onset) + phase).sin();
    }
}

/// Deterministic synthetic dataset; every trial's split is `Unassigned`.
pub fn generate_dataset(p: &DatasetProfile, g: &GeneratorParams) -> (Vec<TrialRecording>, Manifest) {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let rate = p.sample_rate_hz;
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let subjects: Vec<Subject> = (0..p.n_subjects)
        .map(|_| Subject {
            gain: rng.random_range(g.subject_gain.0..=g.subject_gain.1),
            offset_s: rng.random_range(-g.subject_offset_s..=g.subject_offset_s),
            axis_weight: [rng.random_range(0.6..=1.0), rng.random_range(0.6..=1.0), rng.random_range(0.6..=1.0)],
        })
        .collect();

    let mut trials = Vec::with_capacity(p.total_trials());
    let mut entries = Vec::with_capacity(p.total_trials());
    for (si, subj) in subjects.iter().enumerate() {
        let subject_id = si as u32 + 1;
        for zone in 1..=ZONES {
            let class = zone_to_risk(zone).expect("valid zone").index();
            for idx in 1..=p.trials_per_zone_per_subject {
                let seconds = rng.random_range(g.duration_s.0..=g.duration_s.1);
                let frames = ((seconds * rate).round() as usize).max(1);
                let onset1 = rng.random_range(g.first_onset_s.0..=g.first_onset_s.1) + subj.offset_s;
                let onset2 = onset1 + g.gap_s[class] + rng.random_range(-g.gap_jitter_s..=g.gap_jitter_s);
                let hz = [rng.random_range(g.burst_hz.0..=g.burst_hz.1), rng.random_range(g.burst_hz.0..=g.burst_hz.1)];
                let amp =
                    g.amplitude[class] * subj.gain * (1.0 + rng.random_range(-g.amplitude_jitter..=g.amplitude_jitter));
                let mut channels = Vec::with_capacity(CHANNELS);
                for s in 0..SENSORS {
                    let emph = if emphasized_sensor(s) { g.emphasis[class] } else { g.background_emphasis };
                    for a in 0..AXES {
                        let dc = g.dc_offset_sd * unit.sample(&mut rng);
                        let drift = g.drift_sd * unit.sample(&mut rng);
                        let drift_hz = rng.random_range(0.02..0.1);
                        let mut x: Vec<f64> = (0..frames)
                            .map(|n| {
                                let t = n as f64 / rate;
                                dc + drift * (2.0 * PI * drift_hz * t).sin() + g.noise_sd * unit.sample(&mut rng)
                            })
                            .collect();
                        let a_amp = amp * emph * subj.axis_weight[a];
                        for (b, onset) in [onset1, onset2].into_iter().enumerate() {
                            let phase = rng.random_range(0.0..2.0 * PI);
                            hann_burst(&mut x, onset, g.burst_seconds, hz[b], phase, a_amp, rate);
                        }
                        channels.push(x);
                    }
                }
                trials.push(
                    TrialRecording::new(subject_id, zone, idx, rate, channels).expect("generated trial is valid"),
                );
                entries.push(ManifestEntry {
                    trial_file: trial_file_name(subject_id, zone, idx),
                    subject_id,
                    zone,
                    trial_index: idx,
                    frame_count: frames,
                    split: Split::Unassigned,
                });
            }
        }
    }
    (trials, Manifest { sample_rate_hz: rate, entries })
}

/// Seeded train/test assignment: `round(n * train_fraction)` trials train.
pub fn split_dataset(m: &Manifest, train_fraction: f64, seed: u64) -> Result<Manifest, DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Fraction(train_fraction));
    }
    let n = m.entries.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = m.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.entries[i].split = if rank < n_train { Split::Train } else { Split::Test };
    }
    Ok(out)
}

pub fn trial_csv(t: &TrialRecording) -> String {
    let mut s = String::with_capacity(t.frame_count() * CHANNELS * 12);
    s.push_str("frame");
    for sensor in 0..SENSORS {
        for axis in ["x", "y", "z"] {
            let _ = write!(s, ",s{sensor}{axis}");
        }
    }
    s.push('\n');
    for f in 0..t.frame_count() {
        let _ = write!(s, "{f}");
        for c in &t.channels {
            let _ = write!(s, ",{}", c[f]);
        }
        s.push('\n');
    }
    s
}

pub fn manifest_csv(m: &Manifest, comments: &[String]) -> String {
    let mut s = String::new();
    for c in comments {
        let _ = writeln!(s, "# {c}");
    }
    let _ = writeln!(s, "# sample_rate_hz={}", m.sample_rate_hz);
    s.push_str("trial_file,subject_id,zone,trial_index,frame_count,split\n");
    for e in &m.entries {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            e.trial_file,
            e.subject_id,
            e.zone,
            e.trial_index,
            e.frame_count,
            e.split.as_str()
        );
    }
    s
}

pub fn save_manifest(dir: &Path, m: &Manifest, comments: &[String]) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest_csv(m, comments)).map_err(io_err(&path))
}

/// Writes `manifest.csv` and one CSV per trial under `trials/`.
pub fn save_dataset(dir: &Path, trials: &[TrialRecording], m: &Manifest, comments: &[String]) -> Result<(), DataError> {
    m.validate()?;
    let tdir = dir.join(TRIALS_DIR);
    fs::create_dir_all(&tdir).map_err(io_err(&tdir))?;
    for (t, e) in trials.iter().zip(&m.entries) {
        let path = dir.join(&e.trial_file);
        fs::write(&path, trial_csv(t)).map_err(io_err(&path))?;
    }
    save_manifest(dir, m, comments)
}

fn parse_field<T: FromStr>(path: &Path, line: u64, name: &str, v: &str) -> Result<T, DataError> {
    v.trim().parse().map_err(|_| DataError::Malformed {
        path: path.to_path_buf(),
        line,
        msg: format!("bad {name} `{v}`"),
    })
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>, DataError> {
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.to_path_buf())
        } else {
            DataError::Io { path: path.to_path_buf(), source: e }
        }
    })?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).flexible(true).from_reader(file))
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    DataError::Malformed { path: path.to_path_buf(), line, msg: e.to_string() }
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            DataError::MissingFile(path.clone())
        } else {
            DataError::Io { path: path.clone(), source: e }
        }
    })?;
    let mut sample_rate_hz = DEFAULT_SAMPLE_RATE_HZ;
    for (i, l) in text.lines().enumerate() {
        if let Some(v) = l.strip_prefix("# sample_rate_hz=") {
            sample_rate_hz = parse_field(&path, i as u64 + 1, "sample_rate_hz", v)?;
        }
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).flexible(true).from_reader(text.as_bytes());
    let mut entries = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(&path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 6 {
            return Err(DataError::ColumnCount { path, line, expected: 6, found: rec.len() });
        }
        let zone: u8 = parse_field(&path, line, "zone", &rec[2])?;
        if zone_to_risk(zone).is_err() {
            return Err(DataError::Malformed { path, line, msg: format!("zone {zone} outside 1..=12") });
        }
        let split = rec[5].trim().parse().map_err(|msg| DataError::Malformed { path: path.clone(), line, msg })?;
        entries.push(ManifestEntry {
            trial_file: rec[0].trim().to_string(),
            subject_id: parse_field(&path, line, "subject_id", &rec[1])?,
            zone,
            trial_index: parse_field(&path, line, "trial_index", &rec[3])?,
            frame_count: parse_field(&path, line, "frame_count", &rec[4])?,
            split,
        });
    }
    let m = Manifest { sample_rate_hz, entries };
    m.validate()?;
    Ok(m)
}

/// Reads one trial CSV (a `frame` column plus 36 channel columns).
pub fn load_trial(path: &Path, e: &ManifestEntry, sample_rate_hz: f64) -> Result<TrialRecording, DataError> {
    let mut rdr = reader(path)?;
    let header = rdr.headers().map_err(|err| csv_err(path, err))?.clone();
    if header.len() != CHANNELS + 1 {
        return Err(DataError::ColumnCount {
            path: path.to_path_buf(),
            line: 1,
            expected: CHANNELS + 1,
            found: header.len(),
        });
    }
    let mut channels = vec![Vec::with_capacity(e.frame_count); CHANNELS];
    for rec in rdr.records() {
        let rec = rec.map_err(|err| csv_err(path, err))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != CHANNELS + 1 {
            return Err(DataError::ColumnCount {
                path: path.to_path_buf(),
                line,
                expected: CHANNELS + 1,
                found: rec.len(),
            });
        }
        for (c, field) in rec.iter().skip(1).enumerate() {
            let v: f64 = parse_field(path, line, "value", field)?;
            if !v.is_finite() {
                return Err(DataError::Malformed {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("non-finite value `{field}`"),
                });
            }
            channels[c].push(v);
        }
    }
    if channels[0].is_empty() {
        return Err(DataError::Empty { path: path.to_path_buf() });
    }
    Ok(TrialRecording::new(e.subject_id, e.zone, e.trial_index, sample_rate_hz, channels)?)
}

pub fn load_dataset(dir: &Path) -> Result<(Vec<TrialRecording>, Manifest), DataError> {
    let m = load_manifest(dir)?;
    let trials = m
        .entries
        .iter()
        .map(|e| load_trial(&dir.join(&e.trial_file), e, m.sample_rate_hz))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((trials, m))
}
