//! Grid search over the L2 weight, learning rate and dropout rate, ranked by
//! test-split R_K.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::pipeline::{assign_split, run_training, PipelineConfig, PipelineError};
use crate::signal::TrialRecording;
use crate::synthdata::Manifest;
use crate::trainer::TrainHistory;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("grid axis `{0}` is empty")]
    EmptyAxis(&'static str),
    #[error("grid line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("grid value {value} for `{axis}` is invalid: {msg}")]
    Value { axis: &'static str, value: f64, msg: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub repeats: usize,
    pub base: PipelineConfig,
}

impl GridSpec {
    pub fn new(base: PipelineConfig) -> Self {
        Self {
            lambdas: vec![1e-1, 1e-3, 1e-5, 1e-7, 1e-10],
            alphas: vec![1e-2, 1e-3, 1e-4],
            dropouts: vec![0.0, 0.25, 0.5],
            repeats: 1,
            base,
        }
    }

    /// `lambdas`, `alphas`, `dropouts` (comma-separated) and `repeats`
    /// lines; every other line is handed to the pipeline config parser.
    pub fn parse(text: &str) -> Result<Self, TuneError> {
        let mut rest = String::new();
        let mut axes: [Option<Vec<f64>>; 3] = [None, None, None];
        let mut repeats = None;
        for (i, raw) in text.lines().enumerate() {
            let content = raw.split('#').next().unwrap_or("").trim();
            let key = content.split_once('=').map(|(k, v)| (k.trim(), v.trim()));
            let slot = match key {
                Some(("lambdas", _)) => Some(0),
                Some(("alphas", _)) => Some(1),
                Some(("dropouts", _)) => Some(2),
                _ => None,
            };
            match (key, slot) {
                (Some((k, v)), Some(s)) => {
                    let vals = v
                        .split(',')
                        .map(|p| p.trim().parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| TuneError::Syntax { line: i + 1, msg: format!("`{k}`: {e}") })?;
                    axes[s] = Some(vals);
                }
                (Some(("repeats", v)), _) => {
                    repeats =
                        Some(v.parse().map_err(|e| TuneError::Syntax { line: i + 1, msg: format!("`repeats`: {e}") })?);
                }
                _ => {
                    // Blank lines keep config line numbers aligned with the grid file.
                    rest.push_str(raw);
                }
            }
            rest.push('\n');
        }
        let mut g = Self::new(PipelineConfig::parse(&rest)?);
        let [l, a, d] = axes;
        if let Some(l) = l {
            g.lambdas = l;
        }
        if let Some(a) = a {
            g.alphas = a;
        }
        if let Some(d) = d {
            g.dropouts = d;
        }
        if let Some(r) = repeats {
            g.repeats = r;
        }
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), TuneError> {
        for (name, axis) in [("lambdas", &self.lambdas), ("alphas", &self.alphas), ("dropouts", &self.dropouts)] {
            if axis.is_empty() {
                return Err(TuneError::EmptyAxis(name));
            }
        }
        if self.repeats == 0 {
            return Err(TuneError::EmptyAxis("repeats"));
        }
        let bad = |axis, value, msg: &str| Err(TuneError::Value { axis, value, msg: msg.into() });
        for &v in &self.lambdas {
            if !(v >= 0.0) {
                return bad("lambdas", v, "must be >= 0");
            }
        }
        for &v in &self.alphas {
            if !(v > 0.0) || !v.is_finite() {
                return bad("alphas", v, "must be > 0");
            }
        }
        for &v in &self.dropouts {
            if !(0.0..1.0).contains(&v) {
                return bad("dropouts", v, "must lie in [0, 1)");
            }
        }
        Ok(())
    }

    /// Cells in grid order: lambda outermost, then alpha, dropout, repeat.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &l2_lambda in &self.lambdas {
            for &learning_rate in &self.alphas {
                for &dropout_rate in &self.dropouts {
                    for repeat in 0..self.repeats {
                        let index = out.len();
                        out.push(Cell {
                            index,
                            repeat,
                            l2_lambda,
                            learning_rate,
                            dropout_rate,
                            seed: self.base.seed().wrapping_add(index as u64),
                        });
                    }
                }
            }
        }
        out
    }

    /// Pipeline configuration that trains one cell.
    pub fn cell_config(&self, c: &Cell) -> PipelineConfig {
        let mut cfg = self.base.clone();
        cfg.train.l2_lambda = c.l2_lambda;
        cfg.train.learning_rate = c.learning_rate;
        cfg.train.dropout_rate = c.dropout_rate;
        cfg.train.seed = c.seed;
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub repeat: usize,
    pub l2_lambda: f64,
    pub learning_rate: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Done { rk: f64, accuracy: f64, final_loss: f64, epochs: usize, history: TrainHistory },
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneRow {
    pub cell: Cell,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    /// Grid order.
    pub rows: Vec<TuneRow>,
    /// Indices into `rows` of completed cells, best first.
    pub ranking: Vec<usize>,
}

impl TuneResult {
    pub fn best(&self) -> Option<&TuneRow> {
        self.ranking.first().map(|&i| &self.rows[i])
    }

    /// Ranked completed cells, then failed cells in grid order.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut s = String::new();
        for c in comments {
            let _ = writeln!(s, "# {c}");
        }
        s.push_str("rank,cell,repeat,l2_lambda,learning_rate,dropout_rate,seed,status,rk,accuracy,final_loss,epochs\n");
        let failed =
            self.rows.iter().enumerate().filter(|(_, r)| matches!(r.outcome, Outcome::Failed(_))).map(|(i, _)| i);
        for (pos, i) in self.ranking.iter().copied().chain(failed).enumerate() {
            let r = &self.rows[i];
            let c = r.cell;
            let head =
                format!("{},{},{},{},{},{}", c.index, c.repeat, c.l2_lambda, c.learning_rate, c.dropout_rate, c.seed);
            match &r.outcome {
                Outcome::Done { rk, accuracy, final_loss, epochs, .. } => {
                    let _ = writeln!(s, "{},{head},ok,{rk:.6},{accuracy:.6},{final_loss:e},{epochs}", pos + 1);
                }
                Outcome::Failed(msg) => {
                    let _ = writeln!(s, ",{head},failed: {},,,,", msg.replace([',', '\n'], ";"));
                }
            }
        }
        s
    }
}

fn run_cell(grid: &GridSpec, cell: &Cell, trials: &[TrialRecording], split: &Manifest) -> TuneRow {
    let cfg = grid.cell_config(cell);
    let outcome = match run_training(&cfg, trials, split) {
        Ok(run) => Outcome::Done {
            rk: run.evaluation.report.rk.value,
            accuracy: run.evaluation.report.accuracy,
            final_loss: run.history.best_loss(),
            epochs: run.history.epochs_run(),
            history: run.history,
        },
        Err(e) => {
            log::warn!("cell {} failed: {e}", cell.index);
            Outcome::Failed(e.to_string())
        }
    };
    TuneRow { cell: *cell, outcome }
}

/// Trains every cell on one shared split and ranks the completed cells by
/// R_K, breaking ties by lower final training loss, then by grid order.
pub fn grid_search(
    grid: &GridSpec,
    trials: &[TrialRecording],
    m: &Manifest,
    parallel: bool,
) -> Result<TuneResult, TuneError> {
    grid.validate()?;
    let split = assign_split(&grid.base, m)?;
    let cells = grid.cells();
    let rows: Vec<TuneRow> = if parallel {
        cells.par_iter().map(|c| run_cell(grid, c, trials, &split)).collect()
    } else {
        cells.iter().map(|c| run_cell(grid, c, trials, &split)).collect()
    };
    let key = |r: &TuneRow| match r.outcome {
        Outcome::Done { rk, final_loss, .. } => Some((rk, final_loss)),
        Outcome::Failed(_) => None,
    };
    let mut ranking: Vec<usize> = (0..rows.len()).filter(|&i| key(&rows[i]).is_some()).collect();
    ranking.sort_by(|&a, &b| {
        let (ra, la) = key(&rows[a]).expect("completed");
        let (rb, lb) = key(&rows[b]).expect("completed");
        rb.total_cmp(&ra).then(la.total_cmp(&lb)).then(a.cmp(&b))
    });
    Ok(TuneResult { rows, ranking })
}
