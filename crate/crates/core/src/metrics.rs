//! Confusion-matrix statistics and the K-category correlation R_K.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{preds} predictions but {truths} truths")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("class index {index} out of range for {classes} classes")]
    Class { index: usize, classes: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("{names} class names for {classes} classes")]
    Names { names: usize, classes: usize },
}

/// A statistic together with a flag marking a zero-denominator case, in
/// which the value is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub value: f64,
    pub degenerate: bool,
}

impl Stat {
    fn ratio(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Stat { value: 0.0, degenerate: true }
        } else {
            Stat { value: num / den, degenerate: false }
        }
    }
}

/// Counts `C[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    k: usize,
    names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassTally {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        Self { counts: vec![0; k * k], k, names: (0..k).map(|i| i.to_string()).collect() }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Self {
        let k = rows.len();
        assert!(rows.iter().all(|r| r.len() == k), "confusion matrix must be square");
        let mut m = Self::zeros(k);
        m.counts = rows.iter().flatten().copied().collect();
        m
    }

    pub fn with_names(mut self, names: &[&str]) -> Result<Self, MetricsError> {
        if names.len() != self.k {
            return Err(MetricsError::Names { names: names.len(), classes: self.k });
        }
        self.names = names.iter().map(|s| s.to_string()).collect();
        Ok(self)
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(|r| r.to_vec()).collect()
    }

    /// Reorders classes: new class `i` is old class `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut m = Self::zeros(self.k);
        for i in 0..self.k {
            for j in 0..self.k {
                m.counts[i * self.k + j] = self.get(perm[i], perm[j]);
            }
            m.names[i] = self.names[perm[i]].clone();
        }
        m
    }

    pub fn tally(&self, class: usize) -> ClassTally {
        let tp = self.get(class, class);
        let row: u64 = (0..self.k).map(|j| self.get(class, j)).sum();
        let col: u64 = (0..self.k).map(|i| self.get(i, class)).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        ClassTally { tp, fp, fn_, tn: self.total() - tp - fp - fn_ }
    }
}

pub fn confusion(preds: &[usize], truths: &[usize], k: usize) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), truths: truths.len() });
    }
    let mut m = ConfusionMatrix::zeros(k);
    for (&p, &t) in preds.iter().zip(truths) {
        if let Some(&index) = [p, t].iter().find(|&&i| i >= k) {
            return Err(MetricsError::Class { index, classes: k });
        }
        m.counts[t * k + p] += 1;
    }
    Ok(m)
}

/// TP / (TP + FP).
pub fn precision(c: &ConfusionMatrix, k: usize) -> Stat {
    let t = c.tally(k);
    Stat::ratio(t.tp as f64, (t.tp + t.fp) as f64)
}

/// TP / (TP + FN).
pub fn recall(c: &ConfusionMatrix, k: usize) -> Stat {
    let t = c.tally(k);
    Stat::ratio(t.tp as f64, (t.tp + t.fn_) as f64)
}

/// Harmonic mean of precision and recall; degenerate when either input is
/// degenerate or both are zero.
pub fn f_measure(c: &ConfusionMatrix, k: usize) -> Stat {
    let (p, r) = (precision(c, k), recall(c, k));
    let s = Stat::ratio(2.0 * p.value * r.value, p.value + r.value);
    Stat { value: s.value, degenerate: s.degenerate || p.degenerate || r.degenerate }
}

pub fn accuracy(c: &ConfusionMatrix) -> Result<f64, MetricsError> {
    match c.total() {
        0 => Err(MetricsError::Empty),
        n => Ok(c.trace() as f64 / n as f64),
    }
}

/// Gorodkin's R_K. The triple sum and both normalizers are accumulated in
/// exact integer arithmetic; a zero normalizer gives 0 flagged degenerate.
pub fn rk(c: &ConfusionMatrix) -> Result<Stat, MetricsError> {
    let n = c.total();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    let k = c.k;
    let g = |i: usize, j: usize| c.get(i, j) as i128;
    let mut num: i128 = 0;
    for kk in 0..k {
        for l in 0..k {
            for m in 0..k {
                num += g(kk, kk) * g(l, m) - g(kk, l) * g(m, kk);
            }
        }
    }
    // Σ_k (Σ_l C_kl)(Σ_{k'≠k} Σ_l' C_k'l'), and the same over columns.
    let n = n as i128;
    let row: Vec<i128> = (0..k).map(|i| (0..k).map(|j| g(i, j)).sum()).collect();
    let col: Vec<i128> = (0..k).map(|j| (0..k).map(|i| g(i, j)).sum()).collect();
    let d1: i128 = row.iter().map(|r| r * (n - r)).sum();
    let d2: i128 = col.iter().map(|s| s * (n - s)).sum();
    if d1 == 0 || d2 == 0 {
        return Ok(Stat { value: 0.0, degenerate: true });
    }
    Ok(Stat { value: num as f64 / ((d1 * d2) as f64).sqrt(), degenerate: false })
}

/// Per-class and overall figures for one evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub precision: Vec<Stat>,
    pub recall: Vec<Stat>,
    pub f_measure: Vec<Stat>,
    pub accuracy: f64,
    pub rk: Stat,
}

impl MetricsReport {
    pub fn new(c: ConfusionMatrix) -> Result<Self, MetricsError> {
        let k = c.classes();
        Ok(Self {
            precision: (0..k).map(|i| precision(&c, i)).collect(),
            recall: (0..k).map(|i| recall(&c, i)).collect(),
            f_measure: (0..k).map(|i| f_measure(&c, i)).collect(),
            accuracy: accuracy(&c)?,
            rk: rk(&c)?,
            confusion: c,
        })
    }

    /// `row,precision,recall,f_measure,value` CSV: one row per class, then
    /// accuracy and R_K, then the confusion counts as comment lines.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut s = String::new();
        for c in comments {
            let _ = writeln!(s, "# {c}");
        }
        s.push_str("row,precision,recall,f_measure,value\n");
        for (i, name) in self.confusion.names().iter().enumerate() {
            let _ = writeln!(
                s,
                "{name},{:.6},{:.6},{:.6},",
                self.precision[i].value, self.recall[i].value, self.f_measure[i].value
            );
        }
        let _ = writeln!(s, "accuracy,,,,{:.6}", self.accuracy);
        let _ = writeln!(s, "rk,,,,{:.6}", self.rk.value);
        for (name, row) in self.confusion.names().iter().zip(self.confusion.rows()) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "# confusion {name}: {}", cells.join(" "));
        }
        s
    }
}
