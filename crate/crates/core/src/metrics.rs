//! AUC and EER, overall and per negative-difficulty subset.

use std::fmt::Write as _;

use crate::corpus::Difficulty;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    /// Difficulty of each negative; ignored for positives.
    pub difficulty: Vec<Option<Difficulty>>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Self {
        let n = scores.len();
        ScoredSet {
            scores,
            labels,
            difficulty: vec![None; n],
        }
    }

    pub fn push(&mut self, score: f64, label: bool, difficulty: Option<Difficulty>) {
        self.scores.push(score);
        self.labels.push(label);
        self.difficulty.push(difficulty);
    }

    pub fn counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|l| **l).count();
        (pos, self.labels.len() - pos)
    }

    /// All positives plus the negatives of one difficulty.
    pub fn subset(&self, d: Difficulty) -> ScoredSet {
        let mut out = ScoredSet::default();
        for i in 0..self.scores.len() {
            if self.labels[i] || self.difficulty[i] == Some(d) {
                out.push(self.scores[i], self.labels[i], self.difficulty[i]);
            }
        }
        out
    }

    fn check(&self) -> Result<(usize, usize)> {
        if self.scores.len() != self.labels.len() || self.scores.len() != self.difficulty.len() {
            return Err(Error::Metric("scores, labels and difficulty differ in length".into()));
        }
        if self.scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Metric("NaN score".into()));
        }
        let (p, n) = self.counts();
        if p == 0 || n == 0 {
            return Err(Error::Metric(format!(
                "need at least one positive and one negative, got {p} and {n}"
            )));
        }
        Ok((p, n))
    }
}

/// Mann–Whitney AUC; ties count one half.
pub fn auc(s: &ScoredSet) -> Result<f64> {
    let (p, n) = s.check()?;
    let mut idx: Vec<usize> = (0..s.scores.len()).collect();
    idx.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0usize, 0usize);
        while j < idx.len() && s.scores[idx[j]] == s.scores[idx[i]] {
            if s.labels[idx[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        wins += gp as f64 * (neg_below as f64 + 0.5 * gn as f64);
        neg_below += gn;
        i = j;
    }
    Ok(wins / (p as f64 * n as f64))
}

/// Equal error rate and its threshold. Operating thresholds sit below the
/// lowest score, between consecutive distinct scores and above the highest;
/// a score at or above the threshold is an accept. The crossing of
/// false-accept and false-reject rates is interpolated linearly between the
/// two operating points that bracket it.
pub fn eer(s: &ScoredSet) -> Result<(f64, f64)> {
    let (p, n) = s.check()?;
    let mut idx: Vec<usize> = (0..s.scores.len()).collect();
    idx.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    let mut distinct: Vec<f64> = idx.iter().map(|&i| s.scores[i]).collect();
    distinct.dedup();

    let mut thresholds = Vec::with_capacity(distinct.len() + 1);
    thresholds.push(distinct[0] - 1.0);
    for w in distinct.windows(2) {
        thresholds.push(0.5 * (w[0] + w[1]));
    }
    thresholds.push(distinct[distinct.len() - 1] + 1.0);

    // Walk thresholds upward; `k` counts sorted items strictly below the threshold.
    let mut points = Vec::with_capacity(thresholds.len());
    let (mut pos_below, mut neg_below, mut k) = (0usize, 0usize, 0usize);
    for &t in &thresholds {
        while k < idx.len() && s.scores[idx[k]] < t {
            if s.labels[idx[k]] {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            k += 1;
        }
        let far = (n - neg_below) as f64 / n as f64;
        let frr = pos_below as f64 / p as f64;
        points.push((t, far, frr));
    }
    for w in points.windows(2) {
        let (t0, far0, frr0) = w[0];
        let (t1, far1, frr1) = w[1];
        let d0 = far0 - frr0;
        let d1 = far1 - frr1;
        if d0 == 0.0 {
            return Ok((far0, t0));
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let a = d0 / (d0 - d1);
            return Ok((far0 + a * (far1 - far0), t0 + a * (t1 - t0)));
        }
    }
    let (t, far, _) = points[points.len() - 1];
    Ok((far, t))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetMetrics {
    pub auc: f64,
    pub eer: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsetRow {
    pub subset: String,
    /// `None` when the subset lacks positives or negatives.
    pub metrics: Option<SubsetMetrics>,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<SubsetRow>,
}

fn row(name: &str, s: &ScoredSet) -> Result<SubsetRow> {
    let (n_pos, n_neg) = s.counts();
    let metrics = if n_pos > 0 && n_neg > 0 {
        let (e, t) = eer(s)?;
        Some(SubsetMetrics {
            auc: auc(s)?,
            eer: e,
            threshold: t,
        })
    } else {
        None
    };
    Ok(SubsetRow {
        subset: name.to_string(),
        metrics,
        n_pos,
        n_neg,
    })
}

pub const CSV_HEADER: &str = "subset,auc,eer,threshold,n_pos,n_neg";

impl MetricsReport {
    pub fn get(&self, subset: &str) -> Option<&SubsetRow> {
        self.rows.iter().find(|r| r.subset == subset)
    }

    pub fn auc_of(&self, subset: &str) -> Option<f64> {
        self.get(subset).and_then(|r| r.metrics.as_ref()).map(|m| m.auc)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            match &r.metrics {
                Some(m) => writeln!(
                    out,
                    "{},{:?},{:?},{:?},{},{}",
                    r.subset, m.auc, m.eer, m.threshold, r.n_pos, r.n_neg
                ),
                None => writeln!(out, "{},absent,absent,absent,{},{}", r.subset, r.n_pos, r.n_neg),
            }
            .expect("write to string");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Parse {
                record: 0,
                message: format!("expected header {CSV_HEADER:?}"),
            });
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let record = i + 1;
            let err = |message: String| Error::Parse { record, message };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            let int = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s:?}: {e}")));
            let metrics = if f[1] == "absent" {
                None
            } else {
                Some(SubsetMetrics {
                    auc: num(f[1])?,
                    eer: num(f[2])?,
                    threshold: num(f[3])?,
                })
            };
            rows.push(SubsetRow {
                subset: f[0].to_string(),
                metrics,
                n_pos: int(f[4])?,
                n_neg: int(f[5])?,
            });
        }
        Ok(MetricsReport { rows })
    }
}

/// Overall, easy-negative and hard-negative rows.
pub fn report(s: &ScoredSet) -> Result<MetricsReport> {
    Ok(MetricsReport {
        rows: vec![
            row("all", s)?,
            row("easy", &s.subset(Difficulty::Easy))?,
            row("hard", &s.subset(Difficulty::Hard))?,
        ],
    })
}
