//! Scoring datasets in parallel and summarizing them as metric reports.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::checkpoint::Thresholds;
use crate::corpus::PairExample;
use crate::error::{Error, Result};
use crate::metrics::{eer, report, MetricsReport, ScoredSet};
use crate::model::{Mode, Model};
use crate::numerics::Tensor;

/// Scores every pair; result order follows `pairs`.
pub fn score_pairs(model: &Model, pairs: &[PairExample], mode: Mode) -> Result<Vec<f64>> {
    pairs.par_iter().map(|p| model.score_pair(p, mode)).collect()
}

pub fn scored_set(pairs: &[PairExample], scores: Vec<f64>) -> ScoredSet {
    let mut s = ScoredSet::default();
    for (p, v) in pairs.iter().zip(scores) {
        s.push(v, p.is_positive(), if p.is_positive() { None } else { p.difficulty });
    }
    s
}

pub fn evaluate(model: &Model, pairs: &[PairExample], mode: Mode) -> Result<MetricsReport> {
    report(&scored_set(pairs, score_pairs(model, pairs, mode)?))
}

/// EER thresholds of all three modes on `pairs`.
pub fn thresholds(model: &Model, pairs: &[PairExample]) -> Result<Thresholds> {
    let mut t = Thresholds::default();
    for mode in Mode::ALL {
        let s = scored_set(pairs, score_pairs(model, pairs, mode)?);
        let (pos, neg) = s.counts();
        t.set(mode, if pos > 0 && neg > 0 { Some(eer(&s)?.1) } else { None });
    }
    Ok(t)
}

/// Writes a matrix as a text grid: a `# pair=.. head=.. matrix=.. rows=.. cols=..`
/// header, then one whitespace-separated line per row. Values use the
/// shortest representation that parses back to the same f64.
pub fn write_grid(pair: &str, head: &str, matrix: &str, t: &Tensor) -> String {
    let mut out = format!("# pair={pair} head={head} matrix={matrix} rows={} cols={}\n", t.rows(), t.cols());
    for r in 0..t.rows() {
        let line: Vec<String> = t.row_slice(r).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Header fields and matrix of a grid written by [`write_grid`].
pub fn parse_grid(text: &str) -> Result<(BTreeMap<String, String>, Tensor)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|h| h.strip_prefix("# "))
        .ok_or_else(|| Error::Format("grid without a header line".into()))?;
    let fields: BTreeMap<String, String> = header
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let dim = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("grid header lacks {k}")))
    };
    let (rows, cols) = (dim("rows")?, dim("cols")?);
    let mut data = Vec::with_capacity(rows * cols);
    let mut n = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let vals = line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("grid row {n}: {e}")))?;
        if vals.len() != cols {
            return Err(Error::Format(format!("grid row {n} has {} values, header says {cols}", vals.len())));
        }
        data.extend(vals);
        n += 1;
    }
    if n != rows {
        return Err(Error::Format(format!("grid has {n} rows, header says {rows}")));
    }
    Ok((fields, Tensor::new(rows, cols, data)?))
}

/// Mean of the entries within `band` of the rescaled diagonal: entry (i, j)
/// of an `r × c` matrix is on the band when `|i/r − j/c| ≤ band`.
pub fn diagonal_band_mean(t: &Tensor, band: f64) -> f64 {
    let (r, c) = (t.rows() as f64, t.cols() as f64);
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..t.rows() {
        for j in 0..t.cols() {
            if ((i as f64 + 0.5) / r - (j as f64 + 0.5) / c).abs() <= band {
                sum += t.get(i, j);
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_round_trip_is_bit_exact() {
        let t = Tensor::from_rows(&[vec![0.1 + 0.2, -1e-310, 5e300], vec![1.0 / 3.0, -0.0, 2.0]]).unwrap();
        let text = write_grid("test-7", "text", "m_at", &t);
        let (h, back) = parse_grid(&text).unwrap();
        assert_eq!(h["pair"], "test-7");
        assert_eq!(h["matrix"], "m_at");
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn malformed_grids_are_format_errors() {
        let t = Tensor::filled(2, 2, 1.0);
        let good = write_grid("p", "h", "m", &t);
        assert!(matches!(parse_grid("1 2\n"), Err(Error::Format(_))));
        assert!(matches!(parse_grid(&good.replace("cols=2", "cols=3")), Err(Error::Format(_))));
        assert!(matches!(parse_grid(&good.replace("rows=2", "rows=3")), Err(Error::Format(_))));
    }

    #[test]
    fn band_mean_of_identity() {
        let t = Tensor::identity(4);
        assert_eq!(diagonal_band_mean(&t, 0.01), 1.0);
    }
}
