//! Per-phoneme embedding table updated by momentum averaging.

use rand::seq::SliceRandom;

use crate::corpus::PhonemeId;
use crate::error::{Error, Result};
use crate::numerics::rng;
use crate::numerics::Tensor;

const SNAPSHOT_MAGIC: &[u8; 8] = b"PLCLBANK";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    entries: Tensor,
    alpha: f64,
    normalize: bool,
    initialized: Vec<bool>,
    update_count: Vec<u64>,
}

impl MemoryBank {
    /// `normalize` rescales a row to unit norm after every applied update.
    pub fn new(k: usize, dim: usize, alpha: f64, normalize: bool) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Parameter(format!(
                "momentum alpha must lie in (0, 1), got {alpha}"
            )));
        }
        if k == 0 || dim == 0 {
            return Err(Error::Parameter(format!("bank shape {k} x {dim} is empty")));
        }
        Ok(MemoryBank {
            entries: Tensor::zeros(k, dim),
            alpha,
            normalize,
            initialized: vec![false; k],
            update_count: vec![0; k],
        })
    }

    pub fn size(&self) -> usize {
        self.initialized.len()
    }

    pub fn dim(&self) -> usize {
        self.entries.cols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn normalizes(&self) -> bool {
        self.normalize
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn row(&self, k: PhonemeId) -> &[f64] {
        self.entries.row_slice(k)
    }

    pub fn is_initialized(&self, k: PhonemeId) -> bool {
        self.initialized[k]
    }

    pub fn update_count(&self, k: PhonemeId) -> u64 {
        self.update_count[k]
    }

    pub fn num_initialized(&self) -> usize {
        self.initialized.iter().filter(|b| **b).count()
    }

    fn check(&self, k: PhonemeId) -> Result<()> {
        if k < self.size() {
            Ok(())
        } else {
            Err(Error::Vocabulary {
                id: k,
                size: self.size(),
            })
        }
    }

    /// Momentum update `p_k ← α·p_k + (1 − α)·p_new`, gated on quality.
    /// The first applied update initializes the row. Returns whether it applied.
    pub fn update(&mut self, k: PhonemeId, p_new: &[f64], quality: f64, threshold: f64) -> Result<bool> {
        self.check(k)?;
        if p_new.len() != self.dim() {
            return Err(Error::Shape {
                op: "bank_update",
                left: vec![self.dim()],
                right: vec![p_new.len()],
            });
        }
        if !p_new.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract(format!("non-finite bank update for phoneme {k}")));
        }
        if !(quality >= threshold) {
            return Ok(false);
        }
        let d = self.dim();
        let alpha = self.alpha;
        let init = self.initialized[k];
        let row = &mut self.entries.data_mut()[k * d..(k + 1) * d];
        if init {
            for (p, n) in row.iter_mut().zip(p_new) {
                *p = alpha * *p + (1.0 - alpha) * n;
            }
        } else {
            row.copy_from_slice(p_new);
        }
        if self.normalize {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        self.initialized[k] = true;
        self.update_count[k] += 1;
        Ok(true)
    }

    /// Directly sets a row as initialized; used to seed banks in tests and tools.
    pub fn set_row(&mut self, k: PhonemeId, value: &[f64]) -> Result<()> {
        self.check(k)?;
        if value.len() != self.dim() {
            return Err(Error::Shape {
                op: "bank_set_row",
                left: vec![self.dim()],
                right: vec![value.len()],
            });
        }
        let d = self.dim();
        self.entries.data_mut()[k * d..(k + 1) * d].copy_from_slice(value);
        self.initialized[k] = true;
        Ok(())
    }

    pub fn eligible(&self, exclude: &[PhonemeId]) -> Vec<PhonemeId> {
        (0..self.size())
            .filter(|k| self.initialized[*k] && !exclude.contains(k))
            .collect()
    }

    /// Uniform sample without replacement from initialized, non-excluded rows.
    pub fn sample(&self, count: usize, exclude: &[PhonemeId], seed: u64) -> Result<Vec<(PhonemeId, Vec<f64>)>> {
        let mut ids = self.eligible(exclude);
        if count > ids.len() {
            return Err(Error::Sampling {
                requested: count,
                eligible: ids.len(),
            });
        }
        let mut r = rng::stream(seed, &[rng::tag("bank-sample")]);
        let (chosen, _) = ids.partial_shuffle(&mut r, count);
        Ok(chosen.iter().map(|&k| (k, self.row(k).to_vec())).collect())
    }

    pub fn snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.size() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        out.extend_from_slice(&self.alpha.to_le_bytes());
        out.push(u8::from(self.normalize));
        for k in 0..self.size() {
            out.push(u8::from(self.initialized[k]));
            out.extend_from_slice(&self.update_count[k].to_le_bytes());
            for v in self.row(k) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn restore(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != SNAPSHOT_MAGIC {
            return Err(Error::Format("not a memory bank snapshot".into()));
        }
        let version = cur.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!(
                "memory bank snapshot version {version}, expected {SNAPSHOT_VERSION}"
            )));
        }
        let k = cur.u64()? as usize;
        let d = cur.u64()? as usize;
        let alpha = cur.f64()?;
        let normalize = cur.u8()? != 0;
        let mut bank = MemoryBank::new(k, d, alpha, normalize).map_err(|e| Error::Format(e.to_string()))?;
        for i in 0..k {
            bank.initialized[i] = cur.u8()? != 0;
            bank.update_count[i] = cur.u64()?;
            for j in 0..d {
                let v = cur.f64()?;
                bank.entries.set(i, j, v);
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after memory bank snapshot".into()));
        }
        Ok(bank)
    }
}

pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "unexpected end of data at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(k: usize, d: usize) -> MemoryBank {
        MemoryBank::new(k, d, 0.8, false).unwrap()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn momentum_step_hand_value() {
        let mut b = raw(3, 4);
        b.update(1, &[1.0; 4], 1.0, 0.2).unwrap();
        b.update(1, &[0.0; 4], 1.0, 0.2).unwrap();
        for v in b.row(1) {
            assert!((v - 0.8).abs() < 1e-15);
        }
        assert_eq!(b.update_count(1), 2);
    }

    #[test]
    fn geometric_convergence() {
        let mut b = raw(2, 3);
        let p0 = [0.5, -2.0, 1.0];
        let target = [0.1, 0.3, -0.7];
        b.update(0, &p0, 1.0, 0.0).unwrap();
        let d0 = dist(&p0, &target);
        for n in 1..=30 {
            b.update(0, &target, 1.0, 0.0).unwrap();
            let want = 0.8f64.powi(n) * d0;
            assert!((dist(b.row(0), &target) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn low_quality_is_a_no_op() {
        let mut b = raw(2, 2);
        b.update(0, &[1.0, 2.0], 1.0, 0.2).unwrap();
        let before = b.clone();
        assert!(!b.update(0, &[9.0, 9.0], 0.1, 0.2).unwrap());
        assert_eq!(b, before);
        assert_eq!(b.update_count(0), 1);
    }

    #[test]
    fn normalized_rows_have_unit_norm() {
        let mut b = MemoryBank::new(2, 3, 0.8, true).unwrap();
        b.update(0, &[3.0, 4.0, 0.0], 1.0, 0.0).unwrap();
        b.update(0, &[0.0, 0.0, 7.0], 1.0, 0.0).unwrap();
        let n: f64 = b.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(MemoryBank::new(2, 2, 1.0, false).is_err());
        assert!(MemoryBank::new(2, 2, 0.0, false).is_err());
        let mut b = raw(2, 2);
        assert!(matches!(
            b.update(5, &[0.0, 0.0], 1.0, 0.0),
            Err(Error::Vocabulary { id: 5, size: 2 })
        ));
        assert!(b.update(0, &[f64::NAN, 0.0], 1.0, 0.0).is_err());
        match b.sample(1, &[], 0) {
            Err(Error::Sampling { requested: 1, eligible: 0 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn forced_and_exhaustive_sampling() {
        let mut b = raw(5, 2);
        for k in 0..5 {
            b.update(k, &[k as f64, 1.0], 1.0, 0.0).unwrap();
        }
        let s = b.sample(1, &[0, 1, 3, 4], 9).unwrap();
        assert_eq!(s[0].0, 2);
        assert_eq!(s[0].1, vec![2.0, 1.0]);
        let mut all: Vec<usize> = b.sample(5, &[], 9).unwrap().into_iter().map(|x| x.0).collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert_eq!(b.sample(3, &[], 4).unwrap(), b.sample(3, &[], 4).unwrap());
    }

    #[test]
    fn uninitialized_rows_never_sampled() {
        let mut b = raw(6, 2);
        b.update(1, &[1.0, 0.0], 1.0, 0.0).unwrap();
        b.update(4, &[0.0, 1.0], 1.0, 0.0).unwrap();
        for seed in 0..50 {
            for (k, _) in b.sample(2, &[], seed).unwrap() {
                assert!(k == 1 || k == 4);
            }
        }
    }

    #[test]
    fn sampling_frequency_is_uniform() {
        let mut b = raw(8, 1);
        for k in 0..8 {
            b.update(k, &[1.0], 1.0, 0.0).unwrap();
        }
        let draws = 10_000;
        let mut counts = [0usize; 8];
        for seed in 0..draws {
            counts[b.sample(1, &[], seed).unwrap()[0].0] += 1;
        }
        let p = 1.0 / 8.0;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let fresh = MemoryBank::new(4, 3, 0.8, true).unwrap();
        let back = MemoryBank::restore(&fresh.snapshot()).unwrap();
        assert_eq!(back.num_initialized(), 0);
        assert_eq!(back, fresh);
        let mut b = raw(4, 3);
        b.update(2, &[0.1, 0.2, 0.3], 1.0, 0.0).unwrap();
        b.update(2, &[1.0 / 3.0, -0.0, 7.5], 1.0, 0.0).unwrap();
        let back = MemoryBank::restore(&b.snapshot()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.snapshot(), b.snapshot());
    }

    #[test]
    fn snapshot_version_mismatch() {
        let mut bytes = raw(2, 2).snapshot();
        bytes[8] = 99;
        assert!(matches!(MemoryBank::restore(&bytes), Err(Error::Format(_))));
        let bytes = raw(2, 2).snapshot();
        assert!(MemoryBank::restore(&bytes[..bytes.len() - 1]).is_err());
    }
}
