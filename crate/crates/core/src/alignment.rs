//! Forced-alignment pooling: one embedding per phoneme, averaged over the
//! frames of its ground-truth span.

use crate::corpus::{validate_spans, PhonemeId};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

#[derive(Clone, Debug)]
pub struct PooledSequence {
    pub embeddings: Var,
    pub phoneme_ids: Vec<PhonemeId>,
}

/// Row `i` of the result is the mean of the rows of `e` inside `spans[i]`.
pub fn pool_by_alignment(
    g: &mut Graph,
    e: Var,
    spans: &[(usize, usize)],
    phoneme_ids: &[PhonemeId],
) -> Result<PooledSequence> {
    if spans.len() != phoneme_ids.len() {
        return Err(Error::Alignment(format!(
            "{} spans for {} phonemes",
            spans.len(),
            phoneme_ids.len()
        )));
    }
    validate_spans(spans, g.shape(e)[0])?;
    Ok(PooledSequence {
        embeddings: g.mean_spans(e, spans)?,
        phoneme_ids: phoneme_ids.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tensor};

    fn pooled(frames: Tensor, spans: &[(usize, usize)]) -> Tensor {
        let mut g = Graph::new();
        let e = g.constant(frames);
        let ids: Vec<usize> = (0..spans.len()).collect();
        let p = pool_by_alignment(&mut g, e, spans, &ids).unwrap();
        g.value(p.embeddings).clone()
    }

    #[test]
    fn full_span_is_column_mean() {
        let f = Tensor::from_rows(&[vec![1.0, 4.0], vec![3.0, 0.0], vec![2.0, 2.0]]).unwrap();
        let p = pooled(f, &[(0, 3)]);
        assert!((p.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((p.get(0, 1) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_frames_pool_to_that_frame() {
        let f = Tensor::from_rows(&vec![vec![0.25, -1.5, 3.0]; 5]).unwrap();
        let p = pooled(f, &[(0, 2), (2, 3), (3, 5)]);
        for r in 0..3 {
            assert_eq!(p.row_slice(r), &[0.25, -1.5, 3.0]);
        }
    }

    #[test]
    fn hand_computed_means() {
        let f = Tensor::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 6.0],
            vec![-1.0, 0.5],
            vec![0.0, 1.5],
        ])
        .unwrap();
        let p = pooled(f, &[(0, 2), (2, 4)]);
        let want = [2.0, 4.0, -0.5, 1.0];
        for (a, b) in p.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_spans_are_identity() {
        let f = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(pooled(f.clone(), &[(0, 1), (1, 2), (2, 3)]), f);
    }

    #[test]
    fn bad_spans_name_the_problem() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(4, 2));
        let err = pool_by_alignment(&mut g, e, &[(0, 1), (2, 4)], &[0, 1]).unwrap_err();
        assert!(err.to_string().contains("gap"), "{err}");
        let err = pool_by_alignment(&mut g, e, &[(0, 3), (2, 4)], &[0, 1]).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
        assert!(matches!(
            pool_by_alignment(&mut g, e, &[(0, 4)], &[0, 1]),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn gradient_is_one_over_span_length() {
        let f = Tensor::new(5, 2, (0..10).map(|i| i as f64 * 0.1).collect()).unwrap();
        let rep = grad_check(
            "pool",
            |g, v| {
                let p = pool_by_alignment(g, v[0], &[(0, 2), (2, 5)], &[3, 4])?;
                let sq = g.mul(p.embeddings, p.embeddings)?;
                Ok(g.sum(sq))
            },
            &[f],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }
}
