//! Dense tensors, reverse-mode differentiation, and the neural building blocks
//! shared by the encoders and verifier heads.

mod gradcheck;
mod graph;
mod params;
pub mod rng;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var, PROB_CLAMP};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Cosine similarity of two `1 × d` vectors with zero-norm guard `eps`.
pub fn cosine_similarity(g: &mut Graph, a: Var, b: Var, eps: f64) -> Result<Var> {
    if g.shape(a)[0] != 1 || g.shape(b)[0] != 1 {
        return Err(Error::Shape {
            op: "cosine_similarity",
            left: g.shape(a).to_vec(),
            right: g.shape(b).to_vec(),
        });
    }
    cosine_matrix(g, a, b, eps)
}

/// All-pairs cosine similarity between the rows of `a` (`m × d`) and `b` (`n × d`).
pub fn cosine_matrix(g: &mut Graph, a: Var, b: Var, eps: f64) -> Result<Var> {
    if g.shape(a)[1] != g.shape(b)[1] {
        return Err(Error::Shape {
            op: "cosine_matrix",
            left: g.shape(a).to_vec(),
            right: g.shape(b).to_vec(),
        });
    }
    let an = g.normalize_rows(a, eps)?;
    let bn = g.normalize_rows(b, eps)?;
    g.matmul_bt(an, bn)
}

/// Scaled dot-product attention `softmax(q·kᵀ/√d)·v`.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    Ok(attention_with_weights(g, q, k, v)?.0)
}

/// Like [`attention`] but also returns the `m × n` weight matrix.
pub fn attention_with_weights(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (g.shape(q), g.shape(k), g.shape(v));
    if sq[1] != sk[1] || sk[0] != sv[0] {
        return Err(Error::Shape {
            op: "attention",
            left: sq.to_vec(),
            right: vec![sk[0], sk[1], sv[0], sv[1]],
        });
    }
    let scores = g.matmul_bt(q, k)?;
    let weights = g.softmax_rows(scores, (sq[1] as f64).sqrt())?;
    Ok((g.matmul(weights, v)?, weights))
}

/// Bound GRU parameters: input weights `d_in × 3h`, recurrent weights `h × 3h`
/// and their biases. Gate blocks are ordered update, reset, candidate.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub wx: Var,
    pub wh: Var,
    pub bx: Var,
    pub bh: Var,
}

impl GruVars {
    pub fn hidden(&self, g: &Graph) -> usize {
        g.shape(self.wh)[0]
    }
}

/// Single GRU step `h' = (1 − z)⊙h + z⊙ĥ` for a `1 × d_in` input.
pub fn gru_step(g: &mut Graph, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let ax = g.matmul(x, p.wx)?;
    let ax = g.add(ax, p.bx)?;
    g.gru_cell(ax, h, p.wh, p.bh)
}

/// Runs a GRU over the rows of `xs` from a zero state; returns all hidden
/// states stacked (`T × h`) and the final state (`1 × h`).
pub fn gru_sequence(g: &mut Graph, xs: Var, p: &GruVars) -> Result<(Var, Var)> {
    let t = g.shape(xs)[0];
    if t == 0 {
        return Err(Error::Contract("GRU over an empty sequence".into()));
    }
    let dh = p.hidden(g);
    let ax_all = g.matmul(xs, p.wx)?;
    let ax_all = g.add_row(ax_all, p.bx)?;
    let mut h = g.constant(Tensor::zeros(1, dh));
    let mut states = Vec::with_capacity(t);
    for i in 0..t {
        let ax = g.row(ax_all, i)?;
        h = g.gru_cell(ax, h, p.wh, p.bh)?;
        states.push(h);
    }
    let all = g.concat_rows(&states)?;
    Ok((all, h))
}

/// Fully connected layer `x·W + b` for a batch of rows.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}
