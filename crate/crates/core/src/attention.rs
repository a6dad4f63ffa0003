//! Parameter-free self- and cross-attention over tokenized embeddings, and
//! single-head differential attention with a learnable mixing scalar.
//!
//! All tape functions accept any number of leading batch axes: a token
//! matrix is `[.., n, d]`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A pooled embedding viewed as `n_tok` rows of `origin_dim / n_tok` values.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenView {
    pub tokens: Tensor,
    pub origin_dim: usize,
}

impl TokenView {
    pub fn n_tok(&self) -> usize {
        self.tokens.shape()[0]
    }

    /// Row-major flatten back to the original vector.
    pub fn flatten(&self) -> Tensor {
        Tensor::vector(self.tokens.data().to_vec())
    }
}

pub fn reshape_tokens(v: &Tensor, n_tok: usize) -> Result<TokenView> {
    if v.rank() != 1 {
        return Err(Error::Dimension(format!(
            "expected a vector to tokenize, got shape {:?}",
            v.shape()
        )));
    }
    let dim = v.numel();
    check_divides(dim, n_tok)?;
    Ok(TokenView {
        tokens: Tensor::new(&[n_tok, dim / n_tok], v.data().to_vec())?,
        origin_dim: dim,
    })
}

fn check_divides(dim: usize, n_tok: usize) -> Result<()> {
    if n_tok == 0 || !dim.is_multiple_of(n_tok) {
        return Err(Error::Dimension(format!(
            "{n_tok} tokens do not evenly divide width {dim}"
        )));
    }
    Ok(())
}

/// `[.., D]` → `[.., n_tok, D / n_tok]`.
pub fn tokenize(tape: &mut Tape, v: Var, n_tok: usize) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let dim = *shape
        .last()
        .ok_or_else(|| Error::Dimension("cannot tokenize a scalar".into()))?;
    check_divides(dim, n_tok)?;
    let mut out = shape[..shape.len() - 1].to_vec();
    out.extend([n_tok, dim / n_tok]);
    tape.reshape(v, &out)
}

/// `[.., n, d]` → `[.., n·d]`.
pub fn flatten_tokens(tape: &mut Tape, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    if shape.len() < 2 {
        return Err(Error::Dimension(format!("expected token matrix, got shape {shape:?}")));
    }
    let mut out = shape[..shape.len() - 2].to_vec();
    out.push(shape[shape.len() - 2] * shape[shape.len() - 1]);
    tape.reshape(v, &out)
}

/// `softmax(q·kᵀ / √d)` with `d` the shared last-axis width.
fn attention_weights(tape: &mut Tape, q: Var, k: Var) -> Result<Var> {
    let d = *tape.shape(q).last().expect("rank checked by matmul");
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    tape.softmax_rows(scaled)
}

/// `softmax(V·Vᵀ/√d)·V` with no learned projections.
pub fn self_attn(tape: &mut Tape, v: Var) -> Result<Var> {
    let w = attention_weights(tape, v, v)?;
    tape.matmul(w, v)
}

/// `softmax(A·Bᵀ/√d)·B`: rows of `a` attend over rows of `b`.
pub fn cross_attn(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() < 2 || sa.len() != sb.len() || sa.last() != sb.last() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
        return Err(Error::Shape {
            op: "cross_attn",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let w = attention_weights(tape, a, b)?;
    tape.matmul(w, b)
}

/// Learnable weights of one differential-attention layer.
///
/// `w_q`, `w_k`, `w_v` are `d_model × 2d`; `lambda` is a rank-0 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffAttnParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub lambda: Tensor,
    pub d: usize,
    pub d_model: usize,
}

impl DiffAttnParams {
    pub fn new(w_q: Tensor, w_k: Tensor, w_v: Tensor, lambda: Tensor) -> Result<Self> {
        let shape = w_q.shape().to_vec();
        if shape.len() != 2 || !shape[1].is_multiple_of(2) {
            return Err(Error::Dimension(format!("W^Q must be d_model × 2d, got {shape:?}")));
        }
        for (name, w) in [("W^K", &w_k), ("W^V", &w_v)] {
            if w.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: name,
                    lhs: shape.clone(),
                    rhs: w.shape().to_vec(),
                });
            }
        }
        if lambda.numel() != 1 {
            return Err(Error::Dimension("lambda must be a scalar".into()));
        }
        Ok(Self {
            d: shape[1] / 2,
            d_model: shape[0],
            w_q,
            w_k,
            w_v,
            lambda,
        })
    }

    /// Records the weights as tracked leaves.
    pub fn bind(&self, tape: &mut Tape) -> DiffAttnVars {
        DiffAttnVars {
            w_q: tape.param(&self.w_q),
            w_k: tape.param(&self.w_k),
            w_v: tape.param(&self.w_v),
            lambda: tape.param(&self.lambda),
            d: self.d,
        }
    }
}

/// [`DiffAttnParams`] recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DiffAttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub lambda: Var,
    pub d: usize,
}

/// The mixing matrix `softmax(Q₁K₁ᵀ/√d) − λ·softmax(Q₂K₂ᵀ/√d)`, `[.., N, N]`.
///
/// The first `d` projected columns form branch 1, the last `d` branch 2.
pub fn diff_attn_weights(tape: &mut Tape, x: Var, p: &DiffAttnVars) -> Result<Var> {
    let d_model = tape.shape(p.w_q)[0];
    if tape.shape(x).last() != Some(&d_model) {
        return Err(Error::Shape {
            op: "diff_attn",
            lhs: tape.shape(x).to_vec(),
            rhs: tape.shape(p.w_q).to_vec(),
        });
    }
    let q = tape.matmul(x, p.w_q)?;
    let k = tape.matmul(x, p.w_k)?;
    let q1 = tape.slice_last(q, 0, p.d)?;
    let q2 = tape.slice_last(q, p.d, p.d)?;
    let k1 = tape.slice_last(k, 0, p.d)?;
    let k2 = tape.slice_last(k, p.d, p.d)?;
    let a1 = attention_weights(tape, q1, k1)?;
    let a2 = attention_weights(tape, q2, k2)?;
    let a2 = tape.scale_by(a2, p.lambda)?;
    tape.sub(a1, a2)
}

/// Differential attention: `[.., N, d_model]` → `[.., N, 2d]`.
pub fn diff_attn(tape: &mut Tape, x: Var, p: &DiffAttnVars) -> Result<Var> {
    let mix = diff_attn_weights(tape, x, p)?;
    let v = tape.matmul(x, p.w_v)?;
    tape.matmul(mix, v)
}
