//! Text cross-attention and its region-masked, per-character form.

use crate::autograd::{EmbedRow, Tape, Var};
use crate::error::{Error, Result};
use crate::prompt::TextEmbedding;
use crate::tensor::{Scalar, Tensor};

/// Projections of one cross-attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T: Scalar = f32> {
    /// `[channels, d_attn]`
    pub w_q: Tensor<T>,
    /// `[d_text, d_attn]`
    pub w_k: Tensor<T>,
    /// `[d_text, d_attn]`
    pub w_v: Tensor<T>,
    /// `[d_attn, channels]`
    pub w_o: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    fn bind(&self, tape: &mut Tape<T>) -> [Var; 4] {
        [
            tape.leaf(self.w_q.clone()),
            tape.leaf(self.w_k.clone()),
            tape.leaf(self.w_v.clone()),
            tape.leaf(self.w_o.clone()),
        ]
    }
}

/// Masked sum of per-branch cross-attention outputs on a tape:
/// `Σ_i attn(h, e_i) ⊙ M_i`, accumulated in ascending branch order.
///
/// `texts` holds `(embedding, token count)` pairs and `masks` the matching
/// `[frames, h, w]` weights. When `trace` is given, every unmasked branch
/// output is pushed to it.
pub fn masked_cross_attention<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    texts: &[(Var, usize)],
    masks: &[Tensor<T>],
    weights: [Var; 4],
    mut trace: Option<&mut Vec<Var>>,
) -> Result<Var> {
    if texts.is_empty() || texts.len() != masks.len() {
        return Err(Error::shape(format!(
            "{} text branches for {} masks",
            texts.len(),
            masks.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (&(e, tokens), mask) in texts.iter().zip(masks) {
        let branch = tape.cross_attention(h, e, tokens, weights)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(branch);
        }
        let term = tape.mask_mul(branch, mask)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one branch"))
}

fn embedding_var<T: Scalar>(tape: &mut Tape<T>, e: &TextEmbedding<T>) -> (Var, usize) {
    (tape.leaf(e.matrix.clone()), e.tokens)
}

/// Single-prompt cross-attention on `[frames, channels, h, w]` hidden
/// states, output-projected, without the residual.
pub fn cross_attention_block<T: Scalar>(
    h: &Tensor<T>,
    e: &TextEmbedding<T>,
    p: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let ev = embedding_var(&mut tape, e);
    let w = p.bind(&mut tape);
    let out = tape.cross_attention(hv, ev.0, ev.1, w)?;
    Ok(tape.value(out).clone())
}

/// Per-character cross-attention blended by region masks. All branches
/// share `p`; masks must form a partition of unity within `1e-3`.
pub fn spatial_aligned_cross_attention<T: Scalar>(
    h: &Tensor<T>,
    embeddings: &[TextEmbedding<T>],
    masks: &[Tensor<T>],
    p: &AttentionParams<T>,
) -> Result<Tensor<T>> {
    let (f, hh, ww) = match h.dims() {
        [f, _, hh, ww] => (*f, *hh, *ww),
        d => return Err(Error::shape(format!("hidden states must be [f, c, h, w], got {d:?}"))),
    };
    for m in masks {
        if m.dims() != [f, hh, ww] {
            return Err(Error::shape(format!(
                "mask {:?} does not match hidden states {:?}",
                m.dims(),
                h.dims()
            )));
        }
    }
    let tol = T::from_f64_lossy(1e-3);
    for p in 0..f * hh * ww {
        let s = masks.iter().fold(T::zero(), |a, m| a + m.data()[p]);
        if (s - T::one()).abs() > tol {
            return Err(Error::Validation(format!(
                "masks sum to {s:?} at flat position {p}, expected 1"
            )));
        }
    }
    let mut tape = Tape::new();
    let hv = tape.leaf(h.clone());
    let texts: Vec<(Var, usize)> = embeddings.iter().map(|e| embedding_var(&mut tape, e)).collect();
    let w = p.bind(&mut tape);
    let out = masked_cross_attention(&mut tape, hv, &texts, masks, w, None)?;
    Ok(tape.value(out).clone())
}

/// Tape-side text input: lookup rows against a learned table plus the
/// number of real tokens.
#[derive(Debug, Clone)]
pub struct TextRows<T> {
    pub rows: Vec<EmbedRow<T>>,
    pub tokens: usize,
}
