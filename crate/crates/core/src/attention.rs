//! The three itinerary-aware attention mechanisms.
//!
//! * profile → itinerary: bilinear scaled attention with the profile
//!   embedding as query and the order embeddings as keys and values;
//! * itinerary self-attention: `N`-head scaled dot-product attention over
//!   the orders, projected by `W_O` and mean-pooled over positions;
//! * (intention ⊕ preference) → behavior: bilinear scaled attention over the
//!   behavior items, which yields a zero vector for an empty behavior list.
//!
//! All functions take parameters already placed on the tape so that they can
//! be driven with hand-built matrices.

use crate::autodiff::{Tape, Var};
use crate::error::{FitError, Result};

/// Context vector plus the attention distribution that produced it.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub context: Var,
    /// `1 × n` weights, absent when there was nothing to attend over.
    pub weights: Option<Var>,
}

/// Projection matrices of one self-attention head, each `D_e × D_m/N`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

#[derive(Clone, Debug)]
pub struct SelfAttended {
    /// `1 × D_m` mean-pooled output.
    pub pooled: Var,
    /// Per-head `|I| × |I|` attention matrices.
    pub head_weights: Vec<Var>,
}

/// `softmax(q·W·Kᵀ / √d)·K` over the rows `keys`.
fn bilinear(tape: &mut Tape, query: Var, w: Var, keys: &[Var], scale_dim: usize) -> Result<Attended> {
    let stacked = tape.stack_rows(keys)?;
    let projected = tape.matmul(query, w)?;
    let kt = tape.transpose(stacked);
    let raw = tape.matmul(projected, kt)?;
    let scaled = tape.scale(raw, 1.0 / (scale_dim as f64).sqrt());
    let weights = tape.softmax(scaled)?;
    let context = tape.matmul(weights, stacked)?;
    Ok(Attended {
        context,
        weights: Some(weights),
    })
}

/// Profile-to-itinerary attention with `score_l = e_P · W₁ · e(o_l)ᵀ`.
pub fn profile_itinerary_attention(
    tape: &mut Tape,
    w1: Var,
    e_p: Var,
    orders: &[Var],
    scale_dim: usize,
) -> Result<Attended> {
    if orders.is_empty() {
        return Err(FitError::invalid("itinerary attention over zero orders"));
    }
    bilinear(tape, e_p, w1, orders, scale_dim)
}

/// `v_i = context ⊕ e_P`
pub fn intention_vector(tape: &mut Tape, context: Var, e_p: Var) -> Result<Var> {
    tape.concat(&[context, e_p])
}

/// Multi-head self-attention over the orders, projected by `W_O` and
/// mean-pooled over positions.
pub fn multi_head_self_attention(
    tape: &mut Tape,
    heads: &[HeadVars],
    w_o: Var,
    orders: &[Var],
) -> Result<SelfAttended> {
    if orders.is_empty() {
        return Err(FitError::invalid("self-attention over zero orders"));
    }
    if heads.is_empty() {
        return Err(FitError::invalid("self-attention with zero heads"));
    }
    let e = tape.stack_rows(orders)?;
    let mut outputs = Vec::with_capacity(heads.len());
    let mut head_weights = Vec::with_capacity(heads.len());
    for h in heads {
        let q = tape.matmul(e, h.query)?;
        let k = tape.matmul(e, h.key)?;
        let v = tape.matmul(e, h.value)?;
        let head_dim = tape.shape(q).1;
        let kt = tape.transpose(k);
        let raw = tape.matmul(q, kt)?;
        let scaled = tape.scale(raw, 1.0 / (head_dim as f64).sqrt());
        let a = tape.softmax(scaled)?;
        outputs.push(tape.matmul(a, v)?);
        head_weights.push(a);
    }
    let joined = tape.concat(&outputs)?;
    let projected = tape.matmul(joined, w_o)?;
    let pooled = tape.mean_rows(projected)?;
    Ok(SelfAttended {
        pooled,
        head_weights,
    })
}

/// Behavior attention with `score_m = v_c · W₂ · e(t_m)ᵀ`; an empty behavior
/// sequence yields the zero vector of width `behavior_dim`.
pub fn behavior_attention(
    tape: &mut Tape,
    w2: Var,
    v_c: Var,
    items: &[Var],
    behavior_dim: usize,
    scale_dim: usize,
) -> Result<Attended> {
    if items.is_empty() {
        return Ok(Attended {
            context: tape.zeros(1, behavior_dim),
            weights: None,
        });
    }
    bilinear(tape, v_c, w2, items, scale_dim)
}

/// Mean of a list of row vectors, or zeros of width `dim` when empty.
pub fn mean_pool(tape: &mut Tape, rows: &[Var], dim: usize) -> Result<Var> {
    if rows.is_empty() {
        return Ok(tape.zeros(1, dim));
    }
    let stacked = tape.stack_rows(rows)?;
    tape.mean_rows(stacked)
}
