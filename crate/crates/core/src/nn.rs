//! Layer building blocks over a [`Tape`] with parameters resolved by name.

use crate::error::Result;
use crate::numerics::{Tape, Var};
use crate::params::{filled_tensor, normal_tensor, Binder, ParamStore};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Registers `{prefix}.w` (`fan_in×fan_out`) and `{prefix}.b`.
///
/// `std = None` uses `1/sqrt(fan_in)`; `Some(0.0)` gives a zero-initialized layer.
pub(crate) fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    std: Option<f64>,
    seed: u64,
    trainable: bool,
) {
    let std = std.unwrap_or(1.0 / (fan_in as f64).sqrt());
    let w = format!("{prefix}.w");
    store.insert(
        w.clone(),
        normal_tensor(seed, &w, &[fan_in, fan_out], std),
        trainable,
    );
    store.insert(
        format!("{prefix}.b"),
        filled_tensor(&[fan_out], 0.0),
        trainable,
    );
}

/// Registers only the weight `{prefix}.w`.
pub(crate) fn init_weight(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    seed: u64,
    trainable: bool,
) {
    let w = format!("{prefix}.w");
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(
        w.clone(),
        normal_tensor(seed, &w, &[fan_in, fan_out], std),
        trainable,
    );
}

pub(crate) fn linear_params(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize, trainable: bool) {
    store.insert(format!("{prefix}.g"), filled_tensor(&[dim], 1.0), trainable);
    store.insert(format!("{prefix}.b"), filled_tensor(&[dim], 0.0), trainable);
}

pub(crate) fn linear(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    let w = binder.var(tape, &format!("{prefix}.w"))?;
    let b = binder.var(tape, &format!("{prefix}.b"))?;
    tape.linear(x, w, Some(b))
}

pub(crate) fn layer_norm(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    let g = binder.var(tape, &format!("{prefix}.g"))?;
    let b = binder.var(tape, &format!("{prefix}.b"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// Multi-head attention from already projected `q[m×D]`, `k[n×D]`, `v[n×D]`.
pub(crate) fn multi_head(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let qh = tape.split_heads(q, heads)?;
    let kh = tape.split_heads(k, heads)?;
    let vh = tape.split_heads(v, heads)?;
    let o = tape.attention(qh, kh, vh)?;
    tape.merge_heads(o)
}

/// Attention sublayer: projections `{prefix}.wq/.wk/.wv`, attention, then `{prefix}.wo`.
///
/// The key projection has no bias: a shared offset on every key shifts each
/// query's logits by a constant, which the softmax cancels.
pub(crate) fn attention_block(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    queries: Var,
    context: Var,
    heads: usize,
    prefix: &str,
) -> Result<Var> {
    let q = linear(tape, binder, queries, &format!("{prefix}.wq"))?;
    let wk = binder.var(tape, &format!("{prefix}.wk.w"))?;
    let k = tape.matmul(context, wk)?;
    let v = linear(tape, binder, context, &format!("{prefix}.wv"))?;
    let o = multi_head(tape, q, k, v, heads)?;
    linear(tape, binder, o, &format!("{prefix}.wo"))
}

/// Two-layer GELU MLP: `{prefix}.fc1`, `{prefix}.fc2`.
pub(crate) fn mlp(tape: &mut Tape, binder: &mut Binder<'_>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(tape, binder, x, &format!("{prefix}.fc1"))?;
    let h = tape.gelu(h);
    linear(tape, binder, h, &format!("{prefix}.fc2"))
}

pub(crate) fn mlp_hidden(dim: usize, ratio: f64) -> usize {
    ((dim as f64 * ratio).round() as usize).max(1)
}
