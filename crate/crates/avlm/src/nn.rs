//! Shared transformer building blocks used by the visual encoder and the
//! decoder LM. Parameters are addressed by dot-separated name so freeze
//! schedules can select them by prefix.

use crate::error::Result;
use crate::numerics::param::{Binder, ParamStore};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{Scalar, Tensor};

/// Forward-pass context: the tape being built, the parameter store backing
/// it, and the binder that caches one leaf per parameter per tape.
pub struct Ctx<'a, S: Scalar> {
    pub tape: &'a mut Tape<S>,
    pub store: &'a ParamStore<S>,
    pub binder: &'a mut Binder,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(tape: &'a mut Tape<S>, store: &'a ParamStore<S>, binder: &'a mut Binder) -> Self {
        Self { tape, store, binder }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.binder.var(self.tape, self.store, name)
    }

    /// x·W + b with parameters looked up as `{prefix}.W` / `{prefix}.b`.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.W"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.tape.linear(x, w, b)
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        self.tape.layer_norm(x, g, b, 1e-5)
    }
}

/// Multi-head self-attention over `x` ([S×D]); splits heads by column range.
pub fn self_attention<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    x: Var,
    prefix: &str,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let (_, d) = ctx.tape.value(x).dims2()?;
    assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
    let dh = d / heads;
    let q = ctx.linear(x, &format!("{prefix}.q"))?;
    let k = ctx.linear(x, &format!("{prefix}.k"))?;
    let v = ctx.linear(x, &format!("{prefix}.v"))?;
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (from, to) = (h * dh, (h + 1) * dh);
        let qh = ctx.tape.slice_cols(q, from, to)?;
        let kh = ctx.tape.slice_cols(k, from, to)?;
        let vh = ctx.tape.slice_cols(v, from, to)?;
        let kt = ctx.tape.transpose(kh)?;
        let scores = ctx.tape.matmul(qh, kt)?;
        let scaled = ctx.tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let masked = if causal { ctx.tape.add_causal_mask(scaled)? } else { scaled };
        let attn = ctx.tape.softmax_rows(masked)?;
        head_outs.push(ctx.tape.matmul(attn, vh)?);
    }
    let cat = ctx.tape.concat_cols(&head_outs)?;
    ctx.linear(cat, &format!("{prefix}.o"))
}

/// Pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
pub fn transformer_block<S: Scalar>(
    ctx: &mut Ctx<'_, S>,
    x: Var,
    prefix: &str,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let normed = ctx.layer_norm(x, &format!("{prefix}.ln1"))?;
    let attn = self_attention(ctx, normed, &format!("{prefix}.attn"), heads, causal)?;
    let x = ctx.tape.add(x, attn)?;
    let normed = ctx.layer_norm(x, &format!("{prefix}.ln2"))?;
    let hidden = ctx.linear(normed, &format!("{prefix}.mlp.fc1"))?;
    let act = ctx.tape.gelu(hidden)?;
    let mlp = ctx.linear(act, &format!("{prefix}.mlp.fc2"))?;
    ctx.tape.add(x, mlp)
}

/// Registers the parameters of one transformer block under `prefix`.
pub fn init_block_params<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    d: usize,
    mlp_mult: usize,
    std: f64,
    rng: &mut impl rand::Rng,
) {
    store.insert(&format!("{prefix}.ln1.g"), Tensor::full(&[d], S::one()));
    store.insert(&format!("{prefix}.ln1.b"), Tensor::zeros(&[d]));
    for proj in ["q", "k", "v", "o"] {
        store.insert(&format!("{prefix}.attn.{proj}.W"), Tensor::randn(&[d, d], std, rng));
        store.insert(&format!("{prefix}.attn.{proj}.b"), Tensor::zeros(&[d]));
    }
    store.insert(&format!("{prefix}.ln2.g"), Tensor::full(&[d], S::one()));
    store.insert(&format!("{prefix}.ln2.b"), Tensor::zeros(&[d]));
    let hidden = d * mlp_mult;
    store.insert(&format!("{prefix}.mlp.fc1.W"), Tensor::randn(&[d, hidden], std, rng));
    store.insert(&format!("{prefix}.mlp.fc1.b"), Tensor::zeros(&[hidden]));
    store.insert(&format!("{prefix}.mlp.fc2.W"), Tensor::randn(&[hidden, d], std, rng));
    store.insert(&format!("{prefix}.mlp.fc2.b"), Tensor::zeros(&[d]));
}
