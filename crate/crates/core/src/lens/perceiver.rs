use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    attention_block, init_layer_norm, init_linear, init_weight, layer_norm, linear_params, mlp,
    mlp_hidden,
};
use crate::numerics::{Tape, Var};
use crate::params::{truncated_normal_tensor, Binder, ParamStore};

pub const LATENTS: &str = "lens.latents";
pub const PERCEIVER_PREFIX: &str = "lens.perceiver";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceiverConfig {
    pub n_latents: usize,
    pub latent_dim: usize,
    pub depth: usize,
    /// Blocks 2..depth reuse one parameter set; block 1 keeps its own.
    pub share_weights: bool,
    pub n_heads: usize,
    pub self_attn_per_block: usize,
    pub mlp_ratio: f64,
}

impl Default for PerceiverConfig {
    fn default() -> Self {
        Self {
            n_latents: 16,
            latent_dim: 32,
            depth: 4,
            share_weights: true,
            n_heads: 4,
            self_attn_per_block: 1,
            mlp_ratio: 2.0,
        }
    }
}

impl PerceiverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("perceiver.depth must be >= 1".into()));
        }
        if self.share_weights && self.depth < 2 {
            return Err(Error::Config(
                "perceiver.share_weights requires depth >= 2".into(),
            ));
        }
        if self.n_latents == 0 || self.latent_dim == 0 {
            return Err(Error::Config(
                "perceiver.n_latents and latent_dim must be >= 1".into(),
            ));
        }
        if self.n_heads == 0 || !self.latent_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "perceiver.latent_dim {} not divisible by n_heads {}",
                self.latent_dim, self.n_heads
            )));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("perceiver.mlp_ratio must be > 0".into()));
        }
        Ok(())
    }

    /// Number of distinct block parameter sets.
    pub fn param_sets(&self) -> usize {
        if self.share_weights {
            self.depth.min(2)
        } else {
            self.depth
        }
    }

    /// Parameter set used by block `block` (0-based).
    pub fn set_for_block(&self, block: usize) -> usize {
        if self.share_weights {
            block.min(1)
        } else {
            block
        }
    }

    pub fn mlp_hidden(&self) -> usize {
        mlp_hidden(self.latent_dim, self.mlp_ratio)
    }

    pub fn block_param_count(&self, token_dim: usize) -> usize {
        let d = self.latent_dim;
        let hid = self.mlp_hidden();
        let cross = 2 * d
            + 2 * token_dim
            + 2 * linear_params(d, d)
            + linear_params(token_dim, d)
            + token_dim * d;
        let self_attn = 2 * d + 3 * linear_params(d, d) + d * d;
        let ff = 2 * d + linear_params(d, hid) + linear_params(hid, d);
        cross + self.self_attn_per_block * self_attn + ff
    }
}

pub fn set_prefix(set: usize) -> String {
    format!("{PERCEIVER_PREFIX}.set{set}")
}

/// Registers the latent array and every block parameter set. Residual output
/// projections (`wo`, `fc2`) start at zero, so a fresh Perceiver returns its
/// latents unchanged.
pub fn init_perceiver(store: &mut ParamStore, cfg: &PerceiverConfig, token_dim: usize, seed: u64) {
    let d = cfg.latent_dim;
    store.insert(
        LATENTS,
        truncated_normal_tensor(seed, LATENTS, &[cfg.n_latents, d], 0.02),
        true,
    );
    let hid = cfg.mlp_hidden();
    for set in 0..cfg.param_sets() {
        let p = set_prefix(set);
        init_layer_norm(store, &format!("{p}.cross.ln_q"), d, true);
        init_layer_norm(store, &format!("{p}.cross.ln_kv"), token_dim, true);
        init_linear(store, &format!("{p}.cross.wq"), d, d, None, seed, true);
        init_weight(store, &format!("{p}.cross.wk"), token_dim, d, seed, true);
        init_linear(
            store,
            &format!("{p}.cross.wv"),
            token_dim,
            d,
            None,
            seed,
            true,
        );
        init_linear(store, &format!("{p}.cross.wo"), d, d, Some(0.0), seed, true);
        for s in 0..cfg.self_attn_per_block {
            let sp = format!("{p}.self{s}");
            init_layer_norm(store, &format!("{sp}.ln"), d, true);
            init_linear(store, &format!("{sp}.wq"), d, d, None, seed, true);
            init_weight(store, &format!("{sp}.wk"), d, d, seed, true);
            init_linear(store, &format!("{sp}.wv"), d, d, None, seed, true);
            init_linear(store, &format!("{sp}.wo"), d, d, Some(0.0), seed, true);
        }
        init_layer_norm(store, &format!("{p}.mlp.ln"), d, true);
        init_linear(store, &format!("{p}.mlp.fc1"), d, hid, None, seed, true);
        init_linear(
            store,
            &format!("{p}.mlp.fc2"),
            hid,
            d,
            Some(0.0),
            seed,
            true,
        );
    }
}

/// One Perceiver block with pre-norm residual sublayers: latents cross-attend
/// to the tokens, then `self_attn_per_block` latent self-attentions, then an MLP.
pub fn perceiver_block(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    set: usize,
    latents: Var,
    tokens: Var,
    cfg: &PerceiverConfig,
) -> Result<Var> {
    let (m, d) = tape.value(latents).dims2("perceiver_block")?;
    if d != cfg.latent_dim || m == 0 {
        return Err(Error::shape(
            "perceiver_block",
            format!("latents {m}x{d} vs latent_dim {}", cfg.latent_dim),
        ));
    }
    let p = set_prefix(set);
    let q = layer_norm(tape, binder, latents, &format!("{p}.cross.ln_q"))?;
    let kv = layer_norm(tape, binder, tokens, &format!("{p}.cross.ln_kv"))?;
    let o = attention_block(tape, binder, q, kv, cfg.n_heads, &format!("{p}.cross"))?;
    let mut x = tape.add(latents, o)?;
    for s in 0..cfg.self_attn_per_block {
        let sp = format!("{p}.self{s}");
        let y = layer_norm(tape, binder, x, &format!("{sp}.ln"))?;
        let o = attention_block(tape, binder, y, y, cfg.n_heads, &sp)?;
        x = tape.add(x, o)?;
    }
    let y = layer_norm(tape, binder, x, &format!("{p}.mlp.ln"))?;
    let o = mlp(tape, binder, y, &format!("{p}.mlp"))?;
    tape.add(x, o)
}

/// Runs `depth` blocks starting from the learned latent array.
pub fn perceiver_forward(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    tokens: Var,
    cfg: &PerceiverConfig,
) -> Result<Var> {
    let mut x = binder.var(tape, LATENTS)?;
    for block in 0..cfg.depth {
        x = perceiver_block(tape, binder, cfg.set_for_block(block), x, tokens, cfg)?;
    }
    Ok(x)
}
