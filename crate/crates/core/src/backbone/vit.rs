use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    attention_block, init_layer_norm, init_linear, init_weight, layer_norm, linear_params, mlp,
    mlp_hidden,
};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{normal_tensor, Binder, ParamStore};

pub const VIT_PREFIX: &str = "vit.";
pub const VIT_CLS: &str = "vit.cls";
pub const VIT_POS: &str = "vit.pos_embed";
pub const VIT_PROJ: &str = "vit.proj";
pub const VIT_FINAL_NORM: &str = "vit.final_norm";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViTConfig {
    /// Patch-token count the position table was built for.
    pub pretrained_seq_len: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub joint_dim: usize,
    pub use_pos_embed: bool,
    /// Seed of the stand-in pretrained weights.
    pub seed: u64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            pretrained_seq_len: 16,
            embed_dim: 32,
            n_blocks: 4,
            n_heads: 4,
            mlp_ratio: 2.0,
            joint_dim: 32,
            use_pos_embed: true,
            seed: 1234,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads)
        {
            return Err(Error::Config(format!(
                "vit.embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.pretrained_seq_len == 0 || self.joint_dim == 0 {
            return Err(Error::Config(
                "vit.pretrained_seq_len and joint_dim must be >= 1".into(),
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("vit.mlp_ratio must be > 0".into()));
        }
        Ok(())
    }

    pub fn block_prefix(block: usize) -> String {
        format!("vit.blocks.{block:02}")
    }

    pub fn block_param_count(&self) -> usize {
        let d = self.embed_dim;
        let hid = mlp_hidden(d, self.mlp_ratio);
        4 * d + 3 * linear_params(d, d) + d * d + linear_params(d, hid) + linear_params(hid, d)
    }

    pub fn total_param_count(&self) -> usize {
        let d = self.embed_dim;
        d + (self.pretrained_seq_len + 1) * d
            + self.n_blocks * self.block_param_count()
            + 2 * d
            + d * self.joint_dim
    }
}

/// Registers the stand-in pretrained ViT, all frozen.
pub fn init_vit(store: &mut ParamStore, cfg: &ViTConfig) {
    let d = cfg.embed_dim;
    let seed = cfg.seed;
    store.insert(VIT_CLS, normal_tensor(seed, VIT_CLS, &[1, d], 1.0), false);
    store.insert(
        VIT_POS,
        normal_tensor(seed, VIT_POS, &[cfg.pretrained_seq_len + 1, d], 0.1),
        false,
    );
    let hid = mlp_hidden(d, cfg.mlp_ratio);
    let out_std = 0.5 / (d as f64).sqrt();
    for b in 0..cfg.n_blocks {
        let p = ViTConfig::block_prefix(b);
        init_layer_norm(store, &format!("{p}.ln1"), d, false);
        init_linear(store, &format!("{p}.attn.wq"), d, d, None, seed, false);
        init_weight(store, &format!("{p}.attn.wk"), d, d, seed, false);
        init_linear(store, &format!("{p}.attn.wv"), d, d, None, seed, false);
        init_linear(
            store,
            &format!("{p}.attn.wo"),
            d,
            d,
            Some(out_std),
            seed,
            false,
        );
        init_layer_norm(store, &format!("{p}.ln2"), d, false);
        init_linear(store, &format!("{p}.mlp.fc1"), d, hid, None, seed, false);
        init_linear(
            store,
            &format!("{p}.mlp.fc2"),
            hid,
            d,
            Some(0.5 / (hid as f64).sqrt()),
            seed,
            false,
        );
    }
    init_layer_norm(store, VIT_FINAL_NORM, d, false);
    store.insert(
        VIT_PROJ,
        normal_tensor(seed, VIT_PROJ, &[d, cfg.joint_dim], 1.0 / (d as f64).sqrt()),
        false,
    );
}

/// Linear weights that resample `s` patch positions to `m`, as an
/// `(m+1)×(s+1)` matrix whose row/column 0 carry the CLS position verbatim.
///
/// Endpoints are preserved for `m >= 2`; a single output row takes the
/// midpoint of the table.
pub fn pos_interpolation_matrix(s: usize, m: usize) -> Tensor {
    let mut w = Tensor::zeros(&[m + 1, s + 1]);
    let cols = s + 1;
    let data = w.data_mut();
    data[0] = 1.0;
    for i in 0..m {
        let row = (i + 1) * cols;
        // Source position expressed as lo + rem/den, all in integers.
        let (num, den) = if m == 1 {
            (s - 1, 2)
        } else {
            (i * (s - 1), m - 1)
        };
        let (lo, rem) = if s == 1 {
            (0, 0)
        } else {
            (num / den, num % den)
        };
        if rem == 0 {
            data[row + 1 + lo] = 1.0;
        } else {
            let frac = rem as f64 / den as f64;
            data[row + 1 + lo] = 1.0 - frac;
            data[row + 2 + lo] = frac;
        }
    }
    w
}

/// Resamples the patch rows of a `(S+1)×D` position table to `M` rows,
/// keeping the CLS row. `M == S` returns the table unchanged.
pub fn interpolate_pos_embed(pos: &Tensor, m: usize) -> Result<Tensor> {
    let (rows, d) = pos.dims2("interpolate_pos_embed")?;
    if rows < 2 {
        return Err(Error::shape(
            "interpolate_pos_embed",
            "table needs a CLS row and >= 1 patch row",
        ));
    }
    if m == 0 {
        return Err(Error::contract("interpolate_pos_embed", "M must be >= 1"));
    }
    let s = rows - 1;
    if m == s {
        return Ok(pos.clone());
    }
    let w = pos_interpolation_matrix(s, m);
    let mut out = Vec::with_capacity((m + 1) * d);
    for i in 0..=m {
        let wrow = &w.data()[i * rows..(i + 1) * rows];
        let nz: Vec<(usize, f64)> = wrow
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, v)| *v != 0.0)
            .collect();
        match nz.as_slice() {
            [(j, _)] => out.extend_from_slice(pos.row(*j)),
            [(a, wa), (b, _)] => {
                let frac = 1.0 - wa;
                let (ra, rb) = (pos.row(*a), pos.row(*b));
                out.extend(ra.iter().zip(rb).map(|(x, y)| x + frac * (y - x)));
            }
            _ => unreachable!("each row mixes at most two positions"),
        }
    }
    Tensor::new(vec![m + 1, d], out)
}

/// CLS + latents through the ViT; returns the projected CLS output `[1×joint_dim]`.
pub fn vit_encode(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    latents: Var,
    cfg: &ViTConfig,
    use_pos: bool,
) -> Result<Var> {
    let (m, d) = tape.value(latents).dims2("vit_encode")?;
    if d != cfg.embed_dim {
        return Err(Error::shape(
            "vit_encode",
            format!("latent width {d} vs vit.embed_dim {}", cfg.embed_dim),
        ));
    }
    let cls = binder.var(tape, VIT_CLS)?;
    let mut x = tape.concat_rows(&[cls, latents])?;
    if use_pos {
        let pos = binder.var(tape, VIT_POS)?;
        let s = tape.value(pos).shape()[0] - 1;
        let w = tape.constant(pos_interpolation_matrix(s, m));
        let p = tape.matmul(w, pos)?;
        x = tape.add(x, p)?;
    }
    for b in 0..cfg.n_blocks {
        let p = ViTConfig::block_prefix(b);
        let y = layer_norm(tape, binder, x, &format!("{p}.ln1"))?;
        let o = attention_block(tape, binder, y, y, cfg.n_heads, &format!("{p}.attn"))?;
        x = tape.add(x, o)?;
        let y = layer_norm(tape, binder, x, &format!("{p}.ln2"))?;
        let o = mlp(tape, binder, y, &format!("{p}.mlp"))?;
        x = tape.add(x, o)?;
    }
    let x = layer_norm(tape, binder, x, VIT_FINAL_NORM)?;
    let cls_out = tape.slice_rows(x, 0, 1)?;
    let proj = binder.var(tape, VIT_PROJ)?;
    tape.matmul(cls_out, proj)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_length_is_identity() {
        let pos = normal_tensor(3, "p", &[6, 4], 1.0);
        assert_eq!(interpolate_pos_embed(&pos, 5).unwrap(), pos);
        assert_eq!(pos_interpolation_matrix(5, 5), Tensor::eye(6));
    }

    #[test]
    fn downsample_keeps_endpoints() {
        let pos = Tensor::from_rows(&[vec![9.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let out = interpolate_pos_embed(&pos, 2).unwrap();
        assert_eq!(out.data(), &[9.0, 1.0, 3.0]);
    }

    #[test]
    fn registered_count_matches_formula() {
        let cfg = ViTConfig {
            mlp_ratio: 1.5,
            ..ViTConfig::default()
        };
        let mut s = ParamStore::new();
        init_vit(&mut s, &cfg);
        assert_eq!(s.numel_where(|_| true), cfg.total_param_count());
        assert_eq!(s.trainable_count(), 0);
    }
}
