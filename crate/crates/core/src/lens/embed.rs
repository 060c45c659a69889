use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{init_linear, linear, linear_params};
use crate::numerics::{Tape, Var};
use crate::params::{Binder, ParamStore};
use crate::pointcloud::PointPatchSet;

pub const EMBED_PREFIX: &str = "lens.embed";

/// Widths of the per-patch point embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PointEmbedConfig {
    /// Width of both shared point-MLP stages.
    pub hidden_dim: usize,
    /// Width of the patch-center encoding MLP.
    pub center_dim: usize,
    /// Output token width.
    pub token_dim: usize,
}

impl Default for PointEmbedConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 16,
            center_dim: 16,
            token_dim: 32,
        }
    }
}

impl PointEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.center_dim == 0 || self.token_dim == 0 {
            return Err(Error::Config(format!(
                "point_embed dims must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (h, c, d) = (self.hidden_dim, self.center_dim, self.token_dim);
        linear_params(3, h)
            + linear_params(h, h)
            + linear_params(2 * h, h)
            + linear_params(h, h)
            + linear_params(3, c)
            + linear_params(c, c)
            + linear_params(h + c, d)
    }
}

pub fn init_point_embed(store: &mut ParamStore, cfg: &PointEmbedConfig, seed: u64) {
    let (h, c, d) = (cfg.hidden_dim, cfg.center_dim, cfg.token_dim);
    let p = EMBED_PREFIX;
    init_linear(store, &format!("{p}.local1"), 3, h, None, seed, true);
    init_linear(store, &format!("{p}.local2"), h, h, None, seed, true);
    init_linear(store, &format!("{p}.fuse1"), 2 * h, h, None, seed, true);
    init_linear(store, &format!("{p}.fuse2"), h, h, None, seed, true);
    init_linear(store, &format!("{p}.center1"), 3, c, None, seed, true);
    init_linear(store, &format!("{p}.center2"), c, c, None, seed, true);
    init_linear(store, &format!("{p}.out"), h + c, d, None, seed, true);
}

/// One token per patch.
///
/// Each patch's relative points go through a shared two-stage point MLP: the
/// first stage's max-pooled feature is appended to every point before the
/// second stage, whose output is max-pooled again. The pooled feature is
/// concatenated with an MLP encoding of the patch center and projected to
/// `token_dim`. Max pooling makes the token independent of point order.
pub fn point_embed(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    patches: &PointPatchSet,
    cfg: &PointEmbedConfig,
) -> Result<Var> {
    let k = patches.group_size;
    if patches.groups.len() != patches.n_groups() * k || k == 0 {
        return Err(Error::shape(
            "point_embed",
            format!(
                "{} points for {} groups of {k}",
                patches.groups.len(),
                patches.n_groups()
            ),
        ));
    }
    let w = binder.var(tape, &format!("{EMBED_PREFIX}.local1.w"))?;
    if tape.value(w).shape() != [3, cfg.hidden_dim] {
        return Err(Error::shape(
            "point_embed",
            format!(
                "local1 weight {:?} vs hidden_dim {}",
                tape.value(w).shape(),
                cfg.hidden_dim
            ),
        ));
    }
    let p = EMBED_PREFIX;
    let rel = tape.constant(patches.relative_tensor());
    let x = linear(tape, binder, rel, &format!("{p}.local1"))?;
    let x = tape.gelu(x);
    let per_point = linear(tape, binder, x, &format!("{p}.local2"))?;
    let pooled = tape.group_max(per_point, k)?;
    let spread = tape.group_broadcast(pooled, k)?;
    let fused = tape.concat_cols(per_point, spread)?;
    let x = linear(tape, binder, fused, &format!("{p}.fuse1"))?;
    let x = tape.gelu(x);
    let x = linear(tape, binder, x, &format!("{p}.fuse2"))?;
    let patch_feat = tape.group_max(x, k)?;

    let centers = tape.constant(patches.centers_tensor());
    let c = linear(tape, binder, centers, &format!("{p}.center1"))?;
    let c = tape.gelu(c);
    let c = linear(tape, binder, c, &format!("{p}.center2"))?;

    let joined = tape.concat_cols(patch_feat, c)?;
    let tokens = linear(tape, binder, joined, &format!("{p}.out"))?;
    if tape.value(tokens).shape()[1] != cfg.token_dim {
        return Err(Error::shape(
            "point_embed",
            "token width differs from config",
        ));
    }
    Ok(tokens)
}
