use serde::{Deserialize, Serialize};

use super::unlock::{unlock_components, UnlockSelector};
use super::vit::{init_vit, vit_encode, ViTConfig, VIT_PREFIX};
use crate::error::{Error, Result};
use crate::lens::{
    init_perceiver, init_point_embed, lens_param_count, perceiver_forward, point_embed,
    PerceiverConfig, PointEmbedConfig,
};
use crate::nn::{init_linear, linear, mlp_hidden};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Binder, ParamStore};
use crate::pointcloud::{make_patches, normalize_cloud, PatchConfig, PointCloud, PointPatchSet};

pub const HEAD_PROJ: &str = "head.proj";

/// Which stages turn patches into the joint-space feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineVariant {
    /// Point embedding → Perceiver → ViT.
    #[default]
    Full,
    /// Point embedding → Perceiver → mean over latents → learned projection.
    PerceiverOnly,
    /// Point embedding tokens straight into the ViT.
    PointembedToVit,
}

impl std::fmt::Display for PipelineVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PipelineVariant::Full => "full",
            PipelineVariant::PerceiverOnly => "perceiver_only",
            PipelineVariant::PointembedToVit => "pointembed_to_vit",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub patch: PatchConfig,
    pub point_embed: PointEmbedConfig,
    pub perceiver: PerceiverConfig,
    pub vit: ViTConfig,
    pub variant: PipelineVariant,
    pub unlock: UnlockSelector,
    /// Seed of the trainable lens initialization.
    pub lens_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            patch: PatchConfig::default(),
            point_embed: PointEmbedConfig::default(),
            perceiver: PerceiverConfig::default(),
            vit: ViTConfig::default(),
            variant: PipelineVariant::Full,
            unlock: UnlockSelector::None,
            lens_seed: 7,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.point_embed.validate()?;
        self.vit.validate()?;
        match self.variant {
            PipelineVariant::Full => {
                self.perceiver.validate()?;
                if self.perceiver.latent_dim != self.vit.embed_dim {
                    return Err(Error::Config(format!(
                        "perceiver.latent_dim {} must equal vit.embed_dim {}",
                        self.perceiver.latent_dim, self.vit.embed_dim
                    )));
                }
            }
            PipelineVariant::PerceiverOnly => self.perceiver.validate()?,
            PipelineVariant::PointembedToVit => {
                if self.patch.n_groups != self.vit.pretrained_seq_len {
                    return Err(Error::Config(format!(
                        "pointembed_to_vit needs patch.n_groups ({}) == vit.pretrained_seq_len ({})",
                        self.patch.n_groups, self.vit.pretrained_seq_len
                    )));
                }
                if self.point_embed.token_dim != self.vit.embed_dim {
                    return Err(Error::Config(format!(
                        "pointembed_to_vit needs point_embed.token_dim ({}) == vit.embed_dim ({})",
                        self.point_embed.token_dim, self.vit.embed_dim
                    )));
                }
            }
        }
        if self.variant != PipelineVariant::PerceiverOnly {
            self.unlock.validate(self.vit.n_blocks)?;
        }
        Ok(())
    }

    pub fn uses_perceiver(&self) -> bool {
        self.variant != PipelineVariant::PointembedToVit
    }

    pub fn uses_vit(&self) -> bool {
        self.variant != PipelineVariant::PerceiverOnly
    }

    /// Trainable lens parameters (point embedding, latents, Perceiver).
    pub fn lens_param_count(&self) -> usize {
        if self.uses_perceiver() {
            lens_param_count(&self.point_embed, &self.perceiver)
        } else {
            self.point_embed.param_count()
        }
    }

    /// Rough multiply-add count of one forward pass, times two.
    pub fn forward_flops(&self) -> u64 {
        let pe = &self.point_embed;
        let (g, k) = (self.patch.n_groups as u64, self.patch.group_size as u64);
        let (h, c, din) = (
            pe.hidden_dim as u64,
            pe.center_dim as u64,
            pe.token_dim as u64,
        );
        let mut macs =
            g * k * (3 * h + h * h + 2 * h * h + h * h) + g * (3 * c + c * c + (h + c) * din);
        let mut seq = g;
        if self.uses_perceiver() {
            let p = &self.perceiver;
            let (m, d) = (p.n_latents as u64, p.latent_dim as u64);
            let hid = mlp_hidden(p.latent_dim, p.mlp_ratio) as u64;
            let cross = 2 * m * d * d + 2 * g * din * d + 2 * m * g * d;
            let self_attn = 4 * m * d * d + 2 * m * m * d;
            let ff = 2 * m * d * hid;
            macs += p.depth as u64 * (cross + p.self_attn_per_block as u64 * self_attn + ff);
            seq = m;
        }
        if self.uses_vit() {
            let v = &self.vit;
            let n = seq + 1;
            let d = v.embed_dim as u64;
            let hid = mlp_hidden(v.embed_dim, v.mlp_ratio) as u64;
            macs += v.n_blocks as u64 * (4 * n * d * d + 2 * n * n * d + 2 * n * d * hid);
            macs += d * v.joint_dim as u64;
        } else {
            macs += self.perceiver.latent_dim as u64 * self.vit.joint_dim as u64;
        }
        2 * macs
    }
}

/// Parameters and configuration of the shape encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPipeline {
    pub config: PipelineConfig,
    pub params: ParamStore,
}

impl EncoderPipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let seed = config.lens_seed;
        init_point_embed(&mut params, &config.point_embed, seed);
        if config.uses_perceiver() {
            init_perceiver(
                &mut params,
                &config.perceiver,
                config.point_embed.token_dim,
                seed,
            );
        }
        if config.uses_vit() {
            init_vit(&mut params, &config.vit);
            unlock_components(&mut params, &config.vit, config.unlock)?;
        } else {
            init_linear(
                &mut params,
                HEAD_PROJ,
                config.perceiver.latent_dim,
                config.vit.joint_dim,
                None,
                seed,
                true,
            );
        }
        Ok(Self { config, params })
    }

    pub fn joint_dim(&self) -> usize {
        self.config.vit.joint_dim
    }

    pub fn set_unlock(&mut self, selector: UnlockSelector) -> Result<usize> {
        if !self.config.uses_vit() {
            return Err(Error::Config(
                "the perceiver_only variant has no ViT to unlock".into(),
            ));
        }
        let n = unlock_components(&mut self.params, &self.config.vit, selector)?;
        self.config.unlock = selector;
        Ok(n)
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Content hash of every ViT tensor.
    pub fn vit_hash(&self) -> String {
        self.params.content_hash(VIT_PREFIX)
    }

    /// Normalizes the cloud and splits it into patches.
    pub fn patchify(&self, pc: &PointCloud) -> Result<PointPatchSet> {
        make_patches(&normalize_cloud(pc), &self.config.patch)
    }

    /// Records the encoder on `tape`; returns the `[1×joint_dim]` feature.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder<'_>,
        patches: &PointPatchSet,
    ) -> Result<Var> {
        let cfg = &self.config;
        if patches.n_groups() != cfg.patch.n_groups || patches.group_size != cfg.patch.group_size {
            return Err(Error::shape(
                "encode_shape",
                format!(
                    "patch set {}x{} vs config {}x{}",
                    patches.n_groups(),
                    patches.group_size,
                    cfg.patch.n_groups,
                    cfg.patch.group_size
                ),
            ));
        }
        let tokens = point_embed(tape, binder, patches, &cfg.point_embed)?;
        match cfg.variant {
            PipelineVariant::Full => {
                let latents = perceiver_forward(tape, binder, tokens, &cfg.perceiver)?;
                vit_encode(tape, binder, latents, &cfg.vit, cfg.vit.use_pos_embed)
            }
            PipelineVariant::PerceiverOnly => {
                let latents = perceiver_forward(tape, binder, tokens, &cfg.perceiver)?;
                let pooled = tape.mean_rows(latents)?;
                linear(tape, binder, pooled, HEAD_PROJ)
            }
            PipelineVariant::PointembedToVit => {
                vit_encode(tape, binder, tokens, &cfg.vit, cfg.vit.use_pos_embed)
            }
        }
    }

    /// Unnormalized joint-space feature of a patch set.
    pub fn encode_patches(&self, patches: &PointPatchSet) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let out = self.forward(&mut tape, &mut binder, patches)?;
        if let Some(msg) = tape.non_finite() {
            return Err(Error::Numeric(msg.to_string()));
        }
        let v = tape.value(out).clone();
        let n = v.numel();
        v.reshape(vec![n])
    }
}

/// Normalize → patchify → encode; returns the `joint_dim` feature before
/// normalization.
pub fn encode_shape(pc: &PointCloud, pipe: &EncoderPipeline) -> Result<Tensor> {
    let patches = pipe.patchify(pc)?;
    pipe.encode_patches(&patches)
}
