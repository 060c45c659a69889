//! Finite-difference check of the whole encoder + contrastive loss.

use rand_distr::{Distribution, Normal};

use super::optim::LOGIT_SCALE;
use super::teacher::{TeacherConfig, Teachers};
use super::trainer::{prepare_triplets, record_batch_loss, PreparedOwned, Triplet};
use crate::backbone::{EncoderPipeline, PipelineConfig, ViTConfig};
use crate::error::Result;
use crate::lens::{PerceiverConfig, PointEmbedConfig};
use crate::numerics::{finite_diff_check, GradCheckOptions, GradCheckReport, Tensor};
use crate::params::{tensor_rng, Binder};
use crate::pointcloud::{synth_generate, PatchConfig, SyntheticSpec};

/// Smallest `full` pipeline worth checking: M=8 latents of width 16, two ViT blocks.
pub fn tiny_pipeline_config() -> PipelineConfig {
    PipelineConfig {
        patch: PatchConfig {
            n_sample: 64,
            n_groups: 8,
            group_size: 8,
            seed: 0,
        },
        point_embed: PointEmbedConfig {
            hidden_dim: 8,
            center_dim: 8,
            token_dim: 16,
        },
        perceiver: PerceiverConfig {
            n_latents: 8,
            latent_dim: 16,
            depth: 2,
            share_weights: false,
            n_heads: 2,
            self_attn_per_block: 1,
            mlp_ratio: 2.0,
        },
        vit: ViTConfig {
            pretrained_seq_len: 6,
            embed_dim: 16,
            n_blocks: 2,
            n_heads: 2,
            mlp_ratio: 2.0,
            joint_dim: 16,
            use_pos_embed: true,
            seed: 5,
        },
        ..PipelineConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct PipelineGradReport {
    /// Checked tensors, in report order; the last is the log logit scale.
    pub names: Vec<String>,
    pub report: GradCheckReport,
}

/// Adds small noise to every trainable tensor so that zero-initialized
/// branches carry gradient.
pub fn jitter_trainable(pipe: &mut EncoderPipeline, std: f64, seed: u64) {
    let names: Vec<String> = pipe.params.trainable_names().map(str::to_string).collect();
    let dist = Normal::new(0.0, std).expect("positive std");
    for name in names {
        let mut rng = tensor_rng(seed, &format!("jitter/{name}"));
        let t = pipe
            .params
            .get_mut(&name)
            .expect("trainable name from store");
        for v in t.data_mut() {
            *v += dist.sample(&mut rng);
        }
        t.quantize_f32();
    }
}

/// Builds `config`, jitters it, and compares autodiff against central
/// differences for every trainable tensor and the temperature on a batch of
/// `batch` synthetic shapes.
pub fn pipeline_gradcheck(
    config: &PipelineConfig,
    batch: usize,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<PipelineGradReport> {
    let mut pipe = EncoderPipeline::new(config.clone())?;
    jitter_trainable(&mut pipe, 0.05, seed);
    let spec = SyntheticSpec {
        points_per_cloud: 96,
        clouds_per_category: batch.div_ceil(4),
        seed,
        ..SyntheticSpec::default()
    };
    let names = spec.category_names();
    let triplets: Vec<Triplet> = synth_generate(&spec)?
        .into_iter()
        .take(batch)
        .map(|(pc, label)| Triplet {
            image_anchor: format!("rendering of a {}, view 1 of 12", names[label]),
            text_anchor: format!("a {}.", names[label]),
            points: pc,
        })
        .collect();
    let teachers = Teachers::new(TeacherConfig::default(), pipe.joint_dim());
    let prepared = prepare_triplets(&triplets, &pipe, &teachers)?;
    let refs: Vec<_> = prepared.iter().map(PreparedOwned::as_ref).collect();

    let mut checked: Vec<String> = pipe.params.trainable_names().map(str::to_string).collect();
    let mut params: Vec<Tensor> = checked
        .iter()
        .map(|n| pipe.params.expect(n).cloned())
        .collect::<Result<_>>()?;
    checked.push(LOGIT_SCALE.to_string());
    params.push(Tensor::new(vec![1], vec![(1.0f64 / 0.07).ln()])?);

    let pipe = &pipe;
    let f = |tape: &mut crate::numerics::Tape, vars: &[crate::numerics::Var]| {
        let mut binder = Binder::new(&pipe.params);
        for (name, v) in checked.iter().zip(vars) {
            binder.preset(name.clone(), *v);
        }
        Ok(record_batch_loss(tape, &mut binder, pipe, &refs)?.0)
    };
    let report = finite_diff_check(f, &params, opts)?;
    Ok(PipelineGradReport {
        names: checked,
        report,
    })
}
