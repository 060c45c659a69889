use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::loss::{contrastive_loss_on_tape, LossBreakdown};
use super::optim::{apply_updates, AlignmentState, LOGIT_SCALE};
use super::teacher::{normalize_feature, TeacherEmbedder, Teachers};
use crate::backbone::EncoderPipeline;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor};
use crate::params::{fnv1a, tensor_rng, Binder};
use crate::pointcloud::{PointCloud, PointPatchSet};

/// One training sample `(P_i, I_i, T_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub points: PointCloud,
    /// Descriptor of the rendered view standing in for the anchor image.
    pub image_anchor: String,
    pub text_anchor: String,
}

/// How the per-category caption and view pools are built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    /// Caption templates; `{}` is replaced by the category name.
    pub caption_templates: Vec<String>,
    /// Rendered views per shape.
    pub n_views: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            caption_templates: [
                "a {}.",
                "a photo of a {}.",
                "a rendering of a {}.",
                "a {} shape.",
                "a simple {} object.",
                "a small {}.",
                "a large {}.",
            ]
            .map(String::from)
            .to_vec(),
            n_views: 12,
        }
    }
}

/// Caption and view-descriptor pools, one per category.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorPools {
    pub captions: Vec<Vec<String>>,
    pub views: Vec<Vec<String>>,
}

impl AnchorPools {
    pub fn new(categories: &[String], cfg: &AnchorConfig) -> Result<Self> {
        if cfg.caption_templates.is_empty() || cfg.n_views == 0 {
            return Err(Error::Config(
                "anchors need >= 1 caption template and >= 1 view".into(),
            ));
        }
        let captions = categories
            .iter()
            .map(|c| {
                cfg.caption_templates
                    .iter()
                    .map(|t| t.replace("{}", c))
                    .collect()
            })
            .collect();
        let views = categories
            .iter()
            .map(|c| {
                (0..cfg.n_views)
                    .map(|v| format!("rendering of a {c}, view {} of {}", v + 1, cfg.n_views))
                    .collect()
            })
            .collect();
        Ok(Self { captions, views })
    }
}

/// A shape with its patches precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub patches: PointPatchSet,
    pub label: usize,
}

/// Patchified training shapes plus cached teacher features for every anchor.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub samples: Vec<TrainSample>,
    pub pools: AnchorPools,
    image_cache: HashMap<String, Vec<f64>>,
    text_cache: HashMap<String, Vec<f64>>,
}

fn embed_normalized(teacher: &TeacherEmbedder, s: &str) -> Result<Vec<f64>> {
    Ok(normalize_feature(&teacher.embed(s)?)?.into_data())
}

impl TrainingSet {
    /// Patchifies `clouds` (in parallel) and embeds every pool entry.
    pub fn new(
        clouds: &[(PointCloud, usize)],
        categories: &[String],
        anchors: &AnchorConfig,
        pipe: &EncoderPipeline,
        teachers: &Teachers,
    ) -> Result<Self> {
        if clouds.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        if let Some((pc, l)) = clouds.iter().find(|(_, l)| *l >= categories.len()) {
            return Err(Error::Data(format!(
                "cloud `{}` has label {l} but only {} categories exist",
                pc.source_id,
                categories.len()
            )));
        }
        let samples = clouds
            .par_iter()
            .map(|(pc, label)| {
                Ok(TrainSample {
                    patches: pipe.patchify(pc)?,
                    label: *label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pools = AnchorPools::new(categories, anchors)?;
        let mut image_cache = HashMap::new();
        let mut text_cache = HashMap::new();
        for s in pools.views.iter().flatten() {
            image_cache.insert(s.clone(), embed_normalized(&teachers.image, s)?);
        }
        for s in pools.captions.iter().flatten() {
            text_cache.insert(s.clone(), embed_normalized(&teachers.text, s)?);
        }
        Ok(Self {
            samples,
            pools,
            image_cache,
            text_cache,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn pick<'a>(pool: &'a [String], seed: u64, epoch: u64, index: usize, kind: &str) -> &'a str {
        let h = fnv1a(format!("{seed}/{epoch}/{index}/{kind}").as_bytes());
        &pool[(h % pool.len() as u64) as usize]
    }

    /// Anchor strings of sample `index` during `epoch`.
    pub fn anchors_for(&self, seed: u64, epoch: u64, index: usize) -> (&str, &str) {
        let label = self.samples[index].label;
        (
            Self::pick(&self.pools.views[label], seed, epoch, index, "image"),
            Self::pick(&self.pools.captions[label], seed, epoch, index, "text"),
        )
    }

    fn prepared(&self, seed: u64, epoch: u64, index: usize) -> PreparedTriplet<'_> {
        let (img, txt) = self.anchors_for(seed, epoch, index);
        PreparedTriplet {
            patches: &self.samples[index].patches,
            image: &self.image_cache[img],
            text: &self.text_cache[txt],
        }
    }
}

/// A triplet ready for the optimizer: patches plus normalized teacher features.
#[derive(Debug, Clone, Copy)]
pub struct PreparedTriplet<'a> {
    pub patches: &'a PointPatchSet,
    pub image: &'a [f64],
    pub text: &'a [f64],
}

/// Owned form of [`PreparedTriplet`].
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedOwned {
    pub patches: PointPatchSet,
    pub image: Vec<f64>,
    pub text: Vec<f64>,
}

impl PreparedOwned {
    pub fn as_ref(&self) -> PreparedTriplet<'_> {
        PreparedTriplet {
            patches: &self.patches,
            image: &self.image,
            text: &self.text,
        }
    }
}

/// Patchifies the shapes and embeds the anchors of `triplets`.
pub fn prepare_triplets(
    triplets: &[Triplet],
    pipe: &EncoderPipeline,
    teachers: &Teachers,
) -> Result<Vec<PreparedOwned>> {
    triplets
        .iter()
        .map(|t| {
            Ok(PreparedOwned {
                patches: pipe.patchify(&t.points)?,
                image: embed_normalized(&teachers.image, &t.image_anchor)?,
                text: embed_normalized(&teachers.text, &t.text_anchor)?,
            })
        })
        .collect()
}

/// Records encoder + normalization + loss for `batch` on `tape`.
pub(crate) fn record_batch_loss(
    tape: &mut Tape,
    binder: &mut Binder<'_>,
    pipe: &EncoderPipeline,
    batch: &[PreparedTriplet<'_>],
) -> Result<(crate::numerics::Var, LossBreakdown)> {
    let joint = pipe.joint_dim();
    let mut rows = Vec::with_capacity(batch.len());
    let mut image = Vec::with_capacity(batch.len() * joint);
    let mut text = Vec::with_capacity(batch.len() * joint);
    for t in batch {
        rows.push(pipe.forward(tape, binder, t.patches)?);
        image.extend_from_slice(t.image);
        text.extend_from_slice(t.text);
    }
    let b = batch.len();
    let image = Tensor::new(vec![b, joint], image)?;
    let text = Tensor::new(vec![b, joint], text)?;
    let stacked = tape.concat_rows(&rows)?;
    let shape = tape.normalize_rows(stacked)?;
    let log_scale = binder.var(tape, LOGIT_SCALE)?;
    contrastive_loss_on_tape(tape, shape, &image, &text, log_scale)
}

/// Forward, backward and one optimizer update on `batch`.
pub fn train_step_prepared(
    state: &mut AlignmentState,
    pipe: &mut EncoderPipeline,
    batch: &[PreparedTriplet<'_>],
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::contract(
            "train_step",
            "batch must hold >= 1 triplet",
        ));
    }
    let mut grads = BTreeMap::new();
    let breakdown = {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&pipe.params);
        let ls = tape.param(Tensor::new(vec![1], vec![state.log_logit_scale])?);
        binder.preset(LOGIT_SCALE, ls);
        let (loss, breakdown) = record_batch_loss(&mut tape, &mut binder, pipe, batch)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Numeric(format!(
                "step {}: loss is {} (l_p2i {}, l_p2t {})",
                state.step + 1,
                breakdown.total,
                breakdown.l_p2i,
                breakdown.l_p2t
            )));
        }
        if let Some(msg) = tape.non_finite() {
            return Err(Error::Numeric(format!("step {}: {msg}", state.step + 1)));
        }
        tape.backward(loss)?;
        for (name, var) in binder.bound() {
            if let Some(g) = tape.grad(var) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "step {}: non-finite gradient for {name}",
                        state.step + 1
                    )));
                }
                grads.insert(name.to_string(), g.to_vec());
            }
        }
        breakdown
    };
    apply_updates(state, pipe, &grads)?;
    Ok(breakdown)
}

/// Embeds the anchors of `triplets` and runs one update.
pub fn train_step(
    state: &mut AlignmentState,
    triplets: &[Triplet],
    pipe: &mut EncoderPipeline,
    teachers: &Teachers,
) -> Result<LossBreakdown> {
    let prepared = prepare_triplets(triplets, pipe, teachers)?;
    let refs: Vec<_> = prepared.iter().map(PreparedOwned::as_ref).collect();
    train_step_prepared(state, pipe, &refs)
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub l_p2i: f64,
    pub l_p2t: f64,
    pub logit_scale: f64,
}

/// Where and how often `train_loop` writes checkpoints.
#[derive(Debug, Clone)]
pub struct CheckpointPlan {
    pub path: PathBuf,
    /// Canonical JSON of the run configuration, stored in the checkpoint.
    pub config_json: String,
}

/// Dataset indices of optimizer step `step` (0-based).
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let b = batch_size.min(n);
    let per_epoch = (n / b) as u64;
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut tensor_rng(seed, &format!("epoch/{epoch}")));
    order[pos * b..(pos + 1) * b].to_vec()
}

/// Trains from `state.step` up to `state.trainer.steps`.
///
/// Batch order and anchor choice depend only on `(seed, step)`, so resuming
/// from a checkpoint replays the uninterrupted run exactly. Each step appends
/// one JSON line to `metrics` when given.
pub fn train_loop(
    state: &mut AlignmentState,
    pipe: &mut EncoderPipeline,
    data: &TrainingSet,
    checkpoint: Option<&CheckpointPlan>,
    mut metrics: Option<&mut dyn Write>,
) -> Result<Vec<StepRecord>> {
    if data.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let cfg = state.trainer;
    let b = cfg.batch_size.min(data.len());
    let per_epoch = (data.len() / b) as u64;
    let mut records = Vec::new();
    while state.step < cfg.steps {
        let step = state.step;
        let epoch = step / per_epoch;
        let idx = batch_indices(data.len(), cfg.batch_size, state.seed, step);
        let batch: Vec<_> = idx
            .iter()
            .map(|&i| data.prepared(state.seed, epoch, i))
            .collect();
        let loss = train_step_prepared(state, pipe, &batch)?;
        let rec = StepRecord {
            step: state.step,
            loss: loss.total,
            l_p2i: loss.l_p2i,
            l_p2t: loss.l_p2t,
            logit_scale: state.logit_scale(),
        };
        if let Some(w) = metrics.as_deref_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| Error::Numeric(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("<metrics>", e))?;
        }
        records.push(rec);
        if let Some(plan) = checkpoint {
            if cfg.checkpoint_every > 0 && state.step.is_multiple_of(cfg.checkpoint_every) {
                save_checkpoint(&plan.path, &plan.config_json, pipe, state)?;
            }
        }
    }
    if let Some(plan) = checkpoint {
        save_checkpoint(&plan.path, &plan.config_json, pipe, state)?;
    }
    Ok(records)
}
