//! The canonical run configuration.
//!
//! Every field has a default, unknown keys are rejected, and the serialized
//! form (field order fixed by the struct definitions) is embedded in every
//! artifact a run writes.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::alignment::{AnchorConfig, TeacherConfig, TrainerConfig};
use crate::backbone::PipelineConfig;
use crate::error::{Error, Result};
use crate::pointcloud::{synth_generate, PointCloud, SyntheticSpec};
use crate::zeroshot::default_templates;

/// Offset between the seeds of training and held-out clouds; larger than any
/// per-category cloud count so the two never share an RNG stream.
pub const HELDOUT_SEED_OFFSET: u64 = 1_000_003;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training shapes; `synth.clouds_per_category` is the per-class train size.
    pub synth: SyntheticSpec,
    pub heldout_per_category: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SyntheticSpec::default(),
            heldout_per_category: 32,
        }
    }
}

impl DataConfig {
    pub fn train_spec(&self) -> SyntheticSpec {
        self.synth.clone()
    }

    pub fn heldout_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            clouds_per_category: self.heldout_per_category,
            seed: self.synth.seed.wrapping_add(HELDOUT_SEED_OFFSET),
            ..self.synth.clone()
        }
    }

    pub fn generate_train(&self) -> Result<Vec<(PointCloud, usize)>> {
        synth_generate(&self.train_spec())
    }

    pub fn generate_heldout(&self) -> Result<Vec<(PointCloud, usize)>> {
        synth_generate(&self.heldout_spec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed: batch order and anchor sampling.
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub teacher: TeacherConfig,
    pub trainer: TrainerConfig,
    pub anchors: AnchorConfig,
    pub data: DataConfig,
    /// Zero-shot prompt templates; `{}` is replaced by the class name.
    pub templates: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pipeline: PipelineConfig::default(),
            teacher: TeacherConfig::default(),
            trainer: TrainerConfig::default(),
            anchors: AnchorConfig::default(),
            data: DataConfig::default(),
            templates: default_templates(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.trainer.validate()?;
        self.data.synth.validate()?;
        if self.templates.is_empty() {
            return Err(Error::Config("templates must hold >= 1 prompt".into()));
        }
        if self.teacher.hash_dim == 0 || self.teacher.hidden_dim == 0 {
            return Err(Error::Config("teacher dims must be >= 1".into()));
        }
        Ok(())
    }

    /// Sets the master seed and the seeds derived from it (lens init and
    /// synthetic data).
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pipeline.lens_seed = seed.wrapping_add(7);
        self.data.synth.seed = seed;
    }

    pub fn from_json(text: &str, source_name: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            location: format!("line {} column {}", e.line(), e.column()),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Compact JSON; byte-identical for equal configurations.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key=value` overrides, where `key` is a dotted path such as
    /// `pipeline.perceiver.depth` and `value` is JSON (bare words are taken as
    /// strings).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self).expect("config serializes");
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not KEY=VALUE")))?;
            let value: Value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut root;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            *slot = value;
        }
        let cfg: RunConfig = serde_json::from_value(root)
            .map_err(|e| Error::Config(format!("after overrides: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&c.canonical_json(), "t").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.canonical_json(), c.canonical_json());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"sed": 1}"#, "t").is_err());
        assert!(RunConfig::from_json(r#"{"pipeline": {"perceiver": {"deep": 3}}}"#, "t").is_err());
        assert_eq!(
            RunConfig::from_json("{}", "t").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&[
                "pipeline.perceiver.depth=6",
                "pipeline.unlock=cls+proj",
                "pipeline.variant=perceiver_only",
            ])
            .unwrap();
        assert_eq!(c.pipeline.perceiver.depth, 6);
        assert_eq!(c.pipeline.unlock.to_string(), "cls+proj");
        assert!(RunConfig::default().with_overrides(&["nope.x=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["seed"]).is_err());
        assert!(RunConfig::default()
            .with_overrides(&["pipeline.unlock=cls+proj+blocks:3-9"])
            .is_err());
    }

    #[test]
    fn heldout_does_not_overlap_train() {
        let d = DataConfig::default();
        assert_ne!(d.heldout_spec().seed, d.train_spec().seed);
        assert_eq!(d.heldout_spec().clouds_per_category, 32);
    }
}
