use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::cloud::{Point, PointCloud};
use super::sampling::{fps, knn_group, lex_cmp, StartRule};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::params::tensor_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    /// Points after resampling.
    pub n_sample: usize,
    /// Number of patches (FPS centers).
    pub n_groups: usize,
    /// Points per patch.
    pub group_size: usize,
    pub seed: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            n_sample: 256,
            n_groups: 32,
            group_size: 16,
            seed: 0,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.n_groups > self.n_sample {
            return Err(Error::Config(format!(
                "patch.n_groups must be in 1..={}, got {}",
                self.n_sample, self.n_groups
            )));
        }
        if self.group_size == 0 || self.group_size > self.n_sample {
            return Err(Error::Config(format!(
                "patch.group_size must be in 1..={}, got {}",
                self.n_sample, self.group_size
            )));
        }
        Ok(())
    }
}

/// FPS centers with their KNN neighbourhoods in center-relative coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct PointPatchSet {
    pub centers: Vec<Point>,
    /// `n_groups × group_size` relative points, group-major.
    pub groups: Vec<Point>,
    pub group_size: usize,
    /// FPS picks, as indices into the resampled cloud.
    pub selection_order: Vec<usize>,
}

impl PointPatchSet {
    pub fn n_groups(&self) -> usize {
        self.centers.len()
    }

    pub fn group(&self, g: usize) -> &[Point] {
        &self.groups[g * self.group_size..(g + 1) * self.group_size]
    }

    /// `[(G·k)×3]` relative coordinates.
    pub fn relative_tensor(&self) -> Tensor {
        let data = self.groups.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::from_parts(vec![self.groups.len(), 3], data)
    }

    /// `[G×3]` centers.
    pub fn centers_tensor(&self) -> Tensor {
        let data = self
            .centers
            .iter()
            .flat_map(|p| p.iter().copied())
            .collect();
        Tensor::from_parts(vec![self.centers.len(), 3], data)
    }
}

/// Seeded uniform resample to `n` points.
///
/// Points are first put in lexicographic order so the result depends only on
/// the point set, not on the order the points arrived in. Sampling is without
/// replacement when the cloud is large enough and with replacement otherwise.
pub fn resample(points: &[Point], n: usize, seed: u64) -> Vec<Point> {
    let mut sorted = points.to_vec();
    sorted.sort_by(lex_cmp);
    if sorted.len() == n {
        return sorted;
    }
    let mut rng = tensor_rng(seed, "pointcloud.resample");
    let mut idx: Vec<usize> = if sorted.len() > n {
        sample(&mut rng, sorted.len(), n).into_vec()
    } else {
        (0..n).map(|_| rng.gen_range(0..sorted.len())).collect()
    };
    idx.sort_unstable();
    idx.into_iter().map(|i| sorted[i]).collect()
}

/// Resample, pick centers by FPS, group by KNN, then express each group
/// relative to its center. Expects a normalized cloud.
pub fn make_patches(pc: &PointCloud, cfg: &PatchConfig) -> Result<PointPatchSet> {
    cfg.validate()?;
    let pts = resample(pc.points(), cfg.n_sample, cfg.seed);
    let order = fps(&pts, cfg.n_groups, StartRule::FarthestFromCentroid)?;
    let centers: Vec<Point> = order.iter().map(|&i| pts[i]).collect();
    let neighbours = knn_group(&pts, &centers, cfg.group_size)?;
    let mut groups = Vec::with_capacity(cfg.n_groups * cfg.group_size);
    for (c, members) in centers.iter().zip(&neighbours) {
        for &i in members {
            let p = pts[i];
            groups.push([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        }
    }
    Ok(PointPatchSet {
        centers,
        groups,
        group_size: cfg.group_size,
        selection_order: order,
    })
}
