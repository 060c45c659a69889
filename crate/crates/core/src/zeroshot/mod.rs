//! Prompt-built class embeddings and top-k zero-shot evaluation.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::alignment::{normalize_feature, TeacherEmbedder};
use crate::backbone::{encode_shape, EncoderPipeline};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pointcloud::PointCloud;

pub fn default_templates() -> Vec<String> {
    vec![
        "a point cloud of a {}.".into(),
        "a 3D model of a {}.".into(),
    ]
}

/// Unit-norm text embedding per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingTable {
    pub classes: Vec<String>,
    /// `C×joint_dim`, rows unit norm.
    pub embeddings: Tensor,
    pub templates: Vec<String>,
}

impl ClassEmbeddingTable {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    /// Dot product of `feature` with every class row.
    pub fn similarities(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.dim() {
            return Err(Error::shape(
                "classify_topk",
                format!(
                    "feature length {} vs table width {}",
                    feature.len(),
                    self.dim()
                ),
            ));
        }
        Ok((0..self.len())
            .map(|c| {
                self.embeddings
                    .row(c)
                    .iter()
                    .zip(feature)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }
}

/// Per class: fill each template, embed, normalize, average, renormalize.
pub fn build_class_embeddings(
    classes: &[String],
    templates: &[String],
    teacher: &TeacherEmbedder,
) -> Result<ClassEmbeddingTable> {
    if classes.is_empty() || templates.is_empty() {
        return Err(Error::Config("need >= 1 class and >= 1 template".into()));
    }
    let mut seen = BTreeSet::new();
    for c in classes {
        if !seen.insert(c.as_str()) {
            return Err(Error::Config(format!("duplicate class name `{c}`")));
        }
    }
    if let Some(t) = templates.iter().find(|t| !t.contains("{}")) {
        return Err(Error::Config(format!(
            "template `{t}` has no `{{}}` placeholder"
        )));
    }
    let d = teacher.joint_dim();
    let mut data = Vec::with_capacity(classes.len() * d);
    for c in classes {
        let mut acc = vec![0.0; d];
        for t in templates {
            let e = normalize_feature(&teacher.embed(&t.replace("{}", c))?)?;
            for (a, x) in acc.iter_mut().zip(e.data()) {
                *a += x;
            }
        }
        let mean = Tensor::new(
            vec![d],
            acc.iter().map(|a| a / templates.len() as f64).collect(),
        )?;
        data.extend_from_slice(normalize_feature(&mean)?.data());
    }
    Ok(ClassEmbeddingTable {
        classes: classes.to_vec(),
        embeddings: Tensor::new(vec![classes.len(), d], data)?,
        templates: templates.to_vec(),
    })
}

/// Class indices ordered by descending score, ties by class name.
pub fn rank_scores(scores: &[f64], classes: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| classes[a].cmp(&classes[b]))
    });
    order
}

/// The `k` best classes (indices into `table.classes`) for a unit-norm feature.
pub fn classify_topk(feature: &[f64], table: &ClassEmbeddingTable, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > table.len() {
        return Err(Error::contract(
            "classify_topk",
            format!("k={k} outside 1..={}", table.len()),
        ));
    }
    let scores = table.similarities(feature)?;
    let mut ranked = rank_scores(&scores, &table.classes);
    ranked.truncate(k);
    Ok(ranked)
}

/// Percentage of samples whose label is within the first `k` ranks, per `k`.
/// `k` larger than a ranking counts the whole ranking.
pub fn topk_accuracy(
    predictions: &[Vec<usize>],
    labels: &[usize],
    ks: &[usize],
) -> Result<Vec<f64>> {
    if predictions.len() != labels.len() {
        return Err(Error::shape(
            "topk_accuracy",
            format!(
                "{} predictions vs {} labels",
                predictions.len(),
                labels.len()
            ),
        ));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("topk_accuracy needs >= 1 sample".into()));
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = predictions
                .iter()
                .zip(labels)
                .filter(|(p, l)| p.iter().take(k).any(|c| c == *l))
                .count();
            100.0 * hits as f64 / labels.len() as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub samples: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub samples: usize,
    pub classes: Vec<String>,
    pub templates: Vec<String>,
    /// `"top{k}"` → accuracy in percent.
    pub topk: BTreeMap<String, f64>,
    pub per_class: Vec<ClassAccuracy>,
    /// `confusion[true][predicted]` sample counts (top-1 prediction).
    pub confusion: Vec<Vec<usize>>,
    /// Effective configuration of the run that produced the report.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config: Option<Value>,
}

impl AccuracyReport {
    pub fn top(&self, k: usize) -> Option<f64> {
        self.topk.get(&format!("top{k}")).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

pub const DEFAULT_KS: [usize; 3] = [1, 3, 5];

/// Classifies already encoded features (normalized here) and aggregates.
pub fn eval_features(
    features: &[Tensor],
    labels: &[usize],
    table: &ClassEmbeddingTable,
    ks: &[usize],
) -> Result<AccuracyReport> {
    if features.len() != labels.len() {
        return Err(Error::shape(
            "eval_dataset",
            format!("{} features vs {} labels", features.len(), labels.len()),
        ));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= table.len()) {
        return Err(Error::Data(format!(
            "label {l} is not in the class table ({} classes)",
            table.len()
        )));
    }
    let rankings = features
        .iter()
        .map(|f| {
            let unit = normalize_feature(f)?;
            Ok(rank_scores(
                &table.similarities(unit.data())?,
                &table.classes,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let acc = topk_accuracy(&rankings, labels, ks)?;
    let c = table.len();
    let mut confusion = vec![vec![0usize; c]; c];
    for (r, &l) in rankings.iter().zip(labels) {
        confusion[l][r[0]] += 1;
    }
    let per_class = table
        .classes
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let n: usize = confusion[i].iter().sum();
            ClassAccuracy {
                class: name.clone(),
                samples: n,
                top1: if n == 0 {
                    0.0
                } else {
                    100.0 * confusion[i][i] as f64 / n as f64
                },
            }
        })
        .collect();
    Ok(AccuracyReport {
        samples: labels.len(),
        classes: table.classes.clone(),
        templates: table.templates.clone(),
        topk: ks
            .iter()
            .zip(acc)
            .map(|(k, a)| (format!("top{k}"), a))
            .collect(),
        per_class,
        confusion,
        config: None,
    })
}

/// Encodes every cloud (in parallel), then [`eval_features`].
pub fn eval_dataset(
    clouds: &[(PointCloud, usize)],
    pipe: &EncoderPipeline,
    table: &ClassEmbeddingTable,
    ks: &[usize],
) -> Result<AccuracyReport> {
    let features = clouds
        .par_iter()
        .map(|(pc, _)| encode_shape(pc, pipe))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = clouds.iter().map(|(_, l)| *l).collect();
    eval_features(&features, &labels, table, ks)
}

/// CSV with one row per method: `method,top1,top3,top5`.
pub fn reports_csv(rows: &[(String, AccuracyReport)]) -> String {
    let mut out = String::from("method,top1,top3,top5\n");
    for (method, r) in rows {
        let cell = |k| r.top(k).map_or(String::new(), |a| format!("{a:.2}"));
        out.push_str(&format!("{method},{},{},{}\n", cell(1), cell(3), cell(5)));
    }
    out
}
