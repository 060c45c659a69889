//! On-disk synthetic datasets: one PCLB file per cloud plus `manifest.json`.

use std::path::{Path, PathBuf};

use modality_lens::pointcloud::{load_pointcloud, save_pointcloud, PointCloud, PointFormat};
use modality_lens::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub path: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub config: Value,
    pub categories: Vec<String>,
    pub samples: Vec<SampleEntry>,
}

/// A loaded dataset, clouds in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub categories: Vec<String>,
    pub train: Vec<(PointCloud, usize)>,
    pub test: Vec<(PointCloud, usize)>,
}

fn file_name(pc: &PointCloud) -> String {
    format!("{}.pclb", pc.source_id.replace('/', "_"))
}

pub fn write_dataset(dir: &Path, config: Value, data: &Dataset) -> Result<Manifest> {
    let mut samples = Vec::new();
    for (split, clouds) in [(Split::Train, &data.train), (Split::Test, &data.test)] {
        let sub = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let sub_dir = dir.join(sub);
        std::fs::create_dir_all(&sub_dir).map_err(|e| Error::io(&sub_dir, e))?;
        for (pc, label) in clouds {
            let rel = format!("{sub}/{}", file_name(pc));
            save_pointcloud(&dir.join(&rel), pc, PointFormat::PclbBinary)?;
            samples.push(SampleEntry {
                path: rel,
                label: *label,
                split: split.clone(),
            });
        }
    }
    let manifest = Manifest {
        config,
        categories: data.categories.clone(),
        samples,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path: PathBuf = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        source_name: path.display().to_string(),
        location: format!("line {} column {}", e.line(), e.column()),
        detail: e.to_string(),
    })?;
    let mut out = Dataset {
        categories: manifest.categories,
        train: Vec::new(),
        test: Vec::new(),
    };
    for s in manifest.samples {
        if s.label >= out.categories.len() {
            return Err(Error::Data(format!(
                "{}: label {} outside the {} categories",
                s.path,
                s.label,
                out.categories.len()
            )));
        }
        let file = dir.join(&s.path);
        let pc = load_pointcloud(&file, PointFormat::from_path(&file))?.with_label(s.label);
        match s.split {
            Split::Train => out.train.push((pc, s.label)),
            Split::Test => out.test.push((pc, s.label)),
        }
    }
    Ok(out)
}
