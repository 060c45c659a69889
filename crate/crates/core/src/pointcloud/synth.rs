//! Seeded primitive shapes used as a stand-in training corpus.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::params::tensor_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySpec {
    pub name: String,
    /// One of `sphere`, `cube`, `cylinder`, `torus`.
    pub generator: String,
    /// Sphere/cylinder radius, cube side, torus major radius.
    #[serde(default = "one")]
    pub size: f64,
    /// Cylinder height; defaults to `2·size`.
    #[serde(default)]
    pub height: Option<f64>,
    /// Torus tube radius; defaults to `0.35·size`.
    #[serde(default)]
    pub minor_radius: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl CategorySpec {
    pub fn new(name: &str, generator: &str) -> Self {
        Self {
            name: name.to_string(),
            generator: generator.to_string(),
            size: 1.0,
            height: None,
            minor_radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub categories: Vec<CategorySpec>,
    pub points_per_cloud: usize,
    pub noise_sigma: f64,
    pub clouds_per_category: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            categories: vec![
                CategorySpec::new("sphere", "sphere"),
                CategorySpec::new("cube", "cube"),
                CategorySpec::new("cylinder", "cylinder"),
                CategorySpec::new("torus", "torus"),
            ],
            points_per_cloud: 512,
            noise_sigma: 0.01,
            clouds_per_category: 64,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.categories {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate category name `{}`",
                    c.name
                )));
            }
            Generator::parse(&c.generator)?;
            if !(c.size > 0.0) {
                return Err(Error::Config(format!(
                    "category `{}` needs size > 0",
                    c.name
                )));
            }
        }
        if self.categories.is_empty() {
            return Err(Error::Config("synthetic spec has no categories".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.points_per_cloud == 0 {
            return Err(Error::Config("points_per_cloud must be >= 1".into()));
        }
        Ok(())
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Generator {
    Sphere,
    Cube,
    Cylinder,
    Torus,
}

impl Generator {
    fn parse(name: &str) -> Result<Self> {
        match name {
            "sphere" => Ok(Generator::Sphere),
            "cube" => Ok(Generator::Cube),
            "cylinder" => Ok(Generator::Cylinder),
            "torus" => Ok(Generator::Torus),
            other => Err(Error::Config(format!(
                "unknown generator `{other}` (expected sphere, cube, cylinder or torus)"
            ))),
        }
    }
}

fn sample_surface(gen: Generator, cat: &CategorySpec, rng: &mut ChaCha8Rng) -> Point {
    let s = cat.size;
    match gen {
        Generator::Sphere => loop {
            let v: [f64; 3] = [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if n > 1e-12 {
                break [s * v[0] / n, s * v[1] / n, s * v[2] / n];
            }
        },
        Generator::Cube => {
            let face = rng.gen_range(0..6);
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let mut p = [0.0; 3];
            for (a, v) in p.iter_mut().enumerate() {
                *v = if a == axis {
                    sign * s / 2.0
                } else {
                    rng.gen_range(-s / 2.0..s / 2.0)
                };
            }
            p
        }
        Generator::Cylinder => {
            let h = cat.height.unwrap_or(2.0 * s);
            let side = 2.0 * PI * s * h;
            let cap = PI * s * s;
            let u = rng.gen_range(0.0..side + 2.0 * cap);
            let theta = rng.gen_range(0.0..2.0 * PI);
            if u < side {
                let z = rng.gen_range(-h / 2.0..h / 2.0);
                [s * theta.cos(), s * theta.sin(), z]
            } else {
                let r = s * rng.gen::<f64>().sqrt();
                let z = if u < side + cap { h / 2.0 } else { -h / 2.0 };
                [r * theta.cos(), r * theta.sin(), z]
            }
        }
        Generator::Torus => {
            let minor = cat.minor_radius.unwrap_or(0.35 * s);
            // Area element is proportional to (R + r cos v).
            loop {
                let u = rng.gen_range(0.0..2.0 * PI);
                let v = rng.gen_range(0.0..2.0 * PI);
                let w = rng.gen_range(0.0..s + minor);
                if w <= s + minor * v.cos() {
                    let ring = s + minor * v.cos();
                    break [ring * u.cos(), ring * u.sin(), minor * v.sin()];
                }
            }
        }
    }
}

/// Generates `clouds_per_category` labelled clouds per category.
/// Each cloud draws from its own RNG stream, so output is deterministic in `seed`.
pub fn synth_generate(spec: &SyntheticSpec) -> Result<Vec<(PointCloud, usize)>> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let mut out = Vec::with_capacity(spec.categories.len() * spec.clouds_per_category);
    for (label, cat) in spec.categories.iter().enumerate() {
        let gen = Generator::parse(&cat.generator)?;
        for i in 0..spec.clouds_per_category {
            let mut rng = tensor_rng(
                spec.seed.wrapping_add(i as u64),
                &format!("synth/{}", cat.name),
            );
            let mut pts = Vec::with_capacity(spec.points_per_cloud);
            for _ in 0..spec.points_per_cloud {
                let mut p = sample_surface(gen, cat, &mut rng);
                if spec.noise_sigma > 0.0 {
                    for v in &mut p {
                        *v += noise.sample(&mut rng);
                    }
                }
                pts.push(p);
            }
            let pc = PointCloud::new(pts, format!("{}/{i:04}", cat.name))?.with_label(label);
            out.push((pc, label));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(gen: &str) -> SyntheticSpec {
        SyntheticSpec {
            categories: vec![CategorySpec::new(gen, gen)],
            points_per_cloud: 300,
            noise_sigma: 0.0,
            clouds_per_category: 2,
            seed: 11,
        }
    }

    #[test]
    fn sphere_points_on_unit_sphere() {
        for (pc, _) in synth_generate(&single("sphere")).unwrap() {
            for p in pc.points() {
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                assert!((r - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cube_points_on_surface() {
        let mut spec = single("cube");
        spec.categories[0].size = 1.7;
        for (pc, _) in synth_generate(&spec).unwrap() {
            for p in pc.points() {
                let m = p.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert_eq!(m, 1.7 / 2.0);
            }
        }
    }

    #[test]
    fn torus_points_on_surface() {
        for (pc, _) in synth_generate(&single("torus")).unwrap() {
            for p in pc.points() {
                let ring = (p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0;
                let d = (ring * ring + p[2] * p[2]).sqrt();
                assert!((d - 0.35).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn unknown_generator_and_duplicate_names() {
        let mut spec = single("sphere");
        spec.categories[0].generator = "cone".into();
        assert!(matches!(synth_generate(&spec), Err(Error::Config(_))));
        let mut spec = single("sphere");
        spec.categories.push(CategorySpec::new("sphere", "cube"));
        assert!(matches!(synth_generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_clouds() {
        let spec = SyntheticSpec {
            clouds_per_category: 2,
            ..SyntheticSpec::default()
        };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a, b);
    }
}
