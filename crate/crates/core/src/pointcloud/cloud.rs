use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::ByteReader;

pub type Point = [f64; 3];

pub const PCLB_MAGIC: &[u8; 4] = b"PCLB";
pub const PCLB_VERSION: u32 = 1;

/// A set of 3-D points with optional category label.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    pub label: Option<usize>,
    pub source_id: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, source_id: impl Into<String>) -> Result<Self> {
        let source_id = source_id.into();
        if points.is_empty() {
            return Err(Error::EmptyInput(format!(
                "point cloud `{source_id}` has no points"
            )));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Numeric(format!(
                "point {i} of `{source_id}` is not finite: {:?}",
                points[i]
            )));
        }
        Ok(Self {
            points,
            label: None,
            source_id,
        })
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn translated(&self, t: Point) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
            .collect();
        Self {
            points,
            label: self.label,
            source_id: self.source_id.clone(),
        }
    }

    pub fn centroid(&self) -> Point {
        centroid(&self.points)
    }
}

pub(crate) fn centroid(points: &[Point]) -> Point {
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    let n = points.len() as f64;
    [c[0] / n, c[1] / n, c[2] / n]
}

pub(crate) fn dist2(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Centers the cloud on its centroid and scales the farthest point to radius 1.
/// A cloud whose points all coincide collapses to the origin.
pub fn normalize_cloud(pc: &PointCloud) -> PointCloud {
    let c = pc.centroid();
    let mut points: Vec<Point> = pc
        .points
        .iter()
        .map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]])
        .collect();
    let radius = points
        .iter()
        .map(|p| dist2(p, &[0.0; 3]))
        .fold(0.0, f64::max)
        .sqrt();
    if radius > 0.0 {
        for p in &mut points {
            for v in p.iter_mut() {
                *v /= radius;
            }
        }
    }
    PointCloud {
        points,
        label: pc.label,
        source_id: pc.source_id.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFormat {
    XyzText,
    PclbBinary,
}

impl PointFormat {
    /// `.pclb` is binary; anything else is read as whitespace-separated text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("pclb") => PointFormat::PclbBinary,
            _ => PointFormat::XyzText,
        }
    }
}

pub fn load_pointcloud(path: &Path, format: PointFormat) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    match format {
        PointFormat::XyzText => parse_xyz(&bytes, &name),
        PointFormat::PclbBinary => decode_pclb(&bytes, &name),
    }
}

pub fn save_pointcloud(path: &Path, pc: &PointCloud, format: PointFormat) -> Result<()> {
    let bytes = match format {
        PointFormat::XyzText => encode_xyz(pc).into_bytes(),
        PointFormat::PclbBinary => encode_pclb(pc),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn parse_xyz(bytes: &[u8], source_name: &str) -> Result<PointCloud> {
    if bytes.is_empty() {
        return Err(Error::EmptyInput(format!("`{source_name}` is empty")));
    }
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        source_name: source_name.to_string(),
        location: format!("byte offset {}", e.valid_up_to()),
        detail: "invalid UTF-8".into(),
    })?;
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |detail: String| Error::Parse {
            source_name: source_name.to_string(),
            location: format!("line {}", lineno + 1),
            detail,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(format!(
                "expected 3 fields, found {}",
                fields.len()
            )));
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .map_err(|e| parse_err(format!("`{f}`: {e}")))?;
            if !slot.is_finite() {
                return Err(parse_err(format!("non-finite coordinate `{f}`")));
            }
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::EmptyInput(format!(
            "`{source_name}` contains no points"
        )));
    }
    PointCloud::new(points, source_name)
}

pub fn encode_xyz(pc: &PointCloud) -> String {
    let mut s = String::with_capacity(pc.len() * 40);
    for p in pc.points() {
        s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    s
}

/// `PCLB` layout: magic, u32 LE version, u32 LE point count, then `N×3` f32 LE.
pub fn encode_pclb(pc: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + pc.len() * 12);
    out.extend_from_slice(PCLB_MAGIC);
    out.extend_from_slice(&PCLB_VERSION.to_le_bytes());
    out.extend_from_slice(&(pc.len() as u32).to_le_bytes());
    for p in pc.points() {
        for &c in p {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pclb(bytes: &[u8], source_name: &str) -> Result<PointCloud> {
    if bytes.is_empty() {
        return Err(Error::EmptyInput(format!("`{source_name}` is empty")));
    }
    let mut r = ByteReader::new(bytes, source_name);
    r.magic(PCLB_MAGIC)?;
    let version = r.u32()?;
    if version != PCLB_VERSION {
        return Err(r.error(format!("unsupported PCLB version {version}")));
    }
    let n = r.u32()? as usize;
    if n == 0 {
        return Err(Error::EmptyInput(format!(
            "`{source_name}` declares zero points"
        )));
    }
    if r.remaining() != n * 12 {
        return Err(r.error(format!(
            "expected {} payload bytes for {n} points, found {}",
            n * 12,
            r.remaining()
        )));
    }
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push([
            f64::from(r.f32()?),
            f64::from(r.f32()?),
            f64::from(r.f32()?),
        ]);
    }
    PointCloud::new(points, source_name)
}
