//! Labelled MRI point-cloud ingestion.
//!
//! Clouds arrive as JSON (`{"unit": "mm"|"m", "points": [{x, y, z, label}]}`)
//! or CSV (`x,y,z,label` rows, optional header). Coordinates are converted to
//! metres on load and exact duplicates (within 1e-12 m) are dropped per label
//! class. The module also derives the scan's grid spacing `δ` (minimal
//! pairwise point distance), extracts the 6-neighbourhood boundary of a
//! voxel class, and reconstructs the full bounding-box lattice used for
//! coverage accounting.

use nalgebra::Vector3;
use serde::Deserialize;
use std::collections::{HashMap, HashSet};
use std::path::Path;

/// Coordinates closer than this (in metres) are considered the same voxel.
pub const DEDUP_TOL: f64 = 1e-12;
/// Per-axis tolerance for snapping points onto a lattice, as a fraction of
/// the spacing.
pub const GRID_SNAP_TOL: f64 = 0.1;
/// Hard cap on reconstructed lattice size.
const MAX_GRID_POINTS: usize = 50_000_000;

// ── Errors ──────────────────────────────────────────────────────────────────

#[derive(thiserror::Error, Debug)]
pub enum IngestError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unsupported file extension {0:?} (expected .json or .csv)")]
    UnsupportedExtension(String),
    #[error("JSON parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV record {line}: {message}")]
    Csv { line: usize, message: String },
    #[error("record {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("record {line}: non-finite coordinate")]
    NonFinite { line: usize },
    #[error("unknown unit {0:?} (expected \"mm\" or \"m\")")]
    UnknownUnit(String),
    #[error("unit scale must be positive and finite, got {0}")]
    BadUnitScale(f64),
    #[error("cloud contains no points")]
    Empty,
    #[error("need at least 2 points to compute a grid spacing, got {0}")]
    TooFewPoints(usize),
    #[error("duplicate points at distance {0:.3e} below resolution")]
    DegenerateSpacing(f64),
    #[error("spacing must be positive and finite, got {0}")]
    BadSpacing(f64),
    #[error("point {index} is off-grid: residual {residual:.3} of spacing on axis {axis}")]
    OffGrid {
        index: usize,
        axis: usize,
        residual: f64,
    },
    #[error("reconstructed lattice would hold {0} points (cap {MAX_GRID_POINTS})")]
    GridTooLarge(usize),
}

// ── Types ───────────────────────────────────────────────────────────────────

/// Anatomical class of a labelled voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PointClass {
    Skull,
    Target,
    Obstacle,
    Hemisphere,
}

impl PointClass {
    pub const ALL: [PointClass; 4] = [
        PointClass::Skull,
        PointClass::Target,
        PointClass::Obstacle,
        PointClass::Hemisphere,
    ];

    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "skull" => Some(Self::Skull),
            "target" => Some(Self::Target),
            "obstacle" => Some(Self::Obstacle),
            "hemisphere" => Some(Self::Hemisphere),
            _ => None,
        }
    }
}

/// A labelled cloud in metres, split by class, with the derived grid spacing.
#[derive(Debug, Clone)]
pub struct LabeledPointCloud {
    pub skull: Vec<Vector3<f64>>,
    pub target: Vec<Vector3<f64>>,
    pub obstacle: Vec<Vector3<f64>>,
    pub hemisphere: Vec<Vector3<f64>>,
    /// Grid spacing δ in metres: minimal pairwise distance of the target
    /// class (fallback: all classes pooled).
    pub delta_mri: f64,
    /// Scale that was applied to raw coordinates to obtain metres.
    pub unit_scale: f64,
}

impl LabeledPointCloud {
    /// Assembles a cloud from per-class points (already in metres), dropping
    /// duplicates within [`DEDUP_TOL`] per class and deriving `delta_mri`.
    pub fn from_classes(
        skull: Vec<Vector3<f64>>,
        target: Vec<Vector3<f64>>,
        obstacle: Vec<Vector3<f64>>,
        hemisphere: Vec<Vector3<f64>>,
        unit_scale: f64,
    ) -> Result<Self, IngestError> {
        let skull = dedup(skull);
        let target = dedup(target);
        let obstacle = dedup(obstacle);
        let hemisphere = dedup(hemisphere);
        let total = skull.len() + target.len() + obstacle.len() + hemisphere.len();
        if total == 0 {
            return Err(IngestError::Empty);
        }
        let delta_mri = if target.len() >= 2 {
            compute_delta_mri(&target)?
        } else {
            let all: Vec<_> = skull
                .iter()
                .chain(&target)
                .chain(&obstacle)
                .chain(&hemisphere)
                .copied()
                .collect();
            if all.len() >= 2 {
                compute_delta_mri(&all)?
            } else {
                return Err(IngestError::TooFewPoints(all.len()));
            }
        };
        Ok(Self {
            skull,
            target,
            obstacle,
            hemisphere,
            delta_mri,
            unit_scale,
        })
    }

    pub fn class(&self, c: PointClass) -> &[Vector3<f64>] {
        match c {
            PointClass::Skull => &self.skull,
            PointClass::Target => &self.target,
            PointClass::Obstacle => &self.obstacle,
            PointClass::Hemisphere => &self.hemisphere,
        }
    }

    pub fn len(&self) -> usize {
        PointClass::ALL.iter().map(|&c| self.class(c).len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All points of all classes, skull first, in stored order.
    pub fn all_points(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(self.len());
        for c in PointClass::ALL {
            out.extend_from_slice(self.class(c));
        }
        out
    }
}

// ── Loading ─────────────────────────────────────────────────────────────────

#[derive(Deserialize)]
struct CloudFile {
    unit: String,
    points: Vec<RawPoint>,
}

#[derive(Deserialize)]
struct RawPoint {
    x: f64,
    y: f64,
    z: f64,
    label: String,
}

/// Loads a labelled cloud from `path` (`.json` or `.csv`), multiplying every
/// coordinate by `unit_scale` into metres. JSON files additionally carry a
/// `"unit"` tag (`"mm"` or `"m"`) that is applied on top, so callers
/// normally pass `unit_scale = 1.0` for JSON and the source unit's scale for
/// CSV.
pub fn load_cloud(path: &Path, unit_scale: f64) -> Result<LabeledPointCloud, IngestError> {
    if !(unit_scale.is_finite() && unit_scale > 0.0) {
        return Err(IngestError::BadUnitScale(unit_scale));
    }
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    match ext.as_str() {
        "json" => load_json(&text, unit_scale),
        "csv" => load_csv(&text, unit_scale),
        other => Err(IngestError::UnsupportedExtension(other.to_string())),
    }
}

fn load_json(text: &str, unit_scale: f64) -> Result<LabeledPointCloud, IngestError> {
    let file: CloudFile = serde_json::from_str(text)?;
    let file_scale = match file.unit.as_str() {
        "m" => 1.0,
        "mm" => 1e-3,
        other => return Err(IngestError::UnknownUnit(other.to_string())),
    };
    let scale = unit_scale * file_scale;
    let mut classes: HashMap<PointClass, Vec<Vector3<f64>>> = HashMap::new();
    for (index, p) in file.points.iter().enumerate() {
        let class = PointClass::parse(&p.label).ok_or_else(|| IngestError::UnknownLabel {
            line: index,
            label: p.label.clone(),
        })?;
        if ![p.x, p.y, p.z].iter().all(|v| v.is_finite()) {
            return Err(IngestError::NonFinite { line: index });
        }
        classes
            .entry(class)
            .or_default()
            .push(Vector3::new(p.x, p.y, p.z) * scale);
    }
    build_cloud(classes, scale)
}

fn load_csv(text: &str, unit_scale: f64) -> Result<LabeledPointCloud, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut classes: HashMap<PointClass, Vec<Vector3<f64>>> = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| IngestError::Csv {
            line,
            message: e.to_string(),
        })?;
        if record.len() == 0 || (record.len() == 1 && record[0].is_empty()) {
            continue;
        }
        // Tolerate a conventional header row.
        if line == 1 && record.get(0).map(|f| f.eq_ignore_ascii_case("x")) == Some(true) {
            continue;
        }
        if record.len() != 4 {
            return Err(IngestError::Csv {
                line,
                message: format!("expected 4 fields x,y,z,label, got {}", record.len()),
            });
        }
        let mut coords = [0.0f64; 3];
        for (k, c) in coords.iter_mut().enumerate() {
            *c = record[k].parse().map_err(|_| IngestError::Csv {
                line,
                message: format!("field {} is not a number: {:?}", k + 1, &record[k]),
            })?;
        }
        if !coords.iter().all(|v| v.is_finite()) {
            return Err(IngestError::NonFinite { line });
        }
        let class = PointClass::parse(&record[3]).ok_or_else(|| IngestError::UnknownLabel {
            line,
            label: record[3].to_string(),
        })?;
        classes
            .entry(class)
            .or_default()
            .push(Vector3::new(coords[0], coords[1], coords[2]) * unit_scale);
    }
    build_cloud(classes, unit_scale)
}

fn build_cloud(
    mut classes: HashMap<PointClass, Vec<Vector3<f64>>>,
    scale: f64,
) -> Result<LabeledPointCloud, IngestError> {
    LabeledPointCloud::from_classes(
        classes.remove(&PointClass::Skull).unwrap_or_default(),
        classes.remove(&PointClass::Target).unwrap_or_default(),
        classes.remove(&PointClass::Obstacle).unwrap_or_default(),
        classes.remove(&PointClass::Hemisphere).unwrap_or_default(),
        scale,
    )
}

fn quantize(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

/// Drops points that lie within [`DEDUP_TOL`] of an earlier point, keeping
/// first occurrences.
fn dedup(points: Vec<Vector3<f64>>) -> Vec<Vector3<f64>> {
    let cell = DEDUP_TOL;
    let mut seen: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    let mut out: Vec<Vector3<f64>> = Vec::with_capacity(points.len());
    'next: for p in points {
        let (qx, qy, qz) = quantize(&p, cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = seen.get(&(qx + dx, qy + dy, qz + dz)) {
                        for &i in ids {
                            if (out[i] - p).norm() <= DEDUP_TOL {
                                continue 'next;
                            }
                        }
                    }
                }
            }
        }
        seen.entry((qx, qy, qz)).or_default().push(out.len());
        out.push(p);
    }
    out
}

// ── Grid spacing ────────────────────────────────────────────────────────────

/// Minimal pairwise distance of a point set — the MRI grid spacing for voxel
/// clouds. Exact: the spatial-hash path returns the same value as the O(n²)
/// scan.
pub fn compute_delta_mri(points: &[Vector3<f64>]) -> Result<f64, IngestError> {
    if points.len() < 2 {
        return Err(IngestError::TooFewPoints(points.len()));
    }
    let d = if points.len() <= 512 {
        min_dist_brute(points)
    } else {
        min_dist_hashed(points)
    };
    if d <= DEDUP_TOL {
        return Err(IngestError::DegenerateSpacing(d));
    }
    Ok(d)
}

fn min_dist_brute(points: &[Vector3<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            best = best.min((points[i] - points[j]).norm_squared());
        }
    }
    best.sqrt()
}

fn min_dist_hashed(points: &[Vector3<f64>]) -> f64 {
    // Upper bound d0 on the answer from a deterministic sample, then a grid
    // of cell size d0: the closest pair lies within one cell of each other.
    let stride = (points.len() / 128).max(1);
    let mut d0_sq = f64::INFINITY;
    for i in (0..points.len()).step_by(stride) {
        for (j, q) in points.iter().enumerate() {
            if i != j {
                d0_sq = d0_sq.min((points[i] - q).norm_squared());
            }
        }
    }
    let d0 = d0_sq.sqrt();
    if d0 == 0.0 {
        return 0.0;
    }
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(quantize(p, d0)).or_default().push(i);
    }
    let mut best_sq = d0_sq;
    for (i, p) in points.iter().enumerate() {
        let (qx, qy, qz) = quantize(p, d0);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = grid.get(&(qx + dx, qy + dy, qz + dz)) {
                        for &j in ids {
                            if j > i {
                                best_sq = best_sq.min((p - points[j]).norm_squared());
                            }
                        }
                    }
                }
            }
        }
    }
    best_sq.sqrt()
}

// ── Boundary extraction ─────────────────────────────────────────────────────

fn snap_to_lattice(
    points: &[Vector3<f64>],
    spacing: f64,
) -> Result<(Vec<(i64, i64, i64)>, Vector3<f64>), IngestError> {
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(IngestError::BadSpacing(spacing));
    }
    let anchor = points.iter().fold(
        Vector3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
        |m, p| m.inf(p),
    );
    let mut keys = Vec::with_capacity(points.len());
    for (index, p) in points.iter().enumerate() {
        let rel = (p - anchor) / spacing;
        let mut key = [0i64; 3];
        for axis in 0..3 {
            let k = rel[axis].round();
            let residual = (rel[axis] - k).abs();
            if residual > GRID_SNAP_TOL {
                return Err(IngestError::OffGrid {
                    index,
                    axis,
                    residual,
                });
            }
            key[axis] = k as i64;
        }
        keys.push((key[0], key[1], key[2]));
    }
    Ok((keys, anchor))
}

/// Points of a voxel class missing at least one of their 6 axis neighbours
/// on the lattice of the given spacing; input order is preserved.
pub fn extract_boundary(
    points: &[Vector3<f64>],
    spacing: f64,
) -> Result<Vec<Vector3<f64>>, IngestError> {
    let (keys, _) = snap_to_lattice(points, spacing)?;
    let occupied: HashSet<(i64, i64, i64)> = keys.iter().copied().collect();
    const NEIGHBOURS: [(i64, i64, i64); 6] = [
        (1, 0, 0),
        (-1, 0, 0),
        (0, 1, 0),
        (0, -1, 0),
        (0, 0, 1),
        (0, 0, -1),
    ];
    let mut out = Vec::new();
    for (p, key) in points.iter().zip(&keys) {
        let interior = NEIGHBOURS
            .iter()
            .all(|d| occupied.contains(&(key.0 + d.0, key.1 + d.1, key.2 + d.2)));
        if !interior {
            out.push(*p);
        }
    }
    Ok(out)
}

/// Reconstructs the full bounding-box lattice of the given points at the
/// given spacing, anchored at the componentwise minimum so that on-grid
/// input points coincide with lattice points. Ordered x-fastest.
pub fn reconstruct_grid(
    points: &[Vector3<f64>],
    spacing: f64,
) -> Result<Vec<Vector3<f64>>, IngestError> {
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(IngestError::BadSpacing(spacing));
    }
    if points.is_empty() {
        return Err(IngestError::Empty);
    }
    let lo = points.iter().fold(
        Vector3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
        |m, p| m.inf(p),
    );
    let hi = points.iter().fold(
        Vector3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |m, p| m.sup(p),
    );
    let mut n = [0usize; 3];
    for axis in 0..3 {
        n[axis] = ((hi[axis] - lo[axis]) / spacing).round() as usize;
    }
    let total = (n[0] + 1)
        .saturating_mul(n[1] + 1)
        .saturating_mul(n[2] + 1);
    if total > MAX_GRID_POINTS {
        return Err(IngestError::GridTooLarge(total));
    }
    let mut out = Vec::with_capacity(total);
    for k in 0..=n[2] {
        for j in 0..=n[1] {
            for i in 0..=n[0] {
                out.push(lo + Vector3::new(i as f64, j as f64, k as f64) * spacing);
            }
        }
    }
    Ok(out)
}
