//! Obstacle decomposition: density clustering of obstacle voxels, k-means
//! sub-clustering, and the grow-until-covered loop that wraps each
//! sub-cluster in an enclosing ellipsoid.
//!
//! Everything here is deterministic: DBSCAN resolves border-point ties by
//! lowest core index, k-means seeds by farthest-point from the
//! centroid-nearest voxel, and clusters come back ordered by their lowest
//! member index.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::fitting::{self, FitError};
use crate::geometry::Ellipsoid;

// ── Errors ──────────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("search radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("min_pts must be at least 1")]
    BadMinPts,
    #[error("k must satisfy 1 ≤ k ≤ {n}, got {k}")]
    BadK { k: usize, n: usize },
    #[error("no points to cluster")]
    Empty,
    #[error("coverage threshold must be ≥ 1, got {0}")]
    BadThreshold(f64),
    #[error("no obstacle points inside any ellipsoid; ellipsoids are malformed")]
    NoObstacleInside,
    #[error(transparent)]
    Fit(#[from] FitError),
}

// ── Types ───────────────────────────────────────────────────────────────────

/// A partition of the input into clusters plus (for `min_pts > 1`) noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    pub clusters: Vec<Vec<Vector3<f64>>>,
    pub noise: Vec<Vector3<f64>>,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }
}

/// Voxel bookkeeping for one ellipsoid set over one cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageReport {
    pub grid_points_inside: usize,
    pub obstacle_points_inside: usize,
    pub ratio: f64,
}

/// Per-cluster outcome of the obstacle builder.
#[derive(Debug, Clone, Serialize)]
pub struct ClusterDiagnostic {
    pub cluster_id: usize,
    pub n_points: usize,
    pub k_final: usize,
    pub ratio: f64,
    /// Set when the sub-cluster count hit the cluster size before the
    /// coverage threshold was met; the best ratio seen is kept.
    pub capped: bool,
}

#[derive(Debug, Clone)]
pub struct ObstacleBuild {
    pub ellipsoids: Vec<Ellipsoid>,
    pub diagnostics: Vec<ClusterDiagnostic>,
}

// ── Neighbor search ─────────────────────────────────────────────────────────

struct CellGrid {
    cell: f64,
    map: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl CellGrid {
    fn build(points: &[Vector3<f64>], cell: f64) -> Self {
        let mut map: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            map.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self { cell, map }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Indices within `radius` of `p` (inclusive), in ascending index order.
    fn neighbors(&self, points: &[Vector3<f64>], p: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let (cx, cy, cz) = Self::key(p, self.cell);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.map.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &i in ids {
                            if (points[i] - p).norm_squared() <= r2 {
                                out.push(i);
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

// ── DBSCAN ──────────────────────────────────────────────────────────────────

/// Density clustering with the voxel spacing as search radius. A point's
/// neighborhood includes itself, so `min_pts = 1` makes every point core and
/// the clusters are exactly the connected components of the radius graph.
pub fn dbscan(
    points: &[Vector3<f64>],
    radius: f64,
    min_pts: usize,
) -> Result<ClusterSet, ClusterError> {
    if !(radius > 0.0) {
        return Err(ClusterError::BadRadius(radius));
    }
    if min_pts < 1 {
        return Err(ClusterError::BadMinPts);
    }
    let n = points.len();
    let grid = CellGrid::build(points, radius);
    let neighbors: Vec<Vec<usize>> = points
        .iter()
        .map(|p| grid.neighbors(points, p, radius))
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    const UNASSIGNED: usize = usize::MAX;
    let mut label = vec![UNASSIGNED; n];
    let mut cluster_count = 0;

    // flood-fill maximal components over core-core adjacency
    for start in 0..n {
        if !core[start] || label[start] != UNASSIGNED {
            continue;
        }
        let id = cluster_count;
        cluster_count += 1;
        let mut stack = vec![start];
        label[start] = id;
        while let Some(i) = stack.pop() {
            for &j in &neighbors[i] {
                if core[j] && label[j] == UNASSIGNED {
                    label[j] = id;
                    stack.push(j);
                }
            }
        }
    }

    // border points join the cluster of their lowest-index core neighbor
    for i in 0..n {
        if core[i] || label[i] != UNASSIGNED {
            continue;
        }
        if let Some(&j) = neighbors[i].iter().find(|&&j| core[j]) {
            label[i] = label[j];
        }
    }

    let mut clusters = vec![Vec::new(); cluster_count];
    let mut noise = Vec::new();
    for i in 0..n {
        if label[i] == UNASSIGNED {
            noise.push(points[i]);
        } else {
            clusters[label[i]].push(points[i]);
        }
    }
    Ok(ClusterSet { clusters, noise })
}

// ── k-means ─────────────────────────────────────────────────────────────────

/// Lloyd's algorithm with deterministic farthest-point seeding. The first
/// seed is the point nearest the centroid; each further seed maximizes the
/// distance to its nearest chosen seed (ties by lowest index). The `seed`
/// argument is accepted for interface stability but unused — the seeding is
/// fully deterministic.
pub fn kmeans(
    points: &[Vector3<f64>],
    k: usize,
    seed: u64,
) -> Result<ClusterSet, ClusterError> {
    let (set, _) = kmeans_with_history(points, k, seed)?;
    Ok(set)
}

fn kmeans_with_history(
    points: &[Vector3<f64>],
    k: usize,
    _seed: u64,
) -> Result<(ClusterSet, Vec<f64>), ClusterError> {
    let n = points.len();
    if k < 1 || k > n {
        return Err(ClusterError::BadK { k, n });
    }

    let centroid = points.iter().sum::<Vector3<f64>>() / n as f64;
    let mut seeds = Vec::with_capacity(k);
    let first = (0..n)
        .min_by(|&a, &b| {
            (points[a] - centroid)
                .norm_squared()
                .total_cmp(&(points[b] - centroid).norm_squared())
        })
        .unwrap();
    seeds.push(first);
    let mut dist_to_seed: Vec<f64> = points
        .iter()
        .map(|p| (p - points[first]).norm_squared())
        .collect();
    while seeds.len() < k {
        let next = (0..n)
            .max_by(|&a, &b| dist_to_seed[a].total_cmp(&dist_to_seed[b]))
            .unwrap();
        seeds.push(next);
        for (d, p) in dist_to_seed.iter_mut().zip(points) {
            *d = d.min((p - points[next]).norm_squared());
        }
    }

    let mut centers: Vec<Vector3<f64>> = seeds.iter().map(|&i| points[i]).collect();
    let mut assign = vec![0usize; n];
    let mut history = Vec::new();

    for _round in 0..200 {
        // assignment step (ties to the lowest center index)
        let mut changed = false;
        let mut objective = 0.0;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    (p - centers[a])
                        .norm_squared()
                        .total_cmp(&(p - centers[b]).norm_squared())
                })
                .unwrap();
            objective += (p - centers[best]).norm_squared();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        history.push(objective);

        // empty clusters grab the point farthest from its current center
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        let mut repaired = false;
        for c in 0..k {
            if counts[c] == 0 {
                let worst = (0..n)
                    .filter(|&i| counts[assign[i]] > 1)
                    .max_by(|&a, &b| {
                        (points[a] - centers[assign[a]])
                            .norm_squared()
                            .total_cmp(&(points[b] - centers[assign[b]]).norm_squared())
                    })
                    .expect("a non-singleton cluster exists whenever one is empty");
                counts[assign[worst]] -= 1;
                assign[worst] = c;
                counts[c] = 1;
                repaired = true;
            }
        }

        if !changed && !repaired && history.len() > 1 {
            break;
        }

        // update step
        let mut sums = vec![Vector3::zeros(); k];
        for (i, p) in points.iter().enumerate() {
            sums[assign[i]] += p;
        }
        for c in 0..k {
            centers[c] = sums[c] / counts[c] as f64;
        }
    }

    let mut clusters = vec![Vec::new(); k];
    for (i, p) in points.iter().enumerate() {
        clusters[assign[i]].push(*p);
    }
    Ok((
        ClusterSet {
            clusters,
            noise: Vec::new(),
        },
        history,
    ))
}

// ── Coverage ────────────────────────────────────────────────────────────────

const INSIDE_TOL: f64 = 1e-9;

fn inside_any(ellipsoids: &[Ellipsoid], p: &Vector3<f64>) -> bool {
    ellipsoids.iter().any(|e| {
        // cheap axis-aligned reject before the quadratic form
        let hw = e.aabb_half_widths();
        let d = p - e.center();
        d.x.abs() <= hw.x + INSIDE_TOL
            && d.y.abs() <= hw.y + INSIDE_TOL
            && d.z.abs() <= hw.z + INSIDE_TOL
            && e.q_dist_sq(p) <= 1.0 + INSIDE_TOL
    })
}

/// Counts MRI grid points and obstacle-cluster points inside the ellipsoid
/// union; the ratio measures how much empty tissue the ellipsoids swallow.
pub fn coverage(
    ellipsoids: &[Ellipsoid],
    cluster_points: &[Vector3<f64>],
    grid: &[Vector3<f64>],
) -> Result<CoverageReport, ClusterError> {
    if cluster_points.is_empty() {
        return Err(ClusterError::Empty);
    }
    let obstacle_points_inside = cluster_points
        .iter()
        .filter(|p| inside_any(ellipsoids, p))
        .count();
    if obstacle_points_inside == 0 {
        return Err(ClusterError::NoObstacleInside);
    }
    let grid_points_inside = grid.iter().filter(|p| inside_any(ellipsoids, p)).count();
    Ok(CoverageReport {
        grid_points_inside,
        obstacle_points_inside,
        ratio: grid_points_inside as f64 / obstacle_points_inside as f64,
    })
}

// ── Obstacle builder ────────────────────────────────────────────────────────

fn nearest_cluster(clusters: &[Vec<Vector3<f64>>], p: &Vector3<f64>) -> usize {
    let mut best = (f64::INFINITY, 0usize);
    for (i, cluster) in clusters.iter().enumerate() {
        for q in cluster {
            let d = (p - q).norm_squared();
            if d < best.0 {
                best = (d, i);
            }
        }
    }
    best.1
}

/// Splits the obstacle voxels with DBSCAN, then grows the number of k-means
/// sub-clusters per cluster — each wrapped in an enclosing ellipsoid — until
/// the grid-to-obstacle coverage ratio drops to `c_th`. Returns the ellipsoid
/// union and per-cluster diagnostics.
pub fn build_obstacles(
    points: &[Vector3<f64>],
    c_th: f64,
    grid: &[Vector3<f64>],
    delta_mri: f64,
    min_pts: usize,
    k0: usize,
) -> Result<ObstacleBuild, ClusterError> {
    if !(c_th >= 1.0) {
        return Err(ClusterError::BadThreshold(c_th));
    }
    if points.is_empty() {
        return Err(ClusterError::Empty);
    }
    let mut set = dbscan(points, delta_mri, min_pts)?;
    if set.clusters.is_empty() {
        // nothing dense enough: keep every voxel in one cluster
        set.clusters = vec![std::mem::take(&mut set.noise)];
    } else if !set.noise.is_empty() {
        // no voxel is discarded: fold noise into the nearest cluster
        for p in std::mem::take(&mut set.noise) {
            let i = nearest_cluster(&set.clusters, &p);
            set.clusters[i].push(p);
        }
    }

    let per_cluster: Vec<Result<(Vec<Ellipsoid>, ClusterDiagnostic), ClusterError>> = set
        .clusters
        .par_iter()
        .enumerate()
        .map(|(cluster_id, cluster)| {
            let k_start = k0.clamp(1, cluster.len());
            let mut best: Option<(Vec<Ellipsoid>, f64, usize)> = None;
            let mut k = k_start;
            loop {
                let subs = kmeans(cluster, k, 0)?;
                let mut ells = Vec::with_capacity(k);
                for sub in &subs.clusters {
                    ells.push(fitting::fit_enclosing(sub, delta_mri)?.ellipsoid);
                }
                let report = coverage(&ells, cluster, grid)?;
                if report.ratio <= c_th {
                    return Ok((
                        ells,
                        ClusterDiagnostic {
                            cluster_id,
                            n_points: cluster.len(),
                            k_final: k,
                            ratio: report.ratio,
                            capped: false,
                        },
                    ));
                }
                if best.as_ref().is_none_or(|(_, r, _)| report.ratio < *r) {
                    best = Some((ells, report.ratio, k));
                }
                if k >= cluster.len() {
                    let (ells, ratio, k_final) = best.expect("at least one pass ran");
                    return Ok((
                        ells,
                        ClusterDiagnostic {
                            cluster_id,
                            n_points: cluster.len(),
                            k_final,
                            ratio,
                            capped: true,
                        },
                    ));
                }
                k += 1;
            }
        })
        .collect();

    let mut ellipsoids = Vec::new();
    let mut diagnostics = Vec::new();
    for item in per_cluster {
        let (ells, diag) = item?;
        ellipsoids.extend(ells);
        diagnostics.push(diag);
    }
    Ok(ObstacleBuild {
        ellipsoids,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn blob(center: Vector3<f64>, n: usize, spread: f64, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                center
                    + Vector3::new(
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                        rng.gen::<f64>() - 0.5,
                    ) * (2.0 * spread)
            })
            .collect()
    }

    /// Brute-force connected components of the radius graph, as point sets.
    fn component_oracle(points: &[Vector3<f64>], radius: f64) -> Vec<Vec<usize>> {
        let n = points.len();
        let mut label = vec![usize::MAX; n];
        let mut count = 0;
        for s in 0..n {
            if label[s] != usize::MAX {
                continue;
            }
            let id = count;
            count += 1;
            let mut stack = vec![s];
            label[s] = id;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    if label[j] == usize::MAX
                        && (points[i] - points[j]).norm() <= radius
                    {
                        label[j] = id;
                        stack.push(j);
                    }
                }
            }
        }
        let mut comps = vec![Vec::new(); count];
        for i in 0..n {
            comps[label[i]].push(i);
        }
        comps
    }

    fn as_sorted_sets(clusters: &[Vec<Vector3<f64>>]) -> Vec<Vec<[u64; 3]>> {
        let mut sets: Vec<Vec<[u64; 3]>> = clusters
            .iter()
            .map(|c| {
                let mut v: Vec<[u64; 3]> = c
                    .iter()
                    .map(|p| [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()])
                    .collect();
                v.sort_unstable();
                v
            })
            .collect();
        sets.sort_unstable();
        sets
    }

    #[test]
    fn dbscan_matches_component_oracle() {
        let mut pts = blob(Vector3::zeros(), 40, 0.5, 1);
        pts.extend(blob(Vector3::new(30.0, 0.0, 0.0), 35, 0.5, 2));
        pts.extend(blob(Vector3::new(0.0, 25.0, 0.0), 25, 0.5, 3));
        let radius = 1.5;
        let set = dbscan(&pts, radius, 1).unwrap();
        assert!(set.noise.is_empty());

        let oracle = component_oracle(&pts, radius);
        let oracle_sets: Vec<Vec<Vector3<f64>>> = oracle
            .iter()
            .map(|ids| ids.iter().map(|&i| pts[i]).collect())
            .collect();
        assert_eq!(as_sorted_sets(&set.clusters), as_sorted_sets(&oracle_sets));
    }

    #[test]
    fn dbscan_two_separated_blobs() {
        let mut pts = blob(Vector3::zeros(), 30, 0.4, 7);
        pts.extend(blob(Vector3::new(10.0, 0.0, 0.0), 30, 0.4, 8));
        let set = dbscan(&pts, 1.0, 1).unwrap();
        assert_eq!(set.len(), 2);
    }

    #[test]
    fn dbscan_chain_is_one_cluster() {
        let pts: Vec<Vector3<f64>> = (0..20)
            .map(|i| Vector3::new(i as f64 * 0.9, 0.0, 0.0))
            .collect();
        let set = dbscan(&pts, 1.0, 2).unwrap();
        assert_eq!(set.len(), 1);
        assert!(set.noise.is_empty());
        assert_eq!(set.clusters[0].len(), 20);
    }

    #[test]
    fn dbscan_isolated_point_is_noise() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0)];
        let set = dbscan(&pts, 1.0, 2).unwrap();
        assert_eq!(set.len(), 0);
        assert_eq!(set.noise.len(), 1);
    }

    #[test]
    fn dbscan_is_order_independent_as_partition() {
        let mut pts = blob(Vector3::zeros(), 30, 1.0, 4);
        pts.extend(blob(Vector3::new(12.0, -3.0, 2.0), 20, 1.0, 5));
        let set_a = dbscan(&pts, 2.0, 1).unwrap();

        let mut shuffled = pts.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(99));
        let set_b = dbscan(&shuffled, 2.0, 1).unwrap();
        assert_eq!(as_sorted_sets(&set_a.clusters), as_sorted_sets(&set_b.clusters));
    }

    #[test]
    fn dbscan_border_point_joins_lowest_core() {
        // Two 4-point chains are core clusters at min_pts = 4; the middle
        // point reaches one end of each chain, so its neighborhood (self +
        // two chain ends) is too small to make it core. It must join the
        // cluster of its lowest-index core neighbor.
        let line = |x: f64| Vector3::new(x, 0.0, 0.0);
        let pts = vec![
            line(0.0),
            line(0.3),
            line(0.6),
            line(0.9), // index 3: core, lowest-index core neighbor of the border point
            line(4.3), // index 4: core of the right chain
            line(4.6),
            line(4.9),
            line(5.2),
            line(2.6), // index 8: border point, 1.7 from both 0.9 and 4.3
        ];
        let set = dbscan(&pts, 1.8, 4).unwrap();
        assert_eq!(set.len(), 2);
        let with_border: Vec<_> = set
            .clusters
            .iter()
            .filter(|c| c.iter().any(|p| p.x == 2.6))
            .collect();
        assert_eq!(with_border.len(), 1);
        assert_eq!(with_border[0].len(), 5);
        assert!(with_border[0].iter().any(|p| p.x == 0.0));
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let pts = blob(Vector3::new(1.0, 2.0, 3.0), 25, 0.7, 11);
        let set = kmeans(&pts, 1, 0).unwrap();
        assert_eq!(set.len(), 1);
        let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
        let got = set.clusters[0].iter().sum::<Vector3<f64>>() / set.clusters[0].len() as f64;
        assert_abs_diff_eq!(got, mean, epsilon = 1e-12);
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let a = blob(Vector3::zeros(), 20, 0.5, 21);
        let b = blob(Vector3::new(15.0, 0.0, 0.0), 25, 0.5, 22);
        let mut pts = a.clone();
        pts.extend(b.iter());
        for seed in [0u64, 1, 42] {
            let set = kmeans(&pts, 2, seed).unwrap();
            assert_eq!(set.len(), 2);
            let mut sizes: Vec<usize> = set.clusters.iter().map(Vec::len).collect();
            sizes.sort_unstable();
            assert_eq!(sizes, vec![20, 25]);
            for c in &set.clusters {
                let all_left = c.iter().all(|p| p.x < 7.5);
                let all_right = c.iter().all(|p| p.x > 7.5);
                assert!(all_left || all_right);
            }
        }
    }

    #[test]
    fn kmeans_k_equals_n() {
        let pts = blob(Vector3::zeros(), 8, 1.0, 31);
        let set = kmeans(&pts, 8, 0).unwrap();
        assert_eq!(set.len(), 8);
        assert!(set.clusters.iter().all(|c| c.len() == 1));
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let pts = blob(Vector3::zeros(), 5, 1.0, 33);
        assert!(matches!(kmeans(&pts, 0, 0), Err(ClusterError::BadK { .. })));
        assert!(matches!(kmeans(&pts, 6, 0), Err(ClusterError::BadK { .. })));
    }

    #[test]
    fn kmeans_objective_never_increases() {
        let mut pts = blob(Vector3::zeros(), 40, 2.0, 41);
        pts.extend(blob(Vector3::new(4.0, 1.0, -2.0), 30, 2.0, 42));
        let (_, history) = kmeans_with_history(&pts, 4, 0).unwrap();
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "objective rose: {} -> {}", w[0], w[1]);
        }
    }

    fn lattice_block(nx: i32, ny: i32, nz: i32) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    pts.push(Vector3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        pts
    }

    #[test]
    fn coverage_perfectly_filled_is_one() {
        let grid = lattice_block(4, 5, 2);
        let ell = Ellipsoid::ball(Vector3::new(1.5, 2.0, 0.5), 50.0).unwrap();
        let report = coverage(&[ell], &grid, &grid).unwrap();
        assert_eq!(report.grid_points_inside, 40);
        assert_eq!(report.obstacle_points_inside, 40);
        assert_abs_diff_eq!(report.ratio, 1.0);
    }

    #[test]
    fn coverage_counts_ratio_two() {
        let grid = lattice_block(4, 5, 2);
        // only the z = 0 layer is obstacle
        let cluster: Vec<Vector3<f64>> = grid.iter().filter(|p| p.z == 0.0).copied().collect();
        assert_eq!(cluster.len(), 20);
        let ell = Ellipsoid::ball(Vector3::new(1.5, 2.0, 0.5), 50.0).unwrap();
        let report = coverage(&[ell], &cluster, &grid).unwrap();
        assert_eq!(report.grid_points_inside, 40);
        assert_eq!(report.obstacle_points_inside, 20);
        assert_abs_diff_eq!(report.ratio, 2.0);
    }

    #[test]
    fn coverage_rejects_useless_ellipsoids() {
        let grid = lattice_block(3, 3, 3);
        let far = Ellipsoid::ball(Vector3::new(100.0, 0.0, 0.0), 1.0).unwrap();
        assert!(matches!(
            coverage(&[far], &grid, &grid),
            Err(ClusterError::NoObstacleInside)
        ));
    }

    /// Two 5×5×5 voxel cubes joined by a 1-voxel-wide bridge.
    fn dumbbell() -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for x in 0..5 {
            for y in 0..5 {
                for z in 0..5 {
                    pts.push(Vector3::new(x as f64, y as f64, z as f64));
                    pts.push(Vector3::new((x + 15) as f64, y as f64, z as f64));
                }
            }
        }
        for x in 5..15 {
            pts.push(Vector3::new(x as f64, 2.0, 2.0));
        }
        pts
    }

    fn dumbbell_grid() -> Vec<Vector3<f64>> {
        let mut grid = Vec::new();
        for x in -2..22 {
            for y in -2..7 {
                for z in -2..7 {
                    grid.push(Vector3::new(x as f64, y as f64, z as f64));
                }
            }
        }
        grid
    }

    #[test]
    fn coverage_dumbbell_prefers_two_ellipsoids() {
        let pts = dumbbell();
        let grid = dumbbell_grid();

        let one = fitting::fit_enclosing(&pts, 1.0).unwrap().ellipsoid;
        let single = coverage(&[one], &pts, &grid).unwrap();

        let split = kmeans(&pts, 2, 0).unwrap();
        let pair: Vec<Ellipsoid> = split
            .clusters
            .iter()
            .map(|c| fitting::fit_enclosing(c, 1.0).unwrap().ellipsoid)
            .collect();
        let double = coverage(&pair, &pts, &grid).unwrap();

        assert!(
            double.ratio < single.ratio,
            "two-ellipsoid ratio {} not below one-ellipsoid {}",
            double.ratio,
            single.ratio
        );
    }

    #[test]
    fn build_single_blob_generous_threshold() {
        let pts = lattice_block(4, 4, 4);
        let grid = lattice_block(4, 4, 4);
        let built = build_obstacles(&pts, 100.0, &grid, 1.0, 1, 1).unwrap();
        assert_eq!(built.ellipsoids.len(), 1);
        assert_eq!(built.diagnostics[0].k_final, 1);
        assert!(!built.diagnostics[0].capped);
    }

    #[test]
    fn build_infinite_threshold_never_grows_k() {
        let pts = dumbbell();
        // grid irrelevant at c_th = ∞; DBSCAN sees one bridged component
        let built = build_obstacles(&pts, f64::INFINITY, &dumbbell_grid(), 1.0, 1, 1).unwrap();
        assert_eq!(built.ellipsoids.len(), 1);

        // split the bridge: radius below the gap produces one per component
        let mut two = lattice_block(3, 3, 3);
        two.extend(lattice_block(3, 3, 3).iter().map(|p| p + Vector3::new(20.0, 0.0, 0.0)));
        let built = build_obstacles(&two, f64::INFINITY, &lattice_block(1, 1, 1), 1.0, 1, 1).unwrap();
        assert_eq!(built.ellipsoids.len(), 2);
    }

    #[test]
    fn build_dumbbell_grows_k_and_meets_threshold() {
        let pts = dumbbell();
        let grid = dumbbell_grid();
        let c_th = 3.0;
        let built = build_obstacles(&pts, c_th, &grid, 1.0, 1, 1).unwrap();
        let diag = &built.diagnostics[0];
        assert!(diag.k_final >= 2, "k stayed at {}", diag.k_final);
        assert!(!diag.capped);
        assert!(diag.ratio <= c_th);

        // enumeration check of the reported ratio
        let report = coverage(&built.ellipsoids, &pts, &grid).unwrap();
        assert_abs_diff_eq!(report.ratio, diag.ratio);

        // enclosure: every obstacle voxel inside some ellipsoid
        for p in &pts {
            assert!(
                built
                    .ellipsoids
                    .iter()
                    .any(|e| e.q_dist_sq(p) <= 1.0 + 1e-9),
                "voxel {p:?} uncovered"
            );
        }
    }

    #[test]
    fn build_count_is_monotone_in_threshold() {
        let pts = dumbbell();
        let grid = dumbbell_grid();
        let mut last = usize::MAX;
        for c_th in [2.0, 3.0, 6.0, 1e9] {
            let built = build_obstacles(&pts, c_th, &grid, 1.0, 1, 1).unwrap();
            assert!(
                built.ellipsoids.len() <= last,
                "count rose to {} at threshold {}",
                built.ellipsoids.len(),
                c_th
            );
            last = built.ellipsoids.len();
        }
    }

    #[test]
    fn build_merges_noise_when_min_pts_high() {
        let mut pts = lattice_block(3, 3, 3);
        pts.push(Vector3::new(8.0, 0.0, 0.0)); // isolated voxel -> noise at min_pts 2
        let grid = lattice_block(12, 3, 3);
        let built = build_obstacles(&pts, 1e9, &grid, 1.0, 2, 1).unwrap();
        // the lone voxel is folded into the cube's cluster, so its ellipsoid
        // must reach out to cover it
        assert!(built
            .ellipsoids
            .iter()
            .any(|e| e.q_dist_sq(&Vector3::new(8.0, 0.0, 0.0)) <= 1.0 + 1e-9));
    }
}
