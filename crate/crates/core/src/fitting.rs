//! Estimation of the planning geometry from labelled voxel classes: the
//! hemisphere plane, the outer skull ellipsoid, the inscribed target
//! ellipsoid, and enclosing ellipsoids for obstacle clusters.
//!
//! All four fits are smooth local optimizations run through the
//! [`solver`](crate::solver) layer. Positive definiteness is enforced by
//! construction — `Q = Rᵀ diag(m) R` with `R` from a quaternion and `m`
//! strictly positive (elementwise `exp`, plus a floor where eigenvalues are
//! bounded below). A Cholesky-factor parameterization is kept behind a
//! switch for the skull fit for comparison.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    pd_from_rotation_params, quaternion_from_rotation, Ellipsoid, GeometryError, HalfSpace,
    HalfSpaceSign,
};
use crate::ingestion::{self, IngestError};
use crate::solver::{self, Dual, NlpDims, NlpProblem, Real, SolveOptions, SolveStatus};

/// Weight of the quaternion gauge term `ρ(‖q‖² − 1)²` that pins the scale
/// freedom of the rotation parameterization.
const GAUGE_WEIGHT: f64 = 1e-3;

/// Tie-break weight pulling enclosing ellipsoids toward the smallest-volume
/// encloser. The boundary-distance term alone is indifferent between a tight
/// ellipsoid and an enormous one whose surface skims the whole cluster (every
/// point ends up with d² ≈ 1 either way), so the volume term must carry real
/// weight relative to the per-point mean to rule the degenerate family out.
const ENCLOSING_TIE_BREAK: f64 = 0.05;

/// Singular values below this ratio of the largest count as rank collapse.
const RANK_RATIO_TOL: f64 = 1e-10;

// ── Errors ──────────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum FitError {
    #[error("hyperplane fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error(
        "hyperplane fit is rank-deficient (singular-value ratio {ratio:.3e}): \
         points are collinear or the plane passes through the origin"
    )]
    RankDeficient { ratio: f64 },
    #[error("no target points supplied for hemisphere selection")]
    NoTargets,
    #[error("skull fit needs at least 9 points inside the hemisphere, got {0}")]
    TooFewSkullPoints(usize),
    #[error("point cloud spans less than 3 dimensions (principal spread {spread:.3e})")]
    DegenerateCloud { spread: f64 },
    #[error("voxel spacing must be positive, got {0}")]
    BadSpacing(f64),
    #[error(
        "target fit cannot satisfy the eigenvalue floor {bound:.6} implied by \
         voxel spacing {delta:.6}"
    )]
    TargetBoundInfeasible { bound: f64, delta: f64 },
    #[error("fit did not converge ({status:?}); worst residual {residual:.3e}")]
    NoConvergence { status: SolveStatus, residual: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
}

// ── Results ─────────────────────────────────────────────────────────────────

/// A fitted ellipsoid together with convergence diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub ellipsoid: Ellipsoid,
    /// Final value of the fit's own objective (without regularizers).
    pub objective: f64,
    /// Worst constraint residual (or worst surface residual for the skull).
    pub residual_max: f64,
    /// Inner optimizer iterations spent.
    pub iterations: usize,
}

/// Fitted scene geometry in export form. `alternate` carries the second
/// hemisphere when target points straddle the fitted plane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub skull: Ellipsoid,
    pub hemisphere: HalfSpace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternate: Option<HalfSpace>,
    pub target: Ellipsoid,
    pub obstacles: Vec<Ellipsoid>,
}

// ── Hyperplane ──────────────────────────────────────────────────────────────

/// Least-squares plane `vᵀh = 1` through the hemisphere voxels. Returns the
/// coefficient vector and both half-spaces split at the plane.
pub fn fit_hyperplane(points: &[Vector3<f64>]) -> Result<(Vector3<f64>, [HalfSpace; 2]), FitError> {
    if points.len() < 3 {
        return Err(FitError::TooFewPoints(points.len()));
    }
    let mut v = DMatrix::zeros(points.len(), 3);
    for (i, p) in points.iter().enumerate() {
        v.set_row(i, &nalgebra::RowVector3::new(p.x, p.y, p.z));
    }
    let ones = DVector::from_element(points.len(), 1.0);
    let svd = v.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > RANK_RATIO_TOL * smax) {
        return Err(FitError::RankDeficient {
            ratio: if smax > 0.0 { smin / smax } else { 0.0 },
        });
    }
    let h = svd
        .solve(&ones, 0.0)
        .map_err(|_| FitError::RankDeficient { ratio: smin / smax })?;
    let h = Vector3::new(h[0], h[1], h[2]);
    let below = HalfSpace::new(h, HalfSpaceSign::Le)?;
    Ok((h, [below, below.flipped()]))
}

/// Picks the half-space containing every target point (boundary counts as
/// inside). If the targets straddle the plane, both half-spaces come back and
/// the caller plans once per side.
pub fn select_hemisphere(
    halfspaces: &[HalfSpace; 2],
    targets: &[Vector3<f64>],
) -> Result<Vec<HalfSpace>, FitError> {
    if targets.is_empty() {
        return Err(FitError::NoTargets);
    }
    for hs in halfspaces {
        if targets.iter().all(|t| hs.contains(t, 0.0)) {
            return Ok(vec![*hs]);
        }
    }
    Ok(halfspaces.to_vec())
}

// ── Shared parameterization helpers ─────────────────────────────────────────

// Parameter layout for the rotation+diagonal fits:
//   x = [c0 c1 c2, q0 q1 q2 q3, t0 t1 t2],  Q = R(q)ᵀ diag(floor + exp t) R(q)
const NP: usize = 10;

/// `R(q)·w` for a possibly unnormalized quaternion, scale-invariantly.
fn quat_rotate<T: Real>(q: &[T], w: [T; 3]) -> [T; 3] {
    let (a, b, c, d) = (q[0], q[1], q[2], q[3]);
    let n2 = a * a + b * b + c * c + d * d;
    let s = T::constant(2.0) / n2;
    let one = T::constant(1.0);
    let r00 = one - s * (c * c + d * d);
    let r01 = s * (b * c - a * d);
    let r02 = s * (b * d + a * c);
    let r10 = s * (b * c + a * d);
    let r11 = one - s * (b * b + d * d);
    let r12 = s * (c * d - a * b);
    let r20 = s * (b * d - a * c);
    let r21 = s * (c * d + a * b);
    let r22 = one - s * (b * b + c * c);
    [
        r00 * w[0] + r01 * w[1] + r02 * w[2],
        r10 * w[0] + r11 * w[1] + r12 * w[2],
        r20 * w[0] + r21 * w[1] + r22 * w[2],
    ]
}

/// `‖v − c‖²_Q` under the rotation+diagonal parameterization with eigenvalue
/// floor `floor` (0 disables the floor).
fn q_dist_sq_params<T: Real>(x: &[T], v: &Vector3<f64>, floor: f64) -> T {
    let w = [
        T::constant(v.x) - x[0],
        T::constant(v.y) - x[1],
        T::constant(v.z) - x[2],
    ];
    let y = quat_rotate(&x[3..7], w);
    let fl = T::constant(floor);
    let m = [fl + x[7].exp(), fl + x[8].exp(), fl + x[9].exp()];
    m[0] * y[0] * y[0] + m[1] * y[1] * y[1] + m[2] * y[2] * y[2]
}

fn gauge_term<T: Real>(x: &[T]) -> T {
    let q = &x[3..7];
    let n2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3];
    let r = n2 - T::constant(1.0);
    T::constant(GAUGE_WEIGHT) * r * r
}

fn mean_point(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

fn covariance(points: &[Vector3<f64>], c: &Vector3<f64>) -> Matrix3<f64> {
    let mut cov = Matrix3::zeros();
    for p in points {
        let w = p - c;
        cov += w * w.transpose();
    }
    cov / points.len() as f64
}

/// Eigen-decomposition sorted ascending with a right-handed eigenvector
/// basis.
fn sorted_eigen(m: &Matrix3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let eig = m.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = Vector3::new(
        eig.eigenvalues[order[0]],
        eig.eigenvalues[order[1]],
        eig.eigenvalues[order[2]],
    );
    let mut vecs = Matrix3::from_columns(&[
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ]);
    if vecs.determinant() < 0.0 {
        vecs.set_column(2, &(-vecs.column(2)));
    }
    (vals, vecs)
}

/// Initial `[c, q, θ]` from the sample mean and the inverse covariance scaled
/// to unit mean Q-distance; eigenvalues are lifted above `floor` if needed.
/// Center and shape matrix of the moment-matched starting ellipsoid: the
/// inverse sample covariance, scaled so the mean of d² over the cloud is 1.
fn initial_center_q(points: &[Vector3<f64>]) -> (Vector3<f64>, Matrix3<f64>) {
    let c = mean_point(points);
    let mut cov = covariance(points, &c);
    let ridge = 1e-9 * cov.trace().max(1e-12);
    cov += Matrix3::identity() * ridge;
    let q_raw = cov.try_inverse().unwrap_or_else(|| {
        Matrix3::identity() * (3.0 / cov.trace().max(1e-30))
    });
    let mean_d: f64 = points
        .iter()
        .map(|p| ((p - c).transpose() * q_raw * (p - c))[0])
        .sum::<f64>()
        / points.len() as f64;
    (c, q_raw / mean_d.max(1e-30))
}

fn initial_params(points: &[Vector3<f64>], floor: f64) -> [f64; NP] {
    let (c, q0) = initial_center_q(points);
    let (vals, vecs) = sorted_eigen(&q0);
    // Q = U diag(vals) Uᵀ = R(q)ᵀ diag(m) R(q)  ⇒  R(q) = Uᵀ
    let quat = quaternion_from_rotation(&vecs.transpose());
    let mut x = [0.0; NP];
    x[0] = c.x;
    x[1] = c.y;
    x[2] = c.z;
    x[3..7].copy_from_slice(&quat);
    for k in 0..3 {
        let m = vals[k].max(floor * 1.1 + 1e-12);
        x[7 + k] = (m - floor).max(1e-12).ln();
    }
    x
}

fn params_to_ellipsoid(x: &[f64], floor: f64) -> Result<Ellipsoid, FitError> {
    let quat = [x[3], x[4], x[5], x[6]];
    let m = [
        floor + x[7].exp(),
        floor + x[8].exp(),
        floor + x[9].exp(),
    ];
    let q = pd_from_rotation_params(quat, m)?;
    Ok(Ellipsoid::new(Vector3::new(x[0], x[1], x[2]), q)?)
}

/// Adds the gradient of a scalar function to `grad` via one forward-mode
/// pass.
fn add_scalar_gradient(
    n: usize,
    f: impl Fn(&[Dual<NP>]) -> Dual<NP>,
    x: &[f64],
    grad: &mut [f64],
) {
    let mut value = [0.0];
    let mut jac = vec![0.0; n];
    solver::dense_jacobian::<NP>(n, 1, |xs, out| out[0] = f(xs), x, &mut value, &mut jac);
    for (g, j) in grad.iter_mut().zip(&jac) {
        *g += j;
    }
}

fn principal_spread(points: &[Vector3<f64>]) -> f64 {
    let c = mean_point(points);
    let (vals, _) = sorted_eigen(&covariance(points, &c));
    vals[0].max(0.0).sqrt()
}

fn fit_options(stat_tol: f64, feas_tol: f64) -> SolveOptions {
    SolveOptions {
        stat_tol,
        feas_tol,
        max_outer: 60,
        max_inner_per_outer: 800,
        max_total_inner: 8000,
        ..Default::default()
    }
}

fn coordinate_scale(points: &[Vector3<f64>]) -> f64 {
    let c = mean_point(points);
    let rms = (points.iter().map(|p| (p - c).norm_squared()).sum::<f64>()
        / points.len() as f64)
        .sqrt();
    rms.max(1e-3)
}

// ── Skull fit ───────────────────────────────────────────────────────────────

/// Positive-definite parameterization used by the skull fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PdParam {
    /// Quaternion rotation + positive diagonal (default; the better
    /// conditioned of the two in practice).
    #[default]
    RotationDiagonal,
    /// Lower-triangular Cholesky factor with `exp`-positive diagonal.
    Cholesky,
}

struct SkullProblem<'a> {
    points: &'a [Vector3<f64>],
    param: PdParam,
    scale: f64,
}

impl SkullProblem<'_> {
    fn n_vars(&self) -> usize {
        match self.param {
            PdParam::RotationDiagonal => NP,
            // [c0 c1 c2, a1, g21, a2, g31, g32, a3], diag gkk = exp(ak)
            PdParam::Cholesky => 9,
        }
    }

    fn point_dist<T: Real>(&self, x: &[T], v: &Vector3<f64>) -> T {
        match self.param {
            PdParam::RotationDiagonal => q_dist_sq_params(x, v, 0.0),
            PdParam::Cholesky => {
                let w = [
                    T::constant(v.x) - x[0],
                    T::constant(v.y) - x[1],
                    T::constant(v.z) - x[2],
                ];
                let (g11, g21, g22) = (x[3].exp(), x[4], x[5].exp());
                let (g31, g32, g33) = (x[6], x[7], x[8].exp());
                let z0 = g11 * w[0] + g21 * w[1] + g31 * w[2];
                let z1 = g22 * w[1] + g32 * w[2];
                let z2 = g33 * w[2];
                z0 * z0 + z1 * z1 + z2 * z2
            }
        }
    }

    fn objective<T: Real>(&self, x: &[T]) -> T {
        // mean rather than sum keeps gradient scales independent of the
        // cloud size; same minimizer
        let mut f = T::constant(0.0);
        let one = T::constant(1.0);
        for v in self.points {
            let r = self.point_dist(x, v) - one;
            f += r * r;
        }
        f = f / T::constant(self.points.len() as f64);
        if self.param == PdParam::RotationDiagonal {
            f += gauge_term(x);
        }
        f
    }
}

impl NlpProblem for SkullProblem<'_> {
    fn dims(&self) -> NlpDims {
        NlpDims {
            vars: self.n_vars(),
            eq: 0,
            ineq: 0,
        }
    }

    fn eval(&self, x: &[f64], _eq: &mut [f64], _ineq: &mut [f64]) -> f64 {
        self.objective(x)
    }

    fn accumulate_grad(
        &self,
        x: &[f64],
        w_obj: f64,
        _w_eq: &[f64],
        _w_ineq: &[f64],
        grad: &mut [f64],
    ) {
        add_scalar_gradient(
            self.n_vars(),
            |xs| Dual::constant(w_obj) * self.objective(xs),
            x,
            grad,
        );
    }

    fn x_scale(&self) -> Vec<f64> {
        let mut s = vec![1.0; self.n_vars()];
        s[..3].fill(self.scale);
        s
    }
}

/// Best-fit ellipsoid through the skull voxels inside the chosen hemisphere,
/// minimizing `Σ(‖v − c‖²_Q − 1)²`.
pub fn fit_skull(points: &[Vector3<f64>], hemi: &HalfSpace) -> Result<FitResult, FitError> {
    fit_skull_with(points, hemi, PdParam::RotationDiagonal)
}

pub fn fit_skull_with(
    points: &[Vector3<f64>],
    hemi: &HalfSpace,
    param: PdParam,
) -> Result<FitResult, FitError> {
    let inside: Vec<Vector3<f64>> = points
        .iter()
        .filter(|p| hemi.contains(p, 0.0))
        .copied()
        .collect();
    if inside.len() < 9 {
        return Err(FitError::TooFewSkullPoints(inside.len()));
    }
    let spread = principal_spread(&inside);
    if spread < 1e-12 {
        return Err(FitError::DegenerateCloud { spread });
    }

    let x0_rot = initial_params(&inside, 0.0);
    let problem = SkullProblem {
        points: &inside,
        param,
        scale: coordinate_scale(&inside),
    };
    let x0 = match param {
        PdParam::RotationDiagonal => x0_rot.to_vec(),
        PdParam::Cholesky => {
            let ell = params_to_ellipsoid(&x0_rot, 0.0)?;
            let chol = ell
                .q()
                .cholesky()
                .ok_or(GeometryError::NotPositiveDefinite)?;
            let l = chol.l();
            vec![
                x0_rot[0],
                x0_rot[1],
                x0_rot[2],
                l[(0, 0)].ln(),
                l[(1, 0)],
                l[(1, 1)].ln(),
                l[(2, 0)],
                l[(2, 1)],
                l[(2, 2)].ln(),
            ]
        }
    };

    let sol = solver::solve(&problem, &x0, &fit_options(1e-10, 1e-6));
    let ellipsoid = match param {
        PdParam::RotationDiagonal => params_to_ellipsoid(&sol.x, 0.0)?,
        PdParam::Cholesky => {
            let g = [
                sol.x[3].exp(),
                sol.x[4],
                sol.x[5].exp(),
                sol.x[6],
                sol.x[7],
                sol.x[8].exp(),
            ];
            let q = crate::geometry::pd_from_cholesky_params(g)?;
            Ellipsoid::new(Vector3::new(sol.x[0], sol.x[1], sol.x[2]), q)?
        }
    };
    let residual_max = inside
        .iter()
        .map(|p| (ellipsoid.q_dist_sq(p) - 1.0).abs())
        .fold(0.0, f64::max);
    if sol.status != SolveStatus::Optimal {
        return Err(FitError::NoConvergence {
            status: sol.status,
            residual: residual_max,
        });
    }
    let objective = inside
        .iter()
        .map(|p| (ellipsoid.q_dist_sq(p) - 1.0).powi(2))
        .sum();
    Ok(FitResult {
        ellipsoid,
        objective,
        residual_max,
        iterations: sol.inner_iters.max(1),
    })
}

// ── Target fit ──────────────────────────────────────────────────────────────

struct TargetProblem<'a> {
    boundary: &'a [Vector3<f64>],
    /// Eigenvalue lower bound `(2/spacing)²`, enforced as three inequality
    /// rows so the optimum is an ordinary active-set point.
    bound: f64,
    scale: f64,
}

impl NlpProblem for TargetProblem<'_> {
    fn dims(&self) -> NlpDims {
        NlpDims {
            vars: NP,
            eq: 0,
            ineq: self.boundary.len() + 3,
        }
    }

    fn eval(&self, x: &[f64], _eq: &mut [f64], ineq: &mut [f64]) -> f64 {
        let n = self.boundary.len();
        let mut f = 0.0;
        for (g, v) in ineq[..n].iter_mut().zip(self.boundary) {
            let d2 = q_dist_sq_params(x, v, 0.0);
            f += d2;
            *g = 1.0 - d2; // boundary points stay outside: d² ≥ 1
        }
        // the eigenvalue bound is linear in θ: θ_k ≥ ln(bound)
        let ln_bound = self.bound.ln();
        for k in 0..3 {
            ineq[n + k] = ln_bound - x[7 + k];
        }
        f / n as f64 + gauge_term(x)
    }

    fn accumulate_grad(
        &self,
        x: &[f64],
        w_obj: f64,
        _w_eq: &[f64],
        w_ineq: &[f64],
        grad: &mut [f64],
    ) {
        let n = self.boundary.len();
        let inv_n = 1.0 / n as f64;
        add_scalar_gradient(
            NP,
            |xs| {
                let mut phi = Dual::constant(w_obj) * gauge_term(xs);
                for (v, &w) in self.boundary.iter().zip(&w_ineq[..n]) {
                    let d2 = q_dist_sq_params(xs, v, 0.0);
                    phi += Dual::constant(w_obj * inv_n - w) * d2;
                }
                for k in 0..3 {
                    phi -= Dual::constant(w_ineq[n + k]) * xs[7 + k];
                }
                phi
            },
            x,
            grad,
        );
    }

    fn x_scale(&self) -> Vec<f64> {
        let mut s = vec![1.0; NP];
        s[..3].fill(self.scale);
        s
    }
}

/// Ellipsoid inscribed in the target voxel cloud: minimizes the summed
/// Q-distance of the cloud's boundary voxels subject to every boundary voxel
/// staying outside (`d² ≥ 1`) and an eigenvalue floor `(2/spacing)²` tied to
/// the voxel spacing.
pub fn fit_target(points: &[Vector3<f64>], delta_mri: f64) -> Result<FitResult, FitError> {
    if !(delta_mri > 0.0) {
        return Err(FitError::BadSpacing(delta_mri));
    }
    let spread = if points.len() >= 4 {
        principal_spread(points)
    } else {
        0.0
    };
    if points.len() < 4 || spread < 0.25 * delta_mri {
        return Err(FitError::DegenerateCloud { spread });
    }
    let boundary = ingestion::extract_boundary(points, delta_mri)?;
    if boundary.len() < 4 {
        return Err(FitError::DegenerateCloud {
            spread: principal_spread(&boundary),
        });
    }

    let bound = (2.0 / delta_mri).powi(2);
    let mut x0 = initial_params(&boundary, 0.0);
    // start as a small ball just above the eigenvalue bound, centred on the
    // cloud
    x0[7..].fill((1.2 * bound).ln());

    let problem = TargetProblem {
        boundary: &boundary,
        bound,
        scale: coordinate_scale(&boundary),
    };
    let sol = solver::solve(&problem, &x0, &fit_options(1e-7, 1e-9));
    if sol.status == SolveStatus::Infeasible {
        return Err(FitError::TargetBoundInfeasible {
            bound,
            delta: delta_mri,
        });
    }

    // lift eigenvalues strictly above the bound (shrinks, never grows)
    let mut x = sol.x.clone();
    for t in &mut x[7..] {
        *t = t.max((bound * (1.0 + 1e-9)).ln());
    }
    let mut ellipsoid = params_to_ellipsoid(&x, 0.0)?;
    let min_d2 = boundary
        .iter()
        .map(|p| ellipsoid.q_dist_sq(p))
        .fold(f64::INFINITY, f64::min);
    if min_d2 < 1.0 {
        // push every boundary voxel back onto or outside the unit level set
        ellipsoid = ellipsoid.with_q_scaled(1.0 / min_d2)?;
    }
    let residual_max = boundary
        .iter()
        .map(|p| (1.0 - ellipsoid.q_dist_sq(p)).max(0.0))
        .fold(0.0, f64::max);
    if sol.status != SolveStatus::Optimal {
        return Err(FitError::NoConvergence {
            status: sol.status,
            residual: residual_max,
        });
    }
    let objective = boundary.iter().map(|p| ellipsoid.q_dist_sq(p)).sum();
    Ok(FitResult {
        ellipsoid,
        objective,
        residual_max,
        iterations: sol.inner_iters.max(1),
    })
}

// ── Enclosing fit ───────────────────────────────────────────────────────────

// Enclosing-fit parameter layout (Cholesky, deliberately not exp-scaled so
// gradients stay polynomial and no coordinate can underflow shut):
//   x = [c0 c1 c2, g11 g21 g22 g31 g32 g33],  Q = G Gᵀ
// The −ε·ln det Q tie-break doubles as a barrier: det Q = (g11·g22·g33)², so
// the term climbs to +∞ when a diagonal entry approaches zero.
const NE: usize = 9;

struct EnclosingProblem<'a> {
    points: &'a [Vector3<f64>],
    scale: f64,
}

impl EnclosingProblem<'_> {
    fn point_dist<T: Real>(x: &[T], v: &Vector3<f64>) -> T {
        let w = [
            T::constant(v.x) - x[0],
            T::constant(v.y) - x[1],
            T::constant(v.z) - x[2],
        ];
        let z0 = x[3] * w[0] + x[4] * w[1] + x[6] * w[2];
        let z1 = x[5] * w[1] + x[7] * w[2];
        let z2 = x[8] * w[2];
        z0 * z0 + z1 * z1 + z2 * z2
    }

    fn tie_break<T: Real>(x: &[T]) -> T {
        // −ε·ln det Q with ln det Q = 2Σ ln|g_kk|
        let ln_det = (x[3].abs().ln() + x[5].abs().ln() + x[8].abs().ln()) * T::constant(2.0);
        -T::constant(ENCLOSING_TIE_BREAK) * ln_det
    }

    fn objective<T: Real>(&self, x: &[T]) -> T {
        let inv_n = T::constant(1.0 / self.points.len() as f64);
        let mut f = Self::tie_break(x);
        for v in self.points {
            f -= Self::point_dist(x, v) * inv_n;
        }
        f
    }
}

impl NlpProblem for EnclosingProblem<'_> {
    fn dims(&self) -> NlpDims {
        NlpDims {
            vars: NE,
            eq: 0,
            ineq: self.points.len(),
        }
    }

    fn eval(&self, x: &[f64], _eq: &mut [f64], ineq: &mut [f64]) -> f64 {
        for (g, v) in ineq.iter_mut().zip(self.points) {
            *g = Self::point_dist(x, v) - 1.0; // containment: d² ≤ 1
        }
        self.objective(x)
    }

    fn accumulate_grad(
        &self,
        x: &[f64],
        w_obj: f64,
        _w_eq: &[f64],
        w_ineq: &[f64],
        grad: &mut [f64],
    ) {
        let inv_n = 1.0 / self.points.len() as f64;
        add_scalar_gradient(
            NE,
            |xs| {
                let mut phi = Dual::constant(w_obj) * Self::tie_break(xs);
                for (v, &w) in self.points.iter().zip(w_ineq) {
                    let d2 = Self::point_dist(xs, v);
                    phi += Dual::constant(w - w_obj * inv_n) * d2;
                }
                phi
            },
            x,
            grad,
        );
    }

    fn x_scale(&self) -> Vec<f64> {
        let mut s = vec![1.0 / self.scale; NE];
        s[..3].fill(self.scale);
        s
    }
}

/// Ball-like fallback for clusters too small or too flat to pin an
/// ellipsoid: principal-axis extents floored at half the voxel spacing.
fn degenerate_encloser(points: &[Vector3<f64>], delta_mri: f64) -> Result<Ellipsoid, FitError> {
    let c = mean_point(points);
    let (_, vecs) = sorted_eigen(&covariance(points, &c));
    let mut semi = [0.5 * delta_mri; 3];
    for p in points {
        let w = vecs.transpose() * (p - c);
        for k in 0..3 {
            semi[k] = semi[k].max(w[k].abs());
        }
    }
    let m = Vector3::new(
        1.0 / (semi[0] * semi[0]),
        1.0 / (semi[1] * semi[1]),
        1.0 / (semi[2] * semi[2]),
    );
    let q = vecs * Matrix3::from_diagonal(&m) * vecs.transpose();
    let mut ell = Ellipsoid::new(c, q)?;
    let max_d2 = points
        .iter()
        .map(|p| ell.q_dist_sq(p))
        .fold(0.0, f64::max);
    if max_d2 > 1.0 {
        // diagonal extents can still miss a corner point; grow to cover it
        ell = ell.with_q_scaled(1.0 / max_d2)?;
    }
    Ok(ell)
}

/// Smallest comfortable ellipsoid containing one obstacle cluster: maximizes
/// the summed Q-distance subject to every point lying inside, with a small
/// volume tie-break, then rescales so the farthest point sits exactly on the
/// boundary. Degenerate clusters fall back to a floored principal-axis ball.
pub fn fit_enclosing(points: &[Vector3<f64>], delta_mri: f64) -> Result<FitResult, FitError> {
    if !(delta_mri > 0.0) {
        return Err(FitError::BadSpacing(delta_mri));
    }
    assert!(!points.is_empty(), "enclosing fit needs at least one point");
    let spread = if points.len() >= 4 {
        principal_spread(points)
    } else {
        0.0
    };
    if points.len() < 4 || spread < 0.25 * delta_mri {
        let ellipsoid = degenerate_encloser(points, delta_mri)?;
        let max_d2 = points
            .iter()
            .map(|p| ellipsoid.q_dist_sq(p))
            .fold(0.0, f64::max);
        return Ok(FitResult {
            objective: -points.iter().map(|p| ellipsoid.q_dist_sq(p)).sum::<f64>(),
            residual_max: (max_d2 - 1.0).max(0.0),
            iterations: 1,
            ellipsoid,
        });
    }

    let (c0, mut q0) = initial_center_q(points);
    // deflate the start until every point is inside
    let max_d2 = points
        .iter()
        .map(|p| ((p - c0).transpose() * q0 * (p - c0))[0])
        .fold(0.0, f64::max);
    if max_d2 > 1.0 {
        q0 /= max_d2;
    }
    let chol = Cholesky::new(q0).ok_or(FitError::DegenerateCloud { spread })?;
    let g = chol.l();
    let x0 = [
        c0.x,
        c0.y,
        c0.z,
        g[(0, 0)],
        g[(1, 0)],
        g[(1, 1)],
        g[(2, 0)],
        g[(2, 1)],
        g[(2, 2)],
    ];

    let problem = EnclosingProblem {
        points,
        scale: coordinate_scale(points),
    };
    let sol = solver::solve(&problem, &x0, &fit_options(1e-7, 1e-9));
    let gs = &sol.x[3..9];
    let gm = Matrix3::new(
        gs[0], 0.0, 0.0, //
        gs[1], gs[2], 0.0, //
        gs[3], gs[4], gs[5],
    );
    let q = gm * gm.transpose();
    let mut ellipsoid = Ellipsoid::new(Vector3::new(sol.x[0], sol.x[1], sol.x[2]), q)?;
    let max_d2 = points
        .iter()
        .map(|p| ellipsoid.q_dist_sq(p))
        .fold(0.0, f64::max);
    // exact containment with the farthest point on the boundary
    ellipsoid = ellipsoid.with_q_scaled(1.0 / max_d2)?;

    let residual_max = points
        .iter()
        .map(|p| (ellipsoid.q_dist_sq(p) - 1.0).max(0.0))
        .fold(0.0, f64::max);
    if sol.status != SolveStatus::Optimal {
        return Err(FitError::NoConvergence {
            status: sol.status,
            residual: residual_max,
        });
    }
    let objective = -points.iter().map(|p| ellipsoid.q_dist_sq(p)).sum::<f64>();
    Ok(FitResult {
        ellipsoid,
        objective,
        residual_max,
        iterations: sol.inner_iters.max(1),
    })
}
