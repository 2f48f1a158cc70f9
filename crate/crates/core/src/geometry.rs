//! Shared geometric primitives: ellipsoids as quadratic forms, half-spaces,
//! rigid frames, quaternion → rotation conversion and the hat/vee maps.
//!
//! An ellipsoid is the sublevel set `{x : (x-c)ᵀ Q (x-c) ≤ 1}` of a symmetric
//! positive-definite `Q`; its semi-axes are the inverse square roots of the
//! eigenvalues of `Q`.  Two positive-definite parameterizations are provided
//! for optimizers: an eigendecomposition form `RᵀMR` (rotation plus positive
//! diagonal) and a Cholesky form `GGᵀ`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use serde::{Deserialize, Serialize};

/// Tolerance for symmetry / orthonormality validation of stored matrices.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;
/// Tolerance under which a quaternion is considered degenerate.
pub const QUATERNION_NORM_TOL: f64 = 1e-12;

// ── Errors ──────────────────────────────────────────────────────────────────

#[derive(thiserror::Error, Debug, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix is not symmetric: max asymmetry {0:.3e}")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("quaternion norm {0:.3e} is too close to zero")]
    DegenerateQuaternion(f64),
    #[error("diagonal entry {index} is {value:.3e}, must be positive")]
    NonPositiveDiagonal { index: usize, value: f64 },
    #[error("matrix is not a rotation: orthonormality defect {0:.3e}")]
    NotARotation(f64),
    #[error("half-space normal has zero length")]
    ZeroNormal,
}

// ── Ellipsoid ───────────────────────────────────────────────────────────────

/// Solid ellipsoid `{x : (x-c)ᵀ Q (x-c) ≤ 1}` with `Q` symmetric positive
/// definite.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    c: Vector3<f64>,
    q: Matrix3<f64>,
}

impl Ellipsoid {
    /// Builds an ellipsoid, symmetrizing `q` as `(Q + Qᵀ)/2` and rejecting
    /// inputs that are badly asymmetric or not positive definite.
    pub fn new(c: Vector3<f64>, q: Matrix3<f64>) -> Result<Self, GeometryError> {
        let asym = (q - q.transpose()).abs().max();
        let scale = q.abs().max().max(1.0);
        if asym > 1e-9 * scale {
            return Err(GeometryError::NotSymmetric(asym));
        }
        let q = (q + q.transpose()) * 0.5;
        if nalgebra::Cholesky::new(q).is_none() {
            return Err(GeometryError::NotPositiveDefinite);
        }
        Ok(Self { c, q })
    }

    /// Unit ball centred at `c` scaled to radius `r`.
    pub fn ball(c: Vector3<f64>, r: f64) -> Result<Self, GeometryError> {
        if !(r > 0.0) {
            return Err(GeometryError::NotPositiveDefinite);
        }
        Self::new(c, Matrix3::identity() / (r * r))
    }

    pub fn center(&self) -> Vector3<f64> {
        self.c
    }

    pub fn q(&self) -> Matrix3<f64> {
        self.q
    }

    /// Squared metric distance `(x-c)ᵀ Q (x-c)`; `≤ 1` inside, `1` on the
    /// boundary.
    pub fn q_dist_sq(&self, x: &Vector3<f64>) -> f64 {
        let d = x - self.c;
        (self.q * d).dot(&d)
    }

    /// Gradient of [`Self::q_dist_sq`] with respect to `x`: `2 Q (x-c)`.
    pub fn q_dist_sq_grad(&self, x: &Vector3<f64>) -> Vector3<f64> {
        2.0 * (self.q * (x - self.c))
    }

    pub fn contains(&self, x: &Vector3<f64>, tol: f64) -> bool {
        self.q_dist_sq(x) <= 1.0 + tol
    }

    /// Eigenpairs of `Q` sorted ascending; columns of the returned matrix are
    /// the corresponding unit eigenvectors (right-handed).
    pub fn eigenpairs(&self) -> (Vector3<f64>, Matrix3<f64>) {
        let eig = nalgebra::SymmetricEigen::new(self.q);
        let mut idx = [0usize, 1, 2];
        idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let vals = Vector3::new(
            eig.eigenvalues[idx[0]],
            eig.eigenvalues[idx[1]],
            eig.eigenvalues[idx[2]],
        );
        let mut vecs = Matrix3::from_columns(&[
            eig.eigenvectors.column(idx[0]).into_owned(),
            eig.eigenvectors.column(idx[1]).into_owned(),
            eig.eigenvectors.column(idx[2]).into_owned(),
        ]);
        if vecs.determinant() < 0.0 {
            let flipped = -vecs.column(2).into_owned();
            vecs.set_column(2, &flipped);
        }
        (vals, vecs)
    }

    /// Semi-axis lengths `1/√λ` sorted descending (longest first).
    pub fn semi_axes(&self) -> Vector3<f64> {
        let (vals, _) = self.eigenpairs();
        Vector3::new(
            1.0 / vals[0].sqrt(),
            1.0 / vals[1].sqrt(),
            1.0 / vals[2].sqrt(),
        )
    }

    /// Volume `4π / (3 √det Q)`.
    pub fn volume(&self) -> f64 {
        4.0 * std::f64::consts::PI / (3.0 * self.q.determinant().sqrt())
    }

    /// `Q^{-1/2}`: maps the unit ball onto this ellipsoid (about the centre).
    pub fn inv_sqrt(&self) -> Matrix3<f64> {
        let (vals, vecs) = self.eigenpairs();
        let d = Matrix3::from_diagonal(&Vector3::new(
            1.0 / vals[0].sqrt(),
            1.0 / vals[1].sqrt(),
            1.0 / vals[2].sqrt(),
        ));
        vecs * d * vecs.transpose()
    }

    /// Half-width of the axis-aligned bounding box along coordinate `k`,
    /// i.e. `√(Q⁻¹)_{kk}`.
    pub fn aabb_half_widths(&self) -> Vector3<f64> {
        let inv = self
            .q
            .try_inverse()
            .expect("validated positive definite matrix is invertible");
        Vector3::new(inv[(0, 0)].sqrt(), inv[(1, 1)].sqrt(), inv[(2, 2)].sqrt())
    }

    /// Same ellipsoid with `Q` multiplied by `factor > 0` (shrinks the set for
    /// `factor > 1`, inflates it for `factor < 1`).
    pub fn with_q_scaled(&self, factor: f64) -> Result<Self, GeometryError> {
        if !(factor > 0.0) {
            return Err(GeometryError::NotPositiveDefinite);
        }
        Self::new(self.c, self.q * factor)
    }

    /// Ellipsoid with the centre translated to `c`, same shape.
    pub fn with_center(&self, c: Vector3<f64>) -> Self {
        Self { c, q: self.q }
    }
}

#[derive(Serialize, Deserialize)]
struct EllipsoidRaw {
    c: [f64; 3],
    #[serde(rename = "Q")]
    q: [f64; 9],
}

impl Serialize for Ellipsoid {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut q = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                q[3 * r + c] = self.q[(r, c)];
            }
        }
        EllipsoidRaw {
            c: [self.c.x, self.c.y, self.c.z],
            q,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Ellipsoid {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = EllipsoidRaw::deserialize(d)?;
        let q = Matrix3::from_row_slice(&raw.q);
        Ellipsoid::new(Vector3::from_row_slice(&raw.c), q).map_err(serde::de::Error::custom)
    }
}

// ── Half-space ──────────────────────────────────────────────────────────────

/// Which side of the plane `xᵀh = 1` a half-space keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HalfSpaceSign {
    /// `{x : xᵀh ≤ 1}`
    Le,
    /// `{x : xᵀh ≥ 1}`
    Ge,
}

/// Half-space bounded by the plane `xᵀh = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    h: [f64; 3],
    pub sign: HalfSpaceSign,
}

impl HalfSpace {
    pub fn new(h: Vector3<f64>, sign: HalfSpaceSign) -> Result<Self, GeometryError> {
        if h.norm() == 0.0 {
            return Err(GeometryError::ZeroNormal);
        }
        Ok(Self {
            h: [h.x, h.y, h.z],
            sign,
        })
    }

    pub fn normal(&self) -> Vector3<f64> {
        Vector3::from_row_slice(&self.h)
    }

    /// Signed violation of membership: `≤ 0` inside. For `Le` this is
    /// `xᵀh - 1`, for `Ge` it is `1 - xᵀh`.
    pub fn violation(&self, x: &Vector3<f64>) -> f64 {
        let v = self.normal().dot(x) - 1.0;
        match self.sign {
            HalfSpaceSign::Le => v,
            HalfSpaceSign::Ge => -v,
        }
    }

    pub fn contains(&self, x: &Vector3<f64>, tol: f64) -> bool {
        self.violation(x) <= tol
    }

    /// The complementary half-space (same plane, other side).
    pub fn flipped(&self) -> Self {
        Self {
            h: self.h,
            sign: match self.sign {
                HalfSpaceSign::Le => HalfSpaceSign::Ge,
                HalfSpaceSign::Ge => HalfSpaceSign::Le,
            },
        }
    }
}

// ── Rotations and frames ────────────────────────────────────────────────────

/// Rotation matrix from a quaternion `(w, x, y, z)`; the input is normalized
/// on entry, so `R(q) = R(-q)` and any non-degenerate scaling is accepted.
pub fn rotation_from_quaternion(q: [f64; 4]) -> Result<Matrix3<f64>, GeometryError> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n < QUATERNION_NORM_TOL {
        return Err(GeometryError::DegenerateQuaternion(n));
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Ok(Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Unit quaternion `(w, x, y, z)` of a rotation matrix (`w ≥ 0` branch).
pub fn quaternion_from_rotation(r: &Matrix3<f64>) -> [f64; 4] {
    let tr = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let mut q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        ]
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        ]
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        [
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        [
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    if q[0] < 0.0 {
        for v in &mut q {
            *v = -*v;
        }
    }
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Orthonormality defect `max(‖RᵀR - I‖_max, |det R - 1|)`.
pub fn rotation_defect(r: &Matrix3<f64>) -> f64 {
    let gram = (r.transpose() * r - Matrix3::identity()).abs().max();
    gram.max((r.determinant() - 1.0).abs())
}

/// Nearest rotation matrix in the Frobenius norm (polar factor via SVD).
pub fn polar_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = nalgebra::SVD::new(*m, true, true);
    let u = svd.u.expect("SVD of 3x3 always succeeds");
    let vt = svd.v_t.expect("SVD of 3x3 always succeeds");
    let d = (u * vt).determinant();
    let s = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, if d < 0.0 { -1.0 } else { 1.0 }));
    u * s * vt
}

/// Rigid frame: orientation `r` (validated rotation) and origin `p`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub r: Matrix3<f64>,
    pub p: Vector3<f64>,
}

impl Frame {
    pub fn new(r: Matrix3<f64>, p: Vector3<f64>) -> Result<Self, GeometryError> {
        let defect = rotation_defect(&r);
        if defect > ORTHONORMALITY_TOL {
            return Err(GeometryError::NotARotation(defect));
        }
        Ok(Self { r, p })
    }

    pub fn identity() -> Self {
        Self {
            r: Matrix3::identity(),
            p: Vector3::zeros(),
        }
    }
}

// ── Hat maps ────────────────────────────────────────────────────────────────

/// Hat map: `wedge3(v) w = v × w`.
pub fn wedge3(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`wedge3`]; uses the strictly lower triangle.
pub fn vee3(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Hat map for a twist `(v, ω)`: `[[ω̂, v], [0, 0]]` acting on homogeneous
/// coordinates.
pub fn wedge6(xi: &Vector6<f64>) -> Matrix4<f64> {
    let v = Vector3::new(xi[0], xi[1], xi[2]);
    let w = Vector3::new(xi[3], xi[4], xi[5]);
    let wh = wedge3(&w);
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&wh);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&v);
    m
}

/// Inverse of [`wedge6`].
pub fn vee6(m: &Matrix4<f64>) -> Vector6<f64> {
    Vector6::new(
        m[(0, 3)],
        m[(1, 3)],
        m[(2, 3)],
        m[(2, 1)],
        m[(0, 2)],
        m[(1, 0)],
    )
}

// ── Positive-definite parameterizations ─────────────────────────────────────

/// `Q = Rᵀ diag(m) R` with `R` from a quaternion and `m` strictly positive;
/// the eigenvalues of the result are exactly `m`.
pub fn pd_from_rotation_params(quat: [f64; 4], m: [f64; 3]) -> Result<Matrix3<f64>, GeometryError> {
    for (index, &value) in m.iter().enumerate() {
        if !(value > 0.0) {
            return Err(GeometryError::NonPositiveDiagonal { index, value });
        }
    }
    let r = rotation_from_quaternion(quat)?;
    let d = Matrix3::from_diagonal(&Vector3::from_row_slice(&m));
    Ok(r.transpose() * d * r)
}

/// `Q = G Gᵀ` with `G` lower triangular from `[g11, g21, g22, g31, g32, g33]`
/// and strictly positive diagonal.
pub fn pd_from_cholesky_params(g: [f64; 6]) -> Result<Matrix3<f64>, GeometryError> {
    for (index, value) in [(0usize, g[0]), (1, g[2]), (2, g[5])] {
        if !(value > 0.0) {
            return Err(GeometryError::NonPositiveDiagonal { index, value });
        }
    }
    let gl = Matrix3::new(g[0], 0.0, 0.0, g[1], g[2], 0.0, g[3], g[4], g[5]);
    Ok(gl * gl.transpose())
}
