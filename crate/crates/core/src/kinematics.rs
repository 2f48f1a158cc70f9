//! Forward model of nested pre-curved elastic tubes.
//!
//! A robot is an ordered stack of tubes, outermost first, each free to
//! rotate about the shared centerline.  Where tubes overlap their bending
//! moments combine: the resultant centerline curvature is a stiffness-
//! weighted average of the tubes' pre-curvatures, rotated by the tubes'
//! relative twist angles, while the twist angles themselves obey a coupled
//! system of torsion ODEs along arc length.  The twist rate of every tube
//! must vanish at that tube's distal end, which turns simulation into a
//! two-point boundary value problem: [`shoot_forward`] finds the base twist
//! rates by a damped Newton iteration and then propagates the innermost
//! tube's frame to produce the centerline path.
//!
//! Integration is fixed-step classical RK4 on each inter-end segment, with
//! segment boundaries placed exactly at the tube ends so the discontinuous
//! right-hand side is never stepped across.  Orientations are carried as
//! quaternions and renormalized after every step, which is the polar
//! projection onto the rotation group in quaternion coordinates.

use std::f64::consts::TAU;
use std::io;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{quaternion_from_rotation, rotation_from_quaternion, GeometryError};
pub use crate::geometry::Frame;
use crate::solver::dual::Real;

/// Extended lengths at or below this are treated as fully retracted; such
/// tubes take no part in the boundary value problem.
const ZERO_LENGTH: f64 = 1e-12;

// ── Errors ───────────────────────────────────────────────────────────────

#[derive(Debug, Error)]
pub enum KinematicsError {
    #[error("tube set is empty")]
    EmptyTubeSet,
    #[error("tube {tube}: length must be positive, got {length}")]
    BadLength { tube: usize, length: f64 },
    #[error("tube {tube}: retraction {beta} outside [-{length}, 0]")]
    BadRetraction { tube: usize, beta: f64, length: f64 },
    #[error(
        "tube {tube}: diameters must satisfy outer > inner > 0, \
         got inner {inner}, outer {outer}"
    )]
    BadDiameters { tube: usize, inner: f64, outer: f64 },
    #[error("tube {tube}: moduli must be positive, got E {youngs}, G {shear}")]
    BadModuli { tube: usize, youngs: f64, shear: f64 },
    #[error(
        "tube {inside} does not fit inside tube {around}: outer diameter \
         {outer_diameter} exceeds the surrounding bore {bore}"
    )]
    NestingViolation {
        around: usize,
        inside: usize,
        bore: f64,
        outer_diameter: f64,
    },
    #[error(
        "tube {tube} extends to {shorter} but the tube inside it reaches \
         {longer}; an outer tube may not extend beyond an inner one"
    )]
    ExtensionOrdering {
        tube: usize,
        longer: f64,
        shorter: f64,
    },
    #[error("arc length {s} outside [0, {max}]")]
    ArcOutOfRange { s: f64, max: f64 },
    #[error("no tube is active at the requested arc length")]
    EmptyActiveSet,
    #[error("expected {expected} per-tube state entries, got {got}")]
    StateSizeMismatch { expected: usize, got: usize },
    #[error("need at least 2 nodes per segment, got {nodes}")]
    BadNodeCount { nodes: usize },
    #[error("shooting stalled: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("path node {node}: {reason}")]
    InvalidPath { node: usize, reason: &'static str },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

// ── Tubes ────────────────────────────────────────────────────────────────

/// One pre-curved elastic tube together with its actuation state.
///
/// `alpha` is the base rotation and `beta ≤ 0` the retraction into the
/// actuation unit, so the exposed (extended) length is `length + beta`.
/// Diameters are outer/inner diameters of the annular cross-section in
/// metres.  The axial pre-curvature component `u_star.z` is carried for
/// completeness but does not enter the model equations, which consume only
/// the transverse components.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Tube {
    /// Total tube length L (m), > 0.
    pub length: f64,
    /// Retraction β (m) into the actuation unit, −L ≤ β ≤ 0.
    pub beta: f64,
    /// Base rotation α (rad); wrapped into [0, 2π) on tube-set construction.
    pub alpha: f64,
    /// Pre-curvature (u*_x, u*_y, u*_z) (1/m), constant along the tube.
    pub u_star: Vector3<f64>,
    /// Inner diameter (m).
    pub rho_inner: f64,
    /// Outer diameter (m).
    pub rho_outer: f64,
    /// Young's modulus E (Pa).
    pub youngs: f64,
    /// Shear modulus G (Pa).
    pub shear: f64,
}

impl Tube {
    /// Exposed length ℓ = L + β beyond the actuation unit.
    pub fn extended_length(&self) -> f64 {
        self.length + self.beta
    }

    /// Second moment of area of the annulus, I = π(ρₒ⁴ − ρᵢ⁴)/64.
    pub fn second_moment(&self) -> f64 {
        std::f64::consts::PI * (self.rho_outer.powi(4) - self.rho_inner.powi(4)) / 64.0
    }

    /// Polar second moment, J = 2I for a circular annulus.
    pub fn polar_moment(&self) -> f64 {
        2.0 * self.second_moment()
    }

    /// Bending stiffness EI (N·m²).
    pub fn bending_stiffness(&self) -> f64 {
        self.youngs * self.second_moment()
    }

    /// Torsional stiffness GJ (N·m²).
    pub fn torsion_stiffness(&self) -> f64 {
        self.shear * self.polar_moment()
    }
}

/// An ordered, validated stack of concentric tubes, outermost first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TubeSet {
    tubes: Vec<Tube>,
}

impl TubeSet {
    /// Validates per-tube parameters, diameter nesting and the extension
    /// ordering ℓ₁ ≤ … ≤ ℓₙ, and wraps every base rotation into [0, 2π).
    pub fn new(mut tubes: Vec<Tube>) -> Result<Self, KinematicsError> {
        if tubes.is_empty() {
            return Err(KinematicsError::EmptyTubeSet);
        }
        for (i, t) in tubes.iter_mut().enumerate() {
            if !(t.length > 0.0) {
                return Err(KinematicsError::BadLength {
                    tube: i,
                    length: t.length,
                });
            }
            if !(-t.length..=0.0).contains(&t.beta) {
                return Err(KinematicsError::BadRetraction {
                    tube: i,
                    beta: t.beta,
                    length: t.length,
                });
            }
            if !(t.rho_outer > t.rho_inner && t.rho_inner > 0.0) {
                return Err(KinematicsError::BadDiameters {
                    tube: i,
                    inner: t.rho_inner,
                    outer: t.rho_outer,
                });
            }
            if !(t.youngs > 0.0 && t.shear > 0.0) {
                return Err(KinematicsError::BadModuli {
                    tube: i,
                    youngs: t.youngs,
                    shear: t.shear,
                });
            }
            t.alpha = wrap_angle(t.alpha);
        }
        for i in 1..tubes.len() {
            if tubes[i].rho_outer > tubes[i - 1].rho_inner {
                return Err(KinematicsError::NestingViolation {
                    around: i - 1,
                    inside: i,
                    bore: tubes[i - 1].rho_inner,
                    outer_diameter: tubes[i].rho_outer,
                });
            }
            if tubes[i].extended_length() < tubes[i - 1].extended_length() {
                return Err(KinematicsError::ExtensionOrdering {
                    tube: i - 1,
                    longer: tubes[i - 1].extended_length(),
                    shorter: tubes[i].extended_length(),
                });
            }
        }
        Ok(Self { tubes })
    }

    pub fn tubes(&self) -> &[Tube] {
        &self.tubes
    }

    pub fn len(&self) -> usize {
        self.tubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tubes.is_empty()
    }

    /// Exposed lengths ℓᵢ in tube order.
    pub fn extended_lengths(&self) -> Vec<f64> {
        self.tubes.iter().map(Tube::extended_length).collect()
    }
}

/// Wraps an angle into [0, 2π).
fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w == TAU {
        0.0
    } else {
        w
    }
}

// ── Active set, torsion rates, resultant curvature ───────────────────────

/// Indices of the tubes still present at arc length `s`: every tube whose
/// exposed length reaches `s` (inclusive at the end point).
pub fn active_set(s: f64, tubes: &TubeSet) -> Result<Vec<usize>, KinematicsError> {
    let max = tubes
        .tubes
        .last()
        .map(Tube::extended_length)
        .unwrap_or(0.0);
    if !(0.0..=max).contains(&s) {
        return Err(KinematicsError::ArcOutOfRange { s, max });
    }
    Ok((0..tubes.len())
        .filter(|&i| s <= tubes.tubes[i].extended_length())
        .collect())
}

/// Twist accelerations u̇_z for the active tubes.
///
/// For tube i: u̇ᵢ = Aᵢ Σⱼ EⱼIⱼ (u*ᵢ)ᵀ B(ψᵢ−ψⱼ) u*ⱼ over active tubes j,
/// with Aᵢ = EᵢIᵢ / ((ΣEI)·GᵢJᵢ) and B the quarter-turn mixing matrix
/// [[sin, −cos], [cos, sin]] of the twist difference.  The j = i term
/// vanishes identically and is skipped.  Generic over the scalar type so
/// the planner can differentiate through it.
pub(crate) fn torsion_rates_into<T: Real>(
    ei: &[T],
    gj: &[T],
    u_star_xy: &[[T; 2]],
    psi: &[T],
    out: &mut [T],
) {
    let m = psi.len();
    let mut ei_total = T::constant(0.0);
    for e in ei {
        ei_total += *e;
    }
    for i in 0..m {
        let mut acc = T::constant(0.0);
        let (ax, ay) = (u_star_xy[i][0], u_star_xy[i][1]);
        for j in 0..m {
            if j == i {
                continue;
            }
            let d = psi[i] - psi[j];
            let (sn, cs) = (d.sin(), d.cos());
            let (bx, by) = (u_star_xy[j][0], u_star_xy[j][1]);
            // (aᵀ B b) with B = [[sin, −cos], [cos, sin]]
            acc += ei[j] * (sn * (ax * bx + ay * by) + cs * (ay * bx - ax * by));
        }
        out[i] = ei[i] / (ei_total * gj[i]) * acc;
    }
}

/// Transverse resultant curvature of tube `i`, in tube i's material frame:
/// the bending-stiffness-weighted average of all active pre-curvatures,
/// each rotated by the relative twist ψⱼ − ψᵢ.
pub(crate) fn resultant_xy<T: Real>(
    ei: &[T],
    u_star_xy: &[[T; 2]],
    psi: &[T],
    i: usize,
) -> [T; 2] {
    let mut ei_total = T::constant(0.0);
    for e in ei {
        ei_total += *e;
    }
    let mut x = T::constant(0.0);
    let mut y = T::constant(0.0);
    for j in 0..psi.len() {
        let d = psi[j] - psi[i];
        let (sn, cs) = (d.sin(), d.cos());
        let (bx, by) = (u_star_xy[j][0], u_star_xy[j][1]);
        x += ei[j] * (cs * bx - sn * by);
        y += ei[j] * (sn * bx + cs * by);
    }
    [x / ei_total, y / ei_total]
}

/// Right-hand side of the torsion ODEs at arc length `s`:
/// ψ̇ᵢ = u_zᵢ and the twist accelerations of [`torsion_rates_into`].
/// `psi` and `u_z` list values for exactly the active tubes, in tube order.
pub fn torsion_rhs(
    s: f64,
    psi: &[f64],
    u_z: &[f64],
    tubes: &TubeSet,
) -> Result<(Vec<f64>, Vec<f64>), KinematicsError> {
    let active = active_set(s, tubes)?;
    if active.is_empty() {
        return Err(KinematicsError::EmptyActiveSet);
    }
    if psi.len() != active.len() || u_z.len() != active.len() {
        return Err(KinematicsError::StateSizeMismatch {
            expected: active.len(),
            got: psi.len().min(u_z.len()),
        });
    }
    let ei: Vec<f64> = active
        .iter()
        .map(|&i| tubes.tubes[i].bending_stiffness())
        .collect();
    let gj: Vec<f64> = active
        .iter()
        .map(|&i| tubes.tubes[i].torsion_stiffness())
        .collect();
    let ustar: Vec<[f64; 2]> = active
        .iter()
        .map(|&i| [tubes.tubes[i].u_star.x, tubes.tubes[i].u_star.y])
        .collect();
    let mut du_z = vec![0.0; active.len()];
    torsion_rates_into(&ei, &gj, &ustar, psi, &mut du_z);
    Ok((u_z.to_vec(), du_z))
}

/// Transverse resultant curvature of every active tube at arc length `s`,
/// each in its own material frame.
pub fn resultant_curvature(
    s: f64,
    psi: &[f64],
    tubes: &TubeSet,
) -> Result<Vec<[f64; 2]>, KinematicsError> {
    let active = active_set(s, tubes)?;
    if active.is_empty() {
        return Err(KinematicsError::EmptyActiveSet);
    }
    if psi.len() != active.len() {
        return Err(KinematicsError::StateSizeMismatch {
            expected: active.len(),
            got: psi.len(),
        });
    }
    let ei: Vec<f64> = active
        .iter()
        .map(|&i| tubes.tubes[i].bending_stiffness())
        .collect();
    let ustar: Vec<[f64; 2]> = active
        .iter()
        .map(|&i| [tubes.tubes[i].u_star.x, tubes.tubes[i].u_star.y])
        .collect();
    Ok((0..active.len())
        .map(|i| resultant_xy(&ei, &ustar, psi, i))
        .collect())
}

// ── Frames and integration ───────────────────────────────────────────────

/// Derivative of the frame part of a state vector `y = [p(3), q(4), …]`
/// under body curvature `(ux, uy, uz)`: ṗ = R(q)e₃ and q̇ = ½ q ⊗ (0, ω).
/// The material x/y axes are taken pointing away from the centre of
/// curvature, so the transverse components enter the angular velocity
/// negated, ω = (−ux, −uy, uz); a +x pre-curvature then bends the tube
/// toward +y.  The rotation column is evaluated homogeneously in q, so
/// mid-step norm drift does not bias the direction.
fn frame_deriv<T: Real>(y: &[T], ux: T, uy: T, uz: T, dy: &mut [T]) {
    let (q0, q1, q2, q3) = (y[3], y[4], y[5], y[6]);
    let n2 = q0 * q0 + q1 * q1 + q2 * q2 + q3 * q3;
    let inv = T::constant(1.0) / n2;
    let two = T::constant(2.0);
    dy[0] = two * (q1 * q3 + q0 * q2) * inv;
    dy[1] = two * (q2 * q3 - q0 * q1) * inv;
    dy[2] = (q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3) * inv;
    let (wx, wy) = (-ux, -uy);
    let half = T::constant(0.5);
    dy[3] = half * (-(q1 * wx) - q2 * wy - q3 * uz);
    dy[4] = half * (q0 * wx + q2 * uz - q3 * wy);
    dy[5] = half * (q0 * wy + q3 * wx - q1 * uz);
    dy[6] = half * (q0 * uz + q1 * wy - q2 * wx);
}

/// Normalizes the quaternion slice `y[3..7]` in place.
fn renormalize_quaternion<T: Real>(y: &mut [T]) {
    let n = (y[3] * y[3] + y[4] * y[4] + y[5] * y[5] + y[6] * y[6]).sqrt();
    for q in &mut y[3..7] {
        *q = *q / n;
    }
}

/// One RK4 step of the frame ODEs with the curvature held constant, then a
/// quaternion renormalization (the polar projection onto rotations).
pub fn integrate_frame(frame: &Frame, u: &Vector3<f64>, ds: f64) -> Frame {
    assert!(ds > 0.0, "integration step must be positive");
    let q = quaternion_from_rotation(&frame.r);
    let mut y = [
        frame.p.x,
        frame.p.y,
        frame.p.z,
        q[0],
        q[1],
        q[2],
        q[3],
    ];
    let deriv = |y: &[f64; 7], dy: &mut [f64; 7]| frame_deriv(y, u.x, u.y, u.z, dy);
    let mut k1 = [0.0; 7];
    let mut k2 = [0.0; 7];
    let mut k3 = [0.0; 7];
    let mut k4 = [0.0; 7];
    let mut mid = [0.0; 7];
    deriv(&y, &mut k1);
    for i in 0..7 {
        mid[i] = y[i] + 0.5 * ds * k1[i];
    }
    deriv(&mid, &mut k2);
    for i in 0..7 {
        mid[i] = y[i] + 0.5 * ds * k2[i];
    }
    deriv(&mid, &mut k3);
    for i in 0..7 {
        mid[i] = y[i] + ds * k3[i];
    }
    deriv(&mid, &mut k4);
    for i in 0..7 {
        y[i] += ds / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    renormalize_quaternion(&mut y);
    Frame {
        p: Vector3::new(y[0], y[1], y[2]),
        r: rotation_from_quaternion([y[3], y[4], y[5], y[6]])
            .expect("renormalized quaternion is a unit quaternion"),
    }
}

/// RK4 stepper for the coupled frame–torsion system on one segment.
///
/// State layout: `[p(3), q(4), ψ(m), u_z(m)]` for the `m` tubes active on
/// the segment, innermost last; the innermost tube's resultant curvature
/// drives the frame.  Generic over the scalar so the planner can push dual
/// numbers through whole steps.
pub(crate) struct CoupledStepper<T: Real> {
    pub ei: Vec<T>,
    pub gj: Vec<T>,
    pub u_star_xy: Vec<[T; 2]>,
    k1: Vec<T>,
    k2: Vec<T>,
    k3: Vec<T>,
    k4: Vec<T>,
    mid: Vec<T>,
}

impl<T: Real> CoupledStepper<T> {
    pub fn new(ei: Vec<T>, gj: Vec<T>, u_star_xy: Vec<[T; 2]>) -> Self {
        let len = 7 + 2 * ei.len();
        let zero = T::constant(0.0);
        Self {
            ei,
            gj,
            u_star_xy,
            k1: vec![zero; len],
            k2: vec![zero; len],
            k3: vec![zero; len],
            k4: vec![zero; len],
            mid: vec![zero; len],
        }
    }

    pub fn state_len(&self) -> usize {
        7 + 2 * self.ei.len()
    }

    /// One classical RK4 step of size `h`, then quaternion renormalization.
    pub fn step(&mut self, y: &mut [T], h: T) {
        let len = y.len();
        debug_assert_eq!(len, self.state_len());
        let half = T::constant(0.5);
        let sixth = T::constant(1.0 / 6.0);
        let two = T::constant(2.0);
        // split borrows: parameters immutably, stage buffers mutably
        let Self {
            ei,
            gj,
            u_star_xy,
            k1,
            k2,
            k3,
            k4,
            mid,
        } = self;
        let deriv = |y: &[T], dy: &mut [T]| {
            let m = ei.len();
            let psi = &y[7..7 + m];
            let uz = &y[7 + m..7 + 2 * m];
            let uxy = resultant_xy(ei, u_star_xy, psi, m - 1);
            frame_deriv(y, uxy[0], uxy[1], uz[m - 1], dy);
            dy[7..7 + m].copy_from_slice(uz);
            torsion_rates_into(ei, gj, u_star_xy, psi, &mut dy[7 + m..]);
        };
        deriv(y, k1);
        for i in 0..len {
            mid[i] = y[i] + half * h * k1[i];
        }
        deriv(mid, k2);
        for i in 0..len {
            mid[i] = y[i] + half * h * k2[i];
        }
        deriv(mid, k3);
        for i in 0..len {
            mid[i] = y[i] + h * k3[i];
        }
        deriv(mid, k4);
        for i in 0..len {
            y[i] += sixth * h * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
        }
        renormalize_quaternion(y);
    }
}

// ── Paths ────────────────────────────────────────────────────────────────

/// One sample along the robot centerline.  `psi`/`u_z` carry one entry per
/// tube of the originating tube set; entries for tubes that have already
/// ended (or never extended) hold their last value.  `u_xy` is the
/// innermost tube's resultant transverse curvature in its own frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathNode {
    pub s: f64,
    pub position: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub psi: Vec<f64>,
    pub u_z: Vec<f64>,
    pub u_xy: [f64; 2],
}

/// The discretized centerline of the innermost tube.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotPath {
    pub nodes: Vec<PathNode>,
    /// Exposed length ℓᵢ of every tube in the originating set.
    pub segment_ends: Vec<f64>,
}

impl RobotPath {
    /// The distal node, if the path has any nodes.
    pub fn tip(&self) -> Option<&PathNode> {
        self.nodes.last()
    }

    /// Checks the path invariants: strictly increasing arc length,
    /// orthonormal rotations, and unit-speed chord lengths.
    pub fn validate(&self) -> Result<(), KinematicsError> {
        for (k, node) in self.nodes.iter().enumerate() {
            let r = &node.rotation;
            let drift = (r.transpose() * r - Matrix3::identity()).norm();
            if drift > 1e-8 {
                return Err(KinematicsError::InvalidPath {
                    node: k,
                    reason: "rotation is not orthonormal",
                });
            }
            if k > 0 {
                let prev = &self.nodes[k - 1];
                let ds = node.s - prev.s;
                if ds <= 0.0 {
                    return Err(KinematicsError::InvalidPath {
                        node: k,
                        reason: "arc length is not strictly increasing",
                    });
                }
                if (node.position - prev.position).norm() > ds + 1e-9 {
                    return Err(KinematicsError::InvalidPath {
                        node: k,
                        reason: "chord longer than arc (unit speed violated)",
                    });
                }
            }
        }
        Ok(())
    }

    /// Writes the path as CSV with columns
    /// `s, px, py, pz, psi_1…psi_n, uz_1…uz_n`.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> csv::Result<()> {
        let n = self.segment_ends.len();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["s".to_string(), "px".into(), "py".into(), "pz".into()];
        for i in 1..=n {
            header.push(format!("psi_{i}"));
        }
        for i in 1..=n {
            header.push(format!("uz_{i}"));
        }
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(header.len());
        for node in &self.nodes {
            row.clear();
            row.push(node.s.to_string());
            row.push(node.position.x.to_string());
            row.push(node.position.y.to_string());
            row.push(node.position.z.to_string());
            for v in &node.psi {
                row.push(v.to_string());
            }
            for v in &node.u_z {
                row.push(v.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

// ── Shooting ─────────────────────────────────────────────────────────────

/// Knobs for [`shoot_forward_with`].
#[derive(Debug, Clone, Copy)]
pub struct ShootOptions {
    /// Nodes per inter-end segment (steps per segment is one less).
    pub nodes_per_segment: usize,
    /// Newton iteration cap.
    pub max_iterations: usize,
    /// Convergence tolerance on max |u_z| at the tube ends.
    pub residual_tol: f64,
}

impl Default for ShootOptions {
    fn default() -> Self {
        Self {
            nodes_per_segment: 50,
            max_iterations: 50,
            residual_tol: 1e-10,
        }
    }
}

/// A solved boundary value problem: the path plus solver diagnostics.
#[derive(Debug, Clone)]
pub struct ShootOutcome {
    pub path: RobotPath,
    /// Newton iterations taken (0 when the zero guess already satisfies
    /// the end conditions).
    pub iterations: usize,
    /// Final max |u_z(ℓᵢ)| over tubes.
    pub residual: f64,
}

/// Per-tube data for the tubes taking part in the boundary value problem.
#[derive(Clone, Copy)]
struct EffectiveTube {
    original: usize,
    ell: f64,
    ei: f64,
    gj: f64,
    u_star_xy: [f64; 2],
    alpha: f64,
    beta: f64,
}

/// A node produced by [`march`], still indexed by effective tube.
struct RawNode {
    s: f64,
    p: [f64; 3],
    q: [f64; 4],
    psi: Vec<f64>,
    uz: Vec<f64>,
    u_xy: [f64; 2],
}

/// Integrates the coupled system from the base with twist rates `uz0`,
/// segment by segment, and returns the twist rate of each effective tube
/// at its own end (the shooting residuals) plus, when `record` is set, the
/// full node sequence.
fn march(
    eff: &[EffectiveTube],
    base_p: [f64; 3],
    base_q: [f64; 4],
    uz0: &[f64],
    nodes_per_segment: usize,
    record: bool,
) -> (Vec<f64>, Vec<RawNode>) {
    let m = eff.len();
    let ei: Vec<f64> = eff.iter().map(|t| t.ei).collect();
    let gj: Vec<f64> = eff.iter().map(|t| t.gj).collect();
    let ustar: Vec<[f64; 2]> = eff.iter().map(|t| t.u_star_xy).collect();

    let mut p = base_p;
    let mut q = base_q;
    // transmission relation: the base twist couples to the unknown rate
    let mut psi: Vec<f64> = eff
        .iter()
        .zip(uz0)
        .map(|(t, &u)| t.alpha - t.beta * u)
        .collect();
    let mut uz = uz0.to_vec();
    let mut end_uz = vec![0.0; m];
    let mut nodes = Vec::new();
    if record {
        nodes.push(RawNode {
            s: 0.0,
            p,
            q,
            psi: psi.clone(),
            uz: uz.clone(),
            u_xy: resultant_xy(&ei, &ustar, &psi, m - 1),
        });
    }

    let mut s = 0.0;
    for k in 0..m {
        let sigma = eff[k].ell - s;
        if sigma > 0.0 {
            let mk = m - k;
            let mut stepper = CoupledStepper::new(
                ei[k..].to_vec(),
                gj[k..].to_vec(),
                ustar[k..].to_vec(),
            );
            let mut y = vec![0.0; stepper.state_len()];
            y[..3].copy_from_slice(&p);
            y[3..7].copy_from_slice(&q);
            y[7..7 + mk].copy_from_slice(&psi[k..]);
            y[7 + mk..].copy_from_slice(&uz[k..]);
            let h = sigma / (nodes_per_segment - 1) as f64;
            for step in 1..nodes_per_segment {
                stepper.step(&mut y, h);
                p.copy_from_slice(&y[..3]);
                q.copy_from_slice(&y[3..7]);
                psi[k..].copy_from_slice(&y[7..7 + mk]);
                uz[k..].copy_from_slice(&y[7 + mk..]);
                if record {
                    let s_node = if step == nodes_per_segment - 1 {
                        eff[k].ell
                    } else {
                        s + h * step as f64
                    };
                    nodes.push(RawNode {
                        s: s_node,
                        p,
                        q,
                        psi: psi.clone(),
                        uz: uz.clone(),
                        u_xy: resultant_xy(&ei[k..], &ustar[k..], &psi[k..], mk - 1),
                    });
                }
            }
            s = eff[k].ell;
        }
        end_uz[k] = uz[k];
    }
    (end_uz, nodes)
}

/// Newton iteration on the base twist rates with Levenberg–Marquardt
/// damping: the update solves (JᵀJ + μ·diag JᵀJ)Δ = −Jᵀr with the
/// Jacobian finite-differenced column by column, escalating μ until the
/// residual norm decreases and relaxing it toward the pure (quadratically
/// convergent) Newton step as iterations succeed.
fn levenberg_newton(
    eff: &[EffectiveTube],
    base_p: [f64; 3],
    base_q: [f64; 4],
    v0: &[f64],
    options: &ShootOptions,
) -> Result<(Vec<f64>, usize), KinematicsError> {
    let m = eff.len();
    let residuals = |v: &[f64]| march(eff, base_p, base_q, v, options.nodes_per_segment, false).0;

    let mut v = v0.to_vec();
    let mut r = residuals(&v);
    let mut mu = 0.0f64;
    let mut iterations = 0;
    loop {
        let rmax = r.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if rmax <= options.residual_tol {
            return Ok((v, iterations));
        }
        if iterations >= options.max_iterations {
            return Err(KinematicsError::NoConvergence {
                residual: rmax,
                iterations,
            });
        }
        iterations += 1;
        let mut jac = DMatrix::zeros(m, m);
        for col in 0..m {
            let h = 1e-7 * (1.0 + v[col].abs());
            let mut vp = v.clone();
            vp[col] += h;
            let rp = residuals(&vp);
            for row in 0..m {
                jac[(row, col)] = (rp[row] - r[row]) / h;
            }
        }
        let rv = DVector::from_column_slice(&r);
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &rv;
        let r0 = rv.norm();
        let mut accepted = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for i in 0..m {
                a[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            if let Some(chol) = a.cholesky() {
                let delta = chol.solve(&(-&jtr));
                let vt: Vec<f64> = v.iter().zip(delta.iter()).map(|(a, d)| a + d).collect();
                let rt = residuals(&vt);
                if rt.iter().map(|x| x * x).sum::<f64>().sqrt() < r0 {
                    v = vt;
                    r = rt;
                    mu = if mu < 1e-13 { 0.0 } else { mu / 3.0 };
                    accepted = true;
                    break;
                }
            }
            mu = if mu == 0.0 { 1e-4 } else { mu * 10.0 };
            if mu > 1e12 {
                break;
            }
        }
        if !accepted {
            return Err(KinematicsError::NoConvergence {
                residual: rmax,
                iterations,
            });
        }
    }
}

/// Finds the base twist rates: first a direct solve from the zero guess,
/// and on failure a continuation ladder that grows the pre-curvatures from
/// a quarter strength to full, warm-starting each rung from the last.
fn solve_base_rates(
    eff: &[EffectiveTube],
    base_p: [f64; 3],
    base_q: [f64; 4],
    options: &ShootOptions,
) -> Result<(Vec<f64>, usize), KinematicsError> {
    let zero = vec![0.0; eff.len()];
    let direct = levenberg_newton(eff, base_p, base_q, &zero, options);
    let Err(KinematicsError::NoConvergence {
        iterations: spent, ..
    }) = direct
    else {
        return direct;
    };
    let mut v = zero;
    let mut total = spent;
    for gamma in [0.25, 0.5, 0.75, 1.0] {
        let scaled: Vec<EffectiveTube> = eff
            .iter()
            .map(|t| EffectiveTube {
                u_star_xy: [t.u_star_xy[0] * gamma, t.u_star_xy[1] * gamma],
                ..*t
            })
            .collect();
        let (vg, it) = levenberg_newton(&scaled, base_p, base_q, &v, options)?;
        v = vg;
        total += it;
    }
    Ok((v, total))
}

/// Solves the tube twist boundary value problem with default options.
pub fn shoot_forward(tubes: &TubeSet, base: &Frame) -> Result<ShootOutcome, KinematicsError> {
    shoot_forward_with(tubes, base, &ShootOptions::default())
}

/// Solves the twist BVP by shooting on the base twist rates u_z(0).
///
/// Each Newton trial re-applies the transmission relation
/// ψᵢ(0) = αᵢ − βᵢ·u_zᵢ(0), integrates the coupled system, and reads the
/// twist rates at the tube ends; the Jacobian is finite-differenced and
/// the step is damped by halving until the residual norm decreases.  Tubes
/// with no exposed length are left out of the problem entirely (their path
/// columns report ψ = α, u_z = 0).
pub fn shoot_forward_with(
    tubes: &TubeSet,
    base: &Frame,
    options: &ShootOptions,
) -> Result<ShootOutcome, KinematicsError> {
    if options.nodes_per_segment < 2 {
        return Err(KinematicsError::BadNodeCount {
            nodes: options.nodes_per_segment,
        });
    }
    let n = tubes.len();
    let segment_ends: Vec<f64> = tubes
        .tubes
        .iter()
        .map(|t| t.extended_length().max(0.0))
        .collect();
    let eff: Vec<EffectiveTube> = tubes
        .tubes
        .iter()
        .enumerate()
        .filter(|(_, t)| t.extended_length() > ZERO_LENGTH)
        .map(|(i, t)| EffectiveTube {
            original: i,
            ell: t.extended_length(),
            ei: t.bending_stiffness(),
            gj: t.torsion_stiffness(),
            u_star_xy: [t.u_star.x, t.u_star.y],
            alpha: t.alpha,
            beta: t.beta,
        })
        .collect();

    if eff.is_empty() {
        // fully retracted robot: a single node at the base
        let node = PathNode {
            s: 0.0,
            position: base.p,
            rotation: base.r,
            psi: tubes.tubes.iter().map(|t| t.alpha).collect(),
            u_z: vec![0.0; n],
            u_xy: [0.0, 0.0],
        };
        return Ok(ShootOutcome {
            path: RobotPath {
                nodes: vec![node],
                segment_ends,
            },
            iterations: 0,
            residual: 0.0,
        });
    }

    let base_p = [base.p.x, base.p.y, base.p.z];
    let base_q = quaternion_from_rotation(&base.r);
    let (v, iterations) = solve_base_rates(&eff, base_p, base_q, options)?;

    let (end_uz, raw) = march(&eff, base_p, base_q, &v, options.nodes_per_segment, true);
    let residual = end_uz.iter().fold(0.0f64, |a, x| a.max(x.abs()));

    // widen per-node state to one column per original tube
    let nodes = raw
        .into_iter()
        .map(|rn| {
            let mut psi: Vec<f64> = tubes.tubes.iter().map(|t| t.alpha).collect();
            let mut u_z = vec![0.0; n];
            for (e, (&ps, &uz)) in eff.iter().zip(rn.psi.iter().zip(&rn.uz)) {
                psi[e.original] = ps;
                u_z[e.original] = uz;
            }
            Ok(PathNode {
                s: rn.s,
                position: Vector3::new(rn.p[0], rn.p[1], rn.p[2]),
                rotation: rotation_from_quaternion(rn.q)?,
                psi,
                u_z,
                u_xy: rn.u_xy,
            })
        })
        .collect::<Result<Vec<_>, GeometryError>>()?;

    Ok(ShootOutcome {
        path: RobotPath {
            nodes,
            segment_ends,
        },
        iterations,
        residual,
    })
}

// ── Tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    /// A tube with planar pre-curvature and NiTi-like moduli.
    fn planar_tube(length: f64, beta: f64, alpha: f64, u: f64, rho_i: f64, rho_o: f64) -> Tube {
        Tube {
            length,
            beta,
            alpha,
            u_star: Vector3::new(u, 0.0, 0.0),
            rho_inner: rho_i,
            rho_outer: rho_o,
            youngs: 60e9,
            shear: 23e9,
        }
    }

    fn single_arc_set() -> TubeSet {
        TubeSet::new(vec![planar_tube(0.1, 0.0, 0.0, 10.0, 1.6e-3, 2.0e-3)]).unwrap()
    }

    /// Two geometrically identical nested tubes (same stiffness).
    fn identical_pair(alpha2: f64) -> TubeSet {
        TubeSet::new(vec![
            planar_tube(0.1, 0.0, 0.0, 10.0, 2.4e-3, 2.8e-3),
            Tube {
                rho_inner: 1.6e-3,
                rho_outer: 2.0e-3,
                alpha: alpha2,
                // match the outer tube's stiffness exactly despite the
                // smaller cross-section
                youngs: 60e9 * (2.8e-3f64.powi(4) - 2.4e-3f64.powi(4))
                    / (2.0e-3f64.powi(4) - 1.6e-3f64.powi(4)),
                shear: 23e9 * (2.8e-3f64.powi(4) - 2.4e-3f64.powi(4))
                    / (2.0e-3f64.powi(4) - 1.6e-3f64.powi(4)),
                ..planar_tube(0.1, 0.0, 0.0, 10.0, 1.6e-3, 2.0e-3)
            },
        ])
        .unwrap()
    }

    fn arc_tip(kappa: f64, ell: f64) -> Vector3<f64> {
        Vector3::new(0.0, (1.0 - (kappa * ell).cos()) / kappa, (kappa * ell).sin() / kappa)
    }

    // ── validation ──

    #[test]
    fn tube_set_rejects_bad_parameters() {
        let good = planar_tube(0.1, 0.0, 0.0, 10.0, 1.6e-3, 2.0e-3);
        assert!(matches!(
            TubeSet::new(vec![]),
            Err(KinematicsError::EmptyTubeSet)
        ));
        assert!(matches!(
            TubeSet::new(vec![Tube { length: 0.0, ..good }]),
            Err(KinematicsError::BadLength { tube: 0, .. })
        ));
        assert!(matches!(
            TubeSet::new(vec![Tube { beta: -0.2, ..good }]),
            Err(KinematicsError::BadRetraction { tube: 0, .. })
        ));
        assert!(matches!(
            TubeSet::new(vec![Tube { beta: 0.1, ..good }]),
            Err(KinematicsError::BadRetraction { tube: 0, .. })
        ));
        assert!(matches!(
            TubeSet::new(vec![Tube {
                rho_inner: 2.0e-3,
                rho_outer: 1.6e-3,
                ..good
            }]),
            Err(KinematicsError::BadDiameters { tube: 0, .. })
        ));
        assert!(matches!(
            TubeSet::new(vec![Tube { youngs: -1.0, ..good }]),
            Err(KinematicsError::BadModuli { tube: 0, .. })
        ));
    }

    #[test]
    fn tube_set_rejects_nesting_violation_naming_the_pair() {
        // inner tube's outer diameter exceeds the outer tube's bore
        let outer = planar_tube(0.1, 0.0, 0.0, 10.0, 1.8e-3, 2.2e-3);
        let inner = planar_tube(0.12, 0.0, 0.0, 10.0, 1.5e-3, 1.9e-3);
        match TubeSet::new(vec![outer, inner]) {
            Err(KinematicsError::NestingViolation { around: 0, inside: 1, .. }) => {}
            other => panic!("expected nesting violation, got {other:?}"),
        }
    }

    #[test]
    fn tube_set_rejects_outer_tube_extending_beyond_inner() {
        let outer = planar_tube(0.2, 0.0, 0.0, 10.0, 2.4e-3, 2.8e-3);
        let inner = planar_tube(0.1, 0.0, 0.0, 10.0, 1.6e-3, 2.0e-3);
        assert!(matches!(
            TubeSet::new(vec![outer, inner]),
            Err(KinematicsError::ExtensionOrdering { tube: 0, .. })
        ));
    }

    #[test]
    fn tube_set_wraps_base_rotations() {
        let set = TubeSet::new(vec![planar_tube(0.1, 0.0, -FRAC_PI_2, 10.0, 1.6e-3, 2.0e-3)])
            .unwrap();
        assert_abs_diff_eq!(set.tubes()[0].alpha, 1.5 * PI, epsilon = 1e-12);
    }

    #[test]
    fn annulus_moments_match_closed_form() {
        let t = planar_tube(0.1, 0.0, 0.0, 10.0, 1.6e-3, 2.0e-3);
        let i = PI * ((2.0e-3f64).powi(4) - (1.6e-3f64).powi(4)) / 64.0;
        assert_abs_diff_eq!(t.second_moment(), i, epsilon = 1e-25);
        assert_abs_diff_eq!(t.polar_moment(), 2.0 * i, epsilon = 1e-25);
    }

    // ── active set ──

    #[test]
    fn active_set_definition_and_boundaries() {
        let set = TubeSet::new(vec![
            planar_tube(0.1, 0.0, 0.0, 10.0, 3.2e-3, 3.6e-3),
            planar_tube(0.2, 0.0, 0.0, 10.0, 2.4e-3, 2.8e-3),
            planar_tube(0.3, 0.0, 0.0, 10.0, 1.6e-3, 2.0e-3),
        ])
        .unwrap();
        assert_eq!(active_set(0.0, &set).unwrap(), vec![0, 1, 2]);
        assert_eq!(active_set(0.15, &set).unwrap(), vec![1, 2]);
        assert_eq!(active_set(0.1, &set).unwrap(), vec![0, 1, 2]); // inclusive end
        assert_eq!(active_set(0.3, &set).unwrap(), vec![2]);
        assert!(matches!(
            active_set(0.31, &set),
            Err(KinematicsError::ArcOutOfRange { .. })
        ));
        assert!(matches!(
            active_set(-0.01, &set),
            Err(KinematicsError::ArcOutOfRange { .. })
        ));
    }

    // ── torsion rates ──

    #[test]
    fn single_tube_has_no_torsion_acceleration() {
        let set = single_arc_set();
        let (dpsi, duz) = torsion_rhs(0.05, &[1.234], &[5.6], &set).unwrap();
        assert_eq!(dpsi, vec![5.6]);
        assert_abs_diff_eq!(duz[0], 0.0, epsilon = 1e-30);
    }

    #[test]
    fn aligned_identical_tubes_are_torsion_free() {
        let set = identical_pair(0.0);
        let (_, duz) = torsion_rhs(0.05, &[0.7, 0.7], &[0.0, 0.0], &set).unwrap();
        assert_abs_diff_eq!(duz[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(duz[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn antipodal_identical_tubes_are_torsion_free() {
        let set = identical_pair(PI);
        let (_, duz) = torsion_rhs(0.05, &[0.0, PI], &[0.0, 0.0], &set).unwrap();
        assert_abs_diff_eq!(duz[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(duz[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn quarter_turn_rates_match_closed_form() {
        // Equal-stiffness pair at ψ₂ − ψ₁ = π/2 with planar pre-curvature
        // u: the mixing matrix reduces to ∓u², the stiffness ratio to
        // 1/(2GJ), and the annulus moments cancel, leaving ∓E·u²/(4G).
        let set = identical_pair(0.0);
        let u = 10.0;
        let expected = 60e9 * u * u / (4.0 * 23e9); // 652.1739…
        let (_, duz) = torsion_rhs(0.05, &[0.0, FRAC_PI_2], &[0.0, 0.0], &set).unwrap();
        assert_abs_diff_eq!(duz[0], -expected, epsilon = expected * 1e-9);
        assert_abs_diff_eq!(duz[1], expected, epsilon = expected * 1e-9);
    }

    #[test]
    fn torsion_rhs_rejects_wrong_state_size() {
        let set = identical_pair(0.0);
        assert!(matches!(
            torsion_rhs(0.05, &[0.0], &[0.0], &set),
            Err(KinematicsError::StateSizeMismatch { expected: 2, got: 1 })
        ));
    }

    // ── resultant curvature ──

    #[test]
    fn single_tube_resultant_is_its_pre_curvature() {
        let set = single_arc_set();
        let uxy = resultant_curvature(0.03, &[0.9], &set).unwrap();
        assert_abs_diff_eq!(uxy[0][0], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(uxy[0][1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn aligned_equal_tubes_average_to_the_shared_pre_curvature() {
        let set = identical_pair(0.0);
        let uxy = resultant_curvature(0.05, &[0.4, 0.4], &set).unwrap();
        for row in uxy {
            assert_abs_diff_eq!(row[0], 10.0, epsilon = 1e-9);
            assert_abs_diff_eq!(row[1], 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn antipodal_equal_tubes_cancel() {
        let set = identical_pair(PI);
        let uxy = resultant_curvature(0.05, &[0.0, PI], &set).unwrap();
        for row in uxy {
            assert_abs_diff_eq!(row[0], 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(row[1], 0.0, epsilon = 1e-9);
        }
    }

    // ── frame integration ──

    #[test]
    fn zero_curvature_gives_a_straight_frame() {
        let mut f = Frame::identity();
        for _ in 0..10 {
            f = integrate_frame(&f, &Vector3::zeros(), 0.05);
        }
        assert_abs_diff_eq!(f.p, Vector3::new(0.0, 0.0, 0.5), epsilon = 1e-12);
        assert_abs_diff_eq!(f.r, Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn constant_curvature_traces_the_closed_form_arc() {
        let kappa = 10.0;
        let ell = 0.1;
        let steps = 49;
        let mut f = Frame::identity();
        for _ in 0..steps {
            f = integrate_frame(&f, &Vector3::new(kappa, 0.0, 0.0), ell / steps as f64);
        }
        assert_abs_diff_eq!(f.p, arc_tip(kappa, ell), epsilon = 1e-6);
    }

    #[test]
    fn pure_twist_spins_in_place() {
        let tau = 3.0;
        let ell = 0.2;
        let mut f = Frame::identity();
        for _ in 0..40 {
            f = integrate_frame(&f, &Vector3::new(0.0, 0.0, tau), ell / 40.0);
        }
        assert_abs_diff_eq!(f.p, Vector3::new(0.0, 0.0, ell), epsilon = 1e-10);
        let angle = tau * ell;
        let expected = Matrix3::new(
            angle.cos(),
            -angle.sin(),
            0.0,
            angle.sin(),
            angle.cos(),
            0.0,
            0.0,
            0.0,
            1.0,
        );
        assert_abs_diff_eq!(f.r, expected, epsilon = 1e-9);
    }

    #[test]
    fn long_integration_keeps_rotations_orthonormal() {
        let mut f = Frame::identity();
        for k in 0..500 {
            let u = Vector3::new(12.0 * (k as f64 * 0.1).sin(), 7.0, 3.0);
            f = integrate_frame(&f, &u, 2e-3);
        }
        let drift = (f.r.transpose() * f.r - Matrix3::identity()).norm();
        assert!(drift <= 1e-9, "orthonormality drift {drift}");
    }

    // ── shooting ──

    #[test]
    fn single_tube_shoots_the_closed_form_arc() {
        let out = shoot_forward(&single_arc_set(), &Frame::identity()).unwrap();
        assert_eq!(out.iterations, 0); // zero guess is exact
        let tip = out.path.tip().unwrap();
        assert_abs_diff_eq!(tip.position, arc_tip(10.0, 0.1), epsilon = 1e-6);
        for node in &out.path.nodes {
            assert_abs_diff_eq!(node.psi[0], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(node.u_z[0], 0.0, epsilon = 1e-12);
        }
        out.path.validate().unwrap();
    }

    #[test]
    fn antipodal_pair_shoots_straight() {
        let out = shoot_forward(&identical_pair(PI), &Frame::identity()).unwrap();
        let tip = out.path.tip().unwrap();
        let lateral = (tip.position.x.powi(2) + tip.position.y.powi(2)).sqrt();
        assert!(lateral < 1e-6, "lateral deviation {lateral}");
        assert_abs_diff_eq!(tip.position.z, 0.1, epsilon = 1e-6);
    }

    #[test]
    fn aligned_pair_matches_the_single_tube_arc() {
        let pair = shoot_forward(&identical_pair(0.0), &Frame::identity()).unwrap();
        let single = shoot_forward(&single_arc_set(), &Frame::identity()).unwrap();
        let (tp, ts) = (
            pair.path.tip().unwrap().position,
            single.path.tip().unwrap().position,
        );
        assert_abs_diff_eq!(tp, ts, epsilon = 1e-8);
    }

    fn random_set(rng: &mut ChaCha8Rng) -> TubeSet {
        let n = rng.gen_range(2..=3usize);
        let mut ells: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.18)).collect();
        ells.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // diameters built innermost-out so nesting holds by construction
        let mut bore = 0.8e-3;
        let mut dims = Vec::new();
        for _ in 0..n {
            let wall = rng.gen_range(0.15e-3..0.3e-3);
            dims.push((bore, bore + wall));
            bore += wall + 0.05e-3;
        }
        dims.reverse();
        let tubes: Vec<Tube> = (0..n)
            .map(|i| {
                let retraction = rng.gen_range(0.0..0.4 * ells[i]);
                Tube {
                    length: ells[i] + retraction,
                    beta: -retraction,
                    alpha: rng.gen_range(0.0..TAU),
                    u_star: Vector3::new(
                        rng.gen_range(-15.0..15.0),
                        rng.gen_range(-15.0..15.0),
                        0.0,
                    ),
                    rho_inner: dims[i].0,
                    rho_outer: dims[i].1,
                    youngs: 60e9,
                    shear: 23e9,
                }
            })
            .collect();
        TubeSet::new(tubes).unwrap()
    }

    #[test]
    fn random_configurations_satisfy_the_end_conditions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let set = random_set(&mut rng);
            let out = shoot_forward(&set, &Frame::identity()).unwrap();
            assert!(out.residual <= 1e-10, "residual {}", out.residual);
            assert!(out.iterations <= 50);
            out.path.validate().unwrap();
        }
    }

    #[test]
    fn shooting_is_equivariant_under_rigid_motions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let set = random_set(&mut rng);
        let theta: f64 = 1.1;
        let axis = Vector3::new(1.0, 2.0, 3.0).normalize();
        let q = [
            (theta / 2.0).cos(),
            (theta / 2.0).sin() * axis.x,
            (theta / 2.0).sin() * axis.y,
            (theta / 2.0).sin() * axis.z,
        ];
        let rg = rotation_from_quaternion(q).unwrap();
        let t = Vector3::new(0.3, -0.2, 0.5);

        let base = shoot_forward(&set, &Frame::identity()).unwrap();
        let moved = shoot_forward(
            &set,
            &Frame { r: rg, p: t },
        )
        .unwrap();
        for (a, b) in base.path.nodes.iter().zip(&moved.path.nodes) {
            assert_abs_diff_eq!(rg * a.position + t, b.position, epsilon = 1e-8);
            assert_abs_diff_eq!(rg * a.rotation, b.rotation, epsilon = 1e-8);
        }
    }

    #[test]
    fn tip_error_decays_at_fourth_order() {
        let set = single_arc_set();
        let exact = arc_tip(10.0, 0.1);
        let err = |nodes: usize| {
            let opts = ShootOptions {
                nodes_per_segment: nodes,
                ..ShootOptions::default()
            };
            let out = shoot_forward_with(&set, &Frame::identity(), &opts).unwrap();
            (out.path.tip().unwrap().position - exact).norm()
        };
        let ratio = err(5) / err(9); // step halves: expect ~2⁴
        assert!(
            (11.0..22.0).contains(&ratio),
            "refinement ratio {ratio} not fourth order"
        );
    }

    #[test]
    fn fully_retracted_robot_is_a_single_base_node() {
        let set = TubeSet::new(vec![planar_tube(0.1, -0.1, 0.3, 10.0, 1.6e-3, 2.0e-3)]).unwrap();
        let out = shoot_forward(&set, &Frame::identity()).unwrap();
        assert_eq!(out.path.nodes.len(), 1);
        let node = &out.path.nodes[0];
        assert_abs_diff_eq!(node.position, Vector3::zeros(), epsilon = 1e-15);
        assert_abs_diff_eq!(node.psi[0], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn retracted_outer_tube_reduces_to_the_inner_tube_alone() {
        let inner = planar_tube(0.1, 0.0, 0.0, 10.0, 1.6e-3, 2.0e-3);
        let with_dead_outer = TubeSet::new(vec![
            planar_tube(0.08, -0.08, 1.0, 25.0, 2.4e-3, 2.8e-3),
            inner,
        ])
        .unwrap();
        let alone = TubeSet::new(vec![inner]).unwrap();
        let a = shoot_forward(&with_dead_outer, &Frame::identity()).unwrap();
        let b = shoot_forward(&alone, &Frame::identity()).unwrap();
        assert_abs_diff_eq!(
            a.path.tip().unwrap().position,
            b.path.tip().unwrap().position,
            epsilon = 1e-12
        );
        // the dead tube's columns report its base rotation and no twist rate
        for node in &a.path.nodes {
            assert_abs_diff_eq!(node.psi[0], 1.0, epsilon = 1e-15);
            assert_abs_diff_eq!(node.u_z[0], 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn departed_tube_columns_freeze_after_its_end() {
        let set = TubeSet::new(vec![
            planar_tube(0.06, 0.0, 0.5, 12.0, 2.4e-3, 2.8e-3),
            planar_tube(0.12, 0.0, 0.0, 10.0, 1.6e-3, 2.0e-3),
        ])
        .unwrap();
        let out = shoot_forward(&set, &Frame::identity()).unwrap();
        let after: Vec<&PathNode> = out
            .path
            .nodes
            .iter()
            .filter(|nd| nd.s >= 0.06)
            .collect();
        assert!(after.len() > 1);
        for nd in &after[1..] {
            assert_abs_diff_eq!(nd.psi[0], after[0].psi[0], epsilon = 1e-15);
            assert_abs_diff_eq!(nd.u_z[0], after[0].u_z[0], epsilon = 1e-15);
        }
        // the twist rate of the departed tube satisfied its end condition
        assert!(after[0].u_z[0].abs() <= 1e-10);
    }

    // ── path container ──

    #[test]
    fn csv_export_has_one_row_per_node_and_named_columns() {
        let out = shoot_forward(&identical_pair(1.0), &Frame::identity()).unwrap();
        let mut buf = Vec::new();
        out.path.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "s,px,py,pz,psi_1,psi_2,uz_1,uz_2"
        );
        assert_eq!(lines.count(), out.path.nodes.len());
    }

    #[test]
    fn path_json_roundtrip_is_exact() {
        let out = shoot_forward(&identical_pair(2.0), &Frame::identity()).unwrap();
        let json = serde_json::to_string(&out.path).unwrap();
        let back: RobotPath = serde_json::from_str(&json).unwrap();
        assert_eq!(out.path.nodes.len(), back.nodes.len());
        for (a, b) in out.path.nodes.iter().zip(&back.nodes) {
            assert_eq!(a.position, b.position);
            assert_eq!(a.rotation, b.rotation);
            assert_eq!(a.psi, b.psi);
        }
    }

    #[test]
    fn validate_catches_a_teleporting_node() {
        let mut path = shoot_forward(&single_arc_set(), &Frame::identity())
            .unwrap()
            .path;
        path.nodes[10].position += Vector3::new(0.1, 0.0, 0.0);
        assert!(matches!(
            path.validate(),
            Err(KinematicsError::InvalidPath { .. })
        ));
    }
}
