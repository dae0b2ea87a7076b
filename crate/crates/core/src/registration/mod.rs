//! Point-to-point ICP, rotation/translation error measures, and the paired
//! partial-versus-completed registration experiment.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, SpatialIndex};

/// Clouds with fewer points than this register with `low_confidence` set.
pub const LOW_CONFIDENCE_POINTS: usize = 30;

/// `p -> R p + T`, with the unit quaternion of `R` cached (sign fixed so
/// that `w >= 0`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
    q: UnitQuaternion<f64>,
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    /// `r` must be a rotation; it is re-orthonormalized through the
    /// quaternion so the cached pair stays consistent.
    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        let q = canonical(UnitQuaternion::from_matrix(&r));
        RigidTransform {
            r: *q.to_rotation_matrix().matrix(),
            t,
            q,
        }
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64, t: [f64; 3]) -> Self {
        let axis = nalgebra::Unit::new_normalize(Vector3::from(axis));
        let q = canonical(UnitQuaternion::from_axis_angle(&axis, angle));
        RigidTransform {
            r: *q.to_rotation_matrix().matrix(),
            t: Vector3::from(t),
            q,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        self.q
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        let v = self.r * Vector3::from(*p) + self.t;
        [v[0], v[1], v[2]]
    }

    pub fn apply_cloud(&self, pc: &PointCloud) -> PointCloud {
        PointCloud {
            points: pc.points.iter().map(|p| self.apply(p)).collect(),
            tags: pc.tags.clone(),
        }
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform::new(self.r * first.r, self.r * first.t + self.t)
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.r.transpose();
        RigidTransform::new(rt, -(rt * self.t))
    }
}

fn centroid(points: &[Point3]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in points {
        c += Vector3::from(*p);
    }
    c / points.len() as f64
}

/// Rejects sets whose spread is (numerically) confined to a line.
fn check_spread(points: &[Point3], what: &str) -> Result<()> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!("{what}: {} points, need 3", points.len())));
    }
    let c = centroid(points);
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = Vector3::from(*p) - c;
        cov += d * d.transpose();
    }
    let mut s: Vec<f64> = cov.symmetric_eigenvalues().iter().map(|v| v.abs()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    if s[0] == 0.0 || s[1] <= 1e-12 * s[0] {
        return Err(Error::Degenerate(format!("{what}: points are collinear or coincident")));
    }
    Ok(())
}

/// Least-squares rigid transform taking `src[i]` onto `dst[i]` (SVD of the
/// cross-covariance with the reflection case corrected).
pub fn kabsch(src: &[Point3], dst: &[Point3]) -> Result<RigidTransform> {
    if src.len() != dst.len() {
        return Err(Error::InvalidArgument(format!("{} sources, {} targets", src.len(), dst.len())));
    }
    check_spread(src, "rigid fit source")?;
    let cs = centroid(src);
    let cd = centroid(dst);
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (Vector3::from(*s) - cs) * (Vector3::from(*d) - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (v_t.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v_t.transpose() * d * u.transpose();
    let r = *Rotation3::from_matrix_eps(&r, 1e-12, 100, Rotation3::identity()).matrix();
    Ok(RigidTransform::new(r, cd - r * cs))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpConfig {
    pub max_iters: usize,
    /// Stop once the mean squared correspondence distance improves by less
    /// than this.
    pub tol: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iters: 100,
            tol: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    /// Maps the source onto the target.
    pub transform: RigidTransform,
    pub iterations: usize,
    /// Mean squared nearest-neighbour distance before each update, plus the
    /// final value.
    pub history: Vec<f64>,
    /// Set when either cloud has fewer than [`LOW_CONFIDENCE_POINTS`].
    pub low_confidence: bool,
}

/// Point-to-point ICP from the identity.
pub fn icp(source: &PointCloud, target: &PointCloud, cfg: &IcpConfig) -> Result<IcpResult> {
    check_spread(&source.points, "ICP source")?;
    check_spread(&target.points, "ICP target")?;
    let index = SpatialIndex::new(&target.points);
    let mut current = RigidTransform::identity();
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut matched = vec![[0.0; 3]; source.len()];
    loop {
        let mut err = 0.0;
        for (m, p) in matched.iter_mut().zip(&source.points) {
            let (j, d) = index.nearest(&current.apply(p)).unwrap();
            *m = target.points[j];
            err += d;
        }
        err /= source.len() as f64;
        let done = history.last().is_some_and(|&prev: &f64| prev - err < cfg.tol);
        history.push(err);
        if done || iterations >= cfg.max_iters {
            break;
        }
        current = kabsch(&source.points, &matched)?;
        iterations += 1;
    }
    Ok(IcpResult {
        transform: current,
        iterations,
        history,
        low_confidence: source.len() < LOW_CONFIDENCE_POINTS || target.len() < LOW_CONFIDENCE_POINTS,
    })
}

/// How rotation differences are reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RotationMetric {
    /// `2 acos(2 <q1, q2>^2 - 1)`, twice the geodesic angle.
    #[default]
    Printed,
    /// `acos(2 <q1, q2>^2 - 1)`, the geodesic angle.
    Geodesic,
}

/// Rotation difference in degrees.
pub fn rotation_error(a: &RigidTransform, b: &RigidTransform, metric: RotationMetric) -> f64 {
    let dot = a.quaternion().coords.dot(&b.quaternion().coords);
    let theta = (2.0 * dot * dot - 1.0).clamp(-1.0, 1.0).acos();
    match metric {
        RotationMetric::Printed => (2.0 * theta).to_degrees(),
        RotationMetric::Geodesic => theta.to_degrees(),
    }
}

/// Euclidean distance between translations.
pub fn translation_error(a: &RigidTransform, b: &RigidTransform) -> f64 {
    (a.t - b.t).norm()
}

/// Two observations of one object and the true motion from `a` to `b`.
#[derive(Clone, Debug)]
pub struct RegistrationPair {
    pub example: String,
    pub a: PointCloud,
    pub b: PointCloud,
    pub gt: RigidTransform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairErrors {
    pub example: String,
    pub rot_err: f64,
    pub trans_err: f64,
    pub low_confidence: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentTable {
    pub rows: Vec<PairErrors>,
    pub mean_rot_err: f64,
    pub mean_trans_err: f64,
}

/// Registers every pair (in parallel, results in input order) and compares
/// the estimate with the true motion.
pub fn registration_experiment(
    pairs: &[RegistrationPair],
    cfg: &IcpConfig,
    metric: RotationMetric,
) -> Result<ExperimentTable> {
    if pairs.is_empty() {
        return Err(Error::Empty("registration experiment without pairs"));
    }
    let rows = pairs
        .par_iter()
        .map(|p| {
            let res = icp(&p.a, &p.b, cfg)?;
            Ok(PairErrors {
                example: p.example.clone(),
                rot_err: rotation_error(&res.transform, &p.gt, metric),
                trans_err: translation_error(&res.transform, &p.gt),
                low_confidence: res.low_confidence,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok(ExperimentTable {
        mean_rot_err: rows.iter().map(|r| r.rot_err).sum::<f64>() / n,
        mean_trans_err: rows.iter().map(|r| r.trans_err).sum::<f64>() / n,
        rows,
    })
}

pub const REGISTRATION_CSV_HEADER: &str = "example,rot_err_partial,trans_err_partial,rot_err_complete,trans_err_complete";

/// Side-by-side CSV of the same pairs registered from partial and from
/// completed clouds, with a trailing `mean` row.
pub fn registration_csv(partial: &ExperimentTable, completed: &ExperimentTable) -> Result<String> {
    if partial.rows.len() != completed.rows.len()
        || partial.rows.iter().zip(&completed.rows).any(|(a, b)| a.example != b.example)
    {
        return Err(Error::InvalidArgument("partial and completed tables list different pairs".into()));
    }
    let mut s = format!("{REGISTRATION_CSV_HEADER}\n");
    for (a, b) in partial.rows.iter().zip(&completed.rows) {
        let _ = writeln!(s, "{},{},{},{},{}", a.example, a.rot_err, a.trans_err, b.rot_err, b.trans_err);
    }
    let _ = writeln!(
        s,
        "mean,{},{},{},{}",
        partial.mean_rot_err, partial.mean_trans_err, completed.mean_rot_err, completed.mean_trans_err
    );
    Ok(s)
}
