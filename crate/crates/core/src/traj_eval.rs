//! Trajectory metrics: Sim(3) alignment (closed-form Umeyama), absolute
//! trajectory error, relative pose error, and the TUM trajectory format.
//!
//! A monocular estimate lives in an arbitrary similarity frame, so the
//! absolute metric first solves for the best Sim(3) onto ground truth and
//! reports the RMS position residual that remains. The relative metrics
//! compare motion increments and are invariant to any rigid transform of
//! the estimate by construction — no alignment is applied there.

use crate::se3::Pose;
use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3, SVD};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("timestamps must increase strictly (sample {index})")]
    NonMonotonicTimestamps { index: usize },
    #[error("{got} associated pose pairs within tolerance; need at least {need}")]
    NoAssociations { got: usize, need: usize },
    #[error("associated positions are (near-)collinear; Sim(3) alignment is underdetermined")]
    DegenerateGeometry,
    #[error("trajectory covers {length_m:.3} m of arc; one segment needs {delta_m} m")]
    TooShort { length_m: f64, delta_m: f64 },
    #[error("trajectory file, line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Timestamped camera-in-world poses, strictly increasing in time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    samples: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(samples: Vec<(f64, Pose)>) -> Result<Self, EvalError> {
        for (i, w) in samples.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(EvalError::NonMonotonicTimestamps { index: i + 1 });
            }
        }
        if let Some(i) = samples.iter().position(|(t, _)| !t.is_finite()) {
            return Err(EvalError::NonMonotonicTimestamps { index: i });
        }
        Ok(Trajectory { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[(f64, Pose)] {
        &self.samples
    }
}

/// Similarity transform `p ↦ s·R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Sim3 {
    pub fn identity() -> Self {
        Sim3 { scale: 1.0, rotation: UnitQuaternion::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }
}

/// Pairs samples by nearest timestamp within `tol_s`, walking both sorted
/// sequences once. A ground-truth sample may serve several estimate
/// samples if it is nearest to each of them.
pub fn associate(est: &Trajectory, gt: &Trajectory, tol_s: f64) -> Vec<(usize, usize)> {
    let (es, gs) = (est.samples(), gt.samples());
    let mut pairs = Vec::new();
    let mut j = 0usize;
    for (i, (te, _)) in es.iter().enumerate() {
        while j + 1 < gs.len() && (gs[j + 1].0 - te).abs() <= (gs[j].0 - te).abs() {
            j += 1;
        }
        if !gs.is_empty() && (gs[j].0 - te).abs() <= tol_s {
            pairs.push((i, j));
        }
    }
    pairs
}

fn associated_positions(
    est: &Trajectory,
    gt: &Trajectory,
    tol_s: f64,
) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>), EvalError> {
    let pairs = associate(est, gt, tol_s);
    if pairs.len() < 3 {
        return Err(EvalError::NoAssociations { got: pairs.len(), need: 3 });
    }
    let xs = pairs.iter().map(|&(i, _)| est.samples()[i].1.translation).collect();
    let ys = pairs.iter().map(|&(_, j)| gt.samples()[j].1.translation).collect();
    Ok((xs, ys))
}

/// Closed-form least-squares similarity: minimizes
/// `Σ ‖s·R·p_est + t − p_gt‖²` over the timestamp-associated pairs
/// (Umeyama's method). Needs at least three associated, non-collinear
/// positions; planar trajectories are fine.
pub fn align_sim3(est: &Trajectory, gt: &Trajectory, tol_s: f64) -> Result<Sim3, EvalError> {
    let (xs, ys) = associated_positions(est, gt, tol_s)?;
    let n = xs.len() as f64;
    let mu_x: Vector3<f64> = xs.iter().sum::<Vector3<f64>>() / n;
    let mu_y: Vector3<f64> = ys.iter().sum::<Vector3<f64>>() / n;

    let mut cross = Matrix3::<f64>::zeros();
    let mut var_x = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let dx = x - mu_x;
        cross += (y - mu_y) * dx.transpose();
        var_x += dx.norm_squared();
    }
    cross /= n;
    var_x /= n;

    let svd = SVD::new(cross, true, true);
    let (u0, v_t0, sv) = (svd.u.unwrap(), svd.v_t.unwrap(), svd.singular_values);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let d = Vector3::new(sv[order[0]], sv[order[1]], sv[order[2]]);
    let u = Matrix3::from_columns(&[u0.column(order[0]), u0.column(order[1]), u0.column(order[2])]);
    let v0 = v_t0.transpose();
    let v = Matrix3::from_columns(&[v0.column(order[0]), v0.column(order[1]), v0.column(order[2])]);

    // Rank ≤ 1 means the point sets carry no plane to pin the rotation:
    // coincident or collinear geometry.
    if d[0] <= 0.0 || d[1] <= 1e-9 * d[0] {
        return Err(EvalError::DegenerateGeometry);
    }

    // Reflection guard: the optimal proper rotation flips the smallest
    // singular direction when det(U)·det(V) < 0.
    let sign = (u.determinant() * v.determinant()).signum();
    let r = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign)) * v.transpose();
    let scale = (d[0] + d[1] + sign * d[2]) / var_x;
    let rotation = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r));
    let translation = mu_y - scale * (rotation * mu_x);
    Ok(Sim3 { scale, rotation, translation })
}

/// RMS position residual after the optimal Sim(3) alignment, in
/// ground-truth units.
pub fn ate_rmse(est: &Trajectory, gt: &Trajectory, tol_s: f64) -> Result<f64, EvalError> {
    let sim = align_sim3(est, gt, tol_s)?;
    let (xs, ys) = associated_positions(est, gt, tol_s)?;
    let sum: f64 = xs.iter().zip(&ys).map(|(x, y)| (sim.apply(x) - y).norm_squared()).sum();
    Ok((sum / xs.len() as f64).sqrt())
}

/// Relative pose error over segments of `delta_m` meters of ground-truth
/// arc: RMS translational drift as a percentage of segment length, and RMS
/// rotational drift in degrees per meter. Compares motion increments
/// directly — no alignment — so any rigid transform of the estimate leaves
/// the result unchanged (a scale error, by design, does not).
pub fn rpe(
    est: &Trajectory,
    gt: &Trajectory,
    tol_s: f64,
    delta_m: f64,
) -> Result<(f64, f64), EvalError> {
    let pairs = associate(est, gt, tol_s);
    if pairs.len() < 2 {
        return Err(EvalError::NoAssociations { got: pairs.len(), need: 2 });
    }
    let eps: Vec<Pose> = pairs.iter().map(|&(i, _)| est.samples()[i].1).collect();
    let gps: Vec<Pose> = pairs.iter().map(|&(_, j)| gt.samples()[j].1).collect();

    // Cumulative ground-truth arc length (chordal).
    let mut cum = Vec::with_capacity(gps.len());
    let mut acc = 0.0;
    cum.push(0.0);
    for w in gps.windows(2) {
        acc += (w[1].translation - w[0].translation).norm();
        cum.push(acc);
    }
    if acc < delta_m {
        return Err(EvalError::TooShort { length_m: acc, delta_m });
    }

    let mut sum_t = 0.0;
    let mut sum_r = 0.0;
    let mut n_seg = 0usize;
    let mut j = 0usize;
    for i in 0..gps.len() {
        if j < i {
            j = i;
        }
        while j < gps.len() && cum[j] - cum[i] < delta_m {
            j += 1;
        }
        if j >= gps.len() {
            break;
        }
        let len = cum[j] - cum[i];
        let d_gt = gps[i].inverse().compose(&gps[j]);
        let d_est = eps[i].inverse().compose(&eps[j]);
        let err = d_gt.inverse().compose(&d_est);
        sum_t += (err.translation.norm() / len).powi(2);
        sum_r += (err.rotation.angle().to_degrees() / len).powi(2);
        n_seg += 1;
    }
    if n_seg == 0 {
        return Err(EvalError::TooShort { length_m: acc, delta_m });
    }
    let n = n_seg as f64;
    Ok((100.0 * (sum_t / n).sqrt(), (sum_r / n).sqrt()))
}

// ---------------------------------------------------------------------------
// TUM trajectory format
// ---------------------------------------------------------------------------

/// Renders `timestamp tx ty tz qx qy qz qw` lines (camera-in-world), with
/// 17 significant digits so parsing the output reproduces the input
/// exactly.
pub fn format_tum(traj: &Trajectory) -> String {
    let mut out = String::new();
    out.push_str("# timestamp tx ty tz qx qy qz qw\n");
    for (ts, pose) in traj.samples() {
        let t = pose.translation;
        let q = pose.rotation.coords;
        let _ = writeln!(
            out,
            "{ts:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}",
            t.x, t.y, t.z, q.x, q.y, q.z, q.w
        );
    }
    out
}

/// Parses the TUM trajectory format; see [`format_tum`]. `#` starts a
/// comment, blank lines are skipped, timestamps must increase strictly.
pub fn parse_tum(text: &str) -> Result<Trajectory, EvalError> {
    let mut samples: Vec<(f64, Pose)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        if toks.len() != 8 {
            return Err(EvalError::Parse {
                line,
                msg: format!("a pose line takes 8 fields, got {}", toks.len()),
            });
        }
        let mut v = [0.0f64; 8];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = toks[k].parse().map_err(|_| EvalError::Parse {
                line,
                msg: format!("bad real `{}`", toks[k]),
            })?;
            if !slot.is_finite() {
                return Err(EvalError::Parse {
                    line,
                    msg: format!("non-finite real `{}`", toks[k]),
                });
            }
        }
        if let Some(&(prev, _)) = samples.last() {
            if v[0] <= prev {
                return Err(EvalError::Parse {
                    line,
                    msg: format!("timestamp {} does not increase (previous {prev})", v[0]),
                });
            }
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(EvalError::Parse {
                line,
                msg: format!("quaternion norm {} is not 1", q.norm()),
            });
        }
        // Keep the stored coordinates bit-exact (see the tracks parser).
        samples.push((
            v[0],
            Pose::from_parts(UnitQuaternion::new_unchecked(q), Vector3::new(v[1], v[2], v[3])),
        ));
    }
    Trajectory::new(samples)
}

pub fn read_tum(path: &Path) -> Result<Trajectory, EvalError> {
    parse_tum(&std::fs::read_to_string(path)?)
}

pub fn write_tum(path: &Path, traj: &Trajectory) -> Result<(), EvalError> {
    std::fs::write(path, format_tum(traj))?;
    Ok(())
}
