//! Trajectory error metrics and uncertainty/error correlation.
//!
//! ATE is the RMS of translation residuals after an optional Umeyama
//! alignment; RPE compares relative motions over a fixed frame gap and is
//! reported as translation RMS (m) and rotation RMS (degrees, geodesic angle).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose6, RotMat, Transform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("degenerate point configuration (rank < 2)")]
    Rank,
    #[error("zero-variance input")]
    ZeroVariance,
    #[error("invalid frame gap {0}")]
    InvalidDelta(usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Similarity transform `p ↦ s·R·p + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignTransform {
    pub rotation: RotMat,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl AlignTransform {
    pub fn identity() -> Self {
        AlignTransform {
            rotation: RotMat::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation.0 * p) + self.translation
    }
}

/// Least-squares similarity (or rigid, when `with_scale` is false) transform
/// taking `src` onto `dst`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>], with_scale: bool) -> Result<AlignTransform> {
    if src.len() != dst.len() {
        return Err(MetricsError::LengthMismatch(src.len(), dst.len()));
    }
    let n = src.len();
    if n < 3 {
        return Err(MetricsError::TooFew { needed: 3, got: n });
    }
    let nf = n as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / nf;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (cs, cd) = (s - mu_s, d - mu_d);
        cov += cd * cs.transpose();
        src_cov += cs * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov /= nf;
    src_cov /= nf;
    var_s /= nf;

    // Collinear (or coincident) source points leave the rotation about their
    // common axis undetermined.
    let sv = src_cov.symmetric_eigenvalues();
    let mut sv: Vec<f64> = sv.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] <= 1e-12 * sv[0] {
        return Err(MetricsError::Rank);
    }

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or(MetricsError::Rank)?;
    let v_t = svd.v_t.ok_or(MetricsError::Rank)?;
    let mut s = Matrix3::identity();
    if u.determinant() * v_t.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rot = u * s * v_t;
    let scale = if with_scale {
        let d = svd.singular_values;
        (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_s
    } else {
        1.0
    };
    if !(scale > 0.0) {
        return Err(MetricsError::Rank);
    }
    Ok(AlignTransform {
        rotation: RotMat(rot),
        translation: mu_d - scale * rot * mu_s,
        scale,
    })
}

/// How the estimate is aligned to ground truth before computing ATE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    #[default]
    None,
    /// Rigid (rotation + translation).
    Se3,
    /// Rigid plus scale.
    Sim3,
}

fn check_lengths(est: &[Pose6], gt: &[Pose6], min: usize) -> Result<()> {
    if est.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(est.len(), gt.len()));
    }
    if est.len() < min {
        return Err(MetricsError::TooFew { needed: min, got: est.len() });
    }
    Ok(())
}

/// RMS absolute trajectory error (m).
pub fn ate(est: &[Pose6], gt: &[Pose6], align: Alignment) -> Result<f64> {
    check_lengths(est, gt, 2)?;
    let src: Vec<Vector3<f64>> = est.iter().map(|p| p.t).collect();
    let dst: Vec<Vector3<f64>> = gt.iter().map(|p| p.t).collect();
    let tf = match align {
        Alignment::None => AlignTransform::identity(),
        Alignment::Se3 => umeyama(&src, &dst, false)?,
        Alignment::Sim3 => umeyama(&src, &dst, true)?,
    };
    let sq: f64 = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (tf.apply(s) - d).norm_squared())
        .sum();
    Ok((sq / src.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rpe {
    pub trans_m: f64,
    pub rot_deg: f64,
}

/// Per-pair relative pose errors `(translation m, rotation deg)` over gap `delta`.
pub fn rpe_errors(est: &[Pose6], gt: &[Pose6], delta: usize) -> Result<Vec<(f64, f64)>> {
    if delta == 0 {
        return Err(MetricsError::InvalidDelta(delta));
    }
    check_lengths(est, gt, delta + 1)?;
    let et: Vec<Transform> = est.iter().map(Pose6::to_transform).collect();
    let gtt: Vec<Transform> = gt.iter().map(Pose6::to_transform).collect();
    Ok((0..est.len() - delta)
        .map(|i| {
            let g = gtt[i].relative(&gtt[i + delta]);
            let e = et[i].relative(&et[i + delta]);
            let err = g.relative(&e);
            (err.t.norm(), err.rot.angle().to_degrees())
        })
        .collect())
}

/// RMS relative pose error.
pub fn rpe(est: &[Pose6], gt: &[Pose6], delta: usize) -> Result<Rpe> {
    let errs = rpe_errors(est, gt, delta)?;
    let n = errs.len() as f64;
    Ok(Rpe {
        trans_m: (errs.iter().map(|e| e.0 * e.0).sum::<f64>() / n).sqrt(),
        rot_deg: (errs.iter().map(|e| e.1 * e.1).sum::<f64>() / n).sqrt(),
    })
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(MetricsError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut end = k;
        while end + 1 < idx.len() && x[idx[end + 1]] == x[idx[k]] {
            end += 1;
        }
        let avg = (k + end) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=end] {
            r[i] = avg;
        }
        k = end + 1;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub pearson: f64,
    pub spearman: f64,
}

/// Pearson and Spearman correlation between errors and predicted sigmas.
pub fn uncertainty_correlation(errors: &[f64], sigmas: &[f64]) -> Result<Correlation> {
    if errors.len() != sigmas.len() {
        return Err(MetricsError::LengthMismatch(errors.len(), sigmas.len()));
    }
    if errors.len() < 3 {
        return Err(MetricsError::TooFew { needed: 3, got: errors.len() });
    }
    Ok(Correlation {
        pearson: pearson_unchecked(errors, sigmas)?,
        spearman: pearson_unchecked(&ranks(errors), &ranks(sigmas))?,
    })
}

/// Relative improvement `(baseline − value) / baseline × 100`.
pub fn gain_percent(baseline: f64, value: f64) -> f64 {
    (baseline - value) / baseline * 100.0
}
