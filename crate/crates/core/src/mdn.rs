//! Gaussian-mixture output layer math.
//!
//! A mixture head predicts, per output dimension group, `K` mixing weights,
//! `K × D` means and `K × D` standard deviations with a diagonal covariance.
//! Training works in an unconstrained parameterization: softmax logits for the
//! weights and `log σ` for the deviations. Densities are always handled in log
//! space.

use nalgebra::{Vector3, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid mixture parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, MdnError>;

/// Mixture of `K` diagonal Gaussians over `D` dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub alphas: Vec<f64>,
    pub mus: Vec<Vec<f64>>,
    pub sigmas: Vec<Vec<f64>>,
}

impl GmmParams {
    pub fn new(alphas: Vec<f64>, mus: Vec<Vec<f64>>, sigmas: Vec<Vec<f64>>) -> Result<Self> {
        let p = GmmParams { alphas, mus, sigmas };
        p.validate()?;
        Ok(p)
    }

    /// Maps unconstrained network outputs onto a valid mixture.
    pub fn from_unconstrained(
        logits: &[f64],
        mus: Vec<Vec<f64>>,
        log_sigmas: &[Vec<f64>],
    ) -> Result<Self> {
        let alphas = softmax(logits);
        let sigmas = log_sigmas
            .iter()
            .map(|row| row.iter().map(|s| s.exp()).collect())
            .collect();
        GmmParams::new(alphas, mus, sigmas)
    }

    /// Single component.
    pub fn unimodal(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        GmmParams::new(vec![1.0], vec![mu], vec![sigma])
    }

    pub fn k(&self) -> usize {
        self.alphas.len()
    }

    pub fn dim(&self) -> usize {
        self.mus.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.alphas.len();
        if k == 0 {
            return Err(MdnError::InvalidParams("no components".into()));
        }
        if self.mus.len() != k || self.sigmas.len() != k {
            return Err(MdnError::InvalidParams(format!(
                "{} weights but {} mean rows and {} sigma rows",
                k,
                self.mus.len(),
                self.sigmas.len()
            )));
        }
        let d = self.dim();
        if d == 0 {
            return Err(MdnError::InvalidParams("zero-dimensional components".into()));
        }
        if self.mus.iter().chain(&self.sigmas).any(|row| row.len() != d) {
            return Err(MdnError::InvalidParams("ragged mean/sigma rows".into()));
        }
        if self.alphas.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(MdnError::InvalidParams("negative or non-finite weight".into()));
        }
        let total: f64 = self.alphas.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MdnError::InvalidParams(format!("weights sum to {total}")));
        }
        if self.sigmas.iter().flatten().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(MdnError::InvalidParams("sigma must be finite and positive".into()));
        }
        if self.mus.iter().flatten().any(|m| !m.is_finite()) {
            return Err(MdnError::InvalidParams("non-finite mean".into()));
        }
        Ok(())
    }

    /// Index of the heaviest component; ties go to the lowest index.
    pub fn dominant(&self) -> usize {
        let mut best = 0;
        for (k, a) in self.alphas.iter().enumerate().skip(1) {
            if *a > self.alphas[best] {
                best = k;
            }
        }
        best
    }

    fn check_target(&self, target: &[f64]) -> Result<()> {
        if target.len() != self.dim() {
            return Err(MdnError::DimensionMismatch {
                expected: self.dim(),
                got: target.len(),
            });
        }
        if target.iter().any(|v| !v.is_finite()) {
            return Err(MdnError::InvalidParams("non-finite target".into()));
        }
        Ok(())
    }

    /// Per-component `log α_k + Σ_d log N(y_d | μ_kd, σ_kd²)`.
    fn component_log_joint(&self, target: &[f64]) -> Vec<f64> {
        self.alphas
            .iter()
            .zip(self.mus.iter().zip(&self.sigmas))
            .map(|(a, (mu, sig))| {
                let ll: f64 = target
                    .iter()
                    .zip(mu.iter().zip(sig))
                    .map(|(y, (m, s))| {
                        let z = (y - m) / s;
                        -0.5 * z * z - s.ln() - 0.5 * LN_2PI
                    })
                    .sum();
                a.ln() + ll
            })
            .collect()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Negative log-likelihood of `target` under the mixture.
pub fn gmm_nll(params: &GmmParams, target: &[f64]) -> Result<f64> {
    params.validate()?;
    params.check_target(target)?;
    Ok(-log_sum_exp(&params.component_log_joint(target)))
}

/// Gradient of [`gmm_nll`] in the unconstrained parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmGrad {
    pub logits: Vec<f64>,
    pub mus: Vec<Vec<f64>>,
    pub log_sigmas: Vec<Vec<f64>>,
}

/// NLL together with its gradient w.r.t. (softmax logits, means, log σ).
pub fn gmm_nll_grad(params: &GmmParams, target: &[f64]) -> Result<(f64, GmmGrad)> {
    params.validate()?;
    params.check_target(target)?;
    let lj = params.component_log_joint(target);
    let lse = log_sum_exp(&lj);
    let resp: Vec<f64> = lj.iter().map(|l| (l - lse).exp()).collect();

    let logits = params
        .alphas
        .iter()
        .zip(&resp)
        .map(|(a, g)| a - g)
        .collect();
    let mut mus = Vec::with_capacity(params.k());
    let mut log_sigmas = Vec::with_capacity(params.k());
    for (k, g) in resp.iter().enumerate() {
        let mut dmu = Vec::with_capacity(target.len());
        let mut dls = Vec::with_capacity(target.len());
        for (d, y) in target.iter().enumerate() {
            let s = params.sigmas[k][d];
            let z = (y - params.mus[k][d]) / s;
            dmu.push(-g * z / s);
            dls.push(g * (1.0 - z * z));
        }
        mus.push(dmu);
        log_sigmas.push(dls);
    }
    Ok((
        -lse,
        GmmGrad {
            logits,
            mus,
            log_sigmas,
        },
    ))
}

fn check_pose_heads(trans: &GmmParams, rot: &GmmParams) -> Result<()> {
    trans.validate()?;
    rot.validate()?;
    for p in [trans, rot] {
        if p.dim() != 3 {
            return Err(MdnError::DimensionMismatch {
                expected: 3,
                got: p.dim(),
            });
        }
    }
    Ok(())
}

fn draw_component<R: Rng + ?Sized>(alphas: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, a) in alphas.iter().enumerate() {
        acc += a;
        if u < acc {
            return k;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    alphas.iter().rposition(|a| *a > 0.0).unwrap_or(0)
}

fn draw_axes<R: Rng + ?Sized>(p: &GmmParams, rng: &mut R) -> (Vector3<f64>, Vector3<f64>) {
    let k = draw_component(&p.alphas, rng);
    let mut v = Vector3::zeros();
    let mut var = Vector3::zeros();
    for d in 0..3 {
        let z: f64 = rng.sample(StandardNormal);
        v[d] = p.mus[k][d] + p.sigmas[k][d] * z;
        var[d] = p.sigmas[k][d] * p.sigmas[k][d];
    }
    (v, var)
}

/// Draws a pose from independent translation and rotation mixtures.
///
/// Returns the pose and the per-axis variances of the components that were
/// selected, ordered `[tx, ty, tz, roll, pitch, yaw]`.
pub fn sample_pose<R: Rng + ?Sized>(
    trans: &GmmParams,
    rot: &GmmParams,
    rng: &mut R,
) -> Result<(Pose6, Vector6<f64>)> {
    check_pose_heads(trans, rot)?;
    let (t, vt) = draw_axes(trans, rng);
    let (r, vr) = draw_axes(rot, rng);
    Ok((
        Pose6::new(t, r).normalized(),
        Vector6::new(vt.x, vt.y, vt.z, vr.x, vr.y, vr.z),
    ))
}

/// Mean and variance of the dominant component of each head.
pub fn mode_pose(trans: &GmmParams, rot: &GmmParams) -> Result<(Pose6, Vector6<f64>)> {
    check_pose_heads(trans, rot)?;
    let kt = trans.dominant();
    let kr = rot.dominant();
    let t = Vector3::from_column_slice(&trans.mus[kt]);
    let r = Vector3::from_column_slice(&rot.mus[kr]);
    let mut var = Vector6::zeros();
    for d in 0..3 {
        var[d] = trans.sigmas[kt][d].powi(2);
        var[d + 3] = rot.sigmas[kr][d].powi(2);
    }
    Ok((Pose6::new(t, r).normalized(), var))
}

/// Per-dimension mean and variance of a mixture (law of total variance).
pub fn mixture_moments(p: &GmmParams) -> (Vec<f64>, Vec<f64>) {
    let dim = p.dim();
    let mut mean = vec![0.0; dim];
    let mut var = vec![0.0; dim];
    for d in 0..dim {
        mean[d] = (0..p.k()).map(|c| p.alphas[c] * p.mus[c][d]).sum();
        var[d] = (0..p.k())
            .map(|c| p.alphas[c] * (p.sigmas[c][d].powi(2) + (p.mus[c][d] - mean[d]).powi(2)))
            .sum();
    }
    (mean, var)
}

/// Mixture mean and total per-axis variance of each head. Euler angles are
/// averaged componentwise, which suits the small per-step rotations
/// regressed here.
pub fn mixture_mean_pose(trans: &GmmParams, rot: &GmmParams) -> Result<(Pose6, Vector6<f64>)> {
    check_pose_heads(trans, rot)?;
    let (mt, vt) = mixture_moments(trans);
    let (mr, vr) = mixture_moments(rot);
    Ok((
        Pose6::new(Vector3::from_column_slice(&mt), Vector3::from_column_slice(&mr)).normalized(),
        Vector6::new(vt[0], vt[1], vt[2], vr[0], vr[1], vr[2]),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuberConfig {
    pub delta: f64,
}

impl Default for HuberConfig {
    fn default() -> Self {
        HuberConfig { delta: 1.0 }
    }
}

/// Mean Huber penalty over the elements of `xi`.
pub fn huber(xi: &[f64], cfg: &HuberConfig) -> f64 {
    if xi.is_empty() {
        return 0.0;
    }
    let d = cfg.delta;
    let total: f64 = xi
        .iter()
        .map(|x| {
            let a = x.abs();
            if a <= d {
                0.5 * a * a
            } else {
                d * (a - 0.5 * d)
            }
        })
        .sum();
    total / xi.len() as f64
}

/// Weighting of the pose loss and the number of mixture components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MdnLossConfig {
    /// Weight of the rotation NLL relative to translation.
    pub beta: f64,
    /// Components per head.
    pub k: usize,
}

impl Default for MdnLossConfig {
    fn default() -> Self {
        MdnLossConfig { beta: 100.0, k: 10 }
    }
}

impl MdnLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(MdnError::InvalidParams(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.k == 0 {
            return Err(MdnError::InvalidParams("K must be at least 1".into()));
        }
        Ok(())
    }
}

/// Translation NLL plus `beta` times rotation NLL.
pub fn mdn_pose_loss(
    trans: &GmmParams,
    rot: &GmmParams,
    target: &Pose6,
    cfg: &MdnLossConfig,
) -> Result<f64> {
    cfg.validate()?;
    let lt = gmm_nll(trans, target.t.as_slice())?;
    let lr = gmm_nll(rot, target.r.as_slice())?;
    Ok(lt + cfg.beta * lr)
}
