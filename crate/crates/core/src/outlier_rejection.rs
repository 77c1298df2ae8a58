//! Pairwise sub-loop consistency checks for loop proposals.
//!
//! Two loop proposals plus the odometry between their endpoints form a closed
//! cycle. If both loops are correct the cycle composes to (nearly) identity;
//! the residual is gated with a χ² test whose covariance is propagated to
//! first order through the cycle. Each proposal is paired with a seeded random
//! sample of others and kept when its pass rate reaches the threshold.

use std::collections::BTreeSet;

use nalgebra::{Matrix6, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Pose6, Transform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RejectionError {
    #[error("frame index {index} out of range for {n_frames} frames")]
    IndexOutOfRange { index: usize, n_frames: usize },
    #[error("odometry and covariance lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, RejectionError>;

/// Cycle residual norms below this are floating-point round-off.
pub const CLOSURE_TOLERANCE: f64 = 1e-9;

/// Candidate loop: `rel` is the pose of frame `j` in frame `i`'s coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopProposal {
    pub i: usize,
    pub j: usize,
    pub rel: Pose6,
    /// Per-axis variance (m², rad²).
    pub cov: Vector6<f64>,
    /// Detection discrepancy (0 when not produced by place recognition).
    pub score: f64,
}

impl LoopProposal {
    /// Stores the pair with `i < j`, inverting `rel` if the frames arrive swapped.
    pub fn new(i: usize, j: usize, rel: Pose6, cov: Vector6<f64>, score: f64) -> Self {
        if i <= j {
            LoopProposal { i, j, rel, cov, score }
        } else {
            let inv = Pose6::from_transform(&rel.to_transform().inverse()).unwrap_or(rel);
            LoopProposal { i: j, j: i, rel: inv, cov, score }
        }
    }
}

/// How cycle-residual covariance is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariancePropagation {
    /// First-order propagation of every factor through the cycle (adjoint maps).
    #[default]
    Adjoint,
    /// Plain sum of the per-factor diagonal covariances, ignoring frame changes.
    DiagonalSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RejectionConfig {
    pub chi2_threshold: f64,
    pub pass_rate_threshold: f64,
    pub max_pairings_per_proposal: usize,
    pub seed: u64,
    pub propagation: CovariancePropagation,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        RejectionConfig {
            chi2_threshold: 12.59,
            pass_rate_threshold: 0.5,
            max_pairings_per_proposal: 10,
            seed: 0,
            propagation: CovariancePropagation::Adjoint,
        }
    }
}

impl RejectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.chi2_threshold > 0.0) {
            return Err(RejectionError::InvalidConfig("chi2_threshold must be > 0".into()));
        }
        if !(self.pass_rate_threshold > 0.0 && self.pass_rate_threshold <= 1.0) {
            return Err(RejectionError::InvalidConfig("pass_rate_threshold must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Odometry chain with prefix products and prefix-summed propagated
/// covariances, so any segment's pose and covariance cost O(1).
#[derive(Debug, Clone)]
pub struct OdomChain {
    /// `prefix[k]` = pose of frame k in frame 0.
    prefix: Vec<Transform>,
    /// `cov_sum[k] = Σ_{m<k} Ad(W_{m+1}) Σ_m Ad(W_{m+1})ᵀ`.
    cov_sum: Vec<Matrix6<f64>>,
    /// `diag_sum[k] = Σ_{m<k} Σ_m`.
    diag_sum: Vec<Vector6<f64>>,
}

impl OdomChain {
    /// `odom[k]` is the measured pose of frame k+1 in frame k.
    pub fn new(odom: &[Pose6], cov: &[Vector6<f64>]) -> Result<Self> {
        if odom.len() != cov.len() {
            return Err(RejectionError::LengthMismatch(odom.len(), cov.len()));
        }
        let mut prefix = Vec::with_capacity(odom.len() + 1);
        let mut cov_sum = Vec::with_capacity(odom.len() + 1);
        let mut diag_sum = Vec::with_capacity(odom.len() + 1);
        prefix.push(Transform::identity());
        cov_sum.push(Matrix6::zeros());
        diag_sum.push(Vector6::zeros());
        for (k, (o, c)) in odom.iter().zip(cov).enumerate() {
            let w = prefix[k].compose(&o.to_transform());
            let ad = w.adjoint();
            cov_sum.push(cov_sum[k] + ad * Matrix6::from_diagonal(c) * ad.transpose());
            diag_sum.push(diag_sum[k] + c);
            prefix.push(w);
        }
        Ok(OdomChain { prefix, cov_sum, diag_sum })
    }

    /// Chain without covariance information (residuals only).
    pub fn from_poses(odom: &[Pose6]) -> Result<Self> {
        OdomChain::new(odom, &vec![Vector6::zeros(); odom.len()])
    }

    pub fn n_frames(&self) -> usize {
        self.prefix.len()
    }

    fn check(&self, index: usize) -> Result<()> {
        if index >= self.prefix.len() {
            return Err(RejectionError::IndexOutOfRange { index, n_frames: self.prefix.len() });
        }
        Ok(())
    }

    /// Pose of frame `q` in frame `p`; reverse segments use inverted odometry.
    pub fn path(&self, p: usize, q: usize) -> Result<Transform> {
        self.check(p)?;
        self.check(q)?;
        Ok(self.prefix[p].relative(&self.prefix[q]))
    }

    /// Right-perturbation covariance of [`OdomChain::path`].
    fn path_cov(&self, p: usize, q: usize) -> Matrix6<f64> {
        if p <= q {
            let ad_inv = self.prefix[q].inverse().adjoint();
            ad_inv * (self.cov_sum[q] - self.cov_sum[p]) * ad_inv.transpose()
        } else {
            // inverse of the forward segment q → p
            let fwd = self.path_cov(q, p);
            let ad = self.prefix[q].relative(&self.prefix[p]).adjoint();
            ad * fwd * ad.transpose()
        }
    }

    fn diag_between(&self, p: usize, q: usize) -> Vector6<f64> {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        self.diag_sum[hi] - self.diag_sum[lo]
    }
}

fn canonical<'a>(a: &'a LoopProposal, b: &'a LoopProposal) -> (&'a LoopProposal, &'a LoopProposal) {
    if (a.i, a.j) <= (b.i, b.j) {
        (a, b)
    } else {
        (b, a)
    }
}

/// Factors of the cycle `a.i → a.j → b.j → b.i → a.i` with their
/// right-perturbation covariances.
fn cycle_factors(a: &LoopProposal, b: &LoopProposal, chain: &OdomChain) -> Result<[(Transform, Matrix6<f64>); 4]> {
    for idx in [a.i, a.j, b.i, b.j] {
        chain.check(idx)?;
    }
    let la = a.rel.to_transform();
    let lb = b.rel.to_transform();
    let lb_inv = lb.inverse();
    let ad_lb = lb.adjoint();
    Ok([
        (la, Matrix6::from_diagonal(&a.cov)),
        (chain.path(a.j, b.j)?, chain.path_cov(a.j, b.j)),
        (lb_inv, ad_lb * Matrix6::from_diagonal(&b.cov) * ad_lb.transpose()),
        (chain.path(b.i, a.i)?, chain.path_cov(b.i, a.i)),
    ])
}

fn compose_cycle(f: &[(Transform, Matrix6<f64>); 4]) -> Transform {
    f[0].0.compose(&f[1].0).compose(&f[2].0).compose(&f[3].0)
}

/// Cycle error as `(translation, wrapped Euler)`; zero for consistent inputs.
/// The pair is put in canonical order first, so argument order is irrelevant.
pub fn cycle_residual(a: &LoopProposal, b: &LoopProposal, chain: &OdomChain) -> Result<Vector6<f64>> {
    let (a, b) = canonical(a, b);
    let f = cycle_factors(a, b, chain)?;
    Ok(Pose6::from_transform(&compose_cycle(&f))?.to_vector())
}

/// Squared Mahalanobis norm of the cycle residual.
pub fn cycle_mahalanobis(a: &LoopProposal, b: &LoopProposal, chain: &OdomChain, propagation: CovariancePropagation) -> Result<f64> {
    let (a, b) = canonical(a, b);
    let f = cycle_factors(a, b, chain)?;
    let r = Pose6::from_transform(&compose_cycle(&f))?.to_vector();
    // closure at round-off level counts as exact, even with zero covariance
    if r.norm() <= CLOSURE_TOLERANCE {
        return Ok(0.0);
    }
    let cov = match propagation {
        CovariancePropagation::Adjoint => {
            // δ = Σ_k Ad(T_k⁻¹) ε_k with T_k the product of the factors after k
            let mut total = Matrix6::zeros();
            let mut suffix = Transform::identity();
            for (tf, c) in f.iter().rev() {
                let ad = suffix.inverse().adjoint();
                total += ad * c * ad.transpose();
                suffix = tf.compose(&suffix);
            }
            total
        }
        CovariancePropagation::DiagonalSum => Matrix6::from_diagonal(
            &(a.cov + b.cov + chain.diag_between(a.j, b.j) + chain.diag_between(b.i, a.i)),
        ),
    };
    // a nonzero residual under a degenerate covariance is infinitely unlikely
    Ok(cov.cholesky().map_or(f64::INFINITY, |chol| r.dot(&chol.solve(&r))))
}

/// χ² gate on one pairing.
pub fn consistency_test(a: &LoopProposal, b: &LoopProposal, chain: &OdomChain, cfg: &RejectionConfig) -> Result<bool> {
    Ok(cycle_mahalanobis(a, b, chain, cfg.propagation)? <= cfg.chi2_threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionResult {
    pub inliers: Vec<LoopProposal>,
    pub outliers: Vec<LoopProposal>,
    /// Parallel to the input proposals.
    pub pass_rates: Vec<f64>,
    /// Parallel to the input proposals.
    pub is_inlier: Vec<bool>,
}

impl RejectionResult {
    /// CSV with header `i,j,pass_rate,verdict`, in input order.
    pub fn to_csv(&self, proposals: &[LoopProposal]) -> String {
        let mut s = String::from("i,j,pass_rate,verdict\n");
        for ((p, r), ok) in proposals.iter().zip(&self.pass_rates).zip(&self.is_inlier) {
            s.push_str(&format!("{},{},{:?},{}\n", p.i, p.j, r, if *ok { "inlier" } else { "outlier" }));
        }
        s
    }
}

/// Unordered pairings, sampled up front from the seed.
pub fn pairing_schedule(n: usize, cfg: &RejectionConfig) -> Vec<(usize, usize)> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut pairs = BTreeSet::new();
    if n < 2 {
        return vec![];
    }
    for p in 0..n {
        let m = cfg.max_pairings_per_proposal.min(n - 1);
        for k in sample(&mut rng, n - 1, m) {
            let q = if k >= p { k + 1 } else { k };
            pairs.insert((p.min(q), p.max(q)));
        }
    }
    pairs.into_iter().collect()
}

/// Tests each proposal against a seeded sample of partners and keeps those
/// whose pass rate reaches `pass_rate_threshold`.
pub fn filter_proposals(proposals: &[LoopProposal], chain: &OdomChain, cfg: &RejectionConfig) -> Result<RejectionResult> {
    cfg.validate()?;
    let n = proposals.len();
    if n < 2 {
        if n == 1 {
            log::warn!("only one loop proposal; accepting it without a consistency check");
        }
        return Ok(RejectionResult {
            inliers: proposals.to_vec(),
            outliers: vec![],
            pass_rates: vec![1.0; n],
            is_inlier: vec![true; n],
        });
    }
    let mut passes = vec![0usize; n];
    let mut trials = vec![0usize; n];
    for (p, q) in pairing_schedule(n, cfg) {
        let ok = consistency_test(&proposals[p], &proposals[q], chain, cfg)?;
        for x in [p, q] {
            trials[x] += 1;
            passes[x] += ok as usize;
        }
    }
    let pass_rates: Vec<f64> = passes
        .iter()
        .zip(&trials)
        .map(|(&p, &t)| if t == 0 { 0.0 } else { p as f64 / t as f64 })
        .collect();
    let is_inlier: Vec<bool> = pass_rates.iter().map(|r| *r >= cfg.pass_rate_threshold).collect();
    let (mut inliers, mut outliers) = (vec![], vec![]);
    for (p, ok) in proposals.iter().zip(&is_inlier) {
        if *ok {
            inliers.push(*p);
        } else {
            outliers.push(*p);
        }
    }
    Ok(RejectionResult { inliers, outliers, pass_rates, is_inlier })
}
