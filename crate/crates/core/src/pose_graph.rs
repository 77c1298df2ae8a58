//! Pose-graph back end: odometry and loop factors over `Pose6` states,
//! minimized with Levenberg–Marquardt.
//!
//! Every factor has the residual `e = relative(x_i ⊕ z, x_j)` as a 6-vector
//! (translation, wrapped Euler angles) and the weight
//! `Ω = scale · diag(1/cov)`, with `scale = varrho` for odometry and `rho` for
//! loops. States are updated additively on the 6-vector parameterization and
//! re-wrapped; Jacobians are central differences. The damped normal equations
//! are solved with a sparse Cholesky factorization.

use nalgebra::{DMatrix, DVector, SMatrix, Vector6};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Pose6};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseGraphError {
    #[error("graph is disconnected; nodes not linked to the anchor: {orphans:?}")]
    Disconnected { orphans: Vec<usize> },
    #[error("factor references node {index} but the graph has {n_nodes} nodes")]
    IndexOutOfRange { index: usize, n_nodes: usize },
    #[error("covariance entries must be finite and > 0 (factor {factor})")]
    InvalidCovariance { factor: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("optimization diverged (non-finite cost)")]
    Diverged,
    #[error("linear solve failed: {0}")]
    Solve(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, PoseGraphError>;

/// Finite-difference step for Jacobians.
pub const JACOBIAN_STEP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdomFactor {
    /// Connects node `i` to node `i + 1`.
    pub i: usize,
    pub meas: Pose6,
    pub cov: Vector6<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopFactor {
    pub i: usize,
    pub j: usize,
    pub meas: Pose6,
    pub cov: Vector6<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorGraph {
    pub nodes: Vec<Pose6>,
    pub odometry: Vec<OdomFactor>,
    pub loops: Vec<LoopFactor>,
    /// Gauge-fixed node, never moved by the optimizer.
    pub anchor: usize,
}

impl FactorGraph {
    /// Graph whose nodes are initialized by dead reckoning from `x0`.
    pub fn from_odometry(x0: Pose6, meas: &[Pose6], cov: &[Vector6<f64>]) -> Result<Self> {
        if meas.len() != cov.len() {
            return Err(PoseGraphError::InvalidConfig(format!(
                "{} odometry measurements but {} covariances",
                meas.len(),
                cov.len()
            )));
        }
        let nodes = compose_dead_reckoning(meas, x0)?;
        let odometry = meas
            .iter()
            .zip(cov)
            .enumerate()
            .map(|(i, (m, c))| OdomFactor { i, meas: *m, cov: *c })
            .collect();
        Ok(FactorGraph { nodes, odometry, loops: vec![], anchor: 0 })
    }

    pub fn add_loop(&mut self, i: usize, j: usize, meas: Pose6, cov: Vector6<f64>) {
        self.loops.push(LoopFactor { i, j, meas, cov });
    }

    fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.odometry
            .iter()
            .map(|f| (f.i, f.i + 1))
            .chain(self.loops.iter().map(|f| (f.i, f.j)))
    }

    /// Structural checks: indices, covariances and connectivity to the anchor.
    pub fn validate(&self) -> Result<()> {
        let n = self.nodes.len();
        if self.anchor >= n {
            return Err(PoseGraphError::IndexOutOfRange { index: self.anchor, n_nodes: n });
        }
        for (a, b) in self.edges() {
            for index in [a, b] {
                if index >= n {
                    return Err(PoseGraphError::IndexOutOfRange { index, n_nodes: n });
                }
            }
        }
        let bad_cov = |c: &Vector6<f64>| c.iter().any(|v| !(*v > 0.0 && v.is_finite()));
        if let Some(f) = self.odometry.iter().find(|f| bad_cov(&f.cov)) {
            return Err(PoseGraphError::InvalidCovariance { factor: format!("odometry {}", f.i) });
        }
        if let Some(f) = self.loops.iter().find(|f| bad_cov(&f.cov)) {
            return Err(PoseGraphError::InvalidCovariance { factor: format!("loop ({}, {})", f.i, f.j) });
        }
        // union-find
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for (a, b) in self.edges() {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
            }
        }
        let root = find(&mut parent, self.anchor);
        let orphans: Vec<usize> = (0..n).filter(|&k| find(&mut parent, k) != root).collect();
        if !orphans.is_empty() {
            return Err(PoseGraphError::Disconnected { orphans });
        }
        Ok(())
    }
}

/// Whether ϱ/ρ multiply the information matrix or the covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleConvention {
    /// `Ω = scale · Σ⁻¹`: a larger scale means a stiffer constraint.
    #[default]
    Information,
    /// `Ω = (scale · Σ)⁻¹`.
    Covariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub varrho: f64,
    pub rho: f64,
    pub max_iterations: usize,
    pub lm_lambda_init: f64,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    pub convergence_tol: f64,
    pub scale_convention: ScaleConvention,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            varrho: 0.01,
            rho: 3.0,
            max_iterations: 100,
            lm_lambda_init: 1e-4,
            convergence_tol: 1e-10,
            scale_convention: ScaleConvention::Information,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.varrho > 0.0 && self.rho > 0.0 && self.varrho.is_finite() && self.rho.is_finite()) {
            return Err(PoseGraphError::InvalidConfig("varrho and rho must be finite and > 0".into()));
        }
        if !(self.lm_lambda_init > 0.0) {
            return Err(PoseGraphError::InvalidConfig("lm_lambda_init must be > 0".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(PoseGraphError::InvalidConfig("convergence_tol must be >= 0".into()));
        }
        Ok(())
    }

    fn weights(&self, cov: &Vector6<f64>, scale: f64) -> Vector6<f64> {
        match self.scale_convention {
            ScaleConvention::Information => cov.map(|c| scale / c),
            ScaleConvention::Covariance => cov.map(|c| 1.0 / (scale * c)),
        }
    }
}

/// `relative(pred_from ⊕ measurement, state_to)` as a 6-vector.
pub fn factor_residual(pred_from: &Pose6, measurement: &Pose6, state_to: &Pose6) -> Result<Vector6<f64>> {
    let pred = pred_from.to_transform().compose(&measurement.to_transform());
    let err = pred.relative(&state_to.to_transform());
    Ok(Pose6::from_transform(&err)?.to_vector())
}

/// Cumulative composition of relative motions starting at `x0`.
pub fn compose_dead_reckoning(odometry: &[Pose6], x0: Pose6) -> Result<Vec<Pose6>> {
    let mut out = Vec::with_capacity(odometry.len() + 1);
    let mut tf = x0.to_transform();
    out.push(x0);
    for u in odometry {
        tf = tf.compose(&u.to_transform());
        out.push(Pose6::from_transform(&tf)?);
    }
    Ok(out)
}

/// One factor in uniform form.
struct Term {
    i: usize,
    j: usize,
    meas: Pose6,
    /// Diagonal of Ω.
    w: Vector6<f64>,
}

fn terms(graph: &FactorGraph, cfg: &BackendConfig) -> Vec<Term> {
    graph
        .odometry
        .iter()
        .map(|f| Term { i: f.i, j: f.i + 1, meas: f.meas, w: cfg.weights(&f.cov, cfg.varrho) })
        .chain(graph.loops.iter().map(|f| Term { i: f.i, j: f.j, meas: f.meas, w: cfg.weights(&f.cov, cfg.rho) }))
        .collect()
}

fn cost_of(nodes: &[Pose6], terms: &[Term]) -> Result<f64> {
    let mut total = 0.0;
    for t in terms {
        let e = factor_residual(&nodes[t.i], &t.meas, &nodes[t.j])?;
        total += e.component_mul(&e).dot(&t.w);
    }
    Ok(total)
}

/// Σ eᵀ Ω̂ e over all factors at the graph's current node values.
pub fn total_cost(graph: &FactorGraph, cfg: &BackendConfig) -> Result<f64> {
    cfg.validate()?;
    graph.validate()?;
    cost_of(&graph.nodes, &terms(graph, cfg))
}

fn perturbed(p: &Pose6, k: usize, h: f64) -> Pose6 {
    let mut v = p.to_vector();
    v[k] += h;
    Pose6::from_vector(&v)
}

/// Central-difference Jacobians of a factor residual w.r.t. both endpoint states.
pub fn numeric_jacobians(from: &Pose6, meas: &Pose6, to: &Pose6) -> Result<(SMatrix<f64, 6, 6>, SMatrix<f64, 6, 6>)> {
    let h = JACOBIAN_STEP;
    let mut ja = SMatrix::<f64, 6, 6>::zeros();
    let mut jb = SMatrix::<f64, 6, 6>::zeros();
    let base = factor_residual(from, meas, to)?;
    // Euler components wrap at ±π; keep differences on the branch of the base residual.
    let diff = |p: Vector6<f64>, m: Vector6<f64>| -> Vector6<f64> {
        let mut d = p - m;
        for r in 3..6 {
            d[r] = crate::geometry::angle_diff(p[r], base[r]) - crate::geometry::angle_diff(m[r], base[r]);
        }
        d / (2.0 * h)
    };
    for k in 0..6 {
        let p = factor_residual(&perturbed(from, k, h), meas, to)?;
        let m = factor_residual(&perturbed(from, k, -h), meas, to)?;
        ja.set_column(k, &diff(p, m));
        let p = factor_residual(from, meas, &perturbed(to, k, h))?;
        let m = factor_residual(from, meas, &perturbed(to, k, -h))?;
        jb.set_column(k, &diff(p, m));
    }
    Ok((ja, jb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub states: Vec<Pose6>,
    /// Cost at the start and after every accepted step.
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Variable slot of each node; the anchor has none.
fn slots(n: usize, anchor: usize) -> Vec<Option<usize>> {
    let mut next = 0;
    (0..n)
        .map(|k| {
            if k == anchor {
                None
            } else {
                next += 1;
                Some(next - 1)
            }
        })
        .collect()
}

struct Normal {
    /// Block triplets of the (undamped) Hessian approximation.
    coo: Vec<(usize, usize, f64)>,
    gradient: DVector<f64>,
    diag: DVector<f64>,
}

fn build_normal(nodes: &[Pose6], terms: &[Term], slot: &[Option<usize>], n_vars: usize) -> Result<Normal> {
    let mut coo = Vec::with_capacity(terms.len() * 144);
    let mut gradient = DVector::zeros(n_vars);
    let mut diag = DVector::zeros(n_vars);
    for t in terms {
        let e = factor_residual(&nodes[t.i], &t.meas, &nodes[t.j])?;
        let (ja, jb) = numeric_jacobians(&nodes[t.i], &t.meas, &nodes[t.j])?;
        let om = SMatrix::<f64, 6, 6>::from_diagonal(&t.w);
        let blocks = [(slot[t.i], ja), (slot[t.j], jb)];
        for (sa, ja_) in &blocks {
            let Some(a) = sa else { continue };
            let g = ja_.transpose() * om * e;
            for r in 0..6 {
                gradient[6 * a + r] += g[r];
            }
            for (sb, jb_) in &blocks {
                let Some(b) = sb else { continue };
                let h = ja_.transpose() * om * jb_;
                for r in 0..6 {
                    for c in 0..6 {
                        coo.push((6 * a + r, 6 * b + c, h[(r, c)]));
                        if a == b && r == c {
                            diag[6 * a + r] += h[(r, c)];
                        }
                    }
                }
            }
        }
    }
    Ok(Normal { coo, gradient, diag })
}

fn solve_damped(normal: &Normal, lambda: f64, n_vars: usize) -> Result<DVector<f64>> {
    let mut coo = CooMatrix::new(n_vars, n_vars);
    for &(r, c, v) in &normal.coo {
        coo.push(r, c, v);
    }
    for k in 0..n_vars {
        coo.push(k, k, lambda * normal.diag[k].max(1e-12));
    }
    let csc = CscMatrix::from(&coo);
    let chol = CscCholesky::factor(&csc).map_err(|e| PoseGraphError::Solve(format!("{e:?}")))?;
    let rhs = DMatrix::from_column_slice(n_vars, 1, (-&normal.gradient).as_slice());
    let sol = chol.solve(&rhs);
    Ok(DVector::from_column_slice(sol.as_slice()))
}

fn apply_step(nodes: &[Pose6], delta: &DVector<f64>, slot: &[Option<usize>]) -> Vec<Pose6> {
    nodes
        .iter()
        .zip(slot)
        .map(|(p, s)| match s {
            None => *p,
            Some(a) => {
                let d = Vector6::from_fn(|r, _| delta[6 * a + r]);
                Pose6::from_vector(&(p.to_vector() + d)).normalized()
            }
        })
        .collect()
}

/// Levenberg–Marquardt on the graph, starting from its current node values.
pub fn optimize(graph: &FactorGraph, cfg: &BackendConfig) -> Result<OptimizeResult> {
    cfg.validate()?;
    graph.validate()?;
    let terms = terms(graph, cfg);
    let slot = slots(graph.nodes.len(), graph.anchor);
    let n_vars = 6 * (graph.nodes.len() - 1);
    let mut nodes = graph.nodes.clone();
    let mut cost = cost_of(&nodes, &terms)?;
    if !cost.is_finite() {
        return Err(PoseGraphError::Diverged);
    }
    let mut trace = vec![cost];
    let mut lambda = cfg.lm_lambda_init;
    let mut converged = cost == 0.0 || n_vars == 0;
    let mut iterations = 0;
    while !converged && iterations < cfg.max_iterations {
        iterations += 1;
        let normal = build_normal(&nodes, &terms, &slot, n_vars)?;
        // inner loop: raise damping until a step is accepted
        let mut accepted = false;
        while !accepted {
            let delta = match solve_damped(&normal, lambda, n_vars) {
                Ok(d) => d,
                Err(_) => {
                    lambda *= 10.0;
                    if lambda > 1e16 {
                        break;
                    }
                    continue;
                }
            };
            let candidate = apply_step(&nodes, &delta, &slot);
            let new_cost = cost_of(&candidate, &terms)?;
            if !new_cost.is_finite() {
                return Err(PoseGraphError::Diverged);
            }
            if new_cost < cost {
                let rel = (cost - new_cost) / cost;
                nodes = candidate;
                cost = new_cost;
                trace.push(cost);
                lambda = (lambda * 0.5).max(1e-12);
                accepted = true;
                if rel < cfg.convergence_tol || cost == 0.0 {
                    converged = true;
                }
            } else {
                lambda *= 10.0;
                if lambda > 1e16 {
                    break;
                }
            }
        }
        if !accepted {
            // trust region collapsed: no descent direction left at this precision
            converged = true;
        }
    }
    Ok(OptimizeResult { states: nodes, cost_trace: trace, iterations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{RotMat, Transform};
    use crate::metrics::{ate, Alignment};
    use crate::simulator::{generate, WorldSpec};
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig, Strategy};

    fn pose(t: [f64; 3], r: [f64; 3]) -> Pose6 {
        Pose6::new(Vector3::from(t), Vector3::from(r))
    }

    fn pose_strategy() -> impl Strategy<Value = Pose6> {
        (
            -5.0f64..5.0,
            -5.0f64..5.0,
            -5.0f64..5.0,
            -1.0f64..1.0,
            -1.2f64..1.2,
            -3.0f64..3.0,
        )
            .prop_map(|(x, y, z, a, b, c)| pose([x, y, z], [a, b, c]))
    }

    #[test]
    fn residual_examples() {
        let u = Pose6::from_translation(1.0, 0.0, 0.0);
        assert_eq!(factor_residual(&Pose6::identity(), &u, &u).unwrap(), Vector6::zeros());
        let e = factor_residual(&Pose6::identity(), &u, &Pose6::from_translation(2.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(Vector3::new(e[0], e[1], e[2]).norm(), 1.0, epsilon = 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn residual_matches_geometry_oracle(a in pose_strategy(), u in pose_strategy(), b in pose_strategy()) {
            let e = factor_residual(&a, &u, &b).unwrap();
            let oracle = a.compose(&u).unwrap().relative(&b).unwrap().to_vector();
            for k in 0..3 {
                prop_assert!((e[k] - oracle[k]).abs() < 1e-9);
            }
            for k in 3..6 {
                prop_assert!(crate::geometry::angle_diff(e[k], oracle[k]).abs() < 1e-9);
            }
        }

        #[test]
        fn dead_reckoning_equals_fold(steps in proptest::collection::vec(pose_strategy(), 0..12), seed in any::<u8>()) {
            let x0 = pose([seed as f64 * 0.1, 0.0, 0.0], [0.0, 0.0, 0.3]);
            let tr = compose_dead_reckoning(&steps, x0).unwrap();
            prop_assert!(tr.len() == steps.len() + 1);
            let mut acc = x0.to_transform();
            for s in &steps {
                acc = acc.compose(&s.to_transform());
            }
            let last = tr.last().unwrap().to_transform();
            prop_assert!((last.t - acc.t).norm() < 1e-9);
            prop_assert!(RotMat(last.rot.0.transpose() * acc.rot.0).angle() < 1e-9);
        }
    }

    #[test]
    fn dead_reckoning_examples() {
        let x0 = pose([1.0, 2.0, 3.0], [0.0, 0.0, 0.0]);
        assert_eq!(compose_dead_reckoning(&[], x0).unwrap(), vec![x0]);
        let steps = vec![Pose6::from_translation(1.0, 0.0, 0.0); 5];
        let line = compose_dead_reckoning(&steps, Pose6::identity()).unwrap();
        for (k, p) in line.iter().enumerate() {
            assert_abs_diff_eq!(p.t, Vector3::new(k as f64, 0.0, 0.0), epsilon = 1e-15);
        }
    }

    fn two_node_graph(init: Pose6) -> FactorGraph {
        FactorGraph {
            nodes: vec![Pose6::identity(), init],
            odometry: vec![OdomFactor {
                i: 0,
                meas: Pose6::from_translation(1.0, 0.0, 0.0),
                cov: Vector6::repeat(1.0),
            }],
            loops: vec![],
            anchor: 0,
        }
    }

    #[test]
    fn cost_examples() {
        let cfg = BackendConfig { varrho: 1.0, ..Default::default() };
        let g = two_node_graph(Pose6::from_translation(1.0, 0.0, 0.0));
        assert_eq!(total_cost(&g, &cfg).unwrap(), 0.0);
        let g = two_node_graph(Pose6::from_translation(2.0, 0.0, 0.0));
        assert_abs_diff_eq!(total_cost(&g, &cfg).unwrap(), 1.0, epsilon = 1e-15);

        let mut g = two_node_graph(Pose6::from_translation(1.0, 0.0, 0.0));
        g.add_loop(0, 1, Pose6::from_translation(1.5, 0.0, 0.0), Vector6::repeat(0.5));
        let c1 = total_cost(&g, &BackendConfig { rho: 1.0, ..cfg }).unwrap();
        let c2 = total_cost(&g, &BackendConfig { rho: 2.0, ..cfg }).unwrap();
        assert_abs_diff_eq!(c2, 2.0 * c1, epsilon = 1e-15);
        let cov_conv = BackendConfig { rho: 2.0, scale_convention: ScaleConvention::Covariance, ..cfg };
        assert_abs_diff_eq!(total_cost(&g, &cov_conv).unwrap(), 0.5 * c1, epsilon = 1e-15);
    }

    #[test]
    fn two_nodes_recover_relative_pose() {
        let g = two_node_graph(pose([1.3, -0.2, 0.1], [0.05, -0.1, 0.2]));
        let res = optimize(&g, &BackendConfig::default()).unwrap();
        assert_eq!(res.states[0], Pose6::identity());
        assert_abs_diff_eq!(res.states[1].to_vector(), Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0), epsilon = 1e-8);
    }

    #[test]
    fn odometry_only_graph_matches_dead_reckoning() {
        let sc = generate(&WorldSpec { n_frames: 60, laps: 1, ..Default::default() }).unwrap();
        let meas = sc.measured_odometry();
        let mut g = FactorGraph::from_odometry(sc.gt_trajectory[0], &meas, &sc.odometry_covariances()).unwrap();
        // start away from the answer
        for (k, n) in g.nodes.iter_mut().enumerate().skip(1) {
            n.t += Vector3::new(0.01 * k as f64, -0.02, 0.01);
            n.r.z += 0.01;
        }
        let res = optimize(&g, &BackendConfig::default()).unwrap();
        let dr = compose_dead_reckoning(&meas, sc.gt_trajectory[0]).unwrap();
        for (a, b) in res.states.iter().zip(&dr) {
            assert!((a.t - b.t).norm() < 1e-8, "{:?} vs {:?}", a.t, b.t);
        }
    }

    #[test]
    fn loops_reduce_drift_and_cost_is_monotone() {
        let spec = WorldSpec { n_frames: 100, laps: 2, ..Default::default() };
        let sc = generate(&WorldSpec { loop_noise: crate::simulator::NoisePair { sigma_t: 1e-3, sigma_r: 1e-4 }, ..spec }).unwrap();
        let mut g = FactorGraph::from_odometry(sc.gt_trajectory[0], &sc.measured_odometry(), &sc.odometry_covariances()).unwrap();
        for p in &sc.proposals {
            g.add_loop(p.i, p.j, p.rel, p.cov);
        }
        let res = optimize(&g, &BackendConfig::default()).unwrap();
        assert!(res.cost_trace.windows(2).all(|w| w[1] < w[0]));
        let before = ate(&g.nodes, &sc.gt_trajectory, Alignment::None).unwrap();
        let after = ate(&res.states, &sc.gt_trajectory, Alignment::None).unwrap();
        assert!(after < before, "{after} vs {before}");
        // Determinism.
        assert_eq!(res, optimize(&g, &BackendConfig::default()).unwrap());
    }

    #[test]
    fn disconnected_graph_names_orphans() {
        let mut g = two_node_graph(Pose6::identity());
        g.nodes.push(Pose6::identity());
        g.nodes.push(Pose6::identity());
        g.add_loop(2, 3, Pose6::identity(), Vector6::repeat(1.0));
        assert_eq!(
            optimize(&g, &BackendConfig::default()),
            Err(PoseGraphError::Disconnected { orphans: vec![2, 3] })
        );
    }

    #[test]
    fn invalid_inputs() {
        let mut g = two_node_graph(Pose6::identity());
        g.odometry[0].cov[2] = 0.0;
        assert!(matches!(total_cost(&g, &BackendConfig::default()), Err(PoseGraphError::InvalidCovariance { .. })));
        let g = two_node_graph(Pose6::identity());
        assert!(optimize(&g, &BackendConfig { rho: 0.0, ..Default::default() }).is_err());
        let mut g = two_node_graph(Pose6::identity());
        g.add_loop(0, 5, Pose6::identity(), Vector6::repeat(1.0));
        assert!(matches!(g.validate(), Err(PoseGraphError::IndexOutOfRange { index: 5, .. })));
    }

    fn small_loop_graph() -> FactorGraph {
        let sc = generate(&WorldSpec { n_frames: 80, laps: 2, n_loops: 5, ..Default::default() }).unwrap();
        let mut g = FactorGraph::from_odometry(sc.gt_trajectory[0], &sc.measured_odometry(), &sc.odometry_covariances()).unwrap();
        for p in &sc.proposals {
            g.add_loop(p.i, p.j, p.rel, p.cov);
        }
        g
    }

    #[test]
    fn gauge_invariance() {
        let g = small_loop_graph();
        let cfg = BackendConfig::default();
        let a = optimize(&g, &cfg).unwrap();
        let m = Transform::new(RotMat::from_euler(&Vector3::new(0.0, 0.0, 0.7)), Vector3::new(3.0, -2.0, 1.0));
        let mut moved = g.clone();
        for n in &mut moved.nodes {
            *n = Pose6::from_transform(&m.compose(&n.to_transform())).unwrap();
        }
        let b = optimize(&moved, &cfg).unwrap();
        assert_abs_diff_eq!(a.cost_trace.last().unwrap(), b.cost_trace.last().unwrap(), epsilon = 1e-8);
        for (x, y) in a.states.iter().zip(&b.states) {
            let xm = m.compose(&x.to_transform());
            assert!((xm.t - y.to_transform().t).norm() < 1e-5);
        }
    }

    #[test]
    fn common_rescaling_keeps_argmin() {
        let mut g = small_loop_graph();
        for f in &mut g.odometry {
            f.cov = Vector6::repeat(0.01);
        }
        for f in &mut g.loops {
            f.cov = Vector6::repeat(0.01);
        }
        let c1 = BackendConfig { varrho: 1.0, rho: 1.0, ..Default::default() };
        let c2 = BackendConfig { varrho: 7.0, rho: 7.0, ..Default::default() };
        let a = optimize(&g, &c1).unwrap();
        let b = optimize(&g, &c2).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            assert!((x.t - y.t).norm() < 1e-6);
        }
        assert_abs_diff_eq!(7.0 * a.cost_trace.last().unwrap(), b.cost_trace.last().unwrap(), epsilon = 1e-8);
    }

    #[test]
    fn numeric_jacobian_matches_coarser_difference() {
        let a = pose([1.0, 2.0, 0.5], [0.1, -0.3, 2.0]);
        let u = pose([0.5, 0.1, 0.0], [0.0, 0.05, 0.2]);
        let b = pose([1.4, 2.5, 0.4], [0.12, -0.2, 2.3]);
        let (ja, jb) = numeric_jacobians(&a, &u, &b).unwrap();
        let h = 1e-5;
        for k in 0..6 {
            let col = (factor_residual(&perturbed(&a, k, h), &u, &b).unwrap()
                - factor_residual(&perturbed(&a, k, -h), &u, &b).unwrap())
                / (2.0 * h);
            assert_abs_diff_eq!(ja.column(k).into_owned(), col, epsilon = 1e-5);
            let col = (factor_residual(&a, &u, &perturbed(&b, k, h)).unwrap()
                - factor_residual(&a, &u, &perturbed(&b, k, -h)).unwrap())
                / (2.0 * h);
            assert_abs_diff_eq!(jb.column(k).into_owned(), col, epsilon = 1e-5);
        }
    }
}
