//! Batch driver: simulate → train → detect → reject → optimize → evaluate.
//!
//! Every stage reads its inputs from, and writes its outputs to, a single run
//! directory, so stages can be run one at a time from the command line. The
//! simulator doubles as the sensor stack and the registration front end: the
//! detect stage regenerates the scenario from `spec.json` to measure the
//! relative pose of every detected pair.
//!
//! All outputs are deterministic functions of the configuration; nothing
//! reads the clock or the environment.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector6;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::Pose6;
use crate::io::{self, OdometryLog, VerdictRow};
use crate::learning::{
    mine_triplets, train_embedding, train_mdn_regressor, MdnRegressor, Optimizer, Projector,
    ProjectorCheckpoint, TrainConfig, Trained, Triplet, TripletConfig,
};
use crate::loop_detection::{detect_loops, discrepancy, roc, similarity_matrix, Embedding, LoopDetectConfig};
use crate::mdn::MdnLossConfig;
use crate::metrics::{ate, gain_percent, rpe, uncertainty_correlation, Alignment};
use crate::outlier_rejection::{filter_proposals, LoopProposal, OdomChain, RejectionConfig};
use crate::pose_graph::{optimize, BackendConfig, FactorGraph};
use crate::simulator::{generate, gt_loop_labels, SyntheticScenario, WorldSpec, FRAME_PERIOD};

pub const CONFIG_JSON: &str = "config.json";
pub const SPEC_JSON: &str = "spec.json";
pub const GT_TUM: &str = "gt.tum";
pub const ODOM_CSV: &str = "odom.csv";
pub const OBSERVATIONS_JSONL: &str = "observations.jsonl";
pub const PROPOSALS_CSV: &str = "proposals.csv";
pub const MDN_JSON: &str = "mdn.json";
pub const MDN_CURVE_CSV: &str = "mdn_curve.csv";
pub const MDN_CALIBRATION_JSON: &str = "mdn_calibration.json";
pub const EMBEDDER_JSON: &str = "embedder.json";
pub const EMBED_CURVE_CSV: &str = "embed_curve.csv";
pub const BACKEND_ODOM_CSV: &str = "odom_backend.csv";
pub const UNCERTAINTY_CSV: &str = "uncertainty.csv";
pub const EMBEDDINGS_JSONL: &str = "embeddings.jsonl";
pub const SIMILARITY_CSV: &str = "similarity.csv";
pub const LOOPS_CSV: &str = "loops.csv";
pub const ROC_CSV: &str = "roc.csv";
pub const DETECT_SUMMARY_JSON: &str = "detect_summary.json";
pub const CANDIDATES_CSV: &str = "candidates.csv";
pub const INLIERS_CSV: &str = "inliers.csv";
pub const GRAPH_G2O: &str = "graph.g2o";
pub const ODOMETRY_TUM: &str = "odometry.tum";
pub const OPTIMIZED_TUM: &str = "optimized.tum";
pub const COST_TRACE_CSV: &str = "cost_trace.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const MANIFEST_JSON: &str = "manifest.json";

/// Pipeline stages in execution order; the number sets the exit code `3 + n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Simulate = 1,
    Train = 2,
    Detect = 3,
    Reject = 4,
    Optimize = 5,
    Evaluate = 6,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Simulate,
        Stage::Train,
        Stage::Detect,
        Stage::Reject,
        Stage::Optimize,
        Stage::Evaluate,
    ];

    pub fn number(self) -> i32 {
        self as i32
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Train => "train",
            Stage::Detect => "detect",
            Stage::Reject => "reject",
            Stage::Optimize => "optimize",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.number(), self.name())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    /// 2 for configuration errors, `3 + n` for a failure in stage `n`.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { stage, .. } => 3 + stage.number(),
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn stage_err(stage: Stage, message: impl fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage,
        message: message.to_string(),
    }
}

/// Tags any displayable error with the stage it occurred in.
trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T>;
}

impl<T, E: fmt::Display> AtStage<T> for std::result::Result<T, E> {
    fn at(self, stage: Stage) -> Result<T> {
        self.map_err(|e| stage_err(stage, e))
    }
}

fn config_err<E: fmt::Display>(e: E) -> PipelineError {
    PipelineError::Config(e.to_string())
}

/// Which covariances weight the back-end factors; the alternative is identity.
///
/// "MDN" odometry covariance is the regressor's predicted variance (or the
/// sensor-reported variance when training is disabled); "MDN" loop
/// covariance is the variance reported by the loop measurement model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    #[default]
    MdnBoth,
    IdentityBoth,
    MdnOdomOnly,
    MdnLoopOnly,
}

impl CovarianceMode {
    pub const ALL: [CovarianceMode; 4] = [
        CovarianceMode::MdnBoth,
        CovarianceMode::IdentityBoth,
        CovarianceMode::MdnOdomOnly,
        CovarianceMode::MdnLoopOnly,
    ];

    fn odom_learned(self) -> bool {
        matches!(self, CovarianceMode::MdnBoth | CovarianceMode::MdnOdomOnly)
    }

    fn loop_learned(self) -> bool {
        matches!(self, CovarianceMode::MdnBoth | CovarianceMode::MdnLoopOnly)
    }
}

/// How a pose and its variance are read off the regressor's mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseExtraction {
    /// Dominant component's mean and variance.
    Mode,
    /// Mixture mean and total variance.
    #[default]
    MixtureMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    /// When false the back end uses the sensor-reported odometry and
    /// detection compares raw observations.
    pub enabled: bool,
    pub mdn: TrainConfig,
    pub mdn_loss: MdnLossConfig,
    /// Seeds of the training worlds (the configured world with its seed replaced).
    pub mdn_world_seeds: Vec<u64>,
    pub pose_extraction: PoseExtraction,
    /// Worlds used to fit the per-axis variance recalibration
    /// (see [`fit_variance_calibration`]); empty disables recalibration.
    pub calibration_world_seeds: Vec<u64>,
    pub embed: TrainConfig,
    pub triplet: TripletConfig,
    pub embed_dim: usize,
    pub embed_world_seeds: Vec<u64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            enabled: true,
            mdn: TrainConfig {
                learning_rate: 1e-3,
                optimizer: Optimizer::RmsProp,
                ..Default::default()
            },
            mdn_loss: MdnLossConfig::default(),
            mdn_world_seeds: (1000..1007).collect(),
            pose_extraction: PoseExtraction::MixtureMean,
            calibration_world_seeds: (3000..3003).collect(),
            embed: TrainConfig {
                learning_rate: 1e-3,
                epochs: 60,
                optimizer: Optimizer::RmsProp,
                ..Default::default()
            },
            triplet: TripletConfig::default(),
            embed_dim: 128,
            embed_world_seeds: (2000..2004).collect(),
        }
    }
}

/// Where loop proposals come from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopSources {
    /// Pairs found by embedding comparison (measured by the front end).
    pub detections: bool,
    /// The simulator's own proposal stream, including injected false loops.
    pub simulated: bool,
}

impl Default for LoopSources {
    fn default() -> Self {
        LoopSources {
            detections: true,
            simulated: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rpe_delta: usize,
    pub alignment: Alignment,
    /// Ground-truth revisit labels: position distance (m) ...
    pub label_distance: f64,
    /// ... and heading difference (rad).
    pub label_heading: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rpe_delta: 1,
            alignment: Alignment::None,
            label_distance: 1.0,
            label_heading: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Scenario description; its `seed` is replaced by the top-level `seed`.
    pub world: WorldSpec,
    pub detect: LoopDetectConfig,
    pub reject: RejectionConfig,
    pub backend: BackendConfig,
    pub train: TrainSettings,
    pub covariance_mode: CovarianceMode,
    pub loop_sources: LoopSources,
    pub evaluation: EvalConfig,
    /// Lower bound applied to every variance handed to rejection and the back
    /// end, so noiseless scenarios stay well posed.
    pub variance_floor: f64,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            world: WorldSpec::default(),
            detect: LoopDetectConfig::default(),
            reject: RejectionConfig::default(),
            backend: BackendConfig::default(),
            train: TrainSettings::default(),
            covariance_mode: CovarianceMode::default(),
            loop_sources: LoopSources::default(),
            evaluation: EvalConfig::default(),
            variance_floor: 1e-12,
            output_dir: PathBuf::from("mdnslam_out"),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Parses JSON; missing fields take their defaults, unknown fields are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario_spec().validate().map_err(config_err)?;
        self.detect.validate().map_err(config_err)?;
        self.reject.validate().map_err(config_err)?;
        self.backend.validate().map_err(config_err)?;
        if self.train.enabled {
            let t = &self.train;
            t.mdn.validate().map_err(config_err)?;
            t.mdn_loss.validate().map_err(config_err)?;
            t.embed.validate().map_err(config_err)?;
            t.triplet.validate().map_err(config_err)?;
            if t.embed_dim == 0 {
                return Err(config_err("train.embed_dim must be >= 1"));
            }
            if t.mdn_world_seeds.is_empty() || t.embed_world_seeds.is_empty() {
                return Err(config_err("training world seed lists must not be empty"));
            }
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(config_err("variance_floor must be finite and > 0"));
        }
        let e = &self.evaluation;
        if e.rpe_delta == 0 || e.rpe_delta >= self.world.n_frames {
            return Err(config_err("evaluation.rpe_delta must be in 1..n_frames"));
        }
        if !(e.label_distance > 0.0 && e.label_heading > 0.0) {
            return Err(config_err("evaluation label thresholds must be > 0"));
        }
        Ok(())
    }

    /// The world actually simulated: `world` with the run seed.
    pub fn scenario_spec(&self) -> WorldSpec {
        WorldSpec {
            seed: self.seed,
            ..self.world.clone()
        }
    }

    /// SHA-256 of the canonical JSON with `output_dir` blanked, so the same
    /// experiment written to two places has the same hash.
    pub fn hash(&self) -> String {
        let canon = PipelineConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&canon).expect("config serializes")))
    }
}

/// Trained models kept in memory across runs that share a training setup.
/// Entries are keyed by everything their training depends on.
#[derive(Debug, Default)]
pub struct ModelCache {
    mdn: Option<(String, OdometryModel)>,
    embedder: Option<(String, Trained<Projector>)>,
}

impl ModelCache {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Training worlds share everything with the configured world except the seed.
fn training_world(cfg: &PipelineConfig, seed: u64) -> WorldSpec {
    WorldSpec {
        seed,
        ..cfg.world.clone()
    }
}

fn mdn_key(cfg: &PipelineConfig) -> String {
    let t = &cfg.train;
    serde_json::to_string(&(
        &cfg.world,
        &t.mdn,
        &t.mdn_loss,
        &t.mdn_world_seeds,
        t.pose_extraction,
        &t.calibration_world_seeds,
    ))
    .expect("serializable")
}

fn embed_key(cfg: &PipelineConfig) -> String {
    let t = &cfg.train;
    serde_json::to_string(&(&cfg.world, &t.embed, &t.triplet, t.embed_dim, &t.embed_world_seeds)).expect("serializable")
}

/// Learned odometry: the regressor, how poses are extracted, and the
/// per-axis variance recalibration `v' = scale · v^exponent`.
#[derive(Debug, Clone)]
pub struct OdometryModel {
    pub trained: Trained<MdnRegressor>,
    pub extraction: PoseExtraction,
    pub variance_scale: [f64; 6],
    pub variance_exponent: [f64; 6],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CalibrationFile {
    pose_extraction: PoseExtraction,
    variance_scale: [f64; 6],
    variance_exponent: [f64; 6],
}

/// Exponents tried when fitting a variance calibration.
const CALIBRATION_EXPONENTS: std::ops::RangeInclusive<u32> = 0..=30;
const CALIBRATION_EXPONENT_STEP: f64 = 0.05;

/// Maximum-likelihood fit of `v' = c · v^b` to squared errors under a
/// zero-mean Gaussian model. For a fixed `b` the optimal `c` is the mean of
/// `e² / v^b`; `b` is searched on a grid over [0, 1.5]. Returns `(c, b)`.
pub fn fit_variance_calibration(var: &[f64], sq_err: &[f64]) -> Option<(f64, f64)> {
    if var.is_empty() || var.len() != sq_err.len() {
        return None;
    }
    let n = var.len() as f64;
    let mut best: Option<(f64, f64, f64)> = None;
    for step in CALIBRATION_EXPONENTS {
        let b = step as f64 * CALIBRATION_EXPONENT_STEP;
        let c = var.iter().zip(sq_err).map(|(v, e)| e / v.powf(b)).sum::<f64>() / n;
        if !(c.is_finite() && c > 0.0) {
            continue;
        }
        let nll: f64 = var
            .iter()
            .zip(sq_err)
            .map(|(v, e)| {
                let w = c * v.powf(b);
                w.ln() + e / w
            })
            .sum();
        if nll.is_finite() && best.is_none_or(|(m, _, _)| nll < m) {
            best = Some((nll, c, b));
        }
    }
    best.map(|(_, c, b)| (c, b))
}

impl OdometryModel {
    fn raw(&self, feature: &[f64]) -> std::result::Result<(Pose6, Vector6<f64>), crate::learning::LearningError> {
        match self.extraction {
            PoseExtraction::Mode => self.trained.model.predict_pose(feature),
            PoseExtraction::MixtureMean => self.trained.model.predict_mean_pose(feature),
        }
    }

    /// Relative pose and calibrated per-axis variances for one step.
    pub fn predict(&self, feature: &[f64]) -> std::result::Result<(Pose6, Vector6<f64>), crate::learning::LearningError> {
        let (p, v) = self.raw(feature)?;
        Ok((p, Vector6::from_fn(|d, _| self.variance_scale[d] * v[d].powf(self.variance_exponent[d]))))
    }
}

fn step_error(pred: &Pose6, truth: &Pose6) -> Vector6<f64> {
    let mut e = pred.to_vector() - truth.to_vector();
    for d in 3..6 {
        e[d] = crate::geometry::normalize_angle(e[d]);
    }
    e
}

/// Trains (or fetches from the cache) the odometry regressor.
pub fn trained_mdn<'c>(cfg: &PipelineConfig, cache: &'c mut ModelCache) -> Result<&'c OdometryModel> {
    let key = mdn_key(cfg);
    if cache.mdn.as_ref().is_none_or(|(k, _)| *k != key) {
        let st = Stage::Train;
        let mut data = Vec::new();
        for &s in &cfg.train.mdn_world_seeds {
            let sc = generate(&training_world(cfg, s)).at(st)?;
            for k in 0..sc.odometry.len() {
                data.push((sc.odometry_features(k), sc.true_step(k).at(st)?));
            }
        }
        log::info!("training MDN regressor on {} steps", data.len());
        let trained = train_mdn_regressor(&data, &cfg.train.mdn, &cfg.train.mdn_loss).at(st)?;
        let mut model = OdometryModel {
            trained,
            extraction: cfg.train.pose_extraction,
            variance_scale: [1.0; 6],
            variance_exponent: [1.0; 6],
        };
        let mut var: [Vec<f64>; 6] = Default::default();
        let mut sq_err: [Vec<f64>; 6] = Default::default();
        for &s in &cfg.train.calibration_world_seeds {
            let sc = generate(&training_world(cfg, s)).at(st)?;
            for k in 0..sc.odometry.len() {
                let (p, v) = model.raw(&sc.odometry_features(k)).at(st)?;
                let e = step_error(&p, &sc.true_step(k).at(st)?);
                for d in 0..6 {
                    var[d].push(v[d]);
                    sq_err[d].push(e[d] * e[d]);
                }
            }
        }
        if !cfg.train.calibration_world_seeds.is_empty() {
            for d in 0..6 {
                let (c, b) = fit_variance_calibration(&var[d], &sq_err[d])
                    .ok_or_else(|| stage_err(st, format!("degenerate variance calibration on axis {d}")))?;
                model.variance_scale[d] = c;
                model.variance_exponent[d] = b;
            }
            log::info!(
                "odometry variance calibration scale {:?} exponent {:?}",
                model.variance_scale,
                model.variance_exponent
            );
        }
        cache.mdn = Some((key, model));
    }
    Ok(&cache.mdn.as_ref().expect("just filled").1)
}

/// Every same-place pair across laps: `(i, i + m · frames_per_lap)`.
fn all_lap_pairs(sc: &SyntheticScenario) -> Vec<(usize, usize)> {
    let fpl = sc.spec.frames_per_lap();
    let n = sc.n_frames();
    let mut pairs = Vec::new();
    let mut gap = fpl;
    while fpl > 0 && gap < n {
        pairs.extend((0..n - gap).map(|i| (i, i + gap)));
        gap += fpl;
    }
    pairs
}

/// Triplets for embedding training from the given worlds.
pub fn embedding_triplets(worlds: &[WorldSpec], tcfg: &TripletConfig) -> std::result::Result<Vec<Triplet>, String> {
    let mut triplets = Vec::new();
    for w in worlds {
        let sc = generate(w).map_err(|e| e.to_string())?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(w.seed);
        let idx = mine_triplets(&all_lap_pairs(&sc), sc.n_frames(), tcfg, &mut rng).map_err(|e| e.to_string())?;
        let o = &sc.observations;
        triplets.extend(idx.into_iter().map(|(a, p, n)| (o[a].clone(), o[p].clone(), o[n].clone())));
    }
    Ok(triplets)
}

/// Trains (or fetches from the cache) the place-embedding projector.
pub fn trained_embedder<'c>(cfg: &PipelineConfig, cache: &'c mut ModelCache) -> Result<&'c Trained<Projector>> {
    let key = embed_key(cfg);
    if cache.embedder.as_ref().is_none_or(|(k, _)| *k != key) {
        let st = Stage::Train;
        let worlds: Vec<WorldSpec> = cfg.train.embed_world_seeds.iter().map(|&s| training_world(cfg, s)).collect();
        let triplets = embedding_triplets(&worlds, &cfg.train.triplet).at(st)?;
        log::info!("training place embedding on {} triplets", triplets.len());
        let trained =
            train_embedding(&triplets, cfg.train.embed_dim, &cfg.train.embed, &cfg.train.triplet).at(st)?;
        cache.embedder = Some((key, trained));
    }
    Ok(&cache.embedder.as_ref().expect("just filled").1)
}

fn write(stage: Stage, dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents).map_err(|e| PipelineError::Stage {
        stage,
        message: format!("writing {name}: {e}"),
    })
}

fn read(stage: Stage, dir: &Path, name: &str) -> Result<String> {
    fs::read_to_string(dir.join(name)).map_err(|e| PipelineError::Stage {
        stage,
        message: format!("reading {name}: {e}"),
    })
}

fn to_json_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn load_scenario(stage: Stage, dir: &Path) -> Result<SyntheticScenario> {
    let spec: WorldSpec = serde_json::from_str(&read(stage, dir, SPEC_JSON)?).at(stage)?;
    generate(&spec).at(stage)
}

fn read_tum_poses(stage: Stage, dir: &Path, name: &str) -> Result<Vec<Pose6>> {
    Ok(io::read_tum(&read(stage, dir, name)?)
        .at(stage)?
        .into_iter()
        .map(|(_, p)| p)
        .collect())
}

fn floored(cov: &Vector6<f64>, floor: f64) -> Vector6<f64> {
    cov.map(|v| v.max(floor))
}

/// Stage 1: scenario files.
pub fn stage_simulate(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let st = Stage::Simulate;
    let spec = cfg.scenario_spec();
    let sc = generate(&spec).at(st)?;
    write(st, dir, SPEC_JSON, &to_json_pretty(&spec))?;
    write(st, dir, GT_TUM, &io::write_tum(&sc.gt_trajectory, FRAME_PERIOD))?;
    let log = OdometryLog {
        meas: sc.measured_odometry(),
        cov: sc.odometry_covariances(),
        degraded: sc.odometry.iter().map(|o| o.degraded).collect(),
    };
    write(st, dir, ODOM_CSV, &log.to_csv().at(st)?)?;
    write(st, dir, OBSERVATIONS_JSONL, &io::write_vectors_jsonl(&sc.observations).at(st)?)?;
    write(
        st,
        dir,
        PROPOSALS_CSV,
        &io::write_proposals(&sc.proposals, &sc.proposal_is_false).at(st)?,
    )?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct UncertaintyRow {
    k: usize,
    error_t: f64,
    sigma_t: f64,
}

/// Stage 2: back-end odometry (regressor output or the sensor's own) and the
/// per-step translation error against its predicted σ.
pub fn stage_train(cfg: &PipelineConfig, dir: &Path, cache: &mut ModelCache) -> Result<()> {
    let st = Stage::Train;
    let sensor = OdometryLog::from_csv(&read(st, dir, ODOM_CSV)?).at(st)?;
    let gt = read_tum_poses(st, dir, GT_TUM)?;
    if gt.len() != sensor.len() + 1 {
        return Err(stage_err(st, format!("{} odometry steps for {} poses", sensor.len(), gt.len())));
    }
    let backend = if cfg.train.enabled {
        let mdn = trained_mdn(cfg, cache)?;
        write(st, dir, MDN_JSON, &to_json_pretty(&mdn.trained.model.to_checkpoint()))?;
        write(st, dir, MDN_CURVE_CSV, &mdn.trained.curve_csv())?;
        let calib = CalibrationFile {
            pose_extraction: mdn.extraction,
            variance_scale: mdn.variance_scale,
            variance_exponent: mdn.variance_exponent,
        };
        write(st, dir, MDN_CALIBRATION_JSON, &to_json_pretty(&calib))?;
        let mut log = OdometryLog {
            degraded: sensor.degraded.clone(),
            ..Default::default()
        };
        for k in 0..sensor.len() {
            let (pose, var) = mdn.predict(&sensor.features(k)).at(st)?;
            log.meas.push(pose);
            log.cov.push(var);
        }
        let emb = trained_embedder(cfg, cache)?;
        write(st, dir, EMBEDDER_JSON, &to_json_pretty(&emb.model.to_checkpoint()))?;
        write(st, dir, EMBED_CURVE_CSV, &emb.curve_csv())?;
        log
    } else {
        for name in [MDN_JSON, MDN_CURVE_CSV, MDN_CALIBRATION_JSON, EMBEDDER_JSON, EMBED_CURVE_CSV] {
            let _ = fs::remove_file(dir.join(name));
        }
        sensor
    };
    let mut rows = Vec::with_capacity(backend.len());
    for k in 0..backend.len() {
        let truth = gt[k].relative(&gt[k + 1]).at(st)?;
        let c = &backend.cov[k];
        rows.push(UncertaintyRow {
            k,
            error_t: step_error(&backend.meas[k], &truth).fixed_rows::<3>(0).norm(),
            sigma_t: ((c[0] + c[1] + c[2]) / 3.0).sqrt(),
        });
    }
    write(st, dir, BACKEND_ODOM_CSV, &backend.to_csv().at(st)?)?;
    write(st, dir, UNCERTAINTY_CSV, &io::write_csv(&rows).at(st)?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct DetectSummary {
    n_detections: usize,
    n_true_detections: usize,
    auc: Option<f64>,
    tpr_at_fpr_0_2: Option<f64>,
}

/// Stage 3: embeddings, similarity matrix, detections, ROC against
/// ground-truth revisits, and the measured candidate proposals.
pub fn stage_detect(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let st = Stage::Detect;
    let observations = io::read_vectors_jsonl(&read(st, dir, OBSERVATIONS_JSONL)?).at(st)?;
    let embeddings: Vec<Embedding> = if cfg.train.enabled {
        let ck: ProjectorCheckpoint = serde_json::from_str(&read(st, dir, EMBEDDER_JSON)?).at(st)?;
        let model = Projector::from_checkpoint(&ck).at(st)?;
        observations.iter().map(|o| model.embed(o)).collect::<std::result::Result<_, _>>().at(st)?
    } else {
        observations
            .iter()
            .map(|o| Embedding::from_raw(o.clone()))
            .collect::<std::result::Result<_, _>>()
            .at(st)?
    };
    let vectors: Vec<&[f64]> = embeddings.iter().map(Embedding::as_slice).collect();
    write(st, dir, EMBEDDINGS_JSONL, &io::write_vectors_jsonl(&vectors).at(st)?)?;
    write(st, dir, SIMILARITY_CSV, &similarity_matrix(&embeddings).at(st)?.to_csv())?;
    let detections = detect_loops(&embeddings, &cfg.detect).at(st)?;
    write(st, dir, LOOPS_CSV, &io::write_detections(&detections).at(st)?)?;

    let sc = load_scenario(st, dir)?;
    let ev = &cfg.evaluation;
    let labels = gt_loop_labels(&sc, ev.label_distance, ev.label_heading);
    let positives: HashSet<(usize, usize)> = labels.iter().filter(|l| l.positive).map(|l| (l.i, l.j)).collect();
    let (mut scores, mut truth) = (Vec::new(), Vec::new());
    for l in labels.iter().filter(|l| l.j - l.i > cfg.detect.adjacency_exclusion) {
        scores.push(discrepancy(&embeddings[l.i], &embeddings[l.j]).at(st)?);
        truth.push(l.positive);
    }
    let curve = if truth.iter().any(|t| *t) && truth.iter().any(|t| !*t) {
        Some(roc(&scores, &truth).at(st)?)
    } else {
        None
    };
    write(
        st,
        dir,
        ROC_CSV,
        &io::write_csv(curve.as_ref().map_or(&[][..], |r| &r.points)).at(st)?,
    )?;
    let summary = DetectSummary {
        n_detections: detections.len(),
        n_true_detections: detections.iter().filter(|d| positives.contains(&(d.i, d.j))).count(),
        auc: curve.as_ref().map(|r| r.auc),
        tpr_at_fpr_0_2: curve.as_ref().map(|r| r.tpr_at_fpr(0.2)),
    };
    write(st, dir, DETECT_SUMMARY_JSON, &to_json_pretty(&summary))?;

    let mut candidates: Vec<LoopProposal> = Vec::new();
    let mut is_false: Vec<bool> = Vec::new();
    if cfg.loop_sources.simulated {
        let (p, f) = io::read_proposals(&read(st, dir, PROPOSALS_CSV)?).at(st)?;
        candidates.extend(p);
        is_false.extend(f);
    }
    if cfg.loop_sources.detections {
        let mut seen: HashSet<(usize, usize)> = candidates.iter().map(|p| (p.i, p.j)).collect();
        for d in &detections {
            if !seen.insert((d.i, d.j)) {
                continue;
            }
            let (mut p, corrupt) = if positives.contains(&(d.i, d.j)) {
                sc.measure_loop(d.i, d.j).at(st)?
            } else {
                (sc.measure_alias(d.i, d.j).at(st)?, true)
            };
            p.score = d.score;
            candidates.push(p);
            is_false.push(corrupt);
        }
    }
    write(st, dir, CANDIDATES_CSV, &io::write_proposals(&candidates, &is_false).at(st)?)?;
    Ok(())
}

fn read_backend_odometry(stage: Stage, dir: &Path, floor: f64) -> Result<OdometryLog> {
    let mut log = OdometryLog::from_csv(&read(stage, dir, BACKEND_ODOM_CSV)?).at(stage)?;
    for c in log.cov.iter_mut() {
        *c = floored(c, floor);
    }
    Ok(log)
}

fn read_candidates(stage: Stage, dir: &Path, floor: f64) -> Result<(Vec<LoopProposal>, Vec<bool>)> {
    let (mut p, f) = io::read_proposals(&read(stage, dir, CANDIDATES_CSV)?).at(stage)?;
    for q in p.iter_mut() {
        q.cov = floored(&q.cov, floor);
    }
    Ok((p, f))
}

/// Stage 4: pairwise sub-loop consistency filtering of the candidates.
pub fn stage_reject(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let st = Stage::Reject;
    let odom = read_backend_odometry(st, dir, cfg.variance_floor)?;
    let (candidates, _) = read_candidates(st, dir, cfg.variance_floor)?;
    let chain = OdomChain::new(&odom.meas, &odom.cov).at(st)?;
    let result = filter_proposals(&candidates, &chain, &cfg.reject).at(st)?;
    log::info!("{} of {} loop candidates kept", result.inliers.len(), candidates.len());
    write(st, dir, INLIERS_CSV, &io::write_verdicts(&result, &candidates).at(st)?)?;
    Ok(())
}

fn read_verdicts(stage: Stage, dir: &Path, n_candidates: usize) -> Result<Vec<VerdictRow>> {
    let rows = io::read_verdicts(&read(stage, dir, INLIERS_CSV)?).at(stage)?;
    if rows.len() != n_candidates {
        return Err(PipelineError::Stage {
            stage,
            message: format!("{} verdicts for {n_candidates} candidates", rows.len()),
        });
    }
    Ok(rows)
}

/// Stage 5: factor graph over the back-end odometry and accepted loops.
pub fn stage_optimize(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    let st = Stage::Optimize;
    let odom = read_backend_odometry(st, dir, cfg.variance_floor)?;
    let (candidates, _) = read_candidates(st, dir, cfg.variance_floor)?;
    let verdicts = read_verdicts(st, dir, candidates.len())?;
    let x0 = *read_tum_poses(st, dir, GT_TUM)?
        .first()
        .ok_or_else(|| stage_err(st, "empty ground-truth trajectory"))?;

    let identity = Vector6::repeat(1.0);
    let mode = cfg.covariance_mode;
    let odom_cov: Vec<Vector6<f64>> = if mode.odom_learned() {
        odom.cov.clone()
    } else {
        vec![identity; odom.len()]
    };
    let mut graph = FactorGraph::from_odometry(x0, &odom.meas, &odom_cov).at(st)?;
    for (p, v) in candidates.iter().zip(&verdicts) {
        if v.is_inlier() {
            graph.add_loop(p.i, p.j, p.rel, if mode.loop_learned() { p.cov } else { identity });
        }
    }
    write(st, dir, GRAPH_G2O, &io::write_g2o(&graph))?;
    write(st, dir, ODOMETRY_TUM, &io::write_tum(&graph.nodes, FRAME_PERIOD))?;
    let result = optimize(&graph, &cfg.backend).at(st)?;
    if !result.converged {
        log::warn!("optimizer stopped after {} iterations without converging", result.iterations);
    }
    write(st, dir, OPTIMIZED_TUM, &io::write_tum(&result.states, FRAME_PERIOD))?;
    let trace: Vec<(usize, f64)> = result.cost_trace.iter().copied().enumerate().collect();
    let mut csv = String::from("step,cost\n");
    for (k, c) in trace {
        csv.push_str(&format!("{k},{c:?}\n"));
    }
    write(st, dir, COST_TRACE_CSV, &csv)?;
    Ok(())
}

/// Evaluation report written to `metrics.json` and `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// RMS ATE of the optimized trajectory (m).
    pub ate_m: f64,
    pub rpe_trans_m: f64,
    pub rpe_rot_deg: f64,
    /// RMS ATE of dead reckoning with the back-end odometry (m).
    pub odom_ate_m: f64,
    /// Relative ATE improvement of the optimized trajectory over dead reckoning.
    pub gain_percent: f64,
    /// Correlation between predicted odometry σ and actual translation error.
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub loop_auc: Option<f64>,
    pub loop_tpr_at_fpr_0_2: Option<f64>,
    pub n_detections: usize,
    pub n_true_detections: usize,
    pub n_candidates: usize,
    pub n_false_candidates: usize,
    pub n_inliers: usize,
    pub rejection_precision: Option<f64>,
    pub rejection_recall: Option<f64>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Stage 6: trajectory metrics, uncertainty correlation and loop statistics.
pub fn stage_evaluate(cfg: &PipelineConfig, dir: &Path) -> Result<Metrics> {
    let st = Stage::Evaluate;
    let gt = read_tum_poses(st, dir, GT_TUM)?;
    let est = read_tum_poses(st, dir, OPTIMIZED_TUM)?;
    let dead = read_tum_poses(st, dir, ODOMETRY_TUM)?;
    let ev = &cfg.evaluation;
    let ate_m = ate(&est, &gt, ev.alignment).at(st)?;
    let odom_ate_m = ate(&dead, &gt, ev.alignment).at(st)?;
    let r = rpe(&est, &gt, ev.rpe_delta).at(st)?;

    let unc: Vec<UncertaintyRow> = io::read_csv(&read(st, dir, UNCERTAINTY_CSV)?).at(st)?;
    let errors: Vec<f64> = unc.iter().map(|u| u.error_t).collect();
    let sigmas: Vec<f64> = unc.iter().map(|u| u.sigma_t).collect();
    let corr = uncertainty_correlation(&errors, &sigmas).ok();

    let summary: DetectSummary = serde_json::from_str(&read(st, dir, DETECT_SUMMARY_JSON)?).at(st)?;
    let (candidates, is_false) = read_candidates(st, dir, cfg.variance_floor)?;
    let verdicts = read_verdicts(st, dir, candidates.len())?;
    let kept_true = verdicts.iter().zip(&is_false).filter(|(v, f)| v.is_inlier() && !**f).count();
    let n_inliers = verdicts.iter().filter(|v| v.is_inlier()).count();
    let n_true = is_false.iter().filter(|f| !**f).count();

    let metrics = Metrics {
        ate_m,
        rpe_trans_m: r.trans_m,
        rpe_rot_deg: r.rot_deg,
        odom_ate_m,
        gain_percent: gain_percent(odom_ate_m, ate_m),
        pearson: corr.and_then(|c| finite(c.pearson)),
        spearman: corr.and_then(|c| finite(c.spearman)),
        loop_auc: summary.auc,
        loop_tpr_at_fpr_0_2: summary.tpr_at_fpr_0_2,
        n_detections: summary.n_detections,
        n_true_detections: summary.n_true_detections,
        n_candidates: candidates.len(),
        n_false_candidates: candidates.len() - n_true,
        n_inliers,
        rejection_precision: (n_inliers > 0).then(|| kept_true as f64 / n_inliers as f64),
        rejection_recall: (n_true > 0).then(|| kept_true as f64 / n_true as f64),
    };
    write(st, dir, METRICS_JSON, &to_json_pretty(&metrics))?;
    write(st, dir, METRICS_CSV, &io::write_csv(std::slice::from_ref(&metrics)).at(st)?)?;
    Ok(metrics)
}

/// Runs one stage against the configured output directory.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage, cache: &mut ModelCache) -> Result<()> {
    cfg.validate()?;
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).at(stage)?;
    log::info!("stage {stage}");
    match stage {
        Stage::Simulate => stage_simulate(cfg, dir),
        Stage::Train => stage_train(cfg, dir, cache),
        Stage::Detect => stage_detect(cfg, dir),
        Stage::Reject => stage_reject(cfg, dir),
        Stage::Optimize => stage_optimize(cfg, dir),
        Stage::Evaluate => stage_evaluate(cfg, dir).map(|_| ()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub stages: Vec<String>,
    /// SHA-256 of every artifact, keyed by file name.
    pub files: BTreeMap<String, String>,
}

fn write_manifest(cfg: &PipelineConfig, dir: &Path) -> Result<Manifest> {
    let st = Stage::Evaluate;
    let mut files = BTreeMap::new();
    let entries = fs::read_dir(dir).at(st)?;
    for e in entries {
        let e = e.at(st)?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name == MANIFEST_JSON || !e.path().is_file() {
            continue;
        }
        let bytes = fs::read(e.path()).at(st)?;
        files.insert(name, hex::encode(Sha256::digest(&bytes)));
    }
    let manifest = Manifest {
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        stages: Stage::ALL.iter().map(|s| s.name().to_string()).collect(),
        files,
    };
    write(st, dir, MANIFEST_JSON, &to_json_pretty(&manifest))?;
    Ok(manifest)
}

/// Full pipeline into `cfg.output_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Metrics> {
    run_pipeline_cached(cfg, &mut ModelCache::new())
}

/// Full pipeline, reusing trained models from `cache` when their training
/// setup matches.
pub fn run_pipeline_cached(cfg: &PipelineConfig, cache: &mut ModelCache) -> Result<Metrics> {
    cfg.validate()?;
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).at(Stage::Simulate)?;
    write(Stage::Simulate, dir, CONFIG_JSON, &cfg.to_json())?;
    for stage in &Stage::ALL[..5] {
        run_stage(cfg, *stage, cache)?;
    }
    log::info!("stage {}", Stage::Evaluate);
    let metrics = stage_evaluate(cfg, dir)?;
    write_manifest(cfg, dir)?;
    Ok(metrics)
}

/// Parameter varied by [`run_sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    Rho,
    K,
    CovarianceMode,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Rho => "rho",
            SweepParameter::K => "k",
            SweepParameter::CovarianceMode => "covariance_mode",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        [SweepParameter::Rho, SweepParameter::K, SweepParameter::CovarianceMode]
            .into_iter()
            .find(|p| p.name() == name.to_ascii_lowercase())
    }

    fn apply(self, cfg: &mut PipelineConfig, value: &str) -> Result<()> {
        let bad = |e: &dyn fmt::Display| config_err(format!("bad {} value {value:?}: {e}", self.name()));
        match self {
            SweepParameter::Rho => cfg.backend.rho = value.trim().parse().map_err(|e| bad(&e))?,
            SweepParameter::K => cfg.train.mdn_loss.k = value.trim().parse().map_err(|e| bad(&e))?,
            SweepParameter::CovarianceMode => {
                cfg.covariance_mode =
                    serde_json::from_value(serde_json::Value::String(value.trim().to_string())).map_err(|e| bad(&e))?
            }
        }
        Ok(())
    }
}

/// One sweep row; metrics are empty when the run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: String,
    pub status: String,
    pub ate_m: Option<f64>,
    pub odom_ate_m: Option<f64>,
    pub gain_percent: Option<f64>,
    pub rpe_trans_m: Option<f64>,
    pub rpe_rot_deg: Option<f64>,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

/// One pipeline run per value (shared seed, separate subdirectories), and a
/// consolidated `sweep_<parameter>.csv` in the output directory. A failing
/// row records its error and the sweep continues.
pub fn run_sweep(
    cfg: &PipelineConfig,
    parameter: SweepParameter,
    values: &[String],
    cache: &mut ModelCache,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if values.is_empty() {
        return Err(config_err("sweep needs at least one value"));
    }
    let mut configs = Vec::with_capacity(values.len());
    for (idx, v) in values.iter().enumerate() {
        let mut c = cfg.clone();
        parameter.apply(&mut c, v)?;
        c.output_dir = cfg.output_dir.join(format!("{}_{idx}", parameter.name()));
        c.validate()?;
        configs.push(c);
    }
    let mut rows = Vec::with_capacity(values.len());
    for (c, v) in configs.iter().zip(values) {
        let mut row = SweepRow {
            parameter: parameter.name().to_string(),
            value: v.trim().to_string(),
            status: "ok".to_string(),
            ate_m: None,
            odom_ate_m: None,
            gain_percent: None,
            rpe_trans_m: None,
            rpe_rot_deg: None,
            pearson: None,
            spearman: None,
        };
        match run_pipeline_cached(c, cache) {
            Ok(m) => {
                row.ate_m = Some(m.ate_m);
                row.odom_ate_m = Some(m.odom_ate_m);
                row.gain_percent = Some(m.gain_percent);
                row.rpe_trans_m = Some(m.rpe_trans_m);
                row.rpe_rot_deg = Some(m.rpe_rot_deg);
                row.pearson = m.pearson;
                row.spearman = m.spearman;
            }
            Err(e) => {
                log::warn!("sweep row {}={v} failed: {e}", parameter.name());
                row.status = e.to_string();
            }
        }
        rows.push(row);
    }
    let csv = io::write_csv(&rows).at(Stage::Evaluate)?;
    fs::create_dir_all(&cfg.output_dir).at(Stage::Evaluate)?;
    write(Stage::Evaluate, &cfg.output_dir, &format!("sweep_{}.csv", parameter.name()), &csv)?;
    Ok(rows)
}
