//! Deterministic synthetic worlds: ground-truth trajectories, noisy odometry,
//! place observations, true revisits and injected false loop proposals.
//!
//! A trajectory is a closed planar centerline (built from straight and arc
//! segments) traversed for several laps. Each lap drifts sideways by
//! `lane_offset`, and a gentle sinusoidal terrain adds height and pitch, so
//! revisits are near but not identical poses. Frame `k` lies at arc length
//! `k · step_length`.
//!
//! All randomness comes from `Xoshiro256PlusPlus` seeded through
//! `seed_from_u64` (SplitMix64 expansion). Independent streams for odometry,
//! observations and loops are derived by mixing the world seed with a stream
//! tag, so e.g. changing the observation dimension leaves odometry untouched.

use std::f64::consts::{PI, TAU};

use nalgebra::{Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{angle_diff, GeometryError, Pose6};
use crate::outlier_rejection::LoopProposal;

/// Nominal time between frames, used only for trajectory timestamps.
pub const FRAME_PERIOD: f64 = 0.2;

/// Number of heading bins of the place signature field.
const HEADING_BINS: usize = 8;

/// Dimension of the observation drift subspace.
const DRIFT_DIMS: usize = 4;

/// Per-frame AR(1) coefficient of the drift coordinates.
const DRIFT_AR: f64 = 0.98;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// Square with rounded corners (corner radius 10% of the side).
    #[default]
    SquareLoop,
    /// Two tangent circles, left then right.
    FigureEight,
    /// Long corridor walked out and back with tight U-turns at both ends.
    CorridorUturn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePair {
    /// Per-axis translation σ (m).
    pub sigma_t: f64,
    /// Per-axis rotation σ (rad).
    pub sigma_r: f64,
}

/// Odometry steps `start..end` get their noise multiplied by `multiplier`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NucInterval {
    pub start: usize,
    pub end: usize,
    pub multiplier: f64,
}

/// Systematic odometry error that is *not* reflected in the reported covariance.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OdomBias {
    /// Relative translation scale error per step.
    pub scale: f64,
    /// Yaw offset added to every step (rad).
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub shape: Shape,
    pub n_frames: usize,
    /// Arc length between consecutive frames (m).
    pub step_length: f64,
    pub laps: usize,
    /// Lateral drift accumulated over one lap (m).
    pub lane_offset: f64,
    /// Terrain height amplitude (m); the terrain repeats twice per lap.
    pub terrain_amplitude: f64,
    /// Per-frame random deviation of the true pose from the nominal path
    /// (right-perturbation), so true motion is never exactly piecewise regular.
    pub pose_jitter: NoisePair,
    pub odom_noise: NoisePair,
    pub turn_noise_multiplier: f64,
    pub nuc_intervals: Vec<NucInterval>,
    pub odom_bias: OdomBias,
    pub place_grid_resolution: f64,
    pub observation_dim: usize,
    pub observation_noise: f64,
    /// Stationary σ of a slowly wandering sensor drift added to every
    /// observation inside a fixed low-dimensional subspace.
    pub observation_drift: f64,
    /// Seed of the place-signature field and drift subspace: the "world".
    /// Runs that share it revisit the same places.
    pub place_seed: u64,
    /// Number of true revisit pairs turned into loop proposals.
    pub n_loops: usize,
    pub loop_noise: NoisePair,
    pub false_loop_rate: f64,
    pub false_loop_offset: f64,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            shape: Shape::SquareLoop,
            n_frames: 200,
            step_length: 0.5,
            laps: 2,
            lane_offset: 0.3,
            terrain_amplitude: 0.15,
            pose_jitter: NoisePair {
                sigma_t: 0.01,
                sigma_r: 0.3_f64.to_radians(),
            },
            odom_noise: NoisePair {
                sigma_t: 0.02,
                sigma_r: 0.5_f64.to_radians(),
            },
            turn_noise_multiplier: 3.0,
            nuc_intervals: vec![
                NucInterval { start: 60, end: 66, multiplier: 4.0 },
                NucInterval { start: 160, end: 166, multiplier: 4.0 },
            ],
            odom_bias: OdomBias { scale: 0.01, yaw: 0.001 },
            place_grid_resolution: 2.0,
            observation_dim: 32,
            observation_noise: 0.2,
            observation_drift: 1.0,
            place_seed: 7,
            n_loops: 10,
            loop_noise: NoisePair {
                sigma_t: 0.02,
                sigma_r: 0.5_f64.to_radians(),
            },
            false_loop_rate: 0.0,
            false_loop_offset: 2.0,
            seed: 0,
        }
    }
}

impl WorldSpec {
    /// Three-lap square loop used for place-recognition training and evaluation.
    pub fn ring_world(seed: u64) -> Self {
        WorldSpec {
            n_frames: 300,
            laps: 3,
            seed,
            ..Default::default()
        }
    }

    /// Same world with the true pose following the nominal path exactly.
    pub fn without_jitter(mut self) -> Self {
        self.pose_jitter = NoisePair { sigma_t: 0.0, sigma_r: 0.0 };
        self
    }

    /// Same world with every sensor noise source and bias switched off. The
    /// ground truth itself (including its jitter) is unchanged.
    pub fn noiseless(mut self) -> Self {
        self.odom_noise = NoisePair { sigma_t: 0.0, sigma_r: 0.0 };
        self.loop_noise = NoisePair { sigma_t: 0.0, sigma_r: 0.0 };
        self.odom_bias = OdomBias::default();
        self.observation_noise = 0.0;
        self.observation_drift = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimError::InvalidSpec(m.to_string()));
        if self.n_frames < 2 {
            return bad("n_frames must be >= 2");
        }
        if self.laps == 0 || self.laps > self.n_frames {
            return bad("laps must be in 1..=n_frames");
        }
        if !(self.step_length > 0.0 && self.step_length.is_finite()) {
            return bad("step_length must be > 0");
        }
        let sigmas = [
            self.pose_jitter.sigma_t,
            self.pose_jitter.sigma_r,
            self.odom_noise.sigma_t,
            self.odom_noise.sigma_r,
            self.loop_noise.sigma_t,
            self.loop_noise.sigma_r,
            self.observation_noise,
            self.observation_drift,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("all noise sigmas must be finite and >= 0");
        }
        if !(self.turn_noise_multiplier >= 0.0) {
            return bad("turn_noise_multiplier must be >= 0");
        }
        if self.nuc_intervals.iter().any(|n| n.start > n.end || !(n.multiplier >= 0.0)) {
            return bad("NUC intervals need start <= end and multiplier >= 0");
        }
        if !(0.0..1.0).contains(&self.false_loop_rate) {
            return bad("false_loop_rate must lie in [0, 1)");
        }
        if !(self.false_loop_offset >= 0.0) {
            return bad("false_loop_offset must be >= 0");
        }
        if !(self.place_grid_resolution > 0.0) {
            return bad("place_grid_resolution must be > 0");
        }
        if self.observation_dim == 0 {
            return bad("observation_dim must be >= 1");
        }
        if !(self.terrain_amplitude.is_finite() && self.lane_offset.is_finite()) {
            return bad("terrain_amplitude and lane_offset must be finite");
        }
        let lap = self.lap_length();
        if self.shape == Shape::CorridorUturn && lap <= 2.0 * PI * self.uturn_radius() {
            return bad("corridor too short for its U-turns");
        }
        if self.frames_per_lap() < 2 {
            return bad("need at least two frames per lap");
        }
        Ok(())
    }

    pub fn frames_per_lap(&self) -> usize {
        self.n_frames / self.laps
    }

    pub fn lap_length(&self) -> f64 {
        self.step_length * self.frames_per_lap() as f64
    }

    fn uturn_radius(&self) -> f64 {
        1.0
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, tag: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(mix(seed, tag))
}

const STREAM_ODOM: u64 = 1;
const STREAM_OBS: u64 = 2;
const STREAM_LOOPS: u64 = 3;
const STREAM_MEASURE: u64 = 4;
const STREAM_ALIAS: u64 = 5;
const STREAM_JITTER: u64 = 6;

#[derive(Debug, Clone, Copy)]
enum Segment {
    Straight(f64),
    /// Arc of the given length and signed curvature (left positive).
    Arc(f64, f64),
}

impl Segment {
    fn len(&self) -> f64 {
        match *self {
            Segment::Straight(l) | Segment::Arc(l, _) => l,
        }
    }

    /// Planar pose `(x, y, heading)` after travelling `s` from `start`.
    fn advance(&self, start: (f64, f64, f64), s: f64) -> (f64, f64, f64) {
        let (x, y, h) = start;
        match *self {
            Segment::Straight(_) => (x + s * h.cos(), y + s * h.sin(), h),
            Segment::Arc(_, k) => {
                let h1 = h + k * s;
                (x + (h1.sin() - h.sin()) / k, y - (h1.cos() - h.cos()) / k, h1)
            }
        }
    }
}

fn centerline(shape: Shape, lap: f64, uturn_radius: f64) -> Vec<Segment> {
    match shape {
        Shape::SquareLoop => {
            // perimeter = 4 (side − 2R) + 2πR with R = 0.1·side
            let side = lap / (3.2 + 0.2 * PI);
            let r = 0.1 * side;
            let mut segs = Vec::new();
            for _ in 0..4 {
                segs.push(Segment::Straight(side - 2.0 * r));
                segs.push(Segment::Arc(PI / 2.0 * r, 1.0 / r));
            }
            segs
        }
        Shape::FigureEight => {
            let r = lap / (4.0 * PI);
            vec![Segment::Arc(TAU * r, 1.0 / r), Segment::Arc(TAU * r, -1.0 / r)]
        }
        Shape::CorridorUturn => {
            let r = uturn_radius;
            let straight = (lap - TAU * r) / 2.0;
            vec![
                Segment::Straight(straight),
                Segment::Arc(PI * r, 1.0 / r),
                Segment::Straight(straight),
                Segment::Arc(PI * r, 1.0 / r),
            ]
        }
    }
}

/// Planar centerline pose at lap-relative arc length `s ∈ [0, lap)`.
fn centerline_pose(segs: &[Segment], s: f64) -> (f64, f64, f64) {
    let mut start = (0.0, 0.0, 0.0);
    let mut rem = s;
    for (idx, seg) in segs.iter().enumerate() {
        if rem <= seg.len() || idx + 1 == segs.len() {
            return seg.advance(start, rem);
        }
        start = seg.advance(start, seg.len());
        rem -= seg.len();
    }
    start
}

/// Ground-truth trajectory of a world.
pub fn ground_truth(spec: &WorldSpec) -> Result<Vec<Pose6>> {
    spec.validate()?;
    let lap = spec.lap_length();
    let segs = centerline(spec.shape, lap, spec.uturn_radius());
    let period = lap / 2.0;
    let mut rng = stream(spec.seed, STREAM_JITTER);
    let jitter = noise_sigmas(&spec.pose_jitter, 1.0);
    (0..spec.n_frames)
        .map(|k| {
            let s = k as f64 * spec.step_length;
            let (x, y, h) = centerline_pose(&segs, s.rem_euclid(lap));
            let off = spec.lane_offset * s / lap;
            let phase = TAU * s / period;
            let z = spec.terrain_amplitude * phase.sin();
            let dz = spec.terrain_amplitude * TAU / period * phase.cos();
            let nominal = Pose6::new(
                Vector3::new(x - off * h.sin(), y + off * h.cos(), z),
                Vector3::new(0.0, -dz.atan(), crate::geometry::normalize_angle(h)),
            );
            let eps = gaussian6(&mut rng).component_mul(&jitter);
            Ok(nominal.compose(&Pose6::from_vector(&eps))?)
        })
        .collect()
}

/// One noisy relative-motion measurement between consecutive frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdomStep {
    /// Measured pose of frame k+1 in frame k.
    pub meas: Pose6,
    /// Per-axis variance of the injected noise.
    pub cov: Vector6<f64>,
    /// Step lies inside a NUC (degraded sensing) interval.
    pub degraded: bool,
    /// Step is a fast turn (|yaw rate| above the 75th percentile).
    pub turning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueLoop {
    pub i: usize,
    pub j: usize,
    pub rel: Pose6,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScenario {
    pub spec: WorldSpec,
    pub gt_trajectory: Vec<Pose6>,
    pub odometry: Vec<OdomStep>,
    pub observations: Vec<Vec<f64>>,
    pub true_loops: Vec<TrueLoop>,
    pub proposals: Vec<LoopProposal>,
    /// Parallel to `proposals`: true when the proposal was injected as false.
    pub proposal_is_false: Vec<bool>,
}

impl SyntheticScenario {
    pub fn n_frames(&self) -> usize {
        self.gt_trajectory.len()
    }

    pub fn measured_odometry(&self) -> Vec<Pose6> {
        self.odometry.iter().map(|o| o.meas).collect()
    }

    pub fn odometry_covariances(&self) -> Vec<Vector6<f64>> {
        self.odometry.iter().map(|o| o.cov).collect()
    }

    /// True relative motion of step `k`.
    pub fn true_step(&self, k: usize) -> Result<Pose6> {
        Ok(self.gt_trajectory[k].relative(&self.gt_trajectory[k + 1])?)
    }

    /// Regressor input for step `k`: the measured motion plus a degradation flag.
    pub fn odometry_features(&self, k: usize) -> Vec<f64> {
        let o = &self.odometry[k];
        let mut f: Vec<f64> = o.meas.to_vector().iter().copied().collect();
        f.push(if o.degraded { 1.0 } else { 0.0 });
        f
    }

    /// All same-place pairs `(i, i + frames_per_lap)`.
    pub fn revisit_pairs(&self) -> Vec<(usize, usize)> {
        revisit_pairs(&self.spec)
    }

    /// Loop measurement for an arbitrary pair, e.g. one found by place
    /// recognition. Noise and corruption are seeded by the pair itself, so the
    /// result does not depend on how many other pairs were measured.
    pub fn measure_loop(&self, i: usize, j: usize) -> Result<(LoopProposal, bool)> {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        if j >= self.n_frames() {
            return Err(SimError::InvalidSpec(format!("pair ({i}, {j}) out of range")));
        }
        let mut rng = stream(mix(self.spec.seed, STREAM_MEASURE), ((i as u64) << 32) | j as u64);
        let truth = self.gt_trajectory[i].relative(&self.gt_trajectory[j])?;
        let corrupt = rng.random::<f64>() < self.spec.false_loop_rate;
        let base = if corrupt {
            offset_pose(&truth, self.spec.false_loop_offset, &mut rng)
        } else {
            truth
        };
        let (rel, cov) = noisy_loop(&base, &self.spec.loop_noise, &mut rng)?;
        Ok((LoopProposal::new(i, j, rel, cov, 0.0), corrupt))
    }
}

impl SyntheticScenario {
    /// Measurement a registration front end returns for a perceptual alias,
    /// i.e. a pair matched by appearance that is not the same place: it
    /// believes both frames see the same spot and reports a small relative
    /// pose instead of the true displacement. Seeded by the pair.
    pub fn measure_alias(&self, i: usize, j: usize) -> Result<LoopProposal> {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        if j >= self.n_frames() {
            return Err(SimError::InvalidSpec(format!("pair ({i}, {j}) out of range")));
        }
        let mut rng = stream(mix(self.spec.seed, STREAM_ALIAS), ((i as u64) << 32) | j as u64);
        let shift = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 0.0);
        let yaw = rng.random_range(-0.1..0.1);
        let base = Pose6::new(shift, Vector3::new(0.0, 0.0, yaw));
        let (rel, cov) = noisy_loop(&base, &self.spec.loop_noise, &mut rng)?;
        Ok(LoopProposal::new(i, j, rel, cov, 0.0))
    }
}

fn revisit_pairs(spec: &WorldSpec) -> Vec<(usize, usize)> {
    let fpl = spec.frames_per_lap();
    (0..spec.n_frames.saturating_sub(fpl)).map(|i| (i, i + fpl)).collect()
}

fn gaussian6<R: Rng + ?Sized>(rng: &mut R) -> Vector6<f64> {
    Vector6::from_fn(|_, _| rng.sample(StandardNormal))
}

fn noise_sigmas(n: &NoisePair, mult: f64) -> Vector6<f64> {
    let (t, r) = (n.sigma_t * mult, n.sigma_r * mult);
    Vector6::new(t, t, t, r, r, r)
}

/// Right-perturbs `base` by Gaussian noise; returns it with its variance.
fn noisy_loop<R: Rng + ?Sized>(base: &Pose6, noise: &NoisePair, rng: &mut R) -> Result<(Pose6, Vector6<f64>)> {
    let sig = noise_sigmas(noise, 1.0);
    let eps = gaussian6(rng).component_mul(&sig);
    let rel = base.compose(&Pose6::from_vector(&eps))?;
    Ok((rel, sig.component_mul(&sig)))
}

/// Shifts the translation of `p` by `offset` metres in a uniformly random direction.
fn offset_pose<R: Rng + ?Sized>(p: &Pose6, offset: f64, rng: &mut R) -> Pose6 {
    let dir = loop {
        let v = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let n = v.norm();
        if n > 1e-9 {
            break v / n;
        }
    };
    Pose6::new(p.t + offset * dir, p.r)
}

fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Smooth random field over (x, y, heading): trilinear interpolation of
/// hash-seeded Gaussian node vectors on a grid.
struct PlaceField {
    seed: u64,
    res: f64,
    dim: usize,
}

impl PlaceField {
    fn node(&self, ix: i64, iy: i64, ib: usize) -> Vec<f64> {
        let key = mix(mix(mix(self.seed, ix as u64), iy as u64), ib as u64);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(key);
        (0..self.dim).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn signature(&self, x: f64, y: f64, heading: f64) -> Vec<f64> {
        let (gx, gy) = (x / self.res, y / self.res);
        let gb = heading.rem_euclid(TAU) / TAU * HEADING_BINS as f64;
        let (x0, y0, b0) = (gx.floor(), gy.floor(), gb.floor());
        let (fx, fy, fb) = (gx - x0, gy - y0, gb - b0);
        let mut out = vec![0.0; self.dim];
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                for (db, wb) in [(0, 1.0 - fb), (1, fb)] {
                    let w = wx * wy * wb;
                    if w == 0.0 {
                        continue;
                    }
                    let ib = (b0 as usize + db) % HEADING_BINS;
                    let node = self.node(x0 as i64 + dx, y0 as i64 + dy, ib);
                    for (o, v) in out.iter_mut().zip(node) {
                        *o += w * v;
                    }
                }
            }
        }
        out
    }
}

/// Builds a complete scenario from a world description.
pub fn generate(spec: &WorldSpec) -> Result<SyntheticScenario> {
    spec.validate()?;
    let gt = ground_truth(spec)?;
    let n = gt.len();

    // odometry
    let true_steps: Vec<Pose6> = gt.windows(2).map(|w| w[0].relative(&w[1])).collect::<std::result::Result<_, _>>()?;
    // turns are a property of the path, so they are found on the jitter-free nominal poses
    let nominal = ground_truth(&spec.clone().without_jitter())?;
    let yaw_rates: Vec<f64> = nominal
        .windows(2)
        .map(|w| Ok(w[0].relative(&w[1])?.r.z.abs()))
        .collect::<Result<_>>()?;
    let turn_cut = percentile(&yaw_rates, 0.75) + 1e-12;
    let mut rng = stream(spec.seed, STREAM_ODOM);
    let mut odometry = Vec::with_capacity(n - 1);
    for (k, u) in true_steps.iter().enumerate() {
        let turning = yaw_rates[k] > turn_cut;
        let mut mult = if turning { spec.turn_noise_multiplier } else { 1.0 };
        let mut degraded = false;
        for nuc in &spec.nuc_intervals {
            if (nuc.start..nuc.end).contains(&k) {
                mult *= nuc.multiplier;
                degraded = true;
            }
        }
        let sig = noise_sigmas(&spec.odom_noise, mult);
        let eps = gaussian6(&mut rng).component_mul(&sig);
        let biased = Pose6::new(
            u.t * (1.0 + spec.odom_bias.scale),
            Vector3::new(u.r.x, u.r.y, u.r.z + spec.odom_bias.yaw),
        );
        odometry.push(OdomStep {
            meas: biased.compose(&Pose6::from_vector(&eps))?,
            cov: sig.component_mul(&sig),
            degraded,
            turning,
        });
    }

    // observations
    let field = PlaceField {
        seed: spec.place_seed,
        res: spec.place_grid_resolution,
        dim: spec.observation_dim,
    };
    let mut rng = stream(spec.seed, STREAM_OBS);
    let degraded_frames: Vec<bool> = (0..n)
        .map(|k| spec.nuc_intervals.iter().any(|nuc| (nuc.start..nuc.end).contains(&k)))
        .collect();
    let mut dir_rng = stream(spec.place_seed, STREAM_OBS);
    let drift_dirs: Vec<Vec<f64>> = (0..DRIFT_DIMS)
        .map(|_| (0..spec.observation_dim).map(|_| dir_rng.sample(StandardNormal)).collect())
        .collect();
    let innovation = spec.observation_drift * (1.0 - DRIFT_AR * DRIFT_AR).sqrt();
    let mut drift: Vec<f64> = (0..DRIFT_DIMS)
        .map(|_| spec.observation_drift * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut observations = Vec::with_capacity(n);
    for (k, p) in gt.iter().enumerate() {
        if k > 0 {
            for d in drift.iter_mut() {
                *d = DRIFT_AR * *d + innovation * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let sigma = spec.observation_noise * if degraded_frames[k] { 2.0 } else { 1.0 };
        let mut obs = field.signature(p.t.x, p.t.y, p.r.z);
        for o in obs.iter_mut() {
            *o += sigma * rng.sample::<f64, _>(StandardNormal);
        }
        for (a, dir) in drift.iter().zip(&drift_dirs) {
            for (o, v) in obs.iter_mut().zip(dir) {
                *o += a * v;
            }
        }
        observations.push(obs);
    }

    // loops
    let candidates = revisit_pairs(spec);
    let n_true = spec.n_loops.min(candidates.len());
    let chosen: Vec<usize> = match n_true {
        0 => vec![],
        1 => vec![candidates.len() / 2],
        m => (0..m)
            .map(|k| ((k as f64) * (candidates.len() - 1) as f64 / (m - 1) as f64).round() as usize)
            .collect(),
    };
    let true_loops: Vec<TrueLoop> = chosen
        .iter()
        .map(|&c| {
            let (i, j) = candidates[c];
            Ok(TrueLoop { i, j, rel: gt[i].relative(&gt[j])? })
        })
        .collect::<Result<_>>()?;

    let mut rng = stream(spec.seed, STREAM_LOOPS);
    let mut proposals = Vec::new();
    let mut is_false = Vec::new();
    for tl in &true_loops {
        let (rel, cov) = noisy_loop(&tl.rel, &spec.loop_noise, &mut rng)?;
        proposals.push(LoopProposal::new(tl.i, tl.j, rel, cov, 0.0));
        is_false.push(false);
    }
    let n_false = if n_true == 0 {
        0
    } else {
        (spec.false_loop_rate * n_true as f64 / (1.0 - spec.false_loop_rate)).round() as usize
    };
    let mut unused: Vec<usize> = (0..candidates.len()).filter(|c| !chosen.contains(c)).collect();
    for _ in 0..n_false.min(unused.len()) {
        let pick = unused.swap_remove(rng.random_range(0..unused.len()));
        let (i, j) = candidates[pick];
        let truth = gt[i].relative(&gt[j])?;
        let wrong = offset_pose(&truth, spec.false_loop_offset, &mut rng);
        let (rel, cov) = noisy_loop(&wrong, &spec.loop_noise, &mut rng)?;
        proposals.push(LoopProposal::new(i, j, rel, cov, 0.0));
        is_false.push(true);
    }

    Ok(SyntheticScenario {
        spec: spec.clone(),
        gt_trajectory: gt,
        odometry,
        observations,
        true_loops,
        proposals,
        proposal_is_false: is_false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub i: usize,
    pub j: usize,
    pub positive: bool,
}

/// Labels every pair `i < j`: positive when the ground-truth positions are
/// within `distance_threshold` and the headings within `heading_threshold`.
pub fn gt_loop_labels(scenario: &SyntheticScenario, distance_threshold: f64, heading_threshold: f64) -> Vec<LabeledPair> {
    let gt = &scenario.gt_trajectory;
    let mut out = Vec::with_capacity(gt.len() * gt.len().saturating_sub(1) / 2);
    for i in 0..gt.len() {
        for j in (i + 1)..gt.len() {
            let close = (gt[i].t - gt[j].t).norm() <= distance_threshold;
            let aligned = angle_diff(gt[i].r.z, gt[j].r.z).abs() <= heading_threshold;
            out.push(LabeledPair { i, j, positive: close && aligned });
        }
    }
    out
}
