//! Small dense networks and the two trainers built on them: a mixture-density
//! odometry regressor and a triplet-loss place embedding.
//!
//! The networks are deliberately tiny (two tanh hidden layers) so that a full
//! training run takes seconds. Optimization is minibatch SGD with a step-decay
//! learning-rate schedule; everything is driven by a caller-supplied seed.

use nalgebra::{DMatrix, DVector, Vector6};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Pose6;
use crate::loop_detection::Embedding;
use crate::mdn::{self, GmmGrad, GmmParams, MdnError, MdnLossConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearningError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("training data is empty")]
    EmptyData,
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("no valid negative for loop pair ({i}, {j})")]
    NoValidNegative { i: usize, j: usize },
    #[error("loop pair ({i}, {j}) out of range for {n} frames")]
    PairOutOfRange { i: usize, j: usize, n: usize },
    #[error("projector produced a zero-norm output")]
    ZeroNorm,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Mdn(#[from] MdnError),
}

pub type Result<T> = std::result::Result<T, LearningError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Fully connected network: tanh on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

/// Parameter gradients, laid out like [`DenseNet::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w: Vec<DMatrix<f64>>,
    pub b: Vec<DVector<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            w: net.layers.iter().map(|l| DMatrix::zeros(l.w.nrows(), l.w.ncols())).collect(),
            b: net.layers.iter().map(|l| DVector::zeros(l.b.len())).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.w.iter_mut().zip(&other.w) {
            a.zip_apply(b, |x, y| *x += s * y);
        }
        for (a, b) in self.b.iter_mut().zip(&other.b) {
            a.axpy(s, b, 1.0);
        }
    }

    pub fn norm(&self) -> f64 {
        let sq: f64 = self.w.iter().map(|m| m.norm_squared()).sum::<f64>()
            + self.b.iter().map(|v| v.norm_squared()).sum::<f64>();
        sq.sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.w.iter().all(|m| m.iter().all(|v| *v == 0.0))
            && self.b.iter().all(|v| v.iter().all(|x| *x == 0.0))
    }
}

/// On-disk form: shapes plus row-major weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheckpoint {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub layers: Vec<LayerCheckpoint>,
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    w: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-a..a)),
                    b: DVector::zeros(fan_out),
                }
            })
            .collect();
        DenseNet { layers }
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[1].w.ncols() != pair[0].w.nrows() {
                return Err(LearningError::ShapeMismatch {
                    expected: pair[0].w.nrows(),
                    got: pair[1].w.ncols(),
                });
            }
        }
        for l in &layers {
            if l.b.len() != l.w.nrows() {
                return Err(LearningError::ShapeMismatch {
                    expected: l.w.nrows(),
                    got: l.b.len(),
                });
            }
        }
        Ok(DenseNet { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.nrows())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(LearningError::ShapeMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Activations of every layer, input first, output last.
    fn activations(&self, x: &[f64]) -> Vec<DVector<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(DVector::from_column_slice(x));
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.b + &layer.w * acts.last().unwrap();
            if i < last {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(z);
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_input(x)?;
        Ok(self.activations(x).pop().unwrap())
    }

    /// Gradients of `⟨upstream, forward(x)⟩` w.r.t. every parameter.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Gradients> {
        self.check_input(x)?;
        let acts = self.activations(x);
        self.backward_from(&acts, upstream)
    }

    fn backward_from(&self, acts: &[DVector<f64>], upstream: &[f64]) -> Result<Gradients> {
        if upstream.len() != self.output_dim() {
            return Err(LearningError::ShapeMismatch {
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        let n = self.layers.len();
        let mut gw = Vec::with_capacity(n);
        let mut gb = Vec::with_capacity(n);
        let mut delta = DVector::from_column_slice(upstream);
        for i in (0..n).rev() {
            gw.push(&delta * acts[i].transpose());
            gb.push(delta.clone());
            if i > 0 {
                let mut back = self.layers[i].w.tr_mul(&delta);
                // acts[i] is tanh output of the previous layer
                back.zip_apply(&acts[i], |g, h| *g *= 1.0 - h * h);
                delta = back;
            }
        }
        gw.reverse();
        gb.reverse();
        Ok(Gradients { w: gw, b: gb })
    }

    pub fn sgd_step(&mut self, grad: &Gradients, lr: f64) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(grad.w.iter().zip(&grad.b)) {
            layer.w.zip_apply(gw, |x, g| *x -= lr * g);
            layer.b.axpy(-lr, gb, 1.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    pub fn to_checkpoint(&self) -> NetCheckpoint {
        NetCheckpoint {
            layers: self
                .layers
                .iter()
                .map(|l| LayerCheckpoint {
                    rows: l.w.nrows(),
                    cols: l.w.ncols(),
                    weights: l.w.transpose().as_slice().to_vec(),
                    bias: l.b.as_slice().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &NetCheckpoint) -> Result<Self> {
        let layers = ck
            .layers
            .iter()
            .map(|l| {
                if l.weights.len() != l.rows * l.cols {
                    return Err(LearningError::ShapeMismatch {
                        expected: l.rows * l.cols,
                        got: l.weights.len(),
                    });
                }
                Ok(Layer {
                    w: DMatrix::from_row_slice(l.rows, l.cols, &l.weights),
                    b: DVector::from_column_slice(&l.bias),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DenseNet::from_layers(layers)
    }
}

/// Per-dimension affine normalization fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Constant columns get unit scale.
    pub fn fit<'a, I: IntoIterator<Item = &'a [f64]>>(rows: I, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for row in rows {
            n += 1;
            for d in 0..dim {
                sum[d] += row[d];
                sq[d] += row[d] * row[d];
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / n - m * m).max(0.0);
                let sd = var.sqrt();
                if sd > 1e-12 * (1.0 + m.abs()) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Multiplicative learning-rate factor applied every `decay_interval` epochs.
    pub lr_decay: f64,
    pub decay_interval: usize,
    pub hidden_width: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub optimizer: Optimizer,
}

/// Parameter update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// `θ ← θ − lr·g`
    #[default]
    Sgd,
    /// Per-parameter step scaled by a running RMS of past gradients
    /// (decay 0.9, ε = 1e-8).
    RmsProp,
}

const RMSPROP_DECAY: f64 = 0.9;
const RMSPROP_EPS: f64 = 1e-8;

/// Optimizer state carried across steps.
struct Stepper {
    kind: Optimizer,
    mean_sq: Option<Gradients>,
}

impl Stepper {
    fn new(kind: Optimizer) -> Self {
        Stepper { kind, mean_sq: None }
    }

    fn step(&mut self, net: &mut DenseNet, grad: &Gradients, lr: f64) {
        match self.kind {
            Optimizer::Sgd => net.sgd_step(grad, lr),
            Optimizer::RmsProp => {
                let ms = self.mean_sq.get_or_insert_with(|| Gradients::zeros_like(net));
                let d = RMSPROP_DECAY;
                let scaled_w = ms.w.iter_mut().zip(&grad.w).map(|(m, g)| {
                    m.zip_apply(g, |m, g| *m = d * *m + (1.0 - d) * g * g);
                    g.zip_map(m, |g, m| g / (m.sqrt() + RMSPROP_EPS))
                });
                let w: Vec<_> = scaled_w.collect();
                let b: Vec<_> = ms
                    .b
                    .iter_mut()
                    .zip(&grad.b)
                    .map(|(m, g)| {
                        m.zip_apply(g, |m, g| *m = d * *m + (1.0 - d) * g * g);
                        g.zip_map(m, |g, m| g / (m.sqrt() + RMSPROP_EPS))
                    })
                    .collect();
                net.sgd_step(&Gradients { w, b }, lr);
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 100,
            batch_size: 16,
            seed: 1,
            lr_decay: 0.75,
            decay_interval: 25,
            hidden_width: 32,
            grad_clip: 5.0,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LearningError::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.decay_interval == 0 || self.hidden_width == 0 {
            return Err(LearningError::InvalidConfig(
                "epochs, batch_size, decay_interval and hidden_width must be >= 1".into(),
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(LearningError::InvalidConfig("lr_decay must be in (0, 1]".into()));
        }
        if self.grad_clip < 0.0 {
            return Err(LearningError::InvalidConfig("grad_clip must be >= 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi((epoch / self.decay_interval) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletConfig {
    /// Margin between positive and negative squared distances.
    pub lambda: f64,
    /// Frames within this index distance of the anchor or positive never serve as negatives.
    pub adjacency_exclusion: usize,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            lambda: 0.2,
            adjacency_exclusion: 18,
        }
    }
}

impl TripletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(LearningError::InvalidConfig("lambda must be > 0".into()));
        }
        Ok(())
    }
}

/// Result of a training run: the model and the per-epoch mean loss, with the
/// loss of the untrained model at index 0.
#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub curve: Vec<f64>,
}

impl<M> Trained<M> {
    /// CSV with header `epoch,loss`.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (e, l) in self.curve.iter().enumerate() {
            s.push_str(&format!("{e},{l}\n"));
        }
        s
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max(λ + ‖a−p‖² − ‖a−n‖², 0)`.
pub fn triplet_loss(a: &Embedding, p: &Embedding, n: &Embedding, cfg: &TripletConfig) -> Result<f64> {
    Ok(triplet_loss_grad(a.as_slice(), p.as_slice(), n.as_slice(), cfg)?.0)
}

/// Triplet loss and its (sub)gradients w.r.t. anchor, positive and negative.
pub fn triplet_loss_grad(
    a: &[f64],
    p: &[f64],
    n: &[f64],
    cfg: &TripletConfig,
) -> Result<(f64, [Vec<f64>; 3])> {
    for v in [p, n] {
        if v.len() != a.len() {
            return Err(LearningError::ShapeMismatch {
                expected: a.len(),
                got: v.len(),
            });
        }
    }
    let raw = cfg.lambda + sq_dist(a, p) - sq_dist(a, n);
    let dim = a.len();
    if raw <= 0.0 {
        return Ok((0.0, [vec![0.0; dim], vec![0.0; dim], vec![0.0; dim]]));
    }
    let ga = (0..dim).map(|k| 2.0 * (n[k] - p[k])).collect();
    let gp = (0..dim).map(|k| -2.0 * (a[k] - p[k])).collect();
    let gn = (0..dim).map(|k| 2.0 * (a[k] - n[k])).collect();
    Ok((raw, [ga, gp, gn]))
}

/// Output layout of the mixture heads: translation head then rotation head,
/// each `[logits K | means K×3 | log σ K×3]`.
fn head_width(k: usize) -> usize {
    k * 7
}

fn split_head(out: &[f64], k: usize) -> Result<GmmParams> {
    let logits = &out[..k];
    let mus = (0..k).map(|c| out[k + 3 * c..k + 3 * c + 3].to_vec()).collect();
    let ls: Vec<Vec<f64>> = (0..k)
        .map(|c| out[4 * k + 3 * c..4 * k + 3 * c + 3].to_vec())
        .collect();
    Ok(GmmParams::from_unconstrained(logits, mus, &ls)?)
}

fn write_head_grad(g: &GmmGrad, scale: f64, k: usize, dst: &mut [f64]) {
    for c in 0..k {
        dst[c] = scale * g.logits[c];
        for d in 0..3 {
            dst[k + 3 * c + d] = scale * g.mus[c][d];
            dst[4 * k + 3 * c + d] = scale * g.log_sigmas[c][d];
        }
    }
}

/// Dense trunk with translation and rotation mixture heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MdnRegressor {
    pub net: DenseNet,
    pub k: usize,
    pub input_norm: Standardizer,
    /// Targets are regressed in standardized units `[tx, ty, tz, roll, pitch, yaw]`.
    pub target_norm: Standardizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdnCheckpoint {
    pub k: usize,
    pub input_norm: Standardizer,
    pub target_norm: Standardizer,
    pub net: NetCheckpoint,
}

impl MdnRegressor {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: usize,
        k: usize,
        input_norm: Standardizer,
        target_norm: Standardizer,
        rng: &mut R,
    ) -> Self {
        let net = DenseNet::new(&[input_dim, hidden, hidden, 2 * head_width(k)], rng);
        MdnRegressor {
            net,
            k,
            input_norm,
            target_norm,
        }
    }

    fn heads_normalized(&self, out: &[f64]) -> Result<(GmmParams, GmmParams)> {
        let w = head_width(self.k);
        Ok((split_head(&out[..w], self.k)?, split_head(&out[w..], self.k)?))
    }

    /// Loss and output-layer gradient in standardized target units.
    fn loss_and_upstream(&self, out: &[f64], target: &[f64; 6], cfg: &MdnLossConfig) -> Result<(f64, Vec<f64>)> {
        let (th, rh) = self.heads_normalized(out)?;
        let (lt, gt) = mdn::gmm_nll_grad(&th, &target[..3])?;
        let (lr, gr) = mdn::gmm_nll_grad(&rh, &target[3..])?;
        let w = head_width(self.k);
        let mut up = vec![0.0; 2 * w];
        write_head_grad(&gt, 1.0, self.k, &mut up[..w]);
        write_head_grad(&gr, cfg.beta, self.k, &mut up[w..]);
        Ok((lt + cfg.beta * lr, up))
    }

    fn normalized_target(&self, target: &Pose6) -> [f64; 6] {
        let v = target.to_vector();
        let n = self.target_norm.apply(v.as_slice());
        [n[0], n[1], n[2], n[3], n[4], n[5]]
    }

    /// Pose loss of one sample in standardized units.
    pub fn loss(&self, feature: &[f64], target: &Pose6, cfg: &MdnLossConfig) -> Result<f64> {
        let out = self.net.forward(&self.input_norm.apply(feature))?;
        let (th, rh) = self.heads_normalized(out.as_slice())?;
        let t = self.normalized_target(target);
        let tp = Pose6::from_vector(&Vector6::from_column_slice(&t));
        Ok(mdn::mdn_pose_loss(&th, &rh, &tp, cfg)?)
    }

    /// Loss and parameter gradients of one sample.
    pub fn loss_grad(&self, feature: &[f64], target: &Pose6, cfg: &MdnLossConfig) -> Result<(f64, Gradients)> {
        let x = self.input_norm.apply(feature);
        self.net.check_input(&x)?;
        let acts = self.net.activations(&x);
        let t = self.normalized_target(target);
        let (loss, up) = self.loss_and_upstream(acts.last().unwrap().as_slice(), &t, cfg)?;
        Ok((loss, self.net.backward_from(&acts, &up)?))
    }

    /// Mixture heads in physical units.
    pub fn predict(&self, feature: &[f64]) -> Result<(GmmParams, GmmParams)> {
        let out = self.net.forward(&self.input_norm.apply(feature))?;
        let (mut th, mut rh) = self.heads_normalized(out.as_slice())?;
        for (head, offset) in [(&mut th, 0), (&mut rh, 3)] {
            for c in 0..self.k {
                for d in 0..3 {
                    let s = self.target_norm.scale[offset + d];
                    head.mus[c][d] = head.mus[c][d] * s + self.target_norm.mean[offset + d];
                    head.sigmas[c][d] *= s;
                }
            }
        }
        Ok((th, rh))
    }

    /// Dominant-mode pose and its per-axis variances.
    pub fn predict_pose(&self, feature: &[f64]) -> Result<(Pose6, Vector6<f64>)> {
        let (t, r) = self.predict(feature)?;
        Ok(mdn::mode_pose(&t, &r)?)
    }

    /// Mixture-mean pose and total per-axis variances.
    pub fn predict_mean_pose(&self, feature: &[f64]) -> Result<(Pose6, Vector6<f64>)> {
        let (t, r) = self.predict(feature)?;
        Ok(mdn::mixture_mean_pose(&t, &r)?)
    }

    pub fn to_checkpoint(&self) -> MdnCheckpoint {
        MdnCheckpoint {
            k: self.k,
            input_norm: self.input_norm.clone(),
            target_norm: self.target_norm.clone(),
            net: self.net.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &MdnCheckpoint) -> Result<Self> {
        let net = DenseNet::from_checkpoint(&ck.net)?;
        if net.output_dim() != 2 * head_width(ck.k) {
            return Err(LearningError::ShapeMismatch {
                expected: 2 * head_width(ck.k),
                got: net.output_dim(),
            });
        }
        Ok(MdnRegressor {
            net,
            k: ck.k,
            input_norm: ck.input_norm.clone(),
            target_norm: ck.target_norm.clone(),
        })
    }
}

fn clip(grad: &mut Gradients, max_norm: f64) {
    if max_norm > 0.0 {
        let n = grad.norm();
        if n > max_norm {
            let s = max_norm / n;
            for m in &mut grad.w {
                *m *= s;
            }
            for v in &mut grad.b {
                *v *= s;
            }
        }
    }
}

/// Generic minibatch driver. `sample_grad` returns the loss and gradient of
/// one sample index; `eval` the mean loss over the whole set.
fn run_sgd<F, E>(
    net: &mut DenseNet,
    n: usize,
    cfg: &TrainConfig,
    rng: &mut Xoshiro256PlusPlus,
    mut sample_grad: F,
    mut eval: E,
) -> Result<Vec<f64>>
where
    F: FnMut(&DenseNet, usize) -> Result<(f64, Gradients)>,
    E: FnMut(&DenseNet) -> Result<f64>,
{
    let mut curve = Vec::with_capacity(cfg.epochs + 1);
    let l0 = eval(net)?;
    if !l0.is_finite() {
        return Err(LearningError::Diverged { epoch: 0 });
    }
    curve.push(l0);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stepper = Stepper::new(cfg.optimizer);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = Gradients::zeros_like(net);
            for &i in batch {
                let (loss, g) = sample_grad(net, i)?;
                if !loss.is_finite() {
                    return Err(LearningError::Diverged { epoch: epoch + 1 });
                }
                acc.add_scaled(&g, 1.0 / batch.len() as f64);
            }
            clip(&mut acc, cfg.grad_clip);
            stepper.step(net, &acc, lr);
        }
        let l = eval(net)?;
        if !l.is_finite() || !net.is_finite() {
            return Err(LearningError::Diverged { epoch: epoch + 1 });
        }
        curve.push(l);
    }
    Ok(curve)
}

/// Trains a mixture-density odometry regressor on `(feature, relative pose)` pairs.
pub fn train_mdn_regressor(
    data: &[(Vec<f64>, Pose6)],
    cfg: &TrainConfig,
    loss_cfg: &MdnLossConfig,
) -> Result<Trained<MdnRegressor>> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if data.is_empty() {
        return Err(LearningError::EmptyData);
    }
    let in_dim = data[0].0.len();
    if let Some((f, _)) = data.iter().find(|(f, _)| f.len() != in_dim) {
        return Err(LearningError::ShapeMismatch {
            expected: in_dim,
            got: f.len(),
        });
    }
    let input_norm = Standardizer::fit(data.iter().map(|(f, _)| f.as_slice()), in_dim);
    let targets: Vec<Vector6<f64>> = data.iter().map(|(_, t)| t.to_vector()).collect();
    let target_norm = Standardizer::fit(targets.iter().map(|v| v.as_slice()), 6);

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut model = MdnRegressor::new(in_dim, cfg.hidden_width, loss_cfg.k, input_norm, target_norm, &mut rng);
    // Inputs and targets are normalized once up front.
    let xs: Vec<Vec<f64>> = data.iter().map(|(f, _)| model.input_norm.apply(f)).collect();
    let ts: Vec<[f64; 6]> = data.iter().map(|(_, t)| model.normalized_target(t)).collect();

    let shell = MdnRegressor {
        net: DenseNet { layers: vec![] },
        ..model.clone()
    };
    let mean_loss = |net: &DenseNet| -> Result<f64> {
        let mut total = 0.0;
        for (x, t) in xs.iter().zip(&ts) {
            let out = net.activations(x).pop().unwrap();
            total += shell.loss_and_upstream(out.as_slice(), t, loss_cfg)?.0;
        }
        Ok(total / xs.len() as f64)
    };
    let curve = run_sgd(
        &mut model.net,
        data.len(),
        cfg,
        &mut rng,
        |net, i| {
            let acts = net.activations(&xs[i]);
            let (loss, up) = shell.loss_and_upstream(acts.last().unwrap().as_slice(), &ts[i], loss_cfg)?;
            Ok((loss, net.backward_from(&acts, &up)?))
        },
        mean_loss,
    )?;
    Ok(Trained { model, curve })
}

/// Dense network followed by L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub net: DenseNet,
    pub input_norm: Standardizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorCheckpoint {
    pub input_norm: Standardizer,
    pub net: NetCheckpoint,
}

impl Projector {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: usize, embed_dim: usize, input_norm: Standardizer, rng: &mut R) -> Self {
        Projector {
            net: DenseNet::new(&[input_dim, hidden, hidden, embed_dim], rng),
            input_norm,
        }
    }

    pub fn embed(&self, x: &[f64]) -> Result<Embedding> {
        let y = self.net.forward(&self.input_norm.apply(x))?;
        Embedding::from_raw(y.as_slice().to_vec()).map_err(|_| LearningError::ZeroNorm)
    }

    /// Unit embedding of a normalized input, plus the cached activations and raw norm.
    fn embed_cached(net: &DenseNet, x: &[f64]) -> Result<(Vec<f64>, Vec<DVector<f64>>, f64)> {
        let acts = net.activations(x);
        let y = acts.last().unwrap();
        let norm = y.norm();
        if !(norm > 0.0) {
            return Err(LearningError::ZeroNorm);
        }
        Ok(((y / norm).as_slice().to_vec(), acts, norm))
    }

    /// Chain rule through `y ↦ y/‖y‖`.
    fn normalize_backward(e: &[f64], norm: f64, g: &[f64]) -> Vec<f64> {
        let dot: f64 = e.iter().zip(g).map(|(a, b)| a * b).sum();
        e.iter().zip(g).map(|(ei, gi)| (gi - ei * dot) / norm).collect()
    }

    fn triplet_grad(net: &DenseNet, xs: [&[f64]; 3], tcfg: &TripletConfig) -> Result<(f64, Gradients)> {
        let a = Self::embed_cached(net, xs[0])?;
        let p = Self::embed_cached(net, xs[1])?;
        let n = Self::embed_cached(net, xs[2])?;
        let (loss, gs) = triplet_loss_grad(&a.0, &p.0, &n.0, tcfg)?;
        let mut total = Gradients::zeros_like(net);
        if loss > 0.0 {
            for ((e, acts, norm), g) in [a, p, n].iter().zip(gs.iter()) {
                let up = Self::normalize_backward(e, *norm, g);
                total.add_scaled(&net.backward_from(acts, &up)?, 1.0);
            }
        }
        Ok((loss, total))
    }

    /// Triplet loss of raw observations, with parameter gradients.
    pub fn triplet_loss_grad(&self, a: &[f64], p: &[f64], n: &[f64], tcfg: &TripletConfig) -> Result<(f64, Gradients)> {
        let (a, p, n) = (self.input_norm.apply(a), self.input_norm.apply(p), self.input_norm.apply(n));
        for x in [&a, &p, &n] {
            self.net.check_input(x)?;
        }
        Self::triplet_grad(&self.net, [&a, &p, &n], tcfg)
    }

    pub fn to_checkpoint(&self) -> ProjectorCheckpoint {
        ProjectorCheckpoint {
            input_norm: self.input_norm.clone(),
            net: self.net.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(ck: &ProjectorCheckpoint) -> Result<Self> {
        Ok(Projector {
            net: DenseNet::from_checkpoint(&ck.net)?,
            input_norm: ck.input_norm.clone(),
        })
    }
}

fn as_refs(t: &[Vec<f64>; 3]) -> [&[f64]; 3] {
    [t[0].as_slice(), t[1].as_slice(), t[2].as_slice()]
}

/// Observation-vector triplet `(anchor, positive, negative)`.
pub type Triplet = (Vec<f64>, Vec<f64>, Vec<f64>);

/// Trains a place-embedding projector with the triplet margin loss.
pub fn train_embedding(
    triplets: &[Triplet],
    embed_dim: usize,
    cfg: &TrainConfig,
    tcfg: &TripletConfig,
) -> Result<Trained<Projector>> {
    cfg.validate()?;
    tcfg.validate()?;
    if triplets.is_empty() {
        return Err(LearningError::EmptyData);
    }
    if embed_dim == 0 {
        return Err(LearningError::InvalidConfig("embedding dimension must be >= 1".into()));
    }
    let in_dim = triplets[0].0.len();
    for (a, p, n) in triplets {
        for v in [a, p, n] {
            if v.len() != in_dim {
                return Err(LearningError::ShapeMismatch {
                    expected: in_dim,
                    got: v.len(),
                });
            }
        }
    }
    let input_norm = Standardizer::fit(
        triplets.iter().flat_map(|(a, p, n)| [a.as_slice(), p.as_slice(), n.as_slice()]),
        in_dim,
    );
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let mut model = Projector::new(in_dim, cfg.hidden_width, embed_dim, input_norm, &mut rng);
    let norm: Vec<[Vec<f64>; 3]> = triplets
        .iter()
        .map(|(a, p, n)| {
            [
                model.input_norm.apply(a),
                model.input_norm.apply(p),
                model.input_norm.apply(n),
            ]
        })
        .collect();

    let curve = run_sgd(
        &mut model.net,
        triplets.len(),
        cfg,
        &mut rng,
        |net, i| Projector::triplet_grad(net, as_refs(&norm[i]), tcfg),
        |net| {
            let mut total = 0.0;
            for t in &norm {
                let [a, p, n] = as_refs(t);
                let ea = Projector::embed_cached(net, a)?.0;
                let ep = Projector::embed_cached(net, p)?.0;
                let en = Projector::embed_cached(net, n)?.0;
                total += triplet_loss_grad(&ea, &ep, &en, tcfg)?.0;
            }
            Ok(total / norm.len() as f64)
        },
    )?;
    Ok(Trained { model, curve })
}

/// Builds `(anchor, positive, negative)` frame-index triplets from loop pairs.
///
/// Every pair contributes two triplets, once with each member as the anchor.
/// Negatives are drawn uniformly from frames that are neither member of the
/// pair nor within `adjacency_exclusion` frames of either.
pub fn mine_triplets<R: Rng + ?Sized>(
    loop_pairs: &[(usize, usize)],
    n_frames: usize,
    tcfg: &TripletConfig,
    rng: &mut R,
) -> Result<Vec<(usize, usize, usize)>> {
    let ex = tcfg.adjacency_exclusion;
    let mut out = Vec::with_capacity(2 * loop_pairs.len());
    for &(i, j) in loop_pairs {
        if i >= n_frames || j >= n_frames {
            return Err(LearningError::PairOutOfRange { i, j, n: n_frames });
        }
        let allowed: Vec<usize> = (0..n_frames)
            .filter(|&f| f.abs_diff(i) > ex && f.abs_diff(j) > ex)
            .collect();
        if allowed.is_empty() {
            return Err(LearningError::NoValidNegative { i, j });
        }
        for (anchor, positive) in [(i, j), (j, i)] {
            let neg = allowed[rng.random_range(0..allowed.len())];
            out.push((anchor, positive, neg));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    fn rng(seed: u64) -> Xoshiro256PlusPlus {
        Xoshiro256PlusPlus::seed_from_u64(seed)
    }

    /// Independent forward pass on plain nested loops.
    fn forward_oracle(net: &DenseNet, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (li, l) in net.layers.iter().enumerate() {
            let mut z = vec![0.0; l.w.nrows()];
            for r in 0..l.w.nrows() {
                let mut acc = l.b[r];
                for c in 0..l.w.ncols() {
                    acc += l.w[(r, c)] * h[c];
                }
                z[r] = if li + 1 < net.layers.len() { acc.tanh() } else { acc };
            }
            h = z;
        }
        h
    }

    fn rel_close(a: f64, n: f64, tol: f64) {
        let scale = a.abs().max(n.abs()).max(1e-4);
        assert!((a - n).abs() / scale < tol, "analytic {a} vs numeric {n}");
    }

    /// Central differences of `f` over every parameter of `net`.
    fn check_param_grad<F: Fn(&DenseNet) -> f64>(net: &DenseNet, g: &Gradients, f: F) {
        let h = 1e-6;
        for l in 0..net.layers.len() {
            for idx in 0..net.layers[l].w.len() {
                let mut p = net.clone();
                let mut m = net.clone();
                p.layers[l].w[idx] += h;
                m.layers[l].w[idx] -= h;
                rel_close(g.w[l][idx], (f(&p) - f(&m)) / (2.0 * h), 1e-4);
            }
            for idx in 0..net.layers[l].b.len() {
                let mut p = net.clone();
                let mut m = net.clone();
                p.layers[l].b[idx] += h;
                m.layers[l].b[idx] -= h;
                rel_close(g.b[l][idx], (f(&p) - f(&m)) / (2.0 * h), 1e-4);
            }
        }
    }

    #[test]
    fn zero_net_outputs_zero() {
        let mut net = DenseNet::new(&[3, 4, 2], &mut rng(1));
        for l in &mut net.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
        assert_eq!(net.forward(&[1.0, 2.0, 3.0]).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let w = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]);
        let b = DVector::from_column_slice(&[0.1, -0.2]);
        let net = DenseNet::from_layers(vec![Layer { w: w.clone(), b: b.clone() }]).unwrap();
        let x = [0.3, -0.7, 1.1];
        let y = net.forward(&x).unwrap();
        assert_eq!(y, w * DVector::from_column_slice(&x) + b);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let net = DenseNet::new(&[5, 7, 6, 3], &mut rng(4));
        let x = [0.2, -1.0, 0.5, 0.9, -0.3];
        let y = net.forward(&x).unwrap();
        for (a, b) in y.iter().zip(forward_oracle(&net, &x)) {
            assert_relative_eq!(*a, b, max_relative = 1e-13);
        }
    }

    #[test]
    fn shape_errors() {
        let net = DenseNet::new(&[3, 2], &mut rng(1));
        assert!(matches!(net.forward(&[1.0]), Err(LearningError::ShapeMismatch { expected: 3, got: 1 })));
        assert!(net.backward(&[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = DenseNet::new(&[4, 5, 5, 3], &mut rng(9));
        let x = [0.5, -0.2, 0.8, 0.1];
        let up = [0.3, -1.2, 0.7];
        let g = net.backward(&x, &up).unwrap();
        check_param_grad(&net, &g, |n| {
            n.forward(&x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
        });
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let net = DenseNet::new(&[4, 5, 3], &mut rng(9));
        assert!(net.backward(&[1.0, 0.0, -1.0, 2.0], &[0.0; 3]).unwrap().is_zero());
    }

    #[test]
    fn linear_weight_gradient_is_outer_product() {
        let net = DenseNet::new(&[3, 2], &mut rng(2));
        let x = [1.0, -2.0, 0.5];
        let up = [0.4, 3.0];
        let g = net.backward(&x, &up).unwrap();
        let expected = DVector::from_column_slice(&up) * DVector::from_column_slice(&x).transpose();
        assert_eq!(g.w[0], expected);
        assert_eq!(g.b[0].as_slice(), &up);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = DenseNet::new(&[3, 4, 2], &mut rng(5));
        let json = serde_json::to_string(&net.to_checkpoint()).unwrap();
        let back = DenseNet::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(net, back);
        // row-major layout
        let ck = net.to_checkpoint();
        assert_eq!(ck.layers[0].weights[1], net.layers[0].w[(0, 1)]);
    }

    #[test]
    fn triplet_loss_cases() {
        let cfg = TripletConfig { lambda: 0.2, adjacency_exclusion: 18 };
        let a = Embedding::from_raw(vec![1.0, 0.0, 0.0]).unwrap();
        // ‖a − n‖² = 0.5 for a unit vector at 60°
        let n = Embedding::from_raw(vec![0.75, (1.0f64 - 0.5625).sqrt(), 0.0]).unwrap();
        assert_relative_eq!(sq_dist(a.as_slice(), n.as_slice()), 0.5, epsilon = 1e-12);
        assert_eq!(triplet_loss(&a, &a, &n, &cfg).unwrap(), 0.0);

        let p = Embedding::from_raw(vec![0.0, 1.0, 0.0]).unwrap();
        let q = Embedding::from_raw(vec![0.0, 0.0, 1.0]).unwrap();
        assert_relative_eq!(triplet_loss(&a, &p, &q, &cfg).unwrap(), 0.2, epsilon = 1e-12);

        let short = Embedding::from_raw(vec![1.0, 0.0]).unwrap();
        assert!(triplet_loss(&a, &short, &q, &cfg).is_err());
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let cfg = TripletConfig { lambda: 0.5, adjacency_exclusion: 0 };
        let a = vec![0.3, -0.1, 0.8];
        let p = vec![0.5, 0.4, -0.2];
        let n = vec![0.2, 0.0, 0.6];
        let (loss, g) = triplet_loss_grad(&a, &p, &n, &cfg).unwrap();
        assert!(loss > 0.0);
        let f = |a: &[f64], p: &[f64], n: &[f64]| triplet_loss_grad(a, p, n, &cfg).unwrap().0;
        let h = 1e-6;
        for k in 0..3 {
            for (which, grad) in g.iter().enumerate() {
                let mut v = [a.clone(), p.clone(), n.clone()];
                v[which][k] += h;
                let up = f(&v[0], &v[1], &v[2]);
                v[which][k] -= 2.0 * h;
                let dn = f(&v[0], &v[1], &v[2]);
                rel_close(grad[k], (up - dn) / (2.0 * h), 1e-6);
            }
        }
    }

    #[test]
    fn mdn_regressor_gradient_end_to_end() {
        let mut r = rng(12);
        let model = MdnRegressor::new(4, 6, 3, Standardizer::identity(4), Standardizer::identity(6), &mut r);
        let cfg = MdnLossConfig { beta: 3.0, k: 3 };
        let x = [0.2, -0.5, 0.9, 0.1];
        let target = Pose6::new(Vector3::new(0.3, -0.2, 0.1), Vector3::new(0.05, 0.0, -0.4));
        let (loss, g) = model.loss_grad(&x, &target, &cfg).unwrap();
        assert_relative_eq!(loss, model.loss(&x, &target, &cfg).unwrap(), max_relative = 1e-12);
        check_param_grad(&model.net, &g, |net| {
            let m = MdnRegressor { net: net.clone(), ..model.clone() };
            m.loss(&x, &target, &cfg).unwrap()
        });
    }

    #[test]
    fn projector_triplet_gradient_end_to_end() {
        let mut r = rng(21);
        let proj = Projector::new(5, 6, 4, Standardizer::identity(5), &mut r);
        let cfg = TripletConfig { lambda: 1.5, adjacency_exclusion: 0 };
        let a = [0.1, 0.2, -0.3, 0.4, 0.5];
        let p = [0.5, -0.2, 0.3, 0.0, -0.5];
        let n = [0.1, 0.25, -0.3, 0.35, 0.5];
        let (loss, g) = proj.triplet_loss_grad(&a, &p, &n, &cfg).unwrap();
        assert!(loss > 0.0);
        check_param_grad(&proj.net, &g, |net| {
            let q = Projector { net: net.clone(), input_norm: proj.input_norm.clone() };
            let (ea, ep, en) = (q.embed(&a).unwrap(), q.embed(&p).unwrap(), q.embed(&n).unwrap());
            triplet_loss(&ea, &ep, &en, &cfg).unwrap()
        });
    }

    #[test]
    fn projector_outputs_unit_norm() {
        let proj = Projector::new(3, 8, 16, Standardizer::identity(3), &mut rng(3));
        for x in [[1.0, 2.0, 3.0], [-0.1, 0.0, 0.4], [10.0, -10.0, 0.0]] {
            let e = proj.embed(&x).unwrap();
            assert_relative_eq!(e.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn lr_schedule_steps_down() {
        let cfg = TrainConfig { learning_rate: 1.0, ..Default::default() };
        assert_eq!(cfg.lr_at(0), 1.0);
        assert_eq!(cfg.lr_at(24), 1.0);
        assert_eq!(cfg.lr_at(25), 0.75);
        assert_eq!(cfg.lr_at(50), 0.5625);
    }

    #[test]
    fn mining_respects_exclusion_and_doubles_pairs() {
        let tcfg = TripletConfig { lambda: 0.2, adjacency_exclusion: 18 };
        let mut r = rng(7);
        let trips = mine_triplets(&[(0, 100)], 200, &tcfg, &mut r).unwrap();
        assert_eq!(trips.len(), 2);
        assert_eq!((trips[0].0, trips[0].1), (0, 100));
        assert_eq!((trips[1].0, trips[1].1), (100, 0));
        let mut r = rng(8);
        let many: Vec<(usize, usize)> = (0..300).map(|_| (0, 100)).collect();
        for (_, _, n) in mine_triplets(&many, 200, &tcfg, &mut r).unwrap() {
            assert!(n > 18 && !(82..=118).contains(&n), "negative {n} inside exclusion band");
        }
        let pairs = [(3, 50), (20, 120), (60, 190)];
        assert_eq!(mine_triplets(&pairs, 200, &tcfg, &mut r).unwrap().len(), 6);
    }

    #[test]
    fn mining_is_deterministic_and_reports_failures() {
        let tcfg = TripletConfig::default();
        let pairs = [(5, 90), (10, 150)];
        let a = mine_triplets(&pairs, 200, &tcfg, &mut rng(1)).unwrap();
        let b = mine_triplets(&pairs, 200, &tcfg, &mut rng(1)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            mine_triplets(&[(0, 20)], 30, &tcfg, &mut rng(1)),
            Err(LearningError::NoValidNegative { i: 0, j: 20 })
        ));
        assert!(mine_triplets(&[(0, 300)], 30, &tcfg, &mut rng(1)).is_err());
    }

    #[test]
    fn embedding_trivial_triplets_start_at_zero_loss() {
        let a = vec![1.0, 0.0, 0.0, 0.0];
        let n = vec![0.0, 1.0, 0.0, 0.0];
        // identical anchor/positive, an orthogonal negative, margin satisfied
        let proj = Projector::new(4, 8, 8, Standardizer::identity(4), &mut rng(1));
        let cfg = TripletConfig { lambda: 1e-9, adjacency_exclusion: 0 };
        let (ea, en) = (proj.embed(&a).unwrap(), proj.embed(&n).unwrap());
        if sq_dist(ea.as_slice(), en.as_slice()) > 1e-9 {
            assert_eq!(proj.triplet_loss_grad(&a, &a, &n, &cfg).unwrap().0, 0.0);
        }
    }

    #[test]
    fn empty_training_data_is_an_error() {
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_mdn_regressor(&[], &cfg, &MdnLossConfig::default()),
            Err(LearningError::EmptyData)
        ));
        assert!(matches!(
            train_embedding(&[], 8, &cfg, &TripletConfig::default()),
            Err(LearningError::EmptyData)
        ));
    }
}
