//! Learned kinematic prior: a single-layer LSTM mapping a window of
//! relative twists to the next twist, plus a constant-velocity baseline.
//! Sequences are encoded as per-step twists log(P_{t-1}^-1 P_t), so the
//! model is invariant to where the window sits in the world frame.

use crate::fusion::MotionModel;
use crate::geometry::{compose, exp_se3, invert, log_se3, GeometryError, Pose, Twist};
use crate::trajectory::TimedPose;
use nalgebra::{DMatrix, DVector, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Training window length: a sequence of this many poses predicts the
/// following pose.
pub const WINDOW: usize = 50;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("timestamps must increase strictly")]
    Time,
    #[error("window needs at least 2 poses, got {0}")]
    Window(usize),
    #[error("training needs at least {need} samples, got {got}")]
    Data { need: usize, got: usize },
    #[error("training diverged at epoch {0}")]
    Divergence(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("model io: {0}")]
    Io(#[from] std::io::Error),
    #[error("model format: {0}")]
    Format(String),
}

/// Per-step relative-twist features for a pose window. The first entry is
/// zero (no predecessor); entry t is log(P_{t-1}^-1 P_t).
pub fn encode_sequence(seq: &[TimedPose]) -> Result<Vec<Vector6<f64>>, MotionError> {
    if seq.len() < 2 {
        return Err(MotionError::Window(seq.len()));
    }
    for w in seq.windows(2) {
        if w[1].timestamp <= w[0].timestamp {
            return Err(MotionError::Time);
        }
    }
    let mut features = Vec::with_capacity(seq.len());
    features.push(Vector6::zeros());
    for w in seq.windows(2) {
        let rel = compose(&invert(&w[0].pose), &w[1].pose).orthonormalized();
        features.push(log_se3(&rel)?.to_vector());
    }
    Ok(features)
}

/// Inverse of [`encode_sequence`] given the first pose: reconstructs the
/// window by composing the per-step twists.
pub fn decode_sequence(first: &Pose, features: &[Vector6<f64>]) -> Vec<Pose> {
    let mut poses = Vec::with_capacity(features.len());
    let mut p = *first;
    for f in features {
        p = compose(&p, &exp_se3(&Twist::from_vector(f))).orthonormalized();
        poses.push(p);
    }
    poses
}

/// One supervised example: a feature window and the twist that follows it.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub features: Vec<Vector6<f64>>,
    pub target: Vector6<f64>,
}

/// Slide a window of `window` poses plus a one-pose target over a
/// trajectory.
pub fn make_training_set(
    track: &[TimedPose],
    window: usize,
    stride: usize,
) -> Result<Vec<TrainingSample>, MotionError> {
    assert!(window >= 2 && stride >= 1);
    if track.len() < window + 1 {
        return Err(MotionError::Data {
            need: window + 1,
            got: track.len(),
        });
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i + window < track.len() {
        let slice = &track[i..=i + window];
        let features = encode_sequence(&slice[..window])?;
        let rel = compose(&invert(&slice[window - 1].pose), &slice[window].pose);
        let target = log_se3(&rel.orthonormalized())?.to_vector();
        out.push(TrainingSample { features, target });
        i += stride;
    }
    Ok(out)
}

const GATES: usize = 4;
const GI: usize = 0; // input gate
const GF: usize = 1; // forget gate
const GG: usize = 2; // cell candidate
const GO: usize = 3; // output gate

/// Single LSTM layer plus a linear head. All tensors are dense and the
/// parameter layout is fixed, so the network flattens to one vector for
/// gradient checking and serialization.
#[derive(Debug, Clone)]
pub struct LstmNetwork {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub dropout: f64,
    /// Gate order: input, forget, cell candidate, output.
    pub w_x: [DMatrix<f64>; GATES],
    pub w_h: [DMatrix<f64>; GATES],
    pub b: [DVector<f64>; GATES],
    pub w_out: DMatrix<f64>,
    pub b_out: DVector<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl LstmNetwork {
    /// Uniform init in +-1/sqrt(hidden); forget-gate bias starts at 1 so
    /// early training retains cell state.
    pub fn new(input: usize, hidden: usize, output: usize, seed: u64) -> LstmNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 1.0 / (hidden as f64).sqrt();
        let mut mat = |r: usize, c: usize| {
            DMatrix::from_fn(r, c, |_, _| rng.gen_range(-k..k))
        };
        let w_x = std::array::from_fn(|_| mat(hidden, input));
        let w_h = std::array::from_fn(|_| mat(hidden, hidden));
        let w_out = mat(output, hidden);
        let mut b: [DVector<f64>; GATES] = std::array::from_fn(|_| DVector::zeros(hidden));
        b[GF].fill(1.0);
        LstmNetwork {
            input,
            hidden,
            output,
            dropout: 0.2,
            w_x,
            w_h,
            b,
            w_out,
            b_out: DVector::zeros(output),
        }
    }

    /// Twist-to-twist network with the default window semantics.
    pub fn for_twists(hidden: usize, seed: u64) -> LstmNetwork {
        LstmNetwork::new(6, hidden, 6, seed)
    }

    pub fn n_params(&self) -> usize {
        GATES * (self.hidden * self.input + self.hidden * self.hidden + self.hidden)
            + self.output * self.hidden
            + self.output
    }

    /// Column-major concatenation of all tensors in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for g in 0..GATES {
            v.extend_from_slice(self.w_x[g].as_slice());
        }
        for g in 0..GATES {
            v.extend_from_slice(self.w_h[g].as_slice());
        }
        for g in 0..GATES {
            v.extend_from_slice(self.b[g].as_slice());
        }
        v.extend_from_slice(self.w_out.as_slice());
        v.extend_from_slice(self.b_out.as_slice());
        v
    }

    pub fn assign_from_flat(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.n_params());
        let mut at = 0usize;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&v[at..at + dst.len()]);
            at += dst.len();
        };
        for g in 0..GATES {
            take(self.w_x[g].as_mut_slice());
        }
        for g in 0..GATES {
            take(self.w_h[g].as_mut_slice());
        }
        for g in 0..GATES {
            take(self.b[g].as_mut_slice());
        }
        take(self.w_out.as_mut_slice());
        take(self.b_out.as_mut_slice());
    }
}

/// Per-step activations kept for backpropagation through time. Index 0
/// holds the initial zero state; step t of the sequence fills index t+1
/// of `cs`/`hs`.
struct ForwardCache {
    xs: Vec<DVector<f64>>,
    gates: Vec<[DVector<f64>; GATES]>,
    cs: Vec<DVector<f64>>,
    tanh_cs: Vec<DVector<f64>>,
    hs: Vec<DVector<f64>>,
}

fn forward_cached(net: &LstmNetwork, features: &[Vector6<f64>]) -> ForwardCache {
    let h0 = DVector::zeros(net.hidden);
    let mut cache = ForwardCache {
        xs: Vec::with_capacity(features.len()),
        gates: Vec::with_capacity(features.len()),
        cs: vec![h0.clone()],
        tanh_cs: Vec::with_capacity(features.len()),
        hs: vec![h0],
    };
    for f in features {
        let x = DVector::from_column_slice(f.as_slice());
        let h_prev = cache.hs.last().unwrap();
        let c_prev = cache.cs.last().unwrap();
        let pre: [DVector<f64>; GATES] =
            std::array::from_fn(|g| &net.w_x[g] * &x + &net.w_h[g] * h_prev + &net.b[g]);
        let i = pre[GI].map(sigmoid);
        let f_ = pre[GF].map(sigmoid);
        let g = pre[GG].map(f64::tanh);
        let o = pre[GO].map(sigmoid);
        let c = f_.component_mul(c_prev) + i.component_mul(&g);
        let tanh_c = c.map(f64::tanh);
        let h = o.component_mul(&tanh_c);
        cache.xs.push(x);
        cache.gates.push([i, f_, g, o]);
        cache.cs.push(c);
        cache.tanh_cs.push(tanh_c);
        cache.hs.push(h);
    }
    cache
}

/// Deterministic inference pass: run the recurrence over the window and
/// map the final hidden state through the linear head. Dropout is off.
pub fn lstm_forward(net: &LstmNetwork, features: &[Vector6<f64>]) -> Vector6<f64> {
    let cache = forward_cached(net, features);
    let y = &net.w_out * cache.hs.last().unwrap() + &net.b_out;
    Vector6::from_column_slice(y.as_slice())
}

#[derive(Debug, Clone)]
struct Gradients {
    w_x: [DMatrix<f64>; GATES],
    w_h: [DMatrix<f64>; GATES],
    b: [DVector<f64>; GATES],
    w_out: DMatrix<f64>,
    b_out: DVector<f64>,
}

impl Gradients {
    fn zeros(net: &LstmNetwork) -> Gradients {
        Gradients {
            w_x: std::array::from_fn(|_| DMatrix::zeros(net.hidden, net.input)),
            w_h: std::array::from_fn(|_| DMatrix::zeros(net.hidden, net.hidden)),
            b: std::array::from_fn(|_| DVector::zeros(net.hidden)),
            w_out: DMatrix::zeros(net.output, net.hidden),
            b_out: DVector::zeros(net.output),
        }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for g in 0..GATES {
            v.extend_from_slice(self.w_x[g].as_slice());
        }
        for g in 0..GATES {
            v.extend_from_slice(self.w_h[g].as_slice());
        }
        for g in 0..GATES {
            v.extend_from_slice(self.b[g].as_slice());
        }
        v.extend_from_slice(self.w_out.as_slice());
        v.extend_from_slice(self.b_out.as_slice());
        v
    }

    fn scale(&mut self, s: f64) {
        for g in 0..GATES {
            self.w_x[g] *= s;
            self.w_h[g] *= s;
            self.b[g] *= s;
        }
        self.w_out *= s;
        self.b_out *= s;
    }

    fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Mean squared error over the 6 output components.
fn sample_loss(y: &DVector<f64>, target: &Vector6<f64>) -> f64 {
    let mut s = 0.0;
    for i in 0..6 {
        let d = y[i] - target[i];
        s += d * d;
    }
    s / 6.0
}

/// Loss and parameter gradients for one sample. `keep` is the dropout
/// mask applied to the non-recurrent head connection (empty = off).
fn backward(
    net: &LstmNetwork,
    sample: &TrainingSample,
    keep: Option<&DVector<f64>>,
    grads: &mut Gradients,
) -> f64 {
    let cache = forward_cached(net, &sample.features);
    let steps = sample.features.len();
    let h_last = cache.hs.last().unwrap();
    let h_head = match keep {
        Some(m) => h_last.component_mul(m),
        None => h_last.clone(),
    };
    let y = &net.w_out * &h_head + &net.b_out;
    let loss = sample_loss(&y, &sample.target);
    let mut dy = DVector::zeros(net.output);
    for i in 0..6 {
        dy[i] = 2.0 * (y[i] - sample.target[i]) / 6.0;
    }
    grads.w_out += &dy * h_head.transpose();
    grads.b_out += &dy;
    let mut dh = net.w_out.transpose() * &dy;
    if let Some(m) = keep {
        dh.component_mul_assign(m);
    }
    let mut dc = DVector::zeros(net.hidden);
    for t in (0..steps).rev() {
        let [i, f, g, o] = &cache.gates[t];
        let tanh_c = &cache.tanh_cs[t];
        let c_prev = &cache.cs[t];
        let h_prev = &cache.hs[t];
        let d_o = dh.component_mul(tanh_c);
        dc += dh
            .component_mul(o)
            .component_mul(&tanh_c.map(|v| 1.0 - v * v));
        let d_i = dc.component_mul(g);
        let d_g = dc.component_mul(i);
        let d_f = dc.component_mul(c_prev);
        let dz = [
            d_i.component_mul(&i.map(|v| v * (1.0 - v))),
            d_f.component_mul(&f.map(|v| v * (1.0 - v))),
            d_g.component_mul(&g.map(|v| 1.0 - v * v)),
            d_o.component_mul(&o.map(|v| v * (1.0 - v))),
        ];
        dh = DVector::zeros(net.hidden);
        for k in 0..GATES {
            grads.w_x[k] += &dz[k] * cache.xs[t].transpose();
            grads.w_h[k] += &dz[k] * h_prev.transpose();
            grads.b[k] += &dz[k];
            dh += net.w_h[k].transpose() * &dz[k];
        }
        dc.component_mul_assign(f);
    }
    loss
}

/// Mean loss and mean gradients over a set of samples; exposed for the
/// finite-difference oracle.
pub fn batch_loss(net: &LstmNetwork, samples: &[TrainingSample]) -> f64 {
    samples
        .iter()
        .map(|s| {
            let cache = forward_cached(net, &s.features);
            let y = &net.w_out * cache.hs.last().unwrap() + &net.b_out;
            sample_loss(&y, &s.target)
        })
        .sum::<f64>()
        / samples.len() as f64
}

fn batch_gradients(
    net: &LstmNetwork,
    samples: &[TrainingSample],
    masks: Option<&[DVector<f64>]>,
) -> (f64, Gradients) {
    let mut grads = Gradients::zeros(net);
    let mut loss = 0.0;
    for (si, s) in samples.iter().enumerate() {
        let keep = masks.map(|m| &m[si]);
        loss += backward(net, s, keep, &mut grads);
    }
    let n = samples.len() as f64;
    grads.scale(1.0 / n);
    (loss / n, grads)
}

/// Flat gradient of the batch loss (dropout off), ordered like
/// [`LstmNetwork::flatten`]; exposed for the finite-difference oracle.
pub fn batch_gradient_flat(net: &LstmNetwork, samples: &[TrainingSample]) -> Vec<f64> {
    batch_gradients(net, samples, None).1.flatten()
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    /// Gradient global-norm clip; infinite disables clipping.
    pub clip: f64,
    /// Fraction of samples held out from the tail as validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            learning_rate: 1e-3,
            dropout: 0.2,
            patience: 20,
            clip: 5.0,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Per-epoch (training loss, validation loss).
    pub losses: Vec<(f64, f64)>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Full-batch gradient descent with BPTT, dropout on the head connection,
/// and early stopping. The returned network is the best-validation
/// snapshot, never a later, worse one.
pub fn lstm_train(
    net: &mut LstmNetwork,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<TrainReport, MotionError> {
    let n_val = ((samples.len() as f64 * cfg.val_fraction).round() as usize).max(1);
    if samples.len() < n_val + 1 {
        return Err(MotionError::Data {
            need: n_val + 1,
            got: samples.len(),
        });
    }
    let (train, val) = samples.split_at(samples.len() - n_val);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::new();
    let mut best = net.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let masks: Option<Vec<DVector<f64>>> = if cfg.dropout > 0.0 {
            let p = cfg.dropout;
            Some(
                (0..train.len())
                    .map(|_| {
                        DVector::from_fn(net.hidden, |_, _| {
                            if rng.gen::<f64>() < p {
                                0.0
                            } else {
                                1.0 / (1.0 - p)
                            }
                        })
                    })
                    .collect(),
            )
        } else {
            None
        };
        let (train_loss, mut grads) = batch_gradients(net, train, masks.as_deref());
        let gnorm = grads.norm();
        if cfg.clip.is_finite() && gnorm > cfg.clip {
            grads.scale(cfg.clip / gnorm);
        }
        let mut flat = net.flatten();
        let gflat = grads.flatten();
        for (p, g) in flat.iter_mut().zip(&gflat) {
            *p -= cfg.learning_rate * g;
        }
        net.assign_from_flat(&flat);
        let val_loss = batch_loss(net, val);
        losses.push((train_loss, val_loss));
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(MotionError::Divergence(epoch));
        }
        if val_loss < best_val {
            best_val = val_loss;
            best = net.clone();
            best_epoch = epoch;
        } else if epoch - best_epoch > cfg.patience {
            stopped_early = true;
            break;
        }
    }
    *net = best;
    Ok(TrainReport {
        losses,
        best_epoch,
        stopped_early,
    })
}

/// Last window pose composed with the network's predicted twist.
pub fn predict_next_lstm(net: &LstmNetwork, window: &[TimedPose]) -> Result<Pose, MotionError> {
    let features = encode_sequence(window)?;
    let twist = lstm_forward(net, &features);
    let last = window.last().unwrap().pose;
    Ok(compose(&last, &exp_se3(&Twist::from_vector(&twist))).orthonormalized())
}

/// Constant-velocity baseline: repeats the window's final relative twist.
pub fn predict_next_constant(window: &[TimedPose]) -> Result<Pose, MotionError> {
    let features = encode_sequence(window)?;
    let last_twist = *features.last().unwrap();
    let last = window.last().unwrap().pose;
    Ok(compose(&last, &exp_se3(&Twist::from_vector(&last_twist))).orthonormalized())
}

/// Adapter feeding a particle's twist buffer through the network; pads a
/// short history with leading zeros to the training window length.
pub struct LstmMotionModel {
    pub net: LstmNetwork,
    pub window: usize,
}

impl MotionModel for LstmMotionModel {
    fn predict_twist(&self, history: &[Twist], _dt: f64) -> Twist {
        let mut features = vec![Vector6::zeros(); self.window];
        let take = history.len().min(self.window);
        for (slot, tw) in features[self.window - take..]
            .iter_mut()
            .zip(&history[history.len() - take..])
        {
            *slot = tw.to_vector();
        }
        Twist::from_vector(&lstm_forward(&self.net, &features))
    }
}

const MAGIC: &[u8; 8] = b"LSTMNET1";

#[derive(serde::Serialize, serde::Deserialize)]
struct NetHeader {
    input: usize,
    hidden: usize,
    output: usize,
    dropout: f64,
    n_params: usize,
}

/// Binary container: magic, little-endian u32 header length, JSON header,
/// then the flattened parameters as little-endian f64.
pub fn save_network(path: &Path, net: &LstmNetwork) -> Result<(), MotionError> {
    let header = serde_json::to_vec(&NetHeader {
        input: net.input,
        hidden: net.hidden,
        output: net.output,
        dropout: net.dropout,
        n_params: net.n_params(),
    })
    .map_err(|e| MotionError::Format(e.to_string()))?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(header.len() as u32).to_le_bytes())?;
    f.write_all(&header)?;
    for v in net.flatten() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_network(path: &Path) -> Result<LstmNetwork, MotionError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(MotionError::Format("bad magic".into()));
    }
    let mut len = [0u8; 4];
    f.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    f.read_exact(&mut header)?;
    let h: NetHeader =
        serde_json::from_slice(&header).map_err(|e| MotionError::Format(e.to_string()))?;
    let mut net = LstmNetwork::new(h.input, h.hidden, h.output, 0);
    net.dropout = h.dropout;
    if net.n_params() != h.n_params {
        return Err(MotionError::Format(format!(
            "parameter count mismatch: header {}, shapes {}",
            h.n_params,
            net.n_params()
        )));
    }
    let mut flat = vec![0.0f64; h.n_params];
    let mut buf = [0u8; 8];
    for v in flat.iter_mut() {
        f.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    net.assign_from_flat(&flat);
    Ok(net)
}
