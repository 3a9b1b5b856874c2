//! Internal-states judge: a gated MLP with a sigmoid head,
//! `logit = down(up(x) ⊙ SiLU(gate(x)))`, trained with binary cross-entropy
//! and AdamW under a linearly decaying learning rate.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_traits::{Float, FromPrimitive};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeler::{LabeledDataset, Provenance};
use crate::stateio::PoolingMode;

pub const MODEL_MAGIC: &[u8; 4] = b"ISJM";
pub const MODEL_VERSION: u32 = 1;
pub const DEFAULT_HIDDEN: usize = 256;
pub const DEFAULT_TAU: f32 = 0.5;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("expected {expected} features, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("feature vector contains a non-finite value at position {0}")]
    NonFiniteInput(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("training data contains only class {0}")]
    SingleClass(u8),
    #[error("training data is empty")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}, step {step} (last finite loss {last_loss})")]
    NonFiniteLoss { epoch: usize, step: usize, last_loss: f64 },
    #[error("model expects a reference embedding of dim {0}")]
    MissingReference(usize),
    #[error("model does not take a reference embedding")]
    UnexpectedReference,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, JudgeError>;

pub fn sigmoid<T: Float>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Float>(z: T) -> T {
    z * sigmoid(z)
}

/// `ln(1 + e^z)` without overflow.
fn softplus<T: Float>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

/// Parameters of the gated MLP. Weight matrices are row-major `hidden × d_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedMlp<T> {
    pub d_in: usize,
    pub hidden: usize,
    pub w_up: Vec<T>,
    pub b_up: Vec<T>,
    pub w_gate: Vec<T>,
    pub b_gate: Vec<T>,
    pub w_down: Vec<T>,
    pub b_down: T,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
struct Activations<T> {
    up: Vec<T>,
    gate: Vec<T>,
    gate_sig: Vec<T>,
    hidden: Vec<T>,
}

impl<T: Float + FromPrimitive> GatedMlp<T> {
    pub fn zeros(d_in: usize, hidden: usize) -> Self {
        Self {
            d_in,
            hidden,
            w_up: vec![T::zero(); hidden * d_in],
            b_up: vec![T::zero(); hidden],
            w_gate: vec![T::zero(); hidden * d_in],
            b_gate: vec![T::zero(); hidden],
            w_down: vec![T::zero(); hidden],
            b_down: T::zero(),
        }
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) for every weight and bias.
    pub fn init(d_in: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(d_in, hidden);
        let mut fill = |xs: &mut [T], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in xs {
                *x = T::from_f64(rng.random_range(-bound..bound)).unwrap();
            }
        };
        fill(&mut m.w_up, d_in);
        fill(&mut m.b_up, d_in);
        fill(&mut m.w_gate, d_in);
        fill(&mut m.b_gate, d_in);
        fill(&mut m.w_down, hidden);
        let mut bd = [T::zero()];
        fill(&mut bd, hidden);
        m.b_down = bd[0];
        m
    }

    pub fn param_count(&self) -> usize {
        2 * self.hidden * self.d_in + 3 * self.hidden + 1
    }

    /// All parameter tensors in a fixed order: up, b_up, gate, b_gate, down, b_down.
    pub fn tensors(&self) -> [&[T]; 6] {
        [
            &self.w_up,
            &self.b_up,
            &self.w_gate,
            &self.b_gate,
            &self.w_down,
            std::slice::from_ref(&self.b_down),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 6] {
        [
            &mut self.w_up,
            &mut self.b_up,
            &mut self.w_gate,
            &mut self.b_gate,
            &mut self.w_down,
            std::slice::from_mut(&mut self.b_down),
        ]
    }

    pub fn cast<U: Float + FromPrimitive>(&self) -> GatedMlp<U> {
        let c = |xs: &[T]| xs.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect();
        GatedMlp {
            d_in: self.d_in,
            hidden: self.hidden,
            w_up: c(&self.w_up),
            b_up: c(&self.b_up),
            w_gate: c(&self.w_gate),
            b_gate: c(&self.b_gate),
            w_down: c(&self.w_down),
            b_down: U::from_f64(self.b_down.to_f64().unwrap()).unwrap(),
        }
    }

    fn activations(&self, x: &[T]) -> (T, Activations<T>) {
        let h = self.hidden;
        let mut act = Activations {
            up: Vec::with_capacity(h),
            gate: Vec::with_capacity(h),
            gate_sig: Vec::with_capacity(h),
            hidden: Vec::with_capacity(h),
        };
        let mut logit = self.b_down;
        for j in 0..h {
            let row = j * self.d_in..(j + 1) * self.d_in;
            let u = dot(&self.w_up[row.clone()], x) + self.b_up[j];
            let g = dot(&self.w_gate[row], x) + self.b_gate[j];
            let s = sigmoid(g);
            let hv = u * g * s;
            logit = logit + self.w_down[j] * hv;
            act.up.push(u);
            act.gate.push(g);
            act.gate_sig.push(s);
            act.hidden.push(hv);
        }
        (logit, act)
    }

    /// Raw logit; the caller guarantees `x.len() == d_in`.
    pub fn logit(&self, x: &[T]) -> T {
        debug_assert_eq!(x.len(), self.d_in);
        let mut logit = self.b_down;
        for j in 0..self.hidden {
            let row = j * self.d_in..(j + 1) * self.d_in;
            let u = dot(&self.w_up[row.clone()], x) + self.b_up[j];
            let g = dot(&self.w_gate[row], x) + self.b_gate[j];
            logit = logit + self.w_down[j] * (u * silu(g));
        }
        logit
    }

    /// Mean binary cross-entropy over the batch and its exact gradient.
    pub fn loss_and_grad(&self, inputs: &[&[T]], labels: &[u8]) -> Result<(T, GatedMlp<T>)> {
        let mut grad = Self::zeros(self.d_in, self.hidden);
        let loss = self.accumulate_grad(inputs, labels, &mut grad)?;
        Ok((loss, grad))
    }

    /// Like [`loss_and_grad`](Self::loss_and_grad) but writes into `grad` (overwritten).
    pub fn accumulate_grad(&self, inputs: &[&[T]], labels: &[u8], grad: &mut GatedMlp<T>) -> Result<T> {
        if inputs.is_empty() {
            return Err(JudgeError::EmptyBatch);
        }
        for t in grad.tensors_mut() {
            t.fill(T::zero());
        }
        let inv_b = T::one() / T::from_usize(inputs.len()).unwrap();
        let mut loss = T::zero();
        for (x, &y) in inputs.iter().zip(labels) {
            if x.len() != self.d_in {
                return Err(JudgeError::Dimension {
                    expected: self.d_in,
                    found: x.len(),
                });
            }
            let y = if y == 1 { T::one() } else { T::zero() };
            let (logit, act) = self.activations(x);
            loss = loss + softplus(logit) - y * logit;
            let dl = (sigmoid(logit) - y) * inv_b;
            grad.b_down = grad.b_down + dl;
            for j in 0..self.hidden {
                grad.w_down[j] = grad.w_down[j] + dl * act.hidden[j];
                let dh = dl * self.w_down[j];
                let (u, g, s) = (act.up[j], act.gate[j], act.gate_sig[j]);
                let dz_up = dh * g * s;
                let dz_gate = dh * u * (s + g * s * (T::one() - s));
                grad.b_up[j] = grad.b_up[j] + dz_up;
                grad.b_gate[j] = grad.b_gate[j] + dz_gate;
                let row = j * self.d_in..(j + 1) * self.d_in;
                for ((gu, gg), &xi) in grad.w_up[row.clone()].iter_mut().zip(&mut grad.w_gate[row]).zip(x.iter()) {
                    *gu = *gu + dz_up * xi;
                    *gg = *gg + dz_gate * xi;
                }
            }
        }
        Ok(loss * inv_b)
    }
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub seed: u64,
    pub tau: f32,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
            tau: DEFAULT_TAU,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(JudgeError::Config("epochs, batch_size and hidden must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(JudgeError::Config(format!("learning rate {} must be non-negative", self.learning_rate)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(JudgeError::Config(format!("tau {} must lie in (0, 1)", self.tau)));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub weight_decay: T,
    m: GatedMlp<T>,
    v: GatedMlp<T>,
    step: i32,
}

impl<T: Float + FromPrimitive> AdamW<T> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(like: &GatedMlp<T>, weight_decay: f64) -> Self {
        Self {
            weight_decay: T::from_f64(weight_decay).unwrap(),
            m: GatedMlp::zeros(like.d_in, like.hidden),
            v: GatedMlp::zeros(like.d_in, like.hidden),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut GatedMlp<T>, grad: &GatedMlp<T>, lr: T) {
        self.step += 1;
        let f = |x: f64| T::from_f64(x).unwrap();
        let (b1, b2, eps) = (f(Self::BETA1), f(Self::BETA2), f(Self::EPS));
        let bc1 = T::one() - b1.powi(self.step);
        let bc2 = T::one() - b2.powi(self.step);
        let decay = T::one() - lr * self.weight_decay;
        let [m0, m1, m2, m3, m4, m5] = self.m.tensors_mut();
        let [v0, v1, v2, v3, v4, v5] = self.v.tensors_mut();
        let moments = [(m0, v0), (m1, v1), (m2, v2), (m3, v3), (m4, v4), (m5, v5)];
        for ((p, g), (m, v)) in params.tensors_mut().into_iter().zip(grad.tensors()).zip(moments) {
            for i in 0..p.len() {
                p[i] = p[i] * decay;
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Learning rate for the 0-based optimizer `step` out of `total`.
pub fn linear_lr(base: f64, step: usize, total: usize) -> f64 {
    base * (total.saturating_sub(step)) as f64 / total.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub seconds: f64,
}

/// Trained judge: network weights, decision threshold and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgeModel {
    pub net: GatedMlp<f32>,
    pub tau: f32,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logit: f32,
    pub probability: f64,
    pub decision: u8,
    pub latency_seconds: f64,
}

impl Prediction {
    pub fn from_logit(logit: f32, tau: f32) -> Self {
        let probability = sigmoid(f64::from(logit));
        Self {
            logit,
            probability,
            decision: u8::from(probability >= f64::from(tau)),
            latency_seconds: 0.0,
        }
    }
}

fn check_finite(x: &[f32]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(p) => Err(JudgeError::NonFiniteInput(p)),
        None => Ok(()),
    }
}

fn train_generic<T: Float + FromPrimitive>(
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(GatedMlp<f32>, TrainReport)> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = dataset.feature_dim;
    let features: Vec<T> = dataset.features.iter().map(|&x| T::from_f32(x).unwrap()).collect();
    let mut net = GatedMlp::<T>::init(d, config.hidden, &mut rng);
    let mut opt = AdamW::new(&net, config.weight_decay);
    let mut grad = GatedMlp::zeros(d, config.hidden);

    let n = dataset.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    let mut last_loss = f64::NAN;
    let mut batch_x: Vec<&[T]> = Vec::with_capacity(config.batch_size);
    let mut batch_y: Vec<u8> = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.push(&features[i * d..(i + 1) * d]);
                batch_y.push(dataset.labels[i]);
            }
            let loss = net.accumulate_grad(&batch_x, &batch_y, &mut grad)?.to_f64().unwrap();
            if !loss.is_finite() {
                return Err(JudgeError::NonFiniteLoss { epoch, step, last_loss });
            }
            last_loss = loss;
            epoch_loss += loss * chunk.len() as f64;
            let lr = T::from_f64(linear_lr(config.learning_rate, step, total)).unwrap();
            opt.update(&mut net, &grad, lr);
            step += 1;
        }
        epoch_losses.push(epoch_loss / n as f64);
    }
    Ok((
        net.cast(),
        TrainReport {
            epoch_losses,
            steps: step,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Trains a judge on `dataset`. Deterministic for a fixed `config.seed`.
pub fn train(dataset: &LabeledDataset, config: &TrainConfig) -> Result<(JudgeModel, TrainReport)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(JudgeError::EmptyDataset);
    }
    match dataset.class_counts() {
        [0, _] => return Err(JudgeError::SingleClass(1)),
        [_, 0] => return Err(JudgeError::SingleClass(0)),
        _ => {}
    }
    check_finite(&dataset.features)?;
    let (net, report) = match config.precision {
        Precision::F32 => train_generic::<f32>(dataset, config)?,
        Precision::F64 => train_generic::<f64>(dataset, config)?,
    };
    Ok((
        JudgeModel {
            net,
            tau: config.tau,
            provenance: dataset.provenance.clone(),
        },
        report,
    ))
}

impl JudgeModel {
    pub fn d_in(&self) -> usize {
        self.net.d_in
    }

    pub fn ref_dim(&self) -> usize {
        if self.provenance.with_reference {
            self.net.d_in - self.provenance.state_dim
        } else {
            0
        }
    }

    /// Logit and probability for an already-concatenated feature row.
    pub fn forward(&self, features: &[f32]) -> Result<(f32, f64)> {
        if features.len() != self.net.d_in {
            return Err(JudgeError::Dimension {
                expected: self.net.d_in,
                found: features.len(),
            });
        }
        check_finite(features)?;
        let logit = self.net.logit(features);
        Ok((logit, sigmoid(f64::from(logit))))
    }

    pub fn predict_features(&self, features: &[f32]) -> Result<Prediction> {
        let start = Instant::now();
        let (logit, _) = self.forward(features)?;
        let mut p = Prediction::from_logit(logit, self.tau);
        p.latency_seconds = start.elapsed().as_secs_f64();
        Ok(p)
    }

    /// Predicts from a state vector and, for reference-augmented models, the
    /// retrieved reference embedding (concatenated as `[state ⧺ reference]`).
    pub fn predict(&self, state: &[f32], reference: Option<&[f32]>) -> Result<Prediction> {
        let start = Instant::now();
        let logit = match (self.provenance.with_reference, reference) {
            (true, None) => return Err(JudgeError::MissingReference(self.ref_dim())),
            (false, Some(_)) => return Err(JudgeError::UnexpectedReference),
            (false, None) => self.forward(state)?.0,
            (true, Some(r)) => {
                if state.len() != self.provenance.state_dim {
                    return Err(JudgeError::Dimension {
                        expected: self.provenance.state_dim,
                        found: state.len(),
                    });
                }
                let mut x = Vec::with_capacity(self.net.d_in);
                x.extend_from_slice(state);
                x.extend_from_slice(r);
                self.forward(&x)?.0
            }
        };
        let mut p = Prediction::from_logit(logit, self.tau);
        p.latency_seconds = start.elapsed().as_secs_f64();
        Ok(p)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.provenance;
        let mut b = Vec::with_capacity(64 + 4 * self.net.param_count());
        b.extend_from_slice(MODEL_MAGIC);
        b.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        b.extend_from_slice(&(p.model_id.len() as u16).to_le_bytes());
        b.extend_from_slice(p.model_id.as_bytes());
        b.extend_from_slice(&p.layer_index.to_le_bytes());
        b.push(p.pooling.to_byte());
        b.push(u8::from(p.with_reference));
        b.extend_from_slice(&(p.state_dim as u32).to_le_bytes());
        b.extend_from_slice(&(self.net.d_in as u32).to_le_bytes());
        b.extend_from_slice(&(self.net.hidden as u32).to_le_bytes());
        b.extend_from_slice(&self.tau.to_le_bytes());
        for t in self.net.tensors() {
            for x in t {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| JudgeError::Corrupt(m.to_string());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(corrupt("truncated"));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        if take(4)? != MODEL_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(JudgeError::Corrupt(format!("unsupported version {version}")));
        }
        let id_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let model_id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| corrupt("model id not UTF-8"))?;
        let layer_index = i32::from_le_bytes(take(4)?.try_into().unwrap());
        let pooling = PoolingMode::from_byte(take(1)?[0]).ok_or_else(|| corrupt("bad pooling byte"))?;
        let with_reference = match take(1)?[0] {
            0 => false,
            1 => true,
            _ => return Err(corrupt("bad reference flag")),
        };
        let state_dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let d_in = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let hidden = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let tau = f32::from_le_bytes(take(4)?.try_into().unwrap());
        if d_in == 0 || hidden == 0 || state_dim == 0 || state_dim > d_in || (!with_reference && state_dim != d_in) {
            return Err(corrupt("inconsistent dimensions"));
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(corrupt("tau outside (0, 1)"));
        }
        let mut net = GatedMlp::<f32>::zeros(d_in, hidden);
        for t in net.tensors_mut() {
            let raw = take(4 * t.len())?;
            for (dst, c) in t.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        if pos != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        if net.tensors().iter().any(|t| t.iter().any(|x| !x.is_finite())) {
            return Err(corrupt("non-finite weight"));
        }
        Ok(Self {
            net,
            tau,
            provenance: Provenance {
                model_id,
                layer_index,
                pooling,
                with_reference,
                state_dim,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| JudgeError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut f = File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| JudgeError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        Self::from_bytes(&bytes)
    }
}

/// Logistic regression trained by full-batch gradient descent. Its loss is
/// convex, so with a small enough step the per-epoch loss never increases;
/// used to sanity-check the loss and gradient plumbing.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearProbe {
    pub fn fit(dataset: &LabeledDataset, learning_rate: f64, epochs: usize) -> (Self, Vec<f64>) {
        let d = dataset.feature_dim;
        let n = dataset.len() as f64;
        let mut probe = Self {
            weights: vec![0.0; d],
            bias: 0.0,
        };
        let mut history = Vec::with_capacity(epochs + 1);
        for _ in 0..=epochs {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            let mut loss = 0.0;
            for (x, &y) in dataset.rows().zip(&dataset.labels) {
                let z = probe.logit(x);
                let y = f64::from(y);
                loss += softplus(z) - y * z;
                let dz = sigmoid(z) - y;
                gb += dz;
                for (g, &xi) in gw.iter_mut().zip(x) {
                    *g += dz * f64::from(xi);
                }
            }
            history.push(loss / n);
            for (w, g) in probe.weights.iter_mut().zip(&gw) {
                *w -= learning_rate * g / n;
            }
            probe.bias -= learning_rate * gb / n;
        }
        history.pop();
        (probe, history)
    }

    pub fn logit(&self, x: &[f32]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, &xi)| w * f64::from(xi)).sum::<f64>()
    }
}
