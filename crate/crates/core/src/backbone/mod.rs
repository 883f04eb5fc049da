//! Scoring network, optimiser, EMA shadow and checkpoint persistence.
//!
//! The network is a small convolutional classifier with two output logits
//! (normal, anomaly); the anomaly score is the softmax probability of the
//! second logit. All parameters live in [`ParamSet`]s keyed by name so the
//! optimiser, EMA and checkpoint code never depend on the layer layout.

mod checkpoint;
mod layers;
mod net;
mod optim;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use net::{Batch, CompactNet, ForwardPass, NormMode, BN_EPS, BN_MOMENTUM};
pub use optim::{ema_update, sgd_step, OptimiserConfig};

/// Dense f32 array with an explicit shape, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Contract(format!(
                "tensor of shape {shape:?} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named tensors in a deterministic (sorted) order.
pub type ParamSet = BTreeMap<String, Tensor>;

pub fn zeros_like(set: &ParamSet) -> ParamSet {
    set.iter().map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape))).collect()
}

/// Fails unless both sets have the same names and shapes.
pub fn check_same_layout(a: &ParamSet, b: &ParamSet, what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!("{what}: {} tensors vs {}", a.len(), b.len())));
    }
    for ((ka, ta), (kb, tb)) in a.iter().zip(b) {
        if ka != kb || ta.shape != tb.shape {
            return Err(Error::Contract(format!(
                "{what}: '{ka}' {:?} does not match '{kb}' {:?}",
                ta.shape, tb.shape
            )));
        }
    }
    Ok(())
}

/// Input geometry and convolution widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each conv block.
    pub widths: Vec<usize>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 64,
            width: 64,
            widths: vec![32, 64, 128],
        }
    }
}

pub const NUM_CLASSES: usize = 2;

impl BackboneSpec {
    pub fn with_input(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("backbone channels must be 1 or 3, got {}", self.channels)));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be non-empty and positive".into()));
        }
        let min = 1usize << self.widths.len();
        if self.height < min || self.width < min {
            return Err(Error::Config(format!(
                "input {}x{} too small for {} pooling stages",
                self.height,
                self.width,
                self.widths.len()
            )));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn feature_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    /// Parameter names and shapes, in block order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut cin = self.channels;
        for (i, &cout) in self.widths.iter().enumerate() {
            let b = i + 1;
            out.push((format!("conv{b}.weight"), vec![cout, cin, 3, 3]));
            out.push((format!("conv{b}.bias"), vec![cout]));
            out.push((format!("bn{b}.weight"), vec![cout]));
            out.push((format!("bn{b}.bias"), vec![cout]));
            cin = cout;
        }
        out.push(("fc.weight".into(), vec![NUM_CLASSES, cin]));
        out.push(("fc.bias".into(), vec![NUM_CLASSES]));
        out
    }

    pub fn stats_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, &c) in self.widths.iter().enumerate() {
            out.push((format!("bn{}.running_mean", i + 1), vec![c]));
            out.push((format!("bn{}.running_var", i + 1), vec![c]));
        }
        out
    }

    /// Kaiming-uniform conv weights (bound `sqrt(6 / fan_in)`), uniform
    /// `±1/sqrt(fan_in)` head weights, unit norm scales, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamSet {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        for (name, shape) in self.layout() {
            let mut t = Tensor::zeros(&shape);
            if name.starts_with("conv") && name.ends_with("weight") {
                let fan_in = (shape[1] * 9) as f32;
                let bound = (6.0 / fan_in).sqrt();
                t.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            } else if name == "fc.weight" {
                let bound = 1.0 / (shape[1] as f32).sqrt();
                t.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            } else if name.starts_with("bn") && name.ends_with("weight") {
                t.data.fill(1.0);
            }
            set.insert(name, t);
        }
        set
    }

    pub fn init_stats(&self) -> ParamSet {
        self.stats_layout()
            .into_iter()
            .map(|(name, shape)| {
                let v = if name.ends_with("running_var") { 1.0 } else { 0.0 };
                (name, Tensor::filled(&shape, v))
            })
            .collect()
    }
}

/// Whether a parameter receives weight decay (conv and linear weights only).
pub fn is_decayed(name: &str) -> bool {
    (name.starts_with("conv") || name.starts_with("fc")) && name.ends_with(".weight")
}

/// Trainable parameters, their EMA shadow, normalisation statistics and
/// optimiser velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub spec: BackboneSpec,
    pub params: ParamSet,
    pub ema: ParamSet,
    pub stats: ParamSet,
    /// Statistics paired with `ema`: copied from `stats` at every EMA update.
    pub ema_stats: ParamSet,
    pub velocity: ParamSet,
    pub step_count: u64,
}

impl ModelState {
    pub fn new(spec: BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = spec.init_params(seed);
        let stats = spec.init_stats();
        Ok(Self {
            ema: params.clone(),
            ema_stats: stats.clone(),
            velocity: zeros_like(&params),
            params,
            stats,
            spec,
            step_count: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let expect: ParamSet = self
            .spec
            .layout()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        check_same_layout(&expect, &self.params, "params")?;
        check_same_layout(&self.params, &self.ema, "ema")?;
        check_same_layout(&self.params, &self.velocity, "velocity")?;
        let expect_stats: ParamSet = self
            .spec
            .stats_layout()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        check_same_layout(&expect_stats, &self.stats, "stats")?;
        check_same_layout(&expect_stats, &self.ema_stats, "ema stats")?;
        for (name, t) in self.stats.iter().chain(&self.ema_stats) {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("running statistic {name}")));
            }
        }
        Ok(())
    }

    pub fn net(&self) -> CompactNet {
        CompactNet::new(self.spec.clone())
    }

    /// Anomaly probabilities from the EMA parameters in eval mode.
    pub fn score(&self, images: &[ImageTensor]) -> Result<Vec<f32>> {
        let batch = Batch::from_images(images)?;
        self.score_batch(&batch)
    }

    pub fn score_batch(&self, batch: &Batch) -> Result<Vec<f32>> {
        let logits = self.net().forward_eval(&self.ema, &self.ema_stats, batch)?;
        Ok(logits.chunks_exact(NUM_CLASSES).map(|l| anomaly_score(l[0], l[1])).collect())
    }
}

/// `softmax([l0, l1])[1]`, evaluated without overflow.
pub fn anomaly_score(l0: f32, l1: f32) -> f32 {
    let d = (l0 - l1) as f64;
    (1.0 / (1.0 + d.exp())) as f32
}

/// Numerically stable softmax of one row, in f64.
pub fn softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
