//! Confidence-masked pseudo-label training.
//!
//! Each step draws a class-balanced labelled batch and `mu` times as many
//! unlabelled images. The labelled batch (weakly augmented) gives the
//! supervised cross-entropy. Each unlabelled image is viewed twice: the weak
//! view yields a hard pseudo-label and a confidence `max softmax(z / T)`; the
//! strong view is trained towards the pseudo-label wherever the confidence
//! reaches `tau`. The objective is `L = L_sup + lambda * L_unsup` with
//! `L_unsup` averaged over all unlabelled images (masked ones contribute 0).
//!
//! The three views run as separate forward passes, so each normalises with
//! its own batch statistics and no gradient ever flows through the weak view.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{strong_augment, weak_augment, AugmentConfig};
use crate::backbone::{ema_update, sgd_step, softmax, zeros_like, Batch, ModelState, NormMode, OptimiserConfig, NUM_CLASSES};
use crate::catalog::{DatasetCatalog, Label};
use crate::error::{Error, Result};
use crate::labels::LabelStore;
use crate::loader::ImageSource;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Confidence threshold for pseudo-labels.
    pub tau: f64,
    pub lambda_unsup: f64,
    /// Divides weak-view logits before the confidence softmax.
    pub temperature: f64,
    pub batch_size: usize,
    /// Unlabelled images per labelled image in a step.
    pub mu: usize,
    pub iterations: usize,
    /// Size of the unlabelled pool drawn afresh each cycle.
    pub pool_size: usize,
    pub optimiser: OptimiserConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            lambda_unsup: 1.0,
            temperature: 0.5,
            batch_size: 16,
            mu: 7,
            iterations: 100,
            pool_size: 10_000,
            optimiser: OptimiserConfig::default(),
            augment: AugmentConfig::default(),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau must be in (0,1], got {}", self.tau)));
        }
        if !(self.lambda_unsup >= 0.0 && self.lambda_unsup.is_finite()) {
            return Err(Error::Config(format!("lambda_unsup must be >= 0, got {}", self.lambda_unsup)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.mu < 1 {
            return Err(Error::Config("mu must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.optimiser.validate()?;
        self.augment.validate()
    }

    pub fn unlabelled_batch(&self) -> usize {
        self.mu * self.batch_size
    }
}

/// Draws labelled ids with probability proportional to the inverse frequency
/// of their class, so each class makes up half of the draws in expectation.
#[derive(Debug, Clone)]
pub struct WeightedSampler {
    ids: Vec<String>,
    labels: Vec<Label>,
    dist: WeightedIndex<f64>,
}

impl WeightedSampler {
    /// `entries` must hold both classes.
    pub fn new(entries: Vec<(String, Label)>) -> Result<Self> {
        let anomalies = entries.iter().filter(|e| e.1 == Label::Anomaly).count();
        let normals = entries.len() - anomalies;
        if anomalies == 0 || normals == 0 {
            let missing = if anomalies == 0 { "anomaly" } else { "normal" };
            return Err(Error::Sampler(format!(
                "labelled set has no {missing} examples; label at least one {missing} image before training"
            )));
        }
        let weights: Vec<f64> = entries
            .iter()
            .map(|e| match e.1 {
                Label::Anomaly => 1.0 / anomalies as f64,
                Label::Normal => 1.0 / normals as f64,
            })
            .collect();
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::Sampler(e.to_string()))?;
        let (ids, labels) = entries.into_iter().unzip();
        Ok(Self { ids, labels, dist })
    }

    pub fn from_store(labels: &LabelStore) -> Result<Self> {
        Self::new(
            labels
                .active()
                .into_iter()
                .map(|(id, e)| (id.to_string(), e.label))
                .collect(),
        )
    }

    /// Per-entry draw probability.
    pub fn probability(&self, index: usize) -> f64 {
        let total: f64 = (0..self.ids.len()).map(|i| self.weight(i)).sum();
        self.weight(index) / total
    }

    fn weight(&self, i: usize) -> f64 {
        let same = self.labels.iter().filter(|&&l| l == self.labels[i]).count();
        1.0 / same as f64
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(String, Label)> {
        (0..n)
            .map(|_| {
                let i = self.dist.sample(rng);
                (self.ids[i].clone(), self.labels[i])
            })
            .collect()
    }
}

/// `n` labelled ids drawn with class-balancing weights.
pub fn weighted_sample_labelled<R: Rng + ?Sized>(labels: &LabelStore, n: usize, rng: &mut R) -> Result<Vec<String>> {
    Ok(WeightedSampler::from_store(labels)?
        .draw(n, rng)
        .into_iter()
        .map(|(id, _)| id)
        .collect())
}

/// Mean cross-entropy of `n x 2` logits and its gradient with respect to the
/// logits.
pub fn supervised_loss(logits: &[f32], labels: &[usize]) -> (f64, Vec<f32>) {
    let n = labels.len();
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; logits.len()];
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
        let p = softmax(row);
        loss += log_sum_exp_loss(row, y);
        for k in 0..NUM_CLASSES {
            let t = if k == y { 1.0 } else { 0.0 };
            grad[i * NUM_CLASSES + k] = ((p[k] - t) / n as f64) as f32;
        }
    }
    (loss / n as f64, grad)
}

/// `logsumexp(row) - row[y]`, exact even when the softmax underflows.
fn log_sum_exp_loss(row: &[f32], y: usize) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    lse - row[y] as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnsupervisedLoss {
    pub loss: f64,
    pub mask_rate: f64,
    pub mask: Vec<bool>,
    pub pseudo_labels: Vec<usize>,
    /// Gradient with respect to the strong-view logits only.
    pub dstrong: Vec<f32>,
}

pub fn unsupervised_loss(weak: &[f32], strong: &[f32], tau: f64, temperature: f64) -> UnsupervisedLoss {
    let m = weak.len() / NUM_CLASSES;
    let mut out = UnsupervisedLoss {
        loss: 0.0,
        mask_rate: 0.0,
        mask: Vec::with_capacity(m),
        pseudo_labels: Vec::with_capacity(m),
        dstrong: vec![0.0; strong.len()],
    };
    if m == 0 {
        return out;
    }
    for i in 0..m {
        let w = &weak[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
        let scaled: Vec<f32> = w.iter().map(|&v| (v as f64 / temperature) as f32).collect();
        let q = softmax(&scaled);
        let (label, conf) = q
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best });
        let keep = conf >= tau;
        out.mask.push(keep);
        out.pseudo_labels.push(label);
        if keep {
            let s = &strong[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
            out.loss += log_sum_exp_loss(s, label);
            let p = softmax(s);
            for k in 0..NUM_CLASSES {
                let t = if k == label { 1.0 } else { 0.0 };
                out.dstrong[i * NUM_CLASSES + k] = ((p[k] - t) / m as f64) as f32;
            }
        }
    }
    out.loss /= m as f64;
    out.mask_rate = out.mask.iter().filter(|&&k| k).count() as f64 / m as f64;
    out
}

/// Ids drawn for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub labelled: Vec<(String, Label)>,
    pub unlabelled: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub step: usize,
    pub l_sup: f64,
    pub l_unsup: f64,
    pub loss: f64,
    pub mask_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<TrainStep>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,l_sup,l_unsup,mask_rate\n");
        for r in &self.steps {
            s.push_str(&format!("{},{:.9},{:.9},{:.6}\n", r.step, r.l_sup, r.l_unsup, r.mask_rate));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }
}

/// Per-cycle random streams. Labelled and unlabelled draws use separate
/// generators so one side never shifts the other's sequence.
fn cycle_rngs(seed: u64, cycle: u32) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut l = ChaCha8Rng::seed_from_u64(seed);
    l.set_stream(2 * cycle as u64);
    let mut u = ChaCha8Rng::seed_from_u64(seed);
    u.set_stream(2 * cycle as u64 + 1);
    (l, u)
}

fn load_all(source: &dyn ImageSource, ids: impl Iterator<Item = impl AsRef<str>>) -> Result<Vec<ImageTensor>> {
    ids.map(|id| source.load(id.as_ref())).collect()
}

/// Observer for training progress: `(completed steps, total steps)`.
pub type Progress<'a> = &'a (dyn Fn(usize, usize) + Sync);

/// Runs `cfg.iterations` optimisation steps. `cycle` (0-based) selects the
/// random streams, so successive cycles draw different batches.
///
/// On a non-finite loss or gradient the state is left as it was after the
/// last completed step and the error is returned.
pub fn train_cycle(
    state: &mut ModelState,
    catalog: &DatasetCatalog,
    labels: &LabelStore,
    source: &dyn ImageSource,
    cfg: &TrainConfig,
    cycle: u32,
    progress: Option<Progress<'_>>,
) -> Result<TrainLog> {
    cfg.validate()?;
    labels.check_against(catalog)?;
    let sampler = WeightedSampler::from_store(labels)?;
    let labelled: BTreeMap<&str, _> = labels.active();
    let pool_ids: Vec<&String> = catalog
        .unlabelled()
        .iter()
        .filter(|id| !labelled.contains_key(id.as_str()))
        .collect();
    let (mut rng_l, mut rng_u) = cycle_rngs(cfg.seed, cycle);
    let pool: Vec<&String> = sample(&mut rng_u, pool_ids.len(), cfg.pool_size.min(pool_ids.len()))
        .into_iter()
        .map(|i| pool_ids[i])
        .collect();

    let net = state.net();
    let mut log = TrainLog::default();
    for step in 0..cfg.iterations {
        let plan = BatchPlan {
            labelled: sampler.draw(cfg.batch_size, &mut rng_l),
            unlabelled: if pool.is_empty() {
                Vec::new()
            } else {
                (0..cfg.unlabelled_batch())
                    .map(|_| pool[rng_u.gen_range(0..pool.len())].clone())
                    .collect()
            },
        };

        let x_l = load_all(source, plan.labelled.iter().map(|e| &e.0))?
            .iter()
            .map(|img| weak_augment(img, &mut rng_l))
            .collect::<Vec<_>>();
        let y_l: Vec<usize> = plan.labelled.iter().map(|e| e.1.index()).collect();
        let raw_u = load_all(source, plan.unlabelled.iter())?;
        let x_weak: Vec<ImageTensor> = raw_u.iter().map(|img| weak_augment(img, &mut rng_u)).collect();
        let x_strong = raw_u
            .iter()
            .map(|img| strong_augment(&weak_augment(img, &mut rng_u), &cfg.augment, &mut rng_u))
            .collect::<Result<Vec<_>>>()?;

        let last_good = state.clone();
        let result = (|| -> Result<TrainStep> {
            let mut grads = zeros_like(&state.params);
            let pass_l = net.forward(&state.params, &mut state.stats, &Batch::from_images(&x_l)?, NormMode::Train, true)?;
            let (l_sup, dl) = supervised_loss(&pass_l.logits, &y_l);
            net.backward_into(&state.params, &pass_l, &dl, &mut grads)?;

            let (l_unsup, mask_rate) = if plan.unlabelled.is_empty() {
                (0.0, 0.0)
            } else {
                let weak = net.forward(&state.params, &mut state.stats, &Batch::from_images(&x_weak)?, NormMode::Train, false)?;
                let pass_s = net.forward(
                    &state.params,
                    &mut state.stats,
                    &Batch::from_images(&x_strong)?,
                    NormMode::BatchOnly,
                    true,
                )?;
                let u = unsupervised_loss(&weak.logits, &pass_s.logits, cfg.tau, cfg.temperature);
                if cfg.lambda_unsup > 0.0 && u.mask.iter().any(|&k| k) {
                    let lambda = cfg.lambda_unsup as f32;
                    let ds: Vec<f32> = u.dstrong.iter().map(|g| g * lambda).collect();
                    net.backward_into(&state.params, &pass_s, &ds, &mut grads)?;
                }
                (u.loss, u.mask_rate)
            };
            let loss = l_sup + cfg.lambda_unsup * l_unsup;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at cycle {cycle} step {step}: l_sup={l_sup} l_unsup={l_unsup}"
                )));
            }
            sgd_step(state, &grads, &cfg.optimiser)?;
            ema_update(state, &cfg.optimiser)?;
            Ok(TrainStep {
                step,
                l_sup,
                l_unsup,
                loss,
                mask_rate,
            })
        })();
        match result {
            Ok(row) => log.steps.push(row),
            Err(e) => {
                *state = last_good;
                log::error!("training aborted: {e}");
                return Err(e);
            }
        }
        if let Some(cb) = progress {
            cb(step + 1, cfg.iterations);
        }
    }
    Ok(log)
}
