//! Synthetic two-population image sets for end-to-end benchmarks.
//!
//! Normal images hold one to three textured Gaussian blobs; anomalies hold a
//! ring, sometimes with a small blob beside it. Every image is generated from
//! its own random stream, so an image depends only on the set seed and its
//! position, never on how many images are generated in total.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::catalog::{DatasetCatalog, ImageLocation, ImageRecord, Label, Split};
use crate::error::{Error, Result};
use crate::labels::{LabelStore, Provenance};
use crate::loader::MemorySource;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub channels: usize,
    pub size: usize,
    pub seed: u64,
    pub seed_anomalies: usize,
    pub seed_normals: usize,
    pub unlabelled: usize,
    /// Anomaly fraction of the unlabelled pool.
    pub unlabelled_prevalence: f64,
    /// Held-out evaluation images; 0 disables the test split.
    pub test: usize,
    pub test_prevalence: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::miniimagenet_like(42)
    }
}

impl SynthConfig {
    /// 5 + 495 seed labels, 1% anomalies in pool and test split.
    pub fn miniimagenet_like(seed: u64) -> Self {
        Self {
            channels: 3,
            size: 64,
            seed,
            seed_anomalies: 5,
            seed_normals: 495,
            unlabelled: 2000,
            unlabelled_prevalence: 0.01,
            test: 2000,
            test_prevalence: 0.01,
        }
    }

    /// 10 + 30 seed labels, 25% anomalies in pool and test split.
    pub fn galaxymnist_like(seed: u64) -> Self {
        Self {
            seed_anomalies: 10,
            seed_normals: 30,
            unlabelled: 2000,
            unlabelled_prevalence: 0.25,
            test: 2000,
            test_prevalence: 0.25,
            ..Self::miniimagenet_like(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.size < crate::catalog::MIN_SIDE as usize {
            return Err(Error::Config(format!("image size {} too small", self.size)));
        }
        for p in [self.unlabelled_prevalence, self.test_prevalence] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("prevalence {p} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.seed_anomalies + self.seed_normals + self.unlabelled + self.test
    }
}

/// Generated catalog (with ground truth), pixels, and the seed labels.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub catalog: DatasetCatalog,
    pub source: MemorySource,
    pub seed_labels: LabelStore,
}

fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws one image of the given class.
pub fn synth_image<R: Rng + ?Sized>(label: Label, channels: usize, size: usize, rng: &mut R) -> ImageTensor {
    let s = size as f32;
    let mut img = ImageTensor::zeros(channels, size, size);
    let noise = Normal::new(0.0f32, 0.04).expect("valid sigma");
    for c in 0..channels {
        let level = rng.gen_range(0.05f32..0.2);
        for v in img.plane_mut(c) {
            *v = level + noise.sample(rng);
        }
    }
    let add = |img: &mut ImageTensor, f: &dyn Fn(f32, f32) -> f32, tint: &[f32]| {
        for y in 0..size {
            for x in 0..size {
                let v = f(x as f32 + 0.5, y as f32 + 0.5);
                for (c, t) in tint.iter().enumerate() {
                    let cur = img.get(c, y, x);
                    img.set(c, y, x, cur + v * t);
                }
            }
        }
    };
    let tint = |rng: &mut R| -> Vec<f32> { (0..channels).map(|_| rng.gen_range(0.5f32..1.0)).collect() };

    let blob = |rng: &mut R, sigma_range: (f32, f32)| {
        let (cx, cy) = (rng.gen_range(0.2 * s..0.8 * s), rng.gen_range(0.2 * s..0.8 * s));
        let sigma = rng.gen_range(sigma_range.0 * s..sigma_range.1 * s);
        let amp = rng.gen_range(0.3f32..0.7);
        let (fx, fy) = (rng.gen_range(-0.8f32..0.8), rng.gen_range(-0.8f32..0.8));
        let phase = rng.gen_range(0.0f32..std::f32::consts::TAU);
        move |x: f32, y: f32| {
            let r2 = (x - cx).powi(2) + (y - cy).powi(2);
            let texture = 1.0 + 0.3 * (fx * x + fy * y + phase).sin();
            amp * texture * (-r2 / (2.0 * sigma * sigma)).exp()
        }
    };

    match label {
        Label::Normal => {
            for _ in 0..rng.gen_range(1..=3) {
                let f = blob(rng, (0.06, 0.15));
                let t = tint(rng);
                add(&mut img, &f, &t);
            }
        }
        Label::Anomaly => {
            let (cx, cy) = (rng.gen_range(0.35 * s..0.65 * s), rng.gen_range(0.35 * s..0.65 * s));
            let radius = rng.gen_range(0.15 * s..0.28 * s);
            let width = rng.gen_range(0.03 * s..0.06 * s).max(0.8);
            let amp = rng.gen_range(0.4f32..0.8);
            let ring = move |x: f32, y: f32| {
                let r = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                amp * (-(r - radius).powi(2) / (2.0 * width * width)).exp()
            };
            let t = tint(rng);
            add(&mut img, &ring, &t);
            if rng.gen_bool(0.5) {
                let f = blob(rng, (0.04, 0.08));
                let t = tint(rng);
                add(&mut img, &f, &t);
            }
        }
    }
    img.clamp_unit();
    img
}

fn class_plan(n: usize, prevalence: f64) -> Vec<Label> {
    let anomalies = (n as f64 * prevalence).round() as usize;
    let mut v = vec![Label::Anomaly; anomalies];
    v.resize(n, Label::Normal);
    v
}

/// Generates the full set. Ids are `syn-NNNNN` in a shuffled order, so id
/// order carries no information about class or split.
pub fn generate(cfg: &SynthConfig) -> Result<SyntheticSet> {
    cfg.validate()?;
    let mut plan: Vec<(Label, Split)> = Vec::with_capacity(cfg.total());
    plan.extend(std::iter::repeat((Label::Anomaly, Split::Labelled)).take(cfg.seed_anomalies));
    plan.extend(std::iter::repeat((Label::Normal, Split::Labelled)).take(cfg.seed_normals));
    plan.extend(class_plan(cfg.unlabelled, cfg.unlabelled_prevalence).into_iter().map(|l| (l, Split::Unlabelled)));
    plan.extend(class_plan(cfg.test, cfg.test_prevalence).into_iter().map(|l| (l, Split::Test)));
    let mut order = stream(cfg.seed, u64::MAX);
    plan.shuffle(&mut order);

    let mut catalog = DatasetCatalog::new();
    let mut source = MemorySource::new();
    let mut seed_labels = LabelStore::new();
    for (i, (label, split)) in plan.into_iter().enumerate() {
        let id = format!("syn-{i:05}");
        let img = synth_image(label, cfg.channels, cfg.size, &mut stream(cfg.seed, i as u64));
        source.insert(id.clone(), &img)?;
        catalog.push(
            ImageRecord {
                id: id.clone(),
                source: ImageLocation::Memory,
                channels: cfg.channels as u8,
                dims: Some((cfg.size as u32, cfg.size as u32)),
                gt_label: Some(label),
            },
            split,
        )?;
        if split == Split::Labelled {
            seed_labels.append(id, label, Provenance::Seed);
        }
    }
    Ok(SyntheticSet {
        catalog,
        source,
        seed_labels,
    })
}
