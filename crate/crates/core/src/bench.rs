//! Multi-seed simulated labelling benchmarks with table-shaped CSV output.
//!
//! A protocol fixes the seed label counts and anomaly prevalence. Each seed
//! runs the full oracle-driven loop (train, rank, label top anomalies and
//! false positives) on either a generated image set or a user catalog with
//! ground truth.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSpec;
use crate::catalog::{DatasetCatalog, Label, Split};
use crate::error::{Error, Result};
use crate::labels::{LabelStore, Provenance};
use crate::loader::ImageSource;
use crate::metrics::MetricsReport;
use crate::session::{run_simulated_protocol, CycleReport, SessionConfig};
use crate::synth::{generate, SynthConfig};

/// Seeds used when `--seeds N` asks for N runs; runs beyond this list use
/// `EXTRA_SEED_BASE + i`.
pub const DEFAULT_SEEDS: [u64; 9] = [42, 76032, 730, 83209, 13798, 4538, 5923, 99271, 3762];
pub const EXTRA_SEED_BASE: u64 = 100_000;

pub fn seeds_for(n: usize) -> Vec<u64> {
    (0..n)
        .map(|i| DEFAULT_SEEDS.get(i).copied().unwrap_or(EXTRA_SEED_BASE + i as u64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// 5 anomalies + 495 normals labelled, 1% prevalence.
    MiniimagenetLike,
    /// 10 anomalies + 30 normals labelled, 25% prevalence.
    GalaxymnistLike,
}

impl Protocol {
    pub fn synth_config(self, seed: u64) -> SynthConfig {
        match self {
            Protocol::MiniimagenetLike => SynthConfig::miniimagenet_like(seed),
            Protocol::GalaxymnistLike => SynthConfig::galaxymnist_like(seed),
        }
    }

    /// `(anomalies, normals)` in the seed label set.
    pub fn seed_counts(self) -> (usize, usize) {
        let c = self.synth_config(0);
        (c.seed_anomalies, c.seed_normals)
    }

    /// Splits `total` initial labels keeping the protocol's anomaly fraction,
    /// with at least one of each class.
    pub fn initial_split(self, total: usize) -> Result<(usize, usize)> {
        if total < 2 {
            return Err(Error::Usage(format!("initial label count must be at least 2, got {total}")));
        }
        let (a, n) = self.seed_counts();
        let anomalies = ((total as f64 * a as f64 / (a + n) as f64).round() as usize).clamp(1, total - 1);
        Ok((anomalies, total - anomalies))
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::MiniimagenetLike => "miniimagenet-like",
            Protocol::GalaxymnistLike => "galaxymnist-like",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "miniimagenet-like" => Ok(Protocol::MiniimagenetLike),
            "galaxymnist-like" => Ok(Protocol::GalaxymnistLike),
            other => Err(Error::Usage(format!(
                "unknown protocol '{other}' (use miniimagenet-like or galaxymnist-like)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    pub cycles: u32,
    /// Overrides the protocol's seed label count, keeping its anomaly fraction.
    pub initial_labels: Option<usize>,
    /// Side length of generated images.
    pub size: usize,
    /// Template for every run; `train.seed` is replaced per run.
    pub session: SessionConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::MiniimagenetLike,
            seeds: seeds_for(DEFAULT_SEEDS.len()),
            cycles: 3,
            initial_labels: None,
            size: 64,
            session: SessionConfig::default(),
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Usage("at least one seed is required".into()));
        }
        if let Some(n) = self.initial_labels {
            self.protocol.initial_split(n)?;
        }
        self.session.validate()
    }
}

/// Images the benchmark runs on.
#[derive(Clone)]
pub enum BenchData {
    /// A fresh generated set per seed.
    Synthetic,
    /// A user catalog with ground truth for every record. Test-split records
    /// stay held out; seed labels are drawn per seed from the rest, and the
    /// remainder forms the unlabelled pool.
    Catalog {
        catalog: DatasetCatalog,
        source: Arc<dyn ImageSource>,
        shape: (usize, usize, usize),
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub cycles: Vec<CycleReport>,
    pub label_counts: Vec<usize>,
    pub shortfalls: Vec<u32>,
}

impl SeedResult {
    pub fn final_metrics(&self) -> Option<&MetricsReport> {
        self.cycles.last().and_then(|c| c.metrics.as_ref())
    }

    pub fn cycle_metrics(&self, cycle: u32) -> Option<&MetricsReport> {
        self.cycles.iter().find(|c| c.cycle == cycle).and_then(|c| c.metrics.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub protocol: Protocol,
    pub results: Vec<SeedResult>,
}

/// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

type Column = (&'static str, fn(&MetricsReport) -> f64, usize);

const COLUMNS: [Column; 5] = [
    ("auroc", |m| m.auroc, 4),
    ("auprc", |m| m.auprc, 4),
    ("precision_top_0.1", |m| m.precision_at_0_1, 2),
    ("precision_top_1", |m| m.precision_at_1, 2),
    ("efficiency_at_1", |m| m.efficiency_at_1, 2),
];

impl BenchReport {
    /// One row per seed with the final-cycle metrics, then a
    /// `mean,<mean> ± <sd>,...` row.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("seed");
        for (name, _, _) in COLUMNS {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        let finals: Vec<Option<&MetricsReport>> = self.results.iter().map(|r| r.final_metrics()).collect();
        for (r, m) in self.results.iter().zip(&finals) {
            s.push_str(&r.seed.to_string());
            for (_, get, digits) in COLUMNS {
                match m {
                    Some(m) => s.push_str(&format!(",{:.*}", digits, get(m))),
                    None => s.push_str(",nan"),
                }
            }
            s.push('\n');
        }
        s.push_str("mean");
        for (_, get, digits) in COLUMNS {
            let xs: Vec<f64> = finals.iter().flatten().map(|m| get(m)).collect();
            let (mean, sd) = mean_sd(&xs);
            s.push_str(&format!(",{mean:.digits$} ± {sd:.digits$}"));
        }
        s.push('\n');
        s
    }

    /// One row per seed and cycle.
    pub fn cycles_csv(&self) -> String {
        let mut s = String::from("seed,cycle,labelled,mean_mask_rate");
        for (name, _, _) in COLUMNS {
            s.push(',');
            s.push_str(name);
        }
        s.push('\n');
        for r in &self.results {
            for c in &r.cycles {
                s.push_str(&format!("{},{},{},{:.4}", r.seed, c.cycle, c.labelled, c.mean_mask_rate));
                for (_, get, digits) in COLUMNS {
                    match &c.metrics {
                        Some(m) => s.push_str(&format!(",{:.*}", digits, get(m))),
                        None => s.push_str(",nan"),
                    }
                }
                s.push('\n');
            }
        }
        s
    }
}

fn draw_seed_labels(
    catalog: &DatasetCatalog,
    counts: (usize, usize),
    seed: u64,
) -> Result<(DatasetCatalog, LabelStore)> {
    let mut anomalies = Vec::new();
    let mut normals = Vec::new();
    for r in catalog.records() {
        if catalog.split_of(&r.id) == Some(Split::Test) {
            continue;
        }
        match r.gt_label {
            Some(Label::Anomaly) => anomalies.push(r.id.clone()),
            Some(Label::Normal) => normals.push(r.id.clone()),
            None => {
                return Err(Error::Config(format!(
                    "benchmark mode needs ground truth for every image; '{}' has none",
                    r.id
                )))
            }
        }
    }
    if anomalies.len() < counts.0 || normals.len() < counts.1 {
        return Err(Error::Config(format!(
            "catalog has {} anomalies and {} normals outside the test split; protocol needs {} and {}",
            anomalies.len(),
            normals.len(),
            counts.0,
            counts.1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    anomalies.shuffle(&mut rng);
    normals.shuffle(&mut rng);
    let mut labels = LabelStore::new();
    let mut labelled = std::collections::BTreeSet::new();
    for (ids, n, label) in [(&anomalies, counts.0, Label::Anomaly), (&normals, counts.1, Label::Normal)] {
        for id in &ids[..n] {
            labels.append(id.clone(), label, Provenance::Seed);
            labelled.insert(id.clone());
        }
    }
    let unlabelled = anomalies
        .iter()
        .chain(&normals)
        .filter(|id| !labelled.contains(*id))
        .cloned()
        .collect();
    let mut out = catalog.clone();
    out.set_splits(labelled, unlabelled, catalog.test().clone())?;
    Ok((out, labels))
}

/// Runs one protocol for one seed.
pub fn run_seed(
    config: &BenchConfig,
    data: &BenchData,
    seed: u64,
    on_cycle: impl FnMut(&CycleReport),
) -> Result<SeedResult> {
    let counts = match config.initial_labels {
        Some(n) => config.protocol.initial_split(n)?,
        None => config.protocol.seed_counts(),
    };
    let mut session = config.session.clone();
    session.train.seed = seed;
    let (catalog, labels, source) = match data {
        BenchData::Synthetic => {
            let synth = SynthConfig {
                size: config.size,
                seed_anomalies: counts.0,
                seed_normals: counts.1,
                ..config.protocol.synth_config(seed)
            };
            let set = generate(&synth)?;
            session.backbone = BackboneSpec::with_input(synth.channels, synth.size, synth.size);
            let source: Arc<dyn ImageSource> = Arc::new(set.source);
            (set.catalog, set.seed_labels, source)
        }
        BenchData::Catalog { catalog, source, shape } => {
            let (catalog, labels) = draw_seed_labels(catalog, counts, seed)?;
            session.backbone = BackboneSpec::with_input(shape.0, shape.1, shape.2);
            (catalog, labels, source.clone())
        }
    };
    let report = run_simulated_protocol(catalog, labels, source, session, config.cycles, on_cycle)?;
    Ok(SeedResult {
        seed,
        cycles: report.cycles,
        label_counts: report.label_counts,
        shortfalls: report.shortfalls,
    })
}

/// Runs every configured seed in order. `on_cycle` receives `(seed, report)`.
pub fn run_bench(
    config: &BenchConfig,
    data: &BenchData,
    mut on_cycle: impl FnMut(u64, &CycleReport),
) -> Result<BenchReport> {
    config.validate()?;
    let mut results = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        results.push(run_seed(config, data, seed, |c| on_cycle(seed, c))?);
    }
    Ok(BenchReport {
        protocol: config.protocol,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_extend_past_the_fixed_list() {
        assert_eq!(seeds_for(2), vec![42, 76032]);
        let ten = seeds_for(10);
        assert_eq!(ten[8], 3762);
        assert_eq!(ten[9], EXTRA_SEED_BASE + 9);
    }

    #[test]
    fn initial_split_keeps_fraction() {
        let p = Protocol::MiniimagenetLike;
        assert_eq!(p.initial_split(100).unwrap(), (1, 99));
        assert_eq!(p.initial_split(500).unwrap(), (5, 495));
        assert_eq!(p.initial_split(1000).unwrap(), (10, 990));
        assert_eq!(Protocol::GalaxymnistLike.initial_split(40).unwrap(), (10, 30));
        assert!(p.initial_split(1).is_err());
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in [Protocol::MiniimagenetLike, Protocol::GalaxymnistLike] {
            assert_eq!(p.to_string().parse::<Protocol>().unwrap(), p);
        }
        assert!(matches!("imagenet".parse::<Protocol>(), Err(Error::Usage(_))));
    }

    #[test]
    fn mean_sd_matches_hand_values() {
        let (m, s) = mean_sd(&[0.95, 0.97, 0.97, 0.97, 0.95]);
        assert!((m - 0.962).abs() < 1e-12);
        assert!((s - 0.010954451150103).abs() < 1e-12);
        assert_eq!(mean_sd(&[3.0]), (3.0, 0.0));
    }

    fn report(m: &[(f64, f64)]) -> BenchReport {
        let results = m
            .iter()
            .enumerate()
            .map(|(i, &(auroc, eff))| SeedResult {
                seed: i as u64,
                cycles: vec![CycleReport {
                    cycle: 1,
                    labelled: 10,
                    iterations: 5,
                    mean_mask_rate: 0.5,
                    final_l_sup: 0.1,
                    metrics: Some(MetricsReport {
                        auroc,
                        auprc: 0.5,
                        efficiency: vec![],
                        efficiency_at_1: eff,
                        precision_at_0_1: 100.0,
                        precision_at_1: eff,
                        n_anomalies: 1,
                        n_total: 2,
                    }),
                }],
                label_counts: vec![10, 12],
                shortfalls: vec![],
            })
            .collect();
        BenchReport {
            protocol: Protocol::MiniimagenetLike,
            results,
        }
    }

    #[test]
    fn table_has_mean_row() {
        let csv = report(&[(0.9, 60.0), (1.0, 80.0)]).table_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "seed,auroc,auprc,precision_top_0.1,precision_top_1,efficiency_at_1");
        assert_eq!(lines[1], "0,0.9000,0.5000,100.00,60.00,60.00");
        assert_eq!(lines[3], "mean,0.9500 ± 0.0707,0.5000 ± 0.0000,100.00 ± 0.00,70.00 ± 14.14,70.00 ± 14.14");
    }

    #[test]
    fn catalog_seed_draw_respects_counts_and_test_split() {
        use crate::catalog::{ImageLocation, ImageRecord};
        let mut catalog = DatasetCatalog::new();
        for i in 0..40 {
            let gt = if i % 4 == 0 { Label::Anomaly } else { Label::Normal };
            let split = if i >= 32 { Split::Test } else { Split::Unlabelled };
            let record = ImageRecord {
                id: format!("g{i:02}"),
                source: ImageLocation::Memory,
                channels: 3,
                dims: None,
                gt_label: Some(gt),
            };
            catalog.push(record, split).unwrap();
        }
        let (c, labels) = draw_seed_labels(&catalog, (3, 5), 7).unwrap();
        assert_eq!(labels.class_counts(), (5, 3));
        assert_eq!((c.labelled().len(), c.unlabelled().len(), c.test().len()), (8, 24, 8));
        let (again, _) = draw_seed_labels(&catalog, (3, 5), 7).unwrap();
        assert_eq!(again.labelled(), c.labelled());
        assert!(matches!(draw_seed_labels(&catalog, (9, 5), 7), Err(Error::Config(_))));
    }
}
