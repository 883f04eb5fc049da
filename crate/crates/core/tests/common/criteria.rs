//! Acceptance checks shared by the acceptance runner and the per-area tests.
//! Each returns an [`Outcome`] rather than panicking so the runner can report
//! every criterion.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rarematch::backbone::{ema_update, read_checkpoint, write_checkpoint, BackboneSpec, ModelState, OptimiserConfig, ParamSet};
use rarematch::bench::{run_bench, seeds_for, BenchConfig, BenchData, Protocol, SeedResult};
use rarematch::catalog::{DatasetCatalog, Label, Split};
use rarematch::fits::parse_fits;
use rarematch::labels::{LabelStore, Provenance};
use rarematch::loader::ImageSource;
use rarematch::metrics::{auprc, auroc, rank_order, ScoreRow, ScoreTable};
use rarematch::scorer::{score_ids, score_stream, ScoreOptions};
use rarematch::session::{run_simulated_protocol, ProtocolReport, SessionConfig};
use rarematch::shard::{write_cache, ShardCache, ShardShape};
use rarematch::stretch::StretchSpec;
use rarematch::synth::{generate, synth_image, SynthConfig};
use rarematch::trainer::{train_cycle, unsupervised_loss, TrainConfig, WeightedSampler};

use super::{enumerated_ap, gradient_check, trapezoid_auroc};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn table(scores: &[f64], labels: &[bool]) -> ScoreTable {
    ScoreTable::new(
        scores
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (&s, &l))| ScoreRow::new(format!("r{i:04}"), s, Some(if l { Label::Anomaly } else { Label::Normal })))
            .collect(),
    )
    .unwrap()
}

/// Random table with both classes. Half the tables draw scores from a
/// coarse grid so that ties are common.
pub fn random_table(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    loop {
        let coarse = rng.gen_bool(0.5);
        let scores: Vec<f64> = (0..n)
            .map(|_| if coarse { rng.gen_range(0..6) as f64 / 5.0 } else { rng.gen::<f64>() })
            .collect();
        let rate = rng.gen_range(0.05..0.95);
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(rate)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            return (scores, labels);
        }
    }
}

/// Rank AUROC against trapezoidal ROC integration on 1,000 tables (n <= 500),
/// and AP against exhaustive threshold enumeration on every table with
/// n <= 12 (the first 400 tables are drawn that small).
pub fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut auroc_err, mut ap_err, mut small) = (0.0f64, 0.0f64, 0usize);
    for t in 0..1000 {
        let n = if t < 400 { rng.gen_range(2..=12) } else { rng.gen_range(2..=500) };
        let (scores, labels) = random_table(&mut rng, n);
        let tb = table(&scores, &labels);
        auroc_err = auroc_err.max((auroc(&tb).unwrap() - trapezoid_auroc(&scores, &labels)).abs());
        if n <= 12 {
            small += 1;
            ap_err = ap_err.max((auprc(&tb).unwrap() - enumerated_ap(&scores, &labels)).abs());
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        auroc_err <= 1e-9 && ap_err <= 1e-12 && elapsed < Duration::from_secs(30),
        format!(
            "max |AUROC - trapezoid| {auroc_err:.1e} over 1000 tables; max |AP - enumeration| {ap_err:.1e} over {small} tables with n <= 12; {:.2}s",
            secs(elapsed)
        ),
    )
}

pub fn gradients() -> Outcome {
    let start = Instant::now();
    let r = gradient_check(64, 1e-3, 2024);
    let elapsed = start.elapsed();
    Outcome::new(
        r.checked == 64 && r.max_rel_err < 1e-3 && r.max_conv_bias_grad < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "64 parameters, max relative error {:.2e}, {} kink-straddling draws redrawn, conv-bias |grad| <= {:.1e}; {:.2}s",
            r.max_rel_err,
            r.redrawn,
            r.max_conv_bias_grad,
            secs(elapsed)
        ),
    )
}

/// Shadow starting at zero with constant parameters `c` for n updates.
pub fn ema_closed_form() -> Outcome {
    let spec = BackboneSpec { channels: 1, height: 8, width: 8, widths: vec![4] };
    let cfg = OptimiserConfig::default();
    let mut worst = 0.0f64;
    for c in [1.0f32, -2.5, 0.3] {
        let mut state = ModelState::new(spec.clone(), 0).unwrap();
        state.ema.values_mut().for_each(|t| t.data.fill(0.0));
        state.params.values_mut().for_each(|t| t.data.fill(c));
        for step in 1..=1000u32 {
            ema_update(&mut state, &cfg).unwrap();
            if [1, 10, 100, 1000].contains(&step) {
                let expect = c as f64 * (1.0 - 0.99f64.powi(step as i32));
                for v in state.ema.values().flat_map(|t| t.data.iter()) {
                    worst = worst.max((*v as f64 - expect).abs());
                }
            }
        }
    }
    Outcome::new(worst < 1e-6, format!("max |shadow - c(1 - 0.99^n)| {worst:.2e} for n in 1,10,100,1000"))
}

/// Small generated set for quick training runs.
pub fn tiny_set(seed: u64) -> rarematch::synth::SyntheticSet {
    generate(&SynthConfig {
        size: 16,
        seed_anomalies: 4,
        seed_normals: 12,
        unlabelled: 64,
        unlabelled_prevalence: 0.25,
        test: 0,
        test_prevalence: 0.0,
        ..SynthConfig::miniimagenet_like(seed)
    })
    .unwrap()
}

pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        mu: 2,
        iterations: 6,
        seed: 3,
        ..TrainConfig::default()
    }
}

pub fn tiny_spec() -> BackboneSpec {
    BackboneSpec { widths: vec![4, 8, 8], ..BackboneSpec::with_input(3, 16, 16) }
}

fn same_bits(a: &ParamSet, b: &ParamSet) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|((ka, ta), (kb, tb))| {
            ka == kb && ta.data.len() == tb.data.len() && ta.data.iter().zip(&tb.data).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

fn train(cfg: &TrainConfig, catalog: &DatasetCatalog, labels: &LabelStore, source: &dyn ImageSource) -> (ModelState, rarematch::trainer::TrainLog) {
    let mut state = ModelState::new(tiny_spec(), 9).unwrap();
    let log = train_cycle(&mut state, catalog, labels, source, cfg, 0, None).unwrap();
    (state, log)
}

/// Empty mask gives zero unsupervised loss and total = supervised loss; with
/// the unsupervised weight at zero, parameters do not depend on unlabelled
/// data (pixels or pool membership).
pub fn masking() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    // Loss level: threshold just above the most confident weak prediction.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let weak: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let strong: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let max_conf = weak
        .chunks(2)
        .map(|l| {
            let (a, b) = (l[0] as f64 / 0.5, l[1] as f64 / 0.5);
            let m = a.max(b);
            1.0 / (1.0 + (a.min(b) - m).exp())
        })
        .fold(0.0, f64::max);
    let u = unsupervised_loss(&weak, &strong, max_conf + 1e-9, 0.5);
    let loss_ok = u.loss == 0.0 && u.mask_rate == 0.0 && u.dstrong.iter().all(|&g| g == 0.0);
    pass &= loss_ok;
    notes.push(format!("loss-level empty mask: L_unsup {} (max weak confidence {max_conf:.6})", u.loss));

    // Training level: tau = 1 is never reached by a freshly initialised net.
    let set = tiny_set(11);
    let cfg = TrainConfig { tau: 1.0, ..tiny_train_config() };
    let (_, log) = train(&cfg, &set.catalog, &set.seed_labels, &set.source);
    let steps_ok = log
        .steps
        .iter()
        .all(|s| s.l_unsup == 0.0 && s.mask_rate == 0.0 && s.loss.to_bits() == s.l_sup.to_bits());
    pass &= steps_ok;
    notes.push(format!("tau=1: {} steps with L_unsup = 0 and L = L_sup: {steps_ok}", log.steps.len()));

    // lambda = 0: swap every pool image, and separately halve the pool.
    let cfg0 = TrainConfig { lambda_unsup: 0.0, tau: 0.01, ..tiny_train_config() };
    let (base, _) = train(&cfg0, &set.catalog, &set.seed_labels, &set.source);
    let mut swapped = set.source.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for id in set.catalog.unlabelled() {
        let label = if rng.gen_bool(0.5) { Label::Anomaly } else { Label::Normal };
        swapped.insert(id.clone(), &synth_image(label, 3, 16, &mut rng)).unwrap();
    }
    let (other_pixels, _) = train(&cfg0, &set.catalog, &set.seed_labels, &swapped);
    let mut halved = set.catalog.clone();
    let keep: std::collections::BTreeSet<String> = set.catalog.unlabelled().iter().step_by(2).cloned().collect();
    halved.set_splits(set.catalog.labelled().clone(), keep, Default::default()).unwrap();
    let (other_pool, _) = train(&cfg0, &halved, &set.seed_labels, &set.source);
    let independent = [&other_pixels, &other_pool]
        .iter()
        .all(|s| same_bits(&s.params, &base.params) && same_bits(&s.ema, &base.ema) && same_bits(&s.velocity, &base.velocity));
    pass &= independent;
    notes.push(format!("lambda=0: parameters bitwise equal across pool pixels and pool size: {independent}"));

    // Control: with lambda = 1 the same swap does change the parameters.
    let cfg1 = TrainConfig { lambda_unsup: 1.0, ..cfg0 };
    let (a, _) = train(&cfg1, &set.catalog, &set.seed_labels, &set.source);
    let (b, _) = train(&cfg1, &set.catalog, &set.seed_labels, &swapped);
    let sensitive = !same_bits(&a.params, &b.params);
    pass &= sensitive;
    notes.push(format!("control lambda=1 differs: {sensitive}"));
    Outcome::new(pass, notes.join("; "))
}

/// Anomaly fraction of labelled batches drawn by the weighted sampler with
/// 1% anomalies among the labels.
pub fn oversampling() -> Outcome {
    let entries: Vec<(String, Label)> = (0..500)
        .map(|i| (format!("l{i:03}"), if i < 5 { Label::Anomaly } else { Label::Normal }))
        .collect();
    let sampler = WeightedSampler::new(entries).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (batches, size) = (2000, 16);
    let mut anomalies = 0usize;
    for _ in 0..batches {
        anomalies += sampler.draw(size, &mut rng).iter().filter(|(_, l)| *l == Label::Anomaly).count();
    }
    let fraction = anomalies as f64 / (batches * size) as f64;
    Outcome::new(
        (fraction - 0.5).abs() <= 0.03,
        format!("anomaly fraction {fraction:.4} over {batches} batches of {size} (5 of 500 labels are anomalies)"),
    )
}

fn fits_card(key: &str, value: &str) -> Vec<u8> {
    let mut c = if value.is_empty() { format!("{key:<8}") } else { format!("{key:<8}= {value:>20}") }.into_bytes();
    c.resize(80, b' ');
    c
}

/// FITS bytes built card by card. `values` are raw big-endian encodings.
pub fn fits_bytes(bitpix: i64, cols: usize, rows: usize, extra: &[(&str, &str)], data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(fits_card("SIMPLE", "T"));
    out.extend(fits_card("BITPIX", &bitpix.to_string()));
    out.extend(fits_card("NAXIS", "2"));
    out.extend(fits_card("NAXIS1", &cols.to_string()));
    out.extend(fits_card("NAXIS2", &rows.to_string()));
    for (k, v) in extra {
        out.extend(fits_card(k, v));
    }
    out.extend(fits_card("END", ""));
    out.resize(out.len().div_ceil(2880) * 2880, b' ');
    out.extend_from_slice(data);
    out.resize(out.len().div_ceil(2880) * 2880, 0);
    out
}

/// `(name, bytes, expected physical values in row-major order)`.
pub fn fits_fixtures() -> Vec<(String, Vec<u8>, Vec<f64>)> {
    let be = |v: &[i64], width: usize| -> Vec<u8> {
        v.iter()
            .flat_map(|&x| match width {
                1 => vec![x as u8],
                2 => (x as i16).to_be_bytes().to_vec(),
                _ => (x as i32).to_be_bytes().to_vec(),
            })
            .collect()
    };
    let f32s = [1.5f32, -2.25, 0.0, 3.0e10, f32::MIN_POSITIVE, 0.1];
    let f64s = [0.1f64, -1e300, 5e-324, 2.5, -0.0, 123456.789];
    let comments: Vec<(&str, &str)> = vec![("COMMENT", ""); 40];
    vec![
        ("bitpix 8".into(), fits_bytes(8, 3, 2, &[], &be(&[0, 1, 2, 255, 128, 7], 1)), vec![0.0, 1.0, 2.0, 255.0, 128.0, 7.0]),
        (
            "bitpix 8, BZERO -128".into(),
            fits_bytes(8, 3, 2, &[("BZERO", "-128")], &be(&[0, 255, 128, 127, 1, 200], 1)),
            vec![-128.0, 127.0, 0.0, -1.0, -127.0, 72.0],
        ),
        (
            "bitpix 16".into(),
            fits_bytes(16, 3, 2, &[], &be(&[-32768, -1, 0, 1, 32767, 1234], 2)),
            vec![-32768.0, -1.0, 0.0, 1.0, 32767.0, 1234.0],
        ),
        (
            "bitpix 16, BZERO 32768 (unsigned)".into(),
            fits_bytes(16, 3, 2, &[("BZERO", "32768")], &be(&[-32768, -1, 0, 1, 32767, 1234], 2)),
            vec![0.0, 32767.0, 32768.0, 32769.0, 65535.0, 34002.0],
        ),
        (
            "bitpix 16, BSCALE 2, BZERO -1".into(),
            fits_bytes(16, 3, 2, &[("BSCALE", "2.0"), ("BZERO", "-1.0")], &be(&[-3, 0, 5, 100, -100, 7], 2)),
            vec![-7.0, -1.0, 9.0, 199.0, -201.0, 13.0],
        ),
        (
            "bitpix 32".into(),
            fits_bytes(32, 3, 2, &[], &be(&[i32::MIN as i64, -5, 0, 5, i32::MAX as i64, 100000], 4)),
            vec![-2147483648.0, -5.0, 0.0, 5.0, 2147483647.0, 100000.0],
        ),
        (
            "bitpix 32, BSCALE 0.5, BZERO 10, multi-block header".into(),
            fits_bytes(
                32,
                3,
                2,
                &[&[("BSCALE", "0.5"), ("BZERO", "10")][..], &comments].concat(),
                &be(&[i32::MIN as i64, -5, 0, 5, i32::MAX as i64, 3], 4),
            ),
            vec![-1073741814.0, 7.5, 10.0, 12.5, 1073741833.5, 11.5],
        ),
        (
            "bitpix -32".into(),
            fits_bytes(-32, 3, 2, &[], &f32s.iter().flat_map(|v| v.to_be_bytes()).collect::<Vec<_>>()),
            f32s.iter().map(|&v| v as f64).collect(),
        ),
        (
            "bitpix -64".into(),
            fits_bytes(-64, 3, 2, &[], &f64s.iter().flat_map(|v| v.to_be_bytes()).collect::<Vec<_>>()),
            f64s.to_vec(),
        ),
    ]
}

fn shard_round_trip(dir: &Path) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shape = ShardShape::new(3, 12, 10).unwrap();
    let images: Vec<(String, Vec<u8>)> =
        (0..37).map(|i| (format!("s{i:03}"), (0..shape.pixels()).map(|_| rng.gen()).collect())).collect();
    let build = |d: &Path| {
        write_cache(d, shape, 8, images.iter().map(|(id, px)| (id.as_str(), px.as_slice()))).unwrap();
    };
    let (a, b) = (dir.join("a"), dir.join("b"));
    build(&a);
    build(&b);
    let cache = ShardCache::open_strict(&a).map_err(|e| e.to_string())?;
    for (id, px) in &images {
        if &cache.read_bytes(id).map_err(|e| e.to_string())? != px {
            return Err(format!("{id} differs on read-back"));
        }
    }
    let mut streamed = Vec::new();
    for s in 0..cache.shard_count() as u32 {
        for item in cache.stream_shard(s).map_err(|e| e.to_string())? {
            streamed.push(item.map_err(|e| e.to_string())?);
        }
    }
    if streamed.len() != images.len() || streamed.iter().zip(&images).any(|((id, px), (eid, epx))| id != eid || px != epx) {
        return Err("streamed records differ".into());
    }
    let mut files: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    for f in &files {
        if std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap() {
            return Err(format!("{f:?} differs between identical builds"));
        }
    }
    Ok(format!("shard cache: {} images in {} shards read back and rebuilt byte-exact", images.len(), files.len() - 1))
}

fn checkpoint_round_trip() -> Result<String, String> {
    let mut state = ModelState::new(tiny_spec(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for set in [&mut state.ema, &mut state.stats, &mut state.velocity] {
        set.values_mut().flat_map(|t| t.data.iter_mut()).for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    state.step_count = 1234;
    let meta = serde_json::json!({"tau": 0.95});
    let bytes = write_checkpoint(&state, &meta).map_err(|e| e.to_string())?;
    let back = read_checkpoint(&bytes).map_err(|e| e.to_string())?;
    if back.state != state || back.train_config != meta {
        return Err("checkpoint state differs after read".into());
    }
    let again = write_checkpoint(&back.state, &back.train_config).map_err(|e| e.to_string())?;
    if again != bytes {
        return Err("checkpoint bytes differ after write-read-write".into());
    }
    Ok(format!("checkpoint: {} bytes write-read-write identical", bytes.len()))
}

fn labels_round_trip(dir: &Path) -> Result<String, String> {
    let mut labels = LabelStore::new();
    let t0 = chrono::DateTime::parse_from_rfc3339("2026-01-02T03:04:05.123456Z").unwrap().with_timezone(&chrono::Utc);
    labels.append_at("a,1", Label::Anomaly, Provenance::Seed, t0);
    labels.append_at("b", Label::Normal, Provenance::Seed, t0);
    labels.append_at("a,1", Label::Normal, Provenance::Cycle(2), t0 + chrono::Duration::seconds(5));
    let (p, q) = (dir.join("l1.csv"), dir.join("l2.csv"));
    labels.save_csv(&p).map_err(|e| e.to_string())?;
    let back = LabelStore::load_csv(&p).map_err(|e| e.to_string())?;
    if back != labels {
        return Err("labels differ after load".into());
    }
    back.save_csv(&q).map_err(|e| e.to_string())?;
    if std::fs::read(&p).unwrap() != std::fs::read(&q).unwrap() {
        return Err("labels CSV bytes differ after round trip".into());
    }
    Ok("labels CSV: entries and bytes identical after round trip".into())
}

pub fn formats() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();
    let mut pass = true;
    for r in [shard_round_trip(dir.path()), checkpoint_round_trip(), labels_round_trip(dir.path())] {
        match r {
            Ok(s) => notes.push(s),
            Err(e) => {
                pass = false;
                notes.push(format!("FAILED {e}"));
            }
        }
    }
    let fixtures = fits_fixtures();
    let mut bad = Vec::new();
    for (name, bytes, expect) in &fixtures {
        match parse_fits(bytes) {
            Ok((h, m)) => {
                let exact = m.rows == 2 && m.cols == 3 && m.data.len() == expect.len()
                    && m.data.iter().zip(expect).all(|(a, b)| a.to_bits() == b.to_bits());
                if !exact || h.naxis1 != 3 {
                    bad.push(format!("{name}: got {:?}", m.data));
                }
            }
            Err(e) => bad.push(format!("{name}: {e}")),
        }
    }
    pass &= bad.is_empty();
    notes.push(format!("FITS: {}/{} fixtures decode exactly{}", fixtures.len() - bad.len(), fixtures.len(), if bad.is_empty() { String::new() } else { format!(" ({})", bad.join("; ")) }));
    Outcome::new(pass, notes.join("; "))
}

/// Tiny model used for the 10^5-image scoring runs.
pub fn scorer_state() -> ModelState {
    let spec = BackboneSpec { channels: 1, height: 8, width: 8, widths: vec![4] };
    let mut state = ModelState::new(spec, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for v in state.ema.values_mut().flat_map(|t| t.data.iter_mut()) {
        *v += rng.gen_range(-0.5..0.5);
    }
    state
}

pub fn scorer_images(n: usize) -> Vec<(String, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    (0..n).map(|i| (format!("img{i:06}"), (0..64).map(|_| rng.gen()).collect())).collect()
}

/// Global top-K against a full sort, invariance under 1/2/4 shards (one
/// worker per shard) and byte-exact reruns, on 10^5 images.
pub fn batch_scorer() -> Outcome {
    let start = Instant::now();
    let n = 100_000;
    let k = 1000;
    let dir = tempfile::tempdir().unwrap();
    let state = scorer_state();
    let images = scorer_images(n);
    let shape = ShardShape::new(1, 8, 8).unwrap();
    let mut outputs = Vec::new();
    for parts in [1usize, 2, 4] {
        let d = dir.path().join(format!("p{parts}"));
        write_cache(&d, shape, n / parts, images.iter().map(|(id, px)| (id.as_str(), px.as_slice()))).unwrap();
        let cache = ShardCache::open_strict(&d).unwrap();
        let opts = ScoreOptions { top_k: k, workers: parts, ..ScoreOptions::default() };
        let mut csv = Vec::new();
        let summary = score_stream(&state, &cache, &opts, &mut csv, &mut |_| {}).unwrap();
        outputs.push((parts, csv, summary));
    }
    let rerun = {
        let cache = ShardCache::open_strict(&dir.path().join("p4")).unwrap();
        let opts = ScoreOptions { top_k: k, workers: 4, ..ScoreOptions::default() };
        let mut csv = Vec::new();
        let summary = score_stream(&state, &cache, &opts, &mut csv, &mut |_| {}).unwrap();
        (csv, summary)
    };

    // Oracle: score every id directly and fully sort.
    let cache = ShardCache::open_strict(&dir.path().join("p1")).unwrap();
    let ids: Vec<String> = images.iter().map(|(id, _)| id.clone()).collect();
    let scores = score_ids(&state, &cache, &ids, ScoreOptions::default().batch).unwrap();
    let mut all: Vec<(String, f64)> = ids.into_iter().zip(scores.iter().map(|&s| s as f64)).collect();
    all.sort_by(|a, b| rank_order((&a.0, a.1), (&b.0, b.1)));
    let oracle: Vec<(String, f64)> = all.into_iter().take(k).collect();

    let top = |s: &rarematch::scorer::ScoreSummary| -> Vec<(String, f64)> {
        s.top.rows().iter().map(|r| (r.id.clone(), r.score)).collect()
    };
    let matches_oracle = outputs.iter().all(|(_, _, s)| top(s) == oracle && s.scored == n);
    let partition_invariant = outputs.windows(2).all(|w| w[0].1 == w[1].1 && top(&w[0].2) == top(&w[1].2));
    let rerun_exact = rerun.0 == outputs[2].1 && top(&rerun.1) == top(&outputs[2].2);
    let elapsed = start.elapsed();
    Outcome::new(
        matches_oracle && partition_invariant && rerun_exact,
        format!(
            "{n} images, top-{k}: equals full sort {matches_oracle}; 1/2/4 shards identical {partition_invariant}; rerun byte-exact {rerun_exact}; {:.1}s",
            secs(elapsed)
        ),
    )
}

/// Session settings for protocol runs on generated images of side `size`.
pub fn protocol_session(size: usize, iterations: usize, seed: u64) -> SessionConfig {
    let mut cfg = SessionConfig::default();
    cfg.backbone = BackboneSpec::with_input(3, size, size);
    cfg.train.iterations = iterations;
    cfg.train.seed = seed;
    cfg
}

/// One miniimagenet-like run: 5 + 495 seed labels, 2,000-image pool at 1%,
/// three cycles, 10 + 10 oracle labels per cycle.
pub fn synthetic_protocol(seed: u64, size: usize, iterations: usize, on_cycle: impl FnMut(&rarematch::session::CycleReport)) -> (ProtocolReport, Duration) {
    let start = Instant::now();
    let set = generate(&SynthConfig { size, ..SynthConfig::miniimagenet_like(seed) }).unwrap();
    let report = run_simulated_protocol(
        set.catalog,
        set.seed_labels,
        Arc::new(set.source),
        protocol_session(size, iterations, seed),
        3,
        on_cycle,
    )
    .unwrap();
    (report, start.elapsed())
}

/// GalaxyMNIST-style stand-in: PNG files on disk with a JSON-lines catalog
/// (10% held out as the test split), returned as the catalog path.
pub fn write_png_catalog(dir: &Path, n: usize, prevalence: f64, seed: u64) -> std::path::PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = String::new();
    std::fs::create_dir_all(dir.join("images")).unwrap();
    let anomalies = (n as f64 * prevalence).round() as usize;
    for i in 0..n {
        let label = if i * anomalies / n != (i + 1) * anomalies / n { Label::Anomaly } else { Label::Normal };
        let img = synth_image(label, 3, 64, &mut rng);
        let rel = format!("images/g{i:05}.png");
        std::fs::write(dir.join(&rel), rarematch::loader::encode_png(&img).unwrap()).unwrap();
        let split = if i % 10 == 9 { "test" } else { "unlabelled" };
        lines.push_str(&format!(
            "{{\"id\":\"g{i:05}\",\"path\":\"{rel}\",\"gt_label\":{},\"split\":\"{split}\",\"channels\":3}}\n",
            u8::from(label)
        ));
    }
    let path = dir.join("catalog.jsonl");
    std::fs::write(&path, lines).unwrap();
    path
}

/// Runs the galaxymnist-like protocol (10 + 30 seed labels, three cycles of
/// 10 + 10 labels) on a catalog with ground truth, through ingest and the
/// benchmark harness.
pub fn real_data_protocol(catalog_path: &Path, cache_dir: &Path, size: usize, iterations: usize) -> Result<SeedResult, String> {
    let catalog = DatasetCatalog::load_jsonl(catalog_path).map_err(|e| e.to_string())?;
    let channels = catalog.records().first().map_or(3, |r| r.channels as usize);
    rarematch::shard::build_shard_cache(&catalog, &StretchSpec::LinearMinmax, 1024, ShardShape::new(channels, size, size).unwrap(), cache_dir)
        .map_err(|e| e.to_string())?;
    let cache = ShardCache::open_strict(cache_dir).map_err(|e| e.to_string())?;
    let shape = cache.shape().as_tuple();
    let mut config = BenchConfig { protocol: Protocol::GalaxymnistLike, seeds: seeds_for(1), size, ..BenchConfig::default() };
    config.session.train.iterations = iterations;
    let data = BenchData::Catalog { catalog, source: Arc::new(cache), shape };
    let report = run_bench(&config, &data, |_, _| {}).map_err(|e| e.to_string())?;
    Ok(report.results.into_iter().next().expect("one seed"))
}

/// Fraction of records per split and class, for sanity output.
pub fn class_counts(catalog: &DatasetCatalog) -> BTreeMap<(String, u8), usize> {
    let mut out = BTreeMap::new();
    for r in catalog.records() {
        let split = match catalog.split_of(&r.id) {
            Some(Split::Labelled) => "labelled",
            Some(Split::Unlabelled) => "unlabelled",
            Some(Split::Test) => "test",
            None => "none",
        };
        *out.entry((split.to_string(), r.gt_label.map_or(9, u8::from))).or_default() += 1;
    }
    out
}
