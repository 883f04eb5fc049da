use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use rarematch::backbone::{save_checkpoint, BackboneSpec, ModelState};
use rarematch::scorer::{score_stream, ScoreOptions};
use rarematch::session::{ActiveSession, SessionConfig};
use rarematch::shard::{write_cache, ShardCache, ShardShape};
use rarematch::synth::{generate, SynthConfig};
use rarematch::tensor::ImageTensor;
use rarematch_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn c_path(p: &Path) -> CString {
    c(p.to_str().unwrap())
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(rm_last_error()) }.to_string_lossy().into_owned()
}

fn small_state() -> ModelState {
    let mut spec = BackboneSpec::with_input(3, 16, 16);
    spec.widths = vec![4, 4, 8];
    ModelState::new(spec, 5).unwrap()
}

#[test]
fn version_matches_package() {
    let v = unsafe { CStr::from_ptr(rm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    unsafe {
        let mut model: *mut RmModel = ptr::null_mut();
        assert_eq!(rm_model_load(ptr::null(), &mut model), RmStatus::NullArgument);
        assert!(last_error().contains("path"));
        assert!(model.is_null());
        let mut len = 0usize;
        assert_eq!(rm_cache_len(ptr::null(), &mut len), RmStatus::NullArgument);
        let mut out = 0.0;
        assert_eq!(rm_auroc(ptr::null(), ptr::null(), 3, &mut out), RmStatus::NullArgument);
        rm_model_free(ptr::null_mut());
        rm_cache_free(ptr::null_mut());
        rm_session_free(ptr::null_mut());
    }
}

#[test]
fn metrics_match_hand_values() {
    let scores = [0.9, 0.8, 0.7, 0.1];
    let labels = [1u8, 0, 1, 0];
    unsafe {
        let mut v = 0.0;
        assert_eq!(rm_auroc(scores.as_ptr(), labels.as_ptr(), 4, &mut v), RmStatus::Ok);
        assert_eq!(v, 0.75);
        assert_eq!(rm_auprc(scores.as_ptr(), labels.as_ptr(), 4, &mut v), RmStatus::Ok);
        assert!((v - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(rm_efficiency_at(scores.as_ptr(), labels.as_ptr(), 4, 50.0, &mut v), RmStatus::Ok);
        assert_eq!(v, 50.0);
        assert_eq!(
            rm_efficiency_at(scores.as_ptr(), labels.as_ptr(), 4, 0.0, &mut v),
            RmStatus::Usage
        );
        let one_class = [1u8; 4];
        assert_eq!(rm_auroc(scores.as_ptr(), one_class.as_ptr(), 4, &mut v), RmStatus::UndefinedMetric);
        let bad = [2u8, 0, 1, 0];
        assert_eq!(rm_auroc(scores.as_ptr(), bad.as_ptr(), 4, &mut v), RmStatus::Format);
        assert!(last_error().contains("label"));
    }
}

#[test]
fn model_scores_match_core() {
    let dir = tempfile::tempdir().unwrap();
    let state = small_state();
    let path = dir.path().join("m.amck");
    save_checkpoint(&path, &state, &serde_json::Value::Null).unwrap();
    let images: Vec<ImageTensor> = (0..3)
        .map(|i| {
            let data = (0..3 * 16 * 16).map(|j| ((i * 31 + j * 7) % 256) as f32 / 255.0).collect();
            ImageTensor::from_vec(3, 16, 16, data).unwrap()
        })
        .collect();
    let expected = state.score(&images).unwrap();
    let pixels: Vec<f32> = images.iter().flat_map(|t| t.data().to_vec()).collect();
    unsafe {
        let mut model: *mut RmModel = ptr::null_mut();
        assert_eq!(rm_model_load(c_path(&path).as_ptr(), &mut model), RmStatus::Ok);
        let (mut ch, mut h, mut w) = (0, 0, 0);
        assert_eq!(rm_model_input_shape(model, &mut ch, &mut h, &mut w), RmStatus::Ok);
        assert_eq!((ch, h, w), (3, 16, 16));
        let mut scores = [0f32; 3];
        assert_eq!(rm_model_score(model, pixels.as_ptr(), 3, scores.as_mut_ptr()), RmStatus::Ok);
        assert_eq!(scores.to_vec(), expected);
        rm_model_free(model);

        let missing = dir.path().join("missing.amck");
        assert_eq!(rm_model_load(c_path(&missing).as_ptr(), &mut model), RmStatus::Io);
        let junk = dir.path().join("junk.amck");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        assert_eq!(rm_model_load(c_path(&junk).as_ptr(), &mut model), RmStatus::Format);
    }
}

#[test]
fn cache_scoring_matches_core_stream() {
    let dir = tempfile::tempdir().unwrap();
    let state = small_state();
    let model_path = dir.path().join("m.amck");
    save_checkpoint(&model_path, &state, &serde_json::Value::Null).unwrap();
    let cache_dir = dir.path().join("cache");
    let ids: Vec<String> = (0..50).map(|i| format!("img{i:03}")).collect();
    let pixels: Vec<Vec<u8>> = (0..50).map(|i| (0..768).map(|j| ((i * 13 + j) % 256) as u8).collect()).collect();
    write_cache(
        &cache_dir,
        ShardShape::new(3, 16, 16).unwrap(),
        16,
        ids.iter().map(String::as_str).zip(pixels.iter().map(Vec::as_slice)),
    )
    .unwrap();
    let mut expected = Vec::new();
    let core_cache = ShardCache::open_strict(&cache_dir).unwrap();
    let opts = ScoreOptions { top_k: 5, ..ScoreOptions::default() };
    let summary = score_stream(&state, &core_cache, &opts, &mut expected, &mut |_| {}).unwrap();

    let scores_csv = dir.path().join("scores.csv");
    let topk_csv = dir.path().join("topk.csv");
    unsafe {
        let mut model: *mut RmModel = ptr::null_mut();
        let mut cache: *mut RmCache = ptr::null_mut();
        assert_eq!(rm_model_load(c_path(&model_path).as_ptr(), &mut model), RmStatus::Ok);
        assert_eq!(rm_cache_open(c_path(&cache_dir).as_ptr(), &mut cache), RmStatus::Ok);
        let mut len = 0;
        assert_eq!(rm_cache_len(cache, &mut len), RmStatus::Ok);
        assert_eq!(len, 50);
        let mut scored = 0;
        let status = rm_score_cache(
            model,
            cache,
            5,
            2,
            c_path(&scores_csv).as_ptr(),
            c_path(&topk_csv).as_ptr(),
            &mut scored,
        );
        assert_eq!(status, RmStatus::Ok, "{}", last_error());
        assert_eq!(scored, 50);
        rm_cache_free(cache);
        rm_model_free(model);
    }
    assert_eq!(std::fs::read(&scores_csv).unwrap(), expected);
    let top = std::fs::read_to_string(&topk_csv).unwrap();
    assert_eq!(top.lines().count(), 6);
    assert!(top.lines().nth(1).unwrap().starts_with(&summary.top.rows()[0].id));
}

#[test]
fn session_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let set = generate(&SynthConfig {
        size: 16,
        seed_anomalies: 2,
        seed_normals: 6,
        unlabelled: 40,
        unlabelled_prevalence: 0.1,
        test: 20,
        test_prevalence: 0.2,
        ..SynthConfig::miniimagenet_like(1)
    })
    .unwrap();
    let cache_dir = dir.path().join("s/cache");
    let images: Vec<(&str, &[u8])> =
        set.catalog.records().iter().map(|r| (r.id.as_str(), set.source.bytes(&r.id).unwrap())).collect();
    write_cache(&cache_dir, ShardShape::new(3, 16, 16).unwrap(), 32, images).unwrap();
    let mut config = SessionConfig::default();
    config.backbone = BackboneSpec::with_input(3, 16, 16);
    config.backbone.widths = vec![4, 4, 8];
    config.train.iterations = 2;
    config.train.batch_size = 4;
    config.train.mu = 2;
    config.cache = Some("cache".into());
    let source = std::sync::Arc::new(ShardCache::open_strict(&cache_dir).unwrap());
    let session = ActiveSession::new(config, set.catalog.clone(), set.seed_labels, source).unwrap();
    session.save(&dir.path().join("s")).unwrap();
    let pool_id = set.catalog.unlabelled().iter().next().unwrap().clone();

    unsafe {
        let mut s: *mut RmSession = ptr::null_mut();
        assert_eq!(rm_session_load(c_path(&dir.path().join("s")).as_ptr(), &mut s), RmStatus::Ok, "{}", last_error());
        let mut cycle = 99;
        assert_eq!(rm_session_cycle(s, &mut cycle), RmStatus::Ok);
        assert_eq!(cycle, 0);
        assert_eq!(rm_session_add_label(s, c("nope").as_ptr(), 1), RmStatus::UnknownId);
        assert_eq!(rm_session_add_label(s, c(&pool_id).as_ptr(), 1), RmStatus::Ok);
        let mut auroc = 0.0;
        assert_eq!(rm_session_run_cycle(s, &mut auroc), RmStatus::Ok, "{}", last_error());
        assert!((0.0..=1.0).contains(&auroc));
        assert_eq!(rm_session_cycle(s, &mut cycle), RmStatus::Ok);
        assert_eq!(cycle, 1);
        let out = dir.path().join("s2");
        assert_eq!(rm_session_save(s, c_path(&out).as_ptr()), RmStatus::Ok, "{}", last_error());
        rm_session_free(s);
        assert!(out.join("checkpoint.amck").exists());
    }
}

#[test]
fn header_declares_every_export_and_compiles() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/rarematch.h")).unwrap();
    let source = std::fs::read_to_string(root.join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15, "{exports:?}");
    for name in &exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let main = dir.path().join("use.c");
    std::fs::write(
        &main,
        "#include \"rarematch.h\"\nint main(void) {\n  RmModel *m = 0;\n  RmStatus s = rm_model_load(\"x\", &m);\n  return s == RM_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(root.join("include"))
        .arg(&main)
        .output()
        .expect("a C compiler is needed to check the header");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
