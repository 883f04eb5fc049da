//! Active-learning session: train, rank the unlabelled pool, take labels,
//! repeat. Also the simulated benchmark protocol, where ground truth stands
//! in for the human reviewer.
//!
//! Session directory layout:
//!
//! ```text
//! config.json           settings, cycle counter, image cache location
//! catalog.jsonl         ids, ground truth (if known) and current splits
//! labels.csv            append-only label log
//! checkpoint.amck       model state
//! scores.csv            latest ranking of the unlabelled pool
//! metrics_cycle_{k}.json
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{load_checkpoint, save_checkpoint, BackboneSpec, ModelState};
use crate::catalog::{DatasetCatalog, Label, Split};
use crate::error::{Error, Result};
use crate::labels::{LabelStore, Provenance};
use crate::loader::ImageSource;
use crate::metrics::{MetricsReport, ScoreTable};
use crate::scorer::rank_ids;
use crate::shard::ShardCache;
use crate::trainer::{train_cycle, Progress, TrainConfig, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub train: TrainConfig,
    pub backbone: BackboneSpec,
    /// Anomalies and false positives labelled per cycle in oracle mode.
    pub candidates_per_class: usize,
    pub score_batch: usize,
    /// Shard cache holding the images, relative to the session directory
    /// unless absolute.
    pub cache: Option<PathBuf>,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            backbone: BackboneSpec::default(),
            candidates_per_class: 10,
            score_batch: 64,
            cache: None,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.backbone.validate()?;
        if self.score_batch == 0 {
            return Err(Error::Config("score_batch must be positive".into()));
        }
        Ok(())
    }
}

/// Contents of `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SessionFile {
    config: SessionConfig,
    cycle: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// Ground truth partitions the ranking (benchmark runs).
    Oracle,
    /// The top of the ranking goes to a reviewer unpartitioned.
    Interactive,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub anomalies: Vec<String>,
    pub false_positives: Vec<String>,
    /// Interactive mode: top-ranked ids awaiting review.
    pub review: Vec<String>,
    /// Fewer candidates than requested were available.
    pub shortfall: bool,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.anomalies.is_empty() && self.false_positives.is_empty() && self.review.is_empty()
    }
}

/// Picks labelling candidates from a ranked table.
///
/// Oracle mode takes the first `k` rows with an anomalous ground truth and the
/// first `k` with a normal one; rows without ground truth are skipped.
/// Interactive mode takes the first `2k` rows.
pub fn select_candidates(table: &ScoreTable, k: usize, mode: SelectionMode) -> CandidateSet {
    let mut out = CandidateSet::default();
    match mode {
        SelectionMode::Oracle => {
            for r in table.rows() {
                match r.gt {
                    Some(Label::Anomaly) if out.anomalies.len() < k => out.anomalies.push(r.id.clone()),
                    Some(Label::Normal) if out.false_positives.len() < k => out.false_positives.push(r.id.clone()),
                    _ => {}
                }
                if out.anomalies.len() == k && out.false_positives.len() == k {
                    break;
                }
            }
            out.shortfall = out.anomalies.len() < k || out.false_positives.len() < k;
        }
        SelectionMode::Interactive => {
            out.review = table.rows().iter().take(2 * k).map(|r| r.id.clone()).collect();
            out.shortfall = out.review.len() < 2 * k;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub cycle: u32,
    /// Active labels when the cycle's training ran.
    pub labelled: usize,
    pub iterations: usize,
    pub mean_mask_rate: f64,
    pub final_l_sup: f64,
    /// `None` when the evaluation set lacks one of the classes.
    pub metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitReport {
    pub applied: usize,
    pub superseded: usize,
}

/// One labelling session over a catalog and an image source.
#[derive(Clone)]
pub struct ActiveSession {
    pub config: SessionConfig,
    pub catalog: DatasetCatalog,
    pub labels: LabelStore,
    pub state: ModelState,
    /// Completed training cycles.
    pub cycle: u32,
    /// Latest ranking of the unlabelled pool.
    pub scores: Option<ScoreTable>,
    pub history: Vec<CycleReport>,
    source: Arc<dyn ImageSource>,
}

impl std::fmt::Debug for ActiveSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ActiveSession")
            .field("cycle", &self.cycle)
            .field("labels", &self.labels.len())
            .field("images", &self.catalog.len())
            .finish_non_exhaustive()
    }
}

impl ActiveSession {
    /// Starts a session. Every active label must belong to the labelled split
    /// and vice versa.
    pub fn new(
        config: SessionConfig,
        catalog: DatasetCatalog,
        labels: LabelStore,
        source: Arc<dyn ImageSource>,
    ) -> Result<Self> {
        config.validate()?;
        labels.check_against(&catalog)?;
        let active = labels.active();
        if let Some(id) = catalog.labelled().iter().find(|id| !active.contains_key(id.as_str())) {
            return Err(Error::Split(format!("'{id}' is in the labelled split but has no label")));
        }
        if let Some(id) = active.keys().find(|id| !catalog.labelled().contains(**id)) {
            return Err(Error::Split(format!("'{id}' has a label but is not in the labelled split")));
        }
        let state = ModelState::new(config.backbone.clone(), config.train.seed)?;
        Ok(Self {
            config,
            catalog,
            labels,
            state,
            cycle: 0,
            scores: None,
            history: Vec::new(),
            source,
        })
    }

    pub fn source(&self) -> &Arc<dyn ImageSource> {
        &self.source
    }

    /// Runs one training cycle, re-ranks the pool and records metrics.
    pub fn run_cycle(&mut self, progress: Option<Progress<'_>>) -> Result<(TrainLog, CycleReport)> {
        let mut state = self.state.clone();
        let log = train_cycle(
            &mut state,
            &self.catalog,
            &self.labels,
            self.source.as_ref(),
            &self.config.train,
            self.cycle,
            progress,
        )?;
        self.state = state;
        self.cycle += 1;
        self.scores = Some(self.rank_pool()?);
        let n = log.steps.len().max(1) as f64;
        let report = CycleReport {
            cycle: self.cycle,
            labelled: self.catalog.labelled().len(),
            iterations: log.steps.len(),
            mean_mask_rate: log.steps.iter().map(|s| s.mask_rate).sum::<f64>() / n,
            final_l_sup: log.steps.last().map(|s| s.l_sup).unwrap_or(0.0),
            metrics: self.evaluate()?,
        };
        self.history.push(report.clone());
        Ok((log, report))
    }

    /// Scores every unlabelled image with the EMA weights, ranked with ties
    /// broken by id. Ground truth is attached where the catalog has it.
    pub fn rank_pool(&self) -> Result<ScoreTable> {
        if self.cycle == 0 {
            log::warn!("ranking with an untrained model");
        }
        let ids: Vec<String> = self.catalog.unlabelled().iter().cloned().collect();
        Ok(rank_ids(&self.state, self.source.as_ref(), &ids, self.config.score_batch)?.with_ground_truth(&self.catalog))
    }

    /// Ids the metrics are computed on: the test split when there is one,
    /// otherwise the remaining unlabelled pool.
    pub fn evaluation_ids(&self) -> Vec<String> {
        let set = if self.catalog.test().is_empty() { self.catalog.unlabelled() } else { self.catalog.test() };
        set.iter().cloned().collect()
    }

    pub fn evaluate(&self) -> Result<Option<MetricsReport>> {
        let ids = self.evaluation_ids();
        let table = rank_ids(&self.state, self.source.as_ref(), &ids, self.config.score_batch)?
            .with_ground_truth(&self.catalog);
        match MetricsReport::from_table(&table) {
            Ok(r) => Ok(Some(r)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Appends labels with the current cycle as provenance and moves newly
    /// labelled ids out of the pool. Relabelling an id supersedes its earlier
    /// label. Nothing changes if any id is unknown or in the test split.
    pub fn commit_labels(&mut self, new: &[(String, Label)]) -> Result<CommitReport> {
        for (id, _) in new {
            match self.catalog.split_of(id) {
                None => return Err(Error::UnknownId(id.clone())),
                Some(Split::Test) => return Err(Error::Split(format!("'{id}' is in the test split"))),
                _ => {}
            }
        }
        let moving: Vec<&str> = {
            let mut v: Vec<&str> = new
                .iter()
                .map(|(id, _)| id.as_str())
                .filter(|id| self.catalog.unlabelled().contains(*id))
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        self.catalog.move_to_labelled(moving)?;
        let mut report = CommitReport { applied: 0, superseded: 0 };
        for (id, label) in new {
            if self.labels.append(id.clone(), *label, Provenance::Cycle(self.cycle)) {
                log::warn!("label for '{id}' supersedes an earlier label");
                report.superseded += 1;
            }
            report.applied += 1;
        }
        if let Some(scores) = &self.scores {
            let unlabelled = self.catalog.unlabelled();
            let rows = scores.rows().iter().filter(|r| unlabelled.contains(&r.id)).cloned().collect();
            self.scores = Some(ScoreTable::new(rows)?);
        }
        Ok(report)
    }

    /// Oracle labels for a candidate set, read from the catalog ground truth.
    pub fn oracle_labels(&self, candidates: &CandidateSet) -> Result<Vec<(String, Label)>> {
        candidates
            .anomalies
            .iter()
            .chain(&candidates.false_positives)
            .chain(&candidates.review)
            .map(|id| {
                self.catalog
                    .gt_label(id)
                    .map(|l| (id.clone(), l))
                    .ok_or_else(|| Error::Config(format!("no ground truth for '{id}'")))
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let dir = std::path::absolute(dir)?;
        std::fs::create_dir_all(&dir)?;
        let file = SessionFile {
            config: self.config.clone(),
            cycle: self.cycle,
        };
        std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&file)? + "\n")?;
        self.catalog.save_jsonl(&dir.join("catalog.jsonl"))?;
        self.labels.save_csv(&dir.join("labels.csv"))?;
        save_checkpoint(&dir.join("checkpoint.amck"), &self.state, &serde_json::to_value(&self.config.train)?)?;
        let scores = dir.join("scores.csv");
        match &self.scores {
            Some(t) => t.write_csv(&scores)?,
            None => {
                let _ = std::fs::remove_file(&scores);
            }
        }
        for r in &self.history {
            std::fs::write(
                dir.join(format!("metrics_cycle_{}.json", r.cycle)),
                serde_json::to_string_pretty(r)? + "\n",
            )?;
        }
        Ok(())
    }

    /// Loads a session whose images live in the shard cache named by its
    /// configuration.
    pub fn load(dir: &Path) -> Result<Self> {
        let dir = std::path::absolute(dir)?;
        let file = read_session_file(&dir)?;
        let cache = file
            .config
            .cache
            .as_ref()
            .ok_or_else(|| Error::Config("session has no image cache configured".into()))?;
        let source: Arc<dyn ImageSource> = Arc::new(ShardCache::open_strict(&dir.join(cache))?);
        Self::load_with_source(&dir, source)
    }

    pub fn load_with_source(dir: &Path, source: Arc<dyn ImageSource>) -> Result<Self> {
        let dir = std::path::absolute(dir)?;
        let file = read_session_file(&dir)?;
        let catalog = DatasetCatalog::load_jsonl(&dir.join("catalog.jsonl"))?;
        let labels = LabelStore::load_csv(&dir.join("labels.csv"))?;
        let mut session = Self::new(file.config, catalog, labels, source)?;
        session.state = load_checkpoint(&dir.join("checkpoint.amck"))?.state;
        if session.state.spec != session.config.backbone {
            return Err(Error::Contract("checkpoint backbone differs from session configuration".into()));
        }
        session.cycle = file.cycle;
        let scores = dir.join("scores.csv");
        if scores.exists() {
            session.scores = Some(ScoreTable::read_csv(&scores)?.with_ground_truth(&session.catalog));
        }
        for k in 1..=file.cycle {
            let p = dir.join(format!("metrics_cycle_{k}.json"));
            if p.exists() {
                session.history.push(serde_json::from_slice(&std::fs::read(&p)?)?);
            }
        }
        Ok(session)
    }
}

fn read_session_file(dir: &Path) -> Result<SessionFile> {
    let p = dir.join("config.json");
    let bytes = std::fs::read(&p).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(p.clone()),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub cycles: Vec<CycleReport>,
    /// Active label count after each commit, starting with the seed labels.
    pub label_counts: Vec<usize>,
    pub shortfalls: Vec<u32>,
}

impl ProtocolReport {
    pub fn final_metrics(&self) -> Option<&MetricsReport> {
        self.cycles.last().and_then(|c| c.metrics.as_ref())
    }
}

/// Simulated labelling protocol: for each cycle train, rank, evaluate, then
/// label the top `k` anomalies and top `k` false positives from ground truth.
/// With `cycles == 0` only the untrained model is evaluated.
pub fn run_simulated_protocol(
    catalog: DatasetCatalog,
    seed_labels: LabelStore,
    source: Arc<dyn ImageSource>,
    config: SessionConfig,
    cycles: u32,
    mut on_cycle: impl FnMut(&CycleReport),
) -> Result<ProtocolReport> {
    if let Some(r) = catalog.records().iter().find(|r| r.gt_label.is_none()) {
        return Err(Error::Config(format!(
            "benchmark mode needs ground truth for every image; '{}' has none",
            r.id
        )));
    }
    let k = config.candidates_per_class;
    let mut session = ActiveSession::new(config, catalog, seed_labels, source)?;
    let mut report = ProtocolReport {
        cycles: Vec::new(),
        label_counts: vec![session.labels.active().len()],
        shortfalls: Vec::new(),
    };
    if cycles == 0 {
        let r = CycleReport {
            cycle: 0,
            labelled: session.catalog.labelled().len(),
            iterations: 0,
            mean_mask_rate: 0.0,
            final_l_sup: 0.0,
            metrics: session.evaluate()?,
        };
        on_cycle(&r);
        report.cycles.push(r);
        return Ok(report);
    }
    for _ in 0..cycles {
        let (_, cycle_report) = session.run_cycle(None)?;
        on_cycle(&cycle_report);
        report.cycles.push(cycle_report);
        let table = session.scores.clone().unwrap_or_default();
        let candidates = select_candidates(&table, k, SelectionMode::Oracle);
        if candidates.shortfall {
            report.shortfalls.push(session.cycle);
        }
        let new = session.oracle_labels(&candidates)?;
        session.commit_labels(&new)?;
        report.label_counts.push(session.labels.active().len());
    }
    Ok(report)
}
