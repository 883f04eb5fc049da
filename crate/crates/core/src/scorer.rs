//! Bounded-memory scoring of shard caches with a global top-K.
//!
//! Workers take whole shards, score them in fixed-size batches with the EMA
//! weights, and hand back the shard's `id,score` lines plus a local top-K.
//! The coordinator writes lines in shard order and merges the local tops, so
//! the output does not depend on the worker count.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::mpsc;

use serde::Serialize;

use crate::backbone::{Batch, ModelState};
use crate::error::{Error, Result};
use crate::loader::ImageSource;
use crate::metrics::{csv_field, rank_order, ScoreRow, ScoreTable};
use crate::shard::ShardCache;
use crate::tensor::ImageTensor;

/// Heap entry ordered so that the max element is the one ranked last.
#[derive(Debug, Clone, PartialEq)]
struct Ranked(ScoreRow);

impl Eq for Ranked {}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order((&self.0.id, self.0.score), (&other.0.id, other.0.score))
    }
}

/// Keeps the `k` best rows seen so far (score descending, id ascending).
#[derive(Debug, Clone)]
pub struct TopK {
    k: usize,
    heap: BinaryHeap<Ranked>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    pub fn push(&mut self, row: ScoreRow) {
        if self.k == 0 {
            return;
        }
        if self.heap.len() == self.k {
            let worst = self.heap.peek().expect("k > 0");
            if Ranked(row.clone()) >= *worst {
                return;
            }
        }
        self.heap.push(Ranked(row));
        if self.heap.len() > self.k {
            self.heap.pop();
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn into_table(self) -> Result<ScoreTable> {
        ScoreTable::new(self.heap.into_iter().map(|r| r.0).collect())
    }
}

/// Merges per-partition top-K tables into the global top `k`.
///
/// Fails with an integrity error when the same id appears in two partials.
pub fn merge_partials(partials: &[ScoreTable], k: usize) -> Result<ScoreTable> {
    let mut seen = HashSet::new();
    let mut top = TopK::new(k);
    for p in partials {
        for r in p.rows() {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Integrity(format!("id '{}' appears in more than one partial", r.id)));
            }
            top.push(r.clone());
        }
    }
    top.into_table()
}

/// Scores `ids` from `source` in batches, in input order.
pub fn score_ids(state: &ModelState, source: &dyn ImageSource, ids: &[String], batch: usize) -> Result<Vec<f32>> {
    let batch = batch.max(1);
    let mut out = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(batch) {
        let images = chunk.iter().map(|id| source.load(id)).collect::<Result<Vec<_>>>()?;
        out.extend(state.score(&images)?);
    }
    Ok(out)
}

/// Scores `ids` and returns them as a ranked table.
pub fn rank_ids(state: &ModelState, source: &dyn ImageSource, ids: &[String], batch: usize) -> Result<ScoreTable> {
    let scores = score_ids(state, source, ids, batch)?;
    ScoreTable::new(
        ids.iter()
            .zip(scores)
            .map(|(id, s)| ScoreRow::new(id.clone(), s as f64, None))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOptions {
    pub batch: usize,
    pub top_k: usize,
    pub workers: usize,
    /// Skip unreadable shards (and report them) instead of aborting.
    pub skip_invalid: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            batch: 64,
            top_k: 1000,
            workers: 1,
            skip_invalid: false,
        }
    }
}

/// Progress event, emitted as one JSON line per event.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ScoreEvent {
    ShardDone { shard: u32, images: usize, scored_total: usize, shards_done: usize, shards_total: usize },
    ShardSkipped { shard: u32, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSummary {
    pub top: ScoreTable,
    pub scored: usize,
    pub skipped: Vec<(u32, String)>,
}

struct ShardResult {
    lines: String,
    top: ScoreTable,
    count: usize,
}

fn score_shard(state: &ModelState, cache: &ShardCache, shard: u32, opts: &ScoreOptions) -> Result<ShardResult> {
    let (c, h, w) = cache.shape().as_tuple();
    let mut lines = String::new();
    let mut top = TopK::new(opts.top_k);
    let mut count = 0;
    let mut ids: Vec<String> = Vec::with_capacity(opts.batch);
    let mut images: Vec<ImageTensor> = Vec::with_capacity(opts.batch);
    let mut flush = |ids: &mut Vec<String>, images: &mut Vec<ImageTensor>| -> Result<()> {
        if ids.is_empty() {
            return Ok(());
        }
        let scores = state.score_batch(&Batch::from_images(images)?)?;
        for (id, s) in ids.drain(..).zip(scores) {
            lines.push_str(&format!("{},{:.6}\n", csv_field(&id), s));
            top.push(ScoreRow::new(id, s as f64, None));
            count += 1;
        }
        images.clear();
        Ok(())
    };
    for item in cache.stream_shard(shard)? {
        let (id, px) = item?;
        images.push(ImageTensor::from_u8(c, h, w, &px)?);
        ids.push(id);
        if ids.len() == opts.batch.max(1) {
            flush(&mut ids, &mut images)?;
        }
    }
    flush(&mut ids, &mut images)?;
    Ok(ShardResult {
        lines,
        top: top.into_table()?,
        count,
    })
}

/// Scores every image of `cache` exactly once, writes `id,score` CSV (header
/// plus rows in shard order) to `csv`, and returns the global top-K.
pub fn score_stream(
    state: &ModelState,
    cache: &ShardCache,
    opts: &ScoreOptions,
    csv: &mut dyn Write,
    progress: &mut dyn FnMut(&ScoreEvent),
) -> Result<ScoreSummary> {
    state.validate()?;
    let (c, h, w) = cache.shape().as_tuple();
    let spec = &state.spec;
    if (spec.channels, spec.height, spec.width) != (c, h, w) {
        return Err(Error::Contract(format!(
            "cache images are {c}x{h}x{w}, model expects {}x{}x{}",
            spec.channels, spec.height, spec.width
        )));
    }
    let mut skipped: Vec<(u32, String)> = cache.invalid_shards().to_vec();
    if let Some((s, why)) = skipped.first() {
        if !opts.skip_invalid {
            return Err(Error::InvalidCache(format!("shard {s}: {why}")));
        }
    }
    for (shard, reason) in &skipped {
        progress(&ScoreEvent::ShardSkipped { shard: *shard, reason: reason.clone() });
    }
    let invalid: HashSet<u32> = skipped.iter().map(|s| s.0).collect();
    let shards: Vec<u32> = (0..cache.shard_count() as u32).filter(|s| !invalid.contains(s)).collect();
    writeln!(csv, "id,score")?;

    let next = AtomicUsize::new(0);
    let workers = opts.workers.clamp(1, shards.len().max(1));
    let mut partials = Vec::new();
    let mut scored = 0;
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::channel::<(usize, Result<ShardResult>)>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, shards) = (&next, &shards);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, AtomicOrdering::SeqCst);
                if i >= shards.len() {
                    break;
                }
                if tx.send((i, score_shard(state, cache, shards[i], opts))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending: BTreeMap<usize, Result<ShardResult>> = BTreeMap::new();
        let mut emit = 0;
        for (i, res) in rx {
            pending.insert(i, res);
            while let Some(res) = pending.remove(&emit) {
                let shard = shards[emit];
                emit += 1;
                match res {
                    Ok(r) => {
                        csv.write_all(r.lines.as_bytes())?;
                        scored += r.count;
                        partials.push(r.top);
                        progress(&ScoreEvent::ShardDone {
                            shard,
                            images: r.count,
                            scored_total: scored,
                            shards_done: emit,
                            shards_total: shards.len(),
                        });
                    }
                    Err(e) if opts.skip_invalid => {
                        let reason = e.to_string();
                        progress(&ScoreEvent::ShardSkipped { shard, reason: reason.clone() });
                        skipped.push((shard, reason));
                    }
                    Err(e) => {
                        // Stop handing out work; in-flight shards finish and are dropped.
                        next.store(usize::MAX / 2, AtomicOrdering::SeqCst);
                        return Err(e);
                    }
                }
            }
        }
        Ok(())
    })?;
    csv.flush()?;
    skipped.sort();
    Ok(ScoreSummary {
        top: merge_partials(&partials, opts.top_k)?,
        scored,
        skipped,
    })
}

/// Progress sink writing JSON lines to standard error.
pub fn stderr_progress(event: &ScoreEvent) {
    if let Ok(line) = serde_json::to_string(event) {
        eprintln!("{line}");
    }
}
