//! Ranking metrics over score tables.
//!
//! A [`ScoreTable`] is always sorted by descending score with ties broken by
//! ascending id, so positions double as ranks. Conventions:
//!
//! * AUROC is the Mann-Whitney statistic with average ranks for ties, which
//!   equals the trapezoidal area under the ROC curve.
//! * AUPRC is average precision, `sum (R_k - R_{k-1}) P_k` over the distinct
//!   score thresholds (a step sum, no interpolation).
//! * The top p% of `n` rows is the first `ceil(p * n / 100)` rows.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::{DatasetCatalog, Label};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<Label>,
}

impl ScoreRow {
    pub fn new(id: impl Into<String>, score: f64, gt: Option<Label>) -> Self {
        Self {
            id: id.into(),
            score,
            gt,
        }
    }
}

/// Orders by score descending, then id ascending.
pub fn rank_order(a: (&str, f64), b: (&str, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn new(mut rows: Vec<ScoreRow>) -> Result<Self> {
        if let Some(r) = rows.iter().find(|r| !r.score.is_finite()) {
            return Err(Error::NonFinite(format!("score of '{}'", r.id)));
        }
        rows.sort_by(|a, b| rank_order((&a.id, a.score), (&b.id, b.score)));
        if let Some(w) = rows.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Integrity(format!("duplicate id '{}' in score table", w[0].id)));
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[ScoreRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<ScoreRow> {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ranks(&self) -> BTreeMap<&str, usize> {
        self.rows.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect()
    }

    pub fn with_ground_truth(mut self, catalog: &DatasetCatalog) -> Self {
        for r in &mut self.rows {
            r.gt = catalog.gt_label(&r.id);
        }
        self
    }

    /// Rows carrying a ground-truth label, in rank order.
    fn labelled(&self) -> impl Iterator<Item = (f64, bool)> + '_ {
        self.rows
            .iter()
            .filter_map(|r| r.gt.map(|g| (r.score, g.is_anomaly())))
    }

    pub fn counts(&self) -> (usize, usize) {
        self.labelled()
            .fold((0, 0), |(n, a), (_, pos)| if pos { (n, a + 1) } else { (n + 1, a) })
    }

    /// Writes `id,score` rows in rank order; scores as f32 with six decimals.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "id,score")?;
        for r in &self.rows {
            writeln!(w, "{},{:.6}", csv_field(&r.id), r.score as f32)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::from(e),
        })?;
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() < 2 {
                return Err(Error::Parse {
                    line,
                    message: "expected id,score".into(),
                });
            }
            let score: f64 = rec[1].trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("invalid score '{}'", &rec[1]),
            })?;
            rows.push(ScoreRow::new(&rec[0], score, None));
        }
        Self::new(rows)
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Groups consecutive equal scores: yields `(positives, negatives)` per group.
fn tie_groups(labelled: &[(f64, bool)]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut prev: Option<f64> = None;
    for &(s, pos) in labelled {
        if prev != Some(s) {
            out.push((0, 0));
            prev = Some(s);
        }
        let g = out.last_mut().expect("pushed");
        if pos {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    out
}

pub fn auroc(table: &ScoreTable) -> Result<f64> {
    let labelled: Vec<(f64, bool)> = table.labelled().collect();
    let pos = labelled.iter().filter(|x| x.1).count();
    let neg = labelled.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes ({pos} anomalies, {neg} normals)"
        )));
    }
    // Ascending ranks 1..n; rows are in descending order, so walk from the end.
    let mut rank_sum = 0.0f64;
    let mut start = 0usize;
    for (p, q) in tie_groups(&labelled).into_iter().rev() {
        let size = p + q;
        let avg = start as f64 + (size as f64 + 1.0) / 2.0;
        rank_sum += p as f64 * avg;
        start += size;
    }
    let (pos, neg) = (pos as f64, neg as f64);
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

pub fn auprc(table: &ScoreTable) -> Result<f64> {
    let labelled: Vec<(f64, bool)> = table.labelled().collect();
    let pos = labelled.iter().filter(|x| x.1).count();
    if pos == 0 {
        return Err(Error::UndefinedMetric("AUPRC needs at least one anomaly".into()));
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0f64);
    for (p, q) in tie_groups(&labelled) {
        tp += p;
        seen += p + q;
        ap += (p as f64 / pos as f64) * (tp as f64 / seen as f64);
    }
    Ok(ap)
}

/// Number of rows in the top `p` percent of `n`.
pub fn top_count(p: f64, n: usize) -> usize {
    (((p * n as f64) / 100.0 - 1e-9).ceil().max(0.0) as usize).min(n)
}

fn check_percent(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::Usage(format!("percentage must be in (0, 100], got {p}")));
    }
    Ok(())
}

fn anomalies_in_top(table: &ScoreTable, p: f64) -> Result<(usize, usize, usize)> {
    check_percent(p)?;
    let labelled: Vec<(f64, bool)> = table.labelled().collect();
    let total = labelled.iter().filter(|x| x.1).count();
    if total == 0 {
        return Err(Error::UndefinedMetric("no anomalies in ground truth".into()));
    }
    let k = top_count(p, labelled.len());
    let hits = labelled[..k].iter().filter(|x| x.1).count();
    Ok((hits, k, total))
}

/// Percentage of all anomalies found in the top `p` percent.
pub fn efficiency_at(table: &ScoreTable, p: f64) -> Result<f64> {
    let (hits, _, total) = anomalies_in_top(table, p)?;
    Ok(100.0 * hits as f64 / total as f64)
}

/// Percentage of the top `p` percent that are anomalies.
pub fn precision_at_top(table: &ScoreTable, p: f64) -> Result<f64> {
    let (hits, k, _) = anomalies_in_top(table, p)?;
    if k == 0 {
        return Ok(0.0);
    }
    Ok(100.0 * hits as f64 / k as f64)
}

/// Percent grid used for reported efficiency curves.
pub fn default_curve_points() -> Vec<f64> {
    let mut ps = vec![0.1, 0.5];
    ps.extend((1..=100).map(f64::from));
    ps
}

pub fn efficiency_curve(table: &ScoreTable, points: &[f64]) -> Result<Vec<(f64, f64)>> {
    points.iter().map(|&p| Ok((p, efficiency_at(table, p)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

fn edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDifference {
    /// `rank_a(id) - rank_b(id)`.
    pub deltas: BTreeMap<String, i64>,
    pub histogram: Histogram,
}

pub fn rank_difference(a: &ScoreTable, b: &ScoreTable, bins: usize) -> Result<RankDifference> {
    if bins == 0 {
        return Err(Error::Usage("histogram needs at least one bin".into()));
    }
    let (ra, rb) = (a.ranks(), b.ranks());
    let mut missing: Vec<String> = ra
        .keys()
        .filter(|k| !rb.contains_key(*k))
        .chain(rb.keys().filter(|k| !ra.contains_key(*k)))
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() {
        missing.sort();
        return Err(Error::Join(missing));
    }
    let deltas: BTreeMap<String, i64> = ra
        .iter()
        .map(|(id, &r)| (id.to_string(), r as i64 - rb[id] as i64))
        .collect();
    let span = a.len().saturating_sub(1) as f64;
    let (lo, hi) = (-span, span);
    let mut counts = vec![0usize; bins];
    for &d in deltas.values() {
        counts[bin_index(d as f64, lo, hi, bins)] += 1;
    }
    Ok(RankDifference {
        deltas,
        histogram: Histogram {
            edges: edges(lo, hi, bins),
            counts,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub edges: Vec<f64>,
    pub normal: Vec<usize>,
    pub anomaly: Vec<usize>,
    /// Rows without ground truth.
    pub unknown: Vec<usize>,
}

/// Per-class counts over equal-width bins on [0, 1].
pub fn score_histogram(table: &ScoreTable, bins: usize) -> Result<ScoreHistogram> {
    if bins == 0 {
        return Err(Error::Usage("histogram needs at least one bin".into()));
    }
    let mut h = ScoreHistogram {
        edges: edges(0.0, 1.0, bins),
        normal: vec![0; bins],
        anomaly: vec![0; bins],
        unknown: vec![0; bins],
    };
    for r in table.rows() {
        let b = bin_index(r.score, 0.0, 1.0, bins);
        match r.gt {
            Some(Label::Normal) => h.normal[b] += 1,
            Some(Label::Anomaly) => h.anomaly[b] += 1,
            None => h.unknown[b] += 1,
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auroc: f64,
    pub auprc: f64,
    /// `(p, percent of anomalies in the top p%)`.
    pub efficiency: Vec<(f64, f64)>,
    pub efficiency_at_1: f64,
    pub precision_at_0_1: f64,
    pub precision_at_1: f64,
    pub n_anomalies: usize,
    pub n_total: usize,
}

impl MetricsReport {
    pub fn from_table(table: &ScoreTable) -> Result<Self> {
        let (normals, anomalies) = table.counts();
        Ok(Self {
            auroc: auroc(table)?,
            auprc: auprc(table)?,
            efficiency: efficiency_curve(table, &default_curve_points())?,
            efficiency_at_1: efficiency_at(table, 1.0)?,
            precision_at_0_1: precision_at_top(table, 0.1)?,
            precision_at_1: precision_at_top(table, 1.0)?,
            n_anomalies: anomalies,
            n_total: normals + anomalies,
        })
    }

    /// `p,efficiency` rows for plotting.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("p,efficiency\n");
        for (p, e) in &self.efficiency {
            s.push_str(&format!("{p},{e:.6}\n"));
        }
        s
    }
}
