//! Append-only label store with provenance, persisted as CSV.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, SubsecRound, Utc};

use crate::catalog::{DatasetCatalog, Label};
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 4] = ["id", "label", "provenance", "timestamp_iso8601"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Seed,
    /// Added after active-learning cycle `k` (1-based).
    Cycle(u32),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Seed => f.write_str("seed"),
            Provenance::Cycle(k) => write!(f, "cycle-{k}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "seed" {
            return Ok(Provenance::Seed);
        }
        s.strip_prefix("cycle-")
            .and_then(|k| k.parse().ok())
            .map(Provenance::Cycle)
            .ok_or_else(|| format!("invalid provenance '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelEntry {
    pub id: String,
    pub label: Label,
    pub provenance: Provenance,
    pub timestamp: DateTime<Utc>,
}

/// Current time at the precision stored in the CSV file.
pub fn now() -> DateTime<Utc> {
    Utc::now().trunc_subsecs(6)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelStore {
    entries: Vec<LabelEntry>,
}

impl LabelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[LabelEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends an entry. Returns `true` when it supersedes an earlier label.
    pub fn append(&mut self, id: impl Into<String>, label: Label, provenance: Provenance) -> bool {
        self.append_at(id, label, provenance, now())
    }

    pub fn append_at(
        &mut self,
        id: impl Into<String>,
        label: Label,
        provenance: Provenance,
        timestamp: DateTime<Utc>,
    ) -> bool {
        let id = id.into();
        let superseded = self.entries.iter().any(|e| e.id == id);
        self.entries.push(LabelEntry {
            id,
            label,
            provenance,
            timestamp: timestamp.trunc_subsecs(6),
        });
        superseded
    }

    /// Active entry per id: later entries supersede earlier ones.
    pub fn active(&self) -> BTreeMap<&str, &LabelEntry> {
        let mut map = BTreeMap::new();
        for e in &self.entries {
            map.insert(e.id.as_str(), e);
        }
        map
    }

    pub fn label_of(&self, id: &str) -> Option<Label> {
        self.entries.iter().rev().find(|e| e.id == id).map(|e| e.label)
    }

    /// Active label counts `(normal, anomaly)`.
    pub fn class_counts(&self) -> (usize, usize) {
        self.active().values().fold((0, 0), |(n, a), e| match e.label {
            Label::Normal => (n + 1, a),
            Label::Anomaly => (n, a + 1),
        })
    }

    pub fn check_against(&self, catalog: &DatasetCatalog) -> Result<()> {
        match self.entries.iter().find(|e| !catalog.contains(&e.id)) {
            Some(e) => Err(Error::UnknownId(e.id.clone())),
            None => Ok(()),
        }
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(CSV_HEADER)?;
        for e in &self.entries {
            w.write_record([
                e.id.as_str(),
                &e.label.to_string(),
                &e.provenance.to_string(),
                &e.timestamp.to_rfc3339_opts(SecondsFormat::Micros, true),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| match e.kind() {
                csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                    Error::NotFound(path.to_path_buf())
                }
                _ => Error::from(e),
            })?;
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != CSV_HEADER {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
            });
        }
        let mut store = LabelStore::new();
        for record in r.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let parse_err = |message: String| Error::Parse { line, message };
            if record.len() != 4 {
                return Err(parse_err(format!("expected 4 fields, found {}", record.len())));
            }
            let label = match &record[1] {
                "0" => Label::Normal,
                "1" => Label::Anomaly,
                other => return Err(parse_err(format!("invalid label '{other}'"))),
            };
            let provenance = record[2].parse::<Provenance>().map_err(parse_err)?;
            let timestamp = DateTime::parse_from_rfc3339(&record[3])
                .map_err(|e| parse_err(format!("invalid timestamp '{}': {e}", &record[3])))?
                .with_timezone(&Utc);
            if record[0].is_empty() {
                return Err(parse_err("empty id".into()));
            }
            store.append_at(&record[0], label, provenance, timestamp);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_store_round_trips_to_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        LabelStore::new().save_csv(&p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "id,label,provenance,timestamp_iso8601\n"
        );
        assert!(LabelStore::load_csv(&p).unwrap().is_empty());
    }

    #[test]
    fn later_entry_supersedes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        let mut s = LabelStore::new();
        assert!(!s.append("a", Label::Normal, Provenance::Seed));
        assert!(s.append("a", Label::Anomaly, Provenance::Cycle(1)));
        s.save_csv(&p).unwrap();
        let loaded = LabelStore::load_csv(&p).unwrap();
        let active = loaded.active();
        assert_eq!(active.len(), 1);
        assert_eq!(active["a"].label, Label::Anomaly);
        assert_eq!(active["a"].provenance, Provenance::Cycle(1));
        assert_eq!(loaded.class_counts(), (0, 1));
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        std::fs::write(
            &p,
            "id,label,provenance,timestamp_iso8601\n\
             a,1,seed,2024-01-01T00:00:00.000000Z\n\
             b,7,seed,2024-01-01T00:00:00.000000Z\n",
        )
        .unwrap();
        match LabelStore::load_csv(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        std::fs::write(
            &p,
            "id,label,provenance,timestamp_iso8601\na,1,cycle-x,2024-01-01T00:00:00Z\n",
        )
        .unwrap();
        assert!(matches!(LabelStore::load_csv(&p), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn missing_file_is_not_found() {
        assert!(matches!(
            LabelStore::load_csv(Path::new("/nonexistent/labels.csv")),
            Err(Error::NotFound(_))
        ));
    }

    fn entry_strategy() -> impl Strategy<Value = (String, bool, Option<u32>, i64)> {
        (
            "[a-z0-9_,\" ]{1,12}",
            any::<bool>(),
            prop::option::of(1u32..50),
            0i64..2_000_000_000_000_000,
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn random_store_round_trips(entries in prop::collection::vec(entry_strategy(), 500)) {
            let mut s = LabelStore::new();
            for (id, anomaly, cycle, micros) in entries {
                let label = if anomaly { Label::Anomaly } else { Label::Normal };
                let prov = cycle.map_or(Provenance::Seed, Provenance::Cycle);
                let ts = DateTime::from_timestamp_micros(micros).unwrap();
                s.append_at(id, label, prov, ts);
            }
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("labels.csv");
            s.save_csv(&p).unwrap();
            let loaded = LabelStore::load_csv(&p).unwrap();
            prop_assert_eq!(&loaded, &s);
        }
    }
}
