//! Dataset catalog: image records and the labelled / unlabelled / test splits.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SIDE: u32 = 8;

/// Binary class of an image. Anomalies are the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Normal = 0,
    Anomaly = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::Normal
        } else {
            Label::Anomaly
        }
    }

    pub fn is_anomaly(self) -> bool {
        self == Label::Anomaly
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Anomaly),
            other => Err(Error::InvalidData(format!("label must be 0 or 1, got {other}"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

/// Where the pixels of a record live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageLocation {
    File(PathBuf),
    Shard { shard: u32, byte_offset: u64 },
    /// Held by an in-memory source (synthetic data, tests).
    Memory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub source: ImageLocation,
    pub channels: u8,
    /// `(height, width)` once known; filled in by decoding.
    pub dims: Option<(u32, u32)>,
    pub gt_label: Option<Label>,
}

impl ImageRecord {
    pub fn file(id: impl Into<String>, path: impl Into<PathBuf>, channels: u8) -> Self {
        Self {
            id: id.into(),
            source: ImageLocation::File(path.into()),
            channels,
            dims: None,
            gt_label: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidData("empty image id".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Format(format!(
                "{}: unsupported channel count {}",
                self.id, self.channels
            )));
        }
        if let Some((h, w)) = self.dims {
            if h < MIN_SIDE || w < MIN_SIDE {
                return Err(Error::Format(format!(
                    "{}: image {h}x{w} smaller than {MIN_SIDE}x{MIN_SIDE}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labelled,
    Unlabelled,
    Test,
}

/// Ordered records plus disjoint splits. Split sets are ordered by id so that
/// every iteration over them is deterministic.
#[derive(Debug, Clone, Default)]
pub struct DatasetCatalog {
    records: Vec<ImageRecord>,
    index: HashMap<String, usize>,
    labelled: BTreeSet<String>,
    unlabelled: BTreeSet<String>,
    test: BTreeSet<String>,
}

/// One line of the JSON-lines catalog file.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CatalogLine {
    id: String,
    /// Absent for records whose pixels live in a cache or in memory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_label: Option<Label>,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channels: Option<u8>,
}

impl DatasetCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a record and places it in `split`.
    pub fn push(&mut self, record: ImageRecord, split: Split) -> Result<()> {
        record.validate()?;
        if self.index.contains_key(&record.id) {
            return Err(Error::InvalidData(format!("duplicate id '{}'", record.id)));
        }
        let id = record.id.clone();
        self.index.insert(id.clone(), self.records.len());
        self.records.push(record);
        match split {
            Split::Labelled => self.labelled.insert(id),
            Split::Unlabelled => self.unlabelled.insert(id),
            Split::Test => self.test.insert(id),
        };
        Ok(())
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn gt_label(&self, id: &str) -> Option<Label> {
        self.get(id).and_then(|r| r.gt_label)
    }

    pub fn labelled(&self) -> &BTreeSet<String> {
        &self.labelled
    }

    pub fn unlabelled(&self) -> &BTreeSet<String> {
        &self.unlabelled
    }

    pub fn test(&self) -> &BTreeSet<String> {
        &self.test
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        if self.labelled.contains(id) {
            Some(Split::Labelled)
        } else if self.unlabelled.contains(id) {
            Some(Split::Unlabelled)
        } else if self.test.contains(id) {
            Some(Split::Test)
        } else {
            None
        }
    }

    /// Moves ids from the unlabelled pool into the labelled set. Either every
    /// id moves or none does.
    pub fn move_to_labelled<'a>(&mut self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let ids: Vec<&str> = ids.into_iter().collect();
        for id in &ids {
            if !self.contains(id) {
                return Err(Error::UnknownId((*id).to_string()));
            }
            if !self.unlabelled.contains(*id) {
                return Err(Error::Split(format!("'{id}' is not in the unlabelled pool")));
            }
        }
        for id in ids {
            self.unlabelled.remove(id);
            self.labelled.insert(id.to_string());
        }
        Ok(())
    }

    /// Rebuilds the splits, e.g. when restoring a session.
    pub fn set_splits(
        &mut self,
        labelled: BTreeSet<String>,
        unlabelled: BTreeSet<String>,
        test: BTreeSet<String>,
    ) -> Result<()> {
        let candidate = DatasetCatalog {
            records: Vec::new(),
            index: HashMap::new(),
            labelled,
            unlabelled,
            test,
        };
        for id in candidate
            .labelled
            .iter()
            .chain(&candidate.unlabelled)
            .chain(&candidate.test)
        {
            if !self.contains(id) {
                return Err(Error::UnknownId(id.clone()));
            }
        }
        candidate.check_disjoint()?;
        self.labelled = candidate.labelled;
        self.unlabelled = candidate.unlabelled;
        self.test = candidate.test;
        Ok(())
    }

    fn check_disjoint(&self) -> Result<()> {
        if let Some(id) = self.labelled.intersection(&self.unlabelled).next() {
            return Err(Error::Split(format!("'{id}' both labelled and unlabelled")));
        }
        if let Some(id) = self.test.intersection(&self.labelled).next() {
            return Err(Error::Split(format!("'{id}' both test and labelled")));
        }
        if let Some(id) = self.test.intersection(&self.unlabelled).next() {
            return Err(Error::Split(format!("'{id}' both test and unlabelled")));
        }
        Ok(())
    }

    /// Reads a JSON-lines catalog. Relative paths resolve against the
    /// catalog file's directory.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut catalog = DatasetCatalog::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CatalogLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i as u64 + 1,
                message: e.to_string(),
            })?;
            let (source, channels) = match entry.path {
                Some(p) => {
                    let p = if p.is_absolute() { p } else { base.join(p) };
                    let channels = entry.channels.unwrap_or_else(|| default_channels(&p));
                    (ImageLocation::File(p), channels)
                }
                None => (ImageLocation::Memory, entry.channels.unwrap_or(3)),
            };
            let record = ImageRecord {
                id: entry.id,
                source,
                channels,
                dims: None,
                gt_label: entry.gt_label,
            };
            catalog.push(record, entry.split).map_err(|e| Error::Parse {
                line: i as u64 + 1,
                message: e.to_string(),
            })?;
        }
        Ok(catalog)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            let path = match &r.source {
                ImageLocation::File(p) => Some(p.clone()),
                _ => None,
            };
            let line = CatalogLine {
                id: r.id.clone(),
                path,
                gt_label: r.gt_label,
                split: self.split_of(&r.id).unwrap_or(Split::Unlabelled),
                channels: Some(r.channels),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

fn default_channels(path: &Path) -> u8 {
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(ext) if matches!(ext.as_str(), "fits" | "fit" | "fts") => 1,
        _ => 3,
    }
}
