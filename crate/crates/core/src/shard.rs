//! Sharded fixed-record image cache.
//!
//! Shard file layout (all integers little-endian):
//!
//! ```text
//! "AMSH" | version u32 | count u64 | channels u8 | height u16 | width u16 | reserved [0; 13]
//! count x ( id_len u16 | id utf8 | pixels u8 x C*H*W )
//! "HSMA"
//! ```
//!
//! A shard without its footer is treated as an interrupted write. The index
//! (`index.json`) maps every id to its shard number and the byte offset of
//! its record, and is written only after every shard is complete.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::catalog::DatasetCatalog;
use crate::error::{Error, Result};
use crate::loader::{load_image, ImageSource};
use crate::stretch::StretchSpec;
use crate::tensor::ImageTensor;

pub const MAGIC: &[u8; 4] = b"AMSH";
pub const FOOTER: &[u8; 4] = b"HSMA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 4 + 4 + 8 + 1 + 2 + 2 + 13;
pub const INDEX_FILE: &str = "index.json";

pub fn shard_file_name(shard: u32) -> String {
    format!("shard-{shard:05}.amsh")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardShape {
    pub channels: u8,
    pub height: u16,
    pub width: u16,
}

impl ShardShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        let shape = Self {
            channels: u8::try_from(channels).map_err(|_| Error::Format("channels too large".into()))?,
            height: u16::try_from(height).map_err(|_| Error::Format("height too large".into()))?,
            width: u16::try_from(width).map_err(|_| Error::Format("width too large".into()))?,
        };
        if shape.channels != 1 && shape.channels != 3 {
            return Err(Error::Format(format!("unsupported channel count {channels}")));
        }
        Ok(shape)
    }

    pub fn pixels(&self) -> usize {
        self.channels as usize * self.height as usize * self.width as usize
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.channels as usize, self.height as usize, self.width as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub shard: u32,
    pub byte_offset: u64,
}

pub type ShardIndex = BTreeMap<String, IndexEntry>;

fn encode_header(count: u64, shape: ShardShape) -> [u8; HEADER_LEN as usize] {
    let mut h = [0u8; HEADER_LEN as usize];
    h[..4].copy_from_slice(MAGIC);
    h[4..8].copy_from_slice(&VERSION.to_le_bytes());
    h[8..16].copy_from_slice(&count.to_le_bytes());
    h[16] = shape.channels;
    h[17..19].copy_from_slice(&shape.height.to_le_bytes());
    h[19..21].copy_from_slice(&shape.width.to_le_bytes());
    h
}

fn decode_header(h: &[u8]) -> Result<(u64, ShardShape)> {
    if h.len() < HEADER_LEN as usize || &h[..4] != MAGIC {
        return Err(Error::InvalidCache("bad shard magic".into()));
    }
    let version = u32::from_le_bytes(h[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::InvalidCache(format!("unsupported shard version {version}")));
    }
    let count = u64::from_le_bytes(h[8..16].try_into().unwrap());
    let shape = ShardShape {
        channels: h[16],
        height: u16::from_le_bytes([h[17], h[18]]),
        width: u16::from_le_bytes([h[19], h[20]]),
    };
    Ok((count, shape))
}

/// Writes one shard. The footer goes out in [`ShardWriter::finish`].
pub struct ShardWriter {
    out: BufWriter<File>,
    shape: ShardShape,
    count: u64,
    written: u64,
    offset: u64,
}

impl ShardWriter {
    pub fn create(path: &Path, count: u64, shape: ShardShape) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&encode_header(count, shape))?;
        Ok(Self {
            out,
            shape,
            count,
            written: 0,
            offset: HEADER_LEN,
        })
    }

    /// Appends a record and returns its byte offset.
    pub fn push(&mut self, id: &str, pixels: &[u8]) -> Result<u64> {
        if self.written == self.count {
            return Err(Error::Usage("shard already holds its declared count".into()));
        }
        if pixels.len() != self.shape.pixels() {
            return Err(Error::Contract(format!(
                "{id}: {} pixel bytes, shard expects {}",
                pixels.len(),
                self.shape.pixels()
            )));
        }
        let id_len = u16::try_from(id.len()).map_err(|_| Error::Format(format!("id too long: {id}")))?;
        let at = self.offset;
        self.out.write_all(&id_len.to_le_bytes())?;
        self.out.write_all(id.as_bytes())?;
        self.out.write_all(pixels)?;
        self.offset += 2 + id.len() as u64 + pixels.len() as u64;
        self.written += 1;
        Ok(at)
    }

    pub fn finish(mut self) -> Result<()> {
        if self.written != self.count {
            return Err(Error::Usage(format!(
                "shard declared {} records, {} written",
                self.count, self.written
            )));
        }
        self.out.write_all(FOOTER)?;
        self.out.flush()?;
        Ok(())
    }
}

/// Writes `images` (in order) into shards of `shard_size` records plus the
/// index. Returns the index.
pub fn write_cache<'a, I>(dir: &Path, shape: ShardShape, shard_size: usize, images: I) -> Result<ShardIndex>
where
    I: IntoIterator<Item = (&'a str, &'a [u8])>,
    I::IntoIter: ExactSizeIterator,
{
    if shard_size == 0 {
        return Err(Error::Config("shard size must be positive".into()));
    }
    std::fs::create_dir_all(dir)?;
    let _ = std::fs::remove_file(dir.join(INDEX_FILE));
    let images = images.into_iter();
    let total = images.len();
    let mut index = ShardIndex::new();
    let mut writer: Option<ShardWriter> = None;
    let mut shard = 0u32;
    for (i, (id, pixels)) in images.enumerate() {
        if i % shard_size == 0 {
            if let Some(w) = writer.take() {
                w.finish()?;
                shard += 1;
            }
            let count = shard_size.min(total - i) as u64;
            writer = Some(ShardWriter::create(&dir.join(shard_file_name(shard)), count, shape)?);
        }
        if index.contains_key(id) {
            return Err(Error::InvalidData(format!("duplicate id '{id}' in cache build")));
        }
        let byte_offset = writer.as_mut().expect("writer opened above").push(id, pixels)?;
        index.insert(id.to_string(), IndexEntry { shard, byte_offset });
    }
    if let Some(w) = writer {
        w.finish()?;
    }
    let f = BufWriter::new(File::create(dir.join(INDEX_FILE))?);
    serde_json::to_writer(f, &index)?;
    Ok(index)
}

/// Preprocesses every catalog record (decode, stretch, bilinear resize,
/// quantise) and writes the cache. Records are processed in catalog order.
pub fn build_shard_cache(
    catalog: &DatasetCatalog,
    stretch: &StretchSpec,
    shard_size: usize,
    shape: ShardShape,
    dir: &Path,
) -> Result<ShardIndex> {
    let mut prepared: Vec<(String, Vec<u8>)> = Vec::with_capacity(catalog.len());
    for record in catalog.records() {
        if record.channels != shape.channels {
            return Err(Error::Format(format!(
                "{}: {} channels, cache expects {}",
                record.id, record.channels, shape.channels
            )));
        }
        let img = load_image(record, stretch)?;
        if img.height() < crate::catalog::MIN_SIDE as usize || img.width() < crate::catalog::MIN_SIDE as usize {
            return Err(Error::Format(format!(
                "{}: image {}x{} below minimum side",
                record.id,
                img.height(),
                img.width()
            )));
        }
        let resized = img.resize_bilinear(shape.height as usize, shape.width as usize);
        prepared.push((record.id.clone(), resized.to_u8()));
    }
    write_cache(
        dir,
        shape,
        shard_size,
        prepared.iter().map(|(id, px)| (id.as_str(), px.as_slice())),
    )
}

struct OpenShard {
    file: File,
    count: u64,
}

/// Read side of the cache: random access by id and sequential streaming.
pub struct ShardCache {
    dir: PathBuf,
    index: ShardIndex,
    shape: ShardShape,
    shards: Vec<Option<OpenShard>>,
    invalid: Vec<(u32, String)>,
}

impl std::fmt::Debug for ShardCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShardCache")
            .field("dir", &self.dir)
            .field("images", &self.index.len())
            .field("shards", &self.shards.len())
            .field("invalid", &self.invalid)
            .finish()
    }
}

fn validate_shard(path: &Path) -> Result<(File, u64, ShardShape)> {
    let mut file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let len = file.metadata()?.len();
    if len < HEADER_LEN + 4 {
        return Err(Error::InvalidCache(format!("{}: file too short", path.display())));
    }
    let mut header = [0u8; HEADER_LEN as usize];
    file.read_exact(&mut header)?;
    let (count, shape) = decode_header(&header)?;
    let mut footer = [0u8; 4];
    read_at(&file, &mut footer, len - 4)?;
    if &footer != FOOTER {
        return Err(Error::InvalidCache(format!(
            "{}: missing footer (incomplete write)",
            path.display()
        )));
    }
    Ok((file, count, shape))
}

#[cfg(unix)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        let n = file.seek_read(buf, offset)?;
        if n == 0 {
            return Err(std::io::ErrorKind::UnexpectedEof.into());
        }
        buf = &mut buf[n..];
        offset += n as u64;
    }
    Ok(())
}

impl ShardCache {
    /// Opens a cache, recording (not failing on) shards that fail validation.
    pub fn open(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let text = std::fs::read(&index_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::InvalidCache(format!("{} missing (build incomplete?)", index_path.display()))
            }
            _ => Error::Io(e),
        })?;
        let index: ShardIndex = serde_json::from_slice(&text)?;
        let n_shards = index.values().map(|e| e.shard + 1).max().unwrap_or(0);
        let mut shards = Vec::with_capacity(n_shards as usize);
        let mut invalid = Vec::new();
        let mut shape = None;
        for s in 0..n_shards {
            match validate_shard(&dir.join(shard_file_name(s))) {
                Ok((file, count, sh)) => {
                    match shape {
                        Some(prev) if prev != sh => {
                            invalid.push((s, format!("shape {sh:?} differs from {prev:?}")));
                            shards.push(None);
                            continue;
                        }
                        _ => shape = Some(sh),
                    }
                    shards.push(Some(OpenShard { file, count }));
                }
                Err(e) => {
                    invalid.push((s, e.to_string()));
                    shards.push(None);
                }
            }
        }
        let shape = match shape {
            Some(s) => s,
            None if index.is_empty() => ShardShape {
                channels: 3,
                height: 0,
                width: 0,
            },
            None => return Err(Error::InvalidCache("no readable shards".into())),
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            index,
            shape,
            shards,
            invalid,
        })
    }

    /// Opens a cache and fails if any shard is invalid.
    pub fn open_strict(dir: &Path) -> Result<Self> {
        let cache = Self::open(dir)?;
        if let Some((s, why)) = cache.invalid.first() {
            return Err(Error::InvalidCache(format!("shard {s}: {why}")));
        }
        Ok(cache)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn index(&self) -> &ShardIndex {
        &self.index
    }

    pub fn shape(&self) -> ShardShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    pub fn invalid_shards(&self) -> &[(u32, String)] {
        &self.invalid
    }

    /// Raw pixel bytes for `id`.
    pub fn read_bytes(&self, id: &str) -> Result<Vec<u8>> {
        let entry = self.index.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        let shard = self
            .shards
            .get(entry.shard as usize)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::InvalidCache(format!("shard {} unavailable", entry.shard)))?;
        let mut buf = vec![0u8; 2 + id.len() + self.shape.pixels()];
        read_at(&shard.file, &mut buf, entry.byte_offset)?;
        let id_len = u16::from_le_bytes([buf[0], buf[1]]) as usize;
        if id_len != id.len() || &buf[2..2 + id_len] != id.as_bytes() {
            return Err(Error::InvalidCache(format!("index entry for '{id}' points at another record")));
        }
        buf.drain(..2 + id_len);
        Ok(buf)
    }

    /// Streams the records of one shard in file order.
    pub fn stream_shard(&self, shard: u32) -> Result<ShardStream> {
        let s = self
            .shards
            .get(shard as usize)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::InvalidCache(format!("shard {shard} unavailable")))?;
        // A fresh handle keeps the stream cursor independent of other readers.
        let mut reader = BufReader::new(File::open(self.dir.join(shard_file_name(shard)))?);
        let mut header = [0u8; HEADER_LEN as usize];
        reader.read_exact(&mut header)?;
        Ok(ShardStream {
            reader,
            remaining: s.count,
            pixels: self.shape.pixels(),
        })
    }
}

impl ImageSource for ShardCache {
    fn load(&self, id: &str) -> Result<ImageTensor> {
        let (c, h, w) = self.shape.as_tuple();
        ImageTensor::from_u8(c, h, w, &self.read_bytes(id)?)
    }
}

pub struct ShardStream {
    reader: BufReader<File>,
    remaining: u64,
    pixels: usize,
}

impl Iterator for ShardStream {
    type Item = Result<(String, Vec<u8>)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let mut read = || -> Result<(String, Vec<u8>)> {
            let mut len = [0u8; 2];
            self.reader.read_exact(&mut len)?;
            let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
            self.reader.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|_| Error::InvalidCache("non-utf8 id".into()))?;
            let mut px = vec![0u8; self.pixels];
            self.reader.read_exact(&mut px)?;
            Ok((id, px))
        };
        let item = read();
        if item.is_err() {
            self.remaining = 0;
        }
        Some(item)
    }
}
