//! Reader for two-dimensional images stored in the primary HDU of a FITS file.
//!
//! Headers are sequences of 80-byte ASCII cards padded to 2880-byte blocks;
//! the data array follows, big-endian, typed by `BITPIX`, with physical values
//! `BSCALE * raw + BZERO`. Extensions, tables and compression are not handled.

use crate::catalog::{ImageLocation, ImageRecord};
use crate::error::{Error, Result};
use crate::stretch::{apply_stretch, StretchSpec};
use crate::tensor::ImageTensor;

pub const BLOCK: usize = 2880;
pub const CARD: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub enum CardValue {
    Logical(bool),
    Integer(i64),
    Real(f64),
    Text(String),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Card {
    pub keyword: String,
    pub value: CardValue,
    pub comment: Option<String>,
}

impl Card {
    pub fn new(keyword: &str, value: CardValue) -> Self {
        Self {
            keyword: keyword.to_string(),
            value,
            comment: None,
        }
    }

    fn parse(raw: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(raw)
            .map_err(|_| Error::MalformedHeader("non-ASCII header card".into()))?;
        let keyword = text[..8].trim_end().to_string();
        if text.len() < 10 || &text[8..10] != "= " {
            // Commentary card (COMMENT, HISTORY, blank) or END.
            let rest = text.get(8..).unwrap_or("").trim_end();
            return Ok(Self {
                keyword,
                value: CardValue::None,
                comment: (!rest.is_empty()).then(|| rest.to_string()),
            });
        }
        let field = &text[10..];
        let (value, comment) = parse_value_field(field)
            .map_err(|m| Error::MalformedHeader(format!("{keyword}: {m}")))?;
        Ok(Self {
            keyword,
            value,
            comment,
        })
    }

    fn render(&self) -> [u8; CARD] {
        let mut s = format!("{:<8}", self.keyword);
        match &self.value {
            CardValue::None => {
                if let Some(c) = &self.comment {
                    s.push_str(c);
                }
            }
            value => {
                s.push_str("= ");
                let v = match value {
                    CardValue::Logical(b) => format!("{:>20}", if *b { "T" } else { "F" }),
                    CardValue::Integer(i) => format!("{i:>20}"),
                    CardValue::Real(r) => format!("{:>20}", format_real(*r)),
                    CardValue::Text(t) => format!("'{:<8}'", t.replace('\'', "''")),
                    CardValue::None => unreachable!(),
                };
                s.push_str(&v);
                if let Some(c) = &self.comment {
                    s.push_str(" / ");
                    s.push_str(c);
                }
            }
        }
        let mut out = [b' '; CARD];
        let bytes = s.as_bytes();
        let n = bytes.len().min(CARD);
        out[..n].copy_from_slice(&bytes[..n]);
        out
    }
}

fn format_real(r: f64) -> String {
    let s = format!("{r:?}");
    if s.contains('.') || s.contains('e') || s.contains("inf") || s.contains("NaN") {
        s.replace('e', "E")
    } else {
        format!("{s}.0")
    }
}

fn parse_value_field(field: &str) -> std::result::Result<(CardValue, Option<String>), String> {
    let trimmed = field.trim_start();
    if let Some(rest) = trimmed.strip_prefix('\'') {
        // Quoted string; '' escapes a quote.
        let mut value = String::new();
        let mut chars = rest.char_indices().peekable();
        let mut end = None;
        while let Some((i, c)) = chars.next() {
            if c == '\'' {
                if matches!(chars.peek(), Some((_, '\''))) {
                    value.push('\'');
                    chars.next();
                } else {
                    end = Some(i + 1);
                    break;
                }
            } else {
                value.push(c);
            }
        }
        let end = end.ok_or("unterminated string")?;
        let comment = rest[end..]
            .split_once('/')
            .map(|(_, c)| c.trim().to_string())
            .filter(|c| !c.is_empty());
        return Ok((CardValue::Text(value.trim_end().to_string()), comment));
    }
    let (raw, comment) = match trimmed.split_once('/') {
        Some((v, c)) => (v.trim(), Some(c.trim().to_string()).filter(|c| !c.is_empty())),
        None => (trimmed.trim(), None),
    };
    let value = match raw {
        "" => CardValue::None,
        "T" => CardValue::Logical(true),
        "F" => CardValue::Logical(false),
        _ => {
            if let Ok(i) = raw.parse::<i64>() {
                CardValue::Integer(i)
            } else if let Ok(r) = raw.replace(['D', 'd'], "E").parse::<f64>() {
                CardValue::Real(r)
            } else {
                return Err(format!("unparseable value '{raw}'"));
            }
        }
    };
    Ok((value, comment))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bitpix {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl Bitpix {
    pub fn from_code(code: i64) -> Result<Self> {
        Ok(match code {
            8 => Bitpix::U8,
            16 => Bitpix::I16,
            32 => Bitpix::I32,
            -32 => Bitpix::F32,
            -64 => Bitpix::F64,
            other => return Err(Error::MalformedHeader(format!("invalid BITPIX {other}"))),
        })
    }

    pub fn code(self) -> i64 {
        match self {
            Bitpix::U8 => 8,
            Bitpix::I16 => 16,
            Bitpix::I32 => 32,
            Bitpix::F32 => -32,
            Bitpix::F64 => -64,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Bitpix::U8 => 1,
            Bitpix::I16 => 2,
            Bitpix::I32 | Bitpix::F32 => 4,
            Bitpix::F64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        matches!(self, Bitpix::U8 | Bitpix::I16 | Bitpix::I32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitsHeader {
    /// Cards in file order, excluding `END`.
    pub cards: Vec<Card>,
    pub bitpix: Bitpix,
    pub naxis1: usize,
    pub naxis2: usize,
    pub bscale: f64,
    pub bzero: f64,
}

impl FitsHeader {
    /// Minimal header for a 2D image.
    pub fn image(bitpix: Bitpix, naxis1: usize, naxis2: usize, bscale: f64, bzero: f64) -> Self {
        let mut cards = vec![
            Card::new("SIMPLE", CardValue::Logical(true)),
            Card::new("BITPIX", CardValue::Integer(bitpix.code())),
            Card::new("NAXIS", CardValue::Integer(2)),
            Card::new("NAXIS1", CardValue::Integer(naxis1 as i64)),
            Card::new("NAXIS2", CardValue::Integer(naxis2 as i64)),
        ];
        if bscale != 1.0 {
            cards.push(Card::new("BSCALE", CardValue::Real(bscale)));
        }
        if bzero != 0.0 {
            cards.push(Card::new("BZERO", CardValue::Real(bzero)));
        }
        Self {
            cards,
            bitpix,
            naxis1,
            naxis2,
            bscale,
            bzero,
        }
    }

    pub fn find(&self, keyword: &str) -> Option<&CardValue> {
        self.cards.iter().find(|c| c.keyword == keyword).map(|c| &c.value)
    }

    /// Number of 2880-byte blocks the header occupies, `END` card included.
    pub fn block_count(&self) -> usize {
        ((self.cards.len() + 1) * CARD).div_ceil(BLOCK)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.block_count() * BLOCK);
        for c in &self.cards {
            out.extend_from_slice(&c.render());
        }
        out.extend_from_slice(&Card::new("END", CardValue::None).render());
        out.resize(self.block_count() * BLOCK, b' ');
        out
    }
}

/// Physical pixel values, `naxis2` rows of `naxis1` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FitsMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FitsMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }
}

fn int_value(cards: &[Card], key: &str) -> Result<i64> {
    match cards.iter().find(|c| c.keyword == key).map(|c| &c.value) {
        Some(CardValue::Integer(i)) => Ok(*i),
        Some(other) => Err(Error::MalformedHeader(format!("{key} is not an integer: {other:?}"))),
        None => Err(Error::MalformedHeader(format!("missing {key}"))),
    }
}

fn real_value(cards: &[Card], key: &str, default: f64) -> Result<f64> {
    match cards.iter().find(|c| c.keyword == key).map(|c| &c.value) {
        Some(CardValue::Integer(i)) => Ok(*i as f64),
        Some(CardValue::Real(r)) => Ok(*r),
        Some(other) => Err(Error::MalformedHeader(format!("{key} is not numeric: {other:?}"))),
        None => Ok(default),
    }
}

pub fn parse_fits(bytes: &[u8]) -> Result<(FitsHeader, FitsMatrix)> {
    if bytes.len() < BLOCK {
        return Err(Error::Truncated {
            expected: BLOCK,
            found: bytes.len(),
        });
    }
    let mut cards = Vec::new();
    let mut end_at = None;
    for (i, raw) in bytes.chunks_exact(CARD).enumerate() {
        if i == 0 && &raw[..8] != b"SIMPLE  " {
            return Err(Error::MalformedHeader("first card is not SIMPLE".into()));
        }
        if &raw[..8] == b"END     " {
            end_at = Some(i);
            break;
        }
        cards.push(Card::parse(raw)?);
    }
    let end = end_at.ok_or_else(|| Error::MalformedHeader("END card not found".into()))?;
    if !matches!(cards[0].value, CardValue::Logical(true)) {
        return Err(Error::MalformedHeader("SIMPLE is not T".into()));
    }
    let data_start = ((end + 1) * CARD).div_ceil(BLOCK) * BLOCK;

    let bitpix = Bitpix::from_code(int_value(&cards, "BITPIX")?)?;
    let naxis = int_value(&cards, "NAXIS")?;
    if naxis != 2 {
        return Err(Error::UnsupportedShape(format!("NAXIS = {naxis}, only 2D images are supported")));
    }
    let naxis1 = int_value(&cards, "NAXIS1")?;
    let naxis2 = int_value(&cards, "NAXIS2")?;
    if naxis1 <= 0 || naxis2 <= 0 {
        return Err(Error::UnsupportedShape(format!("empty image {naxis1}x{naxis2}")));
    }
    let (naxis1, naxis2) = (naxis1 as usize, naxis2 as usize);
    let bscale = real_value(&cards, "BSCALE", 1.0)?;
    let bzero = real_value(&cards, "BZERO", 0.0)?;

    let n = naxis1 * naxis2;
    let need = n * bitpix.bytes();
    let available = bytes.len().saturating_sub(data_start);
    if available < need {
        return Err(Error::Truncated {
            expected: data_start + need,
            found: bytes.len(),
        });
    }
    let raw = &bytes[data_start..data_start + need];
    let data: Vec<f64> = match bitpix {
        Bitpix::U8 => raw.iter().map(|&b| b as f64).collect(),
        Bitpix::I16 => raw
            .chunks_exact(2)
            .map(|c| i16::from_be_bytes([c[0], c[1]]) as f64)
            .collect(),
        Bitpix::I32 => raw
            .chunks_exact(4)
            .map(|c| i32::from_be_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Bitpix::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Bitpix::F64 => raw
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let data = if bscale == 1.0 && bzero == 0.0 {
        data
    } else {
        data.into_iter().map(|v| bscale * v + bzero).collect()
    };
    let header = FitsHeader {
        cards,
        bitpix,
        naxis1,
        naxis2,
        bscale,
        bzero,
    };
    Ok((
        header,
        FitsMatrix {
            rows: naxis2,
            cols: naxis1,
            data,
        },
    ))
}

/// Serialises header and data, inverting the `BSCALE`/`BZERO` transform.
/// Integer types round to nearest; the data region is zero padded to a block.
pub fn write_fits(header: &FitsHeader, matrix: &FitsMatrix) -> Result<Vec<u8>> {
    if matrix.rows != header.naxis2 || matrix.cols != header.naxis1 {
        return Err(Error::Contract(format!(
            "matrix {}x{} does not match header {}x{}",
            matrix.rows, matrix.cols, header.naxis2, header.naxis1
        )));
    }
    let mut out = header.to_bytes();
    let raw = |v: f64| {
        if header.bscale == 1.0 && header.bzero == 0.0 {
            v
        } else {
            (v - header.bzero) / header.bscale
        }
    };
    for &v in &matrix.data {
        let r = raw(v);
        let r = if header.bitpix.is_integer() { r.round() } else { r };
        match header.bitpix {
            Bitpix::U8 => out.push(r as u8),
            Bitpix::I16 => out.extend_from_slice(&(r as i16).to_be_bytes()),
            Bitpix::I32 => out.extend_from_slice(&(r as i32).to_be_bytes()),
            Bitpix::F32 => out.extend_from_slice(&(r as f32).to_be_bytes()),
            Bitpix::F64 => out.extend_from_slice(&r.to_be_bytes()),
        }
    }
    out.resize(out.len().div_ceil(BLOCK) * BLOCK, 0);
    Ok(out)
}

/// Single-channel record plus stretched tensor from a parsed FITS image.
#[derive(Debug, Clone)]
pub struct FitsImage {
    pub record: ImageRecord,
    pub tensor: ImageTensor,
    /// NaN pixels replaced by zero before stretching.
    pub nan_count: usize,
}

pub fn fits_to_record(
    id: &str,
    location: ImageLocation,
    matrix: &FitsMatrix,
    stretch: &StretchSpec,
) -> Result<FitsImage> {
    let nan_count = matrix.data.iter().filter(|v| v.is_nan()).count();
    if nan_count == matrix.data.len() {
        return Err(Error::InvalidData(format!("{id}: all pixels are NaN")));
    }
    if nan_count > 0 {
        log::warn!("{id}: {nan_count} NaN pixels replaced by 0");
    }
    let values: Vec<f32> = matrix
        .data
        .iter()
        .map(|&v| if v.is_nan() { 0.0 } else { v as f32 })
        .collect();
    let stretched = apply_stretch(&values, stretch)?;
    let tensor = ImageTensor::from_vec(1, matrix.rows, matrix.cols, stretched)?;
    let record = ImageRecord {
        id: id.to_string(),
        source: location,
        channels: 1,
        dims: Some((matrix.rows as u32, matrix.cols as u32)),
        gt_label: None,
    };
    Ok(FitsImage {
        record,
        tensor,
        nan_count,
    })
}
