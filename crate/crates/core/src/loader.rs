//! Decoding images from disk and the [`ImageSource`] abstraction used by
//! training and scoring.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::catalog::{ImageLocation, ImageRecord};
use crate::error::{Error, Result};
use crate::fits::{fits_to_record, parse_fits};
use crate::stretch::{apply_stretch, StretchSpec};
use crate::tensor::ImageTensor;

pub const RAW_F32_MAGIC: &[u8; 5] = b"AMF32";
pub const RAW_F32_HEADER_LEN: usize = 5 + 3 * 4;

/// Random access to preprocessed images by id.
pub trait ImageSource: Send + Sync {
    fn load(&self, id: &str) -> Result<ImageTensor>;
}

impl<T: ImageSource + ?Sized> ImageSource for Arc<T> {
    fn load(&self, id: &str) -> Result<ImageTensor> {
        (**self).load(id)
    }
}

/// Images held in memory as quantised bytes, the same representation the
/// shard cache stores.
#[derive(Debug, Default, Clone)]
pub struct MemorySource {
    shape: Option<(usize, usize, usize)>,
    images: HashMap<String, Vec<u8>>,
}

impl MemorySource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, image: &ImageTensor) -> Result<()> {
        self.insert_bytes(id, image.shape(), image.to_u8())
    }

    pub fn insert_bytes(
        &mut self,
        id: impl Into<String>,
        shape: (usize, usize, usize),
        bytes: Vec<u8>,
    ) -> Result<()> {
        match self.shape {
            Some(s) if s != shape => {
                return Err(Error::Contract(format!("image shape {shape:?} differs from {s:?}")))
            }
            _ => self.shape = Some(shape),
        }
        if bytes.len() != shape.0 * shape.1 * shape.2 {
            return Err(Error::Contract("byte count does not match shape".into()));
        }
        self.images.insert(id.into(), bytes);
        Ok(())
    }

    pub fn bytes(&self, id: &str) -> Option<&[u8]> {
        self.images.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

impl ImageSource for MemorySource {
    fn load(&self, id: &str) -> Result<ImageTensor> {
        let bytes = self
            .images
            .get(id)
            .ok_or_else(|| Error::UnknownId(id.to_string()))?;
        let (c, h, w) = self.shape.expect("non-empty source has a shape");
        ImageTensor::from_u8(c, h, w, bytes)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase()
}

/// Decodes a file-backed record and applies `stretch`.
/// Output is `channels x H x W` with values in [0,1].
pub fn load_image(record: &ImageRecord, stretch: &StretchSpec) -> Result<ImageTensor> {
    stretch.validate()?;
    if record.channels != 1 && record.channels != 3 {
        return Err(Error::Format(format!(
            "{}: unsupported channel count {}",
            record.id, record.channels
        )));
    }
    let ImageLocation::File(path) = &record.source else {
        return Err(Error::Usage(format!(
            "{}: load_image reads files; use the shard cache for cached records",
            record.id
        )));
    };
    let bytes = read_file(path)?;
    let raw = match extension(path).as_str() {
        "fits" | "fit" | "fts" => {
            if record.channels != 1 {
                return Err(Error::Format(format!(
                    "{}: FITS images are single channel, record declares {}",
                    record.id, record.channels
                )));
            }
            let (_, matrix) = parse_fits(&bytes)?;
            let img = fits_to_record(&record.id, record.source.clone(), &matrix, stretch)?;
            return Ok(img.tensor);
        }
        "f32" | "amf32" => decode_raw_f32(&bytes)?,
        _ => decode_codec(&bytes, record.channels)?,
    };
    if raw.channels() != record.channels as usize {
        return Err(Error::Format(format!(
            "{}: file has {} channels, record declares {}",
            record.id,
            raw.channels(),
            record.channels
        )));
    }
    let (c, h, w) = raw.shape();
    let data = apply_stretch(raw.data(), stretch)?;
    ImageTensor::from_vec(c, h, w, data)
}

/// PNG/JPEG/TIFF via the `image` crate, converted to the requested channel
/// count. 8-bit samples map to `v / 255`, 16-bit to `v / 65535`.
fn decode_codec(bytes: &[u8], channels: u8) -> Result<ImageTensor> {
    let img = image::load_from_memory(bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if channels == 1 {
        let luma = img.to_luma32f();
        ImageTensor::from_vec(1, h, w, luma.into_raw())
    } else {
        let rgb = img.to_rgb32f();
        let interleaved = rgb.into_raw();
        let mut planar = vec![0.0f32; 3 * h * w];
        for (i, px) in interleaved.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planar[c * h * w + i] = px[c];
            }
        }
        ImageTensor::from_vec(3, h, w, planar)
    }
}

/// Raw little-endian float images: `"AMF32"`, then C, H, W as u32 LE, then
/// `C*H*W` f32 LE values in channel-major order.
pub fn decode_raw_f32(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() < RAW_F32_HEADER_LEN || &bytes[..5] != RAW_F32_MAGIC {
        return Err(Error::Decode("missing AMF32 header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if c != 1 && c != 3 {
        return Err(Error::Format(format!("unsupported channel count {c}")));
    }
    let n = c * h * w;
    let body = &bytes[RAW_F32_HEADER_LEN..];
    if body.len() != n * 4 {
        return Err(Error::Decode(format!(
            "AMF32 body has {} bytes, expected {}",
            body.len(),
            n * 4
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ImageTensor::from_vec(c, h, w, data)
}

pub fn encode_raw_f32(image: &ImageTensor) -> Vec<u8> {
    let (c, h, w) = image.shape();
    let mut out = Vec::with_capacity(RAW_F32_HEADER_LEN + 4 * c * h * w);
    out.extend_from_slice(RAW_F32_MAGIC);
    for d in [c, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_raw_f32(path: &Path, image: &ImageTensor) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_raw_f32(image))?;
    Ok(())
}

/// Encodes a [0,1] tensor as an 8-bit grey or RGB PNG.
pub fn encode_png(image: &ImageTensor) -> Result<Vec<u8>> {
    let (c, h, w) = image.shape();
    let bytes = image.to_u8();
    let mut out = std::io::Cursor::new(Vec::new());
    match c {
        1 => image::GrayImage::from_raw(w as u32, h as u32, bytes)
            .expect("buffer sized from shape")
            .write_to(&mut out, image::ImageFormat::Png)?,
        3 => {
            let mut interleaved = vec![0u8; 3 * h * w];
            for ch in 0..3 {
                for i in 0..h * w {
                    interleaved[3 * i + ch] = bytes[ch * h * w + i];
                }
            }
            image::RgbImage::from_raw(w as u32, h as u32, interleaved)
                .expect("buffer sized from shape")
                .write_to(&mut out, image::ImageFormat::Png)?
        }
        other => return Err(Error::Format(format!("cannot encode {other}-channel PNG"))),
    }
    Ok(out.into_inner())
}
