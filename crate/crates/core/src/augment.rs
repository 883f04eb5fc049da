//! Weak (flip + reflect-padded crop) and strong (RandAugment-style)
//! augmentations for consistency training.
//!
//! Operation magnitudes are normalised to [0,1]; every operation is the
//! identity at magnitude 0. Ranges at magnitude 1:
//!
//! | op | range |
//! |----|-------|
//! | rotate | ±30°, bilinear, zero fill |
//! | shear-x / shear-y | ±0.3 |
//! | translate-x / translate-y | ±30% of the side, zero fill |
//! | brightness / contrast / sharpness | blend factor 1 ± 0.95 |
//! | solarize | threshold 256/255 → 0 |
//! | posterize | 8 → 4 bits |
//! | hflip | mirror when magnitude > 0 |
//! | crop-pad | shift up to 4 px, reflect fill |

use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

pub const WEAK_PAD: i32 = 4;
pub const MAX_LEVEL: u32 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    Hflip,
    CropPad,
    Rotate,
    Brightness,
    Contrast,
    Solarize,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Posterize,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 12] = [
        AugmentKind::Hflip,
        AugmentKind::CropPad,
        AugmentKind::Rotate,
        AugmentKind::Brightness,
        AugmentKind::Contrast,
        AugmentKind::Solarize,
        AugmentKind::Sharpness,
        AugmentKind::ShearX,
        AugmentKind::ShearY,
        AugmentKind::TranslateX,
        AugmentKind::TranslateY,
        AugmentKind::Posterize,
    ];

    /// Default strong-augmentation op set (no flips or crops, no cutout).
    pub const STRONG: [AugmentKind; 10] = [
        AugmentKind::Rotate,
        AugmentKind::Brightness,
        AugmentKind::Contrast,
        AugmentKind::Solarize,
        AugmentKind::Sharpness,
        AugmentKind::ShearX,
        AugmentKind::ShearY,
        AugmentKind::TranslateX,
        AugmentKind::TranslateY,
        AugmentKind::Posterize,
    ];

    fn signed(self) -> bool {
        !matches!(self, AugmentKind::Hflip | AugmentKind::Solarize | AugmentKind::Posterize)
    }

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::Hflip => "hflip",
            AugmentKind::CropPad => "crop-pad",
            AugmentKind::Rotate => "rotate",
            AugmentKind::Brightness => "brightness",
            AugmentKind::Contrast => "contrast",
            AugmentKind::Solarize => "solarize",
            AugmentKind::Sharpness => "sharpness",
            AugmentKind::ShearX => "shear-x",
            AugmentKind::ShearY => "shear-y",
            AugmentKind::TranslateX => "translate-x",
            AugmentKind::TranslateY => "translate-y",
            AugmentKind::Posterize => "posterize",
        }
    }
}

impl FromStr for AugmentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation op '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentOp {
    pub kind: AugmentKind,
    /// Normalised strength in [0,1].
    pub magnitude: f32,
    /// Reverses the direction of signed ops (rotation sense, shift direction,
    /// factor below 1).
    pub negate: bool,
}

impl AugmentOp {
    pub fn new(kind: AugmentKind, magnitude: f32) -> Self {
        Self {
            kind,
            magnitude,
            negate: false,
        }
    }

    fn signed_magnitude(&self) -> f32 {
        if self.negate {
            -self.magnitude
        } else {
            self.magnitude
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub n_ops: usize,
    /// Level on a 0..=30 scale.
    pub magnitude: u32,
    pub ops: Vec<AugmentKind>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            n_ops: 2,
            magnitude: 10,
            ops: AugmentKind::STRONG.to_vec(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.magnitude > MAX_LEVEL {
            return Err(Error::Config(format!("augment.magnitude must be <= {MAX_LEVEL}")));
        }
        if self.n_ops > self.ops.len() {
            return Err(Error::Config(format!(
                "augment.n_ops = {} exceeds the {} selected ops",
                self.n_ops,
                self.ops.len()
            )));
        }
        Ok(())
    }

    pub fn normalised_magnitude(&self) -> f32 {
        self.magnitude as f32 / MAX_LEVEL as f32
    }
}

pub fn apply_op(x: &ImageTensor, op: &AugmentOp) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&op.magnitude) {
        return Err(Error::Config(format!(
            "{}: magnitude {} outside [0,1]",
            op.kind.name(),
            op.magnitude
        )));
    }
    let m = op.magnitude;
    let s = op.signed_magnitude();
    let mut out = match op.kind {
        AugmentKind::Hflip => {
            if m > 0.0 {
                hflip(x)
            } else {
                x.clone()
            }
        }
        AugmentKind::CropPad => {
            let d = (WEAK_PAD as f32 * s).round() as i32;
            shift_reflect(x, d, d)
        }
        AugmentKind::Rotate => rotate(x, 30.0 * s),
        AugmentKind::ShearX => affine(x, |px, py, _cx, cy| (px + 0.3 * s * (py - cy), py)),
        AugmentKind::ShearY => affine(x, |px, py, cx, _cy| (px, py + 0.3 * s * (px - cx))),
        AugmentKind::TranslateX => translate(x, (0.3 * s * x.width() as f32).round() as i32, 0),
        AugmentKind::TranslateY => translate(x, 0, (0.3 * s * x.height() as f32).round() as i32),
        AugmentKind::Brightness => brightness(x, 1.0 + 0.95 * s),
        AugmentKind::Contrast => contrast(x, 1.0 + 0.95 * s),
        AugmentKind::Sharpness => sharpness(x, 1.0 + 0.95 * s),
        AugmentKind::Solarize => solarize(x, 256.0 / 255.0 * (1.0 - m)),
        AugmentKind::Posterize => posterize(x, 8 - (4.0 * m).round() as u32),
    };
    out.clamp_unit();
    Ok(out)
}

pub fn hflip(x: &ImageTensor) -> ImageTensor {
    let (c, h, w) = x.shape();
    let mut out = ImageTensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out.set(ch, y, xx, x.get(ch, y, w - 1 - xx));
            }
        }
    }
    out
}

#[inline]
fn reflect(i: i32, n: i32) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// `out[y][x] = in[reflect(y - dy)][reflect(x - dx)]`: equivalent to
/// reflect-padding and cropping at an offset.
pub fn shift_reflect(x: &ImageTensor, dx: i32, dy: i32) -> ImageTensor {
    let (c, h, w) = x.shape();
    let mut out = ImageTensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            let sy = reflect(y as i32 - dy, h as i32);
            for xx in 0..w {
                let sx = reflect(xx as i32 - dx, w as i32);
                out.set(ch, y, xx, x.get(ch, sy, sx));
            }
        }
    }
    out
}

/// Integer shift with zero fill; positive `dx` moves content right.
pub fn translate(x: &ImageTensor, dx: i32, dy: i32) -> ImageTensor {
    let (c, h, w) = x.shape();
    let mut out = ImageTensor::zeros(c, h, w);
    for ch in 0..c {
        for y in 0..h {
            let sy = y as i32 - dy;
            if sy < 0 || sy >= h as i32 {
                continue;
            }
            for xx in 0..w {
                let sx = xx as i32 - dx;
                if sx >= 0 && sx < w as i32 {
                    out.set(ch, y, xx, x.get(ch, sy as usize, sx as usize));
                }
            }
        }
    }
    out
}

#[inline]
fn bilinear_zero(x: &ImageTensor, ch: usize, fy: f32, fx: f32) -> f32 {
    let (_, h, w) = x.shape();
    let x0 = fx.floor();
    let y0 = fy.floor();
    let wx = fx - x0;
    let wy = fy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let px = |yy: i64, xx: i64| -> f32 {
        if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
            0.0
        } else {
            x.get(ch, yy as usize, xx as usize)
        }
    };
    let mut v = 0.0;
    if wy < 1.0 {
        if wx < 1.0 {
            v += (1.0 - wx) * (1.0 - wy) * px(y0, x0);
        }
        if wx > 0.0 {
            v += wx * (1.0 - wy) * px(y0, x0 + 1);
        }
    }
    if wy > 0.0 {
        if wx < 1.0 {
            v += (1.0 - wx) * wy * px(y0 + 1, x0);
        }
        if wx > 0.0 {
            v += wx * wy * px(y0 + 1, x0 + 1);
        }
    }
    v
}

/// Inverse-mapped resampling: `map(x, y, cx, cy)` gives the source position.
fn affine(x: &ImageTensor, map: impl Fn(f32, f32, f32, f32) -> (f32, f32)) -> ImageTensor {
    let (c, h, w) = x.shape();
    let cx = (w as f32 - 1.0) / 2.0;
    let cy = (h as f32 - 1.0) / 2.0;
    let mut out = ImageTensor::zeros(c, h, w);
    for y in 0..h {
        for xx in 0..w {
            let (sx, sy) = map(xx as f32, y as f32, cx, cy);
            for ch in 0..c {
                out.set(ch, y, xx, bilinear_zero(x, ch, sy, sx));
            }
        }
    }
    out
}

pub fn rotate(x: &ImageTensor, degrees: f32) -> ImageTensor {
    if degrees == 0.0 {
        return x.clone();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    affine(x, |px, py, cx, cy| {
        let (dx, dy) = (px - cx, py - cy);
        (cos * dx + sin * dy + cx, -sin * dx + cos * dy + cy)
    })
}

fn blend(degenerate: &ImageTensor, x: &ImageTensor, factor: f32) -> ImageTensor {
    let data = degenerate
        .data()
        .iter()
        .zip(x.data())
        .map(|(&d, &v)| d + factor * (v - d))
        .collect();
    let (c, h, w) = x.shape();
    ImageTensor::from_vec(c, h, w, data).expect("same shape")
}

pub fn brightness(x: &ImageTensor, factor: f32) -> ImageTensor {
    let (c, h, w) = x.shape();
    blend(&ImageTensor::zeros(c, h, w), x, factor)
}

/// Mean grey level (luma for RGB).
fn grey_mean(x: &ImageTensor) -> f32 {
    let (c, h, w) = x.shape();
    let n = (h * w) as f64;
    if c == 3 {
        let weights = [0.299, 0.587, 0.114];
        (0..3)
            .map(|ch| weights[ch] * x.plane(ch).iter().map(|&v| v as f64).sum::<f64>() / n)
            .sum::<f64>() as f32
    } else {
        (x.data().iter().map(|&v| v as f64).sum::<f64>() / x.data().len() as f64) as f32
    }
}

pub fn contrast(x: &ImageTensor, factor: f32) -> ImageTensor {
    let mean = grey_mean(x);
    let (c, h, w) = x.shape();
    let degenerate = ImageTensor::from_vec(c, h, w, vec![mean; c * h * w]).expect("same shape");
    blend(&degenerate, x, factor)
}

/// Blend towards a 3x3 smoothed copy (centre weight 5, neighbours 1, border
/// pixels left untouched).
pub fn sharpness(x: &ImageTensor, factor: f32) -> ImageTensor {
    let (c, h, w) = x.shape();
    let mut smooth = x.clone();
    if h >= 3 && w >= 3 {
        for ch in 0..c {
            for y in 1..h - 1 {
                for xx in 1..w - 1 {
                    let mut acc = 4.0 * x.get(ch, y, xx);
                    for dy in 0..3 {
                        for dx in 0..3 {
                            acc += x.get(ch, y + dy - 1, xx + dx - 1);
                        }
                    }
                    smooth.set(ch, y, xx, acc / 13.0);
                }
            }
        }
    }
    blend(&smooth, x, factor)
}

/// Inverts every value at or above `threshold`.
pub fn solarize(x: &ImageTensor, threshold: f32) -> ImageTensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
    out
}

/// Keeps `bits` bits: `floor(v * 2^bits) / 2^bits`. Eight bits is the storage
/// depth, so `bits >= 8` leaves the image unchanged.
pub fn posterize(x: &ImageTensor, bits: u32) -> ImageTensor {
    if bits >= 8 {
        return x.clone();
    }
    let levels = (1u32 << bits) as f32;
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = ((*v * levels).floor() / levels).min((levels - 1.0) / levels);
    }
    out
}

/// Weak view with explicit choices: optional mirror, then a reflect-padded
/// crop displaced by `(dx, dy)`, each in `[-WEAK_PAD, WEAK_PAD]`.
pub fn weak_augment_with(x: &ImageTensor, flip: bool, dx: i32, dy: i32) -> ImageTensor {
    let flipped;
    let src = if flip {
        flipped = hflip(x);
        &flipped
    } else {
        x
    };
    if dx == 0 && dy == 0 {
        return src.clone();
    }
    shift_reflect(src, dx, dy)
}

pub fn weak_augment<R: Rng + ?Sized>(x: &ImageTensor, rng: &mut R) -> ImageTensor {
    let flip = rng.gen_bool(0.5);
    let dx = rng.gen_range(-WEAK_PAD..=WEAK_PAD);
    let dy = rng.gen_range(-WEAK_PAD..=WEAK_PAD);
    weak_augment_with(x, flip, dx, dy)
}

/// Draws `n_ops` distinct ops from the policy with random direction.
pub fn sample_ops<R: Rng + ?Sized>(policy: &AugmentConfig, rng: &mut R) -> Vec<AugmentOp> {
    let m = policy.normalised_magnitude();
    sample(rng, policy.ops.len(), policy.n_ops.min(policy.ops.len()))
        .into_iter()
        .map(|i| {
            let kind = policy.ops[i];
            let negate = kind.signed() && rng.gen_bool(0.5);
            AugmentOp {
                kind,
                magnitude: m,
                negate,
            }
        })
        .collect()
}

pub fn strong_augment<R: Rng + ?Sized>(x: &ImageTensor, policy: &AugmentConfig, rng: &mut R) -> Result<ImageTensor> {
    let mut out = x.clone();
    for op in sample_ops(policy, rng) {
        out = apply_op(&out, &op)?;
    }
    Ok(out)
}
