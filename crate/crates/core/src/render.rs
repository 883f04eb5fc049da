//! Display adjustments for image review: brightness, contrast, unsharp
//! masking, an optional display stretch and channel selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stretch::{apply_stretch, StretchSpec};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderParams {
    /// Additive offset in [-1, 1].
    pub brightness: f32,
    /// Gain about mid-grey in [0, 3].
    pub contrast: f32,
    /// Unsharp-mask amount in [0, 2].
    pub unsharp: f32,
    /// Display stretch applied before the other adjustments; `None` keeps
    /// the stored values.
    pub stretch: Option<StretchSpec>,
    /// Channels to show; the others are blanked. Ignored for single-channel
    /// images.
    pub channels: [bool; 3],
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            brightness: 0.0,
            contrast: 1.0,
            unsharp: 0.0,
            stretch: None,
            channels: [true; 3],
        }
    }
}

impl RenderParams {
    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, v: f32, lo: f32, hi: f32| {
            if v.is_finite() && (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::Usage(format!("{name} must be in [{lo}, {hi}], got {v}")))
            }
        };
        check("brightness", self.brightness, -1.0, 1.0)?;
        check("contrast", self.contrast, 0.0, 3.0)?;
        check("unsharp", self.unsharp, 0.0, 2.0)?;
        if let Some(s) = &self.stretch {
            s.validate().map_err(|e| Error::Usage(e.to_string()))?;
        }
        Ok(())
    }

    pub fn is_neutral(&self) -> bool {
        *self == Self::default()
    }
}

/// Parses a channel selection such as `r`, `gb` or `rgb`.
pub fn parse_channels(s: &str) -> Result<[bool; 3]> {
    let mut out = [false; 3];
    for ch in s.chars() {
        let i = match ch.to_ascii_lowercase() {
            'r' => 0,
            'g' => 1,
            'b' => 2,
            other => return Err(Error::Usage(format!("unknown channel '{other}' (use r, g, b)"))),
        };
        out[i] = true;
    }
    if !out.iter().any(|&c| c) {
        return Err(Error::Usage("channel selection is empty".into()));
    }
    Ok(out)
}

/// 3x3 binomial blur (`[1,2,1]` outer product / 16) with edge replication.
pub fn gauss3(plane: &[f32], h: usize, w: usize) -> Vec<f32> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        plane[y * w + x]
    };
    let k = [1.0f32, 2.0, 1.0];
    let mut out = vec![0.0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for (dy, ky) in (-1..=1).zip(k) {
                for (dx, kx) in (-1..=1).zip(k) {
                    acc += ky * kx * at(y + dy, x + dx);
                }
            }
            out[y as usize * w + x as usize] = acc / 16.0;
        }
    }
    out
}

/// `v' = clamp(c * (v - 0.5) + 0.5 + b)`, then
/// `v'' = clamp(v' + u * (v' - gauss3(v')))`, per channel.
pub fn render_adjusted(image: &ImageTensor, params: &RenderParams) -> Result<ImageTensor> {
    params.validate()?;
    let (c, h, w) = image.shape();
    let mut out = match &params.stretch {
        Some(spec) => ImageTensor::from_vec(c, h, w, apply_stretch(image.data(), spec)?)?,
        None => image.clone(),
    };
    let (b, k, u) = (params.brightness, params.contrast, params.unsharp);
    for ch in 0..c {
        let plane = out.plane_mut(ch);
        if c == 3 && !params.channels[ch] {
            plane.fill(0.0);
            continue;
        }
        if b != 0.0 || k != 1.0 {
            plane.iter_mut().for_each(|v| *v = (k * (*v - 0.5) + 0.5 + b).clamp(0.0, 1.0));
        }
        if u > 0.0 {
            let blurred = gauss3(plane, h, w);
            plane
                .iter_mut()
                .zip(&blurred)
                .for_each(|(v, g)| *v = (*v + u * (*v - g)).clamp(0.0, 1.0));
        }
    }
    Ok(out)
}
