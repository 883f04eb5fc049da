//! Monotone normalisations mapping raw pixel values onto [0,1].
//!
//! `Log` and `Asinh` operate on min-max normalised input, so their softening
//! parameter is expressed in units of the image's dynamic range.
//! `ZScale` is a percentile clip followed by a linear map; it approximates
//! the classic IRAF zscale interval without the iterative line fit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SOFTENING: f64 = 0.1;
pub const DEFAULT_LOW_PERCENTILE: f64 = 0.5;
pub const DEFAULT_HIGH_PERCENTILE: f64 = 99.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StretchSpec {
    LinearMinmax,
    Log {
        #[serde(default = "default_softening")]
        a: f64,
    },
    Asinh {
        #[serde(default = "default_softening")]
        a: f64,
    },
    #[serde(rename = "zscale-like")]
    ZScale {
        #[serde(default = "default_low")]
        low_percentile: f64,
        #[serde(default = "default_high")]
        high_percentile: f64,
    },
}

fn default_softening() -> f64 {
    DEFAULT_SOFTENING
}
fn default_low() -> f64 {
    DEFAULT_LOW_PERCENTILE
}
fn default_high() -> f64 {
    DEFAULT_HIGH_PERCENTILE
}

impl Default for StretchSpec {
    fn default() -> Self {
        StretchSpec::LinearMinmax
    }
}

impl StretchSpec {
    pub fn log() -> Self {
        StretchSpec::Log { a: DEFAULT_SOFTENING }
    }

    pub fn asinh() -> Self {
        StretchSpec::Asinh { a: DEFAULT_SOFTENING }
    }

    pub fn zscale() -> Self {
        StretchSpec::ZScale {
            low_percentile: DEFAULT_LOW_PERCENTILE,
            high_percentile: DEFAULT_HIGH_PERCENTILE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StretchSpec::LinearMinmax => Ok(()),
            StretchSpec::Log { a } | StretchSpec::Asinh { a } => {
                if a.is_finite() && a > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!("stretch softening must be > 0, got {a}")))
                }
            }
            StretchSpec::ZScale {
                low_percentile,
                high_percentile,
            } => {
                if (0.0..=100.0).contains(&low_percentile)
                    && (0.0..=100.0).contains(&high_percentile)
                    && low_percentile < high_percentile
                {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "invalid percentile clip ({low_percentile}, {high_percentile})"
                    )))
                }
            }
        }
    }
}

impl std::str::FromStr for StretchSpec {
    type Err = Error;

    /// Parses the short names used on the command line and in query strings.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "linear-minmax" => Ok(StretchSpec::LinearMinmax),
            "log" => Ok(StretchSpec::log()),
            "asinh" => Ok(StretchSpec::asinh()),
            "zscale" | "zscale-like" => Ok(StretchSpec::zscale()),
            other => Err(Error::Config(format!("unknown stretch '{other}'"))),
        }
    }
}

/// Applies `spec` jointly over all values (one normalisation per image).
pub fn apply_stretch(values: &[f32], spec: &StretchSpec) -> Result<Vec<f32>> {
    spec.validate()?;
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidData(format!(
            "non-finite value {} at index {i}",
            values[i]
        )));
    }
    if values.is_empty() {
        return Ok(Vec::new());
    }
    let (min, max) = min_max(values);
    if max <= min {
        return Ok(vec![0.0; values.len()]);
    }
    let out = match *spec {
        StretchSpec::LinearMinmax => linear(values, min, max),
        StretchSpec::Log { a } => {
            let norm = (1.0 + 1.0 / a).ln();
            values
                .iter()
                .map(|&v| {
                    let x = (v as f64 - min) / (max - min);
                    ((1.0 + x / a).ln() / norm) as f32
                })
                .collect()
        }
        StretchSpec::Asinh { a } => {
            let norm = (1.0 / a).asinh();
            values
                .iter()
                .map(|&v| {
                    let x = (v as f64 - min) / (max - min);
                    ((x / a).asinh() / norm) as f32
                })
                .collect()
        }
        StretchSpec::ZScale {
            low_percentile,
            high_percentile,
        } => {
            let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let lo = percentile_sorted(&sorted, low_percentile);
            let hi = percentile_sorted(&sorted, high_percentile);
            if hi <= lo {
                linear(values, min, max)
            } else {
                linear(values, lo, hi)
            }
        }
    };
    Ok(out.into_iter().map(|v: f32| v.clamp(0.0, 1.0)).collect())
}

fn linear(values: &[f32], lo: f64, hi: f64) -> Vec<f32> {
    values
        .iter()
        .map(|&v| ((v as f64 - lo) / (hi - lo)).clamp(0.0, 1.0) as f32)
        .collect()
}

fn min_max(values: &[f32]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    })
}

/// Linear-interpolated percentile over sorted data (rank `p/100 * (n-1)`).
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn all_specs() -> Vec<StretchSpec> {
        vec![
            StretchSpec::LinearMinmax,
            StretchSpec::log(),
            StretchSpec::asinh(),
            StretchSpec::zscale(),
        ]
    }

    #[test]
    fn degenerate_input_maps_to_zero() {
        for spec in all_specs() {
            assert_eq!(apply_stretch(&[0.0, 0.0, 0.0], &spec).unwrap(), vec![0.0; 3]);
            assert_eq!(apply_stretch(&[7.5; 4], &spec).unwrap(), vec![0.0; 4]);
        }
    }

    #[test]
    fn linear_minmax_endpoints() {
        let out = apply_stretch(&[0.0, 255.0, 128.0, 64.0], &StretchSpec::LinearMinmax).unwrap();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], 1.0);
        assert!((out[2] - 0.50196).abs() < 1e-5);
        assert!((out[3] - 0.25098).abs() < 1e-5);
    }

    #[test]
    fn log_and_asinh_fix_endpoints() {
        let out = apply_stretch(&[0.0, 1.0], &StretchSpec::Log { a: 0.1 }).unwrap();
        assert_eq!(out, vec![0.0, 1.0]);
        let out = apply_stretch(&[0.0, 1.0], &StretchSpec::Asinh { a: 1.0 }).unwrap();
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn zscale_clips_at_percentiles() {
        let ramp: Vec<f32> = (0..1000).map(|v| v as f32).collect();
        let out = apply_stretch(&ramp, &StretchSpec::zscale()).unwrap();
        // Oracle: percentile by sorting, rank p/100*(n-1).
        let lo = 0.005 * 999.0;
        let hi = 0.995 * 999.0;
        for (v, y) in ramp.iter().zip(&out) {
            let v = *v as f64;
            if v <= lo {
                assert_eq!(*y, 0.0, "value {v}");
            } else if v >= hi {
                assert_eq!(*y, 1.0, "value {v}");
            } else {
                let expect = (v - lo) / (hi - lo);
                assert!((*y as f64 - expect).abs() < 1e-6);
            }
        }
        assert_eq!(out.iter().filter(|&&y| y == 0.0).count(), 5);
        assert_eq!(out.iter().filter(|&&y| y == 1.0).count(), 5);
    }

    #[test]
    fn non_finite_is_rejected() {
        for spec in all_specs() {
            assert!(matches!(
                apply_stretch(&[0.0, f32::NAN], &spec),
                Err(Error::InvalidData(_))
            ));
            assert!(apply_stretch(&[f32::INFINITY], &spec).is_err());
        }
    }

    #[test]
    fn parses_short_names() {
        assert_eq!("linear".parse::<StretchSpec>().unwrap(), StretchSpec::LinearMinmax);
        assert_eq!("zscale".parse::<StretchSpec>().unwrap(), StretchSpec::zscale());
        assert!("gamma".parse::<StretchSpec>().is_err());
    }

    proptest! {
        #[test]
        fn stretches_are_monotone_and_bounded(mut values in prop::collection::vec(-1e4f32..1e4, 2..200)) {
            values.sort_by(|a, b| a.total_cmp(b));
            for spec in all_specs() {
                let out = apply_stretch(&values, &spec).unwrap();
                for w in out.windows(2) {
                    prop_assert!(w[0] <= w[1], "{spec:?} not monotone");
                }
                prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
