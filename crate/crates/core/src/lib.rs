//! Semi-supervised anomaly detection for image collections.
//!
//! Anomaly detection is treated as a heavily imbalanced binary classification
//! problem. A compact CNN is trained with confidence-masked pseudo-labelling
//! (weak/strong augmentation consistency) and a class-balanced oversampler,
//! then iteratively refined through active-learning cycles in which the
//! highest scoring unlabelled images are reviewed and labelled.
//!
//! Module map:
//!
//! * [`catalog`], [`labels`], [`stretch`], [`loader`], [`shard`]: dataset
//!   catalogs, label persistence, image decoding and normalisation, and the
//!   sharded binary cache.
//! * [`fits`]: reader for 2D primary-HDU FITS images.
//! * [`augment`]: weak and RandAugment-style strong augmentations.
//! * [`backbone`]: the scoring network, optimiser, EMA and checkpoints.
//! * [`trainer`]: the pseudo-labelling training cycle.
//! * [`session`]: active-learning orchestration and session persistence.
//! * [`metrics`]: AUROC, AUPRC, detection efficiency and rank analyses.
//! * [`scorer`]: bounded-memory streaming scoring with global top-K.
//! * [`server`]: HTTP facade for interactive labelling, with display
//!   adjustments from [`render`].
//! * [`bench`]: multi-seed simulated labelling protocols; [`synth`] generates
//!   the two-population benchmark images.

pub mod augment;
pub mod backbone;
pub mod bench;
pub mod catalog;
pub mod error;
pub mod fits;
pub mod labels;
pub mod loader;
pub mod metrics;
pub mod render;
pub mod scorer;
pub mod server;
pub mod session;
pub mod shard;
pub mod stretch;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::ImageTensor;
