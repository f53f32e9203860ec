//! Self-ensembling vision transformers for adversarially robust classification.
//!
//! * [`backbone`]: a ViT whose forward pass exposes every block's tokens.
//! * [`ensemble`]: intermediate MLP heads on patch tokens and majority-vote fusion.
//! * [`attacks`]: gray-box L∞ (FGSM, BIM, PGD, AutoPGD) and L2 (C&W) attacks on the final head.
//! * [`detector`]: KL-divergence consistency scores, ROC and threshold calibration.
//! * [`analysis`]: token-distance profiles, accuracy sweeps and robustness reports.

pub mod analysis;
pub mod attacks;
pub mod backbone;
mod checkpoint;
pub mod data;
pub mod detector;
pub mod ensemble;
pub mod error;
pub mod nn;

pub use error::{Result, SevitError};
