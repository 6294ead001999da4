//! Detection and correction of defective pixels in single-channel Bayer frames.
//!
//! * [`imaging`]: frames, ingestion, synthetic scenes, tiling, patches
//! * [`defects`]: defect maps and value injection
//! * [`autodiff`]: the reverse-mode kernel the three models are built on
//! * [`detector`]: U-Net segmentation with multi-frame confidence calibration
//! * [`corrector`]: patch MLP that predicts a pixel from its neighbours
//! * [`reconstructor`]: ViT autoencoder for heavy corruption and clusters
//! * [`baselines`]: nearest / linear / median interpolation
//! * [`metrics`]: precision, recall, NMSE, PSNR
//! * [`pipeline`]: configuration, the detect-then-correct flow, experiments, reports

pub mod autodiff;
pub mod baselines;
pub mod corrector;
pub mod defects;
pub mod detector;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod pipeline;
pub mod reconstructor;

pub use error::{Error, Result};
