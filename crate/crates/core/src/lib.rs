//! Two-stage brain-age estimation: a ViT slice encoder pretrained on
//! age–sex composite classes feeds a residual CNN regressor with late sex
//! fusion. Also provides saliency mapping, atlas ROI scoring and
//! brain-age-gap association statistics.

pub mod config;
pub mod error;
pub mod eval;
pub mod interpret;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod regressor;
pub mod volume;
pub mod vit;

pub use error::{Error, Result};
