//! Attention-guided iterative refinement for image-to-LaTeX conversion.
//!
//! A vision-language model transcribes a formula image into LaTeX; the
//! transcription is rendered, compared against the input, the differing
//! region is located from the model's cross-attention, the reported
//! differences are re-checked on that region, and the transcription is
//! corrected. The loop repeats until no differences remain or a round limit
//! is reached.

pub mod attnloc;
pub mod backend;
pub mod config;
pub mod curation;
pub mod dataset;
pub mod error;
pub mod latex;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod record;
pub mod render;
pub mod synth;
mod sync;

pub use error::{Error, Result};
pub use latex::LatexDoc;
pub use raster::RasterImage;
