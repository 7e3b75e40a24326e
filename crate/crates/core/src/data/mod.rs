//! Dataset ingestion and synthetic data generation.

mod manifest;
mod ppm;
mod synth;

pub use manifest::{DatasetManifest, LabelledPart, PartBox, Record};
pub use ppm::RgbImage;
pub use synth::{generate_synthetic, SynthDataset, SynthPart, SynthSample, SynthSpec, TextureClass};
