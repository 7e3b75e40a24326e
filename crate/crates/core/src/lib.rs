//! Part-aware texture attention network.
//!
//! A small convolutional backbone produces a feature map; a recurrent
//! attention loop repeatedly localizes a region, samples it with a spatial
//! transformer and encodes it with a soft-assignment texture layer. Region
//! scores are max-pooled per class for weakly supervised multi-label
//! training, and the per-region texture vectors drive part-grouped retrieval.

pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod data;
mod error;
pub mod formats;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod texture;
pub mod train;

pub use error::{Error, Result};
