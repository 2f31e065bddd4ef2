//! Volume ingestion, preprocessing, dataset splitting and synthetic phantoms.

mod manifest;
mod phantom;
mod preprocess;
mod split;
mod volume;

pub use manifest::{Manifest, ManifestRecord};
pub use phantom::{generate_phantom, generate_phantoms, Blob, LesionRule, Phantom, PhantomSpec};
pub use preprocess::{apply_mask, center_crop, preprocess, resample_slices, slice_indices, PreprocessConfig};
pub use split::{split, Split, SplitCounts};
pub use volume::{Class, Volume};
