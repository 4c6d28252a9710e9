//! Synthetic shape datasets, image files and augmentation.

pub mod augment;
pub mod manifest;
pub mod pnm;
pub mod synthetic;

pub use augment::{augment, random_augmentation, AugmentKind};
pub use manifest::{load_manifest, Entry, LabeledImages, Manifest, Split, MANIFEST_VERSION};
pub use synthetic::{generate, render_sample, ShapeKind, ShapeParams, SyntheticSpec};
