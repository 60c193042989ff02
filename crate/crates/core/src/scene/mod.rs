//! Synthetic aerial scenes: rendering, decoding, augmentation and on-disk
//! datasets.

pub mod augment;
pub mod dataset;
pub mod decode;
pub mod raster;
pub mod render;

pub use augment::{augment, mirror_annotations, AugmentOps, Augmented};
pub use dataset::{Dataset, Frame, Manifest, Split, Splits, DATASET_VERSION};
pub use decode::decode_actions;
pub use raster::{FramePair, PixelRect, Raster};
pub use render::{
    default_attributes, generate_scene, render_frame, ActionAttribute, Annotation, BackgroundConfig,
    Palette, Pattern, Region, SceneConfig,
};
