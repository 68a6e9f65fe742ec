//! Synthetic rain, image files, augmentation and batching.

pub mod augment;
pub mod dataset;
pub mod image_io;
pub mod rain;
pub mod scenes;

pub use augment::{augment, Transform};
pub use dataset::{Batch, DataConfig, DataSource, Pair, PairedDataset};
pub use image_io::{load_image, save_image};
pub use rain::{synth_rain, RainParams};
pub use scenes::procedural_scene;
