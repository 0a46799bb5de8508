//! MNIST ingestion and deterministic synthesis of the transformed noisy
//! digit corpus.

mod dataset;
mod idx;
mod render;
mod transform;

pub use dataset::{
    render_batch, render_identity, split_train_val, Dataset, DigitRecord, Split, CACHE_MAGIC,
    CACHE_VERSION, MNIST_FILES, RENDER_CHUNK,
};
pub use idx::{parse_idx_images, parse_idx_labels, zip_digits, IMAGE_MAGIC, LABEL_MAGIC};
pub use render::{composite_into, make_views, render_into, render_sample, Background, Pose, Sample};
pub use transform::{
    apply_rotation, apply_translation, roll_plane, Axis, BitGrid, DigitMask, TransformKind,
    TransformSpec, Translate, ROTATION_CENTER, ROTATION_ORDER, ROTATION_STEP_DEGREES,
    TRANSLATION_ORDER, TRANSLATION_STEP_PIXELS,
};

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const CHANNELS: usize = 3;
/// Length of a flattened 3x28x28 sample.
pub const FLAT_LEN: usize = CHANNELS * PIXELS;
pub const NUM_CLASSES: usize = 9;

/// A digit as stored in the IDX files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawDigit {
    pub pixels: [u8; PIXELS],
    pub label: u8,
}
