//! Dataset handling: manifests, image I/O, preprocessing, augmentation,
//! streams, and the synthetic dataset generator.

pub mod augment;
pub mod image_io;
pub mod manifest;
pub mod resize;
pub mod stream;
pub mod synth;

pub use augment::{augment, sample_transform, AffineSample, AugmentConfig};
pub use image_io::{load_image, write_pgm, write_pgm16, ImageBuffer};
pub use manifest::{
    parse_manifest, parse_manifest_str, write_manifest, LabelState, StudyRecord, ViewKind,
    NUM_CLASSES, PATHOLOGIES,
};
pub use resize::{caffe_preprocess, resize_bilinear};
pub use stream::{
    eval_entries, expand_lateral, frontal_entries, prepare_images, PreparedImages, TrainEntry,
};
pub use synth::{read_boxes, synth_generate, BlobBox, SynthConfig, SynthOutput};
