//! Synthetic data, dataset files and augmentation.

mod augment;
mod io;
mod sample;
mod synth;

pub use augment::{augment, crop, mirror, AugmentConfig};
pub use io::{
    image_path, load_annotations, load_assignment, load_dataset, load_keypoints, load_manifest,
    load_schema, read_ppm, write_dataset, write_ppm, Annotations, LoadReport, ANNOTATIONS_FILE,
    ASSIGNMENT_FILE, IMAGE_DIR, KEYPOINTS_FILE, MANIFEST_FILE,
};
pub use sample::{images_tensor, labels_tensor, Dataset, Image, Sample};
pub use synth::{gen_synthetic, Split, Splits, SynthConfig, PALETTE};
