//! Synthetic labeled video: generation, disk format, sequence sampling and
//! augmentation.

mod generate;
mod image;
mod sequence;
mod store;

pub use generate::{
    generate_clips, generate_dataset, generate_pool_image, reflect, Dataset, GenConfig, ShapeKind, ShapeTrack, VideoClip,
};
pub use image::{
    decode_pgm, decode_ppm, encode_pgm, encode_ppm, read_pgm, read_ppm, write_pgm, write_ppm, Image, LabelMap, RgbImage,
};
pub use sequence::{
    apply_augmentation, augment_sequence, frame_indices, sample_sequence, valid_targets, AugmentConfig, Augmentation,
    SequenceSample,
};
pub use store::{load_dataset, load_noise_pool, save_dataset, FORMAT_VERSION};
