//! Image buffers, RandAugment, the training / validation pipelines and
//! test-time augmentation views.

mod image;
mod pipeline;

pub use image::ImageBuffer;
pub use pipeline::{
    apply_rand_op, rand_augment, random_erasing, train_pipeline, tta_resize, tta_variants, val_pipeline,
    AugmentationProfile, RandOp, IMAGENET_MEAN, IMAGENET_STD, RAND_OPS,
};
