//! Images, bicubic resampling, HR/LR pair construction, augmentation and
//! procedural training data.

mod bicubic;
mod image;
mod pair;
mod synth;

pub use bicubic::{bicubic_resize, cubic_kernel, cubic_weights, CUBIC_A};
pub use image::{read_manifest, Image};
pub use pair::{
    apply_augmentation, augment, degrade, hflip, invert_augmentation, lr_side, rot90, sample_scale, sr_side, vflip,
    Augmentation, ImagePair, MAX_SCALE, MIN_LR_SIDE, MIN_SCALE,
};
pub use synth::{synth_dataset, synth_image, MIN_SYNTH_SIZE};
