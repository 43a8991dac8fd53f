use rand::Rng;

use super::bicubic::bicubic_resize;
use super::image::Image;
use crate::error::{Error, Result};

pub const MIN_SCALE: f64 = 1.0;
pub const MAX_SCALE: f64 = 8.0;
/// Smallest accepted LR side.
pub const MIN_LR_SIDE: usize = 8;

/// Dihedral transform: optional flips followed by `rot90` counter-clockwise
/// quarter turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: u8,
}

impl Augmentation {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, allow_rotation: bool) -> Self {
        Self {
            hflip: rng.random(),
            vflip: rng.random(),
            rot90: if allow_rotation { rng.random_range(0..4) } else { 0 },
        }
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        let mut out = img.clone();
        if self.hflip {
            out = hflip(&out);
        }
        if self.vflip {
            out = vflip(&out);
        }
        for _ in 0..self.rot90 % 4 {
            out = rot90(&out)?;
        }
        Ok(out)
    }

    pub fn invert(&self, img: &Image) -> Result<Image> {
        let mut out = img.clone();
        for _ in 0..(4 - self.rot90 % 4) % 4 {
            out = rot90(&out)?;
        }
        if self.vflip {
            out = vflip(&out);
        }
        if self.hflip {
            out = hflip(&out);
        }
        Ok(out)
    }
}

pub fn hflip(img: &Image) -> Image {
    let w = img.width();
    Image::from_fn(img.height(), w, img.channels(), |c, y, x| img.get(c, y, w - 1 - x))
}

pub fn vflip(img: &Image) -> Image {
    let h = img.height();
    Image::from_fn(h, img.width(), img.channels(), |c, y, x| img.get(c, h - 1 - y, x))
}

/// Quarter turn counter-clockwise; square images only.
pub fn rot90(img: &Image) -> Result<Image> {
    let (h, w) = img.dims();
    if h != w {
        return Err(Error::invalid("augment", format!("rotation needs a square image, got {h}x{w}")));
    }
    Ok(Image::from_fn(h, w, img.channels(), |c, y, x| img.get(c, x, w - 1 - y)))
}

/// HR/LR training pair sharing one degradation scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub hr: Image,
    pub lr: Image,
    /// `lr` resampled back onto the HR grid.
    pub lr_up: Image,
    pub scale: f64,
    pub augmentation: Augmentation,
}

/// LR side for an HR side at scale `s`.
pub fn lr_side(side: usize, s: f64) -> usize {
    (side as f64 / s).floor() as usize
}

/// Target side for an LR side at scale `s`.
pub fn sr_side(side: usize, s: f64) -> usize {
    (side as f64 * s).ceil() as usize
}

/// Bicubic downsampling by `s` followed by bicubic upsampling back to the HR grid.
pub fn degrade(hr: &Image, s: f64) -> Result<ImagePair> {
    if !(s >= MIN_SCALE) || !s.is_finite() {
        return Err(Error::invalid("degrade", format!("scale {s} must be >= 1")));
    }
    let (h, w) = hr.dims();
    let (lh, lw) = (lr_side(h, s), lr_side(w, s));
    if lh < MIN_LR_SIDE || lw < MIN_LR_SIDE {
        return Err(Error::invalid(
            "degrade",
            format!("{h}x{w} at scale {s} gives a {lh}x{lw} LR grid; need at least {MIN_LR_SIDE}"),
        ));
    }
    let lr = bicubic_resize(hr, lh, lw)?;
    let lr_up = bicubic_resize(&lr, h, w)?;
    Ok(ImagePair {
        hr: hr.clone(),
        lr,
        lr_up,
        scale: s,
        augmentation: Augmentation::identity(),
    })
}

/// One scale drawn from U[1, 8], shared by a whole batch.
pub fn sample_scale<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.random_range(MIN_SCALE..=MAX_SCALE)
}

/// Applies one random dihedral transform to every image in the pair.
pub fn augment<R: Rng + ?Sized>(pair: &ImagePair, rng: &mut R) -> Result<ImagePair> {
    let aug = Augmentation::sample(rng, true);
    apply_augmentation(pair, aug)
}

pub fn apply_augmentation(pair: &ImagePair, aug: Augmentation) -> Result<ImagePair> {
    Ok(ImagePair {
        hr: aug.apply(&pair.hr)?,
        lr: aug.apply(&pair.lr)?,
        lr_up: aug.apply(&pair.lr_up)?,
        scale: pair.scale,
        augmentation: aug,
    })
}

pub fn invert_augmentation(pair: &ImagePair) -> Result<ImagePair> {
    let aug = pair.augmentation;
    Ok(ImagePair {
        hr: aug.invert(&pair.hr)?,
        lr: aug.invert(&pair.lr)?,
        lr_up: aug.invert(&pair.lr_up)?,
        scale: pair.scale,
        augmentation: Augmentation::identity(),
    })
}
