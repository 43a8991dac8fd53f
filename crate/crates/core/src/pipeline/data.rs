use std::path::Path;

use rand::Rng;

use super::config::{DataConfig, TrainConfig};
use crate::diffarray::Tensor;
use crate::error::{Error, Result};
use crate::imaging::{bicubic_resize, degrade, read_manifest, synth_dataset, Augmentation, Image};

/// Train, validation and test HR images.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Image>,
    pub val: Vec<Image>,
    pub test: Vec<Image>,
}

fn load_split(manifest: Option<&Path>, seed: u64, count: usize, size: usize) -> Result<Vec<Image>> {
    match manifest {
        Some(path) => {
            let images = read_manifest(path)?
                .iter()
                .map(|p| Image::load_png(p))
                .collect::<Result<Vec<_>>>()?;
            if images.is_empty() {
                return Err(Error::Config(format!("{}: manifest lists no images", path.display())));
            }
            Ok(images)
        }
        None => synth_dataset(seed, count, size),
    }
}

impl Dataset {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let s = cfg.hr_size;
        Ok(Self {
            train: load_split(cfg.train_manifest.as_deref(), cfg.seed, cfg.train_images, s)?,
            val: load_split(cfg.val_manifest.as_deref(), cfg.seed + 1, cfg.val_images, s)?,
            test: load_split(cfg.test_manifest.as_deref(), cfg.seed + 2, cfg.test_images, s)?,
        })
    }
}

/// A batch of pairs that share one scale, stacked as `[N, C, H, W]` tensors.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub hr: Tensor,
    pub lr: Tensor,
    pub lr_up: Tensor,
    pub scale: f64,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.hr.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hr_grid(&self) -> (usize, usize) {
        (self.hr.shape()[2], self.hr.shape()[3])
    }

    /// Degrades each image at `scale`; all images must share one size.
    pub fn from_images(images: &[&Image], scale: f64) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("batch", "no images"));
        }
        let pairs = images.iter().map(|hr| degrade(hr, scale)).collect::<Result<Vec<_>>>()?;
        let stack = |f: fn(&crate::imaging::ImagePair) -> &Image| {
            Image::batch_tensor(&pairs.iter().map(f).collect::<Vec<_>>())
        };
        Ok(Self {
            hr: stack(|p| &p.hr)?,
            lr: stack(|p| &p.lr)?,
            lr_up: stack(|p| &p.lr_up)?,
            scale,
        })
    }

    /// `n` images drawn with replacement, each under a random dihedral transform.
    pub fn sample<R: Rng + ?Sized>(images: &[Image], n: usize, scale: f64, rng: &mut R) -> Result<Self> {
        Self::sample_patches(images, n, scale, None, rng)
    }

    /// Like [`TrainBatch::sample`], cutting a random `patch × patch` window
    /// from each image when `patch` is set.
    pub fn sample_patches<R: Rng + ?Sized>(
        images: &[Image],
        n: usize,
        scale: f64,
        patch: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::invalid("batch", "empty image set"));
        }
        let picked = (0..n)
            .map(|_| {
                let mut img = images[rng.random_range(0..images.len())].clone();
                if let Some(p) = patch {
                    let (h, w) = img.dims();
                    if p > h || p > w {
                        return Err(Error::invalid("batch", format!("patch {p} exceeds {h}x{w} image")));
                    }
                    img = img.window(rng.random_range(0..=h - p), rng.random_range(0..=w - p), p, p)?;
                }
                Augmentation::sample(rng, img.height() == img.width()).apply(&img)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(&picked.iter().collect::<Vec<_>>(), scale)
    }
}

/// Draws one scale from the configured range for a whole batch.
pub fn sample_batch_scale<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> f64 {
    if cfg.scale_max > cfg.scale_min {
        rng.random_range(cfg.scale_min..=cfg.scale_max)
    } else {
        cfg.scale_min
    }
}

/// Bicubic baseline on the target grid of `lr` at scale `s`.
pub fn bicubic_baseline(lr: &Image, s: f64) -> Result<Image> {
    let (h, w) = lr.dims();
    bicubic_resize(lr, crate::imaging::sr_side(h, s), crate::imaging::sr_side(w, s))
}
