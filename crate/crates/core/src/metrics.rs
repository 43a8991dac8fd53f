//! Image quality and distribution distances.
//!
//! The Fréchet distance here runs on features of a fixed random convolutional
//! projection; it is a stand-in and its values are not comparable to
//! distances computed with pretrained feature extractors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffarray::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::imaging::Image;

/// Reported PSNR for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const RP_FEATURES: usize = 64;
pub const FRECHET_JITTER: f64 = 1e-6;

fn check_same(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::invalid(
            op,
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.channels(),
                a.height(),
                a.width(),
                b.channels(),
                b.height(),
                b.width()
            ),
        ))
    }
}

/// Peak signal-to-noise ratio in dB for values in [0, 1].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same("psnr", a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64;
    Ok(if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut mid = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            mid[y * ow + xo] = (0..n).map(|i| k[i] * x[y * w + xo + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..n).map(|i| k[i] * mid[(yo + i) * ow + xo]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity over luma with an 11×11 Gaussian window.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same("ssim", a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (la, lb) = (a.luma(), b.luma());
    let (x, y) = (la.data(), lb.data());
    let k = gaussian_window();
    let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
    let (mx, ..) = filter_valid(x, h, w, &k);
    let (my, ..) = filter_valid(y, h, w, &k);
    let (mxx, ..) = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &k);
    let (myy, ..) = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &k);
    let (mxy, ..) = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &k);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Fixed random two-layer convolutional projection to a 64-d descriptor.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    w1: Tensor,
    w2: Tensor,
    channels: usize,
}

impl RandomProjection {
    pub fn new(seed: u64, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = 32;
        let mut draw = |shape: &[usize], fan_in: usize| {
            let std = (2.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                std * z
            })
        };
        let w1 = draw(&[hidden, channels, 3, 3], channels * 9);
        let w2 = draw(&[RP_FEATURES, hidden, 3, 3], hidden * 9);
        Self { w1, w2, channels }
    }

    pub fn features(&self, img: &Image) -> Result<Vec<f64>> {
        if img.channels() != self.channels {
            return Err(Error::invalid(
                "rp_features",
                format!("expected {} channels, got {}", self.channels, img.channels()),
            ));
        }
        let g = Graph::new();
        let x = g.constant(img.to_tensor());
        let h = g.relu(g.conv2d(x, g.constant(self.w1.clone()), None, 2, 1)?);
        let h = g.relu(g.conv2d(h, g.constant(self.w2.clone()), None, 2, 1)?);
        let s = g.shape(h);
        let v = g.value(h);
        let area = (s[2] * s[3]) as f64;
        Ok(v.data().chunks(s[2] * s[3]).map(|c| c.iter().sum::<f64>() / area).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrechetReport {
    pub distance: f64,
    /// Whether diagonal jitter was added to singular covariances.
    pub jitter: bool,
}

fn mean_cov(feats: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let d = feats[0].len();
    let n = feats.len();
    let mut mu = DVector::zeros(d);
    for f in feats {
        mu += DVector::from_column_slice(f);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        let c = DVector::from_column_slice(f) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FrechetReport> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("frechet", "empty feature set"));
    }
    let (mu_a, mut ca) = mean_cov(a);
    let (mu_b, mut cb) = mean_cov(b);
    let d = ca.nrows();
    let min_eig = |m: &DMatrix<f64>| SymmetricEigen::new(m.clone()).eigenvalues.min();
    let jitter = min_eig(&ca) < 1e-10 || min_eig(&cb) < 1e-10;
    if jitter {
        ca += DMatrix::identity(d, d) * FRECHET_JITTER;
        cb += DMatrix::identity(d, d) * FRECHET_JITTER;
    }
    // tr((Σa Σb)^½) = tr((Σa^½ Σb Σa^½)^½), which keeps the argument symmetric.
    let ra = sym_sqrt(&ca);
    let cross = sym_sqrt(&(&ra * &cb * &ra)).trace();
    let dist = (&mu_a - &mu_b).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross;
    Ok(FrechetReport {
        distance: dist.max(0.0),
        jitter,
    })
}

/// Fréchet distance of random-projection features of two image sets.
pub fn rp_frechet(a: &[&Image], b: &[&Image], seed: u64) -> Result<FrechetReport> {
    let c = a
        .first()
        .or(b.first())
        .ok_or_else(|| Error::invalid("rp_frechet", "empty image set"))?
        .channels();
    let proj = RandomProjection::new(seed, c);
    let fa = a.iter().map(|i| proj.features(i)).collect::<Result<Vec<_>>>()?;
    let fb = b.iter().map(|i| proj.features(i)).collect::<Result<Vec<_>>>()?;
    frechet_distance(&fa, &fb)
}

/// Sorted projections resampled to `n` quantiles.
fn quantiles(sorted: &[f64], n: usize) -> Vec<f64> {
    if sorted.len() == n {
        return sorted.to_vec();
    }
    (0..n)
        .map(|i| {
            let pos = (i as f64 + 0.5) / n as f64 * sorted.len() as f64 - 0.5;
            let lo = pos.floor().clamp(0.0, (sorted.len() - 1) as f64) as usize;
            let hi = (lo + 1).min(sorted.len() - 1);
            let t = (pos - lo as f64).clamp(0.0, 1.0);
            sorted[lo] * (1.0 - t) + sorted[hi] * t
        })
        .collect()
}

/// Sliced 2-Wasserstein distance between two point clouds `[N, D]`, averaged
/// over `projections` random directions.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, projections: usize, seed: u64) -> Result<f64> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[1] {
        return Err(Error::shape("sliced_wasserstein", a.shape(), b.shape()));
    }
    let d = a.shape()[1];
    let n = a.shape()[0].max(b.shape()[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..projections {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let project = |t: &Tensor| {
            let mut p: Vec<f64> = t
                .data()
                .chunks(d)
                .map(|r| r.iter().zip(&dir).map(|(x, y)| x * y).sum())
                .collect();
            p.sort_by(f64::total_cmp);
            quantiles(&p, n)
        };
        let (pa, pb) = (project(a), project(b));
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / n as f64;
    }
    Ok((total / projections as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn noise(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
        Image::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = noise(1, 16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::new(16, 16, 3, a.data().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let (z, o) = (Image::filled(4, 4, 3, 0.0), Image::filled(4, 4, 3, 1.0));
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        assert!(psnr(&z, &Image::filled(4, 5, 3, 0.0)).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = noise(2, 24, 20);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let inv = Image::new(24, 20, 3, a.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        let b = noise(3, 24, 20);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ssim(&noise(4, 10, 30), &noise(5, 10, 30)).is_err());
    }

    #[test]
    fn frechet_examples() {
        let set_a: Vec<Image> = (0..6).map(|i| noise(10 + i, 16, 16)).collect();
        let set_b: Vec<Image> = (0..6).map(|i| noise(20 + i, 16, 16)).collect();
        let ra: Vec<&Image> = set_a.iter().collect();
        let rb: Vec<&Image> = set_b.iter().collect();
        let same = rp_frechet(&ra, &ra, 7).unwrap();
        assert!(same.distance < 1e-6 && same.jitter);
        let ab = rp_frechet(&ra, &rb, 7).unwrap().distance;
        let ba = rp_frechet(&rb, &ra, 7).unwrap().distance;
        assert!((ab - ba).abs() < 1e-9);

        let mut shuffled_a = ra.clone();
        shuffled_a.reverse();
        let mut shuffled_b = rb.clone();
        shuffled_b.rotate_left(2);
        assert!((rp_frechet(&shuffled_a, &shuffled_b, 7).unwrap().distance - ab).abs() < 1e-9);

        let zeros = vec![Image::filled(16, 16, 3, 0.0); 3];
        let ones = vec![Image::filled(16, 16, 3, 1.0); 3];
        let d = rp_frechet(&zeros.iter().collect::<Vec<_>>(), &ones.iter().collect::<Vec<_>>(), 7)
            .unwrap()
            .distance;
        assert!(d > 0.0);
    }

    #[test]
    fn sliced_wasserstein_of_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let a = Tensor::from_fn(&[2000, 2], |_| rng.sample(StandardNormal));
        let b = a.map(|v| v + 1.0);
        let same = sliced_wasserstein(&a, &a, 64, 1).unwrap();
        assert!(same < 1e-12);
        // Projection of a (1, 1) shift onto a unit direction u is u·(1, 1); its
        // mean square over uniform directions is 1.
        let d = sliced_wasserstein(&a, &b, 2000, 2).unwrap();
        assert!((d - 1.0).abs() < 0.05, "{d}");
    }

    proptest! {
        #[test]
        fn psnr_and_ssim_maximal_on_identity(seed in 0u64..200) {
            let a = noise(seed, 12, 12);
            let b = noise(seed + 1000, 12, 12);
            prop_assert!(psnr(&a, &b).unwrap() < PSNR_CAP);
            prop_assert!(ssim(&a, &b).unwrap() < ssim(&a, &a).unwrap());
        }
    }
}
