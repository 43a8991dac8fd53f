use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use crate::error::{Error, Result};

pub const MIN_SYNTH_SIZE: usize = 32;

/// Procedural RGB images: a 1/f-weighted band-limited noise background,
/// faint high-frequency gratings and soft-edged convex polygons. Identical
/// seeds give identical datasets.
pub fn synth_dataset(seed: u64, count: usize, size: usize) -> Result<Vec<Image>> {
    if size < MIN_SYNTH_SIZE {
        return Err(Error::invalid("synth_dataset", format!("size {size} below {MIN_SYNTH_SIZE}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count).map(|_| synth_image(&mut rng, size)).collect())
}

/// Background waves: count, top frequency (cycles per pixel) and the
/// amplitude at 0.05 cycles per pixel; amplitude falls as `f^-1/2`.
const WAVES: usize = 24;
const WAVE_MAX_FREQ: f64 = 0.12;
const WAVE_GAIN: f64 = 0.2;
/// Grating band (cycles per pixel) and contrast.
const GRATING_FREQ: (f64, f64) = (0.12, 0.22);
const GRATING_CONTRAST: f64 = 0.3;
/// Width of the logistic edge profile of polygons, in pixels.
const EDGE_WIDTH: f64 = 0.7;

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

pub fn synth_image<R: Rng>(rng: &mut R, size: usize) -> Image {
    let n = size as f64;
    let mut px = vec![[0.0f64; 3]; size * size];

    // Background: base colour plus plane waves with log-uniform frequencies.
    let base = color(rng).map(|v| 0.25 + 0.5 * v);
    let waves: Vec<_> = (0..WAVES)
        .map(|_| {
            let theta = rng.random_range(0.0..PI);
            let freq = rng.random_range((1.0 / n).ln()..WAVE_MAX_FREQ.ln()).exp();
            let phase = rng.random_range(0.0..2.0 * PI);
            let gain = WAVE_GAIN * (0.05 / freq).sqrt();
            let amp = color(rng).map(|v| (v - 0.5) * gain);
            (theta.cos() * freq, theta.sin() * freq, phase, amp)
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let mut c = base;
            for &(fx, fy, ph, amp) in &waves {
                let s = (2.0 * PI * (fx * x as f64 + fy * y as f64) + ph).sin();
                for k in 0..3 {
                    c[k] += amp[k] * s;
                }
            }
            px[y * size + x] = c;
        }
    }

    // Sinusoidal gratings confined to soft discs.
    for _ in 0..rng.random_range(1..=2) {
        let theta = rng.random_range(0.0..PI);
        let freq = rng.random_range(GRATING_FREQ.0..GRATING_FREQ.1);
        let (cx, cy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let radius = rng.random_range(0.2..0.45) * n;
        let (lo, hi) = (color(rng), color(rng));
        let alpha = GRATING_CONTRAST * rng.random_range(0.5..0.9);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let r = (dx * dx + dy * dy).sqrt();
                let m = alpha * (1.0 / (1.0 + ((r - radius) / 1.5).exp()));
                let u = (2.0 * PI * freq * (dx * theta.cos() + dy * theta.sin())).sin();
                let g = 0.5 + 0.5 * u;
                let p = &mut px[y * size + x];
                for k in 0..3 {
                    p[k] = p[k] * (1.0 - m) + (lo[k] + (hi[k] - lo[k]) * g) * m;
                }
            }
        }
    }

    // Convex polygons with a logistic profile across the boundary.
    for _ in 0..rng.random_range(6..=12) {
        let (cx, cy) = (rng.random_range(0.1..0.9) * n, rng.random_range(0.1..0.9) * n);
        let radius = rng.random_range(0.05..0.2) * n;
        let sides = rng.random_range(3..=6);
        let mut angles: Vec<f64> = (0..sides).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        angles.sort_by(f64::total_cmp);
        let verts: Vec<(f64, f64)> = angles
            .iter()
            .map(|a| (cx + radius * a.cos(), cy + radius * a.sin()))
            .collect();
        let fill = color(rng);
        let opacity = rng.random_range(0.6..1.0);
        let reach = radius + 12.0 * EDGE_WIDTH;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(size - 1);
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil() as usize).min(size - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = outside_distance(&verts, x as f64, y as f64);
                let m = opacity / (1.0 + (d / EDGE_WIDTH).exp());
                let p = &mut px[y * size + x];
                for k in 0..3 {
                    p[k] = p[k] * (1.0 - m) + fill[k] * m;
                }
            }
        }
    }

    Image::from_fn(size, size, 3, |c, y, x| px[y * size + x][c].clamp(0.0, 1.0))
}

/// Signed distance to a convex polygon's boundary, positive outside.
fn outside_distance(verts: &[(f64, f64)], x: f64, y: f64) -> f64 {
    let n = verts.len();
    (0..n)
        .map(|i| {
            let (ax, ay) = verts[i];
            let (bx, by) = verts[(i + 1) % n];
            let len = (bx - ax).hypot(by - ay).max(1e-12);
            -((bx - ax) * (y - ay) - (by - ay) * (x - ax)) / len
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::bicubic_resize;
    use rustfft::{num_complex::Complex, FftPlanner};

    #[test]
    fn deterministic_and_in_range() {
        let a = synth_dataset(11, 4, 48).unwrap();
        let b = synth_dataset(11, 4, 48).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(12, 4, 48).unwrap());
        assert!(a.iter().flat_map(|i| i.data()).all(|v| (0.0..=1.0).contains(v)));
        assert!(synth_dataset(1, 1, 16).is_err());
    }

    fn high_band_power(plane: &[f64], n: usize) -> f64 {
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
        for row in buf.chunks_mut(n) {
            fft.process(row);
        }
        for x in 0..n {
            let mut col: Vec<_> = (0..n).map(|y| buf[y * n + x]).collect();
            fft.process(&mut col);
            for y in 0..n {
                buf[y * n + x] = col[y];
            }
        }
        // Frequencies beyond half of Nyquist along either axis.
        let band = |k: usize| k.min(n - k) > n / 4;
        let mut power = 0.0;
        for y in 0..n {
            for x in 0..n {
                if band(x) || band(y) {
                    power += buf[y * n + x].norm_sqr();
                }
            }
        }
        power / (n * n) as f64
    }

    #[test]
    fn generated_detail_exceeds_bicubic_roundtrip() {
        for img in synth_dataset(5, 6, 64).unwrap() {
            let down = bicubic_resize(&img, 32, 32).unwrap();
            let up = bicubic_resize(&down, 64, 64).unwrap();
            let p_img = high_band_power(img.luma().data(), 64);
            let p_up = high_band_power(up.luma().data(), 64);
            assert!(p_img > p_up, "{p_img} <= {p_up}");
        }
    }
}
