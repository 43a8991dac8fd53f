use super::image::Image;
use crate::error::{Error, Result};

/// Catmull-Rom coefficient.
pub const CUBIC_A: f64 = -0.5;

/// Cubic convolution kernel evaluated at distance `d`.
pub fn cubic_kernel(d: f64) -> f64 {
    let a = CUBIC_A;
    let x = d.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Weights for the four taps at `floor(src) - 1 ..= floor(src) + 2`, given the
/// fractional part `t` of the source coordinate.
pub fn cubic_weights(t: f64) -> [f64; 4] {
    [
        cubic_kernel(1.0 + t),
        cubic_kernel(t),
        cubic_kernel(1.0 - t),
        cubic_kernel(2.0 - t),
    ]
}

struct Taps {
    index: Vec<[usize; 4]>,
    weight: Vec<[f64; 4]>,
}

fn taps(n_in: usize, n_out: usize) -> Taps {
    let ratio = n_in as f64 / n_out as f64;
    let last = n_in as isize - 1;
    let mut index = Vec::with_capacity(n_out);
    let mut weight = Vec::with_capacity(n_out);
    for dst in 0..n_out {
        let src = (dst as f64 + 0.5) * ratio - 0.5;
        let base = src.floor();
        let t = src - base;
        let i0 = base as isize;
        index.push(std::array::from_fn(|k| (i0 - 1 + k as isize).clamp(0, last) as usize));
        weight.push(cubic_weights(t));
    }
    Taps { index, weight }
}

/// Separable bicubic resize with half-pixel centres and edge clamping; the
/// horizontal pass runs first and the output is clamped to [0, 1].
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("bicubic_resize", format!("target {out_h}x{out_w} is empty")));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let tx = taps(w, out_w);
    let ty = taps(h, out_h);
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut mid = vec![0.0; h * out_w];
    for ch in 0..c {
        let plane = img.plane(ch);
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for x in 0..out_w {
                let (ix, wx) = (&tx.index[x], &tx.weight[x]);
                mid[y * out_w + x] =
                    wx[0] * row[ix[0]] + wx[1] * row[ix[1]] + wx[2] * row[ix[2]] + wx[3] * row[ix[3]];
            }
        }
        for y in 0..out_h {
            let (iy, wy) = (&ty.index[y], &ty.weight[y]);
            for x in 0..out_w {
                let v = wy[0] * mid[iy[0] * out_w + x]
                    + wy[1] * mid[iy[1] * out_w + x]
                    + wy[2] * mid[iy[2] * out_w + x]
                    + wy[3] * mid[iy[3] * out_w + x];
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image::new(out_h, out_w, c, out)
}
