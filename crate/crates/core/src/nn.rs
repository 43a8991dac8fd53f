//! Layer descriptors. A layer owns only its parameter names and sizes; the
//! values live in a [`ParamStore`] so the same layer can be evaluated against
//! training weights or an EMA shadow.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffarray::{Binding, Graph, ParamStore, Tensor, Var};
use crate::error::Result;

fn init_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let std = gain / (fan_in as f64).sqrt();
    let n = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| n.sample(rng))
}

/// Affine map on the last axis of a [M, din] matrix.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, gain: f64, rng: &mut R) {
        store.insert(self.weight_name(), init_normal(&[self.din, self.dout], self.din, gain, rng));
        store.insert(self.bias_name(), Tensor::zeros(&[self.dout]));
    }

    pub fn forward(&self, g: &Graph, p: &Binding<'_>, x: Var) -> Result<Var> {
        let w = g.param(p, &self.weight_name())?;
        let b = g.param(p, &self.bias_name())?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Square-kernel 2D convolution on [N, C, H, W].
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Same-padded stride-1 convolution.
    pub fn same(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }

    /// 3×3 stride-2 convolution; output side is `ceil(side / 2)`.
    pub fn down(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel: 3,
            stride: 2,
            pad: 1,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, gain: f64, rng: &mut R) {
        let k = self.kernel;
        store.insert(
            self.weight_name(),
            init_normal(&[self.cout, self.cin, k, k], self.cin * k * k, gain, rng),
        );
        store.insert(self.bias_name(), Tensor::zeros(&[self.cout]));
    }

    pub fn forward(&self, g: &Graph, p: &Binding<'_>, x: Var) -> Result<Var> {
        let w = g.param(p, &self.weight_name())?;
        let b = g.param(p, &self.bias_name())?;
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Stride-2 transposed convolution (kernel 4, padding 1) doubling each side.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
}

impl ConvTranspose2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, gain: f64, rng: &mut R) {
        // Each output pixel receives ~4 taps per input channel.
        store.insert(
            format!("{}.w", self.name),
            init_normal(&[self.cin, self.cout, 4, 4], self.cin * 4, gain, rng),
        );
        store.insert(format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward(&self, g: &Graph, p: &Binding<'_>, x: Var) -> Result<Var> {
        let w = g.param(p, &format!("{}.w", self.name))?;
        let b = g.param(p, &format!("{}.b", self.name))?;
        g.conv_transpose2d(x, w, Some(b), 2, 1)
    }
}

/// [N, C, H, W] → [N·H·W, C]
pub fn to_rows(g: &Graph, x: Var) -> Result<Var> {
    let s = g.shape(x);
    let t = g.permute(x, &[0, 2, 3, 1])?;
    g.reshape(t, &[s[0] * s[2] * s[3], s[1]])
}

/// [N·H·W, C] → [N, C, H, W]
pub fn from_rows(g: &Graph, x: Var, n: usize, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    let t = g.reshape(x, &[n, h, w, c])?;
    g.permute(t, &[0, 3, 1, 2])
}

/// Sinusoidal features of one scalar per row: [sin(x·ωᵢ), cos(x·ωᵢ)] with
/// geometrically spaced ωᵢ from 1 to `max_freq`.
pub fn sinusoidal_embedding(values: &[f64], dim: usize, max_freq: f64) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| {
            if half == 1 {
                1.0
            } else {
                max_freq.powf(i as f64 / (half - 1) as f64)
            }
        })
        .collect();
    let mut out = Vec::with_capacity(values.len() * dim);
    for &v in values {
        out.extend(freqs.iter().map(|f| (v * f).sin()));
        out.extend(freqs.iter().map(|f| (v * f).cos()));
        out.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    Tensor::from_parts(vec![values.len(), dim], out)
}
