use rand::Rng;

use super::VelocityField;
use crate::diffarray::{Binding, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, Conv2d, ConvTranspose2d, Linear};

const EMBED_DIM: usize = 32;
const EMBED_MAX_FREQ: f64 = 200.0;

/// Concatenated sinusoidal features of `t` and the step size, `[B, 2·EMBED_DIM]`.
fn time_features(t: &[f64], dt: &[f64]) -> Result<Tensor> {
    if t.len() != dt.len() {
        return Err(Error::invalid("velocity", format!("{} times vs {} step sizes", t.len(), dt.len())));
    }
    let et = sinusoidal_embedding(t, EMBED_DIM, EMBED_MAX_FREQ);
    let ed = sinusoidal_embedding(dt, EMBED_DIM, EMBED_MAX_FREQ);
    let mut data = Vec::with_capacity(t.len() * 2 * EMBED_DIM);
    for i in 0..t.len() {
        data.extend_from_slice(&et.data()[i * EMBED_DIM..(i + 1) * EMBED_DIM]);
        data.extend_from_slice(&ed.data()[i * EMBED_DIM..(i + 1) * EMBED_DIM]);
    }
    Tensor::new(&[t.len(), 2 * EMBED_DIM], data)
}

fn check_batch(g: &Graph, z: Var, t: &[f64]) -> Result<usize> {
    let b = g.shape(z)[0];
    if b != t.len() {
        return Err(Error::invalid("velocity", format!("batch {b} but {} times", t.len())));
    }
    Ok(b)
}

/// Velocity field on flat vectors `[B, dim]` with an optional flat condition.
#[derive(Clone, Debug)]
pub struct MlpVelocityNet {
    pub dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    layers: Vec<Linear>,
}

impl MlpVelocityNet {
    pub fn new(prefix: &str, dim: usize, cond_dim: usize, hidden: usize, depth: usize) -> Self {
        let mut layers = Vec::with_capacity(depth + 1);
        let mut din = dim + cond_dim + 2 * EMBED_DIM;
        for i in 0..depth {
            layers.push(Linear::new(format!("{prefix}.l{i}"), din, hidden));
            din = hidden;
        }
        layers.push(Linear::new(format!("{prefix}.out"), din, dim));
        Self {
            dim,
            cond_dim,
            hidden,
            layers,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            l.init(store, if i == last { 0.5 } else { 1.4 }, rng);
        }
    }
}

impl VelocityField for MlpVelocityNet {
    fn velocity(&self, g: &Graph, p: &Binding<'_>, z: Var, t: &[f64], dt: &[f64], cond: Option<Var>) -> Result<Var> {
        check_batch(g, z, t)?;
        let emb = g.constant(time_features(t, dt)?);
        let mut parts = vec![z, emb];
        match (cond, self.cond_dim) {
            (Some(c), d) if d > 0 => parts.push(c),
            (None, 0) => {}
            _ => return Err(Error::invalid("velocity", "condition presence does not match cond_dim")),
        }
        let mut h = g.concat(&parts, 1)?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h)?;
            if i != last {
                h = g.silu(h);
            }
        }
        Ok(h)
    }
}

/// Compact two-level convolutional encoder-decoder with a skip connection.
/// Time and step-size embeddings enter every stage as per-channel offsets;
/// the condition map is concatenated with the input.
#[derive(Clone, Debug)]
pub struct ConvVelocityNet {
    pub channels: usize,
    pub cond_channels: usize,
    pub width: usize,
    embed: Linear,
    in_conv: Conv2d,
    in_emb: Linear,
    in_conv2: Conv2d,
    down: Conv2d,
    down_emb: Linear,
    mid: Conv2d,
    up: ConvTranspose2d,
    up_conv: Conv2d,
    up_emb: Linear,
    out_conv: Conv2d,
}

impl ConvVelocityNet {
    pub fn new(prefix: &str, channels: usize, cond_channels: usize, width: usize) -> Self {
        let n = |s: &str| format!("{prefix}.{s}");
        let e = 2 * EMBED_DIM;
        let w2 = 2 * width;
        Self {
            channels,
            cond_channels,
            width,
            embed: Linear::new(n("embed"), e, e),
            in_conv: Conv2d::same(n("in"), channels + cond_channels, width, 3),
            in_emb: Linear::new(n("in_emb"), e, width),
            in_conv2: Conv2d::same(n("in2"), width, width, 3),
            down: Conv2d::down(n("down"), width, w2),
            down_emb: Linear::new(n("down_emb"), e, w2),
            mid: Conv2d::same(n("mid"), w2, w2, 3),
            up: ConvTranspose2d::new(n("up"), w2, width),
            up_conv: Conv2d::same(n("up_conv"), 2 * width, width, 3),
            up_emb: Linear::new(n("up_emb"), e, width),
            out_conv: Conv2d::same(n("out"), width, channels, 3),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.embed.init(store, 1.0, rng);
        for l in [&self.in_emb, &self.down_emb, &self.up_emb] {
            l.init(store, 0.5, rng);
        }
        for c in [&self.in_conv, &self.in_conv2, &self.down, &self.mid, &self.up_conv] {
            c.init(store, 1.4, rng);
        }
        self.up.init(store, 1.4, rng);
        self.out_conv.init(store, 0.1, rng);
    }

    fn offset(&self, g: &Graph, p: &Binding<'_>, l: &Linear, emb: Var, x: Var) -> Result<Var> {
        let b = g.shape(emb)[0];
        let o = g.reshape(l.forward(g, p, emb)?, &[b, l.dout, 1, 1])?;
        g.add(x, o)
    }
}

impl VelocityField for ConvVelocityNet {
    fn velocity(&self, g: &Graph, p: &Binding<'_>, z: Var, t: &[f64], dt: &[f64], cond: Option<Var>) -> Result<Var> {
        check_batch(g, z, t)?;
        let zs = g.shape(z);
        if zs.len() != 4 || zs[1] != self.channels {
            return Err(Error::invalid(
                "velocity",
                format!("latent must be [B, {}, h, w], got {zs:?}", self.channels),
            ));
        }
        let x = match (cond, self.cond_channels) {
            (Some(c), n) if n > 0 => g.concat(&[z, c], 1)?,
            (None, 0) => z,
            _ => return Err(Error::invalid("velocity", "condition presence does not match cond_channels")),
        };
        let emb = g.silu(self.embed.forward(g, p, g.constant(time_features(t, dt)?))?);

        let h = self.in_conv.forward(g, p, x)?;
        let h = g.silu(self.offset(g, p, &self.in_emb, emb, h)?);
        let skip = g.silu(self.in_conv2.forward(g, p, h)?);

        let d = self.down.forward(g, p, skip)?;
        let d = g.silu(self.offset(g, p, &self.down_emb, emb, d)?);
        let d = g.silu(self.mid.forward(g, p, d)?);

        let mut u = self.up.forward(g, p, d)?;
        // Odd sides round up on the way down; crop back to the skip grid.
        let us = g.shape(u);
        if us[2] != zs[2] {
            u = g.slice(u, 2, 0, zs[2])?;
        }
        if us[3] != zs[3] {
            u = g.slice(u, 3, 0, zs[3])?;
        }
        let u = self.up_conv.forward(g, p, g.concat(&[u, skip], 1)?)?;
        let u = g.silu(self.offset(g, p, &self.up_emb, emb, u)?);
        self.out_conv.forward(g, p, u)
    }
}
