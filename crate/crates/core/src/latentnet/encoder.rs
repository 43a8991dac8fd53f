use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffarray::{Binding, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2d;

/// Convolutional stack with `log2(factor)` stages of (conv, SiLU, stride-2
/// conv, SiLU) followed by a 1×1 projection.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    pub in_channels: usize,
    pub out_channels: usize,
    pub factor: usize,
    stages: Vec<(Conv2d, Conv2d)>,
    pub head: Conv2d,
}

impl ConvEncoder {
    pub fn new(prefix: &str, in_channels: usize, out_channels: usize, widths: &[usize], factor: usize) -> Result<Self> {
        if !factor.is_power_of_two() || factor < 2 {
            return Err(Error::Config(format!("downsample factor {factor} must be a power of two >= 2")));
        }
        let n = factor.trailing_zeros() as usize;
        if widths.len() < n {
            return Err(Error::Config(format!(
                "factor {factor} needs {n} encoder widths, got {}",
                widths.len()
            )));
        }
        let mut stages = Vec::with_capacity(n);
        let mut cin = in_channels;
        for (i, &w) in widths.iter().take(n).enumerate() {
            stages.push((
                Conv2d::same(format!("{prefix}.s{i}.conv"), cin, w, 3),
                Conv2d::down(format!("{prefix}.s{i}.down"), w, w),
            ));
            cin = w;
        }
        Ok(Self {
            in_channels,
            out_channels,
            factor,
            stages,
            head: Conv2d::same(format!("{prefix}.head"), cin, out_channels, 1),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for (a, b) in &self.stages {
            a.init(store, 1.4, rng);
            b.init(store, 1.4, rng);
        }
        self.head.init(store, 1.0, rng);
    }

    /// Output spatial size for an input side.
    pub fn output_side(&self, side: usize) -> usize {
        side.div_ceil(self.factor)
    }

    pub fn forward(&self, g: &Graph, p: &Binding<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::invalid(
                "encoder",
                format!("expected [N, {}, H, W], got {s:?}", self.in_channels),
            ));
        }
        let mut h = x;
        for (conv, down) in &self.stages {
            h = g.silu(conv.forward(g, p, h)?);
            h = g.silu(down.forward(g, p, h)?);
        }
        self.head.forward(g, p, h)
    }
}

/// How the posterior is turned into a latent.
#[derive(Debug)]
pub enum LatentMode<'r, R: Rng + ?Sized> {
    /// `mean + exp(½·logvar)·ε`.
    Sample(&'r mut R),
    Mean,
}

/// Diagonal Gaussian posterior over the detail latent.
#[derive(Clone, Copy, Debug)]
pub struct Posterior {
    pub mean: Var,
    pub logvar: Var,
    pub z: Var,
}

/// Starting posterior log-variance; a near-deterministic posterior lets the
/// decoder use the latent from the first steps.
pub const INITIAL_LOGVAR: f64 = -6.0;

/// Posterior encoder over the channel concatenation of HR and upsampled LR.
#[derive(Clone, Debug)]
pub struct DetailEncoder {
    pub net: ConvEncoder,
    pub latent_channels: usize,
}

impl DetailEncoder {
    pub fn new(prefix: &str, image_channels: usize, latent_channels: usize, widths: &[usize], factor: usize) -> Result<Self> {
        Ok(Self {
            net: ConvEncoder::new(prefix, 2 * image_channels, 2 * latent_channels, widths, factor)?,
            latent_channels,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.net.init(store, rng);
        if let Some(b) = store.get_mut(&self.net.head.bias_name()) {
            b.data_mut()[self.latent_channels..].fill(INITIAL_LOGVAR);
        }
    }

    pub fn encode<R: Rng + ?Sized>(
        &self,
        g: &Graph,
        p: &Binding<'_>,
        hr: Var,
        lr_up: Var,
        mode: LatentMode<'_, R>,
    ) -> Result<Posterior> {
        if g.shape(hr) != g.shape(lr_up) {
            return Err(Error::shape("encode_detail", &g.shape(hr), &g.shape(lr_up)));
        }
        let out = self.net.forward(g, p, g.concat(&[hr, lr_up], 1)?)?;
        let c = self.latent_channels;
        let mean = g.slice(out, 1, 0, c)?;
        let logvar = g.slice(out, 1, c, 2 * c)?;
        let z = match mode {
            LatentMode::Mean => mean,
            LatentMode::Sample(rng) => reparameterize(g, mean, logvar, rng)?,
        };
        Ok(Posterior { mean, logvar, z })
    }
}

/// Deterministic encoder of the upsampled LR image; same family as the
/// detail encoder with independent weights.
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    pub net: ConvEncoder,
}

impl ConditionEncoder {
    pub fn new(prefix: &str, image_channels: usize, latent_channels: usize, widths: &[usize], factor: usize) -> Result<Self> {
        Ok(Self {
            net: ConvEncoder::new(prefix, image_channels, latent_channels, widths, factor)?,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.net.init(store, rng);
    }

    pub fn encode(&self, g: &Graph, p: &Binding<'_>, lr_up: Var) -> Result<Var> {
        self.net.forward(g, p, lr_up)
    }
}

/// `mean + exp(½·logvar)·ε` with `ε ~ N(0, I)` held constant.
pub fn reparameterize<R: Rng + ?Sized>(g: &Graph, mean: Var, logvar: Var, rng: &mut R) -> Result<Var> {
    let eps = Tensor::from_fn(&g.shape(mean), |_| rng.sample(StandardNormal));
    let std = g.exp(g.scale(logvar, 0.5));
    g.add(mean, g.mul(std, g.constant(eps))?)
}

/// `½·mean(μ² + exp(logvar) − 1 − logvar)`
pub fn kl_divergence(g: &Graph, mean: Var, logvar: Var) -> Result<Var> {
    let t = g.add(g.square(mean), g.exp(logvar))?;
    let t = g.sub(g.add_scalar(t, -1.0), logvar)?;
    Ok(g.scale(g.mean(t), 0.5))
}
