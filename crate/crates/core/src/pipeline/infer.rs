use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, TrainConfig};
use super::model::{latent_scale, Checkpoint, FlowGsNets};
use crate::diffarray::{load_checkpoint, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::flowcore::{euler_sample, CountingField};
use crate::gsfield::compose_sr;
use crate::imaging::{bicubic_resize, sr_side, Image, MAX_SCALE, MIN_SCALE};
use crate::latentnet::MAX_DECODE_SCALE;

/// Networks and read-only weights of a fully trained model.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub nets: FlowGsNets,
    pub generator: ParamStore,
    /// EMA weights of the condition encoder and velocity network.
    pub flow: ParamStore,
}

/// One super-resolved image and its accounting.
#[derive(Clone, Debug)]
pub struct InferOutput {
    pub image: Image,
    pub lr_up: Image,
    /// Velocity-network evaluations.
    pub nfe: usize,
    /// Seconds spent in network evaluation and rendering.
    pub seconds: f64,
    pub warning: Option<String>,
}

impl TrainedModel {
    pub fn new(model: &ModelConfig, ckpt: Checkpoint) -> Result<Self> {
        let flow = ckpt
            .flow
            .ok_or_else(|| Error::Checkpoint("checkpoint has no stage-2 weights; run stage 2 first".into()))?;
        Ok(Self {
            nets: FlowGsNets::new(model)?,
            generator: ckpt.generator,
            flow,
        })
    }

    pub fn load(model: &ModelConfig, path: &Path) -> Result<Self> {
        Self::new(model, Checkpoint::from_store(&load_checkpoint(path)?)?)
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        Self::load(&cfg.model, &cfg.stage2_checkpoint())
    }

    fn check_input(&self, lr: &Image, s: f64) -> Result<()> {
        if !(MIN_SCALE..=MAX_DECODE_SCALE).contains(&s) {
            return Err(Error::invalid(
                "infer",
                format!("scale {s} outside [{MIN_SCALE}, {MAX_DECODE_SCALE}]"),
            ));
        }
        if lr.channels() != self.nets.cfg.image_channels {
            return Err(Error::invalid(
                "infer",
                format!("expected {} channels, got {}", self.nets.cfg.image_channels, lr.channels()),
            ));
        }
        Ok(())
    }

    /// Detail latent for the target grid, integrated from seeded noise; returns
    /// the latent and the number of velocity evaluations.
    fn sample_latent(&self, lr_up: &Image, nfe: usize, seed: u64) -> Result<(Tensor, usize)> {
        let g = Graph::new();
        let cond = self
            .nets
            .condition
            .encode(&g, &self.flow.frozen(), g.constant(lr_up.to_tensor()))?;
        let cond = (*g.value(cond)).clone();
        let (lh, lw) = self.nets.latent_grid(lr_up.dims());
        let z0 = Tensor::randn(
            &[1, self.nets.cfg.latent_channels, lh, lw],
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        let field = CountingField::new(&self.nets.velocity);
        let sample = euler_sample(&field, &self.flow.frozen(), &z0, Some(&cond), nfe)?;
        let sigma = latent_scale(&self.flow);
        Ok((sample.z.map(|v| v * sigma), field.calls()))
    }

    /// Super-resolves `lr` by `s` with `nfe` Euler steps from seeded noise.
    pub fn infer(&self, lr: &Image, s: f64, nfe: usize, seed: u64) -> Result<InferOutput> {
        self.check_input(lr, s)?;
        let warning = (s > MAX_SCALE).then(|| format!("scale {s} extrapolates beyond the trained range [{MIN_SCALE}, {MAX_SCALE}]"));
        let (h, w) = lr.dims();
        let target = (sr_side(h, s), sr_side(w, s));
        let lr_up = bicubic_resize(lr, target.0, target.1)?;

        let start = Instant::now();
        let (z, calls) = self.sample_latent(&lr_up, nfe, seed)?;
        let g = Graph::new();
        let residual = self.nets.render_residual(
            &g,
            &self.generator.frozen(),
            g.constant(z),
            g.constant(lr.to_tensor()),
            s,
            target,
        )?;
        let residual = Image::from_batch_tensor(&g.value(residual))?.remove(0);
        let image = compose_sr(&lr_up, &residual)?;
        Ok(InferOutput {
            image,
            lr_up,
            nfe: calls,
            seconds: start.elapsed().as_secs_f64(),
            warning,
        })
    }

    /// Feature field `[1, C, H, W]` on the target grid, as fed to the renderer.
    pub fn feature_field(&self, lr: &Image, s: f64, nfe: usize, seed: u64) -> Result<Tensor> {
        self.check_input(lr, s)?;
        let (h, w) = lr.dims();
        let target = (sr_side(h, s), sr_side(w, s));
        let lr_up = bicubic_resize(lr, target.0, target.1)?;
        let (z, _) = self.sample_latent(&lr_up, nfe, seed)?;
        let g = Graph::new();
        let field = self.nets.decoder.forward(
            &g,
            &self.generator.frozen(),
            g.constant(z),
            g.constant(lr.to_tensor()),
            s,
            target,
        )?;
        Ok((*g.value(field)).clone())
    }
}
