use rand::Rng;

use super::config::ModelConfig;
use crate::diffarray::{Binding, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::flowcore::ConvVelocityNet;
use crate::gsfield::{GaussianRenderer, RenderConfig};
use crate::latentnet::{ConditionEncoder, DecoderConfig, DetailEncoder, FusionDecoder};
use crate::nn::Conv2d;

/// Parameter-name prefixes of the stage-1 (generator) networks.
pub const GENERATOR_PREFIXES: [&str; 3] = ["enc.", "dec.", "render."];
/// Parameter-name prefixes of the stage-2 (flow) networks.
pub const FLOW_PREFIXES: [&str; 2] = ["cond.", "vel."];
pub const DISCRIMINATOR_PREFIX: &str = "disc.";
/// Flow-store entry holding the latent standard deviation; the flow runs on
/// latents divided by it.
pub const LATENT_SCALE_PARAM: &str = "vel.latent_scale";

/// Patch classifier of stride-2 convolutions ending in a per-patch logit.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    layers: Vec<Conv2d>,
}

impl PatchDiscriminator {
    pub fn new(prefix: &str, channels: usize, widths: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(widths.len() + 1);
        let mut cin = channels;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Conv2d::down(format!("{prefix}.l{i}"), cin, w));
            cin = w;
        }
        layers.push(Conv2d::down(format!("{prefix}.logit"), cin, 1));
        Self { layers }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in &self.layers {
            l.init(store, 1.0, rng);
        }
    }

    /// Logits `[N, 1, h, w]`.
    pub fn forward(&self, g: &Graph, p: &Binding<'_>, x: Var) -> Result<Var> {
        let (last, hidden) = self.layers.split_last().expect("at least one layer");
        let mut h = x;
        for l in hidden {
            h = g.silu(l.forward(g, p, h)?);
        }
        last.forward(g, p, h)
    }
}

/// All networks of the model. Parameters live in separate stores per role.
#[derive(Clone, Debug)]
pub struct FlowGsNets {
    pub cfg: ModelConfig,
    pub encoder: DetailEncoder,
    pub condition: ConditionEncoder,
    pub decoder: FusionDecoder,
    pub renderer: GaussianRenderer,
    pub velocity: ConvVelocityNet,
    pub discriminator: PatchDiscriminator,
}

impl FlowGsNets {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.image_channels;
        Ok(Self {
            cfg: cfg.clone(),
            encoder: DetailEncoder::new("enc", c, cfg.latent_channels, &cfg.encoder_widths, cfg.downsample)?,
            condition: ConditionEncoder::new("cond", c, cfg.latent_channels, &cfg.encoder_widths, cfg.downsample)?,
            decoder: FusionDecoder::new(
                "dec",
                DecoderConfig {
                    latent_channels: cfg.latent_channels,
                    image_channels: c,
                    width: cfg.decoder_width,
                    field_channels: cfg.field_channels,
                    blocks: cfg.decoder_blocks,
                },
            ),
            renderer: GaussianRenderer::new(
                "render",
                RenderConfig {
                    kernels: cfg.kernels,
                    channels: cfg.field_channels,
                    out_channels: c,
                    window: cfg.window,
                },
            ),
            velocity: ConvVelocityNet::new("vel", cfg.latent_channels, cfg.latent_channels, cfg.velocity_width),
            discriminator: PatchDiscriminator::new("disc", c, &cfg.discriminator_widths),
        })
    }

    pub fn init_generator<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut s = ParamStore::new();
        self.encoder.init(&mut s, rng);
        self.decoder.init(&mut s, rng);
        self.renderer.init(&mut s, rng);
        s
    }

    pub fn init_flow<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut s = ParamStore::new();
        self.condition.init(&mut s, rng);
        self.velocity.init(&mut s, rng);
        s
    }

    pub fn init_discriminator<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut s = ParamStore::new();
        self.discriminator.init(&mut s, rng);
        s
    }

    /// Latent grid for a target grid.
    pub fn latent_grid(&self, (h, w): (usize, usize)) -> (usize, usize) {
        (h.div_ceil(self.cfg.downsample), w.div_ceil(self.cfg.downsample))
    }

    /// Residual image on the target grid from a latent, the LR batch and `s`.
    pub fn render_residual(
        &self,
        g: &Graph,
        p: &Binding<'_>,
        latent: Var,
        lr: Var,
        s: f64,
        target: (usize, usize),
    ) -> Result<Var> {
        let field = self.decoder.forward(g, p, latent, lr, s, target)?;
        self.renderer.forward(g, p, field)
    }
}

fn with_prefixes(store: &ParamStore, prefixes: &[&str]) -> ParamStore {
    let mut out = ParamStore::new();
    for p in prefixes {
        out.merge(&store.subset(p));
    }
    out
}

/// Latent standard deviation stored in a flow store (1 if absent).
pub fn latent_scale(flow: &ParamStore) -> f64 {
    flow.get(LATENT_SCALE_PARAM).map_or(1.0, |t| t.data()[0])
}

/// Generator, flow and flow-EMA parameters of a trained model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub generator: ParamStore,
    pub flow: Option<ParamStore>,
}

impl Checkpoint {
    /// EMA flow weights are stored under the `ema.` prefix.
    pub fn to_store(&self) -> ParamStore {
        let mut s = self.generator.clone();
        if let Some(f) = &self.flow {
            for (name, t) in f.iter() {
                s.insert(format!("ema.{name}"), t.clone());
            }
        }
        s
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let generator = with_prefixes(store, &GENERATOR_PREFIXES);
        if generator.is_empty() {
            return Err(Error::Checkpoint("no stage-1 parameters in checkpoint".into()));
        }
        let ema = store.subset("ema.");
        let flow = if ema.is_empty() {
            None
        } else {
            let mut f = ParamStore::new();
            for (name, t) in ema.iter() {
                f.insert(name.trim_start_matches("ema."), t.clone());
            }
            Some(f)
        };
        Ok(Self { generator, flow })
    }
}
