use rand::Rng;

use crate::diffarray::{Binding, Graph, ParamStore, ResizeMode, Var};
use crate::error::{Error, Result};
use crate::diffarray::Tensor;
use crate::imaging::{bicubic_resize, Image, MIN_SCALE};
use crate::nn::{sinusoidal_embedding, Conv2d, Linear};

/// Largest scale the decoder accepts (training covers up to 8).
pub const MAX_DECODE_SCALE: f64 = 16.0;
const SCALE_EMBED: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub latent_channels: usize,
    pub image_channels: usize,
    /// Working width of the latent and LR branches.
    pub width: usize,
    /// Output feature-field channels.
    pub field_channels: usize,
    pub blocks: usize,
}

/// Scale-aware fusion of a detail latent with LR features onto the target grid.
#[derive(Clone, Debug)]
pub struct FusionDecoder {
    pub cfg: DecoderConfig,
    lat_in: Conv2d,
    lat_out: Conv2d,
    lr_in: Conv2d,
    lr_out: Conv2d,
    merge: Conv2d,
    skip: Conv2d,
    scale_hidden: Linear,
    scale_out: Linear,
    blocks: Vec<(Conv2d, Conv2d)>,
}

impl FusionDecoder {
    pub fn new(prefix: &str, cfg: DecoderConfig) -> Self {
        let n = |s: String| format!("{prefix}.{s}");
        let (w, c) = (cfg.width, cfg.field_channels);
        Self {
            cfg,
            lat_in: Conv2d::same(n("lat_in".into()), cfg.latent_channels, w, 3),
            lat_out: Conv2d::same(n("lat_out".into()), w, w, 3),
            lr_in: Conv2d::same(n("lr_in".into()), cfg.image_channels, w, 3),
            lr_out: Conv2d::same(n("lr_out".into()), w, w, 3),
            merge: Conv2d::same(n("merge".into()), 2 * w, c, 3),
            skip: Conv2d::same(n("skip".into()), cfg.image_channels, c, 3),
            scale_hidden: Linear::new(n("scale1".into()), SCALE_EMBED, 32),
            scale_out: Linear::new(n("scale2".into()), 32, 2 * c * cfg.blocks),
            blocks: (0..cfg.blocks)
                .map(|i| {
                    (
                        Conv2d::same(n(format!("b{i}.c1")), c, c, 3),
                        Conv2d::same(n(format!("b{i}.c2")), c, c, 3),
                    )
                })
                .collect(),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for c in [&self.lat_in, &self.lat_out, &self.lr_in, &self.lr_out, &self.merge, &self.skip] {
            c.init(store, 1.4, rng);
        }
        self.scale_hidden.init(store, 1.0, rng);
        self.scale_out.init(store, 0.5, rng);
        for (a, b) in &self.blocks {
            a.init(store, 1.4, rng);
            b.init(store, 0.5, rng);
        }
    }

    /// Per-channel (scale, shift) pairs for every block, `[N, 2·C·blocks]`.
    fn modulation(&self, g: &Graph, p: &Binding<'_>, n: usize, s: f64) -> Result<Var> {
        let emb = sinusoidal_embedding(&vec![s / 8.0; n], SCALE_EMBED, 16.0);
        let h = g.silu(self.scale_hidden.forward(g, p, g.constant(emb))?);
        self.scale_out.forward(g, p, h)
    }

    /// Feature field `[N, C, out_h, out_w]` from a latent `[N, C_lat, h, w]`,
    /// the LR image `[N, C_in, H_lr, W_lr]` and the scale `s`.
    pub fn forward(
        &self,
        g: &Graph,
        p: &Binding<'_>,
        latent: Var,
        lr: Var,
        s: f64,
        (out_h, out_w): (usize, usize),
    ) -> Result<Var> {
        if !(MIN_SCALE..=MAX_DECODE_SCALE).contains(&s) {
            return Err(Error::invalid(
                "fuse_features",
                format!("scale {s} outside [{MIN_SCALE}, {MAX_DECODE_SCALE}]"),
            ));
        }
        let (ls, rs) = (g.shape(latent), g.shape(lr));
        if ls.len() != 4 || rs.len() != 4 || ls[0] != rs[0] {
            return Err(Error::shape("fuse_features", &ls, &rs));
        }
        let (n, lh, lw) = (rs[0], rs[2], rs[3]);

        let z = g.silu(self.lat_in.forward(g, p, latent)?);
        let z = g.resize(z, lh, lw, ResizeMode::Bilinear)?;
        let z = g.silu(self.lat_out.forward(g, p, z)?);
        let x = g.silu(self.lr_in.forward(g, p, lr)?);
        let x = g.silu(self.lr_out.forward(g, p, x)?);
        let f = self.merge.forward(g, p, g.concat(&[z, x], 1)?)?;
        let mut f = g.resize(f, out_h, out_w, ResizeMode::Bilinear)?;
        let up = g.constant(bicubic_batch(&g.value(lr), out_h, out_w)?);
        f = g.add(f, self.skip.forward(g, p, up)?)?;

        let c = self.cfg.field_channels;
        let mods = self.modulation(g, p, n, s)?;
        for (i, (c1, c2)) in self.blocks.iter().enumerate() {
            let scale = g.reshape(g.slice(mods, 1, 2 * c * i, 2 * c * i + c)?, &[n, c, 1, 1])?;
            let shift = g.reshape(g.slice(mods, 1, 2 * c * i + c, 2 * c * (i + 1))?, &[n, c, 1, 1])?;
            let h = c1.forward(g, p, g.silu(f))?;
            let h = g.add(g.mul(h, g.add_scalar(scale, 1.0))?, shift)?;
            let h = c2.forward(g, p, g.silu(h))?;
            f = g.add(f, h)?;
        }
        Ok(f)
    }
}

/// Bicubic resize of every image in a `[N, C, H, W]` batch; the LR image is
/// an input, so the skip branch carries no gradient into it.
fn bicubic_batch(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let up = Image::from_batch_tensor(x)?
        .iter()
        .map(|img| bicubic_resize(img, h, w))
        .collect::<Result<Vec<_>>>()?;
    Image::batch_tensor(&up.iter().collect::<Vec<_>>())
}
