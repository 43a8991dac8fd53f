use std::fmt;

use rand::Rng;

use super::kernel::{covariance_from_scales, gaussian_pdf, Cov2};
use super::splat::{splat, SplatGrid};
use crate::diffarray::{Binding, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::{from_rows, to_rows, Linear};

/// Largest side accepted by the dense reference renderer.
pub const BRUTEFORCE_MAX_SIDE: usize = 64;

/// K learnable kernel candidates shared by every location.
#[derive(Clone, Debug)]
pub struct GaussianBank {
    pub name: String,
    pub kernels: usize,
}

impl GaussianBank {
    pub fn new(name: impl Into<String>, kernels: usize) -> Self {
        Self {
            name: name.into(),
            kernels,
        }
    }

    fn key(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    pub fn log_sx_name(&self) -> String {
        self.key("log_sx")
    }

    pub fn log_sy_name(&self) -> String {
        self.key("log_sy")
    }

    pub fn theta_name(&self) -> String {
        self.key("theta")
    }

    pub fn opacity_name(&self) -> String {
        self.key("opacity")
    }

    /// Scales log-uniform in [0.3, 1.5] px, angles uniform in [0, π), opacity 0.5.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let k = self.kernels;
        let (lo, hi) = (0.3f64.ln(), 1.5f64.ln());
        store.insert(self.log_sx_name(), Tensor::from_fn(&[k], |_| rng.random_range(lo..hi)));
        store.insert(self.log_sy_name(), Tensor::from_fn(&[k], |_| rng.random_range(lo..hi)));
        store.insert(
            self.theta_name(),
            Tensor::from_fn(&[k], |_| rng.random_range(0.0..std::f64::consts::PI)),
        );
        store.insert(self.opacity_name(), Tensor::zeros(&[k]));
    }

    /// `[K, 4]` table of (Σxx, Σxy, Σyy, opacity).
    pub fn table(&self, g: &Graph, p: &Binding<'_>) -> Result<Var> {
        let cov = covariance_from_scales(
            g,
            g.param(p, &self.log_sx_name())?,
            g.param(p, &self.log_sy_name())?,
            g.param(p, &self.theta_name())?,
        )?;
        let o = g.sigmoid(g.reshape(g.param(p, &self.opacity_name())?, &[self.kernels, 1])?);
        g.concat(&[cov, o], 1)
    }

    /// Realised candidates `(Σ̃, o)` evaluated in plain arithmetic.
    pub fn realize(&self, store: &ParamStore) -> Result<Vec<(Cov2, f64)>> {
        let get = |n: String| store.get(&n).cloned().ok_or(Error::UnknownParameter(n));
        let (sx, sy, th, op) = (
            get(self.log_sx_name())?,
            get(self.log_sy_name())?,
            get(self.theta_name())?,
            get(self.opacity_name())?,
        );
        Ok((0..self.kernels)
            .map(|k| {
                let cov = Cov2::from_scales(sx.data()[k].exp(), sy.data()[k].exp(), th.data()[k]);
                (cov, 1.0 / (1.0 + (-op.data()[k]).exp()))
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderConfig {
    pub kernels: usize,
    /// Feature-field channels.
    pub channels: usize,
    /// Image channels of the predicted residual.
    pub out_channels: usize,
    pub window: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            kernels: 100,
            channels: 16,
            out_channels: 3,
            window: 7,
        }
    }
}

/// Per-location primitive with its centre on the integer pixel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub mean: [f64; 2],
    pub cov: Cov2,
    pub opacity: f64,
    pub feature: Vec<f64>,
}

/// One term of the aggregation at a query.
#[derive(Clone, Debug, PartialEq)]
pub struct Contribution {
    pub x: usize,
    pub y: usize,
    pub response: f64,
    pub opacity: f64,
    /// L2 norm of `response · opacity · feature`.
    pub magnitude: f64,
}

impl fmt::Display for Contribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({:>3},{:>3}) response {:.6e} opacity {:.4} magnitude {:.6e}",
            self.x, self.y, self.response, self.opacity, self.magnitude
        )
    }
}

/// Kernel bank, assignment head, windowed splatting and residual head.
#[derive(Clone, Debug)]
pub struct GaussianRenderer {
    pub cfg: RenderConfig,
    pub bank: GaussianBank,
    pub head: Linear,
    pub res_hidden: Linear,
    pub res_out: Linear,
}

impl GaussianRenderer {
    pub fn new(prefix: &str, cfg: RenderConfig) -> Self {
        Self {
            cfg,
            bank: GaussianBank::new(format!("{prefix}.bank"), cfg.kernels),
            head: Linear::new(format!("{prefix}.assign"), cfg.channels, cfg.kernels),
            res_hidden: Linear::new(format!("{prefix}.res1"), cfg.channels, cfg.channels),
            res_out: Linear::new(format!("{prefix}.res2"), cfg.channels, cfg.out_channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.bank.init(store, rng);
        self.head.init(store, 1.0, rng);
        self.res_hidden.init(store, 1.0, rng);
        self.res_out.init(store, 0.1, rng);
    }

    fn check_field(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.cfg.channels {
            return Err(Error::invalid(
                "render",
                format!("field must be [N, {}, H, W], got {shape:?}", self.cfg.channels),
            ));
        }
        Ok(())
    }

    /// Assignment weights `[rows, K]` for field rows `[rows, C]`.
    pub fn assignment(&self, g: &Graph, p: &Binding<'_>, rows: Var) -> Result<Var> {
        Ok(g.softmax(self.head.forward(g, p, rows)?))
    }

    /// Aggregated features `[N·H·W, C]` for a field `[N, C, H, W]`.
    pub fn aggregate(&self, g: &Graph, p: &Binding<'_>, field: Var) -> Result<Var> {
        let s = g.shape(field);
        self.check_field(&s)?;
        let grid = SplatGrid::new(s[0], s[2], s[3], self.cfg.window)?;
        let rows = to_rows(g, field)?;
        let pi = self.assignment(g, p, rows)?;
        let mixed = g.matmul(pi, self.bank.table(g, p)?)?;
        let cov = g.slice(mixed, 1, 0, 3)?;
        let opacity = g.slice(mixed, 1, 3, 4)?;
        let contrib = g.mul(rows, opacity)?;
        splat(g, grid, cov, contrib)
    }

    /// Residual head applied per row.
    pub fn residual_head(&self, g: &Graph, p: &Binding<'_>, rows: Var) -> Result<Var> {
        let h = g.silu(self.res_hidden.forward(g, p, rows)?);
        self.res_out.forward(g, p, h)
    }

    /// Residual image `[N, C_in, H, W]` on the field's grid.
    pub fn forward(&self, g: &Graph, p: &Binding<'_>, field: Var) -> Result<Var> {
        let s = g.shape(field);
        let agg = self.aggregate(g, p, field)?;
        let out = self.residual_head(g, p, agg)?;
        from_rows(g, out, s[0], s[2], s[3])
    }

    /// Mixed primitives of image `n` of a field, computed without the tape.
    pub fn primitives(&self, store: &ParamStore, field: &Tensor, n: usize) -> Result<Vec<Primitive>> {
        self.check_field(field.shape())?;
        let (c, h, w) = (field.shape()[1], field.shape()[2], field.shape()[3]);
        if n >= field.shape()[0] {
            return Err(Error::invalid("primitives", format!("image {n} out of range")));
        }
        let bank = self.bank.realize(store)?;
        let covs: Vec<Cov2> = bank.iter().map(|b| b.0).collect();
        let opac: Vec<f64> = bank.iter().map(|b| b.1).collect();
        let wt = store
            .get(&self.head.weight_name())
            .ok_or_else(|| Error::UnknownParameter(self.head.weight_name()))?;
        let bias = store
            .get(&self.head.bias_name())
            .ok_or_else(|| Error::UnknownParameter(self.head.bias_name()))?;
        let k = self.cfg.kernels;
        let plane = &field.data()[n * c * h * w..(n + 1) * c * h * w];
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let feature: Vec<f64> = (0..c).map(|ch| plane[(ch * h + y) * w + x]).collect();
                let mut logits: Vec<f64> = (0..k)
                    .map(|j| bias.data()[j] + (0..c).map(|i| feature[i] * wt.data()[i * k + j]).sum::<f64>())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                logits.iter_mut().for_each(|l| *l = (*l - m).exp());
                let z: f64 = logits.iter().sum();
                let pi: Vec<f64> = logits.iter().map(|l| l / z).collect();
                out.push(Primitive {
                    mean: [x as f64, y as f64],
                    cov: Cov2::mix(&pi, &covs),
                    opacity: pi.iter().zip(&opac).map(|(a, b)| a * b).sum(),
                    feature,
                });
            }
        }
        Ok(out)
    }

    /// Dense aggregation over every primitive for every pixel of an `h × w`
    /// grid, visiting primitives in `order` (identity when `None`).
    pub fn aggregate_dense(prims: &[Primitive], h: usize, w: usize, order: Option<&[usize]>) -> Result<Vec<Vec<f64>>> {
        let c = prims.first().map_or(0, |p| p.feature.len());
        let ident: Vec<usize> = (0..prims.len()).collect();
        let order = order.unwrap_or(&ident);
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut acc = vec![0.0; c];
                for &i in order {
                    let p = &prims[i];
                    let f = gaussian_pdf([x as f64, y as f64], p.mean, p.cov)?;
                    for (a, v) in acc.iter_mut().zip(&p.feature) {
                        *a += f * p.opacity * v;
                    }
                }
                out.push(acc);
            }
        }
        Ok(out)
    }

    /// Residual head evaluated on one aggregated feature vector.
    pub fn apply_residual_head(&self, store: &ParamStore, v: &[f64]) -> Result<Vec<f64>> {
        let dense = |l: &Linear, x: &[f64]| -> Result<Vec<f64>> {
            let w = store.get(&l.weight_name()).ok_or_else(|| Error::UnknownParameter(l.weight_name()))?;
            let b = store.get(&l.bias_name()).ok_or_else(|| Error::UnknownParameter(l.bias_name()))?;
            Ok((0..l.dout)
                .map(|j| b.data()[j] + (0..l.din).map(|i| x[i] * w.data()[i * l.dout + j]).sum::<f64>())
                .collect())
        };
        let h: Vec<f64> = dense(&self.res_hidden, v)?
            .into_iter()
            .map(|a| a / (1.0 + (-a).exp()))
            .collect();
        dense(&self.res_out, &h)
    }

    /// Unwindowed reference renderer: every primitive contributes to every
    /// query. Limited to small grids.
    pub fn render_bruteforce(&self, store: &ParamStore, field: &Tensor) -> Result<Tensor> {
        self.check_field(field.shape())?;
        let (n, h, w) = (field.shape()[0], field.shape()[2], field.shape()[3]);
        if h > BRUTEFORCE_MAX_SIDE || w > BRUTEFORCE_MAX_SIDE {
            return Err(Error::invalid(
                "render_bruteforce",
                format!("{h}x{w} grid is too large; crop to at most {BRUTEFORCE_MAX_SIDE}x{BRUTEFORCE_MAX_SIDE}"),
            ));
        }
        let co = self.cfg.out_channels;
        let mut out = vec![0.0; n * co * h * w];
        for img in 0..n {
            let prims = self.primitives(store, field, img)?;
            let agg = Self::aggregate_dense(&prims, h, w, None)?;
            for (q, v) in agg.iter().enumerate() {
                let r = self.apply_residual_head(store, v)?;
                for (ch, val) in r.into_iter().enumerate() {
                    out[(img * co + ch) * h * w + q] = val;
                }
            }
        }
        Tensor::new(&[n, co, h, w], out)
    }

    /// The `k` largest in-window contributions at pixel `(x, y)` of image `n`.
    pub fn top_contributors(
        &self,
        store: &ParamStore,
        field: &Tensor,
        n: usize,
        (x, y): (usize, usize),
        k: usize,
    ) -> Result<Vec<Contribution>> {
        let (h, w) = (field.shape()[2], field.shape()[3]);
        if x >= w || y >= h {
            return Err(Error::invalid("top_contributors", format!("query ({x},{y}) outside {w}x{h}")));
        }
        let prims = self.primitives(store, field, n)?;
        let r = self.cfg.window / 2;
        let mut list = Vec::new();
        for py in y.saturating_sub(r)..=(y + r).min(h - 1) {
            for px in x.saturating_sub(r)..=(x + r).min(w - 1) {
                let p = &prims[py * w + px];
                let response = gaussian_pdf([x as f64, y as f64], p.mean, p.cov)?;
                let norm = p.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
                list.push(Contribution {
                    x: px,
                    y: py,
                    response,
                    opacity: p.opacity,
                    magnitude: response * p.opacity * norm,
                });
            }
        }
        list.sort_by(|a, b| b.magnitude.total_cmp(&a.magnitude));
        list.truncate(k);
        Ok(list)
    }
}

/// Final output `lr_up + ΔI`, clamped to [0, 1].
pub fn compose_sr(lr_up: &Image, residual: &Image) -> Result<Image> {
    if !lr_up.same_shape(residual) {
        return Err(Error::invalid(
            "compose_sr",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                lr_up.channels(),
                lr_up.height(),
                lr_up.width(),
                residual.channels(),
                residual.height(),
                residual.width()
            ),
        ));
    }
    let data = lr_up.data().iter().zip(residual.data()).map(|(a, b)| a + b).collect();
    Ok(Image::new(lr_up.height(), lr_up.width(), lr_up.channels(), data)?.clamped())
}

/// Unclamped `lr_up + ΔI` on the tape, used inside training losses.
pub fn compose_sr_graph(g: &Graph, lr_up: Var, residual: Var) -> Result<Var> {
    if g.shape(lr_up) != g.shape(residual) {
        return Err(Error::shape("compose_sr", &g.shape(lr_up), &g.shape(residual)));
    }
    g.add(lr_up, residual)
}
