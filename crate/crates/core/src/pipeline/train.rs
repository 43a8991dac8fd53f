use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{LossConfig, TrainConfig};
use super::data::{sample_batch_scale, Dataset, TrainBatch};
use super::losses::{discriminator_adversarial, generator_adversarial, l1_loss, perceptual_proxy};
use super::model::{latent_scale, Checkpoint, FlowGsNets, GENERATOR_PREFIXES, LATENT_SCALE_PARAM};
use crate::diffarray::{
    load_checkpoint, save_checkpoint, Adam, AdamConfig, Binding, EmaShadow, Graph, ParamStore, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::flowcore::{FlowBatch, FlowObjective};
use crate::gsfield::compose_sr_graph;
use crate::imaging::Image;
use crate::latentnet::{kl_divergence, LatentMode};

/// Logged components of one stage-1 step.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Report {
    pub step: usize,
    pub scale: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub kl: f64,
    /// Adversarial weight in effect (zero during discriminator warmup).
    pub adv_weight: f64,
    pub total: f64,
    pub discriminator: Option<f64>,
    pub lr: f64,
}

impl Stage1Report {
    /// Weighted sum of the logged components.
    pub fn recombine(&self, w: &LossConfig) -> f64 {
        self.l1 + w.perceptual * self.perceptual + self.adv_weight * self.adversarial + w.kl * self.kl
    }
}

impl fmt::Display for Stage1Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage=1 step={} scale={:.4} l1={:.8e} proxy={:.8e} adv={:.8e} kl={:.8e} adv_w={} total={:.8e} disc={} lr={:.3e}",
            self.step,
            self.scale,
            self.l1,
            self.perceptual,
            self.adversarial,
            self.kl,
            self.adv_weight,
            self.total,
            self.discriminator.map_or("-".to_string(), |d| format!("{d:.6e}")),
            self.lr
        )
    }
}

/// Logged components of one stage-2 step.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Report {
    pub step: usize,
    pub scale: f64,
    pub fm: f64,
    pub shortcut: Option<f64>,
    pub total: f64,
    pub fm_count: usize,
    pub shortcut_count: usize,
    pub lr: f64,
    /// Names of parameters that received gradients.
    pub updated: Vec<String>,
}

impl fmt::Display for Stage2Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "stage=2 step={} scale={:.4} fm={:.8e} shortcut={} n_fm={} n_sc={} total={:.8e} lr={:.3e}",
            self.step,
            self.scale,
            self.fm,
            self.shortcut.map_or("-".to_string(), |s| format!("{s:.8e}")),
            self.fm_count,
            self.shortcut_count,
            self.total,
            self.lr
        )
    }
}

/// Append-only training log.
pub struct TrainLog {
    file: Option<File>,
}

impl TrainLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { file: Some(file) })
    }

    pub fn disabled() -> Self {
        Self { file: None }
    }

    pub fn line(&mut self, line: impl fmt::Display) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{line}").map_err(|e| Error::io(PathBuf::from("train.log"), e))?;
        }
        Ok(())
    }
}

fn adam(lr: f64, warmup: u64) -> Adam {
    Adam::new(AdamConfig::new(lr).with_warmup(warmup))
}

/// Parameter bindings of the stage-1 loss. The encoder may be bound apart
/// from the decoder and renderer.
#[derive(Clone, Copy)]
pub struct Stage1Bindings<'a, 'b> {
    pub encoder: &'a Binding<'b>,
    pub decoder: &'a Binding<'b>,
    pub discriminator: &'a Binding<'b>,
}

/// Graph nodes of the stage-1 objective.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Terms {
    pub sr: Var,
    pub l1: Var,
    pub proxy: Var,
    pub adv: Var,
    pub kl: Var,
    pub total: Var,
}

/// `total = l1 + λp·proxy + adv_weight·adv + λkl·kl` for one batch rendered on its HR grid.
#[allow(clippy::too_many_arguments)]
pub fn stage1_terms<R: Rng + ?Sized>(
    g: &Graph,
    nets: &FlowGsNets,
    p: Stage1Bindings<'_, '_>,
    batch: &TrainBatch,
    mode: LatentMode<'_, R>,
    weights: &LossConfig,
    adv_weight: f64,
) -> Result<Stage1Terms> {
    let hr = g.constant(batch.hr.clone());
    let lr_up = g.constant(batch.lr_up.clone());
    let lr = g.constant(batch.lr.clone());
    let post = nets.encoder.encode(g, p.encoder, hr, lr_up, mode)?;
    let residual = nets.render_residual(g, p.decoder, post.z, lr, batch.scale, batch.hr_grid())?;
    let sr = compose_sr_graph(g, lr_up, residual)?;
    let l1 = l1_loss(g, sr, hr)?;
    let proxy = perceptual_proxy(g, sr, hr)?;
    let kl = kl_divergence(g, post.mean, post.logvar)?;
    let adv = generator_adversarial(g, nets.discriminator.forward(g, p.discriminator, sr)?);
    let mut total = g.add(l1, g.scale(proxy, weights.perceptual))?;
    total = g.add(total, g.scale(adv, adv_weight))?;
    total = g.add(total, g.scale(kl, weights.kl))?;
    Ok(Stage1Terms {
        sr,
        l1,
        proxy,
        adv,
        kl,
        total,
    })
}

/// Encoder, fusion decoder and renderer trained with the composite loss,
/// alternating with a patch discriminator.
pub struct Stage1Trainer {
    pub nets: FlowGsNets,
    pub generator: ParamStore,
    pub discriminator: ParamStore,
    pub weights: LossConfig,
    opt_g: Adam,
    opt_d: Adam,
    warmup_steps: usize,
    step: usize,
    rng: ChaCha8Rng,
}

impl Stage1Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let nets = FlowGsNets::new(&cfg.model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = nets.init_generator(&mut rng);
        let discriminator = nets.init_discriminator(&mut rng);
        Ok(Self {
            nets,
            generator,
            discriminator,
            weights: cfg.loss.clone(),
            opt_g: adam(cfg.stage1.lr, cfg.stage1.warmup_steps),
            opt_d: adam(cfg.loss.disc_lr, 0),
            warmup_steps: (cfg.loss.disc_warmup * cfg.stage1.total_steps() as f64).round() as usize,
            step: 0,
            rng,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn adv_weight(&self) -> f64 {
        if self.step < self.warmup_steps {
            0.0
        } else {
            self.weights.adversarial
        }
    }

    /// One generator update followed by one discriminator update.
    pub fn step(&mut self, batch: &TrainBatch) -> Result<Stage1Report> {
        let g = Graph::new();
        let p = self.generator.trainable();
        let adv_weight = self.adv_weight();
        let w = &self.weights;
        let terms = stage1_terms(
            &g,
            &self.nets,
            Stage1Bindings {
                encoder: &p,
                decoder: &p,
                discriminator: &self.discriminator.frozen(),
            },
            batch,
            LatentMode::Sample(&mut self.rng),
            w,
            adv_weight,
        )?;
        let Stage1Terms {
            sr,
            l1,
            proxy,
            adv,
            kl,
            total,
        } = terms;

        let item = |v| g.value(v).data()[0];
        let mut report = Stage1Report {
            step: self.step,
            scale: batch.scale,
            l1: item(l1),
            perceptual: item(proxy),
            adversarial: item(adv),
            kl: item(kl),
            adv_weight,
            total: item(total),
            discriminator: None,
            lr: self.opt_g.current_lr(),
        };
        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                what: format!(
                    "stage-1 loss at step {} (l1 {}, proxy {}, adv {}, kl {})",
                    self.step, report.l1, report.perceptual, report.adversarial, report.kl
                ),
            });
        }
        g.backward(total)?;
        self.opt_g.step(&mut self.generator, &g.param_grads())?;

        if w.adversarial > 0.0 {
            let sr_value = (*g.value(sr)).clone();
            let d = Graph::new();
            let dp = self.discriminator.trainable();
            let real = self.nets.discriminator.forward(&d, &dp, d.constant(batch.hr.clone()))?;
            let fake = self.nets.discriminator.forward(&d, &dp, d.constant(sr_value))?;
            let loss = discriminator_adversarial(&d, real, fake)?;
            report.discriminator = Some(d.value(loss).data()[0]);
            d.backward(loss)?;
            self.opt_d.step(&mut self.discriminator, &d.param_grads())?;
        }
        self.step += 1;
        Ok(report)
    }

    /// Validation loss `l1 + proxy` with posterior-mean latents at scales 2 and 4.
    pub fn validate(&self, images: &[Image]) -> Result<f64> {
        validation_loss(&self.nets, &self.generator, images)
    }
}

/// Scales used for checkpoint selection.
pub const VALIDATION_SCALES: [f64; 2] = [2.0, 4.0];

pub fn validation_loss(nets: &FlowGsNets, generator: &ParamStore, images: &[Image]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::invalid("validate", "empty validation set"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for &s in &VALIDATION_SCALES {
        for chunk in images.chunks(8) {
            let batch = TrainBatch::from_images(&chunk.iter().collect::<Vec<_>>(), s)?;
            let g = Graph::new();
            let p = generator.frozen();
            let hr = g.constant(batch.hr.clone());
            let lr_up = g.constant(batch.lr_up.clone());
            let post = nets
                .encoder
                .encode::<ChaCha8Rng>(&g, &p, hr, lr_up, LatentMode::Mean)?;
            let residual = nets.render_residual(&g, &p, post.z, g.constant(batch.lr.clone()), s, batch.hr_grid())?;
            let sr = compose_sr_graph(&g, lr_up, residual)?;
            let l = g.add(l1_loss(&g, sr, hr)?, perceptual_proxy(&g, sr, hr)?)?;
            total += g.value(l).data()[0] * chunk.len() as f64;
            count += chunk.len();
        }
    }
    Ok(total / count as f64)
}

/// Condition encoder and velocity network trained on frozen stage-1 latents.
pub struct Stage2Trainer {
    pub nets: FlowGsNets,
    pub generator: ParamStore,
    pub flow: ParamStore,
    pub ema: EmaShadow,
    pub objective: FlowObjective,
    opt: Adam,
    step: usize,
    rng: ChaCha8Rng,
}

impl Stage2Trainer {
    /// Fresh flow networks over a frozen generator. The latent scale is
    /// measured on `calibration` (HR images) across the training scale range.
    pub fn new(cfg: &TrainConfig, generator: ParamStore, calibration: &[Image]) -> Result<Self> {
        let nets = FlowGsNets::new(&cfg.model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let mut flow = nets.init_flow(&mut rng);
        let sigma = latent_std(&nets, &generator, calibration, cfg.scale_min, cfg.scale_max)?;
        flow.insert(LATENT_SCALE_PARAM, Tensor::scalar(sigma));
        let ema = EmaShadow::new(cfg.flow.ema_decay, &flow)?;
        Ok(Self {
            nets,
            generator,
            flow,
            ema,
            objective: FlowObjective {
                shortcut: cfg.flow.shortcut,
                levels: cfg.flow.levels,
            },
            opt: adam(cfg.stage2.lr, cfg.stage2.warmup_steps),
            step: 0,
            rng,
        })
    }

    /// Stage 2 resumes from the stage-1 checkpoint named by the config.
    pub fn from_stage1(cfg: &TrainConfig, calibration: &[Image]) -> Result<Self> {
        let path = cfg.stage1_checkpoint();
        if !path.exists() {
            return Err(Error::Checkpoint(format!(
                "stage 2 needs a stage-1 checkpoint at {}; run stage 1 first",
                path.display()
            )));
        }
        let ckpt = Checkpoint::from_store(&load_checkpoint(&path)?)?;
        Self::new(cfg, ckpt.generator, calibration)
    }

    pub fn latent_scale(&self) -> f64 {
        latent_scale(&self.flow)
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Posterior-mean detail latents of a batch under the frozen encoder,
    /// divided by the latent scale.
    pub fn targets(&self, batch: &TrainBatch) -> Result<Tensor> {
        let g = Graph::new();
        let post = self.nets.encoder.encode::<ChaCha8Rng>(
            &g,
            &self.generator.frozen(),
            g.constant(batch.hr.clone()),
            g.constant(batch.lr_up.clone()),
            LatentMode::Mean,
        )?;
        let inv = 1.0 / self.latent_scale();
        Ok(g.value(post.z).map(|v| v * inv))
    }

    pub fn step(&mut self, batch: &TrainBatch) -> Result<Stage2Report> {
        let z1 = self.targets(batch)?;
        let z0 = Tensor::randn(z1.shape(), &mut self.rng);
        let g = Graph::new();
        let lr_up = g.constant(batch.lr_up.clone());
        let cond = self.nets.condition.encode(&g, &self.flow.trainable(), lr_up)?;
        let ema_cond = self.nets.condition.encode(&g, &self.ema.shadow().frozen(), lr_up)?;
        let report = self.objective.evaluate(
            &g,
            &self.nets.velocity,
            &self.flow.trainable(),
            &self.ema.shadow().frozen(),
            &FlowBatch {
                z0: &z0,
                z1: &z1,
                cond: Some(cond),
                ema_cond: Some(ema_cond),
            },
            &mut self.rng,
        )?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                what: format!(
                    "stage-2 loss at step {} (fm {}, shortcut {:?})",
                    self.step, report.fm, report.shortcut
                ),
            });
        }
        let lr = self.opt.current_lr();
        g.backward(report.loss)?;
        let grads = g.param_grads();
        self.opt.step(&mut self.flow, &grads)?;
        self.ema.update(&self.flow)?;
        let out = Stage2Report {
            step: self.step,
            scale: batch.scale,
            fm: report.fm,
            shortcut: report.shortcut,
            total: report.total,
            fm_count: report.fm_count,
            shortcut_count: report.shortcut_indices.len(),
            lr,
            updated: grads.names().map(str::to_string).collect(),
        };
        self.step += 1;
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            generator: self.generator.clone(),
            flow: Some(self.ema.shadow().clone()),
        }
    }
}

const CALIBRATION_IMAGES: usize = 32;
const CALIBRATION_SCALES: usize = 4;

/// Root mean square of posterior-mean latents over up to 32 images at four
/// scales spread evenly over `[lo, hi]`.
fn latent_std(nets: &FlowGsNets, generator: &ParamStore, images: &[Image], lo: f64, hi: f64) -> Result<f64> {
    let images = &images[..images.len().min(CALIBRATION_IMAGES)];
    if images.is_empty() {
        return Err(Error::invalid("latent_scale", "no calibration images"));
    }
    let (mut sq, mut n) = (0.0, 0usize);
    for k in 0..CALIBRATION_SCALES {
        let s = lo + (hi - lo) * (k as f64 + 0.5) / CALIBRATION_SCALES as f64;
        for chunk in images.chunks(8) {
            let batch = TrainBatch::from_images(&chunk.iter().collect::<Vec<_>>(), s)?;
            let g = Graph::new();
            let post = nets.encoder.encode::<ChaCha8Rng>(
                &g,
                &generator.frozen(),
                g.constant(batch.hr.clone()),
                g.constant(batch.lr_up.clone()),
                LatentMode::Mean,
            )?;
            let z = g.value(post.z);
            sq += z.data().iter().map(|v| v * v).sum::<f64>();
            n += z.data().len();
        }
    }
    let sigma = (sq / n as f64).sqrt();
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::NonFinite {
            what: format!("latent scale {sigma}"),
        });
    }
    Ok(sigma)
}

/// Outcome of a full stage run.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSummary {
    pub steps: usize,
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

/// Runs stage 1 and keeps the epoch with the lowest validation loss.
pub fn train_stage1(cfg: &TrainConfig, data: &Dataset, mut progress: impl FnMut(&Stage1Report)) -> Result<StageSummary> {
    cfg.validate()?;
    let mut log = TrainLog::open(&cfg.log_path())?;
    let mut trainer = Stage1Trainer::new(cfg)?;
    let path = cfg.stage1_checkpoint();
    let mut best: Option<(usize, f64)> = None;
    let mut last = f64::NAN;
    for epoch in 0..cfg.stage1.epochs {
        for _ in 0..cfg.stage1.iters_per_epoch {
            let s = sample_batch_scale(cfg, trainer.rng());
            let batch = TrainBatch::sample_patches(&data.train, cfg.stage1.batch, s, cfg.data.train_patch, trainer.rng())?;
            let r = trainer.step(&batch)?;
            log.line(&r)?;
            progress(&r);
            last = r.total;
        }
        let val = trainer.validate(&data.val)?;
        log.line(format!("stage=1 epoch={epoch} val={val:.8e}"))?;
        if best.is_none_or(|(_, b)| val < b) {
            best = Some((epoch, val));
            let ckpt = Checkpoint {
                generator: trainer.generator.clone(),
                flow: None,
            };
            save_checkpoint(&ckpt.to_store(), &path)?;
        }
    }
    Ok(StageSummary {
        steps: trainer.step_count(),
        best_epoch: best.map(|b| b.0),
        best_val: best.map(|b| b.1),
        final_loss: last,
        checkpoint: path,
    })
}

/// Runs stage 2 from the stage-1 checkpoint and writes the full model.
pub fn train_stage2(cfg: &TrainConfig, data: &Dataset, mut progress: impl FnMut(&Stage2Report)) -> Result<StageSummary> {
    cfg.validate()?;
    let mut trainer = Stage2Trainer::from_stage1(cfg, &data.train)?;
    let mut log = TrainLog::open(&cfg.log_path())?;
    let before = trainer.generator.checksum();
    let mut last = f64::NAN;
    for _ in 0..cfg.stage2.total_steps() {
        let s = sample_batch_scale(cfg, trainer.rng());
        let batch = TrainBatch::sample_patches(&data.train, cfg.stage2.batch, s, cfg.data.train_patch, trainer.rng())?;
        let r = trainer.step(&batch)?;
        log.line(&r)?;
        progress(&r);
        last = r.total;
    }
    if trainer.generator.checksum() != before {
        return Err(Error::Misaligned("stage-1 parameters changed during stage 2".into()));
    }
    let path = cfg.stage2_checkpoint();
    save_checkpoint(&trainer.checkpoint().to_store(), &path)?;
    Ok(StageSummary {
        steps: trainer.step_count(),
        best_epoch: None,
        best_val: None,
        final_loss: last,
        checkpoint: path,
    })
}

/// True if `name` belongs to a stage-1 network.
pub fn is_generator_param(name: &str) -> bool {
    GENERATOR_PREFIXES.iter().any(|p| name.starts_with(p))
}
