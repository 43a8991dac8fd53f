//! Two-dimensional toy problem: transport a standard normal onto a ring of
//! eight Gaussians with an unconditional MLP field.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{euler_sample_with, FlowBatch, FlowObjective, MlpVelocityNet, StepConditioning};
use crate::diffarray::{Adam, AdamConfig, EmaShadow, Graph, ParamStore, Tensor};
use crate::error::Result;

pub const RING_RADIUS: f64 = 2.0;
pub const MODE_STD: f64 = 0.2;

/// `n` points from an equal-weight mixture of eight isotropic Gaussians on a ring.
pub fn eight_gaussians<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let k = rng.random_range(0..8) as f64;
        let a = 2.0 * PI * k / 8.0;
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        data.push(RING_RADIUS * a.cos() + MODE_STD * ex);
        data.push(RING_RADIUS * a.sin() + MODE_STD * ey);
    }
    Tensor::new(&[n, 2], data).expect("sized")
}

pub fn standard_normal<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Tensor {
    Tensor::from_fn(&[n, dim], |_| rng.sample(StandardNormal))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyFlowConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: usize,
    pub depth: usize,
    pub ema_decay: f64,
    pub objective: FlowObjective,
    pub seed: u64,
}

impl Default for ToyFlowConfig {
    fn default() -> Self {
        Self {
            steps: 20000,
            batch: 128,
            lr: 2e-3,
            hidden: 96,
            depth: 3,
            ema_decay: 0.999,
            objective: FlowObjective::default(),
            seed: 0,
        }
    }
}

pub struct ToyFlowModel {
    pub net: MlpVelocityNet,
    pub params: ParamStore,
    pub ema: EmaShadow,
    /// Final-step (fm, shortcut) losses.
    pub last_losses: (f64, Option<f64>),
}

impl ToyFlowModel {
    /// Samples with the EMA weights. A field trained without the shortcut term
    /// only ever saw a zero step size and is sampled that way.
    pub fn sample(&self, z0: &Tensor, steps: usize) -> Result<Tensor> {
        let cond = if self.net_trained_with_shortcut() {
            StepConditioning::StepSize
        } else {
            StepConditioning::Zero
        };
        Ok(euler_sample_with(&self.net, &self.ema.shadow().frozen(), z0, None, steps, cond)?.z)
    }

    fn net_trained_with_shortcut(&self) -> bool {
        self.last_losses.1.is_some()
    }
}

pub fn train_toy_flow(cfg: &ToyFlowConfig) -> Result<ToyFlowModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = MlpVelocityNet::new("vel", 2, 0, cfg.hidden, cfg.depth);
    let mut params = ParamStore::new();
    net.init(&mut params, &mut rng);
    let mut ema = EmaShadow::new(cfg.ema_decay, &params)?;
    let mut opt = Adam::new(AdamConfig::new(cfg.lr));
    let mut last = (0.0, None);
    for _ in 0..cfg.steps {
        let z0 = standard_normal(cfg.batch, 2, &mut rng);
        let z1 = eight_gaussians(cfg.batch, &mut rng);
        let g = Graph::new();
        let batch = FlowBatch {
            z0: &z0,
            z1: &z1,
            cond: None,
            ema_cond: None,
        };
        let report = cfg
            .objective
            .evaluate(&g, &net, &params.trainable(), &ema.shadow().frozen(), &batch, &mut rng)?;
        g.backward(report.loss)?;
        opt.step(&mut params, &g.param_grads())?;
        ema.update(&params)?;
        last = (report.fm, report.shortcut);
    }
    Ok(ToyFlowModel {
        net,
        params,
        ema,
        last_losses: last,
    })
}
