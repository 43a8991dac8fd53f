//! Conditional flow matching with shortcut consistency, and Euler sampling.
//!
//! A velocity field always receives the step size it is asked to cover; the
//! plain flow-matching branch uses a step size of zero.

mod nets;
pub mod toy;

use std::cell::Cell;

use rand::seq::index;
use rand::Rng;

pub use nets::{ConvVelocityNet, MlpVelocityNet};

use crate::diffarray::{Binding, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Smallest shortcut step is `2^-DEFAULT_LEVELS`.
pub const DEFAULT_LEVELS: u32 = 7;

pub trait VelocityField {
    /// Velocity `[B, ...]` at states `z` (same shape), times `t` and step sizes
    /// `dt` (one per batch item), with an optional batch-first condition.
    fn velocity(&self, g: &Graph, p: &Binding<'_>, z: Var, t: &[f64], dt: &[f64], cond: Option<Var>) -> Result<Var>;
}

/// Wraps a field and counts evaluations.
pub struct CountingField<'a, F: ?Sized> {
    inner: &'a F,
    calls: Cell<usize>,
}

impl<'a, F: VelocityField + ?Sized> CountingField<'a, F> {
    pub fn new(inner: &'a F) -> Self {
        Self {
            inner,
            calls: Cell::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<F: VelocityField + ?Sized> VelocityField for CountingField<'_, F> {
    fn velocity(&self, g: &Graph, p: &Binding<'_>, z: Var, t: &[f64], dt: &[f64], cond: Option<Var>) -> Result<Var> {
        self.calls.set(self.calls.get() + 1);
        self.inner.velocity(g, p, z, t, dt, cond)
    }
}

fn rows_of(t: &Tensor) -> usize {
    t.shape()[0]
}

/// `z + k_i·v` per batch row.
fn axpy_rows(z: &Tensor, v: &Tensor, k: &[f64]) -> Tensor {
    let inner = z.len() / rows_of(z);
    let mut out = z.clone();
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let vr = &v.data()[i * inner..(i + 1) * inner];
        for (o, x) in chunk.iter_mut().zip(vr) {
            *o += k[i] * x;
        }
    }
    out
}

/// Linear interpolation `(1 − t)·z0 + t·z1`.
pub fn sample_path(z0: &Tensor, z1: &Tensor, t: f64) -> Result<Tensor> {
    sample_path_batch(z0, z1, &vec![t; rows_of(z0)])
}

/// Per-row interpolation with one time per batch item.
pub fn sample_path_batch(z0: &Tensor, z1: &Tensor, t: &[f64]) -> Result<Tensor> {
    if z0.shape() != z1.shape() {
        return Err(Error::shape("sample_path", z0.shape(), z1.shape()));
    }
    if t.len() != rows_of(z0) {
        return Err(Error::invalid("sample_path", format!("{} times for {} rows", t.len(), rows_of(z0))));
    }
    if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::invalid("sample_path", format!("t = {bad} outside [0, 1]")));
    }
    let inner = z0.len() / rows_of(z0);
    let mut out = z0.clone();
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let b = &z1.data()[i * inner..(i + 1) * inner];
        for (a, &b) in chunk.iter_mut().zip(b) {
            // Endpoints are reproduced exactly.
            *a = if t[i] == 1.0 { b } else { (1.0 - t[i]) * *a + t[i] * b };
        }
    }
    Ok(out)
}

fn finite_or(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what: format!("{what} output"),
        })
    }
}

fn mse_to(g: &Graph, v: Var, target: Tensor) -> Result<Var> {
    let d = g.sub(v, g.constant(target))?;
    Ok(g.mean(g.square(d)))
}

/// Flow-matching regression of `v(z_t, t, 0)` onto `z1 − z0`.
pub fn fm_loss<F: VelocityField + ?Sized>(
    g: &Graph,
    net: &F,
    p: &Binding<'_>,
    z0: &Tensor,
    z1: &Tensor,
    t: &[f64],
    cond: Option<Var>,
) -> Result<Var> {
    let zt = sample_path_batch(z0, z1, t)?;
    let target = z1.zip_map(z0, |a, b| a - b)?;
    let v = net.velocity(g, p, g.constant(zt), t, &vec![0.0; t.len()], cond)?;
    finite_or(g, v, "velocity")?;
    mse_to(g, v, target)
}

/// Steps no larger than this use the instantaneous velocity (step input 0).
pub const FINEST_STEP: f64 = 1.0 / (1u32 << DEFAULT_LEVELS) as f64;

/// Step-size conditioning value for a step of size `dt`.
pub fn step_input(dt: f64) -> f64 {
    if dt <= FINEST_STEP * (1.0 + 1e-9) {
        0.0
    } else {
        dt
    }
}

/// Average of two chained half steps of size `dt` under the EMA weights.
/// The result is a plain tensor: no gradient reaches `ema` or `cond`.
pub fn shortcut_targets<F: VelocityField + ?Sized>(
    g: &Graph,
    net: &F,
    ema: &Binding<'_>,
    zt: &Tensor,
    t: &[f64],
    dt: &[f64],
    cond: Option<Var>,
) -> Result<Tensor> {
    for (&ti, &di) in t.iter().zip(dt) {
        if di < 0.0 || ti + 2.0 * di > 1.0 + 1e-12 {
            return Err(Error::invalid(
                "shortcut_targets",
                format!("t = {ti} with step {di} runs past t = 1"),
            ));
        }
    }
    let frozen = ema.store().frozen();
    let cond = cond.map(|c| g.detach(c));
    let dt_in: Vec<f64> = dt.iter().map(|&d| step_input(d)).collect();
    let v1 = net.velocity(g, &frozen, g.constant(zt.clone()), t, &dt_in, cond)?;
    finite_or(g, v1, "target velocity")?;
    let v1 = (*g.value(v1)).clone();
    let z_mid = axpy_rows(zt, &v1, dt);
    let t_mid: Vec<f64> = t.iter().zip(dt).map(|(a, b)| a + b).collect();
    let v2 = net.velocity(g, &frozen, g.constant(z_mid), &t_mid, &dt_in, cond)?;
    finite_or(g, v2, "target velocity")?;
    v1.zip_map(&g.value(v2), |a, b| 0.5 * (a + b))
}

/// Regression of the double step `v(z_t, t, 2·dt)` onto the EMA two-step average.
#[allow(clippy::too_many_arguments)]
pub fn shortcut_loss<F: VelocityField + ?Sized>(
    g: &Graph,
    net: &F,
    p: &Binding<'_>,
    ema: &Binding<'_>,
    zt: &Tensor,
    t: &[f64],
    dt: &[f64],
    cond: Option<Var>,
    ema_cond: Option<Var>,
) -> Result<Var> {
    let target = shortcut_targets(g, net, ema, zt, t, dt, ema_cond)?;
    let dt2: Vec<f64> = dt.iter().map(|d| 2.0 * d).collect();
    let v = net.velocity(g, p, g.constant(zt.clone()), t, &dt2, cond)?;
    finite_or(g, v, "velocity")?;
    mse_to(g, v, target)
}

/// Draws a dyadic step `2^-m`, m ∈ 1..=levels, and a start time on the grid of
/// multiples of twice that step within `[0, 1 − 2·step]`.
pub fn sample_shortcut_times<R: Rng + ?Sized>(rng: &mut R, levels: u32) -> (f64, f64) {
    let m = rng.random_range(1..=levels);
    let dt = 0.5f64.powi(m as i32);
    let slots = 1u64 << (m - 1);
    let j = rng.random_range(0..slots);
    (j as f64 * 2.0 * dt, dt)
}

/// Routing of one batch between the two objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowObjective {
    pub shortcut: bool,
    pub levels: u32,
}

impl Default for FlowObjective {
    fn default() -> Self {
        Self {
            shortcut: true,
            levels: DEFAULT_LEVELS,
        }
    }
}

/// Loss node plus logged components of one batch objective.
#[derive(Clone, Debug)]
pub struct ObjectiveReport {
    pub loss: Var,
    pub total: f64,
    pub fm: f64,
    /// Mean shortcut loss over routed samples, if any.
    pub shortcut: Option<f64>,
    pub shortcut_indices: Vec<usize>,
    pub fm_count: usize,
    /// Set when the batch was too small for the quarter split.
    pub small_batch: bool,
}

/// Inputs of one flow training batch.
pub struct FlowBatch<'a> {
    pub z0: &'a Tensor,
    pub z1: &'a Tensor,
    /// Condition for the trained branch.
    pub cond: Option<Var>,
    /// Condition seen by the EMA target network.
    pub ema_cond: Option<Var>,
}

impl FlowObjective {
    pub fn without_shortcut() -> Self {
        Self {
            shortcut: false,
            ..Self::default()
        }
    }

    /// One quarter of the batch (rounded down) goes to the shortcut loss and the
    /// rest to flow matching; the total is the mean over all batch items.
    pub fn evaluate<F: VelocityField + ?Sized, R: Rng + ?Sized>(
        &self,
        g: &Graph,
        net: &F,
        p: &Binding<'_>,
        ema: &Binding<'_>,
        batch: &FlowBatch<'_>,
        rng: &mut R,
    ) -> Result<ObjectiveReport> {
        let b = rows_of(batch.z0);
        if rows_of(batch.z1) != b {
            return Err(Error::shape("batch_objective", batch.z0.shape(), batch.z1.shape()));
        }
        let small_batch = self.shortcut && b < 4;
        let n_sc = if self.shortcut { b / 4 } else { 0 };
        let mut sc_idx = index::sample(rng, b, n_sc).into_vec();
        sc_idx.sort_unstable();
        let fm_idx: Vec<usize> = (0..b).filter(|i| !sc_idx.contains(i)).collect();

        let subset_cond = |c: Option<Var>, idx: &[usize]| -> Result<Option<Var>> {
            c.map(|c| g.index_select(c, idx)).transpose()
        };

        let mut terms = Vec::new();
        let mut fm_value = 0.0;
        if !fm_idx.is_empty() {
            let t: Vec<f64> = fm_idx.iter().map(|_| rng.random::<f64>()).collect();
            let loss = fm_loss(
                g,
                net,
                p,
                &batch.z0.select_rows(&fm_idx)?,
                &batch.z1.select_rows(&fm_idx)?,
                &t,
                subset_cond(batch.cond, &fm_idx)?,
            )?;
            fm_value = g.value(loss).data()[0];
            terms.push(g.scale(loss, fm_idx.len() as f64 / b as f64));
        }
        let mut sc_value = None;
        if !sc_idx.is_empty() {
            let (t, dt): (Vec<f64>, Vec<f64>) = sc_idx.iter().map(|_| sample_shortcut_times(rng, self.levels)).unzip();
            let z0 = batch.z0.select_rows(&sc_idx)?;
            let z1 = batch.z1.select_rows(&sc_idx)?;
            let zt = sample_path_batch(&z0, &z1, &t)?;
            let loss = shortcut_loss(
                g,
                net,
                p,
                ema,
                &zt,
                &t,
                &dt,
                subset_cond(batch.cond, &sc_idx)?,
                subset_cond(batch.ema_cond, &sc_idx)?,
            )?;
            sc_value = Some(g.value(loss).data()[0]);
            terms.push(g.scale(loss, sc_idx.len() as f64 / b as f64));
        }
        let loss = match terms.as_slice() {
            [one] => *one,
            [a, b] => g.add(*a, *b)?,
            _ => unreachable!("batch has at least one row"),
        };
        Ok(ObjectiveReport {
            loss,
            total: g.value(loss).data()[0],
            fm: fm_value,
            shortcut: sc_value,
            fm_count: fm_idx.len(),
            shortcut_indices: sc_idx,
            small_batch,
        })
    }
}

/// Result of integrating the flow.
#[derive(Clone, Debug)]
pub struct Sample {
    pub z: Tensor,
    pub nfe: usize,
}

/// Step-size input given to the field during sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum StepConditioning {
    /// The actual step size `1/n`.
    #[default]
    StepSize,
    /// Always zero, as seen by a field trained with flow matching alone.
    Zero,
}

/// Uniform-grid Euler integration from t = 0 to 1 in `steps` steps, each
/// conditioned on its own step size.
pub fn euler_sample<F: VelocityField + ?Sized>(
    net: &F,
    p: &Binding<'_>,
    z0: &Tensor,
    cond: Option<&Tensor>,
    steps: usize,
) -> Result<Sample> {
    euler_sample_with(net, p, z0, cond, steps, StepConditioning::StepSize)
}

pub fn euler_sample_with<F: VelocityField + ?Sized>(
    net: &F,
    p: &Binding<'_>,
    z0: &Tensor,
    cond: Option<&Tensor>,
    steps: usize,
    conditioning: StepConditioning,
) -> Result<Sample> {
    if steps == 0 {
        return Err(Error::invalid("euler_sample", "at least one step is required"));
    }
    let b = rows_of(z0);
    let h = 1.0 / steps as f64;
    let dt_in = match conditioning {
        StepConditioning::StepSize => step_input(h),
        StepConditioning::Zero => 0.0,
    };
    let frozen = p.store().frozen();
    let mut z = z0.clone();
    for i in 0..steps {
        let g = Graph::new();
        let t = vec![i as f64 * h; b];
        let c = cond.map(|c| g.constant(c.clone()));
        let v = net.velocity(&g, &frozen, g.constant(z.clone()), &t, &vec![dt_in; b], c)?;
        z = axpy_rows(&z, &g.value(v), &vec![h; b]);
        if !z.is_finite() {
            return Err(Error::NonFinite {
                what: format!("state after Euler step {}", i + 1),
            });
        }
    }
    Ok(Sample { z, nfe: steps })
}

/// Single Euler step of size one from t = 0.
pub fn one_step_sample<F: VelocityField + ?Sized>(
    net: &F,
    p: &Binding<'_>,
    z0: &Tensor,
    cond: Option<&Tensor>,
) -> Result<Sample> {
    euler_sample(net, p, z0, cond, 1)
}

#[cfg(test)]
mod tests;
