use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::params::{GradMap, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear ramp length; zero disables warmup.
    pub warmup_steps: u64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
        }
    }

    pub fn with_warmup(mut self, steps: u64) -> Self {
        self.warmup_steps = steps;
        self
    }
}

/// Adaptive-moment optimizer with a linear learning-rate warmup.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    /// Completed steps.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate after `step` completed steps: `min(step / warmup, 1) · lr`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.cfg.warmup_steps == 0 {
            return self.cfg.lr;
        }
        self.cfg.lr * (step.min(self.cfg.warmup_steps) as f64 / self.cfg.warmup_steps as f64)
    }

    /// Rate the next call to [`Adam::step`] will use.
    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.step + 1)
    }

    /// Updates every parameter present in `grads`. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<()> {
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of `{name}`"),
            });
        }
        for (name, g) in grads.iter() {
            let p = params.get(name).ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let lr = self.lr_at(self.step);
        let AdamConfig { beta1, beta2, eps, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of a parameter set.
#[derive(Clone, Debug)]
pub struct EmaShadow {
    decay: f64,
    shadow: ParamStore,
}

impl EmaShadow {
    /// Starts the shadow at the current parameter values.
    pub fn new(decay: f64, params: &ParamStore) -> Result<Self> {
        Self::from_shadow(decay, params.clone())
    }

    pub fn from_shadow(decay: f64, shadow: ParamStore) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::invalid("ema", format!("decay {decay} outside (0, 1)")));
        }
        Ok(Self { decay, shadow })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    /// `shadow ← decay·shadow + (1 − decay)·current` for every slot.
    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::Misaligned(format!(
                "{} shadow slots vs {} parameters",
                self.shadow.len(),
                params.len()
            )));
        }
        for (name, p) in params.iter() {
            match self.shadow.get(name) {
                Some(s) if s.shape() == p.shape() => {}
                Some(s) => return Err(Error::Misaligned(format!("`{name}`: {:?} vs {:?}", s.shape(), p.shape()))),
                None => return Err(Error::Misaligned(format!("no shadow slot for `{name}`"))),
            }
        }
        let d = self.decay;
        for (name, p) in params.iter() {
            let s = self.shadow.get_mut(name).expect("checked above");
            for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = d * *sv + (1.0 - d) * pv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[3], v));
        s
    }

    fn grads(v: f64) -> GradMap {
        let mut g = GradMap::default();
        g.insert("w", Tensor::full(&[3], v));
        g
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(0.7);
        let mut opt = Adam::new(AdamConfig::new(1e-2));
        for _ in 0..5 {
            opt.step(&mut p, &grads(0.0)).unwrap();
        }
        assert_eq!(p, store(0.7));
    }

    #[test]
    fn warmup_is_linear() {
        let opt = Adam::new(AdamConfig::new(1e-5).with_warmup(1000));
        assert!((opt.lr_at(500) - 0.5e-5).abs() < 1e-20);
        assert_eq!(opt.lr_at(1000), 1e-5);
        assert_eq!(opt.lr_at(5000), 1e-5);
        assert_eq!(opt.lr_at(0), 0.0);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut p = store(0.0);
        let mut opt = Adam::new(AdamConfig::new(1e-2));
        for _ in 0..50 {
            opt.step(&mut p, &grads(2.5)).unwrap();
        }
        assert!(p.get("w").unwrap().data().iter().all(|&v| v < 0.0));
        let mut p = store(0.0);
        let mut opt = Adam::new(AdamConfig::new(1e-2));
        for _ in 0..50 {
            opt.step(&mut p, &grads(-0.1)).unwrap();
        }
        assert!(p.get("w").unwrap().data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut p = store(1.0);
        let mut opt = Adam::new(AdamConfig::new(1e-2));
        let err = opt.step(&mut p, &grads(f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(p, store(1.0));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn ema_single_update_and_fixed_point() {
        let mut ema = EmaShadow::from_shadow(0.999, store(0.0)).unwrap();
        ema.update(&store(1.0)).unwrap();
        assert!((ema.shadow().get("w").unwrap().data()[0] - 0.001).abs() < 1e-15);

        let mut ema = EmaShadow::new(0.999, &store(0.3)).unwrap();
        ema.update(&store(0.3)).unwrap();
        assert_eq!(ema.shadow(), &store(0.3));
    }

    #[test]
    fn ema_rejects_misaligned_sets() {
        let mut ema = EmaShadow::new(0.999, &store(0.0)).unwrap();
        let mut other = ParamStore::new();
        other.insert("v", Tensor::zeros(&[3]));
        assert!(matches!(ema.update(&other), Err(Error::Misaligned(_))));
        let mut other = ParamStore::new();
        other.insert("w", Tensor::zeros(&[4]));
        assert!(matches!(ema.update(&other), Err(Error::Misaligned(_))));
    }
}
