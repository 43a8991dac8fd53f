//! Central finite-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::params::{Binding, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled across all parameters (all of them if fewer exist).
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-3,
            samples: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|analytic − numeric| / max(1, |numeric|)`
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tolerance: f64,
    pub worst: Option<CoordCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst.as_ref().is_none_or(|w| w.error <= self.tolerance)
    }

    pub fn into_result(self) -> Result<Self> {
        match &self.worst {
            Some(w) if w.error > self.tolerance => Err(Error::GradCheck {
                param: w.param.clone(),
                index: w.index,
                analytic: w.analytic,
                numeric: w.numeric,
            }),
            _ => Ok(self),
        }
    }
}

/// Compares reverse-mode gradients of the scalar `loss` against central
/// differences on a random sample of parameter coordinates.
pub fn grad_check<F>(params: &ParamStore, loss: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &Binding<'_>) -> Result<Var>,
{
    let g = Graph::new();
    let l = loss(&g, &params.trainable())?;
    g.backward(l)?;
    let grads = g.param_grads();

    let coords: Vec<(&str, usize)> = params
        .iter()
        .flat_map(|(name, t)| (0..t.len()).map(move |i| (name, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picked: Vec<usize> = if coords.len() <= cfg.samples {
        (0..coords.len()).collect()
    } else {
        let mut v = index::sample(&mut rng, coords.len(), cfg.samples).into_vec();
        v.sort_unstable();
        v
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        let l = loss(&g, &store.frozen())?;
        g.value(l).item()
    };

    let mut probe = params.clone();
    let mut worst: Option<CoordCheck> = None;
    for &ci in &picked {
        let (name, idx) = coords[ci];
        let orig = params.get(name).expect("enumerated").data()[idx];
        probe.get_mut(name).expect("cloned").data_mut()[idx] = orig + cfg.step;
        let plus = eval(&probe)?;
        probe.get_mut(name).expect("cloned").data_mut()[idx] = orig - cfg.step;
        let minus = eval(&probe)?;
        probe.get_mut(name).expect("cloned").data_mut()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * cfg.step);
        let analytic = grads.get(name).map_or(0.0, |t| t.data()[idx]);
        let error = (analytic - numeric).abs() / numeric.abs().max(1.0);
        if !error.is_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient check of `{name}`[{idx}]"),
            });
        }
        if worst.as_ref().is_none_or(|w| error > w.error) {
            worst = Some(CoordCheck {
                param: name.to_string(),
                index: idx,
                analytic,
                numeric,
                error,
            });
        }
    }
    Ok(GradCheckReport {
        checked: picked.len(),
        tolerance: cfg.tolerance,
        worst,
    })
}
