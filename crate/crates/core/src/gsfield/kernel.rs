use std::f64::consts::PI;
use std::rc::Rc;

use crate::diffarray::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Determinants below this are treated as singular.
pub const MIN_DET: f64 = 1e-12;

/// Symmetric 2×2 covariance `[[xx, xy], [xy, yy]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cov2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Cov2 {
    pub fn new(xx: f64, xy: f64, yy: f64) -> Self {
        Self { xx, xy, yy }
    }

    pub fn isotropic(var: f64) -> Self {
        Self::new(var, 0.0, var)
    }

    /// `R(θ)·diag(σx², σy²)·R(θ)ᵀ`
    pub fn from_scales(sigma_x: f64, sigma_y: f64, theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        let (a, b) = (sigma_x * sigma_x, sigma_y * sigma_y);
        Self::new(c * c * a + s * s * b, c * s * (a - b), s * s * a + c * c * b)
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    pub fn max_eigenvalue(&self) -> f64 {
        let half = 0.5 * self.trace();
        let disc = (0.25 * (self.xx - self.yy).powi(2) + self.xy * self.xy).sqrt();
        half + disc
    }

    pub fn is_spd(&self) -> bool {
        self.xx > 0.0 && self.det() > 0.0
    }

    /// Closed-form inverse, guarded against near-singular input.
    pub fn inverse(&self) -> Result<Cov2> {
        let det = self.det();
        if !(det >= MIN_DET) {
            return Err(Error::SingularCovariance { det });
        }
        Ok(Cov2::new(self.yy / det, -self.xy / det, self.xx / det))
    }

    /// Convex combination `Σ_k w_k·covs[k]`.
    pub fn mix(weights: &[f64], covs: &[Cov2]) -> Cov2 {
        let mut out = Cov2::new(0.0, 0.0, 0.0);
        for (w, c) in weights.iter().zip(covs) {
            out.xx += w * c.xx;
            out.xy += w * c.xy;
            out.yy += w * c.yy;
        }
        out
    }
}

/// Bivariate normal density at `query` for a kernel centred at `mean`.
pub fn gaussian_pdf(query: [f64; 2], mean: [f64; 2], cov: Cov2) -> Result<f64> {
    let inv = cov.inverse()?;
    let (dx, dy) = (query[0] - mean[0], query[1] - mean[1]);
    let q = inv.xx * dx * dx + 2.0 * inv.xy * dx * dy + inv.yy * dy * dy;
    Ok((-0.5 * q).exp() / (2.0 * PI * cov.det().sqrt()))
}

/// Precomputed inverse and normaliser for repeated density evaluation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PdfKernel {
    inv: Cov2,
    norm: f64,
}

/// Density plus its partials wrt the offset `d = query − mean` and the
/// covariance entries `(xx, xy, yy)`, with `xy` counted once.
pub(crate) struct PdfGrad {
    pub value: f64,
    pub d_offset: [f64; 2],
    pub d_cov: [f64; 3],
}

impl PdfKernel {
    pub fn new(cov: Cov2) -> Result<Self> {
        let inv = cov.inverse()?;
        Ok(Self {
            inv,
            norm: 1.0 / (2.0 * PI * cov.det().sqrt()),
        })
    }

    #[inline]
    pub fn eval(&self, dx: f64, dy: f64) -> f64 {
        let i = &self.inv;
        let q = i.xx * dx * dx + 2.0 * i.xy * dx * dy + i.yy * dy * dy;
        self.norm * (-0.5 * q).exp()
    }

    /// With `u = Σ⁻¹d`: ∂f/∂d = −f·u and ∂f/∂Σ = ½f(uuᵀ − Σ⁻¹); the off-diagonal
    /// entry appears twice in Σ so its partial doubles.
    #[inline]
    pub fn eval_grad(&self, dx: f64, dy: f64) -> PdfGrad {
        let i = &self.inv;
        let ux = i.xx * dx + i.xy * dy;
        let uy = i.xy * dx + i.yy * dy;
        let f = self.norm * (-0.5 * (ux * dx + uy * dy)).exp();
        PdfGrad {
            value: f,
            d_offset: [-f * ux, -f * uy],
            d_cov: [
                0.5 * f * (ux * ux - i.xx),
                f * (ux * uy - i.xy),
                0.5 * f * (uy * uy - i.yy),
            ],
        }
    }
}

/// Differentiable density of M kernels at fixed query points.
struct PdfOp {
    queries: Vec<[f64; 2]>,
}

fn kernels_of(cov: &Tensor) -> Result<Vec<PdfKernel>> {
    cov.data()
        .chunks(3)
        .map(|c| PdfKernel::new(Cov2::new(c[0], c[1], c[2])))
        .collect()
}

impl CustomOp for PdfOp {
    fn name(&self) -> &'static str {
        "gaussian_pdf"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (mean, cov) = (inputs[0], inputs[1]);
        let kernels = kernels_of(cov)?;
        let m = kernels.len();
        let mut g_mean = vec![0.0; 2 * m];
        let mut g_cov = vec![0.0; 3 * m];
        for (i, k) in kernels.iter().enumerate() {
            let q = self.queries[i];
            let pg = k.eval_grad(q[0] - mean.data()[2 * i], q[1] - mean.data()[2 * i + 1]);
            let go = grad.data()[i];
            g_mean[2 * i] = -go * pg.d_offset[0];
            g_mean[2 * i + 1] = -go * pg.d_offset[1];
            for j in 0..3 {
                g_cov[3 * i + j] = go * pg.d_cov[j];
            }
        }
        Ok(vec![
            Some(Tensor::new(&[m, 2], g_mean)?),
            Some(Tensor::new(&[m, 3], g_cov)?),
        ])
    }
}

/// Densities `[M]` of kernels with means `[M, 2]` and covariance entries
/// `[M, 3]` (xx, xy, yy), each evaluated at its own fixed query point.
pub fn gaussian_pdf_op(g: &Graph, queries: &[[f64; 2]], mean: Var, cov: Var) -> Result<Var> {
    let m = queries.len();
    if g.shape(mean) != [m, 2] || g.shape(cov) != [m, 3] {
        return Err(Error::shape("gaussian_pdf", &g.shape(mean), &g.shape(cov)));
    }
    let (mv, cv) = (g.value(mean), g.value(cov));
    let kernels = kernels_of(&cv)?;
    let out: Vec<f64> = kernels
        .iter()
        .enumerate()
        .map(|(i, k)| k.eval(queries[i][0] - mv.data()[2 * i], queries[i][1] - mv.data()[2 * i + 1]))
        .collect();
    let op = Rc::new(PdfOp {
        queries: queries.to_vec(),
    });
    Ok(g.custom(op, &[mean, cov], Tensor::new(&[m], out)?))
}

/// Covariance entries `[K, 3]` from log-scales and rotations, all `[K]` or `[K, 1]`.
pub fn covariance_from_scales(g: &Graph, log_sx: Var, log_sy: Var, theta: Var) -> Result<Var> {
    let k = g.shape(theta).iter().product::<usize>();
    let col = |v: Var| g.reshape(v, &[k, 1]);
    let a = g.exp(g.scale(col(log_sx)?, 2.0));
    let b = g.exp(g.scale(col(log_sy)?, 2.0));
    let th = col(theta)?;
    let (c, s) = (g.cos(th), g.sin(th));
    let (cc, ss, cs) = (g.mul(c, c)?, g.mul(s, s)?, g.mul(c, s)?);
    let xx = g.add(g.mul(cc, a)?, g.mul(ss, b)?)?;
    let xy = g.mul(cs, g.sub(a, b)?)?;
    let yy = g.add(g.mul(ss, a)?, g.mul(cc, b)?)?;
    g.concat(&[xx, xy, yy], 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffarray::{grad_check, GradCheckConfig, ParamStore};
    use proptest::prelude::*;

    #[test]
    fn pdf_at_centre() {
        let v = gaussian_pdf([1.0, 2.0], [1.0, 2.0], Cov2::isotropic(1.0)).unwrap();
        assert!((v - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!((v - 0.1591549).abs() < 1e-7);
        let v = gaussian_pdf([0.0, 0.0], [0.0, 0.0], Cov2::isotropic(4.0)).unwrap();
        assert!((v - 1.0 / (8.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn singular_rejected() {
        let err = gaussian_pdf([0.0; 2], [0.0; 2], Cov2::new(1.0, 1.0, 1.0)).unwrap_err();
        assert!(matches!(err, Error::SingularCovariance { .. }));
    }

    #[test]
    fn quadrature_integrates_to_one() {
        for cov in [Cov2::isotropic(1.0), Cov2::from_scales(1.3, 0.6, 0.7), Cov2::from_scales(0.5, 2.0, 2.2)] {
            let h = 0.05;
            let mut total = 0.0;
            let r = 12.0;
            let steps = (2.0 * r / h) as i64;
            for i in 0..=steps {
                for j in 0..=steps {
                    let p = [-r + i as f64 * h, -r + j as f64 * h];
                    total += gaussian_pdf(p, [0.0; 2], cov).unwrap();
                }
            }
            total *= h * h;
            assert!((total - 1.0).abs() < 1e-3, "{total}");
        }
    }

    #[test]
    fn mixing_examples() {
        let a = Cov2::isotropic(1.0);
        let b = Cov2::isotropic(3.0);
        assert_eq!(Cov2::mix(&[0.5, 0.5], &[a, b]), Cov2::isotropic(2.0));
        assert_eq!(Cov2::mix(&[0.0, 1.0], &[a, b]), b);
    }

    #[test]
    fn graph_covariance_matches_closed_form() {
        let g = Graph::new();
        let ls = g.constant(Tensor::new(&[2], vec![0.1, -0.4]).unwrap());
        let lt = g.constant(Tensor::new(&[2], vec![-0.2, 0.3]).unwrap());
        let th = g.constant(Tensor::new(&[2], vec![0.5, 2.0]).unwrap());
        let cov = g.value(covariance_from_scales(&g, ls, lt, th).unwrap());
        for (k, (sx, sy, t)) in [(0.1f64, -0.2f64, 0.5), (-0.4, 0.3, 2.0)].into_iter().enumerate() {
            let want = Cov2::from_scales(sx.exp(), sy.exp(), t);
            let got = &cov.data()[3 * k..3 * k + 3];
            assert!((got[0] - want.xx).abs() < 1e-14);
            assert!((got[1] - want.xy).abs() < 1e-14);
            assert!((got[2] - want.yy).abs() < 1e-14);
        }
    }

    #[test]
    fn pdf_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        store.insert("mu", Tensor::new(&[4, 2], vec![0.1, -0.2, 0.5, 0.3, -0.7, 0.2, 0.0, 0.9]).unwrap());
        store.insert("ls", Tensor::new(&[4], vec![0.1, -0.3, 0.4, 0.0]).unwrap());
        store.insert("lt", Tensor::new(&[4], vec![-0.2, 0.2, 0.1, -0.5]).unwrap());
        store.insert("th", Tensor::new(&[4], vec![0.3, 1.2, 2.5, -0.4]).unwrap());
        store.insert("logit", Tensor::new(&[4], vec![0.2, -1.0, 0.7, 0.0]).unwrap());
        let queries = [[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0], [0.5, 0.5]];
        let report = grad_check(
            &store,
            |g, p| {
                let cov = covariance_from_scales(g, g.param(p, "ls")?, g.param(p, "lt")?, g.param(p, "th")?)?;
                let f = gaussian_pdf_op(g, &queries, g.param(p, "mu")?, cov)?;
                let o = g.sigmoid(g.param(p, "logit")?);
                Ok(g.sum(g.mul(f, o)?))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    proptest! {
        #[test]
        fn realized_covariance_is_spd(sx in -3.0f64..3.0, sy in -3.0f64..3.0, th in -10.0f64..10.0) {
            let c = Cov2::from_scales(sx.exp(), sy.exp(), th);
            prop_assert!(c.det() > 0.0 && c.trace() > 0.0);
        }
    }
}
