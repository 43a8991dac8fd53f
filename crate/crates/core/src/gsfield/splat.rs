use std::rc::Rc;

use super::kernel::{Cov2, PdfKernel};
use crate::diffarray::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Grid layout of primitive rows: `n` images of `h × w`, row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplatGrid {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    /// Chebyshev radius of the window.
    pub radius: usize,
}

impl SplatGrid {
    pub fn new(n: usize, h: usize, w: usize, window: usize) -> Result<Self> {
        if window % 2 == 0 {
            return Err(Error::invalid("splat", format!("window {window} must be odd")));
        }
        Ok(Self {
            n,
            h,
            w,
            radius: window / 2,
        })
    }

    pub fn rows(&self) -> usize {
        self.n * self.h * self.w
    }

    /// Calls `f(query_row, primitive_row, dx, dy)` for every in-window pair,
    /// where `(dx, dy)` is the query position minus the primitive centre.
    #[inline]
    fn for_each_pair(&self, mut f: impl FnMut(usize, usize, f64, f64)) {
        let r = self.radius as isize;
        let (h, w) = (self.h as isize, self.w as isize);
        for img in 0..self.n {
            let base = img * self.h * self.w;
            for qy in 0..h {
                let py0 = (qy - r).max(0);
                let py1 = (qy + r).min(h - 1);
                for qx in 0..w {
                    let q = base + (qy * w + qx) as usize;
                    let px0 = (qx - r).max(0);
                    let px1 = (qx + r).min(w - 1);
                    for py in py0..=py1 {
                        for px in px0..=px1 {
                            let p = base + (py * w + px) as usize;
                            f(q, p, (qx - px) as f64, (qy - py) as f64);
                        }
                    }
                }
            }
        }
    }
}

fn kernels(cov: &Tensor) -> Result<Vec<PdfKernel>> {
    cov.data()
        .chunks(3)
        .map(|c| PdfKernel::new(Cov2::new(c[0], c[1], c[2])))
        .collect()
}

/// Windowed Gaussian aggregation: `out[q] = Σ_{p ∈ window(q)} f_p(q)·contrib[p]`.
struct SplatOp {
    grid: SplatGrid,
}

impl CustomOp for SplatOp {
    fn name(&self) -> &'static str {
        "splat"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (cov, contrib) = (inputs[0], inputs[1]);
        let c = contrib.shape()[1];
        let ks = kernels(cov)?;
        let (cd, gd) = (contrib.data(), grad.data());
        let mut g_cov = vec![0.0; cov.len()];
        let mut g_contrib = vec![0.0; contrib.len()];
        self.grid.for_each_pair(|q, p, dx, dy| {
            let pg = ks[p].eval_grad(dx, dy);
            let gq = &gd[q * c..(q + 1) * c];
            let vp = &cd[p * c..(p + 1) * c];
            let mut dot = 0.0;
            for j in 0..c {
                dot += gq[j] * vp[j];
            }
            for j in 0..3 {
                g_cov[3 * p + j] += dot * pg.d_cov[j];
            }
            let gp = &mut g_contrib[p * c..(p + 1) * c];
            for j in 0..c {
                gp[j] += pg.value * gq[j];
            }
        });
        Ok(vec![
            needs[0].then(|| Tensor::new(cov.shape(), g_cov)).transpose()?,
            needs[1].then(|| Tensor::new(contrib.shape(), g_contrib)).transpose()?,
        ])
    }
}

/// Forward pass of the windowed aggregation on plain tensors.
pub fn splat_forward(grid: &SplatGrid, cov: &Tensor, contrib: &Tensor) -> Result<Tensor> {
    let rows = grid.rows();
    if cov.shape() != [rows, 3] || contrib.shape().len() != 2 || contrib.shape()[0] != rows {
        return Err(Error::shape("splat", cov.shape(), contrib.shape()));
    }
    let c = contrib.shape()[1];
    let ks = kernels(cov)?;
    let cd = contrib.data();
    let mut out = vec![0.0; rows * c];
    grid.for_each_pair(|q, p, dx, dy| {
        let f = ks[p].eval(dx, dy);
        let vp = &cd[p * c..(p + 1) * c];
        let oq = &mut out[q * c..(q + 1) * c];
        for j in 0..c {
            oq[j] += f * vp[j];
        }
    });
    Tensor::new(&[rows, c], out)
}

/// Differentiable windowed aggregation over per-pixel primitives.
/// `cov` is `[rows, 3]` (xx, xy, yy) and `contrib` is `[rows, C]`.
pub fn splat(g: &Graph, grid: SplatGrid, cov: Var, contrib: Var) -> Result<Var> {
    let out = splat_forward(&grid, &g.value(cov), &g.value(contrib))?;
    Ok(g.custom(Rc::new(SplatOp { grid }), &[cov, contrib], out))
}
