use std::fmt;
use std::str::FromStr;

use flowgs_core::diffarray::{grad_check, Binding, GradCheckConfig, ParamStore};
use flowgs_core::flowcore::{euler_sample, ConvVelocityNet, CountingField, VelocityField};
use flowgs_core::gsfield::{covariance_from_scales, gaussian_pdf_op, GaussianRenderer, RenderConfig};
use flowgs_core::latentnet::{DecoderConfig, FusionDecoder};
use flowgs_core::{Error, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Oracle suites runnable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleSuite {
    /// Windowed renderer against the dense sum.
    Render,
    /// Tape gradients against central differences.
    Grad,
    /// Euler integration against closed-form trajectories.
    Ode,
}

impl FromStr for OracleSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "render" => Ok(Self::Render),
            "grad" => Ok(Self::Grad),
            "ode" => Ok(Self::Ode),
            other => Err(Error::Config(format!("unknown oracle suite '{other}' (expected render, grad or ode)"))),
        }
    }
}

impl fmt::Display for OracleSuite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Render => "render",
            Self::Grad => "grad",
            Self::Ode => "ode",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleOutcome {
    pub suite: OracleSuite,
    pub pass: bool,
    pub summary: String,
}

impl fmt::Display for OracleOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", self.suite, if self.pass { "PASS" } else { "FAIL" }, self.summary)
    }
}

pub fn run_oracle(suite: OracleSuite) -> Result<OracleOutcome> {
    let (pass, summary) = match suite {
        OracleSuite::Render => render_oracle()?,
        OracleSuite::Grad => grad_oracle()?,
        OracleSuite::Ode => ode_oracle()?,
    };
    Ok(OracleOutcome { suite, pass, summary })
}

/// Largest windowed-vs-dense deviation accepted for kernels with 3σ inside the window.
pub const RENDER_TOLERANCE: f64 = 1e-5;

fn renderer(kernels: usize, channels: usize, window: usize) -> GaussianRenderer {
    GaussianRenderer::new(
        "render",
        RenderConfig {
            kernels,
            channels,
            out_channels: 3,
            window,
        },
    )
}

fn random_renderer(r: &GaussianRenderer, seed: u64, max_sigma: f64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    r.init(&mut store, &mut rng);
    let scales = [r.bank.log_sx_name(), r.bank.log_sy_name()];
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let t = store.get_mut(&name).expect("listed");
        if scales.contains(&name) {
            t.data_mut().iter_mut().for_each(|v| *v = v.min(max_sigma.ln()));
        } else if name != r.bank.theta_name() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.5 * rng.random_range(-1.0..1.0));
        }
    }
    store
}

fn render_oracle() -> Result<(bool, String)> {
    let window = 7;
    let r = renderer(100, 16, window);
    let max_sigma = (window / 2) as f64 / 3.0;
    let mut worst = 0.0f64;
    let fields = 20;
    for i in 0..fields {
        let store = random_renderer(&r, 100 + i, max_sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(200 + i);
        let field = Tensor::from_fn(&[1, 16, 16, 16], |_| rng.random_range(-1.0..1.0));
        let g = Graph::new();
        let windowed = g.value(r.forward(&g, &store.frozen(), g.constant(field.clone()))?);
        worst = worst.max(windowed.max_abs_diff(&r.render_bruteforce(&store, &field)?)?);
    }
    Ok((
        worst <= RENDER_TOLERANCE,
        format!("{fields} fields of 16x16, window {window}, max |windowed - dense| {worst:.3e} (tol {RENDER_TOLERANCE:e})"),
    ))
}

fn grad_oracle() -> Result<(bool, String)> {
    let cfg = |samples| GradCheckConfig {
        samples,
        ..GradCheckConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut results = Vec::new();

    let m = 24;
    let mut store = ParamStore::new();
    store.insert("mu", Tensor::from_fn(&[m, 2], |_| rng.random_range(-1.0..1.0)));
    store.insert("log_sx", Tensor::from_fn(&[m], |_| rng.random_range(-0.7..0.5)));
    store.insert("log_sy", Tensor::from_fn(&[m], |_| rng.random_range(-0.7..0.5)));
    store.insert("theta", Tensor::from_fn(&[m], |_| rng.random_range(0.0..3.1)));
    store.insert("opacity", Tensor::from_fn(&[m], |_| rng.random_range(-2.0..2.0)));
    let queries: Vec<[f64; 2]> = (0..m).map(|_| [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)]).collect();
    results.push((
        "pdf",
        grad_check(
            &store,
            |g, p| {
                let cov = covariance_from_scales(g, g.param(p, "log_sx")?, g.param(p, "log_sy")?, g.param(p, "theta")?)?;
                let pdf = gaussian_pdf_op(g, &queries, g.param(p, "mu")?, cov)?;
                Ok(g.sum(g.mul(pdf, g.sigmoid(g.param(p, "opacity")?))?))
            },
            &cfg(5 * m),
        )?,
    ));

    let rend = renderer(10, 4, 5);
    let mut store = random_renderer(&rend, 301, 1.5);
    store.insert("field", Tensor::from_fn(&[1, 4, 7, 7], |_| rng.random_range(-1.0..1.0)));
    let probe = Tensor::from_fn(&[1, 3, 7, 7], |_| rng.random_range(-1.0..1.0));
    results.push((
        "render",
        grad_check(
            &store,
            |g, p| {
                let out = rend.forward(g, p, g.param(p, "field")?)?;
                Ok(g.sum(g.mul(out, g.constant(probe.clone()))?))
            },
            &cfg(200),
        )?,
    ));

    let net = ConvVelocityNet::new("vel", 3, 3, 6);
    let mut store = ParamStore::new();
    net.init(&mut store, &mut rng);
    let z = Tensor::randn(&[2, 3, 4, 4], &mut rng);
    let c = Tensor::randn(&[2, 3, 4, 4], &mut rng);
    results.push((
        "velocity",
        grad_check(
            &store,
            |g, p| {
                let v = net.velocity(g, p, g.constant(z.clone()), &[0.2, 0.7], &[0.5, 0.0], Some(g.constant(c.clone())))?;
                Ok(g.mean(g.square(v)))
            },
            &cfg(200),
        )?,
    ));

    let dec = FusionDecoder::new(
        "dec",
        DecoderConfig {
            latent_channels: 3,
            image_channels: 3,
            width: 4,
            field_channels: 4,
            blocks: 1,
        },
    );
    let mut store = ParamStore::new();
    dec.init(&mut store, &mut rng);
    store.insert("latent", Tensor::randn(&[1, 3, 2, 2], &mut rng));
    let lr = Tensor::from_fn(&[1, 3, 6, 6], |_| rng.random_range(0.0..1.0));
    results.push((
        "fusion",
        grad_check(
            &store,
            |g, p| {
                let f = dec.forward(g, p, g.param(p, "latent")?, g.constant(lr.clone()), 2.5, (15, 15))?;
                Ok(g.mean(g.sin(f)))
            },
            &cfg(200),
        )?,
    ));

    let pass = results.iter().all(|(_, r)| r.passed());
    let summary = results
        .iter()
        .map(|(name, r)| {
            let err = r.worst.as_ref().map_or(0.0, |w| w.error);
            format!("{name} {} coords max err {err:.1e}", r.checked)
        })
        .collect::<Vec<_>>()
        .join(", ");
    Ok((pass, format!("{summary} (tol 1e-3)")))
}

/// `v(z, t) = a + b·t` for every state.
struct AffineInTime {
    a: f64,
    b: f64,
}

impl VelocityField for AffineInTime {
    fn velocity(&self, g: &Graph, _: &Binding<'_>, z: Var, t: &[f64], _: &[f64], _: Option<Var>) -> Result<Var> {
        let shape = g.shape(z);
        let per_row = shape[1..].iter().product::<usize>();
        Ok(g.constant(Tensor::from_fn(&shape, |i| self.a + self.b * t[i / per_row])))
    }
}

fn ode_oracle() -> Result<(bool, String)> {
    let empty = ParamStore::new();
    let p = empty.frozen();
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    let z0 = Tensor::from_fn(&[16, 2], |_| rng.random_range(-512..512) as f64 / 256.0);

    // A constant field is integrated exactly by any number of Euler steps.
    let constant = AffineInTime { a: 0.75, b: 0.0 };
    let mut ends = Vec::new();
    for nfe in [1, 2, 4, 128] {
        ends.push(euler_sample(&constant, &p, &z0, None, nfe)?.z);
    }
    let invariant = ends.iter().all(|e| e.data() == ends[0].data());

    // For v = t the exact displacement is 1/2 and n Euler steps give (n − 1)/(2n).
    let ramp = AffineInTime { a: 0.0, b: 1.0 };
    let mut errors_ok = true;
    let mut counts_ok = true;
    for n in [1usize, 2, 8, 64] {
        let counter = CountingField::new(&ramp);
        let end = euler_sample(&counter, &p, &z0, None, n)?;
        counts_ok &= counter.calls() == n && end.nfe == n;
        let want = (n as f64 - 1.0) / (2.0 * n as f64);
        let err = end
            .z
            .data()
            .iter()
            .zip(z0.data())
            .map(|(e, s)| (e - s - want).abs())
            .fold(0.0, f64::max);
        errors_ok &= err < 1e-12;
    }
    Ok((
        invariant && errors_ok && counts_ok,
        format!(
            "constant-field invariance over nfe 1/2/4/128 {}, ramp-field Euler sums {}, evaluation counts {}",
            if invariant { "exact" } else { "broken" },
            if errors_ok { "match closed form" } else { "off" },
            if counts_ok { "match" } else { "off" }
        ),
    ))
}
