use super::*;
use crate::diffarray::{grad_check, GradCheckConfig, Graph, ParamStore, Tensor};
use proptest::prelude::{prop_assert, proptest};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WIDTHS: [usize; 3] = [4, 6, 8];

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn detail(seed: u64) -> (DetailEncoder, ParamStore) {
    let e = DetailEncoder::new("enc", 3, 4, &WIDTHS, 8).unwrap();
    let mut store = ParamStore::new();
    e.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    (e, store)
}

fn decoder(seed: u64) -> (FusionDecoder, ParamStore) {
    let d = FusionDecoder::new(
        "dec",
        DecoderConfig {
            latent_channels: 4,
            image_channels: 3,
            width: 6,
            field_channels: 5,
            blocks: 2,
        },
    );
    let mut store = ParamStore::new();
    d.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    (d, store)
}

#[test]
fn latent_side_is_ceiling_of_factor() {
    let (e, store) = detail(1);
    for (h, w) in [(64, 64), (61, 40), (9, 17)] {
        let g = Graph::new();
        let x = g.constant(randn(&[2, 3, h, w], 2));
        let post = e
            .encode::<ChaCha8Rng>(&g, &store.frozen(), x, x, LatentMode::Mean)
            .unwrap();
        assert_eq!(g.shape(post.z), vec![2, 4, h.div_ceil(8), w.div_ceil(8)]);
        assert_eq!(g.shape(post.logvar), g.shape(post.mean));
    }
    let e4 = DetailEncoder::new("enc", 3, 4, &WIDTHS, 4).unwrap();
    assert_eq!(e4.net.output_side(30), 8);
    assert!(DetailEncoder::new("enc", 3, 4, &WIDTHS, 6).is_err());
    assert!(DetailEncoder::new("enc", 3, 4, &WIDTHS[..2], 8).is_err());
}

#[test]
fn detail_rejects_mismatched_inputs() {
    let (e, store) = detail(3);
    let g = Graph::new();
    let a = g.constant(randn(&[1, 3, 16, 16], 4));
    let b = g.constant(randn(&[1, 3, 16, 15], 5));
    assert!(e.encode::<ChaCha8Rng>(&g, &store.frozen(), a, b, LatentMode::Mean).is_err());
}

#[test]
fn reparameterization_matches_moments() {
    let n = 40_000;
    let mu = 0.7;
    let sigma: f64 = 1.8;
    let g = Graph::new();
    let mean = g.constant(Tensor::full(&[n], mu));
    let logvar = g.constant(Tensor::full(&[n], 2.0 * sigma.ln()));
    let z = reparameterize(&g, mean, logvar, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let v = g.value(z);
    let m = v.data().iter().sum::<f64>() / n as f64;
    let var = v.data().iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    // Standard errors: σ/√n ≈ 0.009 and σ²·√(2/n) ≈ 0.023.
    assert!((m - mu).abs() < 0.05, "{m}");
    assert!((var - sigma * sigma).abs() < 0.12, "{var}");
}

#[test]
fn sampled_latent_gradients_reach_mean_and_logvar() {
    let g = Graph::new();
    let mean = g.variable(randn(&[8], 7));
    let logvar = g.variable(randn(&[8], 8));
    let z = reparameterize(&g, mean, logvar, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    g.backward(g.sum(z)).unwrap();
    assert!(g.grad(mean).unwrap().data().iter().all(|&d| (d - 1.0).abs() < 1e-12));
    assert!(g.grad(logvar).unwrap().data().iter().any(|&d| d.abs() > 1e-6));
}

#[test]
fn kl_closed_form() {
    let g = Graph::new();
    let zero = g.constant(Tensor::zeros(&[5]));
    assert!(g.value(kl_divergence(&g, zero, zero).unwrap()).data()[0].abs() < 1e-15);

    let (m, lv) = (randn(&[6], 10), randn(&[6], 11));
    let expected = m
        .data()
        .iter()
        .zip(lv.data())
        .map(|(&mu, &l)| 0.5 * (mu * mu + l.exp() - 1.0 - l))
        .sum::<f64>()
        / 6.0;
    let kl = kl_divergence(&g, g.constant(m), g.constant(lv)).unwrap();
    assert!((g.value(kl).data()[0] - expected).abs() < 1e-12);
}

#[test]
fn condition_encoder_is_deterministic_and_independent() {
    let c = ConditionEncoder::new("cond", 3, 4, &WIDTHS, 8).unwrap();
    let (_, mut store) = detail(12);
    let before = store.len();
    c.init(&mut store, &mut ChaCha8Rng::seed_from_u64(13));
    assert_eq!(store.len(), 2 * before, "condition weights must not alias detail weights");
    assert!(store.names().filter(|n| n.starts_with("cond.")).count() > 0);
    let x = randn(&[1, 3, 24, 24], 14);
    let run = || {
        let g = Graph::new();
        let v = c.encode(&g, &store.frozen(), g.constant(x.clone())).unwrap();
        g.value(v).as_ref().clone()
    };
    assert_eq!(run(), run());
    let g = Graph::new();
    let v = c.encode(&g, &store.frozen(), g.constant(x.clone())).unwrap();
    assert_eq!(g.shape(v), vec![1, 4, 3, 3]);
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let (e, store) = detail(15);
    let (hr, lr) = (randn(&[1, 3, 8, 8], 16), randn(&[1, 3, 8, 8], 17));
    let report = grad_check(
        &store,
        |g, p| {
            let post = e.encode(
                g,
                p,
                g.constant(hr.clone()),
                g.constant(lr.clone()),
                LatentMode::Sample(&mut ChaCha8Rng::seed_from_u64(18)),
            )?;
            let kl = kl_divergence(g, post.mean, post.logvar)?;
            Ok(g.add(g.sum(g.square(post.z)), kl)?)
        },
        &GradCheckConfig {
            samples: 150,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn decoder_reaches_any_target_grid() {
    let (d, store) = decoder(19);
    for (s, lr_side, out) in [(1.0, 16, (16usize, 16usize)), (2.6, 12, (32, 31)), (8.0, 8, (64, 64)), (10.0, 8, (80, 80))] {
        let g = Graph::new();
        let z = g.constant(randn(&[2, 4, out.0.div_ceil(8), out.1.div_ceil(8)], 20));
        let lr = g.constant(randn(&[2, 3, lr_side, lr_side], 21));
        let f = d.forward(&g, &store.frozen(), z, lr, s, out).unwrap();
        assert_eq!(g.shape(f), vec![2, 5, out.0, out.1]);
    }
}

#[test]
fn decoder_rejects_out_of_range_scale() {
    let (d, store) = decoder(22);
    let g = Graph::new();
    let z = g.constant(randn(&[1, 4, 2, 2], 23));
    let lr = g.constant(randn(&[1, 3, 8, 8], 24));
    for s in [0.5, MAX_DECODE_SCALE + 0.1, f64::NAN] {
        assert!(d.forward(&g, &store.frozen(), z, lr, s, (16, 16)).is_err());
    }
}

#[test]
fn decoder_output_depends_on_scale_and_latent() {
    let (d, store) = decoder(25);
    let (z, lr) = (randn(&[1, 4, 2, 2], 26), randn(&[1, 3, 8, 8], 27));
    let run = |z: &Tensor, s: f64| {
        let g = Graph::new();
        let f = d
            .forward(&g, &store.frozen(), g.constant(z.clone()), g.constant(lr.clone()), s, (16, 16))
            .unwrap();
        g.value(f).as_ref().clone()
    };
    let base = run(&z, 2.0);
    let diff = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff(&base, &run(&z, 2.5)) > 1e-6);
    assert!(diff(&base, &run(&z.map(|v| v + 1.0), 2.0)) > 1e-6);
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let (d, store) = decoder(28);
    let (z, lr) = (randn(&[1, 4, 2, 2], 29), randn(&[1, 3, 6, 6], 30));
    let report = grad_check(
        &store,
        |g, p| {
            let f = d.forward(g, p, g.constant(z.clone()), g.constant(lr.clone()), 1.7, (10, 10))?;
            Ok(g.sum(g.square(f)))
        },
        &GradCheckConfig {
            samples: 200,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

proptest! {
    #[test]
    fn kl_is_non_negative(seed in 0u64..500) {
        let g = Graph::new();
        let kl = kl_divergence(&g, g.constant(randn(&[4], seed)), g.constant(randn(&[4], seed + 1).map(|v| 3.0 * v))).unwrap();
        prop_assert!(g.value(kl).data()[0] >= 0.0);
    }
}
