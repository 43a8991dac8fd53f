use super::*;
use crate::diffarray::{grad_check, GradCheckConfig, ParamStore};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Parameter-free field given by a closure on the value of `z`.
struct FnField<F>(F);

impl<F: Fn(&Tensor, &[f64], &[f64]) -> Tensor> VelocityField for FnField<F> {
    fn velocity(&self, g: &Graph, _: &Binding<'_>, z: Var, t: &[f64], dt: &[f64], _: Option<Var>) -> Result<Var> {
        Ok(g.constant((self.0)(&g.value(z), t, dt)))
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn empty() -> ParamStore {
    ParamStore::new()
}

#[test]
fn path_endpoints_and_midpoint() {
    let z0 = randn(&[3, 4], 1);
    let z1 = randn(&[3, 4], 2);
    assert_eq!(sample_path(&z0, &z1, 0.0).unwrap(), z0);
    assert_eq!(sample_path(&z0, &z1, 1.0).unwrap(), z1);
    let neg = z1.map(|v| -v);
    assert!(sample_path(&neg, &z1, 0.5).unwrap().data().iter().all(|v| *v == 0.0));
    assert!(sample_path(&z0, &z1, 1.5).is_err());
}

#[test]
fn fm_loss_examples() {
    let (z0, z1) = (randn(&[4, 3], 3), randn(&[4, 3], 4));
    let g = Graph::new();
    let s = empty();
    let diff = z1.zip_map(&z0, |a, b| a - b).unwrap();
    let oracle = FnField(|_: &Tensor, _: &[f64], _: &[f64]| diff.clone());
    let l = fm_loss(&g, &oracle, &s.frozen(), &z0, &z1, &[0.1, 0.5, 0.7, 0.9], None).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);

    let zero = FnField(|z: &Tensor, _: &[f64], _: &[f64]| Tensor::zeros(z.shape()));
    let l = fm_loss(&g, &zero, &s.frozen(), &z0, &z0, &[0.2; 4], None).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);
    let ones = z0.map(|v| v + 1.0);
    let l = fm_loss(&g, &zero, &s.frozen(), &z0, &ones, &[0.3; 4], None).unwrap();
    assert!((g.value(l).item().unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn nonfinite_velocity_aborts() {
    let nan = FnField(|z: &Tensor, _: &[f64], _: &[f64]| Tensor::full(z.shape(), f64::NAN));
    let g = Graph::new();
    let z = randn(&[2, 2], 5);
    assert!(matches!(
        fm_loss(&g, &nan, &empty().frozen(), &z, &z, &[0.5, 0.5], None),
        Err(Error::NonFinite { .. })
    ));
    assert!(euler_sample(&nan, &empty().frozen(), &z, None, 3)
        .unwrap_err()
        .to_string()
        .contains("step 1"));
}

#[test]
fn shortcut_target_examples() {
    let g = Graph::new();
    let s = empty();
    let zt = randn(&[3, 5], 6);
    let k = randn(&[3, 5], 7);
    let constant = FnField(|_: &Tensor, _: &[f64], _: &[f64]| k.clone());
    let v = shortcut_targets(&g, &constant, &s.frozen(), &zt, &[0.0, 0.25, 0.5], &[0.25, 0.125, 0.25], None).unwrap();
    assert_eq!(v, k);

    let tagged = FnField(|z: &Tensor, t: &[f64], dt: &[f64]| z.map(|v| v * (1.0 + t[0]) + dt[0]));
    let v = shortcut_targets(&g, &tagged, &s.frozen(), &zt, &[0.3; 3], &[0.0; 3], None).unwrap();
    assert!(v.max_abs_diff(&zt.map(|x| x * 1.3)).unwrap() < 1e-15);

    let linear = FnField(|z: &Tensor, _: &[f64], _: &[f64]| z.clone());
    let dt = 0.125;
    let v = shortcut_targets(&g, &linear, &s.frozen(), &zt, &[0.25; 3], &[dt; 3], None).unwrap();
    // v1 = z, z' = z(1 + dt), v2 = z', mean = z(2 + dt)/2.
    assert!(v.max_abs_diff(&zt.map(|x| x * (2.0 + dt) / 2.0)).unwrap() < 1e-15);

    assert!(shortcut_targets(&g, &linear, &s.frozen(), &zt, &[0.8; 3], &[0.125; 3], None).is_err());

    // Finest half steps query the instantaneous velocity.
    let seen = FnField(|z: &Tensor, _: &[f64], dt: &[f64]| z.map(|_| dt[0]));
    let v = shortcut_targets(&g, &seen, &s.frozen(), &zt, &[0.5; 3], &[FINEST_STEP; 3], None).unwrap();
    assert!(v.data().iter().all(|&x| x == 0.0));
}

#[test]
fn step_input_examples() {
    assert_eq!(step_input(0.5), 0.5);
    assert_eq!(step_input(2.0 * FINEST_STEP), 2.0 * FINEST_STEP);
    assert_eq!(step_input(FINEST_STEP), 0.0);
    assert_eq!(step_input(1.0 / 1000.0), 0.0);
    assert_eq!(FINEST_STEP, 1.0 / 128.0);
}

#[test]
fn constant_field_is_self_consistent() {
    let g = Graph::new();
    let s = empty();
    let k = randn(&[2, 4], 8);
    let constant = FnField(|_: &Tensor, _: &[f64], _: &[f64]| k.clone());
    let zt = randn(&[2, 4], 9);
    let l = shortcut_loss(&g, &constant, &s.frozen(), &s.frozen(), &zt, &[0.0, 0.5], &[0.25, 0.125], None, None).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);
    let zero = FnField(|z: &Tensor, _: &[f64], _: &[f64]| Tensor::zeros(z.shape()));
    let l = shortcut_loss(&g, &zero, &s.frozen(), &s.frozen(), &zt, &[0.0, 0.5], &[0.25, 0.125], None, None).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);
}

fn mlp(seed: u64) -> (MlpVelocityNet, ParamStore) {
    let net = MlpVelocityNet::new("vel", 3, 2, 16, 2);
    let mut store = ParamStore::new();
    net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    (net, store)
}

#[test]
fn shortcut_gradient_flows_only_through_double_step() {
    let (net, store) = mlp(10);
    let (_, ema) = mlp(11);
    let zt = randn(&[4, 3], 12);
    let cond = randn(&[4, 2], 13);
    let (t, dt) = ([0.0, 0.25, 0.5, 0.0], [0.25, 0.125, 0.25, 0.5]);

    let g = Graph::new();
    let c = g.constant(cond.clone());
    let l = shortcut_loss(&g, &net, &store.trainable(), &ema.frozen(), &zt, &t, &dt, Some(c), Some(c)).unwrap();
    g.backward(l).unwrap();
    let got = g.param_grads();

    // Same loss with the target precomputed on a separate tape.
    let h = Graph::new();
    let target = shortcut_targets(&h, &net, &ema.frozen(), &zt, &t, &dt, Some(h.constant(cond.clone()))).unwrap();
    let g2 = Graph::new();
    let dt2: Vec<f64> = dt.iter().map(|d| 2.0 * d).collect();
    let v = net
        .velocity(&g2, &store.trainable(), g2.constant(zt.clone()), &t, &dt2, Some(g2.constant(cond)))
        .unwrap();
    let l2 = g2.mean(g2.square(g2.sub(v, g2.constant(target)).unwrap()));
    g2.backward(l2).unwrap();
    let want = g2.param_grads();

    assert_eq!(got.len(), store.len());
    for (name, gw) in want.iter() {
        assert!(got.get(name).unwrap().max_abs_diff(gw).unwrap() < 1e-14, "{name}");
    }
}

#[test]
fn quarter_split_routing() {
    let (net, store) = mlp(14);
    let ema = store.clone();
    for (b, sc) in [(8usize, 2usize), (4, 1), (12, 3), (7, 1)] {
        let (z0, z1) = (randn(&[b, 3], 15), randn(&[b, 3], 16));
        let cond = randn(&[b, 2], 17);
        let g = Graph::new();
        let c = g.constant(cond);
        let batch = FlowBatch {
            z0: &z0,
            z1: &z1,
            cond: Some(c),
            ema_cond: Some(c),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let r = FlowObjective::default()
            .evaluate(&g, &net, &store.trainable(), &ema.frozen(), &batch, &mut rng)
            .unwrap();
        assert_eq!(r.shortcut_indices.len(), sc);
        assert_eq!(r.fm_count, b - sc);
        assert!(!r.small_batch);
        let recombined = (r.fm * r.fm_count as f64 + r.shortcut.unwrap() * sc as f64) / b as f64;
        assert!((recombined - r.total).abs() < 1e-12);

        let mut rng2 = ChaCha8Rng::seed_from_u64(18);
        let g2 = Graph::new();
        let c2 = g2.constant((*g.value(c)).clone());
        let batch2 = FlowBatch {
            z0: &z0,
            z1: &z1,
            cond: Some(c2),
            ema_cond: Some(c2),
        };
        let r2 = FlowObjective::default()
            .evaluate(&g2, &net, &store.trainable(), &ema.frozen(), &batch2, &mut rng2)
            .unwrap();
        assert_eq!(r.shortcut_indices, r2.shortcut_indices);
        assert_eq!(r.total, r2.total);
    }
}

#[test]
fn small_batch_is_all_flow_matching() {
    let (net, store) = mlp(19);
    let (z0, z1) = (randn(&[3, 3], 20), randn(&[3, 3], 21));
    let g = Graph::new();
    let c = g.constant(randn(&[3, 2], 22));
    let batch = FlowBatch {
        z0: &z0,
        z1: &z1,
        cond: Some(c),
        ema_cond: Some(c),
    };
    let r = FlowObjective::default()
        .evaluate(&g, &net, &store.trainable(), &store.frozen(), &batch, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    assert!(r.small_batch);
    assert!(r.shortcut_indices.is_empty());
    assert_eq!(r.fm_count, 3);
    assert_eq!(r.total, r.fm);
}

#[test]
fn ablation_routes_everything_to_flow_matching() {
    let (net, store) = mlp(23);
    let (z0, z1) = (randn(&[8, 3], 24), randn(&[8, 3], 25));
    let g = Graph::new();
    let c = g.constant(randn(&[8, 2], 26));
    let batch = FlowBatch {
        z0: &z0,
        z1: &z1,
        cond: Some(c),
        ema_cond: Some(c),
    };
    let r = FlowObjective::without_shortcut()
        .evaluate(&g, &net, &store.trainable(), &store.frozen(), &batch, &mut ChaCha8Rng::seed_from_u64(2))
        .unwrap();
    assert_eq!(r.fm_count, 8);
    assert!(!r.small_batch);
}

#[test]
fn euler_constant_field_is_step_independent() {
    let z0 = randn(&[2, 6], 27);
    let k = randn(&[2, 6], 28);
    let constant = FnField(|_: &Tensor, _: &[f64], _: &[f64]| k.clone());
    let want = z0.zip_map(&k, |a, b| a + b).unwrap();
    for n in [1, 2, 4, 128] {
        let s = euler_sample(&constant, &empty().frozen(), &z0, None, n).unwrap();
        assert_eq!(s.nfe, n);
        assert!(s.z.max_abs_diff(&want).unwrap() <= 1e-6);
    }
}

#[test]
fn euler_linear_field_closed_form() {
    let z0 = randn(&[1, 5], 29);
    let linear = FnField(|z: &Tensor, _: &[f64], _: &[f64]| z.clone());
    for n in [1usize, 3, 10, 200] {
        let s = euler_sample(&linear, &empty().frozen(), &z0, None, n).unwrap();
        let f = (1.0 + 1.0 / n as f64).powi(n as i32);
        assert!(s.z.max_abs_diff(&z0.map(|v| v * f)).unwrap() < 1e-12);
    }
}

#[test]
fn one_step_is_single_euler_step() {
    let (net, store) = mlp(30);
    let z0 = randn(&[4, 3], 31);
    let c = randn(&[4, 2], 32);
    let counter = CountingField::new(&net);
    let a = one_step_sample(&counter, &store.frozen(), &z0, Some(&c)).unwrap();
    assert_eq!(counter.calls(), 1);
    assert_eq!(a.nfe, 1);
    let b = euler_sample(&net, &store.frozen(), &z0, Some(&c), 1).unwrap();
    assert_eq!(a.z, b.z);

    let zero = FnField(|z: &Tensor, _: &[f64], _: &[f64]| Tensor::zeros(z.shape()));
    assert_eq!(one_step_sample(&zero, &empty().frozen(), &z0, None).unwrap().z, z0);
    let target = randn(&[4, 3], 33);
    let memorized = target.zip_map(&z0, |a, b| a - b).unwrap();
    let exact = FnField(|_: &Tensor, _: &[f64], _: &[f64]| memorized.clone());
    let s = one_step_sample(&exact, &empty().frozen(), &z0, None).unwrap();
    assert!(s.z.max_abs_diff(&target).unwrap() < 1e-15);

    let counter = CountingField::new(&net);
    euler_sample(&counter, &store.frozen(), &z0, Some(&c), 8).unwrap();
    assert_eq!(counter.calls(), 8);
}

#[test]
fn mlp_velocity_gradients() {
    let (net, store) = mlp(34);
    let z = randn(&[3, 3], 35);
    let c = randn(&[3, 2], 36);
    let report = grad_check(
        &store,
        |g, p| {
            let v = net.velocity(g, p, g.constant(z.clone()), &[0.1, 0.5, 0.9], &[0.0, 0.25, 1.0], Some(g.constant(c.clone())))?;
            Ok(g.sum(g.square(v)))
        },
        &GradCheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed() && report.checked >= 100, "{report:?}");
}

fn conv(seed: u64) -> (ConvVelocityNet, ParamStore) {
    let net = ConvVelocityNet::new("vel", 4, 4, 8);
    let mut store = ParamStore::new();
    net.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    (net, store)
}

#[test]
fn conv_velocity_shapes_and_determinism() {
    let (net, store) = conv(37);
    for side in [8usize, 11, 5] {
        let z = randn(&[2, 4, side, side + 1], 38);
        let c = randn(&[2, 4, side, side + 1], 39);
        let run = || {
            let g = Graph::new();
            let v = net
                .velocity(&g, &store.frozen(), g.constant(z.clone()), &[0.2, 0.7], &[0.0, 0.5], Some(g.constant(c.clone())))
                .unwrap();
            (*g.value(v)).clone()
        };
        let a = run();
        assert_eq!(a.shape(), z.shape());
        assert_eq!(a, run());
    }
}

#[test]
fn conv_velocity_gradients() {
    let (net, store) = conv(40);
    let z = randn(&[2, 4, 6, 6], 41);
    let c = randn(&[2, 4, 6, 6], 42);
    let report = grad_check(
        &store,
        |g, p| {
            let v = net.velocity(g, p, g.constant(z.clone()), &[0.3, 0.6], &[0.125, 0.0], Some(g.constant(c.clone())))?;
            Ok(g.sum(g.square(v)))
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
    fn shortcut_times_on_dyadic_grid(seed in 0u64..5000) {
        let (t, dt) = sample_shortcut_times(&mut ChaCha8Rng::seed_from_u64(seed), DEFAULT_LEVELS);
        let m = -dt.log2();
        prop_assert!(m.fract() == 0.0 && (1.0..=7.0).contains(&m));
        prop_assert!(t + 2.0 * dt <= 1.0);
        prop_assert!((t / (2.0 * dt)).fract() == 0.0);
    }
}
