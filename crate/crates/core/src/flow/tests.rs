use super::*;
use crate::rng;
use alloc::vec;
use proptest::prelude::*;

fn config(dz: usize, dx: usize) -> FlowConfig {
    let mut c = FlowConfig::new(dz, dx, vec![1.0; dz]);
    c.hidden = 4;
    c.init_seed = 3;
    c
}

/// Fill every parameter with small deterministic noise.
fn randomise(flow: &mut FlowModel, seed: u64, sd: f64) {
    let mut r = rng::stream(seed, 7);
    for t in flow.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v = sd * rng::standard_normal(&mut r);
        }
    }
}

fn random_stats(flow: &FlowModel, seed: u64) -> Vec<RunningStats> {
    let mut r = rng::stream(seed, 11);
    (0..flow.config().n_blocks - 1)
        .map(|_| RunningStats {
            mean: (0..flow.dim_z()).map(|_| 0.3 * rng::standard_normal(&mut r)).collect(),
            var: (0..flow.dim_z()).map(|_| 0.5 + rng::uniform(&mut r)).collect(),
        })
        .collect()
}

fn random_flow(dz: usize, dx: usize, seed: u64) -> FlowModel {
    random_flow_with(dz, dx, seed, 0.3)
}

/// Parameter noise of 0.3 across five blocks can make the inverse badly conditioned for some seeds.
fn random_flow_with(dz: usize, dx: usize, seed: u64, sd: f64) -> FlowModel {
    let mut f = FlowModel::new(config(dz, dx)).unwrap();
    randomise(&mut f, seed, sd);
    let stats = random_stats(&f, seed);
    let cfg = f.config().clone();
    let params = f.params().clone();
    FlowModel::from_parts(cfg, params, stats).unwrap()
}

#[test]
fn identity_init_is_standard_normal_at_unit_scale() {
    let f = FlowModel::new(config(2, 3)).unwrap();
    let ld = f.log_density(&[0.0, 0.0], &[0.1, 0.2, 0.3]);
    assert!((ld + LN_2PI).abs() < 1e-12);
}

#[test]
fn identity_init_equals_baseline_gaussian() {
    let scales = vec![0.01, 0.05, 0.2];
    let mut c = FlowConfig::new(3, 4, scales.clone());
    c.init_seed = 9;
    let f = FlowModel::new(c).unwrap();
    let mut r = rng::stream(1, 0);
    for _ in 0..200 {
        let x: Vec<f64> = (0..4).map(|_| rng::standard_normal(&mut r)).collect();
        let z: Vec<f64> = scales.iter().map(|s| s * 3.0 * rng::standard_normal(&mut r)).collect();
        let expected: f64 = z
            .iter()
            .zip(&scales)
            .map(|(v, s)| crate::math::normal_log_pdf(*v, 0.0, *s))
            .sum();
        assert!((f.log_density(&z, &x) - expected).abs() < 1e-8);
    }
}

#[test]
fn single_block_constant_log_scale() {
    let mut c = config(3, 2);
    c.n_blocks = 1;
    c.hidden = 0;
    let mut f = FlowModel::new(c).unwrap();
    let id = f
        .params()
        .ids()
        .find(|id| f.params().name(*id) == "block0.hyper.scale_bias.bias")
        .unwrap();
    for v in f.params_mut().get_mut(id).data_mut() {
        *v = 2.0 * 7.0 * libm::atanh(libm::log(2.0) / 7.0) / 2.0;
    }
    let (_, ld) = f.forward_with_logdet(&[0.3, 0.1, -0.4], &[1.0, 2.0]).unwrap();
    assert!((ld + 3.0 * libm::log(2.0)).abs() < 1e-12);
}

#[test]
fn logdet_matches_numerical_jacobian() {
    let f = random_flow(3, 2, 5);
    let x = [0.4, -0.8];
    let cond = f.condition(&x).unwrap();
    let z = [0.2, -0.5, 0.9];
    let h = 1e-6;
    let mut jac = [[0.0; 3]; 3];
    for j in 0..3 {
        let mut zp = z;
        let mut zm = z;
        zp[j] += h;
        zm[j] -= h;
        let (ep, _) = cond.forward(&zp);
        let (em, _) = cond.forward(&zm);
        for i in 0..3 {
            jac[i][j] = (ep[i] - em[i]) / (2.0 * h);
        }
    }
    let det = jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
        - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
        + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]);
    let (_, ld) = cond.forward(&z);
    assert!(
        (libm::log(det.abs()) - ld).abs() < 1e-5,
        "{} vs {}",
        libm::log(det.abs()),
        ld
    );
}

#[test]
fn block_jacobians_are_triangular_in_block_order() {
    let f = random_flow(4, 2, 8);
    let cond = f.condition(&[0.3, 0.6]).unwrap();
    let u = [0.1, -0.7, 0.4, 1.1];
    for block in &cond.blocks {
        let rank = ranks(&block.order);
        for j in 0..4 {
            let mut up = u;
            up[j] += 1e-3;
            let (a, _) = block.forward(&u);
            let (b, _) = block.forward(&up);
            for i in 0..4 {
                if rank[j] > rank[i] {
                    assert!((a[i] - b[i]).abs() < 1e-8);
                }
            }
        }
    }
}

#[test]
fn round_trip_over_many_pairs() {
    let mut f = random_flow(3, 2, 13);
    // Large random weights compound over five affine blocks into maps with
    // |z| ~ 1e5; keep the map moderately conditioned.
    randomise(&mut f, 13, 0.15);
    let mut r = rng::stream(2, 0);
    let mut worst: f64 = 0.0;
    let mut worst_case = None;
    for _ in 0..1000 {
        let x = [rng::standard_normal(&mut r), rng::standard_normal(&mut r)];
        let eps: Vec<f64> = (0..3).map(|_| rng::standard_normal(&mut r)).collect();
        let cond = f.condition(&x).unwrap();
        let z = cond.inverse(&eps);
        let (back, _) = cond.forward(&z);
        for (a, b) in eps.iter().zip(&back) {
            if (a - b).abs() > worst {
                worst = (a - b).abs();
                worst_case = Some((x, eps.clone(), z.clone()));
            }
        }
    }
    assert!(worst < 1e-6, "worst round-trip error {worst} at {worst_case:?}");
}

#[test]
fn density_integrates_to_one() {
    let mut f = random_flow(2, 1, 21);
    // Milder parameters keep the mass inside the quadrature box.
    randomise(&mut f, 21, 0.1);
    let cond = f.condition(&[0.5]).unwrap();
    let step = 0.02;
    let mut total = 0.0;
    let n = (12.0 / step) as usize;
    for a in 0..n {
        for b in 0..n {
            let z = [-6.0 + (a as f64 + 0.5) * step, -6.0 + (b as f64 + 0.5) * step];
            total += libm::exp(cond.log_density(&z)) * step * step;
        }
    }
    assert!((total - 1.0).abs() < 0.01, "mass {total}");
}

#[test]
fn tape_eval_matches_plain_path() {
    let f = random_flow(3, 2, 31);
    let mut r = rng::stream(4, 0);
    let n = 6;
    let zs: Vec<f64> = (0..n * 3).map(|_| rng::standard_normal(&mut r)).collect();
    let xs: Vec<f64> = (0..n * 2).map(|_| rng::standard_normal(&mut r)).collect();
    let mut tape = Tape::new();
    let out = f.tape_forward(&mut tape, &zs, &xs, n, NormMode::Eval).unwrap();
    let ld = tape.value(out.log_density).data().to_vec();
    for k in 0..n {
        let plain = f.log_density(&zs[k * 3..k * 3 + 3], &xs[k * 2..k * 2 + 2]);
        assert!(
            (plain - ld[k]).abs() < 1e-10 * plain.abs().max(1.0),
            "{plain} vs {}",
            ld[k]
        );
    }
}

#[test]
fn train_mode_reports_batch_statistics() {
    let f = random_flow(2, 1, 41);
    let zs = [1.0, 2.0, 3.0, 4.0, 5.0, 9.0];
    let xs = [0.0, 0.0, 0.0];
    let mut tape = Tape::new();
    let out = f.tape_forward(&mut tape, &zs, &xs, 3, NormMode::Train).unwrap();
    assert_eq!(out.batch_stats.len(), 4);
    for (m, v) in &out.batch_stats {
        assert_eq!(m.len(), 2);
        assert!(v.iter().all(|x| *x >= 0.0));
    }
}

fn tape_objective(f: &FlowModel, zs: &[f64], xs: &[f64], n: usize, mode: NormMode) -> f64 {
    let mut tape = Tape::new();
    let out = f.tape_forward(&mut tape, zs, xs, n, mode).unwrap();
    let total = tape.sum(out.log_density, None).unwrap();
    tape.value(total).item().unwrap() / n as f64
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let f = random_flow(2, 2, 51);
    let mut r = rng::stream(5, 0);
    let n = 5;
    let zs: Vec<f64> = (0..n * 2).map(|_| rng::standard_normal(&mut r)).collect();
    let xs: Vec<f64> = (0..n * 2).map(|_| rng::standard_normal(&mut r)).collect();
    for mode in [NormMode::Train, NormMode::Eval] {
        let mut tape = Tape::new();
        let out = f.tape_forward(&mut tape, &zs, &xs, n, mode).unwrap();
        let total = tape.sum(out.log_density, None).unwrap();
        let grads = tape.backward(total, f.params()).unwrap();
        let h = 1e-6;
        for (b, g) in grads.tensors().iter().enumerate() {
            for k in (0..g.len()).step_by(3) {
                let mut fp = f.clone();
                fp.params_mut().tensors_mut()[b].data_mut()[k] += h;
                let mut fm = f.clone();
                fm.params_mut().tensors_mut()[b].data_mut()[k] -= h;
                let fd = (tape_objective(&fp, &zs, &xs, n, mode) - tape_objective(&fm, &zs, &xs, n, mode)) * n as f64
                    / (2.0 * h);
                let an = g.data()[k];
                assert!(
                    (fd - an).abs() <= 1e-3 * fd.abs().max(1e-2),
                    "{} [{k}] {mode:?}: fd {fd} vs {an}",
                    f.params().names()[b]
                );
            }
        }
    }
}

#[test]
fn identity_samples_pass_ks_test() {
    let scales = vec![0.5, 2.0];
    let f = FlowModel::new(FlowConfig::new(2, 1, scales.clone())).unwrap();
    let mut r = rng::stream(6, 0);
    let n = 100_000;
    for (c, s) in scales.iter().enumerate() {
        let mut v: Vec<f64> = (0..n).map(|_| f.sample(&[0.2], &mut r)[c] / s).collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d: f64 = 0.0;
        for (i, x) in v.iter().enumerate() {
            let cdf = 0.5 * libm::erfc(-x / core::f64::consts::SQRT_2);
            d = d
                .max((cdf - i as f64 / n as f64).abs())
                .max(((i + 1) as f64 / n as f64 - cdf).abs());
        }
        // 1% critical value.
        assert!(d < 1.63 / libm::sqrt(n as f64), "KS statistic {d}");
    }
}

#[test]
fn conditioning_depends_on_the_state() {
    let f = random_flow(3, 2, 5);
    let a = f.condition(&[0.4, -1.0]).unwrap();
    let b = f.condition(&[0.4, -0.9]).unwrap();
    assert_ne!(a.blocks, b.blocks);
}

#[test]
fn conditioning_is_deterministic() {
    let f = random_flow(3, 2, 5);
    let a = f.condition(&[0.4, -1.0]).unwrap();
    let b = f.condition(&[0.4, -1.0]).unwrap();
    assert_eq!(a, b);
    for (p, q) in a.blocks.iter().zip(&b.blocks) {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.mu_bias), bits(&q.mu_bias));
        assert_eq!(bits(&p.mu_weight), bits(&q.mu_weight));
        assert_eq!(bits(&p.scale_bias), bits(&q.scale_bias));
    }
}

#[test]
fn population_stats_of_identity_flow_are_the_input_moments() {
    let mut f = FlowModel::new(FlowConfig::new(2, 1, vec![2.0, 0.5])).unwrap();
    let zs = [[2.0, 0.5], [4.0, -0.5], [0.0, 1.0], [6.0, 0.0]];
    let x = [0.0];
    f.set_population_stats(zs.iter().map(|z| (&z[..], &x[..]))).unwrap();
    // The first block outputs z / base_scale: (1, 2, 0, 3) and (1, -1, 2, 0).
    let stats = f.running_stats();
    assert!((stats[0].mean[0] - 1.5).abs() < 1e-12 && (stats[0].mean[1] - 0.5).abs() < 1e-12);
    assert!((stats[0].var[0] - 5.0 / 3.0).abs() < 1e-12 && (stats[0].var[1] - 5.0 / 3.0).abs() < 1e-12);
    // Later layers see the standardised values.
    for s in &stats[1..] {
        assert!(s.mean.iter().all(|m| m.abs() < 1e-12));
        assert!(s.var.iter().all(|v| (v - 1.0).abs() < 1e-4));
    }
    let one = [[1.0, 1.0]];
    assert!(f.set_population_stats(one.iter().map(|z| (&z[..], &x[..]))).is_err());
}

#[test]
fn hidden_init_gain_scales_first_layer_and_must_be_positive() {
    let mut c = config(2, 3);
    c.hidden_init_gain = 4.0;
    let wide = FlowModel::new(c.clone()).unwrap();
    c.hidden_init_gain = 1.0;
    let unit = FlowModel::new(c.clone()).unwrap();
    let (a, b) = (wide.params().tensors()[0].data(), unit.params().tensors()[0].data());
    assert!(a.iter().zip(b).all(|(x, y)| (x - 4.0 * y).abs() < 1e-12));
    c.hidden_init_gain = 0.0;
    assert!(matches!(FlowModel::new(c), Err(FlowError::Config(_))));
}

#[test]
fn from_parts_rejects_mismatch() {
    let f = FlowModel::new(config(2, 2)).unwrap();
    let other = FlowModel::new(config(3, 2)).unwrap();
    let err = FlowModel::from_parts(f.config().clone(), other.params().clone(), f.running_stats());
    assert!(matches!(err, Err(FlowError::Incompatible(_))));
    let err = FlowModel::from_parts(f.config().clone(), f.params().clone(), vec![]);
    assert!(matches!(err, Err(FlowError::Incompatible(_))));
}

#[test]
fn dimension_errors() {
    let f = FlowModel::new(config(2, 2)).unwrap();
    assert!(matches!(f.condition(&[1.0]), Err(FlowError::Dimension { .. })));
    assert!(matches!(
        f.forward_with_logdet(&[1.0], &[0.0, 0.0]),
        Err(FlowError::Dimension { .. })
    ));
    let mut bad = config(2, 2);
    bad.base_scale = vec![1.0, 0.0];
    assert!(matches!(FlowModel::new(bad), Err(FlowError::Config(_))));
}

#[test]
fn input_normalisation_fit() {
    let mut f = FlowModel::new(config(1, 2)).unwrap();
    let xs = [[1.0, 5.0], [3.0, 5.0]];
    f.fit_input_normalization(xs.iter().map(|x| &x[..]));
    assert_eq!(f.config().input_shift, vec![2.0, 5.0]);
    assert_eq!(f.config().input_scale, vec![1.0, 1.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn round_trip_random_flows(seed in 0u64..1000, e0 in -3.0..3.0f64, e1 in -3.0..3.0f64, x in -2.0..2.0f64) {
        let f = random_flow_with(2, 1, seed, 0.15);
        let cond = f.condition(&[x]).unwrap();
        let z = cond.inverse(&[e0, e1]);
        let (back, _) = cond.forward(&z);
        prop_assert!((back[0] - e0).abs() < 1e-8 && (back[1] - e1).abs() < 1e-8);
    }
}
