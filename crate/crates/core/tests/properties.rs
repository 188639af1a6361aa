//! Randomized invariants across modules.

mod common;

use proptest::prelude::*;
use rand::Rng;
use wideprior::activations::{act_init, Activation, ActivationKind, ActivationModel, Negated, Scaled};
use wideprior::autodiff::{Graph, ParamStore};
use wideprior::bnn::{bnn_sample_functions, mc_summary, BnnConfig, FunctionSampleBatch, PriorParams, SampleSource};
use wideprior::gp::{gram, kernel_eval, KernelSpec, MeasurementSet};
use wideprior::hmc::{leapfrog, FnDensity, LogDensity, PhasePoint};
use wideprior::linalg::{cholesky, Matrix};
use wideprior::metrics::compare_batches;
use wideprior::random::{normal, stream_rng};
use wideprior::trainer::Adam;
use wideprior::wasserstein::{w2_gaussian, GaussianSummary};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, ..ProptestConfig::default() }
}

fn kernel(rbf: bool, l: f64, amp: f64) -> KernelSpec {
    if rbf {
        KernelSpec::rbf(l, amp)
    } else {
        KernelSpec::matern52(l, amp)
    }
}

fn gaussian(seed: u64, n: usize) -> GaussianSummary<f64> {
    let mut rng = stream_rng(seed, 0);
    let m = Matrix::from_fn(n, n, |_, _| normal::<f64, _>(&mut rng));
    let cov = m.matmul_t(&m).scale(1.0 / n as f64).add_diag(0.05).symmetrize();
    GaussianSummary::new((0..n).map(|_| normal(&mut rng)).collect(), cov).unwrap()
}

fn normal_batch(seed: u64, s: usize, g: usize, shift: f64) -> FunctionSampleBatch<f64> {
    let mut rng = stream_rng(seed, 0);
    let values = Matrix::from_fn(s, g, |_, j| shift + (1.0 + j as f64 * 0.1) * normal::<f64, _>(&mut rng));
    let grid = Matrix::column((0..g).map(|j| j as f64).collect());
    FunctionSampleBatch::new(values, grid, SampleSource::Gp)
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn random_graph_gradients_match_finite_differences(seed in any::<u64>()) {
        let (g, store) = common::random_graph(&mut stream_rng(seed, 0));
        let e = common::gradient_error(&g, &store);
        prop_assert!(e < 1e-5, "relative error {e:.3e}");
    }

    #[test]
    fn gradient_of_a_sum_is_the_sum_of_gradients(seed in any::<u64>()) {
        let mut rng = stream_rng(seed, 0);
        let (first, store) = common::random_graph(&mut rng);
        let m = common::uniform_matrix(&mut rng, 3, 3);
        // sum(tanh(a·b) ⊙ m), appended to an existing graph or on its own.
        let second = |g: &mut Graph<f64>| {
            let a = g.param("a");
            let b = g.param("b");
            let c = g.constant(m.clone());
            let ab = g.matmul(a, b);
            let t = g.tanh(ab);
            let w = g.mul(t, c);
            g.sum(w)
        };
        let mut alone = Graph::new();
        let out = second(&mut alone);
        alone.set_output(out);
        let mut joint = first.clone();
        let head = joint.output().unwrap();
        let tail = second(&mut joint);
        let total = joint.add(head, tail);
        joint.set_output(total);

        let grads = |g: &Graph<f64>| {
            let mut s: ParamStore<f64> = store.clone();
            let mut g = g.clone();
            g.forward(&s).unwrap();
            g.backward(&mut s).unwrap();
            s.flat_grads()
        };
        let (g1, g2, g12) = (grads(&first), grads(&alone), grads(&joint));
        for ((x, y), z) in g1.iter().zip(&g2).zip(&g12) {
            prop_assert!((x + y - z).abs() <= 1e-12 * (1.0 + z.abs()), "{x} + {y} vs {z}");
        }
    }

    #[test]
    fn kernels_are_translation_invariant(
        rbf in any::<bool>(),
        l in 0.1f64..3.0,
        amp in 0.1f64..3.0,
        dim in prop::sample::select(vec![1usize, 2, 16]),
        seed in any::<u64>(),
    ) {
        let k = kernel(rbf, l, amp);
        let mut rng = stream_rng(seed, 0);
        let mut draw = |scale: f64| (0..dim).map(|_| scale * rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (a, b, shift) = (draw(2.0), draw(2.0), draw(10.0));
        let a2: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let b2: Vec<f64> = b.iter().zip(&shift).map(|(x, s)| x + s).collect();
        prop_assert!((kernel_eval(&k, &a, &b) - kernel_eval(&k, &a2, &b2)).abs() < 1e-12);
    }

    #[test]
    fn gram_is_positive_definite_after_jitter(
        rbf in any::<bool>(),
        l in 0.2f64..3.0,
        dim in prop::sample::select(vec![1usize, 2, 16]),
        n in 2usize..40,
        seed in any::<u64>(),
    ) {
        let k = kernel(rbf, l, 1.0);
        let mut rng = stream_rng(seed, 0);
        let x = Matrix::from_fn(n, dim, |_, _| rng.random_range(-2.0..2.0));
        let g = gram(&k, &x, k.default_jitter()).unwrap();
        prop_assert!(cholesky(&g, 0.0).is_ok());
    }

    #[test]
    fn activation_derivatives_match_finite_differences(
        kind in prop::sample::select(vec![
            ActivationKind::FixedTanh,
            ActivationKind::FixedSilu,
            ActivationKind::Rational,
            ActivationKind::pwl_default(),
            ActivationKind::MiniMlp,
        ]),
        x in -4.0f64..4.0,
        seed in any::<u64>(),
    ) {
        let base = act_init::<f64>(kind, seed);
        let mut rng = stream_rng(seed, 1);
        let eta: Vec<f64> = base.eta.iter().map(|v| v + 0.1 * normal::<f64, _>(&mut rng)).collect();
        if let ActivationKind::Pwl { knots, low, high } = kind {
            let step = (high - low) / (knots - 1) as f64;
            let nearest = ((x - low) / step).round() * step + low;
            prop_assume!((x - nearest).abs() > 1e-3);
        }
        let h = 1e-6;
        let fd_x = (base.eval(&eta, x + h) - base.eval(&eta, x - h)) / (2.0 * h);
        let (_, dx) = base.eval_dx(&eta, x);
        prop_assert!((dx - fd_x).abs() <= 1e-5 * (1.0 + fd_x.abs()), "d/dx {dx} vs {fd_x}");

        let mut deta = vec![0.0; eta.len()];
        base.eval_grad(&eta, x, 1.0, &mut deta);
        for k in 0..eta.len() {
            let mut ep = eta.clone();
            ep[k] += h;
            let mut em = eta.clone();
            em[k] -= h;
            let fd = (base.eval(&ep, x) - base.eval(&em, x)) / (2.0 * h);
            prop_assert!((deta[k] - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "d/deta[{k}] {} vs {fd}", deta[k]);
        }
    }

    #[test]
    fn rational_activation_has_no_poles(seed in any::<u64>(), x in -1e6f64..1e6) {
        let mut rng = stream_rng(seed, 0);
        let eta: Vec<f64> = (0..10).map(|_| normal::<f64, _>(&mut rng)).collect();
        let m = ActivationModel::new(ActivationKind::Rational, eta).unwrap();
        prop_assert!(m.value(x).is_finite());
    }

    #[test]
    fn w2_is_a_symmetric_shift_invariant_metric(seed in any::<u64>(), n in 1usize..12) {
        let (a, b, c) = (gaussian(seed, n), gaussian(seed ^ 1, n), gaussian(seed ^ 2, n));
        let ab = w2_gaussian(&a, &b).unwrap();
        let ba = w2_gaussian(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-8);

        let shift: Vec<f64> = (0..n).map(|i| 3.0 - i as f64).collect();
        let moved = |g: &GaussianSummary<f64>| {
            GaussianSummary::new(g.mean.iter().zip(&shift).map(|(m, s)| m + s).collect(), g.cov.clone()).unwrap()
        };
        let moved_ab = w2_gaussian(&moved(&a), &moved(&b)).unwrap();
        prop_assert!((moved_ab - ab).abs() < 1e-10 * (1.0 + ab));

        let ac = w2_gaussian(&a, &c).unwrap();
        let bc = w2_gaussian(&b, &c).unwrap();
        prop_assert!(ac <= (ab.sqrt() + bc.sqrt()).powi(2) + 1e-6);
    }

    #[test]
    fn metrics_are_symmetric_ordered_and_scale_equivariant(
        seed in any::<u64>(),
        shift in -1.0f64..1.0,
        c in prop::sample::select(vec![-3.0f64, -0.5, 0.25, 2.0]),
    ) {
        let a = normal_batch(seed, 120, 6, 0.0);
        let b = normal_batch(seed ^ 7, 120, 6, shift);
        let ab = compare_batches(&a, &b).unwrap();
        let ba = compare_batches(&b, &a).unwrap();
        prop_assert!(ab.w2 >= ab.w1 - 1e-12);
        for (x, y) in ab.values().iter().zip(ba.values()) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()), "{x} vs {y}");
        }
        let scale = |batch: &FunctionSampleBatch<f64>| {
            FunctionSampleBatch::new(batch.values.scale(c), batch.points.clone(), SampleSource::Gp)
        };
        let scaled = compare_batches(&scale(&a), &scale(&b)).unwrap();
        prop_assert!((scaled.w1 - c.abs() * ab.w1).abs() <= 1e-9 * (1.0 + ab.w1));
        prop_assert!((scaled.mean_mse - c * c * ab.mean_mse).abs() <= 1e-9 * (1.0 + ab.mean_mse));
    }

    #[test]
    fn adam_with_zero_gradient_is_the_identity(
        params in prop::collection::vec(-10.0f64..10.0, 1..20),
        steps in 1usize..30,
    ) {
        let mut p = params.clone();
        let mut adam = Adam::new(p.len(), 0.01, 0.9, 0.999, 1e-8);
        let zeros = vec![0.0; p.len()];
        for _ in 0..steps {
            adam.step(&mut p, &zeros);
        }
        prop_assert_eq!(p, params);
    }

    #[test]
    fn leapfrog_is_reversible(seed in any::<u64>(), eps in 0.01f64..0.5, steps in 1usize..60) {
        let mut rng = stream_rng(seed, 0);
        let scales: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
        let target = FnDensity {
            dim: 3,
            f: |q: &[f64], g: &mut [f64]| {
                let mut lp = 0.0;
                for i in 0..3 {
                    let z = q[i] / scales[i];
                    g[i] = -z / scales[i] - 0.1 * q[i].powi(3);
                    lp -= 0.5 * z * z + 0.025 * q[i].powi(4);
                }
                lp
            },
        };
        let q: Vec<f64> = (0..3).map(|_| normal(&mut rng)).collect();
        let p: Vec<f64> = (0..3).map(|_| normal(&mut rng)).collect();
        let mut grad = vec![0.0; 3];
        let lp = target.log_density_grad(&q, &mut grad);
        let start = PhasePoint { q: q.clone(), p, grad, log_density: lp };
        let mut end = leapfrog(&target, &start, eps, steps);
        prop_assume!(end.log_density.is_finite());
        end.p.iter_mut().for_each(|v| *v = -*v);
        let back = leapfrog(&target, &end, eps, steps);
        for (a, b) in back.q.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}

proptest! {
    #![proptest_config(cases(16))]

    #[test]
    fn negation_and_scaling_symmetries_are_exact(
        lv in prop::array::uniform4(-1.0f64..1.0),
        alpha in 0.2f64..3.0,
        seed in any::<u64>(),
    ) {
        let cfg = BnnConfig { remove_output_bias: true, ..BnnConfig::new(2, 32) };
        let x = MeasurementSet::new(Matrix::from_fn(5, 2, |i, j| (i as f64 - 2.0) * 0.6 + j as f64 * 0.2)).unwrap();
        let params = PriorParams::from_array(lv);
        let act = act_init::<f64>(ActivationKind::Rational, seed);
        let eta = &act.eta;
        let base = bnn_sample_functions(&cfg, &params, &act, eta, &x, 200, seed).unwrap();
        let neg = bnn_sample_functions(&cfg, &params, &Negated(act.clone()), eta, &x, 200, seed).unwrap();
        let (sb, sn) = (mc_summary(&base, 0.0), mc_summary(&neg, 0.0));
        let gap = sb.cov.sub(&sn.cov).max_abs();
        prop_assert!(gap < 1e-12, "negated covariance gap {gap:.2e}");

        let scaled = bnn_sample_functions(&cfg, &params, &Scaled { inner: act.clone(), alpha }, eta, &x, 200, seed)
            .unwrap();
        let mut moved = params;
        moved.log_var_w_out += 2.0 * alpha.ln();
        let reparam = bnn_sample_functions(&cfg, &moved, &act, eta, &x, 200, seed).unwrap();
        for (a, b) in scaled.values.data().iter().zip(reparam.values.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

/// Finite-width sample covariances fluctuate more (excess kurtosis ∝ 1/H),
/// so the distance between summaries at H and 4H shrinks with H.
#[test]
fn summary_distance_shrinks_with_width() {
    let x = MeasurementSet::<f64>::grid_1d(-2.0, 2.0, 16).unwrap();
    let mut eta = vec![0.0; 10];
    eta[3] = 1.0;
    let cubic = ActivationModel::new(ActivationKind::Rational, eta).unwrap();
    let params = PriorParams::from_array([-1.0, -1.0, 0.0, 0.0]);
    let replicates = 100;
    let distance = |h: usize| {
        let total: f64 = (0..replicates as u64)
            .map(|r| {
                let summary = |width: usize, tag: u64| {
                    let cfg = BnnConfig::new(1, width);
                    let batch = bnn_sample_functions(&cfg, &params, &cubic, &cubic.eta, &x, 512, r * 8 + tag).unwrap();
                    mc_summary(&batch, 1e-6)
                };
                w2_gaussian(&summary(h, 0), &summary(4 * h, 1)).unwrap() / x.len() as f64
            })
            .sum();
        total / replicates as f64
    };
    let d: Vec<f64> = [64, 256, 1024].into_iter().map(distance).collect();
    assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
}
