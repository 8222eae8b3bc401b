mod common;

use arxtrack::estimator::{EstimatorState, WeightMode};
use arxtrack::limitmat;
use arxtrack::matpoly;
use arxtrack::mc;
use arxtrack::series::SeriesTable;
use arxtrack::sim::{self, SimConfig};
use arxtrack::ArxModel;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn b_at(model: &ArxModel, z: Complex64) -> nalgebra::DMatrix<Complex64> {
    let d = model.d();
    let mut m = nalgebra::DMatrix::<Complex64>::identity(d, d);
    let mut zk = Complex64::new(1.0, 0.0);
    for bj in model.b() {
        zk *= z;
        m += bj.map(|v| Complex64::new(v, 0.0)) * zk;
    }
    m
}

/// Coefficients of `det B(z)` (ascending) by evaluating at roots of unity
/// and inverting the DFT.
fn det_b_coefficients(model: &ArxModel) -> Vec<f64> {
    let n = model.d() * model.q() + 1;
    let values: Vec<Complex64> = (0..n)
        .map(|k| {
            let w = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * k as f64 / n as f64);
            b_at(model, w).determinant()
        })
        .collect();
    (0..n)
        .map(|j| {
            let s: Complex64 = values
                .iter()
                .enumerate()
                .map(|(k, v)| v * Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * (j * k) as f64 / n as f64))
                .sum();
            s.re / n as f64
        })
        .collect()
}

/// All roots of an ascending-coefficient polynomial by Durand–Kerner.
fn durand_kerner(coefs: &[f64]) -> Vec<Complex64> {
    let mut c = coefs.to_vec();
    let scale = c.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    while c.len() > 1 && c.last().unwrap().abs() <= 1e-12 * scale {
        c.pop();
    }
    let deg = c.len() - 1;
    let lead = c[deg];
    let monic: Vec<f64> = c.iter().map(|v| v / lead).collect();
    let eval = |z: Complex64| monic.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &a| acc * z + a);
    let mut roots: Vec<Complex64> = (0..deg).map(|k| Complex64::new(0.4, 0.9).powu(k as u32)).collect();
    for _ in 0..5000 {
        let mut delta = 0.0_f64;
        for i in 0..deg {
            let mut denom = Complex64::new(1.0, 0.0);
            for j in 0..deg {
                if i != j {
                    denom *= roots[i] - roots[j];
                }
            }
            let step = eval(roots[i]) / denom;
            roots[i] -= step;
            delta = delta.max(step.norm());
        }
        if delta < 1e-15 {
            break;
        }
    }
    roots
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    use rand::Rng;
    let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
    m.qr().q()
}

fn block_diag(block: &DMatrix<f64>, copies: usize) -> DMatrix<f64> {
    let d = block.nrows();
    let mut out = DMatrix::zeros(d * copies, d * copies);
    for i in 0..copies {
        out.view_mut((i * d, i * d), (d, d)).copy_from(block);
    }
    out
}

fn model_strategy() -> impl Strategy<Value = ArxModel> {
    (1usize..=3, 1usize..=3, 1usize..=3, any::<u64>()).prop_map(|(d, p, q, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        common::random_causal_model(&mut rng, d, p, q, 0.85)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn companion_radius_matches_polynomial_roots(seed in any::<u64>(), d in 1usize..=2, q in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = common::random_causal_model(&mut rng, d, 1, q, 5.0);
        let radius = matpoly::spectral_radius(&matpoly::companion_of_b(&model)).unwrap();
        let roots = durand_kerner(&det_b_coefficients(&model));
        let from_roots = roots.iter().map(|z| 1.0 / z.norm()).fold(0.0, f64::max);
        prop_assert!((radius - from_roots).abs() <= 1e-6 * radius.max(1.0), "{radius} vs {from_roots}");
    }

    #[test]
    fn series_convolution_identities(model in model_strategy()) {
        let t = SeriesTable::with_order(&model, 30).unwrap();
        let d = model.d();
        for k in 1..=30 {
            // D(z) B(z) = I
            let mut db = t.dk[k].clone();
            for (j, bj) in model.b().iter().enumerate() {
                if j + 1 <= k {
                    db += &t.dk[k - j - 1] * bj;
                }
            }
            prop_assert!(db.amax() <= 1e-9 * (1.0 + t.dk[k].amax()));
            // P(z) = −D(z)(A₁z + … + A_p z^p)
            let mut pa = t.pk[k].clone();
            for (i, ai) in model.a().iter().enumerate() {
                if i + 1 <= k {
                    pa += &t.dk[k - i - 1] * ai;
                }
            }
            prop_assert!(pa.amax() <= 1e-9 * (1.0 + t.pk[k].amax()));
            prop_assert_eq!(&t.qk[k], &(&t.dk[k] + &t.pk[k]));
        }
        prop_assert_eq!(&t.dk[0], &DMatrix::identity(d, d));
        prop_assert_eq!(&t.pk[0], &DMatrix::zeros(d, d));
    }

    #[test]
    fn limit_set_invariants(model in model_strategy()) {
        let (_, lim) = limitmat::limit_set(&model).unwrap();
        let n = lim.lambda.nrows();
        prop_assert_eq!(&lim.lambda, &lim.lambda.transpose());
        prop_assert!(lim.lambda.clone().cholesky().is_some());
        prop_assert!(lim.s.clone().cholesky().is_some());
        let generic = lim.lambda.clone().try_inverse().unwrap();
        let scale = generic.amax();
        prop_assert!((&generic - &lim.lambda_inv).amax() <= 1e-8 * scale);
        prop_assert!((&lim.lambda * &lim.lambda_inv - DMatrix::identity(n, n)).amax() <= 1e-8);
        let det = lim.lambda.determinant();
        prop_assert!(((lim.det_lambda - det) / det).abs() <= 1e-8);
    }

    #[test]
    fn orthogonal_similarity_invariance(model in model_strategy(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = model.d();
        let o = random_orthogonal(&mut rng, d);
        let conj = |m: &DMatrix<f64>| &o * m * o.transpose();
        let rotated = ArxModel::new(
            model.a().iter().map(conj).collect(),
            model.b().iter().map(conj).collect(),
            conj(model.gamma()),
            conj(model.delta()),
        ).unwrap();
        let r0 = matpoly::spectral_radius(&matpoly::companion_of_b(&model)).unwrap();
        let r1 = matpoly::spectral_radius(&matpoly::companion_of_b(&rotated)).unwrap();
        prop_assert!((r0 - r1).abs() <= 1e-8);
        let (_, l0) = limitmat::limit_set(&model).unwrap();
        let (_, l1) = limitmat::limit_set(&rotated).unwrap();
        let big_o = block_diag(&o, model.p() + model.q());
        let expect = &big_o * &l0.lambda * big_o.transpose();
        prop_assert!((&expect - &l1.lambda).amax() <= 1e-8 * (1.0 + l0.lambda.amax()));
        prop_assert!(((l0.det_lambda - l1.det_lambda) / l0.det_lambda).abs() <= 1e-8);
    }

    #[test]
    fn estimator_matches_batch_solution(seed in any::<u64>(), wls in any::<bool>(), steps in 1usize..150) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (delta, d) = (4, 2);
        let mode = if wls { WeightMode::Wls { gamma: 0.7 } } else { WeightMode::Ls };
        let mut st = EstimatorState::zeros(delta, d, mode).unwrap();
        let mut s = DMatrix::<f64>::identity(delta, delta);
        let mut rhs = DMatrix::<f64>::zeros(delta, d);
        for _ in 0..steps {
            let phi = DVector::from_fn(delta, |_, _| rng.random_range(-3.0..3.0));
            let x = DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0));
            let u = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            let a = st.update(&phi, &x, &u).unwrap();
            s += a * &phi * phi.transpose();
            rhs += a * &phi * (&x - &u).transpose();
        }
        let batch = s.lu().solve(&rhs).unwrap();
        prop_assert!((&batch - &st.theta_hat).amax() <= 1e-8 * (1.0 + batch.amax()));
    }

    #[test]
    fn ks_statistic_bounds(xs in prop::collection::vec(-6.0f64..6.0, 1..200)) {
        let ks = mc::ks_normality(&xs);
        let m = xs.len() as f64;
        prop_assert!(ks >= 1.0 / (2.0 * m) - 1e-7 && ks <= 1.0);
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assert_eq!(ks, mc::ks_normality(&sorted));
    }

    #[test]
    fn normal_cdf_symmetry(x in -10.0f64..10.0) {
        let (a, b) = (mc::normal_cdf(x), mc::normal_cdf(-x));
        prop_assert!((a + b - 1.0).abs() < 1e-7);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn closed_loop_identity(seed in any::<u64>(), wls in any::<bool>()) {
        let mut cfg = SimConfig::new(common::diag_model(), 200, seed);
        if wls {
            cfg.mode = WeightMode::Wls { gamma: 1.0 };
        }
        let trace = sim::run(&cfg).unwrap();
        prop_assert!(trace.max_identity_residual <= 1e-9 * (1.0 + trace.records.iter().map(|r| r.x.amax()).fold(0.0, f64::max)));
        prop_assert_eq!(trace.records.len(), 200);
        let again = sim::run(&cfg).unwrap();
        prop_assert_eq!(trace.to_csv(), again.to_csv());
    }

    #[test]
    fn oracle_estimate_gives_optimal_cost(seed in any::<u64>()) {
        let model = common::diag_model();
        let mut cfg = SimConfig::new(model.clone(), 300, seed);
        cfg.theta0 = Some(model.theta());
        cfg.freeze_estimator = true;
        let trace = sim::run(&cfg).unwrap();
        // with θ̂ ≡ θ the tracking error is exactly ε + ξ
        prop_assert!((&trace.cost - &trace.delta_avg).amax() <= 1e-9);
        prop_assert_eq!(trace.theta_error(), 0.0);
    }
}
