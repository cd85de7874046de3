use std::sync::Arc;

use nalgebra::DMatrix;
use proptest::prelude::*;
use yosida::estimates::energy_identity_residual;
use yosida::integrator::solve;
use yosida::noise::sample_path;
use yosida::operators::hs_norm_sq;
use yosida::resolvent::{regularized_diffusion, resolve, yosida};
use yosida::{
    AdditiveNoise, Constants, DiscretePLaplacian, GelfandTriple, LinearDrift, MultiplicativeScalar,
    OperatorPair, Profile, ResolventOptions, ScalarPower, Scheme, SolverOptions,
};

fn constants(c1: f64, c2: f64, p: f64, growth: f64) -> Constants {
    Constants {
        c1,
        c2,
        p,
        growth,
        f: Profile::Constant(0.0),
        g: Profile::Constant(0.0),
        horizon: 1.0,
    }
}

fn instances() -> Vec<(&'static str, OperatorPair, GelfandTriple)> {
    let mut out = Vec::new();
    out.push((
        "linear",
        OperatorPair::new(
            Arc::new(LinearDrift { dim: 2, a: 2.0 }),
            Arc::new(MultiplicativeScalar {
                dim: 2,
                sigma: 0.5,
                modes: 1,
            }),
            constants(1.875, 0.0, 2.0, 4.0),
        )
        .unwrap(),
        GelfandTriple::euclidean(2, 2.0).unwrap(),
    ));
    out.push((
        "power4",
        OperatorPair::new(
            Arc::new(ScalarPower { dim: 3, p: 4.0 }),
            Arc::new(AdditiveNoise::scaled_identity(3, 2, 0.5)),
            constants(1.0, 0.0, 4.0, 1.0),
        )
        .unwrap(),
        GelfandTriple::euclidean(3, 4.0).unwrap(),
    ));
    out.push((
        "power1.5",
        OperatorPair::new(
            Arc::new(ScalarPower { dim: 2, p: 1.5 }),
            Arc::new(AdditiveNoise::zero(2, 1)),
            constants(1.0, 0.0, 1.5, 1.0),
        )
        .unwrap(),
        GelfandTriple::euclidean(2, 1.5).unwrap(),
    ));
    let grid = GelfandTriple::dirichlet_grid(8, 3.0).unwrap();
    out.push((
        "plaplacian",
        OperatorPair::new(
            Arc::new(DiscretePLaplacian::on(&grid).unwrap()),
            Arc::new(MultiplicativeScalar {
                dim: 8,
                sigma: 0.5,
                modes: 8,
            }),
            constants(1.0, 0.125, 3.0, 1.0),
        )
        .unwrap(),
        grid,
    ));
    out
}

fn scaled_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(-1.0f64..1.0, n), -3.0f64..3.0)
        .prop_map(|(v, e)| v.into_iter().map(|x| x * 10f64.powf(e)).collect())
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn tol(opts: &ResolventOptions, triple: &GelfandTriple, x: &[f64], y: &[f64]) -> f64 {
    let nx = triple.h_norm(x).unwrap();
    let ny = triple.h_norm(y).unwrap();
    opts.abs_tol(nx.max(ny))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn resolvent_is_a_contraction(
        which in 0usize..4,
        log_lambda in -3.0f64..1.0,
        t in 0.0f64..1.0,
        x in scaled_vec(8),
        y in scaled_vec(8),
    ) {
        let (_, pair, triple) = &instances()[which];
        let n = pair.dim();
        let (x, y) = (&x[..n], &y[..n]);
        let lambda = 10f64.powf(log_lambda);
        let opts = ResolventOptions::default();
        let jx = resolve(pair, triple, lambda, t, x, &opts).unwrap();
        let jy = resolve(pair, triple, lambda, t, y, &opts).unwrap();
        let slack = 2.0 * tol(&opts, triple, x, y);
        let lhs = triple.h_norm(&sub(&jx.point, &jy.point)).unwrap();
        let rhs = triple.h_norm(&sub(x, y)).unwrap();
        prop_assert!(lhs <= rhs + slack, "{lhs} > {rhs} + {slack}");

        // Yosida approximation: Lipschitz with constant 1/λ.
        let ax = yosida(pair, triple, lambda, t, x, &opts).unwrap();
        let ay = yosida(pair, triple, lambda, t, y, &opts).unwrap();
        let lhs = triple.h_norm(&sub(&ax, &ay)).unwrap();
        prop_assert!(lhs <= (rhs + slack) / lambda, "{lhs} > {rhs} / {lambda}");
    }

    #[test]
    fn regularized_diffusion_estimate(
        which in prop::sample::select(vec![0usize, 3]),
        log_lambda in -3.0f64..1.0,
        x in scaled_vec(8),
        y in scaled_vec(8),
    ) {
        let (_, pair, triple) = &instances()[which];
        let n = pair.dim();
        let (x, y) = (&x[..n], &y[..n]);
        let lambda = 10f64.powf(log_lambda);
        let opts = ResolventOptions::default();
        let bx = regularized_diffusion(pair, triple, lambda, 0.5, x, &opts).unwrap();
        let by = regularized_diffusion(pair, triple, lambda, 0.5, y, &opts).unwrap();
        let lhs = 0.5 * hs_norm_sq(triple, &(&bx - &by));
        let d = triple.h_norm(&sub(x, y)).unwrap();
        let slack = tol(&opts, triple, x, y);
        let rhs = (d + 2.0 * slack).powi(2) / lambda;
        prop_assert!(lhs <= rhs * (1.0 + 1e-12), "{lhs} > {rhs}");
    }

    #[test]
    fn yosida_pairing_identity(
        which in 0usize..4,
        log_lambda in -3.0f64..1.0,
        x in scaled_vec(8),
    ) {
        let (_, pair, triple) = &instances()[which];
        let n = pair.dim();
        let x = &x[..n];
        let lambda = 10f64.powf(log_lambda);
        let opts = ResolventOptions::default();
        let c2 = pair.constants().c2;
        let j = resolve(pair, triple, lambda, 0.2, x, &opts).unwrap().point;
        let ay = yosida(pair, triple, lambda, 0.2, x, &opts).unwrap();
        let aj: Vec<f64> = pair
            .eval_drift(0.2, &j)
            .unwrap()
            .iter()
            .zip(&j)
            .map(|(a, b)| a + c2 * b)
            .collect();
        let lhs = triple.pairing(&ay, x).unwrap();
        let first = triple.pairing(&aj, &j).unwrap();
        let second = lambda * triple.h_norm(&ay).unwrap().powi(2);
        let scale = lhs.abs() + first.abs() + second;
        prop_assert!((lhs - first - second).abs() <= 1e-8 * scale.max(f64::MIN_POSITIVE),
            "{lhs} vs {first} + {second}");
    }

    #[test]
    fn resolvent_tends_to_identity(which in 0usize..4, x in scaled_vec(8)) {
        let (_, pair, triple) = &instances()[which];
        let n = pair.dim();
        let x = &x[..n];
        let opts = ResolventOptions::default();
        let slack = 2.0 * opts.abs_tol(triple.h_norm(x).unwrap());
        let mut prev = f64::INFINITY;
        for k in 0..16 {
            let lambda = 0.5f64.powi(k);
            let j = resolve(pair, triple, lambda, 0.0, x, &opts).unwrap();
            let gap = triple.h_norm(&sub(&j.point, x)).unwrap();
            prop_assert!(gap <= prev + slack, "λ = {lambda}: {gap} > {prev}");
            prev = gap;
        }
    }

    #[test]
    fn scalar_power_matches_bisection(p in 1.5f64..5.0, log_lambda in -3.0f64..1.0, y in scaled_vec(3)) {
        let pair = OperatorPair::new(
            Arc::new(ScalarPower { dim: 3, p }),
            Arc::new(AdditiveNoise::zero(3, 1)),
            constants(1.0, 0.0, p, 1.0),
        ).unwrap();
        let triple = GelfandTriple::euclidean(3, p).unwrap();
        let lambda = 10f64.powf(log_lambda);
        let sol = resolve(&pair, &triple, lambda, 0.0, &y, &ResolventOptions::default()).unwrap();
        for (i, &yi) in y.iter().enumerate() {
            // s + λ sign(s)|s|^{p-1} = y, bracketed by [-|y|, |y|].
            let phi = |s: f64| s + lambda * s.signum() * s.abs().powf(p - 1.0) - yi;
            let (mut lo, mut hi) = (-yi.abs(), yi.abs());
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if phi(mid) > 0.0 { hi = mid } else { lo = mid }
            }
            let oracle = 0.5 * (lo + hi);
            prop_assert!((sol.point[i] - oracle).abs() <= 1e-12 * yi.abs().max(1.0),
                "{} vs {oracle}", sol.point[i]);
        }
    }

    #[test]
    fn dual_norm_and_embedding_bounds(p in 1.3f64..5.0, xi in scaled_vec(5), v in scaled_vec(5)) {
        let q = p / (p - 1.0);
        let plain = GelfandTriple::euclidean(5, p).unwrap();
        let lq = xi.iter().map(|x| x.abs().powf(q)).sum::<f64>().powf(1.0 / q);
        let dual = plain.dual_norm_estimate(&xi, 20).unwrap();
        prop_assert!(dual <= lq * (1.0 + 1e-12) && dual >= lq * (1.0 - 1e-6), "{dual} vs {lq}");
        let vn = plain.v_norm(&v).unwrap();
        prop_assert!(plain.pairing(&xi, &v).unwrap().abs() <= lq * vn * (1.0 + 1e-12));
        let c = 5f64.powf((0.5 - 1.0 / p).max(0.0));
        prop_assert!((plain.embedding_constant() - c).abs() <= 1e-6 * c);
        prop_assert!(plain.h_norm(&v).unwrap() <= c * vn * (1.0 + 1e-12));

        let grid = GelfandTriple::dirichlet_grid(5, p).unwrap();
        let short = grid.dual_norm_estimate(&xi, 5).unwrap();
        let long = grid.dual_norm_estimate(&xi, 50).unwrap();
        prop_assert!(short <= long);
    }

    #[test]
    fn energy_identity_on_random_paths(seed in any::<u64>(), which in 0usize..4, lambda in 0.05f64..1.0) {
        let (_, pair, triple) = &instances()[which];
        let noise = sample_path(seed, 1.0 / 32.0, 32, pair.modes()).unwrap();
        let x0: Vec<f64> = (0..pair.dim()).map(|i| 1.0 - 0.2 * i as f64).collect();
        let opts = SolverOptions::default();
        for scheme in [Scheme::ExplicitEm, Scheme::ImplicitReference] {
            let sol = solve(scheme, pair, triple, lambda, &x0, &noise, &opts).unwrap();
            let scale = sol.states.iter().map(|x| triple.h_norm(x).unwrap().powi(2)).fold(1.0, f64::max);
            prop_assert!(energy_identity_residual(&sol, triple).unwrap() <= 1e-12 * scale);
        }
    }

    #[test]
    fn noise_is_a_function_of_its_inputs(seed in any::<u64>(), steps in 1usize..64, modes in 1usize..4) {
        let a = sample_path(seed, 0.01, steps, modes).unwrap();
        let b = sample_path(seed, 0.01, steps, modes).unwrap();
        prop_assert_eq!(a.increments(), b.increments());
        prop_assert!(a.increments().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn coupled_runs_see_identical_noise() {
    let (_, pair, triple) = &instances()[0];
    let noise = sample_path(12, 1.0 / 16.0, 16, 1).unwrap();
    let opts = SolverOptions::default();
    let a = solve(
        Scheme::ExplicitEm,
        pair,
        triple,
        1.0,
        &[1.0, 0.5],
        &noise,
        &opts,
    )
    .unwrap();
    let b = solve(
        Scheme::ExplicitEm,
        pair,
        triple,
        0.1,
        &[1.0, 0.5],
        &noise,
        &opts,
    )
    .unwrap();
    assert_eq!(a.increments, b.increments);
    assert_eq!(a.increments, noise.increments());
}

#[test]
fn additive_diffusion_ignores_regularization() {
    let g0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.5, 2.0]);
    let pair = OperatorPair::new(
        Arc::new(ScalarPower { dim: 2, p: 3.0 }),
        Arc::new(AdditiveNoise::new(g0.clone())),
        constants(1.0, 0.0, 3.0, 1.0),
    )
    .unwrap();
    let triple = GelfandTriple::euclidean(2, 3.0).unwrap();
    let opts = ResolventOptions::default();
    for lambda in [2.0, 0.3, 1e-3] {
        let b = regularized_diffusion(&pair, &triple, lambda, 0.1, &[4.0, -7.0], &opts).unwrap();
        assert_eq!(b, g0);
    }
}
