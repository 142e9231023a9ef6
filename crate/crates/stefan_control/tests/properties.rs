use proptest::prelude::*;

use stefan_control::adjoint::{transposition_check, PairingMode};
use stefan_control::cli::RunConfig;
use stefan_control::linear_system::{solve_linearized, CoefficientSet, LinearDataSpec, SourcePair};
use stefan_control::numerics::{
    interpolate_cubic, solve_bordered, BorderedTridiagonal, LogSum, SpaceGrid, TimeGrid, Tridiagonal,
};
use stefan_control::stefan_forward::{discrete_shadow, neumann_constant, Extension, ReferenceKind, ReferenceSpec};
use stefan_control::transform::{
    cylinder_to_physical, from_perturbation, physical_to_cylinder, to_perturbation, CylinderState, FrontState,
    PerturbationState,
};
use stefan_control::weights::{build_eta, positivity_margin, probe_eta, tabulate_weights, CarlemanParams};

fn spec() -> ReferenceSpec {
    ReferenceSpec {
        kind: ReferenceKind::Neumann,
        beta: 1.0,
        boundary_value: 1.0,
        t0: 0.25,
        ell_star: 0.1,
        extension: Extension::Reflection,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn log_sum_matches_direct_sum(terms in prop::collection::vec((-20.0f64..20.0, 0.01f64..10.0), 1..12), shift in -600.0f64..600.0) {
        let mut s = LogSum::default();
        let mut shifted = LogSum::default();
        let mut direct = 0.0;
        for &(l, v) in &terms {
            s.add(l, v);
            shifted.add(l + shift, v);
            direct += v * l.exp();
        }
        prop_assert!((s.ln() - direct.ln()).abs() < 1e-12);
        prop_assert!((shifted.ln() - s.ln() - shift).abs() < 1e-9);
    }

    #[test]
    fn bordered_solve_has_small_residual(
        n in 3usize..20,
        seed in prop::collection::vec(-1.0f64..1.0, 80),
        corner in 1.0f64..3.0,
    ) {
        let pick = |i: usize| seed[i % seed.len()];
        let tri = Tridiagonal {
            sub: (0..n).map(|i| pick(i)).collect(),
            diag: (0..n).map(|i| 4.0 + pick(i + 7)).collect(),
            sup: (0..n).map(|i| pick(i + 13)).collect(),
        };
        let sys = BorderedTridiagonal {
            tri,
            col: (0..n).map(|i| 0.3 * pick(i + 29)).collect(),
            row: (0..n).map(|i| 0.3 * pick(i + 41)).collect(),
            corner,
        };
        let rhs: Vec<f64> = (0..=n).map(|i| pick(i + 53)).collect();
        let x = solve_bordered(&sys, &rhs).unwrap();
        let back = sys.apply(&x);
        for (a, b) in back.iter().zip(&rhs) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cubic_interpolation_is_exact_on_cubics(c in prop::array::uniform4(-2.0f64..2.0), x in 0.0f64..1.0, n in 5usize..30) {
        let g = SpaceGrid::unit(n).unwrap();
        let f = |y: f64| c[0] + y * (c[1] + y * (c[2] + y * c[3]));
        let v: Vec<f64> = g.nodes().iter().map(|&y| f(y)).collect();
        prop_assert!((interpolate_cubic(&g, &v, x) - f(x)).abs() < 1e-11);
    }

    #[test]
    fn front_cylinder_round_trip(ell in 0.3f64..3.0, c in prop::array::uniform3(-1.0f64..1.0), n in 8usize..40) {
        let phys = SpaceGrid::new(0.0, ell, n).unwrap();
        let u: Vec<f64> = phys.nodes().iter().map(|x| (ell - x) * (1.0 + c[0] * x + c[1] * x * x) + c[2] * x * (ell - x)).collect();
        let st = FrontState::new(u.clone(), ell, 1.0, 0.1).unwrap();
        let cyl = physical_to_cylinder(&st, &SpaceGrid::unit(n).unwrap()).unwrap();
        prop_assert!((cyl.q - ell * ell).abs() < 1e-14 * ell * ell);
        let back = cylinder_to_physical(&cyl, n, 1.0).unwrap();
        for (a, b) in back.u.iter().zip(&u) {
            prop_assert!((a - b).abs() < 1e-11);
        }
    }

    #[test]
    fn perturbation_round_trip(k in 0usize..=20, z in prop::collection::vec(-0.1f64..0.1, 21), h in -0.01f64..0.01) {
        let grid = SpaceGrid::symmetric(21).unwrap();
        let reference = discrete_shadow(&spec(), &grid, &TimeGrid::new(1.0, 20).unwrap()).unwrap();
        let pert = PerturbationState { z: z.clone(), h };
        let state: CylinderState = from_perturbation(&pert, &reference, k).unwrap();
        let again = to_perturbation(&state, &reference, k).unwrap();
        prop_assert!((again.h - h).abs() < 1e-14);
        for (a, b) in again.z.iter().zip(&z) {
            prop_assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn neumann_constant_solves_its_equation(ratio in 0.01f64..20.0) {
        let k = neumann_constant(ratio).unwrap();
        let lhs = std::f64::consts::PI.sqrt() * k * (k * k).exp() * statrs::function::erf::erf(k);
        prop_assert!((lhs - ratio).abs() <= 1e-9 * ratio.max(1.0));
    }

    #[test]
    fn eta_profiles_pass_their_probe(c1 in -0.95f64..-0.5, width in 0.05f64..0.4, height in 0.01f64..5.0, base in 0.1f64..3.0) {
        let c2 = (c1 + width).min(-0.02);
        let eta = build_eta((c1, c2), height, base).unwrap();
        prop_assert!(probe_eta(&eta, 2000).holds());
        prop_assert!((eta.value(-1.0) - base).abs() < 1e-12);
        prop_assert!((eta.value(0.5 * (c1 + c2)) - base - height).abs() < 1e-12);
    }

    #[test]
    fn positivity_margin_grows_with_lambda(lambda in 1.0f64..3.0, factor in 1.01f64..3.0) {
        let eta = build_eta((-0.6, -0.4), 1.0, 1.0).unwrap();
        let lo = positivity_margin(&eta, 2.0, lambda);
        prop_assert!(lo > 0.0);
        prop_assert!(positivity_margin(&eta, 2.0, factor * lambda) > lo);
    }

    #[test]
    fn weight_logs_are_ordered(sf in 1.0f64..4.0, lf in 1.0f64..4.0) {
        let eta = build_eta((-0.6, -0.4), 1.0, 1.0).unwrap();
        let base = CarlemanParams::minimal(&eta, 2.0, (-0.7, -0.3), (-0.6, -0.4), 1.0, 1.0);
        let p = base.with_s_lambda(sf * base.s_threshold(1.0), lf * base.lambda0);
        let time = TimeGrid::new(1.0, 40).unwrap();
        let t = tabulate_weights(&eta, &p, &SpaceGrid::symmetric(11).unwrap(), &time).unwrap();
        for k in 0..time.m {
            // ζ̂ ≥ ζ* pointwise, so ρ₁ dominates ρ₀.
            prop_assert!(t.ln_rho[1][k] >= t.ln_rho[0][k]);
            prop_assert!((2.0 * t.ln_rho[4][k] - t.ln_rho[3][k]).abs() <= 1e-12 * t.ln_rho[3][k].abs());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn matched_duality_is_exact(seed in any::<u64>()) {
        let grid = SpaceGrid::symmetric(21).unwrap();
        let time = TimeGrid::new(1.0, 60).unwrap();
        let reference = discrete_shadow(&spec(), &grid, &time).unwrap();
        let coeffs = stefan_control::linear_system::stefan_coefficients(&reference).unwrap();
        let d = LinearDataSpec::draw_many(seed, 2, None);
        let (src, z0, h0) = d[0].realize(&grid, &time);
        let (pair, _, _) = d[1].realize(&grid, &time);
        let r = transposition_check(&coeffs, &src, &z0, h0, &pair, PairingMode::Matched).unwrap();
        prop_assert!(r.gap < 1e-11, "gap {}", r.gap);
    }

    #[test]
    fn linear_solution_scales_with_data(seed in any::<u64>(), c in -5.0f64..5.0) {
        let grid = SpaceGrid::symmetric(15).unwrap();
        let time = TimeGrid::new(1.0, 30).unwrap();
        let coeffs = CoefficientSet::zeros(&grid, &time);
        let (src, z0, h0) = LinearDataSpec::draw_many(seed, 1, None)[0].realize(&grid, &time);
        let a = solve_linearized(&coeffs, &src, &z0, h0).unwrap();
        let scaled = SourcePair { f: src.f.scaled(c), g: src.g.iter().map(|v| c * v).collect() };
        let z0c: Vec<f64> = z0.iter().map(|v| c * v).collect();
        let b = solve_linearized(&coeffs, &scaled, &z0c, c * h0).unwrap();
        let tol = 1e-12 * (1.0 + c.abs()) * (1.0 + a.z.max_abs());
        for k in 0..time.levels() {
            prop_assert!((b.h[k] - c * a.h[k]).abs() <= tol);
            for j in 0..grid.n {
                prop_assert!((b.z.get(k, j) - c * a.z.get(k, j)).abs() <= tol);
            }
        }
    }

    #[test]
    fn config_round_trips_and_hash_is_stable(delta in 1e-4f64..4e-2, seed in any::<u32>(), steps in 50usize..500) {
        let overrides = vec![
            format!("control.delta={delta:e}"),
            format!("output.seed={seed}"),
            format!("grid.steps={steps}"),
        ];
        let cfg = RunConfig::load(None, &overrides).unwrap();
        let again = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        prop_assert_eq!(cfg.hash(), again.hash());
        prop_assert_eq!(again.grid.steps, steps);
    }
}
