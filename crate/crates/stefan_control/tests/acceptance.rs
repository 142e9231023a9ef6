//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails or exceeds its time budget.

use std::time::{Duration, Instant};

use stefan_control::adjoint::{transposition_check, PairingMode};
use stefan_control::carleman_verify::{carleman_sweep, decomposition_identity, realize_basic_dataset, BasicDatasetSpec};
use stefan_control::cli::{run_into, Command, RunConfig};
use stefan_control::hum::HumOptions;
use stefan_control::linear_system::{stefan_coefficients, LinearDataSpec};
use stefan_control::nonlinear_control::{
    check_positivity, control_to_trajectory, initial_perturbation, loglog_slope, remainder_study,
    scaled_initial_state, verify_targets, ControlParams, ControlProblem,
};
use stefan_control::numerics::{SpaceGrid, TimeGrid};
use stefan_control::stefan_forward::{
    discrete_shadow, solve_cylinder_stefan, CylinderHistory, CylinderOptions, Extension, NeumannSolution, QRule,
    ReferenceKind, ReferenceSpec,
};
use stefan_control::weights::{build_eta, check_weight_bounds, tabulate_weights, CarlemanParams, EtaFunction};
use stefan_control::Result;

const BUDGET: Duration = Duration::from_secs(60);

struct Verdict {
    pass: bool,
    detail: String,
}

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

fn cylinder_run(sol: &NeumannSolution, n: usize, m: usize) -> Result<(SpaceGrid, TimeGrid, CylinderHistory)> {
    let grid = SpaceGrid::unit(n)?;
    let time = TimeGrid::new(1.0, m)?;
    let p0: Vec<f64> = grid.nodes().iter().map(|&y| sol.p(y)).collect();
    let opts = CylinderOptions {
        q_star: spec().q_star(),
        q_rule: QRule::Trapezoid,
        ..CylinderOptions::default()
    };
    let hist = solve_cylinder_stefan(&p0, sol.q(0.0), &vec![1.0; m + 1], &grid, &time, 1.0, &opts)?;
    Ok((grid, time, hist))
}

fn oracle_error(sol: &NeumannSolution, n: usize, m: usize) -> Result<f64> {
    let (grid, time, hist) = cylinder_run(sol, n, m)?;
    let mut err = 0.0f64;
    for k in 0..=m {
        err = err.max((hist.q[k].sqrt() - sol.front(time.t(k))).abs());
        for (j, &y) in grid.nodes().iter().enumerate() {
            err = err.max((hist.p.get(k, j) - sol.p(y)).abs());
        }
    }
    Ok(err)
}

fn forward_accuracy() -> Result<Verdict> {
    let sol = spec().neumann()?;
    let e: Vec<f64> = [26, 51, 101].iter().map(|&n| oracle_error(&sol, n, 2000)).collect::<Result<_>>()?;
    let dx_order = (e[0] / e[1]).log2().min((e[1] / e[2]).log2());
    // The similarity solution is stationary in the cylinder with q linear in
    // t, so its error is all spatial; the time order is measured by
    // self-convergence on a fixed spatial grid.
    let finals: Vec<(Vec<f64>, f64)> = [25, 50, 100, 200]
        .iter()
        .map(|&m| cylinder_run(&sol, 101, m).map(|(_, _, h)| (h.p.row(m).to_vec(), h.q[m].sqrt())))
        .collect::<Result<_>>()?;
    let diff = |a: &(Vec<f64>, f64), b: &(Vec<f64>, f64)| {
        a.0.iter().zip(&b.0).fold((a.1 - b.1).abs(), |acc, (x, y)| acc.max((x - y).abs()))
    };
    let d: Vec<f64> = (0..3).map(|i| diff(&finals[i], &finals[i + 1])).collect();
    let dt_order = (d[0] / d[1]).log2().min((d[1] / d[2]).log2());
    let oracle_dt: Vec<f64> = [50, 100, 200].iter().map(|&m| oracle_error(&sol, 401, m)).collect::<Result<_>>()?;
    let fine = oracle_error(&sol, 201, 2000)?;
    Ok(Verdict {
        pass: dx_order >= 1.8 && dt_order >= 0.9 && fine <= 5e-4,
        detail: format!(
            "dx order {dx_order:.2} (oracle), dt order {dt_order:.2} (self-convergence; oracle errors at n=401 \
             flat at {:.2e}..{:.2e}), error {fine:.2e} at n=201 m=2000",
            oracle_dt[2], oracle_dt[0]
        ),
    })
}

fn duality() -> Result<Verdict> {
    let draws = LinearDataSpec::draw_many(2024, 40, None);
    let levels = [(41usize, 400usize), (81, 1600), (161, 6400)];
    let mut max_matched = 0.0f64;
    let mut gaps = vec![Vec::new(); 20];
    for &(n, m) in &levels {
        let grid = SpaceGrid::symmetric(n)?;
        let time = TimeGrid::new(1.0, m)?;
        let coeffs = stefan_coefficients(&discrete_shadow(&spec(), &grid, &time)?)?;
        for d in 0..20 {
            let (src, z0, h0) = draws[2 * d].realize(&grid, &time);
            let (pairing, _, _) = draws[2 * d + 1].realize(&grid, &time);
            if n == 41 {
                let r = transposition_check(&coeffs, &src, &z0, h0, &pairing, PairingMode::Matched)?;
                max_matched = max_matched.max(r.gap);
            }
            let r = transposition_check(&coeffs, &src, &z0, h0, &pairing, PairingMode::Continuous)?;
            gaps[d].push((grid.dx, r.gap));
        }
    }
    // Slope of the worst gap per level. Single datasets can sit in a
    // near-cancellation at coarse levels, so their slopes are only reported.
    let worst: Vec<(f64, f64)> = (0..levels.len())
        .map(|l| (gaps[0][l].0, gaps.iter().map(|g| g[l].1).fold(0.0, f64::max)))
        .collect();
    let slope = loglog_slope(&worst);
    let per_set = gaps.iter().map(|g| loglog_slope(g)).fold(f64::INFINITY, f64::min);
    Ok(Verdict {
        pass: max_matched <= 1e-9 && slope >= 1.8,
        detail: format!(
            "matched gap max {max_matched:.2e} over 20 datasets, continuous worst-gap slope {slope:.2} \
             (smallest single-dataset slope {per_set:.2})"
        ),
    })
}

fn control_profile() -> Result<(EtaFunction, CarlemanParams)> {
    let eta = build_eta((-0.6, -0.4), 0.01, 1.0)?;
    let weights = CarlemanParams::minimal(&eta, 2.0, (-0.7, -0.3), (-0.6, -0.4), 1.0, 1.0);
    Ok((eta, weights))
}

fn linear_null_control() -> Result<Verdict> {
    let (eta, weights) = control_profile()?;
    let draws = LinearDataSpec::draw_many(77, 20, Some(0.5));
    let mut worst = 0.0f64;
    let mut ratios = vec![Vec::new(); draws.len()];
    for (n1, m) in [(21, 200), (41, 400)] {
        let time = TimeGrid::new(1.0, m)?;
        let problem = ControlProblem::new(&spec(), n1, &time, &eta, &weights, HumOptions::default())?;
        for (d, data) in draws.iter().enumerate() {
            let (src, z0, h0) = data.realize(&problem.grid(), &time);
            let r = problem.solver.solve(&src, &z0, h0)?.report;
            worst = worst.max(r.terminal_relative());
            ratios[d].push(r.cost_ratio);
        }
    }
    let spread = ratios
        .iter()
        .map(|r| r[0].max(r[1]) / r[0].min(r[1]))
        .fold(1.0f64, f64::max);
    Ok(Verdict {
        pass: worst <= 1e-8 && spread.is_finite() && spread <= 2.0,
        detail: format!("terminal relative max {worst:.2e} over 20 draws, weighted-cost ratio spread x{spread:.3}"),
    })
}

fn carleman() -> Result<Verdict> {
    let eta = build_eta((-0.6, -0.4), 1.0, 1.0)?;
    let base = CarlemanParams::minimal(&eta, 2.0, (-0.7, -0.3), (-0.6, -0.4), 1.0, 1.0);
    let specs = BasicDatasetSpec::draw_many(11, 10);
    let mut maxima = Vec::new();
    let mut id_gap = 0.0f64;
    for (n, m) in [(41, 200), (81, 800)] {
        let grid = SpaceGrid::symmetric(n)?;
        let time = TimeGrid::new(1.0, m)?;
        let data = specs.iter().map(|s| realize_basic_dataset(s, &grid, &time)).collect::<Result<Vec<_>>>()?;
        let rows = carleman_sweep(&eta, &base, &data)?;
        maxima.push(rows.iter().map(|r| r.ratio).fold(0.0, f64::max));
        let table = tabulate_weights(&eta, &base, &grid, &time)?;
        for ds in &data {
            id_gap = id_gap.max(decomposition_identity(&ds.state.phi, &ds.f, &table, &ds.d)?.gap);
        }
    }
    let finite = maxima.iter().all(|r| r.is_finite() && *r > 0.0);
    let spread = maxima[0].max(maxima[1]) / maxima[0].min(maxima[1]);
    Ok(Verdict {
        pass: finite && spread <= 2.0 && id_gap <= 1e-12,
        detail: format!(
            "max ratio {:.4} -> {:.4} (x{spread:.3}), identity gap {id_gap:.1e}",
            maxima[0], maxima[1]
        ),
    })
}

fn nonlinear_control() -> Result<Verdict> {
    let (eta, weights) = control_profile()?;
    let time = TimeGrid::new(1.0, 400)?;
    let problem = ControlProblem::new(&spec(), 41, &time, &eta, &weights, HumOptions::default())?;
    let initial = scaled_initial_state(&problem, 1e-2, 161)?;
    let result = control_to_trajectory(&problem, &initial, &ControlParams::default())?;
    let targets = verify_targets(&problem, &result)?;
    let pos = check_positivity(&result);
    Ok(Verdict {
        pass: result.converged
            && result.iterations <= 20
            && targets.front_gap <= 1e-6
            && targets.temperature_gap <= 1e-6
            && pos.min_v >= -1e-12,
        detail: format!(
            "{} iterations, front gap {:.1e}, temperature gap {:.1e}, min v {:.4}",
            result.iterations, targets.front_gap, targets.temperature_gap, pos.min_v
        ),
    })
}

fn remainder() -> Result<Verdict> {
    let (eta, weights) = control_profile()?;
    let time = TimeGrid::new(1.0, 200)?;
    let problem = ControlProblem::new(&spec(), 21, &time, &eta, &weights, HumOptions::default())?;
    let initial = scaled_initial_state(&problem, 4e-2, 81)?;
    let init = initial_perturbation(&problem, &initial)?;
    let control = control_to_trajectory(&problem, &initial, &ControlParams::default())?;
    // Normalize the data to unit size so ε alone sets the amplitude.
    let scale = 1.0 / init.z0.iter().fold(init.h0.abs(), |a, b| a.max(b.abs()));
    let z0: Vec<f64> = init.z0.iter().map(|v| scale * v).collect();
    let (points, slope) = remainder_study(&problem, &z0, scale * init.h0, &control.w.scaled(scale), &[1e-1, 1e-2, 1e-3])?;
    let devs: Vec<String> = points.iter().map(|p| format!("{:.2e}", p.deviation)).collect();
    Ok(Verdict {
        pass: (slope - 2.0).abs() <= 0.2,
        detail: format!("slope {slope:.3}, deviations [{}]", devs.join(", ")),
    })
}

fn weight_bounds() -> Result<Verdict> {
    let eta = build_eta((-0.6, -0.4), 1.0, 1.0)?;
    let base = CarlemanParams::minimal(&eta, 2.0, (-0.7, -0.3), (-0.6, -0.4), 1.0, 1.0);
    let grid = SpaceGrid::symmetric(41)?;
    let time = TimeGrid::new(1.0, 200)?;
    let s_min = base.s_threshold(1.0);
    let mut all = true;
    let mut min_margin = f64::INFINITY;
    let mut max_sup = 0.0f64;
    let mut max_ln = f64::NEG_INFINITY;
    for lf in [1.0, 1.5, 2.0, 4.0] {
        for sf in [1.0, 2.0, 4.0] {
            let table = tabulate_weights(&eta, &base.with_s_lambda(sf * s_min, lf * base.lambda0), &grid, &time)?;
            let b = check_weight_bounds(&table);
            all &= b.holds();
            min_margin = min_margin.min(b.positivity_margin);
            max_sup = max_sup
                .max(b.sup_rho4_over_rho3)
                .max(b.sup_rho4_over_rho2)
                .max(b.sup_rho4_dot_over_rho0);
            // The ratios underflow to zero; their logs show how far below 1 they sit.
            let [_, _, l2, l3, l4] = &table.ln_rho;
            for k in 0..table.time.m {
                max_ln = max_ln.max(l4[k] - l3[k]).max(l4[k] - l2[k]);
            }
        }
    }
    Ok(Verdict {
        pass: all && max_sup.is_finite() && min_margin > 0.0,
        detail: format!("12 (s, λ) points: largest ratio sup {max_sup:.2e} (largest ln ρ₄/ρ₃, ln ρ₄/ρ₂ {max_ln:.3e}), \
             smallest positivity margin {min_margin:.2e}"),
    })
}

fn determinism() -> Result<Verdict> {
    let base = std::env::temp_dir().join(format!("stefan-acceptance-{}", std::process::id()));
    let cfg = RunConfig::load(None, &["output.seed=8".into()])?;
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let dir = base.join(run);
        std::fs::create_dir_all(&dir)?;
        let (code, _) = run_into(Command::VerifyAll, &cfg, &dir)?;
        trees.push((code, collect_files(&dir, &dir)?));
    }
    std::fs::remove_dir_all(&base)?;
    let (a, b) = (&trees[0], &trees[1]);
    let identical = a.1 == b.1;
    Ok(Verdict {
        pass: identical && a.0 == 0 && b.0 == 0 && !a.1.is_empty(),
        detail: format!(
            "{} files, byte-identical: {identical}, exit codes {} and {}",
            a.1.len(),
            a.0,
            b.0
        ),
    })
}

fn collect_files(root: &std::path::Path, dir: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            out.extend(collect_files(root, &path)?);
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path).display().to_string();
            out.push((rel, std::fs::read(&path)?));
        }
    }
    Ok(out)
}

fn main() {
    let criteria: [(&str, fn() -> Result<Verdict>); 8] = [
        ("forward accuracy against the similarity solution", forward_accuracy),
        ("transposition duality", duality),
        ("linear null control", linear_null_control),
        ("Carleman sweep and splitting identity", carleman),
        ("nonlinear control onto the trajectory", nonlinear_control),
        ("quadratic remainder", remainder),
        ("weight bounds and positivity margin", weight_bounds),
        ("verify-all determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = check();
        let elapsed = start.elapsed();
        let (pass, detail) = match verdict {
            Ok(v) => (v.pass && elapsed <= BUDGET, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {}: {} | {name} | {detail} | {:.1}s",
            i + 1,
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
