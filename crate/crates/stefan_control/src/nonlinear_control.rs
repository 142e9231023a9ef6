//! Exact control to a reference trajectory.
//!
//! The perturbation system on `(−1, 1)` is driven to rest by a fixed-point
//! loop: the quadratic part of the nonlinear scheme is moved to the source,
//! the linear control problem is solved with that source, and the nonlinear
//! system is advanced with the new control. The boundary control on `[0, 1]`
//! is the trace of the controlled state at `y = 0` plus the reference one.

use crate::error::{Error, Result};
use crate::hum::{HumOptions, HumReport, HumSolver};
use crate::linear_system::{solve_linearized, stefan_coefficients, CoefficientSet, SourcePair};
use crate::numerics::{interpolate_cubic, trapezoid_unchecked, SpaceGrid, SpaceTimeField, TimeGrid};
use crate::stefan_forward::{
    discrete_shadow, extend_profile, solve_cylinder_stefan, solve_extended_nonlinear, CylinderOptions,
    ExtendedHistory, ExtendedSystem, QRule, ReferenceSpec, ReferenceTrajectory,
};
use crate::transform::{initial_distance, physical_to_cylinder, CylinderState, FrontState};
use crate::weights::{tabulate_weights, CarlemanParams, EtaFunction, WeightTable};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ControlParams {
    /// Stop once successive states differ by at most this (max norm).
    pub tol: f64,
    pub k_max: usize,
    /// Largest relative initial distance accepted.
    pub delta_max: f64,
    /// Terminal tolerance for the `converged` flag.
    pub terminal_tol: f64,
}

impl Default for ControlParams {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            k_max: 30,
            delta_max: 0.05,
            terminal_tol: 1e-8,
        }
    }
}

/// Everything that depends only on the reference and the grids: the
/// discrete reference on `(−1, 1)`, the linearized coefficients and the
/// factored control solver.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub spec: ReferenceSpec,
    pub reference: ReferenceTrajectory,
    pub coeffs: CoefficientSet,
    pub table: WeightTable,
    pub solver: HumSolver,
    /// The unit grid `[0, 1]` sharing nodes with the right half.
    pub unit: SpaceGrid,
}

impl ControlProblem {
    /// `unit_nodes` nodes on `[0, 1]`, hence `2·unit_nodes − 1` on `(−1, 1)`.
    pub fn new(
        spec: &ReferenceSpec,
        unit_nodes: usize,
        time: &TimeGrid,
        eta: &EtaFunction,
        carleman: &CarlemanParams,
        options: HumOptions,
    ) -> Result<Self> {
        let unit = SpaceGrid::unit(unit_nodes)?;
        let grid = SpaceGrid::symmetric(2 * unit_nodes - 1)?;
        let reference = discrete_shadow(spec, &grid, time)?;
        let coeffs = stefan_coefficients(&reference)?;
        let table = tabulate_weights(eta, carleman, &grid, time)?;
        let solver = HumSolver::new(&coeffs, &table, options)?;
        Ok(Self {
            spec: *spec,
            reference,
            coeffs,
            table,
            solver,
            unit,
        })
    }

    pub fn grid(&self) -> SpaceGrid {
        self.reference.grid
    }

    pub fn time(&self) -> TimeGrid {
        self.reference.time
    }

    /// Reference profile and front at level `k` on `[0, 1]`.
    pub fn reference_cylinder(&self, k: usize) -> CylinderState {
        let o = self.reference.origin();
        CylinderState {
            grid: self.unit,
            p: self.reference.p.row(k)[o..].to_vec(),
            q: self.reference.q[k],
            q_star: self.reference.q_star,
        }
    }

    /// Reference state at `t = 0` in physical variables.
    pub fn reference_front(&self, nodes: usize) -> Result<FrontState> {
        crate::transform::cylinder_to_physical(&self.reference_cylinder(0), nodes, self.spec.beta)
    }

    fn extended(&self) -> ExtendedSystem<'_> {
        ExtendedSystem {
            coeffs: &self.coeffs,
            beta: self.spec.beta,
            q_star: self.reference.q_star,
            omega: None,
        }
    }
}

/// Perturbation initial data on `(−1, 1)` for a physical initial state.
#[derive(Debug, Clone)]
pub struct InitialPerturbation {
    pub cylinder: CylinderState,
    pub z0: Vec<f64>,
    pub h0: f64,
    /// Initial distance over the distance of the reference to zero.
    pub relative_distance: f64,
}

pub fn initial_perturbation(problem: &ControlProblem, initial: &FrontState) -> Result<InitialPerturbation> {
    let cylinder = physical_to_cylinder(initial, &problem.unit)?;
    let reference = problem.reference_cylinder(0);
    let diff: Vec<f64> = cylinder.p.iter().zip(&reference.p).map(|(a, b)| a - b).collect();
    let z0 = extend_profile(&diff, problem.unit.dx, problem.spec.extension);
    let h0 = 0.5 * problem.spec.beta * (cylinder.q - reference.q);
    let zero = CylinderState {
        p: vec![0.0; problem.unit.n],
        q: 0.0,
        ..reference.clone()
    };
    let scale = initial_distance(&reference, &zero)?;
    let relative_distance = initial_distance(&cylinder, &reference)? / scale;
    Ok(InitialPerturbation {
        cylinder,
        z0,
        h0,
        relative_distance,
    })
}

/// The physical initial state obtained by stretching the reference: front
/// `(1 + δ)ℓ̄₀` and temperature `(1 + δ)ū₀(x/(1 + δ))`.
pub fn scaled_initial_state(problem: &ControlProblem, delta: f64, nodes: usize) -> Result<FrontState> {
    let r = problem.reference_cylinder(0);
    let ell = r.q.sqrt() * (1.0 + delta);
    let grid = SpaceGrid::new(0.0, ell, nodes)?;
    let u = grid
        .nodes()
        .iter()
        .map(|&x| (1.0 + delta) * interpolate_cubic(&problem.unit, &r.p, x / ell))
        .collect();
    FrontState::new(u, ell, problem.spec.beta, r.q_star.sqrt())
}

/// Quadratic part of the nonlinear scheme as a source of the linear one:
/// `−(2/β) hᵏ (zᵏ − zᵏ⁻¹)/dt − (x/β) τᵏ D₀zᵏ` at interior nodes.
pub fn quadratic_remainder(hist: &ExtendedHistory, grid: &SpaceGrid, time: &TimeGrid, beta: f64) -> SpaceTimeField {
    let (n, levels) = (grid.n, time.levels());
    let (dx, dt) = (grid.dx, time.dt);
    let xs = grid.nodes();
    let mut f = SpaceTimeField::zeros(n, levels);
    for k in 1..levels {
        let (row, prev) = (hist.z.row(k), hist.z.row(k - 1));
        let (h, tau) = (hist.h[k], hist.trace[k]);
        for j in 1..n - 1 {
            let zt = (row[j] - prev[j]) / dt;
            let zx = (row[j + 1] - row[j - 1]) / (2.0 * dx);
            f.set(k, j, -2.0 * h * zt / beta - xs[j] * tau * zx / beta);
        }
    }
    f
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Max-norm change of `(z, h)` against the previous iterate.
    pub update: f64,
    /// `L²` norm of the injected remainder.
    pub remainder_norm: f64,
    pub terminal_z: f64,
    pub terminal_h: f64,
}

#[derive(Debug, Clone)]
pub struct ControlResult {
    /// Distributed control on `(−1, 1)`, zero outside `ω`.
    pub w: SpaceTimeField,
    /// Boundary control `v = z(0, ·) + v̄`.
    pub v: Vec<f64>,
    pub v_bar: Vec<f64>,
    pub z: SpaceTimeField,
    pub h: Vec<f64>,
    /// `(‖z(·,T)‖₂, |h(T)|)` of the nonlinear solve.
    pub terminal_residuals: (f64, f64),
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<IterationRecord>,
    pub hum: HumReport,
    pub initial: InitialPerturbation,
}

fn l2_row(row: &[f64], dx: f64) -> f64 {
    let sq: Vec<f64> = row.iter().map(|v| v * v).collect();
    trapezoid_unchecked(&sq, dx).sqrt()
}

fn source_norm(f: &SpaceTimeField, dx: f64, dt: f64) -> f64 {
    let mut s = 0.0;
    for k in 1..f.levels() {
        s += dt * dx * f.row(k).iter().map(|v| v * v).sum::<f64>();
    }
    s.sqrt()
}

/// Drive `initial` onto the reference trajectory at time `T`.
pub fn control_to_trajectory(
    problem: &ControlProblem,
    initial: &FrontState,
    params: &ControlParams,
) -> Result<ControlResult> {
    let init = initial_perturbation(problem, initial)?;
    if !(init.relative_distance <= params.delta_max) {
        return Err(Error::Hypothesis(format!(
            "initial distance {:.3e} exceeds the accepted range {:.3e}",
            init.relative_distance, params.delta_max
        )));
    }
    let (grid, time) = (problem.grid(), problem.time());
    let (n, levels) = (grid.n, time.levels());
    let beta = problem.spec.beta;
    let system = problem.extended();

    let mut z = SpaceTimeField::zeros(n, levels);
    let mut h = vec![0.0; levels];
    let mut trace = vec![0.0; levels];
    let mut history = Vec::new();
    let mut last: Option<(SpaceTimeField, HumReport)> = None;
    let mut converged_loop = false;
    let mut prev_update = f64::INFINITY;
    let mut growth = 0;
    for it in 1..=params.k_max {
        let current = ExtendedHistory {
            z: z.clone(),
            h: h.clone(),
            trace: trace.clone(),
            corrections: Vec::new(),
        };
        let f1 = quadratic_remainder(&current, &grid, &time, beta);
        if !f1.is_finite() {
            return Err(Error::WeightedSource(format!("non-finite remainder at iteration {it}")));
        }
        let src = SourcePair {
            f: f1.clone(),
            g: vec![0.0; levels],
        };
        // The iterate is the controlled linear state itself; it vanishes
        // wherever the weights force it to, and so does the next remainder.
        let sol = problem.solver.solve(&src, &init.z0, init.h0)?;
        let mut update = 0.0f64;
        for k in 0..levels {
            for j in 0..n {
                update = update.max((sol.z.get(k, j) - z.get(k, j)).abs());
            }
            update = update.max((sol.h[k] - h[k]).abs());
        }
        history.push(IterationRecord {
            iteration: it,
            update,
            remainder_norm: source_norm(&f1, grid.dx, time.dt),
            terminal_z: sol.report.terminal_z,
            terminal_h: sol.report.terminal_h,
        });
        for k in 1..levels {
            trace[k] = (sol.h[k - 1] - sol.h[k]) / time.dt;
        }
        z = sol.z;
        h = sol.h;
        last = Some((sol.w, sol.report));
        if update <= params.tol {
            converged_loop = true;
            break;
        }
        growth = if update > prev_update { growth + 1 } else { 0 };
        if growth >= 3 {
            return Err(Error::ControlDivergence(format!(
                "updates grew three times in a row; last rate {:.3}",
                update / prev_update
            )));
        }
        prev_update = update;
    }
    let (w, hum) = last.expect("at least one iteration");
    let state = solve_extended_nonlinear(&system, &init.z0, init.h0, &w, None)?;
    let (z, h) = (state.z, state.h);
    let o = problem.reference.origin();
    let v_bar = problem.reference.v.clone();
    let v: Vec<f64> = (0..levels).map(|k| z.get(k, o) + v_bar[k]).collect();
    let terminal = (l2_row(z.row(time.m), grid.dx), h[time.m].abs());
    if !converged_loop {
        let rate = match history.as_slice() {
            [.., a, b] if a.update > 0.0 => b.update / a.update,
            _ => f64::NAN,
        };
        return Err(Error::ControlDivergence(format!(
            "no convergence in {} iterations: last update {:.3e}, observed rate {rate:.3}",
            params.k_max,
            history.last().map_or(f64::NAN, |r| r.update)
        )));
    }
    let converged = terminal.0.max(terminal.1) <= params.terminal_tol;
    Ok(ControlResult {
        w,
        v,
        v_bar,
        z,
        h,
        terminal_residuals: terminal,
        iterations: history.len(),
        converged,
        history,
        hum,
        initial: init,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PositivityReport {
    pub min_v: f64,
    pub nonneg: bool,
    /// `min v̄ − max |v − v̄|`.
    pub margin: f64,
}

pub fn check_positivity(result: &ControlResult) -> PositivityReport {
    let min_v = result.v.iter().copied().fold(f64::INFINITY, f64::min);
    let min_bar = result.v_bar.iter().copied().fold(f64::INFINITY, f64::min);
    let dev = result
        .v
        .iter()
        .zip(&result.v_bar)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    PositivityReport {
        min_v,
        nonneg: min_v >= -1e-12,
        margin: min_bar - dev,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TargetReport {
    /// `|ℓ(T) − ℓ̄(T)|`.
    pub front_gap: f64,
    /// `‖u(·,T) − ū(·,T)‖₂` over `(0, max(ℓ, ℓ̄))`, zero past each front.
    pub temperature_gap: f64,
    /// `max |p(·,T) − p̄(·,T)|` on the cylinder.
    pub cylinder_gap: f64,
    /// Largest gap between the re-simulated profile and the controlled
    /// state restricted to `[0, 1]`, over all levels.
    pub frame_gap: f64,
}

impl TargetReport {
    pub fn matched(&self, tol: f64) -> bool {
        self.front_gap <= tol && self.temperature_gap <= tol
    }
}

/// Re-simulate the physical problem on `[0, 1]` driven by `v` alone and
/// compare the terminal front and temperature with the reference.
pub fn verify_targets(problem: &ControlProblem, result: &ControlResult) -> Result<TargetReport> {
    let time = problem.time();
    let unit = problem.unit;
    let opts = CylinderOptions {
        q_star: problem.reference.q_star,
        q_rule: QRule::ImplicitEuler,
        ..CylinderOptions::default()
    };
    let init = &result.initial.cylinder;
    let hist = solve_cylinder_stefan(&init.p, init.q, &result.v, &unit, &time, problem.spec.beta, &opts)?;
    let m = time.m;
    let o = problem.reference.origin();
    let mut frame_gap = 0.0f64;
    for k in 1..time.levels() {
        for j in 0..unit.n {
            let controlled = result.z.get(k, o + j) + problem.reference.p.get(k, o + j);
            frame_gap = frame_gap.max((hist.p.get(k, j) - controlled).abs());
        }
    }
    let target = problem.reference_cylinder(m);
    let (ell, ell_bar) = (hist.q[m].sqrt(), target.q.sqrt());
    let cylinder_gap = hist
        .p
        .row(m)
        .iter()
        .zip(&target.p)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let top = ell.max(ell_bar);
    let fine = SpaceGrid::new(0.0, top, 8 * (unit.n - 1) + 1)?;
    let sample = |p: &[f64], front: f64, x: f64| {
        if x >= front { 0.0 } else { interpolate_cubic(&unit, p, x / front) }
    };
    let sq: Vec<f64> = fine
        .nodes()
        .iter()
        .map(|&x| (sample(hist.p.row(m), ell, x) - sample(&target.p, ell_bar, x)).powi(2))
        .collect();
    Ok(TargetReport {
        front_gap: (ell - ell_bar).abs(),
        temperature_gap: trapezoid_unchecked(&sq, fine.dx).sqrt(),
        cylinder_gap,
        frame_gap,
    })
}

/// One point of the remainder study.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct RemainderPoint {
    pub epsilon: f64,
    /// Max-norm gap between the nonlinear and linearized responses.
    pub deviation: f64,
}

/// Nonlinear minus linearized response to the data `ε(z0, h0, w)`, for
/// each `ε`, with the least-squares log-log slope.
pub fn remainder_study(
    problem: &ControlProblem,
    z0: &[f64],
    h0: f64,
    w: &SpaceTimeField,
    epsilons: &[f64],
) -> Result<(Vec<RemainderPoint>, f64)> {
    let (grid, time) = (problem.grid(), problem.time());
    let system = problem.extended();
    let mut points = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        let z: Vec<f64> = z0.iter().map(|v| eps * v).collect();
        let ws = w.scaled(eps);
        let nl = solve_extended_nonlinear(&system, &z, eps * h0, &ws, None)?;
        let src = SourcePair {
            f: ws,
            g: vec![0.0; time.levels()],
        };
        let lin = solve_linearized(&problem.coeffs, &src, &z, eps * h0)?;
        let mut dev = 0.0f64;
        for k in 0..time.levels() {
            for j in 0..grid.n {
                dev = dev.max((nl.z.get(k, j) - lin.z.get(k, j)).abs());
            }
            dev = dev.max((nl.h[k] - lin.h[k]).abs());
        }
        points.push(RemainderPoint { epsilon: eps, deviation: dev });
    }
    let slope = loglog_slope(&points.iter().map(|p| (p.epsilon, p.deviation)).collect::<Vec<_>>());
    Ok((points, slope))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let len = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / len;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / len;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// `iteration,update,remainder_norm,terminal_z,terminal_h`
pub fn write_iterations_csv<W: std::io::Write>(result: &ControlResult, out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["iteration", "update", "remainder_norm", "terminal_z", "terminal_h"])?;
    for r in &result.history {
        wr.write_record([
            r.iteration.to_string(),
            crate::weights::fmt_num(r.update),
            crate::weights::fmt_num(r.remainder_norm),
            crate::weights::fmt_num(r.terminal_z),
            crate::weights::fmt_num(r.terminal_h),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// `t,v,v_bar,v_hat`
pub fn write_boundary_csv<W: std::io::Write>(result: &ControlResult, time: &TimeGrid, out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["t", "v", "v_bar", "v_hat"])?;
    for k in 0..time.levels() {
        let f = crate::weights::fmt_num;
        wr.write_record([
            f(time.t(k)),
            f(result.v[k]),
            f(result.v_bar[k]),
            f(result.v[k] - result.v_bar[k]),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// `t,x,z,w` for the controlled perturbation on `(−1, 1)`.
pub fn write_state_csv<W: std::io::Write>(result: &ControlResult, grid: &SpaceGrid, time: &TimeGrid, out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    wr.write_record(["t", "x", "z", "w"])?;
    let f = crate::weights::fmt_num;
    for k in 0..time.levels() {
        for j in 0..grid.n {
            wr.write_record([f(time.t(k)), f(grid.x(j)), f(result.z.get(k, j)), f(result.w.get(k, j))])?;
        }
    }
    wr.flush()?;
    Ok(())
}
