//! Both sides of the weighted Carleman inequalities, evaluated on discrete
//! adjoint solutions, and the conjugated-operator splitting used in their
//! proof.
//!
//! Every weighted integral is accumulated in a [`LogSum`], so reports carry
//! natural logarithms. The ratio of the two sides is meaningful even when
//! the individual sides are far outside the `f64` range.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adjoint::{solve_adjoint, AdjointData, AdjointState};
use crate::error::{Error, Result};
use crate::linear_system::CoefficientSet;
use crate::numerics::{inner, trace_unchecked, LogSum, Side, SpaceGrid, SpaceTimeField, TimeGrid};
use crate::weights::{fmt_num, tabulate_weights, CarlemanParams, EtaFunction, WeightTable};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CarlemanReport {
    pub s: f64,
    pub lambda: f64,
    pub ln_lhs: f64,
    pub ln_rhs_local: f64,
    pub ln_rhs_f: f64,
    pub ln_rhs_g: f64,
    pub ln_rhs: f64,
}

impl CarlemanReport {
    /// `ln(LHS/RHS)`; `−∞` when the left side vanishes.
    pub fn ln_ratio(&self) -> f64 {
        if self.ln_lhs == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.ln_lhs - self.ln_rhs
        }
    }

    pub fn ratio(&self) -> f64 {
        self.ln_ratio().exp()
    }

    pub fn lhs(&self) -> f64 {
        self.ln_lhs.exp()
    }

    pub fn rhs(&self) -> f64 {
        self.ln_rhs.exp()
    }
}

fn check_table(table: &WeightTable, psi: &SpaceTimeField) -> Result<()> {
    let (n, levels) = (table.space.n, table.time.levels());
    if psi.n() != n || psi.levels() != levels {
        return Err(Error::Dimension {
            what: "adjoint field vs weight table",
            expected: n * levels,
            got: psi.n() * psi.levels(),
        });
    }
    table.params.validate(&table.eta, table.time.t_final)
}

fn finish(table: &WeightTable, lhs: LogSum, local: LogSum, f: LogSum, g: LogSum) -> CarlemanReport {
    let mut rhs = local;
    rhs.merge(&f);
    rhs.merge(&g);
    CarlemanReport {
        s: table.params.s,
        lambda: table.params.lambda,
        ln_lhs: lhs.ln(),
        ln_rhs_local: local.ln(),
        ln_rhs_f: f.ln(),
        ln_rhs_g: g.ln(),
        ln_rhs: rhs.ln(),
    }
}

/// Interior part of the left side: `(sξ)⁻¹(ψ_t² + ψ_xx²) + λ²sξψ_x² + λ⁴(sξ)³ψ²`
/// against `e^{−2sα}`, plus the boundary traces against `e^{−2sα̂}`.
fn alpha_family_lhs(table: &WeightTable, psi: &SpaceTimeField, gamma: Option<&[f64]>) -> LogSum {
    let (n, m) = (table.space.n, table.time.m);
    let (dx, dt) = (table.space.dx, table.time.dt);
    let (s, lam) = (table.params.s, table.params.lambda);
    let mut acc = LogSum::default();
    let ln_cell = (dx * dt).ln();
    for k in 1..m {
        let row = psi.row(k);
        let next = psi.row(k + 1);
        for j in 1..n - 1 {
            let sxi = s * table.xi.get(k, j);
            let pt = (next[j] - row[j]) / dt;
            let pxx = (row[j + 1] - 2.0 * row[j] + row[j - 1]) / (dx * dx);
            let px = (row[j + 1] - row[j - 1]) / (2.0 * dx);
            let v = (pt * pt + pxx * pxx) / sxi
                + lam * lam * sxi * px * px
                + lam.powi(4) * sxi.powi(3) * row[j] * row[j];
            acc.add(ln_cell - 2.0 * s * table.alpha.get(k, j), v);
        }
        let sxh = s * table.xi_hat[k];
        let pl = trace_unchecked(row, dx, Side::Left);
        let pr = trace_unchecked(row, dx, Side::Right);
        let mut v = lam.powi(3) * sxh.powi(3) * row[n - 1] * row[n - 1] + lam * sxh * (pl * pl + pr * pr);
        if let Some(g) = gamma {
            let gt = (g[k + 1] - g[k]) / dt;
            v += gt * gt + lam.powi(3) * sxh.powi(3) * g[k] * g[k];
        }
        acc.add(dt.ln() - 2.0 * s * table.alpha_hat[k], v);
    }
    acc
}

fn alpha_family_rhs(
    table: &WeightTable,
    psi: &SpaceTimeField,
    f: &SpaceTimeField,
    g: &[f64],
) -> (LogSum, LogSum, LogSum) {
    let (n, m) = (table.space.n, table.time.m);
    let (dx, dt) = (table.space.dx, table.time.dt);
    let (s, lam) = (table.params.s, table.params.lambda);
    let mask = crate::numerics::indicator(&table.space, table.params.omega);
    let ln_cell = (dx * dt).ln();
    let (mut local, mut fs, mut gs) = (LogSum::default(), LogSum::default(), LogSum::default());
    for k in 1..m {
        let row = psi.row(k);
        for j in 1..n - 1 {
            let lw = ln_cell - 2.0 * s * table.alpha.get(k, j);
            if mask[j] > 0.0 {
                let xi = table.xi.get(k, j);
                local.add(lw, s.powi(3) * lam.powi(4) * xi.powi(3) * row[j] * row[j]);
            }
            let fv = f.get(k, j);
            fs.add(lw, fv * fv);
        }
        gs.add(dt.ln() - 2.0 * s * table.alpha_hat[k], g[k] * g[k]);
    }
    (local, fs, gs)
}

/// Sides of the estimate for `ψ_t + d ψ_xx = f` with the nonlocal boundary
/// identity at `x = 1`.
pub fn carleman_sides_basic(
    psi: &SpaceTimeField,
    f: &SpaceTimeField,
    g: &[f64],
    table: &WeightTable,
) -> Result<CarlemanReport> {
    check_table(table, psi)?;
    let lhs = alpha_family_lhs(table, psi, None);
    let (local, fs, gs) = alpha_family_rhs(table, psi, f, g);
    Ok(finish(table, lhs, local, fs, gs))
}

/// Report for the linearized Stefan adjoint, together with the same
/// solution seen as a solution of the basic system.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct TrajectoryReport {
    pub full: CarlemanReport,
    pub basic_frame: CarlemanReport,
}

/// `coeffs` are the adjoint coefficients of the trajectory
/// (see [`crate::adjoint::stefan_adjoint_coefficients`]); `g1`, `g2` are the
/// sources of the adjoint system.
pub fn carleman_sides_trajectory(
    state: &AdjointState,
    g1: &SpaceTimeField,
    g2: &[f64],
    table: &WeightTable,
    coeffs: &CoefficientSet,
) -> Result<TrajectoryReport> {
    check_table(table, &state.phi)?;
    let lhs = alpha_family_lhs(table, &state.phi, Some(&state.gamma));
    let (local, fs, gs) = alpha_family_rhs(table, &state.phi, g1, g2);
    let full = finish(table, lhs, local, fs, gs);
    // ψ_t + d ψ_xx = −d (g₁ + a φ_x + b φ) in the basic frame.
    let (n, levels, dx) = (coeffs.grid.n, coeffs.time.levels(), coeffs.grid.dx);
    let mapped = SpaceTimeField::from_fn(n, levels, |k, j| {
        let row = state.phi.row(k);
        let px = if j == 0 || j == n - 1 {
            0.0
        } else {
            (row[j + 1] - row[j - 1]) / (2.0 * dx)
        };
        let lower = coeffs.a.get(k, j) * px + coeffs.b.get(k, j) * row[j];
        -(g1.get(k, j) + lower) / coeffs.q_bar[k]
    });
    let basic_frame = carleman_sides_basic(&state.phi, &mapped, g2, table)?;
    Ok(TrajectoryReport { full, basic_frame })
}

/// Sides of the estimate with weights that stay finite at `t = 0`. The
/// unweighted initial terms `‖φ(0)‖²_{H¹} + |γ(0)|²` enter the left side.
pub fn carleman_sides_modified(
    state: &AdjointState,
    g1: &SpaceTimeField,
    g2: &[f64],
    table: &WeightTable,
) -> Result<CarlemanReport> {
    check_table(table, &state.phi)?;
    let psi = &state.phi;
    let gamma = &state.gamma;
    let (n, m) = (table.space.n, table.time.m);
    let (dx, dt) = (table.space.dx, table.time.dt);
    let s = table.params.s;
    let ln_cell = (dx * dt).ln();
    let mask = crate::numerics::indicator(&table.space, table.params.omega);
    let mut lhs = LogSum::default();
    let (mut local, mut fs, mut gs) = (LogSum::default(), LogSum::default(), LogSum::default());
    for k in 0..m {
        let row = psi.row(k);
        let next = psi.row(k + 1);
        for j in 1..n - 1 {
            let mu = table.mu.get(k, j);
            let pt = (next[j] - row[j]) / dt;
            let pxx = (row[j + 1] - 2.0 * row[j] + row[j - 1]) / (dx * dx);
            let px = (row[j + 1] - row[j - 1]) / (2.0 * dx);
            let v = (pt * pt + pxx * pxx) / mu + mu * px * px + mu.powi(3) * row[j] * row[j];
            lhs.add(ln_cell - 2.0 * s * table.zeta.get(k, j), v);
            let lw_star = ln_cell - 2.0 * s * table.zeta_star[k];
            if mask[j] > 0.0 {
                local.add(lw_star, table.mu_star[k].powi(3) * row[j] * row[j]);
            }
            let fv = g1.get(k, j);
            fs.add(lw_star, fv * fv);
        }
        let muh = table.mu_hat[k];
        let pl = trace_unchecked(row, dx, Side::Left);
        let pr = trace_unchecked(row, dx, Side::Right);
        let gt = (gamma[k + 1] - gamma[k]) / dt;
        let v = gt * gt + muh * (pl * pl + pr * pr) + muh.powi(3) * (gamma[k] * gamma[k] + row[n - 1] * row[n - 1]);
        let lw_hat = dt.ln() - 2.0 * s * table.zeta_hat[k];
        lhs.add(lw_hat, v);
        gs.add(lw_hat, g2[k] * g2[k]);
    }
    let first = psi.row(0);
    let grad = crate::numerics::gradient(first, dx);
    let h1 = inner(first, first, dx) + inner(&grad, &grad, dx);
    lhs.add(0.0, h1 + gamma[0] * gamma[0]);
    Ok(finish(table, lhs, local, fs, gs))
}

/// The conjugated-operator splitting `e^{−sα} P(e^{sα} w) = P_e w + P_k w`
/// evaluated on a discrete field.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct IdentityReport {
    /// `‖P_e w + (P_k w − s d α_xx w)‖²`.
    pub lhs: f64,
    pub pe_sq: f64,
    pub pk_sq: f64,
    pub cross: f64,
    /// Relative gap of the binomial expansion.
    pub gap: f64,
    /// `‖P_e w + P_k w − e^{−sα} f‖ / ‖e^{−sα} f‖`: discretization error of the splitting.
    pub consistency: f64,
    /// Cross term after integrating by parts in space and time.
    pub cross_by_parts: f64,
    pub by_parts_gap: f64,
}

/// `w = e^{−s(α − min α)} ψ`; the constant shift cancels from every relation.
pub fn decomposition_identity(
    psi: &SpaceTimeField,
    f: &SpaceTimeField,
    table: &WeightTable,
    d: &[f64],
) -> Result<IdentityReport> {
    check_table(table, psi)?;
    let (n, m) = (table.space.n, table.time.m);
    let (dx, dt, tf) = (table.space.dx, table.time.dt, table.time.t_final);
    let s = table.params.s;
    let shape = table.shape();
    let xs = table.space.nodes();
    let levels = m + 1;
    let a_min = (1..m)
        .flat_map(|k| table.alpha.row(k).iter().copied())
        .fold(f64::INFINITY, f64::min);
    let w = SpaceTimeField::from_fn(n, levels, |k, j| {
        if k == 0 || k == m {
            0.0
        } else {
            (-s * (table.alpha.get(k, j) - a_min)).exp() * psi.get(k, j)
        }
    });
    let ddot = |k: usize| {
        if k == 0 {
            (d[1] - d[0]) / dt
        } else if k == m {
            (d[m] - d[m - 1]) / dt
        } else {
            (d[k + 1] - d[k - 1]) / (2.0 * dt)
        }
    };
    let (mut lhs, mut pe2, mut pk2, mut cross) = (0.0, 0.0, 0.0, 0.0);
    let (mut defect, mut src) = (0.0, 0.0);
    let mut id1 = 0.0;
    let mut id2 = 0.0;
    let mut bs = 0.0;
    for k in 1..m {
        let t = table.time.t(k);
        let dk = d[k];
        let (wm, w0, wp) = (w.row(k - 1), w.row(k), w.row(k + 1));
        for j in 1..n - 1 {
            let x = xs[j];
            let ax = shape.alpha_x(x, t, tf);
            let axx = shape.alpha_xx(x, t, tf);
            let at = shape.alpha_t(x, t, tf);
            let wx = (w0[j + 1] - w0[j - 1]) / (2.0 * dx);
            let wxx = (w0[j + 1] - 2.0 * w0[j] + w0[j - 1]) / (dx * dx);
            let wt = (wp[j] - wm[j]) / (2.0 * dt);
            let pe = dk * wxx + (s * at + s * s * dk * ax * ax) * w0[j];
            let pk = wt + 2.0 * s * dk * ax * wx + s * dk * axx * w0[j];
            let b = pk - s * dk * axx * w0[j];
            let sum = pe + b;
            lhs += dt * dx * sum * sum;
            pe2 += dt * dx * pe * pe;
            pk2 += dt * dx * b * b;
            cross += 2.0 * dt * dx * pe * b;
            let ef = (-s * (table.alpha.get(k, j) - a_min)).exp() * f.get(k, j);
            defect += dt * dx * (pe + pk - ef).powi(2);
            src += dt * dx * ef * ef;
            // Distributed terms after integration by parts.
            let axt = shape.alpha_xt(x, t, tf);
            let att = shape.alpha_tt(x, t, tf);
            let d_ax2_t = ddot(k) * ax * ax + 2.0 * dk * ax * axt;
            let ax_at_x = axx * at + ax * axt;
            id1 += dt * dx * (-2.0 * s * dk * dk * axx + ddot(k)) * wx * wx;
            id2 += dt * dx
                * (-s * att - s * s * d_ax2_t - 2.0 * s * s * dk * ax_at_x - 6.0 * s.powi(3) * dk * dk * ax * ax * axx)
                * w0[j]
                * w0[j];
        }
        // Boundary terms at x = ±1; w vanishes at both ends.
        for (side, sign, x) in [(Side::Right, 1.0, 1.0), (Side::Left, -1.0, -1.0)] {
            let wx = trace_unchecked(w0, dx, side);
            let ax = shape.alpha_x(x, t, tf);
            let idx = if sign > 0.0 { n - 1 } else { 0 };
            let wt = (wp[idx] - wm[idx]) / (2.0 * dt);
            let at = shape.alpha_t(x, t, tf);
            let term = 2.0 * dk * wt * wx
                + 2.0 * s * dk * dk * ax * wx * wx
                + 2.0 * s * s * dk * ax * (at + s * dk * ax * ax) * w0[idx] * w0[idx];
            bs += sign * dt * term;
        }
    }
    let by_parts = id1 + id2 + bs;
    let expand = pe2 + pk2 + cross;
    let rel = |a: f64, b: f64| {
        let sc = a.abs().max(b.abs());
        if sc == 0.0 { 0.0 } else { (a - b).abs() / sc }
    };
    Ok(IdentityReport {
        lhs,
        pe_sq: pe2,
        pk_sq: pk2,
        cross,
        gap: rel(lhs, expand),
        consistency: if src > 0.0 { (defect / src).sqrt() } else { defect.sqrt() },
        cross_by_parts: by_parts,
        by_parts_gap: rel(cross, by_parts),
    })
}

/// Random smooth data for the basic adjoint system, drawn once and then
/// realized on any grid, so the same dataset can be compared across meshes.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BasicDatasetSpec {
    pub terminal_modes: [f64; 4],
    pub source_modes: [f64; 3],
    pub boundary_source: [f64; 2],
    pub kernel_amp: f64,
    pub coupling_amp: f64,
    pub diffusivity_slope: f64,
}

impl BasicDatasetSpec {
    pub fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        Self {
            terminal_modes: [u(-1.0, 1.0), u(-1.0, 1.0), u(-0.5, 0.5), u(-0.5, 0.5)],
            source_modes: [u(-1.0, 1.0), u(-1.0, 1.0), u(-1.0, 1.0)],
            boundary_source: [u(-1.0, 1.0), u(-1.0, 1.0)],
            kernel_amp: u(-0.3, 0.3),
            coupling_amp: u(-0.3, 0.3),
            diffusivity_slope: u(-0.3, 0.3),
        }
    }

    pub fn draw_many(seed: u64, count: usize) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| Self::draw(&mut rng)).collect()
    }
}

/// A realized dataset: coefficients, sources, and the discrete solution.
#[derive(Debug, Clone)]
pub struct BasicDataset {
    pub coeffs: CoefficientSet,
    pub d: Vec<f64>,
    pub f: SpaceTimeField,
    pub g: Vec<f64>,
    pub state: AdjointState,
}

pub fn realize_basic_dataset(spec: &BasicDatasetSpec, grid: &SpaceGrid, time: &TimeGrid) -> Result<BasicDataset> {
    use std::f64::consts::PI;
    let (n, levels) = (grid.n, time.levels());
    let tf = time.t_final;
    let mut c = CoefficientSet::zeros(grid, time);
    let d: Vec<f64> = time.times().iter().map(|t| 1.0 + spec.diffusivity_slope * t / tf).collect();
    c.q_bar = d.iter().map(|v| 1.0 / v).collect();
    c.n_kernel = SpaceTimeField::from_fn(n, levels, |_, j| spec.kernel_amp * (1.0 + grid.x(j)));
    c.r = SpaceTimeField::from_fn(n, levels, |k, j| spec.coupling_amp * (PI * grid.x(j)).cos() * (1.0 + time.t(k) / tf));
    let f = SpaceTimeField::from_fn(n, levels, |k, j| {
        let x = grid.x(j);
        let t = time.t(k) / tf;
        spec.source_modes[0] * (PI * x).sin()
            + spec.source_modes[1] * (2.0 * PI * t).cos() * (1.0 - x * x)
            + spec.source_modes[2] * x * t
    });
    let g: Vec<f64> = time
        .times()
        .iter()
        .map(|t| spec.boundary_source[0] + spec.boundary_source[1] * (PI * t / tf).sin())
        .collect();
    let terminal: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|&x| {
            spec.terminal_modes
                .iter()
                .enumerate()
                .map(|(i, a)| a * ((i + 1) as f64 * PI * (x + 1.0) / 2.0).sin())
                .sum::<f64>()
        })
        .collect();
    let mut terminal = terminal;
    terminal[0] = 0.0;
    terminal[n - 1] = 0.0;
    let gamma_t = -inner(c.n_kernel.row(time.m), &terminal, grid.dx);
    // The backward operator is −q̄(ψ_t + dψ_xx), so its source is −q̄ f.
    let f_adj = SpaceTimeField::from_fn(n, levels, |k, j| -c.q_bar[k] * f.get(k, j));
    let data = AdjointData {
        f: f_adj,
        g: g.clone(),
        phi_terminal: terminal,
        gamma_terminal: gamma_t,
    };
    let state = solve_adjoint(&c, &data, 1.0)?;
    Ok(BasicDataset { coeffs: c, d, f, g, state })
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SweepRow {
    pub dataset: usize,
    pub s: f64,
    pub lambda: f64,
    pub ln_lhs: f64,
    pub ln_rhs: f64,
    pub ratio: f64,
}

/// Evaluate the basic estimate over `s ∈ {1,2,4}·s₀(T+T²)`, `λ ∈ {λ₀, 2λ₀}`
/// for every dataset. Rows come back ordered by dataset, then `s`, then `λ`.
pub fn carleman_sweep(
    eta: &EtaFunction,
    base: &CarlemanParams,
    datasets: &[BasicDataset],
) -> Result<Vec<SweepRow>> {
    let Some(first) = datasets.first() else {
        return Ok(Vec::new());
    };
    let grid = first.coeffs.grid;
    let time = first.coeffs.time;
    let s_min = base.s_threshold(time.t_final);
    let mut points = Vec::new();
    for sf in [1.0, 2.0, 4.0] {
        for lf in [1.0, 2.0] {
            points.push(base.with_s_lambda(sf * s_min, lf * base.lambda0));
        }
    }
    let tables: Vec<WeightTable> = points
        .par_iter()
        .map(|p| tabulate_weights(eta, p, &grid, &time))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..datasets.len())
        .flat_map(|d| (0..tables.len()).map(move |p| (d, p)))
        .collect();
    jobs.par_iter()
        .map(|&(d, p)| {
            let ds = &datasets[d];
            let rep = carleman_sides_basic(&ds.state.phi, &ds.f, &ds.g, &tables[p])?;
            Ok(SweepRow {
                dataset: d,
                s: rep.s,
                lambda: rep.lambda,
                ln_lhs: rep.ln_lhs,
                ln_rhs: rep.ln_rhs,
                ratio: rep.ratio(),
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["dataset", "s", "lambda", "ln_lhs", "ln_rhs", "ratio"])?;
    for r in rows {
        w.write_record([
            r.dataset.to_string(),
            fmt_num(r.s),
            fmt_num(r.lambda),
            fmt_num(r.ln_lhs),
            fmt_num(r.ln_rhs),
            fmt_num(r.ratio),
        ])?;
    }
    w.flush()?;
    Ok(())
}
