//! Forward Stefan solvers on fixed domains.
//!
//! * [`solve_cylinder_stefan`] marches the cylinder form on `[0, 1]` (or any
//!   interval ending at `1`) with Dirichlet data on the left.
//! * [`solve_extended_nonlinear`] marches the perturbation system on `(−1, 1)`
//!   around a reference trajectory. Its difference scheme is the exact
//!   difference of two cylinder schemes, so linearization and remainder split
//!   without truncation error.
//! * [`NeumannSolution`] is the closed-form similarity solution.

use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::linear_system::{step_matrix, CoefficientSet, SourcePair};
use crate::numerics::{
    indicator, solve_bordered, trace_unchecked, Side, SpaceGrid, SpaceTimeField, TimeGrid,
    Tridiagonal,
};

/// Time rule for the front ODE `β q_t = −2 p_y(1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QRule {
    Trapezoid,
    ImplicitEuler,
}

#[derive(Debug, Clone, Copy)]
pub struct CylinderOptions {
    pub q_star: f64,
    pub q_rule: QRule,
    pub min_corrections: usize,
    pub max_corrections: usize,
    /// Stop once the relative update drops below this.
    pub tol: f64,
    /// Give up if the last update is still above this.
    pub fail_tol: f64,
}

impl Default for CylinderOptions {
    fn default() -> Self {
        Self {
            q_star: 0.0,
            q_rule: QRule::Trapezoid,
            min_corrections: 2,
            max_corrections: 10,
            tol: 1e-13,
            fail_tol: 1e-10,
        }
    }
}

/// Manufactured sources added to the two cylinder equations.
#[derive(Debug, Clone)]
pub struct CylinderSources {
    pub p: SpaceTimeField,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct CylinderHistory {
    pub grid: SpaceGrid,
    pub time: TimeGrid,
    pub p: SpaceTimeField,
    pub q: Vec<f64>,
    pub trace: Vec<f64>,
    pub corrections: Vec<usize>,
    pub max_update: f64,
    pub min_p: f64,
}

/// March `q p_t − p_yy + (y/β) p_y(1) p_y = 0`, `β q_t = −2 p_y(1)` with
/// `p(a) = v`, `p(1) = 0`.
pub fn solve_cylinder_stefan(
    p0: &[f64],
    q0: f64,
    v: &[f64],
    grid: &SpaceGrid,
    time: &TimeGrid,
    beta: f64,
    opts: &CylinderOptions,
) -> Result<CylinderHistory> {
    solve_cylinder_stefan_with_sources(p0, q0, v, grid, time, beta, opts, None)
}

#[allow(clippy::too_many_arguments)]
pub fn solve_cylinder_stefan_with_sources(
    p0: &[f64],
    q0: f64,
    v: &[f64],
    grid: &SpaceGrid,
    time: &TimeGrid,
    beta: f64,
    opts: &CylinderOptions,
    sources: Option<&CylinderSources>,
) -> Result<CylinderHistory> {
    let n = grid.n;
    let levels = time.levels();
    if n < 4 {
        return Err(Error::InsufficientStencil(n));
    }
    if (grid.b - 1.0).abs() > 1e-14 {
        return Err(Error::Grid(format!("cylinder grid must end at 1, got {}", grid.b)));
    }
    if p0.len() != n {
        return Err(Error::Dimension {
            what: "cylinder initial profile",
            expected: n,
            got: p0.len(),
        });
    }
    if v.len() != levels {
        return Err(Error::Dimension {
            what: "boundary data",
            expected: levels,
            got: v.len(),
        });
    }
    if !(beta > 0.0) {
        return Err(Error::Admissibility(format!("β must be positive, got {beta}")));
    }
    if !(q0 > opts.q_star) {
        return Err(Error::FrontCollapse {
            step: 0,
            q: q0,
            q_star: opts.q_star,
        });
    }
    let (dx, dt) = (grid.dx, time.dt);
    let xs = grid.nodes();
    let mut p = SpaceTimeField::zeros(n, levels);
    p.row_mut(0).copy_from_slice(p0);
    let mut q = vec![0.0; levels];
    let mut trace = vec![0.0; levels];
    let mut corrections = vec![0usize; levels];
    q[0] = q0;
    trace[0] = trace_unchecked(p0, dx, Side::Right);
    let mut max_update = 0.0f64;
    let inv2 = 1.0 / (dx * dx);
    let ni = n - 2;
    let mut tri = Tridiagonal::zeros(ni);
    for k in 1..levels {
        let old: Vec<f64> = p.row(k - 1).to_vec();
        let (q_old, tau_old) = (q[k - 1], trace[k - 1]);
        let (mut q_it, mut tau_it) = (q_old, tau_old);
        let mut prev: Option<Vec<f64>> = None;
        let mut update = f64::INFINITY;
        let mut used = 0;
        let mut new_row = old.clone();
        for c in 1..=opts.max_corrections {
            used = c;
            for i in 0..ni {
                let j = i + 1;
                let adv = xs[j] * tau_it / beta / (2.0 * dx);
                tri.sub[i] = -inv2 - adv;
                tri.diag[i] = q_it / dt + 2.0 * inv2;
                tri.sup[i] = -inv2 + adv;
            }
            let mut rhs: Vec<f64> = (1..n - 1).map(|j| q_it * old[j] / dt).collect();
            if let Some(s) = sources {
                for (i, r) in rhs.iter_mut().enumerate() {
                    *r += s.p.get(k, i + 1);
                }
            }
            rhs[0] -= tri.sub[0] * v[k];
            let lu = tri.factor().map_err(|e| e.at_step(k))?;
            let inner = lu.solve(&rhs);
            new_row[0] = v[k];
            new_row[1..n - 1].copy_from_slice(&inner);
            new_row[n - 1] = 0.0;
            let tau_new = trace_unchecked(&new_row, dx, Side::Right);
            let src_q = |l: usize| sources.map_or(0.0, |s| s.q[l]);
            let q_new = match opts.q_rule {
                QRule::Trapezoid => {
                    q_old - dt / beta * (tau_new + tau_old) + 0.5 * dt / beta * (src_q(k) + src_q(k - 1))
                }
                QRule::ImplicitEuler => q_old + dt / beta * (src_q(k) - 2.0 * tau_new),
            };
            let dq = (q_new - q_it).abs() / q_new.abs().max(f64::MIN_POSITIVE);
            let dp = match &prev {
                Some(pp) => {
                    let scale = new_row.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                    let diff = new_row
                        .iter()
                        .zip(pp)
                        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                    if scale > 0.0 { diff / scale } else { diff }
                }
                None => f64::INFINITY,
            };
            update = dq.max(if c == 1 { dq } else { dp });
            q_it = q_new;
            tau_it = tau_new;
            prev = Some(new_row.clone());
            if !q_new.is_finite() {
                return Err(Error::Nonlinear { step: k, update: f64::INFINITY });
            }
            if c >= opts.min_corrections && update <= opts.tol {
                break;
            }
        }
        if update > opts.fail_tol {
            return Err(Error::Nonlinear { step: k, update });
        }
        max_update = max_update.max(update);
        if q_it <= opts.q_star {
            return Err(Error::FrontCollapse {
                step: k,
                q: q_it,
                q_star: opts.q_star,
            });
        }
        p.row_mut(k).copy_from_slice(&new_row);
        q[k] = q_it;
        trace[k] = tau_it;
        corrections[k] = used;
    }
    let min_p = p.as_slice().iter().fold(f64::INFINITY, |m, x| m.min(*x));
    Ok(CylinderHistory {
        grid: *grid,
        time: *time,
        p,
        q,
        trace,
        corrections,
        max_update,
        min_p,
    })
}

/// Similarity solution with constant boundary temperature `V`, shifted in
/// time by `t₀ > 0` so the front starts at a positive position.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct NeumannSolution {
    pub boundary_value: f64,
    pub beta: f64,
    pub t0: f64,
    pub k: f64,
}

/// Root of `√π k e^{k²} erf(k) = ratio`.
pub fn neumann_constant(ratio: f64) -> Result<f64> {
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(Error::Admissibility(format!("V/β must be positive, got {ratio}")));
    }
    let f = |k: f64| std::f64::consts::PI.sqrt() * k * (k * k).exp() * erf(k) - ratio;
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-16 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

impl NeumannSolution {
    pub fn new(boundary_value: f64, beta: f64, t0: f64) -> Result<Self> {
        if !(beta > 0.0) || !(t0 > 0.0) {
            return Err(Error::Admissibility(format!(
                "need β > 0 and t₀ > 0, got β = {beta}, t₀ = {t0}"
            )));
        }
        let k = neumann_constant(boundary_value / beta)?;
        Ok(Self {
            boundary_value,
            beta,
            t0,
            k,
        })
    }

    pub fn front(&self, t: f64) -> f64 {
        2.0 * self.k * (t + self.t0).sqrt()
    }

    pub fn q(&self, t: f64) -> f64 {
        4.0 * self.k * self.k * (t + self.t0)
    }

    /// Physical temperature at `0 ≤ x ≤ ℓ(t)`.
    pub fn u(&self, x: f64, t: f64) -> f64 {
        self.boundary_value * (1.0 - erf(x / (2.0 * (t + self.t0).sqrt())) / erf(self.k))
    }

    /// Cylinder profile, independent of time.
    pub fn p(&self, y: f64) -> f64 {
        self.boundary_value * (1.0 - erf(self.k * y) / erf(self.k))
    }

    pub fn p_y(&self, y: f64) -> f64 {
        let k = self.k;
        -self.boundary_value * 2.0 * k / std::f64::consts::PI.sqrt() * (-(k * y) * (k * y)).exp()
            / erf(k)
    }
}

/// How a profile on `[0, 1]` is continued to `(−1, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extension {
    /// `f(−y) = f(y)`.
    Reflection,
    /// Reflection, except that the first node left of `0` continues the
    /// right one-sided slope so the centered difference at `0` matches it.
    SmoothedReflection,
}

/// Extend nodal values on a unit grid to the symmetric grid with `2n − 1` nodes.
pub fn extend_profile(unit: &[f64], dx: f64, ext: Extension) -> Vec<f64> {
    let n1 = unit.len();
    let mut out = vec![0.0; 2 * n1 - 1];
    for i in 0..n1 {
        out[n1 - 1 + i] = unit[i];
        out[n1 - 1 - i] = unit[i];
    }
    if ext == Extension::SmoothedReflection && n1 >= 3 {
        let slope = trace_unchecked(unit, dx, Side::Left);
        out[n1 - 2] = unit[1] - 2.0 * dx * slope;
    }
    out
}

/// Restriction of a symmetric-grid row to `[0, 1]`.
pub fn restrict_to_unit(row: &[f64]) -> Vec<f64> {
    let n1 = (row.len() + 1) / 2;
    row[n1 - 1..].to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Neumann,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReferenceSpec {
    pub kind: ReferenceKind,
    pub beta: f64,
    pub boundary_value: f64,
    pub t0: f64,
    pub ell_star: f64,
    pub extension: Extension,
}

impl ReferenceSpec {
    pub fn neumann(&self) -> Result<NeumannSolution> {
        NeumannSolution::new(self.boundary_value, self.beta, self.t0)
    }

    pub fn q_star(&self) -> f64 {
        self.ell_star * self.ell_star
    }
}

/// A reference state `(p̄, q̄, v̄)` on a fixed grid, with `p̄_t` and the right
/// trace `p̄_y(1)` precomputed per level.
#[derive(Debug, Clone)]
pub struct ReferenceTrajectory {
    pub kind: ReferenceKind,
    /// `true` when the trajectory solves the discrete scheme on its own grid.
    pub discrete: bool,
    pub grid: SpaceGrid,
    pub time: TimeGrid,
    pub beta: f64,
    pub q_star: f64,
    pub p: SpaceTimeField,
    pub p_t: SpaceTimeField,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub px_right: Vec<f64>,
}

impl ReferenceTrajectory {
    pub fn is_extended(&self) -> bool {
        (self.grid.a + 1.0).abs() < 1e-14
    }

    /// Index of the node at `y = 0`.
    pub fn origin(&self) -> usize {
        if self.is_extended() { (self.grid.n - 1) / 2 } else { 0 }
    }

    pub fn ell(&self, k: usize) -> f64 {
        self.q[k].sqrt()
    }
}

fn check_reference_grid(grid: &SpaceGrid) -> Result<bool> {
    if (grid.b - 1.0).abs() > 1e-14 {
        return Err(Error::Grid("reference grid must end at 1".into()));
    }
    if grid.a.abs() < 1e-14 {
        Ok(false)
    } else if (grid.a + 1.0).abs() < 1e-14 {
        if grid.n % 2 == 0 {
            return Err(Error::Grid("extended grid needs an odd node count".into()));
        }
        Ok(true)
    } else {
        Err(Error::Grid(format!("reference grid must start at 0 or -1, got {}", grid.a)))
    }
}

fn backward_time_derivative(p: &SpaceTimeField, dt: f64) -> SpaceTimeField {
    let (n, levels) = (p.n(), p.levels());
    let mut out = SpaceTimeField::zeros(n, levels);
    for k in 1..levels {
        for j in 0..n {
            out.set(k, j, (p.get(k, j) - p.get(k - 1, j)) / dt);
        }
    }
    let first = out.row(1.min(levels - 1)).to_vec();
    out.row_mut(0).copy_from_slice(&first);
    out
}

fn centered_time_derivative(p: &SpaceTimeField, dt: f64) -> SpaceTimeField {
    let (n, levels) = (p.n(), p.levels());
    SpaceTimeField::from_fn(n, levels, |k, j| {
        if k == 0 {
            (-3.0 * p.get(0, j) + 4.0 * p.get(1, j) - p.get(2, j)) / (2.0 * dt)
        } else if k == levels - 1 {
            (3.0 * p.get(k, j) - 4.0 * p.get(k - 1, j) + p.get(k - 2, j)) / (2.0 * dt)
        } else {
            (p.get(k + 1, j) - p.get(k - 1, j)) / (2.0 * dt)
        }
    })
}

fn neumann_initial(spec: &ReferenceSpec, grid: &SpaceGrid, extended: bool) -> Result<Vec<f64>> {
    let sol = spec.neumann()?;
    if extended {
        let unit = SpaceGrid::unit((grid.n + 1) / 2)?;
        let vals: Vec<f64> = unit.nodes().iter().map(|&y| sol.p(y)).collect();
        Ok(extend_profile(&vals, unit.dx, spec.extension))
    } else {
        Ok(grid.nodes().iter().map(|&y| sol.p(y)).collect())
    }
}

fn from_history(
    spec: &ReferenceSpec,
    hist: &CylinderHistory,
    v: Vec<f64>,
    discrete: bool,
) -> ReferenceTrajectory {
    let dt = hist.time.dt;
    let p_t = if discrete {
        backward_time_derivative(&hist.p, dt)
    } else {
        centered_time_derivative(&hist.p, dt)
    };
    let px_right = (0..hist.time.levels())
        .map(|k| trace_unchecked(hist.p.row(k), hist.grid.dx, Side::Right))
        .collect();
    ReferenceTrajectory {
        kind: spec.kind,
        discrete,
        grid: hist.grid,
        time: hist.time,
        beta: spec.beta,
        q_star: spec.q_star(),
        p: hist.p.clone(),
        p_t,
        q: hist.q.clone(),
        v,
        px_right,
    }
}

/// Reference trajectory on `grid` (either `[0, 1]` or `[−1, 1]`).
///
/// The Neumann kind samples the closed form. The numeric kind runs the
/// cylinder scheme on a grid twice as fine in space and time and keeps every
/// other node and level; on `[−1, 1]` the solve is done directly on the
/// extended interval with homogeneous data at `−1`.
pub fn make_reference_trajectory(
    spec: &ReferenceSpec,
    grid: &SpaceGrid,
    time: &TimeGrid,
) -> Result<ReferenceTrajectory> {
    let extended = check_reference_grid(grid)?;
    let levels = time.levels();
    let reference = match spec.kind {
        ReferenceKind::Neumann => {
            let sol = spec.neumann()?;
            let row = neumann_initial(spec, grid, extended)?;
            let p = SpaceTimeField::from_fn(grid.n, levels, |_, j| row[j]);
            let px1 = sol.p_y(1.0);
            ReferenceTrajectory {
                kind: spec.kind,
                discrete: false,
                grid: *grid,
                time: *time,
                beta: spec.beta,
                q_star: spec.q_star(),
                p,
                p_t: SpaceTimeField::zeros(grid.n, levels),
                q: time.times().iter().map(|&t| sol.q(t)).collect(),
                v: vec![spec.boundary_value; levels],
                px_right: vec![px1; levels],
            }
        }
        ReferenceKind::Numeric => {
            let fine = SpaceGrid::new(grid.a, grid.b, 2 * (grid.n - 1) + 1)?;
            let fine_t = TimeGrid::new(time.t_final, 2 * time.m)?;
            let p0 = neumann_initial(spec, &fine, extended)?;
            let left = if extended { 0.0 } else { spec.boundary_value };
            let opts = CylinderOptions {
                q_star: spec.q_star(),
                ..CylinderOptions::default()
            };
            let sol = spec.neumann()?;
            let hist = solve_cylinder_stefan(
                &p0,
                sol.q(0.0),
                &vec![left; fine_t.levels()],
                &fine,
                &fine_t,
                spec.beta,
                &opts,
            )?;
            let p = SpaceTimeField::from_fn(grid.n, levels, |k, j| hist.p.get(2 * k, 2 * j));
            let q: Vec<f64> = (0..levels).map(|k| hist.q[2 * k]).collect();
            let coarse = CylinderHistory {
                grid: *grid,
                time: *time,
                p,
                q,
                trace: Vec::new(),
                corrections: Vec::new(),
                max_update: hist.max_update,
                min_p: hist.min_p,
            };
            let origin = if extended { (grid.n - 1) / 2 } else { 0 };
            let v = (0..levels).map(|k| coarse.p.get(k, origin)).collect();
            from_history(spec, &coarse, v, false)
        }
    };
    validate_reference(&reference)?;
    Ok(reference)
}

/// The reference as the discrete scheme sees it on `grid` (`[−1, 1]`): the
/// cylinder scheme with the implicit front rule is run on the same grid and
/// time levels, so the perturbation system splits exactly.
pub fn discrete_shadow(
    spec: &ReferenceSpec,
    grid: &SpaceGrid,
    time: &TimeGrid,
) -> Result<ReferenceTrajectory> {
    if !check_reference_grid(grid)? {
        return Err(Error::Grid("discrete shadow lives on [-1, 1]".into()));
    }
    let sol = spec.neumann()?;
    let opts = CylinderOptions {
        q_star: spec.q_star(),
        q_rule: QRule::ImplicitEuler,
        ..CylinderOptions::default()
    };
    let levels = time.levels();
    let reference = match spec.kind {
        ReferenceKind::Neumann => {
            let unit = SpaceGrid::unit((grid.n + 1) / 2)?;
            let p0: Vec<f64> = unit.nodes().iter().map(|&y| sol.p(y)).collect();
            let v = vec![spec.boundary_value; levels];
            let hist = solve_cylinder_stefan(&p0, sol.q(0.0), &v, &unit, time, spec.beta, &opts)?;
            let p = SpaceTimeField::from_fn(grid.n, levels, |_, _| 0.0);
            let mut p = p;
            for k in 0..levels {
                let row = extend_profile(hist.p.row(k), unit.dx, spec.extension);
                p.row_mut(k).copy_from_slice(&row);
            }
            let ext = CylinderHistory {
                grid: *grid,
                time: *time,
                p,
                q: hist.q.clone(),
                trace: hist.trace.clone(),
                corrections: hist.corrections.clone(),
                max_update: hist.max_update,
                min_p: hist.min_p,
            };
            from_history(spec, &ext, v, true)
        }
        ReferenceKind::Numeric => {
            let p0 = neumann_initial(spec, grid, true)?;
            let hist = solve_cylinder_stefan(
                &p0,
                sol.q(0.0),
                &vec![0.0; levels],
                grid,
                time,
                spec.beta,
                &opts,
            )?;
            let origin = (grid.n - 1) / 2;
            let v = (0..levels).map(|k| hist.p.get(k, origin)).collect();
            from_history(spec, &hist, v, true)
        }
    };
    validate_reference(&reference)?;
    Ok(reference)
}

fn validate_reference(r: &ReferenceTrajectory) -> Result<()> {
    if !r.p.is_finite() || r.q.iter().any(|q| !q.is_finite()) {
        return Err(Error::Discretization("non-finite reference trajectory".into()));
    }
    if let Some(k) = r.q.iter().position(|&q| q <= r.q_star) {
        return Err(Error::FrontCollapse {
            step: k,
            q: r.q[k],
            q_star: r.q_star,
        });
    }
    Ok(())
}

/// The perturbation system around a reference, as seen by the solver.
#[derive(Debug, Clone, Copy)]
pub struct ExtendedSystem<'a> {
    pub coeffs: &'a CoefficientSet,
    pub beta: f64,
    pub q_star: f64,
    /// Control support; `None` applies the control field everywhere.
    pub omega: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct ExtendedHistory {
    pub z: SpaceTimeField,
    pub h: Vec<f64>,
    pub trace: Vec<f64>,
    pub corrections: Vec<usize>,
}

/// March
/// `(q̄ + 2h/β) z_t − z_xx + (a + x z_x(1)/β) z_x + N z_x(1) + R h = F + w 1_ω`,
/// `h_t + z_x(1) = G`,
/// solving each step by fixed-point iteration on the frozen `(h, z_x(1))`.
pub fn solve_extended_nonlinear(
    system: &ExtendedSystem<'_>,
    z0: &[f64],
    h0: f64,
    control: &SpaceTimeField,
    source: Option<&SourcePair>,
) -> Result<ExtendedHistory> {
    let c = system.coeffs;
    c.check()?;
    let grid = c.grid;
    let time = c.time;
    let (n, levels, dt, dx) = (grid.n, time.levels(), time.dt, grid.dx);
    if z0.len() != n {
        return Err(Error::Dimension {
            what: "perturbation initial state",
            expected: n,
            got: z0.len(),
        });
    }
    if control.n() != n || control.levels() != levels {
        return Err(Error::Dimension {
            what: "control field",
            expected: n * levels,
            got: control.n() * control.levels(),
        });
    }
    let beta = system.beta;
    let mask = match system.omega {
        Some(om) => indicator(&grid, om),
        None => vec![1.0; n],
    };
    let xs = grid.nodes();
    let mut z = SpaceTimeField::zeros(n, levels);
    z.row_mut(0).copy_from_slice(z0);
    z.row_mut(0)[0] = 0.0;
    z.row_mut(0)[n - 1] = 0.0;
    let mut h = vec![0.0; levels];
    let mut trace = vec![0.0; levels];
    let mut corrections = vec![0usize; levels];
    h[0] = h0;
    trace[0] = trace_unchecked(z.row(0), dx, Side::Right);
    if c.q_bar[0] + 2.0 * h0 / beta <= system.q_star {
        return Err(Error::FrontCollapse {
            step: 0,
            q: c.q_bar[0] + 2.0 * h0 / beta,
            q_star: system.q_star,
        });
    }
    let mut drift = vec![0.0; n];
    for k in 1..levels {
        let g = source.map_or(0.0, |s| s.g[k]);
        let h_pred = h[k - 1] + dt * g;
        let (mut h_it, mut tau_it) = (h[k - 1], trace[k - 1]);
        let zold = z.row(k - 1).to_vec();
        let a = c.a.row(k);
        let r = c.r.row(k);
        let w = control.row(k);
        let mut sol = Vec::new();
        let mut update = f64::INFINITY;
        let mut used = 0;
        for it in 1..=50 {
            used = it;
            let qc = c.q_bar[k] + 2.0 * h_it / beta;
            for j in 0..n {
                drift[j] = a[j] + xs[j] * tau_it / beta;
            }
            let sys = step_matrix(&grid, dt, qc, &drift, c.b.row(k), c.n_kernel.row(k), r);
            let mut rhs: Vec<f64> = (1..n - 1)
                .map(|j| {
                    let f = source.map_or(0.0, |s| s.f.get(k, j));
                    f + w[j] * mask[j] + qc * zold[j] / dt - r[j] * h_pred
                })
                .collect();
            rhs.push(0.0);
            sol = solve_bordered(&sys, &rhs).map_err(|e| e.at_step(k))?;
            let tau = sol[n - 2];
            let h_new = h_pred - dt * tau;
            let rel = |new: f64, old: f64| {
                let d = (new - old).abs();
                if d == 0.0 { 0.0 } else { d / new.abs().max(old.abs()) }
            };
            update = rel(tau, tau_it).max(rel(h_new, h_it));
            tau_it = tau;
            h_it = h_new;
            if !update.is_finite() {
                break;
            }
            if it >= 2 && update <= 1e-14 {
                break;
            }
        }
        if !(update <= 1e-10) {
            return Err(Error::Nonlinear { step: k, update });
        }
        let row = z.row_mut(k);
        row[1..n - 1].copy_from_slice(&sol[..n - 2]);
        // The last solve used the previous iterate; its trace is the one consistent with `row`.
        trace[k] = sol[n - 2];
        h[k] = h_pred - dt * trace[k];
        corrections[k] = used;
        let qk = c.q_bar[k] + 2.0 * h[k] / beta;
        if qk <= system.q_star {
            return Err(Error::FrontCollapse {
                step: k,
                q: qk,
                q_star: system.q_star,
            });
        }
    }
    if !z.is_finite() {
        return Err(Error::Discretization("non-finite perturbation state".into()));
    }
    Ok(ExtendedHistory {
        z,
        h,
        trace,
        corrections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neumann_constant_satisfies_transcendental_equation() {
        let k = neumann_constant(2.0).unwrap();
        let lhs = std::f64::consts::PI.sqrt() * k * (k * k).exp() * erf(k);
        assert!((lhs - 2.0).abs() < 1e-12);
    }

    #[test]
    fn extension_is_even_without_smoothing() {
        let unit = [1.0, 0.8, 0.5, 0.1, 0.0];
        let e = extend_profile(&unit, 0.25, Extension::Reflection);
        assert_eq!(e, vec![0.0, 0.1, 0.5, 0.8, 1.0, 0.8, 0.5, 0.1, 0.0]);
        assert_eq!(restrict_to_unit(&e), unit.to_vec());
    }
}
