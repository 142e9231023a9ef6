//! Linearized state system on `(−1, 1)`.
//!
//! Backward Euler in time, centered differences in space, homogeneous
//! Dirichlet data at both ends. The front displacement `h` is advanced
//! implicitly together with the interior values through the right trace,
//! so each step is one bordered tridiagonal solve.

use crate::error::{Error, Result};
use crate::numerics::{
    gradient, right_trace_weights, solve_bordered, trace_unchecked, BorderedTridiagonal, Side,
    SpaceGrid, SpaceTimeField, TimeGrid, Tridiagonal,
};
use crate::stefan_forward::ReferenceTrajectory;

/// Coefficients of
/// `q̄ z_t − z_xx + a z_x + b z + N z_x(1) + R h = F`, `h_t + z_x(1) = G`.
///
/// The adjoint solver reuses the same container with its own sign
/// convention, see [`crate::adjoint`].
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub grid: SpaceGrid,
    pub time: TimeGrid,
    pub q_bar: Vec<f64>,
    pub a: SpaceTimeField,
    pub b: SpaceTimeField,
    pub n_kernel: SpaceTimeField,
    pub r: SpaceTimeField,
}

impl CoefficientSet {
    /// Heat operator with `q̄ = 1` and every other coefficient zero.
    pub fn zeros(grid: &SpaceGrid, time: &TimeGrid) -> Self {
        let levels = time.levels();
        Self {
            grid: *grid,
            time: *time,
            q_bar: vec![1.0; levels],
            a: SpaceTimeField::zeros(grid.n, levels),
            b: SpaceTimeField::zeros(grid.n, levels),
            n_kernel: SpaceTimeField::zeros(grid.n, levels),
            r: SpaceTimeField::zeros(grid.n, levels),
        }
    }

    pub fn check(&self) -> Result<()> {
        let (n, levels) = (self.grid.n, self.time.levels());
        if n < 4 {
            return Err(Error::InsufficientStencil(n));
        }
        if self.q_bar.len() != levels {
            return Err(Error::Dimension {
                what: "q̄ history",
                expected: levels,
                got: self.q_bar.len(),
            });
        }
        for (what, f) in [
            ("drift coefficient", &self.a),
            ("zeroth-order coefficient", &self.b),
            ("boundary kernel", &self.n_kernel),
            ("front coupling", &self.r),
        ] {
            if f.n() != n || f.levels() != levels {
                return Err(Error::Dimension {
                    what,
                    expected: n * levels,
                    got: f.n() * f.levels(),
                });
            }
        }
        if let Some(k) = self.q_bar.iter().position(|q| !(*q > 0.0)) {
            return Err(Error::Admissibility(format!("q̄ = {} at level {k}", self.q_bar[k])));
        }
        Ok(())
    }

    /// Diffusivity `d = 1/q̄` per level.
    pub fn d(&self) -> Vec<f64> {
        self.q_bar.iter().map(|q| 1.0 / q).collect()
    }
}

/// Sources of the linearized system, one row per time level.
#[derive(Debug, Clone)]
pub struct SourcePair {
    pub f: SpaceTimeField,
    pub g: Vec<f64>,
}

impl SourcePair {
    pub fn zeros(grid: &SpaceGrid, time: &TimeGrid) -> Self {
        Self {
            f: SpaceTimeField::zeros(grid.n, time.levels()),
            g: vec![0.0; time.levels()],
        }
    }
}

/// Random smooth data `(z₀, h₀, F, G)` drawn once and realized on any grid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct LinearDataSpec {
    pub initial_modes: [f64; 3],
    pub h0: f64,
    pub source_modes: [f64; 3],
    pub front_source: [f64; 2],
    /// Sources vanish for `t ≥ cutoff·T` when set.
    pub cutoff: Option<f64>,
}

impl LinearDataSpec {
    pub fn draw<R: rand::Rng>(rng: &mut R, cutoff: Option<f64>) -> Self {
        let mut u = |a: f64| rng.random_range(-a..a);
        Self {
            initial_modes: [u(1.0), u(0.5), u(0.25)],
            h0: u(0.5),
            source_modes: [u(1.0), u(1.0), u(0.5)],
            front_source: [u(0.5), u(0.5)],
            cutoff,
        }
    }

    pub fn draw_many(seed: u64, count: usize, cutoff: Option<f64>) -> Vec<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| Self::draw(&mut rng, cutoff)).collect()
    }

    /// `(sources, z₀, h₀)`; `z₀` and `F` vanish at `x = ±1`.
    pub fn realize(&self, grid: &SpaceGrid, time: &TimeGrid) -> (SourcePair, Vec<f64>, f64) {
        use std::f64::consts::PI;
        let tf = time.t_final;
        let envelope = |t: f64| match self.cutoff {
            Some(c) => (1.0 - t / (c * tf)).max(0.0).powi(3),
            None => 1.0,
        };
        let z0: Vec<f64> = grid
            .nodes()
            .iter()
            .map(|&x| {
                self.initial_modes
                    .iter()
                    .enumerate()
                    .map(|(i, a)| a * ((i + 1) as f64 * PI * (x + 1.0) / 2.0).sin())
                    .sum()
            })
            .collect();
        let n = grid.n;
        let f = SpaceTimeField::from_fn(n, time.levels(), |k, j| {
            if j == 0 || j == n - 1 {
                return 0.0;
            }
            let (x, t) = (grid.x(j), time.t(k));
            let s = t / tf;
            envelope(t)
                * (self.source_modes[0] * (PI * (x + 1.0) / 2.0).sin()
                    + self.source_modes[1] * (2.0 * PI * s).cos() * (1.0 - x * x)
                    + self.source_modes[2] * x * (1.0 - x * x) * s)
        });
        let g = time
            .times()
            .iter()
            .map(|&t| envelope(t) * (self.front_source[0] + self.front_source[1] * (PI * t / tf).sin()))
            .collect();
        (SourcePair { f, g }, z0, self.h0)
    }
}

/// Discrete solution: nodal `z` (boundary zeros included), `h`, and the
/// right trace `z_x(1)` per level.
#[derive(Debug, Clone)]
pub struct LinearHistory {
    pub z: SpaceTimeField,
    pub h: Vec<f64>,
    pub trace: Vec<f64>,
}

/// One implicit step in the unknowns `(z_1 … z_{n−2}, τ)` where `τ` is the
/// right trace. `h` has been eliminated through `h = h_old + dt (G − τ)`.
///
/// `q_coef` multiplies the time difference and `drift` is the full
/// first-order coefficient at interior nodes.
pub(crate) fn step_matrix(
    grid: &SpaceGrid,
    dt: f64,
    q_coef: f64,
    drift: &[f64],
    zeroth: &[f64],
    n_kernel: &[f64],
    r: &[f64],
) -> BorderedTridiagonal {
    let n = grid.n;
    let dx = grid.dx;
    let ni = n - 2;
    let inv2 = 1.0 / (dx * dx);
    let mut tri = Tridiagonal::zeros(ni);
    let mut col = vec![0.0; ni];
    for i in 0..ni {
        let j = i + 1;
        let adv = drift[j] / (2.0 * dx);
        tri.sub[i] = -inv2 - adv;
        tri.diag[i] = q_coef / dt + 2.0 * inv2 + zeroth[j];
        tri.sup[i] = -inv2 + adv;
        col[i] = n_kernel[j] - dt * r[j];
    }
    let w = right_trace_weights(dx);
    let mut row = vec![0.0; ni];
    // Nodes n−3 and n−2 are interior indices ni−2 and ni−1; node n−1 is zero.
    row[ni - 2] = -w[0];
    row[ni - 1] = -w[1];
    BorderedTridiagonal {
        tri,
        col,
        row,
        corner: 1.0,
    }
}

fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { what, expected, got });
    }
    Ok(())
}

/// March the linearized system from `(z0, h0)`. Coefficients and sources
/// are evaluated at the new level of each step.
pub fn solve_linearized(
    coeffs: &CoefficientSet,
    src: &SourcePair,
    z0: &[f64],
    h0: f64,
) -> Result<LinearHistory> {
    coeffs.check()?;
    let grid = coeffs.grid;
    let time = coeffs.time;
    let (n, levels) = (grid.n, time.levels());
    check_len("initial state", n, z0.len())?;
    check_len("interior source", n * levels, src.f.n() * src.f.levels())?;
    check_len("front source", levels, src.g.len())?;
    if z0[0].abs() > 1e-12 || z0[n - 1].abs() > 1e-12 {
        return Err(Error::Admissibility(
            "initial state must vanish at both ends".into(),
        ));
    }
    let dt = time.dt;
    let mut z = SpaceTimeField::zeros(n, levels);
    z.row_mut(0).copy_from_slice(z0);
    z.row_mut(0)[0] = 0.0;
    z.row_mut(0)[n - 1] = 0.0;
    let mut h = vec![0.0; levels];
    let mut trace = vec![0.0; levels];
    h[0] = h0;
    trace[0] = trace_unchecked(z.row(0), grid.dx, Side::Right);
    for k in 1..levels {
        let q = coeffs.q_bar[k];
        let sys = step_matrix(
            &grid,
            dt,
            q,
            coeffs.a.row(k),
            coeffs.b.row(k),
            coeffs.n_kernel.row(k),
            coeffs.r.row(k),
        );
        let h_pred = h[k - 1] + dt * src.g[k];
        let zold = z.row(k - 1);
        let f = src.f.row(k);
        let r = coeffs.r.row(k);
        let mut rhs: Vec<f64> = (1..n - 1)
            .map(|j| f[j] + q * zold[j] / dt - r[j] * h_pred)
            .collect();
        rhs.push(0.0);
        let sol = solve_bordered(&sys, &rhs).map_err(|e| e.at_step(k))?;
        let row = z.row_mut(k);
        row[1..n - 1].copy_from_slice(&sol[..n - 2]);
        trace[k] = sol[n - 2];
        h[k] = h_pred - dt * trace[k];
    }
    if !z.is_finite() || h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Discretization("non-finite linearized state".into()));
    }
    Ok(LinearHistory { z, h, trace })
}

/// Forward coefficients of the linearization around a reference trajectory
/// given on `(−1, 1)`.
pub fn stefan_coefficients(reference: &ReferenceTrajectory) -> Result<CoefficientSet> {
    let grid = reference.grid;
    let time = reference.time;
    let beta = reference.beta;
    let levels = time.levels();
    let xs = grid.nodes();
    let mut c = CoefficientSet::zeros(&grid, &time);
    c.q_bar = reference.q.clone();
    for k in 0..levels {
        let px1 = reference.px_right[k];
        let grad = gradient(reference.p.row(k), grid.dx);
        let pt = reference.p_t.row(k);
        for j in 0..grid.n {
            c.a.set(k, j, xs[j] * px1 / beta);
            c.n_kernel.set(k, j, xs[j] * grad[j] / beta);
            c.r.set(k, j, 2.0 * pt[j] / beta);
        }
    }
    c.check()?;
    Ok(c)
}

/// Discrete energy of a linearized solution against its data.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EnergyReport {
    /// `‖z‖²` in the discrete `H^{1,2}` norm (values, `z_x`, `z_xx`, `z_t`).
    pub z_norm_sq: f64,
    /// `‖h‖²_{H¹(0,T)}`.
    pub h_norm_sq: f64,
    /// `‖F‖² + ‖G‖² + ‖z₀‖²_{H¹} + |h₀|²`.
    pub data_norm_sq: f64,
    pub ratio: f64,
}

pub fn discrete_energy_report(
    history: &LinearHistory,
    grid: &SpaceGrid,
    time: &TimeGrid,
    src: &SourcePair,
) -> EnergyReport {
    let (n, dx, dt) = (grid.n, grid.dx, time.dt);
    let levels = time.levels();
    let mut zn = 0.0;
    let mut hn = 0.0;
    for k in 1..levels {
        let row = history.z.row(k);
        let prev = history.z.row(k - 1);
        let gx = gradient(row, dx);
        let mut acc = 0.0;
        for j in 0..n {
            let wj = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
            let zt = (row[j] - prev[j]) / dt;
            acc += wj * (row[j] * row[j] + gx[j] * gx[j] + zt * zt);
            if j > 0 && j < n - 1 {
                let zxx = (row[j + 1] - 2.0 * row[j] + row[j - 1]) / (dx * dx);
                acc += zxx * zxx;
            }
        }
        zn += dt * dx * acc;
        let ht = (history.h[k] - history.h[k - 1]) / dt;
        hn += dt * (history.h[k] * history.h[k] + ht * ht);
    }
    let mut data = 0.0;
    for k in 1..levels {
        let f = src.f.row(k);
        data += dt * dx * f.iter().map(|v| v * v).sum::<f64>();
        data += dt * src.g[k] * src.g[k];
    }
    let z0 = history.z.row(0);
    let g0 = gradient(z0, dx);
    data += dx * z0.iter().zip(&g0).map(|(a, b)| a * a + b * b).sum::<f64>();
    data += history.h[0] * history.h[0];
    let total = zn + hn;
    EnergyReport {
        z_norm_sq: zn,
        h_norm_sq: hn,
        data_norm_sq: data,
        ratio: if data > 0.0 { total / data } else if total == 0.0 { 0.0 } else { f64::INFINITY },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_data_gives_zero_solution() {
        let grid = SpaceGrid::symmetric(21).unwrap();
        let time = TimeGrid::new(0.5, 20).unwrap();
        let c = CoefficientSet::zeros(&grid, &time);
        let src = SourcePair::zeros(&grid, &time);
        let out = solve_linearized(&c, &src, &vec![0.0; 21], 0.0).unwrap();
        assert_eq!(out.z.max_abs(), 0.0);
        assert!(out.h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decoupled_heat_mode_decays_at_the_discrete_rate() {
        let grid = SpaceGrid::symmetric(41).unwrap();
        let time = TimeGrid::new(0.2, 50).unwrap();
        let c = CoefficientSet::zeros(&grid, &time);
        let mut src = SourcePair::zeros(&grid, &time);
        src.g = vec![0.3; time.levels()];
        let z0: Vec<f64> = grid.nodes().iter().map(|x| (0.5 * std::f64::consts::PI * (x + 1.0)).sin()).collect();
        let out = solve_linearized(&c, &src, &z0, 0.7).unwrap();
        let mu = (2.0 / grid.dx).powi(2) * (0.25 * std::f64::consts::PI * grid.dx).sin().powi(2);
        for k in [1, 10, 50] {
            let factor = (1.0 + time.dt * mu).powi(-(k as i32));
            for j in 1..grid.n - 1 {
                assert!((out.z.get(k, j) - factor * z0[j]).abs() < 1e-13);
            }
        }
        // h' = G − z_x(1): the trace enters with the discrete sign.
        for k in 1..time.levels() {
            let expect = out.h[k - 1] + time.dt * (0.3 - out.trace[k]);
            assert!((out.h[k] - expect).abs() < 1e-14);
            assert!(out.trace[k] < 0.0);
        }
    }

    #[test]
    fn solution_is_linear_in_the_data() {
        let grid = SpaceGrid::symmetric(21).unwrap();
        let time = TimeGrid::new(1.0, 40).unwrap();
        let mut c = CoefficientSet::zeros(&grid, &time);
        c.a = SpaceTimeField::from_fn(grid.n, time.levels(), |k, j| 0.1 * (k as f64 * 0.1 + j as f64 * 0.05).sin());
        c.r = SpaceTimeField::from_fn(grid.n, time.levels(), |_, j| 0.2 * grid.x(j));
        let specs = LinearDataSpec::draw_many(3, 2, None);
        let (s1, z1, h1) = specs[0].realize(&grid, &time);
        let (s2, z2, h2) = specs[1].realize(&grid, &time);
        let a = solve_linearized(&c, &s1, &z1, h1).unwrap();
        let b = solve_linearized(&c, &s2, &z2, h2).unwrap();
        let mut f = s1.f.scaled(2.0);
        f.axpy(1.0, &s2.f);
        let mixed = SourcePair {
            f,
            g: s1.g.iter().zip(&s2.g).map(|(x, y)| 2.0 * x + y).collect(),
        };
        let z0: Vec<f64> = z1.iter().zip(&z2).map(|(x, y)| 2.0 * x + y).collect();
        let c3 = solve_linearized(&c, &mixed, &z0, 2.0 * h1 + h2).unwrap();
        for k in 0..time.levels() {
            for j in 0..grid.n {
                assert!((c3.z.get(k, j) - 2.0 * a.z.get(k, j) - b.z.get(k, j)).abs() < 1e-12);
            }
            assert!((c3.h[k] - 2.0 * a.h[k] - b.h[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn incompatible_initial_state_is_rejected() {
        let grid = SpaceGrid::symmetric(11).unwrap();
        let time = TimeGrid::new(1.0, 10).unwrap();
        let c = CoefficientSet::zeros(&grid, &time);
        let src = SourcePair::zeros(&grid, &time);
        let mut z0 = vec![0.0; 11];
        z0[10] = 1e-3;
        assert!(matches!(solve_linearized(&c, &src, &z0, 0.0), Err(Error::Admissibility(_))));
    }

    #[test]
    fn negative_diffusion_scale_is_rejected() {
        let grid = SpaceGrid::symmetric(11).unwrap();
        let time = TimeGrid::new(1.0, 10).unwrap();
        let mut c = CoefficientSet::zeros(&grid, &time);
        c.q_bar[3] = -1.0;
        assert!(c.check().is_err());
    }
}
