//! Backward adjoint systems and the transposition identity.
//!
//! Two discretizations are provided.
//!
//! * [`solve_adjoint`] discretizes the backward system directly:
//!   `−q̄ φ_t − φ_xx − a φ_x − b φ = f`, `φ(−1) = 0`,
//!   `φ(1) = γ + (N, φ)`, `γ_t = (R, φ) + g`,
//!   with given terminal data. The nonlocal boundary identity is solved
//!   together with the interior values at every step, followed by
//!   refinement sweeps on the step residual.
//! * [`solve_matched_adjoint`] is the exact transpose of the forward step
//!   map of [`crate::linear_system::solve_linearized`] in the discrete
//!   `L²` pairing, so the duality gap is at roundoff level.

use crate::error::{Error, Result};
use crate::linear_system::{solve_linearized, CoefficientSet, SourcePair};
use crate::numerics::{
    dot, gradient, inner, right_trace_weights, solve_bordered, BorderedTridiagonal, SpaceTimeField,
    Tridiagonal,
};
use crate::stefan_forward::ReferenceTrajectory;

#[derive(Debug, Clone)]
pub struct AdjointData {
    pub f: SpaceTimeField,
    pub g: Vec<f64>,
    pub phi_terminal: Vec<f64>,
    pub gamma_terminal: f64,
}

impl AdjointData {
    pub fn zero_terminal(f: SpaceTimeField, g: Vec<f64>) -> Self {
        let n = f.n();
        Self {
            f,
            g,
            phi_terminal: vec![0.0; n],
            gamma_terminal: 0.0,
        }
    }
}

/// Diagnostics of the coupled boundary solve.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct CouplingReport {
    pub max_sweeps: usize,
    pub max_update: f64,
    /// Largest ratio of successive correction norms; `0` when one sweep sufficed.
    pub contraction: f64,
    /// Largest violation of the boundary identity over all levels.
    pub boundary_residual: f64,
}

#[derive(Debug, Clone)]
pub struct AdjointState {
    /// Nodal values, boundary nodes included, levels `0..=m`.
    pub phi: SpaceTimeField,
    pub gamma: Vec<f64>,
    pub report: CouplingReport,
}

const SWEEP_TOL: f64 = 1e-11;
const MAX_SWEEPS: usize = 25;

/// Direct solve followed by residual-correction sweeps.
fn refined_solve(sys: &BorderedTridiagonal, rhs: &[f64], report: &mut CouplingReport) -> Result<Vec<f64>> {
    let mut x = solve_bordered(sys, rhs)?;
    let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let mut last = f64::NAN;
    let mut sweeps = 1;
    let mut update = 0.0;
    for _ in 1..MAX_SWEEPS {
        let ax = sys.apply(&x);
        let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let delta = solve_bordered(sys, &r)?;
        let dn = norm(&delta);
        let xn = norm(&x).max(f64::MIN_POSITIVE);
        for (xi, di) in x.iter_mut().zip(&delta) {
            *xi += di;
        }
        sweeps += 1;
        update = dn / xn;
        if last.is_finite() && last > 0.0 {
            report.contraction = report.contraction.max(dn / last);
        }
        last = dn;
        if update <= SWEEP_TOL {
            break;
        }
    }
    if update > SWEEP_TOL {
        return Err(Error::Coupling {
            iterations: sweeps,
            update,
            contraction: report.contraction,
        });
    }
    report.max_sweeps = report.max_sweeps.max(sweeps);
    report.max_update = report.max_update.max(update);
    Ok(x)
}

/// Backward march of the directly discretized adjoint. `compat` multiplies
/// `γ_T` in the terminal boundary identity.
pub fn solve_adjoint(coeffs: &CoefficientSet, data: &AdjointData, compat: f64) -> Result<AdjointState> {
    coeffs.check()?;
    let grid = coeffs.grid;
    let time = coeffs.time;
    let (n, levels, dx, dt) = (grid.n, time.levels(), grid.dx, time.dt);
    if data.f.n() != n || data.f.levels() != levels || data.g.len() != levels {
        return Err(Error::Dimension {
            what: "adjoint source",
            expected: n * levels,
            got: data.f.n() * data.f.levels(),
        });
    }
    if data.phi_terminal.len() != n {
        return Err(Error::Dimension {
            what: "adjoint terminal profile",
            expected: n,
            got: data.phi_terminal.len(),
        });
    }
    let m = time.m;
    let phi_t = &data.phi_terminal;
    let boundary_identity = |phi: &[f64], gamma: f64, k: usize, c: f64| {
        phi[n - 1] - c * gamma - inner(coeffs.n_kernel.row(k), phi, dx)
    };
    let mismatch = phi_t[0]
        .abs()
        .max(boundary_identity(phi_t, data.gamma_terminal, m, compat).abs());
    let scale = phi_t.iter().fold(data.gamma_terminal.abs(), |a, b| a.max(b.abs())).max(1.0);
    if mismatch > 1e-10 * scale {
        return Err(Error::Compatibility { mismatch });
    }

    let mut phi = SpaceTimeField::zeros(n, levels);
    phi.row_mut(m).copy_from_slice(phi_t);
    let mut gamma = vec![0.0; levels];
    gamma[m] = data.gamma_terminal;
    let mut report = CouplingReport {
        max_sweeps: 0,
        max_update: 0.0,
        contraction: 0.0,
        boundary_residual: 0.0,
    };
    let inv2 = 1.0 / (dx * dx);
    let ni = n - 2;
    for k in (0..m).rev() {
        let q = coeffs.q_bar[k];
        let a = coeffs.a.row(k);
        let b = coeffs.b.row(k);
        let nk = coeffs.n_kernel.row(k);
        let rk = coeffs.r.row(k);
        let mut tri = Tridiagonal::zeros(ni);
        let mut col = vec![0.0; ni];
        let mut row = vec![0.0; ni];
        for i in 0..ni {
            let j = i + 1;
            let adv = a[j] / (2.0 * dx);
            tri.sub[i] = -inv2 + adv;
            tri.diag[i] = q / dt + 2.0 * inv2 - b[j];
            tri.sup[i] = -inv2 - adv;
            row[i] = -dx * (nk[j] - dt * rk[j]);
        }
        col[ni - 1] = tri.sup[ni - 1];
        let corner = 1.0 - 0.5 * dx * (nk[n - 1] - dt * rk[n - 1]);
        let sys = BorderedTridiagonal {
            tri,
            col,
            row,
            corner,
        };
        let next = phi.row(k + 1).to_vec();
        let f = data.f.row(k);
        let mut rhs: Vec<f64> = (1..n - 1).map(|j| f[j] + q * next[j] / dt).collect();
        rhs.push(gamma[k + 1] - dt * data.g[k]);
        let sol = refined_solve(&sys, &rhs, &mut report).map_err(|e| e.at_step(k))?;
        let out = phi.row_mut(k);
        out[0] = 0.0;
        out[1..n - 1].copy_from_slice(&sol[..ni]);
        out[n - 1] = sol[ni];
        let phi_k = phi.row(k);
        gamma[k] = gamma[k + 1] - dt * inner(rk, phi_k, dx) - dt * data.g[k];
        let res = boundary_identity(phi_k, gamma[k], k, 1.0).abs();
        report.boundary_residual = report.boundary_residual.max(res);
    }
    if !phi.is_finite() {
        return Err(Error::Discretization("non-finite adjoint state".into()));
    }
    Ok(AdjointState { phi, gamma, report })
}

/// Exact discrete transpose of the forward step map. Terminal data vanish.
/// `phi` holds levels `1..=m` (level `0` is left at zero) and its right
/// boundary value is the derived `γ + dx Σ N φ`.
pub fn solve_matched_adjoint(forward: &CoefficientSet, f: &SpaceTimeField, g: &[f64]) -> Result<AdjointState> {
    forward.check()?;
    let grid = forward.grid;
    let time = forward.time;
    let (n, levels, dx, dt) = (grid.n, time.levels(), grid.dx, time.dt);
    if f.n() != n || f.levels() != levels || g.len() != levels {
        return Err(Error::Dimension {
            what: "matched adjoint source",
            expected: n * levels,
            got: f.n() * f.levels(),
        });
    }
    let m = time.m;
    let ni = n - 2;
    let inv2 = 1.0 / (dx * dx);
    let w = right_trace_weights(dx);
    let mut phi = SpaceTimeField::zeros(n, levels + 1);
    let mut gamma = vec![0.0; levels + 1];
    let mut report = CouplingReport {
        max_sweeps: 0,
        max_update: 0.0,
        contraction: 0.0,
        boundary_residual: 0.0,
    };
    for k in (1..=m).rev() {
        let q = forward.q_bar[k];
        let a = forward.a.row(k);
        let b = forward.b.row(k);
        let nk = forward.n_kernel.row(k);
        let rk = forward.r.row(k);
        let mut tri = Tridiagonal::zeros(ni);
        for i in 0..ni {
            let j = i + 1;
            tri.diag[i] = q / dt + 2.0 * inv2 + b[j];
            // Transpose of the centered drift rows j−1 and j+1.
            tri.sub[i] = -inv2 + a[j - 1] / (2.0 * dx);
            tri.sup[i] = -inv2 - a[j + 1] / (2.0 * dx);
        }
        let mut col = vec![0.0; ni];
        col[ni - 2] = w[0] / dx;
        col[ni - 1] = w[1] / dx;
        let row: Vec<f64> = (0..ni).map(|i| -dx * (nk[i + 1] - dt * rk[i + 1])).collect();
        let sys = BorderedTridiagonal {
            tri,
            col,
            row,
            corner: 1.0,
        };
        let q_next = if k < m { forward.q_bar[k + 1] } else { 0.0 };
        let next = phi.row(k + 1).to_vec();
        let fk = f.row(k);
        let mut rhs: Vec<f64> = (1..n - 1).map(|j| fk[j] + q_next * next[j] / dt).collect();
        rhs.push(gamma[k + 1] + dt * g[k]);
        let sol = refined_solve(&sys, &rhs, &mut report).map_err(|e| e.at_step(k))?;
        let interior = &sol[..ni];
        let rsum: f64 = dx * dot(&rk[1..n - 1], interior);
        gamma[k] = gamma[k + 1] + dt * g[k] - dt * rsum;
        let nsum: f64 = dx * dot(&nk[1..n - 1], interior);
        let out = phi.row_mut(k);
        out[1..n - 1].copy_from_slice(interior);
        out[n - 1] = gamma[k] + nsum;
    }
    let rows: Vec<Vec<f64>> = (0..levels).map(|k| phi.row(k).to_vec()).collect();
    gamma.truncate(levels);
    Ok(AdjointState {
        phi: SpaceTimeField::from_rows(rows)?,
        gamma,
        report,
    })
}

/// Adjoint coefficients around a reference trajectory:
/// `a = x p̄_x(1)/β`, `b = −p̄_x(1)/β`, `N = (x/β) p̄_x`, `R = (2/β) p̄_t`.
pub fn stefan_adjoint_coefficients(reference: &ReferenceTrajectory) -> Result<CoefficientSet> {
    let mut c = crate::linear_system::stefan_coefficients(reference)?;
    let levels = c.time.levels();
    for k in 0..levels {
        let v = -reference.px_right[k] / reference.beta;
        c.b.row_mut(k).iter_mut().for_each(|x| *x = v);
    }
    Ok(c)
}

impl CoefficientSet {
    /// Drift as it appears in the backward operator, `−a`.
    pub fn adjoint_drift(&self, k: usize) -> Vec<f64> {
        self.a.row(k).iter().map(|v| -v).collect()
    }

    /// Zeroth-order term as it appears in the backward operator, `−b`.
    pub fn adjoint_zeroth(&self, k: usize) -> Vec<f64> {
        self.b.row(k).iter().map(|v| -v).collect()
    }

    /// `d = 1/q̄` at level `k`.
    pub fn diffusivity(&self, k: usize) -> f64 {
        1.0 / self.q_bar[k]
    }
}

/// Backward-operator coefficients obtained by formally transposing the
/// forward ones: `a` is kept, `b ← q̄' + a_x − b`.
pub fn transposed_coefficients(forward: &CoefficientSet) -> CoefficientSet {
    let mut c = forward.clone();
    let time = forward.time;
    let levels = time.levels();
    let dt = time.dt;
    let q = &forward.q_bar;
    for k in 0..levels {
        let qdot = if k == 0 {
            (-3.0 * q[0] + 4.0 * q[1] - q[2]) / (2.0 * dt)
        } else if k == levels - 1 {
            (3.0 * q[k] - 4.0 * q[k - 1] + q[k - 2]) / (2.0 * dt)
        } else {
            (q[k + 1] - q[k - 1]) / (2.0 * dt)
        };
        let ax = gradient(forward.a.row(k), forward.grid.dx);
        let bf = forward.b.row(k).to_vec();
        let row = c.b.row_mut(k);
        for j in 0..row.len() {
            row[j] = qdot + ax[j] - bf[j];
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    Matched,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct DualityReport {
    pub mode: PairingMode,
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
}

fn relative_gap(lhs: f64, rhs: f64) -> f64 {
    let scale = lhs.abs().max(rhs.abs());
    if scale == 0.0 { 0.0 } else { (lhs - rhs).abs() / scale }
}

/// Solve the forward problem with `(src, z0, h0)` and the adjoint with the
/// pairing data `(f, g)`, then compare both sides of
/// `∬ z f + ∫ h g = ∬ F φ + ∫ G γ + (q̄ z₀, φ(0)) + h₀ γ(0)`.
pub fn transposition_check(
    forward: &CoefficientSet,
    src: &SourcePair,
    z0: &[f64],
    h0: f64,
    pairing: &SourcePair,
    mode: PairingMode,
) -> Result<DualityReport> {
    let hist = solve_linearized(forward, src, z0, h0)?;
    let grid = forward.grid;
    let time = forward.time;
    let (n, dx, dt, m) = (grid.n, grid.dx, time.dt, time.m);
    let interior = |a: &[f64], b: &[f64]| dx * dot(&a[1..n - 1], &b[1..n - 1]);
    let (lhs, rhs) = match mode {
        PairingMode::Matched => {
            let adj = solve_matched_adjoint(forward, &pairing.f, &pairing.g)?;
            let mut lhs = 0.0;
            let mut rhs = 0.0;
            for k in 1..=m {
                lhs += dt * (interior(hist.z.row(k), pairing.f.row(k)) + hist.h[k] * pairing.g[k]);
                rhs += dt * (interior(src.f.row(k), adj.phi.row(k)) + src.g[k] * adj.gamma[k]);
            }
            rhs += forward.q_bar[1] * interior(hist.z.row(0), adj.phi.row(1)) + h0 * adj.gamma[1];
            (lhs, rhs)
        }
        PairingMode::Continuous => {
            let coeffs = transposed_coefficients(forward);
            let g_neg: Vec<f64> = pairing.g.iter().map(|v| -v).collect();
            let adj = solve_adjoint(&coeffs, &AdjointData::zero_terminal(pairing.f.clone(), g_neg), 1.0)?;
            let lhs_t: Vec<f64> = (0..=m)
                .map(|k| inner(hist.z.row(k), pairing.f.row(k), dx) + hist.h[k] * pairing.g[k])
                .collect();
            let rhs_t: Vec<f64> = (0..=m)
                .map(|k| inner(src.f.row(k), adj.phi.row(k), dx) + src.g[k] * adj.gamma[k])
                .collect();
            let lhs = crate::numerics::time_trapezoid(&lhs_t, dt);
            let rhs = crate::numerics::time_trapezoid(&rhs_t, dt)
                + forward.q_bar[0] * inner(hist.z.row(0), adj.phi.row(0), dx)
                + h0 * adj.gamma[0];
            (lhs, rhs)
        }
    };
    Ok(DualityReport {
        mode,
        lhs,
        rhs,
        gap: relative_gap(lhs, rhs),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear_system::LinearDataSpec;
    use crate::numerics::{SpaceGrid, TimeGrid};

    fn heat(n: usize, m: usize) -> CoefficientSet {
        CoefficientSet::zeros(&SpaceGrid::symmetric(n).unwrap(), &TimeGrid::new(1.0, m).unwrap())
    }

    #[test]
    fn zero_data_gives_zero_adjoint() {
        let c = heat(21, 30);
        let data = AdjointData::zero_terminal(SpaceTimeField::zeros(21, 31), vec![0.0; 31]);
        let st = solve_adjoint(&c, &data, 1.0).unwrap();
        assert_eq!(st.phi.max_abs(), 0.0);
        assert!(st.gamma.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn matched_pairing_is_exact_with_coupling() {
        let mut c = heat(31, 60);
        c.r = SpaceTimeField::from_fn(31, 61, |k, j| 0.3 * (1.0 + 0.01 * k as f64) * c.grid.x(j));
        c.b = SpaceTimeField::from_fn(31, 61, |_, j| 0.5 * c.grid.x(j).powi(2));
        let specs = LinearDataSpec::draw_many(5, 2, None);
        let (src, z0, h0) = specs[0].realize(&c.grid, &c.time);
        let (pair, _, _) = specs[1].realize(&c.grid, &c.time);
        let r = transposition_check(&c, &src, &z0, h0, &pair, PairingMode::Matched).unwrap();
        assert!(r.gap < 1e-12, "gap {}", r.gap);
    }

    #[test]
    fn mismatched_data_is_rejected() {
        let c = heat(21, 30);
        let data = AdjointData::zero_terminal(SpaceTimeField::zeros(21, 31), vec![0.0; 30]);
        assert!(solve_adjoint(&c, &data, 1.0).is_err());
        let short = SourcePair::zeros(&SpaceGrid::symmetric(11).unwrap(), &c.time);
        assert!(solve_matched_adjoint(&c, &short.f, &short.g).is_err());
    }
}
