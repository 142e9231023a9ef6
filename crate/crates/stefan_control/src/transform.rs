//! Moving front ↔ fixed cylinder ↔ perturbation coordinates.

use crate::error::{Error, Result};
use crate::numerics::{gradient, interpolate_cubic, trapezoid_unchecked, SpaceGrid};
use crate::stefan_forward::ReferenceTrajectory;

/// Temperature on `[0, ℓ]` together with the front position.
#[derive(Debug, Clone)]
pub struct FrontState {
    pub grid: SpaceGrid,
    pub u: Vec<f64>,
    pub ell: f64,
    pub beta: f64,
    pub ell_star: f64,
}

/// Cylinder profile `p(y) = u(yℓ)` on `[0, 1]` and `q = ℓ²`.
#[derive(Debug, Clone)]
pub struct CylinderState {
    pub grid: SpaceGrid,
    pub p: Vec<f64>,
    pub q: f64,
    pub q_star: f64,
}

/// Deviation from a reference at one time level.
#[derive(Debug, Clone)]
pub struct PerturbationState {
    pub z: Vec<f64>,
    pub h: f64,
}

impl FrontState {
    pub fn new(u: Vec<f64>, ell: f64, beta: f64, ell_star: f64) -> Result<Self> {
        if !(ell > ell_star && ell_star >= 0.0) {
            return Err(Error::Admissibility(format!("front ℓ = {ell} must exceed ℓ* = {ell_star}")));
        }
        let grid = SpaceGrid::new(0.0, ell, u.len())?;
        if u.len() < 4 {
            return Err(Error::InsufficientStencil(u.len()));
        }
        Ok(Self {
            grid,
            u,
            ell,
            beta,
            ell_star,
        })
    }
}

fn check_unit(grid: &SpaceGrid) -> Result<()> {
    if grid.a.abs() > 1e-14 || (grid.b - 1.0).abs() > 1e-14 {
        return Err(Error::Grid(format!("expected [0, 1], got [{}, {}]", grid.a, grid.b)));
    }
    if grid.n < 4 {
        return Err(Error::InsufficientStencil(grid.n));
    }
    Ok(())
}

/// Resample `u(·ℓ)` on a unit target grid.
pub fn physical_to_cylinder(state: &FrontState, target: &SpaceGrid) -> Result<CylinderState> {
    check_unit(target)?;
    if state.ell <= state.ell_star {
        return Err(Error::Admissibility(format!(
            "front ℓ = {} at or below ℓ* = {}",
            state.ell, state.ell_star
        )));
    }
    let p = target
        .nodes()
        .iter()
        .map(|&y| interpolate_cubic(&state.grid, &state.u, y * state.ell))
        .collect();
    Ok(CylinderState {
        grid: *target,
        p,
        q: state.ell * state.ell,
        q_star: state.ell_star * state.ell_star,
    })
}

/// Map back to `[0, √q]` with `nodes` points.
pub fn cylinder_to_physical(state: &CylinderState, nodes: usize, beta: f64) -> Result<FrontState> {
    check_unit(&state.grid)?;
    if state.q <= state.q_star {
        return Err(Error::Admissibility(format!(
            "q = {} at or below q* = {}",
            state.q, state.q_star
        )));
    }
    let ell = state.q.sqrt();
    let grid = SpaceGrid::new(0.0, ell, nodes)?;
    let u = grid
        .nodes()
        .iter()
        .map(|&x| interpolate_cubic(&state.grid, &state.p, x / ell))
        .collect();
    FrontState::new(u, ell, beta, state.q_star.sqrt())
}

/// `z = p − p̄(·, t_k)`, `h = β(q − q̄)/2`. Grids must coincide.
pub fn to_perturbation(
    state: &CylinderState,
    reference: &ReferenceTrajectory,
    k: usize,
) -> Result<PerturbationState> {
    if state.grid != reference.grid {
        return Err(Error::Grid("state and reference grids differ".into()));
    }
    if k >= reference.time.levels() {
        return Err(Error::Dimension {
            what: "reference level",
            expected: reference.time.levels(),
            got: k,
        });
    }
    let z = state
        .p
        .iter()
        .zip(reference.p.row(k))
        .map(|(p, pb)| p - pb)
        .collect();
    Ok(PerturbationState {
        z,
        h: 0.5 * reference.beta * (state.q - reference.q[k]),
    })
}

pub fn from_perturbation(
    pert: &PerturbationState,
    reference: &ReferenceTrajectory,
    k: usize,
) -> Result<CylinderState> {
    if pert.z.len() != reference.grid.n {
        return Err(Error::Dimension {
            what: "perturbation profile",
            expected: reference.grid.n,
            got: pert.z.len(),
        });
    }
    let q = reference.q[k] + 2.0 * pert.h / reference.beta;
    if q <= reference.q_star {
        return Err(Error::Admissibility(format!(
            "reconstructed q = {q} at or below q* = {}",
            reference.q_star
        )));
    }
    let p = pert
        .z
        .iter()
        .zip(reference.p.row(k))
        .map(|(z, pb)| z + pb)
        .collect();
    Ok(CylinderState {
        grid: reference.grid,
        p,
        q,
        q_star: reference.q_star,
    })
}

/// `|ℓ₀ − ℓ̄₀| + ‖ℓ₀u₀(·ℓ₀) − ℓ̄₀ū₀(·ℓ̄₀)‖_{H¹(0,1)}`, with the derivative
/// part taken as the difference of cylinder slopes.
pub fn initial_distance(state: &CylinderState, reference: &CylinderState) -> Result<f64> {
    check_unit(&state.grid)?;
    if state.grid != reference.grid {
        return Err(Error::Grid("initial-distance grids differ".into()));
    }
    let (l0, lr) = (state.q.sqrt(), reference.q.sqrt());
    let dx = state.grid.dx;
    let gs = gradient(&state.p, dx);
    let gr = gradient(&reference.p, dx);
    let sq: Vec<f64> = (0..state.grid.n)
        .map(|j| {
            let v = l0 * state.p[j] - lr * reference.p[j];
            let d = gs[j] - gr[j];
            v * v + d * d
        })
        .collect();
    Ok((l0 - lr).abs() + trapezoid_unchecked(&sq, dx).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_reproduces_cubic_profile() {
        let ell = 1.3;
        let phys = SpaceGrid::new(0.0, ell, 41).unwrap();
        let u: Vec<f64> = phys.nodes().iter().map(|x| (ell - x) * (1.0 + x * x)).collect();
        let st = FrontState::new(u.clone(), ell, 1.0, 0.1).unwrap();
        let cyl = physical_to_cylinder(&st, &SpaceGrid::unit(41).unwrap()).unwrap();
        let back = cylinder_to_physical(&cyl, 41, 1.0).unwrap();
        for (a, b) in back.u.iter().zip(&u) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((back.ell - ell).abs() < 1e-15);
    }
}
