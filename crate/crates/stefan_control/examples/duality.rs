//! Transposition identity: exact for the matched discrete adjoint,
//! second order in `dx` (with `dt ∝ dx²`) for the directly discretized one.

use stefan_control::adjoint::{transposition_check, PairingMode};
use stefan_control::linear_system::{stefan_coefficients, LinearDataSpec};
use stefan_control::nonlinear_control::loglog_slope;
use stefan_control::numerics::{SpaceGrid, TimeGrid};
use stefan_control::stefan_forward::{discrete_shadow, Extension, ReferenceKind, ReferenceSpec};

fn main() -> stefan_control::Result<()> {
    let spec = ReferenceSpec {
        kind: ReferenceKind::Neumann,
        beta: 1.0,
        boundary_value: 1.0,
        t0: 0.25,
        ell_star: 0.1,
        extension: Extension::Reflection,
    };
    let draws = LinearDataSpec::draw_many(1, 2, None);
    let mut points = Vec::new();
    for (n, m) in [(21, 100), (41, 400), (81, 1600)] {
        let grid = SpaceGrid::symmetric(n)?;
        let time = TimeGrid::new(1.0, m)?;
        let coeffs = stefan_coefficients(&discrete_shadow(&spec, &grid, &time)?)?;
        let (src, z0, h0) = draws[0].realize(&grid, &time);
        let (pairing, _, _) = draws[1].realize(&grid, &time);
        let matched = transposition_check(&coeffs, &src, &z0, h0, &pairing, PairingMode::Matched)?;
        let cont = transposition_check(&coeffs, &src, &z0, h0, &pairing, PairingMode::Continuous)?;
        println!("n = {n:3}: matched gap {:.2e}, continuous gap {:.3e}", matched.gap, cont.gap);
        points.push((grid.dx, cont.gap));
    }
    println!("continuous-mode slope in dx: {:.2}", loglog_slope(&points));
    Ok(())
}
