//! Linearized system around the similarity solution on random data, with
//! the discrete energy ratio under refinement.

use stefan_control::linear_system::{discrete_energy_report, solve_linearized, stefan_coefficients, LinearDataSpec};
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
    let data = LinearDataSpec::draw_many(42, 1, None)[0];
    for (n, m) in [(41, 200), (81, 800)] {
        let grid = SpaceGrid::symmetric(n)?;
        let time = TimeGrid::new(1.0, m)?;
        let coeffs = stefan_coefficients(&discrete_shadow(&spec, &grid, &time)?)?;
        let (src, z0, h0) = data.realize(&grid, &time);
        let hist = solve_linearized(&coeffs, &src, &z0, h0)?;
        let e = discrete_energy_report(&hist, &grid, &time, &src);
        println!(
            "n = {n:3}, m = {m:4}: |z|² = {:.4e}, |h|² = {:.4e}, data² = {:.4e}, ratio {:.4}, h(T) = {:.6}",
            e.z_norm_sq, e.h_norm_sq, e.data_norm_sq, e.ratio, hist.h[m]
        );
    }
    Ok(())
}
