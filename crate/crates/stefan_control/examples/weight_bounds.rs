//! Weight families and the bound report for several `λ`.

use stefan_control::numerics::{SpaceGrid, TimeGrid};
use stefan_control::weights::{build_eta, check_weight_bounds, probe_eta, tabulate_weights, CarlemanParams};

fn main() -> stefan_control::Result<()> {
    let eta = build_eta((-0.6, -0.4), 1.0, 1.0)?;
    let probe = probe_eta(&eta, 10_000);
    println!("eta: sup {:.3}, probe holds: {}", eta.sup_norm(), probe.holds());
    let base = CarlemanParams::minimal(&eta, 2.0, (-0.7, -0.3), (-0.6, -0.4), 1.0, 1.0);
    let grid = SpaceGrid::symmetric(41)?;
    let time = TimeGrid::new(1.0, 200)?;
    for factor in [1.0, 1.5, 2.0] {
        let params = base.with_s_lambda(base.s, factor * base.lambda0);
        let table = tabulate_weights(&eta, &params, &grid, &time)?;
        let b = check_weight_bounds(&table);
        println!(
            "λ = {:.2}: sup ρ4/ρ3 = {:.2e}, sup ρ4/ρ2 = {:.2e}, sup ρ4'/ρ0 = {:.2e}, margin {:.3e}, holds {}",
            params.lambda, b.sup_rho4_over_rho3, b.sup_rho4_over_rho2, b.sup_rho4_dot_over_rho0, b.positivity_margin, b.holds()
        );
    }
    Ok(())
}
