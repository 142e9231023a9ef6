//! Steer a stretched initial state onto the similarity solution and check
//! the targets by re-simulating the free-boundary problem.

use stefan_control::hum::HumOptions;
use stefan_control::nonlinear_control::{
    check_positivity, control_to_trajectory, scaled_initial_state, verify_targets, ControlParams, ControlProblem,
};
use stefan_control::numerics::TimeGrid;
use stefan_control::stefan_forward::{Extension, ReferenceKind, ReferenceSpec};
use stefan_control::weights::{build_eta, CarlemanParams};

fn main() -> stefan_control::Result<()> {
    let spec = ReferenceSpec {
        kind: ReferenceKind::Neumann,
        beta: 1.0,
        boundary_value: 1.0,
        t0: 0.25,
        ell_star: 0.1,
        extension: Extension::Reflection,
    };
    let eta = build_eta((-0.6, -0.4), 0.01, 1.0)?;
    let weights = CarlemanParams::minimal(&eta, 2.0, (-0.7, -0.3), (-0.6, -0.4), 1.0, 1.0);
    let time = TimeGrid::new(1.0, 400)?;
    let problem = ControlProblem::new(&spec, 41, &time, &eta, &weights, HumOptions::default())?;
    for delta in [5e-3, 1e-2, 2e-2] {
        let initial = scaled_initial_state(&problem, delta, 161)?;
        let result = control_to_trajectory(&problem, &initial, &ControlParams::default())?;
        let targets = verify_targets(&problem, &result)?;
        let pos = check_positivity(&result);
        println!(
            "δ = {delta:.0e}: {} iterations, front gap {:.1e}, temperature gap {:.1e}, min v {:.4}",
            result.iterations, targets.front_gap, targets.temperature_gap, pos.min_v
        );
        for rec in &result.history {
            println!("    iteration {}: update {:.3e}, remainder {:.3e}", rec.iteration, rec.update, rec.remainder_norm);
        }
    }
    Ok(())
}
