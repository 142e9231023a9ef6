//! Nonlinear minus linearized response for data scaled by `ε`.

use stefan_control::hum::HumOptions;
use stefan_control::nonlinear_control::{
    control_to_trajectory, initial_perturbation, remainder_study, scaled_initial_state, ControlParams, ControlProblem,
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
    let time = TimeGrid::new(1.0, 200)?;
    let problem = ControlProblem::new(&spec, 21, &time, &eta, &weights, HumOptions::default())?;
    let initial = scaled_initial_state(&problem, 4e-2, 81)?;
    let init = initial_perturbation(&problem, &initial)?;
    let control = control_to_trajectory(&problem, &initial, &ControlParams::default())?;
    // Unit-size data so that ε spans the quadratic regime.
    let scale = 20.0;
    let z0: Vec<f64> = init.z0.iter().map(|v| scale * v).collect();
    let w = control.w.scaled(scale);
    let (points, slope) = remainder_study(&problem, &z0, scale * init.h0, &w, &[1e-1, 1e-2, 1e-3])?;
    for p in &points {
        println!("ε = {:.0e}: deviation {:.4e}", p.epsilon, p.deviation);
    }
    println!("log-log slope {slope:.3}");
    Ok(())
}
