//! Weighted null control of the linearized system on random data.

use stefan_control::hum::{verify_e_membership, HumOptions};
use stefan_control::linear_system::LinearDataSpec;
use stefan_control::nonlinear_control::ControlProblem;
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
    for (i, data) in LinearDataSpec::draw_many(5, 4, Some(0.5)).iter().enumerate() {
        let (src, z0, h0) = data.realize(&problem.grid(), &time);
        let sol = problem.solver.solve(&src, &z0, h0)?;
        let e = verify_e_membership(&sol, &src, &problem.coeffs, &problem.table)?;
        let r = sol.report;
        println!(
            "draw {i}: |z(T)| = {:.1e}, |h(T)| = {:.1e}, relative {:.1e}, cost ratio {:.3}, weighted state finite {}",
            r.terminal_z, r.terminal_h, r.terminal_relative(), r.cost_ratio, e.finite()
        );
    }
    Ok(())
}
