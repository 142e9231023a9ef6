//! Physical front ↔ cylinder ↔ perturbation round trip.

use stefan_control::numerics::{SpaceGrid, TimeGrid};
use stefan_control::stefan_forward::{make_reference_trajectory, Extension, ReferenceKind, ReferenceSpec};
use stefan_control::transform::{
    cylinder_to_physical, from_perturbation, initial_distance, physical_to_cylinder, to_perturbation, FrontState,
};

fn main() -> stefan_control::Result<()> {
    let spec = ReferenceSpec {
        kind: ReferenceKind::Neumann,
        beta: 1.0,
        boundary_value: 1.0,
        t0: 0.25,
        ell_star: 0.1,
        extension: Extension::Reflection,
    };
    let unit = SpaceGrid::unit(41)?;
    let reference = make_reference_trajectory(&spec, &unit, &TimeGrid::new(1.0, 10)?)?;
    let sol = spec.neumann()?;

    // A front 3% ahead of the reference with a linear temperature.
    let ell = 1.03 * sol.front(0.0);
    let phys = SpaceGrid::new(0.0, ell, 81)?;
    let u: Vec<f64> = phys.nodes().iter().map(|x| 1.0 - x / ell).collect();
    let state = FrontState::new(u, ell, spec.beta, spec.ell_star)?;

    let cyl = physical_to_cylinder(&state, &unit)?;
    let pert = to_perturbation(&cyl, &reference, 0)?;
    println!("h = {:.6e}, max |z| = {:.6e}", pert.h, pert.z.iter().fold(0.0f64, |a, b| a.max(b.abs())));

    let back = from_perturbation(&pert, &reference, 0)?;
    let again = cylinder_to_physical(&back, 81, spec.beta)?;
    let gap = again.u.iter().zip(&state.u).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    println!("round trip: front gap {:.2e}, temperature gap {:.2e}", (again.ell - ell).abs(), gap);

    let ref0 = stefan_control::transform::CylinderState {
        grid: unit,
        p: reference.p.row(0).to_vec(),
        q: reference.q[0],
        q_star: reference.q_star,
    };
    println!("initial distance to the reference: {:.4e}", initial_distance(&cyl, &ref0)?);
    Ok(())
}
