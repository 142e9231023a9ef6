use stefan_control::carleman_verify::{carleman_sides_basic, decomposition_identity, realize_basic_dataset, BasicDatasetSpec};
use stefan_control::hum::HumOptions;
use stefan_control::nonlinear_control::{
    control_to_trajectory, scaled_initial_state, ControlParams, ControlProblem,
};
use stefan_control::numerics::{SpaceGrid, TimeGrid};
use stefan_control::stefan_forward::{Extension, ReferenceKind, ReferenceSpec};
use stefan_control::weights::{build_eta, tabulate_weights, CarlemanParams};
use stefan_control::Error;

fn problem(nodes: usize, steps: usize) -> ControlProblem {
    let spec = ReferenceSpec {
        kind: ReferenceKind::Neumann,
        beta: 1.0,
        boundary_value: 1.0,
        t0: 0.25,
        ell_star: 0.1,
        extension: Extension::Reflection,
    };
    let eta = build_eta((-0.6, -0.4), 0.01, 1.0).unwrap();
    let weights = CarlemanParams::minimal(&eta, 2.0, (-0.7, -0.3), (-0.6, -0.4), 1.0, 1.0);
    let time = TimeGrid::new(1.0, steps).unwrap();
    ControlProblem::new(&spec, nodes, &time, &eta, &weights, HumOptions::default()).unwrap()
}

#[test]
fn reference_start_needs_no_control() {
    let p = problem(21, 200);
    let initial = scaled_initial_state(&p, 0.0, 21).unwrap();
    let r = control_to_trajectory(&p, &initial, &ControlParams::default()).unwrap();
    assert_eq!(r.iterations, 1);
    assert!(r.w.max_abs() < 1e-12);
    assert!(r.h.iter().all(|h| h.abs() < 1e-12));
}

#[test]
fn first_correction_shrinks_quadratically_in_delta() {
    let p = problem(21, 200);
    let second = |delta: f64| {
        let initial = scaled_initial_state(&p, delta, 81).unwrap();
        let r = control_to_trajectory(&p, &initial, &ControlParams::default()).unwrap();
        assert!(r.converged);
        r.history[1].update
    };
    let (big, small) = (second(2e-2), second(1e-2));
    assert!(big / small >= 2.0, "ratio {}", big / small);
}

#[test]
fn distant_start_is_refused() {
    let p = problem(21, 100);
    let initial = scaled_initial_state(&p, 0.3, 81).unwrap();
    let err = control_to_trajectory(&p, &initial, &ControlParams::default()).unwrap_err();
    assert!(matches!(err, Error::Hypothesis(_)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn carleman_sides_are_finite_and_split_exactly() {
    let eta = build_eta((-0.6, -0.4), 1.0, 1.0).unwrap();
    let params = CarlemanParams::minimal(&eta, 2.0, (-0.7, -0.3), (-0.6, -0.4), 1.0, 1.0);
    let grid = SpaceGrid::symmetric(41).unwrap();
    let time = TimeGrid::new(1.0, 200).unwrap();
    let table = tabulate_weights(&eta, &params, &grid, &time).unwrap();
    for spec in BasicDatasetSpec::draw_many(4, 3) {
        let ds = realize_basic_dataset(&spec, &grid, &time).unwrap();
        let sides = carleman_sides_basic(&ds.state.phi, &ds.f, &ds.g, &table).unwrap();
        assert!(sides.ratio().is_finite() && sides.ratio() > 0.0);
        let id = decomposition_identity(&ds.state.phi, &ds.f, &table, &ds.d).unwrap();
        assert!(id.gap < 1e-12, "gap {}", id.gap);
    }
}
