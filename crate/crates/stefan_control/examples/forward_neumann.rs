//! Cylinder solver against the similarity solution, with observed orders.
//!
//! `cargo run --release --example forward_neumann`

use stefan_control::numerics::{SpaceGrid, TimeGrid};
use stefan_control::stefan_forward::{solve_cylinder_stefan, CylinderOptions, NeumannSolution, QRule};

fn max_error(sol: &NeumannSolution, n: usize, m: usize) -> stefan_control::Result<f64> {
    let grid = SpaceGrid::unit(n)?;
    let time = TimeGrid::new(1.0, m)?;
    let p0: Vec<f64> = grid.nodes().iter().map(|&y| sol.p(y)).collect();
    let opts = CylinderOptions {
        q_star: 0.01,
        q_rule: QRule::Trapezoid,
        ..CylinderOptions::default()
    };
    let hist = solve_cylinder_stefan(&p0, sol.q(0.0), &vec![1.0; m + 1], &grid, &time, 1.0, &opts)?;
    let mut err = 0.0f64;
    for k in 0..=m {
        err = err.max((hist.q[k].sqrt() - sol.front(time.t(k))).abs());
        for (j, &y) in grid.nodes().iter().enumerate() {
            err = err.max((hist.p.get(k, j) - sol.p(y)).abs());
        }
    }
    Ok(err)
}

fn main() -> stefan_control::Result<()> {
    let sol = NeumannSolution::new(1.0, 1.0, 0.25)?;
    println!("similarity constant k = {:.12}, front(0) = {:.6}", sol.k, sol.front(0.0));
    let mut last: Option<f64> = None;
    for n in [26, 51, 101] {
        let e = max_error(&sol, n, 2000)?;
        match last {
            Some(prev) => println!("n = {n:4}: error {e:.3e}, order {:.2}", (prev / e).log2()),
            None => println!("n = {n:4}: error {e:.3e}"),
        }
        last = Some(e);
    }
    println!("n = 201, m = 2000: error {:.3e}", max_error(&sol, 201, 2000)?);
    Ok(())
}
