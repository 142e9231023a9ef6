//! Both sides of the weighted estimate over the `(s, λ)` sweep, on two meshes.

use stefan_control::carleman_verify::{carleman_sweep, decomposition_identity, realize_basic_dataset, BasicDatasetSpec};
use stefan_control::numerics::{SpaceGrid, TimeGrid};
use stefan_control::weights::{build_eta, tabulate_weights, CarlemanParams};

fn main() -> stefan_control::Result<()> {
    let eta = build_eta((-0.6, -0.4), 1.0, 1.0)?;
    let base = CarlemanParams::minimal(&eta, 2.0, (-0.7, -0.3), (-0.6, -0.4), 1.0, 1.0);
    let specs = BasicDatasetSpec::draw_many(3, 10);
    for (n, m) in [(41, 200), (81, 800)] {
        let grid = SpaceGrid::symmetric(n)?;
        let time = TimeGrid::new(1.0, m)?;
        let data = specs
            .iter()
            .map(|s| realize_basic_dataset(s, &grid, &time))
            .collect::<stefan_control::Result<Vec<_>>>()?;
        let rows = carleman_sweep(&eta, &base, &data)?;
        let worst = rows.iter().max_by(|a, b| a.ratio.total_cmp(&b.ratio)).expect("non-empty sweep");
        let table = tabulate_weights(&eta, &base, &grid, &time)?;
        let id = decomposition_identity(&data[0].state.phi, &data[0].f, &table, &data[0].d)?;
        println!(
            "n = {n}: max LHS/RHS = {:.4} at s = {}, λ = {} (ln LHS = {:.1}); identity gap {:.1e}",
            worst.ratio, worst.s, worst.lambda, worst.ln_lhs, id.gap
        );
    }
    Ok(())
}
