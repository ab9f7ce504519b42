//! Solves pressure on hand-built pore graphs: two throats in series and in
//! parallel, checked against resistor algebra.
//!
//!     cargo run --release --example pore_network

use anyhow::Result;
use poregen::petrosim::{solve_flow, throat_conductance, PoreGraph};

fn main() -> Result<()> {
    let vs = 1e-6;
    // 0 -- 1 -- 2, inlet 0, outlet 2; radii 2 and 1 voxels
    let series = PoreGraph::from_parts(vec![4, 4, 1], &[(0, 1), (1, 2)], vec![0], vec![2], vs)?;
    let (g1, g2) = (throat_conductance(4, vs), throat_conductance(1, vs));
    let q = solve_flow(&series, 1e-3, 1.0)?.q;
    let want = 1.0 / (1.0 / g1 + 1.0 / g2) / 1e-3;
    println!("series:   q = {q:.6e}, resistor algebra {want:.6e}");

    // two inlet-outlet throats side by side
    let parallel = PoreGraph::from_parts(vec![4, 4, 1, 1], &[(0, 1), (2, 3)], vec![0, 2], vec![1, 3], vs)?;
    let q = solve_flow(&parallel, 1e-3, 1.0)?.q;
    let want = (g1 + g2) / 1e-3;
    println!("parallel: q = {q:.6e}, resistor algebra {want:.6e}");
    Ok(())
}
