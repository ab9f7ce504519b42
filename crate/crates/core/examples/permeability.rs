//! Absolute permeability along each axis and a drainage relative
//! permeability curve for a synthetic sample.
//!
//!     cargo run --release --example permeability

use anyhow::Result;
use poregen::petrosim::{absolute_permeability, relative_permeability, FluidSpec};
use poregen::voxcore::{gen_synthetic, porosity, PorosityGrid};

fn main() -> Result<()> {
    let pg = PorosityGrid::uniform([2, 2, 2], 16, 0.35)?;
    let v = gen_synthetic(6, &pg, 9)?;
    let fluids = FluidSpec::default();
    println!("porosity {:.4}, voxel {} um", porosity(&v), v.voxel_size_um());
    for axis in 0..3 {
        let k = absolute_permeability(&v, axis, &fluids)?;
        println!("axis {axis}: k = {:.1} mD (percolating: {})", k.k_md, k.percolating);
    }
    let kr = relative_permeability(&v, 0, &fluids, 11)?;
    println!("\n  Sw      krw     krnw   status");
    for p in &kr.points {
        println!("{:6.3} {:8.4} {:8.4}   {}", p.sw, p.krw, p.krnw, p.status.as_str());
    }
    Ok(())
}
