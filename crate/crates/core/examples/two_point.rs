//! Two-point probability of synthetic media at two correlation lengths.
//!
//!     cargo run --release --example two_point

use anyhow::Result;
use poregen::petrosim::two_point_probability;
use poregen::voxcore::{gen_synthetic, PorosityGrid, PORE};

fn main() -> Result<()> {
    let pg = PorosityGrid::uniform([3, 3, 3], 16, 0.3)?;
    let curves = [1, 8]
        .into_iter()
        .map(|cl| two_point_probability(&gen_synthetic(cl, &pg, 4)?, PORE, 12, 40_000, 5).map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;
    println!(" h   S2(corr 1)  S2(corr 8)   (phi^2 = {:.3})", 0.3f64 * 0.3);
    for h in 0..=12 {
        println!("{h:2}   {:9.4}   {:9.4}", curves[0].values[h], curves[1].values[h]);
    }
    Ok(())
}
