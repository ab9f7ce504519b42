//! Walks the generation order of a 3x3x2 grid with a 2x2x2 window, printing
//! the context each coordinate is conditioned on, then assembles a volume
//! with freshly initialized models to show the full decode and stitch path.
//!
//!     cargo run --release --example sliding_assembly

use anyhow::Result;
use poregen::assembler::{assemble, traversal_order, window_context, AssemblyState};
use poregen::seqmodel::{TokenSet, Transformer, TransformerConfig};
use poregen::voxcore::PorosityGrid;
use poregen::vqvae::{Vqvae, VqvaeConfig};

fn main() -> Result<()> {
    let grid = [3, 3, 2];
    let window = [2, 2, 2];
    let n: usize = grid.iter().product();
    let pg = PorosityGrid::new(grid, 16, (0..n).map(|i| 0.1 + 0.3 * i as f32 / n as f32).collect())?;

    let mut state = AssemblyState::new();
    for c in traversal_order(grid)? {
        let (ctx, cond) = window_context(c, &state, window, &pg)?;
        let coords: Vec<_> = ctx.iter().map(|s| s.coord).collect();
        println!("{c:?} cond {:.3} context {coords:?}", cond.last().unwrap());
        state.insert(TokenSet {
            tokens: vec![0],
            coord: c,
            cond: pg.get(c[0], c[1], c[2]),
        });
    }

    let vq = Vqvae::new(VqvaeConfig::desk(), 1)?;
    let tf = Transformer::new(TransformerConfig::desk(), 2)?;
    let a = assemble(&vq, &tf, &pg, window, 1.0, 3)?;
    println!(
        "untrained assembly: {:?} voxels, seam score {:.3}, conditioning MAE {:.3}",
        a.volume.dims(),
        a.seam_score()?,
        a.conditioning_mae()
    );
    Ok(())
}
