//! Exact Euclidean distance to the nearest solid voxel inside a cylindrical
//! pore, printed as a slice.
//!
//!     cargo run --release --example distance_transform

use anyhow::Result;
use poregen::petrosim::squared_distance_field;
use poregen::voxcore::{flat_index, Volume3D, PORE, SOLID};

fn main() -> Result<()> {
    let n = 15;
    let mut v = Volume3D::filled([4, n, n], 1.0, SOLID)?;
    let c = (n / 2) as i64;
    for i in 0..4 {
        for j in 0..n {
            for k in 0..n {
                let (dj, dk) = (j as i64 - c, k as i64 - c);
                if dj * dj + dk * dk <= 36 {
                    v.set(i, j, k, PORE);
                }
            }
        }
    }
    let d2 = squared_distance_field(&v);
    for j in 0..n {
        let row: String = (0..n)
            .map(|k| format!("{:4.1}", (d2[flat_index(v.dims(), 2, j, k)] as f64).sqrt()))
            .collect();
        println!("{row}");
    }
    Ok(())
}
