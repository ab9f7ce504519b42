//! Synthetic porous media: box-smoothed white noise, thresholded per block at
//! the empirical quantile that reproduces the block's target porosity.

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{flat_index, PorosityGrid, VoxError, Volume3D, PORE};

/// Voxel edge of the CT images the defaults are modelled on.
pub const DEFAULT_VOXEL_SIZE_UM: f32 = 3.7564;

/// Moving-window sum of width `win` along `axis` (valid region only).
fn box_sum(src: &[f32], dims: [usize; 3], axis: usize, win: usize) -> (Vec<f32>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] + 1 - win;
    let mut out = vec![0f32; out_dims.iter().product()];
    let in_stride = [dims[1] * dims[2], dims[2], 1][axis];
    let out_stride = [out_dims[1] * out_dims[2], out_dims[2], 1][axis];
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut line = vec![0f64; dims[axis] + 1];
    for p in 0..dims[a] {
        for q in 0..dims[b] {
            let mut base_in = [0; 3];
            base_in[a] = p;
            base_in[b] = q;
            let start_in = flat_index(dims, base_in[0], base_in[1], base_in[2]);
            let start_out = flat_index(out_dims, base_in[0], base_in[1], base_in[2]);
            // prefix sums in f64 keep the window sums exact enough to be
            // independent of the line length
            for t in 0..dims[axis] {
                line[t + 1] = line[t] + src[start_in + t * in_stride] as f64;
            }
            for t in 0..out_dims[axis] {
                out[start_out + t * out_stride] = (line[t + win] - line[t]) as f32;
            }
        }
    }
    (out, out_dims)
}

/// Deterministic binary volume whose block porosities match `pg` to voxel
/// granularity. `field_corr_len` is the box-filter width in voxels.
pub fn gen_synthetic(field_corr_len: usize, pg: &PorosityGrid, seed: u64) -> Result<Volume3D, VoxError> {
    if field_corr_len == 0 {
        return Err(VoxError::Invalid("field_corr_len must be at least 1".into()));
    }
    let dims = pg.volume_dims();
    let win = field_corr_len;
    let padded = dims.map(|d| d + win - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f32> = (0..padded.iter().product::<usize>()).map(|_| rng.gen::<f32>()).collect();
    let (f, d) = box_sum(&noise, padded, 0, win);
    drop(noise);
    let (f, d) = box_sum(&f, d, 1, win);
    let (field, d) = box_sum(&f, d, 2, win);
    debug_assert_eq!(d, dims);

    let b = pg.block_size();
    let nb = b * b * b;
    let g = pg.grid_dims();
    let mut data = vec![0u8; dims.iter().product()];
    let mut block: Vec<(f32, usize)> = Vec::with_capacity(nb);
    for bi in 0..g[0] {
        for bj in 0..g[1] {
            for bk in 0..g[2] {
                let target = pg.get(bi, bj, bk) as f64;
                let count = ((target * nb as f64).round() as usize).min(nb);
                if count == 0 {
                    continue;
                }
                block.clear();
                for i in bi * b..(bi + 1) * b {
                    for j in bj * b..(bj + 1) * b {
                        let row = flat_index(dims, i, j, bk * b);
                        block.extend((row..row + b).map(|idx| (field[idx], idx)));
                    }
                }
                // largest field values become pore; ties go to the lower index
                let order = |x: &(f32, usize), y: &(f32, usize)| match y.0.partial_cmp(&x.0) {
                    Some(Ordering::Equal) | None => x.1.cmp(&y.1),
                    Some(o) => o,
                };
                if count < nb {
                    block.select_nth_unstable_by(count - 1, order);
                }
                for &(_, idx) in &block[..count] {
                    data[idx] = PORE;
                }
            }
        }
    }
    Volume3D::new(dims, DEFAULT_VOXEL_SIZE_UM, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxcore::{porosity, porosity_grid_of};

    #[test]
    fn box_sum_matches_direct_sum() {
        let dims = [3, 4, 5];
        let src: Vec<f32> = (0..60).map(|i| (i * 7 % 11) as f32).collect();
        let (out, od) = box_sum(&src, dims, 1, 3);
        assert_eq!(od, [3, 2, 5]);
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..5 {
                    let direct: f32 = (j..j + 3).map(|jj| src[flat_index(dims, i, jj, k)]).sum();
                    assert_eq!(out[flat_index(od, i, j, k)], direct);
                }
            }
        }
    }

    #[test]
    fn zero_target_is_all_solid() {
        let pg = PorosityGrid::uniform([2, 2, 2], 4, 0.0).unwrap();
        let v = gen_synthetic(3, &pg, 1).unwrap();
        assert_eq!(porosity(&v), 0.0);
    }

    #[test]
    fn deterministic_in_seed() {
        let pg = PorosityGrid::uniform([2, 1, 1], 8, 0.3).unwrap();
        assert_eq!(gen_synthetic(4, &pg, 9).unwrap(), gen_synthetic(4, &pg, 9).unwrap());
        assert_ne!(gen_synthetic(4, &pg, 9).unwrap(), gen_synthetic(4, &pg, 10).unwrap());
    }

    #[test]
    fn block_of_16_hits_nearest_achievable_fraction() {
        let pg = PorosityGrid::uniform([1, 1, 1], 16, 0.3).unwrap();
        let v = gen_synthetic(5, &pg, 3).unwrap();
        // nearest multiple of 1/4096 to 0.3 is 1229/4096
        assert_eq!(v.pore_count(), 1229);
        let realized = porosity_grid_of(&v, 16).unwrap().get(0, 0, 0) as f64;
        assert!((realized - 0.3).abs() <= 1.0 / 4096.0);
    }
}
