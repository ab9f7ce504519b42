//! Exact squared Euclidean distance transform, separable lower-envelope
//! algorithm of Felzenszwalb and Huttenlocher.

use crate::voxcore::{flat_index, Volume3D, PORE};

const FAR: i64 = i64::MAX / 4;

/// 1D squared distance transform of `f` in place, using `v`, `z` as scratch.
fn dt_1d(f: &mut [i64], v: &mut [usize], z: &mut [f64], out: &mut [i64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sep = |f: &[i64], p: usize, q: usize| -> f64 {
        // intersection of parabolas rooted at q and p (q > p)
        let (fp, fq) = (f[p] as f64, f[q] as f64);
        let (p, q) = (p as f64, q as f64);
        ((fq + q * q) - (fp + p * p)) / (2.0 * (q - p))
    };
    for q in 1..n {
        if f[q] >= FAR {
            continue;
        }
        if f[v[k]] >= FAR {
            v[k] = q;
            continue;
        }
        let mut s = sep(f, v[k], q);
        while s <= z[k] {
            k -= 1;
            s = sep(f, v[k], q);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    if f[v[0]] >= FAR {
        out[..n].fill(FAR);
        f.copy_from_slice(&out[..n]);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as i64 - v[k] as i64;
        *o = d * d + f[v[k]];
    }
    f.copy_from_slice(&out[..n]);
}

/// Squared distance, in voxel units, from every voxel centre to the nearest
/// solid voxel centre, treating the layer just outside each face as solid.
/// Solid voxels get 0.
pub fn squared_distance_field(v: &Volume3D) -> Vec<i64> {
    let d = v.dims();
    // padded grid: one solid layer on every side
    let p = d.map(|x| x + 2);
    let mut f = vec![0i64; p.iter().product()];
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                if v.get(i, j, k) == PORE {
                    f[flat_index(p, i + 1, j + 1, k + 1)] = FAR;
                }
            }
        }
    }
    let maxn = *p.iter().max().unwrap_or(&1);
    let mut line = vec![0i64; maxn];
    let mut out = vec![0i64; maxn];
    let mut vv = vec![0usize; maxn];
    let mut z = vec![0f64; maxn + 1];
    for axis in 0..3 {
        let stride = [p[1] * p[2], p[2], 1][axis];
        let n = p[axis];
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for x in 0..p[a] {
            for y in 0..p[b] {
                let mut c = [0; 3];
                c[a] = x;
                c[b] = y;
                let start = flat_index(p, c[0], c[1], c[2]);
                for t in 0..n {
                    line[t] = f[start + t * stride];
                }
                dt_1d(&mut line[..n], &mut vv, &mut z, &mut out);
                for t in 0..n {
                    f[start + t * stride] = line[t];
                }
            }
        }
    }
    let mut res = vec![0i64; d.iter().product()];
    for i in 0..d[0] {
        for j in 0..d[1] {
            for k in 0..d[2] {
                res[flat_index(d, i, j, k)] = f[flat_index(p, i + 1, j + 1, k + 1)];
            }
        }
    }
    res
}

/// Inscribed radius of every pore voxel as `(flat index, radius)`, in flat
/// order. Empty for an all-solid volume.
pub fn distance_transform(v: &Volume3D) -> Vec<(usize, f64)> {
    squared_distance_field(v)
        .into_iter()
        .enumerate()
        .filter(|&(idx, _)| v.data()[idx] == PORE)
        .map(|(idx, d2)| (idx, (d2 as f64).sqrt()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxcore::SOLID;

    fn brute(v: &Volume3D) -> Vec<i64> {
        let d = v.dims().map(|x| x as i64);
        let mut solids = Vec::new();
        for i in -1..=d[0] {
            for j in -1..=d[1] {
                for k in -1..=d[2] {
                    let outside = i < 0 || j < 0 || k < 0 || i >= d[0] || j >= d[1] || k >= d[2];
                    if outside || v.get(i as usize, j as usize, k as usize) == SOLID {
                        solids.push((i, j, k));
                    }
                }
            }
        }
        let mut out = Vec::new();
        for i in 0..d[0] {
            for j in 0..d[1] {
                for k in 0..d[2] {
                    let best = solids
                        .iter()
                        .map(|&(a, b, c)| (a - i).pow(2) + (b - j).pow(2) + (c - k).pow(2))
                        .min()
                        .unwrap();
                    out.push(best);
                }
            }
        }
        out
    }

    #[test]
    fn isolated_pore_has_radius_one() {
        let mut v = Volume3D::filled([3; 3], 1.0, SOLID).unwrap();
        v.set(1, 1, 1, PORE);
        assert_eq!(distance_transform(&v), vec![(13, 1.0)]);
    }

    #[test]
    fn centre_of_open_cube() {
        let v = Volume3D::filled([5; 3], 1.0, PORE).unwrap();
        let r = distance_transform(&v);
        assert_eq!(r[flat_index([5; 3], 2, 2, 2)].1, 3.0);
    }

    #[test]
    fn all_solid_is_empty() {
        let v = Volume3D::filled([4; 3], 1.0, SOLID).unwrap();
        assert!(distance_transform(&v).is_empty());
    }

    #[test]
    fn matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let dims = [rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..7)];
            let data = (0..dims.iter().product()).map(|_| u8::from(rng.gen_bool(0.7))).collect();
            let v = Volume3D::new(dims, 1.0, data).unwrap();
            let fast = squared_distance_field(&v);
            let slow = brute(&v);
            for (idx, (&a, &b)) in fast.iter().zip(&slow).enumerate() {
                if v.data()[idx] == PORE {
                    assert_eq!(a, b, "dims {dims:?} voxel {idx}");
                } else {
                    assert_eq!(a, 0);
                }
            }
        }
    }
}
