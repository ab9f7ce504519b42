use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PetroError;
use crate::voxcore::{flat_index, Volume3D};

/// `S2(h)` for lags `0..=h_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoPointCurve {
    pub lags: Vec<usize>,
    pub values: Vec<f64>,
}

impl TwoPointCurve {
    /// Largest absolute pointwise difference over the common lags.
    pub fn max_abs_diff(&self, other: &TwoPointCurve) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Monte Carlo omnidirectional two-point probability of `phase`.
///
/// For each lag, draws `n_samples` pairs: a uniform direction on the sphere,
/// scaled to length `h` and rounded to the lattice, and a uniform start
/// voxel; pairs leaving the volume are redrawn. `S2(0)` is exact.
pub fn two_point_probability(
    v: &Volume3D,
    phase: u8,
    h_max: usize,
    n_samples: usize,
    seed: u64,
) -> Result<TwoPointCurve, PetroError> {
    let dims = v.dims();
    let min_dim = *dims.iter().min().unwrap_or(&0);
    if h_max >= min_dim {
        return Err(PetroError::Invalid(format!(
            "h_max {h_max} must be below the smallest dimension {min_dim}"
        )));
    }
    if n_samples == 0 {
        return Err(PetroError::Invalid("n_samples must be at least 1".into()));
    }
    let data = v.data();
    let frac = data.iter().filter(|&&p| p == phase).count() as f64 / data.len() as f64;
    let mut values = vec![frac];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for h in 1..=h_max {
        let mut hits = 0usize;
        let mut taken = 0usize;
        while taken < n_samples {
            // Marsaglia: uniform point on the unit sphere
            let (a, b) = loop {
                let a: f64 = rng.gen_range(-1.0..1.0);
                let b: f64 = rng.gen_range(-1.0..1.0);
                if a * a + b * b < 1.0 {
                    break (a, b);
                }
            };
            let s = a * a + b * b;
            let r = 2.0 * (1.0 - s).sqrt();
            let dir = [a * r, b * r, 1.0 - 2.0 * s];
            let off = dir.map(|c| (c * h as f64).round() as i64);
            let x = [0, 1, 2].map(|d| rng.gen_range(0..dims[d]) as i64);
            let y = [0, 1, 2].map(|d| x[d] + off[d]);
            if (0..3).any(|d| y[d] < 0 || y[d] >= dims[d] as i64) {
                continue;
            }
            taken += 1;
            let p = data[flat_index(dims, x[0] as usize, x[1] as usize, x[2] as usize)];
            let q = data[flat_index(dims, y[0] as usize, y[1] as usize, y[2] as usize)];
            if p == phase && q == phase {
                hits += 1;
            }
        }
        values.push(hits as f64 / n_samples as f64);
    }
    Ok(TwoPointCurve {
        lags: (0..=h_max).collect(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxcore::{porosity, PORE};

    #[test]
    fn all_pore_is_one() {
        let v = Volume3D::filled([8; 3], 1.0, PORE).unwrap();
        let c = two_point_probability(&v, PORE, 5, 200, 1).unwrap();
        assert!(c.values.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn lag_zero_is_porosity() {
        let data = (0..512).map(|i| u8::from(i % 3 == 0)).collect();
        let v = Volume3D::new([8; 3], 1.0, data).unwrap();
        let c = two_point_probability(&v, PORE, 3, 10, 1).unwrap();
        assert_eq!(c.values[0], porosity(&v));
    }

    #[test]
    fn iid_half_volume_is_quarter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = (0..32 * 32 * 32).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let v = Volume3D::new([32; 3], 1.0, data).unwrap();
        let n = 20_000;
        let c = two_point_probability(&v, PORE, 8, n, 2).unwrap();
        let phi = porosity(&v);
        let p = phi * phi;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        for &s in &c.values[1..] {
            assert!((s - p).abs() < 3.0 * sigma, "{s} vs {p}");
        }
    }

    #[test]
    fn rejects_large_lag() {
        let v = Volume3D::filled([4; 3], 1.0, PORE).unwrap();
        assert!(two_point_probability(&v, PORE, 4, 10, 0).is_err());
    }
}
