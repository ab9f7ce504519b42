use super::VqvaeError;
use crate::gradcore::Real;

/// K×D table of embedding vectors, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    k: usize,
    d: usize,
    entries: Vec<f32>,
}

impl Codebook {
    pub fn new(k: usize, d: usize, entries: Vec<f32>) -> Result<Self, VqvaeError> {
        if k == 0 {
            return Err(VqvaeError::EmptyCodebook);
        }
        if d == 0 || entries.len() != k * d {
            return Err(VqvaeError::Shape(format!(
                "codebook {k}x{d} with {} values",
                entries.len()
            )));
        }
        if !entries.iter().all(|v| v.is_finite()) {
            return Err(VqvaeError::NonFinite("codebook"));
        }
        Ok(Self { k, d, entries })
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn entries(&self) -> &[f32] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &[f32] {
        &self.entries[i * self.d..(i + 1) * self.d]
    }
}

/// Encoder output: `t = li·lj·lk` vectors of length D, stored vector-major in
/// lexicographic grid order (last axis fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    spatial_dims: [usize; 3],
    channels: usize,
    values: Vec<f32>,
}

impl LatentGrid {
    pub fn new(spatial_dims: [usize; 3], channels: usize, values: Vec<f32>) -> Result<Self, VqvaeError> {
        let t: usize = spatial_dims.iter().product();
        if t == 0 || channels == 0 || values.len() != t * channels {
            return Err(VqvaeError::Shape(format!(
                "latent grid {spatial_dims:?}x{channels} with {} values",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(VqvaeError::NonFinite("latent grid"));
        }
        Ok(Self {
            spatial_dims,
            channels,
            values,
        })
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        self.spatial_dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Number of latent vectors t.
    pub fn len(&self) -> usize {
        self.spatial_dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }
}

/// Index of the nearest row of `entries` (row length `d`) for each row of
/// `vectors`, by squared Euclidean distance. Ties go to the lowest index.
pub fn nearest<T: Real>(vectors: &[T], entries: &[T], d: usize) -> Vec<usize> {
    vectors
        .chunks_exact(d)
        .map(|v| {
            let mut best = 0;
            let mut best_d = None;
            for (i, e) in entries.chunks_exact(d).enumerate() {
                let mut acc = T::ZERO;
                for (&a, &b) in v.iter().zip(e) {
                    let diff = a - b;
                    acc += diff * diff;
                }
                if best_d.map_or(true, |bd| acc < bd) {
                    best = i;
                    best_d = Some(acc);
                }
            }
            best
        })
        .collect()
}

/// Replaces every latent vector by its nearest codebook entry. Returns the
/// quantized grid and the chosen indices in grid order.
pub fn quantize(z: &LatentGrid, cb: &Codebook) -> Result<(LatentGrid, Vec<u32>), VqvaeError> {
    if z.channels != cb.d {
        return Err(VqvaeError::Shape(format!(
            "latent dim {} vs codebook dim {}",
            z.channels, cb.d
        )));
    }
    let idx = nearest(&z.values, &cb.entries, cb.d);
    let mut values = Vec::with_capacity(z.values.len());
    for &i in &idx {
        values.extend_from_slice(cb.entry(i));
    }
    let zq = LatentGrid {
        spatial_dims: z.spatial_dims,
        channels: z.channels,
        values,
    };
    Ok((zq, idx.into_iter().map(|i| i as u32).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_entry() -> Codebook {
        Codebook::new(2, 2, vec![0.0, 0.0, 3.0, 4.0]).unwrap()
    }

    fn one(v: [f32; 2]) -> LatentGrid {
        LatentGrid::new([1, 1, 1], 2, v.to_vec()).unwrap()
    }

    #[test]
    fn nearer_entry_wins() {
        // squared distances 2 and 13
        let (_, idx) = quantize(&one([1.0, 1.0]), &two_entry()).unwrap();
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn exact_entry_has_zero_error() {
        let z = one([3.0, 4.0]);
        let (zq, idx) = quantize(&z, &two_entry()).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(zq.values(), z.values());
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        // (1.5, 2) is 6.25 from both entries
        let (_, idx) = quantize(&one([1.5, 2.0]), &two_entry()).unwrap();
        assert_eq!(idx, vec![0]);
        let dup = Codebook::new(3, 2, vec![5.0, 5.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let (_, idx) = quantize(&one([1.0, 1.0]), &dup).unwrap();
        assert_eq!(idx, vec![1]);
    }

    #[test]
    fn idempotent_on_entries() {
        let cb = Codebook::new(3, 2, vec![0.5, -1.0, 2.0, 2.0, -3.0, 0.0]).unwrap();
        let z = LatentGrid::new([1, 1, 3], 2, vec![2.1, 1.9, -2.0, 0.4, 0.0, -0.7]).unwrap();
        let (zq, idx) = quantize(&z, &cb).unwrap();
        let (zq2, idx2) = quantize(&zq, &cb).unwrap();
        assert_eq!(idx, idx2);
        assert_eq!(zq, zq2);
    }

    #[test]
    fn empty_codebook_rejected() {
        assert!(matches!(Codebook::new(0, 2, vec![]), Err(VqvaeError::EmptyCodebook)));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let z = LatentGrid::new([1, 1, 1], 3, vec![0.0; 3]).unwrap();
        assert!(quantize(&z, &two_entry()).is_err());
    }
}
