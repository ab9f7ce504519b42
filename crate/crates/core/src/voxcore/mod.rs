//! Binary voxel volumes, porosity grids, their file formats and the
//! synthetic generator.

mod io;
mod synth;

pub use io::{
    grid_from_bytes, grid_to_bytes, load_porosity_grid, load_volume, save_porosity_grid, save_volume, volume_from_bytes,
    volume_to_bytes,
};
pub use synth::{gen_synthetic, DEFAULT_VOXEL_SIZE_UM};

pub const SOLID: u8 = 0;
pub const PORE: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum VoxError {
    #[error("patch larger than volume: patch {patch}, dims {dims:?}")]
    PatchTooLarge { patch: usize, dims: [usize; 3] },
    #[error("dims {dims:?} not divisible by block size {block}")]
    NotDivisible { dims: [usize; 3], block: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("truncated: header needs {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid phase byte {value} at voxel {index}")]
    InvalidPhase { index: usize, value: u8 },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Flat index of `(i, j, k)` in a grid of `dims`, `k` fastest.
#[inline]
pub fn flat_index(dims: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    (i * dims[1] + j) * dims[2] + k
}

/// Binary voxel grid, 1 = pore, 0 = solid.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    voxel_size_um: f32,
    data: Vec<u8>,
}

impl Volume3D {
    pub fn new(dims: [usize; 3], voxel_size_um: f32, data: Vec<u8>) -> Result<Self, VoxError> {
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(VoxError::Invalid(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if !(voxel_size_um > 0.0 && voxel_size_um.is_finite()) {
            return Err(VoxError::Invalid(format!("voxel size {voxel_size_um} must be positive")));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > PORE) {
            return Err(VoxError::InvalidPhase { index, value });
        }
        Ok(Self {
            dims,
            voxel_size_um,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], voxel_size_um: f32, phase: u8) -> Result<Self, VoxError> {
        Self::new(dims, voxel_size_um, vec![phase; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size_um(&self) -> f32 {
        self.voxel_size_um
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[flat_index(self.dims, i, j, k)]
    }

    /// Sets one voxel; any nonzero phase is stored as pore.
    pub fn set(&mut self, i: usize, j: usize, k: usize, phase: u8) {
        let idx = flat_index(self.dims, i, j, k);
        self.data[idx] = u8::from(phase != SOLID);
    }

    pub fn pore_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == PORE).count()
    }

    /// Copy of the cube of edge `edge` starting at `origin`.
    pub fn sub_volume(&self, origin: [usize; 3], edge: usize) -> Result<Volume3D, VoxError> {
        self.sub_box(origin, [edge; 3])
    }

    pub fn sub_box(&self, origin: [usize; 3], extent: [usize; 3]) -> Result<Volume3D, VoxError> {
        for d in 0..3 {
            if origin[d] + extent[d] > self.dims[d] {
                return Err(VoxError::Invalid(format!(
                    "box at {origin:?} of extent {extent:?} exceeds dims {:?}",
                    self.dims
                )));
            }
        }
        let mut data = Vec::with_capacity(extent.iter().product());
        for i in 0..extent[0] {
            for j in 0..extent[1] {
                let start = flat_index(self.dims, origin[0] + i, origin[1] + j, origin[2]);
                data.extend_from_slice(&self.data[start..start + extent[2]]);
            }
        }
        Ok(Volume3D {
            dims: extent,
            voxel_size_um: self.voxel_size_um,
            data,
        })
    }

    /// Writes `patch` into `self` with its low corner at `origin`.
    pub fn place(&mut self, patch: &Volume3D, origin: [usize; 3]) -> Result<(), VoxError> {
        let e = patch.dims;
        for d in 0..3 {
            if origin[d] + e[d] > self.dims[d] {
                return Err(VoxError::Invalid(format!(
                    "patch {e:?} at {origin:?} exceeds dims {:?}",
                    self.dims
                )));
            }
        }
        for i in 0..e[0] {
            for j in 0..e[1] {
                let dst = flat_index(self.dims, origin[0] + i, origin[1] + j, origin[2]);
                let src = flat_index(e, i, j, 0);
                self.data[dst..dst + e[2]].copy_from_slice(&patch.data[src..src + e[2]]);
            }
        }
        Ok(())
    }
}

/// Fraction of pore voxels.
pub fn porosity(v: &Volume3D) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.pore_count() as f64 / v.len() as f64
}

/// Block-resolution porosity field.
#[derive(Clone, Debug, PartialEq)]
pub struct PorosityGrid {
    grid_dims: [usize; 3],
    block_size: usize,
    values: Vec<f32>,
}

impl PorosityGrid {
    pub fn new(grid_dims: [usize; 3], block_size: usize, values: Vec<f32>) -> Result<Self, VoxError> {
        if values.len() != grid_dims.iter().product::<usize>() {
            return Err(VoxError::Invalid(format!(
                "{} values for grid {grid_dims:?}",
                values.len()
            )));
        }
        if block_size == 0 {
            return Err(VoxError::Invalid("block size must be positive".into()));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(VoxError::Invalid(format!("porosity {bad} outside [0, 1]")));
        }
        Ok(Self {
            grid_dims,
            block_size,
            values,
        })
    }

    pub fn uniform(grid_dims: [usize; 3], block_size: usize, value: f32) -> Result<Self, VoxError> {
        Self::new(grid_dims, block_size, vec![value; grid_dims.iter().product()])
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        self.grid_dims
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[flat_index(self.grid_dims, i, j, k)]
    }

    /// Voxel dims of a volume covering this grid.
    pub fn volume_dims(&self) -> [usize; 3] {
        self.grid_dims.map(|g| g * self.block_size)
    }
}

/// All cubic patches of edge `patch_edge` at origins spaced by `stride`,
/// origins in lexicographic `(i, j, k)` order.
pub fn crop_patches(v: &Volume3D, patch_edge: usize, stride: usize) -> Result<Vec<(Volume3D, [usize; 3])>, VoxError> {
    if stride == 0 || patch_edge == 0 {
        return Err(VoxError::Invalid("patch edge and stride must be positive".into()));
    }
    let dims = v.dims();
    if dims.iter().any(|&d| patch_edge > d) {
        return Err(VoxError::PatchTooLarge {
            patch: patch_edge,
            dims,
        });
    }
    let counts = dims.map(|d| (d - patch_edge) / stride + 1);
    let mut out = Vec::with_capacity(counts.iter().product());
    for i in 0..counts[0] {
        for j in 0..counts[1] {
            for k in 0..counts[2] {
                let origin = [i * stride, j * stride, k * stride];
                out.push((v.sub_volume(origin, patch_edge)?, origin));
            }
        }
    }
    Ok(out)
}

/// Porosity of each non-overlapping block of edge `block_size`.
pub fn porosity_grid_of(v: &Volume3D, block_size: usize) -> Result<PorosityGrid, VoxError> {
    let dims = v.dims();
    if block_size == 0 || dims.iter().any(|&d| d % block_size != 0) {
        return Err(VoxError::NotDivisible {
            dims,
            block: block_size,
        });
    }
    let g = dims.map(|d| d / block_size);
    let mut counts = vec![0usize; g.iter().product()];
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            let row = flat_index(dims, i, j, 0);
            for (k, &p) in v.data()[row..row + dims[2]].iter().enumerate() {
                if p == PORE {
                    counts[flat_index(g, i / block_size, j / block_size, k / block_size)] += 1;
                }
            }
        }
    }
    let denom = (block_size * block_size * block_size) as f64;
    let values = counts.iter().map(|&c| (c as f64 / denom) as f32).collect();
    PorosityGrid::new(g, block_size, values)
}
