//! Sliding-window autoregressive generation over a porosity grid and
//! stitching of the decoded patches.

mod seam;

pub use seam::seam_score;

use std::collections::HashMap;
use std::io::Write;

use crate::seqmodel::{sample_set, SeqError, SequenceSample, TokenSet, Transformer};
use crate::voxcore::{porosity, PorosityGrid, VoxError, Volume3D, DEFAULT_VOXEL_SIZE_UM};
use crate::vqvae::{Vqvae, VqvaeError};

pub type Coord = [usize; 3];

#[derive(Debug, thiserror::Error)]
pub enum AssemblyError {
    #[error("grid dimensions {0:?} must all be at least 1")]
    EmptyGrid([usize; 3]),
    #[error("window {window:?} does not fit in grid {grid:?}")]
    WindowTooLarge { window: [usize; 3], grid: [usize; 3] },
    #[error("window {window:?} holds {sets} sets, transformer window holds {max}")]
    WindowSets { window: [usize; 3], sets: usize, max: usize },
    #[error("porosity grid block size {block} does not match patch edge {patch}")]
    BlockSize { block: usize, patch: usize },
    #[error("transformer expects {transformer} tokens per set, autoencoder produces {vqvae}")]
    SetSize { transformer: usize, vqvae: usize },
    #[error("transformer vocabulary {transformer} does not match codebook size {codebook} + 1")]
    Vocab { transformer: usize, codebook: usize },
    #[error("window context for {target:?} is missing predecessor {missing:?}")]
    MissingPredecessor { target: Coord, missing: Coord },
    #[error("window coordinate {coord:?} does not precede target {target:?}")]
    OrderViolation { coord: Coord, target: Coord },
    #[error("coordinate {coord:?} outside grid {grid:?}")]
    OutOfGrid { coord: Coord, grid: [usize; 3] },
    #[error("window {window:?} does not tile the patch grid {grid:?}")]
    WindowTiling { window: [usize; 3], grid: [usize; 3] },
    #[error("volume dims {dims:?} not divisible by patch edge {patch}")]
    NotDivisible { dims: [usize; 3], patch: usize },
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error(transparent)]
    Vqvae(#[from] VqvaeError),
    #[error(transparent)]
    Vox(#[from] VoxError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Every grid coordinate, lexicographic with k fastest.
pub fn traversal_order(grid_dims: [usize; 3]) -> Result<Vec<Coord>, AssemblyError> {
    if grid_dims.contains(&0) {
        return Err(AssemblyError::EmptyGrid(grid_dims));
    }
    let [gi, gj, gk] = grid_dims;
    let mut out = Vec::with_capacity(gi * gj * gk);
    for i in 0..gi {
        for j in 0..gj {
            for k in 0..gk {
                out.push([i, j, k]);
            }
        }
    }
    Ok(out)
}

/// Non-overlapping `edge`-sized patches of `v` in traversal order, with the
/// patch grid dimensions.
pub fn patches_of(v: &Volume3D, edge: usize) -> Result<(Vec<Volume3D>, [usize; 3]), AssemblyError> {
    let dims = v.dims();
    if edge == 0 || dims.iter().any(|&d| d % edge != 0) {
        return Err(AssemblyError::NotDivisible { dims, patch: edge });
    }
    let g = dims.map(|d| d / edge);
    let patches = traversal_order(g)?
        .into_iter()
        .map(|[i, j, k]| v.sub_volume([i * edge, j * edge, k * edge], edge))
        .collect::<Result<_, _>>()?;
    Ok((patches, g))
}

/// Splits `v` into window-sized blocks of patches and tokenizes each block
/// as one training sample, sets in traversal order with block-local
/// coordinates and the patch porosity as conditioning.
pub fn encode_volume(vq: &Vqvae, v: &Volume3D, window: [usize; 3]) -> Result<Vec<SequenceSample>, AssemblyError> {
    let (patches, g) = patches_of(v, vq.config().patch_edge)?;
    if (0..3).any(|a| window[a] == 0 || g[a] % window[a] != 0) {
        return Err(AssemblyError::WindowTiling { window, grid: g });
    }
    let tokens = vq.tokenize(&patches.iter().collect::<Vec<_>>())?;
    let local = traversal_order(window)?;
    let mut samples = Vec::new();
    for w in traversal_order([0, 1, 2].map(|a| g[a] / window[a]))? {
        let sets = local
            .iter()
            .map(|&c| {
                let [i, j, k] = [0, 1, 2].map(|a| w[a] * window[a] + c[a]);
                let idx = (i * g[1] + j) * g[2] + k;
                TokenSet {
                    tokens: tokens[idx].clone(),
                    coord: c,
                    cond: porosity(&patches[idx]) as f32,
                }
            })
            .collect();
        samples.push(SequenceSample::new(sets)?);
    }
    Ok(samples)
}

/// Grid, window and traversal for one assembly run.
#[derive(Clone, Debug, PartialEq)]
pub struct AssemblyPlan {
    pub grid_dims: [usize; 3],
    pub window_dims: [usize; 3],
    pub traversal: Vec<Coord>,
    pub seed: u64,
}

impl AssemblyPlan {
    pub fn new(grid_dims: [usize; 3], window_dims: [usize; 3], seed: u64) -> Result<Self, AssemblyError> {
        let traversal = traversal_order(grid_dims)?;
        if window_dims.contains(&0) || (0..3).any(|a| window_dims[a] > grid_dims[a]) {
            return Err(AssemblyError::WindowTooLarge {
                window: window_dims,
                grid: grid_dims,
            });
        }
        Ok(Self {
            grid_dims,
            window_dims,
            traversal,
            seed,
        })
    }

    pub fn window_sets(&self) -> usize {
        self.window_dims.iter().product()
    }
}

/// Token sets generated so far.
#[derive(Clone, Debug, Default)]
pub struct AssemblyState {
    sets: HashMap<Coord, TokenSet>,
    target: Option<Coord>,
}

impl AssemblyState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, c: &Coord) -> Option<&TokenSet> {
        self.sets.get(c)
    }

    pub fn insert(&mut self, set: TokenSet) {
        self.sets.insert(set.coord, set);
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn target(&self) -> Option<Coord> {
        self.target
    }
}

/// The already generated sets of the window block ending at `target`, in
/// traversal order, and the conditioning for those sets plus the target.
///
/// The block is `[max(0, c - w + 1) ..= c]` on every axis.
pub fn window_context(
    target: Coord,
    state: &AssemblyState,
    window_dims: [usize; 3],
    pg: &PorosityGrid,
) -> Result<(Vec<TokenSet>, Vec<f32>), AssemblyError> {
    let grid = pg.grid_dims();
    if (0..3).any(|a| target[a] >= grid[a]) {
        return Err(AssemblyError::OutOfGrid { coord: target, grid });
    }
    let lo: [usize; 3] = std::array::from_fn(|a| (target[a] + 1).saturating_sub(window_dims[a]));
    let mut context = Vec::new();
    let mut cond = Vec::new();
    for i in lo[0]..=target[0] {
        for j in lo[1]..=target[1] {
            for k in lo[2]..=target[2] {
                let c = [i, j, k];
                if c == target {
                    continue;
                }
                if c >= target {
                    return Err(AssemblyError::OrderViolation { coord: c, target });
                }
                let set = state
                    .get(&c)
                    .ok_or(AssemblyError::MissingPredecessor { target, missing: c })?;
                cond.push(pg.get(i, j, k));
                context.push(set.clone());
            }
        }
    }
    cond.push(pg.get(target[0], target[1], target[2]));
    Ok((context, cond))
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sampling seed for one coordinate; independent of traversal position.
pub fn coord_seed(seed: u64, c: Coord) -> u64 {
    c.iter().fold(mix(seed), |h, &x| mix(h ^ x as u64))
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub coord: Coord,
    pub target: f32,
    pub realized: f64,
}

/// Output of [`assemble`].
#[derive(Clone, Debug)]
pub struct Assembly {
    pub plan: AssemblyPlan,
    pub volume: Volume3D,
    /// Generated sets in traversal order.
    pub sets: Vec<TokenSet>,
    pub manifest: Vec<ManifestRow>,
}

impl Assembly {
    /// Mean absolute difference between target and realized block porosity.
    pub fn conditioning_mae(&self) -> f64 {
        let n = self.manifest.len().max(1) as f64;
        self.manifest.iter().map(|r| (r.realized - r.target as f64).abs()).sum::<f64>() / n
    }

    pub fn seam_score(&self) -> Result<f64, AssemblyError> {
        let edge = self.volume.dims()[0] / self.plan.grid_dims[0];
        seam_score(&self.volume, edge)
    }
}

fn check_models(vq: &Vqvae, tf: &Transformer, pg: &PorosityGrid, plan: &AssemblyPlan) -> Result<(), AssemblyError> {
    let vc = vq.config();
    let tc = tf.config();
    if pg.block_size() != vc.patch_edge {
        return Err(AssemblyError::BlockSize {
            block: pg.block_size(),
            patch: vc.patch_edge,
        });
    }
    if tc.set_size != vc.tokens_per_patch() {
        return Err(AssemblyError::SetSize {
            transformer: tc.set_size,
            vqvae: vc.tokens_per_patch(),
        });
    }
    if tc.vocab != vc.codebook_size + 1 {
        return Err(AssemblyError::Vocab {
            transformer: tc.vocab,
            codebook: vc.codebook_size,
        });
    }
    if plan.window_sets() > tc.sets_per_window() {
        return Err(AssemblyError::WindowSets {
            window: plan.window_dims,
            sets: plan.window_sets(),
            max: tc.sets_per_window(),
        });
    }
    Ok(())
}

/// Generates one token set per grid block in traversal order, each
/// conditioned on its window context, then decodes and stitches them.
pub fn assemble(
    vq: &Vqvae,
    tf: &Transformer,
    pg: &PorosityGrid,
    window_dims: [usize; 3],
    temperature: f64,
    seed: u64,
) -> Result<Assembly, AssemblyError> {
    let plan = AssemblyPlan::new(pg.grid_dims(), window_dims, seed)?;
    check_models(vq, tf, pg, &plan)?;
    let mut state = AssemblyState::new();
    let mut sets = Vec::with_capacity(plan.traversal.len());
    for &c in &plan.traversal {
        state.target = Some(c);
        let (context, cond) = window_context(c, &state, window_dims, pg)?;
        let set = sample_set(tf, &context, &cond, c, temperature, coord_seed(seed, c))?;
        state.insert(set.clone());
        sets.push(set);
    }
    state.target = None;

    let e = vq.config().patch_edge;
    let tokens: Vec<Vec<u32>> = sets.iter().map(|s| s.tokens.clone()).collect();
    let patches = vq.decode_tokens(&tokens, DEFAULT_VOXEL_SIZE_UM)?;
    let mut volume = Volume3D::filled(pg.volume_dims(), DEFAULT_VOXEL_SIZE_UM, crate::voxcore::SOLID)?;
    let mut manifest = Vec::with_capacity(sets.len());
    for (set, patch) in sets.iter().zip(&patches) {
        let c = set.coord;
        volume.place(patch, [c[0] * e, c[1] * e, c[2] * e])?;
        manifest.push(ManifestRow {
            coord: c,
            target: set.cond,
            realized: porosity(patch),
        });
    }
    Ok(Assembly {
        plan,
        volume,
        sets,
        manifest,
    })
}

/// Writes the assembly manifest: `#` header lines, then one CSV row per
/// coordinate.
pub fn write_manifest(a: &Assembly, w: &mut impl Write) -> Result<(), AssemblyError> {
    let [gi, gj, gk] = a.plan.grid_dims;
    let [wi, wj, wk] = a.plan.window_dims;
    writeln!(w, "# grid,{gi},{gj},{gk}")?;
    writeln!(w, "# window,{wi},{wj},{wk}")?;
    writeln!(w, "# seed,{}", a.plan.seed)?;
    writeln!(w, "# seam_score,{:.6}", a.seam_score()?)?;
    writeln!(w, "# conditioning_mae,{:.6}", a.conditioning_mae())?;
    writeln!(w, "i,j,k,target_porosity,realized_porosity,abs_error")?;
    for r in &a.manifest {
        let [i, j, k] = r.coord;
        let err = (r.realized - r.target as f64).abs();
        writeln!(w, "{i},{j},{k},{:.6},{:.6},{err:.6}", r.target, r.realized)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3]) -> PorosityGrid {
        let n = dims.iter().product();
        PorosityGrid::new(dims, 16, (0..n).map(|i| 0.1 + 0.01 * i as f32).collect()).unwrap()
    }

    fn filled(pg: &PorosityGrid, upto: usize) -> AssemblyState {
        let mut s = AssemblyState::new();
        for c in traversal_order(pg.grid_dims()).unwrap().into_iter().take(upto) {
            s.insert(TokenSet {
                tokens: vec![0],
                coord: c,
                cond: pg.get(c[0], c[1], c[2]),
            });
        }
        s
    }

    #[test]
    fn traversal_examples() {
        assert_eq!(
            traversal_order([2, 2, 2]).unwrap(),
            vec![[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1], [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]]
        );
        assert_eq!(traversal_order([1, 1, 1]).unwrap(), vec![[0, 0, 0]]);
        assert_eq!(traversal_order([1, 1, 3]).unwrap(), vec![[0, 0, 0], [0, 0, 1], [0, 0, 2]]);
        assert!(traversal_order([2, 0, 1]).is_err());
    }

    #[test]
    fn traversal_is_exhaustive_permutation() {
        for gi in 1..=4 {
            for gj in 1..=4 {
                for gk in 1..=4 {
                    let t = traversal_order([gi, gj, gk]).unwrap();
                    assert_eq!(t.len(), gi * gj * gk);
                    assert!(t.windows(2).all(|w| w[0] < w[1]));
                    assert!(t.iter().all(|c| c[0] < gi && c[1] < gj && c[2] < gk));
                }
            }
        }
    }

    #[test]
    fn corner_target_sees_seven_predecessors() {
        let pg = grid([2, 2, 2]);
        let (ctx, cond) = window_context([1, 1, 1], &filled(&pg, 7), [2, 2, 2], &pg).unwrap();
        let coords: Vec<Coord> = ctx.iter().map(|s| s.coord).collect();
        assert_eq!(coords, traversal_order([2, 2, 2]).unwrap()[..7]);
        assert_eq!(cond.len(), 8);
        assert_eq!(*cond.last().unwrap(), pg.get(1, 1, 1));
    }

    #[test]
    fn origin_has_empty_context() {
        let pg = grid([2, 2, 2]);
        let (ctx, cond) = window_context([0, 0, 0], &AssemblyState::new(), [2, 2, 2], &pg).unwrap();
        assert!(ctx.is_empty());
        assert_eq!(cond, vec![pg.get(0, 0, 0)]);
    }

    #[test]
    fn clamped_block_along_one_axis() {
        let pg = grid([1, 1, 3]);
        let (ctx, _) = window_context([0, 0, 2], &filled(&pg, 2), [1, 1, 2], &pg).unwrap();
        assert_eq!(ctx.iter().map(|s| s.coord).collect::<Vec<_>>(), vec![[0, 0, 1]]);
    }

    #[test]
    fn missing_predecessor_reported() {
        let pg = grid([2, 2, 2]);
        let e = window_context([1, 1, 1], &filled(&pg, 3), [2, 2, 2], &pg).unwrap_err();
        assert!(matches!(e, AssemblyError::MissingPredecessor { missing: [0, 1, 1], .. }));
    }

    #[test]
    fn window_larger_than_grid_rejected() {
        assert!(AssemblyPlan::new([2, 1, 1], [2, 2, 1], 0).is_err());
        assert_eq!(AssemblyPlan::new([3, 1, 1], [2, 1, 1], 0).unwrap().window_sets(), 2);
    }

    #[test]
    fn coord_seeds_differ_and_ignore_order() {
        let a = coord_seed(7, [0, 0, 1]);
        assert_eq!(a, coord_seed(7, [0, 0, 1]));
        assert_ne!(a, coord_seed(7, [0, 1, 0]));
        assert_ne!(a, coord_seed(8, [0, 0, 1]));
    }

    fn models() -> (Vqvae, Transformer) {
        use crate::seqmodel::TransformerConfig;
        use crate::vqvae::VqvaeConfig;
        let vq = Vqvae::new(VqvaeConfig::desk(), 1).unwrap();
        let tf = Transformer::new(
            TransformerConfig {
                layers: 1,
                width: 16,
                cond_width: 4,
                ..TransformerConfig::desk()
            },
            2,
        )
        .unwrap();
        (vq, tf)
    }

    #[test]
    fn one_window_output_shape_and_determinism() {
        let (vq, tf) = models();
        let pg = grid([2, 2, 2]);
        let a = assemble(&vq, &tf, &pg, [2, 2, 2], 1.0, 5).unwrap();
        assert_eq!(a.volume.dims(), [32, 32, 32]);
        assert_eq!(a.sets.len(), 8);
        let b = assemble(&vq, &tf, &pg, [2, 2, 2], 1.0, 5).unwrap();
        assert_eq!(a.volume, b.volume);
        let mut csv = Vec::new();
        write_manifest(&a, &mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(!text.contains('\r'));
        assert_eq!(text.lines().count(), 6 + 8);
        assert!(text.contains("# seam_score,"));
    }

    #[test]
    fn third_set_conditions_on_second_only() {
        let (vq, tf) = models();
        let pg = grid([3, 1, 1]);
        let a = assemble(&vq, &tf, &pg, [2, 1, 1], 1.0, 9).unwrap();
        let s1 = &a.sets[1];
        let again = sample_set(
            &tf,
            std::slice::from_ref(s1),
            &[pg.get(1, 0, 0), pg.get(2, 0, 0)],
            [2, 0, 0],
            1.0,
            coord_seed(9, [2, 0, 0]),
        )
        .unwrap();
        assert_eq!(a.sets[2], again);
    }

    #[test]
    fn prefix_is_stable_across_grid_sizes() {
        let (vq, tf) = models();
        let small = PorosityGrid::new([2, 1, 1], 16, vec![0.2, 0.3]).unwrap();
        let large = PorosityGrid::new([3, 1, 1], 16, vec![0.2, 0.3, 0.4]).unwrap();
        let a = assemble(&vq, &tf, &small, [2, 1, 1], 1.0, 4).unwrap();
        let b = assemble(&vq, &tf, &large, [2, 1, 1], 1.0, 4).unwrap();
        assert_eq!(a.sets[..], b.sets[..2]);
    }

    #[test]
    fn block_size_mismatch_rejected() {
        let (vq, tf) = models();
        let pg = PorosityGrid::uniform([2, 2, 2], 8, 0.3).unwrap();
        let e = assemble(&vq, &tf, &pg, [2, 2, 2], 1.0, 0).unwrap_err();
        assert!(e.to_string().contains('8') && e.to_string().contains("16"), "{e}");
    }
}
