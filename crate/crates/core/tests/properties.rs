use std::collections::HashSet;
use std::sync::Arc;

use poregen::assembler::{traversal_order, window_context, AssemblyState};
use poregen::gradcore::{Array, Graph};
use poregen::petrosim::{absolute_permeability, relative_permeability, two_point_probability, FluidSpec, PetroError};
use poregen::seqmodel::{read_token_file, write_token_file, SequenceSample, TokenSet, Transformer, TransformerConfig};
use poregen::voxcore::{
    crop_patches, gen_synthetic, grid_from_bytes, grid_to_bytes, porosity_grid_of, volume_from_bytes, volume_to_bytes,
    PorosityGrid, Volume3D, PORE,
};
use poregen::vqvae::{quantize, Codebook, LatentGrid};
use proptest::prelude::*;

fn dims3(max: usize) -> impl Strategy<Value = [usize; 3]> {
    [1..=max, 1..=max, 1..=max]
}

fn random_volume(max: usize) -> impl Strategy<Value = Volume3D> {
    volume_in(dims3(max))
}

/// Flow needs distinct inlet and outlet faces.
fn flow_volume() -> impl Strategy<Value = Volume3D> {
    volume_in([2usize..=5, 2..=5, 2..=5])
}

fn volume_in(dims: impl Strategy<Value = [usize; 3]>) -> impl Strategy<Value = Volume3D> {
    dims.prop_flat_map(|d| {
        let n = d.iter().product::<usize>();
        (Just(d), proptest::collection::vec(0u8..=1, n), 1.0f32..10.0)
    })
    .prop_map(|(d, data, vs)| Volume3D::new(d, vs, data).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn synthetic_blocks_hit_their_targets(
        grid in dims3(2),
        tenths in proptest::collection::vec(0u8..=10, 8),
        corr in 1usize..6,
        seed in any::<u64>(),
    ) {
        let b = 8;
        let n: usize = grid.iter().product();
        let values: Vec<f32> = tenths[..n].iter().map(|&t| t as f32 / 10.0).collect();
        let pg = PorosityGrid::new(grid, b, values.clone()).unwrap();
        let v = gen_synthetic(corr, &pg, seed).unwrap();
        let got = porosity_grid_of(&v, b).unwrap();
        let bound = 1.5 / (b * b * b) as f32;
        for (t, r) in values.iter().zip(got.values()) {
            prop_assert!((t - r).abs() <= bound, "target {t} realized {r}");
        }
    }

    #[test]
    fn crop_tiles_reassemble_the_input(v in random_volume(3), edge in 1usize..3) {
        let dims = v.dims().map(|d| d * edge * 2);
        let mut big = Volume3D::filled(dims, v.voxel_size_um(), 0).unwrap();
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let src = v.get(i % v.dims()[0], j % v.dims()[1], k % v.dims()[2]);
                    big.set(i, j, k, src);
                }
            }
        }
        let tiles = crop_patches(&big, edge, edge).unwrap();
        prop_assert_eq!(tiles.len(), dims.iter().map(|d| d / edge).product::<usize>());
        let mut back = Volume3D::filled(dims, v.voxel_size_um(), 1).unwrap();
        for (p, o) in &tiles {
            back.place(p, *o).unwrap();
        }
        prop_assert_eq!(back, big);
    }

    #[test]
    fn volume_file_roundtrip(v in random_volume(5)) {
        let bytes = volume_to_bytes(&v).unwrap();
        prop_assert_eq!(volume_from_bytes(&bytes).unwrap(), v);
    }

    #[test]
    fn grid_file_roundtrip(grid in dims3(3), block in 1usize..9, vals in proptest::collection::vec(0.0f32..=1.0, 27)) {
        let n: usize = grid.iter().product();
        let pg = PorosityGrid::new(grid, block, vals[..n].to_vec()).unwrap();
        prop_assert_eq!(grid_from_bytes(&grid_to_bytes(&pg).unwrap()).unwrap(), pg);
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..7,
        scale in 0.1f64..50.0,
        seed in any::<u32>(),
    ) {
        let data: Vec<f64> = (0..rows * cols)
            .map(|i| ((i as u64 * 2654435761 + seed as u64) % 1000) as f64 / 1000.0 * scale - scale / 2.0)
            .collect();
        let mut g = Graph::<f64>::new();
        let x = g.input(Array::from_vec(&[rows, cols], data).unwrap());
        let y = g.softmax(x).unwrap();
        for r in g.value(y).data().chunks(cols) {
            prop_assert!(r.iter().all(|&p| p >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quantize_is_idempotent_on_its_output(
        k in 1usize..9,
        d in 1usize..5,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let entries: Vec<f32> = (0..k * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let cb = Codebook::new(k, d, entries).unwrap();
        let z = LatentGrid::new([2, 2, 1], d, (0..4 * d).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let (zq, idx) = quantize(&z, &cb).unwrap();
        let (zq2, idx2) = quantize(&zq, &cb).unwrap();
        prop_assert_eq!(zq.values(), zq2.values());
        // equal entries are ties resolved to the lowest index, so indices
        // can only move to an identical vector
        for (a, b) in idx.iter().zip(&idx2) {
            prop_assert_eq!(cb.entry(*a as usize), cb.entry(*b as usize));
        }
    }

    #[test]
    fn token_file_roundtrip(
        n in 1usize..4,
        t in 1usize..5,
        tokens in proptest::collection::vec(0u32..3001, 16),
        cond in proptest::collection::vec(0.0f32..=1.0, 4),
    ) {
        let sets = (0..n)
            .map(|s| TokenSet {
                tokens: (0..t).map(|i| tokens[(s * t + i) % tokens.len()]).collect(),
                coord: [0, s / 2, s % 2],
                cond: cond[s],
            })
            .collect();
        let samples = vec![SequenceSample::new(sets).unwrap()];
        let mut buf = Vec::new();
        write_token_file(&samples, &mut buf).unwrap();
        prop_assert_eq!(read_token_file(&mut buf.as_slice()).unwrap(), samples);
    }

    #[test]
    fn traversal_is_a_permutation(grid in dims3(4)) {
        let order = traversal_order(grid).unwrap();
        prop_assert_eq!(order.len(), grid.iter().product::<usize>());
        let set: HashSet<_> = order.iter().copied().collect();
        prop_assert_eq!(set.len(), order.len());
        prop_assert!(order.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn window_context_only_uses_generated_sets(grid in dims3(4), window in dims3(3)) {
        prop_assume!((0..3).all(|a| window[a] <= grid[a]));
        let n: usize = grid.iter().product();
        let pg = PorosityGrid::new(grid, 4, (0..n).map(|i| (i % 10) as f32 / 10.0).collect()).unwrap();
        let mut state = AssemblyState::new();
        let mut done = HashSet::new();
        for c in traversal_order(grid).unwrap() {
            let (ctx, cond) = window_context(c, &state, window, &pg).unwrap();
            prop_assert_eq!(cond.len(), ctx.len() + 1);
            prop_assert!(ctx.len() < window.iter().product::<usize>());
            for s in &ctx {
                prop_assert!(done.contains(&s.coord));
            }
            let set = TokenSet { tokens: vec![0], coord: c, cond: pg.get(c[0], c[1], c[2]) };
            state.insert(set);
            done.insert(c);
        }
    }

    #[test]
    fn causality_under_random_suffix_mutation(
        seed in any::<u64>(),
        p in 0usize..11,
        mutation in proptest::collection::vec(0u32..5, 12),
    ) {
        let cfg = TransformerConfig {
            set_size: 2, block_size: 12, vocab: 6, sos: 5, layers: 2, heads: 2, width: 8,
            cond_width: 3, dropout: 0.1, ..TransformerConfig::desk()
        };
        let tf = Transformer::new(cfg, seed).unwrap();
        let input: Vec<u32> = (0..12).map(|i| (i * 7 % 5) as u32).collect();
        let cond: Vec<f32> = (0..12).map(|i| 0.1 * (i / 2) as f32).collect();
        let mut changed = input.clone();
        changed[p + 1..].copy_from_slice(&mutation[p + 1..]);
        let a = tf.logits(&input, &cond).unwrap();
        let b = tf.logits(&changed, &cond).unwrap();
        let v = 6;
        prop_assert_eq!(&a.data()[..(p + 1) * v], &b.data()[..(p + 1) * v]);
    }

    #[test]
    fn two_point_curve_is_bounded_and_exact_at_zero(v in random_volume(6), seed in any::<u64>()) {
        let h_max = v.dims().iter().min().unwrap() - 1;
        let c = two_point_probability(&v, PORE, h_max, 50, seed).unwrap();
        let phi = v.pore_count() as f64 / v.len() as f64;
        prop_assert_eq!(c.values[0], phi);
        prop_assert!(c.values.iter().all(|&s| (0.0..=1.0).contains(&s)));
    }

    #[test]
    fn removing_pores_never_raises_permeability(v in flow_volume(), axis in 0usize..3) {
        let f = FluidSpec::default();
        let full = Volume3D::filled(v.dims(), v.voxel_size_um(), PORE).unwrap();
        let k = absolute_permeability(&v, axis, &f).unwrap().k_m2;
        let k_full = absolute_permeability(&full, axis, &f).unwrap().k_m2;
        prop_assert!(k <= k_full * (1.0 + 1e-9), "k {k} above all-pore {k_full}");
    }

    #[test]
    fn drainage_kr_is_monotone_with_exact_endpoints(v in flow_volume(), axis in 0usize..3) {
        match relative_permeability(&v, axis, &FluidSpec::default(), 6) {
            Err(PetroError::NonPercolatingReference) => {}
            Err(e) => prop_assert!(false, "{e}"),
            Ok(c) => {
                let p = &c.points;
                prop_assert_eq!(p[0].krw, 1.0);
                prop_assert_eq!(p[0].krnw, 0.0);
                for w in p.windows(2) {
                    prop_assert!(w[1].sw <= w[0].sw);
                    prop_assert!(w[1].krw <= w[0].krw);
                    prop_assert!(w[1].krnw >= w[0].krnw);
                }
            }
        }
    }
}

#[test]
fn stop_gradient_blocks_everything_upstream() {
    let mut g = Graph::<f64>::training();
    let x = g.input(Array::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let s = g.stop_gradient(x).unwrap();
    let y = g.mul(s, s).unwrap();
    let m = g.masked_fill(y, Arc::new(vec![false, true, false]), 0.0).unwrap();
    let l = g.sum(m).unwrap();
    g.backward(l).unwrap();
    assert!(g.grad(x).map_or(true, |a| a.data().iter().all(|&v| v == 0.0)));
}
