//! Trains the desk autoencoder on synthetic 16³ patches and reports held-out
//! voxel accuracy and porosity error.
//!
//!     cargo run --release --example vqvae_reconstruction -- [volumes] [epochs]
//!
//! Defaults (8 volumes of 32³, 25 epochs) run in a few minutes.

use anyhow::Result;
use poregen::voxcore::{crop_patches, gen_synthetic, porosity, PorosityGrid, Volume3D};
use poregen::vqvae::{train_vqvae, VqvaeConfig};
use rand::{Rng, SeedableRng};

fn patches(volumes: usize, seed: u64) -> Result<Vec<Volume3D>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..volumes {
        let vals = (0..8).map(|_| rng.gen_range(0.1..0.4)).collect();
        let v = gen_synthetic(8, &PorosityGrid::new([2, 2, 2], 16, vals)?, rng.gen())?;
        out.extend(crop_patches(&v, 16, 16)?.into_iter().map(|(p, _)| p));
    }
    Ok(out)
}

fn main() -> Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let volumes = args.first().copied().unwrap_or(8);
    let epochs = args.get(1).copied().unwrap_or(25);

    let train = patches(volumes, 1)?;
    let test = patches(2, 2)?;
    let cfg = VqvaeConfig {
        epochs,
        ..VqvaeConfig::desk()
    };
    println!("{} training patches, {} tokens per patch", train.len(), cfg.tokens_per_patch());
    let (model, _) = train_vqvae(&cfg, &train, 3, |s| {
        println!(
            "epoch {:2} w {:.2} recon {:.4} codebook {:.4} codes used {}",
            s.epoch, s.w_codebook, s.recon, s.codebook, s.codes_used
        )
    })?;

    let refs: Vec<&Volume3D> = test.iter().collect();
    let rec = model.reconstruct(&refs)?;
    let (mut acc, mut mae) = (0.0, 0.0);
    for (x, y) in test.iter().zip(&rec) {
        acc += x.data().iter().zip(y.data()).filter(|(a, b)| a == b).count() as f64 / x.len() as f64;
        mae += (porosity(x) - porosity(y)).abs();
    }
    let n = test.len() as f64;
    println!("held out: voxel accuracy {:.4}, porosity MAE {:.4}", acc / n, mae / n);
    println!("first patch tokens {:?}", model.tokenize(&refs[..1])?[0]);
    Ok(())
}
