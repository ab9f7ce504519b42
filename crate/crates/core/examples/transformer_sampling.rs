//! Trains a small transformer on hand-made token sequences whose tokens
//! encode the conditioning value, then samples sets at new porosities.
//!
//!     cargo run --release --example transformer_sampling

use anyhow::Result;
use poregen::seqmodel::{sample_set, train_transformer, MaskKind, SequenceSample, TokenSet, TransformerConfig};

/// Token `b` for porosity in bin `b` of eight.
fn bin(p: f32) -> u32 {
    ((p * 8.0) as u32).min(7)
}

fn main() -> Result<()> {
    let cfg = TransformerConfig {
        set_size: 2,
        block_size: 8,
        vocab: 9,
        sos: 8,
        layers: 2,
        heads: 2,
        width: 32,
        cond_width: 8,
        dropout: 0.0,
        mask: MaskKind::Token,
        epochs: 60,
        batch_size: 16,
        lr: 3e-3,
    };
    let data: Vec<SequenceSample> = (0..64)
        .map(|n| {
            let sets = (0..4)
                .map(|s| {
                    let p = ((n * 4 + s) * 37 % 100) as f32 / 100.0;
                    TokenSet {
                        tokens: vec![bin(p); 2],
                        coord: [0, s / 2, s % 2],
                        cond: p,
                    }
                })
                .collect();
            SequenceSample::new(sets)
        })
        .collect::<Result<_, _>>()?;

    let (model, losses) = train_transformer(&cfg, &data, 5, |e, l| {
        if e % 10 == 0 {
            println!("epoch {e:2} loss {l:.4}")
        }
    })?;
    println!("final loss {:.4}", losses.last().unwrap());

    for p in [0.05f32, 0.3, 0.55, 0.9] {
        let set = sample_set(&model, &[], &[p], [0, 0, 0], 0.5, 11)?;
        println!("cond {p:.2} -> tokens {:?} (bin {})", set.tokens, bin(p));
    }
    Ok(())
}
