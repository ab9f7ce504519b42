use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{forward, multi_token_loss};
use super::{SeqError, SequenceSample, Transformer, TransformerConfig};
use crate::gradcore::{AdamConfig, Graph};

fn check_sample(cfg: &TransformerConfig, s: &SequenceSample) -> Result<(), SeqError> {
    if s.set_size() != cfg.set_size {
        return Err(SeqError::Shape(format!(
            "sample sets of {} tokens, config expects {}",
            s.set_size(),
            cfg.set_size
        )));
    }
    if s.len() > cfg.sets_per_window() {
        return Err(SeqError::TooLong {
            len: s.len() * s.set_size(),
            block: cfg.block_size,
        });
    }
    if s.sets().windows(2).any(|w| w[0].coord >= w[1].coord) {
        return Err(SeqError::TraversalOrder);
    }
    let k = cfg.codebook_size();
    if let Some(&bad) = s.target().iter().find(|&&tok| tok as usize >= k) {
        return Err(SeqError::BadToken { token: bad, vocab: k });
    }
    Ok(())
}

/// Trains a fresh transformer with shifted-by-one-set teacher forcing.
///
/// Samples in a batch are grouped by length; each group's mean loss is
/// weighted by its share of the batch's positions. `on_epoch` gets the
/// epoch index and mean per-position loss. Deterministic for a given seed.
pub fn train_transformer(
    cfg: &TransformerConfig,
    data: &[SequenceSample],
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(Transformer, Vec<f64>), SeqError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(SeqError::EmptyDataset);
    }
    for s in data {
        check_sample(cfg, s)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Transformer::new(cfg.clone(), rng.gen())?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let inputs: Vec<Vec<u32>> = data.iter().map(|s| s.input(cfg.sos)).collect();
    let targets: Vec<Vec<u32>> = data.iter().map(|s| s.target()).collect();
    let conds: Vec<Vec<f32>> = data.iter().map(|s| s.conditioning()).collect();
    let total_positions: usize = inputs.iter().map(Vec::len).sum();

    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &i in chunk {
                groups.entry(inputs[i].len()).or_default().push(i);
            }
            let batch_positions: usize = chunk.iter().map(|&i| inputs[i].len()).sum();
            for (len, members) in groups {
                let share = (len * members.len()) as f64 / batch_positions as f64;
                let inp: Vec<&[u32]> = members.iter().map(|&i| inputs[i].as_slice()).collect();
                let cnd: Vec<&[f32]> = members.iter().map(|&i| conds[i].as_slice()).collect();
                let tgt: Vec<u32> = members.iter().flat_map(|&i| targets[i].iter().copied()).collect();
                let mut g = Graph::training();
                let logits = forward(&mut g, model.params(), cfg, &inp, &cnd, rng.gen())?;
                let loss = multi_token_loss(&mut g, logits, &tgt)?;
                let weighted = g.scale(loss, share as f32)?;
                g.backward(weighted)?;
                model.params_mut().accumulate_grads(&g)?;
                loss_sum += g.value(loss).item() as f64 * (len * members.len()) as f64;
            }
            let store = model.params_mut();
            if !store.grads_finite() {
                return Err(SeqError::NonFinite("gradients"));
            }
            store.adam_step(&adam);
        }
        let mean = loss_sum / total_positions as f64;
        if !mean.is_finite() {
            return Err(SeqError::NonFinite("loss"));
        }
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::super::model::tests::tiny;
    use super::super::TokenSet;
    use super::*;

    fn sample(tokens: &[[u32; 2]], cond: f32) -> SequenceSample {
        SequenceSample::new(
            tokens
                .iter()
                .enumerate()
                .map(|(i, t)| TokenSet {
                    tokens: t.to_vec(),
                    coord: [0, i / 2, i % 2],
                    cond,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            train_transformer(&tiny(), &[], 0, |_, _| {}),
            Err(SeqError::EmptyDataset)
        ));
    }

    #[test]
    fn memorizes_a_single_sample() {
        let cfg = TransformerConfig {
            epochs: 150,
            lr: 3e-3,
            ..tiny()
        };
        let data = [sample(&[[0, 1], [2, 3], [1, 1]], 0.3)];
        let (_, hist) = train_transformer(&cfg, &data, 1, |_, _| {}).unwrap();
        // cold start sits near ln V
        assert!((hist[0] - (cfg.vocab as f64).ln()).abs() < 0.5, "{}", hist[0]);
        let last = *hist.last().unwrap();
        assert!(last < 0.1 * hist[0], "{} -> {last}", hist[0]);
    }

    #[test]
    fn deterministic_for_seed() {
        let cfg = TransformerConfig {
            epochs: 3,
            batch_size: 2,
            dropout: 0.1,
            ..tiny()
        };
        let data = [
            sample(&[[0, 1], [2, 3], [1, 1]], 0.3),
            sample(&[[3, 3], [0, 2]], 0.6),
            sample(&[[1, 0]], 0.1),
        ];
        let (a, ha) = train_transformer(&cfg, &data, 5, |_, _| {}).unwrap();
        let (b, hb) = train_transformer(&cfg, &data, 5, |_, _| {}).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.to_checkpoint(), b.to_checkpoint());
    }

    #[test]
    fn sos_in_targets_rejected() {
        let data = [sample(&[[0, 4]], 0.3)];
        assert!(matches!(
            train_transformer(&tiny(), &data, 0, |_, _| {}),
            Err(SeqError::BadToken { token: 4, .. })
        ));
    }

    #[test]
    fn over_long_samples_rejected() {
        let data = [sample(&[[0, 1], [0, 1], [0, 1], [0, 1]], 0.3)];
        assert!(matches!(
            train_transformer(&tiny(), &data, 0, |_, _| {}),
            Err(SeqError::TooLong { .. })
        ));
    }
}
