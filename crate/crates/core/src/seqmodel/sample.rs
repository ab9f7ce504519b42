use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{SeqError, TokenSet, Transformer};
use crate::gradcore::softmax_in_place;

/// Draws the next token set after `context`.
///
/// `cond` holds one conditioning value per context set plus one for the set
/// being generated. A single forward pass gives logits at the t target
/// positions; each token is drawn independently from its tempered
/// distribution with the SOS entry excluded.
pub fn sample_set(
    model: &Transformer,
    context: &[TokenSet],
    cond: &[f32],
    coord: [usize; 3],
    temperature: f64,
    seed: u64,
) -> Result<TokenSet, SeqError> {
    let cfg = model.config();
    let t = cfg.set_size;
    let m = context.len();
    if m >= cfg.sets_per_window() {
        return Err(SeqError::TooLong {
            len: (m + 1) * t,
            block: cfg.block_size,
        });
    }
    if cond.len() != m + 1 {
        return Err(SeqError::Shape(format!(
            "{} conditioning values for {m} context sets",
            cond.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(SeqError::Config(format!("temperature {temperature} must be positive")));
    }
    let mut input = vec![cfg.sos; t];
    for s in context {
        if s.tokens.len() != t {
            return Err(SeqError::Shape(format!("context set of {} tokens, expected {t}", s.tokens.len())));
        }
        input.extend_from_slice(&s.tokens);
    }
    let flat_cond: Vec<f32> = cond.iter().flat_map(|&c| std::iter::repeat(c).take(t)).collect();
    let logits = model.logits(&input, &flat_cond)?;
    let v = cfg.vocab;
    let sos = cfg.sos as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(t);
    for row in logits.data()[m * t * v..(m + 1) * t * v].chunks(v) {
        let mut p: Vec<f64> = row.iter().map(|&z| z as f64 / temperature).collect();
        p[sos] = f64::NEG_INFINITY;
        softmax_in_place(&mut p);
        if !p.iter().all(|x| x.is_finite()) {
            return Err(SeqError::NonFinite("logits"));
        }
        let dist = WeightedIndex::new(&p).map_err(|e| SeqError::Config(e.to_string()))?;
        tokens.push(dist.sample(&mut rng) as u32);
    }
    Ok(TokenSet {
        tokens,
        coord,
        cond: cond[m],
    })
}

#[cfg(test)]
mod tests {
    use super::super::model::tests::tiny;
    use super::*;

    fn ctx() -> Vec<TokenSet> {
        vec![TokenSet {
            tokens: vec![1, 2],
            coord: [0, 0, 0],
            cond: 0.2,
        }]
    }

    #[test]
    fn same_seed_same_set() {
        let m = Transformer::new(tiny(), 3).unwrap();
        let a = sample_set(&m, &ctx(), &[0.2, 0.3], [0, 0, 1], 1.0, 9).unwrap();
        let b = sample_set(&m, &ctx(), &[0.2, 0.3], [0, 0, 1], 1.0, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.coord, [0, 0, 1]);
        assert_eq!(a.cond, 0.3);
    }

    #[test]
    fn sos_never_sampled() {
        let mut m = Transformer::new(tiny(), 3).unwrap();
        // make SOS by far the most likely class everywhere
        let head = m.params_mut().value_mut("head.w").unwrap();
        let v = head.shape()[1];
        for (i, w) in head.data_mut().iter_mut().enumerate() {
            if i % v == v - 1 {
                *w = 50.0;
            }
        }
        for seed in 0..20 {
            let s = sample_set(&m, &ctx(), &[0.2, 0.3], [0, 0, 1], 2.0, seed).unwrap();
            assert!(s.tokens.iter().all(|&t| t < 4), "{:?}", s.tokens);
        }
    }

    #[test]
    fn cold_temperature_is_argmax() {
        let m = Transformer::new(tiny(), 4).unwrap();
        let logits = m.logits(&[4, 4, 1, 2], &[0.2, 0.2, 0.3, 0.3]).unwrap();
        let v = 5;
        let want: Vec<u32> = logits.data()[2 * v..4 * v]
            .chunks(v)
            .map(|row| {
                (0..v - 1)
                    .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                    .unwrap() as u32
            })
            .collect();
        for seed in 0..5 {
            let s = sample_set(&m, &ctx(), &[0.2, 0.3], [0, 0, 1], 1e-6, seed).unwrap();
            assert_eq!(s.tokens, want);
        }
    }

    #[test]
    fn full_window_context_rejected() {
        let m = Transformer::new(tiny(), 0).unwrap();
        let three: Vec<TokenSet> = (0..3)
            .map(|i| TokenSet {
                tokens: vec![0, 1],
                coord: [0, 0, i],
                cond: 0.1,
            })
            .collect();
        assert!(sample_set(&m, &three, &[0.1; 4], [0, 1, 0], 1.0, 0).is_err());
        assert!(sample_set(&m, &three[..2], &[0.1; 3], [0, 1, 0], 1.0, 0).is_ok());
        assert!(sample_set(&m, &three[..2], &[0.1; 3], [0, 1, 0], 0.0, 0).is_err());
    }
}
