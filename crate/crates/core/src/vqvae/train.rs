use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{forward_loss, CODEBOOK};
use super::{patch_batch, Vqvae, VqvaeConfig, VqvaeError};
use crate::gradcore::{AdamConfig, Graph, ParamStore};
use crate::voxcore::Volume3D;

/// Mean loss components over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub w_codebook: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commit: f64,
    pub total: f64,
    /// Distinct codebook entries selected during the epoch.
    pub codes_used: usize,
}

/// Seeds the codebook with encoder outputs of randomly chosen patches so
/// every entry starts inside the latent cloud.
fn seed_codebook(model: &mut Vqvae, patches: &[Volume3D], rng: &mut ChaCha8Rng) -> Result<(), VqvaeError> {
    let k = model.config().codebook_size;
    let d = model.config().latent_dim;
    let t = model.config().tokens_per_patch();
    let want = (2 * k).div_ceil(t).min(patches.len());
    let picks = index::sample(rng, patches.len(), want);
    let chosen: Vec<&Volume3D> = picks.iter().map(|i| &patches[i]).collect();
    let vectors: Vec<f32> = model
        .encode_refs(&chosen)?
        .iter()
        .flat_map(|z| z.values().to_vec())
        .collect();
    let n = vectors.len() / d;
    let mut table = Vec::with_capacity(k * d);
    if n >= k {
        for i in index::sample(rng, n, k).iter() {
            table.extend_from_slice(&vectors[i * d..(i + 1) * d]);
        }
    } else {
        // too few latents: repeat them with a small jitter
        for _ in 0..k {
            let i = rng.gen_range(0..n);
            table.extend(vectors[i * d..(i + 1) * d].iter().map(|&v| v + rng.gen_range(-1e-3..1e-3)));
        }
    }
    model
        .params_mut()
        .value_mut(CODEBOOK)
        .expect("codebook present")
        .data_mut()
        .copy_from_slice(&table);
    Ok(())
}

/// Batches between dead-code restarts.
const RESTART_EVERY: usize = 8;

/// Moves every codebook entry that was not selected since the last restart
/// onto a randomly chosen encoder output of the current batch.
fn restart_dead_codes(store: &mut ParamStore<f32>, hits: &[u32], latents: &[f32], d: usize, rng: &mut ChaCha8Rng) {
    let n = latents.len() / d;
    let table = store.value_mut(CODEBOOK).expect("codebook present").data_mut();
    for (k, _) in hits.iter().enumerate().filter(|(_, &h)| h == 0) {
        let i = rng.gen_range(0..n);
        for (dst, &src) in table[k * d..(k + 1) * d].iter_mut().zip(&latents[i * d..(i + 1) * d]) {
            *dst = src + rng.gen_range(-1e-3..1e-3);
        }
    }
}

/// Trains an autoencoder on `patches`.
///
/// Each epoch uses the scheduled codebook weight and a fresh shuffle;
/// `on_epoch` sees the epoch's mean losses. Deterministic for a given seed.
pub fn train_vqvae(
    cfg: &VqvaeConfig,
    patches: &[Volume3D],
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(Vqvae, Vec<EpochStats>), VqvaeError> {
    cfg.validate()?;
    if patches.is_empty() {
        return Err(VqvaeError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Vqvae::new(cfg.clone(), rng.gen())?;
    for p in patches {
        model.check_patch(p)?;
    }
    seed_codebook(&mut model, patches, &mut rng)?;

    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut hits = vec![0u32; cfg.codebook_size];
    let mut since_restart = 0;
    for epoch in 0..cfg.epochs {
        let w = cfg.codebook_weight(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut used = BTreeSet::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Volume3D> = chunk.iter().map(|&i| &patches[i]).collect();
            let mut g = Graph::training();
            let fp = forward_loss(&mut g, model.params(), cfg, patch_batch(&batch, cfg.patch_edge), w)?;
            g.backward(fp.loss.total)?;
            let store = model.params_mut();
            store.accumulate_grads(&g)?;
            if !store.grads_finite() {
                return Err(VqvaeError::NonFinite("gradients"));
            }
            store.adam_step(&adam);
            let nb = chunk.len() as f64;
            for (s, v) in sums
                .iter_mut()
                .zip([fp.loss.recon, fp.loss.codebook, fp.loss.commit, fp.loss.total])
            {
                *s += g.value(v).item() as f64 * nb;
            }
            for &i in &fp.indices {
                hits[i] += 1;
            }
            since_restart += 1;
            if since_restart == RESTART_EVERY {
                restart_dead_codes(model.params_mut(), &hits, g.value(fp.z_hat).data(), cfg.latent_dim, &mut rng);
                hits.fill(0);
                since_restart = 0;
            }
            used.extend(fp.indices);
        }
        let n = patches.len() as f64;
        let stats = EpochStats {
            epoch,
            w_codebook: w,
            recon: sums[0] / n,
            codebook: sums[1] / n,
            commit: sums[2] / n,
            total: sums[3] / n,
            codes_used: used.len(),
        };
        if !stats.total.is_finite() {
            return Err(VqvaeError::NonFinite("loss"));
        }
        on_epoch(&stats);
        history.push(stats);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(edge: usize) -> Volume3D {
        let c = edge as f64 / 2.0 - 0.5;
        let mut data = Vec::new();
        for i in 0..edge {
            for j in 0..edge {
                for k in 0..edge {
                    let r = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2)).sqrt();
                    data.push(u8::from(r < 3.0 || (i + 2 * j + k) % 5 == 0));
                }
            }
        }
        Volume3D::new([edge; 3], 1.0, data).unwrap()
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            train_vqvae(&VqvaeConfig::desk(), &[], 0, |_| {}),
            Err(VqvaeError::EmptyDataset)
        ));
    }

    #[test]
    fn memorizes_one_sample() {
        let cfg = VqvaeConfig {
            epochs: 300,
            batch_size: 1,
            lr: 2e-3,
            ..VqvaeConfig::desk()
        };
        let p = blob(16);
        let (m, hist) = train_vqvae(&cfg, std::slice::from_ref(&p), 1, |_| {}).unwrap();
        assert!(hist.last().unwrap().recon < hist[0].recon);
        let r = &m.reconstruct(&[&p]).unwrap()[0];
        let same = r.data().iter().zip(p.data()).filter(|(a, b)| a == b).count();
        let acc = same as f64 / p.len() as f64;
        assert!(acc > 0.99, "accuracy {acc}");
    }

    #[test]
    fn deterministic_for_seed() {
        let cfg = VqvaeConfig {
            epochs: 2,
            batch_size: 2,
            ..VqvaeConfig::desk()
        };
        let data = vec![blob(16), blob(16)];
        let (a, ha) = train_vqvae(&cfg, &data, 7, |_| {}).unwrap();
        let (b, hb) = train_vqvae(&cfg, &data, 7, |_| {}).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.to_checkpoint(), b.to_checkpoint());
    }
}
