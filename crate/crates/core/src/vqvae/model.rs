//! Encoder, decoder and loss as graph builders over a [`ParamStore`].

use rand::Rng;

use super::quantize::nearest;
use super::{VqvaeConfig, VqvaeError};
use crate::gradcore::{Array, GradError, Graph, ParamStore, Real, Var};

const GN_EPS: f64 = 1e-5;
pub(crate) const CODEBOOK: &str = "codebook";

/// He-uniform weights for `fan_in` inputs feeding each output, zero bias.
fn he_init<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: &[usize],
    fan_in: usize,
    bias: usize,
    rng: &mut impl Rng,
) -> Result<(), GradError> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.gen_range(-bound..=bound))).collect();
    store.insert(&format!("{name}.w"), Array::from_vec(shape, data)?)?;
    store.insert_full(&format!("{name}.b"), &[bias], 0.0)
}

fn conv_init<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<(), GradError> {
    he_init(store, name, &[cout, cin, k, k, k], cin * k * k * k, cout, rng)
}

/// Stride-2 transposed convolution: each output voxel sees `(k/2)^3` taps
/// per input channel.
fn convt_init<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<(), GradError> {
    let taps = (k / 2).max(1);
    he_init(store, name, &[cin, cout, k, k, k], cin * taps * taps * taps, cout, rng)
}

fn norm_init<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Result<(), GradError> {
    store.insert_full(&format!("{name}.g"), &[c], 1.0)?;
    store.insert_full(&format!("{name}.b"), &[c], 0.0)
}

fn res_init<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut impl Rng) -> Result<(), GradError> {
    norm_init(store, &format!("{name}.n1"), c)?;
    conv_init(store, &format!("{name}.c1"), c, c, 3, rng)?;
    norm_init(store, &format!("{name}.n2"), c)?;
    conv_init(store, &format!("{name}.c2"), c, c, 3, rng)
}

/// Fresh encoder and decoder weights; the codebook is uniform in
/// `±1/K` until [`super::train_vqvae`] seeds it from data.
pub fn init_params<T: Real>(cfg: &VqvaeConfig, rng: &mut impl Rng) -> Result<ParamStore<T>, VqvaeError> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    let (ec, dc) = (&cfg.enc_channels, &cfg.dec_channels);
    let stages = cfg.stages();

    conv_init(&mut s, "enc.in", 1, ec[0], 3, rng)?;
    for st in 0..stages {
        conv_init(&mut s, &format!("enc.down{st}"), ec[st], ec[st + 1], 3, rng)?;
        for r in 0..cfg.enc_res_blocks {
            res_init(&mut s, &format!("enc.res{st}_{r}"), ec[st + 1], rng)?;
        }
    }
    norm_init(&mut s, "enc.out_norm", ec[stages])?;
    conv_init(&mut s, "enc.out", ec[stages], cfg.latent_dim, 1, rng)?;

    let k = cfg.codebook_size;
    let bound = 1.0 / k as f64;
    let data = (0..k * cfg.latent_dim)
        .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
        .collect();
    s.insert(CODEBOOK, Array::from_vec(&[k, cfg.latent_dim], data)?)?;

    conv_init(&mut s, "dec.in", cfg.latent_dim, dc[0], 3, rng)?;
    for st in 0..stages {
        for r in 0..cfg.dec_res_blocks {
            res_init(&mut s, &format!("dec.res{st}_{r}"), dc[st], rng)?;
        }
        convt_init(&mut s, &format!("dec.up{st}"), dc[st], dc[st + 1], 4, rng)?;
    }
    norm_init(&mut s, "dec.head_norm", dc[stages])?;
    conv_init(&mut s, "dec.head", dc[stages], dc[stages + 1], 3, rng)?;
    norm_init(&mut s, "dec.out_norm", dc[stages + 1])?;
    conv_init(&mut s, "dec.out", dc[stages + 1], 1, 1, rng)?;
    Ok(s)
}

fn conv<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var, GradError> {
    let w = g.param(s, &format!("{name}.w"))?;
    let b = g.param(s, &format!("{name}.b"))?;
    g.conv3d(x, w, Some(b), stride)
}

fn norm_act<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, name: &str, x: Var, groups: usize) -> Result<Var, GradError> {
    let gamma = g.param(s, &format!("{name}.g"))?;
    let beta = g.param(s, &format!("{name}.b"))?;
    let h = g.group_norm(x, gamma, beta, groups, GN_EPS)?;
    g.swish(h)
}

fn res_block<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, name: &str, x: Var, groups: usize) -> Result<Var, GradError> {
    let h = norm_act(g, s, &format!("{name}.n1"), x, groups)?;
    let h = conv(g, s, &format!("{name}.c1"), h, 1)?;
    let h = norm_act(g, s, &format!("{name}.n2"), h, groups)?;
    let h = conv(g, s, &format!("{name}.c2"), h, 1)?;
    g.add(x, h)
}

/// `x: [N, 1, E, E, E]` to latents `[N, D, l, l, l]`.
pub fn encoder<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &VqvaeConfig, x: Var) -> Result<Var, GradError> {
    // {0, 1} voxels to {-1, 1}
    let shift = g.constant(Array::full(g.shape(x), -T::ONE));
    let x = g.scale(x, T::from_f64(2.0))?;
    let x = g.add(x, shift)?;
    let mut h = conv(g, s, "enc.in", x, 1)?;
    for st in 0..cfg.stages() {
        h = conv(g, s, &format!("enc.down{st}"), h, 2)?;
        for r in 0..cfg.enc_res_blocks {
            h = res_block(g, s, &format!("enc.res{st}_{r}"), h, cfg.groups)?;
        }
    }
    let h = norm_act(g, s, "enc.out_norm", h, cfg.groups)?;
    conv(g, s, "enc.out", h, 1)
}

/// Latents `[N, D, l, l, l]` to raw reconstructions `[N, 1, E, E, E]`.
pub fn decoder<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, cfg: &VqvaeConfig, z: Var) -> Result<Var, GradError> {
    let stages = cfg.stages();
    let mut h = conv(g, s, "dec.in", z, 1)?;
    for st in 0..stages {
        for r in 0..cfg.dec_res_blocks {
            h = res_block(g, s, &format!("dec.res{st}_{r}"), h, cfg.groups)?;
        }
        let name = format!("dec.up{st}");
        let w = g.param(s, &format!("{name}.w"))?;
        let b = g.param(s, &format!("{name}.b"))?;
        h = g.conv_transpose3d(h, w, Some(b), 2)?;
    }
    let h = norm_act(g, s, "dec.head_norm", h, cfg.groups)?;
    let h = conv(g, s, "dec.head", h, 1)?;
    let h = norm_act(g, s, "dec.out_norm", h, cfg.groups)?;
    conv(g, s, "dec.out", h, 1)
}

/// `[N, D, l, l, l]` to `[N·t, D]`, vectors in grid order.
pub fn latents_to_rows<T: Real>(g: &mut Graph<T>, z: Var) -> Result<Var, GradError> {
    let sh = g.shape(z).to_vec();
    let p = g.permute(z, &[0, 2, 3, 4, 1])?;
    g.reshape(p, &[sh[0] * sh[2] * sh[3] * sh[4], sh[1]])
}

/// Inverse of [`latents_to_rows`] for a cubic latent grid of edge `l`.
pub fn rows_to_latents<T: Real>(g: &mut Graph<T>, rows: Var, l: usize) -> Result<Var, GradError> {
    let sh = g.shape(rows).to_vec();
    let t = l * l * l;
    if sh.len() != 2 || sh[0] % t != 0 {
        return Err(GradError::Shape {
            op: "rows_to_latents",
            lhs: sh,
            rhs: vec![t],
        });
    }
    let r = g.reshape(rows, &[sh[0] / t, l, l, l, sh[1]])?;
    g.permute(r, &[0, 4, 1, 2, 3])
}

/// Nodes of the composite loss.
#[derive(Clone, Copy, Debug)]
pub struct VqLossTerms {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commit: Var,
}

/// `mse(x, x̂) + w·(mean‖sg[ẑ] − zq‖² + β·mean‖sg[zq] − ẑ‖²)`.
///
/// `zq` should be the codebook lookup itself (not the straight-through
/// copy), so the first regularizer is the only path into the codebook.
pub fn vq_loss<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    x_hat: Var,
    z_hat: Var,
    zq: Var,
    w_codebook: f64,
    beta: f64,
) -> Result<VqLossTerms, GradError> {
    let z_sg = g.stop_gradient(z_hat)?;
    let q_sg = g.stop_gradient(zq)?;
    weighted_terms(g, [x, x_hat, z_hat, zq, z_sg, q_sg], w_codebook, beta)
}

fn weighted_terms<T: Real>(
    g: &mut Graph<T>,
    [x, x_hat, z_hat, zq, z_sg, q_sg]: [Var; 6],
    w_codebook: f64,
    beta: f64,
) -> Result<VqLossTerms, GradError> {
    let recon = g.mse(x, x_hat)?;
    let codebook = g.mse(z_sg, zq)?;
    let commit = g.mse(q_sg, z_hat)?;
    let cw = g.scale(codebook, T::from_f64(w_codebook))?;
    let mw = g.scale(commit, T::from_f64(w_codebook * beta))?;
    let reg = g.add(cw, mw)?;
    let total = g.add(recon, reg)?;
    Ok(VqLossTerms {
        total,
        recon,
        codebook,
        commit,
    })
}

/// Everything built for one training batch.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub loss: VqLossTerms,
    pub z_hat: Var,
    pub zq: Var,
    pub zq_st: Var,
    pub x_hat: Var,
    pub indices: Vec<usize>,
}

/// Values of the non-differentiable pieces of one forward pass: the chosen
/// indices and the latents seen through stop-gradient.
#[derive(Clone, Debug)]
pub struct QuantSnapshot<T: Real> {
    pub indices: Vec<usize>,
    pub z_hat: Array<T>,
    pub zq: Array<T>,
}

impl ForwardPass {
    pub fn snapshot<T: Real>(&self, g: &Graph<T>) -> QuantSnapshot<T> {
        QuantSnapshot {
            indices: self.indices.clone(),
            z_hat: g.value(self.z_hat).clone(),
            zq: g.value(self.zq).clone(),
        }
    }
}

/// Full autoencoder pass on a batch `x: [N, 1, E, E, E]` with loss.
pub fn forward_loss<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &VqvaeConfig,
    x: Array<T>,
    w_codebook: f64,
) -> Result<ForwardPass, GradError> {
    build(g, s, cfg, x, w_codebook, None)
}

/// The same loss with every stop-gradient value and the quantization held
/// at `snap`. At the snapshot point its exact gradient equals the estimator
/// gradient of [`forward_loss`], and unlike the real loss it is smooth, so
/// it can be checked against finite differences.
pub fn frozen_loss<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &VqvaeConfig,
    x: Array<T>,
    w_codebook: f64,
    snap: &QuantSnapshot<T>,
) -> Result<ForwardPass, GradError> {
    build(g, s, cfg, x, w_codebook, Some(snap))
}

fn build<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &VqvaeConfig,
    x: Array<T>,
    w_codebook: f64,
    snap: Option<&QuantSnapshot<T>>,
) -> Result<ForwardPass, GradError> {
    let x = g.constant(x);
    let z = encoder(g, s, cfg, x)?;
    let z_hat = latents_to_rows(g, z)?;
    let table = g.param(s, CODEBOOK)?;
    let indices = match snap {
        Some(sn) => sn.indices.clone(),
        None => nearest(g.value(z_hat).data(), g.value(table).data(), cfg.latent_dim),
    };
    let zq = g.embedding(table, &indices)?;
    let zq_st = match snap {
        Some(sn) => {
            let offset = g.constant(zip_sub(&sn.zq, &sn.z_hat)?);
            g.add(z_hat, offset)?
        }
        None => {
            let v = g.value(zq).clone();
            g.straight_through(z_hat, v)?
        }
    };
    let zq_grid = rows_to_latents(g, zq_st, cfg.latent_edge())?;
    let x_hat = decoder(g, s, cfg, zq_grid)?;
    let loss = match snap {
        Some(sn) => {
            let z_sg = g.constant(sn.z_hat.clone());
            let q_sg = g.constant(sn.zq.clone());
            weighted_terms(g, [x, x_hat, z_hat, zq, z_sg, q_sg], w_codebook, cfg.beta)?
        }
        None => vq_loss(g, x, x_hat, z_hat, zq, w_codebook, cfg.beta)?,
    };
    Ok(ForwardPass {
        loss,
        z_hat,
        zq,
        zq_st,
        x_hat,
        indices,
    })
}

fn zip_sub<T: Real>(a: &Array<T>, b: &Array<T>) -> Result<Array<T>, GradError> {
    if a.shape() != b.shape() {
        return Err(GradError::Shape {
            op: "frozen_loss",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let d = a.data().iter().zip(b.data()).map(|(&p, &q)| p - q).collect();
    Array::from_vec(a.shape(), d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::{grad_check_params, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny() -> VqvaeConfig {
        VqvaeConfig {
            patch_edge: 4,
            enc_channels: vec![2, 4],
            dec_channels: vec![4, 2, 2],
            enc_res_blocks: 1,
            dec_res_blocks: 1,
            groups: 2,
            codebook_size: 4,
            latent_dim: 3,
            batch_size: 2,
            ..VqvaeConfig::desk()
        }
    }

    fn batch(n: usize, edge: usize, seed: u64) -> Array<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * edge * edge * edge;
        let data: Vec<f64> = (0..len).map(|_| f64::from(u8::from(rng.gen_bool(0.3)))).collect();
        Array::from_vec(&[n, 1, edge, edge, edge], data).unwrap()
    }

    #[test]
    fn desk_shapes() {
        let cfg = VqvaeConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s: ParamStore<f32> = init_params(&cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = forward_loss(&mut g, &s, &cfg, batch(2, 16, 1).cast(), 0.02).unwrap();
        assert_eq!(g.shape(p.z_hat), &[16, 32]);
        assert_eq!(g.shape(p.x_hat), &[2, 1, 16, 16, 16]);
        // every parameter is used
        assert_eq!(g.param_bindings().len(), s.len());
    }

    #[test]
    fn hand_evaluated_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array::from_f64(&[2], &[0.0, 1.0]).unwrap());
        let xh = g.constant(Array::from_f64(&[2], &[0.0, 1.0]).unwrap());
        let z = g.input(Array::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let q = g.input(Array::from_f64(&[1, 2], &[0.0, 0.0]).unwrap());
        let l = vq_loss(&mut g, x, xh, z, q, 1.0, 1.0).unwrap();
        assert_eq!(g.value(l.total).item(), 2.0);
        let same = vq_loss(&mut g, x, xh, z, z, 1.0, 1.0).unwrap();
        assert_eq!(g.value(same.total).item(), 0.0);
    }

    #[test]
    fn codebook_untouched_without_weight() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: ParamStore<f64> = init_params(&cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = forward_loss(&mut g, &s, &cfg, batch(2, 4, 2), 0.0).unwrap();
        g.backward(p.loss.total).unwrap();
        let mut acc = s.clone();
        acc.accumulate_grads(&g).unwrap();
        assert!(acc.grad(CODEBOOK).unwrap().data().iter().all(|&v| v == 0.0));
        // while the encoder still learns
        assert!(acc.grad("enc.in.w").unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn straight_through_copies_gradient() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: ParamStore<f64> = init_params(&cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = forward_loss(&mut g, &s, &cfg, batch(2, 4, 5), 0.0).unwrap();
        g.backward(p.loss.recon).unwrap();
        assert_eq!(g.grad(p.z_hat).unwrap(), g.grad(p.zq_st).unwrap());
    }

    #[test]
    fn full_loss_gradcheck() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s: ParamStore<f64> = init_params(&cfg, &mut rng).unwrap();
        let x = batch(2, 4, 7);
        let w = 0.7;
        let mut g = Graph::new();
        let fp = forward_loss(&mut g, &s, &cfg, x.clone(), w).unwrap();
        g.backward(fp.loss.total).unwrap();
        let snap = fp.snapshot(&g);
        let mut real = s.clone();
        real.accumulate_grads(&g).unwrap();

        let mut g2 = Graph::new();
        let fz = frozen_loss(&mut g2, &s, &cfg, x.clone(), w, &snap).unwrap();
        g2.backward(fz.loss.total).unwrap();
        let mut frozen = s.clone();
        frozen.accumulate_grads(&g2).unwrap();
        assert!((g.value(fp.loss.total).item() - g2.value(fz.loss.total).item()).abs() < 1e-12);
        for n in s.names() {
            let (a, b) = (real.grad(n).unwrap().data(), frozen.grad(n).unwrap().data());
            for (p, q) in a.iter().zip(b) {
                assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()), "{n}: {p} vs {q}");
            }
        }

        let names: Vec<String> = s.names().map(str::to_string).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let opts = GradCheckOptions {
            max_elements: Some(6),
            ..GradCheckOptions::default()
        };
        let rep = grad_check_params(
            |g, st| Ok(frozen_loss(g, st, &cfg, x.clone(), w, &snap)?.loss.total),
            &s,
            &names,
            &opts,
        )
        .unwrap();
        assert!(rep.passes(1e-4), "{rep:?}");
    }
}
