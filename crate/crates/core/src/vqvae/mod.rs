//! 3D vector-quantized autoencoder: convolutional encoder, nearest-entry
//! codebook, transposed-convolution decoder and the scheduled training loop.

mod config;
mod model;
mod quantize;
mod train;

pub use config::VqvaeConfig;
pub use model::{
    decoder, encoder, forward_loss, frozen_loss, init_params, latents_to_rows, rows_to_latents, vq_loss, ForwardPass,
    QuantSnapshot, VqLossTerms,
};
pub use quantize::{nearest, quantize, Codebook, LatentGrid};
pub use train::{train_vqvae, EpochStats};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::gradcore::{Array, Checkpoint, GradError, Graph, ParamStore};
use crate::voxcore::{VoxError, Volume3D, PORE, SOLID};
use model::CODEBOOK;

#[derive(Debug, thiserror::Error)]
pub enum VqvaeError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("patch edge {found} does not match config patch_edge {expected}")]
    PatchSize { expected: usize, found: usize },
    #[error("empty codebook")]
    EmptyCodebook,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("token {token} outside codebook of size {size}")]
    BadToken { token: u32, size: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Vox(#[from] VoxError),
}

/// Patches per forward pass when encoding or decoding outside training.
const EVAL_CHUNK: usize = 32;

/// Threshold a raw decoder output into a binary patch: `>= 0.5` is pore.
pub fn binarize(raw: &[f32], edge: usize, voxel_size_um: f32) -> Result<Volume3D, VqvaeError> {
    let data = raw.iter().map(|&v| if v >= 0.5 { PORE } else { SOLID }).collect();
    Ok(Volume3D::new([edge; 3], voxel_size_um, data)?)
}

/// Trained (or freshly initialised) autoencoder weights plus config.
#[derive(Clone, Debug)]
pub struct Vqvae {
    cfg: VqvaeConfig,
    params: ParamStore<f32>,
}

impl Vqvae {
    /// Randomly initialised model.
    pub fn new(cfg: VqvaeConfig, seed: u64) -> Result<Self, VqvaeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&cfg, &mut rng)?;
        Ok(Self { cfg, params })
    }

    /// Wraps existing parameters, checking them against a fresh layout.
    pub fn from_parts(cfg: VqvaeConfig, params: ParamStore<f32>) -> Result<Self, VqvaeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layout: ParamStore<f32> = init_params(&cfg, &mut rng)?;
        if layout.len() != params.len() {
            return Err(VqvaeError::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for name in layout.names() {
            let want = layout.value(name).expect("listed").shape();
            match params.value(name) {
                Some(a) if a.shape() == want => {}
                Some(a) => {
                    return Err(VqvaeError::Checkpoint(format!(
                        "{name}: shape {:?}, expected {want:?}",
                        a.shape()
                    )))
                }
                None => return Err(VqvaeError::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &VqvaeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn codebook(&self) -> Codebook {
        let t = self.params.value(CODEBOOK).expect("codebook present");
        Codebook::new(t.shape()[0], t.shape()[1], t.data().to_vec()).expect("codebook is valid")
    }

    fn check_patch(&self, p: &Volume3D) -> Result<(), VqvaeError> {
        let e = self.cfg.patch_edge;
        if p.dims() != [e; 3] {
            let found = if p.dims().iter().all(|&d| d == p.dims()[0]) {
                p.dims()[0]
            } else {
                *p.dims().iter().max().unwrap_or(&0)
            };
            return Err(VqvaeError::PatchSize { expected: e, found });
        }
        Ok(())
    }

    pub fn encode(&self, patch: &Volume3D) -> Result<LatentGrid, VqvaeError> {
        Ok(self.encode_batch(std::slice::from_ref(patch))?.remove(0))
    }

    /// Encodes patches in eval mode.
    pub fn encode_batch(&self, patches: &[Volume3D]) -> Result<Vec<LatentGrid>, VqvaeError> {
        let refs: Vec<&Volume3D> = patches.iter().collect();
        self.encode_refs(&refs)
    }

    pub(crate) fn encode_refs(&self, patches: &[&Volume3D]) -> Result<Vec<LatentGrid>, VqvaeError> {
        for p in patches {
            self.check_patch(p)?;
        }
        let l = self.cfg.latent_edge();
        let d = self.cfg.latent_dim;
        let t = self.cfg.tokens_per_patch();
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let x = g.constant(patch_batch(chunk, self.cfg.patch_edge));
            let z = encoder(&mut g, &self.params, &self.cfg, x)?;
            let rows = latents_to_rows(&mut g, z)?;
            for v in g.value(rows).data().chunks_exact(t * d) {
                out.push(LatentGrid::new([l; 3], d, v.to_vec())?);
            }
        }
        Ok(out)
    }

    pub fn quantize(&self, z: &LatentGrid) -> Result<(LatentGrid, Vec<u32>), VqvaeError> {
        quantize(z, &self.codebook())
    }

    /// Codebook indices for each patch.
    pub fn tokenize(&self, patches: &[&Volume3D]) -> Result<Vec<Vec<u32>>, VqvaeError> {
        let cb = self.codebook();
        self.encode_refs(patches)?
            .iter()
            .map(|z| Ok(quantize(z, &cb)?.1))
            .collect()
    }

    /// Raw decoder outputs, one `patch_edge³` vector per latent grid.
    pub fn decode_raw(&self, zq: &[LatentGrid]) -> Result<Vec<Vec<f32>>, VqvaeError> {
        let l = self.cfg.latent_edge();
        let d = self.cfg.latent_dim;
        for z in zq {
            if z.spatial_dims() != [l; 3] || z.channels() != d {
                return Err(VqvaeError::Shape(format!(
                    "latent grid {:?}x{} vs decoder input {:?}x{d}",
                    z.spatial_dims(),
                    z.channels(),
                    [l; 3]
                )));
            }
        }
        let vox = self.cfg.patch_edge.pow(3);
        let mut out = Vec::with_capacity(zq.len());
        for chunk in zq.chunks(EVAL_CHUNK) {
            let mut data = Vec::with_capacity(chunk.len() * l * l * l * d);
            for z in chunk {
                data.extend_from_slice(z.values());
            }
            let mut g = Graph::new();
            let rows = g.constant(Array::from_vec(&[chunk.len() * l * l * l, d], data)?);
            let grid = rows_to_latents(&mut g, rows, l)?;
            let xh = decoder(&mut g, &self.params, &self.cfg, grid)?;
            out.extend(g.value(xh).data().chunks_exact(vox).map(<[f32]>::to_vec));
        }
        Ok(out)
    }

    pub fn decode(&self, zq: &LatentGrid, voxel_size_um: f32) -> Result<Volume3D, VqvaeError> {
        let raw = self.decode_raw(std::slice::from_ref(zq))?;
        binarize(&raw[0], self.cfg.patch_edge, voxel_size_um)
    }

    /// Latent grid assembled from codebook entries.
    pub fn lookup(&self, tokens: &[u32]) -> Result<LatentGrid, VqvaeError> {
        let cb = self.codebook();
        if tokens.len() != self.cfg.tokens_per_patch() {
            return Err(VqvaeError::Shape(format!(
                "{} tokens, expected {}",
                tokens.len(),
                self.cfg.tokens_per_patch()
            )));
        }
        let mut values = Vec::with_capacity(tokens.len() * cb.dim());
        for &tok in tokens {
            if tok as usize >= cb.size() {
                return Err(VqvaeError::BadToken {
                    token: tok,
                    size: cb.size(),
                });
            }
            values.extend_from_slice(cb.entry(tok as usize));
        }
        LatentGrid::new([self.cfg.latent_edge(); 3], cb.dim(), values)
    }

    /// Binary patches decoded from token sets.
    pub fn decode_tokens(&self, tokens: &[Vec<u32>], voxel_size_um: f32) -> Result<Vec<Volume3D>, VqvaeError> {
        let grids = tokens.iter().map(|t| self.lookup(t)).collect::<Result<Vec<_>, _>>()?;
        self.decode_raw(&grids)?
            .iter()
            .map(|r| binarize(r, self.cfg.patch_edge, voxel_size_um))
            .collect()
    }

    /// Encode, quantize, decode and binarize.
    pub fn reconstruct(&self, patches: &[&Volume3D]) -> Result<Vec<Volume3D>, VqvaeError> {
        let toks = self.tokenize(patches)?;
        let vs = patches.first().map_or(1.0, |p| p.voxel_size_um());
        self.decode_tokens(&toks, vs)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.params.to_checkpoint();
        let c = &self.cfg;
        let f = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        ck.push_meta("vqvae/patch_edge", &[c.patch_edge as f64]);
        ck.push_meta("vqvae/enc_channels", &f(&c.enc_channels));
        ck.push_meta("vqvae/dec_channels", &f(&c.dec_channels));
        ck.push_meta("vqvae/res_blocks", &[c.enc_res_blocks as f64, c.dec_res_blocks as f64]);
        ck.push_meta("vqvae/groups", &[c.groups as f64]);
        ck.push_meta("vqvae/codebook", &[c.codebook_size as f64, c.latent_dim as f64]);
        ck.push_meta(
            "vqvae/loss",
            &[c.beta, c.cb_weight_initial, c.cb_weight_increment, c.cb_weight_max],
        );
        ck.push_meta("vqvae/train", &[c.epochs as f64, c.batch_size as f64, c.lr]);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, VqvaeError> {
        let get = |k: &str, n: Option<usize>| -> Result<Vec<f64>, VqvaeError> {
            let v = ck
                .meta(&format!("vqvae/{k}"))
                .ok_or_else(|| VqvaeError::Checkpoint(format!("not a vqvae checkpoint (missing {k})")))?;
            if n.is_some_and(|n| v.len() != n) {
                return Err(VqvaeError::Checkpoint(format!("bad length for {k}")));
            }
            Ok(v)
        };
        let us = |v: Vec<f64>| v.into_iter().map(|x| x as usize).collect::<Vec<_>>();
        let res = us(get("res_blocks", Some(2))?);
        let cb = us(get("codebook", Some(2))?);
        let loss = get("loss", Some(4))?;
        let train = get("train", Some(3))?;
        let cfg = VqvaeConfig {
            patch_edge: get("patch_edge", Some(1))?[0] as usize,
            enc_channels: us(get("enc_channels", None)?),
            dec_channels: us(get("dec_channels", None)?),
            enc_res_blocks: res[0],
            dec_res_blocks: res[1],
            groups: get("groups", Some(1))?[0] as usize,
            codebook_size: cb[0],
            latent_dim: cb[1],
            beta: loss[0],
            cb_weight_initial: loss[1],
            cb_weight_increment: loss[2],
            cb_weight_max: loss[3],
            epochs: train[0] as usize,
            batch_size: train[1] as usize,
            lr: train[2],
        };
        cfg.validate()?;
        let params = ParamStore::from_checkpoint(ck)?;
        Self::from_parts(cfg, params)
    }
}

/// Stacks binary patches into `[N, 1, E, E, E]`.
pub(crate) fn patch_batch<T: crate::gradcore::Real>(patches: &[&Volume3D], edge: usize) -> Array<T> {
    let mut data = Vec::with_capacity(patches.len() * edge.pow(3));
    for p in patches {
        data.extend(p.data().iter().map(|&v| T::from_f64(f64::from(v))));
    }
    Array::from_vec(&[patches.len(), 1, edge, edge, edge], data).expect("patch sizes checked")
}
