use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MaskKind, SeqError, TransformerConfig};
use crate::gradcore::{Array, Checkpoint, GradError, Graph, ParamStore, Real, Var};

/// Large negative logit standing in for a masked position.
const MASKED: f64 = -1e30;

/// GPT-style initialisation: small normal embeddings, `±1/sqrt(fan_in)`
/// linear layers, unit layer-norm gains.
pub fn init_params<T: Real>(cfg: &TransformerConfig, rng: &mut impl Rng) -> Result<ParamStore<T>, SeqError> {
    cfg.validate()?;
    let (c, v, cw) = (cfg.width, cfg.vocab, cfg.cond_width);
    let mut s = ParamStore::new();
    s.insert_normal("tok_emb", &[v, c], 0.02, rng)?;
    s.insert_normal("pos_emb", &[cfg.block_size, c], 0.02, rng)?;
    linear_params(&mut s, "cond.fc", 1, cw, rng)?;
    linear_params(&mut s, "cond.proj", cw, c, rng)?;
    for l in 0..cfg.layers {
        norm_params(&mut s, &format!("h{l}.ln1"), c)?;
        for m in ["q", "k", "v", "proj"] {
            linear_params(&mut s, &format!("h{l}.attn.{m}"), c, c, rng)?;
        }
        norm_params(&mut s, &format!("h{l}.ln2"), c)?;
        linear_params(&mut s, &format!("h{l}.mlp.fc"), c, 4 * c, rng)?;
        linear_params(&mut s, &format!("h{l}.mlp.proj"), 4 * c, c, rng)?;
    }
    norm_params(&mut s, "ln_f", c)?;
    s.insert_uniform("head.w", &[c, v], c, rng)?;
    Ok(s)
}

fn linear_params<T: Real>(
    s: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Result<(), GradError> {
    s.insert_uniform(&format!("{name}.w"), &[fan_in, fan_out], fan_in, rng)?;
    s.insert_uniform(&format!("{name}.b"), &[fan_out], fan_in, rng)
}

fn norm_params<T: Real>(s: &mut ParamStore<T>, name: &str, c: usize) -> Result<(), GradError> {
    s.insert_full(&format!("{name}.g"), &[c], 1.0)?;
    s.insert_full(&format!("{name}.b"), &[c], 0.0)
}

fn linear<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, name: &str, x: Var) -> Result<Var, GradError> {
    let w = g.param(s, &format!("{name}.w"))?;
    let b = g.param(s, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_bias(y, b, 1)
}

fn norm<T: Real>(g: &mut Graph<T>, s: &ParamStore<T>, name: &str, x: Var) -> Result<Var, GradError> {
    let gamma = g.param(s, &format!("{name}.g"))?;
    let beta = g.param(s, &format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta, 1e-5)
}

/// `len × len` mask, true where attention is blocked.
pub(crate) fn blocked_mask(kind: MaskKind, len: usize, set_size: usize) -> Arc<Vec<bool>> {
    let mut m = Vec::with_capacity(len * len);
    for p in 0..len {
        for q in 0..len {
            m.push(match kind {
                MaskKind::Token => q > p,
                MaskKind::SetBlock => q / set_size > p / set_size,
            });
        }
    }
    Arc::new(m)
}

/// Scaled dot-product attention over `[B, L, d_k]` inputs. `blocked` is an
/// `L × L` mask (true = may not attend); every row must leave at least one
/// position open.
pub fn attention<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var, blocked: Arc<Vec<bool>>) -> Result<Var, SeqError> {
    attend(g, q, k, v, blocked, 0.0, 0)
}

fn attend<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    blocked: Arc<Vec<bool>>,
    dropout: f64,
    seed: u64,
) -> Result<Var, SeqError> {
    let (qs, ks, vs) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if qs.len() != 3 || qs != ks || vs.len() != 3 || vs[..2] != qs[..2] {
        return Err(SeqError::Shape(format!("attention q {qs:?}, k {ks:?}, v {vs:?}")));
    }
    let len = qs[1];
    if blocked.len() != len * len || (0..len).any(|p| (0..len).all(|j| blocked[p * len + j])) {
        return Err(SeqError::Shape(format!("attention mask of {} for {len} positions", blocked.len())));
    }
    let kt = g.permute(k, &[0, 2, 1])?;
    let scores = g.batch_matmul(q, kt)?;
    let scores = g.scale(scores, T::from_f64(1.0 / (qs[2] as f64).sqrt()))?;
    let scores = g.masked_fill(scores, blocked, T::from_f64(MASKED))?;
    let att = g.softmax(scores)?;
    let att = g.dropout(att, dropout, seed)?;
    Ok(g.batch_matmul(att, v)?)
}

/// Token embedding + learned position embedding + projected conditioning,
/// one row per flat position: `[len, width]`.
pub fn embed<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &TransformerConfig,
    tokens: &[u32],
    cond: &[f32],
    positions: &[usize],
) -> Result<Var, SeqError> {
    if tokens.len() != cond.len() || tokens.len() != positions.len() || tokens.is_empty() {
        return Err(SeqError::Shape(format!(
            "{} tokens, {} conditioning values, {} positions",
            tokens.len(),
            cond.len(),
            positions.len()
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(SeqError::BadToken {
            token: bad,
            vocab: cfg.vocab,
        });
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= cfg.block_size) {
        return Err(SeqError::TooLong {
            len: p + 1,
            block: cfg.block_size,
        });
    }
    let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let tok_table = g.param(s, "tok_emb")?;
    let tok = g.embedding(tok_table, &idx)?;
    let pos_table = g.param(s, "pos_emb")?;
    let pos = g.embedding(pos_table, positions)?;
    let c = g.constant(Array::from_vec(
        &[cond.len(), 1],
        cond.iter().map(|&v| T::from_f64(v as f64)).collect(),
    )?);
    let c = linear(g, s, "cond.fc", c)?;
    let c = g.gelu(c)?;
    let c = linear(g, s, "cond.proj", c)?;
    let e = g.add(tok, pos)?;
    Ok(g.add(e, c)?)
}

/// Logits `[B·L, vocab]` for a batch of equal-length input sequences.
/// Dropout masks are derived from `seed` and only active in training graphs.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &TransformerConfig,
    inputs: &[&[u32]],
    conds: &[&[f32]],
    seed: u64,
) -> Result<Var, SeqError> {
    let b = inputs.len();
    let len = inputs.first().map_or(0, |x| x.len());
    if b == 0 || len == 0 || inputs.iter().any(|x| x.len() != len) {
        return Err(SeqError::Shape("batch of empty or ragged sequences".into()));
    }
    if conds.len() != b || conds.iter().any(|c| c.len() != len) {
        return Err(SeqError::Shape("conditioning length differs from input".into()));
    }
    if len > cfg.block_size {
        return Err(SeqError::TooLong {
            len,
            block: cfg.block_size,
        });
    }
    let (c, h, dk) = (cfg.width, cfg.heads, cfg.head_dim());
    let tokens: Vec<u32> = inputs.iter().flat_map(|x| x.iter().copied()).collect();
    let cond: Vec<f32> = conds.iter().flat_map(|x| x.iter().copied()).collect();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = embed(g, s, cfg, &tokens, &cond, &positions)?;
    x = g.dropout(x, cfg.dropout, rng.gen())?;
    let blocked = blocked_mask(cfg.mask, len, cfg.set_size);
    let split = |g: &mut Graph<T>, y: Var| -> Result<Var, GradError> {
        let y = g.reshape(y, &[b, len, h, dk])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        g.reshape(y, &[b * h, len, dk])
    };
    for l in 0..cfg.layers {
        let a = norm(g, s, &format!("h{l}.ln1"), x)?;
        let q = linear(g, s, &format!("h{l}.attn.q"), a)?;
        let k = linear(g, s, &format!("h{l}.attn.k"), a)?;
        let v = linear(g, s, &format!("h{l}.attn.v"), a)?;
        let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);
        let y = attend(g, q, k, v, blocked.clone(), cfg.dropout, rng.gen())?;
        let y = g.reshape(y, &[b, h, len, dk])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[b * len, c])?;
        let y = linear(g, s, &format!("h{l}.attn.proj"), y)?;
        let y = g.dropout(y, cfg.dropout, rng.gen())?;
        x = g.add(x, y)?;

        let m = norm(g, s, &format!("h{l}.ln2"), x)?;
        let m = linear(g, s, &format!("h{l}.mlp.fc"), m)?;
        let m = g.gelu(m)?;
        let m = linear(g, s, &format!("h{l}.mlp.proj"), m)?;
        let m = g.dropout(m, cfg.dropout, rng.gen())?;
        x = g.add(x, m)?;
    }
    let x = norm(g, s, "ln_f", x)?;
    let head = g.param(s, "head.w")?;
    Ok(g.matmul(x, head)?)
}

/// Mean cross-entropy of `logits: [P, vocab]` against `target` over all P
/// positions.
pub fn multi_token_loss<T: Real>(g: &mut Graph<T>, logits: Var, target: &[u32]) -> Result<Var, SeqError> {
    let t: Vec<usize> = target.iter().map(|&x| x as usize).collect();
    Ok(g.cross_entropy(logits, &t)?)
}

/// Transformer weights plus config.
#[derive(Clone, Debug)]
pub struct Transformer {
    cfg: TransformerConfig,
    params: ParamStore<f32>,
}

impl Transformer {
    pub fn new(cfg: TransformerConfig, seed: u64) -> Result<Self, SeqError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&cfg, &mut rng)?;
        Ok(Self { cfg, params })
    }

    /// Wraps existing parameters, checking them against a fresh layout.
    pub fn from_parts(cfg: TransformerConfig, params: ParamStore<f32>) -> Result<Self, SeqError> {
        let layout: ParamStore<f32> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        if layout.len() != params.len() {
            return Err(SeqError::Checkpoint(format!(
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
                    return Err(SeqError::Checkpoint(format!(
                        "{name}: shape {:?}, expected {want:?}",
                        a.shape()
                    )))
                }
                None => return Err(SeqError::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    /// Eval-mode logits `[len, vocab]` for one sequence.
    pub fn logits(&self, input: &[u32], cond: &[f32]) -> Result<Array<f32>, SeqError> {
        let mut g = Graph::new();
        let out = forward(&mut g, &self.params, &self.cfg, &[input], &[cond], 0)?;
        Ok(g.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.params.to_checkpoint();
        let c = &self.cfg;
        let mask = match c.mask {
            MaskKind::Token => 0.0,
            MaskKind::SetBlock => 1.0,
        };
        ck.push_meta(
            "seq/shape",
            &[c.set_size, c.block_size, c.vocab, c.layers, c.heads, c.width, c.cond_width].map(|v| v as f64),
        );
        ck.push_meta("seq/dropout_mask", &[c.dropout, mask]);
        ck.push_meta("seq/train", &[c.epochs as f64, c.batch_size as f64, c.lr]);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, SeqError> {
        let get = |k: &str, n: usize| -> Result<Vec<f64>, SeqError> {
            let v = ck
                .meta(&format!("seq/{k}"))
                .ok_or_else(|| SeqError::Checkpoint(format!("not a transformer checkpoint (missing {k})")))?;
            if v.len() != n {
                return Err(SeqError::Checkpoint(format!("bad length for {k}")));
            }
            Ok(v)
        };
        let sh: Vec<usize> = get("shape", 7)?.into_iter().map(|v| v as usize).collect();
        let dm = get("dropout_mask", 2)?;
        let tr = get("train", 3)?;
        let cfg = TransformerConfig {
            set_size: sh[0],
            block_size: sh[1],
            vocab: sh[2],
            sos: sh[2].saturating_sub(1) as u32,
            layers: sh[3],
            heads: sh[4],
            width: sh[5],
            cond_width: sh[6],
            // stored as f32
            dropout: (dm[0] as f32) as f64,
            mask: if dm[1] == 0.0 { MaskKind::Token } else { MaskKind::SetBlock },
            epochs: tr[0] as usize,
            batch_size: tr[1] as usize,
            lr: tr[2],
        };
        cfg.validate()?;
        Self::from_parts(cfg, ParamStore::from_checkpoint(ck)?)
    }
}
