//! Decoder-only transformer over flattened token-set sequences, conditioned
//! on per-set porosity.

mod config;
mod model;
mod sample;
mod train;

pub use config::{MaskKind, TransformerConfig};
pub use model::{attention, embed, forward, init_params, multi_token_loss, Transformer};
pub use sample::sample_set;
pub use train::train_transformer;

use std::io::{Read, Write};

use crate::gradcore::GradError;

#[derive(Debug, thiserror::Error)]
pub enum SeqError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("traversal order violated")]
    TraversalOrder,
    #[error("token {token} outside vocabulary of size {vocab}")]
    BadToken { token: u32, vocab: usize },
    #[error("sequence of {len} positions exceeds block size {block}")]
    TooLong { len: usize, block: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("conditioning value {0} outside [0, 1]")]
    BadCond(f32),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("token file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Grad(#[from] GradError),
}

/// The t tokens of one subvolume, its grid position and porosity.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub tokens: Vec<u32>,
    pub coord: [usize; 3],
    pub cond: f32,
}

/// An ordered run of token sets, all of the same size t.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    sets: Vec<TokenSet>,
}

impl SequenceSample {
    /// Checks set sizes, conditioning range and that coordinates strictly
    /// increase lexicographically (last axis fastest).
    pub fn new(sets: Vec<TokenSet>) -> Result<Self, SeqError> {
        let t = sets.first().map(|s| s.tokens.len()).ok_or(SeqError::EmptyDataset)?;
        if t == 0 {
            return Err(SeqError::Shape("empty token set".into()));
        }
        for s in &sets {
            if s.tokens.len() != t {
                return Err(SeqError::Shape(format!("token sets of size {t} and {}", s.tokens.len())));
            }
            if !(0.0..=1.0).contains(&s.cond) {
                return Err(SeqError::BadCond(s.cond));
            }
        }
        if sets.windows(2).any(|w| w[0].coord >= w[1].coord) {
            return Err(SeqError::TraversalOrder);
        }
        Ok(Self { sets })
    }

    pub fn sets(&self) -> &[TokenSet] {
        &self.sets
    }

    /// Number of sets n.
    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Tokens per set t.
    pub fn set_size(&self) -> usize {
        self.sets[0].tokens.len()
    }

    /// SOS set followed by every set but the last.
    pub fn input(&self, sos: u32) -> Vec<u32> {
        let t = self.set_size();
        let mut v = vec![sos; t];
        for s in &self.sets[..self.sets.len() - 1] {
            v.extend_from_slice(&s.tokens);
        }
        v
    }

    pub fn target(&self) -> Vec<u32> {
        self.sets.iter().flat_map(|s| s.tokens.iter().copied()).collect()
    }

    /// Each set's conditioning value repeated t times.
    pub fn conditioning(&self) -> Vec<f32> {
        let t = self.set_size();
        self.sets.iter().flat_map(|s| std::iter::repeat(s.cond).take(t)).collect()
    }
}

const MAGIC: &[u8; 4] = b"PTK1";

/// Writes samples in the `PTK1` token format (little endian).
pub fn write_token_file(samples: &[SequenceSample], w: &mut impl Write) -> Result<(), SeqError> {
    w.write_all(MAGIC)?;
    w.write_all(&u32::try_from(samples.len()).map_err(|_| SeqError::Format("too many samples".into()))?.to_le_bytes())?;
    for s in samples {
        let n = u16::try_from(s.len()).map_err(|_| SeqError::Format("too many sets".into()))?;
        let t = u16::try_from(s.set_size()).map_err(|_| SeqError::Format("set too large".into()))?;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(&t.to_le_bytes())?;
        for tok in s.target() {
            w.write_all(&tok.to_le_bytes())?;
        }
        for set in s.sets() {
            w.write_all(&set.cond.to_le_bytes())?;
        }
        for set in s.sets() {
            for c in set.coord {
                let c = u16::try_from(c).map_err(|_| SeqError::Format(format!("coordinate {c} exceeds u16")))?;
                w.write_all(&c.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_token_file(r: &mut impl Read) -> Result<Vec<SequenceSample>, SeqError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(SeqError::Format("bad magic".into()));
    }
    let count = cur.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let n = cur.u16()? as usize;
        let t = cur.u16()? as usize;
        let mut tokens = Vec::with_capacity(n * t);
        for _ in 0..n * t {
            tokens.push(cur.u32()?);
        }
        let mut conds = Vec::with_capacity(n);
        for _ in 0..n {
            conds.push(f32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes")));
        }
        let mut sets = Vec::with_capacity(n);
        for (i, cond) in conds.into_iter().enumerate() {
            let coord = [cur.u16()? as usize, cur.u16()? as usize, cur.u16()? as usize];
            sets.push(TokenSet {
                tokens: tokens[i * t..(i + 1) * t].to_vec(),
                coord,
                cond,
            });
        }
        out.push(SequenceSample::new(sets)?);
    }
    if cur.pos != bytes.len() {
        return Err(SeqError::Format("trailing bytes".into()));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SeqError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| SeqError::Format("truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, SeqError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, SeqError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
