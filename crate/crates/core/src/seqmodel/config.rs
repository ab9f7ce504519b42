use super::SeqError;

/// Which earlier input positions a position may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    /// Lower-triangular over flat positions.
    Token,
    /// Every position sees its whole input set and all earlier ones.
    SetBlock,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    /// Tokens per set t.
    pub set_size: usize,
    /// Attention window in positions, a multiple of `set_size`.
    pub block_size: usize,
    /// Codebook size plus one for the SOS token.
    pub vocab: usize,
    pub sos: u32,
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub cond_width: usize,
    pub dropout: f64,
    pub mask: MaskKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl TransformerConfig {
    /// Laptop-scale defaults for a 128-entry codebook and 8 tokens per set.
    pub fn desk() -> Self {
        Self {
            set_size: 8,
            block_size: 64,
            vocab: 129,
            sos: 128,
            layers: 4,
            heads: 4,
            width: 64,
            cond_width: 16,
            dropout: 0.01,
            mask: MaskKind::Token,
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
        }
    }

    pub fn paper() -> Self {
        Self {
            set_size: 64,
            block_size: 512,
            vocab: 3001,
            sos: 3000,
            layers: 12,
            heads: 12,
            width: 1080,
            cond_width: 100,
            dropout: 0.01,
            mask: MaskKind::Token,
            epochs: 50,
            batch_size: 32,
            lr: 2e-4,
        }
    }

    /// Sets per attention window w.
    pub fn sets_per_window(&self) -> usize {
        self.block_size / self.set_size
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Codebook size K (vocabulary without SOS).
    pub fn codebook_size(&self) -> usize {
        self.vocab - 1
    }

    pub fn validate(&self) -> Result<(), SeqError> {
        let bad = |m: String| Err(SeqError::Config(m));
        if self.set_size == 0 || self.block_size == 0 || self.block_size % self.set_size != 0 {
            return bad(format!(
                "block size {} must be a positive multiple of set size {}",
                self.block_size, self.set_size
            ));
        }
        if self.heads == 0 || self.width == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.vocab < 2 || self.sos as usize != self.vocab - 1 {
            return bad(format!("SOS {} must be the last of {} vocabulary entries", self.sos, self.vocab));
        }
        if self.layers == 0 || self.cond_width == 0 {
            return bad("layers and cond width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return bad("batch size and learning rate must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_window_and_head_dim() {
        let c = TransformerConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.block_size, c.set_size * 8);
        assert_eq!(c.block_size, 64);
        assert_eq!(c.head_dim(), 16);
        assert_eq!(c.codebook_size(), 128);
    }

    #[test]
    fn paper_window() {
        let c = TransformerConfig::paper();
        c.validate().unwrap();
        assert_eq!(c.block_size, 512);
        assert_eq!(c.sets_per_window(), 8);
        assert_eq!(c.vocab, 3001);
        assert_eq!(c.sos, 3000);
    }

    #[test]
    fn inconsistent_configs_rejected() {
        let base = TransformerConfig::desk();
        for c in [
            TransformerConfig { block_size: 60, ..base.clone() },
            TransformerConfig { heads: 3, ..base.clone() },
            TransformerConfig { sos: 3, ..base.clone() },
            TransformerConfig { dropout: 1.0, ..base.clone() },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
