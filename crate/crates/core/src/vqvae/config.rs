use super::VqvaeError;

/// Architecture and training settings for the autoencoder.
///
/// `enc_channels[0]` is the width of the stem convolution at full
/// resolution; each further entry is the width after one stride-2
/// downsampling stage. `dec_channels` mirrors it: entry 0 is the width at the
/// latent resolution, entries `1..=stages` follow each upsampling stage, and
/// the last entry is the width of the full-resolution output head.
#[derive(Clone, Debug, PartialEq)]
pub struct VqvaeConfig {
    pub patch_edge: usize,
    pub enc_channels: Vec<usize>,
    pub dec_channels: Vec<usize>,
    pub enc_res_blocks: usize,
    pub dec_res_blocks: usize,
    pub groups: usize,
    /// Codebook size K.
    pub codebook_size: usize,
    /// Latent dimensionality D.
    pub latent_dim: usize,
    /// Commitment weight.
    pub beta: f64,
    pub cb_weight_initial: f64,
    pub cb_weight_increment: f64,
    pub cb_weight_max: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl VqvaeConfig {
    /// Desk-scale defaults: 16³ patches, eight tokens per patch.
    pub fn desk() -> Self {
        Self {
            patch_edge: 16,
            enc_channels: vec![8, 16, 32, 32],
            dec_channels: vec![32, 32, 16, 8, 8],
            enc_res_blocks: 1,
            dec_res_blocks: 1,
            groups: 4,
            codebook_size: 128,
            latent_dim: 32,
            beta: 1.0,
            cb_weight_initial: 0.02,
            cb_weight_increment: 0.02,
            cb_weight_max: 2.0,
            epochs: 25,
            batch_size: 8,
            lr: 1e-3,
        }
    }

    /// The full-size configuration (64³ patches, 64 tokens per patch).
    pub fn paper() -> Self {
        Self {
            patch_edge: 64,
            enc_channels: vec![16, 64, 128, 256, 512],
            dec_channels: vec![512, 256, 256, 64, 16, 16],
            enc_res_blocks: 2,
            dec_res_blocks: 3,
            groups: 16,
            codebook_size: 3000,
            latent_dim: 256,
            ..Self::desk()
        }
    }

    pub fn stages(&self) -> usize {
        self.enc_channels.len().saturating_sub(1)
    }

    /// Latent grid edge, `patch_edge / 2^stages`.
    pub fn latent_edge(&self) -> usize {
        self.patch_edge >> self.stages()
    }

    /// Tokens per patch.
    pub fn tokens_per_patch(&self) -> usize {
        self.latent_edge().pow(3)
    }

    /// Codebook loss weight for a zero-based epoch.
    pub fn codebook_weight(&self, epoch: usize) -> f64 {
        (self.cb_weight_initial + self.cb_weight_increment * epoch as f64).min(self.cb_weight_max)
    }

    pub fn validate(&self) -> Result<(), VqvaeError> {
        let bad = |m: String| Err(VqvaeError::Config(m));
        let s = self.stages();
        if s == 0 {
            return bad("enc_channels needs at least two entries".into());
        }
        if self.dec_channels.len() != s + 2 {
            return bad(format!(
                "dec_channels needs {} entries for {s} stages, got {}",
                s + 2,
                self.dec_channels.len()
            ));
        }
        if self.patch_edge == 0 || self.patch_edge % (1 << s) != 0 {
            return bad(format!("patch_edge {} not divisible by 2^{s}", self.patch_edge));
        }
        if self.groups == 0 {
            return bad("groups must be positive".into());
        }
        for &c in self.enc_channels.iter().chain(&self.dec_channels) {
            if c == 0 || c % self.groups != 0 {
                return bad(format!("channel width {c} not a positive multiple of groups {}", self.groups));
            }
        }
        if self.codebook_size == 0 || self.latent_dim == 0 {
            return bad("codebook_size and latent_dim must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if ![self.beta, self.cb_weight_initial, self.cb_weight_increment, self.cb_weight_max]
            .into_iter()
            .all(finite_nonneg)
        {
            return bad("loss weights must be finite and non-negative".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_has_eight_tokens() {
        let c = VqvaeConfig::desk();
        c.validate().unwrap();
        assert_eq!(c.latent_edge(), 2);
        assert_eq!(c.tokens_per_patch(), 8);
    }

    #[test]
    fn paper_has_sixty_four_tokens() {
        let c = VqvaeConfig::paper();
        c.validate().unwrap();
        assert_eq!(c.tokens_per_patch(), 64);
    }

    #[test]
    fn schedule_values() {
        let c = VqvaeConfig::desk();
        assert!((c.codebook_weight(0) - 0.02).abs() < 1e-15);
        assert!((c.codebook_weight(24) - 0.5).abs() < 1e-12);
        assert_eq!(c.codebook_weight(10_000), 2.0);
    }

    #[test]
    fn inconsistent_stages_rejected() {
        let mut c = VqvaeConfig::desk();
        c.patch_edge = 12;
        assert!(c.validate().is_err());
        let mut c = VqvaeConfig::desk();
        c.dec_channels.pop();
        assert!(c.validate().is_err());
    }
}
