//! `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, no sections or nesting.
//! Every key is optional; missing keys take the desk-scale defaults.
//! Unknown keys, repeated keys and out-of-range values are rejected before
//! any command does work.
//!
//! | key | default |
//! |---|---|
//! | `seed` | 7 |
//! | `out` | `out` |
//! | `data.dir` | `<out>/data` |
//! | `data.volumes` | 32 |
//! | `data.grid` | `2,2,2` |
//! | `data.block_size` | 16 |
//! | `data.corr_len` | 8 |
//! | `data.porosity_min`, `data.porosity_max` | 0.1, 0.4 |
//! | `data.crop_stride` | `vqvae.patch_edge` |
//! | `vqvae.*` | every [`VqvaeConfig`] field; channel lists are comma separated |
//! | `transformer.*` | `block_size layers heads width cond_width dropout mask epochs batch_size lr` |
//! | `encode.window` | `2,2,2` |
//! | `assemble.grid` | `2,2,2` |
//! | `assemble.porosity` | 0.25 |
//! | `assemble.grid_file` | unset; overrides `assemble.grid` and `assemble.porosity` |
//! | `assemble.window` | `2,2,2` |
//! | `assemble.temperature` | 1.0 |
//! | `evaluate.volume` | `<out>/assembled.vox` |
//! | `evaluate.reference` | unset |
//! | `evaluate.h_max`, `evaluate.n_samples` | 8, 20000 |
//! | `evaluate.kr_steps`, `evaluate.kr_axis` | 11, 0 |
//! | `evaluate.block_size` | 16 |
//! | `fluid.*` | `mu_w mu_nw rho_w rho_nw gravity alpha dp` |
//!
//! The transformer's set size, vocabulary and start token follow from the
//! autoencoder: `t = latent_edge³`, `V = K + 1`, `sos = K`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::CliError;
use crate::petrosim::FluidSpec;
use crate::seqmodel::{MaskKind, TransformerConfig};
use crate::vqvae::VqvaeConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Where generated volumes live.
    pub dir: PathBuf,
    pub volumes: usize,
    /// Porosity blocks per volume along each axis.
    pub grid: [usize; 3],
    pub block_size: usize,
    pub corr_len: usize,
    pub porosity_min: f32,
    pub porosity_max: f32,
    /// Offset between autoencoder training crops; `patch_edge` tiles without overlap.
    pub crop_stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssembleConfig {
    pub grid: [usize; 3],
    pub porosity: f32,
    pub grid_file: Option<PathBuf>,
    pub window: [usize; 3],
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluateConfig {
    pub volume: PathBuf,
    pub reference: Option<PathBuf>,
    pub h_max: usize,
    pub n_samples: usize,
    pub kr_steps: usize,
    pub kr_axis: usize,
    pub block_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub vqvae: VqvaeConfig,
    pub transformer: TransformerConfig,
    /// Sets per tokenized training sample, as a block of the volume's patch grid.
    pub encode_window: [usize; 3],
    pub assemble: AssembleConfig,
    pub evaluate: EvaluateConfig,
    pub fluid: FluidSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults are valid")
    }
}

fn bad(field: &str, msg: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.to_string(),
        msg: msg.into(),
    }
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(bad(&format!("line {}", n + 1), "expected `key = value`"));
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(bad(&format!("line {}", n + 1), "empty key"));
            }
            if map.insert(k.to_string(), (n + 1, v.to_string())).is_some() {
                return Err(bad(k, "set more than once"));
            }
        }
        Ok(Self { map })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|(_, v)| v)
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, CliError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| bad(key, format!("cannot parse {v:?}"))),
        }
    }

    fn list(&mut self, key: &str, default: Vec<usize>) -> Result<Vec<usize>, CliError> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|p| p.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad(key, format!("expected comma-separated integers, got {v:?}"))),
        }
    }

    fn triple(&mut self, key: &str, default: [usize; 3]) -> Result<[usize; 3], CliError> {
        let v = self.list(key, default.to_vec())?;
        let t: [usize; 3] = v
            .try_into()
            .map_err(|_| bad(key, "expected three comma-separated integers"))?;
        if t.contains(&0) {
            return Err(bad(key, "entries must be positive"));
        }
        Ok(t)
    }

    fn path(&mut self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    fn finish(self) -> Result<(), CliError> {
        match self.map.into_iter().next() {
            Some((k, (line, _))) => Err(bad(&k, format!("unknown key on line {line}"))),
            None => Ok(()),
        }
    }
}

fn positive(field: &str, v: usize) -> Result<usize, CliError> {
    if v == 0 {
        return Err(bad(field, "must be positive"));
    }
    Ok(v)
}

fn unit(field: &str, v: f32) -> Result<f32, CliError> {
    if !(0.0..=1.0).contains(&v) {
        return Err(bad(field, format!("{v} outside [0, 1]")));
    }
    Ok(v)
}

impl RunConfig {
    /// Parses and validates config text.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut e = Entries::parse(text)?;
        let seed = e.get("seed", 7u64)?;
        let out = e.path("out").unwrap_or_else(|| PathBuf::from("out"));

        let data = DataConfig {
            dir: e.path("data.dir").unwrap_or_else(|| out.join("data")),
            volumes: positive("data.volumes", e.get("data.volumes", 32)?)?,
            grid: e.triple("data.grid", [2, 2, 2])?,
            block_size: positive("data.block_size", e.get("data.block_size", 16)?)?,
            corr_len: positive("data.corr_len", e.get("data.corr_len", 8)?)?,
            porosity_min: unit("data.porosity_min", e.get("data.porosity_min", 0.1)?)?,
            porosity_max: unit("data.porosity_max", e.get("data.porosity_max", 0.4)?)?,
            crop_stride: 0,
        };
        if data.porosity_min > data.porosity_max {
            return Err(bad("data.porosity_min", "exceeds data.porosity_max"));
        }

        let d = VqvaeConfig::desk();
        let vqvae = VqvaeConfig {
            patch_edge: e.get("vqvae.patch_edge", d.patch_edge)?,
            enc_channels: e.list("vqvae.enc_channels", d.enc_channels)?,
            dec_channels: e.list("vqvae.dec_channels", d.dec_channels)?,
            enc_res_blocks: e.get("vqvae.enc_res_blocks", d.enc_res_blocks)?,
            dec_res_blocks: e.get("vqvae.dec_res_blocks", d.dec_res_blocks)?,
            groups: e.get("vqvae.groups", d.groups)?,
            codebook_size: e.get("vqvae.codebook_size", d.codebook_size)?,
            latent_dim: e.get("vqvae.latent_dim", d.latent_dim)?,
            beta: e.get("vqvae.beta", d.beta)?,
            cb_weight_initial: e.get("vqvae.cb_weight_initial", d.cb_weight_initial)?,
            cb_weight_increment: e.get("vqvae.cb_weight_increment", d.cb_weight_increment)?,
            cb_weight_max: e.get("vqvae.cb_weight_max", d.cb_weight_max)?,
            epochs: e.get("vqvae.epochs", d.epochs)?,
            batch_size: e.get("vqvae.batch_size", d.batch_size)?,
            lr: e.get("vqvae.lr", d.lr)?,
        };
        vqvae.validate().map_err(|err| bad("vqvae", err.to_string()))?;
        let mut data = data;
        data.crop_stride = positive("data.crop_stride", e.get("data.crop_stride", vqvae.patch_edge)?)?;

        let t = TransformerConfig::desk();
        let mask = match e.raw("transformer.mask").as_deref() {
            None => t.mask,
            Some("token") => MaskKind::Token,
            Some("set_block") => MaskKind::SetBlock,
            Some(other) => return Err(bad("transformer.mask", format!("expected token or set_block, got {other:?}"))),
        };
        let k = vqvae.codebook_size;
        let transformer = TransformerConfig {
            set_size: vqvae.tokens_per_patch(),
            block_size: e.get("transformer.block_size", t.block_size)?,
            vocab: k + 1,
            sos: k as u32,
            layers: e.get("transformer.layers", t.layers)?,
            heads: e.get("transformer.heads", t.heads)?,
            width: e.get("transformer.width", t.width)?,
            cond_width: e.get("transformer.cond_width", t.cond_width)?,
            dropout: e.get("transformer.dropout", t.dropout)?,
            mask,
            epochs: e.get("transformer.epochs", t.epochs)?,
            batch_size: e.get("transformer.batch_size", t.batch_size)?,
            lr: e.get("transformer.lr", t.lr)?,
        };
        transformer.validate().map_err(|err| bad("transformer", err.to_string()))?;

        let encode_window = e.triple("encode.window", [2, 2, 2])?;
        let assemble = AssembleConfig {
            grid: e.triple("assemble.grid", [2, 2, 2])?,
            porosity: unit("assemble.porosity", e.get("assemble.porosity", 0.25)?)?,
            grid_file: e.path("assemble.grid_file"),
            window: e.triple("assemble.window", [2, 2, 2])?,
            temperature: e.get("assemble.temperature", 1.0)?,
        };
        let evaluate = EvaluateConfig {
            volume: e.path("evaluate.volume").unwrap_or_else(|| out.join("assembled.vox")),
            reference: e.path("evaluate.reference"),
            h_max: e.get("evaluate.h_max", 8)?,
            n_samples: positive("evaluate.n_samples", e.get("evaluate.n_samples", 20_000)?)?,
            kr_steps: e.get("evaluate.kr_steps", 11)?,
            kr_axis: e.get("evaluate.kr_axis", 0)?,
            block_size: positive("evaluate.block_size", e.get("evaluate.block_size", 16)?)?,
        };
        let f = FluidSpec::default();
        let fluid = FluidSpec {
            mu_w: e.get("fluid.mu_w", f.mu_w)?,
            mu_nw: e.get("fluid.mu_nw", f.mu_nw)?,
            rho_w: e.get("fluid.rho_w", f.rho_w)?,
            rho_nw: e.get("fluid.rho_nw", f.rho_nw)?,
            gravity: e.get("fluid.gravity", f.gravity)?,
            alpha: e.get("fluid.alpha", f.alpha)?,
            dp: e.get("fluid.dp", f.dp)?,
        };
        e.finish()?;

        let cfg = Self {
            seed,
            out,
            data,
            vqvae,
            transformer,
            encode_window,
            assemble,
            evaluate,
            fluid,
        };
        cfg.check()?;
        Ok(cfg)
    }

    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.exists() {
            return Err(CliError::Missing(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Cross-field checks.
    fn check(&self) -> Result<(), CliError> {
        if self.data.block_size != self.vqvae.patch_edge {
            return Err(bad(
                "data.block_size",
                format!("must equal vqvae.patch_edge {}", self.vqvae.patch_edge),
            ));
        }
        let max_sets = self.transformer.sets_per_window();
        for (field, w) in [("encode.window", self.encode_window), ("assemble.window", self.assemble.window)] {
            let sets: usize = w.iter().product();
            if sets > max_sets {
                return Err(bad(
                    field,
                    format!("{sets} sets exceed the transformer window of {max_sets}"),
                ));
            }
        }
        if (0..3).any(|a| self.data.grid[a] % self.encode_window[a] != 0) {
            return Err(bad("encode.window", "must divide data.grid on every axis"));
        }
        if self.assemble.grid_file.is_none() && (0..3).any(|a| self.assemble.window[a] > self.assemble.grid[a]) {
            return Err(bad("assemble.window", "larger than assemble.grid"));
        }
        if !(self.assemble.temperature > 0.0 && self.assemble.temperature.is_finite()) {
            return Err(bad("assemble.temperature", "must be positive"));
        }
        if self.evaluate.kr_steps < 2 {
            return Err(bad("evaluate.kr_steps", "must be at least 2"));
        }
        if self.evaluate.kr_axis > 2 {
            return Err(bad("evaluate.kr_axis", "must be 0, 1 or 2"));
        }
        self.fluid.validate().map_err(|err| bad("fluid", err.to_string()))?;
        Ok(())
    }

    /// Points `out` (and the paths derived from it) at `dir`.
    pub fn with_out(mut self, dir: &Path) -> Self {
        if self.data.dir == self.out.join("data") {
            self.data.dir = dir.join("data");
        }
        if self.evaluate.volume == self.out.join("assembled.vox") {
            self.evaluate.volume = dir.join("assembled.vox");
        }
        self.out = dir.to_path_buf();
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_desk_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.vqvae, VqvaeConfig::desk());
        assert_eq!(c.transformer, TransformerConfig::desk());
        assert_eq!(c.data.dir, PathBuf::from("out/data"));
    }

    #[test]
    fn comments_and_whitespace() {
        let c = RunConfig::parse("# run\n  seed = 11   # trailing\n\ndata.grid=4, 4 ,2\n").unwrap();
        assert_eq!(c.seed, 11);
        assert_eq!(c.data.grid, [4, 4, 2]);
    }

    fn field_of(text: &str) -> String {
        match RunConfig::parse(text) {
            Err(CliError::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn rejections_name_the_field() {
        assert_eq!(field_of("data.porosity_max = 1.5"), "data.porosity_max");
        assert_eq!(field_of("data.porosity_min = x"), "data.porosity_min");
        assert_eq!(field_of("bogus = 1"), "bogus");
        assert_eq!(field_of("seed = 1\nseed = 2"), "seed");
        assert_eq!(field_of("data.grid = 1,2"), "data.grid");
        assert_eq!(field_of("transformer.mask = diag"), "transformer.mask");
        assert_eq!(field_of("vqvae.groups = 3"), "vqvae");
        assert_eq!(field_of("assemble.grid = 1,1,1"), "assemble.window");
        assert_eq!(field_of("encode.window = 3,1,1"), "encode.window");
        assert_eq!(field_of("fluid.alpha = 0.1"), "fluid");
    }

    #[test]
    fn derived_transformer_fields_follow_the_codebook() {
        let c = RunConfig::parse("vqvae.codebook_size = 32").unwrap();
        assert_eq!(c.transformer.vocab, 33);
        assert_eq!(c.transformer.sos, 32);
    }

    #[test]
    fn with_out_moves_derived_paths() {
        let c = RunConfig::parse("").unwrap().with_out(Path::new("/tmp/x"));
        assert_eq!(c.data.dir, PathBuf::from("/tmp/x/data"));
        assert_eq!(c.evaluate.volume, PathBuf::from("/tmp/x/assembled.vox"));
    }
}
