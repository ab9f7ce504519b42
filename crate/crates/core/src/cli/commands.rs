use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CliError, Command, RunConfig};
use crate::assembler::{self, assemble, traversal_order, write_manifest, AssemblyError};
use crate::gradcore::{load_checkpoint, op_suite, save_checkpoint};
use crate::petrosim::{
    absolute_permeability, relative_permeability, two_point_probability, KrCurve, PermeabilityReport, PetroError,
};
use crate::seqmodel::{read_token_file, train_transformer, write_token_file, SequenceSample, Transformer};
use crate::voxcore::{
    crop_patches, gen_synthetic, load_porosity_grid, load_volume, porosity, porosity_grid_of, save_porosity_grid, save_volume,
    PorosityGrid, Volume3D, PORE,
};
use crate::vqvae::{train_vqvae, Vqvae};

const GRADCHECK_TOL: f64 = 1e-4;

/// Derives an independent seed for one pipeline stage.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stage.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

mod stage {
    pub const DATA: u64 = 1;
    pub const VQVAE: u64 = 2;
    pub const TRANSFORMER: u64 = 3;
    pub const ASSEMBLE: u64 = 4;
    pub const EVALUATE: u64 = 5;
    pub const GRADCHECK: u64 = 6;
}

/// File names under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub out: PathBuf,
    pub data: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            out: cfg.out.clone(),
            data: cfg.data.dir.clone(),
        }
    }

    pub fn volume(&self, i: usize) -> PathBuf {
        self.data.join(format!("volume_{i:05}.vox"))
    }

    pub fn grid(&self, i: usize) -> PathBuf {
        self.data.join(format!("grid_{i:05}.pgrid"))
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.out.join("data_manifest.csv")
    }

    pub fn vqvae_checkpoint(&self) -> PathBuf {
        self.out.join("vqvae.ckpt")
    }

    pub fn vqvae_loss(&self) -> PathBuf {
        self.out.join("vqvae_loss.csv")
    }

    pub fn tokens(&self) -> PathBuf {
        self.out.join("tokens.ptk")
    }

    pub fn transformer_checkpoint(&self) -> PathBuf {
        self.out.join("transformer.ckpt")
    }

    pub fn transformer_loss(&self) -> PathBuf {
        self.out.join("transformer_loss.csv")
    }

    pub fn assembled(&self) -> PathBuf {
        self.out.join("assembled.vox")
    }

    pub fn assembly_manifest(&self) -> PathBuf {
        self.out.join("assembly_manifest.csv")
    }

    pub fn evaluation(&self) -> PathBuf {
        self.out.join("evaluation")
    }

    pub fn gradcheck(&self) -> PathBuf {
        self.out.join("gradcheck.csv")
    }
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Runs one pipeline command.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<(), CliError> {
    let layout = Layout::new(cfg);
    fs::create_dir_all(&layout.out)?;
    match cmd {
        Command::GenData => gen_data(cfg, &layout),
        Command::TrainVqvae => train_vq(cfg, &layout),
        Command::Encode => encode(cfg, &layout),
        Command::TrainTransformer => train_tf(cfg, &layout),
        Command::Assemble => assemble_cmd(cfg, &layout),
        Command::Evaluate => evaluate(cfg, &layout),
        Command::Gradcheck => gradcheck(cfg, &layout),
    }
}

fn gen_data(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let d = &cfg.data;
    fs::create_dir_all(&layout.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, stage::DATA));
    let blocks: usize = d.grid.iter().product();
    let mut csv = create(&layout.data_manifest())?;
    writeln!(csv, "volume,i,j,k,target_porosity,realized_porosity")?;
    let mut abs_err = 0.0;
    for n in 0..d.volumes {
        let values: Vec<f32> = (0..blocks).map(|_| rng.gen_range(d.porosity_min..=d.porosity_max)).collect();
        let pg = PorosityGrid::new(d.grid, d.block_size, values)?;
        let v = gen_synthetic(d.corr_len, &pg, rng.gen())?;
        let realized = porosity_grid_of(&v, d.block_size)?;
        for (idx, [i, j, k]) in traversal_order(d.grid).map_err(CliError::from)?.into_iter().enumerate() {
            let (t, r) = (pg.values()[idx], realized.values()[idx]);
            abs_err += (t - r).abs() as f64;
            writeln!(csv, "{n},{i},{j},{k},{t:.6},{r:.6}")?;
        }
        save_porosity_grid(&pg, layout.grid(n))?;
        save_volume(&v, layout.volume(n))?;
    }
    csv.flush()?;
    println!(
        "gen-data: {} volumes of {:?} voxels, block porosity MAE {:.2e}",
        d.volumes,
        d.grid.map(|g| g * d.block_size),
        abs_err / (d.volumes * blocks) as f64
    );
    Ok(())
}

/// Generated volumes in index order.
fn load_dataset(layout: &Layout) -> Result<Vec<Volume3D>, CliError> {
    require(&layout.data)?;
    let mut vols = Vec::new();
    while layout.volume(vols.len()).exists() {
        vols.push(load_volume(layout.volume(vols.len()))?);
    }
    if vols.is_empty() {
        return Err(CliError::Missing(layout.volume(0)));
    }
    Ok(vols)
}

fn train_vq(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let vols = load_dataset(layout)?;
    let mut patches = Vec::new();
    for v in &vols {
        let crops = crop_patches(v, cfg.vqvae.patch_edge, cfg.data.crop_stride)?;
        patches.extend(crops.into_iter().map(|(p, _)| p));
    }
    println!("train-vqvae: {} patches", patches.len());
    let (model, history) = train_vqvae(&cfg.vqvae, &patches, stage_seed(cfg.seed, stage::VQVAE), |s| {
        println!(
            "epoch {:3} w {:.2} recon {:.5} codebook {:.5} codes {}",
            s.epoch, s.w_codebook, s.recon, s.codebook, s.codes_used
        );
    })?;
    let mut csv = create(&layout.vqvae_loss())?;
    writeln!(csv, "epoch,w_codebook,recon,codebook,commit,total,codes_used")?;
    for s in &history {
        writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            s.epoch, s.w_codebook, s.recon, s.codebook, s.commit, s.total, s.codes_used
        )?;
    }
    csv.flush()?;
    save_checkpoint(&model.to_checkpoint(), layout.vqvae_checkpoint())?;
    Ok(())
}

fn load_vqvae(layout: &Layout) -> Result<Vqvae, CliError> {
    let path = layout.vqvae_checkpoint();
    require(&path)?;
    Ok(Vqvae::from_checkpoint(&load_checkpoint(&path)?)?)
}

fn load_transformer(layout: &Layout) -> Result<Transformer, CliError> {
    let path = layout.transformer_checkpoint();
    require(&path)?;
    Ok(Transformer::from_checkpoint(&load_checkpoint(&path)?)?)
}

fn encode_volume(vq: &Vqvae, v: &Volume3D, window: [usize; 3]) -> Result<Vec<SequenceSample>, CliError> {
    assembler::encode_volume(vq, v, window).map_err(|e| match e {
        AssemblyError::WindowTiling { .. } => CliError::config("encode.window", e),
        AssemblyError::NotDivisible { .. } => CliError::config("vqvae.patch_edge", e),
        e => e.into(),
    })
}

fn encode(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let vq = load_vqvae(layout)?;
    let vols = load_dataset(layout)?;
    let mut samples = Vec::new();
    for v in &vols {
        samples.extend(encode_volume(&vq, v, cfg.encode_window)?);
    }
    let mut w = create(&layout.tokens())?;
    write_token_file(&samples, &mut w)?;
    w.flush()?;
    let (n, t) = samples.first().map_or((0, 0), |s| (s.len(), s.set_size()));
    println!("encode: {} samples of {n} sets x {t} tokens", samples.len());
    Ok(())
}

fn train_tf(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let path = layout.tokens();
    require(&path)?;
    let samples = read_token_file(&mut BufReader::new(File::open(&path)?))?;
    println!("train-transformer: {} samples", samples.len());
    let (model, losses) = train_transformer(
        &cfg.transformer,
        &samples,
        stage_seed(cfg.seed, stage::TRANSFORMER),
        |e, l| println!("epoch {e:3} loss {l:.5}"),
    )?;
    let mut csv = create(&layout.transformer_loss())?;
    writeln!(csv, "epoch,loss")?;
    for (e, l) in losses.iter().enumerate() {
        writeln!(csv, "{e},{l}")?;
    }
    csv.flush()?;
    save_checkpoint(&model.to_checkpoint(), layout.transformer_checkpoint())?;
    Ok(())
}

fn assemble_cmd(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let a = &cfg.assemble;
    let pg = match &a.grid_file {
        Some(p) => {
            require(p)?;
            load_porosity_grid(p)?
        }
        None => PorosityGrid::uniform(a.grid, cfg.vqvae.patch_edge, a.porosity)?,
    };
    if (0..3).any(|i| a.window[i] > pg.grid_dims()[i]) {
        return Err(CliError::Config {
            field: "assemble.window".into(),
            msg: format!("window {:?} larger than grid {:?}", a.window, pg.grid_dims()),
        });
    }
    let vq = load_vqvae(layout)?;
    let tf = load_transformer(layout)?;
    let out = assemble(&vq, &tf, &pg, a.window, a.temperature, stage_seed(cfg.seed, stage::ASSEMBLE))?;
    save_volume(&out.volume, layout.assembled())?;
    let mut w = create(&layout.assembly_manifest())?;
    write_manifest(&out, &mut w)?;
    w.flush()?;
    println!(
        "assemble: {:?} volume, porosity {:.4}, conditioning MAE {:.4}, seam score {:.3}",
        out.volume.dims(),
        porosity(&out.volume),
        out.conditioning_mae(),
        out.seam_score()?
    );
    Ok(())
}

fn kr_or_degenerate(v: &Volume3D, cfg: &RunConfig) -> Result<Option<KrCurve>, CliError> {
    let e = &cfg.evaluate;
    match relative_permeability(v, e.kr_axis, &cfg.fluid, e.kr_steps) {
        Ok(c) => Ok(Some(c)),
        Err(PetroError::NonPercolatingReference) => Ok(None),
        Err(err) => Err(err.into()),
    }
}

fn relative_change(k: f64, k_ref: f64) -> f64 {
    if k == k_ref {
        0.0
    } else {
        (k - k_ref).abs() / k_ref
    }
}

fn evaluate(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let e = &cfg.evaluate;
    require(&e.volume)?;
    let v = load_volume(&e.volume)?;
    let reference = match &e.reference {
        Some(p) => {
            require(p)?;
            let r = load_volume(p)?;
            if r.dims() != v.dims() {
                return Err(CliError::Config {
                    field: "evaluate.reference".into(),
                    msg: format!("dims {:?} differ from volume dims {:?}", r.dims(), v.dims()),
                });
            }
            Some(r)
        }
        None => None,
    };
    let seed = stage_seed(cfg.seed, stage::EVALUATE);
    let s2 = two_point_probability(&v, PORE, e.h_max, e.n_samples, seed)?;
    let k: Vec<PermeabilityReport> = (0..3)
        .map(|a| absolute_permeability(&v, a, &cfg.fluid))
        .collect::<Result<_, _>>()?;
    let kr = kr_or_degenerate(&v, cfg)?;

    let dir = layout.evaluation();
    let mut report: Vec<(String, String)> = vec![("porosity".into(), porosity(&v).to_string())];
    for r in &k {
        report.push((format!("k_md_axis{}", r.axis), r.k_md.to_string()));
        let status = if r.percolating { "percolating" } else { "non_percolating" };
        report.push((format!("status_axis{}", r.axis), status.into()));
    }
    report.push(("kr_status".into(), if kr.is_some() { "ok" } else { "degenerate" }.into()));

    let mut s2_ref = None;
    if let Some(r) = &reference {
        let pv = porosity_grid_of(&v, e.block_size)?;
        let pr = porosity_grid_of(r, e.block_size)?;
        let mae = pv.values().iter().zip(pr.values()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
            / pv.values().len() as f64;
        report.push(("porosity_grid_mae".into(), mae.to_string()));
        let curve = two_point_probability(r, PORE, e.h_max, e.n_samples, seed)?;
        report.push(("s2_max_abs_diff".into(), s2.max_abs_diff(&curve).to_string()));
        for (a, kv) in k.iter().enumerate() {
            let kr_ = absolute_permeability(r, a, &cfg.fluid)?;
            report.push((format!("k_rel_diff_axis{a}"), relative_change(kv.k_m2, kr_.k_m2).to_string()));
        }
        s2_ref = Some(curve);
    }

    let mut w = create(&dir.join("report.csv"))?;
    writeln!(w, "metric,value")?;
    for (m, val) in &report {
        writeln!(w, "{m},{val}")?;
        println!("{m:<20} {val}");
    }
    w.flush()?;

    let mut w = create(&dir.join("s2.csv"))?;
    match &s2_ref {
        Some(r) => {
            writeln!(w, "h,s2,s2_reference")?;
            for ((h, a), b) in s2.lags.iter().zip(&s2.values).zip(&r.values) {
                writeln!(w, "{h},{a},{b}")?;
            }
        }
        None => {
            writeln!(w, "h,s2")?;
            for (h, a) in s2.lags.iter().zip(&s2.values) {
                writeln!(w, "{h},{a}")?;
            }
        }
    }
    w.flush()?;

    let mut w = create(&dir.join("kr.csv"))?;
    writeln!(w, "sw,krw,krnw,invaded,status")?;
    for p in kr.iter().flat_map(|c| &c.points) {
        writeln!(w, "{},{},{},{},{}", p.sw, p.krw, p.krnw, p.invaded, p.status.as_str())?;
    }
    w.flush()?;
    Ok(())
}

fn gradcheck(cfg: &RunConfig, layout: &Layout) -> Result<(), CliError> {
    let results = op_suite(stage_seed(cfg.seed, stage::GRADCHECK))?;
    let mut w = create(&layout.gradcheck())?;
    writeln!(w, "op,max_rel_error,checked")?;
    let mut failed = Vec::new();
    for (name, r) in &results {
        let ok = r.passes(GRADCHECK_TOL);
        println!("{name:<24} {:.3e} {}", r.max_rel_error, if ok { "ok" } else { "FAIL" });
        writeln!(w, "{name},{},{}", r.max_rel_error, r.checked)?;
        if !ok {
            failed.push(name.clone());
        }
    }
    w.flush()?;
    if !failed.is_empty() {
        return Err(CliError::Numerical(format!(
            "gradient check above {GRADCHECK_TOL:e}: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}
