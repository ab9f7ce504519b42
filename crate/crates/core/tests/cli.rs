use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use poregen::cli::main_with_args;
use poregen::seqmodel::read_token_file;
use poregen::voxcore::{load_volume, save_volume, Volume3D, PORE, SOLID};

const TINY: &str = "\
# small enough to train in seconds
seed = 3
data.volumes = 3
vqvae.enc_channels = 4,4,4,4
vqvae.dec_channels = 4,4,4,4,4
vqvae.codebook_size = 16
vqvae.latent_dim = 4
vqvae.epochs = 2
vqvae.batch_size = 8
transformer.layers = 1
transformer.heads = 2
transformer.width = 8
transformer.cond_width = 2
transformer.epochs = 2
evaluate.n_samples = 400
";

fn write_config(dir: &Path, extra: &str) -> Result<PathBuf> {
    let p = dir.join("run.cfg");
    fs::write(&p, format!("{TINY}{extra}"))?;
    Ok(p)
}

fn poregen(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> i32 {
    let mut argv = vec![
        "poregen".to_string(),
        cmd.to_string(),
        "--config".into(),
        config.display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ];
    argv.extend(extra.iter().map(|s| s.to_string()));
    main_with_args(argv)
}

fn report(out: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(out.join("evaluation/report.csv"))?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| l.split_once(','))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}

fn files(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d)? {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir)?.to_path_buf(), fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

const PIPELINE: [&str; 6] = ["gen-data", "train-vqvae", "encode", "train-transformer", "assemble", "evaluate"];

#[test]
fn pipeline_runs_end_to_end_and_reruns_bitwise() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let cfg = write_config(tmp.path(), "")?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        for cmd in PIPELINE {
            assert_eq!(poregen(cmd, &cfg, out, &[]), 0, "{cmd}");
        }
    }
    let (fa, fb) = (files(&a)?, files(&b)?);
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(fb[k] == *v, "{} differs between runs", k.display());
    }
    for name in ["vqvae.ckpt", "transformer.ckpt", "tokens.ptk", "assembled.vox", "vqvae_loss.csv"] {
        assert!(fa.contains_key(Path::new(name)), "{name} missing");
    }
    for (k, v) in &fa {
        if k.extension().is_some_and(|e| e == "csv") {
            assert!(!v.contains(&b'\r'), "{} has CR line endings", k.display());
        }
    }

    // 32³ volumes, 16³ patches: 8 sets of 8 tokens per sample
    let samples = read_token_file(&mut fs::File::open(a.join("tokens.ptk"))?)?;
    assert_eq!(samples.len(), 3);
    assert!(samples.iter().all(|s| s.len() == 8 && s.set_size() == 8));

    assert_eq!(load_volume(a.join("assembled.vox"))?.dims(), [32, 32, 32]);
    let manifest = fs::read_to_string(a.join("assembly_manifest.csv"))?;
    assert!(manifest.contains("# seam_score,"));
    assert!(manifest.contains("# conditioning_mae,"));
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 1 + 8);
    let losses = fs::read_to_string(a.join("transformer_loss.csv"))?;
    assert_eq!(losses.lines().count(), 1 + 2);

    // a different seed changes the run
    let c = tmp.path().join("c");
    assert_eq!(poregen("gen-data", &cfg, &c, &["--seed", "4"]), 0);
    assert_ne!(fs::read(c.join("data/volume_00000.vox"))?, fa[Path::new("data/volume_00000.vox")]);
    Ok(())
}

#[test]
fn assembly_slides_beyond_one_window() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let cfg = write_config(tmp.path(), "assemble.grid = 4,4,4\nassemble.window = 2,2,2\n")?;
    let out = tmp.path().join("run");
    for cmd in &PIPELINE[..5] {
        assert_eq!(poregen(cmd, &cfg, &out, &[]), 0, "{cmd}");
    }
    assert_eq!(load_volume(out.join("assembled.vox"))?.dims(), [64, 64, 64]);
    let manifest = fs::read_to_string(out.join("assembly_manifest.csv"))?;
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 1 + 64);
    Ok(())
}

#[test]
fn gen_data_creates_output_dir_and_hits_block_targets() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let cfg = write_config(tmp.path(), "")?;
    let out = tmp.path().join("nested/deeper");
    assert_eq!(poregen("gen-data", &cfg, &out, &[]), 0);
    let text = fs::read_to_string(out.join("data_manifest.csv"))?;
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("volume,i,j,k,target_porosity,realized_porosity"));
    let bound = 1.0 / 16f64.powi(3);
    let mut n = 0;
    for l in lines {
        let f: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((f[4] - f[5]).abs() <= bound + 1e-6, "{l}");
        n += 1;
    }
    assert_eq!(n, 3 * 8);
    Ok(())
}

#[test]
fn config_errors_exit_with_code_two() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let out = tmp.path().join("run");
    for extra in [
        "data.porosity_max = 1.2\n",
        "data.porosity_min = -0.1\n",
        "no_such_key = 1\n",
        "assemble.grid = 1,2,2\n",
        "vqvae.lr = fast\n",
    ] {
        let cfg = write_config(tmp.path(), extra)?;
        assert_eq!(poregen("gen-data", &cfg, &out, &[]), 2, "{extra}");
    }
    assert_eq!(main_with_args(["poregen", "no-such-command"]), 2);
    assert!(!out.exists());
    Ok(())
}

#[test]
fn assembling_a_grid_file_smaller_than_the_window_exits_two() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let grid = tmp.path().join("small.pgrid");
    let pg = poregen::voxcore::PorosityGrid::uniform([1, 2, 2], 16, 0.2)?;
    poregen::voxcore::save_porosity_grid(&pg, &grid)?;
    let cfg = write_config(tmp.path(), &format!("assemble.grid_file = {}\n", grid.display()))?;
    assert_eq!(poregen("assemble", &cfg, &tmp.path().join("run"), &[]), 2);
    Ok(())
}

#[test]
fn missing_prerequisites_exit_with_code_three() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let cfg = write_config(tmp.path(), "")?;
    let out = tmp.path().join("run");
    for cmd in ["train-vqvae", "encode", "train-transformer", "assemble", "evaluate"] {
        assert_eq!(poregen(cmd, &cfg, &out, &[]), 3, "{cmd}");
    }
    let missing = tmp.path().join("absent.cfg");
    assert_eq!(poregen("gen-data", &missing, &out, &[]), 3);
    Ok(())
}

fn evaluate_volume(v: &Volume3D, reference: Option<&Volume3D>) -> Result<BTreeMap<String, String>> {
    let tmp = tempfile::tempdir()?;
    let vp = tmp.path().join("v.vox");
    save_volume(v, &vp)?;
    let mut extra = format!("evaluate.volume = {}\n", vp.display());
    if let Some(r) = reference {
        let rp = tmp.path().join("r.vox");
        save_volume(r, &rp)?;
        extra += &format!("evaluate.reference = {}\n", rp.display());
    }
    let cfg = write_config(tmp.path(), &extra)?;
    let out = tmp.path().join("eval");
    assert_eq!(poregen("evaluate", &cfg, &out, &[]), 0);
    let mut r = report(&out)?;
    let s2 = fs::read_to_string(out.join("evaluation/s2.csv"))?;
    r.insert("s2_csv".into(), s2);
    let kr = fs::read_to_string(out.join("evaluation/kr.csv"))?;
    r.insert("kr_rows".into(), (kr.lines().count() - 1).to_string());
    Ok(r)
}

#[test]
fn evaluate_all_pore_cube() -> Result<()> {
    let v = Volume3D::filled([16, 16, 16], 2.0, PORE)?;
    let r = evaluate_volume(&v, None)?;
    assert_eq!(r["porosity"], "1");
    for line in r["s2_csv"].lines().skip(1) {
        assert_eq!(line.split(',').nth(1), Some("1"), "{line}");
    }
    for a in 0..3 {
        assert!(r[&format!("k_md_axis{a}")].parse::<f64>()? > 0.0);
        assert_eq!(r[&format!("status_axis{a}")], "percolating");
    }
    assert_eq!(r["kr_status"], "ok");
    assert_eq!(r["kr_rows"], "11");
    Ok(())
}

#[test]
fn evaluate_against_itself_has_zero_deltas() -> Result<()> {
    let mut v = Volume3D::filled([16, 16, 16], 2.0, PORE)?;
    for i in 0..16 {
        for j in 0..16 {
            for k in 0..16 {
                if (i * 7 + j * 3 + k * 5) % 4 == 0 {
                    v.set(i, j, k, SOLID);
                }
            }
        }
    }
    let r = evaluate_volume(&v, Some(&v))?;
    for key in ["porosity_grid_mae", "s2_max_abs_diff", "k_rel_diff_axis0", "k_rel_diff_axis1", "k_rel_diff_axis2"] {
        assert_eq!(r[key], "0", "{key}");
    }
    Ok(())
}

#[test]
fn evaluate_non_percolating_volume() -> Result<()> {
    // a solid wall across every axis
    let mut v = Volume3D::filled([16, 16, 16], 2.0, PORE)?;
    for a in 0..16 {
        for b in 0..16 {
            v.set(8, a, b, SOLID);
            v.set(a, 8, b, SOLID);
            v.set(a, b, 8, SOLID);
        }
    }
    let r = evaluate_volume(&v, None)?;
    for a in 0..3 {
        assert_eq!(r[&format!("k_md_axis{a}")], "0");
        assert_eq!(r[&format!("status_axis{a}")], "non_percolating");
    }
    assert_eq!(r["kr_status"], "degenerate");
    assert_eq!(r["kr_rows"], "0");
    Ok(())
}

#[test]
fn gradcheck_command_passes() -> Result<()> {
    let tmp = tempfile::tempdir()?;
    let cfg = write_config(tmp.path(), "")?;
    let out = tmp.path().join("gc");
    assert_eq!(poregen("gradcheck", &cfg, &out, &[]), 0);
    let csv = fs::read_to_string(out.join("gradcheck.csv"))?;
    assert!(csv.lines().count() > 10);
    Ok(())
}
