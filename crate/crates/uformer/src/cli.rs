//! Command implementations: dataset mixing, training, enhancement,
//! evaluation, and the verification gate.
//!
//! Manifests are tab-separated text with `#` comments. Mixing manifests hold
//! `clean<TAB>noise<TAB>snr_db` triples; evaluation manifests hold
//! `clean<TAB>estimate` pairs. Relative paths resolve against the manifest's
//! directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{apply_setting, parse_config, RunConfig};
use crate::dsp::{self, Waveform};
use crate::error::{Error, Result};
use crate::model::UFormerModel;
use crate::train::{history_csv, Checkpoint, Trainer};
use crate::verify::{run_suite, Suite};
use crate::wav;

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Manifest(format!("{}: {e}", dir.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Manifest(format!("{}: no wav files", dir.display())));
    }
    Ok(files)
}

fn resolve(base: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// `clean<TAB>noise<TAB>snr_db` rows.
pub fn read_mix_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf, f64)>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut rows = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Manifest(format!(
                "{}:{}: expected clean<TAB>noise<TAB>snr_db",
                path.display(),
                lineno + 1
            )));
        }
        let snr: f64 = fields[2].trim().parse().map_err(|_| {
            Error::Manifest(format!(
                "{}:{}: `{}` is not a number",
                path.display(),
                lineno + 1,
                fields[2]
            ))
        })?;
        rows.push((resolve(&base, fields[0]), resolve(&base, fields[1]), snr));
    }
    if rows.is_empty() {
        return Err(Error::Manifest(format!("{}: empty manifest", path.display())));
    }
    Ok(rows)
}

/// Loads and re-mixes a manifest into (clean, noisy) waveform pairs.
pub fn load_dataset(manifest: &Path) -> Result<Vec<(Waveform, Waveform)>> {
    read_mix_manifest(manifest)?
        .into_iter()
        .map(|(clean_path, noise_path, snr)| {
            let clean = wav::read_wav(&clean_path)?;
            let noise = wav::read_wav(&noise_path)?;
            let (noisy, _) = dsp::mix_at_snr(&clean, &noise, snr)?;
            Ok((clean, noisy))
        })
        .collect()
}

pub struct MixArgs {
    pub clean_dir: PathBuf,
    pub noise_dir: PathBuf,
    pub snr_list: Vec<f64>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

/// Pairs every clean file with a seeded random noise file at each requested
/// SNR, writes the noisy WAVs, and records the pairing in
/// `<out_dir>/manifest.tsv`.
pub fn cmd_mix(args: &MixArgs) -> Result<()> {
    if args.snr_list.is_empty() {
        return Err(Error::Config("mix: empty snr list".into()));
    }
    let cleans = wav_files(&args.clean_dir)?;
    let noises = wav_files(&args.noise_dir)?;
    fs::create_dir_all(&args.out_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut manifest = String::from("# clean\tnoise\tsnr_db\n");
    let mut written = 0usize;
    for clean_path in &cleans {
        let clean = wav::read_wav(clean_path)?;
        let stem = clean_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("clip");
        for &snr in &args.snr_list {
            let noise_path = &noises[rng.gen_range(0..noises.len())];
            let noise = wav::read_wav(noise_path)?;
            let (noisy, _) = dsp::mix_at_snr(&clean, &noise, snr)?;
            let out_path = args.out_dir.join(format!("{stem}_snr{snr}dB.wav"));
            wav::write_wav(&out_path, &noisy)?;
            manifest.push_str(&format!(
                "{}\t{}\t{snr}\n",
                fs::canonicalize(clean_path)?.display(),
                fs::canonicalize(noise_path)?.display()
            ));
            written += 1;
        }
    }
    let manifest_path = args.out_dir.join("manifest.tsv");
    fs::write(&manifest_path, manifest)?;
    println!(
        "mixed {written} files into {} (manifest: {})",
        args.out_dir.display(),
        manifest_path.display()
    );
    Ok(())
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub set: Vec<String>,
    pub train_manifest: PathBuf,
    pub valid_manifest: PathBuf,
    pub out: PathBuf,
    pub resume: Option<PathBuf>,
    pub save_last: Option<PathBuf>,
    pub history: Option<PathBuf>,
}

fn apply_overrides(cfg: &mut RunConfig, sets: &[String]) -> Result<()> {
    for raw in sets {
        let Some((key, value)) = raw.split_once('=') else {
            return Err(Error::Config(format!("--set `{raw}`: expected KEY=VALUE")));
        };
        apply_setting(cfg, key, value)?;
    }
    Ok(())
}

/// Runs the training loop, writing the best-validation checkpoint to
/// `--out`, optionally the end-of-epoch state to `--save-last` (the file to
/// resume from), and the history log as CSV.
pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut trainer = match &args.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut cfg = ckpt.run_config()?;
            let model_cfg = cfg.model.clone();
            apply_overrides(&mut cfg, &args.set)?;
            if cfg.model != model_cfg {
                return Err(Error::Config(
                    "resume: model keys cannot be overridden, only training keys".into(),
                ));
            }
            cfg.validate()?;
            let mut trainer = ckpt.build_trainer()?;
            trainer.train_cfg = cfg.train;
            trainer
        }
        None => {
            let mut cfg = match &args.config {
                Some(path) => {
                    let text = fs::read_to_string(path)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                    parse_config(&text)?
                }
                None => RunConfig::default(),
            };
            apply_overrides(&mut cfg, &args.set)?;
            cfg.validate()?;
            let model = UFormerModel::build(&cfg.model, cfg.train.seed)?;
            println!("model parameters: {}", model.count_params());
            Trainer::new(model, cfg.train)?
        }
    };

    let train_set = load_dataset(&args.train_manifest)?;
    let valid_set = load_dataset(&args.valid_manifest)?;
    println!(
        "training on {} utterances, validating on {}",
        train_set.len(),
        valid_set.len()
    );

    let out = args.out.clone();
    let save_last = args.save_last.clone();
    let mut best = f32::INFINITY;
    let outcome = trainer.run(&train_set, &valid_set, |stats, trainer| {
        println!(
            "epoch {:>4}  train {:.6}  valid {:.6}  lr {:.6}",
            stats.epoch, stats.train_loss, stats.valid_loss, stats.lr
        );
        if stats.valid_loss < best {
            best = stats.valid_loss;
            Checkpoint::from_trainer(trainer).save(&out)?;
        }
        if let Some(last) = &save_last {
            Checkpoint::from_trainer(trainer).save(last)?;
        }
        Ok(())
    })?;

    let history_path = args
        .history
        .clone()
        .unwrap_or_else(|| args.out.with_extension("history.csv"));
    fs::write(&history_path, history_csv(&outcome.history))?;
    println!(
        "best validation loss {:.6}{}; history: {}",
        outcome.best_valid,
        if outcome.stopped_early { " (early stop)" } else { "" },
        history_path.display()
    );
    Ok(())
}

pub struct EnhanceArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
}

pub fn cmd_enhance(args: &EnhanceArgs) -> Result<()> {
    let model = Checkpoint::load(&args.checkpoint)?.build_model()?;
    let noisy = wav::read_wav(&args.input)?;
    let enhanced = model.enhance(&noisy)?;
    wav::write_wav(&args.output, &enhanced)?;
    println!(
        "enhanced {} -> {} ({} samples)",
        args.input.display(),
        args.output.display(),
        enhanced.len()
    );
    Ok(())
}

pub struct EvalArgs {
    pub pairs: PathBuf,
    pub csv: Option<PathBuf>,
}

/// `clean<TAB>estimate` rows.
fn read_eval_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut rows = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(Error::Manifest(format!(
                "{}:{}: expected clean<TAB>estimate",
                path.display(),
                lineno + 1
            )));
        }
        rows.push((resolve(&base, fields[0]), resolve(&base, fields[1])));
    }
    if rows.is_empty() {
        return Err(Error::Manifest(format!("{}: empty manifest", path.display())));
    }
    Ok(rows)
}

/// Per-pair and mean segmental SNR as an aligned table, optionally also as
/// CSV with columns `path,ssnr_db`.
pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let rows = read_eval_manifest(&args.pairs)?;
    let mut csv = String::from("path,ssnr_db\n");
    let mut total = 0.0f64;
    let mut width = "mean".len();
    let mut table = Vec::new();
    for (clean_path, est_path) in &rows {
        let clean = wav::read_wav(clean_path)?;
        let est = wav::read_wav(est_path)?;
        if clean.len().abs_diff(est.len()) > dsp::HOP {
            return Err(Error::Manifest(format!(
                "{}: length mismatch beyond one hop ({} vs {} samples)",
                est_path.display(),
                clean.len(),
                est.len()
            )));
        }
        let score = dsp::ssnr_default(&clean, &est)?;
        let name = est_path.display().to_string();
        width = width.max(name.len());
        csv.push_str(&format!("{name},{score:.4}\n"));
        table.push((name, score));
        total += score;
    }
    let mean = total / rows.len() as f64;
    println!("{:<width$}  SSNR(dB)", "estimate");
    for (name, score) in &table {
        println!("{name:<width$}  {score:8.2}");
    }
    println!("{:<width$}  {mean:8.2}", "mean");
    if let Some(csv_path) = &args.csv {
        csv.push_str(&format!("mean,{mean:.4}\n"));
        fs::write(csv_path, csv)?;
    }
    Ok(())
}

/// Runs the requested verification suites, printing one line per check with
/// its measured maximum error.
pub fn cmd_verify(suite: Suite) -> Result<()> {
    let start = Instant::now();
    let report = run_suite(suite);
    print!("{}", report.render());
    println!("suite time: {:.1}s", start.elapsed().as_secs_f64());
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report
            .results
            .iter()
            .filter(|r| !r.passed())
            .map(|r| r.name.as_str())
            .collect();
        Err(Error::Verify(failed.join(", ")))
    }
}
