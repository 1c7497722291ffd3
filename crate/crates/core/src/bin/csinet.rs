//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed check or other error, 2 invalid
//! configuration, 3 missing or malformed file, 4 non-finite loss,
//! 5 option that is named but not implemented.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use csinet::checkpoint::load_checkpoint;
use csinet::config::{validate_config, Config, KEYS};
use csinet::data::{generate_set, read_image, write_dataset, write_mask, SceneSpec};
use csinet::harness::{
    ablate, ablation_table, evaluate_masks, predict_image, report, Dataset, Variant,
};
use csinet::model::CsiNet;
use csinet::text::Vocab;
use csinet::train::Trainer;
use csinet::{gradcheck, oracle, Error, Result};

#[derive(Parser)]
#[command(
    name = "csinet",
    version,
    about = "Referring segmentation with cross-view windows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where samples come from: a manifest, or generated scenes.
#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset manifest (tab-separated image, mask, expression, category).
    #[arg(long, conflicts_with = "synthetic")]
    manifest: Option<PathBuf>,
    /// Generate this many synthetic scenes instead of reading a manifest.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    /// Side of generated scenes in pixels.
    #[arg(long, default_value_t = 256)]
    scene_side: usize,
    #[arg(long, default_value_t = 0.5)]
    tiny_fraction: f64,
}

impl DataArgs {
    fn spec(&self) -> SceneSpec {
        SceneSpec {
            side: self.scene_side,
            tiny_fraction: self.tiny_fraction,
            ..SceneSpec::default()
        }
    }

    fn load(&self, cfg: &Config) -> Result<Dataset> {
        let vocab = Vocab::builtin();
        match (&self.manifest, self.synthetic) {
            (Some(m), _) => Dataset::from_manifest(m, &cfg.model, &vocab),
            (None, Some(n)) => {
                Dataset::synthetic(n, self.data_seed, &self.spec(), &cfg.model, &vocab)
            }
            (None, None) => Err(Error::Config(vec!["pass --manifest or --synthetic".into()])),
        }
    }
}

/// Base configuration: a preset, then a file, then `--key value` overrides.
#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long, default_value = "toy")]
    preset: String,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArgs {
    fn build(&self, overrides: &[(String, String)]) -> Result<Config> {
        let mut cfg = Config::preset(&self.preset)?;
        if let Some(p) = &self.config {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PNG images, masks, manifest).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        side: usize,
        #[arg(long, default_value_t = 0.5)]
        tiny_fraction: f64,
    },
    /// Train and write checkpoints plus `loss.csv` to the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Validation manifest; selects `best.ckpt` by mIoU.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Generate this many validation scenes (data seed + 1).
        #[arg(long, conflicts_with = "val")]
        val_synthetic: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; `--key value` overrides may change training settings only.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset, or a set of prediction masks.
    Eval {
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Manifest of prediction masks, record-aligned with `--manifest`.
        #[arg(long, requires = "manifest", conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        /// Write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Segment one image and write the binary mask as PNG.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        expression: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Finite-difference gradient checks at double precision.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Brute-force equivalence oracles.
    Oracle {
        /// window_attn, cda, metrics or all.
        #[arg(long, default_value = "all")]
        which: String,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train variants under one budget and compare validation metrics.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Generated validation scenes (data seed + 1).
        #[arg(long, default_value_t = 100)]
        val_synthetic: usize,
        /// Variant as `name:key=value,...`; repeatable.
        #[arg(long = "variant", required = true)]
        variants: Vec<String>,
        /// Comma-separated model seeds.
        #[arg(long, default_value = "0")]
        seeds: String,
        /// Write every report as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the trainable parameter count of a configuration.
    Params {
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Pull `--<config key> value` and `--<config key>=value` pairs out of the
/// arguments of commands that build a configuration.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let takes_config = args
        .get(1)
        .is_some_and(|c| matches!(c.as_str(), "train" | "ablate" | "params"));
    if !takes_config {
        return (args, Vec::new());
    }
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if let Some(flag) = a.strip_prefix("--") {
            let (k, inline) = match flag.split_once('=') {
                Some((k, v)) => (k.replace('-', "_"), Some(v.to_string())),
                None => (flag.replace('-', "_"), None),
            };
            if KEYS.contains(&k.as_str()) {
                if let Some(v) = inline.or_else(|| it.next()) {
                    overrides.push((k, v));
                    continue;
                }
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn checked(cfg: Config) -> Result<Config> {
    let v = validate_config(&cfg);
    if v.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::Config(v))
    }
}

fn cmd_train(
    config: &ConfigArgs,
    data: &DataArgs,
    val: Option<&Path>,
    val_synthetic: Option<usize>,
    out: &Path,
    resume: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => {
            let mut tr = Trainer::resume(p)?;
            let mut cfg = tr.config.clone();
            for (k, v) in overrides {
                cfg.set(k, v)?;
            }
            if cfg.model != tr.config.model {
                return Err(Error::Config(vec![
                    "model settings cannot change on resume".into(),
                ]));
            }
            tr.config = checked(cfg)?;
            tr
        }
        None => Trainer::new(&checked(config.build(overrides)?)?)?,
    };
    let cfg = trainer.config.clone();
    let train = data.load(&cfg)?;
    let val = match (val, val_synthetic) {
        (Some(m), _) => Some(Dataset::from_manifest(m, &cfg.model, &Vocab::builtin())?),
        (None, Some(n)) => Some(Dataset::synthetic(
            n,
            data.data_seed + 1,
            &data.spec(),
            &cfg.model,
            &Vocab::builtin(),
        )?),
        (None, None) => None,
    };
    trainer = trainer.with_out_dir(out)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    trainer.fit(&train.bundles, val.as_ref().map(|v| v.bundles.as_slice()))?;
    let last = trainer.log.last();
    println!(
        "trained {} steps on {} samples; last loss {}",
        trainer.opt.step,
        train.len(),
        last.map_or("n/a".to_string(), |r| format!("{:.6}", r.total))
    );
    if let Some(b) = trainer.best_val {
        println!("best validation mIoU {:.4}", b);
    }
    Ok(())
}

fn cmd_eval(
    checkpoint: Option<&Path>,
    data: &DataArgs,
    predictions: Option<&Path>,
    report_path: Option<&Path>,
    threshold: Option<f64>,
) -> Result<()> {
    let rep = match (checkpoint, predictions) {
        (_, Some(p)) => {
            let m = data.manifest.as_deref().expect("clap requires --manifest");
            evaluate_masks(m, p)?
        }
        (Some(c), None) => {
            let ck = load_checkpoint(c)?;
            let ds = data.load(&ck.config)?;
            report(&ck.net, &ds, threshold.unwrap_or(ck.config.train.threshold))?
        }
        (None, None) => {
            return Err(Error::Config(vec![
                "pass --checkpoint or --predictions".into()
            ]))
        }
    };
    print!("{}", rep.table());
    for w in &rep.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(p) = report_path {
        write_text(p, &rep.to_json())?;
    }
    Ok(())
}

fn cmd_predict(
    checkpoint: &Path,
    image: &Path,
    expression: &str,
    out: &Path,
    threshold: Option<f64>,
) -> Result<()> {
    let img = read_image(image)?;
    let ck = load_checkpoint(checkpoint)?;
    let t = threshold.unwrap_or(ck.config.train.threshold);
    let mask = predict_image(&ck.net, &img, expression, &Vocab::builtin(), t)?;
    write_mask(&mask, out)?;
    println!(
        "{} foreground pixels of {}",
        mask.count(),
        mask.height * mask.width
    );
    Ok(())
}

/// Returns whether every check is within tolerance.
fn cmd_gradcheck(module: &str, seed: u64) -> Result<bool> {
    let mut ok = true;
    for r in gradcheck::run(module, seed)? {
        let tol = gradcheck::tolerance(&r.module);
        for g in &r.groups {
            println!(
                "{:<16} {:<48} rel_err {:.3e} a {:.6e} n {:.6e}",
                r.module, g.name, g.rel_err, g.analytic, g.numeric
            );
        }
        let pass = r.max_rel_err() < tol;
        ok &= pass;
        println!(
            "{:<16} max rel_err {:.3e} (tol {:.0e}) {}",
            r.module,
            r.max_rel_err(),
            tol,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn cmd_oracle(which: &str, trials: usize, seed: u64) -> Result<bool> {
    let names: Vec<&str> = match which {
        "all" => vec!["window_attn", "cda", "metrics"],
        w => vec![w],
    };
    let mut ok = true;
    for n in names {
        let o = match n {
            "window_attn" => oracle::run_window_oracle(trials, seed)?,
            "cda" => oracle::run_cda_oracle(trials, seed)?,
            "metrics" => oracle::run_metrics_oracle(trials, seed)?,
            other => {
                return Err(Error::Config(vec![format!(
                    "unknown oracle {other:?}; expected window_attn, cda, metrics or all"
                )]))
            }
        };
        ok &= o.passed();
        println!(
            "{:<12} trials {:>4} max_abs_diff {:.3e} tol {:.0e} {:.2}s {}",
            o.name,
            o.trials,
            o.max_abs_diff,
            o.tolerance,
            o.elapsed.as_secs_f64(),
            if o.passed() { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn cmd_ablate(
    config: &ConfigArgs,
    data: &DataArgs,
    val_synthetic: usize,
    variants: &[String],
    seeds: &str,
    report_path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<()> {
    let base = checked(config.build(overrides)?)?;
    let variants: Vec<Variant> = variants
        .iter()
        .map(|v| Variant::parse(v))
        .collect::<Result<_>>()?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(vec![format!("bad seed {s:?}")]))
        })
        .collect::<Result<_>>()?;
    let train = data.load(&base)?;
    let val = Dataset::synthetic(
        val_synthetic,
        data.data_seed + 1,
        &data.spec(),
        &base.model,
        &Vocab::builtin(),
    )?;
    let runs = ablate(&base, &variants, &train, &val, &seeds)?;
    print!("{}", ablation_table(&runs));
    if let Some(p) = report_path {
        let doc: Vec<serde_json::Value> = runs
            .iter()
            .map(|r| {
                serde_json::json!({
                    "variant": r.variant,
                    "seed": r.seed,
                    "report": r.report,
                })
            })
            .collect();
        write_text(p, &serde_json::to_string_pretty(&doc).expect("json"))?;
    }
    Ok(())
}

fn cmd_params(config: &ConfigArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = checked(config.build(overrides)?)?;
    let net = CsiNet::new(&cfg.model, candle_core::DType::F32)?;
    println!("{}", net.count_params());
    Ok(())
}

fn cmd_generate(
    out: &Path,
    count: usize,
    seed: u64,
    side: usize,
    tiny_fraction: f64,
) -> Result<()> {
    let spec = SceneSpec {
        side,
        tiny_fraction,
        ..SceneSpec::default()
    };
    let samples = generate_set(seed, count, &spec)?;
    let manifest = write_dataset(&samples, out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<bool> {
    match cli.command {
        Command::Generate {
            out,
            count,
            seed,
            side,
            tiny_fraction,
        } => cmd_generate(&out, count, seed, side, tiny_fraction)?,
        Command::Train {
            config,
            data,
            val,
            val_synthetic,
            out,
            resume,
        } => cmd_train(
            &config,
            &data,
            val.as_deref(),
            val_synthetic,
            &out,
            resume.as_deref(),
            overrides,
        )?,
        Command::Eval {
            checkpoint,
            data,
            predictions,
            report,
            threshold,
        } => cmd_eval(
            checkpoint.as_deref(),
            &data,
            predictions.as_deref(),
            report.as_deref(),
            threshold,
        )?,
        Command::Predict {
            checkpoint,
            image,
            expression,
            out,
            threshold,
        } => cmd_predict(&checkpoint, &image, &expression, &out, threshold)?,
        Command::Gradcheck { module, seed } => return cmd_gradcheck(&module, seed),
        Command::Oracle {
            which,
            trials,
            seed,
        } => return cmd_oracle(&which, trials, seed),
        Command::Ablate {
            config,
            data,
            val_synthetic,
            variants,
            seeds,
            report,
        } => cmd_ablate(
            &config,
            &data,
            val_synthetic,
            &variants,
            &seeds,
            report.as_deref(),
            overrides,
        )?,
        Command::Params { config } => cmd_params(&config, overrides)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli, &overrides) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
