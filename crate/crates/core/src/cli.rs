//! Command-line front end. Every command is a thin wrapper over library calls.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::KeyValues;
use crate::data::{load_image, save_image, Dataset, DegradationTag};
use crate::error::{Error, Result};
use crate::metrics::MetricSpace;
use crate::model::checkpoint::Checkpoint;
use crate::model::{Model, ModelConfig};
use crate::train::{
    evaluate, load_training_checkpoint, train, OutputDir, TrainConfig, STATE_PREFIXES,
};
use crate::verify::{self, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "restormixer",
    version,
    about = "Image restoration with mixed conv / scan / attention blocks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a metrics log.
    Train {
        /// `key = value` file with model and training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Folder with degraded/ and clean/ PNGs, or
        /// `synthetic:<tag>:<count>:<size>[:<seed>]`.
        #[arg(long)]
        data: String,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override one setting, e.g. `--set total_steps=500`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Restore one PNG or every PNG in a folder.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a checkpoint on paired data.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: String,
        /// Compute metrics on the luminance channel.
        #[arg(long)]
        ycbcr: bool,
    },
    /// Run the built-in gradient and oracle checks.
    Verify {
        #[arg(long, default_value = "all")]
        suite: Suite,
    },
    /// Itemized parameter and FLOP counts.
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Input extent as HxW.
        #[arg(long, default_value = "256x256")]
        hw: String,
        #[arg(long, default_value_t = 1)]
        flops_per_mac: u64,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) => EXIT_IO,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Parse `argv` (program name first), run the command, return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn print_config(kv: &KeyValues) {
    println!("# resolved config");
    print!("{}", kv.to_text());
    println!();
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<KeyValues> {
    let mut kv = match path {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
        kv.set(k.trim(), v.trim());
    }
    let known: Vec<&str> = ModelConfig::KEYS
        .iter()
        .chain(TrainConfig::KEYS)
        .copied()
        .collect();
    kv.check_known(&known)?;
    Ok(kv)
}

/// A folder of pairs or a `synthetic:` specification.
pub fn open_dataset(spec: &str) -> Result<Dataset> {
    let Some(rest) = spec.strip_prefix("synthetic:") else {
        return Dataset::from_dir(Path::new(spec));
    };
    let parts: Vec<&str> = rest.split(':').collect();
    let bad = || {
        Error::Config(format!(
            "{spec:?}: expected synthetic:<tag>:<count>:<size>[:<seed>]"
        ))
    };
    if !(3..=4).contains(&parts.len()) {
        return Err(bad());
    }
    let tag: DegradationTag = parts[0]
        .parse()
        .map_err(|e| Error::Config(format!("{spec:?}: {e}")))?;
    let count: usize = parts[1].parse().map_err(|_| bad())?;
    let size: usize = parts[2].parse().map_err(|_| bad())?;
    let seed: u64 = parts
        .get(3)
        .map_or(Ok(0), |s| s.parse())
        .map_err(|_| bad())?;
    Dataset::synthetic(count, size, size, &tag, seed)
}

fn parse_hw(s: &str) -> Result<(usize, usize)> {
    s.split_once('x')
        .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
        .filter(|&(h, w)| h > 0 && w > 0)
        .ok_or_else(|| Error::Config(format!("--hw {s:?} is not HxW")))
}

fn model_from_checkpoint(path: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(path)?;
    print_config(&KeyValues::parse(&ckpt.config_text)?);
    Model::from_checkpoint(&ckpt, STATE_PREFIXES)
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Train {
            config,
            data,
            out,
            resume,
            overrides,
        } => {
            let (mut model, cfg, state) = match resume {
                Some(path) => {
                    if config.is_some() || !overrides.is_empty() {
                        return Err(Error::Config(
                            "--resume takes its settings from the checkpoint".into(),
                        ));
                    }
                    let (m, c, s) = load_training_checkpoint(&path)?;
                    (m, c, Some(s))
                }
                None => {
                    let kv = load_config(config.as_deref(), &overrides)?;
                    (
                        Model::new(ModelConfig::from_kv(&kv)?)?,
                        TrainConfig::from_kv(&kv)?,
                        None,
                    )
                }
            };
            let mut kv = model.config.to_kv();
            kv.merge(&cfg.to_kv());
            print_config(&kv);
            let split = open_dataset(&data)?.split(cfg.holdout)?;
            println!(
                "{} training pairs, {} held out, {} parameters",
                split.train.len(),
                split.test.len(),
                model.store.num_scalars()
            );
            let (report, _) = train(
                &mut model,
                &split,
                &cfg,
                state,
                &OutputDir(Some(out.clone())),
            )?;
            if let Some((step, ev)) = report.evals.last() {
                println!("final evaluation at step {step}:\n{ev}");
            }
            if !report.skipped.is_empty() {
                println!(
                    "{} steps skipped for non-finite values",
                    report.skipped.len()
                );
            }
            println!(
                "best held-out PSNR {:.3} dB; outputs in {}",
                report.best_psnr,
                out.display()
            );
            Ok(EXIT_OK)
        }
        Command::Infer {
            ckpt,
            input,
            output,
        } => {
            let model = model_from_checkpoint(&ckpt)?;
            let files: Vec<PathBuf> = if input.is_dir() {
                let mut v: Vec<PathBuf> = std::fs::read_dir(&input)
                    .map_err(|e| Error::io(&input, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                    .collect();
                v.sort();
                v
            } else {
                vec![input.clone()]
            };
            std::fs::create_dir_all(&output).map_err(|e| Error::io(&output, e))?;
            for f in &files {
                let img = load_image(f)?;
                let (h, w) = (img.shape()[1], img.shape()[2]);
                let restored = model.restore(&img.reshape(&[1, 3, h, w])?)?;
                let dest = output.join(f.file_name().expect("file path"));
                save_image(&restored.map(|v| v.clamp(0.0, 1.0)), &dest)?;
                println!("{} -> {}", f.display(), dest.display());
            }
            Ok(EXIT_OK)
        }
        Command::Eval { ckpt, data, ycbcr } => {
            let model = model_from_checkpoint(&ckpt)?;
            let space = if ycbcr {
                MetricSpace::Y
            } else {
                MetricSpace::Rgb
            };
            let report = evaluate(&model, &open_dataset(&data)?, space)?;
            println!("{report}");
            let finite = report
                .per_image
                .iter()
                .all(|s| !s.psnr.is_nan() && !s.ssim.is_nan());
            Ok(if finite { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Verify { suite } => {
            let mut kv = KeyValues::default();
            kv.set("suite", format!("{suite:?}").to_lowercase());
            print_config(&kv);
            let checks = verify::run(suite);
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Count {
            config,
            hw,
            flops_per_mac,
        } => {
            let kv = load_config(config.as_deref(), &[])?;
            let model_cfg = ModelConfig::from_kv(&kv)?;
            print_config(&model_cfg.to_kv());
            let (h, w) = parse_hw(&hw)?;
            println!("{}", Model::new(model_cfg)?.flop_count(h, w, flops_per_mac));
            Ok(EXIT_OK)
        }
    }
}
