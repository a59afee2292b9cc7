use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use deco_core::baselines::{pretrain_registration, select_tau};
use deco_core::config::RunConfig;
use deco_core::dataset::{Dataset, Split};
use deco_core::experiment::{
    evaluate_network, evaluate_tv, evaluate_zero_filled, reconstruct_pair_side, run_ablation, write_pgm16, Method,
    RunManifest,
};
use deco_core::metrics::{summarize, write_rows, write_summary};
use deco_core::tensor::write_dclt;
use deco_core::trainer::{load_checkpoint, load_reconstruction, train, write_metrics_csv, ModelState, TrainMode};

#[derive(Parser)]
#[command(name = "deco", version, about = "Deformation-compensated self-supervised MRI reconstruction")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; keys are dataset.*, train.*, loss.*, model.*, tv.*, ablation.*
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.iterations=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a paired dataset with oracle images and fields.
    SynthData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the reconstruction (and registration) networks.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for `--set train.mode=...`.
        #[arg(long)]
        mode: Option<String>,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Apply a checkpoint's reconstruction network to one split.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a method on one split and write the per-image metrics CSV.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// zero_filled, tv, or any learned method (needs --checkpoint).
        #[arg(long, default_value = "decolearn")]
        method: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all six methods for each configured acceleration and deformation strength.
    Ablation {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn synth_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = Dataset::synthesize(&cfg.dataset_spec())?;
    ds.save(out)?;
    RunManifest::new("synth-data", cfg).write(out)?;
    println!(
        "wrote {} train, {} val, {} test pairs to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

fn run_train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let ds = load_data(data)?;
    let tcfg = cfg.train_config(cfg.train.mode)?;
    let state = match resume {
        Some(dir) => {
            let (state, _) = load_checkpoint(dir).with_context(|| format!("loading checkpoint {}", dir.display()))?;
            state
        }
        None => {
            let state = ModelState::init(&tcfg);
            if tcfg.mode == TrainMode::A2aPretrainedReg {
                let reg = pretrain_registration(&ds.train, &cfg.pretrain_config())?;
                state.with_registration(reg, tcfg.lr_reg)
            } else {
                state
            }
        }
    };
    let ckpt = out.join("checkpoints");
    let outcome = train(&ds.train, &ds.val, &tcfg, state, Some(&ckpt))?;
    fs::create_dir_all(out)?;
    write_metrics_csv(fs::File::create(out.join("metrics.csv"))?, &outcome.metrics)?;
    let mut manifest = RunManifest::new("train", cfg);
    if let Some(p) = outcome.val_psnr {
        manifest.selected.push(("val.psnr_db".into(), p));
    }
    manifest.write(out)?;
    match outcome.val_psnr {
        Some(p) => println!("trained {} to step {}; val PSNR {p:.3} dB", tcfg.mode.name(), outcome.state.step),
        None => println!("trained {} to step {}", tcfg.mode.name(), outcome.state.step),
    }
    Ok(())
}

fn reconstruct(checkpoint: &Path, data: &Path, split: Split, out: &Path) -> Result<()> {
    let net = load_reconstruction(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let ds = load_data(data)?;
    fs::create_dir_all(out)?;
    for (i, p) in ds.split(split).iter().enumerate() {
        for (moving, tag) in [(false, "r"), (true, "m")] {
            let x = reconstruct_pair_side(&net, p, moving)?;
            write_dclt(out.join(format!("{i:04}_{tag}.dclt")), &x)?;
            write_pgm16(fs::File::create(out.join(format!("{i:04}_{tag}.pgm")))?, &x)?;
        }
    }
    println!("reconstructed {} pairs into {}", ds.split(split).len(), out.display());
    Ok(())
}

fn evaluate(cfg: &RunConfig, data: &Path, method: Method, checkpoint: Option<&Path>, split: Split, out: &Path) -> Result<()> {
    let ds = load_data(data)?;
    let pairs = ds.split(split);
    let (acc, sigma) = (ds.spec.acceleration, ds.spec.field.sigma);
    let mut manifest = RunManifest::new("evaluate", cfg);
    let rows = match method {
        Method::ZeroFilled => evaluate_zero_filled(pairs, acc, sigma)?,
        Method::Tv => {
            let tau = match cfg.tv.tau {
                Some(t) => t,
                None => select_tau(&ds.val, &cfg.tv_config(1.0), &cfg.tv.tau_grid)?.0,
            };
            manifest.selected.push(("tv.tau".into(), tau));
            evaluate_tv(pairs, &cfg.tv_config(tau), acc, sigma)?
        }
        _ => {
            let Some(ck) = checkpoint else {
                bail!("method {} needs --checkpoint", method.name());
            };
            let net = load_reconstruction(ck).with_context(|| format!("loading {}", ck.display()))?;
            evaluate_network(&net, pairs, method.name(), acc, sigma)?
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_rows(fs::File::create(out)?, &rows)?;
    let summary = summarize(&rows);
    write_summary(fs::File::create(out.with_extension("summary.csv"))?, &summary)?;
    manifest.write(out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")))?;
    for s in &summary {
        println!("{}: PSNR {:.3} ± {:.3} dB, SSIM {:.4} ± {:.4} (n={})", s.method, s.psnr_mean, s.psnr_std, s.ssim_mean, s.ssim_std, s.count);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.common.overrides.clone();
    if let Command::Train { mode: Some(m), .. } = &cli.cmd {
        overrides.push(format!("train.mode={m}"));
    }
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides).context("resolving configuration")?;
    match cli.cmd {
        Command::SynthData { out } => synth_data(&cfg, &out),
        Command::Train { data, out, resume, .. } => run_train(&cfg, &data, &out, resume.as_deref()),
        Command::Reconstruct { checkpoint, data, split, out } => reconstruct(&checkpoint, &data, split.into(), &out),
        Command::Evaluate { data, method, checkpoint, split, out } => {
            let m = Method::parse(&method)?;
            evaluate(&cfg, &data, m, checkpoint.as_deref(), split.into(), &out)
        }
        Command::Ablation { out } => {
            let (_, table) = run_ablation(&cfg, Some(&out))?;
            print!("{table}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
