//! Command-line front end.
//!
//! Every subcommand prints its resolved configuration as JSON on standard
//! error and the path of each artifact it writes on standard output, one per
//! line. Exit status is 0 on success, 2 for configuration or input problems
//! and 3 for failures during a run.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{config, Error, Result};
use crate::metrics::det_csv;
use crate::ocgmm::EmConfig;
use crate::pipeline::{
    embeddings_csv, evaluate, extract_embeddings, fit_one_class, load_checkpoint, load_gmm, run_protocol,
    save_checkpoint, save_gmm, train, RunConfig, RunReport, TrainConfig,
};
use crate::protocol::{generate_synthetic, load_dataset, save_dataset, split_protocol, Dataset, GeneratorConfig, Protocol, ProtocolSplit, Sample};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "occl", version, about = "One-class contrastive presentation attack detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-channel dataset.
    GenData {
        /// Generator config (JSON). Defaults to the standard preset.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed for the standard preset when no config is given.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the embedding network on a protocol's train fold.
    Train {
        #[command(flatten)]
        split: SplitArgs,
        /// Training config (JSON). Missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated channel subset.
        #[arg(long)]
        channels: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write embeddings of every sample as CSV.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the one-class GMM on train-fold bonafide embeddings.
    FitGmm {
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long)]
        model: PathBuf,
        /// EM config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate with a dev-anchored threshold and write the report.
    Eval {
        #[command(flatten)]
        scored: ScoredArgs,
        /// Report JSON path; a text table is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the eval-fold DET curve as CSV.
    Det {
        #[command(flatten)]
        scored: ScoredArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, train, fit and evaluate in one go.
    RunProtocol {
        /// Run config (JSON) with `generator`, `train`, `em`, `target_bpcer`
        /// and `split_seed`.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        protocol: Protocol,
        /// Comma-separated channel subset; repeat for one run per subset.
        #[arg(long)]
        channels: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "grandtest")]
    protocol: Protocol,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args, Debug)]
struct ScoredArgs {
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    gmm: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    target_bpcer: f64,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// exit status.
pub fn main_with_args<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Parse { .. } | Error::Load(_) | Error::Json(_) | Error::Split(_) => {
            EXIT_CONFIG
        }
        Error::Training(_) | Error::Fit(_) | Error::Metric(_) | Error::Io(_) => EXIT_RUNTIME,
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config(format!("{what} file not found: {}", path.display())))
    }
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    require(path, what)?;
    serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| config(format!("{what} {}: {e}", path.display())))
}

fn echo<T: Serialize>(what: &str, value: &T) -> Result<()> {
    eprintln!("{what}: {}", serde_json::to_string(value)?);
    Ok(())
}

fn parse_channels(list: &str) -> Result<Vec<String>> {
    let names: Vec<String> = list.split(',').map(|s| s.trim().to_string()).collect();
    if names.iter().any(String::is_empty) {
        return Err(config(format!("bad channel list `{list}`")));
    }
    Ok(names)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => Ok(fs::create_dir_all(p)?),
        _ => Ok(()),
    }
}

fn load_split(args: &SplitArgs) -> Result<(Dataset, ProtocolSplit)> {
    require(&args.data, "dataset")?;
    let data = load_dataset(&args.data)?;
    let split = split_protocol(&data, &args.protocol, args.split_seed)?;
    echo(
        "split",
        &serde_json::json!({
            "data": args.data,
            "protocol": args.protocol,
            "split_seed": args.split_seed,
            "train": split.train.len(),
            "dev": split.dev.len(),
            "eval": split.eval.len(),
        }),
    )?;
    Ok((data, split))
}

fn dispatch(cmd: Command) -> Result<Vec<PathBuf>> {
    match cmd {
        Command::GenData { config, seed, out } => {
            let cfg = match &config {
                Some(p) => read_json::<GeneratorConfig>(p, "generator config")?,
                None => GeneratorConfig::standard(seed),
            };
            echo("generator", &cfg)?;
            let data = generate_synthetic(&cfg)?;
            ensure_parent(&out)?;
            save_dataset(&data, &out)?;
            Ok(vec![out])
        }
        Command::Train {
            split,
            config,
            channels,
            out,
        } => {
            let mut cfg = match &config {
                Some(p) => read_json::<TrainConfig>(p, "training config")?,
                None => TrainConfig::default(),
            };
            if let Some(list) = &channels {
                cfg.channel_subset = Some(parse_channels(list)?);
            }
            cfg.validate()?;
            echo("train", &cfg)?;
            let (data, split) = load_split(&split)?;
            let (ckpt, _) = train(&split, &data, &cfg)?;
            ensure_parent(&out)?;
            save_checkpoint(&ckpt, &out)?;
            Ok(vec![out])
        }
        Command::Embed { model, data, out } => {
            require(&model, "model")?;
            require(&data, "dataset")?;
            let ckpt = load_checkpoint(&model)?;
            echo("network", &ckpt.network.config)?;
            let data = load_dataset(&data)?;
            let all: Vec<&Sample> = data.samples.iter().collect();
            let rows = extract_embeddings(&ckpt, &all)?;
            ensure_parent(&out)?;
            fs::write(&out, embeddings_csv(&rows))?;
            Ok(vec![out])
        }
        Command::FitGmm {
            split,
            model,
            config,
            out,
        } => {
            require(&model, "model")?;
            let em = match &config {
                Some(p) => read_json::<EmConfig>(p, "EM config")?,
                None => EmConfig::default(),
            };
            em.validate()?;
            echo("em", &em)?;
            let ckpt = load_checkpoint(&model)?;
            let (data, split) = load_split(&split)?;
            let (gmm, _) = fit_one_class(&ckpt, &split, &data, &em)?;
            ensure_parent(&out)?;
            save_gmm(&gmm, &out)?;
            Ok(vec![out])
        }
        Command::Eval { scored, out } => {
            let (report, _) = scored_report(&scored)?;
            ensure_parent(&out)?;
            let mut json = serde_json::to_vec_pretty(&report)?;
            json.push(b'\n');
            fs::write(&out, json)?;
            let txt = out.with_extension("txt");
            let title = format!("{} [{}]", report.protocol, report.channels.join(","));
            fs::write(&txt, report.metrics.to_table(&title))?;
            Ok(vec![out, txt])
        }
        Command::Det { scored, out } => {
            let (report, _) = scored_report(&scored)?;
            ensure_parent(&out)?;
            fs::write(&out, det_csv(&report.metrics.det_points))?;
            Ok(vec![out])
        }
        Command::RunProtocol {
            config,
            protocol,
            channels,
            out,
        } => {
            let cfg: RunConfig = read_json(&config, "run config")?;
            cfg.train.validate()?;
            cfg.em.validate()?;
            let subsets = channels
                .iter()
                .map(|c| parse_channels(c).map(Some))
                .collect::<Result<Vec<_>>>()?;
            echo(
                "run",
                &serde_json::json!({
                    "protocol": protocol,
                    "channels": subsets,
                    "generator": cfg.generator_config(),
                    "config": cfg,
                }),
            )?;
            run_protocol(&cfg, &protocol, &subsets, &out)
        }
    }
}

fn scored_report(args: &ScoredArgs) -> Result<(RunReport, ProtocolSplit)> {
    require(&args.model, "model")?;
    let gmm_path = args
        .gmm
        .as_ref()
        .ok_or_else(|| config("missing input: --gmm <FILE> is required"))?;
    require(gmm_path, "GMM")?;
    if !(0.0..=1.0).contains(&args.target_bpcer) {
        return Err(config(format!("target BPCER must be in [0, 1], got {}", args.target_bpcer)));
    }
    let ckpt = load_checkpoint(&args.model)?;
    let gmm = load_gmm(gmm_path)?;
    echo(
        "eval",
        &serde_json::json!({
            "model": args.model,
            "gmm": gmm_path,
            "target_bpcer": args.target_bpcer,
            "network": ckpt.network.config,
        }),
    )?;
    let (data, split) = load_split(&args.split)?;
    let metrics = evaluate(&ckpt, &gmm, &split, &data, args.target_bpcer)?;
    let report = RunReport {
        protocol: args.split.protocol.clone(),
        channels: ckpt.network.config.channels.clone(),
        selected_epoch: ckpt.selected_epoch,
        metrics,
    };
    Ok((report, split))
}
