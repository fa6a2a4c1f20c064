//! Command-line surface: baseline training, pushing, pruning, growing, the
//! full pipeline, and report generation — every run writes a manifest
//! (config snapshot, seed, code version) sufficient to reproduce it.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pushprune::config::Config;
use pushprune::data::{load_checkpoint, load_mnist, save_checkpoint, synthetic, Dataset};
use pushprune::error::Error;
use pushprune::grow::{grow, TrainingEvaluator};
use pushprune::nn::{modular_conv_classifier, parse_netspec, write_netspec, BranchWidths, Network, NetworkSpec};
use pushprune::pipeline;
use pushprune::train::{evaluate_accuracy, train, Phase, StepLog};

#[derive(Parser)]
#[command(name = "pushprune", version, about = "Structural network compression by pushing discriminants into neurons and pruning the rest")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (defaults to $PUSHPRUNE_OUT_DIR or ./runs).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Accuracy gate override for the push-prune loop.
    #[arg(long)]
    t_acc: Option<f64>,
    /// Parameter fraction removed per prune iteration.
    #[arg(long)]
    step_fraction: Option<f64>,
    /// Retained-power fraction for the final-latent mask.
    #[arg(long)]
    rho: Option<f64>,
    /// Epoch budget of the command's main phase.
    #[arg(long)]
    epochs: Option<usize>,
    /// Training epochs per growth candidate.
    #[arg(long)]
    stage_budget: Option<usize>,
}

#[derive(Args, Clone)]
struct DataOpts {
    /// Directory with the four MNIST IDX files (gzipped or raw).
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Synthetic task id: gaussian-blobs | planted-channel-images |
    /// striped-textures.
    #[arg(long)]
    synthetic: Option<String>,
    /// Sample count for synthetic tasks.
    #[arg(long, default_value_t = 3000)]
    samples: usize,
}

#[derive(Args, Clone)]
struct NetOpts {
    /// Netspec text file describing the architecture.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Fully-connected shorthand: comma-separated hidden widths
    /// (input/classes come from the dataset), e.g. 1024,1024,1024,1024,32.
    #[arg(long)]
    fc: Option<String>,
    /// Use the small branched-module template (for growing experiments).
    #[arg(long, default_value_t = false)]
    toy_template: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Baseline training with cross-entropy and L2 only.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        data: DataOpts,
        #[command(flatten)]
        net: NetOpts,
    },
    /// One pushing phase on an existing checkpoint.
    Push {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        data: DataOpts,
        /// Model to continue from.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// One prune-and-retrain iteration on a pushed checkpoint.
    Prune {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        data: DataOpts,
        /// Pushed model to prune.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Greedy base-net growing on the branched-module template.
    Grow {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        data: DataOpts,
        #[command(flatten)]
        net: NetOpts,
        /// Growth rounds to attempt.
        #[arg(long)]
        rounds: Option<usize>,
    },
    /// The full loop: baseline, then push → gate → prune until done.
    Pipeline {
        #[command(flatten)]
        common: CommonOpts,
        #[command(flatten)]
        data: DataOpts,
        #[command(flatten)]
        net: NetOpts,
    },
    /// Emit report CSVs (covariances, discriminant tables, accuracy curve,
    /// layerwise reductions) from a pipeline run directory.
    Report {
        /// Pipeline run directory containing manifest.json.
        #[arg(long)]
        run_dir: PathBuf,
        /// Where to write the report files.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print the effective configuration after file and flag overrides.
    Config {
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn build_config(common: &CommonOpts) -> Result<Config, Error> {
    let mut cfg = match &common.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(t) = common.t_acc {
        cfg.set("t_acc", &t.to_string())?;
    }
    if let Some(s) = common.step_fraction {
        cfg.set("step_fraction", &s.to_string())?;
    }
    if let Some(r) = common.rho {
        cfg.set("rho", &r.to_string())?;
    }
    if let Some(b) = common.stage_budget {
        cfg.set("grow_budget_epochs", &b.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &CommonOpts) -> PathBuf {
    common
        .out_dir
        .clone()
        .or_else(|| std::env::var_os("PUSHPRUNE_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_data(opts: &DataOpts, cfg: &Config) -> Result<Dataset, Error> {
    match (&opts.mnist_dir, &opts.synthetic) {
        (Some(dir), None) => load_mnist(dir),
        (None, Some(task)) => synthetic(task, opts.samples, cfg.seed),
        _ => Err(Error::Contract(
            "exactly one of --mnist-dir and --synthetic is required".into(),
        )),
    }
}

fn toy_template(data: &Dataset) -> Result<NetworkSpec, Error> {
    let shape = data.sample_shape();
    if shape.len() != 3 {
        return Err(Error::Contract("toy template needs image data".into()));
    }
    let widths = BranchWidths { b1x1: 4, b3x3_reduce: 3, b3x3: 6, bdbl_reduce: 2, bdbl: 4, bpool_proj: 2 };
    Ok(modular_conv_classifier(
        (shape[0], shape[1], shape[2]),
        8,
        &[widths, widths, widths],
        &[1, 1, 1],
        data.classes,
    ))
}

fn build_spec(net: &NetOpts, data: &Dataset) -> Result<NetworkSpec, Error> {
    if let Some(path) = &net.spec {
        return parse_netspec(&std::fs::read_to_string(path)?);
    }
    if let Some(hidden) = &net.fc {
        let widths: Result<Vec<usize>, _> = hidden.split(',').map(|t| t.trim().parse()).collect();
        let widths = widths.map_err(|_| Error::Contract(format!("bad --fc list '{hidden}'")))?;
        let input: usize = data.sample_shape().iter().product();
        return Ok(NetworkSpec::fc_classifier(input, &widths, data.classes));
    }
    if net.toy_template {
        return toy_template(data);
    }
    Err(Error::Contract(
        "an architecture is required: --spec, --fc or --toy-template".into(),
    ))
}

fn write_run_manifest(dir: &Path, cfg: &Config, extra: serde_json::Value) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    let manifest = serde_json::json!({
        "code_version": env!("CARGO_PKG_VERSION"),
        "config_hash": format!("{:016x}", cfg.hash()),
        "seed": cfg.seed,
        "effective_config": cfg.dump_effective(),
        "result": extra,
    });
    serde_json::to_writer_pretty(std::fs::File::create(dir.join("run.json"))?, &manifest)
        .map_err(|e| Error::Io(e.into()))?;
    Ok(())
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { common, data, net } => {
            let mut cfg = build_config(&common)?;
            if let Some(e) = common.epochs {
                cfg.set("baseline_epochs", &e.to_string())?;
            }
            let dataset = load_data(&data, &cfg)?;
            let spec = build_spec(&net, &dataset)?;
            let mut network = Network::build(spec, cfg.seed)?;
            let dir = out_dir(&common);
            std::fs::create_dir_all(&dir)?;
            let out = train(
                &mut network,
                &dataset,
                &cfg,
                Phase { epochs: cfg.baseline_epochs, push: false },
                cfg.seed,
                None,
            )?;
            save_checkpoint(&network, &dir.join("base.ckpt"))?;
            let test_acc = evaluate_accuracy(&mut network, &dataset.test, 256)?;
            let stats = pipeline::latent_stats(&mut network, &dataset, &cfg)?;
            pushprune::stats::write_matrix_csv(&dir.join("base_cov.csv"), &stats.scatter.sigma_a)?;
            pushprune::stats::write_spectrum_csv(&dir.join("base_spectrum.csv"), &stats.spectrum)?;
            write_run_manifest(
                &dir,
                &cfg,
                serde_json::json!({
                    "val_accuracy": out.final_val_accuracy,
                    "test_accuracy": test_acc,
                    "params": network.param_count(),
                }),
            )?;
            println!(
                "baseline: val {:.4}, test {:.4}, {} params → {}",
                out.final_val_accuracy,
                test_acc,
                network.param_count(),
                dir.display()
            );
        }
        Command::Push { common, data, checkpoint } => {
            let mut cfg = build_config(&common)?;
            if let Some(e) = common.epochs {
                cfg.set("push_epochs", &e.to_string())?;
            }
            let dataset = load_data(&data, &cfg)?;
            let mut network = load_checkpoint(&checkpoint)?;
            let dir = out_dir(&common);
            std::fs::create_dir_all(&dir)?;
            let mut log = StepLog::create(&dir.join("push_log.csv"))?;
            let (out, stats) = pipeline::push(&mut network, &dataset, &cfg, cfg.seed, Some(&mut log))?;
            save_checkpoint(&network, &dir.join("pushed.ckpt"))?;
            pushprune::stats::write_matrix_csv(&dir.join("pushed_cov.csv"), &stats.scatter.sigma_a)?;
            pushprune::stats::write_spectrum_csv(&dir.join("pushed_spectrum.csv"), &stats.spectrum)?;
            write_run_manifest(
                &dir,
                &cfg,
                serde_json::json!({
                    "val_accuracy": out.final_val_accuracy,
                    "total_power": stats.spectrum.total_power(),
                    "top2_fraction": stats.spectrum.accumulated_fraction(2),
                }),
            )?;
            println!(
                "pushed: val {:.4}, Σv {:.3e}, top-2 fraction {:.3} → {}",
                out.final_val_accuracy,
                stats.spectrum.total_power(),
                stats.spectrum.accumulated_fraction(2),
                dir.display()
            );
        }
        Command::Prune { common, data, checkpoint } => {
            let mut cfg = build_config(&common)?;
            if let Some(e) = common.epochs {
                cfg.set("retrain_epochs", &e.to_string())?;
            }
            let dataset = load_data(&data, &cfg)?;
            let network = load_checkpoint(&checkpoint)?;
            let dir = out_dir(&common);
            std::fs::create_dir_all(&dir)?;
            let (pruned, info) = pipeline::prune_iteration(&network, &dataset, &cfg, cfg.seed)?;
            save_checkpoint(&pruned, &dir.join("pruned.ckpt"))?;
            pushprune::deconv::write_scores_csv(&dir.join("scores.csv"), &network, &info.scores)?;
            serde_json::to_writer_pretty(
                std::fs::File::create(dir.join("prune.json"))?,
                &info.report,
            )
            .map_err(|e| Error::Io(e.into()))?;
            write_run_manifest(
                &dir,
                &cfg,
                serde_json::json!({
                    "params_before": info.report.params_before,
                    "params_after": info.report.params_after,
                    "retrain_val_accuracy": info.retrain.final_val_accuracy,
                }),
            )?;
            println!(
                "pruned: {} → {} params, retrained val {:.4} → {}",
                info.report.params_before,
                info.report.params_after,
                info.retrain.final_val_accuracy,
                dir.display()
            );
        }
        Command::Grow { common, data, net, rounds } => {
            let cfg = build_config(&common)?;
            let dataset = load_data(&data, &cfg)?;
            let spec = if net.spec.is_some() || net.fc.is_some() {
                build_spec(&net, &dataset)?
            } else {
                toy_template(&dataset)?
            };
            let dir = out_dir(&common);
            std::fs::create_dir_all(&dir)?;
            let mut evaluator = TrainingEvaluator { data: &dataset, cfg: &cfg };
            let rounds = rounds.unwrap_or(cfg.grow_rounds);
            let outcome = grow(&spec, rounds, &mut evaluator, cfg.seed, cfg.grow_delta)?;
            std::fs::write(dir.join("grown.netspec"), write_netspec(&outcome.spec))?;
            serde_json::to_writer_pretty(
                std::fs::File::create(dir.join("growth_history.json"))?,
                &outcome.history,
            )
            .map_err(|e| Error::Io(e.into()))?;
            write_run_manifest(
                &dir,
                &cfg,
                serde_json::json!({
                    "rounds_run": outcome.rounds_run,
                    "stage_sizes": outcome.spec.stage_sizes(),
                }),
            )?;
            println!(
                "grown to stages {:?} in {} round(s) → {}",
                outcome.spec.stage_sizes(),
                outcome.rounds_run,
                dir.display()
            );
        }
        Command::Pipeline { common, data, net } => {
            let mut cfg = build_config(&common)?;
            if let Some(e) = common.epochs {
                cfg.set("baseline_epochs", &e.to_string())?;
            }
            let dataset = load_data(&data, &cfg)?;
            let spec = build_spec(&net, &dataset)?;
            let network = Network::build(spec, cfg.seed)?;
            let dir = out_dir(&common);
            let summary = pipeline::run(network, &dataset, &cfg, &dir)?;
            write_run_manifest(
                &dir,
                &cfg,
                serde_json::json!({ "iterations": summary.manifest.iterations.len() }),
            )?;
            println!(
                "pipeline finished: {} iteration(s), manifest at {}",
                summary.manifest.iterations.len(),
                summary.manifest_path.display()
            );
        }
        Command::Report { run_dir, out_dir: dest } => {
            let dest = dest
                .or_else(|| std::env::var_os("PUSHPRUNE_OUT_DIR").map(PathBuf::from))
                .unwrap_or_else(|| run_dir.join("report"));
            pushprune::report::full_report(&run_dir, &dest)?;
            println!("report written to {}", dest.display());
        }
        Command::Config { common } => {
            let cfg = build_config(&common)?;
            print!("{}", cfg.dump_effective());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
