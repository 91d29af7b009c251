//! `hallucinet` command-line runner.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 runtime
//! error. Log verbosity comes from `HALLUCINET_LOG` (default `info`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hallucinet::data::{write_hnim, write_manifest, Manifest, ManifestEntry};
use hallucinet::experiment::{
    load_checkpoint_model, run_experiment, run_sweep, with_jobs, AggregateRow, DatasetSource,
    ExperimentConfig,
};
use hallucinet::pipeline::{evaluate_with, prepare, write_metrics_csv, Metrics};
use hallucinet::{Error, ErrorKind, Modality};

#[derive(Parser, Debug)]
#[command(
    name = "hallucinet",
    version,
    about = "Modality hallucination by generalized distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; overrides `distillation.seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the four-step pipeline `n_runs` times and aggregate.
    Run {
        #[command(flatten)]
        common: Common,
        /// Parallel runs (0 = one per core).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the `[sweep]` section of a config.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a checkpoint on the config's dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Modalities to feed (1, 2 or both). Defaults to what the model needs.
        #[arg(long, value_delimiter = ',')]
        modality: Vec<u32>,
        #[arg(long, value_enum, default_value_t = EvalSplit::Test)]
        split: EvalSplit,
    },
    /// Write a synthetic dataset as HNIM files plus a manifest.
    Gen {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EvalSplit {
    Test,
    All,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HALLUCINET_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 1,
                ErrorKind::Data => 2,
                ErrorKind::Runtime => 3,
            })
        }
    }
}

fn dispatch(command: Command) -> Result<(), Error> {
    match command {
        Command::Run { common, jobs } => {
            let (config, out) = load(&common)?;
            let outcome = with_jobs(jobs, || run_experiment(&config, &out))??;
            print_aggregate(&outcome.aggregate);
            println!("wrote {}", out.join("aggregate.csv").display());
        }
        Command::Sweep { common, jobs } => {
            let (config, out) = load(&common)?;
            let rows = with_jobs(jobs, || run_sweep(&config, &out))??;
            println!(
                "{:<12} {:>10} {:<24} {:>9} {:>8}",
                "param", "value", "network", "mean_acc", "std_acc"
            );
            for r in &rows {
                println!(
                    "{:<12} {:>10} {:<24} {:>9.2} {:>8.2}",
                    r.param, r.value, r.network, r.mean_acc, r.std_acc
                );
            }
            println!("wrote {}", out.join("sweep.csv").display());
        }
        Command::Eval {
            common,
            checkpoint,
            modality,
            split,
        } => eval(&common, &checkpoint, &modality, split)?,
        Command::Gen { common } => gen(&common)?,
    }
    Ok(())
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.distillation.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    Ok((config, out))
}

fn print_aggregate(rows: &[AggregateRow]) {
    println!(
        "{:<24} {:>8} {:>9} {:>8}",
        "network", "class", "mean_acc", "std_acc"
    );
    for r in rows.iter().filter(|r| r.class == "overall") {
        println!(
            "{:<24} {:>8} {:>9.2} {:>8.2}",
            r.network, r.class, r.mean_acc, r.std_acc
        );
    }
}

fn eval(common: &Common, checkpoint: &Path, modality: &[u32], split: EvalSplit) -> Result<(), Error> {
    let (config, _) = load(common)?;
    let prep = prepare(
        config.dataset.load(config.distillation.seed)?,
        &config.distillation,
    )?;
    let model = load_checkpoint_model(checkpoint, &config, &prep.dataset)?;
    let available = if modality.is_empty() {
        model.required_modalities()
    } else {
        let mut v = modality
            .iter()
            .map(|&m| Modality::try_from(m))
            .collect::<Result<Vec<_>, _>>()?;
        v.sort();
        v.dedup();
        v
    };
    let indices: Vec<usize> = match split {
        EvalSplit::Test => prep.split.test.clone(),
        EvalSplit::All => (0..prep.dataset.len()).collect(),
    };
    let metrics = evaluate_with(&model, &prep.dataset, &indices, &available)?;
    print_metrics(&metrics);
    if let Some(out) = &common.out {
        let name = checkpoint
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        let path = out.join("eval.csv");
        write_metrics_csv(&path, &[(name.as_str(), &metrics)])?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn print_metrics(m: &Metrics) {
    println!("{:>8} {:>8} {:>8} {:>9}", "class", "correct", "total", "accuracy");
    for (c, [hits, total]) in &m.class_counts {
        println!(
            "{:>8} {:>8} {:>8} {:>9.2}",
            c, hits, total, m.class_wise_accuracy[c]
        );
    }
    println!(
        "{:>8} {:>8} {:>8} {:>9.2}",
        "overall", m.correct, m.total, m.overall_accuracy
    );
}

fn gen(common: &Common) -> Result<(), Error> {
    let (config, out) = load(common)?;
    let DatasetSource::Synthetic(params) = &config.dataset else {
        return Err(Error::config("dataset.source", "gen needs a synthetic dataset"));
    };
    let data = config.dataset.load(config.distillation.seed)?;
    let mut entries = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let names = [format!("m1/{i:05}.hnim"), format!("m2/{i:05}.hnim")];
        for (m, name) in Modality::BOTH.into_iter().zip(&names) {
            write_hnim(&out.join(name), data.sample(m, i))?;
        }
        let [path1, path2] = names.map(PathBuf::from);
        entries.push(ManifestEntry {
            path1,
            path2,
            label: data.labels()[i],
        });
    }
    let manifest = Manifest {
        classes: params.classes,
        entries,
    };
    let path = out.join("manifest.tsv");
    write_manifest(&path, &manifest)?;
    println!("wrote {} samples to {}", data.len(), path.display());
    Ok(())
}
