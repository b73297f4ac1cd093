use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use attbalance::analysis::{analyze, read_records_csv, write_records_csv, CurveBinning};
use attbalance::harness::checkpoint::Checkpoint;
use attbalance::harness::commands::{compare, dataset_for, eval_records, gradient_check, Component, Split};
use attbalance::harness::config::RunConfig;
use attbalance::harness::train::{train, TrainOptions, CHECKPOINT_FILE};
use attbalance::numerics::GradFault;
use attbalance::synth::{generate, read_dataset, write_dataset, Dataset};
use attbalance::Error;

#[derive(Parser)]
#[command(
    name = "attbalance",
    version,
    about = "Train and analyze attention-balanced grounding models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optim.lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> attbalance::Result<RunConfig> {
        RunConfig::load_with_overrides(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum BinningArg {
    EvenWidth,
    EqualCount,
}

#[derive(Clone, Copy, ValueEnum)]
enum ComponentArg {
    Rac,
    Mrc,
    L1,
    Giou,
    Total,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    Matmul,
    Softmax,
    LayerNorm,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset of a run config.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; metrics and checkpoints go to `run.out_dir`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the checkpoint already in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and write an analysis report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file; regenerated from the checkpoint's run config when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        /// Comma-separated layers to capture (default: all).
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value = "even-width")]
        binning: BinningArg,
        /// Report path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also export per-sample records as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Check analytic gradients against finite differences on the tiny model.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "total")]
        component: ComponentArg,
        /// Corrupt one backward rule (negative control).
        #[arg(long, value_enum)]
        corrupt_grad: Option<FaultArg>,
        /// Print the full report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Compare two finished runs on the same dataset.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute an analysis report from exported records.
    Analyze {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum, default_value = "even-width")]
        binning: BinningArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(2)
        }
    }
}

fn write_json<T: serde::Serialize>(value: &T, out: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    match out {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn dataset_of(path: Option<&Path>, cfg: Option<&RunConfig>) -> Result<Dataset, Failure> {
    match (path, cfg) {
        (Some(p), _) => Ok(read_dataset(BufReader::new(File::open(p)?))?),
        (None, Some(c)) => Ok(dataset_for(c)?),
        (None, None) => Err(Failure::Usage(
            "no --dataset given and the checkpoint has no run config".into(),
        )),
    }
}

fn binning(b: BinningArg) -> CurveBinning {
    match b {
        BinningArg::EvenWidth => CurveBinning::EvenWidth,
        BinningArg::EqualCount => CurveBinning::EqualCount,
    }
}

fn split(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenData { cfg, out } => {
            let cfg = cfg.load()?;
            let ds = generate(&cfg.dataset)?;
            let mut w = BufWriter::new(File::create(&out)?);
            write_dataset(&ds, &mut w)?;
            w.flush()?;
            eprintln!(
                "wrote {} train and {} val samples to {}",
                ds.train.len(),
                ds.val.len(),
                out.display()
            );
        }
        Command::Train { cfg, resume } => {
            let cfg = cfg.load()?;
            let ds = dataset_for(&cfg)?;
            let resume = if resume {
                Some(Checkpoint::load(&cfg.run.out_dir.join(CHECKPOINT_FILE))?)
            } else {
                None
            };
            let out = train(&cfg, &ds, TrainOptions { resume, stop_at: None })?;
            eprintln!("trained {} steps; checkpoint {}", out.steps, out.checkpoint.display());
            if let Some(e) = out.final_eval {
                write_json(&e, None)?;
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            split: s,
            layers,
            binning: b,
            out,
            csv,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ds = dataset_of(dataset.as_deref(), ckpt.run_config.as_ref())?;
            let (layers, records) = eval_records(&ckpt, &ds, split(s), layers.as_deref())?;
            if let Some(p) = csv {
                let mut w = BufWriter::new(File::create(p)?);
                write_records_csv(&records, &layers, &mut w)?;
                w.flush()?;
            }
            write_json(&analyze(&records, &layers, binning(b))?, out.as_deref())?;
        }
        Command::GradCheck {
            seed,
            component,
            corrupt_grad,
            json,
        } => {
            let fault = corrupt_grad.map(|f| match f {
                FaultArg::Matmul => GradFault::Matmul,
                FaultArg::Softmax => GradFault::Softmax,
                FaultArg::LayerNorm => GradFault::LayerNorm,
            });
            let components: Vec<Component> = match component {
                ComponentArg::All => Component::ALL.to_vec(),
                ComponentArg::Rac => vec![Component::Rac],
                ComponentArg::Mrc => vec![Component::Mrc],
                ComponentArg::L1 => vec![Component::L1],
                ComponentArg::Giou => vec![Component::Giou],
                ComponentArg::Total => vec![Component::Total],
            };
            let mut all_passed = true;
            for c in components {
                let report = gradient_check(c, seed, fault)?;
                all_passed &= report.passed;
                if json {
                    write_json(&serde_json::json!({ "component": c, "report": report }), None)?;
                    continue;
                }
                println!("{c:?} (step {:e}, tol {:e})", report.step, report.tol);
                for p in &report.params {
                    let mark = if p.passed { "ok  " } else { "FAIL" };
                    println!("  {mark} {:<28} {:>6} {:.3e}", p.name, p.numel, p.max_rel_error);
                }
                println!(
                    "  worst {:.3e}: {}",
                    report.worst(),
                    if report.passed { "pass" } else { "fail" }
                );
            }
            if !all_passed {
                return Err(Failure::Numerical("gradient check failed".into()));
            }
        }
        Command::Compare {
            run_a,
            run_b,
            dataset,
            split: s,
            out,
        } => {
            let cfg = Checkpoint::load(&run_a.join(CHECKPOINT_FILE))?.run_config;
            let ds = dataset_of(dataset.as_deref(), cfg.as_ref())?;
            write_json(&compare(&run_a, &run_b, &ds, split(s))?, out.as_deref())?;
        }
        Command::Analyze {
            records,
            binning: b,
            out,
        } => {
            let (layers, records) = read_records_csv(BufReader::new(File::open(records)?))?;
            write_json(&analyze(&records, &layers, binning(b))?, out.as_deref())?;
        }
    }
    Ok(())
}
