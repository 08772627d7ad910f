use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ecacl_core::data::Domain;
use ecacl_core::gradcheck;
use ecacl_core::train::{evaluate, prepare_data, TrainConfig, Variant, EVAL_SPLIT};
use ecacl_core::uda::UdaKind;
use ecacl::experiment::{self, SweepParam};
use ecacl::metrics::{MetricsWriter, Summary};
use ecacl::parallel::ParallelAugmenter;
use ecacl::{checkpoint, config, idx, Error, Result};

/// Semi-supervised domain adaptation with enhanced categorical alignment and
/// consistency learning.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic source and target domains as IDX pairs.
    GenerateData {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory.
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train one configuration.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory for metrics, summary and checkpoint.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Augmentation worker threads.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Train the eight-row ablation grid and the source-and-target-only baseline.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX images; without it the configured synthetic target is used.
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        /// Write the summary here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per case.
        #[arg(long, default_value_t = 10)]
        instances: usize,
    },
    /// Vary one hyperparameter over a list of values.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        param: Param,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    run_seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    uda: Option<UdaArg>,
}

#[derive(Args)]
struct GridArgs {
    /// Landmark split seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    EcaclP,
    EcaclT,
}

#[derive(Clone, Copy, ValueEnum)]
enum UdaArg {
    None,
    Ent,
    Mme,
}

#[derive(Clone, Copy, ValueEnum)]
enum Param {
    Sigma,
    Lambda1,
    Lambda2,
}

impl RunArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(path) => config::load_config(path)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.steps {
            c.total_steps = s;
        }
        if let Some(s) = self.run_seed {
            c.run_seed = s;
        }
        if let Some(s) = self.split_seed {
            c.split.split_seed = s;
        }
        if let Some(v) = self.variant {
            c.variant = match v {
                VariantArg::EcaclP => Variant::EcaclP,
                VariantArg::EcaclT => Variant::EcaclT,
            };
        }
        if let Some(u) = self.uda {
            c.uda.name = match u {
                UdaArg::None => UdaKind::None,
                UdaArg::Ent => UdaKind::Ent,
                UdaArg::Mme => UdaKind::Mme,
            };
        }
        c.validate()?;
        Ok(c)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_owned(),
        source: e,
    })
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports always serialize");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { run, out } => {
            let c = run.config()?;
            let data = prepare_data(&c)?;
            create_dir(&out)?;
            idx::write_idx(
                &data.source,
                &out.join("source-images.idx"),
                &out.join("source-labels.idx"),
            )?;
            let target = data.target.landmarks.clone();
            idx::write_idx(&target, &out.join("landmark-images.idx"), &out.join("landmark-labels.idx"))?;
            idx::write_idx(
                &data.target.unlabeled.evaluation_dataset(),
                &out.join("unlabeled-images.idx"),
                &out.join("unlabeled-labels.idx"),
            )?;
            println!(
                "wrote {} source, {} landmark and {} unlabeled images to {}",
                data.source.len(),
                data.target.landmarks.len(),
                data.target.unlabeled.len(),
                out.display()
            );
        }
        Command::Train { run, out, workers } => {
            let c = run.config()?;
            create_dir(&out)?;
            write_json(&c, &out.join("config.json"))?;
            let augmenter = ParallelAugmenter::new(workers)?;
            let mut writer = MetricsWriter::create(&out.join("metrics.jsonl"))?;
            let result = experiment::train_run(&c, &augmenter, |r| writer.write(r))?;
            writer.finish()?;
            checkpoint::save(&result.model, &out.join("model.ckpt"))?;
            Summary::new(&result.final_eval, Some(&c)).write(&out.join("summary.json"))?;
            println!(
                "step {}: target MCA {:.2}%, overall {:.2}%",
                result.final_eval.step,
                100.0 * result.final_eval.mean_class_accuracy,
                100.0 * result.final_eval.overall_accuracy
            );
        }
        Command::Ablate { run, grid } => {
            let c = run.config()?;
            let report = experiment::ablate(&c, &grid.seeds, grid.jobs)?;
            print!("{}", report.table());
            if let Some(path) = grid.out {
                write_json(&report, &path)?;
            }
        }
        Command::Eval {
            checkpoint: ckpt,
            images,
            labels,
            run,
            out,
        } => {
            let model = checkpoint::load(&ckpt)?;
            let dataset = match (images, labels) {
                (Some(i), Some(l)) => idx::load_idx(&i, &l, Some(model.classifier_spec().num_classes), Domain::Target)?,
                _ => prepare_data(&run.config()?)?.target.unlabeled.evaluation_dataset(),
            };
            let record = evaluate(&model, &dataset, 0, EVAL_SPLIT)?;
            let summary = Summary::new(&record, None);
            println!("{}", serde_json::to_string_pretty(&summary).expect("summaries always serialize"));
            if let Some(path) = out {
                summary.write(&path)?;
            }
        }
        Command::Gradcheck { seed, instances } => {
            let reports = gradcheck::run_suite(seed, instances)?;
            let mut failed = 0;
            for r in &reports {
                println!(
                    "{:<14} {:>6} coordinates  max relative error {:.2e}  {}",
                    r.name,
                    r.coordinates,
                    r.max_relative_error,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(ecacl_core::Error::Numeric(format!(
                    "{failed} gradient case(s) above tolerance {:e}",
                    gradcheck::TOLERANCE
                ))
                .into());
            }
        }
        Command::Sweep {
            run,
            param,
            values,
            grid,
        } => {
            let c = run.config()?;
            let param = match param {
                Param::Sigma => SweepParam::Sigma,
                Param::Lambda1 => SweepParam::Lambda1,
                Param::Lambda2 => SweepParam::Lambda2,
            };
            let report = experiment::sweep(&c, param, &values, &grid.seeds, grid.jobs)?;
            print!("{}", report.table());
            if let Some(path) = grid.out {
                write_json(&report, &path)?;
            }
        }
        Command::DefaultConfig => println!("{}", config::to_json(&TrainConfig::default())),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
