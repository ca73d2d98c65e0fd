use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use al2lab::analysis::AblationLabels;
use al2lab::config::ExperimentConfig;
use al2lab::data::sidecar::CorruptionRecord;
use al2lab::data::{load_dataset, Split, DATA_ROOT_ENV};
use al2lab::gradcheck::{all_regularizers, check_model, GradCheckConfig};
use al2lab::model::{DatasetKind, Regularizer};
use al2lab::report::{self, RunAblation, RunMetrics};
use al2lab::run::{self, prepare_data, resolve_data_root};
use al2lab::train::MetricRecord;
use al2lab::Error;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit code for configuration and usage errors (clap uses the same).
const EXIT_CONFIG: u8 = 2;
/// Exit code for failures while running.
const EXIT_RUNTIME: u8 = 1;
/// Exit code when `--strict` finds missing table cells.
const EXIT_INCOMPLETE: u8 = 3;

#[derive(Parser)]
#[command(name = "al2lab", version, about = "Progressive activation regularization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset root (holds mnist/, fashion-mnist/, cifar-10-batches-bin/).
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one network from a key=value config file.
    Train {
        config: PathBuf,
        /// Overwrite an existing run directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        data: DataArgs,
        /// Suppress per-epoch progress lines.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Train every baseline with and without AL2 on shared labels and initialization.
    Suite {
        /// Base config; dataset, fraction and regularizer are overridden.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "mnist")]
        datasets: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0.75")]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "bare,batchnorm,dropout,weight_decay")]
        regularizers: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Tabulate runs: TA / L_c / L_r (or ablation AUC with --auc) at given epochs.
    Table {
        run_dirs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        epochs: Vec<u64>,
        /// Tabulate ablation AUC from each run's ablation.csv.
        #[arg(long)]
        auc: bool,
        /// Exit non-zero when any cell is missing.
        #[arg(long)]
        strict: bool,
        /// Also write the table as text and CSV to this path (and path.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CCA ρ-sequences of checkpoints against the epoch-0 representation.
    Cca {
        run_dir: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        epochs: Vec<u64>,
        #[arg(long, default_value_t = 1000)]
        batch_size: usize,
        /// Output CSV (default: <run_dir>/cca.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Plot CCA trajectories as a self-contained SVG.
    PlotCca {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cumulative-ablation curves and AUC of checkpoints on the training set.
    Ablate {
        run_dir: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        epochs: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        mask_seeds: Vec<u64>,
        #[arg(long, value_enum, default_value_t = LabelsArg::Pristine)]
        labels: LabelsArg,
        /// Output CSV (default: <run_dir>/ablation.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Write a corrupted-label sidecar for a training set.
    Corrupt {
        #[arg(long, default_value = "mnist")]
        dataset: String,
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 3)]
        seed: u64,
        /// Corrupt only the first N training samples.
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Finite-difference gradient check of the full network.
    GradCheck {
        /// bare, batchnorm, dropout, weight_decay or all.
        #[arg(long, default_value = "all")]
        regularizer: String,
        #[arg(long, default_value_t = 120)]
        coordinates: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelsArg {
    Pristine,
    Current,
}

/// Errors that stem from bad configuration rather than a failing run.
fn is_config_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(
            e.downcast_ref::<Error>(),
            Some(Error::Config { .. } | Error::InvalidArgument(_))
        ) || e.downcast_ref::<UsageError>().is_some()
    })
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_config_error(&err) { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}

fn print_progress(prefix: &str, r: &MetricRecord) {
    println!(
        "{prefix}epoch {:>4}  TA {:>6.2}  L_c {:.4}  L_r {:.4}  lambda {:.4}  {:.0}s",
        r.epoch, r.test_accuracy, r.loss_c, r.loss_r, r.lambda, r.wall_time
    );
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run_config(dir: &Path) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::read(&dir.join(run::CONFIG_FILE))?)
}

/// Training set of a finished run, with the labels from its sidecar.
fn run_training_set(dir: &Path, cfg: &ExperimentConfig, data: &DataArgs) -> Result<al2lab::data::LabeledDataset> {
    let root = resolve_data_root(data.data_root.as_deref().or(cfg.data_root.as_deref()));
    let (train_set, _) = prepare_data(&cfg.train, &root, Some(&dir.join(run::SIDECAR_FILE)))?;
    Ok(train_set)
}

fn parse_regularizers(keys: &[String]) -> Result<Vec<Regularizer>> {
    if keys.len() == 1 && keys[0] == "all" {
        return Ok(all_regularizers().to_vec());
    }
    keys.iter().map(|k| Ok(Regularizer::from_key(k)?)).collect()
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train {
            config,
            force,
            data,
            quiet,
        } => {
            let cfg = ExperimentConfig::read(&config)?;
            let root = resolve_data_root(data.data_root.as_deref().or(cfg.data_root.as_deref()));
            let (train_set, test_set) = prepare_data(&cfg.train, &root, cfg.corruption_sidecar.as_deref())?;
            let mut progress = |r: &MetricRecord| {
                if !quiet {
                    print_progress("", r)
                }
            };
            let outcome = run::run_experiment(&cfg, &train_set, &test_set, force, Some(&mut progress))?;
            if let Some(last) = outcome.metrics.last() {
                println!("final test accuracy {:.2}%", last.test_accuracy);
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Suite {
            config,
            datasets,
            fractions,
            regularizers,
            out,
            force,
            data,
        } => {
            let base = match &config {
                Some(p) => ExperimentConfig::read(p)?,
                None => ExperimentConfig::default(),
            };
            let datasets = datasets
                .iter()
                .map(|d| d.parse::<DatasetKind>())
                .collect::<al2lab::Result<Vec<_>>>()?;
            let regularizers = parse_regularizers(&regularizers)?;
            let root = resolve_data_root(data.data_root.as_deref().or(base.data_root.as_deref()));
            let plan = run::SuitePlan {
                datasets,
                fractions,
                regularizers,
                out_root: out.clone(),
            };
            let mut progress = |dir: &Path, r: &MetricRecord| print_progress(&format!("{}: ", dir.display()), r);
            let entries = run::run_randomization_suite(&base, &root, &plan, force, &mut progress)?;
            println!("trained {} networks under {}", entries.len(), out.display());
        }
        Command::Table {
            run_dirs,
            epochs,
            auc,
            strict,
            out,
        } => {
            if run_dirs.is_empty() {
                return Err(usage("table needs at least one run directory"));
            }
            let table = if auc {
                let runs = run_dirs
                    .iter()
                    .map(|d| {
                        let cfg = run_config(d)?;
                        let path = d.join("ablation.csv");
                        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                        Ok(RunAblation {
                            baseline: cfg.train.regularizer.label().to_string(),
                            al2: cfg.train.al2_enabled,
                            auc: report::parse_ablation_csv(&text)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                report::auc_table(&runs, &epochs)
            } else {
                let runs = run_dirs
                    .iter()
                    .map(|d| {
                        let cfg = run_config(d)?;
                        Ok(RunMetrics {
                            baseline: cfg.train.regularizer.label().to_string(),
                            al2: cfg.train.al2_enabled,
                            records: run::read_metrics(d)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                report::metrics_table(&runs, &epochs)
            };
            print!("{}", table.text);
            if let Some(out) = out {
                write_file(&out, &table.text)?;
                let mut csv_path = out.into_os_string();
                csv_path.push(".csv");
                write_file(Path::new(&csv_path), &table.csv)?;
            }
            if strict && table.missing > 0 {
                eprintln!("{} cell(s) missing", table.missing);
                return Ok(ExitCode::from(EXIT_INCOMPLETE));
            }
        }
        Command::Cca {
            run_dir,
            epochs,
            batch_size,
            out,
            data,
        } => {
            let cfg = run_config(&run_dir)?;
            let train_set = run_training_set(&run_dir, &cfg, &data)?;
            let images = run::cca_batch(&train_set, cfg.train.shuffle_seed, batch_size)?;
            let name = format!(
                "{}{}",
                cfg.train.regularizer.key(),
                if cfg.train.al2_enabled { "+al2" } else { "" }
            );
            let rows = run::cca_rows(&run_dir, &name, &epochs, &images)?;
            for r in &rows {
                let mean = r.rho.iter().sum::<f64>() / r.rho.len() as f64;
                println!("epoch {:>4}  mean rho {mean:.4}", r.epoch);
            }
            let out = out.unwrap_or_else(|| run_dir.join("cca.csv"));
            write_file(&out, report::cca_csv(&rows))?;
            println!("wrote {}", out.display());
        }
        Command::PlotCca { inputs, out } => {
            if inputs.is_empty() {
                return Err(usage("plot-cca needs at least one CSV file"));
            }
            let mut rows = Vec::new();
            for path in &inputs {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                rows.extend(report::parse_cca_csv(&text).with_context(|| path.display().to_string())?);
            }
            write_file(&out, report::cca_svg(&rows)?)?;
            println!("wrote {}", out.display());
        }
        Command::Ablate {
            run_dir,
            epochs,
            mask_seeds,
            labels,
            out,
            data,
        } => {
            let cfg = run_config(&run_dir)?;
            let train_set = run_training_set(&run_dir, &cfg, &data)?;
            let labels = match labels {
                LabelsArg::Pristine => AblationLabels::Pristine,
                LabelsArg::Current => AblationLabels::Current,
            };
            let curves = run::ablation_curves(
                &run_dir,
                &epochs,
                &train_set,
                labels,
                &mask_seeds,
                cfg.train.eval_batch_size,
            )?;
            for (e, c) in &curves {
                println!("epoch {e:>4}  AUC {:.2}", c.auc);
            }
            let out = out.unwrap_or_else(|| run_dir.join("ablation.csv"));
            write_file(&out, report::ablation_csv(&curves))?;
            println!("wrote {}", out.display());
        }
        Command::Corrupt {
            dataset,
            fraction,
            seed,
            subset,
            out,
            data,
        } => {
            let kind: DatasetKind = dataset.parse()?;
            let root = resolve_data_root(data.data_root.as_deref());
            let mut train_set = load_dataset(kind, Split::Train, &root)?;
            if let Some(n) = subset.filter(|&n| n < train_set.len()) {
                train_set = train_set.take_first(n)?;
            }
            let corrupted = train_set.corrupt(fraction, seed)?;
            CorruptionRecord::of(&corrupted).write(&out)?;
            println!(
                "corrupted {} of {} labels; wrote {}",
                corrupted.num_corrupted(),
                corrupted.len(),
                out.display()
            );
        }
        Command::GradCheck {
            regularizer,
            coordinates,
            tolerance,
        } => {
            let regs = parse_regularizers(&[regularizer])?;
            let cfg = GradCheckConfig {
                coordinates,
                ..GradCheckConfig::default()
            };
            let mut ok = true;
            for reg in regs {
                let r = check_model(reg, &cfg)?;
                let max = r.max_rel_error();
                let pass = r.checks.len() >= coordinates && max < tolerance;
                ok &= pass;
                println!(
                    "{} {:<4} {} coordinates, {} kink skips, max relative error {max:.3e}",
                    if pass { "PASS" } else { "FAIL" },
                    reg.label(),
                    r.checks.len(),
                    r.skipped_kinks
                );
                if !pass {
                    if let Some(w) = r.worst() {
                        println!("     worst {}[{}]: analytic {:e}, numeric {:e}", w.param, w.index, w.analytic, w.numeric);
                    }
                }
            }
            if !ok {
                bail!("gradient check failed");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
