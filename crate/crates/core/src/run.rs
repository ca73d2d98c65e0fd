//! Run directories: data preparation and on-disk training outputs.
//!
//! A run directory holds
//!
//! - `config.txt`: the rendered experiment configuration,
//! - `corruption.bin`: the corrupted-label sidecar of the training set,
//! - `pretrain.csv`: evaluation of the initialized model (epoch 0),
//! - `metrics.csv`: one row per epoch (`epoch,ta,loss_c,loss_r,lambda`),
//! - `timing.csv`: wall-clock seconds per epoch,
//! - `checkpoints/epoch_NNNN.ckpt`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::analysis::{cca_trajectory, cumulative_ablation, AblationCurve, AblationLabels, Granularity};
use crate::checkpoint::{checkpoint_name, Checkpoint};
use crate::config::ExperimentConfig;
use crate::data::sidecar::CorruptionRecord;
use crate::data::{load_dataset, BatchPlan, LabeledDataset, Split, DATA_ROOT_ENV};
use crate::error::{Error, Result};
use crate::model::{DatasetKind, Regularizer};
use crate::report::{metrics_table, CcaRow, RunMetrics};
use crate::tensor::Tensor;
use crate::train::{metrics_csv, parse_metrics_csv, train, MetricRecord, Observer, TrainConfig, TrainOutcome};

pub const CONFIG_FILE: &str = "config.txt";
pub const SIDECAR_FILE: &str = "corruption.bin";
pub const PRETRAIN_FILE: &str = "pretrain.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// `explicit`, else `$AL2LAB_DATA_ROOT`, else `./data`.
pub fn resolve_data_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads the training split (subset, then corrupted or read from `sidecar`)
/// and the clean test split.
pub fn prepare_data(
    config: &TrainConfig,
    root: &Path,
    sidecar: Option<&Path>,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut train_set = load_dataset(config.dataset, Split::Train, root)?;
    if let Some(n) = config.train_subset {
        if n < train_set.len() {
            train_set = train_set.take_first(n)?;
        }
    }
    let train_set = match sidecar {
        Some(path) => CorruptionRecord::read(path)?.apply(&train_set)?,
        None => train_set.corrupt(config.corruption_fraction, config.corruption_seed)?,
    };
    let test_set = load_dataset(config.dataset, Split::Test, root)?;
    Ok((train_set, test_set))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Creates `dir`; refuses a directory that already holds metrics unless `force`.
pub fn create_run_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.join(METRICS_FILE).exists() && !force {
        return Err(Error::InvalidArgument(format!(
            "{} already contains a run (use --force to overwrite)",
            dir.display()
        )));
    }
    if force && dir.join(CHECKPOINT_DIR).exists() {
        fs::remove_dir_all(dir.join(CHECKPOINT_DIR)).map_err(|e| Error::io(dir.join(CHECKPOINT_DIR), e))?;
    }
    let ckpt = dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))
}

/// Writes metrics and checkpoints as training progresses.
pub struct RunWriter<'a> {
    dir: PathBuf,
    records: Vec<MetricRecord>,
    progress: Option<&'a mut dyn FnMut(&MetricRecord)>,
}

impl<'a> RunWriter<'a> {
    pub fn new(dir: &Path) -> Self {
        RunWriter {
            dir: dir.to_path_buf(),
            records: Vec::new(),
            progress: None,
        }
    }

    pub fn with_progress(mut self, f: &'a mut dyn FnMut(&MetricRecord)) -> Self {
        self.progress = Some(f);
        self
    }

    fn flush(&self) -> Result<()> {
        write(&self.dir.join(METRICS_FILE), metrics_csv(&self.records))?;
        let mut timing = String::from("epoch,wall_time\n");
        for r in &self.records {
            timing.push_str(&format!("{},{}\n", r.epoch, r.wall_time));
        }
        write(&self.dir.join(TIMING_FILE), timing)
    }
}

impl Observer for RunWriter<'_> {
    fn pretrain(&mut self, record: &MetricRecord) -> Result<()> {
        write(&self.dir.join(PRETRAIN_FILE), metrics_csv(std::slice::from_ref(record)))?;
        self.flush()
    }

    fn epoch(&mut self, record: &MetricRecord) -> Result<()> {
        self.records.push(record.clone());
        if let Some(p) = self.progress.as_mut() {
            p(record);
        }
        self.flush()
    }

    fn checkpoint(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        checkpoint.write(&self.dir.join(CHECKPOINT_DIR).join(checkpoint_name(checkpoint.epoch)))
    }
}

/// Trains `config` on prepared data, writing everything under `config.output_dir`.
pub fn run_experiment(
    config: &ExperimentConfig,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    force: bool,
    progress: Option<&mut dyn FnMut(&MetricRecord)>,
) -> Result<TrainOutcome> {
    let dir = &config.output_dir;
    create_run_dir(dir, force)?;
    write(&dir.join(CONFIG_FILE), config.render())?;
    CorruptionRecord::of(train_set).write(&dir.join(SIDECAR_FILE))?;
    let mut writer = RunWriter::new(dir);
    if let Some(p) = progress {
        writer = writer.with_progress(p);
    }
    train(&config.train, train_set, test_set, &mut writer)
}

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricRecord>> {
    let path = dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_metrics_csv(&text)
}

pub fn read_pretrain(dir: &Path) -> Result<MetricRecord> {
    let path = dir.join(PRETRAIN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_metrics_csv(&text)?
        .pop()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is empty", path.display())))
}

pub fn read_checkpoint(dir: &Path, epoch: u64) -> Result<Checkpoint> {
    Checkpoint::read(&dir.join(CHECKPOINT_DIR).join(checkpoint_name(epoch)))
}

/// Epochs with a checkpoint file in the run directory, ascending.
pub fn checkpoint_epochs(dir: &Path) -> Result<Vec<u64>> {
    let ckpt = dir.join(CHECKPOINT_DIR);
    let mut epochs: Vec<u64> = fs::read_dir(&ckpt)
        .map_err(|e| Error::io(&ckpt, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse().ok()
        })
        .collect();
    epochs.sort_unstable();
    Ok(epochs)
}

/// The CCA batch: the first `size` samples of the epoch-0 shuffle.
pub fn cca_batch(train_set: &LabeledDataset, shuffle_seed: u64, size: usize) -> Result<Tensor> {
    let plan = BatchPlan {
        batch_size: size.min(train_set.len()),
        shuffle_seed,
        epoch: 0,
    };
    let first = plan.index_batches(train_set.len())?.swap_remove(0);
    Ok(train_set.gather(&first)?.0)
}

/// ρ-sequences of each checkpoint against the epoch-0 checkpoint of `dir`.
pub fn cca_rows(dir: &Path, run: &str, epochs: &[u64], images: &Tensor) -> Result<Vec<CcaRow>> {
    let reference = read_checkpoint(dir, 0)?.model;
    let models = epochs
        .iter()
        .map(|&e| read_checkpoint(dir, e).map(|c| c.model))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&crate::model::Model> = models.iter().collect();
    let trajectory = cca_trajectory(&reference, &refs, images)?;
    Ok(epochs
        .iter()
        .zip(trajectory)
        .map(|(&epoch, r)| CcaRow {
            run: run.to_string(),
            dataset: reference.dataset().to_string(),
            epoch,
            rho: r.rho,
        })
        .collect())
}

/// Cumulative-ablation curves of the checkpoints of `dir` on the training set.
pub fn ablation_curves(
    dir: &Path,
    epochs: &[u64],
    train_set: &LabeledDataset,
    labels: AblationLabels,
    mask_seeds: &[u64],
    chunk: usize,
) -> Result<Vec<(u64, AblationCurve)>> {
    let targets = match labels {
        AblationLabels::Pristine => train_set.pristine_labels(),
        AblationLabels::Current => train_set.labels(),
    };
    epochs
        .iter()
        .map(|&e| {
            let model = read_checkpoint(dir, e)?.model;
            let curve = cumulative_ablation(&model, train_set.images(), targets, mask_seeds, Granularity::Channel, chunk)?;
            Ok((e, curve))
        })
        .collect()
}

/// One finished run of the randomization suite.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub dataset: DatasetKind,
    pub fraction: f64,
    pub regularizer: Regularizer,
    pub al2: bool,
    pub dir: PathBuf,
    pub metrics: Vec<MetricRecord>,
}

/// Run directory of one suite member, relative to the suite root.
pub fn suite_run_dir(root: &Path, dataset: DatasetKind, fraction: f64, regularizer: Regularizer, al2: bool) -> PathBuf {
    let pct = (fraction * 100.0).round() as u32;
    let arm = if al2 { "al2" } else { "plain" };
    root.join(format!("{dataset}_p{pct}")).join(format!("{}_{arm}", regularizer.key()))
}

/// What the randomization suite sweeps.
#[derive(Clone, Debug)]
pub struct SuitePlan {
    pub datasets: Vec<DatasetKind>,
    pub fractions: Vec<f64>,
    pub regularizers: Vec<Regularizer>,
    pub out_root: PathBuf,
}

/// For each (dataset, fraction): trains every regularizer with and without
/// AL2 from the same initialization and the same corrupted labels, then
/// writes `table.txt` / `table.csv` beside the runs. Other settings come
/// from `base`.
pub fn run_randomization_suite(
    base: &ExperimentConfig,
    data_root: &Path,
    plan: &SuitePlan,
    force: bool,
    progress: &mut dyn FnMut(&Path, &MetricRecord),
) -> Result<Vec<SuiteEntry>> {
    let out_root = plan.out_root.as_path();
    let mut entries = Vec::new();
    for &dataset in &plan.datasets {
        for &fraction in &plan.fractions {
            let mut train_cfg = base.train.clone();
            train_cfg.dataset = dataset;
            train_cfg.corruption_fraction = fraction;
            let (train_set, test_set) = prepare_data(&train_cfg, data_root, None)?;
            let mut group = Vec::new();
            for &regularizer in &plan.regularizers {
                for al2 in [false, true] {
                    let dir = suite_run_dir(out_root, dataset, fraction, regularizer, al2);
                    let cfg = ExperimentConfig {
                        train: TrainConfig {
                            regularizer,
                            ..train_cfg.paired(al2)
                        },
                        output_dir: dir.clone(),
                        data_root: Some(data_root.to_path_buf()),
                        ..base.clone()
                    };
                    let mut p = |r: &MetricRecord| progress(&dir, r);
                    let outcome = run_experiment(&cfg, &train_set, &test_set, force, Some(&mut p))?;
                    group.push(SuiteEntry {
                        dataset,
                        fraction,
                        regularizer,
                        al2,
                        dir,
                        metrics: outcome.metrics,
                    });
                }
            }
            let runs: Vec<RunMetrics> = group
                .iter()
                .map(|e| RunMetrics {
                    baseline: e.regularizer.label().to_string(),
                    al2: e.al2,
                    records: e.metrics.clone(),
                })
                .collect();
            let epochs = report_epochs(base.train.epochs, base.train.checkpoint_every);
            let table = metrics_table(&runs, &epochs);
            let group_dir = out_root.join(format!("{dataset}_p{}", (fraction * 100.0).round() as u32));
            write(&group_dir.join("table.txt"), &table.text)?;
            write(&group_dir.join("table.csv"), &table.csv)?;
            entries.extend(group);
        }
    }
    Ok(entries)
}

/// Epochs on the checkpoint grid, excluding 0, always including the last.
pub fn report_epochs(epochs: u64, every: u64) -> Vec<u64> {
    let mut out: Vec<u64> = (1..=epochs).filter(|e| e % every == 0).collect();
    if out.last() != Some(&epochs) && epochs > 0 {
        out.push(epochs);
    }
    out
}
