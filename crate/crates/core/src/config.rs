//! Plain-text `key = value` experiment configuration.
//!
//! One setting per line; `#` starts a comment; blank lines are ignored.
//! Unknown or repeated keys are errors reported with their line number.
//! Keys not given take the defaults of [`TrainConfig::default`] and
//! [`ExperimentConfig::default`].
//!
//! | key | meaning |
//! |---|---|
//! | `dataset` | `mnist`, `fashion-mnist`, `cifar10` |
//! | `data_root` | dataset root directory (default: `AL2LAB_DATA_ROOT`) |
//! | `train_subset` | use the first N training samples (`all` for every sample) |
//! | `corruption_fraction`, `corruption_seed` | symmetric label noise |
//! | `corruption_sidecar` | read labels from this sidecar instead of corrupting |
//! | `regularizer` | `bare`, `batchnorm`, `dropout`, `weight_decay` |
//! | `dropout_rate`, `weight_decay` | regularizer strengths |
//! | `al2` | `true` / `false` |
//! | `penalty` | `norm` or `squared` |
//! | `epochs`, `batch_size`, `learning_rate`, `momentum` | optimization |
//! | `init_seed`, `shuffle_seed`, `dropout_seed` | other seeds |
//! | `lambda0`, `lambda_low_factor`, `lambda_high_factor`, `lambda_threshold` | λ schedule |
//! | `eval_every`, `checkpoint_every`, `eval_batch_size` | cadence |
//! | `output_dir` | run directory |
//! | `cca_epochs`, `ablation_epochs` | comma-separated checkpoint epochs to analyse |
//! | `mask_seeds` | comma-separated ablation mask seeds |
//! | `cca_batch_size` | samples in the CCA batch |
//! | `ablation_labels` | `pristine` or `current` |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::al2::{LambdaSchedule, Penalty};
use crate::analysis::AblationLabels;
use crate::error::{Error, Result};
use crate::model::Regularizer;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data_root: Option<PathBuf>,
    pub corruption_sidecar: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub cca_epochs: Vec<u64>,
    pub ablation_epochs: Vec<u64>,
    pub mask_seeds: Vec<u64>,
    pub cca_batch_size: usize,
    pub ablation_labels: AblationLabels,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            train: TrainConfig::default(),
            data_root: None,
            corruption_sidecar: None,
            output_dir: PathBuf::from("runs/default"),
            cca_epochs: Vec::new(),
            ablation_epochs: Vec::new(),
            mask_seeds: vec![0, 1, 2, 3, 4],
            cca_batch_size: 1000,
            ablation_labels: AblationLabels::Pristine,
        }
    }
}

fn parse_list(value: &str) -> std::result::Result<Vec<u64>, String> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| format!("'{}' is not an integer", s.trim())))
        .collect()
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("'{value}' is not a boolean")),
    }
}

fn num<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("'{value}' is not a valid number"))
}

fn join(list: &[u64]) -> String {
    list.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<(String, usize)> = Vec::new();
        let mut dropout_rate = Regularizer::DEFAULT_DROPOUT_RATE;
        let mut weight_decay = Regularizer::DEFAULT_WEIGHT_DECAY;
        let mut reg_key = "bare".to_string();
        let (mut lambda0, mut low, mut high, mut threshold) = {
            let s = LambdaSchedule::default();
            (s.lambda0, s.low_factor, s.high_factor, s.threshold)
        };
        let mut schedule_line = 0;
        let mut regularizer_line = 0;

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |detail: String| Error::Config {
                path: path.to_path_buf(),
                line,
                detail,
            };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(err(format!("expected 'key = value', got '{content}'")));
            };
            let (key, value) = (key.trim(), value.trim());
            if let Some((_, first)) = seen.iter().find(|(k, _)| k == key) {
                return Err(err(format!("duplicate key '{key}' (first set on line {first})")));
            }
            seen.push((key.to_string(), line));
            let t = &mut cfg.train;
            let r: std::result::Result<(), String> = (|| {
                match key {
                    "dataset" => t.dataset = value.parse().map_err(|e: Error| e.to_string())?,
                    "data_root" => cfg.data_root = Some(PathBuf::from(value)),
                    "train_subset" => {
                        t.train_subset = if value == "all" { None } else { Some(num(value)?) };
                    }
                    "corruption_fraction" => t.corruption_fraction = num(value)?,
                    "corruption_seed" => t.corruption_seed = num(value)?,
                    "corruption_sidecar" => cfg.corruption_sidecar = Some(PathBuf::from(value)),
                    "regularizer" => {
                        Regularizer::from_key(value).map_err(|e| e.to_string())?;
                        reg_key = value.to_string();
                        regularizer_line = line;
                    }
                    "dropout_rate" => dropout_rate = num(value)?,
                    "weight_decay" => weight_decay = num(value)?,
                    "al2" => t.al2_enabled = parse_bool(value)?,
                    "penalty" => t.penalty = Penalty::from_key(value).map_err(|e| e.to_string())?,
                    "epochs" => t.epochs = num(value)?,
                    "batch_size" => t.batch_size = num(value)?,
                    "learning_rate" => t.learning_rate = num(value)?,
                    "momentum" => t.momentum = num(value)?,
                    "init_seed" => t.init_seed = num(value)?,
                    "shuffle_seed" => t.shuffle_seed = num(value)?,
                    "dropout_seed" => t.dropout_seed = num(value)?,
                    "lambda0" => lambda0 = num(value)?,
                    "lambda_low_factor" => low = num(value)?,
                    "lambda_high_factor" => high = num(value)?,
                    "lambda_threshold" => threshold = num(value)?,
                    "eval_every" => t.eval_every = num(value)?,
                    "checkpoint_every" => t.checkpoint_every = num(value)?,
                    "eval_batch_size" => t.eval_batch_size = num(value)?,
                    "output_dir" => cfg.output_dir = PathBuf::from(value),
                    "cca_epochs" => cfg.cca_epochs = parse_list(value)?,
                    "ablation_epochs" => cfg.ablation_epochs = parse_list(value)?,
                    "mask_seeds" => cfg.mask_seeds = parse_list(value)?,
                    "cca_batch_size" => cfg.cca_batch_size = num(value)?,
                    "ablation_labels" => {
                        cfg.ablation_labels = match value {
                            "pristine" => AblationLabels::Pristine,
                            "current" => AblationLabels::Current,
                            _ => return Err(format!("'{value}' is not 'pristine' or 'current'")),
                        }
                    }
                    _ => return Err(format!("unknown key '{key}'")),
                }
                if key.starts_with("lambda") {
                    schedule_line = line;
                }
                Ok(())
            })();
            r.map_err(|d| err(format!("{key}: {d}")))?;
        }

        let at = |line: usize, detail: String| Error::Config {
            path: path.to_path_buf(),
            line,
            detail,
        };
        cfg.train.regularizer = match Regularizer::from_key(&reg_key).map_err(|e| at(regularizer_line, e.to_string()))? {
            Regularizer::Dropout { .. } => Regularizer::Dropout { rate: dropout_rate },
            Regularizer::WeightDecay { .. } => Regularizer::WeightDecay {
                coefficient: weight_decay,
            },
            other => other,
        };
        cfg.train.schedule =
            LambdaSchedule::new(lambda0, low, high, threshold).map_err(|e| at(schedule_line, e.to_string()))?;
        cfg.validate().map_err(|e| at(0, e.to_string()))?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.cca_batch_size == 0 {
            return Err(Error::InvalidArgument("cca_batch_size must be positive".into()));
        }
        for &e in self.cca_epochs.iter().chain(&self.ablation_epochs) {
            let on_grid = e == 0 || e % self.train.checkpoint_every == 0 || e == self.train.epochs;
            if !on_grid || e > self.train.epochs {
                return Err(Error::InvalidArgument(format!(
                    "analysis epoch {e} is not a checkpoint epoch (every {}, up to {})",
                    self.train.checkpoint_every, self.train.epochs
                )));
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(render(c)) == c`.
    pub fn render(&self) -> String {
        let t = &self.train;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("dataset", t.dataset.to_string());
        if let Some(root) = &self.data_root {
            kv("data_root", root.display().to_string());
        }
        kv(
            "train_subset",
            t.train_subset.map_or_else(|| "all".to_string(), |n| n.to_string()),
        );
        kv("corruption_fraction", t.corruption_fraction.to_string());
        kv("corruption_seed", t.corruption_seed.to_string());
        if let Some(s) = &self.corruption_sidecar {
            kv("corruption_sidecar", s.display().to_string());
        }
        kv("regularizer", t.regularizer.key().to_string());
        match t.regularizer {
            Regularizer::Dropout { rate } => kv("dropout_rate", rate.to_string()),
            Regularizer::WeightDecay { coefficient } => kv("weight_decay", coefficient.to_string()),
            _ => {}
        }
        kv("al2", t.al2_enabled.to_string());
        kv("penalty", t.penalty.key().to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("momentum", t.momentum.to_string());
        kv("init_seed", t.init_seed.to_string());
        kv("shuffle_seed", t.shuffle_seed.to_string());
        kv("dropout_seed", t.dropout_seed.to_string());
        kv("lambda0", t.schedule.lambda0.to_string());
        kv("lambda_low_factor", t.schedule.low_factor.to_string());
        kv("lambda_high_factor", t.schedule.high_factor.to_string());
        kv("lambda_threshold", t.schedule.threshold.to_string());
        kv("eval_every", t.eval_every.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("eval_batch_size", t.eval_batch_size.to_string());
        kv("output_dir", self.output_dir.display().to_string());
        kv("cca_epochs", join(&self.cca_epochs));
        kv("ablation_epochs", join(&self.ablation_epochs));
        kv("mask_seeds", join(&self.mask_seeds));
        kv("cca_batch_size", self.cca_batch_size.to_string());
        kv(
            "ablation_labels",
            match self.ablation_labels {
                AblationLabels::Pristine => "pristine",
                AblationLabels::Current => "current",
            }
            .to_string(),
        );
        out
    }
}
