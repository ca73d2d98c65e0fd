//! SGD-with-momentum training loop and evaluation.

use std::time::Instant;

use crate::al2::{combined_loss, LambdaSchedule, Penalty};
use crate::checkpoint::Checkpoint;
use crate::data::{BatchPlan, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{DatasetKind, InitSeed, Mode, Model, Param, Regularizer};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetKind,
    /// Use only the first `n` training samples.
    pub train_subset: Option<usize>,
    pub corruption_fraction: f64,
    pub regularizer: Regularizer,
    pub al2_enabled: bool,
    pub penalty: Penalty,
    pub epochs: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub corruption_seed: u64,
    pub dropout_seed: u64,
    pub schedule: LambdaSchedule,
    /// Evaluate test accuracy every this many epochs (the final epoch always).
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetKind::Mnist,
            train_subset: None,
            corruption_fraction: 0.0,
            regularizer: Regularizer::Bare,
            al2_enabled: false,
            penalty: Penalty::Norm,
            epochs: 700,
            batch_size: 100,
            learning_rate: 0.01,
            momentum: 0.9,
            init_seed: 1,
            shuffle_seed: 2,
            corruption_seed: 3,
            dropout_seed: 4,
            schedule: LambdaSchedule::default(),
            eval_every: 1,
            checkpoint_every: 100,
            eval_batch_size: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(0.0..=1.0).contains(&self.corruption_fraction) {
            return bad(format!("corruption fraction {} outside [0, 1]", self.corruption_fraction));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return bad("eval_every and checkpoint_every must be positive".into());
        }
        if self.train_subset == Some(0) {
            return bad("train_subset must be positive".into());
        }
        Ok(())
    }

    /// The same configuration with AL2 switched on or off.
    pub fn paired(&self, al2_enabled: bool) -> Self {
        TrainConfig {
            al2_enabled,
            ..self.clone()
        }
    }
}

/// One row of training metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: u64,
    /// Test accuracy in percent; NaN on epochs without evaluation.
    pub test_accuracy: f64,
    /// Epoch-mean cross-entropy over training batches.
    pub loss_c: f64,
    /// Epoch-mean activation norm over training batches (before λ).
    pub loss_r: f64,
    /// λ in force during the epoch (0 when AL2 is off).
    pub lambda: f64,
    /// Seconds since training started.
    pub wall_time: f64,
}

pub const METRICS_HEADER: &str = "epoch,ta,loss_c,loss_r,lambda";

impl MetricRecord {
    /// CSV row without the wall-clock column, so identical runs give identical bytes.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.test_accuracy, self.loss_c, self.loss_r, self.lambda
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() < 5 {
            return Err(Error::InvalidArgument(format!("metrics row has {} fields: {line}", f.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad number '{s}' in metrics row")))
        };
        Ok(MetricRecord {
            epoch: f[0]
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad epoch '{}'", f[0])))?,
            test_accuracy: num(f[1])?,
            loss_c: num(f[2])?,
            loss_r: num(f[3])?,
            lambda: num(f[4])?,
            wall_time: f.get(5).map(|s| num(s)).transpose()?.unwrap_or(0.0),
        })
    }
}

/// Renders records as CSV with [`METRICS_HEADER`].
pub fn metrics_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(MetricRecord::parse_csv_row)
        .collect()
}

/// SGD with heavy-ball momentum: `v ← μv + g`, `p ← p − ηv`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, params: &[Param]) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn with_velocity(learning_rate: f64, momentum: f64, velocity: Vec<Tensor>) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity,
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [Param], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len());
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grads) {
            for ((pi, vi), gi) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.iter()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.learning_rate * *vi;
            }
        }
    }
}

/// Index of the largest logit per row; ties go to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Percentage of rows whose argmax matches `labels`.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let pred = argmax_rows(logits);
    assert_eq!(pred.len(), labels.len());
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len() as f64
}

/// Eval-mode logits over a whole image tensor, in chunks.
pub fn predict_logits(model: &Model, images: &Tensor, chunk: usize) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut data = Vec::with_capacity(n * crate::model::NUM_CLASSES);
    let mut start = 0;
    while start < n {
        let count = chunk.min(n - start);
        let mut tape = Tape::inference();
        let out = model.infer(&mut tape, &images.slice_rows(start, count)?)?;
        data.extend_from_slice(tape.value(out.logits).data());
        start += count;
    }
    Tensor::new(vec![n, crate::model::NUM_CLASSES], data)
}

/// Eval-mode accuracy (%) against the dataset's current labels.
pub fn evaluate(model: &Model, dataset: &LabeledDataset, chunk: usize) -> Result<f64> {
    let logits = predict_logits(model, dataset.images(), chunk)?;
    Ok(accuracy(&logits, dataset.labels()))
}

/// Eval-mode mean `L_c` and `L_r` over a dataset, sample-weighted.
pub fn evaluate_losses(model: &Model, dataset: &LabeledDataset, penalty: Penalty, chunk: usize) -> Result<(f64, f64)> {
    let n = dataset.len();
    let (mut lc, mut lr) = (0.0, 0.0);
    let mut start = 0;
    while start < n {
        let count = chunk.min(n - start);
        let idx: Vec<usize> = (start..start + count).collect();
        let (images, labels) = dataset.gather(&idx)?;
        let mut tape = Tape::inference();
        let out = model.infer(&mut tape, &images)?;
        let (_, b) = combined_loss(&mut tape, out.logits, &labels, out.features, 0.0, penalty)?;
        lc += b.classification * count as f64;
        lr += b.regularization * count as f64;
        start += count;
    }
    Ok((lc / n as f64, lr / n as f64))
}

/// Hooks called while training runs.
pub trait Observer {
    fn pretrain(&mut self, _record: &MetricRecord) -> Result<()> {
        Ok(())
    }
    fn epoch(&mut self, _record: &MetricRecord) -> Result<()> {
        Ok(())
    }
    fn checkpoint(&mut self, _checkpoint: &Checkpoint) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Evaluation of the initialized model (epoch 0): test accuracy and
    /// eval-mode training losses.
    pub pretrain: MetricRecord,
    /// One record per trained epoch.
    pub metrics: Vec<MetricRecord>,
    pub checkpoints: Vec<Checkpoint>,
}

fn is_checkpoint_epoch(config: &TrainConfig, epoch: u64) -> bool {
    epoch == 0 || epoch.is_multiple_of(config.checkpoint_every) || epoch == config.epochs
}

/// Trains on `train` (already corrupted) and evaluates on `test`.
///
/// Epoch `e` (1-based) trains with `λ_{e-1}`; λ advances after each epoch
/// whether or not AL2 is enabled, and a disabled run records λ as 0.
pub fn train(
    config: &TrainConfig,
    train: &LabeledDataset,
    test: &LabeledDataset,
    observer: &mut dyn Observer,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.kind() != config.dataset || test.kind() != config.dataset {
        return Err(Error::InvalidArgument(format!(
            "config dataset {} does not match data ({} / {})",
            config.dataset,
            train.kind(),
            test.kind()
        )));
    }
    let started = Instant::now();
    let mut model = Model::build(config.dataset, config.regularizer, InitSeed(config.init_seed))?;
    model.reseed_dropout(config.dropout_seed);
    let mut sgd = Sgd::new(config.learning_rate, config.momentum, model.params());
    let mut schedule = config.schedule;

    let (lc0, lr0) = evaluate_losses(&model, train, config.penalty, config.eval_batch_size)?;
    let pretrain = MetricRecord {
        epoch: 0,
        test_accuracy: evaluate(&model, test, config.eval_batch_size)?,
        loss_c: lc0,
        loss_r: lr0,
        lambda: if config.al2_enabled { schedule.current() } else { 0.0 },
        wall_time: started.elapsed().as_secs_f64(),
    };
    observer.pretrain(&pretrain)?;

    let snapshot = |model: &Model, sgd: &Sgd, schedule: LambdaSchedule, epoch: u64| Checkpoint {
        epoch,
        model: model.clone(),
        al2_enabled: config.al2_enabled,
        penalty: config.penalty,
        schedule,
        momentum: sgd.velocity().to_vec(),
    };
    let mut checkpoints = Vec::new();
    if is_checkpoint_epoch(config, 0) {
        let c = snapshot(&model, &sgd, schedule, 0);
        observer.checkpoint(&c)?;
        checkpoints.push(c);
    }

    let mut metrics = Vec::with_capacity(config.epochs as usize);
    for epoch in 1..=config.epochs {
        model.set_mode(Mode::Train);
        let lambda = if config.al2_enabled { schedule.current() } else { 0.0 };
        let plan = BatchPlan {
            batch_size: config.batch_size.min(train.len()),
            shuffle_seed: config.shuffle_seed,
            epoch: epoch - 1,
        };
        let (mut sum_c, mut sum_r, mut seen) = (0.0, 0.0, 0usize);
        for (b, batch) in train.batches(&plan)?.enumerate() {
            let batch = batch?;
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged {
                    epoch: epoch as usize,
                    batch: b,
                },
                other => other,
            };
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch.images).map_err(diverged)?;
            let (mut loss, parts) =
                combined_loss(&mut tape, out.logits, &batch.labels, out.features, lambda, config.penalty)
                    .map_err(diverged)?;
            if let Regularizer::WeightDecay { coefficient } = config.regularizer {
                let wd = model.weight_decay_penalty(&mut tape, &out.params, coefficient)?;
                loss = tape.add(loss, wd).map_err(diverged)?;
            }
            let grads = tape.backward(loss).map_err(diverged)?;
            let g: Vec<&[f64]> = out
                .params
                .iter()
                .map(|&v| grads.get(v).expect("parameters require grad"))
                .collect();
            sgd.step(model.params_mut(), &g);
            let n = batch.labels.len();
            sum_c += parts.classification * n as f64;
            sum_r += parts.regularization * n as f64;
            seen += n;
        }
        model.set_mode(Mode::Eval);
        let evaluate_now = epoch % config.eval_every == 0 || epoch == config.epochs;
        let record = MetricRecord {
            epoch,
            test_accuracy: if evaluate_now {
                evaluate(&model, test, config.eval_batch_size)?
            } else {
                f64::NAN
            },
            loss_c: sum_c / seen as f64,
            loss_r: sum_r / seen as f64,
            lambda,
            wall_time: started.elapsed().as_secs_f64(),
        };
        schedule.advance();
        observer.epoch(&record)?;
        metrics.push(record);
        if is_checkpoint_epoch(config, epoch) {
            let c = snapshot(&model, &sgd, schedule, epoch);
            observer.checkpoint(&c)?;
            checkpoints.push(c);
        }
    }
    model.set_mode(Mode::Eval);
    Ok(TrainOutcome {
        model,
        pretrain,
        metrics,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ParamKind, Side};

    #[test]
    fn momentum_step_matches_closed_form() {
        // f(p) = ½(a p0² + b p1²), gradient (a p0, b p1).
        let (a, b, lr, mu) = (2.0, 0.5, 0.1, 0.9);
        let mut params = vec![Param {
            name: "p".into(),
            side: Side::Head,
            kind: ParamKind::Weight,
            value: Tensor::new(vec![2], vec![1.0, -3.0]).unwrap(),
        }];
        let mut sgd = Sgd::new(lr, mu, &params);
        let mut v = [0.0, 0.0];
        let mut p = [1.0, -3.0];
        for _ in 0..3 {
            let g = [a * params[0].value.data()[0], b * params[0].value.data()[1]];
            sgd.step(&mut params, &[&g]);
            let gh = [a * p[0], b * p[1]];
            for i in 0..2 {
                v[i] = mu * v[i] + gh[i];
                p[i] -= lr * v[i];
            }
            assert_eq!(params[0].value.data(), &p);
        }
        // First step by hand: v = g = (2, -1.5), p = (1 - 0.2, -3 + 0.15).
        let mut one = vec![Param {
            value: Tensor::new(vec![2], vec![1.0, -3.0]).unwrap(),
            ..params[0].clone()
        }];
        Sgd::new(lr, mu, &one.clone()).step(&mut one, &[&[2.0, -1.5]]);
        assert!((one[0].value.data()[0] - 0.8).abs() < 1e-15);
        assert!((one[0].value.data()[1] + 2.85).abs() < 1e-15);
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let logits = Tensor::new(vec![3, 3], vec![0.0, 0.0, 0.0, 1.0, 2.0, 2.0, 5.0, -1.0, 5.0]).unwrap();
        assert_eq!(argmax_rows(&logits), vec![0, 1, 0]);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let r = MetricRecord {
            epoch: 7,
            test_accuracy: 91.25,
            loss_c: 0.1 + 0.2,
            loss_r: 119.1,
            lambda: 0.011,
            wall_time: 3.5,
        };
        let text = metrics_csv(std::slice::from_ref(&r));
        assert_eq!(text.lines().next(), Some(METRICS_HEADER));
        let back = parse_metrics_csv(&text).unwrap();
        assert_eq!(back[0], MetricRecord { wall_time: 0.0, ..r });
    }

    #[test]
    fn validate_rejects_nonsense() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { momentum: 1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { corruption_fraction: -0.1, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: f64::NAN, ..ok }.validate().is_err());
    }
}
