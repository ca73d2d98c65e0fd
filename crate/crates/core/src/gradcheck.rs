//! Finite-difference verification of the analytic gradients of the full
//! network under the AL2-combined loss.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::al2::{combined_loss, Penalty};
use crate::error::Result;
use crate::model::{DatasetKind, InitSeed, Model, Regularizer, NUM_CLASSES};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub dataset: DatasetKind,
    pub batch_size: usize,
    /// Coordinates that must be compared (kink-crossing ones are replaced).
    pub coordinates: usize,
    pub step: f64,
    pub lambda: f64,
    pub penalty: Penalty,
    /// Relative errors are `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            dataset: DatasetKind::Mnist,
            batch_size: 8,
            coordinates: 120,
            step: 1e-5,
            lambda: 0.5,
            penalty: Penalty::Norm,
            floor: 1e-6,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub regularizer: Regularizer,
    pub checks: Vec<CoordinateCheck>,
    /// Sampled coordinates whose ±step perturbation crossed a ReLU or
    /// max-pool kink, and were therefore not compared.
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordinateCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

struct Problem {
    model: Model,
    images: Tensor,
    labels: Vec<usize>,
    config: GradCheckConfig,
}

impl Problem {
    /// Records the train-mode loss on a fresh tape. The model is cloned so
    /// its dropout stream is rewound and every evaluation sees the same mask.
    fn record(&self, model: &Model) -> Result<(Tape, Var, Vec<Var>)> {
        let mut m = model.clone();
        let mut tape = Tape::new();
        let out = m.forward(&mut tape, &self.images)?;
        let (mut loss, _) = combined_loss(
            &mut tape,
            out.logits,
            &self.labels,
            out.features,
            self.config.lambda,
            self.config.penalty,
        )?;
        if let Regularizer::WeightDecay { coefficient } = m.regularizer() {
            let wd = m.weight_decay_penalty(&mut tape, &out.params, coefficient)?;
            loss = tape.add(loss, wd)?;
        }
        Ok((tape, loss, out.params))
    }

    /// Loss value and kink signature.
    fn loss(&self, model: &Model) -> Result<(f64, u64)> {
        let (tape, loss, _) = self.record(model)?;
        Ok((tape.value(loss).item(), tape.kink_signature()))
    }

    fn analytic(&self) -> Result<(Vec<Vec<f64>>, u64)> {
        let (tape, loss, params) = self.record(&self.model)?;
        let signature = tape.kink_signature();
        let grads = tape.backward(loss)?;
        let g = params
            .iter()
            .map(|&v| grads.get(v).expect("parameter gradient").to_vec())
            .collect();
        Ok((g, signature))
    }
}

/// Compares analytic and central-difference gradients on randomly sampled
/// parameter coordinates of a freshly initialized model.
pub fn check_model(regularizer: Regularizer, config: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::build(config.dataset, regularizer, InitSeed(config.seed))?;
    model.reseed_dropout(config.seed ^ 0x5eed);
    let shape = config.dataset.image_shape();
    let images = Tensor::from_fn(&[config.batch_size, shape[0], shape[1], shape[2]], |_| {
        rng.random_range(0.0..1.0)
    });
    let labels = (0..config.batch_size).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
    let problem = Problem {
        model,
        images,
        labels,
        config: *config,
    };
    let (grads, base_sig) = problem.analytic()?;

    // Every tensor gets a coordinate; the rest are spread by size.
    let sizes: Vec<(usize, usize)> = problem.model.params().iter().map(|p| p.value.len()).enumerate().collect();
    let mut checks = Vec::with_capacity(config.coordinates);
    let mut skipped = 0;
    let mut round = 0usize;
    while checks.len() < config.coordinates {
        let pi = if round < sizes.len() {
            round
        } else {
            sizes.choose_weighted(&mut rng, |&(_, n)| (n as f64).sqrt()).expect("non-empty").0
        };
        round += 1;
        let len = problem.model.params()[pi].value.len();
        let idx = rng.random_range(0..len);

        let mut plus = problem.model.clone();
        plus.params_mut()[pi].value.data_mut()[idx] += config.step;
        let mut minus = problem.model.clone();
        minus.params_mut()[pi].value.data_mut()[idx] -= config.step;
        let (lp, sp) = problem.loss(&plus)?;
        let (lm, sm) = problem.loss(&minus)?;
        if sp != base_sig || sm != base_sig {
            skipped += 1;
            if skipped > 50 * config.coordinates {
                break;
            }
            continue;
        }
        let numeric = (lp - lm) / (2.0 * config.step);
        let analytic = grads[pi][idx];
        checks.push(CoordinateCheck {
            param: problem.model.params()[pi].name.clone(),
            index: idx,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, config.floor),
        });
    }
    Ok(GradCheckReport {
        regularizer,
        checks,
        skipped_kinks: skipped,
    })
}

/// The four baseline variants with their default strengths.
pub fn all_regularizers() -> [Regularizer; 4] {
    [
        Regularizer::Bare,
        Regularizer::BatchNorm,
        Regularizer::Dropout {
            rate: Regularizer::DEFAULT_DROPOUT_RATE,
        },
        Regularizer::WeightDecay {
            coefficient: Regularizer::DEFAULT_WEIGHT_DECAY,
        },
    ]
}
