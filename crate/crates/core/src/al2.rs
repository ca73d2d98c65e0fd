//! Progressive activation regularization.
//!
//! The training objective at epoch `e` is
//! `L_c(ψ(φ(x)), y) + λ_e · L_r(φ(x))`, where `L_c` is the mean cross-entropy,
//! `L_r` the mean per-sample Euclidean norm of the feature representation, and
//! `λ_e` grows by a factor 1.1 per epoch while `λ ≤ 5` and by 1.01 afterwards.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Guards the derivative of the norm at the all-zero representation.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSchedule {
    pub lambda0: f64,
    pub low_factor: f64,
    pub high_factor: f64,
    pub threshold: f64,
    current: f64,
    epoch: u64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self::new(0.01, 1.1, 1.01, 5.0).expect("default schedule is valid")
    }
}

impl LambdaSchedule {
    pub fn new(lambda0: f64, low_factor: f64, high_factor: f64, threshold: f64) -> Result<Self> {
        if !(lambda0 > 0.0 && lambda0.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda0 must be positive, got {lambda0}")));
        }
        if !(low_factor > 1.0 && high_factor > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "growth factors must exceed 1, got {low_factor} and {high_factor}"
            )));
        }
        if !threshold.is_finite() {
            return Err(Error::InvalidArgument(format!("threshold must be finite, got {threshold}")));
        }
        Ok(LambdaSchedule {
            lambda0,
            low_factor,
            high_factor,
            threshold,
            current: lambda0,
            epoch: 0,
        })
    }

    /// Restores a schedule at a given point (checkpoint resume).
    pub fn with_state(mut self, current: f64, epoch: u64) -> Result<Self> {
        if !(current > 0.0 && current.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {current}")));
        }
        self.current = current;
        self.epoch = epoch;
        Ok(self)
    }

    pub fn current(&self) -> f64 {
        self.current
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Growth factor applied by the next step. At exactly `threshold` the low
    /// branch fires, so one factor is used per step.
    pub fn factor(&self) -> f64 {
        if self.current <= self.threshold {
            self.low_factor
        } else {
            self.high_factor
        }
    }

    /// Advances one epoch.
    #[must_use]
    pub fn step(self) -> Self {
        LambdaSchedule {
            current: self.current * self.factor(),
            epoch: self.epoch + 1,
            ..self
        }
    }

    pub fn advance(&mut self) {
        *self = self.step();
    }

    /// `λ_e` for `e = 0..=epochs`.
    pub fn trajectory(self, epochs: u64) -> Vec<f64> {
        let mut s = self;
        let mut out = Vec::with_capacity(epochs as usize + 1);
        out.push(s.current);
        for _ in 0..epochs {
            s.advance();
            out.push(s.current);
        }
        out
    }
}

/// Form of the activation penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Penalty {
    /// Mean per-sample Euclidean norm.
    #[default]
    Norm,
    /// Mean per-sample squared Euclidean norm.
    SquaredNorm,
}

impl Penalty {
    pub fn key(self) -> &'static str {
        match self {
            Penalty::Norm => "norm",
            Penalty::SquaredNorm => "squared",
        }
    }

    pub fn from_key(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(Penalty::Norm),
            "squared" | "squared_norm" => Ok(Penalty::SquaredNorm),
            other => Err(Error::InvalidArgument(format!("unknown penalty '{other}'"))),
        }
    }
}

/// `L_r` over features `[N, ...]`: the mean over samples of
/// `sqrt(Σ_j φ(x_i)_j² + ε)`.
pub fn activation_l2(tape: &mut Tape, features: Var) -> Result<Var> {
    tape.row_norm_mean(features, NORM_EPS)
}

pub fn activation_penalty(tape: &mut Tape, features: Var, penalty: Penalty) -> Result<Var> {
    match penalty {
        Penalty::Norm => activation_l2(tape, features),
        Penalty::SquaredNorm => tape.row_squared_norm_mean(features),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// `L_c`.
    pub classification: f64,
    /// `L_r` before weighting.
    pub regularization: f64,
    pub lambda: f64,
}

/// The per-batch objective: `total = L_c + λ · L_r`.
///
/// `lambda` is the weight in force for the current epoch (zero disables the
/// term's gradient while `L_r` is still reported).
pub fn combined_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    features: Var,
    lambda: f64,
    penalty: Penalty,
) -> Result<(Var, LossBreakdown)> {
    let lc = tape.softmax_cross_entropy(logits, labels)?;
    let lr = activation_penalty(tape, features, penalty)?;
    let weighted = tape.scale(lr, lambda)?;
    let total = tape.add(lc, weighted)?;
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        classification: tape.value(lc).item(),
        regularization: tape.value(lr).item(),
        lambda,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_steps() {
        let s = LambdaSchedule::default();
        assert_eq!(s.current(), 0.01);
        assert_eq!(s.epoch(), 0);
        let s1 = s.step();
        assert!((s1.current() - 0.011).abs() < 1e-15);
        assert_eq!(s1.epoch(), 1);

        let high = LambdaSchedule::default().with_state(6.0, 100).unwrap().step();
        assert!((high.current() - 6.06).abs() < 1e-12);
    }

    #[test]
    fn one_branch_per_step() {
        for (lam, factor) in [(0.01, 1.1), (4.99, 1.1), (5.0, 1.1), (5.01, 1.01), (10.0, 1.01)] {
            let s = LambdaSchedule::default().with_state(lam, 0).unwrap();
            assert_eq!(s.factor(), factor, "lambda {lam}");
            let next = s.step().current();
            assert_eq!(next, lam * factor);
            assert!(next > lam);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(LambdaSchedule::new(0.0, 1.1, 1.01, 5.0).is_err());
        assert!(LambdaSchedule::new(0.01, 1.0, 1.01, 5.0).is_err());
        assert!(LambdaSchedule::new(0.01, 1.1, 0.9, 5.0).is_err());
    }

    #[test]
    fn norm_of_three_four() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap(), true);
        let lr = activation_l2(&mut tape, f).unwrap();
        assert!((tape.value(lr).item() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn zero_features_are_near_zero() {
        let mut tape = Tape::new();
        let f = tape.leaf(Tensor::zeros(&[3, 50, 4, 4]), true);
        let lr = activation_l2(&mut tape, f).unwrap();
        assert!(tape.value(lr).item() <= 1e-6);
        let grads = tape.backward(lr).unwrap();
        assert!(grads.get(f).unwrap().iter().all(|g| g.is_finite() && *g == 0.0));
    }

    #[test]
    fn zero_lambda_gives_classification_only() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![2, 3], vec![0.1, 0.5, -0.2, 1.0, 0.0, 0.3]).unwrap(), true);
        let feats = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let (_, b) = combined_loss(&mut tape, logits, &[1, 0], feats, 0.0, Penalty::Norm).unwrap();
        assert_eq!(b.total, b.classification);
        assert!(b.regularization > 0.0);
    }
}
