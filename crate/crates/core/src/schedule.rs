//! Per-class statistics, positive/negative class splits and class-dependent
//! perturbation bounds, assembled once per epoch into a [`PerturbationPlan`].
//!
//! The splitting statistic `s̄_c` is put on a `[0, 1]` scale before it enters
//! the bound formula `ε_c = ε + Δε·|τ − s̄_c|`:
//!
//! | mode      | split rule                    | `s̄_c`                        |
//! |-----------|-------------------------------|------------------------------|
//! | accuracy  | `q̄_c < τ` → positive          | `q̄_c`                        |
//! | frequency | `N_c < τ` → positive          | `N_c / max N`                |
//! | variance  | `Var(h_c) > τ_v` → negative   | `Var(h_c) / (max Var + 1e-12)` |
//!
//! The threshold is normalised the same way, so one `τ` serves both the split
//! and the bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Added to the largest variance before normalising.
pub const VARIANCE_NORM_EPS: f64 = 1e-12;

/// Initial running accuracy for every class.
pub const INITIAL_ACCURACY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// amplify the class's gradient
    Positive,
    /// dampen the class's gradient
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Accuracy,
    Frequency,
    Variance,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::Accuracy => "accuracy",
            SplitMode::Frequency => "frequency",
            SplitMode::Variance => "variance",
        }
    }
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(SplitMode::Accuracy),
            "frequency" => Ok(SplitMode::Frequency),
            "variance" => Ok(SplitMode::Variance),
            other => Err(Error::Config(format!(
                "unknown split mode '{other}' (expected accuracy, frequency or variance)"
            ))),
        }
    }
}

/// Split threshold: a fixed value on the raw statistic's scale, or the median
/// of the statistic across classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threshold {
    Value(f64),
    Median,
}

impl std::fmt::Display for Threshold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Threshold::Value(v) => write!(f, "{v}"),
            Threshold::Median => f.write_str("median"),
        }
    }
}

impl std::str::FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "median" {
            return Ok(Threshold::Median);
        }
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Threshold::Value)
            .ok_or_else(|| {
                Error::Config(format!("threshold must be a number or 'median', got '{s}'"))
            })
    }
}

/// Running per-class statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    /// `N_c` over the training set
    pub counts: Vec<usize>,
    /// running accuracy `q̄_c`
    pub accuracy: Vec<f64>,
    /// running intra-class logit-gradient variance `Var(h_c)`
    pub variance: Vec<f64>,
}

impl ClassStats {
    pub fn new(counts: Vec<usize>) -> Self {
        let c = counts.len();
        Self {
            counts,
            accuracy: vec![INITIAL_ACCURACY; c],
            variance: vec![0.0; c],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// EMA update from one batch. Classes absent from the batch keep their
    /// values. The variance statistic of a class is `(1/n_c) Σ ‖h_i − h̄_c‖²`
    /// over its in-batch samples.
    pub fn update(
        &mut self,
        predictions: &[usize],
        labels: &[usize],
        logit_grads: &[Vec<f64>],
        beta: f64,
    ) -> Result<()> {
        if predictions.len() != labels.len() || logit_grads.len() != labels.len() {
            return Err(Error::shape(
                format!("{} predictions and logit gradients", labels.len()),
                format!("{} / {}", predictions.len(), logit_grads.len()),
            ));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::InvalidInput(format!(
                "ema beta must be in [0,1), got {beta}"
            )));
        }
        let c = self.num_classes();
        let mut n = vec![0usize; c];
        let mut correct = vec![0usize; c];
        let width = logit_grads.first().map_or(0, Vec::len);
        let mut mean = vec![vec![0.0; width]; c];
        for ((&p, &y), h) in predictions.iter().zip(labels).zip(logit_grads) {
            if y >= c {
                return Err(Error::Index { index: y, len: c });
            }
            n[y] += 1;
            correct[y] += usize::from(p == y);
            math::axpy(1.0, h, &mut mean[y]);
        }
        for k in 0..c {
            if n[k] > 0 {
                mean[k].iter_mut().for_each(|v| *v /= n[k] as f64);
            }
        }
        let mut dispersion = vec![0.0; c];
        for (&y, h) in labels.iter().zip(logit_grads) {
            dispersion[y] += h
                .iter()
                .zip(&mean[y])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        for k in 0..c {
            if n[k] == 0 {
                continue;
            }
            let nk = n[k] as f64;
            self.accuracy[k] = beta * self.accuracy[k] + (1.0 - beta) * (correct[k] as f64 / nk);
            self.variance[k] = beta * self.variance[k] + (1.0 - beta) * (dispersion[k] / nk);
        }
        Ok(())
    }
}

/// Positive / negative class partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

fn split_where(values: &[f64], positive: impl Fn(f64) -> bool) -> Split {
    let (positive, negative) = (0..values.len()).partition(|&c| positive(values[c]));
    Split { positive, negative }
}

/// Case 1: classes with running accuracy below `tau` are amplified.
pub fn split_by_accuracy(accuracy: &[f64], tau: f64) -> Split {
    split_where(accuracy, |q| q < tau)
}

/// Case 2: classes rarer than `tau` are amplified.
pub fn split_by_frequency(counts: &[f64], tau: f64) -> Split {
    split_where(counts, |n| n < tau)
}

/// Case 3: classes whose logit-gradient variance exceeds `tau_v` are dampened.
pub fn split_by_variance(variance: &[f64], tau_v: f64) -> Split {
    split_where(variance, |v| !(v > tau_v))
}

/// `ε_c = ε + Δε·|τ − s̄_c|` per class.
pub fn epsilon_bounds(epsilon: f64, delta_epsilon: f64, tau: f64, stat: &[f64]) -> Vec<f64> {
    stat.iter()
        .map(|s| epsilon + delta_epsilon * (tau - s).abs())
        .collect()
}

/// Class-frequency weighted mean bound `Σ_c (N_c/N)·ε_c`.
pub fn mean_epsilon(eps_c: &[f64], counts: &[usize]) -> Result<f64> {
    if eps_c.len() != counts.len() {
        return Err(Error::shape(
            format!("{} class counts", eps_c.len()),
            format!("{}", counts.len()),
        ));
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::InvalidInput(
            "mean epsilon needs at least one sample".into(),
        ));
    }
    Ok(eps_c
        .iter()
        .zip(counts)
        .map(|(e, &k)| (k as f64 / n as f64) * e)
        .sum())
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Settings that turn class statistics into a plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub split: SplitMode,
    /// base bound `ε`
    pub epsilon: f64,
    /// bound variation `Δε`
    pub delta_epsilon: f64,
    /// split threshold on the raw statistic (accuracy / count / variance)
    pub tau: Threshold,
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.delta_epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "epsilon and delta_epsilon must be >= 0 (got {}, {})",
                self.epsilon, self.delta_epsilon
            )));
        }
        if let Threshold::Value(t) = self.tau {
            let ok = match self.split {
                SplitMode::Accuracy => (0.0..=1.0).contains(&t),
                SplitMode::Frequency => t > 0.0,
                SplitMode::Variance => t >= 0.0,
            };
            if !ok {
                return Err(Error::Config(format!(
                    "threshold {t} is out of range for {} split",
                    self.split.as_str()
                )));
            }
        }
        Ok(())
    }
}

/// Class partition and bounds for one epoch. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationPlan {
    pub split: SplitMode,
    pub membership: Vec<Direction>,
    pub eps_c: Vec<f64>,
    /// threshold on the raw statistic
    pub tau_raw: f64,
    /// threshold on the normalised scale shared with `stat`
    pub tau: f64,
    /// normalised splitting statistic `s̄_c`
    pub stat: Vec<f64>,
    pub epsilon: f64,
    pub delta_epsilon: f64,
}

impl PerturbationPlan {
    pub fn num_classes(&self) -> usize {
        self.membership.len()
    }

    pub fn direction(&self, class: usize) -> Option<Direction> {
        self.membership.get(class).copied()
    }

    pub fn bound(&self, class: usize) -> Option<f64> {
        self.eps_c.get(class).copied()
    }

    pub fn positive(&self) -> Vec<usize> {
        self.members(Direction::Positive)
    }

    pub fn negative(&self) -> Vec<usize> {
        self.members(Direction::Negative)
    }

    fn members(&self, d: Direction) -> Vec<usize> {
        (0..self.membership.len())
            .filter(|&c| self.membership[c] == d)
            .collect()
    }

    /// Plan that leaves every class untouched (all bounds zero).
    pub fn inert(num_classes: usize) -> Self {
        Self {
            split: SplitMode::Accuracy,
            membership: vec![Direction::Negative; num_classes],
            eps_c: vec![0.0; num_classes],
            tau_raw: INITIAL_ACCURACY,
            tau: INITIAL_ACCURACY,
            stat: vec![INITIAL_ACCURACY; num_classes],
            epsilon: 0.0,
            delta_epsilon: 0.0,
        }
    }

    /// Recomputes `Σ_c (N_c/N)·ε_c` for this plan.
    pub fn mean_epsilon(&self, counts: &[usize]) -> Result<f64> {
        mean_epsilon(&self.eps_c, counts)
    }
}

/// Build the epoch plan from the current statistics.
pub fn build_plan(stats: &ClassStats, cfg: &PlanConfig) -> Result<PerturbationPlan> {
    cfg.validate()?;
    let c = stats.num_classes();
    if c == 0 {
        return Err(Error::InvalidInput("plan needs at least one class".into()));
    }
    let raw: Vec<f64> = match cfg.split {
        SplitMode::Accuracy => stats.accuracy.clone(),
        SplitMode::Frequency => stats.counts.iter().map(|&n| n as f64).collect(),
        SplitMode::Variance => stats.variance.clone(),
    };
    let tau_raw = match cfg.tau {
        Threshold::Value(v) => v,
        Threshold::Median => median(&raw),
    };
    let (split, stat, tau) = match cfg.split {
        SplitMode::Accuracy => (split_by_accuracy(&raw, tau_raw), raw.clone(), tau_raw),
        SplitMode::Frequency => {
            let max = raw.iter().copied().fold(0.0, f64::max);
            if max <= 0.0 {
                return Err(Error::InvalidInput(
                    "frequency split needs nonzero class counts".into(),
                ));
            }
            let norm: Vec<f64> = raw.iter().map(|n| n / max).collect();
            let tau = tau_raw / max;
            (split_by_frequency(&norm, tau), norm, tau)
        }
        SplitMode::Variance => {
            let scale = raw.iter().copied().fold(0.0, f64::max) + VARIANCE_NORM_EPS;
            let norm: Vec<f64> = raw.iter().map(|v| v / scale).collect();
            (split_by_variance(&raw, tau_raw), norm, tau_raw / scale)
        }
    };
    let mut membership = vec![Direction::Negative; c];
    for &k in &split.positive {
        membership[k] = Direction::Positive;
    }
    let eps_c = epsilon_bounds(cfg.epsilon, cfg.delta_epsilon, tau, &stat);
    Ok(PerturbationPlan {
        split: cfg.split,
        membership,
        eps_c,
        tau_raw,
        tau,
        stat,
        epsilon: cfg.epsilon,
        delta_epsilon: cfg.delta_epsilon,
    })
}
