//! Budgeted batch classification: how many samples should leave at each
//! classifier, how to pick the exit probability that meets a budget, and
//! how to turn that into confidence thresholds on a validation set.
//!
//! With a constant exit probability `q`, a sample reaching classifier `k`
//! leaves there with probability `q`, so the fraction exiting at `k` is
//! `q_k = z (1 - q)^(k-1) q`, normalised over the `K` classifiers. The
//! expected cost of a batch of `M` samples is `M Σ q_k C_k`, which falls
//! monotonically as `q` grows; [`solve_budget`] bisects on that.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, input_err, Error, Result};

/// Smallest exit probability the solver returns.
pub const Q_MIN: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const MAX_BISECTION_STEPS: usize = 100;
/// Threshold that no max-softmax confidence can reach.
pub const NEVER_EXIT: f64 = 1.0 + 1e-9;

/// Fraction of samples exiting at each of `k` classifiers for exit
/// probability `q`.
pub fn exit_distribution(q: f64, k: usize) -> Result<Vec<f64>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(input_err(format!("exit probability must lie in (0, 1], got {q}")));
    }
    if k == 0 {
        return Err(config_err("exit distribution over zero classifiers"));
    }
    let raw: Vec<f64> = (0..k).map(|i| (1.0 - q).powi(i as i32) * q).collect();
    let z = 1.0 / raw.iter().sum::<f64>();
    Ok(raw.into_iter().map(|r| z * r).collect())
}

/// `M Σ_k q_k C_k`.
pub fn expected_cost(q: f64, costs: &[f64], batch: usize) -> Result<f64> {
    let qk = exit_distribution(q, costs.len())?;
    Ok(batch as f64 * qk.iter().zip(costs).map(|(p, c)| p * c).sum::<f64>())
}

/// Which end of the feasible range a budget fell off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Clamp {
    /// Budget at or below `M C_1`: everything exits at the first classifier.
    AllExitFirst,
    /// Budget at or above `M mean(C)`: route as deep as the model allows.
    MaxDepth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSolution {
    pub q: f64,
    pub clamp: Option<Clamp>,
    pub iterations: usize,
}

/// Finds the exit probability whose expected cost matches budget `b`.
///
/// Returns `q = 1` when `b <= M C_1` and `q = Q_MIN` when `b >= M mean(C)`;
/// otherwise bisects on `q ∈ [Q_MIN, 1]` and guarantees
/// `|expected_cost(q) - b| <= tol * b`.
pub fn solve_budget(costs: &[f64], batch: usize, budget: f64, tol: f64) -> Result<BudgetSolution> {
    if costs.is_empty() {
        return Err(config_err("cannot solve a budget with zero classifiers"));
    }
    if !(budget > 0.0) {
        return Err(input_err(format!("budget must be positive, got {budget}")));
    }
    if costs.windows(2).any(|w| w[0] > w[1]) {
        return Err(input_err("classifier costs must be nondecreasing"));
    }
    let m = batch as f64;
    if budget <= m * costs[0] {
        return Ok(BudgetSolution { q: 1.0, clamp: Some(Clamp::AllExitFirst), iterations: 0 });
    }
    let mean = costs.iter().sum::<f64>() / costs.len() as f64;
    if budget >= m * mean {
        return Ok(BudgetSolution { q: Q_MIN, clamp: Some(Clamp::MaxDepth), iterations: 0 });
    }
    // f(q) = expected_cost(q) - budget is nonincreasing in q.
    let (mut lo, mut hi) = (Q_MIN, 1.0);
    let mut q = 0.5 * (lo + hi);
    let mut iterations = 0;
    while iterations < MAX_BISECTION_STEPS {
        iterations += 1;
        q = 0.5 * (lo + hi);
        let f = expected_cost(q, costs, batch)? - budget;
        if f == 0.0 || hi - lo <= f64::EPSILON * q {
            break;
        }
        if f > 0.0 {
            lo = q;
        } else {
            hi = q;
        }
    }
    let err = (expected_cost(q, costs, batch)? - budget).abs();
    if err > tol * budget {
        return Err(input_err(format!(
            "bisection stopped {err} away from budget {budget} (tolerance {tol})"
        )));
    }
    Ok(BudgetSolution { q, clamp: None, iterations })
}

/// Per-sample, per-classifier max-softmax confidences with correctness
/// flags, collected on a validation set.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceProfile {
    confidence: Vec<Vec<f64>>,
    correct: Vec<Vec<bool>>,
}

impl ConfidenceProfile {
    pub fn new(confidence: Vec<Vec<f64>>, correct: Vec<Vec<bool>>) -> Result<Self> {
        let k = confidence.first().map(Vec::len).unwrap_or(0);
        if confidence.len() != correct.len() {
            return Err(input_err("confidence and correctness rows differ in count"));
        }
        for (c, ok) in confidence.iter().zip(&correct) {
            if c.len() != k || ok.len() != k || k == 0 {
                return Err(input_err("every profile row needs one entry per classifier"));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(input_err("non-finite confidence in profile"));
            }
        }
        Ok(Self { confidence, correct })
    }

    pub fn num_samples(&self) -> usize {
        self.confidence.len()
    }

    pub fn num_classifiers(&self) -> usize {
        self.confidence.first().map(Vec::len).unwrap_or(0)
    }

    pub fn confidence(&self, sample: usize, k: usize) -> f64 {
        self.confidence[sample][k]
    }

    pub fn correct(&self, sample: usize, k: usize) -> bool {
        self.correct[sample][k]
    }

    /// Accuracy of classifier `k` (0-based) on its own.
    pub fn accuracy(&self, k: usize) -> f64 {
        let n = self.num_samples();
        self.correct.iter().filter(|row| row[k]).count() as f64 / n as f64
    }

    /// Long-format CSV: `sample,k,confidence,correct` with 1-based `k`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["sample", "k", "confidence", "correct"])?;
        for (i, (row, ok)) in self.confidence.iter().zip(&self.correct).enumerate() {
            for k in 0..row.len() {
                w.write_record([
                    i.to_string(),
                    (k + 1).to_string(),
                    format!("{:e}", row[k]),
                    u8::from(ok[k]).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            sample: usize,
            k: usize,
            confidence: f64,
            correct: u8,
        }
        let mut confidence: Vec<Vec<f64>> = Vec::new();
        let mut correct: Vec<Vec<bool>> = Vec::new();
        for row in csv::Reader::from_reader(input).deserialize() {
            let row: Row = row?;
            if row.sample > confidence.len() || row.k == 0 {
                return Err(input_err(format!("profile rows out of order at sample {}", row.sample)));
            }
            if row.sample == confidence.len() {
                confidence.push(Vec::new());
                correct.push(Vec::new());
            }
            if confidence[row.sample].len() + 1 != row.k {
                return Err(input_err(format!("profile rows out of order at sample {} k {}", row.sample, row.k)));
            }
            confidence[row.sample].push(row.confidence);
            correct[row.sample].push(row.correct != 0);
        }
        Self::new(confidence, correct)
    }
}

/// Target exit counts `n_k = round(n q_k)`, with the final classifier
/// absorbing the remainder so the counts sum to `n`.
pub fn target_exit_counts(qk: &[f64], n: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = qk.iter().map(|q| (n as f64 * q).round() as usize).collect();
    let last = counts.len() - 1;
    let head: usize = counts[..last].iter().sum();
    counts[last] = n.saturating_sub(head);
    counts
}

/// Result of threshold calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    /// `θ_k`, with `θ_K = 0`.
    pub thresholds: Vec<f64>,
    /// Target counts `n_k`.
    pub target_counts: Vec<usize>,
    /// How many calibration samples actually exit at each classifier
    /// (can exceed `n_k` when confidences tie at `θ_k`).
    pub exit_counts: Vec<usize>,
}

/// Chooses thresholds so that about `n q_k` profile samples exit at each
/// classifier, processing classifiers in order on the samples still alive.
/// A sample exits at `k` when its confidence is `>= θ_k`.
pub fn calibrate_thresholds(profile: &ConfidenceProfile, qk: &[f64], n: usize) -> Result<Calibration> {
    let k_total = profile.num_classifiers();
    if profile.num_samples() == 0 {
        return Err(input_err("cannot calibrate on an empty profile"));
    }
    if qk.len() != k_total {
        return Err(config_err(format!(
            "exit distribution has {} entries, profile has {k_total} classifiers",
            qk.len()
        )));
    }
    let target_counts = target_exit_counts(qk, n);
    let mut alive: Vec<usize> = (0..profile.num_samples()).collect();
    let mut thresholds = Vec::with_capacity(k_total);
    let mut exit_counts = Vec::with_capacity(k_total);
    for k in 0..k_total - 1 {
        let want = target_counts[k];
        let theta = if want == 0 || alive.is_empty() {
            NEVER_EXIT
        } else {
            let mut conf: Vec<f64> = alive.iter().map(|&i| profile.confidence(i, k)).collect();
            conf.sort_by(|a, b| b.total_cmp(a));
            if want > conf.len() {
                log::warn!(
                    "classifier {}: {want} exits requested but only {} samples remain; all exit",
                    k + 1,
                    conf.len()
                );
                *conf.last().unwrap()
            } else {
                conf[want - 1]
            }
        };
        let before = alive.len();
        alive.retain(|&i| profile.confidence(i, k) < theta);
        exit_counts.push(before - alive.len());
        thresholds.push(theta);
    }
    thresholds.push(0.0);
    exit_counts.push(alive.len());
    Ok(Calibration { thresholds, target_counts, exit_counts })
}

/// Exit index (0-based) of every profile sample under `thresholds`.
pub fn replay_exits(profile: &ConfidenceProfile, thresholds: &[f64]) -> Vec<usize> {
    let last = thresholds.len() - 1;
    (0..profile.num_samples())
        .map(|i| (0..last).find(|&k| profile.confidence(i, k) >= thresholds[k]).unwrap_or(last))
        .collect()
}

/// Everything needed to run budgeted inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitPlan {
    pub config_hash: String,
    pub q: f64,
    pub q_k: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub costs: Vec<u64>,
    /// Total budget `B` for the batch.
    pub budget: f64,
    /// Batch size `M` the budget is shared across.
    pub batch_size: usize,
    pub clamp: Option<Clamp>,
    pub target_counts: Vec<usize>,
    pub calibration_exit_counts: Vec<usize>,
}

impl ExitPlan {
    /// Solves for `q`, derives `q_k` and calibrates thresholds on `profile`.
    pub fn fit(
        config_hash: String,
        costs: &[u64],
        batch_size: usize,
        budget: f64,
        profile: &ConfidenceProfile,
    ) -> Result<Self> {
        let cf: Vec<f64> = costs.iter().map(|&c| c as f64).collect();
        let sol = solve_budget(&cf, batch_size, budget, DEFAULT_TOLERANCE)?;
        let q_k = exit_distribution(sol.q, costs.len())?;
        let cal = calibrate_thresholds(profile, &q_k, profile.num_samples())?;
        Ok(Self {
            config_hash,
            q: sol.q,
            q_k,
            thresholds: cal.thresholds,
            costs: costs.to_vec(),
            budget,
            batch_size,
            clamp: sol.clamp,
            target_counts: cal.target_counts,
            calibration_exit_counts: cal.exit_counts,
        })
    }

    pub fn num_classifiers(&self) -> usize {
        self.thresholds.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.thresholds.len();
        if k == 0 || self.q_k.len() != k || self.costs.len() != k {
            return Err(config_err("exit plan vectors disagree on the classifier count"));
        }
        if self.thresholds[k - 1] != 0.0 {
            return Err(config_err("the final threshold must be 0"));
        }
        if (self.q_k.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err("exit distribution does not sum to 1"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let plan: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        plan.validate()?;
        Ok(plan)
    }
}
