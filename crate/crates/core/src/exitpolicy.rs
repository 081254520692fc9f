//! Confidence-based early-exit decisions and threshold calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netgraph::{argmax, softmax, ExitPoint, ForwardEngine, MultiExitNetwork, WeightSet};
use crate::quantizer::BitWidth;
use crate::tensor::Tensor;

/// Calibration grid: 0.00, 0.05, ..., 1.00.
pub const THRESHOLD_GRID_STEPS: usize = 21;

/// Per-exit confidence thresholds. The final exit always accepts, so its
/// threshold is pinned at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitThresholds {
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
}

impl ExitThresholds {
    pub fn new(t1: f64, t2: f64) -> Result<Self> {
        for (name, t) in [("t1", t1), ("t2", t2)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Invalid(format!("{name} must lie in [0, 1], got {t}")));
            }
        }
        Ok(ExitThresholds { t1, t2, t3: 0.0 })
    }

    pub fn for_exit(&self, e: ExitPoint) -> f64 {
        match e {
            ExitPoint::Ee1 => self.t1,
            ExitPoint::Ee2 => self.t2,
            ExitPoint::Me => self.t3,
        }
    }
}

/// Why an inference stopped at the exit it did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitReason {
    /// The confidence rule fired (or the main exit accepted).
    Confidence,
    /// The scheduler ordered termination on remaining energy.
    Energy,
}

/// Record of one adaptive inference: confidence at every evaluated exit,
/// where it stopped, and the prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitDecisionTrace {
    pub confidences: Vec<(ExitPoint, f64)>,
    pub exit_taken: ExitPoint,
    pub predicted_class: usize,
}

/// Max softmax probability. Rejects vectors that do not sum to one within
/// 1e-6.
pub fn confidence(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Invalid("confidence of empty probability vector".into()));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!("probabilities sum to {sum}, not 1")));
    }
    if probs.iter().any(|&p| p < 0.0) {
        return Err(Error::Invalid("negative probability".into()));
    }
    Ok(probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// Strict comparison: the confidence must exceed the threshold.
pub fn should_exit(c: f64, t: f64) -> bool {
    c > t
}

/// Evaluate exits in order, stopping at the first whose confidence rule
/// fires; the main exit always accepts.
pub fn adaptive_inference(
    net: &MultiExitNetwork,
    weights: &WeightSet,
    input: &Tensor,
    thresholds: &ExitThresholds,
    precision: BitWidth,
) -> Result<(usize, ExitPoint, ExitDecisionTrace)> {
    let engine = ForwardEngine::new(net, weights, precision)?;
    let mut confidences = Vec::with_capacity(3);
    let mut cur = input.clone();
    for e in ExitPoint::ALL {
        cur = engine.forward_segment(e.index() - 1, &cur)?;
        let logits = engine.forward_exit_head(e.index() - 1, &cur)?;
        let probs = softmax(&logits.data)?;
        let c = confidence(&probs)?;
        confidences.push((e, c));
        if should_exit(c, thresholds.for_exit(e)) || e == ExitPoint::Me {
            let predicted_class = argmax(&logits.data);
            let trace = ExitDecisionTrace { confidences, exit_taken: e, predicted_class };
            return Ok((predicted_class, e, trace));
        }
    }
    unreachable!("the main exit always accepts")
}

/// Per-exit confidence and prediction for one sample, with every exit
/// evaluated. Calibration works over these.
#[derive(Debug, Clone)]
pub struct SampleEvaluation {
    pub confidence: [f64; 3],
    pub prediction: [usize; 3],
    pub label: usize,
}

/// Evaluate every exit for every sample once.
pub fn evaluate_samples(
    net: &MultiExitNetwork,
    weights: &WeightSet,
    inputs: &[Tensor],
    labels: &[usize],
    precision: BitWidth,
) -> Result<Vec<SampleEvaluation>> {
    if inputs.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let engine = ForwardEngine::new(net, weights, precision)?;
    let mut out = Vec::with_capacity(inputs.len());
    for (input, &label) in inputs.iter().zip(labels) {
        let mut confidence_per_exit = [0.0; 3];
        let mut prediction = [0usize; 3];
        let mut cur = input.clone();
        for e in ExitPoint::ALL {
            cur = engine.forward_segment(e.index() - 1, &cur)?;
            let logits = engine.forward_exit_head(e.index() - 1, &cur)?;
            let probs = softmax(&logits.data)?;
            confidence_per_exit[e.index() - 1] = confidence(&probs)?;
            prediction[e.index() - 1] = argmax(&logits.data);
        }
        out.push(SampleEvaluation { confidence: confidence_per_exit, prediction, label });
    }
    Ok(out)
}

/// Adaptive accuracy and exit rates of a threshold pair over pre-evaluated
/// samples, applying the first-crossing rule.
pub fn adaptive_stats(samples: &[SampleEvaluation], t1: f64, t2: f64) -> AdaptiveStats {
    let mut correct = 0usize;
    let mut exit_counts = [0usize; 3];
    let mut exit_correct = [0usize; 3];
    for s in samples {
        let exit = if should_exit(s.confidence[0], t1) {
            0
        } else if should_exit(s.confidence[1], t2) {
            1
        } else {
            2
        };
        exit_counts[exit] += 1;
        if s.prediction[exit] == s.label {
            correct += 1;
            exit_correct[exit] += 1;
        }
    }
    let n = samples.len();
    AdaptiveStats {
        accuracy: correct as f64 / n as f64,
        exit_rates: exit_counts.map(|c| c as f64 / n as f64),
        exit_accuracy: std::array::from_fn(|i| {
            if exit_counts[i] == 0 {
                None
            } else {
                Some(exit_correct[i] as f64 / exit_counts[i] as f64)
            }
        }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveStats {
    pub accuracy: f64,
    /// Fraction of inputs leaving at each exit; sums to one.
    pub exit_rates: [f64; 3],
    /// Accuracy among the inputs that left at each exit (`None` if unused).
    pub exit_accuracy: [Option<f64>; 3],
}

/// Calibration output: the chosen thresholds plus the statistics they
/// achieve on the calibration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub schema: u32,
    pub bit_width: BitWidth,
    pub thresholds: ExitThresholds,
    pub full_depth_accuracy: f64,
    pub max_accuracy_drop: f64,
    pub stats: AdaptiveStats,
}

pub const CALIBRATION_SCHEMA_VERSION: u32 = 1;

/// Greedy per-exit grid search: choose the smallest `t1` keeping adaptive
/// accuracy within `max_accuracy_drop` of full depth (with EE2 disabled),
/// then the smallest `t2` given that `t1`. Both sweeps use the same
/// 21-point grid.
pub fn calibrate_thresholds(
    net: &MultiExitNetwork,
    weights: &WeightSet,
    inputs: &[Tensor],
    labels: &[usize],
    precision: BitWidth,
    max_accuracy_drop: f64,
) -> Result<CalibrationReport> {
    if inputs.is_empty() {
        return Err(Error::Invalid("calibration set is empty".into()));
    }
    if max_accuracy_drop < 0.0 {
        return Err(Error::Invalid(format!(
            "max_accuracy_drop must be nonnegative, got {max_accuracy_drop}"
        )));
    }
    let samples = evaluate_samples(net, weights, inputs, labels, precision)?;
    let (thresholds, full_depth_accuracy) = search_thresholds(&samples, max_accuracy_drop)?;
    let stats = adaptive_stats(&samples, thresholds.t1, thresholds.t2);
    debug_assert!(stats.accuracy >= full_depth_accuracy - max_accuracy_drop);
    Ok(CalibrationReport {
        schema: CALIBRATION_SCHEMA_VERSION,
        bit_width: precision,
        thresholds,
        full_depth_accuracy,
        max_accuracy_drop,
        stats,
    })
}

/// The grid search itself, over pre-evaluated samples: smallest `t1`
/// keeping the accuracy target with EE2 disabled, then smallest `t2` given
/// that `t1`. Returns the thresholds and the full-depth accuracy.
pub fn search_thresholds(
    samples: &[SampleEvaluation],
    max_accuracy_drop: f64,
) -> Result<(ExitThresholds, f64)> {
    if samples.is_empty() {
        return Err(Error::Invalid("calibration set is empty".into()));
    }
    let full_depth = adaptive_stats(samples, 1.0, 1.0);
    let target = full_depth.accuracy - max_accuracy_drop;
    let t1 = grid()
        .find(|&t| adaptive_stats(samples, t, 1.0).accuracy >= target)
        .unwrap_or(1.0);
    let t2 = grid()
        .find(|&t| adaptive_stats(samples, t1, t).accuracy >= target)
        .unwrap_or(1.0);
    Ok((ExitThresholds::new(t1, t2)?, full_depth.accuracy))
}

/// The 21-point calibration grid. Values are exact multiples of 0.05.
pub fn grid() -> impl Iterator<Item = f64> {
    (0..THRESHOLD_GRID_STEPS).map(|i| i as f64 * 0.05)
}

pub fn save_calibration(report: &CalibrationReport, path: &std::path::Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Invalid(format!("calibration serialization failed: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_calibration(path: &std::path::Path) -> Result<CalibrationReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))
}
