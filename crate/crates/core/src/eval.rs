//! Accuracy, one-vs-rest AUC for the non-diagnostic class and multi-run
//! aggregation.

use serde::{Deserialize, Serialize};

use crate::backbone::{ForwardOutput, ModelParams, Network, Scalar};
use crate::datamodel::{Label, Slice};
use crate::error::{Error, Result};

const PREDICT_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `None` when the set lacks either N or non-N examples.
    pub auc_n: Option<f64>,
    pub n_examples: usize,
    /// True-label counts in D, N, W order.
    pub per_class_counts: [usize; 3],
}

pub fn accuracy(pred: &[Label], truth: &[Label]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Mann-Whitney AUC with positives = class N; ties count one half.
pub fn auc_n(scores: &[f64], truth: &[Label]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), truth.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {i} is NaN")));
    }
    let n_pos = truth.iter().filter(|&&l| l == Label::N).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 {
        return Err(Error::Invalid("AUC undefined: no N examples".into()));
    }
    if n_neg == 0 {
        return Err(Error::Invalid("AUC undefined: no non-N examples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of mid-ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        let pos = order[i..=j].iter().filter(|&&k| truth[k] == Label::N).count();
        rank_sum += mid * pos as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC points `(fpr, tpr, threshold)` from the strictest threshold down,
/// starting at (0, 0).
pub fn roc_points(scores: &[f64], truth: &[Label]) -> Result<Vec<(f64, f64, f64)>> {
    auc_n(scores, truth)?;
    let n_pos = truth.iter().filter(|&&l| l == Label::N).count() as f64;
    let n_neg = truth.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0, f64::INFINITY)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (k, &i) in order.iter().enumerate() {
        if truth[i] == Label::N {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        let last_of_tie = order.get(k + 1).is_none_or(|&j| scores[j] != scores[i]);
        if last_of_tie {
            pts.push((fp / n_neg, tp / n_pos, scores[i]));
        }
    }
    Ok(pts)
}

pub fn evaluate(outputs: &[ForwardOutput], truth: &[Label]) -> Result<EvalReport> {
    let pred: Vec<Label> = outputs.iter().map(ForwardOutput::predicted).collect();
    let accuracy = accuracy(&pred, truth)?;
    let scores: Vec<f64> = outputs.iter().map(|o| o.probs[Label::N.index()]).collect();
    let auc_n = match auc_n(&scores, truth) {
        Ok(a) => Some(a),
        Err(Error::Invalid(msg)) => {
            log::debug!("{msg}");
            None
        }
        Err(e) => return Err(e),
    };
    let mut per_class_counts = [0; 3];
    for l in truth {
        per_class_counts[l.index()] += 1;
    }
    Ok(EvalReport {
        accuracy,
        auc_n,
        n_examples: truth.len(),
        per_class_counts,
    })
}

/// Batched inference without perturbation.
pub fn predict<F: Scalar>(
    net: &Network,
    params: &ModelParams<F>,
    slices: &[&Slice],
) -> Result<Vec<ForwardOutput>> {
    let mut out = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(PREDICT_CHUNK) {
        let inputs: Vec<_> = chunk.iter().map(|s| &s.pixels).collect();
        out.extend(net.forward_batch(params, &inputs)?.outputs());
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample (n - 1) standard deviation; 0 for a single value.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::Invalid("mean of an empty set".into()));
    }
    let n = values.len() as f64;
    if values.iter().all(|&v| v == values[0]) {
        if values.len() == 1 {
            log::warn!("single run: reporting std 0");
        }
        return Ok(MeanStd { mean: values[0], std: 0.0 });
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(MeanStd { mean, std: var.sqrt() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub runs: usize,
    pub accuracy: MeanStd,
    /// Over the runs where AUC was defined.
    pub auc_n: Option<MeanStd>,
}

pub fn aggregate_runs(reports: &[EvalReport]) -> Result<RunAggregate> {
    let acc: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
    let auc: Vec<f64> = reports.iter().filter_map(|r| r.auc_n).collect();
    Ok(RunAggregate {
        runs: reports.len(),
        accuracy: mean_std(&acc)?,
        auc_n: if auc.is_empty() { None } else { Some(mean_std(&auc)?) },
    })
}
