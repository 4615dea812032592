//! Window inference, epoch aggregation and classification metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hr::HrWindow;
use crate::model::HrvConformer;
use crate::nn::{ParamStore, Tensor};

/// Class-1 probability of a two-logit row.
pub fn prob_positive(l0: f64, l1: f64) -> f64 {
    1.0 / (1.0 + (l0 - l1).exp())
}

/// Class-1 probability for every window, inferred in chunks of `batch`.
pub fn predict_windows(model: &HrvConformer, store: &ParamStore, ws: &[HrWindow], batch: usize) -> Result<Vec<f64>> {
    let n = model.cfg.window_samples;
    let mut out = Vec::with_capacity(ws.len());
    for chunk in ws.chunks(batch.max(1)) {
        let mut data = Vec::with_capacity(chunk.len() * n);
        for w in chunk {
            if w.values.len() != n {
                return Err(Error::Shape(format!(
                    "window {} has {} samples, model expects {n}",
                    w.epoch_id,
                    w.values.len()
                )));
            }
            data.extend_from_slice(&w.values);
        }
        let x = Tensor::new(vec![chunk.len(), n], data)?;
        let logits = model.infer(store, &x)?.logits;
        out.extend(logits.data.chunks(2).map(|r| prob_positive(r[0], r[1])));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochPrediction {
    /// Majority vote of the thresholded window predictions.
    pub label: u8,
    /// Mean window probability.
    pub prob: f64,
    pub n_windows: usize,
}

/// Majority vote at 0.5 and mean probability for one epoch. Ties go to
/// class 1 when `tie_positive`, otherwise to class 0.
pub fn aggregate_one(probs: &[f64], tie_positive: bool) -> Result<EpochPrediction> {
    if probs.is_empty() {
        return Err(Error::Data("cannot aggregate an epoch without windows".into()));
    }
    let pos = probs.iter().filter(|&&p| p >= 0.5).count();
    let neg = probs.len() - pos;
    let label = match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => 1,
        std::cmp::Ordering::Less => 0,
        std::cmp::Ordering::Equal => u8::from(tie_positive),
    };
    Ok(EpochPrediction {
        label,
        prob: probs.iter().sum::<f64>() / probs.len() as f64,
        n_windows: probs.len(),
    })
}

/// Aggregate window probabilities grouped by epoch id.
pub fn epoch_aggregate(
    groups: &BTreeMap<String, Vec<f64>>,
    tie_positive: bool,
) -> Result<BTreeMap<String, EpochPrediction>> {
    groups
        .iter()
        .map(|(id, p)| {
            aggregate_one(p, tie_positive)
                .map(|e| (id.clone(), e))
                .map_err(|_| Error::Data(format!("epoch {id} has no windows")))
        })
        .collect()
}

/// Group per-window values by the windows' epoch ids.
pub fn group_by_epoch<T: Copy>(ws: &[HrWindow], values: &[T]) -> BTreeMap<String, Vec<T>> {
    let mut out: BTreeMap<String, Vec<T>> = BTreeMap::new();
    for (w, &v) in ws.iter().zip(values) {
        out.entry(w.epoch_id.clone()).or_default().push(v);
    }
    out
}

/// Area under the ROC curve: the probability that a random positive
/// outscores a random negative, ties counted one half. Computed from
/// average ranks.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("roc_auc scores".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("roc_auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of matching entries.
pub fn accuracy(labels: &[u8], preds: &[u8]) -> Result<f64> {
    if labels.len() != preds.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let hits = labels.iter().zip(preds).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Element-wise mean of several runs' probabilities.
pub fn average_probabilities(runs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = runs.first().ok_or_else(|| Error::Data("no runs to average".into()))?;
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(Error::Shape("runs differ in length".into()));
    }
    Ok((0..first.len())
        .map(|i| runs.iter().map(|r| r[i]).sum::<f64>() / runs.len() as f64)
        .collect())
}

/// Window- and epoch-level scores of a labelled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub window_auc: f64,
    pub epoch_auc: f64,
    pub window_acc: f64,
    pub epoch_acc: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: EvalMetrics,
    pub window_probs: Vec<f64>,
    pub epochs: BTreeMap<String, (u8, EpochPrediction)>,
}

/// Score window probabilities against the windows' labels. AUCs are NaN
/// when a level holds a single class.
pub fn evaluate_probs(ws: &[HrWindow], probs: &[f64], tie_positive: bool) -> Result<Evaluation> {
    if ws.len() != probs.len() || ws.is_empty() {
        return Err(Error::Data(format!("{} windows for {} probabilities", ws.len(), probs.len())));
    }
    let labels: Vec<u8> = ws.iter().map(|w| w.label).collect();
    let preds: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
    let window_acc = accuracy(&labels, &preds)?;
    let window_auc = roc_auc(&labels, probs).unwrap_or(f64::NAN);

    let agg = epoch_aggregate(&group_by_epoch(ws, probs), tie_positive)?;
    let truth = group_by_epoch(ws, &labels);
    let mut epochs = BTreeMap::new();
    for (id, e) in agg {
        let l = &truth[&id];
        if l.iter().any(|&x| x != l[0]) {
            return Err(Error::Data(format!("epoch {id} mixes window labels")));
        }
        epochs.insert(id, (l[0], e));
    }
    let el: Vec<u8> = epochs.values().map(|(l, _)| *l).collect();
    let ep: Vec<u8> = epochs.values().map(|(_, e)| e.label).collect();
    let es: Vec<f64> = epochs.values().map(|(_, e)| e.prob).collect();
    Ok(Evaluation {
        metrics: EvalMetrics {
            window_auc,
            epoch_auc: roc_auc(&el, &es).unwrap_or(f64::NAN),
            window_acc,
            epoch_acc: accuracy(&el, &ep)?,
        },
        window_probs: probs.to_vec(),
        epochs,
    })
}

/// Predict and score a labelled set.
pub fn evaluate(
    model: &HrvConformer,
    store: &ParamStore,
    ws: &[HrWindow],
    batch: usize,
    tie_positive: bool,
) -> Result<Evaluation> {
    let probs = predict_windows(model, store, ws, batch)?;
    evaluate_probs(ws, &probs, tie_positive)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_logits_give_half() {
        assert_eq!(prob_positive(0.0, 0.0), 0.5);
        assert_eq!(prob_positive(3.0, 3.0), 0.5);
    }

    #[test]
    fn vote_and_mean() {
        let e = aggregate_one(&[0.9, 0.8, 0.1], true).unwrap();
        assert_eq!(e.label, 1);
        let e = aggregate_one(&[0.2, 0.4, 0.9], true).unwrap();
        assert_eq!(e.label, 0);
        assert!((e.prob - 0.5).abs() < 1e-15);
        assert_eq!(aggregate_one(&[0.6, 0.4], true).unwrap().label, 1);
        assert_eq!(aggregate_one(&[0.6, 0.4], false).unwrap().label, 0);
        assert!(aggregate_one(&[], true).is_err());
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(roc_auc(&[0, 0, 1, 1], &[0.1, 0.2, 0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[1, 1, 0, 0], &[0.1, 0.2, 0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[1, 0], &[0.8, 0.8]).unwrap(), 0.5);
        assert!(roc_auc(&[1, 1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0, 1, 0], &[1, 1, 0, 0]).unwrap(), 0.5);
        assert!(accuracy(&[], &[]).is_err());
    }
}
