//! Supervised training, model selection and evaluation.

mod metrics;
mod toy;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{
    accuracy, aggregate_one, average_probabilities, epoch_aggregate, evaluate, evaluate_probs, group_by_epoch,
    predict_windows, prob_positive, roc_auc, EpochPrediction, EvalMetrics, Evaluation,
};
pub use toy::variance_task;

use crate::error::{Error, Result};
use crate::hr::HrWindow;
use crate::model::HrvConformer;
use crate::nn::{cosine_warmup, AdamW, AdamWConfig, Graph, LrSchedule, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub warmup_epochs: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Stop after this many evaluations without a new best moving-average
    /// validation AUC. 0 disables early stopping.
    pub patience: usize,
    /// Evaluate every this many training epochs.
    pub eval_every: usize,
    /// Width of the moving average used for model selection, in evaluations.
    pub ma_window: usize,
    /// Epoch-level vote ties go to class 1.
    pub tie_positive: bool,
    /// Fraction of epochs per class held out when no validation set is given.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch: 64,
            warmup_epochs: 50.0,
            lr_max: 6e-5,
            lr_min: 1e-6,
            beta1: 0.85,
            beta2: 0.998,
            weight_decay: 0.1,
            label_smoothing: 0.2,
            patience: 0,
            eval_every: 1,
            ma_window: 5,
            tie_positive: true,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.ma_window == 0 || self.eval_every == 0 || self.epochs == 0 {
            return Err(Error::Config("epochs, batch, eval_every and ma_window must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max && self.warmup_epochs >= 0.0) {
            return Err(Error::Config("need 0 <= lr_min <= lr_max and warmup_epochs >= 0".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup_epochs: self.warmup_epochs,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            total_epochs: self.epochs as f64,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// One evaluation during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub eval_index: usize,
    /// Training epoch (0-based) that just finished.
    pub epoch: usize,
    /// Learning rate used during that epoch.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_window_auc: f64,
    pub val_epoch_auc: f64,
    /// Trailing moving average of `val_epoch_auc`.
    pub val_epoch_auc_ma: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

const HISTORY_HEADER: &str =
    "eval_index,epoch,lr,train_loss,train_acc,val_loss,val_acc,val_window_auc,val_epoch_auc,val_epoch_auc_ma";

impl History {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{HISTORY_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                r.eval_index,
                r.epoch,
                r.lr,
                r.train_loss,
                r.train_acc,
                r.val_loss,
                r.val_acc,
                r.val_window_auc,
                r.val_epoch_auc,
                r.val_epoch_auc_ma
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line.trim() != HISTORY_HEADER {
                    return Err(Error::parse(1, "unexpected history header"));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(Error::parse(i + 1, "expected 10 fields"));
            }
            let u = |s: &str| s.parse::<usize>().map_err(|e| Error::parse(i + 1, e.to_string()));
            let x = |s: &str| s.parse::<f64>().map_err(|e| Error::parse(i + 1, e.to_string()));
            rows.push(HistoryRow {
                eval_index: u(f[0])?,
                epoch: u(f[1])?,
                lr: x(f[2])?,
                train_loss: x(f[3])?,
                train_acc: x(f[4])?,
                val_loss: x(f[5])?,
                val_acc: x(f[6])?,
                val_window_auc: x(f[7])?,
                val_epoch_auc: x(f[8])?,
                val_epoch_auc_ma: x(f[9])?,
            });
        }
        Ok(Self { rows })
    }
}

/// Trailing moving average of width `w`; the first entries average what
/// is available. NaN entries are skipped.
pub fn trailing_mean(xs: &[f64], w: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w.max(1));
            let vals: Vec<f64> = xs[lo..=i].iter().copied().filter(|v| v.is_finite()).collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        })
        .collect()
}

/// Index of the first maximum among finite values.
pub fn best_index(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        if x.is_finite() && best.is_none_or(|b| x > xs[b]) {
            best = Some(i);
        }
    }
    best
}

/// Split windows into train and validation at the epoch level, stratified
/// by epoch label. Each class with at least two epochs contributes
/// `round(fraction * n)` epochs (at least one, at most n - 1) to
/// validation.
pub fn stratified_split(ws: Vec<HrWindow>, val_fraction: f64, seed: u64) -> Result<(Vec<HrWindow>, Vec<HrWindow>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside [0, 1)")));
    }
    let mut by_class: BTreeMap<u8, BTreeSet<String>> = BTreeMap::new();
    for w in &ws {
        by_class.entry(w.label).or_default().insert(w.epoch_id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_ids = BTreeSet::new();
    for ids in by_class.values() {
        let mut ids: Vec<&String> = ids.iter().collect();
        ids.shuffle(&mut rng);
        let n = ids.len();
        if n < 2 || val_fraction == 0.0 {
            continue;
        }
        let k = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
        val_ids.extend(ids[..k].iter().map(|s| (*s).clone()));
    }
    Ok(ws.into_iter().partition(|w| !val_ids.contains(&w.epoch_id)))
}

/// Best checkpoint and the training record.
pub struct TrainOutcome {
    pub best: ParamStore,
    /// Evaluation index whose parameters are in `best`.
    pub best_eval: usize,
    pub history: History,
    pub stopped_early: bool,
}

fn batch_tensor(ws: &[&HrWindow], n: usize) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::with_capacity(ws.len() * n);
    for w in ws {
        if w.values.len() != n {
            return Err(Error::Shape(format!(
                "window {} has {} samples, model expects {n}",
                w.epoch_id,
                w.values.len()
            )));
        }
        data.extend_from_slice(&w.values);
    }
    Ok((
        Tensor::new(vec![ws.len(), n], data)?,
        ws.iter().map(|w| usize::from(w.label)).collect(),
    ))
}

/// Mean smoothed cross-entropy of `ws` in inference mode.
fn inference_loss(model: &HrvConformer, store: &ParamStore, ws: &[HrWindow], tc: &TrainConfig) -> Result<f64> {
    let n = model.cfg.window_samples;
    let mut total = 0.0;
    for chunk in ws.chunks(tc.batch) {
        let refs: Vec<&HrWindow> = chunk.iter().collect();
        let (x, y) = batch_tensor(&refs, n)?;
        let mut g = Graph::new(false, 0);
        let (logits, _) = model.forward(&mut g, store, &x)?;
        let l = g.cross_entropy(logits, &y, tc.label_smoothing)?;
        total += g.value(l).item() * chunk.len() as f64;
    }
    Ok(total / ws.len() as f64)
}

/// Train `model` (parameters in `store`) on `train_ws`, selecting the
/// checkpoint with the best moving-average epoch-level validation AUC.
pub fn train(
    model: &HrvConformer,
    store: &mut ParamStore,
    train_ws: &[HrWindow],
    val_ws: &[HrWindow],
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, store, train_ws, val_ws, tc, |_| {})
}

/// [`train`] with a callback after every evaluation.
pub fn train_with(
    model: &HrvConformer,
    store: &mut ParamStore,
    train_ws: &[HrWindow],
    val_ws: &[HrWindow],
    tc: &TrainConfig,
    mut on_eval: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    tc.validate()?;
    if train_ws.is_empty() || val_ws.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let train_ids: BTreeSet<&str> = train_ws.iter().map(|w| w.epoch_id.as_str()).collect();
    if let Some(w) = val_ws.iter().find(|w| train_ids.contains(w.epoch_id.as_str())) {
        return Err(Error::Data(format!("epoch {} is in both splits", w.epoch_id)));
    }
    let val_epoch_labels: BTreeSet<u8> = val_ws.iter().map(|w| w.label).collect();
    if val_epoch_labels.len() < 2 {
        return Err(Error::Data("validation set needs epochs of both classes".into()));
    }

    let n = model.cfg.window_samples;
    let sched = tc.schedule();
    let mut opt = AdamW::new(store, tc.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..train_ws.len()).collect();
    let mut history = History::default();
    let mut aucs = Vec::new();
    let mut best: Option<(usize, ParamStore, f64)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);

    for epoch in 0..tc.epochs {
        let lr = cosine_warmup(epoch as f64, &sched);
        order.shuffle(&mut rng);
        for idx in order.chunks(tc.batch) {
            let refs: Vec<&HrWindow> = idx.iter().map(|&i| &train_ws[i]).collect();
            let (x, y) = batch_tensor(&refs, n)?;
            let mut g = Graph::new(true, rng.gen());
            let (logits, _) = model.forward(&mut g, store, &x)?;
            let loss = g.cross_entropy(logits, &y, tc.label_smoothing)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            loss_sum += lv * refs.len() as f64;
            hits += g
                .value(logits)
                .data
                .chunks(2)
                .zip(&y)
                .filter(|(r, &t)| usize::from(r[1] > r[0]) == t)
                .count();
            seen += refs.len();
            let grads = g.backward(loss)?;
            opt.step(store, &grads, lr)?;
            for (id, t) in g.take_buffer_updates() {
                *store.get_mut(id) = t;
            }
        }

        let last = epoch + 1 == tc.epochs;
        if (epoch + 1) % tc.eval_every != 0 && !last {
            continue;
        }
        let ev = evaluate(model, store, val_ws, tc.batch, tc.tie_positive)?;
        aucs.push(ev.metrics.epoch_auc);
        let ma = *trailing_mean(&aucs, tc.ma_window).last().unwrap_or(&f64::NAN);
        let row = HistoryRow {
            eval_index: history.rows.len(),
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: hits as f64 / seen as f64,
            val_loss: inference_loss(model, store, val_ws, tc)?,
            val_acc: ev.metrics.window_acc,
            val_window_auc: ev.metrics.window_auc,
            val_epoch_auc: ev.metrics.epoch_auc,
            val_epoch_auc_ma: ma,
        };
        (loss_sum, hits, seen) = (0.0, 0, 0);
        on_eval(&row);
        let improved = ma.is_finite() && best.as_ref().is_none_or(|(_, _, b)| ma > *b);
        if improved || best.is_none() {
            best = Some((row.eval_index, store.clone(), if ma.is_finite() { ma } else { f64::NEG_INFINITY }));
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.rows.push(row);
        if tc.patience > 0 && since_best >= tc.patience {
            stopped_early = !last;
            break;
        }
    }
    let (best_eval, best, _) = best.ok_or_else(|| Error::Data("no evaluation was run".into()))?;
    Ok(TrainOutcome {
        best,
        best_eval,
        history,
        stopped_early,
    })
}
