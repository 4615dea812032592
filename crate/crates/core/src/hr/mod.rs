//! From corrected RR series to labelled 4 Hz windows.
//!
//! The tachogram (RR value against the time of the beat closing the
//! interval) is linearly interpolated onto a 256 Hz grid, then a natural
//! cubic spline through that grid is sampled at 4 Hz. Five-minute windows
//! (1200 samples) with 80% overlap are cut from each gap-free segment, noisy
//! windows are dropped, and windows are min-max scaled with dataset
//! percentiles.

mod spline;
pub mod store;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rr::{Annotation, CorrectedRrSeries, RrSeries};

pub use spline::{linear_at, CubicSpline};

pub const HR_FS: f64 = 4.0;
pub const DENSE_FS: f64 = 256.0;
pub const WINDOW_SECONDS: f64 = 300.0;
pub const WINDOW_SAMPLES: usize = 1200;
pub const EPOCH_SECONDS: f64 = 3600.0;
/// Beats kept on either side of an hour when resampling it, so the spline
/// boundary lies outside the hour.
const EPOCH_PAD_S: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrSegment {
    /// RR values (s) sampled every 0.25 s.
    pub values: Vec<f64>,
    pub t0: f64,
    pub epoch_id: String,
}

impl HrSegment {
    pub fn duration(&self) -> f64 {
        self.values.len() as f64 / HR_FS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Strong,
    Weak,
}

impl LabelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LabelKind::Strong => "strong",
            LabelKind::Weak => "weak",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "strong" => Some(LabelKind::Strong),
            "weak" => Some(LabelKind::Weak),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrWindow {
    pub values: Vec<f64>,
    pub epoch_id: String,
    pub label: u8,
    pub label_kind: LabelKind,
    pub normalized: bool,
}

/// Split at intervals longer than `max_rr` and at excluded gaps; the
/// offending intervals are dropped.
pub fn split_on_gaps(series: &CorrectedRrSeries, max_rr: f64) -> Vec<RrSeries> {
    let mut out = Vec::new();
    let mut current: Vec<f64> = Vec::new();
    let flush = |current: &mut Vec<f64>, out: &mut Vec<RrSeries>| {
        if current.len() >= 2 {
            out.push(RrSeries {
                intervals: current.windows(2).map(|w| w[1] - w[0]).collect(),
                beat_times: std::mem::take(current),
                fs: None,
            });
        }
        current.clear();
    };
    for (k, (&rr, ann)) in series.intervals.iter().zip(&series.annotations).enumerate() {
        if rr > max_rr || *ann == Annotation::ExcludedGap {
            flush(&mut current, &mut out);
            continue;
        }
        if current.is_empty() {
            current.push(series.beat_times[k]);
        }
        current.push(series.beat_times[k + 1]);
    }
    flush(&mut current, &mut out);
    out
}

/// Resample one gap-free segment to 4 Hz.
///
/// The 4 Hz grid starts at the first tachogram point and is a subgrid of the
/// 256 Hz grid.
pub fn resample_4hz(seg: &RrSeries, epoch_id: &str) -> Result<HrSegment> {
    if seg.intervals.len() < 2 {
        return Err(Error::Data("segment too short to interpolate".into()));
    }
    // Tachogram: interval k is placed at the beat that closes it.
    let xs = &seg.beat_times[1..];
    let ys = &seg.intervals;
    let t0 = xs[0];
    let span = xs[xs.len() - 1] - t0;
    if span < 1.0 {
        return Err(Error::Data(format!(
            "segment spans {span:.3} s; at least 1 s is needed"
        )));
    }

    let n_dense = (span * DENSE_FS + 1e-9).floor() as usize + 1;
    let dense_t: Vec<f64> = (0..n_dense).map(|i| t0 + i as f64 / DENSE_FS).collect();
    let dense_v: Vec<f64> = dense_t.iter().map(|&t| linear_at(xs, ys, t)).collect();
    let spline = CubicSpline::natural(dense_t, dense_v)?;

    let n_out = (span * HR_FS + 1e-9).floor() as usize + 1;
    let values = (0..n_out)
        .map(|i| spline.eval(t0 + i as f64 / HR_FS))
        .collect();
    Ok(HrSegment {
        values,
        t0,
        epoch_id: epoch_id.to_string(),
    })
}

/// Resample a gap-free segment onto the 4 Hz grid anchored at `t_start`,
/// keeping grid points in `[t_start, t_end)` that the tachogram covers.
/// The dense 256 Hz grid shares the anchor. Returns `None` when fewer than
/// two output samples are covered.
pub fn resample_range(seg: &RrSeries, epoch_id: &str, t_start: f64, t_end: f64) -> Result<Option<HrSegment>> {
    if seg.intervals.len() < 2 {
        return Ok(None);
    }
    let xs = &seg.beat_times[1..];
    let ys = &seg.intervals;
    let (x0, xl) = (xs[0], xs[xs.len() - 1]);
    let j0 = ((x0 - t_start) * DENSE_FS - 1e-9).ceil() as i64;
    let j1 = ((xl - t_start) * DENSE_FS + 1e-9).floor() as i64;
    let k0 = ((x0 - t_start) * HR_FS - 1e-9).ceil().max(0.0) as i64;
    let k_end = ((t_end - t_start) * HR_FS - 1e-9).ceil() as i64;
    let k1 = (((xl - t_start) * HR_FS + 1e-9).floor() as i64).min(k_end - 1);
    if k1 - k0 + 1 < 2 || j1 - j0 + 1 < 2 {
        return Ok(None);
    }
    let dense_t: Vec<f64> = (j0..=j1).map(|j| t_start + j as f64 / DENSE_FS).collect();
    let dense_v: Vec<f64> = dense_t.iter().map(|&t| linear_at(xs, ys, t)).collect();
    let spline = CubicSpline::natural(dense_t, dense_v)?;
    let values = (k0..=k1).map(|k| spline.eval(t_start + k as f64 / HR_FS)).collect();
    Ok(Some(HrSegment {
        values,
        t0: t_start + k0 as f64 / HR_FS,
        epoch_id: epoch_id.to_string(),
    }))
}

/// Cut a subject's corrected series into hour-aligned 4 Hz pieces.
///
/// The series is split at gaps first; each piece is then resampled per
/// clock hour (`floor(t / 3600)`) on a grid anchored at the hour start, so
/// an hour covered end to end yields exactly 14400 samples. Returns
/// `(hour, segment)` pairs in time order.
pub fn hourly_segments(series: &CorrectedRrSeries, subject: &str, max_rr: f64) -> Result<Vec<(i64, HrSegment)>> {
    let mut out = Vec::new();
    for seg in split_on_gaps(series, max_rr) {
        let first = seg.beat_times[1];
        let last = seg.beat_times[seg.beat_times.len() - 1];
        let (h0, h1) = (
            (first / EPOCH_SECONDS).floor() as i64,
            (last / EPOCH_SECONDS).floor() as i64,
        );
        for h in h0..=h1 {
            let (a, b) = (h as f64 * EPOCH_SECONDS, (h + 1) as f64 * EPOCH_SECONDS);
            let lo = seg.beat_times.partition_point(|&t| t < a - EPOCH_PAD_S).saturating_sub(1);
            let hi = seg.beat_times.partition_point(|&t| t <= b + EPOCH_PAD_S);
            let beats = seg.beat_times[lo..hi.max(lo)].to_vec();
            if beats.len() < 3 {
                continue;
            }
            let sub = RrSeries::from_beat_times(beats)?;
            if let Some(hs) = resample_range(&sub, &store::epoch_id(subject, h), a, b)? {
                out.push((h, hs));
            }
        }
    }
    Ok(out)
}

/// Number of windows of `win` samples at `stride` that fit in `n` samples.
pub fn window_count(n: usize, win: usize, stride: usize) -> usize {
    if n < win {
        0
    } else {
        (n - win) / stride + 1
    }
}

/// Cut windows of `win_s` seconds with fractional `overlap`, labelled with
/// the segment's epoch label.
pub fn make_windows(
    seg: &HrSegment,
    win_s: f64,
    overlap: f64,
    label: u8,
    label_kind: LabelKind,
) -> Result<Vec<HrWindow>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    let win = (win_s * HR_FS).round() as usize;
    let stride = (win_s * (1.0 - overlap) * HR_FS).round() as usize;
    if win == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be at least one sample".into()));
    }
    let count = window_count(seg.values.len(), win, stride);
    Ok((0..count)
        .map(|k| HrWindow {
            values: seg.values[k * stride..k * stride + win].to_vec(),
            epoch_id: seg.epoch_id.clone(),
            label,
            label_kind,
            normalized: false,
        })
        .collect())
}

pub fn population_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Keep windows whose population standard deviation is at most `sd_max`.
pub fn reject_noisy(ws: Vec<HrWindow>, sd_max: f64) -> Vec<HrWindow> {
    ws.into_iter()
        .filter(|w| population_sd(&w.values) <= sd_max)
        .collect()
}

/// Group by epoch and drop epochs with fewer than `min_windows` windows.
pub fn filter_epochs(ws: Vec<HrWindow>, min_windows: usize) -> BTreeMap<String, Vec<HrWindow>> {
    let mut groups: BTreeMap<String, Vec<HrWindow>> = BTreeMap::new();
    for w in ws {
        groups.entry(w.epoch_id.clone()).or_default().push(w);
    }
    groups.retain(|_, v| v.len() >= min_windows);
    groups
}

/// Percentile by linear interpolation between order statistics of sorted
/// data (position `p/100 * (n-1)`).
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub p5: f64,
    pub p95: f64,
}

impl Normalizer {
    pub fn new(p5: f64, p95: f64) -> Result<Self> {
        if !(p5 < p95) || !p5.is_finite() || !p95.is_finite() {
            return Err(Error::Degenerate(format!(
                "normalizer needs finite p5 < p95 (got {p5}, {p95})"
            )));
        }
        Ok(Self { p5, p95 })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.p5) / (self.p95 - self.p5)
    }
}

/// Fit on the pooled values of the training windows only.
pub fn fit_normalizer(train: &[HrWindow]) -> Result<Normalizer> {
    let mut pooled: Vec<f64> = train.iter().flat_map(|w| w.values.iter().copied()).collect();
    if pooled.is_empty() {
        return Err(Error::Degenerate("no training values to fit normalizer".into()));
    }
    if let Some(bad) = pooled.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("training window value {bad}")));
    }
    pooled.sort_by(f64::total_cmp);
    Normalizer::new(percentile_sorted(&pooled, 5.0), percentile_sorted(&pooled, 95.0))
}

/// Min-max scale with the stored percentiles; values are not clipped.
pub fn normalize(w: &HrWindow, n: &Normalizer) -> HrWindow {
    HrWindow {
        values: w.values.iter().map(|&v| n.apply(v)).collect(),
        normalized: true,
        ..w.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Normal,
    Mild,
    Moderate,
    Severe,
    Inactive,
    /// Already binarised class.
    Class(u8),
}

impl Grade {
    pub fn class(&self) -> u8 {
        match self {
            Grade::Normal | Grade::Mild => 0,
            Grade::Moderate | Grade::Severe | Grade::Inactive => 1,
            Grade::Class(c) => *c,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "normal" => Grade::Normal,
            "mild" => Grade::Mild,
            "moderate" => Grade::Moderate,
            "severe" => Grade::Severe,
            "inactive" => Grade::Inactive,
            "0" => Grade::Class(0),
            "1" => Grade::Class(1),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochAnnotation {
    pub epoch_hour: i64,
    pub grade: Grade,
    pub kind: LabelKind,
}

impl EpochAnnotation {
    pub fn strong(epoch_hour: i64, grade: Grade) -> Self {
        Self {
            epoch_hour,
            grade,
            kind: LabelKind::Strong,
        }
    }
}

/// Return the strong annotations plus weak labels for hours lying between
/// consecutive strong annotations of equal class, sorted by hour.
pub fn propagate_weak_labels(ann: &[EpochAnnotation]) -> Vec<EpochAnnotation> {
    let mut strong: Vec<EpochAnnotation> = ann
        .iter()
        .filter(|a| a.kind == LabelKind::Strong)
        .copied()
        .collect();
    strong.sort_by_key(|a| a.epoch_hour);
    let mut out = strong.clone();
    for pair in strong.windows(2) {
        let c = pair[0].grade.class();
        if c != pair[1].grade.class() {
            continue;
        }
        for h in pair[0].epoch_hour + 1..pair[1].epoch_hour {
            out.push(EpochAnnotation {
                epoch_hour: h,
                grade: Grade::Class(c),
                kind: LabelKind::Weak,
            });
        }
    }
    out.sort_by_key(|a| a.epoch_hour);
    out
}
