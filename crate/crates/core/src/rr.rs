//! Artefact correction of RR intervals.
//!
//! Intervals fall into four categories: extremely short (<= 0.2 s), short
//! (<= 2 s), long (<= 10 s) and extremely long. Extremely short intervals and
//! short intervals above 2.05x the running mean are replaced by a trailing
//! moving average; long intervals are subdivided at potential peaks taken
//! from the bandpassed ECG, dropping any piece shorter than 0.6x the global
//! mean; extremely long intervals are flagged and left alone.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EXTREMELY_SHORT_MAX: f64 = 0.2;
pub const SHORT_MAX: f64 = 2.0;
pub const LONG_MAX: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RrCategory {
    ExtremelyShort,
    Short,
    Long,
    ExtremelyLong,
}

pub fn classify_interval(rr: f64) -> Result<RrCategory> {
    if !(rr > 0.0) || !rr.is_finite() {
        return Err(Error::Data(format!("RR interval must be positive, got {rr}")));
    }
    Ok(if rr <= EXTREMELY_SHORT_MAX {
        RrCategory::ExtremelyShort
    } else if rr <= SHORT_MAX {
        RrCategory::Short
    } else if rr <= LONG_MAX {
        RrCategory::Long
    } else {
        RrCategory::ExtremelyLong
    })
}

/// Beat times and the intervals between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrSeries {
    pub beat_times: Vec<f64>,
    pub intervals: Vec<f64>,
    /// Sampling rate of the ECG the beats came from, when known.
    pub fs: Option<f64>,
}

impl RrSeries {
    pub fn from_beat_times(beat_times: Vec<f64>) -> Result<Self> {
        for w in beat_times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Data(format!(
                    "beat times must be strictly increasing ({} then {})",
                    w[0], w[1]
                )));
            }
        }
        let intervals = beat_times.windows(2).map(|w| w[1] - w[0]).collect();
        Ok(Self {
            beat_times,
            intervals,
            fs: None,
        })
    }

    /// Build from a first beat time and a sequence of positive intervals.
    pub fn from_intervals(start: f64, intervals: Vec<f64>) -> Result<Self> {
        if let Some(bad) = intervals.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Data(format!("non-positive interval {bad}")));
        }
        let beat_times = cumulative_times(start, &intervals);
        Ok(Self {
            beat_times,
            intervals,
            fs: None,
        })
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn duration(&self) -> f64 {
        match (self.beat_times.first(), self.beat_times.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }
}

fn cumulative_times(start: f64, intervals: &[f64]) -> Vec<f64> {
    let mut t = start;
    let mut out = Vec::with_capacity(intervals.len() + 1);
    out.push(t);
    for v in intervals {
        t += v;
        out.push(t);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Annotation {
    Original,
    ReplacedMa,
    Reconstructed,
    ExcludedGap,
}

impl Annotation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Annotation::Original => "original",
            Annotation::ReplacedMa => "replaced_ma",
            Annotation::Reconstructed => "reconstructed",
            Annotation::ExcludedGap => "excluded_gap",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "original" => Annotation::Original,
            "replaced_ma" => Annotation::ReplacedMa,
            "reconstructed" => Annotation::Reconstructed,
            "excluded_gap" => Annotation::ExcludedGap,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedRrSeries {
    pub beat_times: Vec<f64>,
    pub intervals: Vec<f64>,
    pub annotations: Vec<Annotation>,
    pub global_mean_rr: f64,
}

impl CorrectedRrSeries {
    pub fn as_rr(&self) -> RrSeries {
        RrSeries {
            beat_times: self.beat_times.clone(),
            intervals: self.intervals.clone(),
            fs: None,
        }
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }
}

/// Which mean the 2.05x irregularity rule compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// Trailing moving average.
    Local,
    /// Global mean of the series' <= 2 s intervals.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionConfig {
    pub ma_window: usize,
    pub irregular_factor: f64,
    pub min_fraction: f64,
    pub mean_mode: MeanMode,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self {
            ma_window: 8,
            irregular_factor: 2.05,
            min_fraction: 0.6,
            mean_mode: MeanMode::Local,
        }
    }
}

/// Trailing mean over the last `window` accepted intervals, seeded with one
/// initial value that ages out like any other entry.
struct MovingAverage {
    buf: VecDeque<f64>,
    window: usize,
}

impl MovingAverage {
    fn new(window: usize, seed: f64) -> Self {
        let mut buf = VecDeque::with_capacity(window + 1);
        buf.push_back(seed);
        Self {
            buf,
            window: window.max(1),
        }
    }

    fn mean(&self) -> f64 {
        self.buf.iter().sum::<f64>() / self.buf.len() as f64
    }

    fn push(&mut self, v: f64) {
        self.buf.push_back(v);
        while self.buf.len() > self.window {
            self.buf.pop_front();
        }
    }
}

fn mean_where(values: &[f64], keep: impl Fn(f64) -> bool) -> Option<f64> {
    let (sum, n) = values
        .iter()
        .filter(|&&v| keep(v))
        .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn ma_seed(intervals: &[f64]) -> f64 {
    mean_where(intervals, |v| v > EXTREMELY_SHORT_MAX && v <= SHORT_MAX)
        .or_else(|| mean_where(intervals, |_| true))
        .unwrap_or(0.0)
}

/// Mean of the intervals no longer than 2 s.
pub fn global_mean_rr(intervals: &[f64]) -> f64 {
    mean_where(intervals, |v| v <= SHORT_MAX)
        .or_else(|| mean_where(intervals, |_| true))
        .unwrap_or(0.0)
}

/// Split `[start, end]` at candidate times, keeping only cuts that leave
/// every piece at least `min_len` long. Returns the interior cut times.
fn split_at_candidates(start: f64, end: f64, candidates: &[f64], min_len: f64) -> Vec<f64> {
    let lo = candidates.partition_point(|&c| c <= start);
    let mut cuts = Vec::new();
    let mut prev = start;
    for &c in candidates[lo..].iter().take_while(|&&c| c < end) {
        if c - prev >= min_len {
            cuts.push(c);
            prev = c;
        }
    }
    while let Some(&last) = cuts.last() {
        if end - last < min_len {
            cuts.pop();
        } else {
            break;
        }
    }
    cuts
}

fn pieces(start: f64, end: f64, cuts: &[f64]) -> Vec<f64> {
    let mut prev = start;
    let mut out = Vec::with_capacity(cuts.len() + 1);
    for &c in cuts {
        out.push(c - prev);
        prev = c;
    }
    out.push(end - prev);
    out
}

fn check_sorted(candidates: &[f64]) -> Result<()> {
    if candidates.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Data("potential peak times must be strictly increasing".into()));
    }
    Ok(())
}

/// Replace extremely short intervals, and short intervals above
/// `2.05 x` the trailing moving average, by that moving average.
pub fn correct_short(series: &RrSeries, ma_window: usize) -> Result<RrSeries> {
    let mut ma = MovingAverage::new(ma_window, ma_seed(&series.intervals));
    let mut out = Vec::with_capacity(series.len());
    for &rr in &series.intervals {
        let v = match classify_interval(rr)? {
            RrCategory::ExtremelyShort => ma.mean(),
            RrCategory::Short if rr > 2.05 * ma.mean() => ma.mean(),
            RrCategory::Short => rr,
            RrCategory::Long | RrCategory::ExtremelyLong => {
                out.push(rr);
                continue;
            }
        };
        ma.push(v);
        out.push(v);
    }
    let start = series.beat_times.first().copied().unwrap_or(0.0);
    let mut r = RrSeries::from_intervals(start, out)?;
    r.fs = series.fs;
    Ok(r)
}

/// Subdivide each long interval at the potential peaks inside it.
pub fn reconstruct_long(series: &RrSeries, potential_times: &[f64], global_mean: f64) -> Result<RrSeries> {
    if !(global_mean > 0.0) {
        return Err(Error::Data(format!("global mean must be positive, got {global_mean}")));
    }
    check_sorted(potential_times)?;
    let min_len = 0.6 * global_mean;
    let mut out = Vec::with_capacity(series.len());
    for (k, &rr) in series.intervals.iter().enumerate() {
        if classify_interval(rr)? == RrCategory::Long {
            let (a, b) = (series.beat_times[k], series.beat_times[k + 1]);
            let cuts = split_at_candidates(a, b, potential_times, min_len);
            if !cuts.is_empty() {
                out.extend(pieces(a, b, &cuts));
                continue;
            }
        }
        out.push(rr);
    }
    let start = series.beat_times.first().copied().unwrap_or(0.0);
    let mut r = RrSeries::from_intervals(start, out)?;
    r.fs = series.fs;
    Ok(r)
}

pub fn correct(series: &RrSeries, potential_times: &[f64]) -> Result<CorrectedRrSeries> {
    correct_with(series, potential_times, &CorrectionConfig::default())
}

/// Full correction pass.
///
/// Irregular short intervals are first subdivided at potential peaks (same
/// minimum-length rule as long intervals) and only fall back to the moving
/// average when no admissible candidate lies inside them.
pub fn correct_with(
    series: &RrSeries,
    potential_times: &[f64],
    cfg: &CorrectionConfig,
) -> Result<CorrectedRrSeries> {
    if series.is_empty() {
        return Err(Error::Data("empty RR series".into()));
    }
    check_sorted(potential_times)?;
    let global_mean = global_mean_rr(&series.intervals);
    let min_len = cfg.min_fraction * global_mean;
    let mut ma = MovingAverage::new(cfg.ma_window, ma_seed(&series.intervals));
    let mut intervals = Vec::with_capacity(series.len());
    let mut annotations = Vec::with_capacity(series.len());

    for (k, &rr) in series.intervals.iter().enumerate() {
        let (a, b) = (series.beat_times[k], series.beat_times[k + 1]);
        match classify_interval(rr)? {
            RrCategory::ExtremelyShort => {
                let v = ma.mean();
                ma.push(v);
                intervals.push(v);
                annotations.push(Annotation::ReplacedMa);
            }
            RrCategory::Short => {
                let reference = match cfg.mean_mode {
                    MeanMode::Local => ma.mean(),
                    MeanMode::Global => global_mean,
                };
                if rr > cfg.irregular_factor * reference {
                    let cuts = split_at_candidates(a, b, potential_times, min_len);
                    if cuts.is_empty() {
                        let v = ma.mean();
                        ma.push(v);
                        intervals.push(v);
                        annotations.push(Annotation::ReplacedMa);
                    } else {
                        for p in pieces(a, b, &cuts) {
                            ma.push(p);
                            intervals.push(p);
                            annotations.push(Annotation::Reconstructed);
                        }
                    }
                } else {
                    ma.push(rr);
                    intervals.push(rr);
                    annotations.push(Annotation::Original);
                }
            }
            RrCategory::Long => {
                let cuts = split_at_candidates(a, b, potential_times, min_len);
                if cuts.is_empty() {
                    intervals.push(rr);
                    annotations.push(Annotation::Original);
                } else {
                    for p in pieces(a, b, &cuts) {
                        if p <= SHORT_MAX {
                            ma.push(p);
                        }
                        intervals.push(p);
                        annotations.push(Annotation::Reconstructed);
                    }
                }
            }
            RrCategory::ExtremelyLong => {
                intervals.push(rr);
                annotations.push(Annotation::ExcludedGap);
            }
        }
    }

    let beat_times = cumulative_times(series.beat_times[0], &intervals);
    Ok(CorrectedRrSeries {
        beat_times,
        intervals,
        annotations,
        global_mean_rr: global_mean,
    })
}

/// Corrected RR CSV: `beat_time_s,rr_s,annotation`, one row per interval,
/// where `beat_time_s` is the time of the beat closing the interval.
pub fn write_corrected_csv<W: Write>(s: &CorrectedRrSeries, mut w: W) -> Result<()> {
    writeln!(w, "beat_time_s,rr_s,annotation")?;
    for (k, (rr, ann)) in s.intervals.iter().zip(&s.annotations).enumerate() {
        writeln!(w, "{},{},{}", s.beat_times[k + 1], rr, ann.as_str())?;
    }
    Ok(())
}

pub fn read_corrected_csv<R: BufRead>(r: R) -> Result<CorrectedRrSeries> {
    let mut ends = Vec::new();
    let mut intervals = Vec::new();
    let mut annotations = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != "beat_time_s,rr_s,annotation" {
                return Err(Error::parse(1, "expected header `beat_time_s,rr_s,annotation`"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 3 {
            return Err(Error::parse(i + 1, "expected 3 fields"));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::parse(i + 1, format!("non-numeric field {s:?}")))
        };
        ends.push(num(fields[0])?);
        intervals.push(num(fields[1])?);
        annotations.push(
            Annotation::parse(fields[2])
                .ok_or_else(|| Error::parse(i + 1, format!("unknown annotation {:?}", fields[2])))?,
        );
    }
    if intervals.is_empty() {
        return Err(Error::Data("corrected RR file has no intervals".into()));
    }
    let mut beat_times = Vec::with_capacity(ends.len() + 1);
    beat_times.push(ends[0] - intervals[0]);
    beat_times.extend_from_slice(&ends);
    let global_mean_rr = global_mean_rr(&intervals);
    Ok(CorrectedRrSeries {
        beat_times,
        intervals,
        annotations,
        global_mean_rr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_with(n: usize, base: f64, at: usize, value: f64) -> RrSeries {
        let mut v = vec![base; n];
        v[at] = value;
        RrSeries::from_intervals(10.0, v).unwrap()
    }

    #[test]
    fn category_bounds() {
        assert_eq!(classify_interval(0.15).unwrap(), RrCategory::ExtremelyShort);
        assert_eq!(classify_interval(0.2).unwrap(), RrCategory::ExtremelyShort);
        assert_eq!(classify_interval(0.2 + 1e-12).unwrap(), RrCategory::Short);
        assert_eq!(classify_interval(2.0).unwrap(), RrCategory::Short);
        assert_eq!(classify_interval(2.25).unwrap(), RrCategory::Long);
        assert_eq!(classify_interval(10.0).unwrap(), RrCategory::Long);
        assert_eq!(classify_interval(10.0 + 1e-9).unwrap(), RrCategory::ExtremelyLong);
        assert_eq!(classify_interval(12.0).unwrap(), RrCategory::ExtremelyLong);
        assert!(classify_interval(0.0).is_err());
        assert!(classify_interval(-1.0).is_err());
    }

    #[test]
    fn extremely_short_replaced_by_moving_average() {
        let s = constant_with(30, 0.5, 20, 0.1);
        let out = correct_short(&s, 8).unwrap();
        assert_eq!(out.intervals[20], 0.5);
        assert!(out.intervals.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn irregular_short_above_factor_replaced() {
        // 1.2 s is 2.4x the 0.5 s moving average.
        let out = correct_short(&constant_with(30, 0.5, 20, 1.2), 8).unwrap();
        assert_eq!(out.intervals[20], 0.5);
        // 0.9 s is 1.8x: below 2.05, unchanged.
        let out = correct_short(&constant_with(30, 0.5, 20, 0.9), 8).unwrap();
        assert_eq!(out.intervals[20], 0.9);
    }

    #[test]
    fn long_gap_keeps_every_admissible_candidate() {
        // 2.25 s gap; candidates at +0.45, +0.95, +1.40, +1.85 s; global mean
        // 0.45 s so the minimum piece is 0.27 s. Pieces: 0.45, 0.50, 0.45,
        // 0.45, 0.40 -- every candidate kept.
        let s = RrSeries::from_intervals(0.0, vec![0.45, 2.25, 0.45]).unwrap();
        let a = 0.45;
        let cands = [a + 0.45, a + 0.95, a + 1.40, a + 1.85];
        let out = reconstruct_long(&s, &cands, 0.45).unwrap();
        let expected = [0.45, 0.45, 0.50, 0.45, 0.45, 0.40, 0.45];
        assert_eq!(out.intervals.len(), expected.len());
        for (x, y) in out.intervals.iter().zip(expected) {
            assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
        let inserted = out.beat_times.len() - s.beat_times.len();
        assert_eq!(inserted, 4);
    }

    #[test]
    fn close_candidate_dropped() {
        let s = RrSeries::from_intervals(0.0, vec![0.5, 2.5, 0.5]).unwrap();
        // 0.2 s after the gap start is below 0.6 * 0.5 = 0.3 s.
        let out = reconstruct_long(&s, &[0.7], 0.5).unwrap();
        assert_eq!(out.intervals, s.intervals);
        let out = reconstruct_long(&s, &[0.7, 1.5], 0.5).unwrap();
        assert_eq!(out.intervals.len(), 4);
        assert!((out.intervals[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trailing_short_piece_merges_back() {
        let s = RrSeries::from_intervals(0.0, vec![2.5]).unwrap();
        // Last candidate leaves a 0.1 s tail and is dropped.
        let out = reconstruct_long(&s, &[1.0, 2.4], 0.5).unwrap();
        assert_eq!(out.intervals.len(), 2);
        assert!((out.intervals[0] - 1.0).abs() < 1e-12);
        assert!((out.intervals[1] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn no_candidates_leaves_gap() {
        let s = RrSeries::from_intervals(0.0, vec![0.5, 3.0, 0.5]).unwrap();
        let out = reconstruct_long(&s, &[], 0.5).unwrap();
        assert_eq!(out.intervals, s.intervals);
        assert!(reconstruct_long(&s, &[], 0.0).is_err());
    }

    #[test]
    fn clean_series_is_fixed_point() {
        let s = RrSeries::from_intervals(1.0, vec![0.5, 0.52, 0.48, 0.5, 0.51]).unwrap();
        let out = correct(&s, &[]).unwrap();
        assert_eq!(out.intervals, s.intervals);
        assert!(out.annotations.iter().all(|&a| a == Annotation::Original));
    }

    #[test]
    fn extremely_long_gap_flagged_and_preserved() {
        let s = RrSeries::from_intervals(0.0, vec![0.5, 0.5, 12.0, 0.5]).unwrap();
        let cands: Vec<f64> = (1..30).map(|k| 1.0 + 0.4 * k as f64).collect();
        let out = correct(&s, &cands).unwrap();
        assert_eq!(out.intervals[2], 12.0);
        assert_eq!(out.annotations[2], Annotation::ExcludedGap);
    }

    #[test]
    fn missed_beat_reconstructed_from_candidate() {
        // A doubled interval (1.0 s) in a 0.48 s rhythm exceeds 2.05x the
        // local mean; a candidate at its midpoint restores two 0.5 s beats.
        let mut v = vec![0.48; 30];
        v[20] = 1.0;
        let s = RrSeries::from_intervals(0.0, v).unwrap();
        let mid = s.beat_times[20] + 0.5;
        let out = correct(&s, &[mid]).unwrap();
        assert_eq!(out.len(), 31);
        assert!((out.intervals[20] - 0.5).abs() < 1e-9);
        assert!((out.intervals[21] - 0.5).abs() < 1e-9);
        assert_eq!(out.annotations[20], Annotation::Reconstructed);
        assert_eq!(out.annotations[21], Annotation::Reconstructed);
        // Without a candidate the same interval falls back to the average.
        let out = correct(&s, &[]).unwrap();
        assert_eq!(out.annotations[20], Annotation::ReplacedMa);
        assert!((out.intervals[20] - 0.48).abs() < 1e-12);
    }

    #[test]
    fn global_mean_mode_switch() {
        let cfg = CorrectionConfig {
            mean_mode: MeanMode::Global,
            ..Default::default()
        };
        let s = constant_with(30, 0.5, 20, 1.2);
        let out = correct_with(&s, &[], &cfg).unwrap();
        assert_eq!(out.annotations[20], Annotation::ReplacedMa);
    }

    #[test]
    fn csv_round_trip() {
        let s = RrSeries::from_intervals(2.0, vec![0.5, 0.1, 0.5, 12.0, 0.5]).unwrap();
        let out = correct(&s, &[]).unwrap();
        let mut buf = Vec::new();
        write_corrected_csv(&out, &mut buf).unwrap();
        let back = read_corrected_csv(buf.as_slice()).unwrap();
        assert_eq!(back.annotations, out.annotations);
        for (a, b) in back.beat_times.iter().zip(&out.beat_times) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn errors() {
        assert!(RrSeries::from_beat_times(vec![1.0, 1.0]).is_err());
        assert!(RrSeries::from_intervals(0.0, vec![0.5, -0.1]).is_err());
        let empty = RrSeries::from_beat_times(vec![1.0]).unwrap();
        assert!(correct(&empty, &[]).is_err());
        let s = RrSeries::from_intervals(0.0, vec![0.5, 0.5]).unwrap();
        assert!(correct(&s, &[1.0, 0.5]).is_err());
    }
}
