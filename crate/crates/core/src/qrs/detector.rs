use serde::{Deserialize, Serialize};

use super::filter::bandpass_zero_phase;
use crate::ecg::EcgRecord;
use crate::error::{Error, Result};

/// Which signal final R-peak positions are snapped to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakSource {
    Raw,
    Bandpass,
}

/// Detector parameters.
///
/// `Default` is the enhanced detector. [`DetectorConfig::standard`] switches
/// every enhancement off (5-15 Hz band, no polarity check, no threshold reset,
/// no zero skipping, refinement on the raw trace) for A/B comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub band_low: f64,
    pub band_high: f64,
    pub integration_window_ms: f64,
    pub reset_timeout_s: f64,
    pub zero_floor: f64,
    pub refractory_ms: f64,
    pub searchback_window_ms: f64,
    pub learning_period_s: f64,
    /// Width of the sliding window for potential peaks; `None` means twice
    /// the search-back window.
    pub potential_window_ms: Option<f64>,
    /// Below this inter-beat gap a candidate must pass the T-wave slope test.
    pub t_wave_ms: f64,
    pub polarity_check: bool,
    pub threshold_reset: bool,
    pub zero_skip: bool,
    pub refine_on: PeakSource,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            band_low: 4.0,
            band_high: 30.0,
            integration_window_ms: 150.0,
            reset_timeout_s: 1.4,
            zero_floor: 1e-12,
            refractory_ms: 200.0,
            searchback_window_ms: 100.0,
            learning_period_s: 2.0,
            potential_window_ms: None,
            t_wave_ms: 360.0,
            polarity_check: true,
            threshold_reset: true,
            zero_skip: true,
            refine_on: PeakSource::Bandpass,
        }
    }
}

impl DetectorConfig {
    pub fn enhanced() -> Self {
        Self::default()
    }

    pub fn standard() -> Self {
        Self {
            band_low: 5.0,
            band_high: 15.0,
            polarity_check: false,
            threshold_reset: false,
            zero_skip: false,
            refine_on: PeakSource::Raw,
            ..Self::default()
        }
    }

    pub fn validate(&self, fs: f64) -> Result<()> {
        if !(self.band_low > 0.0 && self.band_low < self.band_high && self.band_high < fs / 2.0) {
            return Err(Error::Config(format!(
                "band must satisfy 0 < {} < {} < fs/2 = {}",
                self.band_low,
                self.band_high,
                fs / 2.0
            )));
        }
        if !(self.reset_timeout_s > 0.0) {
            return Err(Error::Config("reset_timeout_s must be positive".into()));
        }
        if !(self.learning_period_s > 0.0) {
            return Err(Error::Config("learning_period_s must be positive".into()));
        }
        if self.integration_window_ms <= 0.0 || self.searchback_window_ms < 0.0 {
            return Err(Error::Config("window lengths must be positive".into()));
        }
        Ok(())
    }

    fn samples(ms: f64, fs: f64) -> usize {
        ((ms * fs / 1000.0).round() as usize).max(1)
    }

    pub fn integration_samples(&self, fs: f64) -> usize {
        Self::samples(self.integration_window_ms, fs)
    }

    pub fn potential_window(&self) -> f64 {
        self.potential_window_ms
            .unwrap_or(2.0 * self.searchback_window_ms)
    }
}

/// Running thresholds and peak estimates for the integration (`*_i`) and
/// bandpassed (`*_f`) signals.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectorThresholds {
    pub i1: f64,
    pub i2: f64,
    pub spki: f64,
    pub npki: f64,
    pub f1: f64,
    pub f2: f64,
    pub spkf: f64,
    pub npkf: f64,
}

impl DetectorThresholds {
    pub fn is_degenerate(&self) -> bool {
        self.spki == 0.0 && self.npki == 0.0
    }

    fn refresh(&mut self) {
        self.i1 = self.npki + 0.25 * (self.spki - self.npki);
        self.i2 = 0.5 * self.i1;
        self.f1 = self.npkf + 0.25 * (self.spkf - self.npkf);
        self.f2 = 0.5 * self.f1;
    }

    fn signal_peak(&mut self, peak_i: f64, peak_f: f64) {
        self.spki = 0.125 * peak_i + 0.875 * self.spki;
        self.spkf = 0.125 * peak_f + 0.875 * self.spkf;
        self.refresh();
    }

    fn searchback_peak(&mut self, peak_i: f64, peak_f: f64) {
        self.spki = 0.25 * peak_i + 0.75 * self.spki;
        self.spkf = 0.25 * peak_f + 0.75 * self.spkf;
        self.refresh();
    }

    fn noise_peak(&mut self, peak_i: f64, peak_f: f64) {
        self.npki = 0.125 * peak_i + 0.875 * self.npki;
        self.npkf = 0.125 * peak_f + 0.875 * self.npkf;
        self.refresh();
    }
}

/// Intermediate signals of the feature chain, sample-aligned with the record.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSignals {
    pub bandpassed: Vec<f64>,
    pub derivative: Vec<f64>,
    pub squared: Vec<f64>,
    pub integrated: Vec<f64>,
    /// Group delay of each stage in samples: bandpass, derivative, squaring,
    /// integration.
    pub delays: [f64; 4],
    pub integration_window: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RPeakSeries {
    pub indices: Vec<usize>,
    pub times: Vec<f64>,
    pub source: PeakSource,
}

impl RPeakSeries {
    fn from_indices(indices: Vec<usize>, fs: f64, t0: f64, source: PeakSource) -> Self {
        let times = indices.iter().map(|&i| t0 + i as f64 / fs).collect();
        Self {
            indices,
            times,
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialPeaks {
    pub indices: Vec<usize>,
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Init,
    Signal,
    Noise,
    SearchBack,
    Reset,
    TWave,
}

/// One entry of the threshold trajectory, recorded at every decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEvent {
    pub index: usize,
    pub kind: DecisionKind,
    pub thresholds: DetectorThresholds,
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub peaks: RPeakSeries,
    pub potential: PotentialPeaks,
    pub features: FeatureSignals,
    pub flipped: bool,
    pub trajectory: Vec<ThresholdEvent>,
}

/// Zero-phase bandpass of the record.
pub fn bandpass(rec: &EcgRecord, cfg: &DetectorConfig) -> Result<Vec<f64>> {
    cfg.validate(rec.fs)?;
    bandpass_zero_phase(&rec.samples, rec.fs, cfg.band_low, cfg.band_high)
}

/// Orient the bandpassed signal so the dominant QRS deflection is positive.
///
/// Flips iff `|min| > 1.2 * |max|` over the learning window; ties and flat
/// input leave the signal untouched.
pub fn check_polarity(bandpassed: &[f64], fs: f64, learning_period_s: f64) -> (Vec<f64>, bool) {
    let n = ((learning_period_s * fs).round() as usize).min(bandpassed.len());
    let window = &bandpassed[..n];
    let max = window.iter().copied().fold(0.0f64, f64::max);
    let min = window.iter().copied().fold(0.0f64, f64::min);
    if min.abs() > 1.2 * max.abs() {
        (bandpassed.iter().map(|v| -v).collect(), true)
    } else {
        (bandpassed.to_vec(), false)
    }
}

/// Five-point derivative (centred, zero delay), edges left at zero.
pub fn five_point_derivative(x: &[f64], fs: f64) -> Vec<f64> {
    let n = x.len();
    let mut out = vec![0.0; n];
    let k = fs / 8.0;
    for i in 2..n.saturating_sub(2) {
        out[i] = k * (-x[i - 2] - 2.0 * x[i - 1] + 2.0 * x[i + 1] + x[i + 2]);
    }
    out
}

/// Trailing moving mean of width `w`; samples before the start count as zero.
///
/// Each output is summed directly rather than with a running sum so that
/// flat zero stretches stay exactly zero.
pub fn moving_integration(x: &[f64], w: usize) -> Vec<f64> {
    let scale = 1.0 / w as f64;
    (0..x.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            x[lo..=i].iter().sum::<f64>() * scale
        })
        .collect()
}

pub fn feature_transform(
    bandpassed: &[f64],
    fs: f64,
    cfg: &DetectorConfig,
) -> Result<FeatureSignals> {
    let w = cfg.integration_samples(fs);
    if w > bandpassed.len() {
        return Err(Error::Config(format!(
            "integration window of {w} samples exceeds signal length {}",
            bandpassed.len()
        )));
    }
    let derivative = five_point_derivative(bandpassed, fs);
    let squared: Vec<f64> = derivative.iter().map(|d| d * d).collect();
    let integrated = moving_integration(&squared, w);
    Ok(FeatureSignals {
        bandpassed: bandpassed.to_vec(),
        derivative,
        squared,
        integrated,
        delays: [0.0, 0.0, 0.0, (w as f64 - 1.0) / 2.0],
        integration_window: w,
    })
}

/// Learning-period initialisation: `I1 = max/3`, `I2 = mean/2`, `SPKI = I1`,
/// `NPKI = I2`, and the same on the bandpassed slice.
pub fn init_thresholds(integrated: &[f64], bandpassed: &[f64]) -> DetectorThresholds {
    fn max_mean(x: &[f64]) -> (f64, f64) {
        if x.is_empty() {
            return (0.0, 0.0);
        }
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (max, x.iter().sum::<f64>() / x.len() as f64)
    }
    let (max_i, mean_i) = max_mean(integrated);
    let (max_f, mean_f) = max_mean(bandpassed);
    let i1 = max_i / 3.0;
    let i2 = 0.5 * mean_i;
    let f1 = max_f / 3.0;
    let f2 = 0.5 * mean_f;
    DetectorThresholds {
        i1,
        i2,
        spki: i1,
        npki: i2,
        f1,
        f2,
        spkf: f1,
        npkf: f2,
    }
}

/// Move each peak to the maximum of `signal` within `+-window/2`, clipped at
/// the boundaries. Peaks that collide or fall closer than `refractory`
/// samples to their predecessor are dropped, so the output stays strictly
/// increasing.
pub fn searchback_refine(
    peaks: &[usize],
    signal: &[f64],
    half_window: usize,
    refractory: usize,
) -> Vec<usize> {
    let n = signal.len();
    let mut out: Vec<usize> = Vec::with_capacity(peaks.len());
    for &p in peaks {
        if n == 0 {
            break;
        }
        let p = p.min(n - 1);
        let lo = p.saturating_sub(half_window);
        let hi = (p + half_window).min(n - 1);
        let mut best = p;
        for i in lo..=hi {
            if signal[i] > signal[best] {
                best = i;
            }
        }
        match out.last() {
            Some(&prev) if best <= prev || best - prev < refractory => {}
            _ => out.push(best),
        }
    }
    out
}

/// Local maxima of the bandpassed signal that dominate a centred window of
/// `window` samples and are positive.
pub fn potential_peaks(bandpassed: &[f64], window: usize) -> Vec<usize> {
    let n = bandpassed.len();
    let half = window / 2;
    let mut out = Vec::new();
    for i in 1..n.saturating_sub(1) {
        let v = bandpassed[i];
        if !(v > 0.0 && v > bandpassed[i - 1] && v >= bandpassed[i + 1]) {
            continue;
        }
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        if bandpassed[lo..=hi].iter().all(|&u| u <= v) {
            out.push(i);
        }
    }
    out
}

fn argmax(x: &[f64], lo: usize, hi: usize) -> (usize, f64) {
    let mut best = lo;
    for i in lo..=hi {
        if x[i] > x[best] {
            best = i;
        }
    }
    (best, x[best])
}

struct Candidate {
    bp_idx: usize,
    peak_i: f64,
    peak_f: f64,
}

/// Full enhanced Pan-Tompkins pipeline on one record.
pub fn detect(rec: &EcgRecord, cfg: &DetectorConfig) -> Result<Detection> {
    cfg.validate(rec.fs)?;
    let fs = rec.fs;
    let n_learn = (cfg.learning_period_s * fs).round() as usize;
    if rec.len() < n_learn.max(2) {
        return Err(Error::Data(format!(
            "record of {} samples is shorter than the learning period ({n_learn})",
            rec.len()
        )));
    }

    let bp = bandpass(rec, cfg)?;
    let (bp, flipped) = if cfg.polarity_check {
        check_polarity(&bp, fs, cfg.learning_period_s)
    } else {
        (bp, false)
    };
    let features = feature_transform(&bp, fs, cfg)?;
    let mwi = &features.integrated;
    let n = mwi.len();
    let w = features.integration_window;

    let refractory = DetectorConfig::samples(cfg.refractory_ms, fs);
    let t_wave = DetectorConfig::samples(cfg.t_wave_ms, fs);
    let reset_timeout = (cfg.reset_timeout_s * fs).round() as usize;
    let one_second = fs.round() as usize;

    let mut th = init_thresholds(&mwi[..n_learn], &bp[..n_learn]);
    let mut trajectory = vec![ThresholdEvent {
        index: 0,
        kind: DecisionKind::Init,
        thresholds: th,
    }];

    let mut beats: Vec<usize> = Vec::new();
    let mut beat_slope: Option<f64> = None;
    let mut rr_recent: Vec<usize> = Vec::new();
    let mut noise_since_beat: Vec<Candidate> = Vec::new();
    let mut last_reset: Option<usize> = None;

    let slope_at = |idx: usize| -> f64 {
        let lo = idx.saturating_sub(w / 2);
        let hi = (idx + w / 2).min(n - 1);
        features.derivative[lo..=hi]
            .iter()
            .fold(0.0f64, |m, d| m.max(d.abs()))
    };

    for i in 1..n.saturating_sub(1) {
        if !(mwi[i] > mwi[i - 1] && mwi[i] >= mwi[i + 1]) {
            continue;
        }
        if cfg.zero_skip && mwi[i] < cfg.zero_floor {
            continue;
        }
        let (bp_idx, peak_f) = argmax(&bp, (i + 1).saturating_sub(w), i);
        let cand = Candidate {
            bp_idx,
            peak_i: mwi[i],
            peak_f,
        };
        let anchor = beats.last().copied().unwrap_or(0);
        let gap = bp_idx.saturating_sub(anchor);

        // Threshold reset on a 2 s window centred at the current point.
        let since_reset = last_reset.map_or(usize::MAX, |r| i - r);
        let timed_out = gap > reset_timeout;
        if (cfg.threshold_reset && timed_out && since_reset > reset_timeout)
            || th.is_degenerate()
        {
            let lo = i.saturating_sub(one_second);
            let hi = (i + one_second).min(n);
            let fresh = init_thresholds(&mwi[lo..hi], &bp[lo..hi]);
            if !fresh.is_degenerate() {
                th = fresh;
                last_reset = Some(i);
                trajectory.push(ThresholdEvent {
                    index: i,
                    kind: DecisionKind::Reset,
                    thresholds: th,
                });
            }
        }

        // Search back over noise peaks when a beat seems to be missing. The
        // enhanced detector halts this once the gap exceeds the reset
        // timeout (zero segments), leaving recovery to the reset.
        if !beats.is_empty() && !rr_recent.is_empty() {
            let rr_avg = rr_recent.iter().sum::<usize>() as f64 / rr_recent.len() as f64;
            let halted = cfg.threshold_reset && timed_out;
            if gap as f64 > 1.66 * rr_avg && !halted {
                let best = noise_since_beat
                    .iter()
                    .filter(|c| {
                        c.bp_idx > anchor + refractory
                            && c.bp_idx + refractory <= bp_idx
                            && c.peak_i > th.i2
                            && c.peak_f > th.f2
                    })
                    .max_by(|a, b| a.peak_i.total_cmp(&b.peak_i));
                if let Some(c) = best {
                    let idx = c.bp_idx;
                    let (pi, pf) = (c.peak_i, c.peak_f);
                    th.searchback_peak(pi, pf);
                    rr_push(&mut rr_recent, idx - anchor);
                    beats.push(idx);
                    beat_slope = Some(slope_at(idx));
                    noise_since_beat.clear();
                    trajectory.push(ThresholdEvent {
                        index: idx,
                        kind: DecisionKind::SearchBack,
                        thresholds: th,
                    });
                }
            }
        }

        let anchor = beats.last().copied();
        if let Some(prev) = anchor {
            if bp_idx <= prev || bp_idx - prev < refractory {
                continue;
            }
        }

        if cand.peak_i > th.i1 && cand.peak_f > th.f1 {
            let slope = slope_at(bp_idx);
            let is_t_wave = match (anchor, beat_slope) {
                (Some(prev), Some(prev_slope)) => bp_idx - prev < t_wave && slope < 0.5 * prev_slope,
                _ => false,
            };
            if is_t_wave {
                th.noise_peak(cand.peak_i, cand.peak_f);
                trajectory.push(ThresholdEvent {
                    index: i,
                    kind: DecisionKind::TWave,
                    thresholds: th,
                });
                noise_since_beat.push(cand);
                continue;
            }
            th.signal_peak(cand.peak_i, cand.peak_f);
            if let Some(prev) = anchor {
                rr_push(&mut rr_recent, bp_idx - prev);
            }
            beats.push(bp_idx);
            beat_slope = Some(slope);
            noise_since_beat.clear();
            trajectory.push(ThresholdEvent {
                index: i,
                kind: DecisionKind::Signal,
                thresholds: th,
            });
        } else {
            th.noise_peak(cand.peak_i, cand.peak_f);
            trajectory.push(ThresholdEvent {
                index: i,
                kind: DecisionKind::Noise,
                thresholds: th,
            });
            noise_since_beat.push(cand);
        }
    }

    let half = DetectorConfig::samples(cfg.searchback_window_ms, fs) / 2;
    let refine_signal: &[f64] = match cfg.refine_on {
        PeakSource::Bandpass => &bp,
        PeakSource::Raw => &rec.samples,
    };
    let mut refined = searchback_refine(&beats, refine_signal, half, refractory);
    if cfg.zero_skip {
        refined.retain(|&i| mwi[i] >= cfg.zero_floor);
    }

    let pp_window = DetectorConfig::samples(cfg.potential_window(), fs);
    let mut potential = potential_peaks(&bp, pp_window);
    if cfg.zero_skip {
        potential.retain(|&i| mwi[i] >= cfg.zero_floor);
    }
    potential.extend_from_slice(&refined);
    potential.sort_unstable();
    potential.dedup();

    let peaks = RPeakSeries::from_indices(refined, fs, rec.t0, cfg.refine_on);
    let potential = PotentialPeaks {
        times: potential.iter().map(|&i| rec.t0 + i as f64 / fs).collect(),
        indices: potential,
    };
    Ok(Detection {
        peaks,
        potential,
        features,
        flipped,
        trajectory,
    })
}

fn rr_push(rr: &mut Vec<usize>, v: usize) {
    rr.push(v);
    if rr.len() > 8 {
        rr.remove(0);
    }
}
