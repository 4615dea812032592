//! ECG records: CSV ingestion and a seeded synthetic generator with
//! ground-truth beat annotations.
//!
//! The CSV layout is a `fs=<hz>` line, a `sample_mv` header and then one
//! amplitude per line. Amplitudes are treated as millivolts by convention;
//! nothing downstream depends on the absolute scale.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single-channel ECG recording.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub channel: String,
    /// Start offset of the first sample, seconds.
    pub t0: f64,
}

impl EcgRecord {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        if !(fs.is_finite() && fs > 0.0) {
            return Err(Error::InvalidSamplingRate(fs));
        }
        Ok(Self {
            samples,
            fs,
            channel: "ecg".to_string(),
            t0: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    /// Copy of the record with every sample multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * c).collect(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    #[default]
    Upright,
    Inverted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    /// Sharp triangular pulse spanning the window.
    Spike,
    /// Electrode disconnection: samples forced to exactly zero.
    Zero,
    /// Slow baseline wander.
    Wander,
    /// Broadband Gaussian noise burst.
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSpec {
    pub kind: ArtifactKind,
    pub t_start: f64,
    pub t_end: f64,
    /// Peak amplitude (spike, wander) or standard deviation (noise), mV.
    /// Ignored for zero segments. `None` selects a per-kind default.
    #[serde(default)]
    pub amplitude: Option<f64>,
}

impl ArtifactSpec {
    pub fn new(kind: ArtifactKind, t_start: f64, t_end: f64) -> Self {
        Self {
            kind,
            t_start,
            t_end,
            amplitude: None,
        }
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = Some(amplitude);
        self
    }

    fn amplitude_or_default(&self) -> f64 {
        self.amplitude.unwrap_or(match self.kind {
            ArtifactKind::Spike => 5.0,
            ArtifactKind::Zero => 0.0,
            ArtifactKind::Wander => 1.0,
            ArtifactKind::Noise => 0.3,
        })
    }
}

/// Beat annotations that accompany a synthetic record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBeats {
    pub r_times: Vec<f64>,
    pub polarity: Polarity,
    pub injected_artifacts: Vec<ArtifactSpec>,
}

impl GroundTruthBeats {
    /// Whether `t` falls inside any injected artifact of the given kind.
    pub fn in_artifact(&self, t: f64, kind: ArtifactKind) -> bool {
        self.injected_artifacts
            .iter()
            .any(|a| a.kind == kind && t >= a.t_start && t <= a.t_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub hr_bpm: f64,
    /// Standard deviation of the beat-to-beat interval jitter, seconds.
    pub hrv_sd: f64,
    pub duration: f64,
    pub fs: f64,
    pub noise_sd: f64,
    #[serde(default)]
    pub artifacts: Vec<ArtifactSpec>,
    #[serde(default)]
    pub polarity: Polarity,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            hr_bpm: 120.0,
            hrv_sd: 0.01,
            duration: 60.0,
            fs: 256.0,
            noise_sd: 0.02,
            artifacts: Vec::new(),
            polarity: Polarity::Upright,
            seed: 0,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<()> {
        if !(60.0..=240.0).contains(&self.hr_bpm) {
            return Err(Error::Config(format!(
                "hr_bpm {} outside [60, 240]",
                self.hr_bpm
            )));
        }
        if !(self.duration > 0.0) {
            return Err(Error::Config("duration must be positive".into()));
        }
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(Error::InvalidSamplingRate(self.fs));
        }
        let mean_rr = 60.0 / self.hr_bpm;
        if self.hrv_sd < 0.0 || 3.0 * self.hrv_sd >= mean_rr {
            return Err(Error::Config(format!(
                "hrv_sd {} must be in [0, mean_rr/3)",
                self.hrv_sd
            )));
        }
        if self.noise_sd < 0.0 {
            return Err(Error::Config("noise_sd must be non-negative".into()));
        }
        for a in &self.artifacts {
            if !(a.t_start >= 0.0 && a.t_end <= self.duration && a.t_start < a.t_end) {
                return Err(Error::Config(format!(
                    "artifact window [{}, {}] outside record duration {}",
                    a.t_start, a.t_end, self.duration
                )));
            }
        }
        Ok(())
    }
}

fn gauss(x: f64, sd: f64) -> f64 {
    (-0.5 * (x / sd) * (x / sd)).exp()
}

/// QRS-T template around an R peak at `dt = 0`. The Q-R-S part is an
/// asymmetric biphasic wavelet roughly 80 ms wide with a 1 mV R wave.
fn beat_template(dt: f64, t_offset: f64) -> f64 {
    -0.12 * gauss(dt + 0.025, 0.008) + 1.0 * gauss(dt, 0.009) - 0.3 * gauss(dt - 0.024, 0.010)
        + 0.25 * gauss(dt - t_offset, 0.04)
}

/// Named synthetic corpora at 120 bpm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusPreset {
    Clean,
    /// A 20 mV spike at 30 s and a zero (disconnection) segment over 60-90 s.
    Artifacts,
    /// The clean corpus with inverted polarity.
    Inverted,
}

impl CorpusPreset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "clean" => Some(CorpusPreset::Clean),
            "artifacts" => Some(CorpusPreset::Artifacts),
            "inverted" => Some(CorpusPreset::Inverted),
            _ => None,
        }
    }

    pub fn params(&self, duration: f64, seed: u64) -> Result<SynthParams> {
        let base = SynthParams {
            hr_bpm: 120.0,
            duration,
            seed,
            ..SynthParams::default()
        };
        Ok(match self {
            CorpusPreset::Clean => base,
            CorpusPreset::Inverted => SynthParams {
                polarity: Polarity::Inverted,
                ..base
            },
            CorpusPreset::Artifacts => {
                if duration < 120.0 {
                    return Err(Error::Config(format!(
                        "the artifacts corpus needs at least 120 s, got {duration}"
                    )));
                }
                SynthParams {
                    artifacts: vec![
                        ArtifactSpec::new(ArtifactKind::Spike, 29.98, 30.02).with_amplitude(20.0),
                        ArtifactSpec::new(ArtifactKind::Zero, 60.0, 90.0),
                    ],
                    ..base
                }
            }
        })
    }
}

/// Generate a synthetic ECG with a known beat schedule.
pub fn synth_ecg(p: &SynthParams) -> Result<(EcgRecord, GroundTruthBeats)> {
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mean_rr = 60.0 / p.hr_bpm;

    let mut r_times = Vec::new();
    let mut t = 0.5 * mean_rr;
    let jitter = if p.hrv_sd > 0.0 {
        Some(Normal::new(0.0, p.hrv_sd).expect("positive sd"))
    } else {
        None
    };
    while t <= p.duration - 0.1 {
        r_times.push(t);
        let dj = match &jitter {
            Some(n) => n.sample(&mut rng).clamp(-3.0 * p.hrv_sd, 3.0 * p.hrv_sd),
            None => 0.0,
        };
        t += mean_rr + dj;
    }

    let n = (p.duration * p.fs).round() as usize;
    let mut samples = vec![0.0; n];
    let t_offset = (0.45 * mean_rr).min(0.3);
    for &rt in &r_times {
        let lo = ((rt - 0.1) * p.fs).floor().max(0.0) as usize;
        let hi = (((rt + t_offset + 0.2) * p.fs).ceil() as usize).min(n);
        for (k, s) in samples.iter_mut().enumerate().take(hi).skip(lo) {
            *s += beat_template(k as f64 / p.fs - rt, t_offset);
        }
    }

    if p.noise_sd > 0.0 {
        let noise = Normal::new(0.0, p.noise_sd).expect("positive sd");
        for s in samples.iter_mut() {
            *s += noise.sample(&mut rng);
        }
    }

    for a in &p.artifacts {
        let lo = ((a.t_start * p.fs).ceil() as usize).min(n);
        let hi = (((a.t_end * p.fs).floor() as usize) + 1).min(n);
        let amp = a.amplitude_or_default();
        match a.kind {
            ArtifactKind::Zero => samples[lo..hi].iter_mut().for_each(|s| *s = 0.0),
            ArtifactKind::Spike => {
                let centre = 0.5 * (a.t_start + a.t_end);
                let half = 0.5 * (a.t_end - a.t_start);
                for (k, s) in samples.iter_mut().enumerate().take(hi).skip(lo) {
                    let d = (k as f64 / p.fs - centre).abs();
                    *s += amp * (1.0 - d / half).max(0.0);
                }
            }
            ArtifactKind::Wander => {
                for (k, s) in samples.iter_mut().enumerate().take(hi).skip(lo) {
                    let tt = k as f64 / p.fs - a.t_start;
                    *s += amp * (2.0 * std::f64::consts::PI * 0.3 * tt).sin();
                }
            }
            ArtifactKind::Noise => {
                let burst = Normal::new(0.0, amp.max(f64::MIN_POSITIVE)).expect("positive sd");
                for s in samples[lo..hi].iter_mut() {
                    *s += burst.sample(&mut rng);
                }
            }
        }
    }

    if p.polarity == Polarity::Inverted {
        samples.iter_mut().for_each(|s| *s = -*s);
    }

    let record = EcgRecord {
        samples,
        fs: p.fs,
        channel: "synthetic".to_string(),
        t0: 0.0,
    };
    let truth = GroundTruthBeats {
        r_times,
        polarity: p.polarity,
        injected_artifacts: p.artifacts.clone(),
    };
    Ok((record, truth))
}

/// Parse the ECG CSV layout: `fs=<hz>`, `sample_mv`, then one value per line.
pub fn read_ecg_csv<R: BufRead>(reader: R) -> Result<EcgRecord> {
    let mut lines = reader.lines().enumerate();
    let fs = match lines.next() {
        Some((_, line)) => {
            let line = line?;
            let value = line
                .trim()
                .strip_prefix("fs=")
                .ok_or_else(|| Error::parse(1, "missing fs header"))?;
            value
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(1, format!("invalid fs value {value:?}")))?
        }
        None => return Err(Error::parse(1, "missing fs header")),
    };
    if !(fs.is_finite() && fs > 0.0) {
        return Err(Error::InvalidSamplingRate(fs));
    }
    match lines.next() {
        Some((_, line)) => {
            if line?.trim() != "sample_mv" {
                return Err(Error::parse(2, "expected header `sample_mv`"));
            }
        }
        None => return Err(Error::NoSamples),
    }
    let mut samples = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let field = line.trim();
        if field.is_empty() {
            continue;
        }
        let v = field
            .parse::<f64>()
            .map_err(|_| Error::parse(i + 1, format!("non-numeric sample {field:?}")))?;
        samples.push(v);
    }
    match samples.len() {
        0 => Err(Error::NoSamples),
        1 => Err(Error::Data("fewer than 2 samples".into())),
        _ => EcgRecord::new(samples, fs),
    }
}

pub fn write_ecg_csv<W: Write>(rec: &EcgRecord, mut w: W) -> Result<()> {
    writeln!(w, "fs={}", rec.fs)?;
    writeln!(w, "sample_mv")?;
    for s in &rec.samples {
        writeln!(w, "{s}")?;
    }
    Ok(())
}

/// Ground-truth annotation CSV: a `r_time_s` header and one time per line.
pub fn read_annotations_csv<R: BufRead>(reader: R) -> Result<Vec<f64>> {
    let mut times = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let field = line.trim();
        if i == 0 {
            if field != "r_time_s" {
                return Err(Error::parse(1, "expected header `r_time_s`"));
            }
            continue;
        }
        if field.is_empty() {
            continue;
        }
        let t = field
            .parse::<f64>()
            .map_err(|_| Error::parse(i + 1, format!("non-numeric time {field:?}")))?;
        if times.last().is_some_and(|&prev| t <= prev) {
            return Err(Error::parse(i + 1, "beat times must be strictly increasing"));
        }
        times.push(t);
    }
    Ok(times)
}

pub fn write_annotations_csv<W: Write>(r_times: &[f64], mut w: W) -> Result<()> {
    writeln!(w, "r_time_s")?;
    for t in r_times {
        writeln!(w, "{t}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(seed: u64) -> SynthParams {
        SynthParams {
            hr_bpm: 120.0,
            duration: 60.0,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn csv_parses_header_and_rows() {
        let mut body = String::from("fs=256\nsample_mv\n");
        for i in 0..512 {
            body.push_str(&format!("{}\n", (i as f64 * 0.01).sin()));
        }
        let rec = read_ecg_csv(body.as_bytes()).unwrap();
        assert_eq!(rec.len(), 512);
        assert_eq!(rec.fs, 256.0);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(
            read_ecg_csv("fs=256\nsample_mv\n".as_bytes()),
            Err(Error::NoSamples)
        ));
        assert!(matches!(
            read_ecg_csv("fs=0\nsample_mv\n1\n2\n".as_bytes()),
            Err(Error::InvalidSamplingRate(_))
        ));
        assert!(matches!(
            read_ecg_csv("sample_mv\n1\n2\n".as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            read_ecg_csv("fs=256\nsample_mv\n1\nabc\n".as_bytes()),
            Err(Error::Parse { line: 4, .. })
        ));
        assert!(matches!(
            read_ecg_csv("fs=256\nsample_mv\n1\n".as_bytes()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let (rec, truth) = synth_ecg(&SynthParams {
            duration: 5.0,
            ..clean(3)
        })
        .unwrap();
        let mut buf = Vec::new();
        write_ecg_csv(&rec, &mut buf).unwrap();
        let back = read_ecg_csv(buf.as_slice()).unwrap();
        assert_eq!(back.samples, rec.samples);
        let mut buf = Vec::new();
        write_annotations_csv(&truth.r_times, &mut buf).unwrap();
        assert_eq!(read_annotations_csv(buf.as_slice()).unwrap(), truth.r_times);
    }

    #[test]
    fn beat_count_at_120_bpm() {
        // Independent count: the schedule starts at half an interval and
        // every interval lies within 0.5 +/- 3 * 0.01 s.
        let (_, truth) = synth_ecg(&clean(7)).unwrap();
        assert!(
            (119..=121).contains(&truth.r_times.len()),
            "{} beats",
            truth.r_times.len()
        );
        for w in truth.r_times.windows(2) {
            let d = w[1] - w[0];
            assert!((0.47 - 1e-12..=0.53 + 1e-12).contains(&d));
        }
    }

    #[test]
    fn inverted_is_negation() {
        let (up, _) = synth_ecg(&clean(11)).unwrap();
        let (down, truth) = synth_ecg(&SynthParams {
            polarity: Polarity::Inverted,
            ..clean(11)
        })
        .unwrap();
        assert_eq!(truth.polarity, Polarity::Inverted);
        for (a, b) in up.samples.iter().zip(&down.samples) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn zero_artifact_is_exact() {
        let p = SynthParams {
            duration: 30.0,
            artifacts: vec![ArtifactSpec::new(ArtifactKind::Zero, 10.0, 20.0)],
            ..clean(5)
        };
        let (rec, _) = synth_ecg(&p).unwrap();
        let lo = (10.0 * rec.fs) as usize;
        let hi = (20.0 * rec.fs) as usize;
        assert!(rec.samples[lo..=hi].iter().all(|&s| s == 0.0));
        assert!(rec.samples[..lo].iter().any(|&s| s != 0.0));
    }

    #[test]
    fn artifact_outside_duration_rejected() {
        let p = SynthParams {
            duration: 30.0,
            artifacts: vec![ArtifactSpec::new(ArtifactKind::Spike, 25.0, 31.0)],
            ..clean(5)
        };
        assert!(matches!(synth_ecg(&p), Err(Error::Config(_))));
        let p = SynthParams {
            hr_bpm: 300.0,
            ..clean(5)
        };
        assert!(synth_ecg(&p).is_err());
    }

    #[test]
    fn seeded_generation_is_bit_identical() {
        let p = SynthParams {
            artifacts: vec![ArtifactSpec::new(ArtifactKind::Noise, 3.0, 6.0)],
            ..clean(42)
        };
        let (a, ta) = synth_ecg(&p).unwrap();
        let (b, tb) = synth_ecg(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = synth_ecg(&SynthParams { seed: 43, ..p }).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn interval_sum_matches_span() {
        let (_, truth) = synth_ecg(&SynthParams {
            hrv_sd: 0.03,
            ..clean(9)
        })
        .unwrap();
        let total: f64 = truth.r_times.windows(2).map(|w| w[1] - w[0]).sum();
        let span = truth.r_times.last().unwrap() - truth.r_times[0];
        assert!((total - span).abs() < 1e-9);
    }
}
