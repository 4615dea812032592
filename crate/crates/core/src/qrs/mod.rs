//! Enhanced Pan-Tompkins QRS detection.
//!
//! The pipeline is bandpass (zero phase) -> polarity check -> five-point
//! derivative -> squaring -> moving integration -> adaptive dual thresholds.
//! On top of the classic decision rules the detector re-initialises its
//! thresholds after a long silence, skips integration peaks below a zero
//! floor, halts search-back inside flat stretches and snaps final peaks to
//! the bandpassed trace.

mod detector;
mod filter;
mod metrics;

pub use detector::{
    bandpass, check_polarity, detect, feature_transform, five_point_derivative,
    init_thresholds, moving_integration, potential_peaks, searchback_refine, DecisionKind,
    Detection, DetectorConfig, DetectorThresholds, FeatureSignals, PeakSource, PotentialPeaks,
    RPeakSeries, ThresholdEvent,
};
pub use filter::bandpass_zero_phase;
pub use metrics::{match_beats, MatchStats};

use std::io::Write;

use crate::error::Result;

/// Peak CSV with columns `index,time_s`.
pub fn write_peaks_csv<W: Write>(peaks: &RPeakSeries, mut w: W) -> Result<()> {
    writeln!(w, "index,time_s")?;
    for (i, t) in peaks.indices.iter().zip(&peaks.times) {
        writeln!(w, "{i},{t}")?;
    }
    Ok(())
}
