use serde::{Deserialize, Serialize};

/// Beat-matching statistics of detected peaks against reference times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchStats {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub sensitivity: f64,
    pub ppv: f64,
    /// Mean absolute time offset of matched pairs, seconds.
    pub mean_abs_error_s: f64,
}

/// One-to-one matching within `tolerance_s`, pairing each reference beat with
/// the nearest unused detection.
pub fn match_beats(detected: &[f64], reference: &[f64], tolerance_s: f64) -> MatchStats {
    let mut used = vec![false; detected.len()];
    let mut tp = 0;
    let mut err_sum = 0.0;
    let mut start = 0;
    for &r in reference {
        while start < detected.len() && detected[start] < r - tolerance_s {
            start += 1;
        }
        let mut best: Option<(usize, f64)> = None;
        let mut j = start;
        while j < detected.len() && detected[j] <= r + tolerance_s {
            let d = (detected[j] - r).abs();
            if !used[j] && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
            j += 1;
        }
        if let Some((j, d)) = best {
            used[j] = true;
            tp += 1;
            err_sum += d;
        }
    }
    let fp = detected.len() - tp;
    let fn_ = reference.len() - tp;
    MatchStats {
        true_positives: tp,
        false_positives: fp,
        false_negatives: fn_,
        sensitivity: if reference.is_empty() { 1.0 } else { tp as f64 / reference.len() as f64 },
        ppv: if detected.is_empty() { 1.0 } else { tp as f64 / detected.len() as f64 },
        mean_abs_error_s: if tp == 0 { 0.0 } else { err_sum / tp as f64 },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_and_missing() {
        let s = match_beats(&[1.0, 2.01, 5.0], &[1.0, 2.0, 3.0], 0.05);
        assert_eq!(s.true_positives, 2);
        assert_eq!(s.false_positives, 1);
        assert_eq!(s.false_negatives, 1);
        assert!((s.mean_abs_error_s - 0.005).abs() < 1e-12);
    }

    #[test]
    fn one_detection_matches_once() {
        let s = match_beats(&[1.0], &[0.98, 1.02], 0.05);
        assert_eq!(s.true_positives, 1);
        assert_eq!(s.false_negatives, 1);
    }
}
