use hrvconformer::rr::{self, Annotation, RrCategory, RrSeries};
use proptest::prelude::*;

/// A rhythm around `base` with some beats removed (their times kept as
/// potential peaks) and optional very long gaps.
fn damaged_rhythm(
    base: f64,
    jitter: &[f64],
    missing: &[usize],
    gaps: &[usize],
) -> (RrSeries, Vec<f64>) {
    let mut times = vec![0.0];
    for (k, j) in jitter.iter().enumerate() {
        let step = if gaps.contains(&k) { 12.0 } else { base + j };
        times.push(times.last().unwrap() + step);
    }
    let mut potential = Vec::new();
    let kept: Vec<f64> = times
        .iter()
        .enumerate()
        .filter_map(|(k, &t)| {
            if k > 8 && k + 1 < times.len() && missing.contains(&k) {
                potential.push(t);
                None
            } else {
                Some(t)
            }
        })
        .collect();
    (RrSeries::from_beat_times(kept).unwrap(), potential)
}

proptest! {
    #[test]
    fn reconstruction_conserves_duration(
        base in 0.35f64..0.6,
        jitter in prop::collection::vec(-0.02f64..0.02, 40..80),
        missing in prop::collection::vec(9usize..70, 0..6),
    ) {
        let (s, pp) = damaged_rhythm(base, &jitter, &missing, &[]);
        let gm = rr::global_mean_rr(&s.intervals);
        let out = rr::reconstruct_long(&s, &pp, gm).unwrap();
        prop_assert!((out.duration() - s.duration()).abs() < 1e-6);
        let c = rr::correct(&s, &pp).unwrap();
        let total: f64 = c.intervals.iter().sum();
        prop_assert!((total - s.duration()).abs() < 1e-6);
        prop_assert!(c.beat_times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn correction_is_idempotent(
        base in 0.35f64..0.6,
        jitter in prop::collection::vec(-0.02f64..0.02, 40..80),
        missing in prop::collection::vec(9usize..70, 0..6),
        gaps in prop::collection::vec(0usize..80, 0..2),
    ) {
        let (s, pp) = damaged_rhythm(base, &jitter, &missing, &gaps);
        let once = rr::correct(&s, &pp).unwrap();
        let twice = rr::correct(&once.as_rr(), &pp).unwrap();
        prop_assert_eq!(&once.intervals, &twice.intervals);
        prop_assert_eq!(&once.beat_times, &twice.beat_times);
    }

    #[test]
    fn original_intervals_respect_bounds(
        intervals in prop::collection::vec(0.05f64..14.0, 1..60),
    ) {
        let s = RrSeries::from_intervals(0.0, intervals.clone()).unwrap();
        let c = rr::correct(&s, &[]).unwrap();
        for (v, a) in c.intervals.iter().zip(&c.annotations) {
            let cat = rr::classify_interval(*v).unwrap();
            match a {
                Annotation::Original => prop_assert!(matches!(cat, RrCategory::Short | RrCategory::Long)),
                Annotation::ExcludedGap => prop_assert!(*v > 10.0 && intervals.contains(v)),
                _ => {}
            }
        }
        prop_assert!(c.beat_times.windows(2).all(|w| w[1] > w[0]));
        for (k, v) in c.intervals.iter().enumerate() {
            prop_assert!((c.beat_times[k + 1] - c.beat_times[k] - v).abs() < 1e-9);
        }
    }
}

#[test]
fn spurious_beat_is_absorbed_once() {
    // An extra detection splits one 0.5 s interval into 0.1 + 0.4.
    let mut v = vec![0.5; 30];
    v[15] = 0.1;
    v.insert(16, 0.4);
    let s = RrSeries::from_intervals(0.0, v).unwrap();
    let once = rr::correct(&s, &[]).unwrap();
    assert_eq!(once.annotations[15], Annotation::ReplacedMa);
    let twice = rr::correct(&once.as_rr(), &[]).unwrap();
    assert_eq!(once.intervals, twice.intervals);
    assert!(twice.annotations.iter().all(|&a| a == Annotation::Original));
}

#[test]
fn candidate_inside_irregular_interval_is_not_left_original() {
    let mut v = vec![0.45; 30];
    v[12] = 1.5;
    let s = RrSeries::from_intervals(0.0, v).unwrap();
    let a = s.beat_times[12];
    let c = rr::correct(&s, &[a + 0.5, a + 1.0]).unwrap();
    assert!(c.annotations[12..15].iter().all(|&x| x == Annotation::Reconstructed));
}
