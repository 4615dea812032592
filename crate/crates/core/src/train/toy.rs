use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::hr::{HrWindow, LabelKind};

/// A separable toy set: epochs alternate between class 0 (noise sd 0.05)
/// and class 1 (noise sd 0.25), both around 0.5. Epoch ids are
/// `{prefix}{index}`.
pub fn variance_task(
    n_epochs: usize,
    windows_per_epoch: usize,
    window_samples: usize,
    prefix: &str,
    seed: u64,
) -> Vec<HrWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_epochs * windows_per_epoch);
    for e in 0..n_epochs {
        let label = (e % 2) as u8;
        let sd = if label == 1 { 0.25 } else { 0.05 };
        let noise = Normal::new(0.0, sd).expect("positive sd");
        for _ in 0..windows_per_epoch {
            out.push(HrWindow {
                values: (0..window_samples).map(|_| 0.5 + noise.sample(&mut rng)).collect(),
                epoch_id: format!("{prefix}{e}"),
                label,
                label_kind: LabelKind::Strong,
                normalized: true,
            });
        }
    }
    out
}
