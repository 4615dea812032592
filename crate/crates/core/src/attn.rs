//! Post-hoc analysis of attention maps: rollout relevance, mean attention
//! distance and normalised attention entropy.

use std::io::Write;

use crate::error::{Error, Result};
use crate::nn::Tensor;

const ROW_TOL: f64 = 1e-6;

/// Attention of one sample: `n_layers` x `n_heads` row-stochastic
/// `L' x L'` matrices, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnStack {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Sequence length seen by attention (patches plus class token).
    pub len: usize,
    pub data: Vec<f64>,
    pub patch_samples: usize,
    pub window_samples: usize,
    /// Position 0 is a class token rather than a patch.
    pub class_token: bool,
}

impl AttnStack {
    pub fn new(
        n_layers: usize,
        n_heads: usize,
        len: usize,
        data: Vec<f64>,
        patch_samples: usize,
        class_token: bool,
    ) -> Result<Self> {
        if n_layers == 0 || n_heads == 0 || len == 0 {
            return Err(Error::Shape("empty attention stack".into()));
        }
        if data.len() != n_layers * n_heads * len * len {
            return Err(Error::Shape(format!(
                "{} values for {n_layers} layers x {n_heads} heads x {len}^2",
                data.len()
            )));
        }
        let n_patches = len - usize::from(class_token);
        if n_patches == 0 {
            return Err(Error::Shape("attention stack without patches".into()));
        }
        let s = Self {
            n_layers,
            n_heads,
            len,
            data,
            patch_samples,
            window_samples: n_patches * patch_samples,
            class_token,
        };
        s.check_rows()?;
        Ok(s)
    }

    /// Split model attention maps `(n_layers, B, H, L', L')` into one stack
    /// per sample.
    pub fn from_model_maps(maps: &Tensor, patch_samples: usize, class_token: bool) -> Result<Vec<Self>> {
        if maps.rank() != 5 || maps.shape[3] != maps.shape[4] {
            return Err(Error::Shape(format!("expected (layers, B, H, L, L), got {:?}", maps.shape)));
        }
        let (nl, b, h, l) = (maps.shape[0], maps.shape[1], maps.shape[2], maps.shape[3]);
        let per = h * l * l;
        (0..b)
            .map(|s| {
                let mut data = Vec::with_capacity(nl * per);
                for layer in 0..nl {
                    let off = (layer * b + s) * per;
                    data.extend_from_slice(&maps.data[off..off + per]);
                }
                Self::new(nl, h, l, data, patch_samples, class_token)
            })
            .collect()
    }

    pub fn matrix(&self, layer: usize, head: usize) -> &[f64] {
        let sz = self.len * self.len;
        let off = (layer * self.n_heads + head) * sz;
        &self.data[off..off + sz]
    }

    fn check_rows(&self) -> Result<()> {
        for (r, row) in self.data.chunks(self.len).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) || (s - 1.0).abs() > ROW_TOL {
                return Err(Error::Data(format!("attention row {r} is not stochastic (sum {s})")));
            }
        }
        Ok(())
    }

    /// Head-averaged matrix of one layer.
    pub fn head_mean(&self, layer: usize) -> Vec<f64> {
        let sz = self.len * self.len;
        let mut m = vec![0.0; sz];
        for h in 0..self.n_heads {
            for (a, b) in m.iter_mut().zip(self.matrix(layer, h)) {
                *a += b / self.n_heads as f64;
            }
        }
        m
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

fn row_normalise(m: &mut [f64], n: usize) -> Result<()> {
    for (r, row) in m.chunks_mut(n).enumerate() {
        let s: f64 = row.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Degenerate(format!("row {r} has non-positive mass {s}")));
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(())
}

/// Rolled-out attention `Ā_N ... Ā_1` from per-layer (head-averaged)
/// matrices, where each layer is row-normalised, mixed with the identity
/// as `0.5 A + 0.5 I` and row-normalised again.
pub fn rollout_matrix(layers: &[Vec<f64>], n: usize) -> Result<Vec<f64>> {
    let mut acc: Vec<f64> = (0..n * n).map(|k| f64::from(u8::from(k / n == k % n))).collect();
    for a in layers {
        if a.len() != n * n {
            return Err(Error::Shape(format!("layer of {} values for {n}x{n}", a.len())));
        }
        let mut m = a.clone();
        row_normalise(&mut m, n)?;
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = 0.5 * m[i * n + j] + if i == j { 0.5 } else { 0.0 };
            }
        }
        row_normalise(&mut m, n)?;
        acc = matmul(&m, &acc, n);
    }
    Ok(acc)
}

/// Relevance per input patch, scaled so the largest entry is 1. The
/// readout row is the class token's when present, otherwise the mean of
/// all rows.
pub fn rollout(stack: &AttnStack) -> Result<Vec<f64>> {
    stack.check_rows()?;
    let n = stack.len;
    let layers: Vec<Vec<f64>> = (0..stack.n_layers).map(|l| stack.head_mean(l)).collect();
    let r = rollout_matrix(&layers, n)?;
    let mut rel: Vec<f64> = if stack.class_token {
        r[1..n].to_vec()
    } else {
        (0..n).map(|j| (0..n).map(|i| r[i * n + j]).sum::<f64>() / n as f64).collect()
    };
    let max = rel.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(Error::Degenerate("rollout relevance is zero everywhere".into()));
    }
    rel.iter_mut().for_each(|v| *v /= max);
    Ok(rel)
}

/// Patch relevance repeated over the samples of each patch.
pub fn relevance_per_sample(relevance: &[f64], patch_samples: usize) -> Vec<f64> {
    relevance
        .iter()
        .flat_map(|&r| std::iter::repeat_n(r, patch_samples))
        .collect()
}

/// Mean over patch queries of `sum_j A[i, j] |i - j| * patch_samples`.
/// A class token, when present, is left out as query and key.
pub fn mean_distance(m: &[f64], len: usize, patch_samples: usize, class_token: bool) -> f64 {
    let start = usize::from(class_token);
    let q = len - start;
    let mut total = 0.0;
    for i in start..len {
        for j in start..len {
            total += m[i * len + j] * (i as f64 - j as f64).abs();
        }
    }
    total / q as f64 * patch_samples as f64
}

/// Entropy of one row divided by `ln(n)`, with `0 ln 0 = 0`. A row of
/// equal entries is uniform and a row with one non-zero entry is one-hot;
/// both are returned as exactly 1 and 0 since `n * fl(1/n)` need not
/// round to 1.
fn row_entropy(row: &[f64], norm: f64) -> f64 {
    let nonzero = row.iter().filter(|&&p| p > 0.0).count();
    if nonzero <= 1 {
        return 0.0;
    }
    if row.iter().all(|&p| p == row[0]) {
        return 1.0;
    }
    let s: f64 = row.iter().sum();
    let h = -row
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| (p / s) * (p / s).ln())
        .sum::<f64>();
    (h / norm).clamp(0.0, 1.0)
}

/// Normalised entropy of each row of length `n`, averaged over rows.
pub fn normalized_entropy(m: &[f64], n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Data(format!("entropy needs rows of length >= 2, got {n}")));
    }
    let norm = (n as f64).ln();
    let rows = m.len() / n;
    Ok(m.chunks(n).map(|row| row_entropy(row, norm)).sum::<f64>() / rows as f64)
}

/// Per (layer, head) summary across samples.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStats {
    pub layer: usize,
    pub head: usize,
    pub distance_mean: f64,
    pub distance_sd: f64,
    pub entropy_mean: f64,
    pub entropy_sd: f64,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

/// Distance and entropy statistics over samples (population sd).
pub fn attn_stats(stacks: &[AttnStack]) -> Result<Vec<HeadStats>> {
    let first = stacks.first().ok_or_else(|| Error::Data("no attention samples".into()))?;
    if stacks
        .iter()
        .any(|s| (s.n_layers, s.n_heads, s.len, s.class_token) != (first.n_layers, first.n_heads, first.len, first.class_token))
    {
        return Err(Error::Shape("attention stacks differ in geometry".into()));
    }
    let mut out = Vec::new();
    for layer in 0..first.n_layers {
        for head in 0..first.n_heads {
            let mut dist = Vec::with_capacity(stacks.len());
            let mut ent = Vec::with_capacity(stacks.len());
            for s in stacks {
                let m = s.matrix(layer, head);
                dist.push(mean_distance(m, s.len, s.patch_samples, s.class_token));
                ent.push(normalized_entropy(m, s.len)?);
            }
            let (distance_mean, distance_sd) = mean_sd(&dist);
            let (entropy_mean, entropy_sd) = mean_sd(&ent);
            out.push(HeadStats {
                layer,
                head,
                distance_mean,
                distance_sd,
                entropy_mean,
                entropy_sd,
            });
        }
    }
    Ok(out)
}

/// `layer,head,metric,mean,sd` with metrics `distance` and `entropy`.
pub fn write_stats_csv<W: Write>(stats: &[HeadStats], mut w: W) -> Result<()> {
    writeln!(w, "layer,head,metric,mean,sd")?;
    for s in stats {
        writeln!(w, "{},{},distance,{},{}", s.layer, s.head, s.distance_mean, s.distance_sd)?;
        writeln!(w, "{},{},entropy,{},{}", s.layer, s.head, s.entropy_mean, s.entropy_sd)?;
    }
    Ok(())
}

/// `window,sample,value,relevance`, one row per input sample.
pub fn write_relevance_csv<W: Write>(rows: &[(String, Vec<f64>, Vec<f64>)], mut w: W) -> Result<()> {
    writeln!(w, "window,sample,value,relevance")?;
    for (id, values, rel) in rows {
        if values.len() != rel.len() {
            return Err(Error::Shape(format!(
                "window {id}: {} values for {} relevance entries",
                values.len(),
                rel.len()
            )));
        }
        for (k, (v, r)) in values.iter().zip(rel).enumerate() {
            writeln!(w, "{id},{k},{v},{r}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_stochastic_stack_rejected() {
        assert!(AttnStack::new(1, 1, 2, vec![0.5, 0.6, 0.5, 0.5], 1, false).is_err());
        assert!(AttnStack::new(1, 1, 2, vec![0.5, 0.5, 0.5], 1, false).is_err());
    }

    #[test]
    fn entropy_needs_two_columns() {
        assert!(normalized_entropy(&[1.0], 1).is_err());
    }

    #[test]
    fn relevance_expands_per_sample() {
        assert_eq!(relevance_per_sample(&[1.0, 0.5], 2), vec![1.0, 1.0, 0.5, 0.5]);
    }
}
