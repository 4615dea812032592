use serde::{Deserialize, Serialize};

use super::graph::Grads;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.85,
            beta2: 0.998,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let m: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(&p.value.shape)).collect();
        Self {
            cfg,
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient are treated as having a
    /// zero gradient (they still decay). Non-trainable entries are skipped.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        for id in store.ids() {
            if let Some(g) = grads.param(id) {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of parameter {}",
                        store.param(id).name
                    )));
                }
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.param(id).trainable {
                continue;
            }
            let i = id.index();
            let g = grads.param(id);
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..p.data.len() {
                let gk = g.map_or(0.0, |g| g.data[k]);
                p.data[k] -= lr * weight_decay * p.data[k];
                m.data[k] = beta1 * m.data[k] + (1.0 - beta1) * gk;
                v.data[k] = beta2 * v.data[k] + (1.0 - beta2) * gk * gk;
                let mhat = m.data[k] / c1;
                let vhat = v.data[k] / c2;
                p.data[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warm-up followed by cosine decay, evaluated at a (possibly
/// fractional) epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_epochs: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_epochs: f64,
}

impl LrSchedule {
    pub fn new(total_epochs: f64) -> Self {
        Self {
            warmup_epochs: 50.0,
            lr_max: 6e-5,
            lr_min: 1e-6,
            total_epochs,
        }
    }
}

pub fn cosine_warmup(epoch: f64, s: &LrSchedule) -> f64 {
    let epoch = epoch.max(0.0);
    if epoch < s.warmup_epochs {
        return s.lr_max * epoch / s.warmup_epochs;
    }
    let span = s.total_epochs - s.warmup_epochs;
    let progress = if span > 0.0 {
        ((epoch - s.warmup_epochs) / span).min(1.0)
    } else {
        1.0
    };
    s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    fn scalar_problem(p0: f64, g: f64) -> (ParamStore, Graph, crate::nn::Var) {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(vec![1], vec![p0]).unwrap(), true).unwrap();
        let mut graph = Graph::new(true, 0);
        let p = graph.param(&store, id);
        // loss = g * p, so d loss / d p = g.
        let c = graph.constant(Tensor::new(vec![1], vec![g]).unwrap());
        let prod = graph.mul(p, c).unwrap();
        let loss = graph.sum_all(prod);
        (store, graph, loss)
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let (mut store, graph, loss) = scalar_problem(0.7, 0.0);
        let grads = graph.backward(loss).unwrap();
        let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut store, &grads, 0.1).unwrap();
        assert_eq!(store.get(store.id("p").unwrap()).data[0], 0.7);
    }

    #[test]
    fn zero_gradient_shrinks_by_decay_factor() {
        let (mut store, graph, loss) = scalar_problem(0.7, 0.0);
        let grads = graph.backward(loss).unwrap();
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        opt.step(&mut store, &grads, 0.01).unwrap();
        let expected = 0.7 * (1.0 - 0.01 * 0.1);
        assert!((store.get(store.id("p").unwrap()).data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn two_steps_match_hand_calculation() {
        // g = 1 on both steps, lr = 0.1, default betas and decay.
        // Step 1: p <- p(1 - 0.01); m = 0.15, v = 0.002; mhat = vhat = 1.
        // Step 2: p <- p(1 - 0.01); m = 0.2775, v = 0.003996;
        //         mhat = 0.2775 / 0.2775 = 1, vhat = 0.003996 / 0.003996 = 1.
        let lr = 0.1;
        let step = |p: f64| p * (1.0 - lr * 0.1) - lr * 1.0 / (1.0 + 1e-8);
        let expected = step(step(2.0));
        let (mut store, graph, loss) = scalar_problem(2.0, 1.0);
        let grads = graph.backward(loss).unwrap();
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        opt.step(&mut store, &grads, lr).unwrap();
        opt.step(&mut store, &grads, lr).unwrap();
        let got = store.get(store.id("p").unwrap()).data[0];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut store, graph, loss) = scalar_problem(1.0, f64::NAN);
        let grads = graph.backward(loss).unwrap();
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let err = opt.step(&mut store, &grads, 0.1).unwrap_err();
        assert!(err.to_string().contains("parameter p"), "{err}");
    }

    #[test]
    fn schedule_anchor_points() {
        let s = LrSchedule::new(300.0);
        assert_eq!(cosine_warmup(0.0, &s), 0.0);
        assert!((cosine_warmup(50.0, &s) - 6e-5).abs() < 1e-20);
        assert!((cosine_warmup(300.0, &s) - 1e-6).abs() < 1e-20);
        assert!((cosine_warmup(25.0, &s) - 3e-5).abs() < 1e-20);
        let mut prev = f64::INFINITY;
        for e in 50..=300 {
            let lr = cosine_warmup(e as f64, &s);
            assert!(lr <= prev && lr >= s.lr_min && lr <= s.lr_max);
            prev = lr;
        }
        assert_eq!(cosine_warmup(1000.0, &s), s.lr_min);
    }
}
