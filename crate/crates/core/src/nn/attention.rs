//! Multi-head self-attention with optional positional schemes.
//!
//! `Relative` follows the Transformer-XL decomposition: scores are
//! `(q_i + u)·k_j + (q_i + v)·W_r r_{i-j}` where `r_d` is a sinusoidal
//! encoding of the signed distance and `u`, `v` are learned per-head
//! biases. `FixedSincos` adds absolute sinusoidal encodings to the input of
//! the query/key/value projections. `None` is plain scaled dot-product
//! attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosMode {
    Relative,
    FixedSincos,
    None,
}

impl PosMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relative" => Some(PosMode::Relative),
            "fixed_sincos" | "fixed" => Some(PosMode::FixedSincos),
            "none" => Some(PosMode::None),
            _ => None,
        }
    }
}

/// Sinusoidal encodings for the given (possibly negative) positions:
/// `sin(p / 10000^(2i/d))` in even columns, `cos` in odd ones.
pub fn sinusoid_table(positions: &[f64], d: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        for c in 0..d {
            let freq = 1.0 / 10000f64.powf((c / 2 * 2) as f64 / d as f64);
            data.push(if c % 2 == 0 { (p * freq).sin() } else { (p * freq).cos() });
        }
    }
    Tensor {
        shape: vec![positions.len(), d],
        data,
    }
}

/// Relative distances `i - j` for a length-`l` sequence, in the column
/// order expected by [`Graph::rel_gather`]: `-(l-1), ..., l-1`.
pub fn relative_positions(l: usize) -> Vec<f64> {
    (0..2 * l - 1).map(|c| c as f64 - (l as f64 - 1.0)).collect()
}

#[derive(Debug, Clone)]
struct RelativeParams {
    w_pos: ParamId,
    u: ParamId,
    v: ParamId,
}

#[derive(Debug, Clone)]
pub struct Mhsa {
    pub d_model: usize,
    pub n_heads: usize,
    pub mode: PosMode,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    rel: Option<RelativeParams>,
}

impl Mhsa {
    /// Register parameters under `prefix`. Weights are uniform on
    /// `[-1/sqrt(d), 1/sqrt(d)]`, biases zero.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        mode: PosMode,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {n_heads} heads"
            )));
        }
        if mode != PosMode::None && !d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "sinusoidal encodings need an even d_model, got {d_model}"
            )));
        }
        let bound = 1.0 / (d_model as f64).sqrt();
        let dh = d_model / n_heads;
        let w = |name: &str, store: &mut ParamStore, rng: &mut R| {
            store.add(
                &format!("{prefix}.{name}"),
                Tensor::uniform(&[d_model, d_model], bound, rng),
                true,
            )
        };
        let wq = w("wq", store, rng)?;
        let wk = w("wk", store, rng)?;
        let wv = w("wv", store, rng)?;
        let wo = w("wo", store, rng)?;
        let rel = if mode == PosMode::Relative {
            let w_pos = w("w_pos", store, rng)?;
            let u = store.add(&format!("{prefix}.u"), Tensor::uniform(&[n_heads, dh], bound, rng), true)?;
            let v = store.add(&format!("{prefix}.v"), Tensor::uniform(&[n_heads, dh], bound, rng), true)?;
            Some(RelativeParams { w_pos, u, v })
        } else {
            None
        };
        let mut b = |name: &str| store.add(&format!("{prefix}.{name}"), Tensor::zeros(&[d_model]), true);
        Ok(Self {
            d_model,
            n_heads,
            mode,
            wq,
            bq: b("bq")?,
            wk,
            bk: b("bk")?,
            wv,
            bv: b("bv")?,
            wo,
            bo: b("bo")?,
            rel,
        })
    }

    /// Number of parameters registered by [`Mhsa::new`].
    pub fn param_count(d_model: usize, mode: PosMode) -> usize {
        let base = 4 * d_model * d_model + 4 * d_model;
        match mode {
            PosMode::Relative => base + d_model * d_model + 2 * d_model,
            _ => base,
        }
    }

    /// `x (B, L, D)` to `(y (B, L, D), attention (B, H, L, L))`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let xs = g.value(x).shape.clone();
        if xs.len() != 3 || xs[2] != self.d_model {
            return Err(Error::Shape(format!(
                "attention expects (B, L, {}), got {xs:?}",
                self.d_model
            )));
        }
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        let (h, dh) = (self.n_heads, d / self.n_heads);

        let xin = if self.mode == PosMode::FixedSincos {
            let positions: Vec<f64> = (0..l).map(|p| p as f64).collect();
            let pe = g.constant(sinusoid_table(&positions, d));
            g.add(x, pe)?
        } else {
            x
        };

        let project = |g: &mut Graph, w: ParamId, bias: ParamId| -> Result<Var> {
            let (wv, bv) = (g.param(store, w), g.param(store, bias));
            let y = g.linear(xin, wv, Some(bv))?;
            g.reshape(y, &[b, l, h, dh])
        };
        let q = project(g, self.wq, self.bq)?;
        let k = project(g, self.wk, self.bk)?;
        let v = project(g, self.wv, self.bv)?;
        let heads = |g: &mut Graph, t: Var| g.permute(t, &[0, 2, 1, 3]);
        let kh = heads(g, k)?;
        let vh = heads(g, v)?;

        let scores = if let Some(rel) = &self.rel {
            let u = g.param(store, rel.u);
            let vb = g.param(store, rel.v);
            let qu = g.add(q, u)?;
            let qu = heads(g, qu)?;
            let qv = g.add(q, vb)?;
            let qv = heads(g, qv)?;
            let content = g.bmm(qu, kh, true)?;

            let table = g.constant(sinusoid_table(&relative_positions(l), d));
            let wp = g.param(store, rel.w_pos);
            let r = g.linear(table, wp, None)?;
            let r = g.reshape(r, &[2 * l - 1, h, dh])?;
            let r = g.permute(r, &[1, 0, 2])?;
            let r = g.expand_leading(r, b);
            let pos = g.bmm(qv, r, true)?;
            let pos = g.rel_gather(pos)?;
            g.add(content, pos)?
        } else {
            let qh = heads(g, q)?;
            g.bmm(qh, kh, true)?
        };
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scores);
        let ctx = g.bmm(attn, vh, false)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, l, d])?;
        let (wo, bo) = (g.param(store, self.wo), g.param(store, self.bo));
        let y = g.linear(ctx, wo, Some(bo))?;
        Ok((y, attn))
    }
}
