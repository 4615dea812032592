//! Differentiable operations recorded on a [`Graph`].
//!
//! Layouts: sequences are `(batch, length, channels)`; the 1D convolution
//! used by the classifier head is `(batch, channels, time)`.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Is `b` a trailing-suffix shape of `a`?
fn is_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

/// Sum `g` over its leading copies of a block of `block` values.
fn sum_leading(g: &Tensor, shape: &[usize]) -> Tensor {
    let block: usize = shape.iter().product();
    let mut out = vec![0.0; block];
    for chunk in g.data.chunks(block) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data: out,
    }
}

/// Decompose a shape around `axis` into (outer, axis size, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    /// `x (..., in) @ w (in, out) + b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape.clone();
        let ws = self.value(w).shape.clone();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return shape_err(format!("linear: input {xs:?} with weight {ws:?}"));
        }
        let (din, dout) = (ws[0], ws[1]);
        let rows = self.value(x).len() / din;
        let mut y = vec![0.0; rows * dout];
        gemm(
            rows,
            din,
            dout,
            &self.value(x).data,
            (din, 1),
            &self.value(w).data,
            (dout, 1),
            0.0,
            &mut y,
            (dout, 1),
        );
        let mut parents = vec![x, w];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape != [dout] {
                return shape_err(format!("linear: bias {:?} for {dout} outputs", bv.shape));
            }
            for row in y.chunks_mut(dout) {
                for (o, bb) in row.iter_mut().zip(&bv.data) {
                    *o += bb;
                }
            }
            parents.push(b);
        }
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = dout;
        let has_bias = b.is_some();
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: y,
            },
            &parents,
            Box::new(move |gy, p, _| {
                let (x, w) = (p[0], p[1]);
                let mut gx = Tensor::zeros(&x.shape);
                gemm(rows, dout, din, &gy.data, (dout, 1), &w.data, (1, dout), 0.0, &mut gx.data, (din, 1));
                let mut gw = Tensor::zeros(&w.shape);
                gemm(din, rows, dout, &x.data, (1, din), &gy.data, (dout, 1), 0.0, &mut gw.data, (dout, 1));
                let mut out = vec![gx, gw];
                if has_bias {
                    out.push(sum_leading(gy, &[dout]));
                }
                out
            }),
        ))
    }

    /// Batched matrix product over matching leading axes:
    /// `a (.., m, k) @ b (.., k, p)`, or `a @ b^T` for `b (.., p, k)`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape.clone(), self.value(b).shape.clone());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return shape_err(format!("bmm: {sa:?} with {sb:?}"));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, p) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return shape_err(format!("bmm: inner sizes {k} and {kb}"));
        }
        let n: usize = sa[..r - 2].iter().product();
        let b_strides = if trans_b { (1, k) } else { (p, 1) };
        let mut y = vec![0.0; n * m * p];
        {
            let (av, bv) = (&self.value(a).data, &self.value(b).data);
            for i in 0..n {
                gemm(
                    m,
                    k,
                    p,
                    &av[i * m * k..],
                    (k, 1),
                    &bv[i * k * p..],
                    b_strides,
                    0.0,
                    &mut y[i * m * p..],
                    (p, 1),
                );
            }
        }
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend([m, p]);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: y,
            },
            &[a, b],
            Box::new(move |gy, pv, _| {
                let (av, bv) = (pv[0], pv[1]);
                let mut ga = Tensor::zeros(&av.shape);
                let mut gb = Tensor::zeros(&bv.shape);
                // Strides of b^T viewed as (p x k).
                let bt = if trans_b { (k, 1) } else { (1, p) };
                for i in 0..n {
                    let g = &gy.data[i * m * p..];
                    gemm(m, p, k, g, (p, 1), &bv.data[i * k * p..], bt, 0.0, &mut ga.data[i * m * k..], (k, 1));
                    if trans_b {
                        gemm(p, m, k, g, (1, p), &av.data[i * m * k..], (k, 1), 0.0, &mut gb.data[i * k * p..], (k, 1));
                    } else {
                        gemm(k, m, p, &av.data[i * m * k..], (1, k), g, (p, 1), 0.0, &mut gb.data[i * k * p..], (p, 1));
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    /// Elementwise sum; `b` may have a suffix shape of `a` and is then
    /// broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape.clone(), self.value(b).shape.clone());
        if !is_suffix(&sa, &sb) {
            return shape_err(format!("add: {sa:?} and {sb:?}"));
        }
        let block = self.value(b).len().max(1);
        let mut y = self.value(a).clone();
        for chunk in y.data.chunks_mut(block) {
            for (o, v) in chunk.iter_mut().zip(&self.value(b).data) {
                *o += v;
            }
        }
        Ok(self.push(
            y,
            &[a, b],
            Box::new(move |gy, _, _| vec![gy.clone(), sum_leading(gy, &sb)]),
        ))
    }

    /// Elementwise product with the same suffix broadcasting as [`add`](Self::add).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape.clone(), self.value(b).shape.clone());
        if !is_suffix(&sa, &sb) {
            return shape_err(format!("mul: {sa:?} and {sb:?}"));
        }
        let block = self.value(b).len().max(1);
        let mut y = self.value(a).clone();
        for chunk in y.data.chunks_mut(block) {
            for (o, v) in chunk.iter_mut().zip(&self.value(b).data) {
                *o *= v;
            }
        }
        Ok(self.push(
            y,
            &[a, b],
            Box::new(move |gy, p, _| {
                let (av, bv) = (p[0], p[1]);
                let mut ga = gy.clone();
                let mut gb = Tensor::zeros(&bv.shape);
                for (g, x) in ga.data.chunks_mut(block).zip(av.data.chunks(block)) {
                    for j in 0..g.len() {
                        gb.data[j] += g[j] * x[j];
                        g[j] *= bv.data[j];
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).map(|v| v * s);
        self.push(y, &[a], Box::new(move |gy, _, _| vec![gy.map(|g| g * s)]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(
            y,
            &[x],
            Box::new(|gy, _, y| vec![gy.zip_map(y, |g, s| g * s * (1.0 - s))]),
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v * sigmoid(v));
        self.push(
            y,
            &[x],
            Box::new(|gy, p, _| {
                vec![gy.zip_map(p[0], |g, v| {
                    let s = sigmoid(v);
                    g * s * (1.0 + v * (1.0 - s))
                })]
            }),
        )
    }

    /// Gated linear unit over the last axis: first half times the sigmoid
    /// of the second half.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape.clone();
        let c2 = *xs.last().unwrap_or(&0);
        if c2 == 0 || !c2.is_multiple_of(2) {
            return shape_err(format!("glu: last axis must be even, got {xs:?}"));
        }
        let c = c2 / 2;
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = c;
        let data = self
            .value(x)
            .data
            .chunks(c2)
            .flat_map(|row| (0..c).map(move |j| row[j] * sigmoid(row[c + j])))
            .collect();
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data,
            },
            &[x],
            Box::new(move |gy, p, _| {
                let mut gx = Tensor::zeros(&p[0].shape);
                for ((gr, xr), g) in gx.data.chunks_mut(c2).zip(p[0].data.chunks(c2)).zip(gy.data.chunks(c)) {
                    for j in 0..c {
                        let s = sigmoid(xr[c + j]);
                        gr[j] = g[j] * s;
                        gr[c + j] = g[j] * xr[j] * s * (1.0 - s);
                    }
                }
                vec![gx]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = self.value(x).last_dim();
        let mut y = self.value(x).clone();
        for row in y.data.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(
            y,
            &[x],
            Box::new(move |gy, _, y| {
                let mut gx = gy.clone();
                for (g, yr) in gx.data.chunks_mut(d).zip(y.data.chunks(d)) {
                    let dot: f64 = g.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gi, yi) in g.iter_mut().zip(yr) {
                        *gi = yi * (*gi - dot);
                    }
                }
                vec![gx]
            }),
        )
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).shape != [d] || self.value(beta).shape != [d] {
            return shape_err(format!("layer_norm: affine shape for {d} channels"));
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut xhat = xv.clone();
        let mut inv_std = vec![0.0; rows];
        for (r, row) in xhat.data.chunks_mut(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
        }
        let (g, b) = (self.value(gamma).data.clone(), self.value(beta).data.clone());
        let mut y = xhat.clone();
        for row in y.data.chunks_mut(d) {
            for j in 0..d {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        Ok(self.push(
            y,
            &[x, gamma, beta],
            Box::new(move |gy, p, _| {
                let gamma = &p[1].data;
                let mut gx = Tensor::zeros(&p[0].shape);
                let mut gg = Tensor::zeros(&[d]);
                let mut gb = Tensor::zeros(&[d]);
                for r in 0..rows {
                    let gr = &gy.data[r * d..(r + 1) * d];
                    let xr = &xhat.data[r * d..(r + 1) * d];
                    let mut mean_g = 0.0;
                    let mut mean_gx = 0.0;
                    for j in 0..d {
                        let gh = gr[j] * gamma[j];
                        mean_g += gh;
                        mean_gx += gh * xr[j];
                        gg.data[j] += gr[j] * xr[j];
                        gb.data[j] += gr[j];
                    }
                    mean_g /= d as f64;
                    mean_gx /= d as f64;
                    for j in 0..d {
                        gx.data[r * d + j] =
                            inv_std[r] * (gr[j] * gamma[j] - mean_g - xr[j] * mean_gx);
                    }
                }
                vec![gx, gg, gb]
            }),
        ))
    }

    /// Batch normalisation over every axis but the last.
    ///
    /// In training mode batch statistics are used and running statistics
    /// are updated (recorded on the graph; see
    /// [`take_buffer_updates`](Graph::take_buffer_updates)). In evaluation
    /// mode the running statistics are used.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        store: &ParamStore,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let c = self.value(x).last_dim();
        if store.get(gamma).shape != [c] || store.get(running_mean).shape != [c] {
            return shape_err(format!("batch_norm: parameter shape for {c} channels"));
        }
        let gv = self.param(store, gamma);
        let bv = self.param(store, beta);
        let xv = self.value(x);
        let rows = xv.len() / c;
        let (mean, var) = if self.training() {
            let mut mean = vec![0.0; c];
            for row in xv.data.chunks(c) {
                for j in 0..c {
                    mean[j] += row[j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; c];
            for row in xv.data.chunks(c) {
                for j in 0..c {
                    var[j] += (row[j] - mean[j]).powi(2);
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            let unbiased = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
            let rm = store.get(running_mean);
            let rv = store.get(running_var);
            let new_m = Tensor {
                shape: vec![c],
                data: (0..c).map(|j| (1.0 - momentum) * rm.data[j] + momentum * mean[j]).collect(),
            };
            let new_v = Tensor {
                shape: vec![c],
                data: (0..c)
                    .map(|j| (1.0 - momentum) * rv.data[j] + momentum * var[j] * unbiased)
                    .collect(),
            };
            self.buffer_updates.push((running_mean, new_m));
            self.buffer_updates.push((running_var, new_v));
            (mean, var)
        } else {
            (store.get(running_mean).data.clone(), store.get(running_var).data.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let mut xhat = xv.clone();
        for row in xhat.data.chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let (g, b) = (store.get(gamma).data.clone(), store.get(beta).data.clone());
        let mut y = xhat.clone();
        for row in y.data.chunks_mut(c) {
            for j in 0..c {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let batch_stats = self.training();
        Ok(self.push(
            y,
            &[x, gv, bv],
            Box::new(move |gy, p, _| {
                let gamma = &p[1].data;
                let mut gg = Tensor::zeros(&[c]);
                let mut gb = Tensor::zeros(&[c]);
                for (gr, xr) in gy.data.chunks(c).zip(xhat.data.chunks(c)) {
                    for j in 0..c {
                        gg.data[j] += gr[j] * xr[j];
                        gb.data[j] += gr[j];
                    }
                }
                let mut gx = Tensor::zeros(&p[0].shape);
                let n = rows as f64;
                for (r, (gr, xr)) in gy.data.chunks(c).zip(xhat.data.chunks(c)).enumerate() {
                    for j in 0..c {
                        let gh = gr[j] * gamma[j];
                        gx.data[r * c + j] = if batch_stats {
                            inv_std[j] * (gh - gb.data[j] * gamma[j] / n - xr[j] * gg.data[j] * gamma[j] / n)
                        } else {
                            inv_std[j] * gh
                        };
                    }
                }
                vec![gx, gg, gb]
            }),
        ))
    }

    /// Inverted dropout; identity outside training or for `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        if !self.training() || p == 0.0 {
            return Ok(x);
        }
        self.stochastic = true;
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mut y = self.value(x).clone();
        for (v, m) in y.data.iter_mut().zip(&mask) {
            *v *= m;
        }
        Ok(self.push(
            y,
            &[x],
            Box::new(move |gy, _, _| {
                let mut g = gy.clone();
                for (v, m) in g.data.iter_mut().zip(&mask) {
                    *v *= m;
                }
                vec![g]
            }),
        ))
    }

    /// Depthwise convolution along the length axis of `x (B, L, C)` with
    /// `w (C, K)` (odd `K`, zero "same" padding) and bias `b (C)`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape.clone();
        let ws = self.value(w).shape.clone();
        if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[2] || self.value(b).shape != [xs[2]] {
            return shape_err(format!("depthwise_conv1d: input {xs:?}, kernel {ws:?}"));
        }
        let k = ws[1];
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("depthwise kernel must be odd, got {k}")));
        }
        let (bn, l, c) = (xs[0], xs[1], xs[2]);
        let h = k / 2;
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        let mut y = vec![0.0; bn * l * c];
        for bi in 0..bn {
            for t in 0..l {
                let out = &mut y[(bi * l + t) * c..(bi * l + t + 1) * c];
                out.copy_from_slice(bv);
                for kk in 0..k {
                    let src = t as isize + kk as isize - h as isize;
                    if src < 0 || src >= l as isize {
                        continue;
                    }
                    let xr = &xv[(bi * l + src as usize) * c..][..c];
                    for ch in 0..c {
                        out[ch] += wv[ch * k + kk] * xr[ch];
                    }
                }
            }
        }
        Ok(self.push(
            Tensor { shape: xs, data: y },
            &[x, w, b],
            Box::new(move |gy, p, _| {
                let (xv, wv) = (&p[0].data, &p[1].data);
                let mut gx = Tensor::zeros(&p[0].shape);
                let mut gw = Tensor::zeros(&p[1].shape);
                let mut gb = Tensor::zeros(&[c]);
                for bi in 0..bn {
                    for t in 0..l {
                        let g = &gy.data[(bi * l + t) * c..][..c];
                        for (acc, v) in gb.data.iter_mut().zip(g) {
                            *acc += v;
                        }
                        for kk in 0..k {
                            let src = t as isize + kk as isize - h as isize;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            let off = (bi * l + src as usize) * c;
                            for ch in 0..c {
                                gx.data[off + ch] += g[ch] * wv[ch * k + kk];
                                gw.data[ch * k + kk] += g[ch] * xv[off + ch];
                            }
                        }
                    }
                }
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Full 1D convolution of `x (B, Cin, T)` with `w (Cout, Cin, K)` (odd
    /// `K`, zero "same" padding) and bias `b (Cout)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape.clone();
        let ws = self.value(w).shape.clone();
        if xs.len() != 3 || ws.len() != 3 || ws[1] != xs[1] || self.value(b).shape != [ws[0]] {
            return shape_err(format!("conv1d: input {xs:?}, kernel {ws:?}"));
        }
        let (bn, cin, t) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if k.is_multiple_of(2) {
            return Err(Error::Config(format!("conv kernel must be odd, got {k}")));
        }
        let h = k / 2;
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        let mut y = vec![0.0; bn * cout * t];
        for bi in 0..bn {
            for o in 0..cout {
                let out = &mut y[(bi * cout + o) * t..][..t];
                out.iter_mut().for_each(|v| *v = bv[o]);
                for i in 0..cin {
                    let xr = &xv[(bi * cin + i) * t..][..t];
                    for kk in 0..k {
                        let wk = wv[(o * cin + i) * k + kk];
                        for (tt, ov) in out.iter_mut().enumerate() {
                            let src = tt as isize + kk as isize - h as isize;
                            if src >= 0 && src < t as isize {
                                *ov += wk * xr[src as usize];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![bn, cout, t],
                data: y,
            },
            &[x, w, b],
            Box::new(move |gy, p, _| {
                let (xv, wv) = (&p[0].data, &p[1].data);
                let mut gx = Tensor::zeros(&p[0].shape);
                let mut gw = Tensor::zeros(&p[1].shape);
                let mut gb = Tensor::zeros(&[cout]);
                for bi in 0..bn {
                    for o in 0..cout {
                        let g = &gy.data[(bi * cout + o) * t..][..t];
                        gb.data[o] += g.iter().sum::<f64>();
                        for i in 0..cin {
                            let xoff = (bi * cin + i) * t;
                            for kk in 0..k {
                                let widx = (o * cin + i) * k + kk;
                                let wk = wv[widx];
                                let mut acc = 0.0;
                                for (tt, gv) in g.iter().enumerate() {
                                    let src = tt as isize + kk as isize - h as isize;
                                    if src >= 0 && src < t as isize {
                                        let s = xoff + src as usize;
                                        gx.data[s] += gv * wk;
                                        acc += gv * xv[s];
                                    }
                                }
                                gw.data[widx] += acc;
                            }
                        }
                    }
                }
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Average pooling over the last axis of `x (B, C, T)`.
    pub fn avg_pool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.value(x).shape.clone();
        if xs.len() != 3 || kernel == 0 || stride == 0 || xs[2] < kernel {
            return shape_err(format!("avg_pool1d: input {xs:?}, kernel {kernel}"));
        }
        let (rows, t) = (xs[0] * xs[1], xs[2]);
        let tout = (t - kernel) / stride + 1;
        let inv = 1.0 / kernel as f64;
        let xv = &self.value(x).data;
        let mut y = vec![0.0; rows * tout];
        for r in 0..rows {
            for j in 0..tout {
                y[r * tout + j] = xv[r * t + j * stride..][..kernel].iter().sum::<f64>() * inv;
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![xs[0], xs[1], tout],
                data: y,
            },
            &[x],
            Box::new(move |gy, p, _| {
                let mut gx = Tensor::zeros(&p[0].shape);
                for r in 0..rows {
                    for j in 0..tout {
                        let g = gy.data[r * tout + j] * inv;
                        for v in &mut gx.data[r * t + j * stride..][..kernel] {
                            *v += g;
                        }
                    }
                }
                vec![gx]
            }),
        ))
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.value(x).shape.clone();
        if axis >= xs.len() {
            return shape_err(format!("mean_axis: axis {axis} of {xs:?}"));
        }
        let (outer, n, inner) = split_axis(&xs, axis);
        let xv = &self.value(x).data;
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                for i in 0..inner {
                    y[o * inner + i] += xv[(o * n + a) * inner + i];
                }
            }
        }
        let inv = 1.0 / n as f64;
        y.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = xs.clone();
        out_shape.remove(axis);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: y,
            },
            &[x],
            Box::new(move |gy, p, _| {
                let mut gx = Tensor::zeros(&p[0].shape);
                for o in 0..outer {
                    for a in 0..n {
                        for i in 0..inner {
                            gx.data[(o * n + a) * inner + i] = gy.data[o * inner + i] * inv;
                        }
                    }
                }
                vec![gx]
            }),
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let shape = self.value(x).shape.clone();
        self.push(
            Tensor::scalar(s),
            &[x],
            Box::new(move |gy, _, _| vec![Tensor::full(&shape, gy.item())]),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.value(x).shape.clone();
        let y = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(
            y,
            &[x],
            Box::new(move |gy, _, _| vec![Tensor { shape: from.clone(), data: gy.data.clone() }]),
        ))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.value(x).shape.clone();
        let r = xs.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return shape_err(format!("permute: {perm:?} for rank {r}"));
        }
        let y = permute_data(self.value(x), perm);
        let mut inverse = vec![0; r];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        Ok(self.push(
            y,
            &[x],
            Box::new(move |gy, _, _| vec![permute_data(gy, &inverse)]),
        ))
    }

    /// Relative-to-absolute index gather for attention scores.
    ///
    /// `x (.., L, 2L-1)` holds, for query `i`, one score per relative
    /// distance `d = i - j` in column `d + L - 1`; the output `(.., L, L)`
    /// puts the score for key `j` in column `j`.
    pub fn rel_gather(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape.clone();
        let r = xs.len();
        if r < 2 || xs[r - 1] != 2 * xs[r - 2] - 1 {
            return shape_err(format!("rel_gather: expected (.., L, 2L-1), got {xs:?}"));
        }
        let l = xs[r - 2];
        let w = 2 * l - 1;
        let n: usize = xs[..r - 2].iter().product();
        let xv = &self.value(x).data;
        let mut y = vec![0.0; n * l * l];
        for b in 0..n {
            for i in 0..l {
                for j in 0..l {
                    y[(b * l + i) * l + j] = xv[(b * l + i) * w + i + l - 1 - j];
                }
            }
        }
        let mut out_shape = xs.clone();
        out_shape[r - 1] = l;
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: y,
            },
            &[x],
            Box::new(move |gy, p, _| {
                let mut gx = Tensor::zeros(&p[0].shape);
                for b in 0..n {
                    for i in 0..l {
                        for j in 0..l {
                            gx.data[(b * l + i) * w + i + l - 1 - j] += gy.data[(b * l + i) * l + j];
                        }
                    }
                }
                vec![gx]
            }),
        ))
    }

    /// Repeat `x` `n` times along a new leading axis.
    pub fn expand_leading(&mut self, x: Var, n: usize) -> Var {
        let xs = self.value(x).shape.clone();
        let mut shape = vec![n];
        shape.extend(&xs);
        let data = self.value(x).data.repeat(n);
        self.push(
            Tensor { shape, data },
            &[x],
            Box::new(move |gy, _, _| vec![sum_leading(gy, &xs)]),
        )
    }

    /// Prepend one token `tok (D)` to every sequence of `x (B, L, D)`.
    pub fn prepend_token(&mut self, x: Var, tok: Var) -> Result<Var> {
        let xs = self.value(x).shape.clone();
        if xs.len() != 3 || self.value(tok).shape != [xs[2]] {
            return shape_err(format!("prepend_token: sequence {xs:?}"));
        }
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        let mut data = Vec::with_capacity(b * (l + 1) * d);
        for seq in self.value(x).data.chunks(l * d) {
            data.extend_from_slice(&self.value(tok).data);
            data.extend_from_slice(seq);
        }
        Ok(self.push(
            Tensor {
                shape: vec![b, l + 1, d],
                data,
            },
            &[x, tok],
            Box::new(move |gy, _, _| {
                let mut gx = Vec::with_capacity(b * l * d);
                let mut gt = vec![0.0; d];
                for seq in gy.data.chunks((l + 1) * d) {
                    for (a, v) in gt.iter_mut().zip(&seq[..d]) {
                        *a += v;
                    }
                    gx.extend_from_slice(&seq[d..]);
                }
                vec![
                    Tensor { shape: vec![b, l, d], data: gx },
                    Tensor { shape: vec![d], data: gt },
                ]
            }),
        ))
    }

    /// Pick position `idx` along axis 1 of `x (B, L, D)`, giving `(B, D)`.
    pub fn select_position(&mut self, x: Var, idx: usize) -> Result<Var> {
        let xs = self.value(x).shape.clone();
        if xs.len() != 3 || idx >= xs[1] {
            return shape_err(format!("select_position: {idx} of {xs:?}"));
        }
        let (b, l, d) = (xs[0], xs[1], xs[2]);
        let data = (0..b)
            .flat_map(|bi| self.value(x).data[(bi * l + idx) * d..][..d].to_vec())
            .collect();
        Ok(self.push(
            Tensor { shape: vec![b, d], data },
            &[x],
            Box::new(move |gy, p, _| {
                let mut gx = Tensor::zeros(&p[0].shape);
                for bi in 0..b {
                    gx.data[(bi * l + idx) * d..][..d].copy_from_slice(&gy.data[bi * d..][..d]);
                }
                vec![gx]
            }),
        ))
    }

    /// Mean cross-entropy of `logits (B, C)` against class indices with
    /// label smoothing `eps` (target `1 - eps + eps/C` on the true class,
    /// `eps/C` elsewhere).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let ls = self.value(logits).shape.clone();
        if ls.len() != 2 || ls[0] != targets.len() {
            return shape_err(format!("cross_entropy: logits {ls:?} for {} targets", targets.len()));
        }
        let (b, c) = (ls[0], ls[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Data(format!("target class {t} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).clone();
        let mut loss = 0.0;
        let mut q = vec![0.0; b * c];
        for (r, row) in probs.data.chunks_mut(c).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (j, v) in row.iter_mut().enumerate() {
                let logp = *v - lse;
                let qj = eps / c as f64 + if j == targets[r] { 1.0 - eps } else { 0.0 };
                q[r * c + j] = qj;
                loss -= qj * logp;
                *v = logp.exp();
            }
        }
        loss /= b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |gy, _, _| {
                let s = gy.item() / b as f64;
                vec![Tensor {
                    shape: vec![b, c],
                    data: probs.data.iter().zip(&q).map(|(p, q)| (p - q) * s).collect(),
                }]
            }),
        ))
    }
}

fn permute_data(x: &Tensor, perm: &[usize]) -> Tensor {
    let r = x.shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let mut in_strides = vec![1; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * x.shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(x.data[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor {
        shape: out_shape,
        data,
    }
}
