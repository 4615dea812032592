//! The Conformer classifier for 4 Hz HR windows.
//!
//! A window is cut into non-overlapping patches, each patch is projected
//! to `d_model` by one shared affine map, the sequence passes through
//! `n_layers` Conformer blocks, and a head produces two logits.
//!
//! Block: half-step FFN, self-attention, convolution module, half-step
//! FFN, layer norm. Each sub-module is pre-normed and residual. Without
//! half-step FFNs a single full FFN follows attention; without both the
//! block reduces to a pre-norm Transformer block.

mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{ConformerConfig, Head};

use crate::error::{Error, Result};
use crate::nn::{Graph, Mhsa, ParamId, ParamStore, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Split a window into `(L, patch)` contiguous non-overlapping patches.
pub fn patchify(values: &[f64], patch: usize) -> Result<Tensor> {
    if patch == 0 || !values.len().is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "{} samples do not divide into patches of {patch}",
            values.len()
        )));
    }
    Tensor::new(vec![values.len() / patch, patch], values.to_vec())
}

struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, bias: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        let w = store.add(&format!("{name}.w"), Tensor::uniform(&[din, dout], bound, rng), true)?;
        let b = if bias {
            Some(store.add(&format!("{name}.b"), Tensor::zeros(&[dout]), true)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(s, self.w);
        let b = self.b.map(|b| g.param(s, b));
        g.linear(x, w, b)
    }
}

struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::full(&[d], 1.0), true)?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[d]), true)?,
        })
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(s, self.gamma), g.param(s, self.beta));
        g.layer_norm(x, ga, be, LN_EPS)
    }
}

struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
    residual: f64,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, cfg: &ConformerConfig, residual: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, e) = (cfg.d_model, cfg.ffn_expansion * cfg.d_model);
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.ln"), d)?,
            up: Linear::new(store, &format!("{name}.up"), d, e, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), e, d, true, rng)?,
            residual,
        })
    }

    /// `x + residual * Drop(W2 Drop(SiLU(W1 LN(x))))`.
    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, p: f64) -> Result<Var> {
        let h = self.norm.forward(g, s, x)?;
        let h = self.up.forward(g, s, h)?;
        let h = g.silu(h);
        let h = g.dropout(h, p)?;
        let h = self.down.forward(g, s, h)?;
        let h = g.dropout(h, p)?;
        let h = g.scale(h, self.residual);
        g.add(x, h)
    }
}

struct ConvModule {
    norm: LayerNorm,
    pw1: Linear,
    dw_w: ParamId,
    dw_b: ParamId,
    bn_gamma: ParamId,
    bn_beta: ParamId,
    bn_mean: ParamId,
    bn_var: ParamId,
    pw2: Linear,
}

impl ConvModule {
    fn new(store: &mut ParamStore, name: &str, cfg: &ConformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        let inner = cfg.conv_inner();
        let k = cfg.dw_kernel;
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.ln"), d)?,
            pw1: Linear::new(store, &format!("{name}.pw1"), d, 2 * inner, true, rng)?,
            dw_w: store.add(
                &format!("{name}.dw.w"),
                Tensor::uniform(&[inner, k], 1.0 / (k as f64).sqrt(), rng),
                true,
            )?,
            dw_b: store.add(&format!("{name}.dw.b"), Tensor::zeros(&[inner]), true)?,
            bn_gamma: store.add(&format!("{name}.bn.gamma"), Tensor::full(&[inner], 1.0), true)?,
            bn_beta: store.add(&format!("{name}.bn.beta"), Tensor::zeros(&[inner]), true)?,
            bn_mean: store.add(&format!("{name}.bn.running_mean"), Tensor::zeros(&[inner]), false)?,
            bn_var: store.add(&format!("{name}.bn.running_var"), Tensor::full(&[inner], 1.0), false)?,
            pw2: Linear::new(store, &format!("{name}.pw2"), inner, d, true, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, p: f64) -> Result<Var> {
        let h = self.norm.forward(g, s, x)?;
        let h = self.pw1.forward(g, s, h)?;
        let h = g.glu(h)?;
        let (w, b) = (g.param(s, self.dw_w), g.param(s, self.dw_b));
        let h = g.depthwise_conv1d(h, w, b)?;
        let h = g.batch_norm(s, h, self.bn_gamma, self.bn_beta, self.bn_mean, self.bn_var, BN_MOMENTUM, BN_EPS)?;
        let h = g.silu(h);
        let h = self.pw2.forward(g, s, h)?;
        let h = g.dropout(h, p)?;
        g.add(x, h)
    }
}

struct Block {
    ffn1: Option<FeedForward>,
    attn_norm: LayerNorm,
    attn: Mhsa,
    ffn_full: Option<FeedForward>,
    conv: Option<ConvModule>,
    ffn2: Option<FeedForward>,
    out_norm: LayerNorm,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &ConformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let half = cfg.use_half_ffn;
        Ok(Self {
            ffn1: if half {
                Some(FeedForward::new(store, &format!("{name}.ffn1"), cfg, 0.5, rng)?)
            } else {
                None
            },
            attn_norm: LayerNorm::new(store, &format!("{name}.attn.ln"), cfg.d_model)?,
            attn: Mhsa::new(store, &format!("{name}.attn"), cfg.d_model, cfg.n_heads, cfg.pos_mode, rng)?,
            ffn_full: if half {
                None
            } else {
                Some(FeedForward::new(store, &format!("{name}.ffn"), cfg, 1.0, rng)?)
            },
            conv: if cfg.use_conv_module {
                Some(ConvModule::new(store, &format!("{name}.conv"), cfg, rng)?)
            } else {
                None
            },
            ffn2: if half {
                Some(FeedForward::new(store, &format!("{name}.ffn2"), cfg, 0.5, rng)?)
            } else {
                None
            },
            out_norm: LayerNorm::new(store, &format!("{name}.ln_out"), cfg.d_model)?,
        })
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, p: f64) -> Result<(Var, Var)> {
        let mut x = x;
        if let Some(f) = &self.ffn1 {
            x = f.forward(g, s, x, p)?;
        }
        let h = self.attn_norm.forward(g, s, x)?;
        let (h, attn) = self.attn.forward(g, s, h)?;
        let h = g.dropout(h, p)?;
        x = g.add(x, h)?;
        if let Some(f) = &self.ffn_full {
            x = f.forward(g, s, x, p)?;
        }
        if let Some(c) = &self.conv {
            x = c.forward(g, s, x, p)?;
        }
        if let Some(f) = &self.ffn2 {
            x = f.forward(g, s, x, p)?;
        }
        Ok((self.out_norm.forward(g, s, x)?, attn))
    }
}

enum HeadParams {
    Fcn {
        c1_w: ParamId,
        c1_b: ParamId,
        c2_w: ParamId,
        c2_b: ParamId,
    },
    ClassToken {
        token: ParamId,
        out: Linear,
    },
    GlobalPool {
        out: Linear,
    },
}

/// Logits plus the attention maps of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    /// `(B, 2)`.
    pub logits: Tensor,
    /// `(n_layers, B, n_heads, L', L')`.
    pub attn_maps: Tensor,
}

pub struct HrvConformer {
    pub cfg: ConformerConfig,
    embed: Linear,
    blocks: Vec<Block>,
    head: HeadParams,
}

impl HrvConformer {
    /// Register all parameters in `store`, initialised from `seed`.
    pub fn new(cfg: ConformerConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_model;
        let embed = Linear::new(store, "embed", cfg.patch_samples(), d, true, &mut rng)?;
        let head = match cfg.head {
            Head::Fcn => {
                let (l, k) = (cfg.seq_len(), cfg.fcn_kernel);
                let b1 = 1.0 / ((l * k) as f64).sqrt();
                let b2 = 1.0 / ((2 * k) as f64).sqrt();
                HeadParams::Fcn {
                    c1_w: store.add("head.conv1.w", Tensor::uniform(&[2, l, k], b1, &mut rng), true)?,
                    c1_b: store.add("head.conv1.b", Tensor::zeros(&[2]), true)?,
                    c2_w: store.add("head.conv2.w", Tensor::uniform(&[2, 2, k], b2, &mut rng), true)?,
                    c2_b: store.add("head.conv2.b", Tensor::zeros(&[2]), true)?,
                }
            }
            Head::ClassToken => HeadParams::ClassToken {
                token: store.add("head.token", Tensor::uniform(&[d], 1.0 / (d as f64).sqrt(), &mut rng), true)?,
                out: Linear::new(store, "head.out", d, 2, true, &mut rng)?,
            },
            Head::GlobalPool => HeadParams::GlobalPool {
                out: Linear::new(store, "head.out", d, 2, true, &mut rng)?,
            },
        };
        let blocks = (0..cfg.n_layers)
            .map(|i| Block::new(store, &format!("block{i}"), &cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            embed,
            blocks,
            head,
        })
    }

    /// Build a model with a fresh parameter store.
    pub fn build(cfg: ConformerConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let m = Self::new(cfg, &mut store, seed)?;
        Ok((m, store))
    }

    /// Closed-form count of trainable parameters for `cfg`.
    pub fn param_count(cfg: &ConformerConfig) -> usize {
        let d = cfg.d_model;
        let ln = 2 * d;
        let ffn = ln + d * cfg.ffn_expansion * d + cfg.ffn_expansion * d + cfg.ffn_expansion * d * d + d;
        let inner = cfg.conv_inner();
        let conv = ln + d * 2 * inner + 2 * inner + inner * cfg.dw_kernel + inner + 2 * inner + inner * d + d;
        let attn = ln + Mhsa::param_count(d, cfg.pos_mode);
        let n_ffn = if cfg.use_half_ffn { 2 } else { 1 };
        let block = n_ffn * ffn + attn + if cfg.use_conv_module { conv } else { 0 } + ln;
        let head = match cfg.head {
            Head::Fcn => 2 * cfg.seq_len() * cfg.fcn_kernel + 2 + 4 * cfg.fcn_kernel + 2,
            Head::ClassToken => d + 2 * d + 2,
            Head::GlobalPool => 2 * d + 2,
        };
        cfg.patch_samples() * d + d + cfg.n_layers * block + head
    }

    /// Record a forward pass of `x (B, window_samples)`; returns logits
    /// `(B, 2)` and one attention map `(B, H, L', L')` per layer.
    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: &Tensor) -> Result<(Var, Vec<Var>)> {
        let (h, maps) = self.encode(g, s, x)?;
        Ok((self.classify(g, s, h)?, maps))
    }

    /// Patch embedding and encoder blocks: `(B, L', D)` plus attention maps.
    pub fn encode(&self, g: &mut Graph, s: &ParamStore, x: &Tensor) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.cfg;
        if x.rank() != 2 || x.shape[1] != cfg.window_samples {
            return Err(Error::Shape(format!(
                "model expects (B, {}), got {:?}",
                cfg.window_samples, x.shape
            )));
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("model input".into()));
        }
        let b = x.shape[0];
        let patches = x.clone().reshaped(&[b, cfg.n_patches(), cfg.patch_samples()])?;
        let xin = g.constant(patches);
        let mut h = self.embed.forward(g, s, xin)?;
        if let HeadParams::ClassToken { token, .. } = &self.head {
            let t = g.param(s, *token);
            h = g.prepend_token(h, t)?;
        }
        let mut maps = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (y, a) = blk.forward(g, s, h, cfg.dropout)?;
            h = y;
            maps.push(a);
        }
        Ok((h, maps))
    }

    /// Classifier head on an encoder output `(B, L', D)`.
    pub fn classify(&self, g: &mut Graph, s: &ParamStore, h: Var) -> Result<Var> {
        let cfg = &self.cfg;
        match &self.head {
            HeadParams::Fcn { c1_w, c1_b, c2_w, c2_b } => {
                // (B, L, D) read as (batch, channels = patches, time = embedding).
                let (w1, b1) = (g.param(s, *c1_w), g.param(s, *c1_b));
                let y = g.conv1d(h, w1, b1)?;
                let (w2, b2) = (g.param(s, *c2_w), g.param(s, *c2_b));
                let y = g.conv1d(y, w2, b2)?;
                let y = g.avg_pool1d(y, cfg.fcn_pool, cfg.fcn_pool)?;
                g.mean_axis(y, 2)
            }
            HeadParams::ClassToken { out, .. } => {
                let t = g.select_position(h, 0)?;
                out.forward(g, s, t)
            }
            HeadParams::GlobalPool { out } => {
                let m = g.mean_axis(h, 1)?;
                out.forward(g, s, m)
            }
        }
    }

    /// Inference-mode forward (no dropout, running batch-norm statistics).
    pub fn infer(&self, s: &ParamStore, x: &Tensor) -> Result<ModelOutput> {
        let mut g = Graph::new(false, 0);
        let (logits, maps) = self.forward(&mut g, s, x)?;
        let first = g.value(maps[0]).shape.clone();
        let mut shape = vec![maps.len()];
        shape.extend(&first);
        let mut data = Vec::with_capacity(shape.iter().product());
        for m in &maps {
            data.extend_from_slice(&g.value(*m).data);
        }
        let logits = g.value(logits).clone();
        if !logits.all_finite() {
            return Err(Error::NonFinite("model logits".into()));
        }
        Ok(ModelOutput {
            logits,
            attn_maps: Tensor::new(shape, data)?,
        })
    }
}
