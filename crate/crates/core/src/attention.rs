//! Multi-head self-attention and pre-layer-norm transformer blocks.
//!
//! Block wiring (pre-norm):
//!
//! ```text
//! x = x + Dropout(Attention(LN1(x)))
//! x = x + Dropout(W2 · act(W1 · LN2(x) + b1) + b2)
//! ```
//!
//! Attention logits are scaled by `1/sqrt(d_h)` per head. Masked entries are
//! excluded from the softmax; a query whose keys are all masked attends to
//! nothing and yields a zero vector.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::encodings::{relative_index_grid, rope_rotate, Activation, PositionalEncoding};
use crate::error::{Error, Result};
use crate::numeric::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub leaky_slope: f64,
    pub causal: bool,
    pub block_index: usize,
}

impl BlockConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "heads ({}) must divide the model dimension ({})",
                self.heads, self.model_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if self.ff_hidden == 0 {
            return Err(Error::config("ff_hidden must be positive"));
        }
        Ok(())
    }
}

/// Which (query, key) pairs are excluded, `[B, L, L]`, `true` = masked.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    pub batch: usize,
    pub len: usize,
    masked: Vec<bool>,
}

impl AttentionMask {
    /// Key `j` is masked for query `i` when it is padding, or when `j > i`
    /// and `causal` is set. `padding` is `[B, L]`.
    pub fn new(padding: &[bool], batch: usize, len: usize, causal: bool) -> Self {
        assert_eq!(padding.len(), batch * len);
        let mut masked = Vec::with_capacity(batch * len * len);
        for b in 0..batch {
            for i in 0..len {
                for j in 0..len {
                    masked.push(padding[b * len + j] || (causal && j > i));
                }
            }
        }
        AttentionMask { batch, len, masked }
    }

    pub fn unmasked(batch: usize, len: usize) -> Self {
        AttentionMask {
            batch,
            len,
            masked: vec![false; batch * len * len],
        }
    }

    pub fn is_masked(&self, b: usize, i: usize, j: usize) -> bool {
        self.masked[(b * self.len + i) * self.len + j]
    }

    /// Repeat over `heads` to the `[B, h, L, L]` layout of attention logits.
    pub fn expand(&self, heads: usize) -> Rc<Vec<bool>> {
        let ll = self.len * self.len;
        let mut out = Vec::with_capacity(self.batch * heads * ll);
        for b in 0..self.batch {
            for _ in 0..heads {
                out.extend_from_slice(&self.masked[b * ll..(b + 1) * ll]);
            }
        }
        Rc::new(out)
    }
}

fn check_qkv(g: &Graph, q: Var, k: Var, v: Var) -> Result<()> {
    let qs = g.shape(q);
    if qs.len() != 4 || g.shape(k) != qs || g.shape(v) != qs {
        return Err(Error::Shape {
            op: "attention",
            lhs: qs.to_vec(),
            rhs: g.shape(k).to_vec(),
        });
    }
    Ok(())
}

/// `softmax_j(Q_i·K_j / sqrt(d_h))` weighted sum of `V_j`. `q, k, v` are
/// `[B, h, L, d_h]`; `mask` is the expanded `[B, h, L, L]` mask.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: &Rc<Vec<bool>>,
) -> Result<Var> {
    check_qkv(g, q, k, v)?;
    let dh = g.shape(q)[3];
    let logits = g.bmm(q, k, true)?;
    let logits = g.scale(logits, 1.0 / (dh as f64).sqrt())?;
    let logits = g.mask_fill(logits, mask.clone())?;
    let weights = g.softmax(logits)?;
    g.bmm(weights, v, false)
}

/// `[B, h, L, X]` -> `[L, B·h, X]`
fn positions_first(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[2, 0, 1, 3])?;
    g.reshape(p, &[s[2], s[0] * s[1], s[3]])
}

/// `[L, B·h, X]` -> `[B, h, L, X]`
fn positions_back(g: &mut Graph, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], batch, heads, s[2]])?;
    g.permute(r, &[1, 2, 0, 3])
}

/// Relative attention with clipped offsets:
/// `α_ij = softmax_j(Q_i·(K_j + a^K_ij) / sqrt(d_h))`,
/// `out_i = Σ_j α_ij (V_j + a^V_ij)`, where `a_ij` is row
/// `clamp(j - i, -clip, clip) + clip` of the `[2·clip+1, d_h]` tables.
pub fn relative_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    a_key: Var,
    a_value: Option<Var>,
    clip: usize,
    mask: &Rc<Vec<bool>>,
) -> Result<Var> {
    check_qkv(g, q, k, v)?;
    let [b, h, len, dh] = <[usize; 4]>::try_from(g.shape(q)).expect("rank checked");
    let grid = relative_index_grid(len, clip);

    let rel_k = g.gather(a_key, &grid)?;
    let rel_k = g.reshape(rel_k, &[len, len, dh])?;
    let content = g.bmm(q, k, true)?;
    let q_pos = positions_first(g, q)?;
    let positional = g.bmm(q_pos, rel_k, true)?;
    let positional = positions_back(g, positional, b, h)?;
    let logits = g.add(content, positional)?;
    let logits = g.scale(logits, 1.0 / (dh as f64).sqrt())?;
    let logits = g.mask_fill(logits, mask.clone())?;
    let weights = g.softmax(logits)?;
    let out = g.bmm(weights, v, false)?;

    let Some(a_value) = a_value else { return Ok(out) };
    let rel_v = g.gather(a_value, &grid)?;
    let rel_v = g.reshape(rel_v, &[len, len, dh])?;
    let w_pos = positions_first(g, weights)?;
    let extra = g.bmm(w_pos, rel_v, false)?;
    let extra = positions_back(g, extra, b, h)?;
    g.add(out, extra)
}

/// Parameter ids of one transformer block.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

fn xavier(store: &mut ParamStore, name: String, fan_in: usize, fan_out: usize, rng: &mut Rng) -> ParamId {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    store.add(name, Tensor::from_fn(&[fan_in, fan_out], |_| rng.uniform_in(-limit, limit)))
}

impl BlockParams {
    pub fn init(cfg: &BlockConfig, store: &mut ParamStore, rng: &mut Rng) -> Self {
        let (d, f) = (cfg.model_dim, cfg.ff_hidden);
        let pre = format!("block{}", cfg.block_index);
        let vec_param = |store: &mut ParamStore, name: &str, n: usize, v: f64| {
            store.add(format!("{pre}.{name}"), Tensor::full(&[n], v))
        };
        let ln1_gain = vec_param(store, "ln1_gain", d, 1.0);
        let ln1_bias = vec_param(store, "ln1_bias", d, 0.0);
        let wq = xavier(store, format!("{pre}.wq"), d, d, rng);
        let bq = vec_param(store, "bq", d, 0.0);
        let wk = xavier(store, format!("{pre}.wk"), d, d, rng);
        let bk = vec_param(store, "bk", d, 0.0);
        let wv = xavier(store, format!("{pre}.wv"), d, d, rng);
        let bv = vec_param(store, "bv", d, 0.0);
        let wo = xavier(store, format!("{pre}.wo"), d, d, rng);
        let bo = vec_param(store, "bo", d, 0.0);
        let ln2_gain = vec_param(store, "ln2_gain", d, 1.0);
        let ln2_bias = vec_param(store, "ln2_bias", d, 0.0);
        let w1 = xavier(store, format!("{pre}.w1"), d, f, rng);
        let b1 = vec_param(store, "b1", f, 0.0);
        let w2 = xavier(store, format!("{pre}.w2"), f, d, rng);
        let b2 = vec_param(store, "b2", d, 0.0);
        BlockParams {
            ln1_gain,
            ln1_bias,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_gain,
            ln2_bias,
            w1,
            b1,
            w2,
            b2,
        }
    }
}

/// Everything a block needs besides its input.
pub struct BlockContext<'a, 'p> {
    pub store: &'p ParamStore,
    pub trainable: bool,
    pub encoding: &'a PositionalEncoding,
    pub mask: &'a AttentionMask,
}

fn linear<'p>(g: &mut Graph<'p>, ctx: &BlockContext<'_, 'p>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = g.bind(ctx.store, w, ctx.trainable);
    let b = g.bind(ctx.store, b, ctx.trainable);
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// `[B, L, d]` -> `[B, h, L, d_h]`
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, &[s[0], s[2], s[1] * s[3]])
}

/// Multi-head attention sublayer on already-normalized input `h[B, L, d]`.
pub fn attention_sublayer<'p>(
    g: &mut Graph<'p>,
    h: Var,
    cfg: &BlockConfig,
    params: &BlockParams,
    ctx: &BlockContext<'_, 'p>,
) -> Result<Var> {
    let heads = cfg.heads;
    let q = linear(g, ctx, h, params.wq, params.bq)?;
    let k = linear(g, ctx, h, params.wk, params.bk)?;
    let v = linear(g, ctx, h, params.wv, params.bv)?;
    let mut q = split_heads(g, q, heads)?;
    let mut k = split_heads(g, k, heads)?;
    let v = split_heads(g, v, heads)?;
    let enc = ctx.encoding;
    if enc.rotates_block(cfg.block_index) {
        q = rope_rotate(g, q, enc.spec.rope_base)?;
        k = rope_rotate(g, k, enc.spec.rope_base)?;
    }
    let mask = ctx.mask.expand(heads);
    let out = match &enc.relative {
        Some(rel) => {
            let a_key = g.bind(ctx.store, rel.key, ctx.trainable);
            let a_value = rel.value.map(|id| g.bind(ctx.store, id, ctx.trainable));
            relative_attention(g, q, k, v, a_key, a_value, rel.clip, &mask)?
        }
        None => scaled_dot_attention(g, q, k, v, &mask)?,
    };
    let out = merge_heads(g, out)?;
    linear(g, ctx, out, params.wo, params.bo)
}

/// One pre-norm transformer block, `x[B, L, d]` -> `[B, L, d]`.
pub fn transformer_block<'p>(
    g: &mut Graph<'p>,
    x: Var,
    cfg: &BlockConfig,
    params: &BlockParams,
    ctx: &BlockContext<'_, 'p>,
    mut rng: Option<&mut Rng>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[2] != cfg.model_dim {
        return Err(Error::Shape {
            op: "transformer_block",
            lhs: shape,
            rhs: vec![cfg.model_dim],
        });
    }
    let gain = g.bind(ctx.store, params.ln1_gain, ctx.trainable);
    let bias = g.bind(ctx.store, params.ln1_bias, ctx.trainable);
    let h = g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?;
    let attn = attention_sublayer(g, h, cfg, params, ctx)?;
    let attn = g.dropout(attn, cfg.dropout, rng.as_deref_mut())?;
    let x = g.add(x, attn)?;

    let gain = g.bind(ctx.store, params.ln2_gain, ctx.trainable);
    let bias = g.bind(ctx.store, params.ln2_bias, ctx.trainable);
    let h = g.layer_norm(x, gain, bias, LAYER_NORM_EPS)?;
    let ff = linear(g, ctx, h, params.w1, params.b1)?;
    let ff = cfg.activation.apply(g, ff, cfg.leaky_slope)?;
    let ff = linear(g, ctx, ff, params.w2, params.b2)?;
    let ff = g.dropout(ff, cfg.dropout, rng.as_deref_mut())?;
    g.add(x, ff)
}
