use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::attention::{transformer_block, AttentionMask, BlockConfig, BlockContext, BlockParams, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::metrics::Scorer;
use crate::numeric::{Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::encodings::PositionalEncoding;

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Model-side item id of the padding slot; dataset item `i` is `i + 1`.
pub const PAD: usize = 0;

/// One left-padded training row. Ids are model-side (`PAD` = 0).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRow {
    pub inputs: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    /// `true` at padded positions.
    pub padding: Vec<bool>,
}

/// Inputs are `history[..n-1]`, positives `history[1..]`, negatives drawn
/// uniformly from items outside `exclude`; the most recent `max_len`
/// positions are kept and the row is left-padded. `None` when the history
/// has fewer than 2 items.
pub fn build_sequence(
    history: &[usize],
    max_len: usize,
    exclude: &HashSet<usize>,
    num_items: usize,
    rng: &mut Rng,
) -> Option<SequenceRow> {
    if history.len() < 2 {
        return None;
    }
    let n = (history.len() - 1).min(max_len);
    let start = history.len() - 1 - n;
    let pad = max_len - n;
    let mut row = SequenceRow {
        inputs: vec![PAD; max_len],
        positives: vec![PAD; max_len],
        negatives: vec![PAD; max_len],
        padding: vec![true; max_len],
    };
    for k in 0..n {
        let t = start + k;
        row.inputs[pad + k] = history[t] + 1;
        row.positives[pad + k] = history[t + 1] + 1;
        row.negatives[pad + k] = loop {
            let i = rng.below(num_items);
            if !exclude.contains(&i) {
                break i + 1;
            }
        };
        row.padding[pad + k] = false;
    }
    Some(row)
}

/// Left-pad (or keep the most recent `max_len` of) a context, model-side ids.
pub fn left_pad(context: &[usize], max_len: usize) -> (Vec<usize>, Vec<bool>) {
    let n = context.len().min(max_len);
    let mut ids = vec![PAD; max_len - n];
    let mut padding = vec![true; max_len - n];
    ids.extend(context[context.len() - n..].iter().map(|i| i + 1));
    padding.extend(std::iter::repeat(false).take(n));
    (ids, padding)
}

/// `sigmoid(<hidden_t, target_t>)` per position; `[.., d]` -> `[..]`.
pub fn score(g: &mut Graph, hidden: Var, target: Var) -> Result<Var> {
    let prod = g.mul(hidden, target)?;
    let dot = g.sum_last(prod)?;
    g.sigmoid(dot)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    /// Divide by the number of unpadded positions.
    Mean,
}

/// `-Σ_valid [ln ŷ_pos + ln(1 - ŷ_neg)]` with probabilities clamped to
/// `[ε, 1 - ε]`. `valid` flags the positions that count.
pub fn bce_loss(g: &mut Graph, y_pos: Var, y_neg: Var, valid: &[bool], reduction: Reduction) -> Result<Var> {
    let shape = g.shape(y_pos).to_vec();
    if g.shape(y_neg) != shape.as_slice() || valid.len() != g.value(y_pos).len() {
        return Err(Error::Shape {
            op: "bce_loss",
            lhs: shape,
            rhs: g.shape(y_neg).to_vec(),
        });
    }
    let weights = g.constant(Tensor::new(shape, valid.iter().map(|&v| f64::from(u8::from(v))).collect())?);
    let p = g.clamp(y_pos, PROB_EPS, 1.0 - PROB_EPS)?;
    let lp = g.ln(p)?;
    let q = g.scale(y_neg, -1.0)?;
    let q = g.add_scalar(q, 1.0)?;
    let q = g.clamp(q, PROB_EPS, 1.0 - PROB_EPS)?;
    let lq = g.ln(q)?;
    let both = g.add(lp, lq)?;
    let masked = g.mul(both, weights)?;
    let total = g.sum(masked)?;
    let count = valid.iter().filter(|&&v| v).count();
    let factor = match reduction {
        Reduction::Sum => -1.0,
        Reduction::Mean => -1.0 / count.max(1) as f64,
    };
    g.scale(total, factor)
}

/// Rescale every row of each listed table whose Euclidean norm exceeds
/// `nmax` to norm exactly `nmax`. Tables are viewed as `[rows, last axis]`.
pub fn apply_max_norm(store: &mut ParamStore, tables: &[ParamId], nmax: Option<f64>) -> Result<()> {
    let Some(nmax) = nmax else { return Ok(()) };
    if !(nmax > 0.0) {
        return Err(Error::config(format!("nmax must be positive, got {nmax}")));
    }
    for &id in tables {
        let t = store.value_mut(id);
        let width = t.shape().last().copied().unwrap_or(1).max(1);
        for row in t.data_mut().chunks_mut(width) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > nmax {
                let s = nmax / norm;
                row.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributeFusion {
    /// `[num_items + 1, A]`; row 0 (padding) is zero.
    pub table: Tensor,
    /// `[d + A, d]`
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Transformer next-item recommender scoring targets by dot product with
/// the final hidden state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub num_items: usize,
    pub store: ParamStore,
    /// `[num_items + 1, d]`, row 0 is padding.
    pub item_table: ParamId,
    pub attributes: Option<AttributeFusion>,
    pub encoding: PositionalEncoding,
    pub blocks: Vec<(BlockConfig, BlockParams)>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
}

/// Padded id matrix `[B, L]` with its padding flags.
pub struct Inputs<'a> {
    pub ids: &'a [usize],
    pub padding: &'a [bool],
    pub batch: usize,
}

impl Model {
    /// `attributes` is `[num_items, A]` over dataset item ids.
    pub fn new(config: ModelConfig, num_items: usize, attributes: Option<&Tensor>, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if num_items == 0 {
            return Err(Error::EmptyDataset(": no items".into()));
        }
        let d = config.dim;
        let mut store = ParamStore::new();
        let s = 1.0 / (d as f64).sqrt();
        let mut table = Tensor::from_fn(&[num_items + 1, d], |_| s * rng.normal());
        table.row_mut(PAD).fill(0.0);
        let item_table = store.add("item_table", table);

        let attributes = match attributes {
            Some(a) => {
                if a.shape().len() != 2 || a.shape()[0] != num_items {
                    return Err(Error::Shape {
                        op: "attributes",
                        lhs: a.shape().to_vec(),
                        rhs: vec![num_items],
                    });
                }
                let width = a.shape()[1];
                let mut padded = Tensor::zeros(&[num_items + 1, width]);
                padded.data_mut()[width..].copy_from_slice(a.data());
                let limit = (6.0 / (2 * d + width) as f64).sqrt();
                let weight = store.add(
                    "attr.weight",
                    Tensor::from_fn(&[d + width, d], |_| rng.uniform_in(-limit, limit)),
                );
                let bias = store.add("attr.bias", Tensor::zeros(&[d]));
                Some(AttributeFusion { table: padded, weight, bias })
            }
            None => None,
        };

        let encoding = PositionalEncoding::new(
            config.encoding.clone(),
            config.max_len,
            d,
            config.head_dim(),
            config.activation,
            config.leaky_slope,
            &mut store,
            rng,
        )?;
        let blocks = (0..config.blocks)
            .map(|b| {
                let cfg = BlockConfig {
                    model_dim: d,
                    heads: config.heads,
                    ff_hidden: config.ff_hidden,
                    dropout: config.dropout,
                    activation: config.activation,
                    leaky_slope: config.leaky_slope,
                    causal: true,
                    block_index: b,
                };
                let params = BlockParams::init(&cfg, &mut store, rng);
                (cfg, params)
            })
            .collect();
        let final_gain = store.add("final_ln_gain", Tensor::full(&[d], 1.0));
        let final_bias = store.add("final_ln_bias", Tensor::zeros(&[d]));
        Ok(Model {
            config,
            num_items,
            store,
            item_table,
            attributes,
            encoding,
            blocks,
            final_gain,
            final_bias,
        })
    }

    /// Tables kept within the nmax bound.
    pub fn bounded_tables(&self) -> Vec<ParamId> {
        let mut t = vec![self.item_table];
        t.extend(self.encoding.bounded_tables());
        t
    }

    /// Item vectors `[n, d]` for model-side ids.
    pub fn embed<'p>(&'p self, g: &mut Graph<'p>, ids: &[usize], trainable: bool) -> Result<Var> {
        let table = g.bind(&self.store, self.item_table, trainable);
        let e = g.gather(table, ids)?;
        let Some(fusion) = &self.attributes else { return Ok(e) };
        let width = fusion.table.shape()[1];
        let mut attrs = Tensor::zeros(&[ids.len(), width]);
        for (r, &i) in ids.iter().enumerate() {
            attrs.row_mut(r).copy_from_slice(fusion.table.row(i));
        }
        let attrs = g.constant(attrs);
        let joint = g.concat(e, attrs)?;
        let w = g.bind(&self.store, fusion.weight, trainable);
        let b = g.bind(&self.store, fusion.bias, trainable);
        let y = g.matmul(joint, w)?;
        g.add(y, b)
    }

    /// Final hidden states `[B, L, d]`.
    pub fn hidden<'p>(
        &'p self,
        g: &mut Graph<'p>,
        inputs: &Inputs,
        trainable: bool,
        mut rng: Option<&mut Rng>,
    ) -> Result<Var> {
        let (b, l, d) = (inputs.batch, self.config.max_len, self.config.dim);
        if inputs.ids.len() != b * l || inputs.padding.len() != b * l {
            return Err(Error::Shape {
                op: "hidden",
                lhs: vec![inputs.ids.len()],
                rhs: vec![b, l],
            });
        }
        let keep = g.constant(Tensor::new(
            vec![b, l, 1],
            inputs.padding.iter().map(|&p| if p { 0.0 } else { 1.0 }).collect(),
        )?);
        let x = self.embed(g, inputs.ids, trainable)?;
        let x = g.reshape(x, &[b, l, d])?;
        let mut x = g.mul(x, keep)?;
        if self.encoding.spec.variant.is_vector() {
            x = self.encoding.apply_vector(g, &self.store, trainable, x)?;
            x = g.mul(x, keep)?;
        }
        x = g.dropout(x, self.config.dropout, rng.as_deref_mut())?;
        let mask = AttentionMask::new(inputs.padding, b, l, true);
        let ctx = BlockContext {
            store: &self.store,
            trainable,
            encoding: &self.encoding,
            mask: &mask,
        };
        for (cfg, params) in &self.blocks {
            x = transformer_block(g, x, cfg, params, &ctx, rng.as_deref_mut())?;
        }
        let gain = g.bind(&self.store, self.final_gain, trainable);
        let bias = g.bind(&self.store, self.final_bias, trainable);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }

    /// Mean BCE loss of a batch of training rows.
    pub fn batch_loss<'p>(&'p self, g: &mut Graph<'p>, rows: &[SequenceRow], rng: Option<&mut Rng>) -> Result<Var> {
        let (b, l, d) = (rows.len(), self.config.max_len, self.config.dim);
        let cat = |f: fn(&SequenceRow) -> &Vec<usize>| -> Vec<usize> { rows.iter().flat_map(|r| f(r).iter().copied()).collect() };
        let ids = cat(|r| &r.inputs);
        let padding: Vec<bool> = rows.iter().flat_map(|r| r.padding.iter().copied()).collect();
        let h = self.hidden(g, &Inputs { ids: &ids, padding: &padding, batch: b }, true, rng)?;
        let pos = self.embed(g, &cat(|r| &r.positives), true)?;
        let pos = g.reshape(pos, &[b, l, d])?;
        let neg = self.embed(g, &cat(|r| &r.negatives), true)?;
        let neg = g.reshape(neg, &[b, l, d])?;
        let yp = score(g, h, pos)?;
        let yn = score(g, h, neg)?;
        let valid: Vec<bool> = padding.iter().map(|p| !p).collect();
        bce_loss(g, yp, yn, &valid, Reduction::Mean)
    }

    /// Hidden state after the last context item, one row per context.
    pub fn context_states(&self, contexts: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let l = self.config.max_len;
        let mut ids = Vec::with_capacity(contexts.len() * l);
        let mut padding = Vec::with_capacity(contexts.len() * l);
        for c in contexts {
            let (i, p) = left_pad(c, l);
            ids.extend(i);
            padding.extend(p);
        }
        let mut g = Graph::new();
        let h = self.hidden(&mut g, &Inputs { ids: &ids, padding: &padding, batch: contexts.len() }, false, None)?;
        let d = self.config.dim;
        let values = g.value(h);
        Ok((0..contexts.len())
            .map(|b| values[(b * l + l - 1) * d..(b * l + l) * d].to_vec())
            .collect())
    }

    /// Item vectors for every dataset item, `[num_items, d]` (row `i` is item `i`).
    pub fn item_vectors(&self) -> Result<Tensor> {
        let mut g = Graph::new();
        let ids: Vec<usize> = (1..=self.num_items).collect();
        let e = self.embed(&mut g, &ids, false)?;
        Ok(g.tensor(e))
    }
}

impl Scorer for Model {
    fn score(&self, contexts: &[&[usize]], candidates: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let states = self.context_states(contexts)?;
        let items = self.item_vectors()?;
        Ok(states
            .iter()
            .zip(candidates)
            .map(|(h, cands)| {
                cands
                    .iter()
                    .map(|&c| h.iter().zip(items.row(c)).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect())
    }
}
