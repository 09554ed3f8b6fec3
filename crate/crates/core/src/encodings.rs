//! Positional encodings.
//!
//! Every variant plugs into the model through one of two hooks:
//!
//! * a vector hook that turns the item embeddings `x[B, n, d]` into
//!   position-aware embeddings before the first block (`Abs`, `Learnt`,
//!   `Rotatory` and their `Con` forms);
//! * an attention hook used inside the blocks (`RMHA4` relative tables,
//!   `RoPE` rotation of queries and keys, `RopeOne` in block 0 only).
//!
//! `Con` variants concatenate the position vector (width `d`) to the item
//! embedding and project `[x | PE]` back to `d` with a learned linear map
//! followed by the model activation.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// Frequency base shared by the sinusoidal and rotatory tables.
pub const FREQ_BASE: f64 = 10000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    None,
    Abs,
    AbsCon,
    Learnt,
    LearntCon,
    Rotatory,
    RotatoryCon,
    #[serde(rename = "RMHA4")]
    Rmha4,
    #[serde(rename = "RoPE")]
    Rope,
    RopeOne,
}

impl Variant {
    pub const ALL: [Variant; 10] = [
        Variant::None,
        Variant::Abs,
        Variant::AbsCon,
        Variant::Learnt,
        Variant::LearntCon,
        Variant::Rotatory,
        Variant::RotatoryCon,
        Variant::Rmha4,
        Variant::Rope,
        Variant::RopeOne,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "None",
            Variant::Abs => "Abs",
            Variant::AbsCon => "AbsCon",
            Variant::Learnt => "Learnt",
            Variant::LearntCon => "LearntCon",
            Variant::Rotatory => "Rotatory",
            Variant::RotatoryCon => "RotatoryCon",
            Variant::Rmha4 => "RMHA4",
            Variant::Rope => "RoPE",
            Variant::RopeOne => "RopeOne",
        }
    }

    /// Applied to the input embeddings (or `None`, which is a no-op there).
    pub fn is_vector(self) -> bool {
        matches!(
            self,
            Variant::None
                | Variant::Abs
                | Variant::AbsCon
                | Variant::Learnt
                | Variant::LearntCon
                | Variant::Rotatory
                | Variant::RotatoryCon
        )
    }

    pub fn is_concat(self) -> bool {
        matches!(self, Variant::AbsCon | Variant::LearntCon | Variant::RotatoryCon)
    }

    pub fn is_rotary(self) -> bool {
        matches!(self, Variant::Rope | Variant::RopeOne)
    }

    pub fn has_learnable_params(self) -> bool {
        !matches!(self, Variant::None | Variant::Abs | Variant::Rope | Variant::RopeOne)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        // also accept table spellings such as "Rotatory+Con" or "RMHA-4"
        let key = |t: &str| t.replace(['+', '-', '_'], "").to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| key(v.name()) == key(s))
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::config(format!(
                    "unknown encoding '{s}'; valid variants: {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Leaky,
    Silu,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var, leaky_slope: f64) -> Result<Var> {
        match self {
            Activation::Leaky => g.leaky_relu(x, leaky_slope),
            Activation::Silu => g.silu(x),
            Activation::Identity => Ok(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Leaky => "leaky",
            Activation::Silu => "silu",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leaky" => Ok(Activation::Leaky),
            "silu" => Ok(Activation::Silu),
            "identity" => Ok(Activation::Identity),
            _ => Err(Error::config(format!("unknown activation '{s}'; valid: leaky, silu, identity"))),
        }
    }
}

fn default_clip() -> usize {
    4
}

fn default_rope_base() -> f64 {
    FREQ_BASE
}

fn default_true() -> bool {
    true
}

fn default_angle_init() -> [f64; 2] {
    [0.0, 1.0]
}

/// Which encoding a model uses plus the variant-specific knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncodingSpec {
    pub variant: Variant,
    /// Relative distance bound for `RMHA4`.
    #[serde(default = "default_clip")]
    pub clip_distance: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    /// Use the value-side relative table `a^V` in `RMHA4`.
    #[serde(default = "default_true")]
    pub value_bias: bool,
    /// Uniform range for the initial rotatory angle table.
    #[serde(default = "default_angle_init")]
    pub angle_init: [f64; 2],
}

impl EncodingSpec {
    pub fn new(variant: Variant) -> Self {
        EncodingSpec {
            variant,
            clip_distance: default_clip(),
            rope_base: default_rope_base(),
            value_bias: true,
            angle_init: default_angle_init(),
        }
    }

    pub fn validate(&self, model_dim: usize, head_dim: usize) -> Result<()> {
        if model_dim % 2 != 0 {
            return Err(Error::config(format!("model dimension {model_dim} must be even")));
        }
        if self.clip_distance < 1 {
            return Err(Error::config("clip_distance must be at least 1"));
        }
        if self.variant.is_rotary() && head_dim % 2 != 0 {
            return Err(Error::config(format!(
                "{} needs an even head dimension, got {head_dim}",
                self.variant
            )));
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::config("rope_base must be positive"));
        }
        if !(self.angle_init[0] <= self.angle_init[1]) {
            return Err(Error::config("angle_init must be an ordered range"));
        }
        Ok(())
    }
}

/// Fixed sinusoidal table `[L, d]`:
/// `(pos, 2i) = sin(pos / 10000^(2i/d))`, `(pos, 2i+1) = cos(...)`.
pub fn sinusoidal_table(max_len: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(Error::config(format!("sinusoidal table needs an even dimension, got {dim}")));
    }
    let mut t = Tensor::zeros(&[max_len, dim]);
    for pos in 0..max_len {
        let row = t.row_mut(pos);
        for i in 0..dim / 2 {
            let angle = pos as f64 / FREQ_BASE.powf(2.0 * i as f64 / dim as f64);
            row[2 * i] = angle.sin();
            row[2 * i + 1] = angle.cos();
        }
    }
    Ok(t)
}

/// Rotatory table `[L, 2H]` from the learnable angle table `e_pos[L, H]`:
/// `θ = e_pos[pos,i] / 10000^(2i/d) · 2π`, `(pos, 2i) = (-1)^i sin θ`,
/// `(pos, 2i+1) = cos θ`. Differentiable with respect to `e_pos`.
pub fn rotatory_table(g: &mut Graph, e_pos: Var) -> Result<Var> {
    let shape = g.shape(e_pos).to_vec();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "rotatory_table",
            lhs: shape,
            rhs: vec![],
        });
    }
    if g.value(e_pos).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "rotatory_table" });
    }
    let h = shape[1];
    let d = 2 * h;
    let freq = Tensor::from_fn(&[h], |i| 2.0 * PI / FREQ_BASE.powf(2.0 * i as f64 / d as f64));
    let sign = Tensor::from_fn(&[h], |i| if i % 2 == 0 { 1.0 } else { -1.0 });
    let freq = g.constant(freq);
    let sign = g.constant(sign);
    let theta = g.mul(e_pos, freq)?;
    let s = g.sin(theta)?;
    let s = g.mul(s, sign)?;
    let c = g.cos(theta)?;
    g.interleave(s, c)
}

/// Plain-value version of [`rotatory_table`].
pub fn rotatory_values(e_pos: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(e_pos.clone());
    let t = rotatory_table(&mut g, v)?;
    Ok(g.tensor(t))
}

/// How a position table is merged into the item embeddings.
#[derive(Clone, Copy, Debug)]
pub enum Integration {
    Add,
    /// `activation([x | PE] · weight + bias)` with `weight[2d, d]`.
    Concat {
        weight: Var,
        bias: Var,
        activation: Activation,
        leaky_slope: f64,
    },
}

/// Merge `pe[L, d]` into `x[B, n, d]` using rows `0..n` of the table.
pub fn integrate(g: &mut Graph, x: Var, pe: Var, integration: Integration) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ps = g.shape(pe).to_vec();
    if xs.len() != 3 || ps.len() != 2 || xs[2] != ps[1] {
        return Err(Error::Shape {
            op: "integrate",
            lhs: xs,
            rhs: ps,
        });
    }
    let n = xs[1];
    if n > ps[0] {
        return Err(Error::SequenceTooLong { len: n, max_len: ps[0] });
    }
    let pe = if n == ps[0] {
        pe
    } else {
        let rows: Vec<usize> = (0..n).collect();
        g.gather(pe, &rows)?
    };
    match integration {
        Integration::Add => g.add(x, pe),
        Integration::Concat {
            weight,
            bias,
            activation,
            leaky_slope,
        } => {
            let pe = g.broadcast_to(pe, &xs)?;
            let joint = g.concat(x, pe)?;
            let proj = g.matmul(joint, weight)?;
            let proj = g.add(proj, bias)?;
            activation.apply(g, proj, leaky_slope)
        }
    }
}

/// Rotate every pair `(x_2i, x_2i+1)` at sequence position `m` by
/// `m / base^(2i/d_h)`. `x` is `[.., L, d_h]`; position is the second-to-last axis.
///
/// Computed as `x ∘ cos + swap(x) ∘ sin` with `swap(a, b) = (-b, a)`.
pub fn rope_rotate(g: &mut Graph, x: Var, base: f64) -> Result<Var> {
    let (cos, sin) = rope_tables(g.shape(x), base)?;
    let cos = g.constant(cos);
    let sin = g.constant(sin);
    let direct = g.mul(x, cos)?;
    let swapped = g.pair_swap(x)?;
    let cross = g.mul(swapped, sin)?;
    g.add(direct, cross)
}

/// The same rotation applied to a single vector `x[d_h]` placed at
/// `position`, which may be negative.
pub fn rope_rotate_at(x: &[f64], position: f64, base: f64) -> Vec<f64> {
    let dh = x.len();
    let mut out = vec![0.0; dh];
    for i in 0..dh / 2 {
        let theta = position / base.powf(2.0 * i as f64 / dh as f64);
        let (s, c) = theta.sin_cos();
        out[2 * i] = x[2 * i] * c - x[2 * i + 1] * s;
        out[2 * i + 1] = x[2 * i] * s + x[2 * i + 1] * c;
    }
    out
}

fn rope_tables(shape: &[usize], base: f64) -> Result<(Tensor, Tensor)> {
    if shape.len() < 2 || shape[shape.len() - 1] % 2 != 0 {
        return Err(Error::Shape {
            op: "rope_rotate",
            lhs: shape.to_vec(),
            rhs: vec![2],
        });
    }
    let (len, dh) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut cos = Tensor::zeros(&[len, dh]);
    let mut sin = Tensor::zeros(&[len, dh]);
    for m in 0..len {
        for i in 0..dh / 2 {
            let theta = m as f64 / base.powf(2.0 * i as f64 / dh as f64);
            let (s, c) = theta.sin_cos();
            cos.row_mut(m)[2 * i] = c;
            cos.row_mut(m)[2 * i + 1] = c;
            sin.row_mut(m)[2 * i] = s;
            sin.row_mut(m)[2 * i + 1] = s;
        }
    }
    Ok((cos, sin))
}

/// Row of the relative tables used for query `i` and key `j`.
pub fn relative_index(i: usize, j: usize, clip: usize) -> usize {
    let off = j as i64 - i as i64;
    (off.clamp(-(clip as i64), clip as i64) + clip as i64) as usize
}

/// Flattened `[L*L]` table-row indices for all `(i, j)` pairs.
pub fn relative_index_grid(len: usize, clip: usize) -> Vec<usize> {
    (0..len)
        .flat_map(|i| (0..len).map(move |j| relative_index(i, j, clip)))
        .collect()
}

/// Learnable relative tables `a^K`, `a^V`, each `[(2·clip+1), d_h]`,
/// shared by every block of a model.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelativeTables {
    pub key: ParamId,
    pub value: Option<ParamId>,
    pub clip: usize,
}

pub fn relative_bias_tables(
    clip: usize,
    head_dim: usize,
    value_bias: bool,
    store: &mut ParamStore,
    rng: &mut Rng,
) -> Result<RelativeTables> {
    if clip < 1 {
        return Err(Error::config("clip_distance must be at least 1"));
    }
    let rows = 2 * clip + 1;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let key = store.add(
        "enc.relative_key",
        Tensor::from_fn(&[rows, head_dim], |_| scale * rng.normal()),
    );
    let value = value_bias.then(|| {
        store.add(
            "enc.relative_value",
            Tensor::from_fn(&[rows, head_dim], |_| scale * rng.normal()),
        )
    });
    Ok(RelativeTables { key, value, clip })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConcatProjection {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

/// The learnable (and fixed) state of one model's positional encoding.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PositionalEncoding {
    pub spec: EncodingSpec,
    pub max_len: usize,
    pub model_dim: usize,
    pub leaky_slope: f64,
    /// `[L, d]`, `Learnt` variants.
    pub position_table: Option<ParamId>,
    /// `E_pos[L, d/2]`, `Rotatory` variants.
    pub angle_table: Option<ParamId>,
    pub concat: Option<ConcatProjection>,
    pub relative: Option<RelativeTables>,
}

impl PositionalEncoding {
    pub fn new(
        spec: EncodingSpec,
        max_len: usize,
        model_dim: usize,
        head_dim: usize,
        activation: Activation,
        leaky_slope: f64,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate(model_dim, head_dim)?;
        let d = model_dim;
        let mut enc = PositionalEncoding {
            spec: spec.clone(),
            max_len,
            model_dim,
            leaky_slope,
            position_table: None,
            angle_table: None,
            concat: None,
            relative: None,
        };
        match spec.variant {
            Variant::Learnt | Variant::LearntCon => {
                let s = 1.0 / (d as f64).sqrt();
                enc.position_table = Some(store.add(
                    "enc.position_table",
                    Tensor::from_fn(&[max_len, d], |_| s * rng.normal()),
                ));
            }
            Variant::Rotatory | Variant::RotatoryCon => {
                let [lo, hi] = spec.angle_init;
                enc.angle_table = Some(store.add(
                    "enc.angle_table",
                    Tensor::from_fn(&[max_len, d / 2], |_| rng.uniform_in(lo, hi)),
                ));
            }
            Variant::Rmha4 => {
                enc.relative = Some(relative_bias_tables(
                    spec.clip_distance,
                    head_dim,
                    spec.value_bias,
                    store,
                    rng,
                )?);
            }
            _ => {}
        }
        if spec.variant.is_concat() {
            let limit = (6.0 / (3 * d) as f64).sqrt();
            let weight = store.add(
                "enc.concat_weight",
                Tensor::from_fn(&[2 * d, d], |_| rng.uniform_in(-limit, limit)),
            );
            let bias = store.add("enc.concat_bias", Tensor::zeros(&[d]));
            enc.concat = Some(ConcatProjection {
                weight,
                bias,
                activation,
            });
        }
        Ok(enc)
    }

    /// Tables subject to the per-row norm bound.
    pub fn bounded_tables(&self) -> Vec<ParamId> {
        self.position_table.into_iter().chain(self.angle_table).collect()
    }

    /// The `[L, d]` position-vector table of a vector variant.
    pub fn vector_table<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        trainable: bool,
    ) -> Result<Option<Var>> {
        Ok(match self.spec.variant {
            Variant::Abs | Variant::AbsCon => {
                Some(g.constant(sinusoidal_table(self.max_len, self.model_dim)?))
            }
            Variant::Learnt | Variant::LearntCon => {
                Some(g.bind(store, self.position_table.expect("learnt table"), trainable))
            }
            Variant::Rotatory | Variant::RotatoryCon => {
                let e = g.bind(store, self.angle_table.expect("angle table"), trainable);
                Some(rotatory_table(g, e)?)
            }
            _ => None,
        })
    }

    /// Vector hook: `x[B, n, d]` -> position-aware `[B, n, d]`.
    pub fn apply_vector<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        trainable: bool,
        x: Var,
    ) -> Result<Var> {
        let variant = self.spec.variant;
        if !variant.is_vector() {
            return Err(Error::config(format!(
                "{variant} is applied inside attention, not as a vector encoding"
            )));
        }
        let n = g.shape(x).get(1).copied().unwrap_or(0);
        if n > self.max_len {
            return Err(Error::SequenceTooLong { len: n, max_len: self.max_len });
        }
        let Some(pe) = self.vector_table(g, store, trainable)? else {
            return Ok(x);
        };
        let integration = match &self.concat {
            Some(c) => Integration::Concat {
                weight: g.bind(store, c.weight, trainable),
                bias: g.bind(store, c.bias, trainable),
                activation: c.activation,
                leaky_slope: self.leaky_slope,
            },
            None => Integration::Add,
        };
        integrate(g, x, pe, integration)
    }

    /// Whether queries and keys of block `block_index` are rotated.
    pub fn rotates_block(&self, block_index: usize) -> bool {
        match self.spec.variant {
            Variant::Rope => true,
            Variant::RopeOne => block_index == 0,
            _ => false,
        }
    }
}
