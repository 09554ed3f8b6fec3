use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::encodings::{Activation, EncodingSpec, Variant};
use crate::error::{Error, Result};

/// Architecture and training hyperparameters of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "d::dim")]
    pub dim: usize,
    #[serde(default = "d::ff_hidden")]
    pub ff_hidden: usize,
    #[serde(default = "d::blocks")]
    pub blocks: usize,
    #[serde(default = "d::heads")]
    pub heads: usize,
    #[serde(default = "d::dropout")]
    pub dropout: f64,
    #[serde(default = "d::max_len")]
    pub max_len: usize,
    #[serde(default = "d::activation")]
    pub activation: Activation,
    #[serde(default = "d::leaky_slope")]
    pub leaky_slope: f64,
    #[serde(default = "d::encoding")]
    pub encoding: EncodingSpec,
    #[serde(default = "d::lr")]
    pub lr: f64,
    /// Per-row norm bound on the embedding and encoding tables; `None` disables it.
    #[serde(default, with = "nmax_serde")]
    pub nmax: Option<f64>,
    /// Weight of an L2 penalty added to every gradient.
    #[serde(default)]
    pub l2: f64,
    #[serde(default = "d::epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub extra_epochs: usize,
    #[serde(default = "d::batch_size")]
    pub batch_size: usize,
    #[serde(default = "d::seed")]
    pub seed: u64,
    #[serde(default = "d::eval_negatives")]
    pub eval_negatives: usize,
    /// Rank against every item instead of sampled negatives.
    #[serde(default)]
    pub full_ranking: bool,
}

mod d {
    use super::*;

    pub fn dim() -> usize {
        64
    }
    pub fn ff_hidden() -> usize {
        256
    }
    pub fn blocks() -> usize {
        3
    }
    pub fn heads() -> usize {
        1
    }
    pub fn dropout() -> f64 {
        0.2
    }
    pub fn max_len() -> usize {
        50
    }
    pub fn activation() -> Activation {
        Activation::Leaky
    }
    pub fn leaky_slope() -> f64 {
        0.01
    }
    pub fn encoding() -> EncodingSpec {
        EncodingSpec::new(Variant::None)
    }
    pub fn lr() -> f64 {
        1e-3
    }
    pub fn epochs() -> usize {
        200
    }
    pub fn batch_size() -> usize {
        128
    }
    pub fn seed() -> u64 {
        42
    }
    pub fn eval_negatives() -> usize {
        100
    }
}

/// `nmax` is written as a number or as `"none"`; NaN and 0 also mean no bound.
mod nmax_serde {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("none"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Number(x) => Ok(super::parse_nmax_value(x)),
            Raw::Text(t) => super::parse_nmax(&t).map_err(serde::de::Error::custom),
        }
    }
}

fn parse_nmax_value(x: f64) -> Option<f64> {
    (!x.is_nan() && x != 0.0).then_some(x)
}

/// Parse an nmax flag value: a float, or `none` / `nan` / `0` for no bound.
pub fn parse_nmax(s: &str) -> Result<Option<f64>> {
    match s.trim().to_ascii_lowercase().as_str() {
        "none" | "nan" => Ok(None),
        t => match t.parse::<f64>() {
            Ok(x) if x.is_nan() || (x >= 0.0 && x.is_finite()) => Ok(parse_nmax_value(x)),
            _ => Err(Error::config(format!("nmax must be a non-negative number or 'none', got '{s}'"))),
        },
    }
}

/// Text used for nmax in result tables.
pub fn format_nmax(nmax: Option<f64>) -> String {
    match nmax {
        Some(x) => format!("{x:.4}"),
        None => "NaN".into(),
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: d::dim(),
            ff_hidden: d::ff_hidden(),
            blocks: d::blocks(),
            heads: d::heads(),
            dropout: d::dropout(),
            max_len: d::max_len(),
            activation: d::activation(),
            leaky_slope: d::leaky_slope(),
            encoding: d::encoding(),
            lr: d::lr(),
            nmax: None,
            l2: 0.0,
            epochs: d::epochs(),
            extra_epochs: 0,
            batch_size: d::batch_size(),
            seed: d::seed(),
            eval_negatives: d::eval_negatives(),
            full_ranking: false,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs + self.extra_epochs
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.ff_hidden == 0 || self.blocks == 0 || self.batch_size == 0 {
            return Err(Error::config("dim, ff_hidden, blocks and batch_size must be positive"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "heads ({}) must divide dim ({})",
                self.heads, self.dim
            )));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len must be at least 2"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate must be finite and >= 0, got {}", self.lr)));
        }
        if let Some(n) = self.nmax {
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::config(format!("nmax must be positive or none, got {n}")));
            }
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::config("l2 must be >= 0"));
        }
        if self.eval_negatives == 0 && !self.full_ranking {
            return Err(Error::config("eval_negatives must be positive"));
        }
        self.encoding.validate(self.dim, self.head_dim())
    }

    /// Short human-readable identity used in diagnostics.
    pub fn label(&self) -> String {
        format!(
            "{}/{}/nmax={}/seed={}",
            self.activation,
            self.encoding.variant,
            format_nmax(self.nmax),
            self.seed
        )
    }

    /// Shipped per-dataset hyperparameters.
    pub fn preset(name: &str) -> Result<Self> {
        let base = ModelConfig {
            blocks: 3,
            ..ModelConfig::default()
        };
        let cfg = match name.to_ascii_lowercase().as_str() {
            "men" => ModelConfig {
                lr: 6e-6,
                max_len: 35,
                heads: 3,
                dropout: 0.3,
                nmax: Some(1e-4),
                dim: 390,
                ff_hidden: 1950,
                ..base
            },
            "fashion" => ModelConfig {
                lr: 1e-5,
                max_len: 35,
                heads: 3,
                dropout: 0.3,
                nmax: Some(1e-4),
                dim: 390,
                ff_hidden: 1950,
                ..base
            },
            "games" => ModelConfig {
                lr: 1e-4,
                max_len: 50,
                heads: 3,
                dropout: 0.5,
                nmax: None,
                dim: 90,
                ff_hidden: 450,
                ..base
            },
            "beauty" => ModelConfig {
                lr: 1e-4,
                max_len: 75,
                heads: 1,
                dropout: 0.5,
                nmax: Some(1e-4),
                dim: 90,
                ff_hidden: 450,
                ..base
            },
            _ => {
                return Err(Error::config(format!(
                    "unknown preset '{name}'; valid: men, fashion, games, beauty"
                )))
            }
        };
        Ok(cfg)
    }

    pub const PRESETS: [&'static str; 4] = ["men", "fashion", "games", "beauty"];
}
