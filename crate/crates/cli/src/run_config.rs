//! The TOML run configuration and its command-line overrides.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use posbench::encodings::{Activation, Variant};
use posbench::model::{format_nmax, parse_nmax, ModelConfig};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "POSBENCH_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitProtocol {
    #[default]
    #[serde(rename = "leave-one-out")]
    LeaveOneOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub attributes: Option<PathBuf>,
    #[serde(default = "default_min_interactions")]
    pub min_interactions: usize,
    #[serde(default)]
    pub split: SplitProtocol,
    /// Output directory; defaults to a name under `$POSBENCH_OUT` (or `runs`).
    pub out: Option<PathBuf>,
    /// Sweep seeds. When given, single runs use the first one instead of `model.seed`.
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    /// Start `model` from a shipped preset (men, fashion, games, beauty).
    pub preset: Option<String>,
    #[serde(default)]
    pub model: ModelConfig,
}

fn default_min_interactions() -> usize {
    posbench::data::DEFAULT_MIN_INTERACTIONS
}

pub const DEFAULT_SEEDS: [u64; 5] = [42, 43, 44, 45, 46];

fn default_jobs() -> usize {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            attributes: None,
            min_interactions: default_min_interactions(),
            split: SplitProtocol::default(),
            out: None,
            seeds: None,
            jobs: default_jobs(),
            preset: None,
            model: ModelConfig::default(),
        }
    }
}

/// Overlay `top` onto `base`, recursing into tables.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().context("malformed TOML")?;
        if let Some(name) = table.get("preset") {
            let name = name.as_str().context("preset must be a string")?;
            let preset = ModelConfig::preset(name)?;
            let toml::Value::Table(mut base) = toml::Value::try_from(&preset)? else {
                unreachable!("a config serializes to a table")
            };
            if let Some(user) = table.remove("model") {
                let toml::Value::Table(user) = user else { bail!("`model` must be a table") };
                merge(&mut base, user);
            }
            table.insert("model".into(), toml::Value::Table(base));
        }
        let run: RunConfig = table.try_into()?;
        Ok(run)
    }

    pub fn sweep_seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| DEFAULT_SEEDS.to_vec())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Explicit `out`, else a name derived from the configuration under the
    /// output root.
    pub fn output_dir(&self, command: &str) -> PathBuf {
        if let Some(out) = &self.out {
            return out.clone();
        }
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        let m = &self.model;
        let mut name = format!("{command}-{}-{}-nmax{}", m.activation, m.encoding.variant, format_nmax(m.nmax));
        if command == "train" {
            name.push_str(&format!("-seed{}", m.seed));
        }
        root.join(name)
    }
}

#[derive(Args, Debug, Default)]
pub struct Overrides {
    /// Encoding variant, e.g. None, Learnt, RotatoryCon, RMHA4, RoPE.
    #[arg(long, value_parser = clap::value_parser!(Variant))]
    pub encoding: Option<Variant>,
    /// Row-norm bound on embedding tables, or `none`.
    #[arg(long)]
    pub nmax: Option<String>,
    /// leaky, silu or identity.
    #[arg(long)]
    pub activation: Option<Activation>,
    /// Comma-separated seeds; `train` takes exactly one.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Concurrent runs in a sweep.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub extra_epochs: Option<usize>,
    /// Sampled negatives per query; 0 ranks against every item.
    #[arg(long)]
    pub negatives: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(self, run: &mut RunConfig) -> Result<()> {
        let m = &mut run.model;
        if let Some(v) = self.encoding {
            m.encoding.variant = v;
        }
        if let Some(n) = self.nmax {
            m.nmax = parse_nmax(&n)?;
        }
        if let Some(a) = self.activation {
            m.activation = a;
        }
        if let Some(e) = self.epochs {
            m.epochs = e;
        }
        if let Some(e) = self.extra_epochs {
            m.extra_epochs = e;
        }
        match self.negatives {
            Some(0) => m.full_ranking = true,
            Some(n) => {
                m.full_ranking = false;
                m.eval_negatives = n;
            }
            None => {}
        }
        if let Some(s) = self.seeds {
            if s.is_empty() {
                bail!("--seeds needs at least one seed");
            }
            run.seeds = Some(s);
        }
        if let Some(first) = run.seeds.as_ref().and_then(|s| s.first()) {
            run.model.seed = *first;
        }
        if let Some(j) = self.jobs {
            if j == 0 {
                bail!("--jobs must be at least 1");
            }
            run.jobs = j;
        }
        if self.out.is_some() {
            run.out = self.out;
        }
        Ok(())
    }
}
