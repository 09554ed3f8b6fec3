//! Deterministic synthetic interaction logs.
//!
//! * `memorizable`: one global cycle over all items; every user walks a
//!   contiguous stretch of it, so the next item is a function of the current one.
//! * `positional`: sequences are blocks `[r, r', b, c, G(b), G(c)]` of
//!   distinct items, where `r, r', b, c` are drawn fresh for each block and
//!   `G` is a fixed global permutation. Each `G(.)` item is the image of the
//!   item right before the current one, so predicting it needs to know
//!   which earlier item sits at that offset; the set of seen items alone
//!   leaves every unpaired fresh item equally likely. Sequences always end
//!   on a complete block but start at a random point of the first one.
//! * `random`: exact user/item/row counts with no structure; row `r` belongs
//!   to user `r mod users` and item `perm[r mod items]`.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{write_interactions, InteractionDataset};
use crate::error::{Error, Result};
use crate::numeric::Rng;

/// Items per block of the positional profile.
pub const BLOCK: usize = 6;
/// Distance from a `G(x)` item back to `x`.
pub const IMAGE_LAG: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Memorizable,
    Positional,
    Random,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Memorizable => "memorizable",
            Profile::Positional => "positional",
            Profile::Random => "random",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "memorizable" => Ok(Profile::Memorizable),
            "positional" => Ok(Profile::Positional),
            "random" => Ok(Profile::Random),
            _ => Err(Error::config(format!(
                "unknown profile '{s}'; valid: memorizable, positional, random"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub profile: Profile,
    pub users: usize,
    pub items: usize,
    /// Per-user sequence length range (memorizable, positional).
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Total row count (random profile).
    #[serde(default)]
    pub rows: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

fn default_min_len() -> usize {
    8
}

fn default_max_len() -> usize {
    20
}

impl SynthSpec {
    pub fn new(profile: Profile, users: usize, items: usize, seed: u64) -> Self {
        SynthSpec {
            profile,
            users,
            items,
            min_len: default_min_len(),
            max_len: default_max_len(),
            rows: None,
            seed,
        }
    }

    pub fn with_lengths(mut self, min_len: usize, max_len: usize) -> Self {
        self.min_len = min_len;
        self.max_len = max_len;
        self
    }

    pub fn with_rows(mut self, rows: usize) -> Self {
        self.rows = Some(rows);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.users == 0 || self.items == 0 {
            return Err(Error::config("synthetic users and items must be positive"));
        }
        if self.profile != Profile::Random && !(2 <= self.min_len && self.min_len <= self.max_len) {
            return Err(Error::config(format!(
                "sequence lengths need 2 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        match self.profile {
            Profile::Memorizable if self.max_len > self.items => Err(Error::config(format!(
                "memorizable sequences of length {} would repeat items (only {} items)",
                self.max_len, self.items
            ))),
            Profile::Positional if self.min_len < 2 * BLOCK => Err(Error::config(format!(
                "positional sequences need at least {} items",
                2 * BLOCK
            ))),
            Profile::Positional if self.max_len > self.items => Err(Error::config(format!(
                "positional sequences of length {} need at least as many items",
                self.max_len
            ))),
            Profile::Random => {
                let rows = self.rows.ok_or_else(|| Error::config("random profile needs a row count"))?;
                if rows < 2 * self.users || rows < self.items {
                    return Err(Error::config(format!(
                        "{rows} rows cannot give {} users two interactions each and cover {} items",
                        self.users, self.items
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Generate the sequences of a synthetic profile.
pub fn generate(spec: &SynthSpec) -> Result<InteractionDataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed, 0);
    let sequences = match spec.profile {
        Profile::Memorizable => memorizable(spec, &mut rng),
        Profile::Positional => positional(spec, &mut rng),
        Profile::Random => random(spec, &mut rng),
    };
    let mut ds = InteractionDataset::from_sequences(sequences, spec.items)?;
    ds.provenance.source = format!("synthetic:{}:seed={}", spec.profile, spec.seed);
    Ok(ds)
}

pub fn write(spec: &SynthSpec, path: &Path) -> Result<InteractionDataset> {
    let ds = generate(spec)?;
    write_interactions(&ds, path)?;
    Ok(ds)
}

fn cycle(items: usize, rng: &mut Rng) -> Vec<usize> {
    let mut c: Vec<usize> = (0..items).collect();
    rng.shuffle(&mut c);
    c
}

fn length(spec: &SynthSpec, rng: &mut Rng) -> usize {
    spec.min_len + rng.below(spec.max_len - spec.min_len + 1)
}

fn memorizable(spec: &SynthSpec, rng: &mut Rng) -> Vec<Vec<usize>> {
    let c = cycle(spec.items, rng);
    (0..spec.users)
        .map(|_| {
            let start = rng.below(spec.items);
            let n = length(spec, rng);
            (0..n).map(|t| c[(start + t) % spec.items]).collect()
        })
        .collect()
}

/// The global map `G` of the positional profile for a given seed.
pub fn positional_map(spec: &SynthSpec) -> Vec<usize> {
    let mut rng = Rng::new(spec.seed, 0);
    cycle(spec.items, &mut rng)
}

fn positional(spec: &SynthSpec, rng: &mut Rng) -> Vec<Vec<usize>> {
    let items = spec.items;
    let map = cycle(items, rng);
    let (min_blocks, max_blocks) = (spec.min_len / BLOCK, spec.max_len / BLOCK);
    (0..spec.users)
        .map(|_| {
            let blocks = min_blocks + rng.below(max_blocks - min_blocks + 1);
            let mut used = HashSet::new();
            let mut seq = Vec::with_capacity(blocks * BLOCK);
            for _ in 0..blocks {
                let r = fresh(&mut used, items, rng, |_, _| true);
                let r2 = fresh(&mut used, items, rng, |_, _| true);
                let paired = |i: usize, u: &HashSet<usize>| map[i] != i && !u.contains(&map[i]);
                let b = fresh(&mut used, items, rng, paired);
                used.insert(map[b]);
                let c = fresh(&mut used, items, rng, paired);
                used.insert(map[c]);
                seq.extend([r, r2, b, c, map[b], map[c]]);
            }
            // start part-way into the first block so that no absolute
            // position carries the block phase
            seq.drain(..rng.below(BLOCK));
            seq
        })
        .collect()
}

/// Draw an item not yet in `used` (and, for `b`/`c`, whose image is not
/// used either), then mark it used.
fn fresh(
    used: &mut HashSet<usize>,
    items: usize,
    rng: &mut Rng,
    ok: impl Fn(usize, &HashSet<usize>) -> bool,
) -> usize {
    loop {
        let i = rng.below(items);
        if !used.contains(&i) && ok(i, used) {
            used.insert(i);
            return i;
        }
    }
}

fn random(spec: &SynthSpec, rng: &mut Rng) -> Vec<Vec<usize>> {
    let rows = spec.rows.expect("validated");
    let perm = cycle(spec.items, rng);
    let mut seqs = vec![Vec::new(); spec.users];
    for r in 0..rows {
        seqs[r % spec.users].push(perm[r % spec.items]);
    }
    seqs
}
