//! Interaction logs: loading, leave-one-out splits, statistics, subsets and
//! synthetic generators.

mod split;
mod stats;
mod subset;
pub mod synth;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub use split::{EvalCase, Split, SplitKind, UserSplit};
pub use stats::DatasetStats;
pub use subset::{item_popularity, popular_items, subset};

pub const DEFAULT_MIN_INTERACTIONS: usize = 2;

/// Where a dataset came from and how it was filtered.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub min_interactions: usize,
    pub item_budget: Option<usize>,
    pub user_budget: Option<usize>,
    pub subset_seed: Option<u64>,
}

/// Per-user chronological item sequences over contiguous user and item ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    /// `sequences[u]` lists user `u`'s items, oldest first.
    pub sequences: Vec<Vec<usize>>,
    /// Timestamps parallel to `sequences`.
    pub timestamps: Vec<Vec<f64>>,
    /// Original identifier of each contiguous user id.
    pub user_ids: Vec<String>,
    /// Original identifier of each contiguous item id.
    pub item_ids: Vec<String>,
    /// Optional dense attribute matrix `[items, A]`.
    pub attributes: Option<Tensor>,
    pub provenance: Provenance,
}

/// One raw log row.
#[derive(Clone, Debug, PartialEq)]
pub struct RawInteraction {
    pub user: String,
    pub item: String,
    pub timestamp: f64,
}

impl InteractionDataset {
    /// Build from raw rows: group by user, order each user's rows by
    /// timestamp (stable, so ties keep input order), drop users with fewer
    /// than `min_interactions` rows, then assign contiguous ids in order of
    /// first appearance. Duplicate rows are kept.
    pub fn from_rows(rows: &[RawInteraction], min_interactions: usize, source: &str) -> Result<Self> {
        let mut user_index: HashMap<&str, usize> = HashMap::new();
        let mut per_user: Vec<(&str, Vec<(f64, &str)>)> = Vec::new();
        for r in rows {
            let u = *user_index.entry(r.user.as_str()).or_insert_with(|| {
                per_user.push((r.user.as_str(), Vec::new()));
                per_user.len() - 1
            });
            per_user[u].1.push((r.timestamp, r.item.as_str()));
        }
        let mut item_index: HashMap<&str, usize> = HashMap::new();
        let mut ds = InteractionDataset {
            sequences: Vec::new(),
            timestamps: Vec::new(),
            user_ids: Vec::new(),
            item_ids: Vec::new(),
            attributes: None,
            provenance: Provenance {
                source: source.to_string(),
                min_interactions,
                ..Provenance::default()
            },
        };
        for (user, mut events) in per_user {
            if events.len() < min_interactions.max(1) {
                continue;
            }
            events.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut seq = Vec::with_capacity(events.len());
            for (_, item) in &events {
                let id = *item_index.entry(item).or_insert_with(|| {
                    ds.item_ids.push(item.to_string());
                    ds.item_ids.len() - 1
                });
                seq.push(id);
            }
            ds.sequences.push(seq);
            ds.timestamps.push(events.iter().map(|e| e.0).collect());
            ds.user_ids.push(user.to_string());
        }
        if ds.sequences.is_empty() {
            return Err(Error::EmptyDataset(format!(
                " after keeping users with at least {min_interactions} interactions ({source})"
            )));
        }
        Ok(ds)
    }

    /// Dataset over items `0..num_items` with implicit timestamps `0, 1, ..`.
    pub fn from_sequences(sequences: Vec<Vec<usize>>, num_items: usize) -> Result<Self> {
        if sequences.is_empty() || sequences.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyDataset(String::new()));
        }
        if let Some(bad) = sequences.iter().flatten().find(|&&i| i >= num_items) {
            return Err(Error::config(format!("item id {bad} out of range for {num_items} items")));
        }
        Ok(InteractionDataset {
            timestamps: sequences
                .iter()
                .map(|s| (0..s.len()).map(|t| t as f64).collect())
                .collect(),
            user_ids: (0..sequences.len()).map(|u| u.to_string()).collect(),
            item_ids: (0..num_items).map(|i| i.to_string()).collect(),
            sequences,
            attributes: None,
            provenance: Provenance {
                source: "memory".into(),
                min_interactions: 1,
                ..Provenance::default()
            },
        })
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn attribute_dim(&self) -> usize {
        self.attributes.as_ref().map_or(0, |a| a.shape()[1])
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats::of(self)
    }

    /// Attach an attribute sidecar: a delimited file with header
    /// `item_id,a_0,..,a_{A-1}`. Items without a row get zeros; rows for
    /// unknown items are ignored.
    pub fn load_attributes(&mut self, path: &Path) -> Result<()> {
        let (delim, lines) = read_lines(path)?;
        let mut lines = lines.into_iter();
        let Some((_, header)) = lines.next() else {
            return Err(Error::EmptyDataset(format!(" ({})", path.display())));
        };
        let width = header.split(delim).count().saturating_sub(1);
        if width == 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: "attribute header needs item_id plus at least one column".into(),
            });
        }
        let index: HashMap<&str, usize> =
            self.item_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut table = Tensor::zeros(&[self.num_items(), width]);
        for (line_no, line) in lines {
            let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
            if fields.len() != width + 1 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("expected {} fields, found {}", width + 1, fields.len()),
                });
            }
            let Some(&item) = index.get(fields[0]) else { continue };
            let row = table.row_mut(item);
            for (slot, field) in row.iter_mut().zip(&fields[1..]) {
                *slot = field.parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    msg: format!("attribute value '{field}' is not a number"),
                })?;
            }
        }
        self.attributes = Some(table);
        Ok(())
    }
}

/// Non-empty lines with their 1-based line numbers, plus the detected
/// delimiter (tab when the first line contains one, otherwise comma).
fn read_lines(path: &Path) -> Result<(char, Vec<(usize, String)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim_end_matches('\r');
        if !trimmed.trim().is_empty() {
            lines.push((i + 1, trimmed.to_string()));
        }
    }
    let delim = match lines.first() {
        Some((_, l)) if l.contains('\t') => '\t',
        _ => ',',
    };
    Ok((delim, lines))
}

/// Parse a `user_id, item_id, timestamp` log. A first line whose timestamp
/// column is not numeric is taken as a header.
pub fn parse_interactions(path: &Path) -> Result<Vec<RawInteraction>> {
    let (delim, lines) = read_lines(path)?;
    let mut rows = Vec::with_capacity(lines.len());
    for (k, (line_no, line)) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split(delim).map(str::trim).collect();
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: *line_no,
            msg,
        };
        if fields.len() < 3 {
            return Err(parse_err(format!(
                "expected user_id, item_id, timestamp; found {} field(s)",
                fields.len()
            )));
        }
        let timestamp = match fields[2].parse::<f64>() {
            Ok(t) if t.is_finite() => t,
            _ if k == 0 => continue,
            _ => return Err(parse_err(format!("timestamp '{}' is not a finite number", fields[2]))),
        };
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(parse_err("empty user or item id".into()));
        }
        rows.push(RawInteraction {
            user: fields[0].to_string(),
            item: fields[1].to_string(),
            timestamp,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!(" ({})", path.display())));
    }
    Ok(rows)
}

pub fn load_interactions(path: &Path, min_interactions: usize) -> Result<InteractionDataset> {
    let rows = parse_interactions(path)?;
    InteractionDataset::from_rows(&rows, min_interactions, &path.display().to_string())
}

/// Write a dataset back out as a tab-separated log with a header.
pub fn write_interactions(ds: &InteractionDataset, path: &Path) -> Result<()> {
    let mut out = String::from("user_id\titem_id\ttimestamp\n");
    for (u, (seq, ts)) in ds.sequences.iter().zip(&ds.timestamps).enumerate() {
        for (item, t) in seq.iter().zip(ts) {
            out.push_str(&format!("{}\t{}\t{}\n", ds.user_ids[u], ds.item_ids[*item], t));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
