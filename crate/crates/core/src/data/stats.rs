use std::fmt;

use serde::{Deserialize, Serialize};

use super::InteractionDataset;
use crate::error::{Error, Result};

const COLUMNS: [&str; 6] = ["users", "items", "interactions", "density", "attributes", "budget_density"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// `interactions / (users * items)` over the post-filter counts.
    pub density: f64,
    pub attributes: usize,
    /// Density with the subset budgets in place of the post-filter counts,
    /// for datasets produced by [`super::subset`].
    pub budget_density: Option<f64>,
}

pub(crate) fn density(interactions: usize, users: usize, items: usize) -> f64 {
    interactions as f64 / (users as f64 * items as f64)
}

impl DatasetStats {
    pub fn of(ds: &InteractionDataset) -> Self {
        let (users, items, interactions) = (ds.num_users(), ds.num_items(), ds.num_interactions());
        let p = &ds.provenance;
        let budget_density = (p.item_budget.is_some() || p.user_budget.is_some()).then(|| {
            density(
                interactions,
                p.user_budget.unwrap_or(users),
                p.item_budget.unwrap_or(items),
            )
        });
        DatasetStats {
            users,
            items,
            interactions,
            density: density(interactions, users, items),
            attributes: ds.attribute_dim(),
            budget_density,
        }
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.density
    }

    /// Header line plus one data line, tab-separated, exact values.
    pub fn to_tsv(&self) -> String {
        let budget = self.budget_density.map_or("NaN".to_string(), |d| format!("{d:e}"));
        format!(
            "{}\n{}\t{}\t{}\t{:e}\t{}\t{}\n",
            COLUMNS.join("\t"),
            self.users,
            self.items,
            self.interactions,
            self.density,
            self.attributes,
            budget
        )
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: "<stats>".into(),
            line,
            msg,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or_else(|| bad(1, "missing header".into()))?.split('\t').collect();
        if header != COLUMNS {
            return Err(bad(1, format!("unexpected columns {header:?}")));
        }
        let row: Vec<&str> = lines.next().ok_or_else(|| bad(2, "missing data row".into()))?.split('\t').collect();
        if row.len() != COLUMNS.len() {
            return Err(bad(2, format!("expected {} fields, found {}", COLUMNS.len(), row.len())));
        }
        let int = |i: usize| row[i].parse::<usize>().map_err(|_| bad(2, format!("bad {} '{}'", COLUMNS[i], row[i])));
        let float = |i: usize| row[i].parse::<f64>().map_err(|_| bad(2, format!("bad {} '{}'", COLUMNS[i], row[i])));
        let budget = float(5)?;
        Ok(DatasetStats {
            users: int(0)?,
            items: int(1)?,
            interactions: int(2)?,
            density: float(3)?,
            attributes: int(4)?,
            budget_density: (!budget.is_nan()).then_some(budget),
        })
    }
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "users         {}", self.users)?;
        writeln!(f, "items         {}", self.items)?;
        writeln!(f, "interactions  {}", self.interactions)?;
        writeln!(f, "density       {:.3e}", self.density)?;
        if let Some(b) = self.budget_density {
            writeln!(f, "budget density {b:.3e}")?;
        }
        write!(f, "attributes    {}", self.attributes)
    }
}
