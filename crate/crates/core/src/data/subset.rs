use super::{InteractionDataset, Provenance, DEFAULT_MIN_INTERACTIONS};
use crate::error::{Error, Result};
use crate::numeric::{Rng, Tensor};

/// Interaction count per item.
pub fn item_popularity(ds: &InteractionDataset) -> Vec<usize> {
    let mut counts = vec![0; ds.num_items()];
    for &i in ds.sequences.iter().flatten() {
        counts[i] += 1;
    }
    counts
}

/// The `k` most interacted-with items, ties broken by smaller id.
pub fn popular_items(ds: &InteractionDataset, k: usize) -> Vec<usize> {
    let counts = item_popularity(ds);
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Keep the `item_budget` most popular items and a uniform sample of
/// `user_budget` users, drop every interaction outside both, and keep the
/// users left with at least 2 interactions. Ids are re-assigned
/// contiguously (in ascending order of the old ids).
pub fn subset(
    ds: &InteractionDataset,
    item_budget: Option<usize>,
    user_budget: Option<usize>,
    rng: &mut Rng,
) -> Result<InteractionDataset> {
    for (name, budget, have) in [
        ("item", item_budget, ds.num_items()),
        ("user", user_budget, ds.num_users()),
    ] {
        if let Some(b) = budget {
            if b == 0 || b > have {
                return Err(Error::config(format!(
                    "{name} budget {b} must lie in 1..={have}"
                )));
            }
        }
    }

    let mut keep_item = vec![item_budget.is_none(); ds.num_items()];
    if let Some(k) = item_budget {
        for i in popular_items(ds, k) {
            keep_item[i] = true;
        }
    }
    let mut users: Vec<usize> = (0..ds.num_users()).collect();
    if let Some(k) = user_budget {
        rng.shuffle(&mut users);
        users.truncate(k);
        users.sort_unstable();
    }

    let mut kept: Vec<(usize, Vec<usize>, Vec<f64>)> = Vec::new();
    let mut item_used = vec![false; ds.num_items()];
    for u in users {
        let (items, times): (Vec<usize>, Vec<f64>) = ds.sequences[u]
            .iter()
            .zip(&ds.timestamps[u])
            .filter(|(i, _)| keep_item[**i])
            .map(|(i, t)| (*i, *t))
            .unzip();
        if items.len() >= DEFAULT_MIN_INTERACTIONS {
            for &i in &items {
                item_used[i] = true;
            }
            kept.push((u, items, times));
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyDataset(" after subsetting".into()));
    }

    let mut remap = vec![usize::MAX; ds.num_items()];
    let mut item_ids = Vec::new();
    for (old, used) in item_used.iter().enumerate() {
        if *used {
            remap[old] = item_ids.len();
            item_ids.push(ds.item_ids[old].clone());
        }
    }
    let attributes = ds.attributes.as_ref().map(|a| {
        let width = a.shape()[1];
        let mut t = Tensor::zeros(&[item_ids.len(), width]);
        for (old, &new) in remap.iter().enumerate() {
            if new != usize::MAX {
                t.row_mut(new).copy_from_slice(a.row(old));
            }
        }
        t
    });
    Ok(InteractionDataset {
        user_ids: kept.iter().map(|(u, _, _)| ds.user_ids[*u].clone()).collect(),
        sequences: kept
            .iter()
            .map(|(_, items, _)| items.iter().map(|&i| remap[i]).collect())
            .collect(),
        timestamps: kept.into_iter().map(|(_, _, t)| t).collect(),
        item_ids,
        attributes,
        provenance: Provenance {
            source: ds.provenance.source.clone(),
            min_interactions: DEFAULT_MIN_INTERACTIONS,
            item_budget,
            user_budget,
            subset_seed: Some(rng.seed()),
        },
    })
}
