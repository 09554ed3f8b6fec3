use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::{apply_max_norm, build_sequence, Model, SequenceRow};
use crate::data::{InteractionDataset, Split, SplitKind};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Candidates, EvalResult};
use crate::numeric::{Adam, AdamConfig, Graph, Rng};

/// RNG streams of one run, all keyed by the run seed.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const NEGATIVES: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const EVAL_VALID: u64 = 5;
    pub const EVAL_TEST: u64 = 6;
}

/// Epochs at which validation metrics are computed: epoch 1, every epoch
/// at least 1.3 times the previous evaluated one, and the last epoch.
pub fn eval_epochs(total: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last = 0usize;
    for e in 1..=total {
        if last == 0 || e as f64 >= 1.3 * last as f64 || e == total {
            out.push(e);
            last = e;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub split: SplitKind,
    pub hit_at_10: f64,
    pub ndcg: f64,
    /// Mean training loss of that epoch.
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricHistory {
    pub rows: Vec<HistoryRow>,
}

impl MetricHistory {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tsplit\tHit@10\tNDCG\tloss\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                r.epoch,
                r.split.name(),
                r.hit_at_10,
                r.ndcg,
                r.loss
            );
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub history: MetricHistory,
    pub best_epoch: usize,
    pub valid: Option<EvalResult>,
    pub test: EvalResult,
    /// Users whose training part was too short to form a sequence.
    pub skipped_users: usize,
}

impl Model {
    pub fn candidates(&self) -> Candidates {
        if self.config.full_ranking {
            Candidates::Full
        } else {
            Candidates::Sampled(self.config.eval_negatives)
        }
    }

    pub fn evaluate(&self, split: &Split, kind: SplitKind) -> Result<EvalResult> {
        let stream = match kind {
            SplitKind::Valid => streams::EVAL_VALID,
            SplitKind::Test => streams::EVAL_TEST,
        };
        evaluate(self, split, kind, self.candidates(), self.config.seed, stream)
    }
}

/// Train on the leave-one-out split of `ds` and report test metrics at the
/// best validation epoch.
pub fn train(config: &ModelConfig, ds: &InteractionDataset) -> Result<TrainOutcome> {
    config.validate()?;
    let split = Split::leave_one_out(ds);
    let seed = config.seed;
    let mut model = Model::new(config.clone(), ds.num_items(), ds.attributes.as_ref(), &mut Rng::new(seed, streams::INIT))?;

    let train_users: Vec<usize> = split
        .users
        .iter()
        .enumerate()
        .filter(|(_, s)| s.train.len() >= 2)
        .map(|(k, _)| k)
        .collect();
    let skipped_users = split.users.len() - train_users.len();
    if skipped_users > 0 {
        log::warn!("{skipped_users} users have fewer than 2 training items and are skipped");
    }
    if train_users.is_empty() {
        return Err(Error::EmptyDataset(": no user has 2 or more training items".into()));
    }
    let has_valid = split.users.iter().any(|u| u.valid.is_some());

    let mut optimizer = if config.lr > 0.0 {
        Some(Adam::new(AdamConfig::new(config.lr), &model.store)?)
    } else {
        None
    };
    let bounded = model.bounded_tables();
    let mut shuffle_rng = Rng::new(seed, streams::SHUFFLE);
    let mut negative_rng = Rng::new(seed, streams::NEGATIVES);
    let mut dropout_rng = Rng::new(seed, streams::DROPOUT);
    let schedule = eval_epochs(config.total_epochs());

    let mut history = MetricHistory::default();
    let mut best: Option<(f64, usize, EvalResult, f64)> = None;
    let mut best_store = model.store.clone();
    let mut order = train_users.clone();

    for epoch in 1..=config.total_epochs() {
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let rows: Vec<SequenceRow> = chunk
                .iter()
                .filter_map(|&k| {
                    let s = &split.users[k];
                    build_sequence(&s.train, config.max_len, split.history(s.user), split.num_items, &mut negative_rng)
                })
                .collect();
            let grads = {
                let mut g = Graph::new();
                let loss = model.batch_loss(&mut g, &rows, Some(&mut dropout_rng))?;
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        loss: value,
                        config: config.label(),
                    });
                }
                loss_sum += value;
                batches += 1;
                if optimizer.is_none() {
                    continue;
                }
                g.backward(loss)?;
                g.param_grads().into_iter().map(|(id, v)| (id, v.to_vec())).collect::<Vec<_>>()
            };
            model.store.accumulate_grads(grads.iter().map(|(id, v)| (*id, v.as_slice())));
            if config.l2 > 0.0 {
                let ids: Vec<_> = model.store.ids().collect();
                for id in ids {
                    let p = model.store.get_mut(id);
                    for (g, w) in p.grad.iter_mut().zip(p.value.data()) {
                        *g += config.l2 * w;
                    }
                }
            }
            if let Some(opt) = optimizer.as_mut() {
                opt.step(&mut model.store);
                apply_max_norm(&mut model.store, &bounded, config.nmax)?;
            }
        }
        let epoch_loss = loss_sum / batches.max(1) as f64;
        log::debug!("{} epoch {epoch}: loss {epoch_loss:.6}", config.label());

        if schedule.contains(&epoch) {
            let kind = if has_valid { SplitKind::Valid } else { SplitKind::Test };
            let result = model.evaluate(&split, kind)?;
            history.rows.push(HistoryRow {
                epoch,
                split: kind,
                hit_at_10: result.hit_at_10,
                ndcg: result.ndcg,
                loss: epoch_loss,
            });
            log::info!(
                "{} epoch {epoch}: loss {epoch_loss:.4} {} Hit@10 {:.4} NDCG {:.4}",
                config.label(),
                kind.name(),
                result.hit_at_10,
                result.ndcg
            );
            if best.as_ref().is_none_or(|b| result.hit_at_10 > b.0) {
                best_store = model.store.clone();
                best = Some((result.hit_at_10, epoch, result, epoch_loss));
            }
        }
    }

    let (_, best_epoch, valid, best_loss) = best.expect("the final epoch is always evaluated");
    model.store = best_store;
    model.store.zero_grads();
    let test = model.evaluate(&split, SplitKind::Test)?;
    history.rows.push(HistoryRow {
        epoch: best_epoch,
        split: SplitKind::Test,
        hit_at_10: test.hit_at_10,
        ndcg: test.ndcg,
        loss: best_loss,
    });
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        valid: has_valid.then_some(valid),
        test,
        skipped_users,
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: Model,
}

impl Model {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        })
        .map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Load a checkpoint and check that it matches a freshly built model of
    /// the same configuration.
    pub fn load(path: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Json {
            context: path.display().to_string(),
            source: e,
        })?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let saved = ck.model;
        let attrs = saved.attributes.as_ref().map(|a| {
            let width = a.table.shape()[1];
            crate::numeric::Tensor::new(vec![saved.num_items, width], a.table.data()[width..].to_vec())
                .expect("attribute table shape")
        });
        let mut model = Model::new(saved.config.clone(), saved.num_items, attrs.as_ref(), &mut Rng::new(0, 0))?;
        model.store.load_values(&saved.store)?;
        Ok(model)
    }
}
