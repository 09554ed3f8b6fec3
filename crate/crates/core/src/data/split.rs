use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::InteractionDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Valid,
    Test,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Valid => "valid",
            SplitKind::Test => "test",
        }
    }
}

/// Leave-one-out view of one user's history.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSplit {
    pub user: usize,
    pub train: Vec<usize>,
    /// Second-to-last item, present when the history has at least 3 items.
    pub valid: Option<usize>,
    pub test: usize,
}

/// A ranking query: predict `target` after `context`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCase {
    pub user: usize,
    pub context: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub users: Vec<UserSplit>,
    pub num_items: usize,
    /// Full histories, indexed by user, used to exclude items from negatives.
    histories: Vec<HashSet<usize>>,
}

impl Split {
    /// Last item per user is the test target, the second-to-last the
    /// validation target; training sequences exclude both. Users with fewer
    /// than 2 interactions are skipped.
    pub fn leave_one_out(ds: &InteractionDataset) -> Self {
        let mut users = Vec::new();
        for (u, seq) in ds.sequences.iter().enumerate() {
            let n = seq.len();
            if n < 2 {
                continue;
            }
            let (train, valid) = if n >= 3 {
                (seq[..n - 2].to_vec(), Some(seq[n - 2]))
            } else {
                (seq[..1].to_vec(), None)
            };
            users.push(UserSplit {
                user: u,
                train,
                valid,
                test: seq[n - 1],
            });
        }
        Split {
            users,
            num_items: ds.num_items(),
            histories: ds.sequences.iter().map(|s| s.iter().copied().collect()).collect(),
        }
    }

    pub fn history(&self, user: usize) -> &HashSet<usize> {
        &self.histories[user]
    }

    /// Evaluation queries: validation predicts the second-to-last item from
    /// the training part, test predicts the last item from everything before it.
    pub fn cases(&self, kind: SplitKind) -> Vec<EvalCase> {
        self.users
            .iter()
            .filter_map(|s| match kind {
                SplitKind::Valid => s.valid.map(|target| EvalCase {
                    user: s.user,
                    context: s.train.clone(),
                    target,
                }),
                SplitKind::Test => {
                    let mut context = s.train.clone();
                    context.extend(s.valid);
                    Some(EvalCase {
                        user: s.user,
                        context,
                        target: s.test,
                    })
                }
            })
            .collect()
    }
}
