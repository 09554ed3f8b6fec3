//! Transformer next-item recommender, its loss and training loop.

mod config;
mod network;
mod train;

pub use config::{format_nmax, parse_nmax, ModelConfig};
pub use network::{
    apply_max_norm, bce_loss, build_sequence, left_pad, score, AttributeFusion, Inputs, Model, Reduction,
    SequenceRow, PAD, PROB_EPS,
};
pub use train::{eval_epochs, streams, train, HistoryRow, MetricHistory, TrainOutcome, CHECKPOINT_VERSION};
