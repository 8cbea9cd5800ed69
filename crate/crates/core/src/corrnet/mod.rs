//! The learned correspondence model and its training loop.

pub mod adam;
pub mod checkpoint;
pub mod network;
pub mod pipeline;
pub mod train;

pub use adam::{adam_step, AdamState};
pub use network::{backward, forward, forward_cached, CorrNetParams, ForwardCache, Layout, LayoutEntry};
pub use pipeline::{
    batch_grad, loss, mean_loss, register_pair, register_prepared, rmse_loss, sample_grad, sample_loss, BatchGrad,
    LossKind, PipelineOptions, PreparedPair, SampleGrad,
};
pub use train::{prepare_pairs, split_indices, stream_rng, train, EpochStats, TrainConfig, TrainReport};
