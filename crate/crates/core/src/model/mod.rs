//! Causal transformer over interleaved rating/item tokens.
//!
//! Each timestep contributes a rating token followed by an item token.
//! Next-item logits are read at rating tokens; at item tokens a tanh
//! projection of the final hidden state yields the user representation
//! whose inner product with the next item's embedding predicts its rating.
//! Blocks are attention followed by a GELU feed-forward layer with no
//! residual paths.

mod checkpoint;
mod forward;
mod params;
mod train;

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
pub use forward::{forward, next_item_dist, sequence_loss, tokenize, ForwardOut, Token, TokenSeq};
pub use params::{HyperParams, ModelParams};
pub use train::{
    evaluate_loss, loss_and_grads, overfit, split_indices, train_model, train_model_with, EpochRecord, TrainingLog,
};


#[cfg(test)]
mod tests;
