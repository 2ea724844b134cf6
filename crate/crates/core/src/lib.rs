//! Few-shot intent detection via contrastive pre-training and fine-tuning.
//!
//! Stage 1 pre-trains a small transformer encoder on unlabeled utterances with
//! an in-batch contrastive loss between each utterance and a dynamically
//! masked copy, plus a masked-language-modeling loss. Stage 2 fine-tunes on K
//! labeled examples per intent with a supervised contrastive loss over two
//! dropout views and a label-smoothed classification loss.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod suite;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
