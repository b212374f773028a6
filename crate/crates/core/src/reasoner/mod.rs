//! Compact autoregressive reasoner producing structured spatial thoughts.

mod model;
pub mod vocab;

pub use model::{
    chain_metrics, cot_loss, ChainForward, ChainMetrics, Decoded, Reasoner, ReasonerConfig, INSTRUCTION_LEN,
};

#[cfg(test)]
mod tests;
