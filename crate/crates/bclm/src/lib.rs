//! Controllable text generation over a frozen autoregressive backbone.
//!
//! A frozen recurrent language model supplies next-token probabilities and
//! per-prefix hidden states. Twin attribute discriminators — a normal head
//! read off the full-prefix hidden state and a faster head that scores
//! candidate tokens from the previous hidden state and the token embedding —
//! are trained jointly, the faster head distilled from the normal one.
//! Decoding combines the backbone with the faster head through weighted
//! Bayes scores and a two-stage attribute-driven nucleus filter, which keeps
//! the backbone cost at one forward per generated token.

pub mod backbone;
pub mod checkpoint;
pub mod corpus;
pub mod disc;
pub mod error;
pub mod gated;
pub mod gru;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
