//! Cold-start click-through-rate recommendation by prompting language models.
//!
//! A user-item pair is verbalized into a natural-language context with a mask
//! slot, and the preference score is read off the probabilities a language
//! model assigns to positive versus negative sentiment words at that slot. Two
//! enhancements target small models: further pre-training on a corpus refined
//! against synthetic probe texts ([`rcmp`]), and a transferable soft task
//! prompt trained on other recommendation domains ([`tppt`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod lm;
pub mod prompting;
pub mod rcmp;
pub mod scorer;
pub mod tppt;
mod util;

pub use error::{Error, Result};
