//! Leakage-risk judging over LLM internal states.
//!
//! The pipeline scores generated continuations against their true references
//! ([`textsim`]), turns the scores into leak / non-disclosure labels
//! ([`labeler`]), trains a gated-MLP judge on prefill hidden states
//! ([`judge`]), optionally augmented with reference embeddings retrieved from
//! an IVF index ([`refdb`]), and serves allow/block decisions before decoding
//! starts ([`gate`]).

pub mod cli;
pub mod evalkit;
pub mod gate;
pub mod judge;
pub mod labeler;
pub mod refdb;
pub mod stateio;
pub mod textsim;
