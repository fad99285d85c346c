// SPDX-License-Identifier: MIT OR Apache-2.0

//! Detection and disentanglement of attention hijackers in autoregressive
//! attention traces.
//!
//! The pipeline runs over a recorded [`AttentionTrace`]:
//!
//! ```text
//! load_trace → aggregate_heads → compute_salience → detect_hijackers
//!            → build_plan → apply_plan → compute_salience → re_disentanglement
//! ```
//!
//! [`toydec`] provides a small deterministic causal decoder with a KV cache
//! that records traces and accepts plans as live attention hooks, and
//! [`oracle`] recomputes every salience quantity by path enumeration.

pub mod cli;
pub mod detector;
pub mod disentangle;
pub mod error;
pub mod oracle;
pub mod salience;
pub mod synth;
pub mod toydec;
pub mod trace;

pub use detector::{
    attention_similarity, detect_hijackers, HijackerReport, LayerPolicy, SimilarityCurve,
    DEFAULT_HIJACKER_COUNT,
};
pub use disentangle::{
    apply_plan, build_plan, re_disentanglement, visual_fraction_sweep, DisentanglementDecision,
    DisentanglementPlan, SweepRow,
};
pub use error::{AidError, Result};
pub use oracle::oracle_salience;
pub use salience::{compute_salience, SalienceField};
pub use toydec::{
    build_model, greedy_decode, plant_hijacker, run_aid, AidOutcome, AidParams, DecodeSession,
    PlantSpec, PromptLayout, ToyConfig, ToyModel,
};
pub use trace::{
    aggregate_heads, load_trace, AttentionTrace, HeadAggregatedTrace, HeadPolicy, TokenLayout,
    TokenRole,
};
