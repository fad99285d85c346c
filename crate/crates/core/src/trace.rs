// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-trace data model, JSON file format, and validation.
//!
//! A trace records, for every layer and head, the causal attention row of
//! each query position: prefill rows for the prompt (image and instruction
//! tokens) and one row per layer/head for every decode step.  Everything
//! downstream reads traces through [`HeadAggregatedTrace`], which collapses
//! the head axis.
//!
//! # File format
//!
//! ```text
//! {
//!   "version": 1,
//!   "num_layers": L, "num_heads": H,
//!   "tokens": [{"index": 0, "role": "image", "text": "<img>"}, ...],
//!   "prefill_attention": [layer][head][query][key],
//!   "decode_steps": [{"attention": [layer][head][key]}, ...],
//!   "meta": { ... }            // optional, preserved, ignored
//! }
//! ```

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{AidError, Result};

/// Maximum deviation of an ingested row sum from one.
pub const INGEST_ROW_TOLERANCE: f64 = 1e-6;

/// Tolerance held by every internal renormalization.
pub const INTERNAL_ROW_TOLERANCE: f64 = 1e-12;

pub const TRACE_FORMAT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Token roles and layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenRole {
    Image,
    Instruction,
    Generated,
    /// System-prompt style tokens; allowed only before the image block and
    /// excluded from every salience sum.
    Other,
}

/// One token of a trace with its absolute position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub index: usize,
    pub role: TokenRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Block structure of a trace: `other* image+ instruction+ generated*`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    roles: Vec<TokenRole>,
    image_range: Range<usize>,
    instruction_range: Range<usize>,
    generated_start: usize,
}

impl TokenLayout {
    /// Validates the block order of `roles` and derives the index ranges.
    pub fn from_roles(roles: Vec<TokenRole>) -> Result<Self> {
        let phase = |role: TokenRole| match role {
            TokenRole::Other => 0,
            TokenRole::Image => 1,
            TokenRole::Instruction => 2,
            TokenRole::Generated => 3,
        };
        let mut current = 0;
        for (pos, &role) in roles.iter().enumerate() {
            let p = phase(role);
            if p < current {
                return Err(AidError::LayoutViolation(format!(
                    "token {pos} has role {role:?} after a later block started"
                )));
            }
            current = p;
        }
        let first = |r: TokenRole| roles.iter().position(|&x| x == r);
        let count = |r: TokenRole| roles.iter().filter(|&&x| x == r).count();

        let image_start = first(TokenRole::Image)
            .ok_or_else(|| AidError::LayoutViolation("no image tokens".into()))?;
        let instruction_start = first(TokenRole::Instruction)
            .ok_or_else(|| AidError::LayoutViolation("no instruction tokens".into()))?;
        let image_range = image_start..image_start + count(TokenRole::Image);
        let instruction_range =
            instruction_start..instruction_start + count(TokenRole::Instruction);
        let generated_start = instruction_range.end;

        Ok(Self {
            roles,
            image_range,
            instruction_range,
            generated_start,
        })
    }

    /// Layout for the positions `0..end`, used when salience has to be
    /// evaluated over a partially decoded prompt.  The instruction range may
    /// be empty.
    pub(crate) fn prefix(&self, end: usize) -> Self {
        let clip = |r: &Range<usize>| r.start.min(end)..r.end.min(end);
        let instruction_range = clip(&self.instruction_range);
        Self {
            roles: self.roles[..end].to_vec(),
            image_range: clip(&self.image_range),
            generated_start: instruction_range.end,
            instruction_range,
        }
    }

    pub fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    pub fn role(&self, position: usize) -> Option<TokenRole> {
        self.roles.get(position).copied()
    }

    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn image_range(&self) -> Range<usize> {
        self.image_range.clone()
    }

    pub fn instruction_range(&self) -> Range<usize> {
        self.instruction_range.clone()
    }

    pub fn generated_start(&self) -> usize {
        self.generated_start
    }

    pub fn generated_range(&self) -> Range<usize> {
        self.generated_start..self.roles.len()
    }

    pub fn num_generated(&self) -> usize {
        self.roles.len() - self.generated_start
    }
}

// ---------------------------------------------------------------------------
// AttentionTrace
// ---------------------------------------------------------------------------

/// Validated, immutable per-head attention record.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    num_layers: usize,
    num_heads: usize,
    tokens: Vec<Token>,
    layout: TokenLayout,
    /// `[layer][head][query][key]` for queries before `generated_start`.
    prefill: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[step][layer][head][key]`.
    decode: Vec<Vec<Vec<Vec<f64>>>>,
    meta: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceDocument {
    version: u32,
    num_layers: usize,
    num_heads: usize,
    tokens: Vec<Token>,
    prefill_attention: Vec<Vec<Vec<Vec<f64>>>>,
    decode_steps: Vec<DecodeStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecodeStep {
    attention: Vec<Vec<Vec<f64>>>,
}

/// Parses and validates a JSON trace document.
pub fn load_trace(bytes: &[u8]) -> Result<AttentionTrace> {
    let doc: TraceDocument =
        serde_json::from_slice(bytes).map_err(|e| AidError::MalformedDocument(e.to_string()))?;
    if doc.version != TRACE_FORMAT_VERSION {
        return Err(AidError::MalformedDocument(format!(
            "unsupported version {}",
            doc.version
        )));
    }
    AttentionTrace::new(
        doc.num_layers,
        doc.num_heads,
        doc.tokens,
        doc.prefill_attention,
        doc.decode_steps.into_iter().map(|s| s.attention).collect(),
        doc.meta,
    )
}

pub fn load_trace_file(path: impl AsRef<std::path::Path>) -> Result<AttentionTrace> {
    load_trace(&std::fs::read(path)?)
}

fn check_row(row: &[f64], layer: usize, head: usize, query: usize, tol: f64) -> Result<()> {
    if row.len() != query + 1 {
        return Err(AidError::ShapeViolation(format!(
            "row at layer {layer}, head {head}, query {query} has {} keys, expected {}",
            row.len(),
            query + 1
        )));
    }
    if let Some(k) = row.iter().position(|w| !w.is_finite() || *w < 0.0) {
        return Err(AidError::ShapeViolation(format!(
            "weight {} at layer {layer}, head {head}, query {query}, key {k} is negative or non-finite",
            row[k]
        )));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > tol {
        return Err(AidError::RowSumViolation {
            layer,
            head,
            query,
            sum,
        });
    }
    Ok(())
}

impl AttentionTrace {
    /// Builds a trace from raw arrays, enforcing every invariant at the
    /// ingest tolerance.
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        tokens: Vec<Token>,
        prefill: Vec<Vec<Vec<Vec<f64>>>>,
        decode: Vec<Vec<Vec<Vec<f64>>>>,
        meta: Option<serde_json::Value>,
    ) -> Result<Self> {
        Self::with_tolerance(
            num_layers,
            num_heads,
            tokens,
            prefill,
            decode,
            meta,
            INGEST_ROW_TOLERANCE,
        )
    }

    pub(crate) fn with_tolerance(
        num_layers: usize,
        num_heads: usize,
        tokens: Vec<Token>,
        prefill: Vec<Vec<Vec<Vec<f64>>>>,
        decode: Vec<Vec<Vec<Vec<f64>>>>,
        meta: Option<serde_json::Value>,
        tol: f64,
    ) -> Result<Self> {
        if num_layers == 0 || num_heads == 0 {
            return Err(AidError::MalformedDocument(
                "num_layers and num_heads must be positive".into(),
            ));
        }
        for (pos, tok) in tokens.iter().enumerate() {
            if tok.index != pos {
                return Err(AidError::LayoutViolation(format!(
                    "token at position {pos} carries index {}",
                    tok.index
                )));
            }
        }
        let layout = TokenLayout::from_roles(tokens.iter().map(|t| t.role).collect())?;
        if layout.num_generated() != decode.len() {
            return Err(AidError::LayoutViolation(format!(
                "{} generated tokens but {} decode steps",
                layout.num_generated(),
                decode.len()
            )));
        }

        let gs = layout.generated_start();
        if prefill.len() != num_layers {
            return Err(AidError::ShapeViolation(format!(
                "prefill has {} layers, expected {num_layers}",
                prefill.len()
            )));
        }
        for (l, heads) in prefill.iter().enumerate() {
            if heads.len() != num_heads {
                return Err(AidError::ShapeViolation(format!(
                    "prefill layer {l} has {} heads, expected {num_heads}",
                    heads.len()
                )));
            }
            for (h, rows) in heads.iter().enumerate() {
                if rows.len() != gs {
                    return Err(AidError::ShapeViolation(format!(
                        "prefill layer {l}, head {h} has {} query rows, expected {gs}",
                        rows.len()
                    )));
                }
                for (q, row) in rows.iter().enumerate() {
                    check_row(row, l, h, q, tol)?;
                }
            }
        }
        for (s, layers) in decode.iter().enumerate() {
            if layers.len() != num_layers {
                return Err(AidError::ShapeViolation(format!(
                    "decode step {s} has {} layers, expected {num_layers}",
                    layers.len()
                )));
            }
            for (l, heads) in layers.iter().enumerate() {
                if heads.len() != num_heads {
                    return Err(AidError::ShapeViolation(format!(
                        "decode step {s}, layer {l} has {} heads, expected {num_heads}",
                        heads.len()
                    )));
                }
                for (h, row) in heads.iter().enumerate() {
                    check_row(row, l, h, gs + s, tol)?;
                }
            }
        }

        Ok(Self {
            num_layers,
            num_heads,
            tokens,
            layout,
            prefill,
            decode,
            meta,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn meta(&self) -> Option<&serde_json::Value> {
        self.meta.as_ref()
    }

    pub fn num_decode_steps(&self) -> usize {
        self.decode.len()
    }

    /// Attention row of `query` at (`layer`, `head`); length `query + 1`.
    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f64] {
        let gs = self.layout.generated_start();
        if query < gs {
            &self.prefill[layer][head][query]
        } else {
            &self.decode[query - gs][layer][head]
        }
    }

    fn to_document(&self) -> TraceDocument {
        TraceDocument {
            version: TRACE_FORMAT_VERSION,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            tokens: self.tokens.clone(),
            prefill_attention: self.prefill.clone(),
            decode_steps: self
                .decode
                .iter()
                .map(|a| DecodeStep {
                    attention: a.clone(),
                })
                .collect(),
            meta: self.meta.clone(),
        }
    }

    /// Serializes to the JSON trace format.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_document()).expect("trace serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("trace serializes")
    }

    /// Copy of this trace keeping only the first `steps` decode steps.
    pub fn truncate_decode(&self, steps: usize) -> Self {
        let steps = steps.min(self.decode.len());
        let keep = self.layout.generated_start() + steps;
        let tokens = self.tokens[..keep].to_vec();
        Self {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            layout: self.layout.prefix_with_generated(keep),
            tokens,
            prefill: self.prefill.clone(),
            decode: self.decode[..steps].to_vec(),
            meta: self.meta.clone(),
        }
    }
}

impl TokenLayout {
    fn prefix_with_generated(&self, end: usize) -> Self {
        Self {
            roles: self.roles[..end].to_vec(),
            image_range: self.image_range.clone(),
            instruction_range: self.instruction_range.clone(),
            generated_start: self.generated_start,
        }
    }
}

// ---------------------------------------------------------------------------
// Head aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadPolicy {
    #[default]
    Mean,
    /// Entry-wise maximum over heads, renormalized to sum to one.
    Max,
}

impl std::fmt::Display for HeadPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadPolicy::Mean => f.write_str("mean"),
            HeadPolicy::Max => f.write_str("max"),
        }
    }
}

/// Trace with the head axis collapsed; rows indexed `[layer][query]` over
/// all positions, prefill and generated alike.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAggregatedTrace {
    num_layers: usize,
    layout: TokenLayout,
    tokens: Vec<Token>,
    policy: HeadPolicy,
    rows: Vec<Vec<Vec<f64>>>,
}

pub fn aggregate_heads(trace: &AttentionTrace, policy: HeadPolicy) -> HeadAggregatedTrace {
    let n = trace.layout().len();
    let heads = trace.num_heads();
    let rows = (0..trace.num_layers())
        .map(|l| {
            (0..n)
                .map(|q| {
                    if heads == 1 {
                        return trace.row(l, 0, q).to_vec();
                    }
                    match policy {
                        HeadPolicy::Mean => {
                            let mut acc = vec![0.0; q + 1];
                            for h in 0..heads {
                                for (a, w) in acc.iter_mut().zip(trace.row(l, h, q)) {
                                    *a += w;
                                }
                            }
                            let scale = heads as f64;
                            acc.iter_mut().for_each(|a| *a /= scale);
                            acc
                        }
                        HeadPolicy::Max => {
                            let mut acc = trace.row(l, 0, q).to_vec();
                            for h in 1..heads {
                                for (a, w) in acc.iter_mut().zip(trace.row(l, h, q)) {
                                    *a = a.max(*w);
                                }
                            }
                            let total: f64 = acc.iter().sum();
                            acc.iter_mut().for_each(|a| *a /= total);
                            acc
                        }
                    }
                })
                .collect()
        })
        .collect();
    HeadAggregatedTrace {
        num_layers: trace.num_layers(),
        layout: trace.layout().clone(),
        tokens: trace.tokens().to_vec(),
        policy,
        rows,
    }
}

impl HeadAggregatedTrace {
    /// Unchecked constructor for rows produced inside the crate.
    pub(crate) fn from_parts(
        layout: TokenLayout,
        tokens: Vec<Token>,
        policy: HeadPolicy,
        rows: Vec<Vec<Vec<f64>>>,
    ) -> Self {
        Self {
            num_layers: rows.len(),
            layout,
            tokens,
            policy,
            rows,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn policy(&self) -> HeadPolicy {
        self.policy
    }

    pub fn row(&self, layer: usize, query: usize) -> &[f64] {
        &self.rows[layer][query]
    }

    pub(crate) fn row_mut(&mut self, layer: usize, query: usize) -> &mut Vec<f64> {
        &mut self.rows[layer][query]
    }

    pub fn rows(&self) -> &[Vec<Vec<f64>>] {
        &self.rows
    }
}
