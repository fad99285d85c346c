// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hijacker ranking and the attention-distribution similarity diagnostic.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{AidError, Result};
use crate::salience::SalienceField;
use crate::trace::{HeadAggregatedTrace, TokenRole};

pub const DEFAULT_HIJACKER_COUNT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub index: usize,
    pub score: f64,
}

/// Ranked instruction-token totals and the selected hijacker set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HijackerReport {
    /// One entry per instruction token, in position order.
    pub scores: Vec<TokenScore>,
    pub k: usize,
    /// Selected positions, highest score first.
    pub hijackers: Vec<usize>,
    /// Equal-score groups straddling the selection boundary.
    pub ties: Vec<Vec<usize>>,
    /// Set when fewer than `k` instruction tokens exist.
    pub truncated: bool,
    pub num_layers: usize,
    pub image_positions: (usize, usize),
}

/// Orders by descending score, then ascending position.
fn rank(a: &TokenScore, b: &TokenScore) -> Ordering {
    b.score.total_cmp(&a.score).then(a.index.cmp(&b.index))
}

/// Selects the `k` instruction tokens with the largest summed top-layer
/// contribution to the generated tokens.
pub fn detect_hijackers(field: &SalienceField, k: usize) -> Result<HijackerReport> {
    if k == 0 {
        return Err(AidError::InvalidCount(k));
    }
    if field.num_generated() == 0 {
        return Err(AidError::NoGeneratedTokens);
    }
    let scores: Vec<TokenScore> = field
        .instruction_totals()
        .into_iter()
        .map(|(index, score)| TokenScore { index, score })
        .collect();

    let mut ranked = scores.clone();
    ranked.sort_by(rank);
    let take = k.min(ranked.len());
    let hijackers: Vec<usize> = ranked[..take].iter().map(|s| s.index).collect();

    let mut ties = Vec::new();
    if take < ranked.len() {
        let boundary = ranked[take - 1].score;
        if ranked[take].score == boundary {
            ties.push(
                ranked
                    .iter()
                    .filter(|s| s.score == boundary)
                    .map(|s| s.index)
                    .collect(),
            );
        }
    }

    let img = field.image_positions();
    Ok(HijackerReport {
        scores,
        k,
        hijackers,
        ties,
        truncated: take < k,
        num_layers: field.top_layer(),
        image_positions: (img.start, img.end),
    })
}

impl HijackerReport {
    pub fn is_hijacker(&self, index: usize) -> bool {
        self.hijackers.contains(&index)
    }

    pub fn score(&self, index: usize) -> Option<f64> {
        self.scores
            .iter()
            .find(|s| s.index == index)
            .map(|s| s.score)
    }

    /// CSV with one row per instruction token: `index,text,score,selected`.
    pub fn to_csv(&self, texts: &[Option<String>]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["index", "text", "score", "selected"])
            .expect("in-memory write");
        for s in &self.scores {
            let text = texts.get(s.index).and_then(|t| t.as_deref()).unwrap_or("");
            w.write_record([
                s.index.to_string(),
                text.to_string(),
                s.score.to_string(),
                self.is_hijacker(s.index).to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }
}

// ---------------------------------------------------------------------------
// Similarity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerPolicy {
    #[default]
    PerLayerMean,
    SingleLayer(usize),
}

/// Similarity of one source token's image attention to each generated
/// token's image attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    pub source: usize,
    pub layer_policy: LayerPolicy,
    /// One value per generated token, in position order.
    pub values: Vec<f64>,
}

/// Cosine similarity; zero when either operand is the zero vector.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Image-key sub-row of `query`, zero-padded where causality cuts it short.
fn image_subrow(trace: &HeadAggregatedTrace, layer: usize, query: usize) -> Vec<f64> {
    let row = trace.row(layer, query);
    trace
        .layout()
        .image_range()
        .map(|k| row.get(k).copied().unwrap_or(0.0))
        .collect()
}

pub fn attention_similarity(
    trace: &HeadAggregatedTrace,
    source: usize,
    policy: LayerPolicy,
) -> Result<SimilarityCurve> {
    let layout = trace.layout();
    match layout.role(source) {
        Some(TokenRole::Image | TokenRole::Instruction) => {}
        Some(_) => return Err(AidError::InvalidSource(source)),
        None => {
            return Err(AidError::IndexOutOfRange(format!(
                "source {source} beyond {} tokens",
                layout.len()
            )))
        }
    }
    if layout.num_generated() == 0 {
        return Err(AidError::NoGeneratedTokens);
    }
    let layers: Vec<usize> = match policy {
        LayerPolicy::PerLayerMean => (0..trace.num_layers()).collect(),
        LayerPolicy::SingleLayer(l) if l < trace.num_layers() => vec![l],
        LayerPolicy::SingleLayer(l) => {
            return Err(AidError::IndexOutOfRange(format!(
                "layer {l} beyond {} layers",
                trace.num_layers()
            )))
        }
    };
    let values = layout
        .generated_range()
        .map(|i| {
            let total: f64 = layers
                .iter()
                .map(|&l| cosine(&image_subrow(trace, l, source), &image_subrow(trace, l, i)))
                .sum();
            total / layers.len() as f64
        })
        .collect();
    Ok(SimilarityCurve {
        source,
        layer_policy: policy,
        values,
    })
}
