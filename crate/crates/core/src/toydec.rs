// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic toy causal decoder with a KV cache.
//!
//! The model is deliberately minimal: token embedding, `num_layers` blocks
//! of multi-head causal self-attention with a residual connection, and an
//! unembedding.  There is no MLP and no normalization.  All arithmetic is
//! f64 with sums taken in ascending index order, and `exp` comes from
//! `libm`, so traces are bit-reproducible across platforms.
//!
//! ```text
//! token → embed → for each layer:
//!                   q = x Wq + bq(pos), k = x Wk + bk(pos), v = x Wv
//!                   a_h = softmax(q_h k_hᵀ / √d_k)   (causal, optional hook)
//!                   x  = x + concat_h(a_h v_h) Wo
//!               → x U → logits
//! ```
//!
//! The positional biases `bq`/`bk` are zero except in planted models
//! (see [`plant_hijacker`]).
//!
//! Prompts follow a fixed convention: positions `0..n_image` are image
//! pseudo-tokens whose ids equal their positions, followed by the
//! instruction tokens.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::detector::{detect_hijackers, HijackerReport};
use crate::disentangle::{apply_plan, build_plan, cut_row, re_disentanglement};
use crate::disentangle::{DisentanglementDecision, DisentanglementPlan};
use crate::error::{AidError, Result};
use crate::salience::{
    compute_instruction_salience, compute_salience, compute_visual_salience, SalienceField,
};
use crate::trace::{
    aggregate_heads, AttentionTrace, HeadAggregatedTrace, HeadPolicy, Token, TokenLayout,
    TokenRole, INTERNAL_ROW_TOLERANCE,
};

// ---------------------------------------------------------------------------
// SplitMix64
// ---------------------------------------------------------------------------

/// SplitMix64 generator; the weight contract depends on its exact output.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in `[-0.1, 0.1)` from the high 53 bits.
    pub fn next_weight(&mut self) -> f64 {
        let unit = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        unit * 0.2 - 0.1
    }
}

// ---------------------------------------------------------------------------
// Config and weights
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            d_model: 16,
            num_heads: 2,
            num_layers: 2,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("num_layers", self.num_layers),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(AidError::InvalidConfig(format!(
                "{name} must be at least 1"
            )));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(AidError::InvalidConfig(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Row-major `d_model × d_model` projections of one attention block.
#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
}

/// Positional query/key biases of a planted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planting {
    pub gain: f64,
    pub target: usize,
    pub region: Range<usize>,
    pub prompt_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyConfig,
    /// `vocab_size × d_model`.
    embedding: Vec<f64>,
    layers: Vec<LayerWeights>,
    /// `d_model × vocab_size`.
    unembedding: Vec<f64>,
    planting: Option<Planting>,
}

pub fn build_model(config: ToyConfig) -> Result<ToyModel> {
    config.validate()?;
    let mut rng = SplitMix64::new(config.seed);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.next_weight()).collect() };
    let d = config.d_model;
    let embedding = draw(config.vocab_size * d);
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            wq: draw(d * d),
            wk: draw(d * d),
            wv: draw(d * d),
            wo: draw(d * d),
        })
        .collect();
    let unembedding = draw(d * config.vocab_size);
    Ok(ToyModel {
        config,
        embedding,
        layers,
        unembedding,
        planting: None,
    })
}

/// `x · W` for row-major `W` with `x.len()` rows.
fn matvec(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (i, xi) in x.iter().enumerate() {
        let row = &w[i * cols..(i + 1) * cols];
        for (o, wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for s in scores.iter_mut() {
        *s = libm::exp(*s - max);
    }
    let total: f64 = scores.iter().sum();
    for s in scores.iter_mut() {
        *s /= total;
    }
}

fn argmax_lowest(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

impl ToyModel {
    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn planting(&self) -> Option<&Planting> {
        self.planting.as_ref()
    }

    /// All weights in draw order.
    pub fn flat_weights(&self) -> Vec<f64> {
        let mut out = self.embedding.clone();
        for l in &self.layers {
            out.extend(&l.wq);
            out.extend(&l.wk);
            out.extend(&l.wv);
            out.extend(&l.wo);
        }
        out.extend(&self.unembedding);
        out
    }

    fn embed(&self, token: usize) -> Vec<f64> {
        let d = self.config.d_model;
        self.embedding[token * d..(token + 1) * d].to_vec()
    }

    /// Adds `gain` along head-dim coordinate `axis` of every head.
    fn add_axis(&self, v: &mut [f64], axis: usize, gain: f64) {
        let dk = self.config.head_dim();
        for h in 0..self.config.num_heads {
            v[h * dk + axis] += gain;
        }
    }

    fn apply_query_bias(&self, q: &mut [f64], pos: usize) {
        if let Some(p) = &self.planting {
            if pos == p.target {
                self.add_axis(q, 0, p.gain);
            } else if pos >= p.prompt_len {
                self.add_axis(q, 1, p.gain);
                self.add_axis(q, 0, p.gain / 2.0);
            }
        }
    }

    fn apply_key_bias(&self, k: &mut [f64], pos: usize) {
        if let Some(p) = &self.planting {
            if p.region.contains(&pos) {
                self.add_axis(k, 0, p.gain);
            } else if pos == p.target {
                self.add_axis(k, 1, p.gain);
            }
        }
    }

    fn project(&self, layer: usize, x: &[f64], pos: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.config.d_model;
        let w = &self.layers[layer];
        let mut q = matvec(x, &w.wq, d);
        let mut k = matvec(x, &w.wk, d);
        let v = matvec(x, &w.wv, d);
        self.apply_query_bias(&mut q, pos);
        self.apply_key_bias(&mut k, pos);
        (q, k, v)
    }

    /// Causal attention row of head `h` for query `q` over `keys`.
    fn attention_row(&self, q: &[f64], keys: &[Vec<f64>], h: usize) -> Vec<f64> {
        let dk = self.config.head_dim();
        let scale = (dk as f64).sqrt();
        let span = h * dk..(h + 1) * dk;
        let mut scores: Vec<f64> = keys
            .iter()
            .map(|k| {
                q[span.clone()]
                    .iter()
                    .zip(&k[span.clone()])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / scale
            })
            .collect();
        softmax_in_place(&mut scores);
        scores
    }

    /// Attention output of one position: `concat_h(a_h v_h) Wo`.
    fn attend(&self, layer: usize, rows: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
        let d = self.config.d_model;
        let dk = self.config.head_dim();
        let mut concat = vec![0.0; d];
        for (h, row) in rows.iter().enumerate() {
            for (a, v) in row.iter().zip(values) {
                for c in h * dk..(h + 1) * dk {
                    concat[c] += a * v[c];
                }
            }
        }
        matvec(&concat, &self.layers[layer].wo, d)
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        matvec(x, &self.unembedding, self.config.vocab_size)
    }

    /// Logits at every position by recomputing the whole sequence layer by
    /// layer, without a cache.
    pub fn forward_full(&self, tokens: &[usize]) -> Vec<Vec<f64>> {
        let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&t| self.embed(t)).collect();
        for layer in 0..self.config.num_layers {
            let projected: Vec<_> = xs
                .iter()
                .enumerate()
                .map(|(pos, x)| self.project(layer, x, pos))
                .collect();
            let keys: Vec<Vec<f64>> = projected.iter().map(|p| p.1.clone()).collect();
            let values: Vec<Vec<f64>> = projected.iter().map(|p| p.2.clone()).collect();
            for (pos, x) in xs.iter_mut().enumerate() {
                let rows: Vec<Vec<f64>> = (0..self.config.num_heads)
                    .map(|h| self.attention_row(&projected[pos].0, &keys[..=pos], h))
                    .collect();
                let y = self.attend(layer, &rows, &values[..=pos]);
                for (xi, yi) in x.iter_mut().zip(y) {
                    *xi += yi;
                }
            }
        }
        xs.iter().map(|x| self.logits(x)).collect()
    }
}

// ---------------------------------------------------------------------------
// Decode session
// ---------------------------------------------------------------------------

/// Image/instruction block sizes of a toy prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptLayout {
    pub n_image: usize,
    pub n_instruction: usize,
}

impl Default for PromptLayout {
    fn default() -> Self {
        Self {
            n_image: 4,
            n_instruction: 3,
        }
    }
}

impl PromptLayout {
    pub fn len(&self) -> usize {
        self.n_image + self.n_instruction
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_range(&self) -> Range<usize> {
        0..self.n_image
    }

    pub fn instruction_range(&self) -> Range<usize> {
        self.n_image..self.len()
    }

    /// Default instruction ids: the ids right after the reserved image ids.
    pub fn default_instruction_ids(&self) -> Vec<usize> {
        self.instruction_range().collect()
    }

    fn token_layout(&self) -> TokenLayout {
        let mut roles = vec![TokenRole::Image; self.n_image];
        roles.extend(std::iter::repeat_n(
            TokenRole::Instruction,
            self.n_instruction,
        ));
        TokenLayout::from_roles(roles).expect("non-empty prompt blocks")
    }
}

#[derive(Debug, Clone, Default)]
struct KvCache {
    /// `[layer][position]`.
    keys: Vec<Vec<Vec<f64>>>,
    values: Vec<Vec<Vec<f64>>>,
}

impl KvCache {
    fn new(layers: usize) -> Self {
        Self {
            keys: vec![Vec::new(); layers],
            values: vec![Vec::new(); layers],
        }
    }

    fn len(&self) -> usize {
        self.keys.first().map_or(0, Vec::len)
    }
}

/// A greedy decoding run over one prompt.  Installing a plan restarts the
/// session from the prompt, since hijacker rows live in the prefill.
#[derive(Debug, Clone)]
pub struct DecodeSession<'m> {
    model: &'m ToyModel,
    layout: PromptLayout,
    prompt: Vec<usize>,
    cache: KvCache,
    plan: Option<DisentanglementPlan>,
    tokens: Vec<usize>,
    /// `[position][layer][head]` rows recorded so far.
    rows: Vec<Vec<Vec<Vec<f64>>>>,
    logits: Vec<Vec<f64>>,
}

impl<'m> DecodeSession<'m> {
    /// `instruction_ids` must hold `layout.n_instruction` ids.
    pub fn new(
        model: &'m ToyModel,
        layout: PromptLayout,
        instruction_ids: &[usize],
    ) -> Result<Self> {
        let vocab = model.config.vocab_size;
        if layout.n_image == 0 || layout.n_instruction == 0 {
            return Err(AidError::InvalidConfig(
                "prompt needs image and instruction tokens".into(),
            ));
        }
        if instruction_ids.len() != layout.n_instruction {
            return Err(AidError::InvalidConfig(format!(
                "{} instruction ids for {} instruction positions",
                instruction_ids.len(),
                layout.n_instruction
            )));
        }
        if layout.n_image > vocab {
            return Err(AidError::InvalidConfig(format!(
                "{} image ids do not fit a vocabulary of {vocab}",
                layout.n_image
            )));
        }
        if let Some(id) = instruction_ids.iter().find(|&&id| id >= vocab) {
            return Err(AidError::InvalidConfig(format!(
                "token id {id} outside vocabulary of {vocab}"
            )));
        }
        let mut prompt: Vec<usize> = layout.image_range().collect();
        prompt.extend_from_slice(instruction_ids);
        Ok(Self {
            model,
            layout,
            prompt,
            cache: KvCache::new(model.config.num_layers),
            plan: None,
            tokens: Vec::new(),
            rows: Vec::new(),
            logits: Vec::new(),
        })
    }

    /// Installs (or clears) a plan and resets the session to the prompt.
    pub fn install_plan(&mut self, plan: Option<DisentanglementPlan>) -> Result<()> {
        if let Some(p) = &plan {
            p.validate(&self.layout.token_layout(), self.model.config.num_layers)?;
        }
        self.plan = plan;
        self.reset();
        Ok(())
    }

    pub fn installed_plan(&self) -> Option<&DisentanglementPlan> {
        self.plan.as_ref()
    }

    pub fn prompt(&self) -> &[usize] {
        &self.prompt
    }

    /// Positions consumed so far; always equals the cache length.
    pub fn consumed(&self) -> usize {
        debug_assert_eq!(self.cache.len(), self.tokens.len());
        self.cache.len()
    }

    /// Logits produced after each consumed position.
    pub fn logits_history(&self) -> &[Vec<f64>] {
        &self.logits
    }

    fn reset(&mut self) {
        self.cache = KvCache::new(self.model.config.num_layers);
        self.tokens.clear();
        self.rows.clear();
        self.logits.clear();
    }

    /// Mean-aggregated view of the prompt positions `0..end`, used to
    /// evaluate `Ins` for strict-mode hooks.
    fn prefix_view(&self, end: usize) -> HeadAggregatedTrace {
        let heads = self.model.config.num_heads as f64;
        let rows = (0..self.model.config.num_layers)
            .map(|l| {
                self.rows[..end]
                    .iter()
                    .map(|per_layer| {
                        let mut acc = vec![0.0; per_layer[l][0].len()];
                        for head_row in &per_layer[l] {
                            for (a, w) in acc.iter_mut().zip(head_row) {
                                *a += w;
                            }
                        }
                        acc.iter_mut().for_each(|a| *a /= heads);
                        acc
                    })
                    .collect()
            })
            .collect();
        let layout = self.layout.token_layout().prefix(end);
        let tokens = (0..end)
            .map(|index| Token {
                index,
                role: layout.roles()[index],
                text: None,
            })
            .collect();
        HeadAggregatedTrace::from_parts(layout, tokens, HeadPolicy::Mean, rows)
    }

    /// Keys to cut at each attention layer for the position about to be
    /// processed, or `None` when the position is not a hijacker.
    fn hook_keys(&self, pos: usize) -> Option<Vec<Vec<usize>>> {
        let plan = self.plan.as_ref()?;
        if !plan.hijackers.contains(&pos) {
            return None;
        }
        let layout = self.layout.token_layout();
        let ins = plan.strict.then(|| {
            let view = self.prefix_view(pos);
            let vis = compute_visual_salience(&view);
            compute_instruction_salience(&view, &vis)
        });
        let masked = plan.masked_layers(self.model.config.num_layers);
        Some(
            (0..self.model.config.num_layers)
                .map(|layer| {
                    if !masked.contains(&layer) {
                        return Vec::new();
                    }
                    let below = ins.as_ref().map(|t| t.layer(layer));
                    plan.keys_for(&layout, pos, below)
                })
                .collect(),
        )
    }

    /// Feeds one token through every layer, extending the cache.
    fn feed(&mut self, token: usize) -> Vec<f64> {
        let model = self.model;
        let pos = self.cache.len();
        let hook = self.hook_keys(pos);
        let mut x = model.embed(token);
        let mut recorded = Vec::with_capacity(model.config.num_layers);
        for layer in 0..model.config.num_layers {
            let (q, k, v) = model.project(layer, &x, pos);
            self.cache.keys[layer].push(k);
            self.cache.values[layer].push(v);
            let rows: Vec<Vec<f64>> = (0..model.config.num_heads)
                .map(|h| {
                    let mut row = model.attention_row(&q, &self.cache.keys[layer], h);
                    if let Some(keys) = &hook {
                        cut_row(&mut row, &keys[layer], pos);
                    }
                    row
                })
                .collect();
            let y = model.attend(layer, &rows, &self.cache.values[layer]);
            for (xi, yi) in x.iter_mut().zip(y) {
                *xi += yi;
            }
            recorded.push(rows);
        }
        let logits = model.logits(&x);
        self.tokens.push(token);
        self.rows.push(recorded);
        self.logits.push(logits.clone());
        logits
    }

    fn recorded_trace(&self) -> AttentionTrace {
        let gs = self.prompt.len();
        let cfg = &self.model.config;
        let tokens = self
            .tokens
            .iter()
            .enumerate()
            .map(|(index, &id)| {
                let (role, text) = if index < self.layout.n_image {
                    (TokenRole::Image, format!("<img{index}>"))
                } else if index < gs {
                    (TokenRole::Instruction, format!("tok{id}"))
                } else {
                    (TokenRole::Generated, format!("tok{id}"))
                };
                Token {
                    index,
                    role,
                    text: Some(text),
                }
            })
            .collect();
        let prefill = (0..cfg.num_layers)
            .map(|l| {
                (0..cfg.num_heads)
                    .map(|h| self.rows[..gs].iter().map(|r| r[l][h].clone()).collect())
                    .collect()
            })
            .collect();
        let decode = self.rows[gs..].to_vec();
        let meta = serde_json::json!({
            "source": "toydec",
            "config": cfg,
            "token_ids": self.tokens,
            "plan": self.plan,
        });
        AttentionTrace::with_tolerance(
            cfg.num_layers,
            cfg.num_heads,
            tokens,
            prefill,
            decode,
            Some(meta),
            INTERNAL_ROW_TOLERANCE,
        )
        .expect("recorded rows are causal and row-stochastic")
    }
}

/// Restarts `session` from its prompt and greedily decodes `steps` tokens.
/// Returns the generated ids and the recorded trace, whose generated block
/// holds exactly those tokens.
pub fn greedy_decode(
    session: &mut DecodeSession<'_>,
    steps: usize,
) -> Result<(Vec<usize>, AttentionTrace)> {
    let requested = session.prompt.len() + steps;
    let max = session.model.config.max_seq_len;
    if requested > max {
        return Err(AidError::LengthExceeded { requested, max });
    }
    session.reset();
    let prompt = session.prompt.clone();
    let mut logits = Vec::new();
    for &t in &prompt {
        logits = session.feed(t);
    }
    let mut generated = Vec::with_capacity(steps);
    for _ in 0..steps {
        let next = argmax_lowest(&logits);
        generated.push(next);
        logits = session.feed(next);
    }
    Ok((generated, session.recorded_trace()))
}

// ---------------------------------------------------------------------------
// Planted hijacker
// ---------------------------------------------------------------------------

pub const PLANT_TARGET_REGION_MASS: f64 = 0.9;
pub const PLANT_GENERATED_TARGET_MASS: f64 = 0.5;
pub const PLANT_MAX_GAIN: f64 = (1u64 << 20) as f64;

/// Scenario a planted model is tuned against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantSpec {
    pub layout: PromptLayout,
    pub instruction_ids: Vec<usize>,
    /// Absolute position of the planted hijacker.
    pub target: usize,
    pub steps: usize,
}

impl PlantSpec {
    /// The image sub-region the target is steered onto: the last quarter of
    /// the image block, at least one position.
    pub fn region(&self) -> Range<usize> {
        let n = self.layout.n_image;
        let width = (n / 4).max(1);
        n - width..n
    }
}

/// Minimum, over layers and heads, of the target's mass on the region and
/// of each generated token's mass on the target.
pub fn planted_target_masses(trace: &AttentionTrace, spec: &PlantSpec) -> (f64, f64) {
    let region = spec.region();
    let mut region_mass = f64::INFINITY;
    let mut target_mass = f64::INFINITY;
    for l in 0..trace.num_layers() {
        for h in 0..trace.num_heads() {
            let row = trace.row(l, h, spec.target);
            region_mass = region_mass.min(row[region.clone()].iter().sum());
            for i in trace.layout().generated_range() {
                target_mass = target_mass.min(trace.row(l, h, i)[spec.target]);
            }
        }
    }
    (region_mass, target_mass)
}

/// Builds a model in which instruction token `spec.target` concentrates its
/// attention on a small image region while every generated token attends
/// to it.  The planting gain doubles from 1 until both mass thresholds hold
/// on the greedy decode of `spec`.
///
/// With gain `g`, head-local unit directions `u` and `v`, and `R` the region:
///
/// | position        | query bias      | key bias |
/// |-----------------|-----------------|----------|
/// | `R`             |                 | `g·u`    |
/// | target          | `g·u`           | `g·v`    |
/// | generated       | `g·v + (g/2)·u` |          |
///
/// Generated tokens therefore favour the target first and the region
/// second, so their image attention takes the target's shape.
pub fn plant_hijacker(config: ToyConfig, spec: &PlantSpec) -> Result<ToyModel> {
    let base = build_model(config)?;
    if !spec.layout.instruction_range().contains(&spec.target) {
        return Err(AidError::IndexOutOfRange(format!(
            "plant target {} outside instruction range {:?}",
            spec.target,
            spec.layout.instruction_range()
        )));
    }
    if config.head_dim() < 2 {
        return Err(AidError::PlantingFailed(
            "head dimension must be at least 2".into(),
        ));
    }
    let mut gain = 1.0;
    let mut last = (0.0, 0.0);
    while gain <= PLANT_MAX_GAIN {
        let model = ToyModel {
            planting: Some(Planting {
                gain,
                target: spec.target,
                region: spec.region(),
                prompt_len: spec.layout.len(),
            }),
            ..base.clone()
        };
        let mut session = DecodeSession::new(&model, spec.layout, &spec.instruction_ids)?;
        let (_, trace) = greedy_decode(&mut session, spec.steps)?;
        last = planted_target_masses(&trace, spec);
        if last.0 >= PLANT_TARGET_REGION_MASS && last.1 >= PLANT_GENERATED_TARGET_MASS {
            return Ok(model);
        }
        gain *= 2.0;
    }
    Err(AidError::PlantingFailed(format!(
        "thresholds unmet at gain {PLANT_MAX_GAIN}: region mass {:.4}, generated mass {:.4}",
        last.0, last.1
    )))
}

// ---------------------------------------------------------------------------
// Detect → disentangle → re-disentangle loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AidParams {
    pub k: usize,
    /// Defaults to the model depth.
    pub layer_cap: Option<usize>,
    pub visual_fraction: f64,
    pub strict: bool,
    pub probe_steps: usize,
    /// Total tokens to generate.
    pub steps: usize,
    pub head_policy: HeadPolicy,
    /// Re-run detection every this many generated tokens of the final
    /// continuation; `None` detects once after the probe.
    pub reevaluate_every: Option<usize>,
}

impl Default for AidParams {
    fn default() -> Self {
        Self {
            k: crate::detector::DEFAULT_HIJACKER_COUNT,
            layer_cap: None,
            visual_fraction: crate::disentangle::DEFAULT_VISUAL_FRACTION,
            strict: false,
            probe_steps: 1,
            steps: 4,
            head_policy: HeadPolicy::Mean,
            reevaluate_every: None,
        }
    }
}

/// One detection/decision round.
#[derive(Debug, Clone)]
pub struct AidEvaluation {
    /// Generated tokens visible to this round.
    pub generated: usize,
    pub report: HijackerReport,
    pub plan: DisentanglementPlan,
    pub unmasked: SalienceField,
    pub masked: SalienceField,
    pub decision: DisentanglementDecision,
    /// Whether this round changed the installed plan (and restarted).
    pub restarted: bool,
}

#[derive(Debug, Clone)]
pub struct AidOutcome {
    pub baseline_tokens: Vec<usize>,
    pub baseline_trace: AttentionTrace,
    /// The probe round first, then any re-evaluations.
    pub evaluations: Vec<AidEvaluation>,
    pub installed_plan: Option<DisentanglementPlan>,
    pub final_tokens: Vec<usize>,
    pub final_trace: AttentionTrace,
}

impl AidOutcome {
    pub fn plan(&self) -> &DisentanglementPlan {
        &self.evaluations[0].plan
    }

    pub fn decision(&self) -> &DisentanglementDecision {
        &self.evaluations[0].decision
    }
}

fn evaluate(trace: &AttentionTrace, params: &AidParams) -> Result<AidEvaluation> {
    let agg = aggregate_heads(trace, params.head_policy);
    let unmasked = compute_salience(&agg)?;
    let report = detect_hijackers(&unmasked, params.k)?;
    let plan = build_plan(
        &report,
        params.layer_cap,
        params.visual_fraction,
        params.strict,
    )?;
    let masked = compute_salience(&apply_plan(&agg, &plan)?)?;
    let decision = re_disentanglement(&unmasked, &masked)?;
    Ok(AidEvaluation {
        generated: trace.num_decode_steps(),
        report,
        plan,
        unmasked,
        masked,
        decision,
        restarted: false,
    })
}

/// Probe, detect, mask, decide, and restart with the plan installed when
/// the decision keeps it.
pub fn run_aid(
    model: &ToyModel,
    layout: PromptLayout,
    instruction_ids: &[usize],
    params: &AidParams,
) -> Result<AidOutcome> {
    if params.probe_steps == 0 {
        return Err(AidError::InvalidConfig(
            "probe_steps must be at least 1".into(),
        ));
    }
    if params.reevaluate_every == Some(0) {
        return Err(AidError::InvalidConfig(
            "re-evaluation interval must be at least 1".into(),
        ));
    }
    let mut session = DecodeSession::new(model, layout, instruction_ids)?;
    let (baseline_tokens, baseline_trace) = greedy_decode(&mut session, params.steps)?;
    let (_, probe_trace) = greedy_decode(&mut session, params.probe_steps)?;

    let mut first = evaluate(&probe_trace, params)?;
    let mut installed = None;
    let (mut final_tokens, mut final_trace) = (baseline_tokens.clone(), baseline_trace.clone());
    if first.decision.keep {
        installed = Some(first.plan.clone());
        session.install_plan(installed.clone())?;
        (final_tokens, final_trace) = greedy_decode(&mut session, params.steps)?;
        first.restarted = true;
    }
    let mut evaluations = vec![first];

    if let Some(every) = params.reevaluate_every {
        let mut checkpoint = params.probe_steps + every;
        while checkpoint < params.steps {
            let mut round = evaluate(&final_trace.truncate_decode(checkpoint), params)?;
            if round.decision.keep {
                let mut merged = installed.clone().unwrap_or_else(|| round.plan.clone());
                let before = merged.hijackers.len();
                for h in &round.plan.hijackers {
                    if !merged.hijackers.contains(h) {
                        merged.hijackers.push(*h);
                    }
                }
                if installed.is_none() || merged.hijackers.len() != before {
                    installed = Some(merged);
                    session.install_plan(installed.clone())?;
                    (final_tokens, final_trace) = greedy_decode(&mut session, params.steps)?;
                    round.restarted = true;
                }
            }
            evaluations.push(round);
            checkpoint += every;
        }
    }

    Ok(AidOutcome {
        baseline_tokens,
        baseline_trace,
        evaluations,
        installed_plan: installed,
        final_tokens,
        final_trace,
    })
}
