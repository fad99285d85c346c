// SPDX-License-Identifier: MIT OR Apache-2.0

//! Visual-information recursions over a head-aggregated trace.
//!
//! Salience layers run `0..=L`.  Layer 0 is the base case; salience layer
//! `l > 0` is driven by the weights of attention layer `l - 1`.  The
//! generated-token channels also need weights at salience layer 0, which
//! come from attention layer 0.
//!
//! A key contributes to a block sum only when its weight is positive: an
//! attention entry of exactly zero is an absent edge.  Softmax rows are
//! strictly positive, so this only matters for edited (masked) traces.
//!
//! | quantity            | base (`l = 0`)        | recursion (`l > 0`)                                        |
//! |---------------------|-----------------------|------------------------------------------------------------|
//! | `vis[l][t]`         | 1                     | `Σ_img (1 + w) vis[l-1]`                                   |
//! | `ins[l][t]`         | 0                     | `Σ_img w vis[l-1] + Σ_ins≤t (1 + w) ins[l-1]`               |
//! | `gen_i[l][t]`       | `w_t ins[0] + Σ_j<i w_j gen_j[0]` | `w_t ins[l] + (1 + w_i) gen_i[l-1] + Σ_j<i w_j gen_j[l]` |
//! | `gen_i[l][-1]`      | `Σ_img w vis[0]`      | `Σ_img w vis[l] + (1 + w_i) gen_i[l-1][-1]`                 |
//!
//! With the `consistent-layers` feature the `l > 0` generated rows read
//! `ins[l-1]` and `vis[l-1]` instead.

use std::collections::BTreeMap;
use std::ops::Range;

use serde_json::{json, Value};

use crate::error::{AidError, Result};
use crate::trace::HeadAggregatedTrace;

/// Attention layer whose weights drive salience layer `l`.
pub(crate) fn weight_layer(l: usize) -> usize {
    l.saturating_sub(1)
}

/// Salience layer of `ins`/`vis` read by generated-token layer `l`.
pub(crate) fn source_layer(l: usize) -> usize {
    if cfg!(feature = "consistent-layers") {
        l.saturating_sub(1)
    } else {
        l
    }
}

/// Per-layer values over a contiguous block of positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTable {
    start: usize,
    values: Vec<Vec<f64>>,
}

impl LayerTable {
    pub fn positions(&self) -> Range<usize> {
        let width = self.values.first().map_or(0, Vec::len);
        self.start..self.start + width
    }

    pub fn num_layers(&self) -> usize {
        self.values.len()
    }

    /// Value at salience `layer` for absolute `position`.
    pub fn at(&self, layer: usize, position: usize) -> f64 {
        self.values[layer][position - self.start]
    }

    pub fn layer(&self, layer: usize) -> &[f64] {
        &self.values[layer]
    }

    pub(crate) fn from_values(start: usize, values: Vec<Vec<f64>>) -> Self {
        Self { start, values }
    }
}

/// Contributions to one generated token.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSalience {
    pub position: usize,
    /// `[layer][instruction offset]`.
    pub instruction: Vec<Vec<f64>>,
    /// Image-driven channel (source `-1`) per layer.
    pub image: Vec<f64>,
}

/// All salience quantities of one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct SalienceField {
    pub vis: LayerTable,
    pub ins: LayerTable,
    pub gen: Vec<GeneratedSalience>,
}

pub fn compute_visual_salience(trace: &HeadAggregatedTrace) -> LayerTable {
    let img = trace.layout().image_range();
    let mut values = vec![vec![1.0; img.len()]];
    for l in 1..=trace.num_layers() {
        let prev = &values[l - 1];
        let layer: Vec<f64> = img
            .clone()
            .map(|t| {
                let row = trace.row(weight_layer(l), t);
                let mut acc = 0.0;
                for j in img.start..=t {
                    let w = row[j];
                    if w > 0.0 {
                        acc += (1.0 + w) * prev[j - img.start];
                    }
                }
                acc
            })
            .collect();
        values.push(layer);
    }
    LayerTable {
        start: img.start,
        values,
    }
}

pub fn compute_instruction_salience(trace: &HeadAggregatedTrace, vis: &LayerTable) -> LayerTable {
    let img = trace.layout().image_range();
    let ins = trace.layout().instruction_range();
    let mut values = vec![vec![0.0; ins.len()]];
    for l in 1..=trace.num_layers() {
        let prev = &values[l - 1];
        let layer: Vec<f64> = ins
            .clone()
            .map(|t| {
                let row = trace.row(weight_layer(l), t);
                let mut acc = 0.0;
                for j in img.clone() {
                    let w = row[j];
                    if w > 0.0 {
                        acc += w * vis.at(l - 1, j);
                    }
                }
                for j in ins.start..=t {
                    let w = row[j];
                    if w > 0.0 {
                        acc += (1.0 + w) * prev[j - ins.start];
                    }
                }
                acc
            })
            .collect();
        values.push(layer);
    }
    LayerTable {
        start: ins.start,
        values,
    }
}

/// Instruction-sourced contributions, `[generated offset][layer][instruction offset]`.
pub fn compute_generated_contributions(
    trace: &HeadAggregatedTrace,
    _vis: &LayerTable,
    ins: &LayerTable,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let layout = trace.layout();
    if layout.num_generated() == 0 {
        return Err(AidError::NoGeneratedTokens);
    }
    let instr = layout.instruction_range();
    let generated: Vec<usize> = layout.generated_range().collect();
    let top = trace.num_layers();
    let mut out: Vec<Vec<Vec<f64>>> = Vec::with_capacity(generated.len());

    for (gi, &pos) in generated.iter().enumerate() {
        let mut layers: Vec<Vec<f64>> = Vec::with_capacity(top + 1);
        for l in 0..=top {
            let row = trace.row(weight_layer(l), pos);
            let self_w = row[pos];
            let values: Vec<f64> = instr
                .clone()
                .map(|t| {
                    let k = t - instr.start;
                    let mut acc = row[t] * ins.at(source_layer(l), t);
                    if l > 0 {
                        acc += (1.0 + self_w) * layers[l - 1][k];
                    }
                    for (gj, &earlier) in generated[..gi].iter().enumerate() {
                        acc += row[earlier] * out[gj][l][k];
                    }
                    acc
                })
                .collect();
            layers.push(values);
        }
        out.push(layers);
    }
    Ok(out)
}

/// Image-sourced contribution (source `-1`), `[generated offset][layer]`.
pub fn compute_image_contribution(
    trace: &HeadAggregatedTrace,
    vis: &LayerTable,
) -> Result<Vec<Vec<f64>>> {
    let layout = trace.layout();
    if layout.num_generated() == 0 {
        return Err(AidError::NoGeneratedTokens);
    }
    let img = layout.image_range();
    Ok(layout
        .generated_range()
        .map(|pos| {
            let mut layers: Vec<f64> = Vec::with_capacity(trace.num_layers() + 1);
            for l in 0..=trace.num_layers() {
                let row = trace.row(weight_layer(l), pos);
                let mut acc = 0.0;
                for j in img.clone() {
                    acc += row[j] * vis.at(source_layer(l), j);
                }
                if l > 0 {
                    acc += (1.0 + row[pos]) * layers[l - 1];
                }
                layers.push(acc);
            }
            layers
        })
        .collect())
}

/// Runs all four recursions.
pub fn compute_salience(trace: &HeadAggregatedTrace) -> Result<SalienceField> {
    let vis = compute_visual_salience(trace);
    let ins = compute_instruction_salience(trace, &vis);
    let instruction = compute_generated_contributions(trace, &vis, &ins)?;
    let image = compute_image_contribution(trace, &vis)?;
    let gen = trace
        .layout()
        .generated_range()
        .zip(instruction.into_iter().zip(image))
        .map(|(position, (instruction, image))| GeneratedSalience {
            position,
            instruction,
            image,
        })
        .collect();
    Ok(SalienceField { vis, ins, gen })
}

/// Relative deviation used when comparing two salience values.
pub fn relative_deviation(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs())
}

impl SalienceField {
    /// Top salience layer `L`.
    pub fn top_layer(&self) -> usize {
        self.vis.num_layers() - 1
    }

    pub fn instruction_positions(&self) -> Range<usize> {
        self.ins.positions()
    }

    pub fn image_positions(&self) -> Range<usize> {
        self.vis.positions()
    }

    pub fn num_generated(&self) -> usize {
        self.gen.len()
    }

    /// `Gen_i^L(t)` for generated offset `i` and absolute instruction position `t`.
    pub fn gen_top(&self, i: usize, t: usize) -> f64 {
        let g = &self.gen[i];
        g.instruction[self.top_layer()][t - self.ins.start]
    }

    /// `Gen_i^L(-1)`.
    pub fn image_top(&self, i: usize) -> f64 {
        self.gen[i].image[self.top_layer()]
    }

    /// `Σ_i Gen_i^L(t)` for every instruction position, in position order.
    pub fn instruction_totals(&self) -> Vec<(usize, f64)> {
        self.instruction_positions()
            .map(|t| {
                let total = (0..self.gen.len()).map(|i| self.gen_top(i, t)).sum();
                (t, total)
            })
            .collect()
    }

    /// Whether `other` was computed over the same layout and depth.
    pub fn same_layout(&self, other: &SalienceField) -> bool {
        self.top_layer() == other.top_layer()
            && self.image_positions() == other.image_positions()
            && self.instruction_positions() == other.instruction_positions()
            && self.gen.len() == other.gen.len()
            && self
                .gen
                .iter()
                .zip(&other.gen)
                .all(|(a, b)| a.position == b.position)
    }

    /// Largest entry-wise relative deviation from `other`, or `None` when
    /// the layouts differ.
    pub fn max_relative_deviation(&self, other: &SalienceField) -> Option<f64> {
        if !self.same_layout(other) {
            return None;
        }
        let tables = |f: &SalienceField| -> Vec<f64> {
            let mut v: Vec<f64> = Vec::new();
            v.extend(f.vis.values.iter().flatten());
            v.extend(f.ins.values.iter().flatten());
            for g in &f.gen {
                v.extend(g.instruction.iter().flatten());
                v.extend(&g.image);
            }
            v
        };
        Some(
            tables(self)
                .into_iter()
                .zip(tables(other))
                .map(|(a, b)| relative_deviation(a, b))
                .fold(0.0, f64::max),
        )
    }

    /// Iterator over every stored value.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.vis
            .values
            .iter()
            .flatten()
            .chain(self.ins.values.iter().flatten())
            .chain(
                self.gen
                    .iter()
                    .flat_map(|g| g.instruction.iter().flatten().chain(&g.image)),
            )
            .copied()
    }

    /// JSON report.  `vis` and `ins` carry every layer; `gen` maps each
    /// generated position to its top-layer contributions keyed by
    /// instruction position, with `"-1"` for the image channel.
    /// `per_layer` adds a `gen_layers` dump with the same keys.
    pub fn to_report(&self, per_layer: bool) -> Value {
        let gen_map = |layer: usize| -> BTreeMap<String, BTreeMap<String, f64>> {
            self.gen
                .iter()
                .map(|g| {
                    let mut sources: BTreeMap<String, f64> = self
                        .instruction_positions()
                        .map(|t| (t.to_string(), g.instruction[layer][t - self.ins.start]))
                        .collect();
                    sources.insert("-1".into(), g.image[layer]);
                    (g.position.to_string(), sources)
                })
                .collect()
        };
        let mut report = json!({
            "num_layers": self.top_layer(),
            "image_positions": [self.vis.start, self.vis.positions().end],
            "instruction_positions": [self.ins.start, self.ins.positions().end],
            "vis": self.vis.values,
            "ins": self.ins.values,
            "gen": gen_map(self.top_layer()),
        });
        if per_layer {
            let layers: Vec<_> = (0..=self.top_layer()).map(gen_map).collect();
            report["gen_layers"] = json!(layers);
        }
        report
    }
}
