// SPDX-License-Identifier: MIT OR Apache-2.0

//! Path-enumeration oracle for the salience recursions.
//!
//! Every recursion is unrolled into its literal sum tree with no
//! memoization: a walk from the queried node down to the base cases
//! multiplies the edge coefficients it crosses, and each base case reached
//! adds `product × base value` to the total.  The result is the same
//! quantity as [`crate::salience`] computes layer by layer, summed in a
//! completely different association order.

use crate::error::{AidError, Result};
use crate::salience::{source_layer, weight_layer, GeneratedSalience, LayerTable, SalienceField};
use crate::trace::HeadAggregatedTrace;

pub const MAX_LAYERS: usize = 4;
pub const MAX_TOKENS: usize = 16;
pub const MAX_DECODE_STEPS: usize = 4;

pub fn check_caps(layers: usize, tokens: usize, decode_steps: usize) -> Result<()> {
    if layers > MAX_LAYERS {
        return Err(AidError::InstanceTooLarge(format!(
            "{layers} layers exceeds cap {MAX_LAYERS}"
        )));
    }
    if tokens > MAX_TOKENS {
        return Err(AidError::InstanceTooLarge(format!(
            "{tokens} tokens exceeds cap {MAX_TOKENS}"
        )));
    }
    if decode_steps > MAX_DECODE_STEPS {
        return Err(AidError::InstanceTooLarge(format!(
            "{decode_steps} decode steps exceeds cap {MAX_DECODE_STEPS}"
        )));
    }
    Ok(())
}

struct Walker<'a> {
    trace: &'a HeadAggregatedTrace,
}

impl Walker<'_> {
    fn w(&self, layer: usize, query: usize, key: usize) -> f64 {
        self.trace.row(weight_layer(layer), query)[key]
    }

    fn vis(&self, layer: usize, t: usize, product: f64, total: &mut f64) {
        if layer == 0 {
            *total += product;
            return;
        }
        let img = self.trace.layout().image_range();
        for j in img.start..=t {
            let w = self.w(layer, t, j);
            if w > 0.0 {
                self.vis(layer - 1, j, product * (1.0 + w), total);
            }
        }
    }

    fn ins(&self, layer: usize, t: usize, product: f64, total: &mut f64) {
        // Base case Ins^0 = 0 contributes nothing.
        if layer == 0 {
            return;
        }
        let layout = self.trace.layout();
        for j in layout.image_range() {
            let w = self.w(layer, t, j);
            if w > 0.0 {
                self.vis(layer - 1, j, product * w, total);
            }
        }
        for j in layout.instruction_range().start..=t {
            let w = self.w(layer, t, j);
            if w > 0.0 {
                self.ins(layer - 1, j, product * (1.0 + w), total);
            }
        }
    }

    fn gen(&self, i: usize, layer: usize, t: usize, product: f64, total: &mut f64) {
        self.ins(source_layer(layer), t, product * self.w(layer, i, t), total);
        if layer > 0 {
            let self_w = self.w(layer, i, i);
            self.gen(i, layer - 1, t, product * (1.0 + self_w), total);
        }
        for j in self.trace.layout().generated_start()..i {
            self.gen(j, layer, t, product * self.w(layer, i, j), total);
        }
    }

    fn image(&self, i: usize, layer: usize, product: f64, total: &mut f64) {
        for j in self.trace.layout().image_range() {
            self.vis(source_layer(layer), j, product * self.w(layer, i, j), total);
        }
        if layer > 0 {
            let self_w = self.w(layer, i, i);
            self.image(i, layer - 1, product * (1.0 + self_w), total);
        }
    }
}

fn sum_paths(f: impl FnOnce(&mut f64)) -> f64 {
    let mut total = 0.0;
    f(&mut total);
    total
}

/// Computes a [`SalienceField`] by path enumeration.  Fails with
/// `InstanceTooLarge` beyond the caps.
pub fn oracle_salience(trace: &HeadAggregatedTrace) -> Result<SalienceField> {
    let layout = trace.layout();
    check_caps(trace.num_layers(), layout.len(), layout.num_generated())?;
    if layout.num_generated() == 0 {
        return Err(AidError::NoGeneratedTokens);
    }
    let walker = Walker { trace };
    let depth = trace.num_layers();
    let img = layout.image_range();
    let instr = layout.instruction_range();

    let vis = (0..=depth)
        .map(|l| {
            img.clone()
                .map(|t| sum_paths(|s| walker.vis(l, t, 1.0, s)))
                .collect()
        })
        .collect();
    let ins = (0..=depth)
        .map(|l| {
            instr
                .clone()
                .map(|t| sum_paths(|s| walker.ins(l, t, 1.0, s)))
                .collect()
        })
        .collect();
    let gen = layout
        .generated_range()
        .map(|i| GeneratedSalience {
            position: i,
            instruction: (0..=depth)
                .map(|l| {
                    instr
                        .clone()
                        .map(|t| sum_paths(|s| walker.gen(i, l, t, 1.0, s)))
                        .collect()
                })
                .collect(),
            image: (0..=depth)
                .map(|l| sum_paths(|s| walker.image(i, l, 1.0, s)))
                .collect(),
        })
        .collect();

    Ok(SalienceField {
        vis: LayerTable::from_values(img.start, vis),
        ins: LayerTable::from_values(instr.start, ins),
        gen,
    })
}
