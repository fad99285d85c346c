// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention cut-off for detected hijackers and the keep/revert decision.
//!
//! A [`DisentanglementPlan`] names the hijacker rows to edit, how many
//! layers to edit (`layer_cap`), and which share of the image block to cut
//! (`visual_fraction`, taken from the first image position onward).  In
//! strict mode a hijacker row also loses its edges to non-hijacker
//! instruction tokens that already carry visual information.
//!
//! `layer_cap` counts salience layers: a cap of `c` edits attention layers
//! `0..c`, which drive salience layers `1..=c`.  A cap of `L` edits every
//! layer; a cap of 0 edits nothing.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::detector::{detect_hijackers, HijackerReport};
use crate::error::{AidError, Result};
use crate::salience::{
    compute_instruction_salience, compute_salience, compute_visual_salience, SalienceField,
};
use crate::trace::{HeadAggregatedTrace, TokenLayout};

pub const DEFAULT_VISUAL_FRACTION: f64 = 1.0;

/// Absorbs binary rounding when a decimal fraction times the block length
/// lands a hair above an integer.
const CEIL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementPlan {
    pub hijackers: Vec<usize>,
    pub layer_cap: usize,
    pub visual_fraction: f64,
    pub strict: bool,
}

/// Builds a plan from a detection report.  `layer_cap` defaults to the
/// trace depth.
pub fn build_plan(
    report: &HijackerReport,
    layer_cap: Option<usize>,
    visual_fraction: f64,
    strict: bool,
) -> Result<DisentanglementPlan> {
    if report.hijackers.is_empty() {
        return Err(AidError::EmptyHijackerSet);
    }
    if !(0.0..=1.0).contains(&visual_fraction) {
        return Err(AidError::InvalidFraction(visual_fraction));
    }
    let layer_cap = layer_cap.unwrap_or(report.num_layers);
    if layer_cap > report.num_layers {
        return Err(AidError::IndexOutOfRange(format!(
            "layer cap {layer_cap} beyond {} layers",
            report.num_layers
        )));
    }
    Ok(DisentanglementPlan {
        hijackers: report.hijackers.clone(),
        layer_cap,
        visual_fraction,
        strict,
    })
}

impl DisentanglementPlan {
    /// Image keys cut from every hijacker row: the first
    /// `⌈visual_fraction · |image block|⌉` image positions.
    pub fn masked_image_keys(&self, layout: &TokenLayout) -> Range<usize> {
        let img = layout.image_range();
        let n = img.len();
        let count = ((self.visual_fraction * n as f64) - CEIL_SLACK)
            .ceil()
            .max(0.0) as usize;
        img.start..img.start + count.min(n)
    }

    /// Attention layers edited by this plan.
    pub fn masked_layers(&self, num_layers: usize) -> Range<usize> {
        0..self.layer_cap.min(num_layers)
    }

    /// Whether applying the plan can change anything.
    pub fn is_identity(&self, layout: &TokenLayout) -> bool {
        self.layer_cap == 0 || (self.masked_image_keys(layout).is_empty() && !self.strict)
    }

    pub fn validate(&self, layout: &TokenLayout, num_layers: usize) -> Result<()> {
        if self.hijackers.is_empty() {
            return Err(AidError::EmptyHijackerSet);
        }
        if !(0.0..=1.0).contains(&self.visual_fraction) {
            return Err(AidError::InvalidFraction(self.visual_fraction));
        }
        let ins = layout.instruction_range();
        if let Some(h) = self.hijackers.iter().find(|h| !ins.contains(h)) {
            return Err(AidError::IndexOutOfRange(format!(
                "hijacker {h} outside instruction range {ins:?}"
            )));
        }
        if self.layer_cap > num_layers {
            return Err(AidError::IndexOutOfRange(format!(
                "layer cap {} beyond {num_layers} layers",
                self.layer_cap
            )));
        }
        Ok(())
    }

    /// Keys cut from hijacker `h`'s row at one attention layer.
    /// `ins_below` holds `Ins` at the salience layer feeding that attention
    /// layer (indexed by instruction offset); it is consulted only in strict
    /// mode.
    pub(crate) fn keys_for(
        &self,
        layout: &TokenLayout,
        h: usize,
        ins_below: Option<&[f64]>,
    ) -> Vec<usize> {
        let mut keys: Vec<usize> = self.masked_image_keys(layout).collect();
        if self.strict {
            if let Some(ins) = ins_below {
                let start = layout.instruction_range().start;
                keys.extend(
                    (start..h).filter(|j| !self.hijackers.contains(j) && ins[j - start] > 0.0),
                );
            }
        }
        keys
    }
}

/// Zeroes `keys` in `row` and renormalizes.  A row left with no mass
/// routes everything to `self_index`.  Rows whose keys already hold zero
/// are left untouched, which keeps the edit idempotent.
pub(crate) fn cut_row(row: &mut [f64], keys: &[usize], self_index: usize) {
    if keys.iter().all(|&k| row[k] == 0.0) {
        return;
    }
    for &k in keys {
        row[k] = 0.0;
    }
    let total: f64 = row.iter().sum();
    if total > 0.0 {
        row.iter_mut().for_each(|w| *w /= total);
    } else {
        row[self_index] = 1.0;
    }
}

/// Returns a copy of `trace` with the plan's cut-off applied to every
/// hijacker row at the masked layers.  All other rows are copied as is.
pub fn apply_plan(
    trace: &HeadAggregatedTrace,
    plan: &DisentanglementPlan,
) -> Result<HeadAggregatedTrace> {
    plan.validate(trace.layout(), trace.num_layers())?;
    let mut out = trace.clone();
    let layout = trace.layout().clone();
    for layer in plan.masked_layers(trace.num_layers()) {
        // Ins at salience layer `layer` depends only on attention layers
        // below `layer`, which are already edited.
        let ins_below = plan.strict.then(|| {
            let vis = compute_visual_salience(&out);
            compute_instruction_salience(&out, &vis)
                .layer(layer)
                .to_vec()
        });
        for &h in &plan.hijackers {
            let keys = plan.keys_for(&layout, h, ins_below.as_deref());
            cut_row(out.row_mut(layer, h), &keys, h);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioAudit {
    pub position: usize,
    pub unmasked: f64,
    pub masked: f64,
}

/// Outcome of the keep/revert test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementDecision {
    pub delta: f64,
    pub keep: bool,
    pub per_token_ratios: Vec<RatioAudit>,
}

/// `Σ_t Gen_i^L(t) / Gen_i^L(-1)`, with a zero denominator giving 0.
fn ratio_sum(field: &SalienceField, i: usize) -> f64 {
    let denom = field.image_top(i);
    field
        .instruction_positions()
        .map(|t| {
            if denom == 0.0 {
                0.0
            } else {
                field.gen_top(i, t) / denom
            }
        })
        .sum()
}

/// Compares instruction-to-image salience ratios before and after masking.
/// The mask is kept only when the ratio sum strictly decreases.
pub fn re_disentanglement(
    unmasked: &SalienceField,
    masked: &SalienceField,
) -> Result<DisentanglementDecision> {
    if !unmasked.same_layout(masked) {
        return Err(AidError::LayoutMismatch);
    }
    let per_token_ratios: Vec<RatioAudit> = (0..unmasked.num_generated())
        .map(|i| RatioAudit {
            position: unmasked.gen[i].position,
            unmasked: ratio_sum(unmasked, i),
            masked: ratio_sum(masked, i),
        })
        .collect();
    let before: f64 = per_token_ratios.iter().map(|r| r.unmasked).sum();
    let after: f64 = per_token_ratios.iter().map(|r| r.masked).sum();
    let delta = before - after;
    Ok(DisentanglementDecision {
        delta,
        keep: delta > 0.0,
        per_token_ratios,
    })
}

/// One row of a visual-fraction sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub delta: f64,
    /// `Σ_i Σ_{h ∈ S_H} Gen_i^L(h)` after masking.
    pub hijacker_total: f64,
    pub kept: bool,
}

/// Detects `k` hijackers once, then evaluates the keep/revert delta for
/// each visual fraction in order.
pub fn visual_fraction_sweep(
    trace: &HeadAggregatedTrace,
    k: usize,
    layer_cap: Option<usize>,
    strict: bool,
    fractions: &[f64],
) -> Result<Vec<SweepRow>> {
    let before = compute_salience(trace)?;
    let report = detect_hijackers(&before, k)?;
    fractions
        .iter()
        .map(|&rho| {
            let plan = build_plan(&report, layer_cap, rho, strict)?;
            let after = compute_salience(&apply_plan(trace, &plan)?)?;
            let decision = re_disentanglement(&before, &after)?;
            let hijacker_total = (0..after.num_generated())
                .map(|i| {
                    plan.hijackers
                        .iter()
                        .map(|&h| after.gen_top(i, h))
                        .sum::<f64>()
                })
                .sum();
            Ok(SweepRow {
                rho,
                delta: decision.delta,
                hijacker_total,
                kept: decision.keep,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::detect_hijackers;
    use crate::salience::compute_salience;
    use crate::test_util::agg;
    use crate::trace::TokenRole::{Generated as G, Image as I, Instruction as N};

    fn plan(h: Vec<usize>, cap: usize, rho: f64, strict: bool) -> DisentanglementPlan {
        DisentanglementPlan {
            hijackers: h,
            layer_cap: cap,
            visual_fraction: rho,
            strict,
        }
    }

    fn four_images() -> HeadAggregatedTrace {
        let layer = vec![
            vec![1.0],
            vec![0.5, 0.5],
            vec![0.3, 0.3, 0.4],
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.1, 0.1, 0.1, 0.1, 0.6],
            vec![0.1, 0.1, 0.1, 0.1, 0.3, 0.3],
        ];
        agg(&[I, I, I, I, N, G], vec![layer.clone(), layer])
    }

    #[test]
    fn half_fraction_masks_first_half() {
        let t = four_images();
        let p = plan(vec![4], 2, 0.5, false);
        assert_eq!(p.masked_image_keys(t.layout()), 0..2);
        assert_eq!(
            plan(vec![4], 2, 0.25, false).masked_image_keys(t.layout()),
            0..1
        );
        assert_eq!(
            plan(vec![4], 2, 0.3, false).masked_image_keys(t.layout()),
            0..2
        );
    }

    #[test]
    fn full_plan_masks_all_image_keys_every_layer() {
        let t = four_images();
        let out = apply_plan(&t, &plan(vec![4], 2, 1.0, false)).unwrap();
        for l in 0..2 {
            assert_eq!(out.row(l, 4), &[0.0, 0.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn zero_fraction_is_identity() {
        let t = four_images();
        let p = plan(vec![4], 2, 0.0, false);
        assert!(p.masked_image_keys(t.layout()).is_empty());
        assert_eq!(apply_plan(&t, &p).unwrap(), t);
    }

    #[test]
    fn forced_renormalization_to_self() {
        let t = agg(
            &[I, I, N, G],
            vec![vec![
                vec![1.0],
                vec![0.5, 0.5],
                vec![0.3, 0.2, 0.5],
                vec![0.25; 4],
            ]],
        );
        let out = apply_plan(&t, &plan(vec![2], 1, 1.0, false)).unwrap();
        assert_eq!(out.row(0, 2), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn all_zero_row_routes_to_self() {
        let mut row = vec![0.6, 0.4, 0.0];
        cut_row(&mut row, &[0, 1], 2);
        assert_eq!(row, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn strict_mode_nullifies_hijacker() {
        // Token 4 soaks up image information; token 5 (hijacker) attends
        // images and token 4.
        let layer = vec![
            vec![1.0],
            vec![0.5, 0.5],
            vec![0.4, 0.3, 0.3],
            vec![0.2, 0.2, 0.4, 0.2],
            vec![0.1, 0.1, 0.2, 0.3, 0.3],
        ];
        let t = agg(&[I, I, N, N, G], vec![layer.clone(), layer.clone(), layer]);
        let before = compute_salience(&t).unwrap();
        assert!(before.ins.at(1, 2) > 0.0);

        let p = plan(vec![3], 3, 1.0, true);
        let out = apply_plan(&t, &p).unwrap();
        // Key 2 has Ins > 0 from salience layer 1 onward, so it is cut at
        // attention layers 1 and 2 but not at layer 0 (Ins^0 = 0).
        assert!(out.row(0, 3)[2] > 0.0);
        assert_eq!(out.row(1, 3)[2], 0.0);
        assert_eq!(out.row(2, 3)[2], 0.0);
        let after = compute_salience(&out).unwrap();
        for l in 0..=3 {
            assert_eq!(after.ins.at(l, 3), 0.0);
        }
        // Non-strict keeps the instruction edge and the hijacker keeps
        // receiving visual information through it.
        let loose =
            compute_salience(&apply_plan(&t, &plan(vec![3], 3, 1.0, false)).unwrap()).unwrap();
        assert!(loose.ins.at(3, 3) > 0.0);
    }

    #[test]
    fn invalid_plans_rejected() {
        let t = four_images();
        assert!(matches!(
            apply_plan(&t, &plan(vec![1], 2, 1.0, false)),
            Err(AidError::IndexOutOfRange(_))
        ));
        assert!(matches!(
            apply_plan(&t, &plan(vec![4], 3, 1.0, false)),
            Err(AidError::IndexOutOfRange(_))
        ));
        let f = compute_salience(&t).unwrap();
        let mut r = detect_hijackers(&f, 1).unwrap();
        assert!(matches!(
            build_plan(&r, None, 1.5, false),
            Err(AidError::InvalidFraction(_))
        ));
        r.hijackers.clear();
        assert!(matches!(
            build_plan(&r, None, 1.0, false),
            Err(AidError::EmptyHijackerSet)
        ));
    }

    #[test]
    fn build_plan_defaults_to_full_depth() {
        let t = four_images();
        let f = compute_salience(&t).unwrap();
        let r = detect_hijackers(&f, 2).unwrap();
        let p = build_plan(&r, None, 1.0, false).unwrap();
        assert_eq!(p.layer_cap, 2);
        assert_eq!(p.hijackers, vec![4]);
        let json = serde_json::to_value(&p).unwrap();
        assert_eq!(
            json,
            serde_json::json!({"hijackers": [4], "layer_cap": 2, "visual_fraction": 1.0, "strict": false})
        );
    }

    #[test]
    fn identical_fields_revert() {
        let f = compute_salience(&four_images()).unwrap();
        let d = re_disentanglement(&f, &f).unwrap();
        assert_eq!(d.delta, 0.0);
        assert!(!d.keep);
    }

    #[test]
    fn mismatched_layouts_rejected() {
        let a = compute_salience(&four_images()).unwrap();
        let b = compute_salience(&agg(
            &[I, N, G],
            vec![vec![vec![1.0], vec![0.5, 0.5], vec![0.2, 0.3, 0.5]]],
        ))
        .unwrap();
        assert!(matches!(
            re_disentanglement(&a, &b),
            Err(AidError::LayoutMismatch)
        ));
    }
}
