// SPDX-License-Identifier: MIT OR Apache-2.0

use attn_aid::toydec::planted_target_masses;
use attn_aid::{
    aggregate_heads, attention_similarity, build_model, compute_salience, detect_hijackers,
    greedy_decode, oracle_salience, plant_hijacker, run_aid, AidParams, DecodeSession,
    DisentanglementPlan, HeadPolicy, LayerPolicy, PlantSpec, PromptLayout, ToyConfig, ToyModel,
};

fn planted(seed: u64) -> (ToyModel, PlantSpec) {
    let layout = PromptLayout::default();
    let spec = PlantSpec {
        layout,
        instruction_ids: layout.default_instruction_ids(),
        target: layout.n_image + 1,
        steps: 4,
    };
    let model = plant_hijacker(
        ToyConfig {
            seed,
            ..ToyConfig::default()
        },
        &spec,
    )
    .unwrap();
    (model, spec)
}

#[test]
fn planted_thresholds_hold() {
    for seed in 1..=10 {
        let (model, spec) = planted(seed);
        let mut s = DecodeSession::new(&model, spec.layout, &spec.instruction_ids).unwrap();
        let (_, trace) = greedy_decode(&mut s, spec.steps).unwrap();
        let (region, target) = planted_target_masses(&trace, &spec);
        assert!(region >= 0.9, "seed {seed}: region mass {region}");
        assert!(target >= 0.5, "seed {seed}: generated mass {target}");
    }
}

#[test]
fn planted_target_is_the_top_hijacker() {
    for seed in 1..=10 {
        let (model, spec) = planted(seed);
        let mut s = DecodeSession::new(&model, spec.layout, &spec.instruction_ids).unwrap();
        let (_, trace) = greedy_decode(&mut s, spec.steps).unwrap();
        let agg = aggregate_heads(&trace, HeadPolicy::Mean);
        assert_eq!(
            detect_hijackers(&compute_salience(&agg).unwrap(), 1)
                .unwrap()
                .hijackers,
            vec![spec.target]
        );
        assert_eq!(
            detect_hijackers(&oracle_salience(&agg).unwrap(), 1)
                .unwrap()
                .hijackers,
            vec![spec.target]
        );
    }
}

#[test]
fn planted_curve_dominates_other_instruction_tokens() {
    for seed in 1..=10 {
        let (model, spec) = planted(seed);
        let mut s = DecodeSession::new(&model, spec.layout, &spec.instruction_ids).unwrap();
        let (_, trace) = greedy_decode(&mut s, spec.steps).unwrap();
        let agg = aggregate_heads(&trace, HeadPolicy::Mean);
        let curve = |t| {
            attention_similarity(&agg, t, LayerPolicy::PerLayerMean)
                .unwrap()
                .values
        };
        let target = curve(spec.target);
        for other in spec
            .layout
            .instruction_range()
            .filter(|t| *t != spec.target)
        {
            for (a, b) in target.iter().zip(curve(other)) {
                assert!(*a > b, "seed {seed}: token {other} curve {b} >= target {a}");
            }
        }
    }
}

#[test]
fn planting_rejects_non_instruction_target() {
    let layout = PromptLayout::default();
    let spec = PlantSpec {
        layout,
        instruction_ids: layout.default_instruction_ids(),
        target: 0,
        steps: 4,
    };
    assert!(plant_hijacker(ToyConfig::default(), &spec).is_err());
}

fn check_hook(strict: bool) {
    let (model, spec) = planted(3);
    let plan = DisentanglementPlan {
        hijackers: vec![5, 6],
        layer_cap: 2,
        visual_fraction: 0.5,
        strict,
    };
    let mut plain = DecodeSession::new(&model, spec.layout, &spec.instruction_ids).unwrap();
    let (_, base) = greedy_decode(&mut plain, 4).unwrap();
    let mut hooked = plain.clone();
    hooked.install_plan(Some(plan.clone())).unwrap();
    let (_, trace) = greedy_decode(&mut hooked, 4).unwrap();

    for l in 0..2 {
        for h in 0..2 {
            for &q in &plan.hijackers {
                let row = trace.row(l, h, q);
                assert_eq!(&row[0..2], &[0.0, 0.0]);
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
            // Untouched by the hook: everything before the first hijacker,
            // and every non-hijacker row of the first layer.
            for q in 0..5 {
                assert_eq!(trace.row(l, h, q), base.row(l, h, q));
            }
            for q in (0..7).filter(|q| !plan.hijackers.contains(q)) {
                assert_eq!(trace.row(0, h, q), base.row(0, h, q));
            }
        }
    }
}

#[test]
fn hook_zeroes_masked_keys() {
    check_hook(false);
}

#[test]
fn strict_hook_zeroes_masked_keys() {
    check_hook(true);
}

#[test]
fn install_plan_restarts_from_prompt() {
    let model = build_model(ToyConfig::default()).unwrap();
    let layout = PromptLayout::default();
    let mut s = DecodeSession::new(&model, layout, &layout.default_instruction_ids()).unwrap();
    greedy_decode(&mut s, 3).unwrap();
    assert_eq!(s.consumed(), 10);
    s.install_plan(None).unwrap();
    assert_eq!(s.consumed(), 0);
    let bad = DisentanglementPlan {
        hijackers: vec![0],
        layer_cap: 1,
        visual_fraction: 1.0,
        strict: false,
    };
    assert!(s.install_plan(Some(bad)).is_err());
}

#[test]
fn reverted_decision_returns_plain_decode() {
    let (model, spec) = planted(2);
    let params = AidParams {
        visual_fraction: 0.0,
        ..AidParams::default()
    };
    let out = run_aid(&model, spec.layout, &spec.instruction_ids, &params).unwrap();
    assert_eq!(out.decision().delta, 0.0);
    assert!(!out.decision().keep);
    assert!(out.installed_plan.is_none());
    let mut s = DecodeSession::new(&model, spec.layout, &spec.instruction_ids).unwrap();
    let (ids, trace) = greedy_decode(&mut s, params.steps).unwrap();
    assert_eq!(out.final_tokens, ids);
    assert_eq!(out.final_trace, trace);
}

#[test]
fn kept_plan_is_replayable() {
    let (model, spec) = planted(4);
    let out = run_aid(
        &model,
        spec.layout,
        &spec.instruction_ids,
        &AidParams::default(),
    )
    .unwrap();
    assert!(out.decision().keep);
    let mut s = DecodeSession::new(&model, spec.layout, &spec.instruction_ids).unwrap();
    s.install_plan(out.installed_plan.clone()).unwrap();
    let (ids, trace) = greedy_decode(&mut s, 4).unwrap();
    assert_eq!(ids, out.final_tokens);
    assert_eq!(trace, out.final_trace);
}

#[test]
fn periodic_reevaluation_records_each_checkpoint() {
    let (model, spec) = planted(5);
    let params = AidParams {
        k: 1,
        reevaluate_every: Some(1),
        ..AidParams::default()
    };
    let out = run_aid(&model, spec.layout, &spec.instruction_ids, &params).unwrap();
    let checkpoints: Vec<usize> = out.evaluations.iter().map(|e| e.generated).collect();
    assert_eq!(checkpoints, vec![1, 2, 3]);
    let installed = out.installed_plan.clone().unwrap();
    assert!(installed.hijackers.contains(&spec.target));
    let mut s = DecodeSession::new(&model, spec.layout, &spec.instruction_ids).unwrap();
    s.install_plan(Some(installed)).unwrap();
    assert_eq!(greedy_decode(&mut s, 4).unwrap().0, out.final_tokens);
}

#[test]
fn probe_steps_must_be_positive() {
    let (model, spec) = planted(1);
    let params = AidParams {
        probe_steps: 0,
        ..AidParams::default()
    };
    assert!(run_aid(&model, spec.layout, &spec.instruction_ids, &params).is_err());
}
