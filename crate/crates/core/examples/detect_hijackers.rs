// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rank instruction tokens on a planted toy trace and compare their
//! attention-similarity curves.

use attn_aid::{
    aggregate_heads, attention_similarity, compute_salience, detect_hijackers, greedy_decode,
    plant_hijacker, DecodeSession, HeadPolicy, LayerPolicy, PlantSpec, PromptLayout, ToyConfig,
};

pub fn run_example() -> attn_aid::Result<()> {
    let layout = PromptLayout::default();
    let spec = PlantSpec {
        layout,
        instruction_ids: layout.default_instruction_ids(),
        target: layout.n_image + 1,
        steps: 4,
    };
    let model = plant_hijacker(
        ToyConfig {
            seed: 3,
            ..ToyConfig::default()
        },
        &spec,
    )?;
    let mut session = DecodeSession::new(&model, layout, &spec.instruction_ids)?;
    let (_, trace) = greedy_decode(&mut session, spec.steps)?;

    let agg = aggregate_heads(&trace, HeadPolicy::Mean);
    let report = detect_hijackers(&compute_salience(&agg)?, 2)?;
    let texts: Vec<Option<String>> = trace.tokens().iter().map(|t| t.text.clone()).collect();
    print!("{}", report.to_csv(&texts));
    assert_eq!(report.hijackers[0], spec.target);

    for t in layout.instruction_range() {
        let curve = attention_similarity(&agg, t, LayerPolicy::PerLayerMean)?;
        let marker = if report.is_hijacker(t) { "*" } else { " " };
        println!("{marker} token {t}: {:.3?}", curve.values);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> attn_aid::Result<()> {
    run_example()
}
