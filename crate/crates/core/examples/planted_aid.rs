// SPDX-License-Identifier: MIT OR Apache-2.0

//! Full probe, detect, mask, decide and restart loop on a planted model.

use attn_aid::{
    aggregate_heads, attention_similarity, plant_hijacker, run_aid, AidParams, HeadPolicy,
    LayerPolicy, PlantSpec, PromptLayout, ToyConfig,
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
            seed: 7,
            ..ToyConfig::default()
        },
        &spec,
    )?;
    println!("planted gain {}", model.planting().expect("planted").gain);

    let out = run_aid(&model, layout, &spec.instruction_ids, &AidParams::default())?;
    let round = &out.evaluations[0];
    println!("hijackers {:?}", round.report.hijackers);
    println!(
        "delta {:.4}, keep {}",
        round.decision.delta, round.decision.keep
    );
    println!(
        "baseline {:?} -> final {:?}",
        out.baseline_tokens, out.final_tokens
    );

    let curve = |trace| {
        attention_similarity(
            &aggregate_heads(trace, HeadPolicy::Mean),
            spec.target,
            LayerPolicy::PerLayerMean,
        )
        .map(|c| c.values)
    };
    println!(
        "target similarity before {:.3?}",
        curve(&out.baseline_trace)?
    );
    println!("target similarity after  {:.3?}", curve(&out.final_trace)?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> attn_aid::Result<()> {
    run_example()
}
