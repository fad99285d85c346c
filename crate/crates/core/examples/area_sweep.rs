// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mask growing top-down portions of the image block on planted traces.

use attn_aid::{
    aggregate_heads, greedy_decode, plant_hijacker, visual_fraction_sweep, DecodeSession,
    HeadPolicy, PlantSpec, PromptLayout, ToyConfig,
};

pub fn run_example() -> attn_aid::Result<()> {
    let layout = PromptLayout::default();
    let spec = PlantSpec {
        layout,
        instruction_ids: layout.default_instruction_ids(),
        target: layout.n_image + 1,
        steps: 4,
    };
    println!("seed,rho,delta,hijacker_total,kept");
    for seed in 1..=3 {
        let model = plant_hijacker(
            ToyConfig {
                seed,
                ..ToyConfig::default()
            },
            &spec,
        )?;
        let mut session = DecodeSession::new(&model, layout, &spec.instruction_ids)?;
        let (_, trace) = greedy_decode(&mut session, spec.steps)?;
        let agg = aggregate_heads(&trace, HeadPolicy::Mean);
        for row in visual_fraction_sweep(&agg, 2, None, false, &[0.0, 0.25, 0.5, 0.75, 1.0])? {
            println!(
                "{seed},{},{:.4},{:.4},{}",
                row.rho, row.delta, row.hijacker_total, row.kept
            );
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> attn_aid::Result<()> {
    run_example()
}
