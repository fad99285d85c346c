// SPDX-License-Identifier: MIT OR Apache-2.0

//! Build a plan, apply it offline, and let the keep/revert test decide.

use attn_aid::salience::{compute_instruction_salience, compute_visual_salience};
use attn_aid::synth::{random_trace, TraceCaps};
use attn_aid::{
    aggregate_heads, apply_plan, build_plan, compute_salience, detect_hijackers,
    re_disentanglement, HeadPolicy,
};

pub fn run_example() -> attn_aid::Result<()> {
    let caps = TraceCaps {
        max_layers: 2,
        max_heads: 2,
        max_tokens: 10,
        max_decode: 3,
    };
    let agg = aggregate_heads(&random_trace(42, caps), HeadPolicy::Mean);
    let before = compute_salience(&agg)?;
    let report = detect_hijackers(&before, 2)?;

    for (rho, strict) in [(0.0, false), (0.5, false), (1.0, false), (1.0, true)] {
        let plan = build_plan(&report, None, rho, strict)?;
        let edited = apply_plan(&agg, &plan)?;
        let decision = re_disentanglement(&before, &compute_salience(&edited)?)?;
        println!(
            "rho {rho:<4} strict {strict:<5} masked keys {:?}: delta {:+.4}, keep {}",
            plan.masked_image_keys(agg.layout()),
            decision.delta,
            decision.keep
        );
        if strict {
            let ins = compute_instruction_salience(&edited, &compute_visual_salience(&edited));
            for &h in &plan.hijackers {
                println!(
                    "  hijacker {h}: top-layer Ins = {}",
                    ins.at(agg.num_layers(), h)
                );
            }
        }
    }
    println!(
        "{}",
        serde_json::to_string(&build_plan(&report, None, 1.0, false)?).unwrap()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> attn_aid::Result<()> {
    run_example()
}
