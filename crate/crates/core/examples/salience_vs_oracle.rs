// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-by-layer salience against the path-enumeration oracle on random
//! traces.

use attn_aid::synth::{random_trace, TraceCaps};
use attn_aid::{aggregate_heads, compute_salience, oracle_salience, HeadPolicy};

pub fn run_example() -> attn_aid::Result<()> {
    let caps = TraceCaps {
        max_layers: 3,
        max_heads: 2,
        max_tokens: 10,
        max_decode: 3,
    };
    let mut worst = 0.0_f64;
    for seed in 1..=20 {
        let agg = aggregate_heads(&random_trace(seed, caps), HeadPolicy::Mean);
        let fast = compute_salience(&agg)?;
        let slow = oracle_salience(&agg)?;
        worst = worst.max(fast.max_relative_deviation(&slow).expect("same layout"));
    }
    println!("20 traces, max relative deviation {worst:e}");

    let agg = aggregate_heads(&random_trace(7, caps), HeadPolicy::Mean);
    let field = compute_salience(&agg)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&field.to_report(false)).unwrap()
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> attn_aid::Result<()> {
    run_example()
}
