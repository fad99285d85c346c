// SPDX-License-Identifier: MIT OR Apache-2.0

//! Parse a trace document, inspect its layout, and see what validation
//! rejects.

use attn_aid::{aggregate_heads, load_trace, AidError, HeadPolicy};

const DOC: &str = r#"{
  "version": 1,
  "num_layers": 1,
  "num_heads": 2,
  "tokens": [
    {"index": 0, "role": "image", "text": "<img0>"},
    {"index": 1, "role": "image", "text": "<img1>"},
    {"index": 2, "role": "instruction", "text": "describe"},
    {"index": 3, "role": "generated", "text": "a"}
  ],
  "prefill_attention": [[
    [[1.0], [0.4, 0.6], [0.3, 0.2, 0.5]],
    [[1.0], [0.5, 0.5], [0.1, 0.1, 0.8]]
  ]],
  "decode_steps": [
    {"attention": [[[0.1, 0.2, 0.3, 0.4], [0.25, 0.25, 0.25, 0.25]]]}
  ]
}"#;

pub fn run_example() -> attn_aid::Result<()> {
    let trace = load_trace(DOC.as_bytes())?;
    let layout = trace.layout();
    println!(
        "image {:?}, instruction {:?}, generated {:?}",
        layout.image_range(),
        layout.instruction_range(),
        layout.generated_range()
    );

    for policy in [HeadPolicy::Mean, HeadPolicy::Max] {
        let agg = aggregate_heads(&trace, policy);
        println!("{policy}: row of token 2 = {:?}", agg.row(0, 2));
    }

    let bad = DOC.replace("[0.3, 0.2, 0.5]", "[0.3, 0.2, 0.4]");
    match load_trace(bad.as_bytes()) {
        Err(e @ AidError::RowSumViolation { .. }) => println!("rejected: {e}"),
        other => panic!("expected a row-sum violation, got {other:?}"),
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> attn_aid::Result<()> {
    run_example()
}
