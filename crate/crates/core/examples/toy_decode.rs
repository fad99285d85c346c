// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy decoding with the KV cache, checked against a cache-free
//! recomputation.

use attn_aid::{build_model, greedy_decode, DecodeSession, PromptLayout, ToyConfig};

pub fn run_example() -> attn_aid::Result<()> {
    let model = build_model(ToyConfig::default())?;
    let layout = PromptLayout::default();
    let mut session = DecodeSession::new(&model, layout, &layout.default_instruction_ids())?;
    let (ids, trace) = greedy_decode(&mut session, 6)?;
    println!("prompt {:?} -> generated {ids:?}", session.prompt());

    let mut tokens = session.prompt().to_vec();
    tokens.extend(&ids);
    let full = model.forward_full(&tokens);
    let worst = session
        .logits_history()
        .iter()
        .flatten()
        .zip(full.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("max |cached - recomputed| logit = {worst:e}");

    let last = trace.layout().len() - 1;
    println!("last token, layer 1, head 0: {:.4?}", trace.row(1, 0, last));
    Ok(())
}

#[allow(dead_code)]
fn main() -> attn_aid::Result<()> {
    run_example()
}
