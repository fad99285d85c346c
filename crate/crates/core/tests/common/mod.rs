// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use attn_aid::synth::{random_trace, TraceCaps};
use attn_aid::trace::Token;
use attn_aid::{AttentionTrace, TokenRole};

/// Caps of the acceptance corpus: up to 3 layers, 10 tokens, 3 decode steps.
pub const CORPUS_CAPS: TraceCaps = TraceCaps {
    max_layers: 3,
    max_heads: 2,
    max_tokens: 10,
    max_decode: 3,
};

pub fn corpus(seed: u64) -> AttentionTrace {
    random_trace(seed, CORPUS_CAPS)
}

/// Single-head trace from `[layer][query]` rows.
pub fn single_head(roles: &[TokenRole], rows: &[Vec<Vec<f64>>]) -> AttentionTrace {
    let tokens: Vec<Token> = roles
        .iter()
        .enumerate()
        .map(|(index, &role)| Token {
            index,
            role,
            text: None,
        })
        .collect();
    let gs = roles
        .iter()
        .position(|r| *r == TokenRole::Generated)
        .unwrap_or(roles.len());
    let prefill = rows
        .iter()
        .map(|layer| vec![layer[..gs].to_vec()])
        .collect();
    let decode = (gs..roles.len())
        .map(|q| rows.iter().map(|layer| vec![layer[q].clone()]).collect())
        .collect();
    AttentionTrace::new(rows.len(), 1, tokens, prefill, decode, None).expect("valid fixture")
}

/// Every row uniform over its causal prefix.
pub fn uniform_rows(len: usize, layers: usize) -> Vec<Vec<Vec<f64>>> {
    let layer: Vec<Vec<f64>> = (0..len)
        .map(|q| vec![1.0 / (q + 1) as f64; q + 1])
        .collect();
    vec![layer; layers]
}

pub fn roles(n_img: usize, n_ins: usize, n_gen: usize) -> Vec<TokenRole> {
    let mut r = vec![TokenRole::Image; n_img];
    r.extend(vec![TokenRole::Instruction; n_ins]);
    r.extend(vec![TokenRole::Generated; n_gen]);
    r
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    attn_aid::salience::relative_deviation(a, b) <= tol
}
