// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded generator of random valid traces, used by the oracle check and
//! the property tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::trace::{AttentionTrace, Token, TokenRole, INTERNAL_ROW_TOLERANCE};

/// Size caps for generated traces.  Every generated trace has at least one
/// image, one instruction and one generated token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceCaps {
    pub max_layers: usize,
    pub max_heads: usize,
    pub max_tokens: usize,
    pub max_decode: usize,
}

impl Default for TraceCaps {
    fn default() -> Self {
        Self {
            max_layers: 3,
            max_heads: 2,
            max_tokens: 10,
            max_decode: 3,
        }
    }
}

/// Probability that an off-diagonal weight is generated as an exact zero,
/// so the zero-edge paths of the recursions get exercised.
const ZERO_EDGE_PROBABILITY: f64 = 0.15;

fn random_row(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len)
        .map(|k| {
            if k + 1 < len && rng.random_bool(ZERO_EDGE_PROBABILITY) {
                0.0
            } else {
                rng.random_range(0.01..1.0)
            }
        })
        .collect();
    let total: f64 = row.iter().sum();
    row.iter_mut().for_each(|w| *w /= total);
    row
}

/// Draws a random trace.  `caps.max_tokens` must be at least 3.
pub fn random_trace(seed: u64, caps: TraceCaps) -> AttentionTrace {
    assert!(
        caps.max_tokens >= 3,
        "need room for image, instruction and generated tokens"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.random_range(1..=caps.max_layers.max(1));
    let heads = rng.random_range(1..=caps.max_heads.max(1));

    let budget = caps.max_tokens;
    let n_gen = rng.random_range(1..=caps.max_decode.max(1).min(budget - 2));
    let n_other = if budget - n_gen > 2 && rng.random_bool(0.2) {
        1
    } else {
        0
    };
    let rest = budget - n_gen - n_other;
    let n_img = rng.random_range(1..rest);
    let n_ins = rng.random_range(1..=rest - n_img);

    let mut roles = vec![TokenRole::Other; n_other];
    roles.extend(std::iter::repeat_n(TokenRole::Image, n_img));
    roles.extend(std::iter::repeat_n(TokenRole::Instruction, n_ins));
    roles.extend(std::iter::repeat_n(TokenRole::Generated, n_gen));
    let tokens: Vec<Token> = roles
        .into_iter()
        .enumerate()
        .map(|(index, role)| Token {
            index,
            role,
            text: None,
        })
        .collect();

    let gs = n_other + n_img + n_ins;
    let prefill = (0..layers)
        .map(|_| {
            (0..heads)
                .map(|_| (0..gs).map(|q| random_row(&mut rng, q + 1)).collect())
                .collect()
        })
        .collect();
    let decode = (0..n_gen)
        .map(|s| {
            (0..layers)
                .map(|_| {
                    (0..heads)
                        .map(|_| random_row(&mut rng, gs + s + 1))
                        .collect()
                })
                .collect()
        })
        .collect();

    AttentionTrace::with_tolerance(
        layers,
        heads,
        tokens,
        prefill,
        decode,
        None,
        INTERNAL_ROW_TOLERANCE,
    )
    .expect("generated trace is valid")
}
