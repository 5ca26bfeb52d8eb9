use std::collections::HashMap;

use crate::error::{Result, TaqError};
use crate::scalar::Scalar;

use super::tasks::{Item, EOS};
use super::ToyModel;

pub const DEFAULT_MAX_NEW_TOKENS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    /// Percent of items answered exactly.
    pub exact_match: f64,
    /// Mean token-multiset F1, percent.
    pub token_f1: f64,
    pub n_items: usize,
    /// Items where both prediction and answer were empty (scored as a perfect match).
    pub both_empty: usize,
}

/// Greedy continuation of `prompt`, stopping at `EOS`, `max_new_tokens` or the context limit.
pub fn greedy_decode<T: Scalar>(
    model: &ToyModel<T>,
    prompt: &[u32],
    max_new_tokens: usize,
) -> Result<Vec<u32>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < max_new_tokens && seq.len() < model.cfg.max_seq {
        let logits = model.forward(&seq, None)?;
        let last = logits.row(seq.len() - 1);
        let mut best = 0;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        let tok = best as u32;
        if tok == EOS {
            break;
        }
        out.push(tok);
        seq.push(tok);
    }
    Ok(out)
}

/// `(exact, f1)` for one item, both in `[0, 1]`.
pub fn score_prediction(pred: &[u32], answer: &[u32]) -> (bool, f64) {
    let exact = pred == answer;
    if pred.is_empty() && answer.is_empty() {
        return (true, 1.0);
    }
    let mut counts: HashMap<u32, i64> = HashMap::new();
    for &t in answer {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for &t in pred {
        if let Some(c) = counts.get_mut(&t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return (exact, 0.0);
    }
    let p = common as f64 / pred.len() as f64;
    let r = common as f64 / answer.len() as f64;
    (exact, 2.0 * p * r / (p + r))
}

pub fn evaluate<T: Scalar>(
    model: &ToyModel<T>,
    items: &[Item],
    max_new_tokens: usize,
) -> Result<EvalResult> {
    if items.is_empty() {
        return Err(TaqError::InvalidInput("no evaluation items".into()));
    }
    let (mut em, mut f1, mut both_empty) = (0usize, 0.0, 0usize);
    for item in items {
        let pred = greedy_decode(model, &item.prompt, max_new_tokens)?;
        if pred.is_empty() && item.answer.is_empty() {
            both_empty += 1;
        }
        let (e, f) = score_prediction(&pred, &item.answer);
        em += e as usize;
        f1 += f;
    }
    let n = items.len() as f64;
    Ok(EvalResult {
        exact_match: 100.0 * em as f64 / n,
        token_f1: 100.0 * f1 / n,
        n_items: items.len(),
        both_empty,
    })
}
