use crate::error::{Result, TaqError};

use super::{BitPlan, CostModel, LayerBits};

/// Largest number of free layers the exhaustive search accepts (3^10 plans).
pub const EXACT_MAX_FREE_LAYERS: usize = 10;

const LEVELS: [u8; 3] = [4, 8, 16];

/// Rank-consistent gain: `exp(R_ℓ) · log2(b)`, increasing in both relevance and bits.
pub fn default_gain(relevance: &[f64]) -> impl Fn(usize, u8) -> f64 + '_ {
    move |layer, bits| relevance[layer].exp() * (bits as f64).log2()
}

/// Exhaustive search over `{4, 8, 16}` for every non-pinned layer, maximizing
/// `Σ gain(ℓ, b_ℓ)` subject to `cost ≤ budget`. The first maximizer in enumeration order
/// wins, which makes the result deterministic.
pub fn allocate_knapsack_exact(
    n_layers: usize,
    pinned: &[usize],
    cost: &CostModel,
    budget: Option<u64>,
    gain: impl Fn(usize, u8) -> f64,
) -> Result<BitPlan> {
    if cost.n_layers() != n_layers {
        return Err(TaqError::InvalidPlan(format!(
            "cost model has {} layers",
            cost.n_layers()
        )));
    }
    let free: Vec<usize> = (0..n_layers).filter(|i| !pinned.contains(i)).collect();
    if free.len() > EXACT_MAX_FREE_LAYERS {
        return Err(TaqError::OracleTooLarge(3u128.pow(free.len() as u32)));
    }
    let mut bits = vec![LayerBits::Full; n_layers];
    let fixed: u64 = pinned
        .iter()
        .map(|&p| cost.weight_counts[p] * LayerBits::FULL_COST)
        .sum();
    let total = 3usize.pow(free.len() as u32);
    let mut best: Option<(f64, Vec<LayerBits>)> = None;
    let mut cheapest = u64::MAX;
    for mut code in 0..total {
        let mut c = fixed;
        let mut g = 0.0;
        for &layer in &free {
            let b = LEVELS[code % 3];
            code /= 3;
            bits[layer] = LayerBits::Quantized(b);
            c += cost.weight_counts[layer] * b as u64;
            g += gain(layer, b);
        }
        cheapest = cheapest.min(c);
        if budget.is_some_and(|tau| c > tau) {
            continue;
        }
        if best.as_ref().is_none_or(|(bg, _)| g > *bg) {
            best = Some((g, bits.clone()));
        }
    }
    match best {
        Some((_, bits)) => BitPlan::new(bits, pinned.to_vec(), budget, cost),
        None => Err(TaqError::BudgetInfeasible {
            cost: cheapest,
            budget: budget.unwrap_or(0),
            min_gamma: None,
        }),
    }
}
