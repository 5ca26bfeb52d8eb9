//! Per-layer bitwidth allocation under a bit budget.
//!
//! The primary rule ranks the non-edge layers by relevance and hands out 16-, 8- and 4-bit
//! slots by fixed fractions; [`allocate_knapsack_exact`] enumerates every plan for small
//! models and serves as the reference the rank rule is checked against.

mod exact;

pub use exact::{allocate_knapsack_exact, default_gain, EXACT_MAX_FREE_LAYERS};

use std::fmt;

use crate::error::{Result, TaqError};
use crate::stats::rank_desc;

/// Precision of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerBits {
    Quantized(u8),
    /// Left unquantized; costed at 32 bits per weight.
    Full,
}

impl LayerBits {
    pub const FULL_COST: u64 = 32;

    pub fn cost_per_weight(self) -> u64 {
        match self {
            LayerBits::Full => Self::FULL_COST,
            LayerBits::Quantized(b) => b as u64,
        }
    }

    /// Byte used in checkpoints and reports: the bitwidth, or 32 for full precision.
    pub fn to_byte(self) -> u8 {
        self.cost_per_weight() as u8
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            32 => Ok(LayerBits::Full),
            4 | 8 | 16 => Ok(LayerBits::Quantized(b)),
            _ => Err(TaqError::Format(format!("layer bits byte {b}"))),
        }
    }
}

impl fmt::Display for LayerBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerBits::Full => write!(f, "full"),
            LayerBits::Quantized(b) => write!(f, "{b}"),
        }
    }
}

/// Quantizable weight count of each layer; a plan costs `Σ count_ℓ · bits_ℓ`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostModel {
    pub weight_counts: Vec<u64>,
}

impl CostModel {
    pub fn new(weight_counts: Vec<u64>) -> Self {
        Self { weight_counts }
    }

    pub fn uniform(n_layers: usize, weights_per_layer: u64) -> Self {
        Self::new(vec![weights_per_layer; n_layers])
    }

    pub fn n_layers(&self) -> usize {
        self.weight_counts.len()
    }

    /// Cost with every layer at full precision.
    pub fn full_cost(&self) -> u64 {
        self.weight_counts.iter().sum::<u64>() * LayerBits::FULL_COST
    }

    pub fn cost_of(&self, bits: &[LayerBits]) -> u64 {
        self.weight_counts
            .iter()
            .zip(bits)
            .map(|(&n, b)| n * b.cost_per_weight())
            .sum()
    }
}

/// Per-layer bit assignment with its cost accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlan {
    bits: Vec<LayerBits>,
    pinned: Vec<usize>,
    /// `None` means unconstrained.
    budget: Option<u64>,
    cost: u64,
}

impl BitPlan {
    /// Builds a plan, rejecting it if it breaks the budget or the pinning invariant.
    pub fn new(
        bits: Vec<LayerBits>,
        pinned: Vec<usize>,
        budget: Option<u64>,
        cost: &CostModel,
    ) -> Result<Self> {
        if bits.len() != cost.n_layers() {
            return Err(TaqError::InvalidPlan(format!(
                "{} layer bits for a {}-layer cost model",
                bits.len(),
                cost.n_layers()
            )));
        }
        for b in &bits {
            if let LayerBits::Quantized(q) = b {
                crate::quant::check_bits(*q).map_err(|e| TaqError::InvalidPlan(e.to_string()))?;
            }
        }
        if let Some(&p) = pinned
            .iter()
            .find(|&&p| bits.get(p) != Some(&LayerBits::Full))
        {
            return Err(TaqError::InvalidPlan(format!(
                "pinned layer {p} is not full precision"
            )));
        }
        let c = cost.cost_of(&bits);
        if let Some(tau) = budget {
            if c > tau {
                return Err(TaqError::BudgetInfeasible {
                    cost: c,
                    budget: tau,
                    min_gamma: None,
                });
            }
        }
        Ok(Self {
            bits,
            pinned,
            budget,
            cost: c,
        })
    }

    /// Same bitwidth on every layer, nothing pinned.
    pub fn uniform(bits: LayerBits, cost: &CostModel) -> Result<Self> {
        Self::new(vec![bits; cost.n_layers()], Vec::new(), None, cost)
    }

    pub fn bits(&self) -> &[LayerBits] {
        &self.bits
    }

    pub fn pinned(&self) -> &[usize] {
        &self.pinned
    }

    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    pub fn cost(&self) -> u64 {
        self.cost
    }

    pub fn n_layers(&self) -> usize {
        self.bits.len()
    }

    /// Number of layers at each of 16, 8 and 4 bits.
    pub fn level_counts(&self) -> [usize; 3] {
        let count = |b: u8| {
            self.bits
                .iter()
                .filter(|&&x| x == LayerBits::Quantized(b))
                .count()
        };
        [count(16), count(8), count(4)]
    }

    /// Distinct bit levels used, ascending.
    pub fn levels(&self) -> Vec<LayerBits> {
        let mut v = self.bits.clone();
        v.sort();
        v.dedup();
        v
    }

    /// Re-checks every invariant against a cost model (e.g. after loading from a report).
    pub fn validate(&self, cost: &CostModel) -> Result<()> {
        let rebuilt = Self::new(self.bits.clone(), self.pinned.clone(), self.budget, cost)?;
        if rebuilt.cost != self.cost {
            return Err(TaqError::InvalidPlan(format!(
                "recorded cost {} != {}",
                self.cost, rebuilt.cost
            )));
        }
        Ok(())
    }

    /// Whether `R_i > R_j ⇒ bits_i ≥ bits_j` over the non-pinned layers.
    pub fn is_monotone_in(&self, relevance: &[f64]) -> bool {
        let free: Vec<usize> = (0..self.bits.len())
            .filter(|i| !self.pinned.contains(i))
            .collect();
        free.iter().all(|&i| {
            free.iter()
                .all(|&j| relevance[i] <= relevance[j] || self.bits[i] >= self.bits[j])
        })
    }
}

/// `Σ weight_count_ℓ × bits_ℓ`, full precision at 32 bits.
pub fn plan_cost(plan: &BitPlan, cost: &CostModel) -> u64 {
    cost.cost_of(plan.bits())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankConfig {
    /// Fraction of non-edge layers at 16 bits.
    pub frac16: f64,
    /// Fraction of non-edge layers at 8 bits.
    pub frac8: f64,
    /// Layers pinned at full precision on each end.
    pub edge: usize,
    pub budget: Option<u64>,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self {
            frac16: 0.15,
            frac8: 0.45,
            edge: 2,
            budget: None,
        }
    }
}

/// `ceil(f·m)`, tolerant of representation error such as `0.15·20 = 3.0000000000000004`.
pub fn fraction_count(f: f64, m: usize) -> usize {
    ((f * m as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Rank allocation: pin `edge` layers at each end, then give the top `ceil(f16·M)` remaining
/// layers 16 bits, the next `ceil(f8·M)` 8 bits and the rest 4 bits. Ties go to the lower
/// layer index.
pub fn allocate_rank(relevance: &[f64], cost: &CostModel, cfg: &RankConfig) -> Result<BitPlan> {
    let n = relevance.len();
    let min = 2 * cfg.edge + 1;
    if n < min {
        return Err(TaqError::ModelTooSmall { n_layers: n, min });
    }
    if !(0.0..=1.0).contains(&cfg.frac16)
        || !(0.0..=1.0).contains(&cfg.frac8)
        || cfg.frac16 + cfg.frac8 > 1.0 + 1e-9
    {
        return Err(TaqError::InvalidConfig(format!(
            "rank fractions f16={} f8={}",
            cfg.frac16, cfg.frac8
        )));
    }
    let pinned: Vec<usize> = (0..cfg.edge).chain(n - cfg.edge..n).collect();
    let m = n - pinned.len();
    let n16 = fraction_count(cfg.frac16, m).min(m);
    let n8 = fraction_count(cfg.frac8, m).min(m - n16);
    allocate_by_counts(relevance, &pinned, n16, n8, cost, cfg.budget)
}

/// Monotone assignment with explicit level counts over the non-pinned layers.
pub fn allocate_by_counts(
    relevance: &[f64],
    pinned: &[usize],
    n16: usize,
    n8: usize,
    cost: &CostModel,
    budget: Option<u64>,
) -> Result<BitPlan> {
    let n = relevance.len();
    let mut bits = vec![LayerBits::Full; n];
    let free: Vec<usize> = rank_desc(relevance)
        .into_iter()
        .filter(|i| !pinned.contains(i))
        .collect();
    if n16 + n8 > free.len() {
        return Err(TaqError::InvalidConfig(format!(
            "{n16}+{n8} slots for {} layers",
            free.len()
        )));
    }
    for (slot, &layer) in free.iter().enumerate() {
        bits[layer] = if slot < n16 {
            LayerBits::Quantized(16)
        } else if slot < n16 + n8 {
            LayerBits::Quantized(8)
        } else {
            LayerBits::Quantized(4)
        };
    }
    BitPlan::new(bits, pinned.to_vec(), budget, cost)
}
