//! Direct per-layer sensitivity and the two-level plan built from it.
//!
//! Each layer is quantized alone at a probe bitwidth and the task metric drop is recorded.
//! Layers whose drop reaches the threshold γ are critical and get the high bitwidth; every
//! other layer gets the low one.

use std::fmt;

use crate::alloc::{fraction_count, BitPlan, CostModel, LayerBits};
use crate::calib::{proxy_error, LossKind};
use crate::error::{Result, TaqError};
use crate::model::{evaluate, Item, ToyModel};
use crate::quant::{check_bits, DEFAULT_GROUP_SIZE};
use crate::scalar::Scalar;

pub const DEFAULT_PROBE_BITS: u8 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    /// Exact-match points lost.
    ExactMatch,
    /// Proxy loss gained over the full-precision model.
    ProxyLoss(LossKind),
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKind::ExactMatch => f.write_str("exact_match"),
            MetricKind::ProxyLoss(k) => write!(f, "proxy_{k}"),
        }
    }
}

/// Which metric a sweep uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SweepMetric {
    ExactMatch,
    ProxyLoss(LossKind),
    /// Exact match when the full-precision model scores above zero, else the MSE proxy.
    #[default]
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityCurve {
    /// Per-layer drop; larger means more sensitive.
    pub delta: Vec<f64>,
    pub metric: MetricKind,
    pub b_probe: u8,
    /// Metric of the unquantized model (0 for the proxy loss).
    pub baseline: f64,
    pub max_new_tokens: usize,
}

impl SensitivityCurve {
    pub fn n_layers(&self) -> usize {
        self.delta.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub b_probe: u8,
    pub metric: SweepMetric,
    pub group_size: usize,
    pub max_new_tokens: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            b_probe: DEFAULT_PROBE_BITS,
            metric: SweepMetric::Auto,
            group_size: DEFAULT_GROUP_SIZE,
            max_new_tokens: crate::model::DEFAULT_MAX_NEW_TOKENS,
        }
    }
}

/// Callback that sees each probe model with its layer index.
pub type ProbeHook<'a, T> = &'a mut dyn FnMut(usize, &ToyModel<T>);

/// Quantizes each layer alone to `b_probe` (min-max) and records the metric drop.
/// `probe_hook`, when given, sees every probe model before it is evaluated.
pub fn sensitivity_sweep<T: Scalar>(
    fp: &ToyModel<T>,
    items: &[Item],
    cfg: &SweepConfig,
    mut probe_hook: Option<ProbeHook<'_, T>>,
) -> Result<SensitivityCurve> {
    check_bits(cfg.b_probe)?;
    if items.is_empty() {
        return Err(TaqError::InvalidInput("empty evaluation set".into()));
    }
    if !fp.is_dense() {
        return Err(TaqError::InvalidInput(
            "sweeps start from the full-precision model".into(),
        ));
    }
    let em = |m: &ToyModel<T>| evaluate(m, items, cfg.max_new_tokens).map(|r| r.exact_match);
    let (metric, baseline) = match cfg.metric {
        SweepMetric::ExactMatch => (MetricKind::ExactMatch, em(fp)?),
        SweepMetric::ProxyLoss(k) => (MetricKind::ProxyLoss(k), 0.0),
        SweepMetric::Auto => {
            let base = em(fp)?;
            if base > 0.0 {
                (MetricKind::ExactMatch, base)
            } else {
                (MetricKind::ProxyLoss(LossKind::LogitsMse), 0.0)
            }
        }
    };
    let mut delta = Vec::with_capacity(fp.n_layers());
    for l in 0..fp.n_layers() {
        let mut probe = || -> Result<f64> {
            let mut m = fp.clone();
            m.quantize_layer(l, cfg.b_probe, cfg.group_size)?;
            if let Some(h) = probe_hook.as_mut() {
                h(l, &m);
            }
            match metric {
                MetricKind::ExactMatch => Ok(baseline - em(&m)?),
                MetricKind::ProxyLoss(k) => Ok(proxy_error(fp, &m, items, k)?.value),
            }
        };
        let d = probe().map_err(|e| TaqError::LayerEval {
            layer: l,
            source: Box::new(e),
        })?;
        if !d.is_finite() {
            return Err(TaqError::LayerEval {
                layer: l,
                source: Box::new(TaqError::InvalidInput(format!(
                    "non-finite sensitivity {d}"
                ))),
            });
        }
        delta.push(d);
    }
    Ok(SensitivityCurve {
        delta,
        metric,
        b_probe: cfg.b_probe,
        baseline,
        max_new_tokens: cfg.max_new_tokens,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticalSet {
    pub gamma: f64,
    /// Ascending layer indices with `Δ ≥ γ`.
    pub layers: Vec<usize>,
}

pub fn critical_set(curve: &SensitivityCurve, gamma: f64) -> Result<CriticalSet> {
    if gamma.is_nan() {
        return Err(TaqError::InvalidInput("γ is NaN".into()));
    }
    let layers = curve
        .delta
        .iter()
        .enumerate()
        .filter(|(_, &d)| d >= gamma)
        .map(|(i, _)| i)
        .collect();
    Ok(CriticalSet { gamma, layers })
}

fn two_level(n: usize, critical: &[usize], b_high: u8, b_low: u8) -> Vec<LayerBits> {
    let mut bits = vec![LayerBits::Quantized(b_low); n];
    for &l in critical {
        bits[l] = LayerBits::Quantized(b_high);
    }
    bits
}

/// `b_high` on the critical layers, `b_low` elsewhere. Over budget, the error reports the
/// smallest threshold whose plan would fit, without applying it.
pub fn taqo_allocate(
    curve: &SensitivityCurve,
    set: &CriticalSet,
    b_high: u8,
    b_low: u8,
    cost: &CostModel,
    budget: Option<u64>,
) -> Result<BitPlan> {
    check_bits(b_high)?;
    check_bits(b_low)?;
    if b_high <= b_low {
        return Err(TaqError::InvalidConfig(format!(
            "b_high {b_high} must exceed b_low {b_low}"
        )));
    }
    let n = curve.n_layers();
    if cost.n_layers() != n {
        return Err(TaqError::InvalidPlan(format!(
            "cost model has {} layers, curve has {n}",
            cost.n_layers()
        )));
    }
    if let Some(&bad) = set.layers.iter().find(|&&l| l >= n) {
        return Err(TaqError::InvalidPlan(format!(
            "critical layer {bad} out of range"
        )));
    }
    let bits = two_level(n, &set.layers, b_high, b_low);
    let c = cost.cost_of(&bits);
    if let Some(tau) = budget {
        if c > tau {
            return Err(TaqError::BudgetInfeasible {
                cost: c,
                budget: tau,
                min_gamma: min_feasible_gamma(curve, set.gamma, b_high, b_low, cost, tau),
            });
        }
    }
    BitPlan::new(bits, Vec::new(), budget, cost)
}

/// Smallest `γ' ≥ γ` (a curve value, or just above the maximum) whose plan costs at most `tau`.
fn min_feasible_gamma(
    curve: &SensitivityCurve,
    gamma: f64,
    b_high: u8,
    b_low: u8,
    cost: &CostModel,
    tau: u64,
) -> Option<f64> {
    let mut candidates: Vec<f64> = curve
        .delta
        .iter()
        .copied()
        .filter(|&d| d >= gamma)
        .collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.push(above_max(&curve.delta));
    candidates.into_iter().find(|&g| {
        let ks: Vec<usize> = curve
            .delta
            .iter()
            .enumerate()
            .filter(|(_, &d)| d >= g)
            .map(|(i, _)| i)
            .collect();
        cost.cost_of(&two_level(curve.n_layers(), &ks, b_high, b_low)) <= tau
    })
}

fn above_max(delta: &[f64]) -> f64 {
    let mx = delta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx.is_finite() {
        mx + 1.0
    } else {
        0.0
    }
}

/// Threshold selecting at most `ceil(fraction·N)` critical layers. With ties at the cut, γ
/// lies midway between the tied value and the next larger one, so all tied layers drop out.
pub fn auto_gamma(curve: &SensitivityCurve, fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TaqError::InvalidConfig(format!(
            "target fraction {fraction} outside (0, 1]"
        )));
    }
    let n = curve.n_layers();
    if n == 0 {
        return Err(TaqError::InvalidInput("empty sensitivity curve".into()));
    }
    let cap = fraction_count(fraction, n);
    let mut sorted = curve.delta.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    if cap >= n {
        return Ok(sorted[n - 1]);
    }
    let cut = sorted[cap];
    Ok(match sorted[..cap].iter().rev().find(|&&v| v > cut) {
        Some(&next) => cut + (next - cut) / 2.0,
        None => above_max(&curve.delta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(delta: Vec<f64>) -> SensitivityCurve {
        SensitivityCurve {
            delta,
            metric: MetricKind::ExactMatch,
            b_probe: 4,
            baseline: 50.0,
            max_new_tokens: 16,
        }
    }

    #[test]
    fn critical_examples() {
        let c = curve(vec![0.50, 0.10, 0.30]);
        assert_eq!(critical_set(&c, 0.25).unwrap().layers, vec![0, 2]);
        assert_eq!(
            critical_set(&c, f64::NEG_INFINITY).unwrap().layers,
            vec![0, 1, 2]
        );
        assert!(critical_set(&c, 0.51).unwrap().layers.is_empty());
        assert_eq!(critical_set(&c, 0.30).unwrap().layers, vec![0, 2]);
    }

    #[test]
    fn taqo_examples() {
        let c = curve(vec![0.5, 0.1, 0.3, 0.0]);
        let cost = CostModel::uniform(4, 100);
        let none = critical_set(&c, 1.0).unwrap();
        assert_eq!(
            taqo_allocate(&c, &none, 16, 4, &cost, None).unwrap().bits(),
            &[LayerBits::Quantized(4); 4]
        );
        let all = critical_set(&c, f64::NEG_INFINITY).unwrap();
        assert_eq!(
            taqo_allocate(&c, &all, 16, 4, &cost, None).unwrap().bits(),
            &[LayerBits::Quantized(16); 4]
        );
        let k = CriticalSet {
            gamma: 0.3,
            layers: vec![0, 2],
        };
        let plan = taqo_allocate(&c, &k, 16, 4, &cost, None).unwrap();
        assert_eq!(plan.cost(), 100 * (16 + 4 + 16 + 4));
        assert!(matches!(
            taqo_allocate(&c, &k, 4, 4, &cost, None),
            Err(TaqError::InvalidConfig(_))
        ));
    }

    #[test]
    fn infeasible_reports_min_gamma() {
        let c = curve(vec![0.5, 0.1, 0.3, 0.0]);
        let cost = CostModel::uniform(4, 1);
        let all = critical_set(&c, f64::NEG_INFINITY).unwrap();
        // one 16-bit layer fits in 16 + 3·4 = 28
        match taqo_allocate(&c, &all, 16, 4, &cost, Some(28)) {
            Err(TaqError::BudgetInfeasible {
                cost: 64,
                budget: 28,
                min_gamma: Some(g),
            }) => assert_eq!(g, 0.5),
            other => panic!("{other:?}"),
        }
        match taqo_allocate(&c, &all, 16, 4, &cost, Some(15)) {
            Err(TaqError::BudgetInfeasible {
                min_gamma: None, ..
            }) => {}
            other => panic!("{other:?}"),
        }
        match taqo_allocate(&c, &all, 16, 4, &cost, Some(16)) {
            Err(TaqError::BudgetInfeasible {
                min_gamma: Some(g), ..
            }) => assert_eq!(g, 1.5),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn auto_gamma_examples() {
        let c = curve(vec![0.8, 0.1, 0.5, 0.3, 0.9, 0.2, 0.7, 0.4]);
        let g = auto_gamma(&c, 1.0).unwrap();
        assert_eq!(g, 0.1);
        assert_eq!(critical_set(&c, g).unwrap().layers.len(), 8);
        let g = auto_gamma(&c, 0.25).unwrap();
        assert_eq!(critical_set(&c, g).unwrap().layers, vec![0, 4]);
        let ties = curve(vec![0.5, 0.5, 0.5, 0.1]);
        let g = auto_gamma(&ties, 0.5).unwrap();
        assert!(critical_set(&ties, g).unwrap().layers.is_empty());
        assert!(auto_gamma(&c, 0.0).is_err());
    }
}
