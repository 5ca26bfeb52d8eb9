//! Per-group scale calibration of a quantized model against its full-precision original.
//!
//! The bit plan is fixed. For every quantized layer (most relevant first), every matrix and
//! every group, each scale multiplier on the grid is tried and the one with the lowest proxy
//! loss on a fixed calibration subset is kept. Full-precision weights are never modified.

use std::fmt;
use std::str::FromStr;

use crate::alloc::{BitPlan, LayerBits};
use crate::error::{Result, TaqError};
use crate::model::{Item, PackedState, ToyModel, Weight, WeightKind};
use crate::quant::{fit_scaled, DEFAULT_GROUP_SIZE};
use crate::scalar::Scalar;
use crate::stats::rank_desc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    LogitsMse,
    LogitsKl,
}

impl LossKind {
    pub fn id(self) -> &'static str {
        match self {
            LossKind::LogitsMse => "logits_mse",
            LossKind::LogitsKl => "logits_kl",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for LossKind {
    type Err = TaqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits_mse" | "mse" => Ok(LossKind::LogitsMse),
            "logits_kl" | "kl" => Ok(LossKind::LogitsKl),
            _ => Err(TaqError::InvalidConfig(format!("unknown loss kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProxyLoss {
    pub kind: LossKind,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibConfig {
    pub grid: Vec<f64>,
    pub passes: usize,
    pub loss: LossKind,
    /// Items of the calibration set used while searching; the final loss uses all of them.
    pub subset: usize,
    pub group_size: usize,
    /// Run the multiplier search in single precision; the returned model and losses keep the
    /// caller's precision either way.
    pub search_f32: bool,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self {
            grid: vec![0.8, 0.9, 1.0, 1.1, 1.2],
            passes: 1,
            loss: LossKind::LogitsMse,
            subset: 32,
            group_size: DEFAULT_GROUP_SIZE,
            search_f32: true,
        }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.grid.contains(&1.0) {
            return Err(TaqError::InvalidConfig(
                "calibration grid must contain 1.0".into(),
            ));
        }
        if self.grid.iter().any(|&m| !(m.is_finite() && m > 0.0)) {
            return Err(TaqError::InvalidConfig(format!(
                "grid multipliers must be positive: {:?}",
                self.grid
            )));
        }
        if self.subset == 0 || self.group_size == 0 {
            return Err(TaqError::InvalidConfig(
                "subset and group_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// The model input for one calibration item: its prompt.
pub fn calibration_input(item: &Item) -> Vec<u32> {
    item.prompt.clone()
}

fn loss_between<T: Scalar>(reference: &[T], logits: &[T], vocab: usize, kind: LossKind) -> f64 {
    let positions = reference.len() / vocab;
    let mut total = 0.0;
    match kind {
        LossKind::LogitsMse => {
            for (a, b) in reference.iter().zip(logits) {
                let d = a.as_f64() - b.as_f64();
                total += d * d;
            }
            total / (positions * vocab) as f64
        }
        LossKind::LogitsKl => {
            for (p, q) in reference
                .chunks_exact(vocab)
                .zip(logits.chunks_exact(vocab))
            {
                total += kl_row(p, q);
            }
            total / positions as f64
        }
    }
}

/// `KL(softmax(p) ‖ softmax(q))`, clamped at zero against rounding.
fn kl_row<T: Scalar>(p: &[T], q: &[T]) -> f64 {
    let lse = |r: &[T]| {
        let m = r
            .iter()
            .map(|x| x.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        m + r.iter().map(|x| (x.as_f64() - m).exp()).sum::<f64>().ln()
    };
    let (lp, lq) = (lse(p), lse(q));
    let kl: f64 = p
        .iter()
        .zip(q)
        .map(|(&a, &b)| {
            let la = a.as_f64() - lp;
            la.exp() * (la - (b.as_f64() - lq))
        })
        .sum();
    kl.max(0.0)
}

/// Packed reference logits and sequence lengths for a set of items.
struct Batch<T> {
    seqs: Vec<Vec<u32>>,
    reference: Vec<T>,
}

impl<T: Scalar> Batch<T> {
    fn new(fp: &ToyModel<T>, items: &[Item]) -> Result<Self> {
        let seqs: Vec<Vec<u32>> = items.iter().map(calibration_input).collect();
        let (h, lens) = fp.hidden_packed(0, &seqs)?;
        let reference = fp.forward_packed_from(0, &h, &lens);
        Ok(Self { seqs, reference })
    }

    fn loss(&self, q: &ToyModel<T>, kind: LossKind) -> Result<f64> {
        let (h, lens) = q.hidden_packed(0, &self.seqs)?;
        Ok(loss_between(
            &self.reference,
            &q.forward_packed_from(0, &h, &lens),
            q.cfg.vocab,
            kind,
        ))
    }
}

/// Mean logit discrepancy between `fp` and `q` over `items`, all positions.
pub fn proxy_error<T: Scalar>(
    fp: &ToyModel<T>,
    q: &ToyModel<T>,
    items: &[Item],
    kind: LossKind,
) -> Result<ProxyLoss> {
    if items.is_empty() {
        return Err(TaqError::InvalidInput("empty calibration set".into()));
    }
    if fp.cfg.vocab != q.cfg.vocab
        || fp.cfg.d_model != q.cfg.d_model
        || fp.n_layers() != q.n_layers()
    {
        return Err(TaqError::InvalidInput(
            "models do not share a configuration".into(),
        ));
    }
    let value = Batch::new(fp, items)?.loss(q, kind)?;
    Ok(ProxyLoss { kind, value })
}

/// Chosen scale multiplier for every group of every quantized matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    /// Indexed by `layer * 6 + kind`; empty for full-precision layers.
    pub groups: Vec<Vec<f64>>,
}

impl Multipliers {
    fn identity<T: Scalar>(q: &ToyModel<T>) -> Self {
        let mut groups = Vec::new();
        for l in 0..q.n_layers() {
            for kind in WeightKind::ALL {
                groups.push(match q.weight(l, kind) {
                    Weight::Quantized(t) => vec![1.0; t.n_groups()],
                    Weight::Dense(_) => Vec::new(),
                });
            }
        }
        Self { groups }
    }

    pub fn get(&self, layer: usize, kind: WeightKind) -> &[f64] {
        &self.groups[layer * WeightKind::ALL.len() + kind_index(kind)]
    }

    /// `(multiplier, count)` over all groups, sorted by multiplier.
    pub fn histogram(&self) -> Vec<(f64, usize)> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for &m in self.groups.iter().flatten() {
            match out.iter_mut().find(|(v, _)| *v == m) {
                Some(e) => e.1 += 1,
                None => out.push((m, 1)),
            }
        }
        out.sort_by(|a, b| a.0.total_cmp(&b.0));
        out
    }

    /// Quantizes `fp` per `plan` using these multipliers instead of plain min-max.
    pub fn apply<T: Scalar>(
        &self,
        fp: &ToyModel<T>,
        plan: &BitPlan,
        group_size: usize,
    ) -> Result<ToyModel<T>> {
        let mut q = fp.quantized(plan.bits(), group_size)?;
        if self.groups.len() != fp.n_layers() * WeightKind::ALL.len() {
            return Err(TaqError::InvalidPlan(
                "multipliers do not match the model".into(),
            ));
        }
        for l in 0..fp.n_layers() {
            let LayerBits::Quantized(bits) = plan.bits()[l] else {
                continue;
            };
            for kind in WeightKind::ALL {
                let original = fp.weight(l, kind).effective().as_slice().to_vec();
                let ms = self.get(l, kind);
                let Weight::Quantized(t) = q.blocks[l].weight_mut(kind) else {
                    unreachable!()
                };
                if ms.len() != t.n_groups() {
                    return Err(TaqError::InvalidPlan(format!(
                        "layer {l} {}: group count mismatch",
                        kind.name()
                    )));
                }
                for (g, &m) in ms.iter().enumerate() {
                    if m != 1.0 {
                        let p = fit_scaled(&original[t.group_range(g)], bits, m)?;
                        t.refit_group(g, &original, p)?;
                    }
                }
            }
        }
        Ok(q)
    }
}

fn kind_index(kind: WeightKind) -> usize {
    WeightKind::ALL
        .iter()
        .position(|&k| k == kind)
        .expect("listed kind")
}

#[derive(Debug, Clone)]
pub struct CalibResult<T: Scalar = f64> {
    pub model: ToyModel<T>,
    pub multipliers: Multipliers,
    /// Min-max initialization loss over the full calibration set.
    pub initial: ProxyLoss,
    /// Loss of the returned model over the full calibration set.
    pub final_loss: ProxyLoss,
    /// Subset losses before and after the search.
    pub subset_initial: f64,
    pub subset_final: f64,
    /// True when the searched multipliers did worse on the full set and were discarded.
    pub reverted: bool,
    pub evaluations: usize,
    pub subset_size: usize,
}

/// Calibrates `plan` on `items`. Layers are visited by descending `relevance`
/// (layer order when `None`).
pub fn calibrate<T: Scalar>(
    fp: &ToyModel<T>,
    plan: &BitPlan,
    items: &[Item],
    relevance: Option<&[f64]>,
    cfg: &CalibConfig,
) -> Result<CalibResult<T>> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(TaqError::InvalidInput("empty calibration set".into()));
    }
    if plan.n_layers() != fp.n_layers() {
        return Err(TaqError::InvalidPlan(format!(
            "plan has {} layers, model has {}",
            plan.n_layers(),
            fp.n_layers()
        )));
    }
    if !fp.is_dense() {
        return Err(TaqError::InvalidInput(
            "calibration needs the full-precision model".into(),
        ));
    }
    let order = match relevance {
        Some(r) if r.len() == fp.n_layers() => rank_desc(r),
        Some(r) => {
            return Err(TaqError::InvalidPlan(format!(
                "{} relevance values for {} layers",
                r.len(),
                fp.n_layers()
            )))
        }
        None => (0..fp.n_layers()).collect(),
    };
    let subset = &items[..cfg.subset.min(items.len())];
    let search = if cfg.search_f32 {
        search(&fp.cast::<f32>(), plan, subset, &order, cfg)?
    } else {
        search(fp, plan, subset, &order, cfg)?
    };

    let init = fp.quantized(plan.bits(), cfg.group_size)?;
    let searched = search.multipliers.apply(fp, plan, cfg.group_size)?;
    let full = Batch::new(fp, items)?;
    let initial = ProxyLoss {
        kind: cfg.loss,
        value: full.loss(&init, cfg.loss)?,
    };
    let value = full.loss(&searched, cfg.loss)?;
    let (model, multipliers, value, reverted) = if value <= initial.value {
        (searched, search.multipliers, value, false)
    } else {
        let ident = Multipliers::identity(&init);
        (init, ident, initial.value, true)
    };
    Ok(CalibResult {
        model,
        multipliers,
        initial,
        final_loss: ProxyLoss {
            kind: cfg.loss,
            value,
        },
        subset_initial: search.initial,
        subset_final: search.best,
        reverted,
        evaluations: search.evaluations,
        subset_size: subset.len(),
    })
}

struct Search {
    multipliers: Multipliers,
    initial: f64,
    best: f64,
    evaluations: usize,
}

/// Coordinate descent over (layer, matrix, group, multiplier) on the subset.
fn search<S: Scalar>(
    fp: &ToyModel<S>,
    plan: &BitPlan,
    subset: &[Item],
    order: &[usize],
    cfg: &CalibConfig,
) -> Result<Search> {
    let sub = Batch::new(fp, subset)?;
    let vocab = fp.cfg.vocab;
    let mut q = fp.quantized(plan.bits(), cfg.group_size)?;
    let mut mult = Multipliers::identity(&q);
    let initial = sub.loss(&q, cfg.loss)?;
    let mut best = initial;
    let mut evaluations = 0;
    let loss_after = |q: &ToyModel<S>, layer: usize, st: &PackedState<S>, lens: &[usize]| {
        loss_between(
            &sub.reference,
            &q.forward_packed_from(layer + 1, &st.h2, lens),
            vocab,
            cfg.loss,
        )
    };
    for _ in 0..cfg.passes {
        for &l in order {
            let LayerBits::Quantized(bits) = plan.bits()[l] else {
                continue;
            };
            // layers before `l` do not change while `l` is searched
            let (hidden, lens) = q.hidden_packed(l, &sub.seqs)?;
            let mut state = q.block_packed_state(l, &hidden, &lens);
            for kind in WeightKind::ALL {
                let original = fp.weight(l, kind).effective().as_slice().to_vec();
                let slot = l * WeightKind::ALL.len() + kind_index(kind);
                for g in 0..mult.groups[slot].len() {
                    let current = mult.groups[slot][g];
                    let (range, live) = match q.weight(l, kind) {
                        Weight::Quantized(t) => {
                            let r = t.group_range(g);
                            let live = t.cached().expect("cached").as_slice()[r.clone()].to_vec();
                            (r, live)
                        }
                        Weight::Dense(_) => unreachable!("quantized layer"),
                    };
                    let mut choice: Option<(f64, f64, PackedState<S>)> = None;
                    for &m in &cfg.grid {
                        if m == current {
                            continue;
                        }
                        let p = fit_scaled(&original[range.clone()], bits, m)?;
                        let delta: Vec<(usize, S)> = range
                            .clone()
                            .zip(&live)
                            .filter_map(|(i, &old)| {
                                let new = S::of(p.value_of(p.code_of(original[i].as_f64())));
                                (new != old).then(|| (i, new - old))
                            })
                            .collect();
                        let st = q.block_packed_delta(l, &state, &lens, kind, &delta);
                        let loss = loss_after(&q, l, &st, &lens);
                        evaluations += 1;
                        if loss < choice.as_ref().map_or(best, |c| c.1) {
                            choice = Some((m, loss, st));
                        }
                    }
                    if let Some((m, loss, st)) = choice {
                        let p = fit_scaled(&original[range], bits, m)?;
                        refit(&mut q, l, kind, g, &original, p)?;
                        mult.groups[slot][g] = m;
                        best = loss;
                        state = st;
                    }
                }
            }
        }
    }
    Ok(Search {
        multipliers: mult,
        initial,
        best,
        evaluations,
    })
}

fn refit<T: Scalar>(
    q: &mut ToyModel<T>,
    layer: usize,
    kind: WeightKind,
    g: usize,
    original: &[T],
    p: crate::quant::QuantParams,
) -> Result<()> {
    match q.blocks[layer].weight_mut(kind) {
        Weight::Quantized(t) => t.refit_group(g, original, p),
        Weight::Dense(_) => Err(TaqError::InvalidPlan(format!(
            "layer {layer} is not quantized"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_of_constant_shift() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b: Vec<f64> = a.iter().map(|x| x + 0.5).collect();
        assert!((loss_between(&a, &b, 3, LossKind::LogitsMse) - 0.25).abs() < 1e-15);
        assert_eq!(loss_between(&a, &a, 3, LossKind::LogitsMse), 0.0);
    }

    #[test]
    fn kl_direct() {
        let p = [0.3, -1.0, 2.0];
        assert_eq!(kl_row(&p, &p), 0.0);
        // shifting all logits leaves the distribution unchanged
        let shifted: Vec<f64> = p.iter().map(|x| x + 7.0).collect();
        assert!(kl_row(&p, &shifted) < 1e-14);
        let q = [0.0, 0.0, 0.0];
        let z: f64 = p.iter().map(|x: &f64| x.exp()).sum();
        let expect: f64 = p
            .iter()
            .map(|x: &f64| (x.exp() / z) * ((x.exp() / z) / (1.0 / 3.0)).ln())
            .sum();
        assert!((kl_row(&p, &q) - expect).abs() < 1e-12);
    }

    #[test]
    fn grid_must_hold_identity() {
        let cfg = CalibConfig {
            grid: vec![0.9, 1.1],
            ..CalibConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TaqError::InvalidConfig(_))));
        assert!(CalibConfig::default().validate().is_ok());
        assert_eq!("kl".parse::<LossKind>().unwrap(), LossKind::LogitsKl);
    }
}
