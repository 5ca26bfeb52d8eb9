use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::alloc::RankConfig;
use crate::calib::{CalibConfig, LossKind};
use crate::error::{Result, TaqError};
use crate::model::{ModelConfig, Optimizer, TaskKind, TrainConfig};
use crate::oracle::{SweepConfig, SweepMetric};
use crate::quant::{check_bits, ADMISSIBLE_BITS};
use crate::stats::RelevanceWeights;

/// Where a bit plan comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanSource {
    /// Relevance-ranked allocation from an activation profile.
    Taq,
    /// Two-level allocation from a per-layer sensitivity sweep.
    Taqo,
    /// Every layer at one bitwidth; the task-agnostic baseline.
    Uniform(u8),
}

impl fmt::Display for PlanSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanSource::Taq => f.write_str("taq"),
            PlanSource::Taqo => f.write_str("taqo"),
            PlanSource::Uniform(b) => write!(f, "uniform:{b}"),
        }
    }
}

impl FromStr for PlanSource {
    type Err = TaqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "taq" => Ok(PlanSource::Taq),
            "taqo" => Ok(PlanSource::Taqo),
            _ => {
                let b = s
                    .strip_prefix("uniform:")
                    .and_then(|b| b.parse::<u8>().ok())
                    .ok_or_else(|| {
                        TaqError::InvalidConfig(format!(
                            "unknown plan '{s}' (taq|taqo|uniform:<bits>)"
                        ))
                    })?;
                check_bits(b).map_err(|e| TaqError::InvalidConfig(e.to_string()))?;
                Ok(PlanSource::Uniform(b))
            }
        }
    }
}

fn sweep_metric_id(m: SweepMetric) -> String {
    match m {
        SweepMetric::Auto => "auto".into(),
        SweepMetric::ExactMatch => "exact_match".into(),
        SweepMetric::ProxyLoss(k) => format!("proxy_{k}"),
    }
}

fn parse_sweep_metric(s: &str) -> Result<SweepMetric> {
    match s {
        "auto" => Ok(SweepMetric::Auto),
        "exact_match" | "em" => Ok(SweepMetric::ExactMatch),
        _ => match s.strip_prefix("proxy_") {
            Some(k) => Ok(SweepMetric::ProxyLoss(k.parse()?)),
            None => Err(TaqError::InvalidConfig(format!(
                "unknown sweep metric '{s}'"
            ))),
        },
    }
}

/// Every setting of a pipeline run. Each field has a config-file key of the same name.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub checkpoint: Option<PathBuf>,
    /// JSONL calibration set; generated from `task`, `calib_size` and `seed` when absent.
    pub calibration: Option<PathBuf>,
    /// JSONL evaluation set; generated like the calibration set, from a different seed.
    pub eval_set: Option<PathBuf>,
    pub task: TaskKind,
    pub calib_size: usize,
    pub eval_size: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub reservoir: usize,
    pub f16: f64,
    pub f8: f64,
    pub edge: usize,
    pub group_size: usize,
    /// Admissible bitwidths; every plan level other than full precision must be listed.
    pub bits: Vec<u8>,
    pub grid: Vec<f64>,
    pub passes: usize,
    pub loss: LossKind,
    pub calib_subset: usize,
    pub plan: PlanSource,
    /// Layers kept at full precision on each end of a uniform plan.
    pub uniform_edge: usize,
    /// Total bit budget τ; unconstrained when absent.
    pub budget: Option<u64>,
    /// Critical-set threshold; chosen by `taqo_fraction` when absent.
    pub gamma: Option<f64>,
    pub taqo_fraction: f64,
    pub b_high: u8,
    pub b_low: u8,
    pub b_probe: u8,
    pub sweep_metric: SweepMetric,
    pub max_new_tokens: usize,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub d_ff: usize,
    pub train_steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub train_tasks: Vec<TaskKind>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let c = CalibConfig::default();
        let r = RankConfig::default();
        let s = SweepConfig::default();
        let t = TrainConfig::default();
        Self {
            checkpoint: None,
            calibration: None,
            eval_set: None,
            task: TaskKind::Copy,
            calib_size: 128,
            eval_size: 200,
            seed: 0,
            alpha: 0.5,
            beta: 0.5,
            reservoir: crate::stats::DEFAULT_RESERVOIR,
            f16: r.frac16,
            f8: r.frac8,
            edge: r.edge,
            group_size: c.group_size,
            bits: ADMISSIBLE_BITS.to_vec(),
            grid: c.grid,
            passes: c.passes,
            loss: c.loss,
            calib_subset: c.subset,
            plan: PlanSource::Taq,
            uniform_edge: 0,
            budget: None,
            gamma: None,
            taqo_fraction: 0.25,
            b_high: 8,
            b_low: 4,
            b_probe: s.b_probe,
            sweep_metric: s.metric,
            max_new_tokens: s.max_new_tokens,
            out: None,
            report: None,
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            vocab: m.vocab,
            max_seq: m.max_seq,
            d_ff: m.d_ff,
            train_steps: 6000,
            lr: t.lr,
            batch: t.batch,
            train_tasks: t.tasks,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| TaqError::InvalidConfig(format!("{key}: cannot parse '{v}'")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse(key, x.trim())).collect()
}

fn opt<T>(v: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
    match v {
        "" | "none" | "auto" => Ok(None),
        _ => f(v).map(Some),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map(T::to_string).unwrap_or_default()
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl PipelineConfig {
    pub const KEYS: [&'static str; 41] = [
        "checkpoint",
        "calibration",
        "eval_set",
        "task",
        "calib_size",
        "eval_size",
        "seed",
        "alpha",
        "beta",
        "reservoir",
        "f16",
        "f8",
        "edge",
        "group_size",
        "bits",
        "grid",
        "passes",
        "loss",
        "calib_subset",
        "plan",
        "uniform_edge",
        "budget",
        "gamma",
        "taqo_fraction",
        "b_high",
        "b_low",
        "b_probe",
        "sweep_metric",
        "max_new_tokens",
        "out",
        "report",
        "n_layers",
        "d_model",
        "n_heads",
        "vocab",
        "max_seq",
        "d_ff",
        "train_steps",
        "lr",
        "batch",
        "train_tasks",
    ];

    /// Defaults overridden by `pairs`, applied in order.
    pub fn from_kv<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k.as_ref(), v.as_ref())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let path = |v: &str| opt(v, |s| Ok(PathBuf::from(s)));
        match key {
            "checkpoint" => self.checkpoint = path(v)?,
            "calibration" => self.calibration = path(v)?,
            "eval_set" => self.eval_set = path(v)?,
            "task" => self.task = v.parse()?,
            "calib_size" => self.calib_size = parse(key, v)?,
            "eval_size" => self.eval_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "reservoir" => self.reservoir = parse(key, v)?,
            "f16" => self.f16 = parse(key, v)?,
            "f8" => self.f8 = parse(key, v)?,
            "edge" => self.edge = parse(key, v)?,
            "group_size" => self.group_size = parse(key, v)?,
            "bits" => self.bits = parse_list(key, v)?,
            "grid" => self.grid = parse_list(key, v)?,
            "passes" => self.passes = parse(key, v)?,
            "loss" => self.loss = v.parse()?,
            "calib_subset" => self.calib_subset = parse(key, v)?,
            "plan" => self.plan = v.parse()?,
            "uniform_edge" => self.uniform_edge = parse(key, v)?,
            "budget" => self.budget = opt(v, |s| parse(key, s))?,
            "gamma" => self.gamma = opt(v, |s| parse(key, s))?,
            "taqo_fraction" => self.taqo_fraction = parse(key, v)?,
            "b_high" => self.b_high = parse(key, v)?,
            "b_low" => self.b_low = parse(key, v)?,
            "b_probe" => self.b_probe = parse(key, v)?,
            "sweep_metric" => self.sweep_metric = parse_sweep_metric(v)?,
            "max_new_tokens" => self.max_new_tokens = parse(key, v)?,
            "out" => self.out = path(v)?,
            "report" => self.report = path(v)?,
            "n_layers" => self.n_layers = parse(key, v)?,
            "d_model" => self.d_model = parse(key, v)?,
            "n_heads" => self.n_heads = parse(key, v)?,
            "vocab" => self.vocab = parse(key, v)?,
            "max_seq" => self.max_seq = parse(key, v)?,
            "d_ff" => self.d_ff = parse(key, v)?,
            "train_steps" => self.train_steps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "train_tasks" => {
                self.train_tasks = v
                    .split(',')
                    .map(|t| t.trim().parse())
                    .collect::<Result<Vec<TaskKind>>>()?
            }
            _ => {
                return Err(TaqError::InvalidConfig(format!(
                    "unknown config key '{key}'"
                )))
            }
        }
        Ok(())
    }

    /// Every key with its current value, in [`Self::KEYS`] order; absent options are empty.
    /// Feeding the result back through [`Self::from_kv`] reproduces `self` exactly.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        Self::KEYS
            .iter()
            .map(|&k| {
                let v = match k {
                    "checkpoint" => show_path(&self.checkpoint),
                    "calibration" => show_path(&self.calibration),
                    "eval_set" => show_path(&self.eval_set),
                    "task" => self.task.to_string(),
                    "calib_size" => self.calib_size.to_string(),
                    "eval_size" => self.eval_size.to_string(),
                    "seed" => self.seed.to_string(),
                    "alpha" => self.alpha.to_string(),
                    "beta" => self.beta.to_string(),
                    "reservoir" => self.reservoir.to_string(),
                    "f16" => self.f16.to_string(),
                    "f8" => self.f8.to_string(),
                    "edge" => self.edge.to_string(),
                    "group_size" => self.group_size.to_string(),
                    "bits" => join(&self.bits),
                    "grid" => join(&self.grid),
                    "passes" => self.passes.to_string(),
                    "loss" => self.loss.to_string(),
                    "calib_subset" => self.calib_subset.to_string(),
                    "plan" => self.plan.to_string(),
                    "uniform_edge" => self.uniform_edge.to_string(),
                    "budget" => show(&self.budget),
                    "gamma" => show(&self.gamma),
                    "taqo_fraction" => self.taqo_fraction.to_string(),
                    "b_high" => self.b_high.to_string(),
                    "b_low" => self.b_low.to_string(),
                    "b_probe" => self.b_probe.to_string(),
                    "sweep_metric" => sweep_metric_id(self.sweep_metric),
                    "max_new_tokens" => self.max_new_tokens.to_string(),
                    "out" => show_path(&self.out),
                    "report" => show_path(&self.report),
                    "n_layers" => self.n_layers.to_string(),
                    "d_model" => self.d_model.to_string(),
                    "n_heads" => self.n_heads.to_string(),
                    "vocab" => self.vocab.to_string(),
                    "max_seq" => self.max_seq.to_string(),
                    "d_ff" => self.d_ff.to_string(),
                    "train_steps" => self.train_steps.to_string(),
                    "lr" => self.lr.to_string(),
                    "batch" => self.batch.to_string(),
                    "train_tasks" => join(&self.train_tasks),
                    _ => unreachable!("every key is listed"),
                };
                (k.to_string(), v)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TaqError::InvalidConfig(m));
        self.weights()?;
        self.calib_config().validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.calib_size == 0
            || self.eval_size == 0
            || self.reservoir == 0
            || self.max_new_tokens == 0
        {
            return bad(
                "calib_size, eval_size, reservoir and max_new_tokens must be positive".into(),
            );
        }
        if self.bits.is_empty() {
            return bad("bits must list at least one bitwidth".into());
        }
        for &b in self
            .bits
            .iter()
            .chain([&self.b_high, &self.b_low, &self.b_probe])
        {
            check_bits(b).map_err(|e| TaqError::InvalidConfig(e.to_string()))?;
        }
        if !(0.0..=1.0).contains(&self.f16)
            || !(0.0..=1.0).contains(&self.f8)
            || self.f16 + self.f8 > 1.0 + 1e-9
        {
            return bad(format!("rank fractions f16={} f8={}", self.f16, self.f8));
        }
        if !(self.taqo_fraction > 0.0 && self.taqo_fraction <= 1.0) {
            return bad(format!(
                "taqo_fraction {} outside (0, 1]",
                self.taqo_fraction
            ));
        }
        if self.b_high <= self.b_low {
            return bad(format!(
                "b_high {} must exceed b_low {}",
                self.b_high, self.b_low
            ));
        }
        if let Some(g) = self.gamma {
            if !g.is_finite() {
                return bad(format!("gamma {g} is not finite"));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<RelevanceWeights> {
        RelevanceWeights::new(self.alpha, self.beta)
    }

    pub fn rank_config(&self) -> RankConfig {
        RankConfig {
            frac16: self.f16,
            frac8: self.f8,
            edge: self.edge,
            budget: self.budget,
        }
    }

    pub fn calib_config(&self) -> CalibConfig {
        CalibConfig {
            grid: self.grid.clone(),
            passes: self.passes,
            loss: self.loss,
            subset: self.calib_subset,
            group_size: self.group_size,
            ..CalibConfig::default()
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            b_probe: self.b_probe,
            metric: self.sweep_metric,
            group_size: self.group_size,
            max_new_tokens: self.max_new_tokens,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            vocab: self.vocab,
            max_seq: self.max_seq,
            d_ff: self.d_ff,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: Optimizer::adam(),
            steps: self.train_steps,
            lr: self.lr,
            batch: self.batch,
            seed: self.seed,
            tasks: self.train_tasks.clone(),
            ..TrainConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.set("grid", "0.75, 1.0, 1.3").unwrap();
        cfg.set("gamma", "0.1").unwrap();
        cfg.set("plan", "uniform:8").unwrap();
        cfg.set("lr", "0.0007").unwrap();
        cfg.set("checkpoint", "model.taqm").unwrap();
        cfg.set("sweep_metric", "proxy_logits_kl").unwrap();
        let back = PipelineConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(
            PipelineConfig::from_kv(&PipelineConfig::default().to_kv()).unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn errors_are_config_errors() {
        let mut cfg = PipelineConfig::default();
        for (k, v) in [
            ("nope", "1"),
            ("seed", "-1"),
            ("task", "trivia"),
            ("plan", "uniform:3"),
            ("bits", "4;8"),
        ] {
            assert!(
                matches!(cfg.set(k, v), Err(TaqError::InvalidConfig(_))),
                "{k}={v}"
            );
        }
        cfg.alpha = 0.7;
        assert!(matches!(cfg.validate(), Err(TaqError::InvalidConfig(_))));
        PipelineConfig::default().validate().unwrap();
    }
}
