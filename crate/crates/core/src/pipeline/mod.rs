//! End-to-end runs: score, sweep, quantize, evaluate and train, each producing a report.

mod config;

pub use config::{PipelineConfig, PlanSource};

use std::path::Path;
use std::time::Instant;

use serde_json::{json, Map, Value};

use crate::alloc::{allocate_rank, BitPlan, CostModel, LayerBits};
use crate::calib::{calibrate, calibration_input, CalibResult};
use crate::error::{Result, TaqError};
use crate::io::report::{num, nums, plan_to_json, profile_to_json, TIMINGS_KEY};
use crate::io::{cost_model, read_checkpoint, read_items, write_checkpoint};
use crate::model::{
    evaluate, gen_task, init_model, train_toy, EvalResult, Item, ModelConfig, TaskKind, ToyModel,
    TrainConfig, TrainReport, WeightKind,
};
use crate::oracle::{
    auto_gamma, critical_set, sensitivity_sweep, taqo_allocate, CriticalSet, SensitivityCurve,
};
use crate::scalar::Scalar;
use crate::stats::{Profile, RelevanceWeights, StatsCollector};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Added to the run seed when generating the evaluation set, so it differs from the
/// calibration set.
pub const EVAL_SEED_OFFSET: u64 = 1 << 32;

/// Items from `path`, or `n` freshly generated items of `task`.
pub fn load_items(
    path: Option<&Path>,
    task: TaskKind,
    n: usize,
    vocab: usize,
    seed: u64,
) -> Result<Vec<Item>> {
    match path {
        Some(p) => read_items(p),
        None => Ok(gen_task(task, n, vocab, seed)),
    }
}

pub fn calibration_items(cfg: &PipelineConfig, vocab: usize) -> Result<Vec<Item>> {
    load_items(
        cfg.calibration.as_deref(),
        cfg.task,
        cfg.calib_size,
        vocab,
        cfg.seed,
    )
}

pub fn eval_items(cfg: &PipelineConfig, vocab: usize) -> Result<Vec<Item>> {
    load_items(
        cfg.eval_set.as_deref(),
        cfg.task,
        cfg.eval_size,
        vocab,
        cfg.seed.wrapping_add(EVAL_SEED_OFFSET),
    )
}

/// Rejects items whose tokens fall outside the model vocabulary or whose prompt leaves no room
/// to answer.
pub fn check_items(items: &[Item], cfg: &ModelConfig) -> Result<()> {
    for (i, it) in items.iter().enumerate() {
        if let Some(&t) = it
            .prompt
            .iter()
            .chain(&it.answer)
            .find(|&&t| t as usize >= cfg.vocab)
        {
            return Err(TaqError::InvalidInput(format!(
                "item {i}: token {t} outside vocabulary of {}",
                cfg.vocab
            )));
        }
        if it.prompt.len() >= cfg.max_seq {
            return Err(TaqError::InvalidInput(format!(
                "item {i}: prompt of {} tokens fills the context",
                it.prompt.len()
            )));
        }
    }
    Ok(())
}

/// Runs every calibration prompt through `model`, feeding each block output to the statistics
/// collector, and returns the relevance profile.
pub fn score_profile<T: Scalar>(
    model: &ToyModel<T>,
    items: &[Item],
    weights: RelevanceWeights,
    capacity: usize,
    seed: u64,
) -> Result<Profile> {
    if items.is_empty() {
        return Err(TaqError::InsufficientData(
            "no calibration items to score".into(),
        ));
    }
    let mut collector =
        StatsCollector::<T>::new(model.n_layers(), model.cfg.d_model, capacity, seed)?;
    let mut failure = None;
    for it in items {
        let mut sink = |l: usize, x: &crate::linalg::Matrix<T>| {
            if let Err(e) = collector.observe(l, x) {
                failure.get_or_insert(e);
            }
        };
        model.forward(&calibration_input(it), Some(&mut sink))?;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    collector.finalize(weights)
}

/// Every layer at `bits`, except `edge` layers on each end kept at full precision.
pub fn uniform_plan(
    bits: u8,
    edge: usize,
    cost: &CostModel,
    budget: Option<u64>,
) -> Result<BitPlan> {
    let n = cost.n_layers();
    if 2 * edge > n {
        return Err(TaqError::InvalidConfig(format!(
            "{edge} edge layers on each end of a {n}-layer model"
        )));
    }
    let pinned: Vec<usize> = (0..edge).chain(n - edge..n).collect();
    let mut plan = vec![LayerBits::Quantized(bits); n];
    for &p in &pinned {
        plan[p] = LayerBits::Full;
    }
    BitPlan::new(plan, pinned, budget, cost)
}

/// A sensitivity sweep with the threshold and critical set drawn from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub curve: SensitivityCurve,
    pub critical: CriticalSet,
    /// Whether γ came from the configuration rather than the target fraction.
    pub gamma_overridden: bool,
}

pub fn run_sweep(fp: &ToyModel, items: &[Item], cfg: &PipelineConfig) -> Result<SweepOutcome> {
    let curve = sensitivity_sweep(fp, items, &cfg.sweep_config(), None)?;
    let gamma = match cfg.gamma {
        Some(g) => g,
        None => auto_gamma(&curve, cfg.taqo_fraction)?,
    };
    let critical = critical_set(&curve, gamma)?;
    Ok(SweepOutcome {
        curve,
        critical,
        gamma_overridden: cfg.gamma.is_some(),
    })
}

/// Everything a quantization run produces.
#[derive(Debug, Clone)]
pub struct QuantizeOutcome {
    pub plan: BitPlan,
    pub profile: Option<Profile>,
    pub sweep: Option<SweepOutcome>,
    pub calib: CalibResult,
    pub eval_fp: EvalResult,
    pub eval_q: EvalResult,
    pub timings: Vec<(&'static str, f64)>,
}

fn check_levels(plan: &BitPlan, allowed: &[u8]) -> Result<()> {
    for b in plan.levels() {
        if let LayerBits::Quantized(q) = b {
            if !allowed.contains(&q) {
                return Err(TaqError::InvalidConfig(format!(
                    "plan uses {q} bits, not in the configured set {allowed:?}"
                )));
            }
        }
    }
    Ok(())
}

fn timed<R>(
    timings: &mut Vec<(&'static str, f64)>,
    name: &'static str,
    f: impl FnOnce() -> Result<R>,
) -> Result<R> {
    let t = Instant::now();
    let r = f()?;
    timings.push((name, t.elapsed().as_secs_f64()));
    Ok(r)
}

/// Plans, calibrates and evaluates in memory. `calib` drives scoring, sweeps and calibration;
/// `eval` is only used for the before/after evaluation.
pub fn quantize_model(
    fp: &ToyModel,
    calib: &[Item],
    eval: &[Item],
    cfg: &PipelineConfig,
) -> Result<QuantizeOutcome> {
    cfg.validate()?;
    if !fp.is_dense() {
        return Err(TaqError::InvalidInput(
            "quantization starts from a full-precision checkpoint".into(),
        ));
    }
    if calib.is_empty() {
        return Err(TaqError::InsufficientData(
            "calibration set has no items".into(),
        ));
    }
    check_items(calib, &fp.cfg)?;
    check_items(eval, &fp.cfg)?;
    let cost = cost_model(&fp.cfg);
    let mut timings = Vec::new();
    let (plan, profile, sweep, order) = match cfg.plan {
        PlanSource::Taq => {
            let profile = timed(&mut timings, "score", || {
                score_profile(fp, calib, cfg.weights()?, cfg.reservoir, cfg.seed)
            })?;
            let plan = allocate_rank(&profile.relevance(), &cost, &cfg.rank_config())?;
            let order = profile.relevance();
            (plan, Some(profile), None, Some(order))
        }
        PlanSource::Taqo => {
            let sweep = timed(&mut timings, "sweep", || run_sweep(fp, calib, cfg))?;
            let plan = taqo_allocate(
                &sweep.curve,
                &sweep.critical,
                cfg.b_high,
                cfg.b_low,
                &cost,
                cfg.budget,
            )?;
            let order = sweep.curve.delta.clone();
            (plan, None, Some(sweep), Some(order))
        }
        PlanSource::Uniform(b) => (
            uniform_plan(b, cfg.uniform_edge, &cost, cfg.budget)?,
            None,
            None,
            None,
        ),
    };
    check_levels(&plan, &cfg.bits)?;
    let calib_result = timed(&mut timings, "calibrate", || {
        calibrate(fp, &plan, calib, order.as_deref(), &cfg.calib_config())
    })?;
    let (eval_fp, eval_q) = timed(&mut timings, "evaluate", || {
        Ok((
            evaluate(fp, eval, cfg.max_new_tokens)?,
            evaluate(&calib_result.model, eval, cfg.max_new_tokens)?,
        ))
    })?;
    Ok(QuantizeOutcome {
        plan,
        profile,
        sweep,
        calib: calib_result,
        eval_fp,
        eval_q,
        timings,
    })
}

/// Trains a fresh model. Training runs in single precision; the result is widened to `f64`.
pub fn train_model(mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<(ToyModel, TrainReport)> {
    let mut m: ToyModel<f32> = init_model::<f64>(mcfg)?.cast();
    let report = train_toy(&mut m, tcfg)?;
    Ok((m.cast(), report))
}

fn load_dense(cfg: &PipelineConfig) -> Result<ToyModel> {
    let path = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| TaqError::InvalidConfig("checkpoint is not set".into()))?;
    let ck = read_checkpoint::<f64>(path)?;
    if !ck.model.is_dense() {
        return Err(TaqError::InvalidInput(format!(
            "{} is a quantized checkpoint",
            path.display()
        )));
    }
    Ok(ck.model)
}

/// Collects report sections in order and appends the timing block last.
struct ReportBuilder {
    doc: Map<String, Value>,
    timings: Map<String, Value>,
    start: Instant,
}

impl ReportBuilder {
    fn new(command: &str, cfg: &PipelineConfig) -> Self {
        let mut doc = Map::new();
        doc.insert("version".into(), VERSION.into());
        doc.insert("command".into(), command.into());
        doc.insert("seed".into(), cfg.seed.into());
        let echo: Map<String, Value> = cfg
            .to_kv()
            .into_iter()
            .map(|(k, v)| (k, Value::String(v)))
            .collect();
        doc.insert("config".into(), Value::Object(echo));
        Self {
            doc,
            timings: Map::new(),
            start: Instant::now(),
        }
    }

    fn section(&mut self, key: &str, v: Value) {
        self.doc.insert(key.into(), v);
    }

    fn time(&mut self, key: &str, secs: f64) {
        self.timings.insert(format!("{key}_s"), num(secs));
    }

    fn finish(mut self) -> Value {
        self.time("total", self.start.elapsed().as_secs_f64());
        self.doc
            .insert(TIMINGS_KEY.into(), Value::Object(self.timings));
        Value::Object(self.doc)
    }
}

fn model_json(m: &ModelConfig) -> Value {
    json!({
        "n_layers": m.n_layers,
        "d_model": m.d_model,
        "n_heads": m.n_heads,
        "vocab": m.vocab,
        "max_seq": m.max_seq,
        "d_ff": m.d_ff,
        "seed": m.seed,
        "weights_per_layer": m.weights_per_layer(),
        "quantized_tensors": WeightKind::ALL.iter().map(|k| k.name()).collect::<Vec<_>>(),
    })
}

fn data_json(cfg: &PipelineConfig, calib: usize, eval: Option<usize>) -> Value {
    let mut m = Map::new();
    m.insert("task".into(), cfg.task.id().into());
    m.insert("calibration_items".into(), calib.into());
    if let Some(e) = eval {
        m.insert("eval_items".into(), e.into());
    }
    Value::Object(m)
}

pub fn eval_json(r: &EvalResult) -> Value {
    json!({
        "exact_match": num(r.exact_match),
        "token_f1": num(r.token_f1),
        "n_items": r.n_items,
        "both_empty": r.both_empty,
    })
}

pub fn sweep_json(s: &SweepOutcome) -> Value {
    json!({
        "metric": s.curve.metric.to_string(),
        "b_probe": s.curve.b_probe,
        "baseline": num(s.curve.baseline),
        "max_new_tokens": s.curve.max_new_tokens,
        "delta": nums(&s.curve.delta),
        "gamma": num(s.critical.gamma),
        "gamma_source": if s.gamma_overridden { "override" } else { "auto" },
        "critical": s.critical.layers,
    })
}

pub fn costs_json(plan: &BitPlan, cost: &CostModel) -> Value {
    let full = cost.full_cost();
    json!({
        "full_bits": full,
        "quantized_bits": plan.cost(),
        "compression_ratio": num(full as f64 / plan.cost() as f64),
    })
}

/// Relevance profile of the checkpoint on the calibration set.
pub fn cmd_score(cfg: &PipelineConfig) -> Result<Value> {
    cfg.validate()?;
    let mut rep = ReportBuilder::new("score", cfg);
    let fp = load_dense(cfg)?;
    let items = calibration_items(cfg, fp.cfg.vocab)?;
    check_items(&items, &fp.cfg)?;
    let t = Instant::now();
    let profile = score_profile(&fp, &items, cfg.weights()?, cfg.reservoir, cfg.seed)?;
    rep.time("score", t.elapsed().as_secs_f64());
    rep.section("model", model_json(&fp.cfg));
    rep.section("data", data_json(cfg, items.len(), None));
    rep.section("profile", profile_to_json(&profile));
    Ok(rep.finish())
}

/// Per-layer sensitivity curve and the critical set it induces.
pub fn cmd_sweep(cfg: &PipelineConfig) -> Result<Value> {
    cfg.validate()?;
    let mut rep = ReportBuilder::new("sweep", cfg);
    let fp = load_dense(cfg)?;
    let items = calibration_items(cfg, fp.cfg.vocab)?;
    check_items(&items, &fp.cfg)?;
    let t = Instant::now();
    let sweep = run_sweep(&fp, &items, cfg)?;
    rep.time("sweep", t.elapsed().as_secs_f64());
    rep.section("model", model_json(&fp.cfg));
    rep.section("data", data_json(cfg, items.len(), None));
    rep.section("sweep", sweep_json(&sweep));
    Ok(rep.finish())
}

/// Plans, calibrates and evaluates; writes the quantized checkpoint to `out` when set.
pub fn cmd_quantize(cfg: &PipelineConfig) -> Result<Value> {
    cfg.validate()?;
    let mut rep = ReportBuilder::new("quantize", cfg);
    let fp = load_dense(cfg)?;
    let calib = calibration_items(cfg, fp.cfg.vocab)?;
    let eval = eval_items(cfg, fp.cfg.vocab)?;
    let out = quantize_model(&fp, &calib, &eval, cfg)?;
    if let Some(path) = &cfg.out {
        write_checkpoint(path, &out.calib.model, Some(&out.plan))?;
    }
    for (k, s) in &out.timings {
        rep.time(k, *s);
    }
    let cost = cost_model(&fp.cfg);
    rep.section("model", model_json(&fp.cfg));
    rep.section("data", data_json(cfg, calib.len(), Some(eval.len())));
    if let Some(p) = &out.profile {
        rep.section("profile", profile_to_json(p));
    }
    if let Some(s) = &out.sweep {
        rep.section("sweep", sweep_json(s));
    }
    rep.section("plan", plan_to_json(&out.plan, &cfg.plan.to_string()));
    rep.section("costs", costs_json(&out.plan, &cost));
    let c = &out.calib;
    let histogram: Vec<Value> = c
        .multipliers
        .histogram()
        .into_iter()
        .map(|(m, n)| json!([num(m), n]))
        .collect();
    rep.section(
        "calibration",
        json!({
            "loss": c.initial.kind.id(),
            "initial": num(c.initial.value),
            "final": num(c.final_loss.value),
            "subset_size": c.subset_size,
            "subset_initial": num(c.subset_initial),
            "subset_final": num(c.subset_final),
            "reverted": c.reverted,
            "evaluations": c.evaluations,
            "multipliers": histogram,
        }),
    );
    rep.section(
        "eval",
        json!({ "full_precision": eval_json(&out.eval_fp), "quantized": eval_json(&out.eval_q) }),
    );
    Ok(rep.finish())
}

/// Exact match and token F1 of any checkpoint, full precision or quantized.
pub fn cmd_eval(cfg: &PipelineConfig) -> Result<Value> {
    cfg.validate()?;
    let mut rep = ReportBuilder::new("eval", cfg);
    let path = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| TaqError::InvalidConfig("checkpoint is not set".into()))?;
    let ck = read_checkpoint::<f64>(path)?;
    let items = eval_items(cfg, ck.model.cfg.vocab)?;
    check_items(&items, &ck.model.cfg)?;
    let t = Instant::now();
    let r = evaluate(&ck.model, &items, cfg.max_new_tokens)?;
    rep.time("evaluate", t.elapsed().as_secs_f64());
    rep.section("model", model_json(&ck.model.cfg));
    rep.section(
        "data",
        json!({ "task": cfg.task.id(), "eval_items": items.len() }),
    );
    if let Some(plan) = &ck.plan {
        rep.section("plan", plan_to_json(plan, "checkpoint"));
        rep.section("costs", costs_json(plan, &cost_model(&ck.model.cfg)));
    }
    rep.section("eval", json!({ "result": eval_json(&r) }));
    Ok(rep.finish())
}

/// Trains a model from the model and training keys and writes it to `out`.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<Value> {
    cfg.validate()?;
    let out = cfg
        .out
        .as_deref()
        .ok_or_else(|| TaqError::InvalidConfig("out is not set".into()))?;
    let mut rep = ReportBuilder::new("train", cfg);
    let mcfg = cfg.model_config();
    let t = Instant::now();
    let (model, tr) = train_model(&mcfg, &cfg.train_config())?;
    rep.time("train", t.elapsed().as_secs_f64());
    write_checkpoint(out, &model, None)?;
    let t = Instant::now();
    let mut per_task = Map::new();
    for &task in &cfg.train_tasks {
        let items = gen_task(
            task,
            cfg.eval_size,
            mcfg.vocab,
            cfg.seed.wrapping_add(EVAL_SEED_OFFSET),
        );
        per_task.insert(
            task.id().into(),
            eval_json(&evaluate(&model, &items, cfg.max_new_tokens)?),
        );
    }
    rep.time("evaluate", t.elapsed().as_secs_f64());
    rep.section("model", model_json(&mcfg));
    rep.section(
        "train",
        json!({
            "steps": tr.steps,
            "initial_loss": num(tr.initial_loss),
            "final_loss": num(tr.final_loss),
            "eval": Value::Object(per_task),
        }),
    );
    Ok(rep.finish())
}

/// Writes the calibration set `cfg` would generate to `out`, as JSONL.
pub fn cmd_gen_data(cfg: &PipelineConfig) -> Result<usize> {
    cfg.validate()?;
    let out = cfg
        .out
        .as_deref()
        .ok_or_else(|| TaqError::InvalidConfig("out is not set".into()))?;
    let items = gen_task(cfg.task, cfg.calib_size, cfg.vocab, cfg.seed);
    crate::io::write_items(out, &items)?;
    Ok(items.len())
}
