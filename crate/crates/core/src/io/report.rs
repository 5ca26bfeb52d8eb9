//! Canonical JSON reports.
//!
//! Objects keep insertion order, floats are written with 17 significant digits and the
//! wall-clock `timings` block is the last key, so two reports can be compared byte for byte
//! once that block is dropped.

use serde_json::{Map, Number, Value};

use crate::alloc::{BitPlan, CostModel, LayerBits};
use crate::error::{Result, TaqError};
use crate::stats::{LayerStats, Profile, RelevanceWeights};

pub const TIMINGS_KEY: &str = "timings";

/// A float as a JSON number with 17 significant digits; non-finite values become `null`.
pub fn num(x: f64) -> Value {
    if !x.is_finite() {
        return Value::Null;
    }
    let text = format!("{x:.16e}");
    Value::Number(serde_json::from_str::<Number>(&text).expect("formatted float is valid JSON"))
}

pub fn nums(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| num(x)).collect())
}

/// Pretty-printed report text with a trailing newline.
pub fn to_canonical(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s
}

pub fn parse_report(text: &str) -> Result<Value> {
    let v: Value = serde_json::from_str(text)?;
    if !v.is_object() {
        return Err(TaqError::Format("report is not a JSON object".into()));
    }
    Ok(v)
}

/// The report with its timing block removed.
pub fn without_timings(v: &Value) -> Value {
    let mut v = v.clone();
    if let Some(obj) = v.as_object_mut() {
        obj.shift_remove(TIMINGS_KEY);
    }
    v
}

/// Paths at which two reports differ, ignoring timings. Empty means identical.
pub fn diff_reports(a: &Value, b: &Value) -> Vec<String> {
    let mut out = Vec::new();
    diff_at("$", &without_timings(a), &without_timings(b), &mut out);
    out
}

fn diff_at(path: &str, a: &Value, b: &Value, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            for (k, va) in x {
                match y.get(k) {
                    Some(vb) => diff_at(&format!("{path}.{k}"), va, vb, out),
                    None => out.push(format!("{path}.{k} (only in first)")),
                }
            }
            for k in y.keys().filter(|k| !x.contains_key(*k)) {
                out.push(format!("{path}.{k} (only in second)"));
            }
            if out.is_empty() && !x.keys().eq(y.keys()) {
                out.push(format!("{path} (key order)"));
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (va, vb)) in x.iter().zip(y).enumerate() {
                diff_at(&format!("{path}[{i}]"), va, vb, out);
            }
        }
        _ if a == b => {}
        _ => out.push(path.to_string()),
    }
}

fn obj<'a>(v: &'a Value, what: &str) -> Result<&'a Map<String, Value>> {
    v.as_object()
        .ok_or_else(|| TaqError::Format(format!("{what} is not an object")))
}

fn field<'a>(o: &'a Map<String, Value>, key: &str) -> Result<&'a Value> {
    o.get(key)
        .ok_or_else(|| TaqError::Format(format!("missing field {key}")))
}

fn f64_of(v: &Value, key: &str) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| TaqError::Format(format!("{key} is not a number")))
}

fn u64_of(v: &Value, key: &str) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| TaqError::Format(format!("{key} is not an unsigned integer")))
}

fn bool_of(v: &Value, key: &str) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| TaqError::Format(format!("{key} is not a boolean")))
}

fn u64_list(v: &Value, key: &str) -> Result<Vec<u64>> {
    v.as_array()
        .ok_or_else(|| TaqError::Format(format!("{key} is not an array")))?
        .iter()
        .map(|x| u64_of(x, key))
        .collect()
}

pub fn plan_to_json(plan: &BitPlan, source: &str) -> Value {
    let [n16, n8, n4] = plan.level_counts();
    let mut m = Map::new();
    m.insert("source".into(), source.into());
    m.insert(
        "bits".into(),
        plan.bits()
            .iter()
            .map(|b| b.to_byte())
            .collect::<Vec<u8>>()
            .into(),
    );
    m.insert("pinned".into(), plan.pinned().into());
    m.insert(
        "budget".into(),
        plan.budget().map_or(Value::Null, Value::from),
    );
    m.insert("cost".into(), plan.cost().into());
    m.insert(
        "levels".into(),
        serde_json::json!({ "16": n16, "8": n8, "4": n4 }),
    );
    Value::Object(m)
}

/// Rebuilds a plan section and re-checks it against `cost`, including the recorded cost.
pub fn plan_from_json(v: &Value, cost: &CostModel) -> Result<BitPlan> {
    let o = obj(v, "plan")?;
    let bits = u64_list(field(o, "bits")?, "bits")?
        .into_iter()
        .map(|b| {
            u8::try_from(b)
                .map_err(|_| TaqError::Format(format!("bits {b}")))
                .and_then(LayerBits::from_byte)
        })
        .collect::<Result<Vec<_>>>()?;
    let pinned = u64_list(field(o, "pinned")?, "pinned")?
        .into_iter()
        .map(|p| p as usize)
        .collect();
    let budget = match field(o, "budget")? {
        Value::Null => None,
        b => Some(u64_of(b, "budget")?),
    };
    let plan = BitPlan::new(bits, pinned, budget, cost)?;
    let recorded = u64_of(field(o, "cost")?, "cost")?;
    if recorded != plan.cost() {
        return Err(TaqError::InvalidPlan(format!(
            "recorded cost {recorded} != {}",
            plan.cost()
        )));
    }
    let [n16, n8, n4] = plan.level_counts();
    let levels = obj(field(o, "levels")?, "levels")?;
    for (key, want) in [("16", n16), ("8", n8), ("4", n4)] {
        if u64_of(field(levels, key)?, key)? != want as u64 {
            return Err(TaqError::InvalidPlan(format!(
                "recorded {key}-bit count disagrees with bits"
            )));
        }
    }
    Ok(plan)
}

pub fn profile_to_json(p: &Profile) -> Value {
    let layers: Vec<Value> = p
        .layers
        .iter()
        .map(|l| {
            let mut m = Map::new();
            m.insert("layer".into(), l.layer.into());
            m.insert("entropy".into(), num(l.entropy));
            m.insert("variance".into(), num(l.variance));
            m.insert("stability".into(), num(l.stability));
            m.insert("z_entropy".into(), num(l.z_entropy));
            m.insert("z_stability".into(), num(l.z_stability));
            m.insert("relevance".into(), num(l.relevance));
            m.insert("entropy_degenerate".into(), l.entropy_degenerate.into());
            Value::Object(m)
        })
        .collect();
    let mut m = Map::new();
    m.insert("alpha".into(), num(p.weights.alpha));
    m.insert("beta".into(), num(p.weights.beta));
    m.insert("layers".into(), Value::Array(layers));
    m.insert("ranking".into(), p.ranking().into());
    m.insert("z_entropy_degenerate".into(), p.z_entropy_degenerate.into());
    m.insert(
        "z_stability_degenerate".into(),
        p.z_stability_degenerate.into(),
    );
    Value::Object(m)
}

/// Rebuilds a profile section and re-checks its invariants and recorded ranking.
pub fn profile_from_json(v: &Value) -> Result<Profile> {
    let o = obj(v, "profile")?;
    let weights = RelevanceWeights::new(
        f64_of(field(o, "alpha")?, "alpha")?,
        f64_of(field(o, "beta")?, "beta")?,
    )?;
    let layers = field(o, "layers")?
        .as_array()
        .ok_or_else(|| TaqError::Format("layers is not an array".into()))?
        .iter()
        .map(|l| {
            let l = obj(l, "layer")?;
            let f = |k: &str| field(l, k).and_then(|v| f64_of(v, k));
            Ok(LayerStats {
                layer: u64_of(field(l, "layer")?, "layer")? as usize,
                entropy: f("entropy")?,
                variance: f("variance")?,
                stability: f("stability")?,
                z_entropy: f("z_entropy")?,
                z_stability: f("z_stability")?,
                relevance: f("relevance")?,
                entropy_degenerate: bool_of(field(l, "entropy_degenerate")?, "entropy_degenerate")?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let p = Profile {
        layers,
        weights,
        z_entropy_degenerate: bool_of(field(o, "z_entropy_degenerate")?, "z_entropy_degenerate")?,
        z_stability_degenerate: bool_of(
            field(o, "z_stability_degenerate")?,
            "z_stability_degenerate",
        )?,
    };
    p.validate()?;
    let ranking: Vec<usize> = u64_list(field(o, "ranking")?, "ranking")?
        .into_iter()
        .map(|r| r as usize)
        .collect();
    if ranking != p.ranking() {
        return Err(TaqError::Format(
            "recorded ranking disagrees with relevance".into(),
        ));
    }
    Ok(p)
}

/// Re-loads and re-validates every plan and profile a report carries.
pub fn validate_report(v: &Value, cost: &CostModel) -> Result<()> {
    let o = obj(v, "report")?;
    if let Some(p) = o.get("profile") {
        profile_from_json(p)?;
    }
    if let Some(p) = o.get("plan") {
        plan_from_json(p, cost)?;
    }
    if let Some(keys) = o.keys().position(|k| k == TIMINGS_KEY) {
        if keys + 1 != o.len() {
            return Err(TaqError::Format("timings must be the last block".into()));
        }
    }
    Ok(())
}
