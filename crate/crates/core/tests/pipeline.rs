use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde_json::Value;
use taq::io::report::{
    diff_reports, parse_report, plan_from_json, profile_from_json, to_canonical, validate_report,
    without_timings,
};
use taq::io::{cost_model, read_checkpoint, write_checkpoint, write_items};
use taq::model::{
    gen_task, greedy_decode, init_model, Item, ModelConfig, TaskKind, ToyModel, TrainConfig,
};
use taq::pipeline::{cmd_eval, cmd_quantize, cmd_score, cmd_sweep, train_model, PipelineConfig};
use taq::TaqError;

/// A briefly trained six-layer model, shared by the tests in this file.
fn trained() -> &'static ToyModel {
    static M: OnceLock<ToyModel> = OnceLock::new();
    M.get_or_init(|| {
        let mcfg = ModelConfig {
            n_layers: 6,
            ..ModelConfig::default()
        };
        train_model(
            &mcfg,
            &TrainConfig {
                steps: 300,
                ..TrainConfig::default()
            },
        )
        .unwrap()
        .0
    })
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(model: &ToyModel) -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_checkpoint(&dir.path().join("model.taqm"), model, None).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cfg(&self, extra: &[(&str, &str)]) -> PipelineConfig {
        let ck = self.path("model.taqm");
        let mut kv = vec![
            ("checkpoint", ck.to_str().unwrap()),
            ("calib_size", "24"),
            ("calib_subset", "8"),
            ("eval_size", "30"),
        ];
        kv.extend_from_slice(extra);
        PipelineConfig::from_kv(&kv).unwrap()
    }
}

fn canonical(v: &Value) -> String {
    to_canonical(&without_timings(v))
}

fn ranking(report: &Value) -> Vec<u64> {
    report["profile"]["ranking"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap())
        .collect()
}

#[test]
fn score_is_byte_identical_and_reloadable() {
    let fx = Fixture::new(trained());
    let cfg = fx.cfg(&[("task", "copy"), ("seed", "11")]);
    let a = cmd_score(&cfg).unwrap();
    let b = cmd_score(&cfg).unwrap();
    assert_eq!(canonical(&a), canonical(&b));
    assert!(diff_reports(&a, &b).is_empty());
    let keys: Vec<&String> = a.as_object().unwrap().keys().collect();
    assert_eq!(keys.last().unwrap().as_str(), "timings");

    let text = to_canonical(&a);
    let back = parse_report(&text).unwrap();
    validate_report(&back, &cost_model(&trained().cfg)).unwrap();
    let p = profile_from_json(&back["profile"]).unwrap();
    assert_eq!(p.layers.len(), 6);

    // The echoed config alone reproduces the report.
    let echo: Vec<(String, String)> = back["config"]
        .as_object()
        .unwrap()
        .iter()
        .map(|(k, v)| (k.clone(), v.as_str().unwrap().to_string()))
        .collect();
    let again = cmd_score(&PipelineConfig::from_kv(&echo).unwrap()).unwrap();
    assert_eq!(canonical(&again), canonical(&a));
}

#[test]
fn empty_calibration_file_is_insufficient_data() {
    let fx = Fixture::new(trained());
    let empty = fx.path("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let cfg = fx.cfg(&[("calibration", empty.to_str().unwrap())]);
    let err = cmd_score(&cfg).unwrap_err();
    assert!(matches!(err, TaqError::InsufficientData(_)), "{err}");
    assert_ne!(err.exit_code(), 0);
    assert!(matches!(
        cmd_quantize(&cfg),
        Err(TaqError::InsufficientData(_))
    ));
}

#[test]
fn different_tasks_rank_layers_differently() {
    let fx = Fixture::new(trained());
    let copy = cmd_score(&fx.cfg(&[("task", "copy"), ("calib_size", "128")])).unwrap();
    let modadd = cmd_score(&fx.cfg(&[("task", "modadd"), ("calib_size", "128")])).unwrap();
    assert_ne!(ranking(&copy), ranking(&modadd));
}

#[test]
fn calibration_file_matches_generated_set() {
    let fx = Fixture::new(trained());
    let file = fx.path("c.jsonl");
    write_items(&file, &gen_task(TaskKind::SortSeq, 24, 64, 5)).unwrap();
    let generated = cmd_score(&fx.cfg(&[("task", "sortseq"), ("seed", "5")])).unwrap();
    let from_file = cmd_score(&fx.cfg(&[
        ("task", "sortseq"),
        ("seed", "5"),
        ("calibration", file.to_str().unwrap()),
    ]))
    .unwrap();
    assert_eq!(generated["profile"], from_file["profile"]);
}

#[test]
fn uniform16_halves_the_bit_count() {
    let fx = Fixture::new(trained());
    let r = cmd_quantize(&fx.cfg(&[("plan", "uniform:16")])).unwrap();
    assert_eq!(r["costs"]["compression_ratio"].as_f64().unwrap(), 2.0);
    assert!(r["plan"]["bits"]
        .as_array()
        .unwrap()
        .iter()
        .all(|b| b.as_u64() == Some(16)));
    assert!(
        r["calibration"]["final"].as_f64().unwrap()
            <= r["calibration"]["initial"].as_f64().unwrap()
    );
}

#[test]
fn taq_on_eight_layers_pins_four() {
    let m: ToyModel = init_model(&ModelConfig {
        seed: 2,
        ..ModelConfig::default()
    })
    .unwrap();
    let fx = Fixture::new(&m);
    let r =
        cmd_quantize(&fx.cfg(&[("plan", "taq"), ("calib_size", "8"), ("eval_size", "4")])).unwrap();
    let plan = plan_from_json(&r["plan"], &cost_model(&m.cfg)).unwrap();
    assert_eq!(plan.pinned(), &[0, 1, 6, 7]);
    // Four free layers: ceil(0.15·4) = 1 at 16 bits, ceil(0.45·4) = 2 at 8, the last at 4.
    assert_eq!(plan.level_counts(), [1, 2, 1]);
    assert_eq!(plan.cost(), 164 * m.cfg.weights_per_layer());
    let relevance: Vec<f64> = profile_from_json(&r["profile"]).unwrap().relevance();
    assert!(plan.is_monotone_in(&relevance));
}

#[test]
fn quantized_checkpoint_evaluates_like_the_report() {
    let fx = Fixture::new(trained());
    let out = fx.path("q.taqm");
    let cfg = fx.cfg(&[
        ("plan", "taq"),
        ("out", out.to_str().unwrap()),
        ("task", "copy"),
    ]);
    let r = cmd_quantize(&cfg).unwrap();
    validate_report(
        &parse_report(&to_canonical(&r)).unwrap(),
        &cost_model(&trained().cfg),
    )
    .unwrap();

    let ck = read_checkpoint::<f64>(&out).unwrap();
    let plan = plan_from_json(&r["plan"], &cost_model(&trained().cfg)).unwrap();
    assert_eq!(ck.plan.as_ref(), Some(&plan));

    let mut eval_cfg = cfg.clone();
    eval_cfg.checkpoint = Some(out);
    let e = cmd_eval(&eval_cfg).unwrap();
    assert_eq!(e["eval"]["result"], r["eval"]["quantized"]);
    assert_eq!(e["plan"]["bits"], r["plan"]["bits"]);
}

#[test]
fn eval_of_own_predictions_is_perfect() {
    let m = trained();
    let fx = Fixture::new(m);
    let items: Vec<Item> = gen_task(TaskKind::ModAdd, 20, 64, 9)
        .into_iter()
        .map(|it| {
            let answer = greedy_decode(m, &it.prompt, 16).unwrap();
            Item { answer, ..it }
        })
        .collect();
    let file = fx.path("own.jsonl");
    write_items(&file, &items).unwrap();
    let a = cmd_eval(&fx.cfg(&[("eval_set", file.to_str().unwrap())])).unwrap();
    let b = cmd_eval(&fx.cfg(&[("eval_set", file.to_str().unwrap())])).unwrap();
    assert_eq!(a["eval"]["result"]["exact_match"].as_f64(), Some(100.0));
    assert_eq!(a["eval"]["result"]["token_f1"].as_f64(), Some(100.0));
    assert_eq!(canonical(&a), canonical(&b));
}

#[test]
fn sweep_is_deterministic_and_respects_gamma() {
    let fx = Fixture::new(trained());
    let auto = cmd_sweep(&fx.cfg(&[("task", "copy")])).unwrap();
    assert_eq!(
        canonical(&auto),
        canonical(&cmd_sweep(&fx.cfg(&[("task", "copy")])).unwrap())
    );
    assert_eq!(auto["sweep"]["gamma_source"], "auto");

    let delta: Vec<f64> = auto["sweep"]["delta"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d.as_f64().unwrap())
        .collect();
    let mut sorted = delta.clone();
    sorted.sort_by(f64::total_cmp);
    let gamma = sorted[2];
    let forced = cmd_sweep(&fx.cfg(&[("task", "copy"), ("gamma", &gamma.to_string())])).unwrap();
    assert_eq!(forced["sweep"]["gamma_source"], "override");
    assert_eq!(forced["sweep"]["delta"], auto["sweep"]["delta"]);
    let want: Vec<u64> = (0..delta.len())
        .filter(|&l| delta[l] >= gamma)
        .map(|l| l as u64)
        .collect();
    let got: Vec<u64> = forced["sweep"]["critical"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap())
        .collect();
    assert_eq!(got, want);
}

#[test]
fn infeasible_taqo_budget_reports_min_gamma() {
    let fx = Fixture::new(trained());
    let w = trained().cfg.weights_per_layer();
    // Room for exactly one 8-bit layer next to five 4-bit ones.
    let budget = (8 + 5 * 4) * w;
    let err = cmd_quantize(&fx.cfg(&[
        ("plan", "taqo"),
        ("gamma", "-1"),
        ("budget", &budget.to_string()),
    ]))
    .unwrap_err();
    match &err {
        TaqError::BudgetInfeasible {
            min_gamma,
            budget: b,
            ..
        } => {
            assert_eq!(*b, budget);
            assert!(min_gamma.is_some());
        }
        e => panic!("unexpected {e}"),
    }
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn config_errors_exit_with_two() {
    let fx = Fixture::new(trained());
    let mut cfg = fx.cfg(&[]);
    cfg.grid = vec![0.9, 1.1];
    assert_eq!(cmd_score(&cfg).unwrap_err().exit_code(), 2);
    let mut cfg = fx.cfg(&[]);
    cfg.checkpoint = None;
    assert_eq!(cmd_score(&cfg).unwrap_err().exit_code(), 2);
    let mut cfg = fx.cfg(&[]);
    cfg.checkpoint = Some(Path::new("/no/such/model.taqm").to_path_buf());
    assert_eq!(cmd_score(&cfg).unwrap_err().exit_code(), 1);
}
