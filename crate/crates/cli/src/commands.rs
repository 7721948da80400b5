use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use se3diff::denoiser::{fit, make_oracle, Checkpoint, Denoiser, FitConfig, FrameRegressor, ModelConfig};
use se3diff::evalkit::{compare_reports, equivariance_sweep, evaluate, EvalConfig, EvalReport, CSV_HEADER};
use se3diff::learnability::{learnability_experiment, LearnabilityConfig};
use se3diff::markov::{verify_layout, FiniteGroup, GroupSpec, PASS_THRESHOLD};
use se3diff::schedule::{NoiseSchedule, ScheduleKind, DEFAULT_STEPS};
use se3diff::tasks::{build_dataset, read_jsonl, write_jsonl, DatasetCounts, Split, TaskName, TaskSpec, DEFAULT_HORIZON};
use se3diff::VERSION;

use crate::Failure;

fn envelope<C: Serialize>(config: &C, seed: u64, body: Value) -> Result<Value, Failure> {
    let mut out = json!({
        "version": VERSION,
        "seed": seed,
        "config": serde_json::to_value(config)?,
    });
    if let (Value::Object(o), Value::Object(b)) = (&mut out, body) {
        o.extend(b);
    }
    Ok(out)
}

fn write_json(path: &Path, value: &Value) -> Result<(), Failure> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    info!("wrote {}", path.display());
    Ok(())
}

/// CSV with one leading `#` line carrying the version, seed and config.
fn write_csv<C: Serialize>(path: &Path, config: &C, seed: u64, header: &str, rows: &[String]) -> Result<(), Failure> {
    let mut text = format!("# se3diff {VERSION} seed={seed} config={}\n{header}\n", serde_json::to_string(config)?);
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub task: TaskName,
    pub train: usize,
    pub test_t: usize,
    pub test_np: usize,
    pub seed: u64,
    pub jitter: f64,
    pub horizon: usize,
    pub out: PathBuf,
}

impl GenConfig {
    pub fn defaults() -> Value {
        let c = DatasetCounts::default();
        json!({"train": c.train, "test_t": c.test_t, "test_np": c.test_np, "seed": 0, "jitter": 0.0, "horizon": DEFAULT_HORIZON})
    }
}

pub fn gen(cfg: &GenConfig) -> Result<(), Failure> {
    let task = TaskSpec::new(cfg.task, cfg.horizon);
    let counts = DatasetCounts {
        train: cfg.train,
        test_t: cfg.test_t,
        test_np: cfg.test_np,
    };
    let demos = build_dataset(&task, counts, cfg.seed, cfg.jitter)?;
    write_jsonl(&demos, &cfg.out)?;
    let meta = envelope(cfg, cfg.seed, json!({"records": demos.len(), "counts": counts}))?;
    write_json(Path::new(&format!("{}.meta.json", cfg.out.display())), &meta)?;
    println!("{} records of {} written to {}", demos.len(), cfg.task, cfg.out.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub data: PathBuf,
    pub out: PathBuf,
    pub steps: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub schedule: ScheduleKind,
    pub gamma: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub final_lr_fraction: f64,
    pub rotation_weight: f64,
    pub hidden: Vec<usize>,
    pub output_scale: f64,
    pub seed: u64,
    pub probe_samples: usize,
    pub gradient_checks: usize,
}

impl TrainConfig {
    pub fn defaults() -> Value {
        let f = FitConfig::default();
        let m = ModelConfig::default();
        json!({
            "steps": f.steps, "K": DEFAULT_STEPS, "schedule": "linear", "gamma": 1.0,
            "batch_size": f.batch_size, "lr": f.learning_rate, "final_lr_fraction": f.final_lr_fraction,
            "rotation_weight": f.rotation_weight, "hidden": m.hidden, "output_scale": m.output_scale,
            "seed": 0, "probe_samples": f.probe_samples, "gradient_checks": f.gradient_checks,
        })
    }
}

pub fn train(cfg: &TrainConfig) -> Result<(), Failure> {
    let demos = read_jsonl(&cfg.data).map_err(|e| Failure::Runtime(format!("{}: {e}", cfg.data.display())))?;
    let train: Vec<_> = demos
        .iter()
        .filter(|d| d.split == Split::TrainT)
        .map(|d| (d.observation.clone(), d.actions.clone()))
        .collect();
    let Some(first) = train.first() else {
        return Err(Failure::Runtime(format!("{} has no train_T records", cfg.data.display())));
    };
    let tasks: std::collections::BTreeSet<String> = demos.iter().map(|d| d.task.to_string()).collect();
    let schedule = NoiseSchedule::build(cfg.k, cfg.schedule, cfg.gamma)?;
    let mut model = FrameRegressor::new(&ModelConfig {
        horizon: first.1.horizon(),
        hidden: cfg.hidden.clone(),
        output_scale: cfg.output_scale,
        seed: cfg.seed,
        ..ModelConfig::default()
    })?;
    let fit_cfg = FitConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        learning_rate: cfg.lr,
        final_lr_fraction: cfg.final_lr_fraction,
        rotation_weight: cfg.rotation_weight,
        seed: cfg.seed,
        probe_samples: cfg.probe_samples,
        gradient_checks: cfg.gradient_checks,
    };
    info!("fitting {} parameters on {} demos for {} steps", model.num_params(), train.len(), cfg.steps);
    let report = fit(&mut model, &train, &schedule, &fit_cfg)?;
    let meta = envelope(
        cfg,
        cfg.seed,
        json!({
            "tasks": tasks,
            "train_demos": train.len(),
            "initial_loss": report.initial_loss,
            "final_loss": report.final_loss,
            "gradient_check_error": report.gradient_check_error,
        }),
    )?;
    Checkpoint::from_model(&model, &schedule, meta).save(&cfg.out)?;
    let rows: Vec<String> = report.curve.iter().enumerate().map(|(i, l)| format!("{i},{l}")).collect();
    write_csv(&sibling(&cfg.out, ".loss.csv"), cfg, cfg.seed, "step,loss", &rows)?;
    println!(
        "initial loss {:.6}, final loss {:.6} ({:.2}x); checkpoint {}",
        report.initial_loss,
        report.final_loss,
        report.initial_loss / report.final_loss,
        cfg.out.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCmdConfig {
    pub model: Option<PathBuf>,
    pub oracle: bool,
    pub task: TaskName,
    pub split: String,
    pub episodes: usize,
    pub seeds: usize,
    pub seed: u64,
    pub threshold: f64,
    pub jitter: f64,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub out: Option<PathBuf>,
}

impl EvalCmdConfig {
    pub fn defaults() -> Value {
        let e = EvalConfig::default();
        json!({
            "model": null, "oracle": false, "split": "NP", "episodes": e.episodes, "seeds": e.seeds.len(),
            "seed": 0, "threshold": e.success_threshold, "jitter": e.jitter, "K": null, "out": null,
        })
    }
}

enum Policy {
    Oracle(TaskSpec),
    Model(FrameRegressor),
}

fn run_eval<M: Denoiser + Sync>(model: &M, task: &TaskSpec, splits: &[Split], schedule: &NoiseSchedule, cfg: &EvalConfig) -> Result<Vec<EvalReport>, Failure> {
    splits.iter().map(|s| evaluate(model, task, *s, schedule, cfg).map_err(Failure::from)).collect()
}

pub fn eval(cfg: &EvalCmdConfig) -> Result<(), Failure> {
    let splits = match cfg.split.as_str() {
        "both" => vec![Split::TestT, Split::TestNp],
        s => vec![s.parse::<Split>().map_err(|e| Failure::Usage(e.to_string()))?],
    };
    let (policy, schedule, demos) = match (&cfg.model, cfg.oracle) {
        (Some(_), true) => return Err(Failure::Usage("--model and --oracle are exclusive".into())),
        (None, false) => return Err(Failure::Usage("give --model or --oracle".into())),
        (None, true) => {
            let task = TaskSpec::new(cfg.task, DEFAULT_HORIZON);
            let schedule = NoiseSchedule::build(cfg.k.unwrap_or(DEFAULT_STEPS), ScheduleKind::Linear, 1.0)?;
            (Policy::Oracle(task), schedule, 0)
        }
        (Some(path), false) => {
            let ckpt = Checkpoint::load(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            let schedule = match cfg.k {
                Some(k) => NoiseSchedule::build(k, ckpt.schedule.kind(), ckpt.schedule.gamma())?.with_axis_scales(ckpt.schedule.axis_scales())?,
                None => ckpt.schedule.clone(),
            };
            let demos = ckpt.meta.get("train_demos").and_then(Value::as_u64).unwrap_or(0) as usize;
            (Policy::Model(ckpt.model()?), schedule, demos)
        }
    };
    let eval_cfg = EvalConfig {
        episodes: cfg.episodes,
        seeds: (cfg.seed..cfg.seed + cfg.seeds as u64).collect(),
        success_threshold: cfg.threshold,
        jitter: cfg.jitter,
    };
    let reports = match &policy {
        Policy::Oracle(task) => run_eval(&make_oracle(task.target_provider(), task.horizon()), task, &splits, &schedule, &eval_cfg)?,
        Policy::Model(m) => run_eval(m, &TaskSpec::new(cfg.task, m.horizon()), &splits, &schedule, &eval_cfg)?,
    };
    let delta = match reports.as_slice() {
        [t, np] => Some(compare_reports(t, np)?),
        _ => None,
    };
    for r in &reports {
        println!(
            "{} {}: success {:.4} ± {:.4}, geodesic {:.6} ± {:.6} over {} episodes",
            r.task, r.split, r.success_rate, r.success_std, r.mean_geodesic, r.geodesic_std, r.num_episodes
        );
    }
    if let Some(d) = &delta {
        println!("T − NP: success {:+.4}, geodesic {:+.3e}", d.success_delta, d.geodesic_delta);
    }
    if let Some(out) = &cfg.out {
        write_json(out, &envelope(cfg, cfg.seed, json!({"reports": reports, "delta": delta}))?)?;
        let rows: Vec<String> = reports.iter().map(|r| r.csv_row(demos)).collect();
        write_csv(&out.with_extension("csv"), cfg, cfg.seed, CSV_HEADER, &rows)?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquivConfig {
    pub task: Vec<TaskName>,
    pub trials: usize,
    pub model: Option<PathBuf>,
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub seed: u64,
    pub jitter: f64,
    pub out: Option<PathBuf>,
}

impl EquivConfig {
    pub fn defaults() -> Value {
        json!({"task": [], "trials": 100, "model": null, "K": null, "seed": 0, "jitter": 0.002, "out": null})
    }
}

pub fn verify_equiv(cfg: &EquivConfig) -> Result<(), Failure> {
    let (model, ckpt_schedule) = match &cfg.model {
        Some(path) => {
            let ckpt = Checkpoint::load(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            (ckpt.model()?, Some(ckpt.schedule))
        }
        None => (
            FrameRegressor::new(&ModelConfig {
                seed: cfg.seed,
                ..ModelConfig::default()
            })?,
            None,
        ),
    };
    let schedule = match (cfg.k, ckpt_schedule) {
        (None, Some(s)) => s,
        (k, _) => NoiseSchedule::build(k.unwrap_or(DEFAULT_STEPS), ScheduleKind::Linear, 1.0)?,
    };
    let tasks = if cfg.task.is_empty() { TaskName::ALL.to_vec() } else { cfg.task.clone() };
    let mut results = Vec::new();
    for name in tasks {
        let task = TaskSpec::new(name, model.horizon());
        let oracle = make_oracle(task.target_provider(), task.horizon());
        for (label, report) in [
            ("oracle", equivariance_sweep(&oracle, &task, &schedule, cfg.trials, cfg.seed, cfg.jitter)?),
            ("regressor", equivariance_sweep(&model, &task, &schedule, cfg.trials, cfg.seed, cfg.jitter)?),
        ] {
            println!(
                "{} {} {label}: max deviation {:.3e} over {} trials",
                if report.pass { "PASS" } else { "FAIL" },
                name,
                report.max_deviation,
                report.trials
            );
            results.push(json!({"model": label, "report": report}));
        }
    }
    let pass = results.iter().all(|r| r["report"]["pass"] == Value::Bool(true));
    if let Some(out) = &cfg.out {
        write_json(out, &envelope(cfg, cfg.seed, json!({"pass": pass, "results": results}))?)?;
    }
    if pass {
        Ok(())
    } else {
        Err(Failure::Runtime("equivariance check failed".into()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovConfig {
    pub group: Vec<String>,
    #[serde(rename = "K")]
    pub k: Vec<usize>,
    pub n: Vec<Value>,
    pub seeds: usize,
    pub controls: usize,
    pub seed: u64,
    pub negative_control: bool,
    pub out: Option<PathBuf>,
}

impl MarkovConfig {
    pub fn defaults() -> Value {
        json!({"group": ["octahedral"], "K": [6], "n": [2], "seeds": 50, "controls": 100, "seed": 0, "negative_control": false, "out": null})
    }
}

fn layout_n(v: &Value, k: usize) -> Result<usize, Failure> {
    match v {
        Value::Number(n) => n.as_u64().map(|n| n as usize),
        Value::String(s) if s == "max" || s == "K+1" => Some(k + 1),
        Value::String(s) => s.parse().ok(),
        _ => None,
    }
    .ok_or_else(|| Failure::Usage(format!("bad layout index {v}")))
}

pub fn verify_markov(cfg: &MarkovConfig) -> Result<(), Failure> {
    let groups = cfg
        .group
        .iter()
        .map(|g| g.parse::<GroupSpec>().and_then(FiniteGroup::build).map_err(Failure::from))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cases = Vec::new();
    for g in &groups {
        for &k in &cfg.k {
            for nv in &cfg.n {
                let n = layout_n(nv, k)?;
                let mut report = if cfg.negative_control {
                    verify_layout(g, k, n, 0, cfg.controls, cfg.seed)?
                } else {
                    verify_layout(g, k, n, cfg.seeds, cfg.controls, cfg.seed)?
                };
                if cfg.negative_control {
                    report.residual = report.negative_control_residuals.iter().copied().fold(f64::INFINITY, f64::min);
                    report.pass = report.residual < PASS_THRESHOLD;
                }
                println!(
                    "{} {} K={} n={}: residual {:.3e}; negative control fails in {:.0}% of {} draws",
                    if report.pass { "PASS" } else { "FAIL" },
                    report.group,
                    k,
                    n,
                    report.residual,
                    100.0 * report.negative_control_failure_rate,
                    report.negative_control_residuals.len()
                );
                cases.push(report);
            }
        }
    }
    let pass = cases.iter().all(|c| c.pass);
    let controls_fail = cases.iter().all(|c| c.negative_control_failure_rate >= 0.95);
    if let Some(out) = &cfg.out {
        let body = json!({"negative_control": cfg.negative_control, "pass": pass, "controls_fail": controls_fail, "cases": cases});
        write_json(out, &envelope(cfg, cfg.seed, body)?)?;
    }
    if cfg.negative_control {
        println!("negative control: {} (failure expected)", if pass { "PASS" } else { "FAIL" });
        return Ok(());
    }
    if pass {
        Ok(())
    } else {
        Err(Failure::Runtime("equivariance residual above threshold".into()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnConfig {
    pub task: TaskName,
    pub seeds: usize,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub chain_steps: usize,
    pub out: Option<PathBuf>,
}

impl LearnConfig {
    pub fn defaults() -> Value {
        let d = LearnabilityConfig::default();
        json!({
            "task": d.task, "seeds": d.seeds.len(), "seed": 0, "steps": d.steps, "batch_size": d.batch_size,
            "lr": d.learning_rate, "chain_steps": d.chain_steps, "out": null,
        })
    }
}

pub fn verify_learnability(cfg: &LearnConfig) -> Result<(), Failure> {
    let exp = LearnabilityConfig {
        task: cfg.task,
        seeds: (cfg.seed..cfg.seed + cfg.seeds as u64).collect(),
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        learning_rate: cfg.lr,
        chain_steps: cfg.chain_steps,
        ..LearnabilityConfig::default()
    };
    let report = learnability_experiment(&exp)?;
    for s in &report.single_step {
        println!("seed {}: invariant {:.3e}, equivariant {:.3e}", s.seed, s.invariant_final, s.equivariant_final);
    }
    println!(
        "{} median invariant {:.3e} < median equivariant {:.3e}",
        if report.ordering_holds { "PASS" } else { "FAIL" },
        report.invariant_median,
        report.equivariant_median
    );
    if let (Some(a), Some(b)) = (report.inv_eqv_final_median, report.pure_eqv_final_median) {
        println!("multi-step final loss: inv+eqv {a:.3e}, pure eqv {b:.3e}");
    }
    if let Some(out) = &cfg.out {
        write_json(out, &envelope(cfg, cfg.seed, json!({"report": report}))?)?;
    }
    if report.ordering_holds {
        Ok(())
    } else {
        Err(Failure::Runtime("invariant target was not easier to fit".into()))
    }
}
