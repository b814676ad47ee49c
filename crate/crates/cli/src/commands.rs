//! Subcommand bodies. Each returns the text to print and whether every
//! invariant it checks held.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use tokenmixer_core::ablation::{preset, run_ablation, tables, AblationReport, Variant};
use tokenmixer_core::data::generate;
use tokenmixer_core::fidelity;
use tokenmixer_core::flops::random_ids;
use tokenmixer_core::gradcheck::{check_model, primitive_suite};
use tokenmixer_core::model::{Model, ModelConfig};
use tokenmixer_core::parallel::{max_deviation, run_parallel, run_serial, Plan};
use tokenmixer_core::train::{train, RunReport};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::exec::Threaded;
use crate::report::{render_ablation, render_fidelity, render_runs, table, write_metrics, Artifact};

#[derive(Debug)]
pub struct Outcome {
    pub text: String,
    pub passed: bool,
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Train once; with `out`, write the run report, metrics and a checkpoint.
pub fn train_cmd(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<(Outcome, RunReport)> {
    let data = generate(&cfg.data)?;
    let run = train::<f32>(&cfg.name, &cfg.model, &data, &cfg.train)?;
    let r = &run.report;
    let mut text = render_runs(std::slice::from_ref(r));
    let checks = [
        ("activated <= total parameters", r.params_activated <= r.params_total),
        ("finite final metrics", r.final_auc.is_finite() && r.final_logloss.is_finite()),
    ];
    for (name, ok) in checks {
        let _ = writeln!(text, "{}: {name}", verdict(ok));
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        Artifact::Run(r.clone()).save(&dir.join("report.json"))?;
        write_metrics(&dir.join("metrics.jsonl"), r)?;
        Checkpoint::capture(&run.model, &run.params, &cfg.data, &cfg.train, Some(r.clone())).save(&dir.join("checkpoint.json"))?;
        let _ = writeln!(text, "wrote report.json, metrics.jsonl, checkpoint.json to {}", dir.display());
    }
    let passed = checks.iter().all(|c| c.1);
    Ok((Outcome { text, passed }, run.report))
}

pub fn gradcheck_cmd(cfg: &ExperimentConfig) -> Result<Outcome> {
    let gc = &cfg.gradcheck;
    let mut rows = Vec::new();
    let mut passed = true;
    for (name, r) in primitive_suite(0)? {
        let ok = r.max_rel_err < gc.primitive_tolerance;
        passed &= ok;
        rows.push(vec![name.to_string(), r.checked.to_string(), format!("{:.2e}", r.max_rel_err), verdict(ok).into()]);
    }
    let data = generate(&gc.data)?;
    let index: Vec<usize> = (0..gc.rows.min(data.train.rows())).collect();
    let (ids, labels) = data.train.gather(&index);
    let (model, params) = Model::build::<f64>(&gc.data.features(), &gc.model)?;
    let r = check_model(&model, &params, &ids, &labels, gc.step)?;
    let ok = r.max_rel_err < gc.model_tolerance;
    passed &= ok;
    rows.push(vec![
        format!("model (worst {})", r.worst),
        r.checked.to_string(),
        format!("{:.2e}", r.max_rel_err),
        verdict(ok).into(),
    ]);
    let text = table(&["Check", "Coords", "Max rel err", "Verdict"], &rows);
    Ok(Outcome { text, passed })
}

/// The `(title, base, matrix)` triples selected by table names, preset
/// names, or the config's custom matrix.
pub fn ablation_plan(cfg: &ExperimentConfig, table_names: &[String], presets: &[String]) -> Result<Vec<(String, Variant, Vec<Variant>)>> {
    let shipped = tables();
    let mut plan = Vec::new();
    for name in table_names {
        let Some(t) = shipped.iter().find(|t| t.name == name.as_str()) else {
            let known: Vec<_> = shipped.iter().map(|t| t.name).collect();
            bail!("unknown ablation table `{name}`; known: {}", known.join(", "));
        };
        plan.push((t.name.to_string(), t.base.clone(), t.matrix()));
    }
    for name in presets {
        let row = preset(name)?;
        let t = name.split_once('/').map_or("", |p| p.0);
        let base = shipped.iter().find(|x| x.name == t).map(|x| x.base.clone()).expect("preset() checked the table");
        let matrix = if row.name == base.name { Vec::new() } else { vec![row] };
        plan.push((name.clone(), base, matrix));
    }
    if plan.is_empty() {
        if cfg.ablation.variants.is_empty() {
            let chosen: Vec<_> = if cfg.ablation.tables.is_empty() {
                shipped.iter().map(|t| t.name.to_string()).collect()
            } else {
                cfg.ablation.tables.clone()
            };
            return ablation_plan(cfg, &chosen, &[]);
        }
        plan.push((cfg.name.clone(), Variant::new("base", &[]), cfg.ablation.variants.clone()));
    }
    Ok(plan)
}

pub fn run_plan_entry(cfg: &ExperimentConfig, base: &Variant, matrix: &[Variant]) -> Result<AblationReport> {
    let exec = Threaded {
        threads: cfg.worker_threads(),
    };
    Ok(run_ablation(&cfg.model, &cfg.data, &cfg.train, base, matrix, &cfg.ablation.seeds, &exec)?)
}

pub fn ablate_cmd(
    cfg: &ExperimentConfig,
    table_names: &[String],
    presets: &[String],
    check_determinism: bool,
    out: Option<&Path>,
) -> Result<Outcome> {
    let mut text = String::new();
    let mut passed = true;
    if let Some(dir) = out {
        ensure_dir(dir)?;
    }
    for (title, base, matrix) in ablation_plan(cfg, table_names, presets)? {
        let report = run_plan_entry(cfg, &base, &matrix)?;
        text += &render_ablation(&title, &report);
        if check_determinism {
            let again = run_plan_entry(cfg, &base, &matrix)?;
            let ok = again == report;
            passed &= ok;
            let _ = writeln!(text, "{}: repeated run is identical", verdict(ok));
        }
        if let Some(dir) = out {
            let file = format!("ablation-{}.json", title.replace('/', "-"));
            Artifact::Ablation { table: title.clone(), report }.save(&dir.join(file))?;
        }
        text.push('\n');
    }
    Ok(Outcome { text, passed })
}

pub fn sim_parallel_cmd(cfg: &ExperimentConfig) -> Result<Outcome> {
    let p = &cfg.parallel;
    let exec = Threaded {
        threads: cfg.worker_threads(),
    };
    let features = cfg.data.features();
    let ids = random_ids(&features, p.rows, cfg.data.seed);
    let mut rows = Vec::new();
    let mut passed = true;
    let mut sample_log = None;
    for &layers in &p.layers {
        let model_cfg = ModelConfig {
            layers,
            aux_layers: Some(Vec::new()),
            ..cfg.model.clone()
        };
        let (model, params) = Model::build::<f64>(&features, &model_cfg)?;
        let serial = run_serial(&model, &params, &ids, p.rows)?;
        for &devices in &p.devices {
            for plan in [Plan::Optimized, Plan::Naive] {
                let out = run_parallel(&model, &params, &ids, p.rows, devices, plan, &exec)?;
                let dev = max_deviation(&out, &serial)?;
                let want = plan.expected_exchanges(layers);
                let ok = dev <= p.tolerance && out.log.len() == want;
                passed &= ok;
                rows.push(vec![
                    format!("L={layers} N={devices} {plan}"),
                    format!("{dev:.2e}"),
                    format!("{}/{want}", out.log.len()),
                    out.log.total_bytes().to_string(),
                    verdict(ok).into(),
                ]);
                if plan == Plan::Optimized {
                    sample_log = Some((layers, devices, out.log));
                }
            }
        }
    }
    let mut text = table(&["Case", "Max |dev|", "all2all", "Bytes", "Verdict"], &rows);
    if let Some((l, n, log)) = sample_log {
        let _ = write!(text, "\nCommLog (L={l}, N={n}, optimized):\n{log}\n");
    }
    Ok(Outcome { text, passed })
}

pub fn quantize_eval_cmd(cfg: &ExperimentConfig, checkpoint: &Path, eval_seed: Option<u64>, out: Option<&Path>) -> Result<Outcome> {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, params) = ck.restore::<f32>()?;
    let data = generate(&ck.data)?;
    let rows = match cfg.quantize.rows {
        0 => ck.data.eval_examples,
        n => n,
    };
    let eval = match eval_seed {
        Some(s) => data.fresh_eval(rows, s)?,
        None if cfg.quantize.rows == 0 => data.eval.clone(),
        None => data.fresh_eval(rows, 0)?,
    };
    let r = fidelity::compare(&model, &params, &eval)?;
    let ok = r.auc_full - r.auc_fp8 <= cfg.quantize.max_auc_drop;
    let mut text = render_fidelity(&r);
    let _ = writeln!(
        text,
        "{}: AUC(fp8) >= AUC(full) - {}",
        verdict(ok),
        cfg.quantize.max_auc_drop
    );
    if let Some(dir) = out {
        ensure_dir(dir)?;
        Artifact::Fidelity(r).save(&dir.join("fidelity.json"))?;
    }
    Ok(Outcome { text, passed: ok })
}
