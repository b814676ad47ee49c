//! Plain-text tables and line-delimited metric records.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tokenmixer_core::ablation::{AblationReport, Outcome, VariantResult};
use tokenmixer_core::fidelity::FidelityReport;
use tokenmixer_core::train::RunReport;

/// Any report the CLI writes, as read back by `report`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Artifact {
    Run(RunReport),
    Ablation { table: String, report: AblationReport },
    Fidelity(FidelityReport),
}

impl Artifact {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing report {}", path.display()))
    }
}

/// Left-aligned first column, right-aligned others.
pub fn table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    out += &line(widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
    for r in rows {
        out += &line(r.iter().map(String::as_str).collect());
    }
    out
}

fn pct(v: f64) -> String {
    format!("{:+.3}%", 100.0 * v)
}

pub fn render_runs(runs: &[RunReport]) -> String {
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                format!("{:.4}", r.final_auc),
                format!("{:.4}", r.oracle_auc),
                format!("{:.3}", r.auc_ratio()),
                format!("{:.4}", r.final_logloss),
                r.params_total.to_string(),
                r.params_activated.to_string(),
                format!("{:.3e}", r.flops_per_batch as f64),
                r.fingerprint.clone(),
            ]
        })
        .collect();
    table(
        &["Run", "AUC", "Oracle", "Ratio", "LogLoss", "Params", "Activated", "FLOPs/Batch", "Fingerprint"],
        &rows,
    )
}

fn outcome_cell(o: &Outcome) -> String {
    match o {
        Outcome::Finished { auc, .. } => format!("{auc:.4}"),
        Outcome::Diverged { step } => format!("NaN@{step}"),
    }
}

fn ablation_row(v: &VariantResult, base: bool) -> Vec<String> {
    let mut row = vec![v.name.clone()];
    row.push(if base {
        "--".into()
    } else {
        v.mean_delta().map_or_else(|| "NaN".into(), pct)
    });
    row.extend(v.runs.iter().map(outcome_cell));
    row
}

pub fn render_ablation(title: &str, report: &AblationReport) -> String {
    let seeds: Vec<String> = report.seeds.iter().map(|s| format!("AUC s{s}")).collect();
    let mut headers = vec!["Setting", "dAUC"];
    headers.extend(seeds.iter().map(String::as_str));
    let mut rows = vec![ablation_row(&report.base, true)];
    rows.extend(report.variants.iter().map(|v| ablation_row(v, false)));
    format!("{title}\n{}", table(&headers, &rows))
}

pub fn render_fidelity(r: &FidelityReport) -> String {
    let mut rows: Vec<Vec<String>> = r
        .layer_max_rel_dev
        .iter()
        .enumerate()
        .map(|(l, d)| {
            let name = if l == 0 { "tokenizer".to_string() } else { format!("layer {l}") };
            vec![name, format!("{d:.3e}")]
        })
        .collect();
    rows.push(vec!["score max |dev|".into(), format!("{:.3e}", r.score_max_abs_dev)]);
    rows.push(vec!["score mean |dev|".into(), format!("{:.3e}", r.score_mean_abs_dev)]);
    rows.push(vec!["AUC full".into(), format!("{:.5}", r.auc_full)]);
    rows.push(vec!["AUC fp8".into(), format!("{:.5}", r.auc_fp8)]);
    rows.push(vec!["AUC delta".into(), format!("{:+.5}", r.auc_delta())]);
    table(&["FP8 E4M3", "max rel dev"], &rows)
}

/// One JSON object per evaluation point.
pub fn write_metrics(path: &Path, run: &RunReport) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for p in &run.trajectory {
        let rec = serde_json::json!({
            "run": run.name,
            "step": p.step,
            "epoch": p.epoch,
            "logloss": p.logloss,
            "auc": p.auc,
        });
        writeln!(f, "{rec}")?;
    }
    f.flush()?;
    Ok(())
}

/// Render a set of saved artifacts, grouping runs into one table.
pub fn render_artifacts(items: &[Artifact]) -> String {
    let runs: Vec<RunReport> = items
        .iter()
        .filter_map(|a| match a {
            Artifact::Run(r) => Some(r.clone()),
            _ => None,
        })
        .collect();
    let mut out = String::new();
    if !runs.is_empty() {
        out += &render_runs(&runs);
    }
    for a in items {
        let block = match a {
            Artifact::Run(_) => continue,
            Artifact::Ablation { table, report } => render_ablation(table, report),
            Artifact::Fidelity(f) => render_fidelity(f),
        };
        if !out.is_empty() {
            out.push('\n');
        }
        out += &block;
    }
    out
}
