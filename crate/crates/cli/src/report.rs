//! Markdown summary of a run's output directory.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::Path;

use ghicast_core::Result;

use crate::config::PipelineConfig;
use crate::pipeline::expected_artifacts;

/// One row of a score table, values kept exactly as printed.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreLine {
    pub model: String,
    pub fields: BTreeMap<String, String>,
}

/// Lowest value of a metric; more than one model when tied.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub metric: String,
    pub models: Vec<String>,
    pub value: String,
}

pub fn parse_score(s: &str) -> f64 {
    match s {
        "Inf" => f64::INFINITY,
        "-Inf" => f64::NEG_INFINITY,
        _ => s.parse().unwrap_or(f64::NAN),
    }
}

/// Reads a score CSV with a leading `Model` column.
pub fn read_scores(path: &Path) -> Result<Vec<ScoreLine>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut fields = BTreeMap::new();
        for (h, v) in header.iter().zip(rec.iter()).skip(1) {
            fields.insert(h.to_string(), v.to_string());
        }
        out.push(ScoreLine { model: rec.get(0).unwrap_or_default().to_string(), fields });
    }
    Ok(out)
}

/// Values agreeing to 12 significant digits count as a tie.
fn tie_key(v: f64) -> String {
    format!("{v:.11e}")
}

/// Best (lowest finite) model for `metric`.
pub fn best(lines: &[ScoreLine], metric: &str) -> Option<Verdict> {
    let vals: Vec<(&ScoreLine, f64)> = lines
        .iter()
        .filter_map(|l| l.fields.get(metric).map(|s| (l, parse_score(s))))
        .filter(|(_, v)| v.is_finite())
        .collect();
    let min = vals.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    let key = tie_key(min);
    let winners: Vec<&ScoreLine> = vals.iter().filter(|(_, v)| tie_key(*v) == key).map(|(l, _)| *l).collect();
    Some(Verdict {
        metric: metric.to_string(),
        models: winners.iter().map(|l| l.model.clone()).collect(),
        value: winners[0].fields[metric].clone(),
    })
}

fn table(out: &mut String, lines: &[ScoreLine], cols: &[&str]) {
    let _ = writeln!(out, "| Model | {} |", cols.join(" | "));
    let _ = writeln!(out, "|---|{}", "---|".repeat(cols.len()));
    for l in lines {
        let vals: Vec<&str> = cols.iter().map(|c| l.fields.get(*c).map(String::as_str).unwrap_or("")).collect();
        let _ = writeln!(out, "| {} | {} |", l.model, vals.join(" | "));
    }
}

/// Writes `summary.md` in `dir` and returns its text. Missing artifacts are
/// listed rather than treated as errors.
pub fn write_summary(dir: &Path, fallback: &PipelineConfig) -> Result<String> {
    let cfg = fs::read_to_string(dir.join("manifest.json"))
        .ok()
        .and_then(|t| PipelineConfig::from_json(&t).ok())
        .unwrap_or_else(|| fallback.clone());
    let mut out = String::new();
    let _ = writeln!(out, "# Forecast run summary\n");
    let _ = writeln!(out, "Seed {}, horizon {} h, {} individual models, {} combiners.\n", cfg.seed, cfg.horizon, cfg.models.len(), cfg.combiners.len());
    if dir.join("FAILED").exists() {
        let msg = fs::read_to_string(dir.join("FAILED")).unwrap_or_default();
        let _ = writeln!(out, "**Run failed.**\n\n```\n{}```\n", msg);
    }

    let scores_path = dir.join("scores.csv");
    match read_scores(&scores_path) {
        Ok(lines) => {
            let _ = writeln!(out, "## Best models (evaluation window)\n");
            for metric in ["MAE", "RMSE", "CRPS"] {
                match best(&lines, metric) {
                    Some(v) if v.models.len() > 1 => {
                        let _ = writeln!(out, "- Lowest {}: tie between {} at {}", metric, v.models.join(", "), v.value);
                    }
                    Some(v) => {
                        let _ = writeln!(out, "- Lowest {}: {} ({})", metric, v.models[0], v.value);
                    }
                    None => {
                        let _ = writeln!(out, "- Lowest {metric}: no finite values");
                    }
                }
            }
            let _ = writeln!(out, "\n## Scores\n");
            table(&mut out, &lines, &["MAE", "RMSE", "CRPS", "LogS", "DSS", "PL", "LogS_unshifted"]);
            out.push('\n');
        }
        Err(_) => {
            let _ = writeln!(out, "Scores are unavailable (scores.csv missing or unreadable).\n");
        }
    }
    if let Ok(lines) = read_scores(&dir.join("selection.csv")) {
        let _ = writeln!(out, "## Variable selection\n");
        table(&mut out, &lines, &["MAE"]);
        out.push('\n');
    }

    let _ = writeln!(out, "## Artifacts\n");
    let mut missing = Vec::new();
    for a in expected_artifacts(&cfg) {
        if dir.join(&a).exists() {
            let _ = writeln!(out, "- [{a}]({a})");
        } else {
            missing.push(a);
        }
    }
    if !missing.is_empty() {
        let _ = writeln!(out, "\n### Missing\n");
        for a in missing {
            let _ = writeln!(out, "- {a}");
        }
    }
    fs::write(dir.join("summary.md"), &out)?;
    Ok(out)
}
