//! Run-directory layout, manifest, and canonical JSON emission.

use std::path::{Path, PathBuf};

use fkt_core::pipelines::{RegimeOutput, RunConfig};

use crate::config::{config_hash, CliError};

/// Canonical JSON: sorted keys (serde_json's default map) pretty-printed, so
/// parse -> re-emit is byte-identical.
pub fn to_canonical_json(value: &serde_json::Value) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    text
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError { code: 5, message: format!("{}: {e}", dir.display()) })?;
    }
    std::fs::write(path, to_canonical_json(value))
        .map_err(|e| CliError { code: 5, message: format!("{}: {e}", path.display()) })
}

pub fn now_iso() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn timestamp_slug() -> String {
    chrono::Utc::now().format("%Y%m%d-%H%M%S").to_string()
}

/// `<output_dir>/<timestamp>_<kind>_<dataset>/`, created fresh (a numeric
/// suffix resolves collisions within one second).
pub fn create_run_dir(base: &Path, kind: &str, dataset: &str) -> Result<PathBuf, CliError> {
    let stem = format!("{}_{kind}_{dataset}", timestamp_slug());
    for attempt in 0..100u32 {
        let name = if attempt == 0 {
            stem.clone()
        } else {
            format!("{stem}.{attempt}")
        };
        let dir = base.join(&name);
        match std::fs::create_dir_all(dir.parent().unwrap_or(base))
            .and_then(|_| std::fs::create_dir(&dir))
        {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => {
                return Err(CliError { code: 5, message: format!("{}: {e}", dir.display()) })
            }
        }
    }
    Err(CliError { code: 5, message: format!("cannot create run dir under {}", base.display()) })
}

/// The run's self-description: enough to reproduce it in determinism mode.
pub fn manifest(
    cfg: &RunConfig,
    started_at: &str,
    artifact_files: &[String],
) -> serde_json::Value {
    serde_json::json!({
        "config_hash": config_hash(cfg),
        "started_at": started_at,
        "finished_at": now_iso(),
        "framework_version": env!("CARGO_PKG_VERSION"),
        "regime": cfg.regime.to_string(),
        "dataset": cfg.dataset.name.to_string(),
        "seeds": cfg.seeds,
        "artifacts": artifact_files,
        "config": serde_json::to_value(cfg).expect("config serializes"),
    })
}

/// metrics.json: per-trial values plus mean/std blocks keyed accuracy,
/// precision, recall, and the per-trial epoch accounting.
pub fn metrics_json(output: &RegimeOutput) -> serde_json::Value {
    let mean = output.mean();
    let std = output.std();
    serde_json::json!({
        "regime": output.regime.to_string(),
        "dataset": output.dataset,
        "trials": output.trial_metrics.iter().map(|m| serde_json::json!({
            "accuracy": m.accuracy,
            "precision": m.macro_precision,
            "recall": m.macro_recall,
            "weighted_precision": m.weighted_precision,
            "weighted_recall": m.weighted_recall,
        })).collect::<Vec<_>>(),
        "mean": { "accuracy": mean.accuracy, "precision": mean.precision, "recall": mean.recall },
        "std": { "accuracy": std.accuracy, "precision": std.precision, "recall": std.recall },
        "epochs_total": output.epochs_total,
    })
}

/// Files currently present under the run dir, relative paths, sorted.
pub fn list_artifacts(dir: &Path) -> Vec<String> {
    fn walk(dir: &Path, base: &Path, out: &mut Vec<String>) {
        let Ok(entries) = std::fs::read_dir(dir) else { return };
        for entry in entries.filter_map(|e| e.ok()) {
            let path = entry.path();
            if path.is_dir() {
                walk(&path, base, out);
            } else if let Ok(rel) = path.strip_prefix(base) {
                out.push(rel.to_string_lossy().into_owned());
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
