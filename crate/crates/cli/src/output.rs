//! Results bundle: `summary.csv`, `trace.csv`, `plot.csv`, `manifest.json` and the resolved `config.toml`.
//!
//! summary.csv columns, in order:
//! `point, attack, aggregator, attackers, attacker_fraction, bias, sample_rate, seed,
//! benign_accuracy, attacked_accuracy, final_accuracy, phi, deviation, classes_per_client`.
//! One row per (point, seed), then a `mean` and a `std` row per point (population std).
//! Accuracies are fractions, `phi` is percent, `deviation` is percentage points.
//!
//! trace.csv columns: `point, seed, pass, round, accuracy, train_loss, participants,
//! sampled_attackers, attacked, malicious_kept, kept, aggregate_norm, radius,
//! reference_distance, lambda, rho, attacker_val_accuracy`. `pass` is `benign` or `attacked`.
//!
//! plot.csv is long format `round,series,value`, one series per point, value = attacked-pass
//! test accuracy averaged over seeds.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fmpa_core::engine::{RoundTrace, Stat};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{rule_name, ExperimentConfig};
use crate::run::PointResult;
use crate::CliError;

pub const PLOT_HEADER: &str = "round,series,value";

#[derive(Serialize)]
struct SummaryRow<'a> {
    point: &'a str,
    attack: &'a str,
    aggregator: &'a str,
    attackers: usize,
    attacker_fraction: Option<f64>,
    bias: Option<f64>,
    sample_rate: Option<f64>,
    seed: String,
    benign_accuracy: f64,
    attacked_accuracy: f64,
    final_accuracy: f64,
    phi: f64,
    deviation: Option<f64>,
    classes_per_client: f64,
}

#[derive(Serialize)]
struct TraceRow<'a> {
    point: &'a str,
    seed: u64,
    pass: &'a str,
    round: u64,
    accuracy: f64,
    train_loss: f64,
    participants: usize,
    sampled_attackers: usize,
    attacked: bool,
    malicious_kept: usize,
    kept: usize,
    aggregate_norm: f64,
    radius: Option<f64>,
    reference_distance: Option<f64>,
    lambda: Option<f64>,
    rho: Option<f64>,
    attacker_val_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config_hash: String,
    seeds: &'a [u64],
    points: Vec<String>,
    versions: Versions,
    files: [&'static str; 5],
    timestamp_unix: u64,
}

#[derive(Serialize)]
struct Versions {
    fmpa_cli: &'static str,
    fmpa_core: &'static str,
}

/// SHA-256 over the canonical config text; ignores output location and profile name.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(cfg.canonical_toml().as_bytes()))
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::runtime(format!("CSV error: {e}"))
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn summary_csv(path: &Path, results: &[PointResult]) -> Result<(), CliError> {
    let labels: Vec<String> = results.iter().map(|r| r.point.label()).collect();
    let mut rows = Vec::new();
    for (pr, label) in results.iter().zip(&labels) {
        let row = |seed: String, b: f64, a: f64, f: f64, phi: f64, dev: Option<f64>, cpc: f64| SummaryRow {
            point: label,
            attack: pr.point.attack.name(),
            aggregator: rule_name(pr.point.rule),
            attackers: pr.attackers,
            attacker_fraction: pr.point.fraction,
            bias: pr.point.bias,
            sample_rate: pr.point.sample_rate,
            seed,
            benign_accuracy: b,
            attacked_accuracy: a,
            final_accuracy: f,
            phi,
            deviation: dev,
            classes_per_client: cpc,
        };
        let rec = &pr.record;
        for r in &rec.runs {
            rows.push(row(r.seed.to_string(), r.benign.best_accuracy, r.attacked.best_accuracy, r.attacked.final_accuracy, r.phi, r.deviation, r.classes_per_client));
        }
        let cpc = Stat::of(&rec.runs.iter().map(|r| r.classes_per_client).collect::<Vec<_>>());
        for (name, f) in [("mean", (|s: &Stat| s.mean) as fn(&Stat) -> f64), ("std", |s: &Stat| s.std)] {
            rows.push(row(name.into(), f(&rec.benign_accuracy), f(&rec.attacked_accuracy), f(&rec.final_accuracy), f(&rec.phi), rec.deviation.as_ref().map(f), f(&cpc)));
        }
    }
    write_csv(path, rows)
}

fn trace_row<'a>(point: &'a str, seed: u64, pass: &'a str, t: &RoundTrace) -> TraceRow<'a> {
    TraceRow {
        point,
        seed,
        pass,
        round: t.round,
        accuracy: t.accuracy,
        train_loss: t.train_loss,
        participants: t.participants,
        sampled_attackers: t.sampled_attackers,
        attacked: t.attacked,
        malicious_kept: t.malicious_kept,
        kept: t.kept.len(),
        aggregate_norm: t.aggregate_norm,
        radius: t.radius,
        reference_distance: t.reference_distance,
        lambda: t.lambda,
        rho: t.rho,
        attacker_val_accuracy: t.attacker_val_accuracy,
    }
}

pub fn trace_csv(path: &Path, results: &[PointResult]) -> Result<(), CliError> {
    let labels: Vec<String> = results.iter().map(|r| r.point.label()).collect();
    let rows = results.iter().zip(&labels).flat_map(|(pr, label)| {
        pr.record.runs.iter().flat_map(move |run| {
            let benign = run.benign.traces.iter().map(move |t| trace_row(label, run.seed, "benign", t));
            let attacked = run.attacked.traces.iter().map(move |t| trace_row(label, run.seed, "attacked", t));
            benign.chain(attacked)
        })
    });
    write_csv(path, rows)
}

/// Long-format plot data: per point and round, the attacked-pass accuracy averaged over seeds.
pub fn emit_plotdata(path: &Path, results: &[PointResult]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(PLOT_HEADER.split(',')).map_err(csv_err)?;
    for pr in results {
        let series = pr.point.label();
        let runs = &pr.record.runs;
        let rounds = runs.iter().map(|r| r.attacked.traces.len()).min().unwrap_or(0);
        for i in 0..rounds {
            let acc = runs.iter().map(|r| r.attacked.traces[i].accuracy).sum::<f64>() / runs.len() as f64;
            let round = runs[0].attacked.traces[i].round;
            w.serialize((round, series.as_str(), acc)).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_files(cfg: &ExperimentConfig, results: &[PointResult], dir: &Path) -> Result<(), CliError> {
    summary_csv(&dir.join("summary.csv"), results)?;
    trace_csv(&dir.join("trace.csv"), results)?;
    emit_plotdata(&dir.join("plot.csv"), results)?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let manifest = Manifest {
        config_hash: config_hash(cfg),
        seeds: &cfg.seeds,
        points: results.iter().map(|r| r.point.label()).collect(),
        versions: Versions { fmpa_cli: env!("CARGO_PKG_VERSION"), fmpa_core: fmpa_core::VERSION },
        files: ["summary.csv", "trace.csv", "plot.csv", "config.toml", "manifest.json"],
        timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::runtime(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

fn sibling(out: &Path, tag: &str) -> PathBuf {
    let name = out.file_name().map_or_else(|| "bundle".into(), |n| n.to_string_lossy().into_owned());
    out.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

/// Write the bundle into a staging directory, then swap it into `out`.
///
/// An existing `out` is replaced only if it is empty or holds a previous bundle.
/// On any failure the staging directory is removed and `out` is left untouched.
pub fn write_bundle(cfg: &ExperimentConfig, results: &[PointResult], out: &Path) -> Result<(), CliError> {
    let out = if out.file_name().is_none() { out.join("results") } else { out.to_path_buf() };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let replace_old = if out.exists() {
        let empty = fs::read_dir(&out)?.next().is_none();
        if !empty && !out.join("manifest.json").is_file() {
            return Err(CliError::runtime(format!("refusing to overwrite {}: not empty and not a results bundle", out.display())));
        }
        true
    } else {
        false
    };
    let staging = sibling(&out, "staging");
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir(&staging)?;
    if let Err(e) = write_files(cfg, results, &staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    let swap = || -> std::io::Result<()> {
        if replace_old {
            let old = sibling(&out, "old");
            fs::rename(&out, &old)?;
            if let Err(e) = fs::rename(&staging, &out) {
                let _ = fs::rename(&old, &out);
                return Err(e);
            }
            fs::remove_dir_all(&old)
        } else {
            fs::rename(&staging, &out)
        }
    };
    swap().map_err(|e| {
        let _ = fs::remove_dir_all(&staging);
        CliError::runtime(format!("cannot move results into {}: {e}", out.display()))
    })
}
