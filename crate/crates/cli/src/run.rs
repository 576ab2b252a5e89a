use std::path::Path;

use fmpa_core::attacks::AttackKind;
use fmpa_core::data::{load_idx, synth_blobs};
use fmpa_core::engine::run_experiment;
use fmpa_core::{Dataset, ExperimentRecord, MlpArchitecture};
use rayon::prelude::*;

use crate::config::{DataSource, ExperimentConfig, Point};
use crate::output::write_bundle;
use crate::CliError;

/// Everything measured at one grid point.
#[derive(Clone, Debug)]
pub struct PointResult {
    pub point: Point,
    pub attackers: usize,
    pub record: ExperimentRecord,
}

impl PointResult {
    /// `label: phi = mean ± std %` (or the deviation for the fine-grained attack).
    pub fn summary_line(&self) -> String {
        let r = &self.record;
        let metric = match (&r.deviation, self.point.attack) {
            (Some(d), AttackKind::FFmpa) => format!("deviation = {:.2} ± {:.2} pp", d.mean, d.std),
            _ => format!("phi = {:.2} ± {:.2} %", r.phi.mean, r.phi.std),
        };
        format!(
            "{}: {metric} (benign {:.4}, attacked {:.4}, {} seeds)",
            self.point.label(),
            r.benign_accuracy.mean,
            r.attacked_accuracy.mean,
            r.runs.len()
        )
    }
}

fn truncate(ds: Dataset, limit: Option<usize>) -> Dataset {
    match limit {
        Some(n) if n < ds.len() => ds.subset(&(0..n).collect::<Vec<_>>()),
        _ => ds,
    }
}

/// Load (or generate) the train and test sets named by the config.
pub fn load_data(cfg: &ExperimentConfig, base: &Path) -> Result<(Dataset, Dataset), CliError> {
    let d = &cfg.data;
    let (train, test) = match d.source {
        DataSource::Synth => synth_blobs(d.classes, d.per_class, d.dim, d.spread, d.data_seed)?,
        DataSource::Idx => {
            let dir = cfg.data_dir(base);
            let load = |img: &str, lbl: &str| {
                load_idx(dir.join(img), dir.join(lbl)).map_err(|e| CliError::runtime(format!("loading {} from {}: {e}", img, dir.display())))
            };
            (load(&d.train_images, &d.train_labels)?, load(&d.test_images, &d.test_labels)?)
        }
    };
    Ok((truncate(train, d.limit_train), truncate(test, d.limit_test)))
}

/// Run every grid point without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<Vec<PointResult>, CliError> {
    if train.classes != test.classes || train.features != test.features {
        return Err(CliError::runtime("train and test sets disagree on shape"));
    }
    let mut sizes = vec![train.features];
    sizes.extend(&cfg.model.hidden);
    sizes.push(train.classes);
    let arch = MlpArchitecture::new(sizes)?;
    let points = cfg.points();
    points
        .par_iter()
        .map(|p| {
            let fl = cfg.fl_config(p, train.classes)?;
            fl.validate().map_err(|e| CliError::validation(&format!("point {}", p.label()), e.to_string()))?;
            let record = run_experiment(&fl, &arch, train, test, &cfg.partition_for(p), &cfg.seeds)?;
            Ok(PointResult { point: *p, attackers: fl.attackers, record })
        })
        .collect()
}

/// Full `run` command: load data, execute the grid, write the bundle to `out`.
pub fn run_command(cfg: &ExperimentConfig, out: &Path, base: &Path) -> Result<Vec<PointResult>, CliError> {
    let (train, test) = load_data(cfg, base)?;
    let results = execute(cfg, &train, &test)?;
    write_bundle(cfg, &results, out)?;
    Ok(results)
}

