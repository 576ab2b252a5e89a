//! Experiment configuration files.
//!
//! A config is resolved in layers: built-in defaults, then the named
//! `profile`, then the file itself, then `--override key=value` pairs. The
//! merged document is deserialized with unknown keys rejected and validated
//! before anything runs.

use std::path::{Path, PathBuf};

use fmpa_core::aggregation::AggregatorSpec;
use fmpa_core::attacks::{AttackKind, AttackPlan, Direction, FmpaConfig, LambdaSearchConfig, PreciseConfig, ReferenceMode, RhoMode};
use fmpa_core::engine::{FlConfig, Schedule};
use fmpa_core::model::TrainConfig;
use fmpa_core::{PartitionMode, PartitionSpec};
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::CliError;

const MNIST_FC: &str = r#"
[data]
source = "idx"
[model]
hidden = [64]
[fl]
clients = 100
attackers = 20
rounds = 120
global_lr = 0.05
local_epochs = 3
batch_size = 16
[attack]
alpha = 0.7
lambda = 2e-4
"#;

const EMNIST_CNN_DESK: &str = r#"
[data]
source = "synth"
classes = 62
per_class = 60
dim = 64
[model]
hidden = [128]
[fl]
clients = 100
attackers = 20
rounds = 150
global_lr = 0.15
local_epochs = 3
batch_size = 10
[attack]
alpha = 0.7
lambda = 1e-5
"#;

pub const PROFILES: [&str; 2] = ["mnist-fc", "emnist-cnn-desk"];

fn profile_table(name: &str) -> Result<Value, CliError> {
    let src = match name {
        "mnist-fc" => MNIST_FC,
        "emnist-cnn-desk" => EMNIST_CNN_DESK,
        other => return Err(CliError::validation("profile", format!("unknown profile {other:?}; expected one of {PROFILES:?}"))),
    };
    Ok(toml::from_str(src).expect("built-in profile parses"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synth,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding IDX files; falls back to `$FMPA_DATA_DIR`, then the config's directory.
    pub dir: Option<PathBuf>,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub limit_train: Option<usize>,
    pub limit_test: Option<usize>,
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub data_seed: u64,
    pub partition: PartitionMode,
    /// Non-IID degree q; defaults to 0.5 when `partition = "bias"`.
    pub bias: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            dir: None,
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "t10k-images-idx3-ubyte".into(),
            test_labels: "t10k-labels-idx1-ubyte".into(),
            limit_train: None,
            limit_test: None,
            classes: 10,
            per_class: 500,
            dim: 64,
            spread: 0.15,
            data_seed: 0,
            partition: PartitionMode::Iid,
            bias: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden layer widths; input and output sizes come from the data.
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![64] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    FixedAttackers,
    FixedFrequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlSection {
    pub clients: usize,
    pub attackers: usize,
    pub rounds: usize,
    pub global_lr: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub local_lr: f64,
    pub sample_rate: f64,
    pub schedule: ScheduleKind,
    pub frequency: u64,
}

impl Default for FlSection {
    fn default() -> Self {
        Self {
            clients: 100,
            attackers: 20,
            rounds: 120,
            global_lr: 0.05,
            local_epochs: 3,
            batch_size: 16,
            local_lr: 0.01,
            sample_rate: 1.0,
            schedule: ScheduleKind::FixedAttackers,
            frequency: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Fedavg,
    Krum,
    Mkrum,
    Median,
    Trmean,
    NormBounding,
    Bulyan,
    Faba,
    Afa,
    Cc,
    Dnc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    pub rule: Rule,
    /// Assumed attacker count; defaults to `fl.attackers`.
    pub m: Option<usize>,
    pub selection: Option<usize>,
    /// Trimmed-mean β; defaults to m.
    pub beta: Option<usize>,
    pub threshold: f64,
    pub max_passes: usize,
    pub iterations: usize,
    pub radius: f64,
    pub subsample_dim: Option<usize>,
    pub filter_coef: f64,
    pub power_iters: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            rule: Rule::Fedavg,
            m: None,
            selection: None,
            beta: None,
            threshold: 0.5,
            max_passes: 10,
            iterations: 1,
            radius: 100.0,
            subsample_dim: None,
            filter_coef: 1.0,
            power_iters: 50,
        }
    }
}

/// `rho = "known"`, `rho = "search"` or a fixed number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RhoSetting {
    Fixed(f64),
    Named(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Early-stop accuracy for I-FMPA; defaults to 1/L.
    pub tau: Option<f64>,
    /// Fixed λ; when absent λ is found by the halving search at the first attack.
    pub lambda: Option<f64>,
    pub lambda_init: f64,
    pub lambda_eps: f64,
    pub lambda_every_round: bool,
    pub attacker_epochs: usize,
    pub attacker_lr: f64,
    /// Defaults to `fl.batch_size`.
    pub attacker_batch_size: Option<usize>,
    pub reference: ReferenceMode,
    pub alpha: f64,
    pub val_fraction: f64,
    /// Desired F-FMPA accuracy drop in percentage points.
    pub xi: f64,
    pub rho: RhoSetting,
    pub rho_growth: f64,
    pub rho_cap: f64,
    pub rho_margin: f64,
    pub lie_z: Option<f64>,
    pub omniscient: bool,
    pub ipm_epsilon: f64,
    pub mpaf_scale: Option<f64>,
    pub direction: Direction,
    pub gamma_init: f64,
    pub gamma_tol: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        let plan = AttackPlan::default();
        let ls = plan.lambda_search.clone().expect("search on by default");
        Self {
            kind: AttackKind::None,
            tau: None,
            lambda: None,
            lambda_init: ls.init,
            lambda_eps: ls.eps,
            lambda_every_round: ls.every_round,
            attacker_epochs: plan.fmpa.attacker_epochs,
            attacker_lr: plan.fmpa.attacker_lr,
            attacker_batch_size: None,
            reference: plan.fmpa.reference,
            alpha: plan.fmpa.alpha,
            val_fraction: plan.fmpa.val_fraction,
            xi: 10.0,
            rho: RhoSetting::Named("known".into()),
            rho_growth: 1.5,
            rho_cap: 1e4,
            rho_margin: 0.01,
            lie_z: None,
            omniscient: false,
            ipm_epsilon: plan.ipm_epsilon,
            mpaf_scale: None,
            direction: plan.direction,
            gamma_init: plan.gamma_init,
            gamma_tol: plan.gamma_tol,
        }
    }
}

/// Grid axes; an empty list means "use the single value from the main sections".
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub attacks: Vec<AttackKind>,
    pub aggregators: Vec<Rule>,
    pub attacker_fraction: Vec<f64>,
    pub bias: Vec<f64>,
    pub sample_rate: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Bundle directory; `--out` takes precedence.
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("results") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub profile: Option<String>,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub fl: FlSection,
    pub aggregator: AggregatorConfig,
    pub attack: AttackConfig,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            profile: None,
            seeds: vec![1, 2, 3],
            data: DataConfig::default(),
            model: ModelConfig::default(),
            fl: FlSection::default(),
            aggregator: AggregatorConfig::default(),
            attack: AttackConfig::default(),
            sweep: SweepConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Recursively merge `over` into `base` (tables merge, everything else replaces).
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse the right-hand side of `key=value` as a TOML value, falling back to a bare string.
fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

pub fn apply_override(doc: &mut Value, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::validation("--override", format!("expected key=value, got {spec:?}")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::validation("--override", format!("malformed key {key:?}")));
    }
    let mut cur = doc;
    for seg in &path[..path.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::validation(key, "cannot descend into a non-table value"))?;
        cur = table.entry(seg.to_string()).or_insert_with(|| Value::Table(toml::Table::new()));
    }
    let table = cur.as_table_mut().ok_or_else(|| CliError::validation(key, "cannot set a field on a non-table value"))?;
    table.insert(path[path.len() - 1].to_string(), parse_scalar(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Layer profile, document and overrides, then deserialize and validate.
    pub fn resolve(doc: Value, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = doc;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let profile = doc.get("profile").and_then(Value::as_str).map(str::to_owned);
        let mut merged = match &profile {
            Some(p) => profile_table(p)?,
            None => Value::Table(toml::Table::new()),
        };
        merge(&mut merged, doc);
        let cfg: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| CliError::validation("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(src: &str, overrides: &[String]) -> Result<Self, CliError> {
        let doc: Value = toml::from_str(src).map_err(|e| CliError::validation("config", e.to_string()))?;
        Self::resolve(doc, overrides)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let src = std::fs::read_to_string(path).map_err(|e| CliError::validation("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&src, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Serialized form with the fields that cannot change results cleared
    /// (output location, profile name, data directory).
    pub fn canonical_toml(&self) -> String {
        let mut c = self.clone();
        c.output = OutputConfig::default();
        c.profile = None;
        c.data.dir = None;
        c.to_toml()
    }

    /// IDX directory: `data.dir` (relative to `base`), else `$FMPA_DATA_DIR`, else `base`.
    pub fn data_dir(&self, base: &Path) -> PathBuf {
        match &self.data.dir {
            Some(d) if d.is_absolute() => d.clone(),
            Some(d) => base.join(d),
            None => std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| base.to_path_buf()),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fl = &self.fl;
        if self.seeds.is_empty() {
            return Err(CliError::validation("seeds", "at least one seed is required"));
        }
        if fl.clients == 0 {
            return Err(CliError::validation("fl.clients", "must be at least 1"));
        }
        if fl.rounds == 0 {
            return Err(CliError::validation("fl.rounds", "must be at least 1"));
        }
        check_fraction("fl.attackers", fl.attackers, fl.clients)?;
        for &f in &self.sweep.attacker_fraction {
            if !(0.0..0.5).contains(&f) {
                return Err(CliError::validation("sweep.attacker_fraction", format!("{f} violates the rule that attackers are fewer than 50% of clients")));
            }
        }
        if !(fl.global_lr >= 0.0 && fl.global_lr.is_finite()) {
            return Err(CliError::validation("fl.global_lr", "must be a finite nonnegative number"));
        }
        for (key, v) in std::iter::once(("fl.sample_rate", fl.sample_rate)).chain(self.sweep.sample_rate.iter().map(|&v| ("sweep.sample_rate", v))) {
            if !(v > 0.0 && v <= 1.0) {
                return Err(CliError::validation(key, format!("{v} must lie in (0, 1]")));
            }
        }
        if fl.schedule == ScheduleKind::FixedFrequency && fl.frequency == 0 {
            return Err(CliError::validation("fl.frequency", "must be at least 1"));
        }
        if fl.local_epochs == 0 || fl.batch_size == 0 || !(fl.local_lr > 0.0) {
            return Err(CliError::validation("fl", "local_epochs, batch_size and local_lr must be positive"));
        }
        if self.model.hidden.contains(&0) {
            return Err(CliError::validation("model.hidden", "layer widths must be positive"));
        }
        let d = &self.data;
        if d.source == DataSource::Synth && (d.classes < 2 || d.per_class < 5 || d.dim == 0 || !(d.spread > 0.0)) {
            return Err(CliError::validation("data", "synthetic data needs classes >= 2, per_class >= 5, dim >= 1, spread > 0"));
        }
        let classes = match d.source {
            DataSource::Synth => d.classes,
            // label count is only known after loading; IDX sets here are MNIST-style
            DataSource::Idx => 10,
        };
        let lo = 1.0 / classes as f64;
        for (key, q) in d.bias.iter().map(|&q| ("data.bias", q)).chain(self.sweep.bias.iter().map(|&q| ("sweep.bias", q))) {
            if !(q >= lo - 1e-12 && q <= 1.0) {
                return Err(CliError::validation(key, format!("non-IID degree {q} must lie in [1/L, 1] = [{lo}, 1]")));
            }
        }
        let a = &self.attack;
        if !(a.xi >= 0.0 && a.xi < 100.0) {
            return Err(CliError::validation("attack.xi", "must lie in [0, 100) percentage points"));
        }
        if let Some(t) = a.tau {
            if !(t > 0.0 && t <= 1.0) {
                return Err(CliError::validation("attack.tau", "must lie in (0, 1]"));
            }
        }
        if !(a.alpha > 0.0 && a.alpha < 1.0) {
            return Err(CliError::validation("attack.alpha", "must lie in (0, 1)"));
        }
        if !(a.val_fraction > 0.0 && a.val_fraction < 1.0) {
            return Err(CliError::validation("attack.val_fraction", "must lie in (0, 1)"));
        }
        if let Some(l) = a.lambda {
            if !(l >= 0.0) {
                return Err(CliError::validation("attack.lambda", "must be nonnegative"));
            }
        }
        self.rho_mode()?;
        // build every grid point once so aggregator preconditions fail before any training
        for p in self.points() {
            self.fl_config(&p, classes).map_err(|e| CliError::validation(&format!("point {}", p.label()), e.to_string()))?.validate().map_err(|e| CliError::validation(&format!("point {}", p.label()), e.to_string()))?;
        }
        Ok(())
    }

    fn rho_mode(&self) -> Result<RhoMode, CliError> {
        let a = &self.attack;
        match &a.rho {
            RhoSetting::Fixed(r) if *r > 0.0 => Ok(RhoMode::Fixed(*r)),
            RhoSetting::Fixed(r) => Err(CliError::validation("attack.rho", format!("{r} must be positive"))),
            RhoSetting::Named(s) if s == "known" => Ok(RhoMode::Known),
            RhoSetting::Named(s) if s == "search" => {
                if !(a.rho_growth > 1.0 && a.rho_cap >= 1.0 && a.rho_margin >= 0.0) {
                    return Err(CliError::validation("attack.rho_growth", "rho search needs growth > 1, cap >= 1, margin >= 0"));
                }
                Ok(RhoMode::Search { growth: a.rho_growth, cap: a.rho_cap, margin: a.rho_margin })
            }
            RhoSetting::Named(s) => Err(CliError::validation("attack.rho", format!("expected \"known\", \"search\" or a number, got {s:?}"))),
        }
    }

    /// Expand the sweep grid (attack × aggregator × fraction × bias × sample rate).
    pub fn points(&self) -> Vec<Point> {
        let or1 = |v: &Vec<f64>| if v.is_empty() { vec![None] } else { v.iter().copied().map(Some).collect() };
        let attacks = if self.sweep.attacks.is_empty() { vec![self.attack.kind] } else { self.sweep.attacks.clone() };
        let rules = if self.sweep.aggregators.is_empty() { vec![self.aggregator.rule] } else { self.sweep.aggregators.clone() };
        let mut out = Vec::new();
        for &attack in &attacks {
            for &rule in &rules {
                for fraction in or1(&self.sweep.attacker_fraction) {
                    for bias in or1(&self.sweep.bias) {
                        for sample_rate in or1(&self.sweep.sample_rate) {
                            out.push(Point { attack, rule, fraction, bias, sample_rate });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn attackers_for(&self, p: &Point) -> usize {
        p.fraction.map_or(self.fl.attackers, |f| (f * self.fl.clients as f64).round() as usize)
    }

    pub fn partition_for(&self, p: &Point) -> PartitionSpec {
        let q = p.bias.or(self.data.bias);
        let mode = if p.bias.is_some() { PartitionMode::Bias } else { self.data.partition };
        match mode {
            PartitionMode::Iid => PartitionSpec::iid(self.fl.clients, 0),
            PartitionMode::Bias => PartitionSpec::bias(self.fl.clients, q.unwrap_or(0.5), 0),
        }
    }

    /// Core configuration for one grid point.
    pub fn fl_config(&self, p: &Point, classes: usize) -> Result<FlConfig, CliError> {
        let fl = &self.fl;
        let a = &self.attack;
        let g = &self.aggregator;
        let m = self.attackers_for(p);
        let am = g.m.unwrap_or(m);
        let aggregator = match p.rule {
            Rule::Fedavg => AggregatorSpec::Fedavg,
            Rule::Krum => AggregatorSpec::Krum { m: am },
            Rule::Mkrum => AggregatorSpec::Mkrum { m: am, selection: g.selection },
            Rule::Median => AggregatorSpec::Median,
            Rule::Trmean => AggregatorSpec::Trmean { beta: g.beta.unwrap_or(am) },
            Rule::NormBounding => AggregatorSpec::NormBounding,
            Rule::Bulyan => AggregatorSpec::Bulyan { m: am, selection: g.selection },
            Rule::Faba => AggregatorSpec::Faba { m: am },
            Rule::Afa => AggregatorSpec::Afa { threshold: g.threshold, max_passes: g.max_passes },
            Rule::Cc => AggregatorSpec::Cc { iterations: g.iterations, radius: g.radius },
            Rule::Dnc => AggregatorSpec::Dnc { m: am, subsample_dim: g.subsample_dim, filter_coef: g.filter_coef, power_iters: g.power_iters },
        };
        let fmpa = FmpaConfig {
            tau: a.tau.unwrap_or(1.0 / classes as f64),
            lambda: a.lambda.unwrap_or(0.0),
            attacker_epochs: a.attacker_epochs,
            attacker_lr: a.attacker_lr,
            batch_size: a.attacker_batch_size.unwrap_or(fl.batch_size),
            reference: a.reference,
            alpha: a.alpha,
            val_fraction: a.val_fraction,
        };
        let attack = AttackPlan {
            kind: p.attack,
            tau: a.tau,
            fmpa,
            lambda_search: a.lambda.is_none().then_some(LambdaSearchConfig { init: a.lambda_init, eps: a.lambda_eps, every_round: a.lambda_every_round }),
            precise: PreciseConfig { xi: a.xi / 100.0, rho: self.rho_mode()? },
            lie_z: a.lie_z,
            omniscient: a.omniscient,
            ipm_epsilon: a.ipm_epsilon,
            mpaf_scale: a.mpaf_scale,
            direction: a.direction,
            gamma_init: a.gamma_init,
            gamma_tol: a.gamma_tol,
        };
        Ok(FlConfig {
            clients: fl.clients,
            attackers: m,
            rounds: fl.rounds,
            global_lr: fl.global_lr,
            sample_rate: p.sample_rate.unwrap_or(fl.sample_rate),
            train: TrainConfig { epochs: fl.local_epochs, batch_size: fl.batch_size, learning_rate: fl.local_lr },
            aggregator,
            attack,
            schedule: match fl.schedule {
                ScheduleKind::FixedAttackers => Schedule::FixedAttackers,
                ScheduleKind::FixedFrequency => Schedule::FixedFrequency(fl.frequency),
            },
        })
    }
}

fn check_fraction(key: &str, m: usize, n: usize) -> Result<(), CliError> {
    if 2 * m >= n {
        return Err(CliError::validation(key, format!("m={m} with N={n} violates the rule that attackers are fewer than 50% of clients")));
    }
    Ok(())
}

pub const DATA_DIR_ENV: &str = "FMPA_DATA_DIR";

/// One point of the sweep grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub attack: AttackKind,
    pub rule: Rule,
    pub fraction: Option<f64>,
    pub bias: Option<f64>,
    pub sample_rate: Option<f64>,
}

pub fn rule_name(r: Rule) -> &'static str {
    match r {
        Rule::Fedavg => "fedavg",
        Rule::Krum => "krum",
        Rule::Mkrum => "mkrum",
        Rule::Median => "median",
        Rule::Trmean => "trmean",
        Rule::NormBounding => "norm_bounding",
        Rule::Bulyan => "bulyan",
        Rule::Faba => "faba",
        Rule::Afa => "afa",
        Rule::Cc => "cc",
        Rule::Dnc => "dnc",
    }
}

impl Point {
    /// `attack/aggregator` plus any swept axes, e.g. `i_fmpa/mkrum/bias=0.5`.
    pub fn label(&self) -> String {
        let mut s = format!("{}/{}", self.attack.name(), rule_name(self.rule));
        if let Some(f) = self.fraction {
            s.push_str(&format!("/fraction={f}"));
        }
        if let Some(q) = self.bias {
            s.push_str(&format!("/bias={q}"));
        }
        if let Some(r) = self.sample_rate {
            s.push_str(&format!("/sample_rate={r}"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_mnist_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[data]\nsource = \"synth\"\n[aggregator]\nrule = \"fedavg\"\n", &[]).unwrap();
        let fl = &cfg.fl;
        assert_eq!((fl.clients, fl.attackers, fl.rounds, fl.local_epochs, fl.batch_size), (100, 20, 120, 3, 16));
        assert_eq!(fl.global_lr, 0.05);
    }

    #[test]
    fn majority_attackers_rejected() {
        let err = ExperimentConfig::from_toml_str("[fl]\nattackers = 60\nclients = 100\n", &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("fl.attackers") && err.to_string().contains("50%"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("[fl]\nclientz = 10\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1\n", &[]).is_err());
    }

    #[test]
    fn round_trip() {
        let cfg = ExperimentConfig::from_toml_str("profile = \"emnist-cnn-desk\"\n[attack]\nkind = \"lie\"\nrho = 3.5\n", &[]).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.fl.batch_size, 10);
        assert_eq!(again.attack.lambda, Some(1e-5));
    }

    #[test]
    fn overrides_and_profiles() {
        let cfg = ExperimentConfig::from_toml_str(
            "profile = \"mnist-fc\"\n",
            &["fl.rounds=7".into(), "attack.kind=i_fmpa".into(), "data.source=synth".into(), "sweep.bias=[0.25, 0.5]".into()],
        )
        .unwrap();
        assert_eq!(cfg.fl.rounds, 7);
        assert_eq!(cfg.attack.kind, AttackKind::IFmpa);
        assert_eq!(cfg.attack.lambda, Some(2e-4));
        assert_eq!(cfg.points().len(), 2);
        assert!(ExperimentConfig::from_toml_str("profile = \"cifar\"\n", &[]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["nokey".into()]).is_err());
    }

    #[test]
    fn grid_expansion() {
        let cfg = ExperimentConfig::from_toml_str(
            "[fl]\nclients = 20\nattackers = 2\n[sweep]\nattacks = [\"lie\", \"ipm\"]\naggregators = [\"fedavg\", \"median\"]\nattacker_fraction = [0.05, 0.1, 0.15, 0.2]\n",
            &[],
        )
        .unwrap();
        let pts = cfg.points();
        assert_eq!(pts.len(), 16);
        assert_eq!(cfg.attackers_for(&pts[3]), 4);
        assert_eq!(pts[1].label(), "lie/fedavg/fraction=0.1");
    }
}
