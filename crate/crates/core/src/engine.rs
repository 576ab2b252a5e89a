//! Round orchestration, attacker scheduling, metrics and multi-seed runs.
//!
//! Compromised clients are always the first `m` client indices. Every
//! (seed, round, client) gets its own derived RNG stream, and client training
//! is collected in index order, so results do not depend on the worker count.

use std::rc::Rc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationContext, AggregatorSpec};
use crate::attacks::{
    self, known_rho, AttackKind, AttackPlan, AttackerView, MaliciousResult, RhoController, RhoMode, SmoothingState,
};
use crate::data::{partition, Dataset, PartitionSpec};
use crate::error::{contract, Result};
use crate::model::{argmax, softmax, LabeledBatch, MlpArchitecture, TrainConfig};
use crate::rng::{self, Stream};
use crate::vecmath::{self, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Attack in every round.
    FixedAttackers,
    /// Attack in rounds that are multiples of `f`.
    FixedFrequency(u64),
}

pub fn schedule_attackers(schedule: Schedule, round: u64) -> bool {
    match schedule {
        Schedule::FixedAttackers => true,
        Schedule::FixedFrequency(f) => f > 0 && round.is_multiple_of(f),
    }
}

/// ⌈rate·N⌉ distinct clients, ascending, drawn from a per-(seed, round) stream.
pub fn sample_clients(n: usize, rate: f64, seed: u64, round: u64) -> Result<Vec<usize>> {
    if n == 0 || !(rate > 0.0 && rate <= 1.0) {
        return contract(format!("client sampling needs N >= 1 and rate in (0, 1], got N={n}, rate={rate}"));
    }
    let k = ((rate * n as f64).ceil() as usize).clamp(1, n);
    if k == n {
        return Ok((0..n).collect());
    }
    let mut picked = rand::seq::index::sample(&mut rng::stream(seed, Stream::Sampling, &[round]), n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Federation-wide settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlConfig {
    pub clients: usize,
    /// Number of compromised clients `m` (indices `0..m`).
    pub attackers: usize,
    pub rounds: usize,
    pub global_lr: f64,
    pub sample_rate: f64,
    pub train: TrainConfig,
    pub aggregator: AggregatorSpec,
    pub attack: AttackPlan,
    pub schedule: Schedule,
}

impl FlConfig {
    pub fn participants(&self) -> usize {
        ((self.sample_rate * self.clients as f64).ceil() as usize).clamp(1, self.clients.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.rounds == 0 {
            return contract("clients and rounds must be positive");
        }
        if self.attackers >= self.clients {
            return contract(format!("attackers ({}) must be fewer than clients ({})", self.attackers, self.clients));
        }
        if self.attack.kind != AttackKind::None && self.attackers == 0 {
            return contract(format!("attack {} configured with zero attackers", self.attack.kind.name()));
        }
        if !(self.global_lr >= 0.0 && self.global_lr.is_finite()) {
            return contract(format!("global learning rate must be a finite nonnegative number, got {}", self.global_lr));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return contract(format!("sample rate must lie in (0, 1], got {}", self.sample_rate));
        }
        if let Schedule::FixedFrequency(0) = self.schedule {
            return contract("attack frequency must be at least 1");
        }
        self.train.validate()?;
        self.aggregator.validate(self.participants())?;
        if matches!(self.attack.kind, AttackKind::IFmpa | AttackKind::FFmpa) {
            let mut f = self.attack.fmpa.clone();
            f.tau = self.attack.tau.unwrap_or(0.5);
            f.validate()?;
            self.attack.precise.validate()?;
        }
        Ok(())
    }
}

/// What happened in one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: u64,
    /// Test accuracy of the global model after this round's update.
    pub accuracy: f64,
    /// Cross-entropy of the new global model on (a fixed subsample of) the pooled client data.
    pub train_loss: f64,
    /// Client ids whose submissions the aggregator kept, ascending.
    pub kept: Vec<usize>,
    pub participants: usize,
    pub sampled_attackers: usize,
    /// True when malicious updates were actually submitted.
    pub attacked: bool,
    /// How many malicious submissions the aggregator kept.
    pub malicious_kept: usize,
    pub aggregate_norm: f64,
    /// Certified radius (indiscriminate FMPA only).
    pub radius: Option<f64>,
    /// ‖malicious update − reference update‖ (FMPA only).
    pub reference_distance: Option<f64>,
    pub lambda: Option<f64>,
    pub rho: Option<f64>,
    pub attacker_val_accuracy: Option<f64>,
}

/// Result of one training run (benign or attacked).
#[derive(Clone, Debug, PartialEq)]
pub struct PassOutcome {
    pub traces: Vec<RoundTrace>,
    pub best_accuracy: f64,
    pub final_accuracy: f64,
    pub final_model: ParamVector,
}

/// Mean cross-entropy and accuracy in one forward pass.
pub fn evaluate(arch: &MlpArchitecture, params: &ParamVector, data: &LabeledBatch<'_>) -> Result<(f64, f64)> {
    if data.is_empty() {
        return contract("evaluation on empty data");
    }
    let logits = arch.logits(params, data)?;
    let l = arch.classes();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (row, &y) in logits.chunks(l).zip(data.labels) {
        let p = softmax(row);
        loss -= p[y].max(1e-300).ln();
        correct += usize::from(argmax(row) == y);
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Per-pass adversary state.
struct Adversary<'a> {
    plan: &'a AttackPlan,
    pooled: Rc<Dataset>,
    smoothing: SmoothingState,
    lambda: Option<f64>,
    rho: Option<RhoController>,
    base_model: ParamVector,
    tau: f64,
}

/// One seed's federation: clients, test data and configuration.
pub struct Federation<'a> {
    pub arch: &'a MlpArchitecture,
    pub cfg: &'a FlConfig,
    pub clients: &'a [Dataset],
    pub test: &'a Dataset,
    pub seed: u64,
    loss_probe: Dataset,
}

/// Upper bound on the pooled-train subsample used for the per-round loss.
pub const TRAIN_LOSS_SAMPLES: usize = 4096;

impl<'a> Federation<'a> {
    pub fn new(arch: &'a MlpArchitecture, cfg: &'a FlConfig, clients: &'a [Dataset], test: &'a Dataset, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if clients.len() != cfg.clients {
            return contract(format!("expected {} client datasets, got {}", cfg.clients, clients.len()));
        }
        if let Some(i) = clients.iter().position(Dataset::is_empty) {
            return contract(format!("client {i} has no data"));
        }
        if test.is_empty() {
            return contract("empty test set");
        }
        let parts: Vec<&Dataset> = clients.iter().collect();
        let pooled = Dataset::concat(&parts)?;
        let loss_probe = if pooled.len() <= TRAIN_LOSS_SAMPLES {
            pooled
        } else {
            let stride = pooled.len() as f64 / TRAIN_LOSS_SAMPLES as f64;
            let idx: Vec<usize> = (0..TRAIN_LOSS_SAMPLES).map(|k| (k as f64 * stride) as usize).collect();
            pooled.subset(&idx)
        };
        Ok(Self { arch, cfg, clients, test, seed, loss_probe })
    }

    fn honest_update(&self, global: &ParamVector, round: u64, client: usize) -> Result<ParamVector> {
        let seed = rng::derive(self.seed, Stream::LocalTrain, &[round, client as u64]);
        let w = self.arch.local_train(global, &self.clients[client].batch(), &self.cfg.train, seed)?;
        Ok(w.sub(global))
    }

    fn adversary(&self, target: Option<f64>) -> Result<Option<Adversary<'a>>> {
        let plan = &self.cfg.attack;
        if plan.kind == AttackKind::None {
            return Ok(None);
        }
        let parts: Vec<&Dataset> = self.clients[..self.cfg.attackers].iter().collect();
        let tau = match plan.kind {
            AttackKind::FFmpa => match target {
                Some(t) => t.max(1e-9),
                None => return contract("fine-grained FMPA needs a target accuracy"),
            },
            _ => plan.tau.unwrap_or(1.0 / self.arch.classes() as f64),
        };
        let rho = match plan.precise.rho {
            RhoMode::Search { growth, cap, margin } => Some(RhoController::new(growth, cap, margin)?),
            _ => None,
        };
        Ok(Some(Adversary {
            plan,
            pooled: Rc::new(Dataset::concat(&parts)?),
            smoothing: SmoothingState::new(plan.fmpa.alpha)?,
            lambda: plan.lambda_search.is_none().then_some(plan.fmpa.lambda),
            rho,
            base_model: self.arch.init_params(rng::derive(self.seed, Stream::BaseModel, &[])),
            tau,
        }))
    }

    /// Run all rounds. With `attack = false` every client is honest; `target`
    /// is the accuracy the fine-grained attack aims for.
    pub fn run(&self, attack: bool, target: Option<f64>) -> Result<PassOutcome> {
        let mut adv = if attack { self.adversary(target)? } else { None };
        let mut global = self.arch.init_params(rng::derive(self.seed, Stream::Init, &[]));
        let mut prev: Option<ParamVector> = None;
        let mut traces = Vec::with_capacity(self.cfg.rounds);
        for round in 0..self.cfg.rounds as u64 {
            let (next, agg, trace) = self.run_round(&global, prev.as_ref(), round, adv.as_mut())?;
            global = next;
            prev = Some(agg);
            traces.push(trace);
        }
        let best_accuracy = traces.iter().map(|t| t.accuracy).fold(f64::NEG_INFINITY, f64::max);
        let final_accuracy = traces.last().map_or(f64::NAN, |t| t.accuracy);
        Ok(PassOutcome { traces, best_accuracy, final_accuracy, final_model: global })
    }

    fn run_round(
        &self,
        global: &ParamVector,
        prev: Option<&ParamVector>,
        round: u64,
        mut adv: Option<&mut Adversary<'_>>,
    ) -> Result<(ParamVector, ParamVector, RoundTrace)> {
        let cfg = self.cfg;
        let m = cfg.attackers;
        let participants = sample_clients(cfg.clients, cfg.sample_rate, self.seed, round)?;
        let sampled_attackers = participants.iter().filter(|&&i| i < m).count();

        // attacker-side honest updates for all m, plus every benign participant
        let mut to_train: Vec<usize> = if adv.is_some() { (0..m).collect() } else { Vec::new() };
        to_train.extend(participants.iter().copied().filter(|&i| adv.is_none() || i >= m));
        let trained: Vec<ParamVector> =
            to_train.par_iter().map(|&i| self.honest_update(global, round, i)).collect::<Result<_>>()?;
        let honest_of = |i: usize| -> &ParamVector { &trained[to_train.binary_search(&i).expect("client trained")] };

        let ctx = AggregationContext { prev_global_update: prev, seed: self.seed, round };
        let mut trace = RoundTrace {
            round,
            accuracy: 0.0,
            train_loss: 0.0,
            kept: Vec::new(),
            participants: participants.len(),
            sampled_attackers,
            attacked: false,
            malicious_kept: 0,
            aggregate_norm: 0.0,
            radius: None,
            reference_distance: None,
            lambda: None,
            rho: None,
            attacker_val_accuracy: None,
        };

        let mut malicious: Option<ParamVector> = None;
        let mut val_set: Option<Dataset> = None;
        if let Some(a) = adv.as_deref_mut() {
            if matches!(a.plan.kind, AttackKind::IFmpa | AttackKind::FFmpa) {
                a.smoothing.update(global)?;
            }
            if sampled_attackers > 0 && schedule_attackers(cfg.schedule, round) {
                let att_honest: Vec<ParamVector> = (0..m).map(|i| honest_of(i).clone()).collect();
                let visible: Vec<ParamVector> = if a.plan.omniscient {
                    participants.iter().map(|&i| honest_of(i).clone()).collect()
                } else {
                    att_honest.clone()
                };
                let pooled = Rc::clone(&a.pooled);
                let view = AttackerView { arch: self.arch, global, round, honest_updates: &att_honest, data: &pooled, seed: self.seed };
                malicious = self.craft(a, &view, &visible, participants.len(), sampled_attackers, &ctx, &mut trace, &mut val_set)?;
            }
        }

        let submitted: Vec<ParamVector> = participants
            .iter()
            .map(|&i| match (&malicious, i < m) {
                (Some(u), true) => u.clone(),
                _ => honest_of(i).clone(),
            })
            .collect();
        let out = cfg.aggregator.aggregate(&submitted, &ctx)?;
        let next = global.add_scaled(cfg.global_lr, &out.update);
        if !next.is_finite() {
            return contract(format!("global model became non-finite in round {round}"));
        }
        if malicious.is_some() {
            trace.attacked = true;
            trace.malicious_kept = out.kept.iter().filter(|&&k| participants[k] < m).count();
        }
        trace.aggregate_norm = out.update.norm();
        trace.kept = out.kept.iter().map(|&k| participants[k]).collect();
        trace.accuracy = evaluate(self.arch, &next, &self.test.batch())?.0;
        trace.train_loss = evaluate(self.arch, &next, &self.loss_probe.batch())?.1;

        if let (Some(a), Some(val)) = (adv, val_set) {
            if let Some(ctl) = a.rho.as_mut() {
                let v = self.arch.accuracy(&next, &val.batch())?;
                ctl.observe(v, a.tau);
            }
        }
        Ok((next, out.update, trace))
    }

    #[allow(clippy::too_many_arguments)]
    fn craft(
        &self,
        a: &mut Adversary<'_>,
        view: &AttackerView<'_>,
        visible: &[ParamVector],
        n_part: usize,
        m_part: usize,
        ctx: &AggregationContext<'_>,
        trace: &mut RoundTrace,
        val_set: &mut Option<Dataset>,
    ) -> Result<Option<ParamVector>> {
        let plan = a.plan;
        let update = match plan.kind {
            AttackKind::None => return Ok(None),
            AttackKind::IFmpa | AttackKind::FFmpa => {
                if view.round == 0 {
                    return Ok(None);
                }
                let mut fcfg = plan.fmpa.clone();
                fcfg.tau = a.tau;
                let reference = attacks::attacker_reference(view, &a.smoothing, fcfg.reference)?;
                let lambda = match (&plan.lambda_search, a.lambda) {
                    (Some(ls), cached) if cached.is_none() || ls.every_round => {
                        let found = attacks::search_lambda(|l| attacks::lambda_reaches_target(view, &reference, &fcfg, l), ls.init, ls.eps)?;
                        a.lambda = Some(found.lambda);
                        found.lambda
                    }
                    (_, Some(l)) => l,
                    (_, None) => fcfg.lambda,
                };
                fcfg.lambda = lambda;
                trace.lambda = Some(lambda);
                let res: MaliciousResult = if plan.kind == AttackKind::IFmpa {
                    attacks::craft_i_fmpa_with_reference(view, &reference, &fcfg)?
                } else {
                    let rho = match plan.precise.rho {
                        RhoMode::Known => known_rho(n_part, self.cfg.global_lr, m_part)?,
                        RhoMode::Fixed(r) => r,
                        RhoMode::Search { .. } => a.rho.as_ref().map_or(1.0, RhoController::rho),
                    };
                    trace.rho = Some(rho);
                    let (_, val) = attacks::split_train_val(view.data, fcfg.val_fraction, view.seed, view.round)?;
                    *val_set = Some(val);
                    attacks::craft_f_fmpa_with_reference(view, &reference, &fcfg, rho)?
                };
                trace.radius = res.radius;
                trace.reference_distance = Some(vecmath::dist(&res.update, &res.reference_update));
                trace.attacker_val_accuracy = Some(res.val_accuracy);
                res.update
            }
            AttackKind::Lie => {
                let z = match plan.lie_z {
                    Some(z) => z,
                    None => attacks::lie_z(n_part, m_part)?,
                };
                attacks::lie_from_updates(visible, z)?
            }
            AttackKind::Ipm => attacks::ipm_attack(&vecmath::mean(visible)?, plan.ipm_epsilon)?,
            AttackKind::Mpaf => {
                let scale = plan.mpaf_scale.unwrap_or(match self.cfg.aggregator {
                    AggregatorSpec::Median | AggregatorSpec::Trmean { .. } => 1e6,
                    _ => 10.0,
                });
                attacks::mpaf_attack(view.global, &a.base_model, scale)?
            }
            AttackKind::MinMax => attacks::min_max_attack(visible, plan.direction, plan.gamma_init, plan.gamma_tol)?.update,
            AttackKind::MinSum => attacks::min_sum_attack(visible, plan.direction, plan.gamma_init, plan.gamma_tol)?.update,
            AttackKind::Agrt => {
                let agg = &self.cfg.aggregator;
                attacks::agr_tailored_attack(visible, view.global, |u| agg.aggregate(u, ctx), m_part, plan.gamma_init, plan.gamma_tol)?.update
            }
        };
        Ok(Some(update))
    }
}

/// Relative accuracy degradation in percent: (benign − attacked)/benign × 100.
pub fn attack_impact(acc_benign: f64, acc_attacked: f64) -> Result<f64> {
    if acc_benign == 0.0 || !acc_benign.is_finite() || !acc_attacked.is_finite() {
        return contract(format!("attack impact undefined for benign accuracy {acc_benign}"));
    }
    Ok((acc_benign - acc_attacked) / acc_benign * 100.0)
}

/// |ξ − (benign − attacked)|, all in percentage points.
pub fn attack_deviation(xi: f64, acc_benign: f64, acc_attacked: f64) -> f64 {
    (xi - (acc_benign - acc_attacked)).abs()
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        if xs.is_empty() {
            return Stat { mean: f64::NAN, std: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

/// One seed: a benign pass and (if an attack is configured) an attacked pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub benign: PassOutcome,
    pub attacked: PassOutcome,
    /// Attack impact φ in percent, from best accuracies.
    pub phi: f64,
    /// F-FMPA deviation in percentage points, from the final attacked accuracy.
    pub deviation: Option<f64>,
    /// Mean number of distinct labels per client under the partition used.
    pub classes_per_client: f64,
}

/// Aggregated results over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRecord {
    pub runs: Vec<SeedRun>,
    pub benign_accuracy: Stat,
    pub attacked_accuracy: Stat,
    pub final_accuracy: Stat,
    pub phi: Stat,
    pub deviation: Option<Stat>,
}

impl ExperimentRecord {
    pub fn from_runs(runs: Vec<SeedRun>) -> Self {
        let col = |f: &dyn Fn(&SeedRun) -> f64| Stat::of(&runs.iter().map(f).collect::<Vec<_>>());
        let deviation = runs.iter().map(|r| r.deviation).collect::<Option<Vec<_>>>().map(|d| Stat::of(&d));
        Self {
            benign_accuracy: col(&|r| r.benign.best_accuracy),
            attacked_accuracy: col(&|r| r.attacked.best_accuracy),
            final_accuracy: col(&|r| r.attacked.final_accuracy),
            phi: col(&|r| r.phi),
            deviation,
            runs,
        }
    }
}

/// Partition `train` for `seed` and run both passes.
pub fn run_seed(cfg: &FlConfig, arch: &MlpArchitecture, train: &Dataset, test: &Dataset, split: &PartitionSpec, seed: u64) -> Result<SeedRun> {
    let spec = PartitionSpec { clients: cfg.clients, seed: rng::derive(seed, Stream::Partition, &[]), ..*split };
    let clients = partition(train, &spec)?;
    let classes_per_client = clients.iter().map(|c| c.distinct_labels() as f64).sum::<f64>() / clients.len() as f64;
    let fed = Federation::new(arch, cfg, &clients, test, seed)?;
    let benign = fed.run(false, None)?;
    if cfg.attack.kind == AttackKind::None {
        return Ok(SeedRun { seed, attacked: benign.clone(), benign, phi: 0.0, deviation: None, classes_per_client });
    }
    let xi = cfg.attack.precise.xi;
    let target = (cfg.attack.kind == AttackKind::FFmpa).then_some(benign.best_accuracy - xi);
    let attacked = fed.run(true, target)?;
    let phi = attack_impact(benign.best_accuracy, attacked.best_accuracy)?;
    let deviation = target.map(|_| attack_deviation(xi * 100.0, benign.best_accuracy * 100.0, attacked.final_accuracy * 100.0));
    Ok(SeedRun { seed, benign, attacked, phi, deviation, classes_per_client })
}

pub fn run_experiment(
    cfg: &FlConfig,
    arch: &MlpArchitecture,
    train: &Dataset,
    test: &Dataset,
    split: &PartitionSpec,
    seeds: &[u64],
) -> Result<ExperimentRecord> {
    if seeds.is_empty() {
        return contract("at least one seed is required");
    }
    let runs = seeds.iter().map(|&s| run_seed(cfg, arch, train, test, split, s)).collect::<Result<Vec<_>>>()?;
    Ok(ExperimentRecord::from_runs(runs))
}
