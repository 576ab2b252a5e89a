//! Model poisoning attacks.
//!
//! The optimization-based family crafts a malicious model Θ′ directly: start
//! from a reference estimate ĝ of the next benign global model, minimise
//! `λ‖Θ′ − ĝ‖₂ + hinge(Θ′)` with Adam until validation accuracy falls to the
//! threshold τ, then either
//!
//! * (indiscriminate) submit `Θ′ − g` projected onto the ball of the certified
//!   radius R around `ĝ − g`, R being the largest distance from an honestly
//!   trained attacker update to `ĝ − g`; or
//! * (fine-grained) submit `∇ + ρ(Θ′ − ĝ)` so that plain averaging lands the
//!   next global model on Θ′ itself.
//!
//! Sign convention: a client update is `w − g` and the server applies
//! `g ← g + η·aggregate`, so the precise update carries `Θ′ − ĝ`.
//!
//! The six baselines (AGR-tailored, LIE, IPM, MPAF, Min-Max, Min-Sum) live at
//! the bottom of the file.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::aggregation::AggregationOutcome;
use crate::data::Dataset;
use crate::error::{contract, Result};
use crate::model::{BatchBuf, MlpArchitecture, OptimizerState};
use crate::rng::{self, Stream};
use crate::vecmath::{self, coordwise_stats, project_to_ball, sq_dist, ParamVector};

// ---------------------------------------------------------------------------
// Reference models
// ---------------------------------------------------------------------------

/// First- and second-order exponential smoothing of the global model sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothingState {
    alpha: f64,
    s1: Option<ParamVector>,
    s2: Option<ParamVector>,
}

impl SmoothingState {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return contract(format!("smoothing factor must lie in (0, 1), got {alpha}"));
        }
        Ok(Self { alpha, s1: None, s2: None })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_initialized(&self) -> bool {
        self.s1.is_some()
    }

    pub fn first_order(&self) -> Option<&ParamVector> {
        self.s1.as_ref()
    }

    pub fn second_order(&self) -> Option<&ParamVector> {
        self.s2.as_ref()
    }

    /// Build a state directly from smoothing values.
    pub fn from_parts(alpha: f64, s1: ParamVector, s2: ParamVector) -> Result<Self> {
        if s1.dim() != s2.dim() {
            return contract("smoothing components differ in dimension");
        }
        let mut st = Self::new(alpha)?;
        st.s1 = Some(s1);
        st.s2 = Some(s2);
        Ok(st)
    }

    /// Fold in the newest global model. The first observation initialises both
    /// components to it.
    pub fn update(&mut self, g: &ParamVector) -> Result<()> {
        let a = self.alpha;
        match (&self.s1, &self.s2) {
            (Some(s1), Some(s2)) => {
                if s1.dim() != g.dim() {
                    return contract(format!("smoothing dim {} vs model dim {}", s1.dim(), g.dim()));
                }
                let n1 = s1.add_scaled(a, &g.sub(s1));
                let n2 = s2.add_scaled(a, &n1.sub(s2));
                self.s1 = Some(n1);
                self.s2 = Some(n2);
            }
            _ => {
                self.s1 = Some(g.clone());
                self.s2 = Some(g.clone());
            }
        }
        Ok(())
    }

    /// ĝ = (2−α)/(1−α)·s1 − 1/(1−α)·s2, evaluated as s1 + (s1 − s2)/(1−α).
    pub fn predict(&self) -> Result<ParamVector> {
        let (Some(s1), Some(s2)) = (&self.s1, &self.s2) else {
            return contract("prediction from an uninitialised smoothing state");
        };
        let a = self.alpha;
        Ok(s1.add_scaled(1.0 / (1.0 - a), &s1.sub(s2)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMode {
    /// The current global model.
    Hrm,
    /// Mean of the attackers' honestly trained local models.
    Arm,
    /// Exponential-smoothing forecast of the next global model.
    Prm,
}

pub fn reference_model(mode: ReferenceMode, state: &SmoothingState, global: &ParamVector, local_models: &[ParamVector]) -> Result<ParamVector> {
    match mode {
        ReferenceMode::Hrm => Ok(global.clone()),
        ReferenceMode::Arm => {
            if local_models.is_empty() {
                return contract("ARM reference needs at least one attacker model");
            }
            vecmath::mean(local_models)
        }
        ReferenceMode::Prm => state.predict(),
    }
}

/// Largest distance from an honest attacker update to the reference update.
pub fn certified_radius(honest_updates: &[ParamVector], reference_update: &ParamVector) -> Result<f64> {
    if honest_updates.is_empty() {
        return contract("certified radius over zero updates");
    }
    vecmath::check_dims(honest_updates)?;
    if honest_updates[0].dim() != reference_update.dim() {
        return contract("certified radius: reference dimension mismatch");
    }
    Ok(honest_updates.iter().map(|u| vecmath::dist(u, reference_update)).fold(0.0, f64::max))
}

// ---------------------------------------------------------------------------
// FMPA
// ---------------------------------------------------------------------------

/// Settings shared by both FMPA variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FmpaConfig {
    /// Early-stop once validation accuracy is at or below this.
    pub tau: f64,
    pub lambda: f64,
    pub attacker_epochs: usize,
    pub attacker_lr: f64,
    pub batch_size: usize,
    pub reference: ReferenceMode,
    pub alpha: f64,
    /// Fraction of pooled attacker data held out for validation.
    pub val_fraction: f64,
}

impl Default for FmpaConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 2e-4,
            attacker_epochs: 5,
            attacker_lr: 0.01,
            batch_size: 16,
            reference: ReferenceMode::Prm,
            alpha: 0.7,
            val_fraction: 0.2,
        }
    }
}

impl FmpaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return contract(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(self.lambda >= 0.0) {
            return contract(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return contract(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if self.attacker_epochs == 0 || self.batch_size == 0 || !(self.attacker_lr > 0.0) {
            return contract("attacker epochs, batch size and learning rate must be positive");
        }
        SmoothingState::new(self.alpha).map(|_| ())
    }
}

/// How the fine-grained variant scales `Θ′ − ĝ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoMode {
    /// ρ = N/(η·m) from the known participant count, global rate and attacker count.
    Known,
    Fixed(f64),
    /// Multiplicative controller driven by validation accuracy.
    Search { growth: f64, cap: f64, margin: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreciseConfig {
    /// Desired accuracy drop, as a fraction in [0, 1).
    pub xi: f64,
    pub rho: RhoMode,
}

impl PreciseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi >= 0.0 && self.xi < 1.0) {
            return contract(format!("xi must lie in [0, 1), got {}", self.xi));
        }
        match self.rho {
            RhoMode::Fixed(r) if !(r > 0.0) => contract(format!("rho must be positive, got {r}")),
            RhoMode::Search { growth, cap, margin } if !(growth > 1.0 && cap >= 1.0 && margin >= 0.0) => {
                contract("rho search needs growth > 1, cap >= 1, margin >= 0")
            }
            _ => Ok(()),
        }
    }
}

/// Everything the adversary observes in one round.
#[derive(Clone, Copy, Debug)]
pub struct AttackerView<'a> {
    pub arch: &'a MlpArchitecture,
    pub global: &'a ParamVector,
    pub round: u64,
    /// Updates the compromised clients would send if they were honest.
    pub honest_updates: &'a [ParamVector],
    /// Pooled local data of the compromised clients.
    pub data: &'a Dataset,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaliciousResult {
    /// Crafted model Θ′.
    pub model: ParamVector,
    /// Update every malicious client submits.
    pub update: ParamVector,
    /// Reference update ĝ − g (centre of the projection ball).
    pub reference_update: ParamVector,
    /// Certified radius; `None` for the fine-grained variant.
    pub radius: Option<f64>,
    /// False in round 0, when only the smoothing state is initialised.
    pub attacked: bool,
    pub early_stopped: bool,
    pub steps: usize,
    pub epochs_used: usize,
    pub val_accuracy: f64,
}

/// Deterministic train/validation split of the pooled attacker data.
pub fn split_train_val(data: &Dataset, val_fraction: f64, seed: u64, round: u64) -> Result<(Dataset, Dataset)> {
    if data.len() < 2 {
        return contract(format!("attacker data needs at least 2 samples to split, got {}", data.len()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::stream(seed, Stream::AttackSplit, &[round]));
    let n_val = ((data.len() as f64 * val_fraction).round() as usize).clamp(1, data.len() - 1);
    Ok((data.subset(&order[n_val..]), data.subset(&order[..n_val])))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoisonRun {
    pub model: ParamVector,
    pub early_stopped: bool,
    pub steps: usize,
    pub epochs_used: usize,
    pub val_accuracy: f64,
}

/// Minimise the poisoning objective from `reference` with Adam, checking
/// validation accuracy after every mini-batch step.
pub fn optimize_poison(
    arch: &MlpArchitecture,
    reference: &ParamVector,
    train: &Dataset,
    val: &Dataset,
    cfg: &FmpaConfig,
    lambda: f64,
    seed: u64,
) -> Result<PoisonRun> {
    if train.is_empty() || val.is_empty() {
        return contract("poison optimisation needs non-empty train and validation sets");
    }
    let mut theta = reference.clone();
    let mut opt = OptimizerState::new(theta.dim(), cfg.attacker_lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut buf = BatchBuf::default();
    let tb = train.batch();
    let mut steps = 0;
    let mut val_accuracy = arch.accuracy(&theta, &val.batch())?;
    for epoch in 0..cfg.attacker_epochs {
        order.shuffle(&mut rng::stream(seed, Stream::AttackTrain, &[epoch as u64]));
        for chunk in order.chunks(cfg.batch_size) {
            let mb = buf.gather(&tb, chunk);
            let (_, g) = arch.poison_objective(&theta, reference, &mb, lambda)?;
            opt.step(&mut theta, &g)?;
            steps += 1;
            val_accuracy = arch.accuracy(&theta, &val.batch())?;
            if val_accuracy <= cfg.tau {
                return Ok(PoisonRun { model: theta, early_stopped: true, steps, epochs_used: epoch + 1, val_accuracy });
            }
        }
    }
    Ok(PoisonRun { model: theta, early_stopped: false, steps, epochs_used: cfg.attacker_epochs, val_accuracy })
}

struct Prepared {
    reference_update: ParamVector,
    train: Dataset,
    val: Dataset,
    seed: u64,
}

fn prepare(view: &AttackerView<'_>, reference: &ParamVector, cfg: &FmpaConfig) -> Result<Prepared> {
    cfg.validate()?;
    if view.honest_updates.is_empty() {
        return contract("FMPA needs at least one compromised client");
    }
    if reference.dim() != view.global.dim() {
        return contract("reference model dimension mismatch");
    }
    let (train, val) = split_train_val(view.data, cfg.val_fraction, view.seed, view.round)?;
    let seed = rng::derive(view.seed, Stream::AttackTrain, &[view.round]);
    Ok(Prepared { reference_update: reference.sub(view.global), train, val, seed })
}

/// Reference model the attacker would use this round.
pub fn attacker_reference(view: &AttackerView<'_>, state: &SmoothingState, mode: ReferenceMode) -> Result<ParamVector> {
    let locals: Vec<ParamVector> = view.honest_updates.iter().map(|u| view.global.add(u)).collect();
    reference_model(mode, state, view.global, &locals)
}

fn no_attack(view: &AttackerView<'_>) -> MaliciousResult {
    MaliciousResult {
        model: view.global.clone(),
        update: ParamVector::zeros(view.global.dim()),
        reference_update: ParamVector::zeros(view.global.dim()),
        radius: None,
        attacked: false,
        early_stopped: false,
        steps: 0,
        epochs_used: 0,
        val_accuracy: f64::NAN,
    }
}

/// Whether the poison optimisation early-stops for `lambda` (the κ oracle of
/// the λ search).
pub fn lambda_reaches_target(view: &AttackerView<'_>, reference: &ParamVector, cfg: &FmpaConfig, lambda: f64) -> Result<bool> {
    let p = prepare(view, reference, cfg)?;
    Ok(optimize_poison(view.arch, reference, &p.train, &p.val, cfg, lambda, p.seed)?.early_stopped)
}

/// Indiscriminate variant. In round 0 nothing is crafted (`attacked = false`).
pub fn craft_i_fmpa(view: &AttackerView<'_>, state: &SmoothingState, cfg: &FmpaConfig) -> Result<MaliciousResult> {
    if view.round == 0 {
        return Ok(no_attack(view));
    }
    let reference = attacker_reference(view, state, cfg.reference)?;
    craft_i_fmpa_with_reference(view, &reference, cfg)
}

pub fn craft_i_fmpa_with_reference(view: &AttackerView<'_>, reference: &ParamVector, cfg: &FmpaConfig) -> Result<MaliciousResult> {
    let p = prepare(view, reference, cfg)?;
    let radius = certified_radius(view.honest_updates, &p.reference_update)?;
    let run = optimize_poison(view.arch, reference, &p.train, &p.val, cfg, cfg.lambda, p.seed)?;
    let raw = run.model.sub(view.global);
    let update = project_to_ball(&raw, &p.reference_update, radius)?;
    Ok(MaliciousResult {
        model: run.model,
        update,
        reference_update: p.reference_update,
        radius: Some(radius),
        attacked: true,
        early_stopped: run.early_stopped,
        steps: run.steps,
        epochs_used: run.epochs_used,
        val_accuracy: run.val_accuracy,
    })
}

/// ∇ + ρ(Θ′ − ĝ).
pub fn precise_update(honest_mean: &ParamVector, reference: &ParamVector, crafted: &ParamVector, rho: f64) -> ParamVector {
    honest_mean.add_scaled(rho, &crafted.sub(reference))
}

/// ρ = N/(η·m).
pub fn known_rho(participants: usize, global_lr: f64, attackers: usize) -> Result<f64> {
    if attackers == 0 || !(global_lr > 0.0) {
        return contract("known rho needs m >= 1 and eta > 0");
    }
    Ok(participants as f64 / (global_lr * attackers as f64))
}

/// Fine-grained variant: optimise Θ′ to the target accuracy `cfg.tau`, then
/// scale the deviation from the reference by `rho`. No radius, no projection.
pub fn craft_f_fmpa(view: &AttackerView<'_>, state: &SmoothingState, cfg: &FmpaConfig, rho: f64) -> Result<MaliciousResult> {
    if view.round == 0 {
        return Ok(no_attack(view));
    }
    let reference = attacker_reference(view, state, cfg.reference)?;
    craft_f_fmpa_with_reference(view, &reference, cfg, rho)
}

pub fn craft_f_fmpa_with_reference(view: &AttackerView<'_>, reference: &ParamVector, cfg: &FmpaConfig, rho: f64) -> Result<MaliciousResult> {
    if !(rho > 0.0) {
        return contract(format!("rho must be positive, got {rho}"));
    }
    let p = prepare(view, reference, cfg)?;
    let run = optimize_poison(view.arch, reference, &p.train, &p.val, cfg, cfg.lambda, p.seed)?;
    let honest_mean = vecmath::mean(view.honest_updates)?;
    let update = precise_update(&honest_mean, reference, &run.model, rho);
    Ok(MaliciousResult {
        model: run.model,
        update,
        reference_update: p.reference_update,
        radius: None,
        attacked: true,
        early_stopped: run.early_stopped,
        steps: run.steps,
        epochs_used: run.epochs_used,
        val_accuracy: run.val_accuracy,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaSearch {
    pub lambda: f64,
    pub found: bool,
    pub calls: usize,
}

/// Halving search for the largest λ whose attack still early-stops.
///
/// The loop runs while the last accepted λ and the probe differ by at least
/// `eps` (the printed guard `< ε` would never enter the loop).
pub fn search_lambda<F>(mut kappa: F, lambda_init: f64, eps: f64) -> Result<LambdaSearch>
where
    F: FnMut(f64) -> Result<bool>,
{
    if !(lambda_init > 0.0 && eps > 0.0) {
        return contract(format!("lambda search needs lambda_init > 0 and eps > 0, got {lambda_init}, {eps}"));
    }
    let mut step = lambda_init / 2.0;
    let mut lambda = lambda_init;
    let mut best = 0.0;
    let mut found = false;
    let mut calls = 0;
    // the probe gap halves every step, so this bound is never reached for sane eps
    while (best - lambda).abs() >= eps && calls < 200 {
        calls += 1;
        if kappa(lambda)? {
            best = lambda;
            found = true;
            lambda += step;
        } else {
            lambda -= step;
        }
        step /= 2.0;
    }
    Ok(LambdaSearch { lambda: best, found, calls })
}

/// Multiplicative ρ controller: grow while the observed accuracy is above the
/// target, shrink when it undershoots by more than `margin`, and take the
/// square root of the factor on every direction change so oscillations decay.
#[derive(Clone, Debug, PartialEq)]
pub struct RhoController {
    rho: f64,
    factor: f64,
    cap: f64,
    margin: f64,
    last_dir: i8,
}

impl RhoController {
    pub fn new(growth: f64, cap: f64, margin: f64) -> Result<Self> {
        if !(growth > 1.0 && cap >= 1.0 && margin >= 0.0) {
            return contract("rho controller needs growth > 1, cap >= 1, margin >= 0");
        }
        Ok(Self { rho: 1.0, factor: growth, cap, margin, last_dir: 0 })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn observe(&mut self, accuracy: f64, target: f64) -> f64 {
        let dir: i8 = if accuracy > target {
            1
        } else if accuracy < target - self.margin {
            -1
        } else {
            0
        };
        if dir != 0 {
            if self.last_dir != 0 && dir != self.last_dir {
                self.factor = self.factor.sqrt();
            }
            self.rho = if dir > 0 { self.rho * self.factor } else { self.rho / self.factor };
            self.rho = self.rho.clamp(1.0, self.cap);
            self.last_dir = dir;
        }
        self.rho
    }
}

/// Replay an accuracy history through a fresh [`RhoController`].
pub fn search_rho(history: &[f64], target: f64, growth: f64, cap: f64, margin: f64) -> Result<f64> {
    let mut c = RhoController::new(growth, cap, margin)?;
    for &acc in history {
        c.observe(acc, target);
    }
    Ok(c.rho())
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// z such that Φ(z) = (N − m − s)/(N − m) with s = ⌊N/2 + 1⌋ − m.
pub fn lie_z(n: usize, m: usize) -> Result<f64> {
    if m == 0 || m >= n {
        return contract(format!("LIE z needs 0 < m < N, got N={n}, m={m}"));
    }
    let s = (n / 2 + 1) as f64 - m as f64;
    let p = (n as f64 - m as f64 - s) / (n - m) as f64;
    if !(p > 0.0 && p < 1.0) {
        return contract(format!("LIE quantile {p} outside (0, 1) for N={n}, m={m}"));
    }
    Ok(Normal::standard().inverse_cdf(p))
}

/// μ + zσ, coordinate-wise.
pub fn lie_attack(mean: &ParamVector, std: &ParamVector, z: f64) -> Result<ParamVector> {
    if mean.dim() != std.dim() {
        return contract("LIE mean/std dimension mismatch");
    }
    Ok(mean.add_scaled(z, std))
}

pub fn lie_from_updates(updates: &[ParamVector], z: f64) -> Result<ParamVector> {
    let (mu, sigma) = coordwise_stats(updates)?;
    lie_attack(&mu, &sigma, z)
}

/// −ε · benign mean.
pub fn ipm_attack(benign_mean: &ParamVector, epsilon: f64) -> Result<ParamVector> {
    if !(epsilon > 0.0) {
        return contract(format!("IPM epsilon must be positive, got {epsilon}"));
    }
    Ok(benign_mean.scale(-epsilon))
}

/// λ_s (Θ_b − g).
pub fn mpaf_attack(global: &ParamVector, base_model: &ParamVector, scale: f64) -> Result<ParamVector> {
    if !(scale > 0.0) {
        return contract(format!("MPAF scale must be positive, got {scale}"));
    }
    if global.dim() != base_model.dim() {
        return contract("MPAF base model dimension mismatch");
    }
    Ok(base_model.sub(global).scale(scale))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// −∇̄/‖∇̄‖
    Unit,
    /// −σ
    Std,
    /// −sign(∇̄)
    Sign,
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn perturbation_direction(updates: &[ParamVector], dir: Direction) -> Result<ParamVector> {
    let (mu, sigma) = coordwise_stats(updates)?;
    Ok(match dir {
        Direction::Unit => {
            let n = mu.norm();
            if n == 0.0 {
                ParamVector::zeros(mu.dim())
            } else {
                mu.scale(-1.0 / n)
            }
        }
        Direction::Std => sigma.scale(-1.0),
        Direction::Sign => ParamVector::from_vec(mu.iter().map(|&x| -signum0(x)).collect()),
    })
}

/// Successive-halving search for the largest accepted γ. Returns `None` when
/// nothing was accepted.
fn halving_search<F: FnMut(f64) -> bool>(gamma_init: f64, tol: f64, mut accept: F) -> Option<f64> {
    let mut gamma = gamma_init;
    let mut step = gamma_init / 2.0;
    let mut best = None;
    for _ in 0..50 {
        if accept(gamma) {
            best = Some(gamma);
            gamma += step;
        } else {
            gamma -= step;
        }
        step /= 2.0;
        if step < tol {
            break;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct GammaAttack {
    pub update: ParamVector,
    /// Accepted scale; 0 when the search fell back to the benign mean.
    pub gamma: f64,
}

fn gamma_attack<F>(updates: &[ParamVector], dir: Direction, gamma_init: f64, tol: f64, constraint: F) -> Result<GammaAttack>
where
    F: Fn(&ParamVector) -> bool,
{
    if updates.len() < 2 {
        return contract(format!("Min-Max/Min-Sum need at least 2 benign updates, got {}", updates.len()));
    }
    if !(gamma_init > 0.0 && tol > 0.0) {
        return contract("gamma_init and tolerance must be positive");
    }
    let mu = vecmath::mean(updates)?;
    let delta = perturbation_direction(updates, dir)?;
    let gamma = halving_search(gamma_init, tol, |g| constraint(&mu.add_scaled(g, &delta))).unwrap_or(0.0);
    Ok(GammaAttack { update: mu.add_scaled(gamma, &delta), gamma })
}

/// Largest pairwise squared distance among benign updates.
fn max_pairwise(updates: &[ParamVector]) -> f64 {
    let mut best = 0.0f64;
    for i in 0..updates.len() {
        for j in (i + 1)..updates.len() {
            best = best.max(sq_dist(&updates[i], &updates[j]));
        }
    }
    best
}

/// Min-Max: keep the maximum distance to any benign update within the benign diameter.
pub fn min_max_attack(updates: &[ParamVector], dir: Direction, gamma_init: f64, tol: f64) -> Result<GammaAttack> {
    vecmath::check_dims(updates)?;
    let bound = max_pairwise(updates);
    gamma_attack(updates, dir, gamma_init, tol, |cand| updates.iter().map(|u| sq_dist(cand, u)).fold(0.0, f64::max) <= bound)
}

/// Min-Sum: keep the sum of squared distances within the worst benign sum.
pub fn min_sum_attack(updates: &[ParamVector], dir: Direction, gamma_init: f64, tol: f64) -> Result<GammaAttack> {
    vecmath::check_dims(updates)?;
    let bound = updates.iter().map(|u| updates.iter().map(|v| sq_dist(u, v)).sum::<f64>()).fold(0.0, f64::max);
    gamma_attack(updates, dir, gamma_init, tol, |cand| updates.iter().map(|u| sq_dist(cand, u)).sum::<f64>() <= bound)
}

/// True when `cand` satisfies the Min-Max constraint for `updates`.
pub fn satisfies_min_max(updates: &[ParamVector], cand: &ParamVector) -> bool {
    updates.iter().map(|u| sq_dist(cand, u)).fold(0.0, f64::max) <= max_pairwise(updates)
}

pub fn satisfies_min_sum(updates: &[ParamVector], cand: &ParamVector) -> bool {
    let bound = updates.iter().map(|u| updates.iter().map(|v| sq_dist(u, v)).sum::<f64>()).fold(0.0, f64::max);
    updates.iter().map(|u| sq_dist(cand, u)).sum::<f64>() <= bound
}

/// AGR-tailored attack against a known aggregation oracle.
///
/// Searches γ for `∇̄ + γΔ` with Δ = −g/‖g‖ (or −sign(∇̄) when g = 0). A γ is
/// accepted when at least one of the `copies` malicious updates is kept by the
/// oracle and the aggregate's projection on Δ still grows relative to γ/2.
pub fn agr_tailored_attack<F>(
    benign: &[ParamVector],
    global: &ParamVector,
    oracle: F,
    copies: usize,
    gamma_init: f64,
    tol: f64,
) -> Result<GammaAttack>
where
    F: Fn(&[ParamVector]) -> Result<AggregationOutcome>,
{
    let d = vecmath::check_dims(benign)?;
    if global.dim() != d {
        return contract("AGRT global model dimension mismatch");
    }
    if copies == 0 || !(gamma_init > 0.0 && tol > 0.0) {
        return contract("AGRT needs copies >= 1 and positive gamma_init / tolerance");
    }
    let mu = vecmath::mean(benign)?;
    let gn = global.norm();
    let delta = if gn > 0.0 { global.scale(-1.0 / gn) } else { ParamVector::from_vec(mu.iter().map(|&x| -signum0(x)).collect()) };
    let nb = benign.len();
    let probe = |g: f64| -> Option<(f64, bool)> {
        let cand = mu.add_scaled(g, &delta);
        let mut all = benign.to_vec();
        all.extend(std::iter::repeat_n(cand, copies));
        let out = oracle(&all).ok()?;
        Some((out.update.dot(&delta), out.kept.iter().any(|&i| i >= nb)))
    };
    let gamma = halving_search(gamma_init, tol, |g| match (probe(g), probe(g / 2.0)) {
        (Some((p, kept)), Some((p_half, _))) => kept && p > p_half + 1e-12 * p_half.abs().max(1e-300),
        _ => false,
    })
    .unwrap_or(0.0);
    Ok(GammaAttack { update: mu.add_scaled(gamma, &delta), gamma })
}

// ---------------------------------------------------------------------------
// Attack plan
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    IFmpa,
    FFmpa,
    Lie,
    Ipm,
    Mpaf,
    MinMax,
    MinSum,
    Agrt,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::IFmpa => "i_fmpa",
            Self::FFmpa => "f_fmpa",
            Self::Lie => "lie",
            Self::Ipm => "ipm",
            Self::Mpaf => "mpaf",
            Self::MinMax => "min_max",
            Self::MinSum => "min_sum",
            Self::Agrt => "agrt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSearchConfig {
    pub init: f64,
    pub eps: f64,
    /// Re-run the search every attacked round instead of once at the first attack.
    pub every_round: bool,
}

/// Which attack runs and with what hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackPlan {
    pub kind: AttackKind,
    /// τ for the indiscriminate variant; `None` means 1/L.
    pub tau: Option<f64>,
    pub fmpa: FmpaConfig,
    pub lambda_search: Option<LambdaSearchConfig>,
    pub precise: PreciseConfig,
    /// LIE coefficient; `None` derives it from N and m.
    pub lie_z: Option<f64>,
    /// LIE sees every participant's update instead of only the attackers'.
    pub omniscient: bool,
    pub ipm_epsilon: f64,
    /// MPAF scale; `None` picks 1e6 for median/trmean and 10 otherwise.
    pub mpaf_scale: Option<f64>,
    pub direction: Direction,
    pub gamma_init: f64,
    pub gamma_tol: f64,
}

impl Default for AttackPlan {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            tau: None,
            fmpa: FmpaConfig::default(),
            lambda_search: Some(LambdaSearchConfig { init: 1.0, eps: 1e-3, every_round: false }),
            precise: PreciseConfig { xi: 0.1, rho: RhoMode::Known },
            lie_z: None,
            omniscient: false,
            ipm_epsilon: 0.5,
            mpaf_scale: None,
            direction: Direction::Std,
            gamma_init: 10.0,
            gamma_tol: 1e-5,
        }
    }
}

impl AttackPlan {
    pub fn of(kind: AttackKind) -> Self {
        Self { kind, ..Self::default() }
    }
}
