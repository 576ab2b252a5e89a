//! Server-side aggregation rules. Each rule is a pure function from the round's
//! client updates to one global update; all ties go to the lowest client index.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Result};
use crate::rng::{self, Stream};
use crate::vecmath::{self, check_dims, cosine_similarity, pairwise_sq_dists, ParamVector};

/// Output of one aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationOutcome {
    pub update: ParamVector,
    /// Indices (into the input list) that contributed, ascending.
    pub kept: Vec<usize>,
    /// Rule-specific per-client diagnostics (Krum score, cosine similarity, ...).
    pub scores: BTreeMap<usize, f64>,
}

impl AggregationOutcome {
    fn keep_all(update: ParamVector, n: usize) -> Self {
        Self { update, kept: (0..n).collect(), scores: BTreeMap::new() }
    }
}

/// Round-dependent inputs some rules need.
#[derive(Clone, Copy, Debug, Default)]
pub struct AggregationContext<'a> {
    /// Previous round's global update (AFA similarity reference); `None` in round 0.
    pub prev_global_update: Option<&'a ParamVector>,
    pub seed: u64,
    pub round: u64,
}

/// A fully parameterized aggregation rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum AggregatorSpec {
    Fedavg,
    Krum { m: usize },
    /// `selection` defaults to N − m.
    Mkrum { m: usize, selection: Option<usize> },
    Median,
    Trmean { beta: usize },
    NormBounding,
    /// `selection` (γ_b) defaults to N − 2m.
    Bulyan { m: usize, selection: Option<usize> },
    Faba { m: usize },
    Afa { threshold: f64, max_passes: usize },
    Cc { iterations: usize, radius: f64 },
    /// `subsample_dim` defaults to ⌊d/2⌋.
    Dnc { m: usize, subsample_dim: Option<usize>, filter_coef: f64, power_iters: usize },
}

impl AggregatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Fedavg => "fedavg",
            Self::Krum { .. } => "krum",
            Self::Mkrum { .. } => "mkrum",
            Self::Median => "median",
            Self::Trmean { .. } => "trmean",
            Self::NormBounding => "norm_bounding",
            Self::Bulyan { .. } => "bulyan",
            Self::Faba { .. } => "faba",
            Self::Afa { .. } => "afa",
            Self::Cc { .. } => "cc",
            Self::Dnc { .. } => "dnc",
        }
    }

    /// Check feasibility for `n` participating clients.
    pub fn validate(&self, n: usize) -> Result<()> {
        match *self {
            Self::Krum { m } if n < m + 3 => config(format!("krum needs N >= m+3, got N={n}, m={m}")),
            Self::Mkrum { m, selection } => {
                if n < m + 3 {
                    return config(format!("mkrum needs N >= m+3, got N={n}, m={m}"));
                }
                let s = selection.unwrap_or(n - m);
                if s == 0 || s > n {
                    return config(format!("mkrum selection size {s} outside [1, {n}]"));
                }
                Ok(())
            }
            Self::Trmean { beta } if n <= 2 * beta => config(format!("trmean needs N > 2β, got N={n}, β={beta}")),
            Self::Bulyan { m, selection } => {
                if n < 4 * m + 3 {
                    return config(format!("bulyan needs N >= 4m+3, got N={n}, m={m}"));
                }
                let s = selection.unwrap_or(n - 2 * m);
                if s <= 2 * m || s > n - 2 * m {
                    return config(format!("bulyan selection size {s} must lie in ({}, {}]", 2 * m, n - 2 * m));
                }
                Ok(())
            }
            Self::Faba { m } if n <= m => config(format!("faba needs N > m, got N={n}, m={m}")),
            Self::Afa { threshold, max_passes } if !(threshold >= 0.0) || max_passes == 0 => {
                config(format!("afa needs threshold >= 0 and max_passes >= 1, got {threshold}, {max_passes}"))
            }
            Self::Cc { iterations, radius } if iterations == 0 || !(radius > 0.0) => {
                config(format!("cc needs iterations >= 1 and radius > 0, got {iterations}, {radius}"))
            }
            Self::Dnc { m, filter_coef, power_iters, .. } => {
                if !(filter_coef >= 0.0) || power_iters == 0 {
                    return config("dnc needs filter_coef >= 0 and power_iters >= 1");
                }
                if n <= (filter_coef * m as f64).ceil() as usize {
                    return config(format!("dnc needs N > ⌈c·m⌉, got N={n}, c={filter_coef}, m={m}"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn aggregate(&self, updates: &[ParamVector], ctx: &AggregationContext<'_>) -> Result<AggregationOutcome> {
        check_dims(updates)?;
        self.validate(updates.len())?;
        match *self {
            Self::Fedavg => fedavg(updates, None),
            Self::Krum { m } => krum(updates, m),
            Self::Mkrum { m, selection } => mkrum(updates, m, selection.unwrap_or(updates.len() - m)),
            Self::Median => coordinate_median(updates),
            Self::Trmean { beta } => trimmed_mean(updates, beta),
            Self::NormBounding => norm_bounding(updates),
            Self::Bulyan { m, selection } => bulyan(updates, m, selection),
            Self::Faba { m } => faba(updates, m),
            Self::Afa { threshold, max_passes } => {
                let zero;
                let prev = match ctx.prev_global_update {
                    Some(p) => p,
                    None => {
                        zero = ParamVector::zeros(updates[0].dim());
                        &zero
                    }
                };
                afa(updates, prev, threshold, max_passes)
            }
            Self::Cc { iterations, radius } => centered_clip(updates, iterations, radius, &ParamVector::zeros(updates[0].dim())),
            Self::Dnc { m, subsample_dim, filter_coef, power_iters } => {
                let d = updates[0].dim();
                let mu = subsample_dim.unwrap_or((d / 2).max(1));
                let seed = rng::derive(ctx.seed, Stream::Dnc, &[ctx.round]);
                dnc(updates, &DncParams { m, subsample_dim: mu, filter_coef, power_iters, seed })
            }
        }
    }
}

/// Weighted (default uniform) mean; keeps every index.
pub fn fedavg(updates: &[ParamVector], weights: Option<&[f64]>) -> Result<AggregationOutcome> {
    let d = check_dims(updates)?;
    let update = match weights {
        None => vecmath::mean(updates)?,
        Some(w) => {
            if w.len() != updates.len() || w.iter().any(|x| !(*x >= 0.0)) {
                return contract("fedavg weights must be nonnegative, one per update");
            }
            let total: f64 = w.iter().sum();
            if total <= 0.0 {
                return contract("fedavg weights sum to zero");
            }
            let mut acc = vec![0.0; d];
            for (u, &wi) in updates.iter().zip(w) {
                for (a, x) in acc.iter_mut().zip(u.iter()) {
                    *a += wi / total * x;
                }
            }
            ParamVector::from_vec(acc)
        }
    };
    Ok(AggregationOutcome::keep_all(update, updates.len()))
}

/// Krum scores over a subset of indices: sum of the `k` smallest squared
/// distances to the other members.
fn krum_scores(dists: &[Vec<f64>], members: &[usize], k: usize) -> Vec<f64> {
    members
        .iter()
        .map(|&i| {
            let mut ds: Vec<f64> = members.iter().filter(|&&j| j != i).map(|&j| dists[i][j]).collect();
            ds.sort_by(f64::total_cmp);
            ds.iter().take(k).sum()
        })
        .collect()
}

fn argmin_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

/// Neighbour count for a Krum pass over `n` remaining updates: n − m − 2,
/// clamped to [1, n − 1] once iterative selection shrinks the pool.
fn krum_neighbours(n: usize, m: usize) -> usize {
    n.saturating_sub(m + 2).clamp(1, n.saturating_sub(1).max(1))
}

pub fn krum(updates: &[ParamVector], m: usize) -> Result<AggregationOutcome> {
    let n = updates.len();
    if n < m + 3 {
        return config(format!("krum needs N >= m+3, got N={n}, m={m}"));
    }
    let dists = pairwise_sq_dists(updates)?;
    let members: Vec<usize> = (0..n).collect();
    let scores = krum_scores(&dists, &members, n - m - 2);
    let w = argmin_first(&scores);
    Ok(AggregationOutcome { update: updates[w].clone(), kept: vec![w], scores: scores.into_iter().enumerate().collect() })
}

/// Repeated Krum selection without replacement; returns the selected indices in pick order.
fn iterative_krum(updates: &[ParamVector], m: usize, size: usize) -> Result<(Vec<usize>, BTreeMap<usize, f64>)> {
    let n = updates.len();
    if n < m + 3 {
        return config(format!("krum selection needs N >= m+3, got N={n}, m={m}"));
    }
    if size == 0 || size > n {
        return config(format!("selection size {size} outside [1, {n}]"));
    }
    let dists = pairwise_sq_dists(updates)?;
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut picked = Vec::with_capacity(size);
    let mut first_scores = BTreeMap::new();
    while picked.len() < size {
        let w = if remaining.len() == 1 {
            0
        } else {
            let scores = krum_scores(&dists, &remaining, krum_neighbours(remaining.len(), m));
            if picked.is_empty() {
                first_scores = remaining.iter().cloned().zip(scores.iter().cloned()).collect();
            }
            argmin_first(&scores)
        };
        picked.push(remaining.remove(w));
    }
    Ok((picked, first_scores))
}

pub fn mkrum(updates: &[ParamVector], m: usize, selection: usize) -> Result<AggregationOutcome> {
    let (mut picked, scores) = iterative_krum(updates, m, selection)?;
    let chosen: Vec<ParamVector> = picked.iter().map(|&i| updates[i].clone()).collect();
    let update = vecmath::mean(&chosen)?;
    picked.sort_unstable();
    Ok(AggregationOutcome { update, kept: picked, scores })
}

fn column_sorted(updates: &[ParamVector], j: usize, col: &mut Vec<f64>) {
    col.clear();
    col.extend(updates.iter().map(|u| u[j]));
    col.sort_by(f64::total_cmp);
}

/// Per-coordinate median; even counts average the two middle values.
pub fn coordinate_median(updates: &[ParamVector]) -> Result<AggregationOutcome> {
    let d = check_dims(updates)?;
    let n = updates.len();
    let mut col = Vec::with_capacity(n);
    let out = (0..d)
        .map(|j| {
            column_sorted(updates, j, &mut col);
            if n % 2 == 1 {
                col[n / 2]
            } else {
                0.5 * (col[n / 2 - 1] + col[n / 2])
            }
        })
        .collect();
    Ok(AggregationOutcome::keep_all(ParamVector::from_vec(out), n))
}

/// Per-coordinate mean after dropping the β largest and β smallest values.
pub fn trimmed_mean(updates: &[ParamVector], beta: usize) -> Result<AggregationOutcome> {
    let d = check_dims(updates)?;
    let n = updates.len();
    if n <= 2 * beta {
        return config(format!("trmean needs N > 2β, got N={n}, β={beta}"));
    }
    let mut col = Vec::with_capacity(n);
    let keep = (n - 2 * beta) as f64;
    let out = (0..d)
        .map(|j| {
            column_sorted(updates, j, &mut col);
            col[beta..n - beta].iter().sum::<f64>() / keep
        })
        .collect();
    Ok(AggregationOutcome::keep_all(ParamVector::from_vec(out), n))
}

/// Clip every update to the round's mean norm M, then average.
pub fn norm_bounding(updates: &[ParamVector]) -> Result<AggregationOutcome> {
    check_dims(updates)?;
    let norms: Vec<f64> = updates.iter().map(|u| u.norm()).collect();
    let bound = norms.iter().sum::<f64>() / norms.len() as f64;
    let clipped: Vec<ParamVector> = updates
        .iter()
        .zip(&norms)
        .map(|(u, &nu)| if nu > bound { u.scale(bound / nu) } else { u.clone() })
        .collect();
    let mut out = fedavg(&clipped, None)?;
    out.scores = norms.into_iter().enumerate().collect();
    Ok(out)
}

/// Iterative Krum selection of γ_b updates followed by a β = m trimmed mean.
pub fn bulyan(updates: &[ParamVector], m: usize, selection: Option<usize>) -> Result<AggregationOutcome> {
    let n = updates.len();
    if n < 4 * m + 3 {
        return config(format!("bulyan needs N >= 4m+3, got N={n}, m={m}"));
    }
    let size = selection.unwrap_or(n - 2 * m);
    if size <= 2 * m || size > n - 2 * m {
        return config(format!("bulyan selection size {size} must lie in ({}, {}]", 2 * m, n - 2 * m));
    }
    let (mut picked, scores) = iterative_krum(updates, m, size)?;
    picked.sort_unstable();
    let chosen: Vec<ParamVector> = picked.iter().map(|&i| updates[i].clone()).collect();
    let trimmed = trimmed_mean(&chosen, m)?;
    Ok(AggregationOutcome { update: trimmed.update, kept: picked, scores })
}

/// Remove, m times, the update farthest from the mean of the survivors.
pub fn faba(updates: &[ParamVector], m: usize) -> Result<AggregationOutcome> {
    check_dims(updates)?;
    let n = updates.len();
    if n <= m {
        return config(format!("faba needs N > m, got N={n}, m={m}"));
    }
    let mut alive: Vec<usize> = (0..n).collect();
    let mut scores = BTreeMap::new();
    for step in 0..m {
        let cur: Vec<ParamVector> = alive.iter().map(|&i| updates[i].clone()).collect();
        let mu = vecmath::mean(&cur)?;
        let dists: Vec<f64> = cur.iter().map(|u| vecmath::dist(u, &mu)).collect();
        let mut worst = 0;
        for (k, &dk) in dists.iter().enumerate().skip(1) {
            if dk > dists[worst] {
                worst = k;
            }
        }
        let removed = alive.remove(worst);
        scores.insert(removed, step as f64);
    }
    let cur: Vec<ParamVector> = alive.iter().map(|&i| updates[i].clone()).collect();
    Ok(AggregationOutcome { update: vecmath::mean(&cur)?, kept: alive, scores })
}

fn median_of(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Adaptive federated averaging: iteratively drop updates whose cosine
/// similarity to the previous global update is an outlier on the side the
/// mean/median ordering points to.
pub fn afa(updates: &[ParamVector], prev_global_update: &ParamVector, threshold: f64, max_passes: usize) -> Result<AggregationOutcome> {
    let d = check_dims(updates)?;
    if prev_global_update.dim() != d {
        return contract(format!("afa reference dim {} != update dim {d}", prev_global_update.dim()));
    }
    let cs: Vec<f64> = updates.iter().map(|u| cosine_similarity(u, prev_global_update)).collect();
    let mut alive: Vec<usize> = (0..updates.len()).collect();
    for _ in 0..max_passes {
        let vals: Vec<f64> = alive.iter().map(|&i| cs[i]).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        let med = median_of(&mut vals.clone());
        let bad: Vec<usize> = if mean < med {
            alive.iter().cloned().filter(|&i| cs[i] < med - threshold * std).collect()
        } else {
            alive.iter().cloned().filter(|&i| cs[i] > med + threshold * std).collect()
        };
        if bad.is_empty() || bad.len() >= alive.len() {
            break;
        }
        alive.retain(|i| !bad.contains(i));
    }
    let cur: Vec<ParamVector> = alive.iter().map(|&i| updates[i].clone()).collect();
    Ok(AggregationOutcome { update: vecmath::mean(&cur)?, kept: alive, scores: cs.into_iter().enumerate().collect() })
}

/// Centered clipping: `iterations` steps of v ← v + mean_i clip_r(∇_i − v).
pub fn centered_clip(updates: &[ParamVector], iterations: usize, radius: f64, v0: &ParamVector) -> Result<AggregationOutcome> {
    let d = check_dims(updates)?;
    if iterations == 0 || !(radius > 0.0) {
        return config(format!("cc needs iterations >= 1 and radius > 0, got {iterations}, {radius}"));
    }
    if v0.dim() != d {
        return contract("cc start vector dimension mismatch");
    }
    let n = updates.len() as f64;
    let mut v = v0.clone();
    for _ in 0..iterations {
        let mut step = vec![0.0; d];
        for u in updates {
            let diff = u.sub(&v);
            let dn = diff.norm();
            let s = if dn > radius { radius / dn } else { 1.0 };
            for (a, x) in step.iter_mut().zip(diff.iter()) {
                *a += s * x / n;
            }
        }
        v = v.add(&ParamVector::from_vec(step));
    }
    Ok(AggregationOutcome::keep_all(v, updates.len()))
}

#[derive(Clone, Copy, Debug)]
pub struct DncParams {
    pub m: usize,
    pub subsample_dim: usize,
    pub filter_coef: f64,
    pub power_iters: usize,
    pub seed: u64,
}

/// Divide-and-conquer: score updates by their squared projection on the top
/// singular direction of a random coordinate subsample, drop the ⌈c·m⌉ highest.
pub fn dnc(updates: &[ParamVector], p: &DncParams) -> Result<AggregationOutcome> {
    let d = check_dims(updates)?;
    let n = updates.len();
    let remove = (p.filter_coef * p.m as f64).ceil() as usize;
    if n <= remove {
        return config(format!("dnc needs N > ⌈c·m⌉, got N={n}, c={}, m={}", p.filter_coef, p.m));
    }
    if p.subsample_dim == 0 || p.subsample_dim > d {
        return config(format!("dnc subsample dim {} outside [1, {d}]", p.subsample_dim));
    }
    if remove == 0 {
        return fedavg(updates, None);
    }
    let mut rng = rng::stream(p.seed, Stream::Dnc, &[]);
    let mut coords = sample(&mut rng, d, p.subsample_dim).into_vec();
    coords.sort_unstable();
    let rows: Vec<ParamVector> = updates.iter().map(|u| ParamVector::from_vec(coords.iter().map(|&j| u[j]).collect())).collect();
    let mu = vecmath::mean(&rows)?;
    let centered: Vec<ParamVector> = rows.iter().map(|r| r.sub(&mu)).collect();
    let scores: Vec<f64> = if n >= 2 {
        let v = vecmath::top_right_singular_vector(&centered, p.power_iters, p.seed)?.vector;
        centered.iter().map(|r| r.dot(&v).powi(2)).collect()
    } else {
        vec![0.0; n]
    };
    let mut order: Vec<usize> = (0..n).collect();
    // highest score first, lowest index first among equals
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[remove..].to_vec();
    kept.sort_unstable();
    let cur: Vec<ParamVector> = kept.iter().map(|&i| updates[i].clone()).collect();
    Ok(AggregationOutcome { update: vecmath::mean(&cur)?, kept, scores: scores.into_iter().enumerate().collect() })
}
