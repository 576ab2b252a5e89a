//! Flat-vector numerics shared by the model, the aggregation rules and the attacks.

use std::ops::Deref;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::rng::{self, Stream};

/// A flat, finite parameter (or update) vector.
///
/// Every model, local update, malicious update and aggregate in the simulator
/// is one of these; the dimension is fixed for the lifetime of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    /// Wrap raw values, rejecting NaN and infinities.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return contract(format!("non-finite entry {} at index {i}", data[i]));
        }
        Ok(Self(data))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Unit basis vector e_index.
    pub fn basis(dim: usize, index: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[index] = 1.0;
        Self(v)
    }

    /// Internal constructor for values already known to be finite.
    pub(crate) fn from_vec(data: Vec<f64>) -> Self {
        debug_assert!(data.iter().all(|x| x.is_finite()), "non-finite ParamVector");
        Self(data)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        l2_norm(self)
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn add(&self, other: &ParamVector) -> ParamVector {
        Self::from_vec(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        Self::from_vec(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, alpha: f64) -> ParamVector {
        Self::from_vec(self.0.iter().map(|a| alpha * a).collect())
    }

    /// self + alpha * other
    pub fn add_scaled(&self, alpha: f64, other: &ParamVector) -> ParamVector {
        Self::from_vec(self.0.iter().zip(&other.0).map(|(a, b)| a + alpha * b).collect())
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = crate::Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn check_dims(vs: &[ParamVector]) -> Result<usize> {
    let Some(first) = vs.first() else {
        return contract("empty list of vectors");
    };
    let d = first.dim();
    if let Some(i) = vs.iter().position(|v| v.dim() != d) {
        return contract(format!("dimension mismatch: vector {i} has dim {} but expected {d}", vs[i].dim()));
    }
    Ok(d)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    // Scaled accumulation avoids overflow for huge entries (MPAF uses 1e6 scales).
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return 0.0;
    }
    let s: f64 = v.iter().map(|x| (x / max) * (x / max)).sum();
    max * s.sqrt()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Project `v` onto the closed ball of `radius` around `center`.
pub fn project_to_ball(v: &ParamVector, center: &ParamVector, radius: f64) -> Result<ParamVector> {
    if v.dim() != center.dim() {
        return contract(format!("project_to_ball: dims {} vs {}", v.dim(), center.dim()));
    }
    if !(radius >= 0.0) {
        return contract(format!("project_to_ball: negative radius {radius}"));
    }
    let diff = v.sub(center);
    let n = diff.norm();
    if n <= radius {
        return Ok(v.clone());
    }
    Ok(center.add_scaled(radius / n, &diff))
}

/// Per-coordinate mean and population standard deviation.
pub fn coordwise_stats(vs: &[ParamVector]) -> Result<(ParamVector, ParamVector)> {
    let d = check_dims(vs)?;
    let n = vs.len() as f64;
    let mut mean = vec![0.0; d];
    for v in vs {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for v in vs {
        for ((s, x), m) in var.iter_mut().zip(v.iter()).zip(&mean) {
            *s += (x - m) * (x - m);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
    Ok((ParamVector::from_vec(mean), ParamVector::from_vec(std)))
}

/// Unweighted mean of equal-dimension vectors.
pub fn mean(vs: &[ParamVector]) -> Result<ParamVector> {
    let d = check_dims(vs)?;
    let mut acc = vec![0.0; d];
    for v in vs {
        for (a, x) in acc.iter_mut().zip(v.iter()) {
            *a += x;
        }
    }
    let n = vs.len() as f64;
    Ok(ParamVector::from_vec(acc.into_iter().map(|a| a / n).collect()))
}

/// Symmetric matrix of squared Euclidean distances, as row-major `Vec<Vec<f64>>`.
pub fn pairwise_sq_dists(vs: &[ParamVector]) -> Result<Vec<Vec<f64>>> {
    if vs.len() < 2 {
        return contract(format!("pairwise_sq_dists needs at least 2 vectors, got {}", vs.len()));
    }
    check_dims(vs)?;
    let n = vs.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(&vs[i], &vs[j]);
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    Ok(out)
}

/// Cosine similarity, defined as 0 when either vector is zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Result of [`top_right_singular_vector`].
#[derive(Clone, Debug, PartialEq)]
pub struct SingularVector {
    pub vector: ParamVector,
    /// Set when the matrix is (numerically) zero and `vector` is the fallback e₁.
    pub degenerate: bool,
}

/// Power iteration on AᵀA for the dominant right singular vector of the row matrix.
pub fn top_right_singular_vector(rows: &[ParamVector], iters: usize, seed: u64) -> Result<SingularVector> {
    if rows.len() < 2 {
        return contract(format!("top_right_singular_vector needs at least 2 rows, got {}", rows.len()));
    }
    if iters == 0 {
        return contract("top_right_singular_vector needs iters >= 1");
    }
    let d = check_dims(rows)?;
    if d == 0 {
        return contract("top_right_singular_vector on zero-dimensional rows");
    }
    let degenerate = || SingularVector { vector: ParamVector::basis(d, 0), degenerate: true };
    if rows.iter().all(|r| r.iter().all(|&x| x == 0.0)) {
        return Ok(degenerate());
    }

    let mut rng = rng::stream(seed, Stream::Power, &[]);
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n0 = l2_norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);

    let mut w = vec![0.0; d];
    for _ in 0..iters {
        // w = Aᵀ (A v)
        w.iter_mut().for_each(|x| *x = 0.0);
        for r in rows {
            let proj = dot(r, &v);
            for (wi, ri) in w.iter_mut().zip(r.iter()) {
                *wi += proj * ri;
            }
        }
        let nw = l2_norm(&w);
        if nw == 0.0 {
            // Start vector landed in the null space; restart from the first nonzero row.
            let r = rows.iter().find(|r| r.iter().any(|&x| x != 0.0)).expect("nonzero row");
            let nr = l2_norm(r);
            v = r.iter().map(|x| x / nr).collect();
            continue;
        }
        let converged = w.iter().zip(&v).map(|(a, b)| (a / nw - b).abs()).fold(0.0, f64::max) < 1e-15;
        v.iter_mut().zip(&w).for_each(|(vi, wi)| *vi = wi / nw);
        if converged {
            break;
        }
    }
    Ok(SingularVector { vector: ParamVector::from_vec(v), degenerate: false })
}
