//! Fuzzy c-means clustering.
//!
//! Alternating optimization of `J = Σ_k Σ_i u_ik^m ‖x_k − c_i‖²` with the
//! usual membership and center updates. Centers are seeded by distance-weighted
//! sampling of data points and the best of several restarts is kept. The
//! emitted partition lists centers in lexicographic order so cluster indices
//! are stable across runs and platforms.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureMatrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FcmError {
    #[error("{clusters} clusters requested for {rows} rows")]
    TooFewRows { clusters: usize, rows: usize },
    #[error("data matrix contains non-finite values")]
    NonFinite,
    #[error("invalid clustering configuration: {0}")]
    InvalidConfig(String),
}

fn default_fuzzifier() -> f64 {
    2.0
}
fn default_tolerance() -> f64 {
    1e-6
}
fn default_max_iter() -> usize {
    300
}
fn default_restarts() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcmConfig {
    pub clusters: usize,
    #[serde(default = "default_fuzzifier")]
    pub fuzzifier: f64,
    /// Stop once the largest membership change falls below this value.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    pub seed: u64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

impl FcmConfig {
    pub fn new(clusters: usize, seed: u64) -> Self {
        Self {
            clusters,
            fuzzifier: default_fuzzifier(),
            tolerance: default_tolerance(),
            max_iter: default_max_iter(),
            seed,
            restarts: default_restarts(),
        }
    }

    pub fn validate(&self) -> Result<(), FcmError> {
        let bad = |msg: String| Err(FcmError::InvalidConfig(msg));
        if self.clusters == 0 {
            return bad("cluster count must be at least 1".into());
        }
        if !(self.fuzzifier.is_finite() && self.fuzzifier > 1.0) {
            return bad(format!("fuzzifier must be > 1, got {}", self.fuzzifier));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return bad(format!("tolerance must be > 0, got {}", self.tolerance));
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive".into());
        }
        if self.restarts == 0 {
            return bad("restarts must be positive".into());
        }
        Ok(())
    }
}

/// Result of a fuzzy c-means fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzyPartition {
    /// `n × c` memberships; every row sums to one.
    pub memberships: Array2<f64>,
    /// `c × d` cluster centers in lexicographic order.
    pub centers: Array2<f64>,
    /// Objective value after every accepted iteration.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl FuzzyPartition {
    pub fn clusters(&self) -> usize {
        self.centers.nrows()
    }

    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Anything able to split a data matrix into (possibly fuzzy) clusters.
///
/// The pipeline talks to clustering only through this contract.
pub trait Partitioner {
    fn fit(&self, data: ArrayView2<'_, f64>) -> Result<FuzzyPartition, FcmError>;
}

impl Partitioner for FcmConfig {
    fn fit(&self, data: ArrayView2<'_, f64>) -> Result<FuzzyPartition, FcmError> {
        fcm_fit(data, self)
    }
}

pub fn fit_matrix(x: &FeatureMatrix, cfg: &FcmConfig) -> Result<FuzzyPartition, FcmError> {
    fcm_fit(x.values.view(), cfg)
}

/// SplitMix64 finalizer, used to derive independent restart seeds.
fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Draws an index with probability proportional to `weights`.
fn weighted_pick(weights: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last_positive = Some(i);
            if target < acc {
                return Some(i);
            }
        }
    }
    last_positive
}

/// Distance-weighted seeding: the first point uniformly, later ones with
/// probability proportional to squared distance from the nearest chosen point.
fn seed_centers(x: ArrayView2<'_, f64>, c: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut weights = vec![1.0; n];
    let mut chosen: Vec<usize> = Vec::with_capacity(c);
    for _ in 0..c {
        let pick = weighted_pick(&weights, rng).unwrap_or_else(|| {
            // fewer distinct points than clusters
            let fallback: Vec<f64> = (0..n)
                .map(|i| if chosen.contains(&i) { 0.0 } else { 1.0 })
                .collect();
            weighted_pick(&fallback, rng).expect("c <= n leaves an unchosen row")
        });
        chosen.push(pick);
        let center = x.row(pick);
        for (i, w) in weights.iter_mut().enumerate() {
            let d = sq_dist(x.row(i), center);
            *w = if chosen.len() == 1 { d } else { w.min(d) };
        }
        weights[pick] = 0.0;
    }
    let d = x.ncols();
    let mut centers = Array2::zeros((c, d));
    for (k, &i) in chosen.iter().enumerate() {
        centers.row_mut(k).assign(&x.row(i));
    }
    centers
}

/// `v^e`, exact for the common exponents 1 and 2.
fn pow(v: f64, e: f64) -> f64 {
    if e == 2.0 {
        v * v
    } else if e == 1.0 {
        v
    } else {
        v.powf(e)
    }
}

/// Rows below this count are processed sequentially; per-row work is tiny.
const PARALLEL_ROWS: usize = 4096;

fn sq_dist_flat(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn membership_row(point: &[f64], centers: &[f64], exponent: f64, row: &mut [f64]) {
    let d = point.len();
    for (u, v) in row.iter_mut().zip(centers.chunks_exact(d)) {
        *u = sq_dist_flat(point, v);
    }
    let zeros = row.iter().filter(|&&d| d == 0.0).count();
    if zeros > 0 {
        let share = 1.0 / zeros as f64;
        for u in row.iter_mut() {
            *u = if *u == 0.0 { share } else { 0.0 };
        }
        return;
    }
    let d_min = row.iter().copied().fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for u in row.iter_mut() {
        *u = pow(d_min / *u, exponent);
        total += *u;
    }
    for u in row.iter_mut() {
        *u /= total;
    }
}

/// Row-major `n × c` memberships of row-major `n × d` data.
fn memberships_flat(xs: &[f64], d: usize, centers: &[f64], exponent: f64, u: &mut [f64]) {
    let c = centers.len() / d;
    if xs.len() / d >= PARALLEL_ROWS {
        u.par_chunks_exact_mut(c)
            .zip(xs.par_chunks_exact(d))
            .for_each(|(row, point)| membership_row(point, centers, exponent, row));
    } else {
        for (row, point) in u.chunks_exact_mut(c).zip(xs.chunks_exact(d)) {
            membership_row(point, centers, exponent, row);
        }
    }
}

fn standard(x: ArrayView2<'_, f64>) -> Vec<f64> {
    x.as_standard_layout().iter().copied().collect()
}

/// Membership of every row in every cluster for fixed centers.
///
/// A row that coincides with one or more centers belongs to them in equal shares.
pub fn memberships_for(x: ArrayView2<'_, f64>, centers: ArrayView2<'_, f64>, fuzzifier: f64) -> Array2<f64> {
    let (n, d) = x.dim();
    let c = centers.nrows();
    let mut u = vec![0.0; n * c];
    memberships_flat(&standard(x), d, &standard(centers), 1.0 / (fuzzifier - 1.0), &mut u);
    Array2::from_shape_vec((n, c), u).expect("n × c buffer")
}

fn update_centers(xs: &[f64], d: usize, um: &[f64], centers: &mut [f64], lo: &[f64], hi: &[f64]) {
    let c = centers.len() / d;
    let mut num = vec![0.0; d];
    for (i, center) in centers.chunks_exact_mut(d).enumerate() {
        num.iter_mut().for_each(|v| *v = 0.0);
        let mut den = 0.0;
        for (point, w) in xs.chunks_exact(d).zip(um.iter().skip(i).step_by(c)) {
            den += w;
            for (acc, &p) in num.iter_mut().zip(point) {
                *acc += w * p;
            }
        }
        if den > 0.0 {
            for j in 0..d {
                // a convex combination of the data; clamp away rounding past the hull box
                center[j] = (num[j] / den).clamp(lo[j], hi[j]);
            }
        }
    }
}

fn weighted_objective(xs: &[f64], d: usize, um: &[f64], centers: &[f64]) -> f64 {
    let c = centers.len() / d;
    let mut total = 0.0;
    for (point, weights) in xs.chunks_exact(d).zip(um.chunks_exact(c)) {
        for (w, center) in weights.iter().zip(centers.chunks_exact(d)) {
            total += w * sq_dist_flat(point, center);
        }
    }
    total
}

pub fn objective(x: ArrayView2<'_, f64>, u: &Array2<f64>, centers: &Array2<f64>, fuzzifier: f64) -> f64 {
    let um: Vec<f64> = standard(u.view()).into_iter().map(|v| pow(v, fuzzifier)).collect();
    weighted_objective(&standard(x), x.ncols(), &um, &standard(centers.view()))
}

fn bounding_box(x: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let lo = x.fold_axis(Axis(0), f64::INFINITY, |a, &b| a.min(b));
    let hi = x.fold_axis(Axis(0), f64::NEG_INFINITY, |a, &b| a.max(b));
    (lo, hi)
}

fn fit_once(x: ArrayView2<'_, f64>, xs: &[f64], cfg: &FcmConfig, seed: u64) -> FuzzyPartition {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = x.dim();
    let c = cfg.clusters;
    let (lo, hi) = bounding_box(x);
    let (lo, hi) = (lo.to_vec(), hi.to_vec());
    let mut centers = standard(seed_centers(x, c, &mut rng).view());
    let exponent = 1.0 / (cfg.fuzzifier - 1.0);
    let mut memberships = vec![0.0; n * c];
    let mut u = vec![0.0; n * c];
    let mut um = vec![0.0; n * c];
    let mut next = centers.clone();
    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        memberships_flat(xs, d, &centers, exponent, &mut u);
        for (w, &v) in um.iter_mut().zip(&u) {
            *w = pow(v, cfg.fuzzifier);
        }
        next.copy_from_slice(&centers);
        update_centers(xs, d, &um, &mut next, &lo, &hi);
        let j = weighted_objective(xs, d, &um, &next);
        if history.last().is_some_and(|&last| j > last) {
            // each half-step is an exact minimizer, so a rise is pure rounding:
            // the objective has hit its numerical floor
            converged = true;
            break;
        }
        let delta = if iterations == 0 {
            f64::INFINITY
        } else {
            memberships.iter().zip(&u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        history.push(j);
        std::mem::swap(&mut centers, &mut next);
        std::mem::swap(&mut memberships, &mut u);
        iterations += 1;
        if delta < cfg.tolerance {
            converged = true;
            break;
        }
    }

    FuzzyPartition {
        memberships: Array2::from_shape_vec((n, c), memberships).expect("n × c buffer"),
        centers: Array2::from_shape_vec((c, d), centers).expect("c × d buffer"),
        objective_history: history,
        iterations,
        converged,
    }
}

fn lexicographic(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Ordering {
    a.iter()
        .zip(b.iter())
        .map(|(p, q)| p.total_cmp(q))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

fn canonicalize(p: FuzzyPartition) -> FuzzyPartition {
    let c = p.centers.nrows();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| lexicographic(p.centers.row(a), p.centers.row(b)).then(a.cmp(&b)));
    let centers = p.centers.select(Axis(0), &order);
    let memberships = p.memberships.select(Axis(1), &order);
    FuzzyPartition {
        memberships,
        centers,
        ..p
    }
}

/// Fits fuzzy c-means; deterministic for a given matrix and configuration.
pub fn fcm_fit(x: ArrayView2<'_, f64>, cfg: &FcmConfig) -> Result<FuzzyPartition, FcmError> {
    cfg.validate()?;
    let n = x.nrows();
    if cfg.clusters > n {
        return Err(FcmError::TooFewRows {
            clusters: cfg.clusters,
            rows: n,
        });
    }
    if x.ncols() == 0 {
        return Err(FcmError::InvalidConfig("data matrix has no columns".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FcmError::NonFinite);
    }
    let xs = standard(x);
    let mut best: Option<FuzzyPartition> = None;
    for restart in 0..cfg.restarts {
        let fit = fit_once(x, &xs, cfg, mix_seed(cfg.seed, restart as u64));
        if best.as_ref().is_none_or(|b| fit.objective() < b.objective()) {
            best = Some(fit);
        }
    }
    Ok(canonicalize(best.expect("restarts >= 1")))
}

/// Crisp label per row: the cluster of largest membership, lowest index on ties.
pub fn hard_assign(p: &FuzzyPartition) -> Vec<usize> {
    p.memberships
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Writes `object_id,label,membership_0..` rows.
pub fn write_partition_csv<W: Write>(object_ids: &[String], p: &FuzzyPartition, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["object_id".to_string(), "label".to_string()];
    header.extend((0..p.clusters()).map(|i| format!("membership_{i}")));
    w.write_record(&header)?;
    for ((id, label), row) in object_ids.iter().zip(hard_assign(p)).zip(p.memberships.rows()) {
        let mut rec = vec![id.clone(), label.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
