//! Exact k-nearest-neighbor graphs and the normalized adjacency `Ã`.
//!
//! Raw weights are `A_ij = f(‖x_i − x_j‖)` over each point's neighbor set,
//! the self weight is the sum of the off-diagonal weights, and every row is
//! divided by its total. The resulting `Ã` is row-stochastic with
//! `Ã_ii = 1/2`. With the default symmetric (union) neighbor pattern and a
//! per-cloud bandwidth, `A` is symmetric, so `Ã = D⁻¹A` is similar to a
//! symmetric positive semi-definite matrix and its spectrum lies in `[0, 1]`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Fixed `σ`.
    Fixed(f64),
    /// `σ²` = mean squared distance from each point to its k neighbors,
    /// averaged over the whole cloud.
    MeanSqNeighborDist,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `exp(−d² / σ²)`.
    Gaussian(Bandwidth),
    /// `1 / (d + ε)`.
    InverseDistance(f64),
}

/// Which pairs carry an edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Symmetry {
    /// `j ∈ knn(i)` or `i ∈ knn(j)`.
    Union,
    /// `j ∈ knn(i)` only.
    Directed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfLoopRule {
    /// `A_ii = Σ_{j≠i} A_ij`.
    SumOfNeighbors,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub k_graph: usize,
    pub kernel: Kernel,
    pub symmetry: Symmetry,
    pub self_loop_rule: SelfLoopRule,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            k_graph: 20,
            kernel: Kernel::Gaussian(Bandwidth::MeanSqNeighborDist),
            symmetry: Symmetry::Union,
            self_loop_rule: SelfLoopRule::SumOfNeighbors,
        }
    }
}

impl GraphConfig {
    pub fn with_k(k_graph: usize) -> Self {
        Self {
            k_graph,
            ..Self::default()
        }
    }

    pub fn validate(&self, n_points: usize) -> Result<()> {
        if self.k_graph == 0 || self.k_graph >= n_points {
            return Err(Error::Config(format!(
                "k_graph must satisfy 1 <= k < N, got k = {} with N = {n_points}",
                self.k_graph
            )));
        }
        match self.kernel {
            Kernel::Gaussian(Bandwidth::Fixed(s)) if !(s > 0.0 && s.is_finite()) => {
                Err(Error::Config(format!("gaussian bandwidth must be positive, got {s}")))
            }
            Kernel::InverseDistance(e) if !(e > 0.0 && e.is_finite()) => {
                Err(Error::Config(format!("inverse-distance epsilon must be positive, got {e}")))
            }
            _ => Ok(()),
        }
    }
}

/// Rows of `Ã` in sparse form. Row `i` lists `i` itself first.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborGraph {
    neighbors: Vec<Vec<usize>>,
    weights: Vec<Vec<f64>>,
    // Raw (unnormalized) row totals including the self loop.
    degrees: Vec<f64>,
    symmetric: bool,
}

impl NeighborGraph {
    pub fn n_points(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[i]
    }

    /// Raw row totals `Σ_j A_ij` (self loop included).
    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    /// True when the raw adjacency `A` is symmetric.
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Dense row-major `N x N` copy of `Ã`.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.n_points();
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for (&j, &w) in self.neighbors[i].iter().zip(&self.weights[i]) {
                m[i * n + j] += w;
            }
        }
        m
    }

    /// `i,j,weight` lines for every stored entry, with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,weight\n");
        for i in 0..self.n_points() {
            for (&j, &w) in self.neighbors[i].iter().zip(&self.weights[i]) {
                let _ = writeln!(out, "{i},{j},{w}");
            }
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn as_rows<T: Real>(points: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    if points.rank() != 2 || points.shape()[1] == 0 {
        return Err(Error::Shape {
            op: "knn",
            lhs: points.shape().to_vec(),
            rhs: vec![0, 1],
        });
    }
    Ok((points.to_f64_vec(), points.shape()[0], points.shape()[1]))
}

// k nearest (excluding self) with squared distances, ties by index.
fn knn_with_dist(data: &[f64], n: usize, dim: usize, k: usize) -> Result<Vec<Vec<(f64, usize)>>> {
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "knn needs 1 <= k < N, got k = {k} with N = {n}"
        )));
    }
    if dim >= GRAM_MIN_DIM {
        return Ok(knn_gram(data, n, dim, k));
    }
    match dim {
        2 => Ok(knn_small::<2>(data, n, k)),
        3 => Ok(knn_small::<3>(data, n, k)),
        _ => {
            let mut dist = vec![0.0; n];
            Ok((0..n)
                .map(|i| {
                    let xi = &data[i * dim..(i + 1) * dim];
                    for (d, xj) in dist.iter_mut().zip(data.chunks_exact(dim)) {
                        *d = sq_dist(xi, xj);
                    }
                    smallest(&dist, i, k, |_, d| d)
                })
                .collect())
        }
    }
}

fn knn_small<const D: usize>(data: &[f64], n: usize, k: usize) -> Vec<Vec<(f64, usize)>> {
    let rows: Vec<[f64; D]> = data.chunks_exact(D).map(|c| std::array::from_fn(|a| c[a])).collect();
    let mut dist = vec![0.0; n];
    (0..n)
        .map(|i| {
            let xi = rows[i];
            for (d, xj) in dist.iter_mut().zip(&rows) {
                let mut s = 0.0;
                for a in 0..D {
                    let t = xi[a] - xj[a];
                    s += t * t;
                }
                *d = s;
            }
            smallest(&dist, i, k, |_, d| d)
        })
        .collect()
}

const GRAM_MIN_DIM: usize = 8;

// The k smallest `(exact(j, dist[j]), j)` over j != skip among entries with
// dist[j] <= cut, sorted by (distance, index). Candidates arrive in index
// order, so equal distances stay in index order by inserting after them.
fn smallest_within(dist: &[f64], skip: usize, k: usize, cut: f64, exact: impl Fn(usize, f64) -> f64) -> Vec<(f64, usize)> {
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k);
    for (j, &screen) in dist.iter().enumerate() {
        if j == skip || !(screen <= cut) {
            continue;
        }
        // NaN distances sort after everything, like infinity.
        let d = exact(j, screen);
        let d = if d.is_nan() { f64::INFINITY } else { d };
        let mut p = best.len();
        if p == k {
            if d >= best[k - 1].0 {
                continue;
            }
            p -= 1;
        } else {
            best.push((d, j));
        }
        while p > 0 && best[p - 1].0 > d {
            best[p] = best[p - 1];
            p -= 1;
        }
        best[p] = (d, j);
    }
    best
}

fn smallest(dist: &[f64], skip: usize, k: usize, exact: impl Fn(usize, f64) -> f64) -> Vec<(f64, usize)> {
    smallest_within(dist, skip, k, f64::INFINITY, exact)
}

// Screens with |a|² + |b|² − 2a·b from one gemm, keeps everything within the
// rounding bound of the k-th screened distance, and ranks the survivors by
// exact distance. The result equals the direct search.
fn knn_gram(data: &[f64], n: usize, dim: usize, k: usize) -> Vec<Vec<(f64, usize)>> {
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let norms: Vec<f64> = (0..n).map(|i| row(i).iter().map(|v| v * v).sum()).collect();
    let mut gram = vec![0.0; n * n];
    f64::gemm(n, dim, n, data, false, data, true, &mut gram, false);
    let max_norm = norms.iter().copied().fold(0.0, f64::max);
    let mut screen = vec![0.0; n];
    (0..n)
        .map(|i| {
            let g = &gram[i * n..(i + 1) * n];
            for ((s, &nj), &gj) in screen.iter_mut().zip(&norms).zip(g) {
                *s = norms[i] + nj - 2.0 * gj;
            }
            let kth = smallest(&screen, i, k, |_, d| d)[k - 1].0;
            let slack = 8.0 * (dim as f64 + 2.0) * f64::EPSILON * (norms[i] + max_norm);
            smallest_within(&screen, i, k, kth + 2.0 * slack, |j, _| sq_dist(row(i), row(j)))
        })
        .collect()
}

/// Exact k nearest neighbors of every row (self excluded), nearest first,
/// ties broken by ascending index.
pub fn knn<T: Real>(points: &Tensor<T>, k: usize) -> Result<Vec<Vec<usize>>> {
    let (data, n, dim) = as_rows(points)?;
    Ok(knn_with_dist(&data, n, dim, k)?
        .into_iter()
        .map(|r| r.into_iter().map(|(_, j)| j).collect())
        .collect())
}

// Sum in ascending order so the result does not depend on point order.
fn canonical_sum(mut values: Vec<f64>) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.into_iter().sum()
}

/// Builds `Ã` over the rows of `points` (coordinates or learned features).
pub fn build_adjacency<T: Real>(points: &Tensor<T>, cfg: &GraphConfig) -> Result<NeighborGraph> {
    let (data, n, dim) = as_rows(points)?;
    cfg.validate(n)?;
    let knn = knn_with_dist(&data, n, dim, cfg.k_graph)?;

    let kernel: Box<dyn Fn(f64) -> f64> = match cfg.kernel {
        Kernel::Gaussian(bw) => {
            let sigma2 = match bw {
                Bandwidth::Fixed(s) => s * s,
                Bandwidth::MeanSqNeighborDist => {
                    let all: Vec<f64> = knn.iter().flatten().map(|&(d, _)| d).collect();
                    let count = all.len() as f64;
                    canonical_sum(all) / count
                }
            };
            if !sigma2.is_finite() {
                return Err(Error::Numeric(format!("non-finite gaussian bandwidth {sigma2}")));
            }
            // Every point coincides with its neighbors; any bandwidth gives
            // the same normalized weights.
            let sigma2 = if sigma2 > 0.0 { sigma2 } else { 1.0 };
            Box::new(move |d2: f64| (-d2 / sigma2).exp())
        }
        Kernel::InverseDistance(eps) => Box::new(move |d2: f64| 1.0 / (d2.sqrt() + eps)),
    };

    let mut sets: Vec<Vec<usize>> = knn.iter().map(|r| r.iter().map(|&(_, j)| j).collect()).collect();
    if cfg.symmetry == Symmetry::Union {
        let mut reverse: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, r) in knn.iter().enumerate() {
            for &(_, j) in r {
                reverse[j].push(i);
            }
        }
        for (i, rev) in reverse.into_iter().enumerate() {
            let mut extra: Vec<usize> = rev.into_iter().filter(|j| !sets[i].contains(j)).collect();
            extra.sort_unstable();
            extra.dedup();
            sets[i].extend(extra);
        }
    }

    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut neighbors = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut degrees = Vec::with_capacity(n);
    for (i, set) in sets.into_iter().enumerate() {
        let raw: Vec<f64> = set.iter().map(|&j| kernel(sq_dist(row(i), row(j)))).collect();
        let off = canonical_sum(raw.clone());
        if !(off > 0.0 && off.is_finite()) {
            return Err(Error::DegenerateRow { index: i });
        }
        let total = 2.0 * off;
        let mut nb = Vec::with_capacity(set.len() + 1);
        let mut w = Vec::with_capacity(set.len() + 1);
        nb.push(i);
        w.push(off / total);
        nb.extend(set);
        w.extend(raw.iter().map(|a| a / total));
        neighbors.push(nb);
        weights.push(w);
        degrees.push(total);
    }
    Ok(NeighborGraph {
        neighbors,
        weights,
        degrees,
        symmetric: cfg.symmetry == Symmetry::Union,
    })
}

/// `Ã · features`, evaluated row-sparsely.
pub fn apply_adjacency<T: Real>(graph: &NeighborGraph, features: &Tensor<T>) -> Result<Tensor<T>> {
    if features.rank() != 2 || features.shape()[0] != graph.n_points() {
        return Err(Error::Shape {
            op: "apply_adjacency",
            lhs: vec![graph.n_points(), graph.n_points()],
            rhs: features.shape().to_vec(),
        });
    }
    let c = features.shape()[1];
    let x = features.data();
    let mut out = Vec::with_capacity(x.len());
    let mut acc = vec![0.0f64; c];
    for i in 0..graph.n_points() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (&j, &w) in graph.neighbors[i].iter().zip(&graph.weights[i]) {
            for (a, v) in acc.iter_mut().zip(&x[j * c..(j + 1) * c]) {
                *a += w * v.as_f64();
            }
        }
        out.extend(acc.iter().map(|&a| T::from_f64_lossy(a)));
    }
    Tensor::new(features.shape().to_vec(), out)
}
