//! Graph high-pass filtering and the sharp/gentle variation split.

use nalgebra::{DMatrix, Schur, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{apply_adjacency, NeighborGraph};
use crate::tensor::{Real, Tensor};

/// Largest graph `spectral_check` accepts by default.
pub const DEFAULT_SPECTRAL_LIMIT: usize = 128;

/// Polynomial graph filter `h(Ã) = Σ_ℓ h_ℓ Ã^ℓ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub coefficients: Vec<f64>,
}

impl Default for FilterSpec {
    fn default() -> Self {
        Self::high_pass()
    }
}

impl FilterSpec {
    /// `I − Ã`.
    pub fn high_pass() -> Self {
        Self {
            coefficients: vec![1.0, -1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    /// Evaluates `h(Ã)·X` with repeated sparse products (Horner form).
    pub fn apply<T: Real>(&self, graph: &NeighborGraph, features: &Tensor<T>) -> Result<Tensor<T>> {
        let x = features.cast::<f64>();
        let mut acc: Option<Tensor<f64>> = None;
        for &h in self.coefficients.iter().rev() {
            let next = match acc {
                None => x.map(|v| h * v),
                Some(a) => {
                    let ax = apply_adjacency(graph, &a)?;
                    let data = ax.data().iter().zip(x.data()).map(|(p, v)| p + h * v).collect();
                    Tensor::new(x.shape().to_vec(), data)?
                }
            };
            acc = Some(next);
        }
        let out = acc.unwrap_or_else(|| Tensor::zeros(x.shape()));
        Ok(out.cast())
    }
}

/// `X − ÃX`, row by row.
///
/// Evaluated as `Σ_j Ã_ij (x_i − x_j)`, which equals `x_i − Σ_j Ã_ij x_j`
/// for stochastic rows and is exactly zero when the neighbors coincide.
pub fn highpass<T: Real>(graph: &NeighborGraph, features: &Tensor<T>) -> Result<Tensor<T>> {
    if features.rank() != 2 || features.shape()[0] != graph.n_points() {
        return Err(Error::Shape {
            op: "highpass",
            lhs: vec![graph.n_points(), graph.n_points()],
            rhs: features.shape().to_vec(),
        });
    }
    let c = features.cols();
    let x = features.data();
    let mut out = Vec::with_capacity(x.len());
    let mut acc = vec![0.0f64; c];
    for i in 0..graph.n_points() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let xi = &x[i * c..(i + 1) * c];
        for (&j, &w) in graph.neighbors(i).iter().zip(graph.weights(i)) {
            for ((a, vi), vj) in acc.iter_mut().zip(xi).zip(&x[j * c..(j + 1) * c]) {
                *a += w * (vi.as_f64() - vj.as_f64());
            }
        }
        out.extend(acc.iter().map(|&a| T::from_f64_lossy(a)));
    }
    Tensor::new(features.shape().to_vec(), out)
}

/// Euclidean norm of every row.
pub fn variation_scores<T: Real>(filtered: &Tensor<T>) -> Vec<f64> {
    let c = filtered.cols();
    if c == 0 {
        return vec![0.0; filtered.rows()];
    }
    filtered
        .data()
        .chunks_exact(c)
        .map(|r| r.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariationSplit {
    pub scores: Vec<f64>,
    /// Point indices by descending score, ties by ascending index.
    pub order: Vec<usize>,
    pub m: usize,
}

impl VariationSplit {
    pub fn from_scores(scores: Vec<f64>, m: usize) -> Result<Self> {
        let n = scores.len();
        if m == 0 || 2 * m > n {
            return Err(Error::Config(format!(
                "selection overlap: m must satisfy 1 <= m <= N/2, got m = {m} with N = {n}"
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite variation score at point {i}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Ok(Self { scores, order, m })
    }

    pub fn n_points(&self) -> usize {
        self.scores.len()
    }

    pub fn sharp_idx(&self) -> &[usize] {
        &self.order[..self.m]
    }

    pub fn gentle_idx(&self) -> &[usize] {
        &self.order[self.order.len() - self.m..]
    }

    /// `{"m": .., "sharp": [..], "gentle": [..]}`.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "m": self.m,
            "sharp": self.sharp_idx(),
            "gentle": self.gentle_idx(),
        })
        .to_string()
    }
}

/// Default selection count: a quarter of the points, at least one.
pub fn default_m(n_points: usize) -> usize {
    (n_points / 4).max(1)
}

/// High-pass filter, score and split into the `m` sharpest and `m` gentlest points.
pub fn disentangle<T: Real>(graph: &NeighborGraph, features: &Tensor<T>, m: usize) -> Result<VariationSplit> {
    let filtered = highpass(graph, &features.cast::<f64>())?;
    VariationSplit::from_scores(variation_scores(&filtered), m)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralReport {
    /// Real parts of the eigenvalues of `Ã`, descending.
    pub eigenvalues_a: Vec<f64>,
    /// Real parts of the eigenvalues of `I − Ã`, ascending.
    pub eigenvalues_ha: Vec<f64>,
    /// Largest imaginary part seen in either spectrum.
    pub max_imag: f64,
    /// `max_i |μ_i − (1 − λ_i)|` with both spectra sorted.
    pub max_response_error: f64,
    /// 2-norm condition number of the eigenvector basis of `Ã`, available
    /// when the raw adjacency is symmetric.
    pub eigenvector_basis_condition: Option<f64>,
}

fn schur_eigenvalues(m: DMatrix<f64>, what: &str) -> Result<(Vec<f64>, f64)> {
    let n = m.nrows();
    // A bare machine-epsilon deflation test stalls on forest-shaped graphs
    // (k = 1) whose spectra are heavily clustered at 0 and 1.
    let schur = Schur::try_new(m, 4.0 * f64::EPSILON, 1000 * n.max(1))
        .ok_or_else(|| Error::Numeric(format!("eigensolver did not converge on {what} ({n} x {n})")))?;
    let ev = schur.complex_eigenvalues();
    let max_imag = ev.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    Ok((ev.iter().map(|z| z.re).collect(), max_imag))
}

pub fn spectral_check(graph: &NeighborGraph) -> Result<SpectralReport> {
    spectral_check_with_limit(graph, DEFAULT_SPECTRAL_LIMIT)
}

/// Dense eigen-analysis of `Ã` and `I − Ã` for small graphs.
pub fn spectral_check_with_limit(graph: &NeighborGraph, limit: usize) -> Result<SpectralReport> {
    let n = graph.n_points();
    if n > limit {
        return Err(Error::Config(format!(
            "spectral check is limited to {limit} points, graph has {n}"
        )));
    }
    let a = DMatrix::from_row_slice(n, n, &graph.to_dense());
    let ha = DMatrix::identity(n, n) - &a;
    let (mut lam, im_a) = schur_eigenvalues(a.clone(), "the normalized adjacency")?;
    let (mut mu, im_h) = schur_eigenvalues(ha, "the high-pass filter")?;
    lam.sort_by(|x, y| y.total_cmp(x));
    mu.sort_by(f64::total_cmp);
    let max_response_error = lam
        .iter()
        .zip(&mu)
        .map(|(l, m)| (m - (1.0 - l)).abs())
        .fold(0.0, f64::max);

    let eigenvector_basis_condition = if graph.is_symmetric() {
        // Ã = D⁻¹A is similar to S = D^{-1/2} A D^{-1/2}; with S = UΛUᵀ the
        // eigenvectors of Ã are the columns of V = D^{-1/2} U.
        let d = graph.degrees();
        let s = DMatrix::from_fn(n, n, |i, j| {
            let sij = a[(i, j)] * (d[i] / d[j]).sqrt();
            let sji = a[(j, i)] * (d[j] / d[i]).sqrt();
            0.5 * (sij + sji)
        });
        let u = SymmetricEigen::new(s).eigenvectors;
        let v = DMatrix::from_fn(n, n, |i, j| u[(i, j)] / d[i].sqrt());
        let sv = v.singular_values();
        let hi = sv.max();
        let lo = sv.min();
        Some(if lo > 0.0 { hi / lo } else { f64::INFINITY })
    } else {
        None
    };

    Ok(SpectralReport {
        eigenvalues_a: lam,
        eigenvalues_ha: mu,
        max_imag: im_a.max(im_h),
        max_response_error,
        eigenvector_basis_condition,
    })
}
