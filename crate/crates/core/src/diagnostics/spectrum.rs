use crate::{CoreError, Result};

/// Spectrum of the column-centered embedding matrix.
///
/// `singular_values[i]² ` are the eigenvalues of the population covariance,
/// i.e. the data matrix's singular values divided by `√M`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    pub singular_values: Vec<f64>,
    pub normalized: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub effective_rank: f64,
    /// Row-major `E × E`; column `i` is the direction of `singular_values[i]`.
    pub eigenvectors: Vec<f64>,
    pub dim: usize,
}

impl SpectrumReport {
    pub fn from_singular_values(mut sigma: Vec<f64>, eigenvectors: Vec<f64>) -> Self {
        let dim = sigma.len();
        sigma.iter_mut().for_each(|s| *s = s.max(0.0));
        let top = sigma.first().copied().unwrap_or(0.0);
        let energy: f64 = sigma.iter().map(|s| s * s).sum();
        let (normalized, cumulative, effective_rank) = if top > 0.0 && energy > 0.0 {
            let normalized = sigma.iter().map(|s| s / top).collect();
            let mut acc = 0.0;
            let mut cumulative: Vec<f64> = sigma
                .iter()
                .map(|s| {
                    acc += s * s;
                    acc / energy
                })
                .collect();
            if let Some(last) = cumulative.last_mut() {
                *last = 1.0;
            }
            let entropy: f64 = sigma
                .iter()
                .map(|s| s * s / energy)
                .filter(|&p| p > 0.0)
                .map(|p| -p * p.ln())
                .sum();
            (normalized, cumulative, entropy.exp())
        } else {
            // constant embeddings: no direction carries variance
            (vec![0.0; dim], vec![1.0; dim], 0.0)
        };
        Self {
            singular_values: sigma,
            normalized,
            cumulative,
            effective_rank,
            eigenvectors,
            dim,
        }
    }

    pub fn covariance_eigenvalues(&self) -> Vec<f64> {
        self.singular_values.iter().map(|s| s * s).collect()
    }
}

/// Sweeps allowed before giving up on convergence.
const MAX_SWEEPS: usize = 60;
/// Columns count as orthogonal once `|a_p·a_q| ≤ TOL·‖a_p‖‖a_q‖`.
const TOL: f64 = 1e-15;

/// One-sided cyclic Jacobi SVD of a row-major `m × n` matrix.
///
/// Returns singular values in descending order and the right singular
/// vectors as a row-major `n × n` matrix whose columns match.
pub fn jacobi_svd(a: &[f64], m: usize, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != m * n {
        return Err(CoreError::Shape(format!("{} values for a {m}x{n} matrix", a.len())));
    }
    // column-major working copy so rotations touch contiguous memory
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (dot(c, c).sqrt(), j))
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    let sigma = order.iter().map(|o| o.0).collect();
    let mut vecs = vec![0.0; n * n];
    for (k, &(_, j)) in order.iter().enumerate() {
        for i in 0..n {
            vecs[i * n + k] = v[j][i];
        }
    }
    Ok((sigma, vecs))
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (p, q) = (*a, *b);
        *a = c * p - s * q;
        *b = s * p + c * q;
    }
}

/// Spectrum of `M × E` row-major embeddings after column centering.
pub fn svd_spectrum(rows: &[f64], m: usize, e: usize) -> Result<SpectrumReport> {
    if m < 2 {
        return Err(CoreError::Degenerate(format!("spectrum needs at least 2 rows, got {m}")));
    }
    if rows.len() != m * e || e == 0 {
        return Err(CoreError::Shape(format!("{} values for {m} rows of width {e}", rows.len())));
    }
    let mut mean = vec![0.0; e];
    for r in rows.chunks(e) {
        mean.iter_mut().zip(r).for_each(|(a, x)| *a += x);
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let scale = 1.0 / (m as f64).sqrt();
    let centered: Vec<f64> = rows
        .chunks(e)
        .flat_map(|r| r.iter().zip(&mean).map(|(x, mu)| (x - mu) * scale).collect::<Vec<_>>())
        .collect();
    let (sigma, vecs) = jacobi_svd(&centered, m, e)?;
    Ok(SpectrumReport::from_singular_values(sigma, vecs))
}
