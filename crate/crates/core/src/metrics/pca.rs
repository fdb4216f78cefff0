//! Principal-component projection of latent codes for 2D cluster plots.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative eigenvalue below which a direction counts as rank-deficient.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` orthonormal rows of length `D`, largest variance first. Each row
    /// is signed so that its largest-magnitude entry is positive.
    pub components: Vec<Vec<f64>>,
    /// Sample variance (`n − 1` denominator) along each component.
    pub explained_variance: Vec<f64>,
    /// Fraction of the total variance per component.
    pub explained_ratio: Vec<f64>,
    pub projected: Vec<Vec<f64>>,
}

pub fn pca_project(codes: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = codes.len();
    if k == 0 || n <= k {
        return Err(Error::Invalid(format!("PCA to {k} components needs more than {k} rows, got {n}")));
    }
    let d = codes[0].len();
    if codes.iter().any(|r| r.len() != d) {
        return Err(Error::Invalid("ragged code rows".into()));
    }
    if k > d {
        return Err(Error::Invalid(format!("{k} components from {d}-dimensional codes")));
    }
    let mut mean = vec![0.0; d];
    for r in codes {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| codes[i][j] - mean[j]);
    let cov = x.transpose() * &x / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    if top <= 0.0 || eig.eigenvalues[order[k - 1]] <= RANK_TOL * top {
        return Err(Error::Invalid(format!("codes have rank below {k}")));
    }
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &c in &order[..k] {
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_variance.push(eig.eigenvalues[c]);
    }
    let projected = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| c.iter().enumerate().map(|(j, w)| w * x[(i, j)]).sum())
                .collect()
        })
        .collect();
    let explained_ratio = explained_variance.iter().map(|v| v / total).collect();
    Ok(Pca { mean, components, explained_variance, explained_ratio, projected })
}

/// Whitespace-separated `x y label` lines, one per point, ready for
/// `plot 'file' using 1:2`.
pub fn write_projection_dat<W: Write>(mut w: W, projected: &[Vec<f64>], labels: &[String]) -> Result<()> {
    if projected.len() != labels.len() {
        return Err(Error::Invalid(format!("{} points but {} labels", projected.len(), labels.len())));
    }
    writeln!(w, "# x y label")?;
    for (p, l) in projected.iter().zip(labels) {
        let coords: Vec<String> = p.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{} \"{}\"", coords.join(" "), l.replace('"', "'"))?;
    }
    Ok(())
}
