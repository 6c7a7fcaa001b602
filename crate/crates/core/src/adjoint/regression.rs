//! Per-node least-squares fits of a payload on polynomial features of the state.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LqsgError, Result};

/// Relative ridge weight: `lambda = RIDGE * trace(G^T G) / cols`.
pub const RIDGE: f64 = 1e-8;

/// How regression targets are formed across nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressionScheme {
    /// Regress the full pathwise payload at every node independently.
    Direct,
    /// Regress one step of payload plus the fitted value at the next node.
    /// Only one step of noise enters each fit, so variance is much lower.
    #[default]
    OneStep,
}

/// Polynomial family on the standardized state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
    /// Include mixed monomials such as `x_1 x_2`; otherwise pure powers only.
    pub interactions: bool,
    #[serde(default)]
    pub scheme: RegressionScheme,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        Self { degree: 2, interactions: true, scheme: RegressionScheme::default() }
    }
}

impl RegressionBasis {
    pub fn new(degree: usize, interactions: bool) -> Result<Self> {
        if degree == 0 {
            return Err(LqsgError::InvalidParameter("basis degree must be at least 1".into()));
        }
        Ok(Self { degree, interactions, scheme: RegressionScheme::default() })
    }

    pub fn with_scheme(self, scheme: RegressionScheme) -> Self {
        Self { scheme, ..self }
    }

    /// Non-constant monomials as multisets of input indices.
    pub fn monomials(&self, dim: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        if self.interactions {
            let mut frontier: Vec<Vec<usize>> = vec![vec![]];
            for _ in 0..self.degree {
                let mut next = Vec::new();
                for m in &frontier {
                    let start = m.last().copied().unwrap_or(0);
                    for j in start..dim {
                        let mut e = m.clone();
                        e.push(j);
                        next.push(e);
                    }
                }
                out.extend(next.iter().cloned());
                frontier = next;
            }
        } else {
            for d in 1..=self.degree {
                for j in 0..dim {
                    out.push(vec![j; d]);
                }
            }
        }
        out
    }

    /// Number of basis functions including the constant.
    pub fn size(&self, dim: usize) -> usize {
        self.monomials(dim).len() + 1
    }
}

/// Fitted conditional-expectation map at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFit {
    input_mean: Vec<f64>,
    /// Reciprocal standard deviation; zero for inputs that are constant across paths.
    input_inv_scale: Vec<f64>,
    monomials: Vec<Vec<usize>>,
    kept: Vec<usize>,
    feature_mean: Vec<f64>,
    /// One coefficient vector per target, aligned with `kept`.
    beta: Vec<Vec<f64>>,
    target_mean: Vec<f64>,
    pub condition: f64,
    pub residual_rms: Vec<f64>,
}

impl NodeFit {
    fn features(&self, x: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        for m in &self.monomials {
            let mut v = 1.0;
            for &j in m {
                v *= (x[j] - self.input_mean[j]) * self.input_inv_scale[j];
            }
            buf.push(v);
        }
    }

    pub fn predict(&self, target: usize, x: &[f64]) -> f64 {
        let mut buf = Vec::with_capacity(self.monomials.len());
        self.features(x, &mut buf);
        let beta = &self.beta[target];
        let mut y = self.target_mean[target];
        for (c, &col) in self.kept.iter().enumerate() {
            y += beta[c] * (buf[col] - self.feature_mean[col]);
        }
        y
    }

    /// Number of non-constant features used by the fit.
    pub fn active_features(&self) -> usize {
        self.kept.len()
    }
}

/// Fits every target on the rows of `inputs` (`rows x dim`, row-major) and
/// returns the fit together with the fitted values per target.
pub fn fit_node(
    node: usize,
    basis: &RegressionBasis,
    inputs: &[f64],
    dim: usize,
    targets: &[Vec<f64>],
) -> Result<(NodeFit, Vec<Vec<f64>>)> {
    let rows = if dim == 0 { targets.first().map_or(0, Vec::len) } else { inputs.len() / dim };
    if rows == 0 {
        return Err(LqsgError::Regression { node, reason: "no samples".into() });
    }
    let mut input_mean = vec![0.0; dim];
    for r in 0..rows {
        for j in 0..dim {
            input_mean[j] += inputs[r * dim + j];
        }
    }
    input_mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut input_inv_scale = vec![0.0; dim];
    for j in 0..dim {
        let var = (0..rows).map(|r| (inputs[r * dim + j] - input_mean[j]).powi(2)).sum::<f64>() / rows as f64;
        let sd = var.sqrt();
        if sd > 1e-12 * (1.0 + input_mean[j].abs()) {
            input_inv_scale[j] = 1.0 / sd;
        }
    }
    let monomials = basis.monomials(dim);
    let nf = monomials.len();
    let mut fit = NodeFit {
        input_mean,
        input_inv_scale,
        monomials,
        kept: Vec::new(),
        feature_mean: vec![0.0; nf],
        beta: Vec::new(),
        target_mean: Vec::new(),
        condition: 1.0,
        residual_rms: Vec::new(),
    };
    let mut features = vec![0.0; rows * nf];
    let mut buf = Vec::with_capacity(nf);
    for r in 0..rows {
        fit.features(&inputs[r * dim..(r + 1) * dim], &mut buf);
        features[r * nf..(r + 1) * nf].copy_from_slice(&buf);
    }
    for c in 0..nf {
        fit.feature_mean[c] = (0..rows).map(|r| features[r * nf + c]).sum::<f64>() / rows as f64;
    }
    for c in 0..nf {
        let var = (0..rows).map(|r| (features[r * nf + c] - fit.feature_mean[c]).powi(2)).sum::<f64>() / rows as f64;
        if var > 1e-20 {
            fit.kept.push(c);
        }
    }
    let k = fit.kept.len();
    let design = DMatrix::from_fn(rows, k, |r, c| {
        let col = fit.kept[c];
        features[r * nf + col] - fit.feature_mean[col]
    });
    let chol = if k > 0 {
        let mut gram = design.transpose() * &design;
        let lambda = RIDGE * gram.trace() / k as f64;
        for d in 0..k {
            gram[(d, d)] += lambda;
        }
        let eig = gram.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        fit.condition = hi / lo;
        Some(gram.cholesky().ok_or_else(|| LqsgError::Regression {
            node,
            reason: format!("normal equations not positive definite with {k} features"),
        })?)
    } else {
        None
    };
    let mut fitted_all = Vec::with_capacity(targets.len());
    for t in targets {
        if t.len() != rows {
            return Err(LqsgError::Dimension(format!("target has {} rows, design has {rows}", t.len())));
        }
        let mean = t.iter().sum::<f64>() / rows as f64;
        let centered = DVector::from_iterator(rows, t.iter().map(|v| v - mean));
        let beta: Vec<f64> = match &chol {
            Some(ch) => ch.solve(&(design.transpose() * &centered)).iter().copied().collect(),
            None => Vec::new(),
        };
        let fitted: Vec<f64> = if k > 0 {
            let b = DVector::from_column_slice(&beta);
            (&design * b).iter().map(|v| v + mean).collect()
        } else {
            vec![mean; rows]
        };
        if fitted.iter().any(|v| !v.is_finite()) {
            return Err(LqsgError::Regression { node, reason: "non-finite fitted values".into() });
        }
        let rms = (t.iter().zip(&fitted).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / rows as f64).sqrt();
        fit.residual_rms.push(rms);
        fit.beta.push(beta);
        fit.target_mean.push(mean);
        fitted_all.push(fitted);
    }
    Ok((fit, fitted_all))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_counts() {
        let b = RegressionBasis::default();
        assert_eq!(b.size(1), 3);
        assert_eq!(b.size(2), 6);
        assert_eq!(b.size(3), 10);
        assert_eq!(RegressionBasis::new(2, false).unwrap().size(3), 7);
        assert!(RegressionBasis::new(0, true).is_err());
    }

    #[test]
    fn exact_quadratic_is_recovered() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 10.0 - 2.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 + 2.0 * x - 0.5 * x * x).collect();
        let (fit, fitted) = fit_node(0, &RegressionBasis::default(), &xs, 1, &[ys.clone()]).unwrap();
        for (a, b) in ys.iter().zip(&fitted[0]) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((fit.predict(0, &[0.3]) - (1.0 + 0.6 - 0.045)).abs() < 1e-6);
    }

    #[test]
    fn constant_inputs_give_the_sample_mean() {
        let xs = vec![1.0; 8];
        let ys: Vec<f64> = (0..4).map(|i| i as f64).collect();
        let (fit, fitted) = fit_node(0, &RegressionBasis::default(), &xs, 2, &[ys]).unwrap();
        assert_eq!(fit.active_features(), 0);
        assert!(fitted[0].iter().all(|&v| v == 1.5));
    }
}
