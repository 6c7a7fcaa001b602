//! Adjoint processes: conditional expectations of discounted future marginal costs.
//!
//! For player `i` the payload at node `k` is
//! `sum_{m >= k} Gamma_{k,m} w_m r^i_m . z_m`, with `w_m = dt` before the
//! horizon and `1` at it, and `r^i_m` row `i` of `R^i_m + (R^i_m)^T`. The
//! adjoint is the conditional expectation of this payload given the state at
//! node `k`. It is estimated either by one direct regression per node or by a
//! backward chain that regresses one step of payload plus the next fitted value.

pub mod nested;
pub mod regression;

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LqsgError, Result};
use crate::model::GameSpec;
use crate::paths::StatePaths;
use crate::problem::{dot, LqsProblem};

pub use nested::{
    compute_adjoint_nested, nested_estimates, FeedbackPolicy, NestedConfig, NestedEstimate, OpenLoopPolicy,
};
pub use regression::{fit_node, NodeFit, RegressionBasis, RegressionScheme};

/// Per-path payloads of player `i`, `[path][node]`.
pub fn payloads(problem: &LqsProblem, states: &StatePaths, i: usize) -> Vec<f64> {
    let nodes = states.nodes;
    let steps = nodes - 1;
    let dt = problem.grid().dt();
    let width = problem.width();
    let mut out = vec![0.0; states.paths * nodes];
    out.par_chunks_mut(nodes).enumerate().for_each(|(p, row)| {
        let mut z = vec![0.0; width];
        problem.augmented(states.at(p, steps), p, steps, &mut z);
        let mut acc = dot(problem.marginal_terminal(i), &z);
        row[steps] = acc;
        for k in (0..steps).rev() {
            problem.augmented(states.at(p, k), p, k, &mut z);
            acc = dot(problem.marginal_running(i, k), &z) * dt + problem.growth(i, k) * acc;
            row[k] = acc;
        }
    });
    out
}

/// Regression diagnostics at one node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeDiagnostics {
    pub node: usize,
    pub active_features: usize,
    pub condition: f64,
    /// Root-mean-square residual per player.
    pub residual_rms: Vec<f64>,
}

/// Adjoint estimates `Y[path][node][player]`.
#[derive(Debug, Clone)]
pub struct AdjointPaths {
    pub paths: usize,
    pub nodes: usize,
    pub players: usize,
    pub values: Vec<f64>,
    pub basis: RegressionBasis,
    pub diagnostics: Vec<NodeDiagnostics>,
    /// Fitted maps per node below the horizon.
    pub fits: Vec<NodeFit>,
}

impl AdjointPaths {
    #[inline]
    pub fn get(&self, path: usize, node: usize, player: usize) -> f64 {
        self.values[(path * self.nodes + node) * self.players + player]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path", "node", "player", "value"])?;
        for p in 0..self.paths {
            for k in 0..self.nodes {
                for i in 0..self.players {
                    w.write_record(&[p.to_string(), k.to_string(), i.to_string(), format!("{:e}", self.get(p, k, i))])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn diagnostics_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.diagnostics)?)
    }
}

fn check_sample_size(paths: usize, basis: &RegressionBasis, width: usize) -> Result<()> {
    let size = basis.size(width);
    if paths > 1 && paths < 10 * size {
        return Err(LqsgError::InvalidParameter(format!(
            "{paths} paths are too few for {size} basis functions (need at least {})",
            10 * size
        )));
    }
    Ok(())
}

/// Regressed adjoint of the listed players, `[player slot][path][node]`.
pub(crate) fn regress_players(
    problem: &LqsProblem,
    states: &StatePaths,
    basis: &RegressionBasis,
    players: &[usize],
) -> Result<(Vec<Vec<f64>>, Vec<NodeDiagnostics>, Vec<NodeFit>)> {
    let width = problem.width();
    check_sample_size(states.paths, basis, width)?;
    let nodes = states.nodes;
    let steps = nodes - 1;
    let paths = states.paths;
    let loads: Vec<Vec<f64>> = players.iter().map(|&i| payloads(problem, states, i)).collect();
    let fit_at = |k: usize, targets: &[Vec<f64>]| {
        let mut inputs = vec![0.0; paths * width];
        for p in 0..paths {
            problem.augmented(states.at(p, k), p, k, &mut inputs[p * width..(p + 1) * width]);
        }
        fit_node(k, basis, &inputs, width, targets)
    };
    let per_node: Vec<(NodeFit, Vec<Vec<f64>>)> = match basis.scheme {
        RegressionScheme::Direct => (0..steps)
            .into_par_iter()
            .map(|k| {
                let targets: Vec<Vec<f64>> =
                    loads.iter().map(|l| (0..paths).map(|p| l[p * nodes + k]).collect()).collect();
                fit_at(k, &targets)
            })
            .collect::<Result<_>>()?,
        RegressionScheme::OneStep => {
            let mut next: Vec<Vec<f64>> =
                loads.iter().map(|l| (0..paths).map(|p| l[p * nodes + steps]).collect()).collect();
            let mut rev = Vec::with_capacity(steps);
            for k in (0..steps).rev() {
                let targets: Vec<Vec<f64>> = players
                    .iter()
                    .zip(&loads)
                    .zip(&next)
                    .map(|((&i, l), y)| {
                        let g = problem.growth(i, k);
                        (0..paths).map(|p| l[p * nodes + k] - g * l[p * nodes + k + 1] + g * y[p]).collect()
                    })
                    .collect();
                let (fit, fitted) = fit_at(k, &targets)?;
                next = fitted.clone();
                rev.push((fit, fitted));
            }
            rev.reverse();
            rev
        }
    };
    let mut values: Vec<Vec<f64>> = loads.clone();
    let mut diagnostics = Vec::with_capacity(nodes);
    let mut fits = Vec::with_capacity(steps);
    for (k, (fit, fitted)) in per_node.into_iter().enumerate() {
        for (slot, f) in fitted.iter().enumerate() {
            for p in 0..paths {
                values[slot][p * nodes + k] = f[p];
            }
        }
        diagnostics.push(NodeDiagnostics {
            node: k,
            active_features: fit.active_features(),
            condition: fit.condition,
            residual_rms: fit.residual_rms.clone(),
        });
        fits.push(fit);
    }
    diagnostics.push(NodeDiagnostics {
        node: steps,
        active_features: 0,
        condition: 1.0,
        residual_rms: vec![0.0; players.len()],
    });
    if let Some((slot, _)) = values.iter().enumerate().find(|(_, v)| v.iter().any(|x| !x.is_finite())) {
        return Err(LqsgError::NonFinite(format!("adjoint of player {}", players[slot])));
    }
    Ok((values, diagnostics, fits))
}

/// Regression adjoint of every player of a general problem.
pub fn regress_adjoint(problem: &LqsProblem, states: &StatePaths, basis: &RegressionBasis) -> Result<AdjointPaths> {
    let n = problem.players();
    if states.players != n || states.nodes != problem.grid().nodes() {
        return Err(LqsgError::Dimension("states do not match the problem".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let (per_player, diagnostics, fits) = regress_players(problem, states, basis, &all)?;
    let nodes = states.nodes;
    let mut values = vec![0.0; states.paths * nodes * n];
    for (i, v) in per_player.iter().enumerate() {
        for p in 0..states.paths {
            for k in 0..nodes {
                values[(p * nodes + k) * n + i] = v[p * nodes + k];
            }
        }
    }
    Ok(AdjointPaths { paths: states.paths, nodes, players: n, values, basis: *basis, diagnostics, fits })
}

pub fn compute_adjoint_regression(
    spec: &GameSpec,
    states: &StatePaths,
    basis: &RegressionBasis,
) -> Result<AdjointPaths> {
    regress_adjoint(&LqsProblem::from_spec(spec)?, states, basis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeGrid;
    use crate::paths::{integrate_forward, sample_brownian, ProfileControls};
    use nalgebra::DMatrix;

    fn scalar_spec(a: f64, sigma: f64, x0: f64, q: f64, steps: usize) -> GameSpec {
        GameSpec::constant(
            TimeGrid::new(1.0, steps).unwrap(),
            &[a],
            &[0.0],
            &[sigma],
            &[x0],
            &[DMatrix::from_element(1, 1, q)],
            &[1.0],
            &[1.0],
        )
        .unwrap()
    }

    fn adjoint(spec: &GameSpec, paths: usize, seed: u64) -> AdjointPaths {
        let bm = sample_brownian(paths, spec.grid, spec.players, seed).unwrap();
        let zero = ProfileControls::zeros(spec.players, paths, spec.grid.nodes());
        let x = integrate_forward(spec, &zero, &bm, 0.0).unwrap();
        compute_adjoint_regression(spec, &x, &RegressionBasis::default()).unwrap()
    }

    #[test]
    fn deterministic_closed_form() {
        let spec = scalar_spec(0.0, 0.0, 1.0, 0.5, 10);
        let y = adjoint(&spec, 40, 1);
        for p in 0..40 {
            for k in 0..=10 {
                let t = spec.grid.time(k);
                assert!((y.get(p, k, 0) - (2.0 - t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_cost_gives_zero_adjoint() {
        let spec = scalar_spec(0.3, 1.0, 1.0, 0.0, 5);
        let y = adjoint(&spec, 100, 2);
        assert!(y.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_is_linear_in_the_data() {
        let one = adjoint(&scalar_spec(0.7, 0.0, 1.0, 0.5, 8), 30, 3);
        let two = adjoint(&scalar_spec(1.4, 0.0, 2.0, 0.5, 8), 30, 3);
        for (a, b) in one.values.iter().zip(&two.values) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn terminal_value_is_exact() {
        let spec = scalar_spec(0.0, 1.0, 0.0, 0.5, 6);
        let bm = sample_brownian(200, spec.grid, 1, 4).unwrap();
        let zero = ProfileControls::zeros(1, 200, 7);
        let x = integrate_forward(&spec, &zero, &bm, 0.0).unwrap();
        let y = compute_adjoint_regression(&spec, &x, &RegressionBasis::default()).unwrap();
        for p in 0..200 {
            assert_eq!(y.get(p, 6, 0), x.get(p, 6, 0));
        }
    }

    #[test]
    fn schemes_agree_on_the_brownian_slope() {
        let spec = scalar_spec(0.0, 1.0, 0.0, 0.5, 10);
        let bm = sample_brownian(20_000, spec.grid, 1, 5).unwrap();
        let zero = ProfileControls::zeros(1, 20_000, 11);
        let x = integrate_forward(&spec, &zero, &bm, 0.0).unwrap();
        let linear = RegressionBasis::new(1, false).unwrap();
        for scheme in [RegressionScheme::Direct, RegressionScheme::OneStep] {
            let y = compute_adjoint_regression(&spec, &x, &linear.with_scheme(scheme)).unwrap();
            let k = 5;
            let slope = (y.get(0, k, 0) - y.get(1, k, 0)) / (x.get(0, k, 0) - x.get(1, k, 0));
            assert!((slope - 1.5).abs() < 0.1, "{scheme:?} slope {slope}");
        }
    }

    #[test]
    fn too_few_paths_are_rejected() {
        let spec = scalar_spec(0.0, 1.0, 0.0, 0.5, 6);
        let bm = sample_brownian(20, spec.grid, 1, 4).unwrap();
        let zero = ProfileControls::zeros(1, 20, 7);
        let x = integrate_forward(&spec, &zero, &bm, 0.0).unwrap();
        assert!(compute_adjoint_regression(&spec, &x, &RegressionBasis::default()).is_err());
    }

    #[test]
    fn tower_property_holds_for_brownian_state() {
        let spec = scalar_spec(0.0, 1.0, 0.0, 0.5, 10);
        let problem = LqsProblem::from_spec(&spec).unwrap();
        let paths = 4000;
        let bm = sample_brownian(paths, spec.grid, 1, 9).unwrap();
        let zero = ProfileControls::zeros(1, paths, 11);
        let x = integrate_forward(&spec, &zero, &bm, 0.0).unwrap();
        let y = regress_adjoint(&problem, &x, &RegressionBasis::default()).unwrap();
        let dt = spec.grid.dt();
        let k = 4;
        let inputs: Vec<f64> = (0..paths).map(|p| x.get(p, k, 0)).collect();
        let target: Vec<f64> = (0..paths).map(|p| x.get(p, k, 0) * dt + y.get(p, k + 1, 0)).collect();
        let (_, fitted) = fit_node(k, &RegressionBasis::default(), &inputs, 1, &[target]).unwrap();
        for p in 0..paths {
            assert!((fitted[0][p] - y.get(p, k, 0)).abs() < 0.05 * (1.0 + x.get(p, k, 0).abs()));
        }
    }
}
