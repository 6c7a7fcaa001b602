//! Nested resimulation estimate of the adjoint at chosen nodes.
//!
//! From the state of an outer path at a checkpoint, fresh inner paths are
//! simulated to the horizon under a feedback policy, and the payload is
//! averaged over them. This is slow and only meant as a check of the
//! regression estimate.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{LqsgError, Result};
use crate::model::GameSpec;
use crate::paths::{stream_rng, ProfileControls, StatePaths};
use crate::problem::{dot, LqsProblem};
use crate::stats::MeanEstimate;

/// Control increments as a function of the current node and state.
pub trait FeedbackPolicy: Sync {
    /// `(dxi, dzeta)` of `player` at `node` given the pre-jump state `x`.
    fn increments(&self, player: usize, node: usize, x: &[f64]) -> (f64, f64);
}

/// Controls that depend on time only.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopPolicy {
    xi: Vec<Vec<f64>>,
    zeta: Vec<Vec<f64>>,
}

impl OpenLoopPolicy {
    pub fn zero(players: usize, nodes: usize) -> Self {
        Self { xi: vec![vec![0.0; nodes]; players], zeta: vec![vec![0.0; nodes]; players] }
    }

    /// Accepts controls only when every path carries the same increments.
    pub fn from_controls(controls: &ProfileControls) -> Result<Self> {
        let mut xi = Vec::new();
        let mut zeta = Vec::new();
        for c in &controls.players {
            for p in 1..c.paths {
                if c.xi_path(p) != c.xi_path(0) || c.zeta_path(p) != c.zeta_path(0) {
                    return Err(LqsgError::Unsupported(format!(
                        "controls of player {} vary across paths and cannot be replayed from a checkpoint",
                        c.player
                    )));
                }
            }
            xi.push(c.xi_path(0).to_vec());
            zeta.push(c.zeta_path(0).to_vec());
        }
        Ok(Self { xi, zeta })
    }
}

impl FeedbackPolicy for OpenLoopPolicy {
    fn increments(&self, player: usize, node: usize, _x: &[f64]) -> (f64, f64) {
        (self.xi[player][node], self.zeta[player][node])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NestedConfig {
    pub inner: usize,
    pub checkpoints: Vec<usize>,
    /// Outer paths at which to branch.
    pub outer_paths: Vec<usize>,
    pub sigma_floor: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NestedEstimate {
    pub node: usize,
    pub path: usize,
    pub player: usize,
    pub mean: f64,
    pub std_error: f64,
}

/// Nested estimates for every player at each `(checkpoint, outer path)` pair.
pub fn nested_estimates(
    problem: &LqsProblem,
    states: &StatePaths,
    policy: &dyn FeedbackPolicy,
    cfg: &NestedConfig,
) -> Result<Vec<NestedEstimate>> {
    if cfg.inner < 2 {
        return Err(LqsgError::InvalidParameter("nested estimate needs at least 2 inner paths".into()));
    }
    if problem.exogenous().is_some() && !problem.is_noise_free() {
        return Err(LqsgError::Unsupported("nested resimulation of a random exogenous process".into()));
    }
    let nodes = problem.grid().nodes();
    if let Some(&k) = cfg.checkpoints.iter().find(|&&k| k >= nodes) {
        return Err(LqsgError::InvalidParameter(format!("checkpoint {k} is beyond the horizon")));
    }
    if let Some(&p) = cfg.outer_paths.iter().find(|&&p| p >= states.paths) {
        return Err(LqsgError::InvalidParameter(format!("outer path {p} does not exist")));
    }
    let n = problem.players();
    let pairs: Vec<(usize, usize)> =
        cfg.checkpoints.iter().flat_map(|&k| cfg.outer_paths.iter().map(move |&p| (k, p))).collect();
    let results: Vec<Vec<NestedEstimate>> = pairs
        .par_iter()
        .enumerate()
        .map(|(pair_idx, &(k, p))| {
            let samples: Vec<Vec<f64>> = (0..cfg.inner)
                .map(|j| {
                    let stream = (pair_idx * cfg.inner + j) as u64;
                    inner_payload(problem, states.at(p, k), k, policy, cfg.sigma_floor, cfg.seed, stream)
                })
                .collect();
            (0..n)
                .map(|i| {
                    let xs: Vec<f64> = samples.iter().map(|s| s[i]).collect();
                    let e = MeanEstimate::from_samples(&xs);
                    NestedEstimate { node: k, path: p, player: i, mean: e.mean, std_error: e.std_error }
                })
                .collect()
        })
        .collect();
    Ok(results.into_iter().flatten().collect())
}

fn inner_payload(
    problem: &LqsProblem,
    start: &[f64],
    k0: usize,
    policy: &dyn FeedbackPolicy,
    floor: f64,
    seed: u64,
    stream: u64,
) -> Vec<f64> {
    let n = problem.players();
    let steps = problem.grid().steps();
    let dt = problem.grid().dt();
    let mut rng = stream_rng(seed, stream);
    let mut x = start.to_vec();
    let mut z = vec![0.0; problem.width()];
    let mut disc = vec![1.0; n];
    let mut acc = vec![0.0; n];
    for k in k0..steps {
        problem.augmented(&x, 0, k, &mut z);
        for i in 0..n {
            acc[i] += disc[i] * dot(problem.marginal_running(i, k), &z) * dt;
            disc[i] *= problem.growth(i, k);
        }
        let mut next = vec![0.0; n];
        for i in 0..n {
            let dw: f64 = StandardNormal.sample(&mut rng);
            let vol = problem.volatility(i, k).max(floor);
            next[i] = problem.growth(i, k) * x[i] + problem.drift(i, k) * dt + vol * dw * dt.sqrt();
        }
        for i in 0..n {
            let (u, w) = policy.increments(i, k + 1, &next);
            next[i] += u - w;
        }
        x = next;
    }
    problem.augmented(&x, 0, steps, &mut z);
    for i in 0..n {
        acc[i] += disc[i] * dot(problem.marginal_terminal(i), &z);
    }
    acc
}

/// Nested adjoint for time-only controls of a [`GameSpec`]; path-dependent controls are rejected.
pub fn compute_adjoint_nested(
    spec: &GameSpec,
    states: &StatePaths,
    controls: &ProfileControls,
    cfg: &NestedConfig,
) -> Result<Vec<NestedEstimate>> {
    let policy = OpenLoopPolicy::from_controls(controls)?;
    nested_estimates(&LqsProblem::from_spec(spec)?, states, &policy, cfg)
}
