//! Brownian sampling, controlled state simulation and Monte Carlo cost evaluation.
//!
//! Controls are atoms on the grid: `xi[path][k]` is the increment booked at
//! node `k`, applied before the state at that node is recorded. Node 0 holds
//! the jump at time zero, so `X_0 = x0 + dxi_0 - dzeta_0`. Between nodes the
//! linear drift is propagated with the factor `exp(b dt)`, which makes the
//! discrete integrating factor exact and the adjoint an exact gradient of the
//! discrete cost.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LqsgError, Result};
use crate::model::{GameSpec, TimeGrid};
use crate::problem::{quad_form, LqsProblem};
use crate::stats::MeanEstimate;

/// Gaussian increments `dW[path][step][dim]`, each with variance `dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPaths {
    paths: usize,
    steps: usize,
    dims: usize,
    dt: f64,
    seed: u64,
    increments: Vec<f64>,
}

impl BrownianPaths {
    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn get(&self, path: usize, step: usize, dim: usize) -> f64 {
        self.increments[(path * self.steps + step) * self.dims + dim]
    }

    /// All increments of one path, step-major.
    pub fn path(&self, path: usize) -> &[f64] {
        let len = self.steps * self.dims;
        &self.increments[path * len..(path + 1) * len]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }
}

/// Seeds an independent stream for `(seed, stream)`; results never depend on
/// which worker draws them.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn sample_brownian(paths: usize, grid: TimeGrid, dims: usize, seed: u64) -> Result<BrownianPaths> {
    if paths == 0 {
        return Err(LqsgError::InvalidParameter("path count must be at least 1".into()));
    }
    if dims == 0 {
        return Err(LqsgError::InvalidParameter("Brownian dimension must be at least 1".into()));
    }
    let steps = grid.steps();
    let dt = grid.dt();
    let scale = dt.sqrt();
    let mut increments = vec![0.0; paths * steps * dims];
    increments.par_chunks_mut(steps * dims).enumerate().for_each(|(p, chunk)| {
        let mut rng = stream_rng(seed, p as u64);
        for v in chunk.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z * scale;
        }
    });
    Ok(BrownianPaths { paths, steps, dims, dt, seed, increments })
}

/// `Gamma_{s,t} = exp(sum_{k: s <= k < t} b_k dt)`, and the reciprocal for `s > t`.
pub fn integrating_factor(b: &[f64], dt: f64, s: usize, t: usize) -> f64 {
    let (lo, hi, sign) = if s <= t { (s, t, 1.0) } else { (t, s, -1.0) };
    let integral: f64 = b[lo..hi].iter().sum::<f64>() * dt;
    (sign * integral).exp()
}

/// Increments of one player's controls on every path, `[path][node]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    pub player: usize,
    pub paths: usize,
    pub nodes: usize,
    pub xi: Vec<f64>,
    pub zeta: Vec<f64>,
}

impl ControlPath {
    pub fn zeros(player: usize, paths: usize, nodes: usize) -> Self {
        Self { player, paths, nodes, xi: vec![0.0; paths * nodes], zeta: vec![0.0; paths * nodes] }
    }

    /// Same increment vectors on every path.
    pub fn broadcast(player: usize, paths: usize, xi: &[f64], zeta: &[f64]) -> Result<Self> {
        if xi.len() != zeta.len() {
            return Err(LqsgError::Dimension("xi and zeta lengths differ".into()));
        }
        let nodes = xi.len();
        let mut out = Self::zeros(player, paths, nodes);
        for p in 0..paths {
            out.xi[p * nodes..(p + 1) * nodes].copy_from_slice(xi);
            out.zeta[p * nodes..(p + 1) * nodes].copy_from_slice(zeta);
        }
        Ok(out)
    }

    #[inline]
    pub fn xi_at(&self, path: usize, node: usize) -> f64 {
        self.xi[path * self.nodes + node]
    }

    #[inline]
    pub fn zeta_at(&self, path: usize, node: usize) -> f64 {
        self.zeta[path * self.nodes + node]
    }

    pub fn xi_path(&self, path: usize) -> &[f64] {
        &self.xi[path * self.nodes..(path + 1) * self.nodes]
    }

    pub fn zeta_path(&self, path: usize) -> &[f64] {
        &self.zeta[path * self.nodes..(path + 1) * self.nodes]
    }

    /// Rejects negative or non-finite increments.
    pub fn check_admissible(&self) -> Result<()> {
        if self.xi.len() != self.paths * self.nodes || self.zeta.len() != self.paths * self.nodes {
            return Err(LqsgError::Dimension(format!("control of player {} has inconsistent length", self.player)));
        }
        let bad = self.xi.iter().chain(&self.zeta).position(|&v| !(v.is_finite() && v >= 0.0));
        match bad {
            None => Ok(()),
            Some(idx) => Err(LqsgError::Inadmissible(format!(
                "player {} has increment {} at flat index {idx}",
                self.player,
                self.xi.iter().chain(&self.zeta).nth(idx).copied().unwrap_or(f64::NAN)
            ))),
        }
    }

    /// Per-path total variation `xi_T + zeta_T`.
    pub fn total_variation(&self) -> Vec<f64> {
        (0..self.paths).map(|p| self.xi_path(p).iter().sum::<f64>() + self.zeta_path(p).iter().sum::<f64>()).collect()
    }

    /// Empirical `E[ int |v_t|^2 dt + |v_T|^2 ]` for the net cumulative control.
    pub fn second_moment(&self, dt: f64) -> f64 {
        let per_path: Vec<f64> = (0..self.paths)
            .map(|p| {
                let mut v = 0.0;
                let mut acc = 0.0;
                for k in 0..self.nodes {
                    v += self.xi_at(p, k) - self.zeta_at(p, k);
                    if k + 1 < self.nodes {
                        acc += v * v * dt;
                    }
                }
                acc + v * v
            })
            .collect();
        per_path.iter().sum::<f64>() / self.paths as f64
    }

    /// Pathwise mean of the increments, as a single-path control.
    pub fn mean_path(&self) -> ControlPath {
        let mut out = ControlPath::zeros(self.player, 1, self.nodes);
        for k in 0..self.nodes {
            let (mut sx, mut sz) = (0.0, 0.0);
            for p in 0..self.paths {
                sx += self.xi_at(p, k);
                sz += self.zeta_at(p, k);
            }
            out.xi[k] = sx / self.paths as f64;
            out.zeta[k] = sz / self.paths as f64;
        }
        out
    }

    pub fn broadcast_to(&self, paths: usize) -> Result<ControlPath> {
        if self.paths != 1 {
            return Err(LqsgError::Dimension("only single-path controls can be broadcast".into()));
        }
        Self::broadcast(self.player, paths, &self.xi, &self.zeta)
    }
}

/// Controls of every player.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileControls {
    pub players: Vec<ControlPath>,
}

impl ProfileControls {
    pub fn zeros(players: usize, paths: usize, nodes: usize) -> Self {
        Self { players: (0..players).map(|i| ControlPath::zeros(i, paths, nodes)).collect() }
    }

    pub fn player_count(&self) -> usize {
        self.players.len()
    }

    pub fn paths(&self) -> usize {
        self.players.first().map_or(0, |c| c.paths)
    }

    pub fn nodes(&self) -> usize {
        self.players.first().map_or(0, |c| c.nodes)
    }

    pub fn player(&self, i: usize) -> &ControlPath {
        &self.players[i]
    }

    pub fn player_mut(&mut self, i: usize) -> &mut ControlPath {
        &mut self.players[i]
    }

    /// Replaces one player's control (unilateral deviation).
    pub fn with_player(&self, control: ControlPath) -> Self {
        let mut out = self.clone();
        let i = control.player;
        out.players[i] = control;
        out
    }

    pub fn check_shape(&self, players: usize, paths: usize, nodes: usize) -> Result<()> {
        if self.players.len() != players {
            return Err(LqsgError::Dimension(format!(
                "profile has {} players, expected {players}",
                self.players.len()
            )));
        }
        for (i, c) in self.players.iter().enumerate() {
            if c.player != i || c.paths != paths || c.nodes != nodes {
                return Err(LqsgError::Dimension(format!(
                    "control {i} is {}x{} for player {}, expected {paths}x{nodes} for player {i}",
                    c.paths, c.nodes, c.player
                )));
            }
        }
        Ok(())
    }

    pub fn check_admissible(&self) -> Result<()> {
        self.players.iter().try_for_each(ControlPath::check_admissible)
    }

    /// Root-mean-square over paths of the Euclidean distance between increment arrays.
    pub fn increment_distance(&self, other: &Self) -> f64 {
        let paths = self.paths().max(1);
        let mut total = 0.0;
        for (a, b) in self.players.iter().zip(&other.players) {
            total += a.xi.iter().zip(&b.xi).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            total += a.zeta.iter().zip(&b.zeta).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        }
        (total / paths as f64).sqrt()
    }

    /// Distance of the cumulative controls in the norm `(E[ int |.|^2 dt + |.|_T^2 ])^{1/2}`.
    pub fn cumulative_distance(&self, other: &Self, dt: f64) -> f64 {
        let paths = self.paths();
        let nodes = self.nodes();
        let mut total = 0.0;
        for (a, b) in self.players.iter().zip(&other.players) {
            for p in 0..paths {
                let (mut cx, mut cz) = (0.0, 0.0);
                for k in 0..nodes {
                    cx += a.xi_at(p, k) - b.xi_at(p, k);
                    cz += a.zeta_at(p, k) - b.zeta_at(p, k);
                    let w = if k + 1 < nodes { dt } else { 1.0 };
                    total += w * (cx * cx + cz * cz);
                }
            }
        }
        (total / paths.max(1) as f64).sqrt()
    }

    /// Pathwise mean profile, broadcast back to the original path count.
    pub fn mean_profile(&self) -> Result<Self> {
        let paths = self.paths();
        Ok(Self { players: self.players.iter().map(|c| c.mean_path().broadcast_to(paths)).collect::<Result<_>>()? })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["path", "node", "player", "xi", "zeta"])?;
        for c in &self.players {
            for p in 0..c.paths {
                for k in 0..c.nodes {
                    w.write_record(&[
                        p.to_string(),
                        k.to_string(),
                        c.player.to_string(),
                        format!("{:e}", c.xi_at(p, k)),
                        format!("{:e}", c.zeta_at(p, k)),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Controlled states `X[path][node][player]`, recorded after the node's jump.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePaths {
    pub paths: usize,
    pub nodes: usize,
    pub players: usize,
    pub values: Vec<f64>,
}

impl StatePaths {
    #[inline]
    pub fn get(&self, path: usize, node: usize, player: usize) -> f64 {
        self.values[(path * self.nodes + node) * self.players + player]
    }

    /// State vector of `path` at `node`.
    #[inline]
    pub fn at(&self, path: usize, node: usize) -> &[f64] {
        let start = (path * self.nodes + node) * self.players;
        &self.values[start..start + self.players]
    }

    pub fn path(&self, path: usize) -> &[f64] {
        let len = self.nodes * self.players;
        &self.values[path * len..(path + 1) * len]
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
}

pub(crate) fn check_inputs(problem: &LqsProblem, controls: &ProfileControls, bm: &BrownianPaths) -> Result<()> {
    let grid = problem.grid();
    if bm.dims() != problem.players() || bm.steps() != grid.steps() {
        return Err(LqsgError::Dimension(format!(
            "Brownian paths are {} steps x {} dims, problem needs {} x {}",
            bm.steps(),
            bm.dims(),
            grid.steps(),
            problem.players()
        )));
    }
    if let Some(p) = problem.pinned_paths() {
        if p != bm.paths() {
            return Err(LqsgError::Dimension(format!(
                "exogenous process has {p} paths, Brownian sample has {}",
                bm.paths()
            )));
        }
    }
    controls.check_shape(problem.players(), bm.paths(), grid.nodes())
}

/// Simulates one path into `out` (`nodes * players`).
pub(crate) fn simulate_path(
    problem: &LqsProblem,
    controls: &ProfileControls,
    bm: &BrownianPaths,
    floor: f64,
    p: usize,
    out: &mut [f64],
) {
    let n = problem.players();
    let steps = problem.grid().steps();
    let dt = problem.grid().dt();
    for i in 0..n {
        let c = controls.player(i);
        out[i] = problem.x0()[i] + c.xi_at(p, 0) - c.zeta_at(p, 0);
    }
    for k in 0..steps {
        for i in 0..n {
            let c = controls.player(i);
            let x = out[k * n + i];
            let vol = problem.volatility(i, k).max(floor);
            out[(k + 1) * n + i] =
                problem.growth(i, k) * x + problem.drift(i, k) * dt + vol * bm.get(p, k, i) + c.xi_at(p, k + 1)
                    - c.zeta_at(p, k + 1);
        }
    }
}

pub fn simulate(
    problem: &LqsProblem,
    controls: &ProfileControls,
    bm: &BrownianPaths,
    floor: f64,
) -> Result<StatePaths> {
    check_inputs(problem, controls, bm)?;
    if !(floor >= 0.0 && floor.is_finite()) {
        return Err(LqsgError::InvalidParameter(format!("volatility floor must be >= 0, got {floor}")));
    }
    let n = problem.players();
    let nodes = problem.grid().nodes();
    let paths = bm.paths();
    let mut values = vec![0.0; paths * nodes * n];
    values
        .par_chunks_mut(nodes * n)
        .enumerate()
        .for_each(|(p, chunk)| simulate_path(problem, controls, bm, floor, p, chunk));
    Ok(StatePaths { paths, nodes, players: n, values })
}

/// Forward Euler integration of the controlled state for a [`GameSpec`].
pub fn integrate_forward(
    spec: &GameSpec,
    controls: &ProfileControls,
    bm: &BrownianPaths,
    sigma_floor: f64,
) -> Result<StatePaths> {
    simulate(&LqsProblem::from_spec(spec)?, controls, bm, sigma_floor)
}

/// Cost of player `i` on one path.
pub(crate) fn path_cost(
    problem: &LqsProblem,
    i: usize,
    controls: &ProfileControls,
    states: &StatePaths,
    p: usize,
) -> f64 {
    let grid = problem.grid();
    let steps = grid.steps();
    let dt = grid.dt();
    let mut z = vec![0.0; problem.width()];
    let mut running = 0.0;
    for k in 0..steps {
        problem.augmented(states.at(p, k), p, k, &mut z);
        running += quad_form(problem.running(i, k), &z) * dt;
    }
    problem.augmented(states.at(p, steps), p, steps, &mut z);
    let terminal = quad_form(problem.terminal(i), &z);
    let c = controls.player(i);
    let mut action = 0.0;
    for k in 0..grid.nodes() {
        action += problem.c_plus(i, k) * c.xi_at(p, k) + problem.c_minus(i, k) * c.zeta_at(p, k);
    }
    running + terminal + action
}

/// Per-path realized costs of player `i`.
pub fn cost_paths(problem: &LqsProblem, i: usize, controls: &ProfileControls, states: &StatePaths) -> Result<Vec<f64>> {
    if i >= problem.players() {
        return Err(LqsgError::InvalidParameter(format!("no player {i}")));
    }
    if states.paths != controls.paths() || states.nodes != problem.grid().nodes() {
        return Err(LqsgError::Dimension("states and controls do not match".into()));
    }
    let costs: Vec<f64> =
        (0..states.paths).into_par_iter().map(|p| path_cost(problem, i, controls, states, p)).collect();
    if let Some(p) = costs.iter().position(|c| !c.is_finite()) {
        return Err(LqsgError::NonFinite(format!("cost of player {i} on path {p}")));
    }
    Ok(costs)
}

pub fn cost_estimate(
    problem: &LqsProblem,
    i: usize,
    controls: &ProfileControls,
    states: &StatePaths,
) -> Result<MeanEstimate> {
    Ok(MeanEstimate::from_samples(&cost_paths(problem, i, controls, states)?))
}

/// Monte Carlo estimate of player `i`'s expected cost.
pub fn cost(spec: &GameSpec, i: usize, controls: &ProfileControls, states: &StatePaths) -> Result<f64> {
    let problem = LqsProblem::from_spec(spec)?;
    Ok(cost_estimate(&problem, i, controls, states)?.mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn one_player(a: f64, b: f64, sigma: f64, x0: f64, q: f64, c: f64, steps: usize) -> GameSpec {
        GameSpec::constant(
            TimeGrid::new(1.0, steps).unwrap(),
            &[a],
            &[b],
            &[sigma],
            &[x0],
            &[DMatrix::from_element(1, 1, q)],
            &[c],
            &[c],
        )
        .unwrap()
    }

    #[test]
    fn brownian_is_reproducible_and_rejects_zero_paths() {
        let grid = TimeGrid::new(1.0, 2).unwrap();
        let a = sample_brownian(4, grid, 1, 7).unwrap();
        let b = sample_brownian(4, grid, 1, 7).unwrap();
        assert_eq!(a, b);
        assert!(sample_brownian(0, grid, 1, 7).is_err());
        assert_ne!(a, sample_brownian(4, grid, 1, 8).unwrap());
    }

    #[test]
    fn brownian_does_not_depend_on_worker_count() {
        let grid = TimeGrid::new(1.0, 5).unwrap();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let many = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let a = one.install(|| sample_brownian(64, grid, 2, 7).unwrap());
        let b = many.install(|| sample_brownian(64, grid, 2, 7).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn integrating_factor_examples() {
        let zero = vec![0.0; 10];
        assert_eq!(integrating_factor(&zero, 0.1, 0, 10), 1.0);
        assert_eq!(integrating_factor(&zero, 0.1, 7, 2), 1.0);
        let half = vec![0.5; 4];
        assert!((integrating_factor(&half, 0.5, 0, 4) - std::f64::consts::E).abs() < 1e-12);
        let m = 1000;
        let ramp: Vec<f64> = (0..=m).map(|k| k as f64 / m as f64).collect();
        let g = integrating_factor(&ramp, 1.0 / m as f64, 0, m);
        assert!((g - 0.5f64.exp()).abs() < 1e-3);
    }

    #[test]
    fn frozen_dynamics_stay_at_initial_state() {
        let spec = one_player(0.0, 0.0, 0.0, 3.0, 1.0, 1.0, 5);
        let bm = sample_brownian(3, spec.grid, 1, 1).unwrap();
        let controls = ProfileControls::zeros(1, 3, 6);
        let x = integrate_forward(&spec, &controls, &bm, 0.0).unwrap();
        assert!(x.values.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn time_zero_jump_shifts_every_node() {
        let spec = one_player(0.0, 0.0, 0.0, 3.0, 1.0, 1.0, 5);
        let bm = sample_brownian(2, spec.grid, 1, 1).unwrap();
        let mut controls = ProfileControls::zeros(1, 2, 6);
        for p in 0..2 {
            controls.player_mut(0).xi[p * 6] = 1.0;
        }
        let x = integrate_forward(&spec, &controls, &bm, 0.0).unwrap();
        assert!(x.values.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn constant_drift_is_integrated_exactly() {
        let spec = one_player(1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 100);
        let bm = sample_brownian(1, spec.grid, 1, 1).unwrap();
        let x = integrate_forward(&spec, &ProfileControls::zeros(1, 1, 101), &bm, 0.0).unwrap();
        assert!((x.get(0, 100, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cost_examples() {
        let spec = one_player(0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 7);
        let bm = sample_brownian(2, spec.grid, 1, 3).unwrap();
        let zero = ProfileControls::zeros(1, 2, 8);
        let x = integrate_forward(&spec, &zero, &bm, 0.0).unwrap();
        assert_eq!(cost(&spec, 0, &zero, &x).unwrap(), 0.0);

        let spec = one_player(0.0, 0.0, 0.0, 1.0, 1.0, 3.0, 7);
        let x = integrate_forward(&spec, &zero, &bm, 0.0).unwrap();
        assert!((cost(&spec, 0, &zero, &x).unwrap() - 2.0).abs() < 1e-12);

        let mut jump = zero.clone();
        for p in 0..2 {
            jump.player_mut(0).xi[p * 8] = 1.0;
        }
        let x = integrate_forward(&spec, &jump, &bm, 0.0).unwrap();
        assert!((cost(&spec, 0, &jump, &x).unwrap() - 11.0).abs() < 1e-12);
    }

    #[test]
    fn floor_only_raises_volatility() {
        let spec = one_player(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 4);
        let bm = sample_brownian(1, spec.grid, 1, 5).unwrap();
        let zero = ProfileControls::zeros(1, 1, 5);
        let x = integrate_forward(&spec, &zero, &bm, 0.5).unwrap();
        let mut expected = 0.0;
        for k in 0..4 {
            expected += 0.5 * bm.get(0, k, 0);
            assert!((x.get(0, k + 1, 0) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_dimensions_are_rejected() {
        let spec = one_player(0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 4);
        let bm = sample_brownian(2, spec.grid, 2, 5).unwrap();
        let zero = ProfileControls::zeros(1, 2, 5);
        assert!(matches!(integrate_forward(&spec, &zero, &bm, 0.0), Err(LqsgError::Dimension(_))));
    }
}
