//! Exact oracle for noise-free games.
//!
//! Without noise the state is an affine function of the increment vectors, so
//! each player's cost is a convex quadratic in its own increments
//! `(dxi_0..dxi_M, dzeta_0..dzeta_M) >= 0`. Best responses are solved by
//! projected gradient and the Nash profile by Gauss-Seidel sweeps. The
//! gradient at the solution is the vector of KKT multipliers, which equals
//! `(Y + c+, -Y + c-)` of the discrete adjoint.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LqsgError, Result};
use crate::model::GameSpec;
use crate::paths::{ControlPath, ProfileControls};
use crate::problem::LqsProblem;

pub const KKT_TOL: f64 = 1e-8;
const MAX_PG_ITERS: usize = 100_000;
const MAX_NASH_SWEEPS: usize = 10_000;

/// Player `i` pays `v A^i v + 2 b^i . v + const^i + c+ . xi^i + c- . zeta^i`, where
/// `v` stacks the net increments `xi^j - zeta^j` of all players, player-major.
#[derive(Debug, Clone)]
pub struct QpGame {
    players: usize,
    nodes: usize,
    allow_decrease: bool,
    quad: Vec<DMatrix<f64>>,
    lin: Vec<DVector<f64>>,
    constant: Vec<f64>,
    c_plus: Vec<Vec<f64>>,
    c_minus: Vec<Vec<f64>>,
}

/// Increments of all players, `xi[i][k]` and `zeta[i][k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileIncrements {
    pub xi: Vec<Vec<f64>>,
    pub zeta: Vec<Vec<f64>>,
}

impl ProfileIncrements {
    pub fn zeros(players: usize, nodes: usize) -> Self {
        Self { xi: vec![vec![0.0; nodes]; players], zeta: vec![vec![0.0; nodes]; players] }
    }

    pub fn total_variation(&self) -> f64 {
        self.xi.iter().chain(&self.zeta).flatten().sum()
    }

    /// Sum of absolute increment differences.
    pub fn l1_distance(&self, other: &Self) -> f64 {
        let pairs = self.xi.iter().zip(&other.xi).chain(self.zeta.iter().zip(&other.zeta));
        pairs.map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()).sum()
    }

    fn max_abs_distance(&self, other: &Self) -> f64 {
        let pairs = self.xi.iter().zip(&other.xi).chain(self.zeta.iter().zip(&other.zeta));
        pairs.flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max)
    }

    /// Same increments on every one of `paths` Monte Carlo paths.
    pub fn to_controls(&self, paths: usize) -> Result<ProfileControls> {
        Ok(ProfileControls {
            players: (0..self.xi.len())
                .map(|i| ControlPath::broadcast(i, paths, &self.xi[i], &self.zeta[i]))
                .collect::<Result<_>>()?,
        })
    }

    /// Pathwise mean of a profile.
    pub fn from_controls(controls: &ProfileControls) -> Self {
        let means: Vec<ControlPath> = controls.players.iter().map(ControlPath::mean_path).collect();
        Self { xi: means.iter().map(|c| c.xi.clone()).collect(), zeta: means.iter().map(|c| c.zeta.clone()).collect() }
    }
}

impl QpGame {
    pub fn players(&self) -> usize {
        self.players
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    fn net(&self, x: &ProfileIncrements) -> DVector<f64> {
        DVector::from_iterator(
            self.players * self.nodes,
            (0..self.players).flat_map(|j| (0..self.nodes).map(move |k| x.xi[j][k] - x.zeta[j][k])),
        )
    }

    /// Cost of player `i` at a profile.
    pub fn value(&self, i: usize, x: &ProfileIncrements) -> f64 {
        let v = self.net(x);
        let quad = v.dot(&(&self.quad[i] * &v));
        let action: f64 =
            (0..self.nodes).map(|k| self.c_plus[i][k] * x.xi[i][k] + self.c_minus[i][k] * x.zeta[i][k]).sum();
        quad + 2.0 * self.lin[i].dot(&v) + self.constant[i] + action
    }

    /// Derivative of player `i`'s state cost in its own net increments; the deterministic adjoint `Y^i`.
    pub fn adjoint(&self, i: usize, x: &ProfileIncrements) -> Vec<f64> {
        let v = self.net(x);
        let g = 2.0 * (&self.quad[i] * &v) + 2.0 * &self.lin[i];
        (0..self.nodes).map(|k| g[i * self.nodes + k]).collect()
    }

    /// KKT multipliers `(Y + c+, -Y + c-)` of player `i`.
    pub fn multipliers(&self, i: usize, x: &ProfileIncrements) -> (Vec<f64>, Vec<f64>) {
        let y = self.adjoint(i, x);
        let up = (0..self.nodes).map(|k| y[k] + self.c_plus[i][k]).collect();
        let down = (0..self.nodes).map(|k| -y[k] + self.c_minus[i][k]).collect();
        (up, down)
    }

    fn kkt(&self, i: usize, x: &ProfileIncrements) -> KktResidual {
        let (up, down) = self.multipliers(i, x);
        let mut projected = 0.0f64;
        let mut min_gradient = f64::INFINITY;
        let mut complementarity = 0.0;
        let mut check = |g: f64, v: f64| {
            projected = projected.max((v - (v - g).max(0.0)).abs());
            min_gradient = min_gradient.min(g);
            complementarity += g * v;
        };
        for k in 0..self.nodes {
            check(up[k], x.xi[i][k]);
            if self.allow_decrease {
                check(down[k], x.zeta[i][k]);
            }
        }
        KktResidual { player: i, projected_gradient: projected, min_gradient, complementarity }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    pub player: usize,
    /// `max |x - max(0, x - g)|`, zero exactly at a KKT point.
    pub projected_gradient: f64,
    pub min_gradient: f64,
    /// `g . x`.
    pub complementarity: f64,
}

/// Builds the quadratic forms from the exact noise-free state recursion.
pub fn assemble_qp_problem(problem: &LqsProblem) -> Result<QpGame> {
    if !problem.is_noise_free() {
        return Err(LqsgError::Unsupported("the oracle needs a noise-free problem".into()));
    }
    let problem = problem.single_path()?;
    let grid = problem.grid();
    let n = problem.players();
    let nodes = grid.nodes();
    let steps = grid.steps();
    let dt = grid.dt();
    let width = problem.width();
    let parts = problem.parts();
    let growth: Vec<Vec<f64>> = parts.b.iter().map(|row| row.iter().map(|b| (b * dt).exp()).collect()).collect();
    // influence[j][k][l]: effect on X^j_k of a unit increment of player j at node l <= k.
    let influence: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|j| {
            let mut rows = vec![vec![0.0; nodes]; nodes];
            for k in 0..nodes {
                rows[k][k] = 1.0;
                if k > 0 {
                    for l in 0..k {
                        rows[k][l] = rows[k - 1][l] * growth[j][k - 1];
                    }
                }
            }
            rows
        })
        .collect();
    let mut base = vec![vec![0.0; width]; nodes];
    for j in 0..n {
        base[0][j] = parts.x0[j];
        for k in 0..steps {
            base[k + 1][j] = growth[j][k] * base[k][j] + parts.a[j][k] * dt;
        }
    }
    if let Some(exo) = problem.exogenous() {
        for (k, row) in base.iter_mut().enumerate() {
            row[n] = exo.get(0, k);
        }
    }
    let dim = n * nodes;
    let mut quad = Vec::with_capacity(n);
    let mut lin = Vec::with_capacity(n);
    let mut constant = Vec::with_capacity(n);
    for i in 0..n {
        let mut a = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        let mut c = 0.0;
        for k in 0..nodes {
            let (m, w) = if k < steps { (&parts.running[i][k], dt) } else { (&parts.terminal[i], 1.0) };
            let sym = (m + m.transpose()) * 0.5;
            let zb = DVector::from_column_slice(&base[k]);
            c += w * zb.dot(&(&sym * &zb));
            let rz = &sym * &zb;
            for aj in 0..n {
                for l in 0..=k {
                    b[aj * nodes + l] += w * rz[aj] * influence[aj][k][l];
                }
                for bj in 0..n {
                    let s = sym[(aj, bj)];
                    if s == 0.0 {
                        continue;
                    }
                    for l in 0..=k {
                        let left = w * s * influence[aj][k][l];
                        for mm in 0..=k {
                            a[(aj * nodes + l, bj * nodes + mm)] += left * influence[bj][k][mm];
                        }
                    }
                }
            }
        }
        quad.push(a);
        lin.push(b);
        constant.push(c);
    }
    Ok(QpGame {
        players: n,
        nodes,
        allow_decrease: problem.allow_decrease(),
        quad,
        lin,
        constant,
        c_plus: parts.c_plus.clone(),
        c_minus: parts.c_minus.clone(),
    })
}

pub fn assemble_qp(spec: &GameSpec) -> Result<QpGame> {
    if !spec.is_noise_free() {
        return Err(LqsgError::Unsupported("the oracle needs sigma = 0 at every node".into()));
    }
    assemble_qp_problem(&LqsProblem::from_spec(spec)?)
}

/// Own-increment best response of player `i`: projected-gradient steps with
/// Barzilai-Borwein trial lengths and Armijo backtracking, each followed by a
/// Newton step on the currently free variables.
pub fn qp_best_response(game: &QpGame, i: usize, profile: &ProfileIncrements) -> Result<ProfileIncrements> {
    if i >= game.players {
        return Err(LqsgError::InvalidParameter(format!("no player {i}")));
    }
    let nodes = game.nodes;
    let dim = 2 * nodes;
    let block = game.quad[i].view((i * nodes, i * nodes), (nodes, nodes)).into_owned();
    let hessian = DMatrix::from_fn(dim, dim, |r, c| {
        let sign = if (r < nodes) == (c < nodes) { 2.0 } else { -2.0 };
        sign * block[(r % nodes, c % nodes)]
    });
    let lipschitz = hessian.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut step = if lipschitz > 0.0 { 1.0 / lipschitz } else { 1.0 };
    let gradient = |x: &ProfileIncrements| -> Vec<f64> {
        let (up, down) = game.multipliers(i, x);
        let mut g = up;
        if game.allow_decrease {
            g.extend(down);
        } else {
            g.extend(std::iter::repeat_n(0.0, nodes));
        }
        g
    };
    let unpack = |x: &mut ProfileIncrements, y: &[f64]| {
        x.xi[i].copy_from_slice(&y[..nodes]);
        x.zeta[i].copy_from_slice(&y[nodes..]);
    };
    let mut x = profile.clone();
    let mut y: Vec<f64> = x.xi[i].iter().chain(&x.zeta[i]).map(|v| v.max(0.0)).collect();
    if !game.allow_decrease {
        y[nodes..].iter_mut().for_each(|v| *v = 0.0);
    }
    unpack(&mut x, &y);
    let mut g = gradient(&x);
    // Projected search along `direction` from `y`, halving until the Armijo
    // condition holds. The objective change is evaluated from the exact
    // quadratic expansion, which stays accurate below rounding of the value.
    let search = |y: &[f64], g: &[f64], direction: &[f64], mut alpha: f64, x: &ProfileIncrements| {
        while alpha > 1e-300 {
            let mut trial: Vec<f64> = y.iter().zip(direction).map(|(v, d)| (v + alpha * d).max(0.0)).collect();
            if !game.allow_decrease {
                trial[nodes..].iter_mut().for_each(|v| *v = 0.0);
            }
            let s = DVector::from_iterator(dim, trial.iter().zip(y).map(|(t, v)| t - v));
            let linear: f64 = g.iter().zip(s.iter()).map(|(a, b)| a * b).sum();
            let change = linear + 0.5 * s.dot(&(&hessian * &s));
            if change <= 1e-4 * linear {
                let mut xt = x.clone();
                unpack(&mut xt, &trial);
                return Some((trial, xt, change, alpha));
            }
            alpha *= 0.5;
        }
        None
    };
    for _ in 0..MAX_PG_ITERS {
        let residual = y.iter().zip(&g).map(|(v, gk)| (v - (v - gk).max(0.0)).abs()).fold(0.0, f64::max);
        if residual < KKT_TOL {
            return Ok(x);
        }
        let descent: Vec<f64> = g.iter().map(|v| -v).collect();
        let Some((trial, xt, _, alpha)) = search(&y, &g, &descent, step, &x) else {
            break;
        };
        let gt = gradient(&xt);
        let s: Vec<f64> = trial.iter().zip(&y).map(|(a, b)| a - b).collect();
        let r: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let sr: f64 = s.iter().zip(&r).map(|(a, b)| a * b).sum();
        step = if sr > 0.0 { (ss / sr).clamp(1e-12, 1e12) } else { alpha * 2.0 };
        (y, x, g) = (trial, xt, gt);

        let free: Vec<usize> = (0..dim).filter(|&k| y[k] > 0.0 || g[k] < 0.0).collect();
        if free.is_empty() {
            continue;
        }
        let mut h = DMatrix::from_fn(free.len(), free.len(), |r, c| hessian[(free[r], free[c])]);
        let ridge = 1e-12 * (1.0 + h.trace() / free.len() as f64);
        for d in 0..free.len() {
            h[(d, d)] += ridge;
        }
        if let Some(ch) = h.cholesky() {
            let rhs = DVector::from_iterator(free.len(), free.iter().map(|&k| -g[k]));
            let d_free = ch.solve(&rhs);
            let mut direction = vec![0.0; dim];
            for (slot, &k) in free.iter().enumerate() {
                direction[k] = d_free[slot];
            }
            if let Some((trial, xt, change, _)) = search(&y, &g, &direction, 1.0, &x) {
                if change < 0.0 {
                    g = gradient(&xt);
                    (y, x) = (trial, xt);
                }
            }
        }
    }
    let k = game.kkt(i, &x);
    Err(LqsgError::NoConvergence { iterations: MAX_PG_ITERS, residual: k.projected_gradient })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NashCertificate {
    pub kkt: Vec<KktResidual>,
    pub costs: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleSolution {
    pub increments: ProfileIncrements,
    pub certificate: NashCertificate,
}

/// Gauss-Seidel best-response sweeps until the profile moves by less than [`KKT_TOL`].
pub fn qp_nash(game: &QpGame) -> Result<OracleSolution> {
    let mut x = ProfileIncrements::zeros(game.players, game.nodes);
    let mut history = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < MAX_NASH_SWEEPS {
        let before = x.clone();
        for i in 0..game.players {
            x = qp_best_response(game, i, &x)?;
        }
        sweeps += 1;
        let change = x.max_abs_distance(&before);
        history.push(change);
        if change < KKT_TOL {
            converged = true;
            break;
        }
    }
    let certificate = NashCertificate {
        kkt: (0..game.players).map(|i| game.kkt(i, &x)).collect(),
        costs: (0..game.players).map(|i| game.value(i, &x)).collect(),
        sweeps,
        converged,
        residual_history: history,
    };
    Ok(OracleSolution { increments: x, certificate })
}

/// Golden file: the oracle solution with the hash of the spec it solves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GoldenFile {
    pub spec_hash: String,
    pub increments: ProfileIncrements,
    pub costs: Vec<f64>,
    pub kkt: Vec<KktResidual>,
}

impl GoldenFile {
    pub fn new(spec_hash: String, solution: &OracleSolution) -> Self {
        Self {
            spec_hash,
            increments: solution.increments.clone(),
            costs: solution.certificate.costs.clone(),
            kkt: solution.certificate.kkt.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeGrid;
    use crate::paths::{integrate_forward, sample_brownian};
    use nalgebra::DMatrix;

    fn single(x0: f64, c: f64, steps: usize) -> GameSpec {
        GameSpec::constant(
            TimeGrid::new(1.0, steps).unwrap(),
            &[0.0],
            &[0.0],
            &[0.0],
            &[x0],
            &[DMatrix::from_element(1, 1, 1.0)],
            &[c],
            &[c],
        )
        .unwrap()
    }

    #[test]
    fn toy_qp_matches_hand_expansion() {
        // M = 1, dt = 1: J = (x0 + v0)^2 + (x0 + v0 + v1)^2 + c (xi + zeta).
        let spec = single(1.0, 0.3, 1);
        let game = assemble_qp(&spec).unwrap();
        let x = ProfileIncrements { xi: vec![vec![0.2, 0.0]], zeta: vec![vec![0.0, 0.5]] };
        let (v0, v1) = (0.2f64, -0.5f64);
        let hand = (1.0 + v0).powi(2) + (1.0 + v0 + v1).powi(2) + 0.3 * 0.7;
        assert!((game.value(0, &x) - hand).abs() < 1e-14);
    }

    #[test]
    fn qp_value_matches_simulated_cost() {
        let spec = GameSpec::constant(
            TimeGrid::new(1.0, 6).unwrap(),
            &[0.4, -0.2],
            &[0.3, -0.5],
            &[0.0, 0.0],
            &[1.0, -1.0],
            &[
                DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 0.3]),
                DMatrix::from_row_slice(2, 2, &[0.1, -0.4, -0.4, 1.5]),
            ],
            &[0.5, 0.7],
            &[0.6, 0.2],
        )
        .unwrap();
        let game = assemble_qp(&spec).unwrap();
        let x = ProfileIncrements {
            xi: vec![vec![0.1, 0.0, 0.3, 0.0, 0.2, 0.0, 0.1], vec![0.0; 7]],
            zeta: vec![vec![0.0; 7], vec![0.4, 0.1, 0.0, 0.0, 0.0, 0.3, 0.0]],
        };
        let controls = x.to_controls(1).unwrap();
        let bm = sample_brownian(1, spec.grid, 2, 1).unwrap();
        let states = integrate_forward(&spec, &controls, &bm, 0.0).unwrap();
        for i in 0..2 {
            let mc = crate::paths::cost(&spec, i, &controls, &states).unwrap();
            assert!((game.value(i, &x) - mc).abs() < 1e-10 * (1.0 + mc.abs()));
        }
    }

    #[test]
    fn zero_is_optimal_at_rest() {
        let game = assemble_qp(&single(0.0, 0.5, 10)).unwrap();
        let sol = qp_nash(&game).unwrap();
        assert_eq!(sol.increments.total_variation(), 0.0);
        let (up, down) = game.multipliers(0, &sol.increments);
        assert!(up.iter().chain(&down).all(|&g| (g - 0.5).abs() < 1e-15));
    }

    #[test]
    fn displaced_state_is_pushed_down_at_once() {
        let game = assemble_qp(&single(2.0, 0.1, 50)).unwrap();
        let sol = qp_nash(&game).unwrap();
        assert!(sol.certificate.converged);
        assert!(sol.certificate.costs[0] < 8.0);
        assert!(sol.increments.zeta[0][0] > 1.5);
        assert!(sol.certificate.kkt[0].projected_gradient < KKT_TOL);
    }

    #[test]
    fn stochastic_spec_is_rejected() {
        let mut spec = single(2.0, 0.1, 5);
        spec.sigma[0][0] = 0.1;
        assert!(matches!(assemble_qp(&spec), Err(LqsgError::Unsupported(_))));
    }
}
