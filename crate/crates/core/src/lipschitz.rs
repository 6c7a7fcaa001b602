//! Games with rate-capped controls: bang-bang feedback, best responses and Nash sweeps.
//!
//! In the capped game every increment lies in `[0, n dt]`, including the
//! atoms at time zero and at the horizon, so that letting `n` grow recovers
//! the singular game on the same grid. The volatility is floored at `1/n`.
//!
//! A best response is a damped fixed point of the bang-bang feedback on the
//! regressed adjoint. Each iteration makes one forward pass per path: at
//! node `k` the adjoint estimate is shifted by `h_k D_k`, where `D_k` is the
//! displacement of the player's own state caused by earlier changes in the
//! same pass and `h_k` the own curvature, which is exact for this linear
//! model. The increment moves toward the bang-bang target by the Newton
//! step `|Y + c| / (h_k |target - old|)` capped at one, so it never passes
//! the point where the slack changes sign, and the move is then scaled by
//! `damping`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{regress_players, RegressionBasis};
use crate::error::{LqsgError, Result};
use crate::model::GameSpec;
use crate::paths::{cost_paths, simulate, BrownianPaths, ControlPath, ProfileControls};
use crate::problem::{quad_form, LqsProblem};
use crate::stats::MeanEstimate;

/// Curvatures at or below this are treated as zero (pure damped bang-bang).
const FLAT_CURVATURE: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeedbackParams {
    /// Relaxation factor applied to each Newton move.
    pub damping: f64,
    pub max_fixed_point_iters: usize,
    /// Relative root-mean-square increment change that ends a best response.
    pub fp_tol: f64,
    pub max_sweeps: usize,
    /// Relative root-mean-square profile change that ends the Nash loop.
    pub sweep_tol: f64,
    /// The Nash loop stalls when the best residual of the last `stall_window`
    /// sweeps is not 10% below the best one before; it then returns the
    /// average of those sweeps. Zero disables the rule.
    pub stall_window: usize,
    pub basis: RegressionBasis,
}

impl Default for FeedbackParams {
    fn default() -> Self {
        Self {
            damping: 1.0,
            max_fixed_point_iters: 10,
            fp_tol: 1e-6,
            max_sweeps: 200,
            sweep_tol: 1e-6,
            stall_window: 20,
            basis: RegressionBasis::default(),
        }
    }
}

impl FeedbackParams {
    pub fn check(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(LqsgError::InvalidParameter(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.fp_tol > 0.0 && self.sweep_tol > 0.0) {
            return Err(LqsgError::InvalidParameter("tolerances must be positive".into()));
        }
        if self.stall_window == 1 {
            return Err(LqsgError::InvalidParameter("stall window must be 0 or at least 2".into()));
        }
        if self.max_fixed_point_iters == 0 || self.max_sweeps == 0 {
            return Err(LqsgError::InvalidParameter("iteration caps must be positive".into()));
        }
        Ok(())
    }
}

fn check_rate(n: f64) -> Result<()> {
    if n > 0.0 && n.is_finite() {
        Ok(())
    } else {
        Err(LqsgError::InvalidParameter(format!("rate cap n must be positive, got {n}")))
    }
}

/// `H^{i,n} = sum_j (a_j + b_j x_j + u_j - w_j) y_j + x Q^i x + c+ u_i + c- w_i` at `node`.
pub fn pre_hamiltonian(
    spec: &GameSpec,
    i: usize,
    node: usize,
    n: f64,
    x: &[f64],
    u: &[f64],
    w: &[f64],
    y: &[f64],
) -> Result<f64> {
    check_rate(n)?;
    let players = spec.players;
    if [x.len(), u.len(), w.len(), y.len()].iter().any(|&l| l != players) || i >= players {
        return Err(LqsgError::Dimension(format!("pre-Hamiltonian needs {players}-vectors")));
    }
    if node >= spec.grid.nodes() {
        return Err(LqsgError::InvalidParameter(format!("node {node} is beyond the horizon")));
    }
    if u.iter().chain(w).any(|&r| !(0.0..=n).contains(&r)) {
        return Err(LqsgError::InvalidParameter(format!("rates must lie in [0, {n}]")));
    }
    let mut h = 0.0;
    for j in 0..players {
        h += (spec.a[j][node] + spec.b[j][node] * x[j] + u[j] - w[j]) * y[j];
    }
    h += quad_form(&spec.q[i][node], x);
    Ok(h + spec.c_plus[i][node] * u[i] + spec.c_minus[i][node] * w[i])
}

/// Minimizing rates `(u, w)` of the pre-Hamiltonian in the own control; ties choose inaction.
pub fn bang_bang_feedback(y: f64, c_plus: f64, c_minus: f64, n: f64) -> (f64, f64) {
    let u = if y + c_plus < 0.0 { n } else { 0.0 };
    let w = if -y + c_minus < 0.0 { n } else { 0.0 };
    (u, w)
}

/// Largest admissible increment per node of the capped game.
pub fn increment_caps(problem: &LqsProblem, n: f64) -> Vec<f64> {
    let grid = problem.grid();
    vec![n * grid.dt(); grid.nodes()]
}

/// Clips every increment of `controls` into the caps of the rate-`n` game.
pub fn clip_to_caps(problem: &LqsProblem, controls: &mut ProfileControls, n: f64) {
    let caps = increment_caps(problem, n);
    let nodes = caps.len();
    for c in &mut controls.players {
        for (idx, v) in c.xi.iter_mut().enumerate() {
            *v = v.clamp(0.0, caps[idx % nodes]);
        }
        for (idx, v) in c.zeta.iter_mut().enumerate() {
            *v = if problem.allow_decrease() { v.clamp(0.0, caps[idx % nodes]) } else { 0.0 };
        }
    }
}

/// Moves `old` toward the bang-bang target, stopping where the slack would change sign.
#[inline]
fn newton_step(old: f64, slack: f64, curvature: f64, cap: f64) -> f64 {
    let target = if slack < 0.0 { cap } else { 0.0 };
    let step = target - old;
    if slack == 0.0 || step == 0.0 {
        return old;
    }
    let theta = if curvature > FLAT_CURVATURE { (slack.abs() / (curvature * step.abs())).min(1.0) } else { 1.0 };
    (old + theta * step).clamp(0.0, cap)
}

/// One feedback pass for player `i`; returns the increment change relative to `1 +` the control size.
fn feedback_pass(
    problem: &LqsProblem,
    i: usize,
    profile: &mut ProfileControls,
    bm: &BrownianPaths,
    n: f64,
    params: &FeedbackParams,
) -> Result<f64> {
    let floor = 1.0 / n;
    let states = simulate(problem, profile, bm, floor)?;
    let (ys, _, _) = regress_players(problem, &states, &params.basis, &[i])?;
    let y = &ys[0];
    let caps = increment_caps(problem, n);
    let nodes = caps.len();
    let h = problem.own_curvature(i);
    let c_plus: Vec<f64> = (0..nodes).map(|k| problem.c_plus(i, k)).collect();
    let c_minus: Vec<f64> = (0..nodes).map(|k| problem.c_minus(i, k)).collect();
    let growth: Vec<f64> = (0..nodes - 1).map(|k| problem.growth(i, k)).collect();
    let two_sided = problem.allow_decrease();
    let damping = params.damping;
    let control = profile.player_mut(i);
    let changes: Vec<(f64, f64)> = control
        .xi
        .par_chunks_mut(nodes)
        .zip(control.zeta.par_chunks_mut(nodes))
        .enumerate()
        .map(|(p, (xi, zeta))| {
            let yp = &y[p * nodes..(p + 1) * nodes];
            let mut shift = 0.0;
            let mut change = 0.0;
            let mut size = 0.0;
            for k in 0..nodes {
                if k > 0 {
                    shift *= growth[k - 1];
                }
                let yk = yp[k] + h[k] * shift;
                let target_xi = newton_step(xi[k], yk + c_plus[k], h[k], caps[k]);
                let dxi = target_xi - xi[k];
                let mut dzeta = 0.0;
                if two_sided {
                    let yk = yk + h[k] * dxi;
                    dzeta = newton_step(zeta[k], -yk + c_minus[k], h[k], caps[k]) - zeta[k];
                }
                shift += dxi - dzeta;
                xi[k] += damping * dxi;
                zeta[k] += damping * dzeta;
                change += (damping * dxi).powi(2) + (damping * dzeta).powi(2);
                size += xi[k] * xi[k] + zeta[k] * zeta[k];
            }
            (change, size)
        })
        .collect();
    let paths = bm.paths() as f64;
    let change = (changes.iter().map(|c| c.0).sum::<f64>() / paths).sqrt();
    let size = (changes.iter().map(|c| c.1).sum::<f64>() / paths).sqrt();
    Ok(change / (1.0 + size))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestResponseDiagnostics {
    pub player: usize,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Cost in the capped game with the floored volatility.
    pub cost: MeanEstimate,
    pub zero_control_cost: MeanEstimate,
    /// The iterate cost more than the zero control beyond three standard errors and was replaced by it.
    pub reset_to_zero: bool,
}

#[derive(Debug, Clone)]
pub struct BestResponse {
    pub control: ControlPath,
    pub diagnostics: BestResponseDiagnostics,
}

/// Best response of player `i` against the other controls of `profile`, starting from its current control.
pub fn best_response_in(
    problem: &LqsProblem,
    i: usize,
    profile: &ProfileControls,
    bm: &BrownianPaths,
    n: f64,
    params: &FeedbackParams,
) -> Result<BestResponse> {
    check_rate(n)?;
    params.check()?;
    if i >= problem.players() {
        return Err(LqsgError::InvalidParameter(format!("no player {i}")));
    }
    let mut work = profile.clone();
    clip_to_caps(problem, &mut work, n);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < params.max_fixed_point_iters {
        residual = feedback_pass(problem, i, &mut work, bm, n, params)?;
        iterations += 1;
        if residual < params.fp_tol {
            break;
        }
    }
    let floor = 1.0 / n;
    let states = simulate(problem, &work, bm, floor)?;
    let own = cost_paths(problem, i, &work, &states)?;
    let zero_profile = work.with_player(ControlPath::zeros(i, bm.paths(), problem.grid().nodes()));
    let zero_states = simulate(problem, &zero_profile, bm, floor)?;
    let zero = cost_paths(problem, i, &zero_profile, &zero_states)?;
    let diff = MeanEstimate::paired_difference(&own, &zero);
    let reset_to_zero = diff.mean > 3.0 * diff.std_error + 1e-12 * (1.0 + MeanEstimate::from_samples(&zero).mean.abs());
    let (control, cost) = if reset_to_zero {
        (zero_profile.player(i).clone(), MeanEstimate::from_samples(&zero))
    } else {
        (work.player(i).clone(), MeanEstimate::from_samples(&own))
    };
    Ok(BestResponse {
        control,
        diagnostics: BestResponseDiagnostics {
            player: i,
            iterations,
            residual,
            converged: residual < params.fp_tol,
            cost,
            zero_control_cost: MeanEstimate::from_samples(&zero),
            reset_to_zero,
        },
    })
}

pub fn best_response(
    spec: &GameSpec,
    i: usize,
    opponents: &ProfileControls,
    n: f64,
    bm: &BrownianPaths,
    params: &FeedbackParams,
) -> Result<BestResponse> {
    best_response_in(&LqsProblem::from_spec(spec)?, i, opponents, bm, n, params)
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzEquilibrium {
    pub n: f64,
    #[serde(skip)]
    pub controls: ProfileControls,
    /// Profile change of the last sweep.
    pub residual: f64,
    pub converged: bool,
    /// The loop stopped on the stall rule and `controls` averages the last sweeps.
    pub stalled: bool,
    pub sweeps: usize,
    pub residual_history: Vec<f64>,
    /// Diagnostics of each player's best response in the last sweep.
    pub best_responses: Vec<BestResponseDiagnostics>,
    /// Mean over paths of the distance of each player's rates from the bang-bang selection.
    pub feedback_violation: Vec<f64>,
}

/// Gauss-Seidel Nash loop of the rate-`n` game, warm-started from `initial` when given.
pub fn solve_lipschitz_nash_in(
    problem: &LqsProblem,
    n: f64,
    bm: &BrownianPaths,
    params: &FeedbackParams,
    initial: Option<&ProfileControls>,
) -> Result<LipschitzEquilibrium> {
    check_rate(n)?;
    params.check()?;
    let players = problem.players();
    let nodes = problem.grid().nodes();
    let mut profile = match initial {
        Some(p) => {
            p.check_shape(players, bm.paths(), nodes)?;
            p.clone()
        }
        None => ProfileControls::zeros(players, bm.paths(), nodes),
    };
    clip_to_caps(problem, &mut profile, n);
    let mut history = Vec::new();
    let mut diagnostics = Vec::new();
    let mut residual = f64::INFINITY;
    let mut sweeps = 0;
    let window = params.stall_window;
    let mut recent: std::collections::VecDeque<ProfileControls> = std::collections::VecDeque::new();
    let mut stalled = false;
    while sweeps < params.max_sweeps {
        let before = profile.clone();
        diagnostics.clear();
        for i in 0..players {
            let br = best_response_in(problem, i, &profile, bm, n, params)?;
            profile.players[i] = br.control;
            diagnostics.push(br.diagnostics);
        }
        sweeps += 1;
        let zero = ProfileControls::zeros(players, bm.paths(), nodes);
        residual = profile.increment_distance(&before) / (1.0 + profile.increment_distance(&zero));
        history.push(residual);
        if residual < params.sweep_tol {
            break;
        }
        if window > 0 {
            if recent.len() == window {
                recent.pop_front();
            }
            recent.push_back(profile.clone());
            if is_stalled(&history, window) {
                stalled = true;
                profile = average_profiles(&recent);
                break;
            }
        }
    }
    let feedback_violation = feedback_violation(problem, &profile, bm, n, &params.basis)?;
    Ok(LipschitzEquilibrium {
        n,
        controls: profile,
        residual,
        converged: residual < params.sweep_tol,
        stalled,
        sweeps,
        residual_history: history,
        best_responses: diagnostics,
        feedback_violation,
    })
}

fn is_stalled(history: &[f64], window: usize) -> bool {
    if history.len() < 2 * window {
        return false;
    }
    let (earlier, last) = history.split_at(history.len() - window);
    let best = |h: &[f64]| h.iter().copied().fold(f64::INFINITY, f64::min);
    best(last) > 0.9 * best(earlier)
}

fn average_profiles(profiles: &std::collections::VecDeque<ProfileControls>) -> ProfileControls {
    let mut out = profiles[0].clone();
    let m = profiles.len() as f64;
    for (i, acc) in out.players.iter_mut().enumerate() {
        for (k, v) in acc.xi.iter_mut().enumerate() {
            *v = profiles.iter().map(|p| p.players[i].xi[k]).sum::<f64>() / m;
        }
        for (k, v) in acc.zeta.iter_mut().enumerate() {
            *v = profiles.iter().map(|p| p.players[i].zeta[k]).sum::<f64>() / m;
        }
    }
    out
}

pub fn solve_lipschitz_nash(
    spec: &GameSpec,
    n: f64,
    bm: &BrownianPaths,
    params: &FeedbackParams,
) -> Result<LipschitzEquilibrium> {
    solve_lipschitz_nash_in(&LqsProblem::from_spec(spec)?, n, bm, params, None)
}

/// `E[ sum_k (Y+c+)^+ dxi_k + (Y+c+)^- (cap_k - dxi_k) ]` plus the mirror term for `zeta`,
/// which vanishes exactly when the rates agree with the bang-bang selection.
pub fn feedback_violation(
    problem: &LqsProblem,
    profile: &ProfileControls,
    bm: &BrownianPaths,
    n: f64,
    basis: &RegressionBasis,
) -> Result<Vec<f64>> {
    let states = simulate(problem, profile, bm, 1.0 / n)?;
    let caps = increment_caps(problem, n);
    let nodes = caps.len();
    let paths = bm.paths();
    (0..problem.players())
        .map(|i| {
            let (ys, _, _) = regress_players(problem, &states, basis, &[i])?;
            let c = profile.player(i);
            let mut total = 0.0;
            for p in 0..paths {
                for k in 0..nodes {
                    let y = ys[0][p * nodes + k];
                    let s = y + problem.c_plus(i, k);
                    total += s.max(0.0) * c.xi_at(p, k) + (-s).max(0.0) * (caps[k] - c.xi_at(p, k));
                    if problem.allow_decrease() {
                        let s = -y + problem.c_minus(i, k);
                        total += s.max(0.0) * c.zeta_at(p, k) + (-s).max(0.0) * (caps[k] - c.zeta_at(p, k));
                    }
                }
            }
            Ok(total / paths as f64)
        })
        .collect()
}
