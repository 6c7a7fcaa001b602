//! The ladder of rate caps: warm-started capped equilibria, their Cesàro
//! averages, and the moment statistics that should stay bounded along it.

use serde::Serialize;

use crate::error::{LqsgError, Result};
use crate::lipschitz::{solve_lipschitz_nash_in, FeedbackParams, LipschitzEquilibrium};
use crate::model::GameSpec;
use crate::paths::{cost_estimate, simulate, BrownianPaths, ProfileControls, StatePaths};
use crate::problem::LqsProblem;
use crate::stats::MeanEstimate;

/// Growth factor of a rung statistic over the first rung that fails the bound monitor.
pub const BOUND_GROWTH_LIMIT: f64 = 10.0;

/// Nodewise, pathwise mean of cumulative controls, returned as increments.
pub fn cesaro_average(seq: &[ProfileControls]) -> Result<ProfileControls> {
    let first = seq.first().ok_or_else(|| LqsgError::InvalidParameter("empty control sequence".into()))?;
    let (players, paths, nodes) = (first.player_count(), first.paths(), first.nodes());
    let mut out = ProfileControls::zeros(players, paths, nodes);
    for c in seq {
        c.check_shape(players, paths, nodes)?;
        for (acc, ci) in out.players.iter_mut().zip(&c.players) {
            acc.xi.iter_mut().zip(&ci.xi).for_each(|(a, v)| *a += v);
            acc.zeta.iter_mut().zip(&ci.zeta).for_each(|(a, v)| *a += v);
        }
    }
    let m = seq.len() as f64;
    for acc in &mut out.players {
        acc.xi.iter_mut().chain(acc.zeta.iter_mut()).for_each(|v| *v /= m);
    }
    Ok(out)
}

/// Moment statistics of one rung, on its own states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RungBounds {
    /// `E[ int |X|^2 dt + |X_T|^2 ]`.
    pub state_moment: f64,
    /// `E[ sum_i xi^i_T + zeta^i_T ]`.
    pub variation: f64,
    /// `E[ sup_t |X_t| ]`.
    pub sup_state: f64,
}

pub fn rung_bounds(problem: &LqsProblem, controls: &ProfileControls, states: &StatePaths) -> RungBounds {
    let dt = problem.grid().dt();
    let steps = states.nodes - 1;
    let paths = states.paths as f64;
    let mut state_moment = 0.0;
    let mut sup_state = 0.0;
    for p in 0..states.paths {
        let mut sup = 0.0f64;
        for k in 0..states.nodes {
            let sq: f64 = states.at(p, k).iter().map(|x| x * x).sum();
            state_moment += if k < steps { sq * dt } else { sq };
            sup = sup.max(sq.sqrt());
        }
        sup_state += sup;
    }
    let variation: f64 = controls.players.iter().map(|c| c.total_variation().iter().sum::<f64>()).sum();
    RungBounds { state_moment: state_moment / paths, variation: variation / paths, sup_state: sup_state / paths }
}

#[derive(Debug, Clone, Serialize)]
pub struct RungSummary {
    pub n: f64,
    pub converged: bool,
    pub stalled: bool,
    pub sweeps: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub feedback_violation: Vec<f64>,
    pub bounds: RungBounds,
}

#[derive(Debug, Clone, Serialize)]
pub struct LadderResult {
    pub n_schedule: Vec<f64>,
    pub rungs: Vec<RungSummary>,
    /// Distance between successive Cesàro averages; entry `m - 2` compares averages `m` and `m - 1`.
    pub cesaro_gaps: Vec<f64>,
    /// The last rung's statistics stay within [`BOUND_GROWTH_LIMIT`] times the first rung's.
    pub bounds_bounded: bool,
    /// The last Cesàro gap does not exceed the first one.
    pub gaps_shrink: bool,
    /// The candidate was replaced by its pathwise mean because the game carries no noise.
    pub projected: bool,
    /// Costs of the candidate in the original game.
    pub candidate_costs: Vec<MeanEstimate>,
    /// Empirical `E[ int |v|^2 dt + |v_T|^2 ]` of each player's net candidate control.
    pub candidate_second_moments: Vec<f64>,
    #[serde(skip)]
    pub equilibria: Vec<LipschitzEquilibrium>,
    #[serde(skip)]
    pub cesaro: ProfileControls,
    #[serde(skip)]
    pub candidate: ProfileControls,
}

impl LadderResult {
    pub fn all_converged(&self) -> bool {
        self.rungs.iter().all(|r| r.converged)
    }

    /// Whether the last three Cesàro gaps are non-increasing.
    pub fn tail_gaps_decreasing(&self) -> bool {
        let g = &self.cesaro_gaps;
        g.len() >= 3 && g[g.len() - 3] >= g[g.len() - 2] && g[g.len() - 2] >= g[g.len() - 1]
    }
}

fn check_schedule(schedule: &[f64]) -> Result<()> {
    if schedule.is_empty() || schedule.iter().any(|n| !(*n > 0.0 && n.is_finite())) {
        return Err(LqsgError::InvalidParameter("schedule must be non-empty with positive caps".into()));
    }
    if schedule.windows(2).any(|w| w[1] <= w[0]) {
        return Err(LqsgError::InvalidParameter("schedule must be strictly increasing".into()));
    }
    Ok(())
}

pub fn solve_ladder_in(
    problem: &LqsProblem,
    schedule: &[f64],
    bm: &BrownianPaths,
    params: &FeedbackParams,
) -> Result<LadderResult> {
    check_schedule(schedule)?;
    let mut equilibria: Vec<LipschitzEquilibrium> = Vec::with_capacity(schedule.len());
    let mut rungs = Vec::with_capacity(schedule.len());
    let mut cesaro: Option<ProfileControls> = None;
    let mut gaps = Vec::new();
    for (m, &n) in schedule.iter().enumerate() {
        let warm = equilibria.last().map(|e| &e.controls);
        let eq = solve_lipschitz_nash_in(problem, n, bm, params, warm)?;
        let states = simulate(problem, &eq.controls, bm, 1.0 / n)?;
        rungs.push(RungSummary {
            n,
            converged: eq.converged,
            stalled: eq.stalled,
            sweeps: eq.sweeps,
            residual: eq.residual,
            residual_history: eq.residual_history.clone(),
            feedback_violation: eq.feedback_violation.clone(),
            bounds: rung_bounds(problem, &eq.controls, &states),
        });
        let next = match &cesaro {
            None => eq.controls.clone(),
            Some(prev) => {
                let weight = 1.0 / (m + 1) as f64;
                let mut avg = prev.clone();
                for (a, c) in avg.players.iter_mut().zip(&eq.controls.players) {
                    a.xi.iter_mut().zip(&c.xi).for_each(|(x, v)| *x += weight * (v - *x));
                    a.zeta.iter_mut().zip(&c.zeta).for_each(|(x, v)| *x += weight * (v - *x));
                }
                gaps.push(avg.cumulative_distance(prev, problem.grid().dt()));
                avg
            }
        };
        cesaro = Some(next);
        equilibria.push(eq);
    }
    let cesaro = cesaro.expect("schedule is non-empty");
    let projected = problem.is_noise_free();
    let candidate = if projected { cesaro.mean_profile()? } else { cesaro.clone() };
    let states = simulate(problem, &candidate, bm, 0.0)?;
    let candidate_costs =
        (0..problem.players()).map(|i| cost_estimate(problem, i, &candidate, &states)).collect::<Result<_>>()?;
    let dt = problem.grid().dt();
    let candidate_second_moments = candidate.players.iter().map(|c| c.second_moment(dt)).collect();
    let within = |first: f64, last: f64| last <= BOUND_GROWTH_LIMIT * first + 1e-12;
    let (first, last) = (rungs[0].bounds, rungs[rungs.len() - 1].bounds);
    let bounds_bounded = within(first.state_moment, last.state_moment)
        && within(first.variation, last.variation)
        && within(first.sup_state, last.sup_state);
    let gaps_shrink = gaps.len() < 2 || gaps[gaps.len() - 1] <= gaps[0];
    Ok(LadderResult {
        n_schedule: schedule.to_vec(),
        rungs,
        cesaro_gaps: gaps,
        bounds_bounded,
        gaps_shrink,
        projected,
        candidate_costs,
        candidate_second_moments,
        equilibria,
        cesaro,
        candidate,
    })
}

pub fn solve_ladder(
    spec: &GameSpec,
    schedule: &[f64],
    bm: &BrownianPaths,
    params: &FeedbackParams,
) -> Result<LadderResult> {
    solve_ladder_in(&LqsProblem::from_spec(spec)?, schedule, bm, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeGrid;
    use crate::paths::{sample_brownian, ControlPath};
    use nalgebra::DMatrix;

    fn profile(values: &[f64]) -> ProfileControls {
        ProfileControls { players: vec![ControlPath::broadcast(0, 2, values, &vec![0.0; values.len()]).unwrap()] }
    }

    #[test]
    fn cesaro_examples() {
        let a = profile(&[1.0, 0.5, 0.0]);
        assert_eq!(cesaro_average(&[a.clone(), a.clone(), a.clone()]).unwrap(), a);
        let half = cesaro_average(&[a.clone(), profile(&[0.0; 3])]).unwrap();
        assert_eq!(half, profile(&[0.5, 0.25, 0.0]));
        assert!(cesaro_average(&[]).is_err());
        assert!(cesaro_average(&[a, profile(&[0.0; 4])]).is_err());
    }

    #[test]
    fn schedule_must_increase() {
        assert!(check_schedule(&[2.0, 2.0]).is_err());
        assert!(check_schedule(&[]).is_err());
        assert!(check_schedule(&[2.0, 4.0]).is_ok());
    }

    #[test]
    fn indifferent_players_stay_at_zero_along_the_ladder() {
        let spec = GameSpec::constant(
            TimeGrid::new(1.0, 8).unwrap(),
            &[0.5, -0.5],
            &[0.0, 0.0],
            &[0.3, 0.3],
            &[1.0, 1.0],
            &[
                DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            ],
            &[1.0, 1.0],
            &[1.0, 1.0],
        )
        .unwrap();
        let bm = sample_brownian(100, spec.grid, 2, 2).unwrap();
        let r = solve_ladder(&spec, &[2.0, 4.0, 8.0], &bm, &FeedbackParams::default()).unwrap();
        assert!(r.candidate.players.iter().all(|c| c.xi.iter().chain(&c.zeta).all(|&v| v == 0.0)));
        assert!(r.cesaro_gaps.iter().all(|&g| g == 0.0));
        assert!(r.all_converged());
    }
}
