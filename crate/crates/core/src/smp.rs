//! Certification of candidate profiles through the first-order conditions
//! on the adjoint and through sampled unilateral deviations.
//!
//! Conditions are checked at grid nodes on simulated paths only; violations
//! between nodes are invisible to this module.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{regress_adjoint, AdjointPaths, RegressionBasis};
use crate::error::{LqsgError, Result};
use crate::model::GameSpec;
use crate::paths::{check_inputs, cost_paths, simulate, stream_rng, BrownianPaths, ControlPath, ProfileControls};
use crate::problem::LqsProblem;
use crate::stats::MeanEstimate;

/// Tolerances relative to `1 + max |Y|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmpTolerances {
    pub slack: f64,
    pub complementarity: f64,
}

impl SmpTolerances {
    pub fn deterministic() -> Self {
        Self { slack: 1e-3, complementarity: 1e-3 }
    }

    pub fn stochastic() -> Self {
        Self { slack: 5e-2, complementarity: 5e-2 }
    }

    pub fn for_problem(problem: &LqsProblem) -> Self {
        if problem.is_noise_free() {
            Self::deterministic()
        } else {
            Self::stochastic()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlayerSmp {
    pub player: usize,
    /// `min (Y + c+)` over nodes and paths.
    pub slack_plus: f64,
    /// `min (-Y + c-)`; absent when only upward controls are admissible.
    pub slack_minus: Option<f64>,
    /// `E[ sum_k (Y_k + c+_k) dxi_k ]`.
    pub residual_plus: MeanEstimate,
    pub residual_minus: Option<MeanEstimate>,
    pub expected_xi_total: f64,
    pub expected_zeta_total: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmpReport {
    pub players: Vec<PlayerSmp>,
    pub max_abs_adjoint: f64,
    pub scale: f64,
    pub tolerances: SmpTolerances,
    pub passed: bool,
    pub paths: usize,
}

impl SmpReport {
    /// Summed complementarity residual over players and directions.
    pub fn total_residual(&self) -> MeanEstimate {
        let mut mean = 0.0;
        let mut var = 0.0;
        let mut samples = usize::MAX;
        for p in &self.players {
            for r in std::iter::once(&p.residual_plus).chain(p.residual_minus.as_ref()) {
                mean += r.mean;
                var += r.std_error * r.std_error;
                samples = samples.min(r.samples);
            }
        }
        MeanEstimate { mean, std_error: var.sqrt(), samples }
    }

    /// Plain-text summary, one line per player.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "first-order conditions: {} (scale {:.4e}, slack tol {:.1e}, complementarity tol {:.1e}, {} paths)\n",
            if self.passed { "PASS" } else { "FAIL" },
            self.scale,
            self.tolerances.slack,
            self.tolerances.complementarity,
            self.paths
        );
        for p in &self.players {
            out.push_str(&format!(
                "player {}: slack+ {:.4e} residual+ {:.4e} (se {:.1e})",
                p.player, p.slack_plus, p.residual_plus.mean, p.residual_plus.std_error
            ));
            if let (Some(s), Some(r)) = (p.slack_minus, p.residual_minus) {
                out.push_str(&format!(" slack- {:.4e} residual- {:.4e} (se {:.1e})", s, r.mean, r.std_error));
            }
            out.push_str(if p.passed { " pass\n" } else { " fail\n" });
        }
        out.push_str("conditions are checked at grid nodes only\n");
        out
    }
}

/// Adjoint of every player along the candidate's states in the original game.
pub fn candidate_adjoint(
    problem: &LqsProblem,
    candidate: &ProfileControls,
    bm: &BrownianPaths,
    basis: &RegressionBasis,
) -> Result<AdjointPaths> {
    candidate.check_admissible()?;
    let states = simulate(problem, candidate, bm, 0.0)?;
    regress_adjoint(problem, &states, basis)
}

/// Evaluates both first-order conditions on a precomputed adjoint.
pub fn smp_report(
    problem: &LqsProblem,
    candidate: &ProfileControls,
    adjoint: &AdjointPaths,
    tolerances: SmpTolerances,
) -> Result<SmpReport> {
    let nodes = problem.grid().nodes();
    candidate.check_shape(problem.players(), adjoint.paths, nodes)?;
    let max_abs_adjoint = adjoint.max_abs();
    let scale = 1.0 + max_abs_adjoint;
    let paths = adjoint.paths;
    let players: Vec<PlayerSmp> = (0..problem.players())
        .map(|i| {
            let c = candidate.player(i);
            let mut slack_plus = f64::INFINITY;
            let mut slack_minus = f64::INFINITY;
            let mut r_plus = vec![0.0; paths];
            let mut r_minus = vec![0.0; paths];
            for p in 0..paths {
                for k in 0..nodes {
                    let y = adjoint.get(p, k, i);
                    let up = y + problem.c_plus(i, k);
                    let down = -y + problem.c_minus(i, k);
                    slack_plus = slack_plus.min(up);
                    r_plus[p] += up * c.xi_at(p, k);
                    if problem.allow_decrease() {
                        slack_minus = slack_minus.min(down);
                        r_minus[p] += down * c.zeta_at(p, k);
                    }
                }
            }
            let tv = c.total_variation();
            let expected_xi_total = c.xi.iter().sum::<f64>() / paths as f64;
            let expected_zeta_total = tv.iter().sum::<f64>() / paths as f64 - expected_xi_total;
            let residual_plus = MeanEstimate::from_samples(&r_plus);
            let (slack_minus, residual_minus) = if problem.allow_decrease() {
                (Some(slack_minus), Some(MeanEstimate::from_samples(&r_minus)))
            } else {
                (None, None)
            };
            let slack_ok = |s: f64| s >= -tolerances.slack * scale;
            let residual_ok = |r: &MeanEstimate| r.mean <= tolerances.complementarity * scale;
            let passed = slack_ok(slack_plus)
                && residual_ok(&residual_plus)
                && slack_minus.is_none_or(slack_ok)
                && residual_minus.as_ref().is_none_or(residual_ok);
            PlayerSmp {
                player: i,
                slack_plus,
                slack_minus,
                residual_plus,
                residual_minus,
                expected_xi_total,
                expected_zeta_total,
                passed,
            }
        })
        .collect();
    let passed = players.iter().all(|p| p.passed);
    Ok(SmpReport { players, max_abs_adjoint, scale, tolerances, passed, paths })
}

/// Per-path complementarity residual summed over players and directions.
pub fn residual_samples(problem: &LqsProblem, candidate: &ProfileControls, adjoint: &AdjointPaths) -> Vec<f64> {
    let nodes = problem.grid().nodes();
    (0..adjoint.paths)
        .map(|p| {
            let mut total = 0.0;
            for i in 0..problem.players() {
                let c = candidate.player(i);
                for k in 0..nodes {
                    let y = adjoint.get(p, k, i);
                    total += (y + problem.c_plus(i, k)) * c.xi_at(p, k);
                    if problem.allow_decrease() {
                        total += (-y + problem.c_minus(i, k)) * c.zeta_at(p, k);
                    }
                }
            }
            total
        })
        .collect()
}

pub fn check_smp_in(
    problem: &LqsProblem,
    candidate: &ProfileControls,
    bm: &BrownianPaths,
    basis: &RegressionBasis,
    tolerances: SmpTolerances,
) -> Result<(SmpReport, AdjointPaths)> {
    let adjoint = candidate_adjoint(problem, candidate, bm, basis)?;
    Ok((smp_report(problem, candidate, &adjoint, tolerances)?, adjoint))
}

pub fn check_smp(
    spec: &GameSpec,
    candidate: &ProfileControls,
    bm: &BrownianPaths,
    basis: &RegressionBasis,
) -> Result<SmpReport> {
    let problem = LqsProblem::from_spec(spec)?;
    Ok(check_smp_in(&problem, candidate, bm, basis, SmpTolerances::for_problem(&problem))?.0)
}

/// Cost change of one unilateral deviation and the matching subgradient lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviationGap {
    pub player: usize,
    /// `J^i(deviation, others) - J^i(candidate)` with common paths.
    pub gap: MeanEstimate,
    /// `E[ sum Y d(v' - v) + c+ d(xi' - xi) + c- d(zeta' - zeta) ]`.
    pub lemma_bound: MeanEstimate,
    /// Paired estimate of `gap - lemma_bound`, nonnegative in expectation.
    pub excess: MeanEstimate,
}

impl DeviationGap {
    /// `gap >= -3 se`.
    pub fn nash_ok(&self) -> bool {
        self.gap.mean >= -3.0 * self.gap.std_error - 1e-12 * (1.0 + self.gap.mean.abs())
    }

    /// `gap >= bound - 3 se` on the paired difference.
    pub fn bound_ok(&self) -> bool {
        self.excess.mean >= -3.0 * self.excess.std_error - 1e-10 * (1.0 + self.lemma_bound.mean.abs())
    }
}

pub fn deviation_gap_in(
    problem: &LqsProblem,
    i: usize,
    candidate: &ProfileControls,
    deviation: &ControlPath,
    bm: &BrownianPaths,
    adjoint: &AdjointPaths,
) -> Result<DeviationGap> {
    if i >= problem.players() {
        return Err(LqsgError::InvalidParameter(format!("no player {i}")));
    }
    deviation.check_admissible()?;
    if !problem.allow_decrease() && deviation.zeta.iter().any(|&z| z != 0.0) {
        return Err(LqsgError::Inadmissible("downward increments are not admissible in this game".into()));
    }
    let nodes = problem.grid().nodes();
    if deviation.paths != candidate.paths() || deviation.nodes != nodes {
        return Err(LqsgError::Dimension("deviation does not match the candidate".into()));
    }
    check_inputs(problem, candidate, bm)?;
    let deviated = candidate.with_player(ControlPath { player: i, ..deviation.clone() });
    let base_states = simulate(problem, candidate, bm, 0.0)?;
    let dev_states = simulate(problem, &deviated, bm, 0.0)?;
    let base = cost_paths(problem, i, candidate, &base_states)?;
    let dev = cost_paths(problem, i, &deviated, &dev_states)?;
    let gap_samples: Vec<f64> = dev.iter().zip(&base).map(|(d, b)| d - b).collect();
    let c = candidate.player(i);
    let bound_samples: Vec<f64> = (0..candidate.paths())
        .map(|p| {
            (0..nodes)
                .map(|k| {
                    let dxi = deviation.xi_at(p, k) - c.xi_at(p, k);
                    let dzeta = deviation.zeta_at(p, k) - c.zeta_at(p, k);
                    adjoint.get(p, k, i) * (dxi - dzeta) + problem.c_plus(i, k) * dxi + problem.c_minus(i, k) * dzeta
                })
                .sum()
        })
        .collect();
    Ok(DeviationGap {
        player: i,
        gap: MeanEstimate::from_samples(&gap_samples),
        lemma_bound: MeanEstimate::from_samples(&bound_samples),
        excess: MeanEstimate::paired_difference(&gap_samples, &bound_samples),
    })
}

pub fn deviation_gap(
    spec: &GameSpec,
    i: usize,
    candidate: &ProfileControls,
    deviation: &ControlPath,
    bm: &BrownianPaths,
    basis: &RegressionBasis,
) -> Result<DeviationGap> {
    let problem = LqsProblem::from_spec(spec)?;
    let adjoint = candidate_adjoint(&problem, candidate, bm, basis)?;
    deviation_gap_in(&problem, i, candidate, deviation, bm, &adjoint)
}

/// Deterministic random deviations of player `i`, alternating between fresh
/// controls and additions to the candidate. Each has total variation equal to
/// the candidate's expected total variation, or one when that is zero.
pub fn random_deviations(
    problem: &LqsProblem,
    i: usize,
    candidate: &ProfileControls,
    count: usize,
    seed: u64,
) -> Vec<ControlPath> {
    let nodes = problem.grid().nodes();
    let paths = candidate.paths();
    let own = candidate.player(i);
    let tv = own.total_variation().iter().sum::<f64>() / paths as f64;
    let budget = if tv > 0.0 { tv } else { 1.0 };
    (0..count)
        .map(|j| {
            let mut rng = stream_rng(seed, (i * count + j) as u64);
            let density = rng.random_range(0.05..0.5);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
                (0..nodes).map(|_| if rng.random::<f64>() < density { rng.random::<f64>() } else { 0.0 }).collect()
            };
            let mut xi = draw(&mut rng);
            let mut zeta = if problem.allow_decrease() { draw(&mut rng) } else { vec![0.0; nodes] };
            if xi.iter().chain(&zeta).all(|&v| v == 0.0) {
                xi[rng.random_range(0..nodes)] = 1.0;
            }
            let fresh = j % 2 == 0;
            let target = if fresh { budget } else { 0.25 * budget };
            let total: f64 = xi.iter().chain(&zeta).sum();
            xi.iter_mut().chain(zeta.iter_mut()).for_each(|v| *v *= target / total);
            let mut dev = ControlPath::broadcast(i, paths, &xi, &zeta).expect("equal lengths");
            if !fresh {
                dev.xi.iter_mut().zip(&own.xi).for_each(|(d, c)| *d += c);
                dev.zeta.iter_mut().zip(&own.zeta).for_each(|(d, c)| *d += c);
            }
            dev
        })
        .collect()
}

/// Summary of a batch of deviation tests.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviationSuite {
    pub gaps: Vec<DeviationGap>,
    pub nash_failures: usize,
    pub bound_failures: usize,
    pub min_gap: f64,
}

impl DeviationSuite {
    pub fn passed(&self) -> bool {
        self.nash_failures == 0 && self.bound_failures == 0
    }
}

/// `count` random deviations per player, evaluated in parallel.
pub fn deviation_suite(
    problem: &LqsProblem,
    candidate: &ProfileControls,
    bm: &BrownianPaths,
    adjoint: &AdjointPaths,
    count: usize,
    seed: u64,
) -> Result<DeviationSuite> {
    let jobs: Vec<ControlPath> =
        (0..problem.players()).flat_map(|i| random_deviations(problem, i, candidate, count, seed)).collect();
    let gaps = jobs
        .par_iter()
        .map(|d| deviation_gap_in(problem, d.player, candidate, d, bm, adjoint))
        .collect::<Result<Vec<_>>>()?;
    Ok(DeviationSuite {
        nash_failures: gaps.iter().filter(|g| !g.nash_ok()).count(),
        bound_failures: gaps.iter().filter(|g| !g.bound_ok()).count(),
        min_gap: gaps.iter().map(|g| g.gap.mean).fold(f64::INFINITY, f64::min),
        gaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeGrid;
    use crate::oracle::{assemble_qp_problem, qp_nash};
    use crate::paths::sample_brownian;
    use nalgebra::DMatrix;

    fn diagonal(a: f64, x0: f64, sigma: f64) -> LqsProblem {
        let spec = GameSpec::constant(
            TimeGrid::new(1.0, 20).unwrap(),
            &[a, a],
            &[0.0, 0.0],
            &[sigma, sigma],
            &[x0, x0],
            &[
                DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
                DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
            ],
            &[0.3, 0.3],
            &[0.4, 0.4],
        )
        .unwrap();
        LqsProblem::from_spec(&spec).unwrap()
    }

    #[test]
    fn zero_candidate_where_zero_is_optimal() {
        let problem = diagonal(0.0, 0.0, 0.0);
        let bm = sample_brownian(1, problem.grid(), 2, 1).unwrap();
        let zero = ProfileControls::zeros(2, 1, 21);
        let (r, y) =
            check_smp_in(&problem, &zero, &bm, &RegressionBasis::default(), SmpTolerances::deterministic()).unwrap();
        assert!(r.passed);
        assert_eq!(y.max_abs(), 0.0);
        assert_eq!(r.players[0].slack_plus, 0.3);
        assert_eq!(r.players[0].slack_minus, Some(0.4));
        assert_eq!(r.players[1].residual_plus.mean, 0.0);
    }

    #[test]
    fn oracle_passes_and_over_push_fails() {
        let problem = diagonal(0.0, 2.0, 0.0);
        let sol = qp_nash(&assemble_qp_problem(&problem).unwrap()).unwrap();
        let bm = sample_brownian(1, problem.grid(), 2, 1).unwrap();
        let basis = RegressionBasis::default();
        let candidate = sol.increments.to_controls(1).unwrap();
        let (r, _) = check_smp_in(&problem, &candidate, &bm, &basis, SmpTolerances::deterministic()).unwrap();
        assert!(r.passed, "{}", r.summary());
        let mut pushed = candidate.clone();
        pushed.players[0].xi[5] += 1.0;
        let (r, _) = check_smp_in(&problem, &pushed, &bm, &basis, SmpTolerances::deterministic()).unwrap();
        assert!(!r.passed);
        assert!(r.players[0].residual_plus.mean > 1e-3 * r.scale);
    }

    #[test]
    fn deviation_equal_to_candidate_has_zero_gap() {
        let problem = diagonal(0.5, 1.0, 0.3);
        let bm = sample_brownian(64, problem.grid(), 2, 3).unwrap();
        let mut candidate = ProfileControls::zeros(2, 64, 21);
        candidate.players[0].zeta[3 * 21 + 4] = 0.7;
        let adjoint = candidate_adjoint(&problem, &candidate, &bm, &RegressionBasis::default()).unwrap();
        let g = deviation_gap_in(&problem, 0, &candidate, candidate.player(0), &bm, &adjoint).unwrap();
        assert_eq!(g.gap.mean, 0.0);
        assert_eq!(g.lemma_bound.mean, 0.0);
    }

    #[test]
    fn oracle_deviations_respect_nash_and_bound() {
        let problem = diagonal(1.0, 0.5, 0.0);
        let sol = qp_nash(&assemble_qp_problem(&problem).unwrap()).unwrap();
        let bm = sample_brownian(1, problem.grid(), 2, 1).unwrap();
        let candidate = sol.increments.to_controls(1).unwrap();
        let adjoint = candidate_adjoint(&problem, &candidate, &bm, &RegressionBasis::default()).unwrap();
        let suite = deviation_suite(&problem, &candidate, &bm, &adjoint, 20, 9).unwrap();
        assert!(suite.passed(), "{suite:?}");
        assert!(suite.min_gap >= -1e-10);
    }

    #[test]
    fn deviations_are_reproducible_and_scaled() {
        let problem = diagonal(1.0, 0.5, 0.0);
        let candidate = ProfileControls::zeros(2, 3, 21);
        let a = random_deviations(&problem, 1, &candidate, 6, 4);
        assert_eq!(a, random_deviations(&problem, 1, &candidate, 6, 4));
        for (j, d) in a.iter().enumerate() {
            let tv = d.total_variation()[0];
            assert!((tv - if j % 2 == 0 { 1.0 } else { 0.25 }).abs() < 1e-12);
            d.check_admissible().unwrap();
        }
    }

    #[test]
    fn scaling_costs_scales_the_report() {
        let problem = diagonal(1.0, 0.5, 0.0);
        let sol = qp_nash(&assemble_qp_problem(&problem).unwrap()).unwrap();
        let candidate = sol.increments.to_controls(1).unwrap();
        let bm = sample_brownian(1, problem.grid(), 2, 1).unwrap();
        let basis = RegressionBasis::default();
        let scaled_spec = GameSpec::constant(
            TimeGrid::new(1.0, 20).unwrap(),
            &[1.0, 1.0],
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[0.5, 0.5],
            &[
                DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 0.0]),
                DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 3.0]),
            ],
            &[0.9, 0.9],
            &[1.2, 1.2],
        )
        .unwrap();
        let scaled = LqsProblem::from_spec(&scaled_spec).unwrap();
        let tol = SmpTolerances::deterministic();
        let (a, _) = check_smp_in(&problem, &candidate, &bm, &basis, tol).unwrap();
        let (b, _) = check_smp_in(&scaled, &candidate, &bm, &basis, tol).unwrap();
        assert!((b.players[0].slack_plus - 3.0 * a.players[0].slack_plus).abs() < 1e-12);
        assert!((b.max_abs_adjoint - 3.0 * a.max_abs_adjoint).abs() < 1e-12);
        assert_eq!(a.passed, b.passed);
    }
}
