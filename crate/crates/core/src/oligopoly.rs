//! Capacity expansion under stochastic linear demand.
//!
//! Firm `i` holds capital `dX^i = -delta_i X^i dt + dxi^i` with irreversible
//! investment `xi^i`, sells `alpha_i X^i` at price `X^0 - gamma sum_j alpha_j X^j`
//! and pays `c_i` per unit invested, all discounted at rate `rho`. Profit
//! maximization is solved as cost minimization of the negated profit, with the
//! demand `X^0` carried as an uncontrolled coordinate. The resulting cost
//! matrices are not symmetric and the coercivity condition on the generic game
//! does not apply, so the generic validation is bypassed; positivity of
//! capital is monitored instead.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::adjoint::{fit_node, AdjointPaths, RegressionBasis};
use crate::error::{LqsgError, Result};
use crate::limit::{solve_ladder_in, LadderResult};
use crate::lipschitz::FeedbackParams;
use crate::model::TimeGrid;
use crate::paths::{sample_brownian, simulate, BrownianPaths, ProfileControls, StatePaths};
use crate::problem::{ExogenousPaths, LqsProblem, ProblemParts};
use crate::smp::{candidate_adjoint, residual_samples, smp_report, SmpReport, SmpTolerances};
use crate::stats::MeanEstimate;

/// Offsets the demand noise seed from the seed of the auxiliary capital noises.
const DEMAND_SEED_OFFSET: u64 = 0x5DEE_CE66_D1CE_4E5B;

/// Share of projected total variation that isotonic clipping may change before a fidelity warning.
pub const FIDELITY_LIMIT: f64 = 0.01;

/// Demand dynamics `dX^0 = mu(t, X^0) dt + sigma(t, X^0) dW^0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", content = "params", rename_all = "kebab-case")]
pub enum DemandModel {
    /// Brownian motion with drift.
    Bm { mu: f64, sigma: f64 },
    /// Mean reversion `mu = kappa (mean - x)`.
    Ou { kappa: f64, mean: f64, sigma: f64 },
    /// `mu = drift[0] + drift[1] x`, `sigma = volatility[0] + volatility[1] x`, required to stay in the bounds.
    CustomAffine { drift: [f64; 2], volatility: [f64; 2], sigma_lower: f64, sigma_upper: f64 },
}

impl DemandModel {
    pub fn drift(&self, x: f64) -> f64 {
        match self {
            Self::Bm { mu, .. } => *mu,
            Self::Ou { kappa, mean, .. } => kappa * (mean - x),
            Self::CustomAffine { drift, .. } => drift[0] + drift[1] * x,
        }
    }

    pub fn volatility(&self, x: f64) -> f64 {
        match self {
            Self::Bm { sigma, .. } | Self::Ou { sigma, .. } => *sigma,
            Self::CustomAffine { volatility, .. } => volatility[0] + volatility[1] * x,
        }
    }

    /// `(lower, upper)` volatility bounds.
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Self::Bm { sigma, .. } | Self::Ou { sigma, .. } => (*sigma, *sigma),
            Self::CustomAffine { sigma_lower, sigma_upper, .. } => (*sigma_lower, *sigma_upper),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OligopolyParams {
    pub firms: usize,
    pub delta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: f64,
    pub c: Vec<f64>,
    #[serde(default)]
    pub rho: f64,
    pub demand: DemandModel,
    pub x0: Vec<f64>,
    pub x0_demand: f64,
    /// Replaces the demand volatility by zero, for comparison with the oracle.
    #[serde(default)]
    pub deterministic_demand: bool,
}

impl OligopolyParams {
    pub fn check(&self) -> Result<()> {
        let n = self.firms;
        if n == 0 {
            return Err(LqsgError::Structural("at least one firm is required".into()));
        }
        for (name, v) in [("delta", &self.delta), ("alpha", &self.alpha), ("c", &self.c), ("x0", &self.x0)] {
            if v.len() != n {
                return Err(LqsgError::Dimension(format!("`{name}` must have {n} entries")));
            }
        }
        let positive = |name: &str, v: f64| -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(LqsgError::InvalidParameter(format!("`{name}` must be positive, got {v}")))
            }
        };
        for i in 0..n {
            positive("delta", self.delta[i])?;
            positive("alpha", self.alpha[i])?;
            positive("c", self.c[i])?;
            if !(self.x0[i] >= 0.0 && self.x0[i].is_finite()) {
                return Err(LqsgError::InvalidParameter(format!("initial capital must be >= 0, got {}", self.x0[i])));
            }
        }
        positive("gamma", self.gamma)?;
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(LqsgError::InvalidParameter(format!("`rho` must be >= 0, got {}", self.rho)));
        }
        if !self.x0_demand.is_finite() {
            return Err(LqsgError::InvalidParameter("demand start must be finite".into()));
        }
        if !self.deterministic_demand {
            let (lo, hi) = self.demand.bounds();
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(LqsgError::InvalidParameter(format!(
                    "demand volatility bounds must satisfy 0 < lower <= upper, got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }

    /// Symmetric firms with unit output multipliers.
    pub fn symmetric(
        firms: usize,
        delta: f64,
        gamma: f64,
        c: f64,
        x0: f64,
        demand: DemandModel,
        x0_demand: f64,
    ) -> Self {
        Self {
            firms,
            delta: vec![delta; firms],
            alpha: vec![1.0; firms],
            gamma,
            c: vec![c; firms],
            rho: 0.0,
            demand,
            x0: vec![x0; firms],
            x0_demand,
            deterministic_demand: false,
        }
    }
}

/// Euler-Maruyama demand paths; every sampled volatility must lie within the model bounds.
pub fn simulate_demand(params: &OligopolyParams, paths: usize, grid: TimeGrid, seed: u64) -> Result<ExogenousPaths> {
    params.check()?;
    let nodes = grid.nodes();
    let dt = grid.dt();
    let noise = sample_brownian(paths, grid, 1, seed)?;
    let (lo, hi) = params.demand.bounds();
    let mut values = vec![0.0; paths * nodes];
    for p in 0..paths {
        let row = &mut values[p * nodes..(p + 1) * nodes];
        row[0] = params.x0_demand;
        for k in 0..grid.steps() {
            let x = row[k];
            let sigma = if params.deterministic_demand {
                0.0
            } else {
                let s = params.demand.volatility(x);
                if !(s >= lo && s <= hi) {
                    return Err(LqsgError::InvalidParameter(format!(
                        "demand volatility {s} at t = {}, x = {x} leaves [{lo}, {hi}]",
                        grid.time(k)
                    )));
                }
                s
            };
            row[k + 1] = x + params.demand.drift(x) * dt + sigma * noise.get(p, k, 0);
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(LqsgError::NonFinite(format!("demand path {p} reached {v}")));
        }
    }
    ExogenousPaths::new(paths, nodes, values)
}

/// The cost-minimization form of the investment game on given demand paths.
pub fn oligopoly_problem(params: &OligopolyParams, grid: TimeGrid, demand: ExogenousPaths) -> Result<LqsProblem> {
    params.check()?;
    let n = params.firms;
    let nodes = grid.nodes();
    let discount: Vec<f64> = (0..nodes).map(|k| (-params.rho * grid.time(k)).exp()).collect();
    let running = (0..n)
        .map(|i| {
            discount
                .iter()
                .map(|&d| {
                    let mut m = DMatrix::zeros(n + 1, n + 1);
                    for j in 0..n {
                        m[(i, j)] = d * params.gamma * params.alpha[i] * params.alpha[j];
                    }
                    m[(i, n)] = -d * params.alpha[i];
                    m
                })
                .collect()
        })
        .collect();
    let c_plus: Vec<Vec<f64>> = params.c.iter().map(|c| discount.iter().map(|d| c * d).collect()).collect();
    LqsProblem::new(ProblemParts {
        grid,
        a: vec![vec![0.0; nodes]; n],
        b: params.delta.iter().map(|d| vec![-d; nodes]).collect(),
        sigma: vec![vec![0.0; nodes]; n],
        x0: params.x0.clone(),
        running,
        terminal: vec![DMatrix::zeros(n + 1, n + 1); n],
        c_minus: c_plus.clone(),
        c_plus,
        allow_decrease: false,
        exogenous: Some(demand),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OligopolySolver {
    pub paths: usize,
    pub schedule: Vec<f64>,
    #[serde(default)]
    pub feedback: FeedbackParams,
    /// Basis in the demand statistics used by the projection.
    #[serde(default)]
    pub projection_basis: RegressionBasis,
    /// Defaults to the deterministic or stochastic regime of the instance.
    #[serde(default)]
    pub tolerances: Option<SmpTolerances>,
    /// Auxiliary-noise replicates sharing each demand path; `paths` must be a multiple.
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

fn default_replicates() -> usize {
    8
}

impl Default for OligopolySolver {
    fn default() -> Self {
        Self {
            paths: 512,
            schedule: vec![64.0, 128.0, 256.0, 512.0, 1024.0],
            feedback: FeedbackParams { sweep_tol: 5e-3, ..FeedbackParams::default() },
            projection_basis: RegressionBasis::default(),
            tolerances: None,
            replicates: default_replicates(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OligopolyEquilibrium {
    pub problem: LqsProblem,
    pub investment: ProfileControls,
    pub capital: StatePaths,
    pub adjoint: AdjointPaths,
    pub projected: bool,
    pub conditions: SmpReport,
    /// Smallest capital level over firms, nodes and paths.
    pub min_capital: f64,
    /// Expected total investment per firm.
    pub investment_totals: Vec<f64>,
    /// Consecutive paths sharing one demand path.
    pub replicates: usize,
}

fn evaluate(
    problem: LqsProblem,
    investment: ProfileControls,
    basis: &RegressionBasis,
    tolerances: SmpTolerances,
    projected: bool,
    replicates: usize,
) -> Result<OligopolyEquilibrium> {
    let paths = investment.paths();
    let silent = sample_brownian(paths, problem.grid(), problem.players(), 0)?;
    let capital = simulate(&problem, &investment, &silent, 0.0)?;
    let adjoint = candidate_adjoint(&problem, &investment, &silent, basis)?;
    let conditions = smp_report(&problem, &investment, &adjoint, tolerances)?;
    let min_capital = capital.values.iter().copied().fold(f64::INFINITY, f64::min);
    let investment_totals = investment.players.iter().map(|c| c.xi.iter().sum::<f64>() / paths as f64).collect();
    Ok(OligopolyEquilibrium {
        problem,
        investment,
        capital,
        adjoint,
        projected,
        conditions,
        min_capital,
        investment_totals,
        replicates,
    })
}

/// Ladder equilibrium of the investment game, verified on its own paths.
pub fn solve_oligopoly(
    params: &OligopolyParams,
    grid: TimeGrid,
    seed: u64,
    solver: &OligopolySolver,
) -> Result<(OligopolyEquilibrium, LadderResult)> {
    let r = solver.replicates;
    if r == 0 || solver.paths % r != 0 {
        return Err(LqsgError::InvalidParameter(format!("{} paths do not split into groups of {r}", solver.paths)));
    }
    let demand = simulate_demand(params, solver.paths / r, grid, seed.wrapping_add(DEMAND_SEED_OFFSET))?;
    let demand = replicate_paths(&demand, r)?;
    let problem = oligopoly_problem(params, grid, demand)?;
    let bm = sample_brownian(solver.paths, grid, params.firms, seed)?;
    let ladder = solve_ladder_in(&problem, &solver.schedule, &bm, &solver.feedback)?;
    let tolerances = solver.tolerances.unwrap_or_else(|| SmpTolerances::for_problem(&problem));
    let eq = evaluate(problem, ladder.candidate.clone(), &solver.feedback.basis, tolerances, false, r)?;
    Ok((eq, ladder))
}

/// Repeats every path `replicates` times in place.
pub fn replicate_paths(demand: &ExogenousPaths, replicates: usize) -> Result<ExogenousPaths> {
    let values =
        (0..demand.paths).flat_map(|p| std::iter::repeat_n(demand.path(p), replicates).flatten().copied()).collect();
    ExogenousPaths::new(demand.paths * replicates, demand.nodes, values)
}

/// Running statistics of the demand path used as projection inputs: current value, running average, running maximum.
pub fn demand_features(demand: &ExogenousPaths, node: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(demand.paths * 3);
    for p in 0..demand.paths {
        let past = &demand.path(p)[..=node];
        let avg = past.iter().sum::<f64>() / past.len() as f64;
        let max = past.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.extend_from_slice(&[past[node], avg, max]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionMethod {
    /// Average over the auxiliary-noise replicates of each demand path.
    ReplicateAverage,
    /// Nodewise regression on running demand statistics followed by an isotonic pass.
    Regression,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectionReport {
    pub method: ProjectionMethod,
    /// Total absolute change made by the isotonic pass relative to the projected total variation.
    pub clipped_fraction: f64,
    pub fidelity_warning: bool,
    pub original_residual: MeanEstimate,
    pub projected_residual: MeanEstimate,
    /// The projected residual does not exceed the original one by more than three standard errors.
    pub jensen_holds: bool,
}

/// Conditional expectation of cumulative investment given the demand, re-verified.
///
/// The auxiliary noises are independent of the demand, so conditioning on the
/// demand up to `t` equals conditioning on the whole demand path. With
/// replicated demand paths the replicate average estimates it directly and is
/// nondecreasing by construction; otherwise it is regressed on running demand
/// statistics and made nondecreasing and nonnegative.
pub fn project_to_common_filtration(
    eq: &OligopolyEquilibrium,
    basis: &RegressionBasis,
    adjoint_basis: &RegressionBasis,
) -> Result<(OligopolyEquilibrium, ProjectionReport)> {
    let problem = &eq.problem;
    let demand = problem.exogenous().ok_or_else(|| LqsgError::Structural("no demand process".into()))?;
    let nodes = problem.grid().nodes();
    let paths = eq.investment.paths();
    let firms = problem.players();
    let r = eq.replicates;
    let method = if r > 1 { ProjectionMethod::ReplicateAverage } else { ProjectionMethod::Regression };
    let mut projected = ProfileControls::zeros(firms, paths, nodes);
    let mut clipped = 0.0;
    let mut total = 0.0;
    for i in 0..firms {
        let c = eq.investment.player(i);
        let mut cumulative = vec![0.0; paths * nodes];
        for p in 0..paths {
            let mut acc = 0.0;
            for k in 0..nodes {
                acc += c.xi_at(p, k);
                cumulative[p * nodes + k] = acc;
            }
        }
        let mut fitted = vec![0.0; paths * nodes];
        if method == ProjectionMethod::ReplicateAverage {
            for (g, group) in cumulative.chunks(r * nodes).enumerate() {
                for k in 0..nodes {
                    let mean = (0..r).map(|j| group[j * nodes + k]).sum::<f64>() / r as f64;
                    for j in 0..r {
                        fitted[(g * r + j) * nodes + k] = mean;
                    }
                }
            }
        } else {
            for k in 0..nodes {
                let target: Vec<f64> = (0..paths).map(|p| cumulative[p * nodes + k]).collect();
                let (_, values) = fit_node(k, basis, &demand_features(demand, k), 3, &[target])?;
                for p in 0..paths {
                    fitted[p * nodes + k] = values[0][p];
                }
            }
        }
        let out = projected.player_mut(i);
        for p in 0..paths {
            let mut prev = 0.0;
            for k in 0..nodes {
                let raw = fitted[p * nodes + k];
                let level = raw.max(prev);
                clipped += (level - raw).abs();
                out.xi[p * nodes + k] = level - prev;
                prev = level;
            }
            total += prev;
        }
    }
    let clipped_fraction = if total > 0.0 { clipped / total } else { 0.0 };
    let proj = evaluate(problem.clone(), projected, adjoint_basis, eq.conditions.tolerances, true, r)?;
    let original = group_estimate(&residual_samples(problem, &eq.investment, &eq.adjoint), r);
    let after = group_estimate(&residual_samples(problem, &proj.investment, &proj.adjoint), r);
    let noise = (original.std_error.powi(2) + after.std_error.powi(2)).sqrt();
    let report = ProjectionReport {
        method,
        clipped_fraction,
        fidelity_warning: clipped_fraction > FIDELITY_LIMIT,
        original_residual: original,
        projected_residual: after,
        jensen_holds: after.mean <= original.mean + 3.0 * noise + 1e-12,
    };
    Ok((proj, report))
}

/// Mean over paths with a standard error from the means of replicate groups, which are independent.
fn group_estimate(samples: &[f64], replicates: usize) -> MeanEstimate {
    let groups: Vec<f64> = samples.chunks(replicates).map(|g| g.iter().sum::<f64>() / g.len() as f64).collect();
    MeanEstimate { samples: samples.len(), ..MeanEstimate::from_samples(&groups) }
}

/// Serializable summary of an oligopoly run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OligopolyReport {
    pub firms: usize,
    pub paths: usize,
    pub min_capital: f64,
    pub capital_nonnegative: bool,
    pub investment_totals: Vec<f64>,
    pub conditions: SmpReport,
    pub projected_investment_totals: Vec<f64>,
    pub projected_conditions: SmpReport,
    pub projection: ProjectionReport,
}

impl OligopolyReport {
    pub fn new(
        original: &OligopolyEquilibrium,
        projected: &OligopolyEquilibrium,
        projection: ProjectionReport,
    ) -> Self {
        Self {
            firms: original.problem.players(),
            paths: original.investment.paths(),
            min_capital: original.min_capital.min(projected.min_capital),
            capital_nonnegative: original.min_capital >= -1e-12 && projected.min_capital >= -1e-12,
            investment_totals: original.investment_totals.clone(),
            conditions: original.conditions.clone(),
            projected_investment_totals: projected.investment_totals.clone(),
            projected_conditions: projected.conditions.clone(),
            projection,
        }
    }

    pub fn passed(&self) -> bool {
        self.capital_nonnegative && self.projected_conditions.passed && self.projection.jensen_holds
    }
}

/// The demand paths of a solved problem, for CSV export.
pub fn write_demand_csv<W: std::io::Write>(demand: &ExogenousPaths, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["path", "node", "demand"])?;
    for p in 0..demand.paths {
        for k in 0..demand.nodes {
            w.write_record([p.to_string(), k.to_string(), format!("{:e}", demand.get(p, k))])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Brownian sample used for the auxiliary capital noises of the capped games.
pub fn auxiliary_noise(params: &OligopolyParams, paths: usize, grid: TimeGrid, seed: u64) -> Result<BrownianPaths> {
    sample_brownian(paths, grid, params.firms, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{assemble_qp_problem, qp_nash, ProfileIncrements};

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 20).unwrap()
    }

    #[test]
    fn brownian_demand_moments() {
        let mut params =
            OligopolyParams::symmetric(1, 1.0, 1.0, 0.1, 0.0, DemandModel::Bm { mu: 0.0, sigma: 1.0 }, 0.0);
        let d = simulate_demand(&params, 4000, grid(), 1).unwrap();
        let end: Vec<f64> = (0..4000).map(|p| d.get(p, 20)).collect();
        let m = MeanEstimate::from_samples(&end);
        assert!(m.mean.abs() < 4.0 * m.std_error, "{m:?}");
        params.deterministic_demand = true;
        let d = simulate_demand(&params, 3, grid(), 1).unwrap();
        assert!(d.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_reverting_demand_stays_at_its_mean() {
        let params = OligopolyParams::symmetric(
            1,
            1.0,
            1.0,
            0.1,
            0.0,
            DemandModel::Ou { kappa: 1.0, mean: 2.0, sigma: 0.5 },
            2.0,
        );
        let d = simulate_demand(&params, 4000, grid(), 2).unwrap();
        for k in [5, 10, 20] {
            let m = MeanEstimate::from_samples(&(0..4000).map(|p| d.get(p, k)).collect::<Vec<_>>());
            assert!((m.mean - 2.0).abs() < 4.0 * m.std_error);
        }
    }

    #[test]
    fn volatility_outside_bounds_is_rejected() {
        let demand =
            DemandModel::CustomAffine { drift: [0.0, 0.0], volatility: [0.5, 1.0], sigma_lower: 0.2, sigma_upper: 0.8 };
        let params = OligopolyParams::symmetric(1, 1.0, 1.0, 0.1, 0.0, demand, 1.0);
        assert!(matches!(simulate_demand(&params, 10, grid(), 3), Err(LqsgError::InvalidParameter(_))));
        let zero = OligopolyParams::symmetric(1, 1.0, 1.0, 0.1, 0.0, DemandModel::Bm { mu: 0.0, sigma: 0.0 }, 1.0);
        assert!(zero.check().is_err());
    }

    #[test]
    fn mapping_reproduces_the_profit() {
        let mut params =
            OligopolyParams::symmetric(2, 0.5, 0.7, 0.2, 1.0, DemandModel::Bm { mu: 0.0, sigma: 1.0 }, 3.0);
        params.alpha = vec![1.0, 2.0];
        params.rho = 0.3;
        let d = simulate_demand(&params, 1, grid(), 4).unwrap();
        let problem = oligopoly_problem(&params, grid(), d.clone()).unwrap();
        let z = [1.5, 0.5, d.get(0, 7)];
        let m = problem.running(0, 7);
        let value = crate::problem::quad_form(m, &z);
        let disc = (-0.3 * grid().time(7)).exp();
        let profit = disc * z[0] * (z[2] - 0.7 * (z[0] + 2.0 * z[1]));
        assert!((value + profit).abs() < 1e-12);
        let marginal = problem.marginal_running(1, 7);
        assert!((marginal[1] - disc * 2.0 * 0.7 * 4.0).abs() < 1e-12);
        assert!((marginal[2] + disc * 2.0).abs() < 1e-12);
    }

    #[test]
    fn prohibitive_price_impact_gives_zero_investment() {
        let params = OligopolyParams::symmetric(2, 1.0, 1e3, 0.1, 0.5, DemandModel::Bm { mu: 0.0, sigma: 0.2 }, 1.0);
        let solver = OligopolySolver { paths: 200, schedule: vec![64.0, 128.0], ..OligopolySolver::default() };
        let (eq, _) = solve_oligopoly(&params, grid(), 5, &solver).unwrap();
        assert!(eq.investment.players.iter().all(|c| c.xi.iter().all(|&v| v == 0.0)));
        assert!(eq.conditions.players.iter().all(|p| p.slack_plus > 0.0));
        assert!(eq.conditions.passed);
        let (proj, report) =
            project_to_common_filtration(&eq, &RegressionBasis::default(), &RegressionBasis::default()).unwrap();
        assert!(proj.investment.players.iter().all(|c| c.xi.iter().all(|&v| v == 0.0)));
        assert_eq!(report.clipped_fraction, 0.0);
    }

    #[test]
    fn deterministic_demand_matches_the_oracle() {
        let mut params =
            OligopolyParams::symmetric(1, 1.0, 1.0, 0.1, 0.0, DemandModel::Bm { mu: 0.0, sigma: 1.0 }, 5.0);
        params.deterministic_demand = true;
        let solver = OligopolySolver { paths: 64, ..OligopolySolver::default() };
        let (eq, _) = solve_oligopoly(&params, grid(), 6, &solver).unwrap();
        let sol = qp_nash(&assemble_qp_problem(&eq.problem).unwrap()).unwrap();
        let got = ProfileIncrements::from_controls(&eq.investment);
        let tv = sol.increments.total_variation();
        assert!(got.l1_distance(&sol.increments) <= 0.05 * tv, "{} vs {tv}", got.l1_distance(&sol.increments));
        assert!(eq.min_capital >= 0.0);
    }

    #[test]
    fn adapted_investment_projects_to_itself() {
        let params = OligopolyParams::symmetric(1, 1.0, 1.0, 0.1, 0.0, DemandModel::Bm { mu: 0.0, sigma: 1.0 }, 1.0);
        let demand = simulate_demand(&params, 400, grid(), 7).unwrap();
        let problem = oligopoly_problem(&params, grid(), demand.clone()).unwrap();
        let mut investment = ProfileControls::zeros(1, 400, 21);
        for p in 0..400 {
            let mut prev = 0.0;
            for k in 0..21 {
                let level = demand_features(&demand, k)[3 * p + 2].max(0.0);
                investment.players[0].xi[p * 21 + k] = level - prev;
                prev = level;
            }
        }
        let basis = RegressionBasis::default();
        let eq = evaluate(problem, investment.clone(), &basis, SmpTolerances::stochastic(), false, 1).unwrap();
        let (proj, report) = project_to_common_filtration(&eq, &basis, &basis).unwrap();
        let d = proj.investment.increment_distance(&investment);
        assert!(d < 1e-6, "{d}");
        assert!(report.clipped_fraction < 1e-6);
    }
}
