//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use lqsg::adjoint::{nested_estimates, regress_adjoint, NestedConfig, OpenLoopPolicy, RegressionBasis};
use lqsg::experiment::{run, ExperimentConfig, Mode, ScenarioConfig, SolverConfig};
use lqsg::limit::solve_ladder_in;
use lqsg::lipschitz::{bang_bang_feedback, pre_hamiltonian, FeedbackParams};
use lqsg::model::{GameSpec, TimeGrid};
use lqsg::oligopoly::{project_to_common_filtration, solve_oligopoly, DemandModel, OligopolyParams, OligopolySolver};
use lqsg::oracle::{assemble_qp_problem, qp_nash, OracleSolution, ProfileIncrements};
use lqsg::paths::{sample_brownian, simulate, ProfileControls};
use lqsg::problem::LqsProblem;
use lqsg::smp::{check_smp_in, deviation_suite, SmpTolerances};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LADDER: [f64; 5] = [16.0, 32.0, 64.0, 128.0, 256.0];
const STOCHASTIC_SIGMA: f64 = 0.3;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

/// Two players, `a = (1, 1)`, `c = 0.5`, coercivity matrix `[[2, 1], [1, 2]]`.
fn reference(sigma: f64) -> GameSpec {
    GameSpec::constant(
        TimeGrid::new(1.0, 20).unwrap(),
        &[1.0, 1.0],
        &[0.0, 0.0],
        &[sigma, sigma],
        &[0.0, 0.0],
        &[DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 0.0]), DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 2.0])],
        &[0.5, 0.5],
        &[0.5, 0.5],
    )
    .unwrap()
}

fn ladder_params() -> FeedbackParams {
    FeedbackParams { sweep_tol: 5e-3, ..FeedbackParams::default() }
}

fn oracle(problem: &LqsProblem) -> OracleSolution {
    qp_nash(&assemble_qp_problem(problem).unwrap()).unwrap()
}

fn relative_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let problem = LqsProblem::from_spec(&reference(0.0)).unwrap();
    let sol = oracle(&problem);
    let bm = sample_brownian(256, problem.grid(), 2, 1).unwrap();
    let ladder = solve_ladder_in(&problem, &LADDER, &bm, &ladder_params()).unwrap();
    let elapsed = start.elapsed();
    let tv = sol.increments.total_variation();
    let l1 = ProfileIncrements::from_controls(&ladder.candidate).l1_distance(&sol.increments);
    let cost_gap =
        (0..2).map(|i| relative_gap(ladder.candidate_costs[i].mean, sol.certificate.costs[i])).fold(0.0, f64::max);
    outcome(
        l1 <= 0.05 * tv && cost_gap <= 0.01 && elapsed <= Duration::from_secs(30),
        format!(
            "L1 {l1:.4e} vs {:.4e}, worst cost gap {:.3}%, {:.1} s",
            0.05 * tv,
            100.0 * cost_gap,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let problem = LqsProblem::from_spec(&reference(0.0)).unwrap();
    let game = assemble_qp_problem(&problem).unwrap();
    let sol = qp_nash(&game).unwrap();
    let candidate = sol.increments.to_controls(1).unwrap();
    let bm = sample_brownian(1, problem.grid(), 2, 1).unwrap();
    let (report, adjoint) =
        check_smp_in(&problem, &candidate, &bm, &RegressionBasis::default(), SmpTolerances::deterministic()).unwrap();
    let mut worst = 0.0f64;
    for i in 0..2 {
        let (up, down) = game.multipliers(i, &sol.increments);
        for k in 0..problem.grid().nodes() {
            let y = adjoint.get(0, k, i);
            worst = worst.max((up[k] - (y + problem.c_plus(i, k))).abs());
            worst = worst.max((down[k] - (-y + problem.c_minus(i, k))).abs());
        }
    }
    let slack =
        report.players.iter().flat_map(|p| [Some(p.slack_plus), p.slack_minus]).flatten().fold(f64::INFINITY, f64::min);
    let residual = report
        .players
        .iter()
        .flat_map(|p| [Some(p.residual_plus.mean), p.residual_minus.map(|r| r.mean)])
        .flatten()
        .fold(f64::NEG_INFINITY, f64::max);
    outcome(
        report.passed && worst <= 1e-6,
        format!(
            "min slack {slack:.3e}, max residual {residual:.3e}, scale {:.3}, multiplier gap {worst:.2e}",
            report.scale
        ),
    )
}

fn criterion_3() -> Outcome {
    let problem = LqsProblem::from_spec(&reference(0.0)).unwrap();
    let sol = oracle(&problem);
    let candidate = sol.increments.to_controls(1).unwrap();
    let bm = sample_brownian(1, problem.grid(), 2, 1).unwrap();
    let basis = RegressionBasis::default();
    let (_, adjoint) = check_smp_in(&problem, &candidate, &bm, &basis, SmpTolerances::deterministic()).unwrap();
    let det = deviation_suite(&problem, &candidate, &bm, &adjoint, 25, 3).unwrap();

    let start = Instant::now();
    let problem = LqsProblem::from_spec(&reference(STOCHASTIC_SIGMA)).unwrap();
    let bm = sample_brownian(20_000, problem.grid(), 2, 3).unwrap();
    let ladder = solve_ladder_in(&problem, &LADDER, &bm, &ladder_params()).unwrap();
    let (report, adjoint) =
        check_smp_in(&problem, &ladder.candidate, &bm, &basis, SmpTolerances::stochastic()).unwrap();
    let sto = deviation_suite(&problem, &ladder.candidate, &bm, &adjoint, 25, 4).unwrap();
    let elapsed = start.elapsed();
    outcome(
        det.passed() && report.passed && sto.passed() && elapsed <= Duration::from_secs(300),
        format!(
            "deterministic: {} deviations, {} failures, min gap {:.3e}; stochastic: certified {}, {} deviations, {} failures, min gap {:.3e}, {:.0} s",
            det.gaps.len(),
            det.nash_failures + det.bound_failures,
            det.min_gap,
            report.passed,
            sto.gaps.len(),
            sto.nash_failures + sto.bound_failures,
            sto.min_gap,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_4() -> Outcome {
    let basis = RegressionBasis::default();
    let single = |sigma: f64, x0: f64| {
        GameSpec::constant(
            TimeGrid::new(1.0, 20).unwrap(),
            &[0.0],
            &[0.0],
            &[sigma],
            &[x0],
            &[DMatrix::from_element(1, 1, 0.5)],
            &[1.0],
            &[1.0],
        )
        .unwrap()
    };
    let problem = LqsProblem::from_spec(&single(0.0, 1.5)).unwrap();
    let grid = problem.grid();
    let bm = sample_brownian(1, grid, 1, 1).unwrap();
    let zero = ProfileControls::zeros(1, 1, grid.nodes());
    let y = regress_adjoint(&problem, &simulate(&problem, &zero, &bm, 0.0).unwrap(), &basis).unwrap();
    let exact = (0..grid.nodes())
        .map(|k| (y.get(0, k, 0) - 1.5 * (1.0 + grid.horizon() - grid.time(k))).abs())
        .fold(0.0, f64::max);

    let problem = LqsProblem::from_spec(&single(1.0, 0.0)).unwrap();
    let linear = RegressionBasis::new(1, false).unwrap();
    let paths = 100_000;
    let bm = sample_brownian(paths, grid, 1, 2).unwrap();
    let zero = ProfileControls::zeros(1, paths, grid.nodes());
    let states = simulate(&problem, &zero, &bm, 0.0).unwrap();
    let y = regress_adjoint(&problem, &states, &linear).unwrap();
    let mut slope_err = 0.0f64;
    for k in 1..grid.nodes() {
        let xs: Vec<f64> = (0..paths).map(|p| states.get(p, k, 0)).collect();
        let ys: Vec<f64> = (0..paths).map(|p| y.get(p, k, 0)).collect();
        let (mx, my) = (xs.iter().sum::<f64>() / paths as f64, ys.iter().sum::<f64>() / paths as f64);
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let want = 1.0 + grid.horizon() - grid.time(k);
        slope_err = slope_err.max(relative_gap(cov / var, want));
    }

    let problem = LqsProblem::from_spec(&reference(STOCHASTIC_SIGMA)).unwrap();
    let det = oracle(&LqsProblem::from_spec(&reference(0.0)).unwrap());
    let paths = 100_000;
    let controls = det.increments.to_controls(paths).unwrap();
    let bm = sample_brownian(paths, grid, 2, 5).unwrap();
    let states = simulate(&problem, &controls, &bm, 0.0).unwrap();
    let y = regress_adjoint(&problem, &states, &basis).unwrap();
    let policy = OpenLoopPolicy::from_controls(&controls).unwrap();
    let checkpoints = vec![0, 5, 10, 15, 19];
    let mut worst_z = 0.0f64;
    for (j, &k) in checkpoints.iter().enumerate() {
        let cfg = NestedConfig {
            inner: 2000,
            checkpoints: vec![k],
            outer_paths: vec![17 * j + 3],
            sigma_floor: 0.0,
            seed: 6,
        };
        for e in nested_estimates(&problem, &states, &policy, &cfg).unwrap() {
            let z = (y.get(e.path, e.node, e.player) - e.mean).abs() / e.std_error.max(1e-300);
            worst_z = worst_z.max(z);
        }
    }
    outcome(
        exact <= 1e-12 && slope_err <= 0.02 && worst_z <= 3.0,
        format!(
            "closed-form error {exact:.1e}, worst slope error {:.2}%, worst nested z-score {worst_z:.2}",
            100.0 * slope_err
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    let mut failures = 0;
    for _ in 0..10_000 {
        let y: f64 = rng.random_range(-3.0..3.0);
        let cp: f64 = rng.random_range(0.01..2.0);
        let cm: f64 = rng.random_range(0.01..2.0);
        let n: f64 = rng.random_range(0.5..50.0);
        let x: f64 = rng.random_range(-2.0..2.0);
        let spec = GameSpec::constant(
            TimeGrid::new(1.0, 1).unwrap(),
            &[0.3],
            &[-0.2],
            &[0.0],
            &[0.0],
            &[DMatrix::from_element(1, 1, 0.7)],
            &[cp],
            &[cm],
        )
        .unwrap();
        let h = |u: f64, w: f64| pre_hamiltonian(&spec, 0, 0, n, &[x], &[u], &[w], &[y]).unwrap();
        let (u, w) = bang_bang_feedback(y, cp, cm, n);
        let at_feedback = h(u, w);
        let mut grid_min = f64::INFINITY;
        for a in 0..40 {
            for b in 0..25 {
                grid_min = grid_min.min(h((n * a as f64 / 39.0).min(n), (n * b as f64 / 24.0).min(n)));
            }
        }
        let gap = (at_feedback - grid_min).abs() / (1.0 + grid_min.abs());
        worst = worst.max(gap);
        if gap > 1e-12 {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("10000 draws on a 1000-point grid, {failures} misses, worst relative gap {worst:.1e}"),
    )
}

fn criterion_6() -> Outcome {
    let problem = LqsProblem::from_spec(&reference(STOCHASTIC_SIGMA)).unwrap();
    let bm = sample_brownian(1024, problem.grid(), 2, 7).unwrap();
    let ladder = solve_ladder_in(&problem, &[2.0, 4.0, 8.0, 16.0, 32.0], &bm, &ladder_params()).unwrap();
    let first = ladder.rungs[0].bounds;
    let within = ladder
        .rungs
        .iter()
        .all(|r| r.bounds.state_moment <= 10.0 * first.state_moment && r.bounds.variation <= 10.0 * first.variation);
    let moments: Vec<String> = ladder.rungs.iter().map(|r| format!("{:.3}", r.bounds.state_moment)).collect();
    let variations: Vec<String> = ladder.rungs.iter().map(|r| format!("{:.3}", r.bounds.variation)).collect();
    let gaps: Vec<String> = ladder.cesaro_gaps.iter().map(|g| format!("{g:.3e}")).collect();
    outcome(
        within && ladder.tail_gaps_decreasing(),
        format!(
            "state moments [{}], variations [{}], Cesaro gaps [{}]",
            moments.join(", "),
            variations.join(", "),
            gaps.join(", ")
        ),
    )
}

fn criterion_7() -> Outcome {
    let grid = TimeGrid::new(1.0, 20).unwrap();
    let demand = DemandModel::Ou { kappa: 1.0, mean: 5.0, sigma: 1.0 };

    let steep = OligopolyParams::symmetric(2, 1.0, 1e3, 0.1, 0.5, demand.clone(), 5.0);
    let solver = OligopolySolver { paths: 256, ..OligopolySolver::default() };
    let (eq, _) = solve_oligopoly(&steep, grid, 1, &solver).unwrap();
    let idle = eq.investment.players.iter().all(|c| c.xi.iter().all(|&v| v == 0.0));
    let min_slack = eq.conditions.players.iter().map(|p| p.slack_plus).fold(f64::INFINITY, f64::min);
    let a = idle && min_slack > 0.0;

    let mut flat = OligopolyParams::symmetric(1, 1.0, 1.0, 0.1, 0.0, DemandModel::Bm { mu: 0.0, sigma: 1.0 }, 5.0);
    flat.deterministic_demand = true;
    let solver = OligopolySolver { paths: 64, ..OligopolySolver::default() };
    let (eq, ladder) = solve_oligopoly(&flat, grid, 2, &solver).unwrap();
    let sol = oracle(&eq.problem);
    let tv = sol.increments.total_variation();
    let l1 = ProfileIncrements::from_controls(&eq.investment).l1_distance(&sol.increments);
    let cost_gap = relative_gap(ladder.candidate_costs[0].mean, sol.certificate.costs[0]);
    let b = l1 <= 0.05 * tv && cost_gap <= 0.01;

    let market = OligopolyParams::symmetric(2, 1.0, 1.0, 0.1, 0.0, demand, 5.0);
    let solver = OligopolySolver { paths: 512, ..OligopolySolver::default() };
    let (eq, _) = solve_oligopoly(&market, grid, 3, &solver).unwrap();
    let basis = RegressionBasis::default();
    let (proj, report) = project_to_common_filtration(&eq, &basis, &basis).unwrap();
    let c = proj.conditions.passed && report.jensen_holds;
    outcome(
        a && b && c,
        format!(
            "(a) idle {idle}, min slack {min_slack:.3e}; (b) L1 {l1:.3e} vs {:.3e}, cost gap {:.3}%; (c) projected conditions {}, residual {:.3e} vs unprojected {:.3e}",
            0.05 * tv,
            100.0 * cost_gap,
            proj.conditions.passed,
            report.projected_residual.mean,
            report.original_residual.mean
        ),
    )
}

fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let lqsg_cfg = ExperimentConfig {
        mode: Mode::Lqsg,
        seed: 8,
        spec: Some(reference(STOCHASTIC_SIGMA).to_spec_file()),
        scenario: None,
        solver: SolverConfig {
            paths: 512,
            n_schedule: vec![4.0, 8.0, 16.0],
            sweep_tol: 5e-3,
            ..SolverConfig::default()
        },
        candidate: None,
        output: None,
    };
    let oligopoly_cfg = ExperimentConfig {
        mode: Mode::Oligopoly,
        seed: 8,
        spec: None,
        scenario: Some(ScenarioConfig {
            horizon: 1.0,
            steps: 20,
            params: OligopolyParams::symmetric(
                2,
                1.0,
                1.0,
                0.1,
                0.0,
                DemandModel::Ou { kappa: 1.0, mean: 5.0, sigma: 1.0 },
                5.0,
            ),
        }),
        solver: SolverConfig { paths: 256, n_schedule: vec![64.0, 128.0], sweep_tol: 5e-3, ..SolverConfig::default() },
        candidate: None,
        output: None,
    };
    let mut identical = true;
    let mut files = 0;
    for (name, cfg) in [("lqsg", &lqsg_cfg), ("oligopoly", &oligopoly_cfg)] {
        let mut outputs = Vec::new();
        for threads in [1, 4] {
            let dir = tmp.path().join(format!("{name}-{threads}"));
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| run(cfg, &dir)).unwrap();
            outputs.push(read_dir_sorted(&dir));
        }
        files += outputs[0].len();
        identical &= outputs[0] == outputs[1] && !outputs[0].is_empty();
    }
    outcome(identical, format!("{files} artifacts compared across 1 and 4 worker threads"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("oracle equivalence", criterion_1),
        ("first-order certification", criterion_2),
        ("deviation and subgradient suite", criterion_3),
        ("adjoint correctness", criterion_4),
        ("feedback argmin", criterion_5),
        ("bound monitor", criterion_6),
        ("oligopoly pipeline", criterion_7),
        ("reproducibility", criterion_8),
    ];
    let mut failed = 0;
    for (idx, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = check();
        if !o.passed {
            failed += 1;
        }
        println!(
            "{} criterion {} ({name}): {} [{:.1} s]",
            if o.passed { "PASS" } else { "FAIL" },
            idx + 1,
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} of 8 criteria failed");
        std::process::exit(1);
    }
    println!("all 8 criteria passed");
}
