//! Rate-capped Nash equilibria along an increasing cap schedule, Cesaro-averaged.

use lqsg::limit::solve_ladder_in;
use lqsg::lipschitz::FeedbackParams;
use lqsg::model::{GameSpec, TimeGrid};
use lqsg::oracle::{assemble_qp_problem, qp_nash, ProfileIncrements};
use lqsg::paths::sample_brownian;
use lqsg::problem::LqsProblem;
use nalgebra::DMatrix;

fn main() -> lqsg::Result<()> {
    let spec = GameSpec::constant(
        TimeGrid::new(1.0, 20)?,
        &[1.0, 1.0],
        &[0.0, 0.0],
        &[0.0, 0.0],
        &[0.0, 0.0],
        &[DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 0.0]), DMatrix::from_row_slice(2, 2, &[0.0, 0.5, 0.5, 2.0])],
        &[0.5, 0.5],
        &[0.5, 0.5],
    )?;
    let problem = LqsProblem::from_spec(&spec)?;
    let bm = sample_brownian(256, problem.grid(), 2, 1)?;
    let params = FeedbackParams { sweep_tol: 5e-3, ..FeedbackParams::default() };
    let ladder = solve_ladder_in(&problem, &[16.0, 32.0, 64.0, 128.0, 256.0], &bm, &params)?;
    for r in &ladder.rungs {
        println!("n = {:>5}: sweeps {:>3}, residual {:.2e}, converged {}", r.n, r.sweeps, r.residual, r.converged);
    }
    println!("Cesaro gaps {:?}", ladder.cesaro_gaps);
    let oracle = qp_nash(&assemble_qp_problem(&problem)?)?;
    let l1 = ProfileIncrements::from_controls(&ladder.candidate).l1_distance(&oracle.increments);
    println!("L1 distance to oracle {l1:.4} (total variation {:.4})", oracle.increments.total_variation());
    Ok(())
}
