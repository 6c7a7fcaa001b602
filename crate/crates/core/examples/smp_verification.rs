//! First-order conditions and the random deviation suite for a candidate profile.

use lqsg::adjoint::RegressionBasis;
use lqsg::model::{GameSpec, TimeGrid};
use lqsg::oracle::{assemble_qp_problem, qp_nash};
use lqsg::paths::sample_brownian;
use lqsg::problem::LqsProblem;
use lqsg::smp::{check_smp_in, deviation_suite, SmpTolerances};
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
    let candidate = qp_nash(&assemble_qp_problem(&problem)?)?.increments.to_controls(1)?;
    let bm = sample_brownian(1, problem.grid(), 2, 1)?;
    let (report, adjoint) =
        check_smp_in(&problem, &candidate, &bm, &RegressionBasis::default(), SmpTolerances::deterministic())?;
    println!("{}", report.summary());
    let suite = deviation_suite(&problem, &candidate, &bm, &adjoint, 25, 7)?;
    println!(
        "{} deviations: {} Nash failures, {} bound failures, smallest gap {:.4}",
        suite.gaps.len(),
        suite.nash_failures,
        suite.bound_failures,
        suite.min_gap
    );
    Ok(())
}
