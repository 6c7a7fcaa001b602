//! Irreversible capacity investment under Ornstein-Uhlenbeck demand.

use lqsg::adjoint::RegressionBasis;
use lqsg::model::TimeGrid;
use lqsg::oligopoly::{project_to_common_filtration, solve_oligopoly, DemandModel, OligopolyParams, OligopolySolver};

fn main() -> lqsg::Result<()> {
    let params =
        OligopolyParams::symmetric(2, 1.0, 1.0, 0.1, 0.0, DemandModel::Ou { kappa: 1.0, mean: 5.0, sigma: 1.0 }, 5.0);
    let solver = OligopolySolver { paths: 512, ..OligopolySolver::default() };
    let (eq, ladder) = solve_oligopoly(&params, TimeGrid::new(1.0, 20)?, 11, &solver)?;
    println!("rungs converged: {}", ladder.all_converged());
    println!("expected total investment per firm {:?}", eq.investment_totals);
    println!("conditions on the full filtration: {}", eq.conditions.passed);
    let basis = RegressionBasis::default();
    let (proj, report) = project_to_common_filtration(&eq, &basis, &basis)?;
    println!(
        "projected onto demand information: conditions {}, residual {:.3e} vs {:.3e}, Jensen {}",
        proj.conditions.passed, report.projected_residual.mean, report.original_residual.mean, report.jensen_holds
    );
    Ok(())
}
