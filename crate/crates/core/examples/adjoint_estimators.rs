//! Regression adjoint against nested Monte Carlo, and the two regression schemes.

use lqsg::adjoint::{
    nested_estimates, regress_adjoint, NestedConfig, OpenLoopPolicy, RegressionBasis, RegressionScheme,
};
use lqsg::model::{GameSpec, TimeGrid};
use lqsg::paths::{sample_brownian, simulate, ProfileControls};
use lqsg::problem::LqsProblem;
use nalgebra::DMatrix;

fn main() -> lqsg::Result<()> {
    let spec = GameSpec::constant(
        TimeGrid::new(1.0, 20)?,
        &[0.0],
        &[0.0],
        &[1.0],
        &[0.0],
        &[DMatrix::from_element(1, 1, 0.5)],
        &[1.0],
        &[1.0],
    )?;
    let problem = LqsProblem::from_spec(&spec)?;
    let paths = 50_000;
    let controls = ProfileControls::zeros(1, paths, 21);
    let states = simulate(&problem, &controls, &bm(&problem, paths)?, 0.0)?;
    let linear = RegressionBasis::new(1, false)?;
    for scheme in [RegressionScheme::Direct, RegressionScheme::OneStep] {
        let y = regress_adjoint(&problem, &states, &linear.with_scheme(scheme))?;
        let slope = |k: usize| (y.get(0, k, 0) - y.get(1, k, 0)) / (states.get(0, k, 0) - states.get(1, k, 0));
        println!("{scheme:?}: slope at t=0.05 {:.4}, at t=0.5 {:.4} (exact 1.95, 1.5)", slope(1), slope(10));
    }
    let y = regress_adjoint(&problem, &states, &RegressionBasis::default())?;
    let cfg =
        NestedConfig { inner: 4000, checkpoints: vec![10], outer_paths: vec![0, 1, 2], sigma_floor: 0.0, seed: 9 };
    for e in nested_estimates(&problem, &states, &OpenLoopPolicy::from_controls(&controls)?, &cfg)? {
        println!(
            "path {} node {}: nested {:.4} +- {:.4}, regression {:.4}",
            e.path,
            e.node,
            e.mean,
            e.std_error,
            y.get(e.path, e.node, e.player)
        );
    }
    Ok(())
}

fn bm(problem: &LqsProblem, paths: usize) -> lqsg::Result<lqsg::paths::BrownianPaths> {
    sample_brownian(paths, problem.grid(), 1, 3)
}
