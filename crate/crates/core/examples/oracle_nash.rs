//! Deterministic reference game solved as a finite-dimensional QP Nash problem.

use lqsg::model::{validate_spec, GameSpec, TimeGrid};
use lqsg::oracle::{assemble_qp, qp_nash};
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
    let report = validate_spec(&spec)?;
    println!("standing assumptions hold: {}", report.passed);
    let sol = qp_nash(&assemble_qp(&spec)?)?;
    println!("costs {:?}", sol.certificate.costs);
    let active = |v: &[f64]| -> String {
        let hits: Vec<String> =
            v.iter().enumerate().filter(|(_, d)| **d > 1e-9).map(|(k, d)| format!("{k}:{d:.4}")).collect();
        hits.join(", ")
    };
    for i in 0..2 {
        println!("player {i}: push [{}], pull [{}]", active(&sol.increments.xi[i]), active(&sol.increments.zeta[i]));
    }
    Ok(())
}
