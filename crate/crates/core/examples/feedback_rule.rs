//! Bang-bang feedback minimizes the pre-Hamiltonian over the rate box.

use lqsg::lipschitz::{bang_bang_feedback, pre_hamiltonian};
use lqsg::model::{GameSpec, TimeGrid};
use nalgebra::DMatrix;

fn main() -> lqsg::Result<()> {
    let (cp, cm, n) = (0.5, 0.8, 10.0);
    let spec = GameSpec::constant(
        TimeGrid::new(1.0, 1)?,
        &[0.0],
        &[0.0],
        &[0.0],
        &[0.0],
        &[DMatrix::from_element(1, 1, 1.0)],
        &[cp],
        &[cm],
    )?;
    for y in [-1.0, -0.5, 0.0, 0.6, 0.8, 1.2] {
        let (u, w) = bang_bang_feedback(y, cp, cm, n);
        let h = pre_hamiltonian(&spec, 0, 0, n, &[0.3], &[u], &[w], &[y])?;
        let idle = pre_hamiltonian(&spec, 0, 0, n, &[0.3], &[0.0], &[0.0], &[y])?;
        println!("y = {y:>5}: push {u:>4}, pull {w:>4}, H {h:.4} (inaction {idle:.4})");
    }
    Ok(())
}
