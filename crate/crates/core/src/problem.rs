//! Numeric form of a linear-quadratic-singular game shared by every solver.
//!
//! Each controlled coordinate follows `dX^i = (a^i + b^i X^i) dt + sigma^i dW^i
//! + dxi^i - dzeta^i`. Player `i` pays `z R^i z` per unit time and `z T^i z`
//! at the horizon on the augmented vector `z = (X^1, ..., X^N, exo)`, where the
//! optional exogenous coordinate is an uncontrolled process supplied as
//! precomputed paths. `R^i` need not be symmetric; the marginal cost of
//! `X^i` is row `i` of `R^i + (R^i)^T`.

use nalgebra::DMatrix;

use crate::error::{LqsgError, Result};
use crate::model::{GameSpec, TimeGrid};

/// Precomputed values of an uncontrolled one-dimensional process, `[path][node]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExogenousPaths {
    pub paths: usize,
    pub nodes: usize,
    pub values: Vec<f64>,
}

impl ExogenousPaths {
    pub fn new(paths: usize, nodes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != paths * nodes {
            return Err(LqsgError::Dimension(format!(
                "exogenous values: expected {} entries, got {}",
                paths * nodes,
                values.len()
            )));
        }
        Ok(Self { paths, nodes, values })
    }

    #[inline]
    pub fn get(&self, path: usize, node: usize) -> f64 {
        self.values[path * self.nodes + node]
    }

    pub fn path(&self, path: usize) -> &[f64] {
        &self.values[path * self.nodes..(path + 1) * self.nodes]
    }
}

/// Raw ingredients of a problem, validated by [`LqsProblem::new`].
#[derive(Debug, Clone)]
pub struct ProblemParts {
    pub grid: TimeGrid,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    pub running: Vec<Vec<DMatrix<f64>>>,
    pub terminal: Vec<DMatrix<f64>>,
    pub c_plus: Vec<Vec<f64>>,
    pub c_minus: Vec<Vec<f64>>,
    /// When false, only upward controls are admissible (`zeta = 0`).
    pub allow_decrease: bool,
    pub exogenous: Option<ExogenousPaths>,
}

#[derive(Debug, Clone)]
pub struct LqsProblem {
    parts: ProblemParts,
    players: usize,
    width: usize,
    /// `exp(b[i][k] dt)`, the one-step propagation factor.
    growth: Vec<Vec<f64>>,
    /// Row `i` of `R^i_k + (R^i_k)^T`.
    marginal_running: Vec<Vec<Vec<f64>>>,
    marginal_terminal: Vec<Vec<f64>>,
    /// `h[i][k]`: second derivative of player `i`'s cost in its own increment at node `k`.
    own_curvature: Vec<Vec<f64>>,
}

impl LqsProblem {
    pub fn new(parts: ProblemParts) -> Result<Self> {
        let n = parts.x0.len();
        if n == 0 {
            return Err(LqsgError::Structural("at least one player is required".into()));
        }
        let nodes = parts.grid.nodes();
        let width = n + usize::from(parts.exogenous.is_some());
        let check = |name: &str, s: &Vec<Vec<f64>>| -> Result<()> {
            if s.len() != n || s.iter().any(|r| r.len() != nodes) {
                return Err(LqsgError::Dimension(format!("`{name}` must be {n} x {nodes}")));
            }
            if s.iter().flatten().any(|v| !v.is_finite()) {
                return Err(LqsgError::Structural(format!("`{name}` has non-finite samples")));
            }
            Ok(())
        };
        check("a", &parts.a)?;
        check("b", &parts.b)?;
        check("sigma", &parts.sigma)?;
        check("c_plus", &parts.c_plus)?;
        check("c_minus", &parts.c_minus)?;
        if parts.running.len() != n
            || parts.terminal.len() != n
            || parts.running.iter().any(|r| r.len() != nodes)
            || parts
                .running
                .iter()
                .flatten()
                .chain(parts.terminal.iter())
                .any(|m| m.nrows() != width || m.ncols() != width)
        {
            return Err(LqsgError::Dimension(format!(
                "cost matrices must be {width} x {width} for {n} players over {nodes} nodes"
            )));
        }
        if let Some(exo) = &parts.exogenous {
            if exo.nodes != nodes {
                return Err(LqsgError::Dimension("exogenous paths do not match the grid".into()));
            }
        }
        let dt = parts.grid.dt();
        let growth: Vec<Vec<f64>> = parts.b.iter().map(|row| row.iter().map(|b| (b * dt).exp()).collect()).collect();
        let marginal_row =
            |m: &DMatrix<f64>, i: usize| -> Vec<f64> { (0..width).map(|j| m[(i, j)] + m[(j, i)]).collect() };
        let marginal_running: Vec<Vec<Vec<f64>>> =
            (0..n).map(|i| parts.running[i].iter().map(|m| marginal_row(m, i)).collect()).collect();
        let marginal_terminal: Vec<Vec<f64>> = (0..n).map(|i| marginal_row(&parts.terminal[i], i)).collect();
        let steps = parts.grid.steps();
        let own_curvature = (0..n)
            .map(|i| {
                let mut h = vec![0.0; nodes];
                h[steps] = marginal_terminal[i][i];
                for k in (0..steps).rev() {
                    let g = growth[i][k];
                    h[k] = marginal_running[i][k][i] * dt + g * g * h[k + 1];
                }
                h
            })
            .collect();
        Ok(Self { players: n, width, growth, marginal_running, marginal_terminal, own_curvature, parts })
    }

    pub fn from_spec(spec: &GameSpec) -> Result<Self> {
        spec.check_structure()?;
        Self::new(ProblemParts {
            grid: spec.grid,
            a: spec.a.clone(),
            b: spec.b.clone(),
            sigma: spec.sigma.clone(),
            x0: spec.x0.clone(),
            running: spec.q.clone(),
            terminal: spec.q_terminal.clone(),
            c_plus: spec.c_plus.clone(),
            c_minus: spec.c_minus.clone(),
            allow_decrease: true,
            exogenous: None,
        })
    }

    pub fn players(&self) -> usize {
        self.players
    }

    /// Length of the augmented state vector.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> TimeGrid {
        self.parts.grid
    }

    pub fn parts(&self) -> &ProblemParts {
        &self.parts
    }

    pub fn exogenous(&self) -> Option<&ExogenousPaths> {
        self.parts.exogenous.as_ref()
    }

    pub fn allow_decrease(&self) -> bool {
        self.parts.allow_decrease
    }

    pub fn x0(&self) -> &[f64] {
        &self.parts.x0
    }

    #[inline]
    pub fn drift(&self, player: usize, node: usize) -> f64 {
        self.parts.a[player][node]
    }

    #[inline]
    pub fn volatility(&self, player: usize, node: usize) -> f64 {
        self.parts.sigma[player][node]
    }

    #[inline]
    pub fn growth(&self, player: usize, node: usize) -> f64 {
        self.growth[player][node]
    }

    #[inline]
    pub fn c_plus(&self, player: usize, node: usize) -> f64 {
        self.parts.c_plus[player][node]
    }

    #[inline]
    pub fn c_minus(&self, player: usize, node: usize) -> f64 {
        self.parts.c_minus[player][node]
    }

    pub fn running(&self, player: usize, node: usize) -> &DMatrix<f64> {
        &self.parts.running[player][node]
    }

    pub fn terminal(&self, player: usize) -> &DMatrix<f64> {
        &self.parts.terminal[player]
    }

    pub fn marginal_running(&self, player: usize, node: usize) -> &[f64] {
        &self.marginal_running[player][node]
    }

    pub fn marginal_terminal(&self, player: usize) -> &[f64] {
        &self.marginal_terminal[player]
    }

    pub fn own_curvature(&self, player: usize) -> &[f64] {
        &self.own_curvature[player]
    }

    /// True when neither the controlled states nor the exogenous process carry noise.
    pub fn is_noise_free(&self) -> bool {
        let states = self.parts.sigma.iter().flatten().all(|&s| s == 0.0);
        let exo = match &self.parts.exogenous {
            None => true,
            Some(e) => (0..e.nodes).all(|k| {
                let first = e.get(0, k);
                (1..e.paths).all(|p| e.get(p, k) == first)
            }),
        };
        states && exo
    }

    /// Number of Monte Carlo paths pinned by the exogenous process, if any.
    pub fn pinned_paths(&self) -> Option<usize> {
        self.parts.exogenous.as_ref().map(|e| e.paths)
    }

    /// Copy whose exogenous process is restricted to its first path.
    pub fn single_path(&self) -> Result<Self> {
        let mut parts = self.parts.clone();
        if let Some(exo) = &parts.exogenous {
            parts.exogenous = Some(ExogenousPaths::new(1, exo.nodes, exo.path(0).to_vec())?);
        }
        Self::new(parts)
    }

    /// Copy with volatility replaced, used to switch an instance to a noise-free oracle mode.
    pub fn with_volatility(&self, sigma: f64) -> Result<Self> {
        let mut parts = self.parts.clone();
        parts.sigma.iter_mut().flatten().for_each(|s| *s = sigma);
        Self::new(parts)
    }

    /// Fills `z` with the augmented state of `path` at `node` from the controlled values `x`.
    #[inline]
    pub fn augmented(&self, x: &[f64], path: usize, node: usize, z: &mut [f64]) {
        z[..self.players].copy_from_slice(x);
        if let Some(exo) = &self.parts.exogenous {
            z[self.players] = exo.get(path, node);
        }
    }
}

/// `z^T m z`.
#[inline]
pub fn quad_form(m: &DMatrix<f64>, z: &[f64]) -> f64 {
    let w = z.len();
    let mut s = 0.0;
    for r in 0..w {
        let mut row = 0.0;
        for c in 0..w {
            row += m[(r, c)] * z[c];
        }
        s += z[r] * row;
    }
    s
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
