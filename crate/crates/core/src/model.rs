//! Game data, the coercivity matrices built from it, and the standing-assumption checks.
//!
//! Coefficients are node samples on a uniform grid and are read as piecewise
//! constant on `[t_k, t_{k+1})`. Cost matrices follow the convention
//! `y Q z = sum_{k,j} q^{k,j} y^k z^j`, with `q^{k,j;i}` stored as
//! `q[i][node][(k, j)]`.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LqsgError, Result};

/// Absolute elementwise tolerance for symmetry of the cost matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Uniform grid `0 = t_0 < ... < t_M = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(LqsgError::InvalidParameter(format!("horizon must be positive and finite, got {horizon}")));
        }
        if steps == 0 {
            return Err(LqsgError::InvalidParameter("steps must be positive".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `M`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of nodes, `M + 1`.
    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, node: usize) -> f64 {
        if node == self.steps {
            self.horizon
        } else {
            node as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nodes()).map(|k| self.time(k)).collect()
    }
}

/// Full problem data for the N-player game.
#[derive(Debug, Clone)]
pub struct GameSpec {
    pub players: usize,
    pub grid: TimeGrid,
    /// `a[i][k]`
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
    pub x0: Vec<f64>,
    /// Running cost matrices `q[i][k]`, each `N x N`.
    pub q: Vec<Vec<DMatrix<f64>>>,
    /// Terminal cost matrices, defaulting to `q[i][M]`.
    pub q_terminal: Vec<DMatrix<f64>>,
    pub c_plus: Vec<Vec<f64>>,
    pub c_minus: Vec<Vec<f64>>,
}

impl GameSpec {
    /// Builds a spec with constant coefficients.
    #[allow(clippy::too_many_arguments)]
    pub fn constant(
        grid: TimeGrid,
        a: &[f64],
        b: &[f64],
        sigma: &[f64],
        x0: &[f64],
        q: &[DMatrix<f64>],
        c_plus: &[f64],
        c_minus: &[f64],
    ) -> Result<Self> {
        let n = x0.len();
        let nodes = grid.nodes();
        let rep = |v: &[f64]| -> Vec<Vec<f64>> { v.iter().map(|&x| vec![x; nodes]).collect() };
        let spec = Self {
            players: n,
            grid,
            a: rep(a),
            b: rep(b),
            sigma: rep(sigma),
            x0: x0.to_vec(),
            q: q.iter().map(|m| vec![m.clone(); nodes]).collect(),
            q_terminal: q.to_vec(),
            c_plus: rep(c_plus),
            c_minus: rep(c_minus),
        };
        spec.check_structure()?;
        Ok(spec)
    }

    /// Shape and finiteness checks. Failures here are structural errors,
    /// never assumption failures.
    pub fn check_structure(&self) -> Result<()> {
        let n = self.players;
        if n == 0 {
            return Err(LqsgError::Structural("at least one player is required".into()));
        }
        let nodes = self.grid.nodes();
        let series = [
            ("a", &self.a),
            ("b", &self.b),
            ("sigma", &self.sigma),
            ("c_plus", &self.c_plus),
            ("c_minus", &self.c_minus),
        ];
        for (name, s) in series {
            if s.len() != n {
                return Err(LqsgError::Structural(format!("`{name}` has {} entries, expected {n}", s.len())));
            }
            for (i, row) in s.iter().enumerate() {
                if row.len() != nodes {
                    return Err(LqsgError::Structural(format!(
                        "`{name}[{i}]` has {} samples, expected {nodes}",
                        row.len()
                    )));
                }
                if let Some(k) = row.iter().position(|v| !v.is_finite()) {
                    return Err(LqsgError::Structural(format!("`{name}[{i}]` is not finite at node {k}")));
                }
            }
        }
        if self.x0.len() != n || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(LqsgError::Structural("`x0` must hold N finite values".into()));
        }
        if self.q.len() != n || self.q_terminal.len() != n {
            return Err(LqsgError::Structural("`Q` must hold one matrix series per player".into()));
        }
        for i in 0..n {
            if self.q[i].len() != nodes {
                return Err(LqsgError::Structural(format!(
                    "`Q[{i}]` has {} node samples, expected {nodes}",
                    self.q[i].len()
                )));
            }
            for m in self.q[i].iter().chain(std::iter::once(&self.q_terminal[i])) {
                if m.nrows() != n || m.ncols() != n {
                    return Err(LqsgError::Structural(format!("`Q[{i}]` must be {n}x{n}")));
                }
                if m.iter().any(|v| !v.is_finite()) {
                    return Err(LqsgError::Structural(format!("`Q[{i}]` has non-finite entries")));
                }
            }
        }
        if self.sigma.iter().flatten().any(|&s| s < 0.0) {
            return Err(LqsgError::Structural("volatility samples must be nonnegative".into()));
        }
        Ok(())
    }

    /// True when every volatility sample is zero.
    pub fn is_noise_free(&self) -> bool {
        self.sigma.iter().flatten().all(|&s| s == 0.0)
    }

    /// Relabels players: new player `j` is old player `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.players;
        let pick = |s: &Vec<Vec<f64>>| perm.iter().map(|&p| s[p].clone()).collect::<Vec<_>>();
        let permute_matrix = |m: &DMatrix<f64>| DMatrix::from_fn(n, n, |r, c| m[(perm[r], perm[c])]);
        Self {
            players: n,
            grid: self.grid,
            a: pick(&self.a),
            b: pick(&self.b),
            sigma: pick(&self.sigma),
            x0: perm.iter().map(|&p| self.x0[p]).collect(),
            q: perm.iter().map(|&p| self.q[p].iter().map(permute_matrix).collect()).collect(),
            q_terminal: perm.iter().map(|&p| permute_matrix(&self.q_terminal[p])).collect(),
            c_plus: pick(&self.c_plus),
            c_minus: pick(&self.c_minus),
        }
    }

    /// Multiplies every cost matrix and action cost by `lambda`.
    pub fn scaled_costs(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.players {
            for m in out.q[i].iter_mut() {
                *m *= lambda;
            }
            out.q_terminal[i] *= lambda;
            out.c_plus[i].iter_mut().for_each(|c| *c *= lambda);
            out.c_minus[i].iter_mut().for_each(|c| *c *= lambda);
        }
        out
    }

    /// Copy with every volatility sample replaced by `sigma`.
    pub fn with_volatility(&self, sigma: f64) -> Self {
        let mut out = self.clone();
        out.sigma.iter_mut().flatten().for_each(|s| *s = sigma);
        out
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: SpecFile = serde_json::from_str(text)?;
        file.into_spec()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_spec_file(&self) -> SpecFile {
        let series = |s: &Vec<Vec<f64>>| s.iter().map(|r| Series::Nodes(r.clone())).collect();
        let mat = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
        };
        SpecFile {
            players: self.players,
            horizon: self.grid.horizon(),
            steps: self.grid.steps(),
            a: series(&self.a),
            b: series(&self.b),
            sigma: series(&self.sigma),
            x0: self.x0.clone(),
            c_plus: series(&self.c_plus),
            c_minus: series(&self.c_minus),
            q: self.q.iter().map(|s| MatrixSeries::Nodes(s.iter().map(mat).collect())).collect(),
            q_terminal: Some(self.q_terminal.iter().map(mat).collect()),
        }
    }
}

/// A per-player coefficient in a spec file: a constant or one sample per node.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Series {
    Constant(f64),
    Nodes(Vec<f64>),
}

impl Series {
    fn expand(&self, nodes: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            Series::Constant(v) => Ok(vec![*v; nodes]),
            Series::Nodes(v) if v.len() == nodes => Ok(v.clone()),
            Series::Nodes(v) => {
                Err(LqsgError::Structural(format!("`{what}` has {} samples, expected {nodes}", v.len())))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSeries {
    Constant(Vec<Vec<f64>>),
    Nodes(Vec<Vec<Vec<f64>>>),
}

/// On-disk JSON layout of a [`GameSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecFile {
    pub players: usize,
    pub horizon: f64,
    pub steps: usize,
    pub a: Vec<Series>,
    pub b: Vec<Series>,
    pub sigma: Vec<Series>,
    pub x0: Vec<f64>,
    pub c_plus: Vec<Series>,
    pub c_minus: Vec<Series>,
    #[serde(rename = "Q")]
    pub q: Vec<MatrixSeries>,
    #[serde(rename = "Q_T", default, skip_serializing_if = "Option::is_none")]
    pub q_terminal: Option<Vec<Vec<Vec<f64>>>>,
}

fn to_matrix(rows: &[Vec<f64>], n: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(LqsgError::Structural(format!("`{what}` must be {n}x{n}")));
    }
    Ok(DMatrix::from_fn(n, n, |r, c| rows[r][c]))
}

impl SpecFile {
    pub fn into_spec(self) -> Result<GameSpec> {
        let grid = TimeGrid::new(self.horizon, self.steps).map_err(|e| LqsgError::Structural(e.to_string()))?;
        let n = self.players;
        let nodes = grid.nodes();
        let expand = |s: &[Series], what: &str| -> Result<Vec<Vec<f64>>> {
            if s.len() != n {
                return Err(LqsgError::Structural(format!("`{what}` has {} entries, expected {n}", s.len())));
            }
            s.iter().enumerate().map(|(i, x)| x.expand(nodes, &format!("{what}[{i}]"))).collect()
        };
        if self.q.len() != n {
            return Err(LqsgError::Structural(format!("`Q` must hold {n} matrices")));
        }
        let mut q = Vec::with_capacity(n);
        for (i, series) in self.q.iter().enumerate() {
            let what = format!("Q[{i}]");
            let per_node = match series {
                MatrixSeries::Constant(m) => vec![to_matrix(m, n, &what)?; nodes],
                MatrixSeries::Nodes(ms) => {
                    if ms.len() != nodes {
                        return Err(LqsgError::Structural(format!(
                            "`{what}` has {} node samples, expected {nodes}",
                            ms.len()
                        )));
                    }
                    ms.iter().map(|m| to_matrix(m, n, &what)).collect::<Result<_>>()?
                }
            };
            q.push(per_node);
        }
        let q_terminal = match &self.q_terminal {
            Some(ms) => {
                if ms.len() != n {
                    return Err(LqsgError::Structural(format!("`Q_T` must hold {n} matrices")));
                }
                ms.iter().enumerate().map(|(i, m)| to_matrix(m, n, &format!("Q_T[{i}]"))).collect::<Result<_>>()?
            }
            None => q.iter().map(|s: &Vec<DMatrix<f64>>| s[nodes - 1].clone()).collect(),
        };
        let spec = GameSpec {
            players: n,
            grid,
            a: expand(&self.a, "a")?,
            b: expand(&self.b, "b")?,
            sigma: expand(&self.sigma, "sigma")?,
            x0: self.x0,
            q,
            q_terminal,
            c_plus: expand(&self.c_plus, "c_plus")?,
            c_minus: expand(&self.c_minus, "c_minus")?,
        };
        spec.check_structure()?;
        Ok(spec)
    }
}

/// Outcome of one standing-assumption check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub conditions: Vec<ConditionResult>,
    pub kappa: f64,
    pub passed: bool,
}

impl ValidationReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.name == name)
    }

    pub fn failed(&self) -> impl Iterator<Item = &ConditionResult> {
        self.conditions.iter().filter(|c| !c.passed)
    }
}

pub const COND_BOUNDED: &str = "bounded_coefficients";
pub const COND_POSITIVE_COSTS: &str = "positive_action_costs";
pub const COND_SYMMETRIC: &str = "symmetric_cost_matrices";
pub const COND_COERCIVE: &str = "coercive_bar_q";

/// Coercivity matrices at every node plus the terminal time.
#[derive(Debug, Clone)]
pub struct DerivedMatrices {
    pub bar_q: Vec<DMatrix<f64>>,
    pub hat_q: Vec<DMatrix<f64>>,
    pub tilde_q: Vec<DMatrix<f64>>,
    pub bar_q_terminal: DMatrix<f64>,
    pub hat_q_terminal: DMatrix<f64>,
    pub tilde_q_terminal: DMatrix<f64>,
    /// Smallest eigenvalue of the symmetrized `bar_q`, minimized over nodes
    /// and the terminal matrix.
    pub kappa: f64,
}

fn coercivity_matrices(
    row_source: impl Fn(usize) -> DMatrix<f64>,
    n: usize,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut hat = DMatrix::zeros(n, n);
    for k in 0..n {
        let qk = row_source(k);
        for j in 0..n {
            hat[(k, j)] = 2.0 * qk[(k, j)];
        }
    }
    let mut bar = hat.clone();
    let mut tilde = hat.clone();
    for k in 0..n {
        bar[(k, k)] = hat[(k, k)] / 2.0;
        tilde[(k, k)] = 0.0;
    }
    (bar, hat, tilde)
}

/// Smallest eigenvalue of `(m + m^T) / 2`.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

pub fn derive_matrices(spec: &GameSpec) -> DerivedMatrices {
    let n = spec.players;
    let mut bar_q = Vec::with_capacity(spec.grid.nodes());
    let mut hat_q = Vec::with_capacity(spec.grid.nodes());
    let mut tilde_q = Vec::with_capacity(spec.grid.nodes());
    for k in 0..spec.grid.nodes() {
        let (bar, hat, tilde) = coercivity_matrices(|p| spec.q[p][k].clone(), n);
        bar_q.push(bar);
        hat_q.push(hat);
        tilde_q.push(tilde);
    }
    let (bar_t, hat_t, tilde_t) = coercivity_matrices(|p| spec.q_terminal[p].clone(), n);
    let kappa = bar_q.iter().chain(std::iter::once(&bar_t)).map(min_sym_eigenvalue).fold(f64::INFINITY, f64::min);
    DerivedMatrices {
        bar_q,
        hat_q,
        tilde_q,
        bar_q_terminal: bar_t,
        hat_q_terminal: hat_t,
        tilde_q_terminal: tilde_t,
        kappa,
    }
}

pub fn validate_spec(spec: &GameSpec) -> Result<ValidationReport> {
    spec.check_structure()?;
    let n = spec.players;
    let mut conditions = vec![ConditionResult {
        name: COND_BOUNDED.into(),
        passed: true,
        detail: "all coefficient samples are finite".into(),
    }];

    let mut cost_failures = Vec::new();
    for i in 0..n {
        for (label, series) in [("c_plus", &spec.c_plus[i]), ("c_minus", &spec.c_minus[i])] {
            if let Some(k) = series.iter().position(|&c| c <= 0.0) {
                cost_failures.push(format!("{label}[{i}] = {} at node {k}", series[k]));
            }
        }
    }
    conditions.push(ConditionResult {
        name: COND_POSITIVE_COSTS.into(),
        passed: cost_failures.is_empty(),
        detail: if cost_failures.is_empty() {
            "action costs strictly positive at every node".into()
        } else {
            cost_failures.join("; ")
        },
    });

    let mut asym = Vec::new();
    for i in 0..n {
        let mats = spec.q[i].iter().enumerate().map(|(k, m)| (format!("node {k}"), m));
        let term = std::iter::once(("terminal".to_string(), &spec.q_terminal[i]));
        for (where_, m) in mats.chain(term) {
            let worst = (0..n)
                .flat_map(|r| (0..n).map(move |c| (r, c)))
                .map(|(r, c)| (m[(r, c)] - m[(c, r)]).abs())
                .fold(0.0, f64::max);
            if worst > SYMMETRY_TOL {
                asym.push(format!("Q[{i}] at {where_}: asymmetry {worst:.3e}"));
                break;
            }
        }
    }
    conditions.push(ConditionResult {
        name: COND_SYMMETRIC.into(),
        passed: asym.is_empty(),
        detail: if asym.is_empty() { format!("every Q[i] symmetric within {SYMMETRY_TOL:e}") } else { asym.join("; ") },
    });

    let derived = derive_matrices(spec);
    let kappa = derived.kappa;
    conditions.push(ConditionResult {
        name: COND_COERCIVE.into(),
        passed: kappa > 0.0,
        detail: format!("kappa = {kappa:.6e}"),
    });

    let passed = conditions.iter().all(|c| c.passed);
    Ok(ValidationReport { conditions, kappa, passed })
}
