//! Harmonic extension: minimize the Dirichlet energy subject to `u = l` on
//! labeled nodes, i.e. solve `L_II u_I = W_IB l_B` on the unlabeled block.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{invalid, GlError, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    None,
    Jacobi,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    /// Relative residual threshold.
    pub tol: f64,
    /// `None` means `10 * N`.
    pub max_iter: Option<usize>,
    pub preconditioner: Preconditioner,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: None, preconditioner: Preconditioner::Jacobi }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Cg,
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicSolution {
    pub u: Vec<f64>,
    pub iterations: usize,
    pub residual_norm: f64,
    /// `||W_IB l_B||_2`, the scale the residual is measured against.
    pub rhs_norm: f64,
    pub solver: SolverKind,
}

impl HarmonicSolution {
    /// CSV with columns `node_index,u,labeled`.
    pub fn to_csv_string(&self, ds: &Dataset) -> String {
        let mut s = String::from("node_index,u,labeled\n");
        for (i, u) in self.u.iter().enumerate() {
            let _ = writeln!(s, "{i},{u},{}", u8::from(ds.is_labeled(i)));
        }
        s
    }

    pub fn write_csv(&self, ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv_string(ds))?;
        Ok(())
    }
}

/// Unlabeled block `L_II` in CSR form plus right-hand side `W_IB l_B`.
struct Reduced {
    interior: Vec<usize>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    diag: Vec<f64>,
    rhs: Vec<f64>,
}

impl Reduced {
    fn build(g: &Graph, ds: &Dataset) -> Self {
        let mask = ds.labeled_mask();
        let labels = ds.labels();
        let interior: Vec<usize> = (0..g.n()).filter(|&i| !mask[i]).collect();
        let mut pos = vec![usize::MAX; g.n()];
        for (p, &i) in interior.iter().enumerate() {
            pos[i] = p;
        }
        let mut row_ptr = Vec::with_capacity(interior.len() + 1);
        row_ptr.push(0);
        let (mut cols, mut vals) = (Vec::new(), Vec::new());
        let mut diag = Vec::with_capacity(interior.len());
        let mut rhs = Vec::with_capacity(interior.len());
        for &i in &interior {
            let mut b = 0.0;
            for (j, w) in g.row(i) {
                if mask[j] {
                    b += w * labels[j];
                } else {
                    cols.push(pos[j]);
                    vals.push(-w);
                }
            }
            diag.push(g.degrees()[i]);
            rhs.push(b);
            row_ptr.push(cols.len());
        }
        Self { interior, row_ptr, cols, vals, diag, rhs }
    }

    fn len(&self) -> usize {
        self.interior.len()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = self.diag[r] * x[r];
            for p in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[p] * x[self.cols[p]];
            }
            *o = acc;
        }
    }

    fn residual_norm(&self, x: &[f64]) -> f64 {
        let mut ax = vec![0.0; self.len()];
        self.apply(x, &mut ax);
        norm(&ax.iter().zip(&self.rhs).map(|(a, b)| b - a).collect::<Vec<_>>())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_inputs(g: &Graph, ds: &Dataset) -> Result<()> {
    if g.n() != ds.len() {
        return Err(invalid(format!("graph has {} nodes, dataset {}", g.n(), ds.len())));
    }
    if ds.labeled_count() == 0 {
        return Err(invalid("no labeled nodes"));
    }
    Ok(())
}

/// First unlabeled node whose connected component contains no labeled node.
pub fn find_unreachable(g: &Graph, ds: &Dataset) -> Option<usize> {
    let mask = ds.labeled_mask();
    let mut reached: Vec<bool> = mask.to_vec();
    let mut stack: Vec<usize> = (0..g.n()).filter(|&i| mask[i]).collect();
    while let Some(i) = stack.pop() {
        for (j, _) in g.row(i) {
            if !reached[j] {
                reached[j] = true;
                stack.push(j);
            }
        }
    }
    reached.iter().position(|&r| !r)
}

fn assemble(ds: &Dataset, red: &Reduced, x: &[f64]) -> Vec<f64> {
    let mut u = ds.labels().to_vec();
    for (p, &i) in red.interior.iter().enumerate() {
        u[i] = x[p];
    }
    u
}

/// Preconditioned conjugate gradient solve of the harmonic extension.
pub fn harmonic_extend(g: &Graph, ds: &Dataset, cfg: &SolverConfig) -> Result<HarmonicSolution> {
    check_inputs(g, ds)?;
    if !(cfg.tol > 0.0) {
        return Err(invalid(format!("tolerance must be positive, got {}", cfg.tol)));
    }
    let max_iter = cfg.max_iter.unwrap_or(10 * g.n()).max(1);
    if let Some(node) = find_unreachable(g, ds) {
        return Err(GlError::UnsolvableComponent { node });
    }
    let red = Reduced::build(g, ds);
    let n = red.len();
    let rhs_norm = norm(&red.rhs);
    if n == 0 {
        return Ok(HarmonicSolution {
            u: ds.labels().to_vec(),
            iterations: 0,
            residual_norm: 0.0,
            rhs_norm,
            solver: SolverKind::Cg,
        });
    }
    let inv_diag: Vec<f64> = match cfg.preconditioner {
        Preconditioner::Jacobi => red.diag.iter().map(|&d| 1.0 / d).collect(),
        Preconditioner::None => vec![1.0; n],
    };
    let target = cfg.tol * rhs_norm;
    let mut x = vec![0.0; n];
    let mut r = red.rhs.clone();
    let mut rnorm = rhs_norm;
    let mut iterations = 0;
    if rnorm > target {
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![0.0; n];
        while iterations < max_iter {
            iterations += 1;
            red.apply(&p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            rnorm = norm(&r);
            if rnorm <= target {
                // Guard against drift between the recurrence and the true residual.
                rnorm = red.residual_norm(&x);
                if rnorm <= target {
                    break;
                }
                r = red.rhs.clone();
                red.apply(&x, &mut ap);
                for i in 0..n {
                    r[i] -= ap[i];
                }
            }
            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        if rnorm > target {
            return Err(GlError::Convergence { iterations, residual: rnorm });
        }
    }
    Ok(HarmonicSolution {
        u: assemble(ds, &red, &x),
        iterations,
        residual_norm: rnorm,
        rhs_norm,
        solver: SolverKind::Cg,
    })
}

pub const DENSE_ORACLE_MAX_N: usize = 2000;

/// Same block system solved by dense LU; a test oracle for [`harmonic_extend`].
pub fn dense_oracle_solve(g: &Graph, ds: &Dataset) -> Result<HarmonicSolution> {
    check_inputs(g, ds)?;
    if g.n() > DENSE_ORACLE_MAX_N {
        return Err(invalid(format!(
            "dense oracle limited to N <= {DENSE_ORACLE_MAX_N}, got {}",
            g.n()
        )));
    }
    let red = Reduced::build(g, ds);
    let n = red.len();
    let rhs_norm = norm(&red.rhs);
    if n == 0 {
        return Ok(HarmonicSolution {
            u: ds.labels().to_vec(),
            iterations: 0,
            residual_norm: 0.0,
            rhs_norm,
            solver: SolverKind::Dense,
        });
    }
    let mut a = DMatrix::<f64>::zeros(n, n);
    for r in 0..n {
        a[(r, r)] = red.diag[r];
        for p in red.row_ptr[r]..red.row_ptr[r + 1] {
            a[(r, red.cols[p])] += red.vals[p];
        }
    }
    let b = DVector::from_vec(red.rhs.clone());
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| GlError::Singular("unlabeled block is singular (disconnected component)".into()))?;
    let x: Vec<f64> = x.iter().copied().collect();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(GlError::Singular("dense solve produced non-finite values".into()));
    }
    let residual_norm = red.residual_norm(&x);
    Ok(HarmonicSolution {
        u: assemble(ds, &red, &x),
        iterations: 0,
        residual_norm,
        rhs_norm,
        solver: SolverKind::Dense,
    })
}

/// Worst overshoot above the largest label and undershoot below the smallest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxPrincipleReport {
    pub above_max: f64,
    pub below_min: f64,
}

impl MaxPrincipleReport {
    pub fn worst(&self) -> f64 {
        self.above_max.max(self.below_min)
    }

    pub fn holds(&self, tol: f64) -> bool {
        self.worst() <= tol
    }
}

pub fn check_maximum_principle(sol: &HarmonicSolution, ds: &Dataset) -> MaxPrincipleReport {
    let mask = ds.labeled_mask();
    let labeled = ds.labels().iter().zip(mask).filter(|(_, &m)| m).map(|(l, _)| *l);
    let (lo, hi) = labeled.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), l| (a.min(l), b.max(l)));
    let mut rep = MaxPrincipleReport { above_max: 0.0, below_min: 0.0 };
    for (i, &u) in sol.u.iter().enumerate() {
        if !mask[i] {
            rep.above_max = rep.above_max.max(u - hi);
            rep.below_min = rep.below_min.max(lo - u);
        }
    }
    rep
}
