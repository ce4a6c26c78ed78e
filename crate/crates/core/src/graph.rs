//! Weighted similarity graphs over a dataset.
//!
//! Two families are supported: geometric graphs with a compactly supported
//! radial kernel, `W(x, y) = eps^-d * eta(|x - y| / eps)`, and symmetrized kNN
//! graphs (uniform `N/k` weights or self-tuning Gaussian weights). Weights are
//! stored once in compressed-sparse-row form; symmetry and a zero diagonal hold
//! by construction.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{invalid, GlError, Result};
use crate::quad::adaptive_simpson;
use crate::spatial::NeighborIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `eta(t) = 1` for `t <= 1`, else 0.
    Indicator,
    /// `eta(t) = max(0, min(2 - t, 1))`.
    LipschitzBump,
    /// Not compactly supported; only usable through [`build_knn_graph`].
    SelfTuningGaussian,
}

impl KernelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            KernelKind::Indicator => "indicator",
            KernelKind::LipschitzBump => "lipschitz_bump",
            KernelKind::SelfTuningGaussian => "self_tuning_gaussian",
        }
    }

    /// Profile `eta(t)` for the compactly supported kernels.
    pub fn eta(&self, t: f64) -> f64 {
        match self {
            KernelKind::Indicator => {
                if t <= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            KernelKind::LipschitzBump => (2.0 - t).clamp(0.0, 1.0),
            KernelKind::SelfTuningGaussian => (-t * t).exp(),
        }
    }

    /// Radius (in units of eps) beyond which `eta` vanishes.
    pub fn support(&self) -> Option<f64> {
        match self {
            KernelKind::Indicator => Some(1.0),
            KernelKind::LipschitzBump => Some(2.0),
            KernelKind::SelfTuningGaussian => None,
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub epsilon: f64,
    pub dim: usize,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, epsilon: f64, dim: usize) -> Self {
        Self { kind, epsilon, dim }
    }

    /// Scaled weight `eps^-d * eta(dist / eps)`.
    pub fn weight(&self, dist: f64) -> f64 {
        self.eta_scale() * self.kind.eta(dist / self.epsilon)
    }

    fn eta_scale(&self) -> f64 {
        self.epsilon.powi(-(self.dim as i32))
    }
}

/// Edge weights for kNN graphs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KnnWeights {
    /// Every edge weighs `N / k`.
    UniformNk,
    /// `exp(-|xi - xj|^2 / (sigma_i sigma_j))`, with `sigma_i` the distance from
    /// `xi` to its `sigma_rank`-th neighbour (`None` means the k-th).
    SelfTuningGaussian { sigma_rank: Option<usize> },
}

impl KnnWeights {
    pub fn self_tuning() -> Self {
        KnnWeights::SelfTuningGaussian { sigma_rank: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GraphKind {
    Epsilon(KernelSpec),
    Knn { k: usize, weights: KnnWeights },
}

impl GraphKind {
    fn header(&self) -> (String, String) {
        match self {
            GraphKind::Epsilon(spec) => (spec.kind.as_str().to_string(), spec.epsilon.to_string()),
            GraphKind::Knn { k, weights: KnnWeights::UniformNk } => ("knn_uniform".into(), k.to_string()),
            GraphKind::Knn { k, weights: KnnWeights::SelfTuningGaussian { .. } } => {
                ("knn_self_tuning".into(), k.to_string())
            }
        }
    }
}

/// Symmetric sparse weight matrix with cached degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    degrees: Vec<f64>,
    pub kind: GraphKind,
}

impl Graph {
    /// Builds from undirected edges `(i, j, w)` with `i != j`, `w > 0`.
    /// Duplicate pairs must carry identical weights; the first is kept.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)], kind: GraphKind) -> Result<Self> {
        let mut directed: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * edges.len());
        for &(i, j, w) in edges {
            if i >= n || j >= n {
                return Err(invalid(format!("edge ({i}, {j}) out of range for {n} nodes")));
            }
            if i == j {
                return Err(invalid(format!("self loop at node {i}")));
            }
            if !(w.is_finite() && w >= 0.0) {
                return Err(invalid(format!("edge ({i}, {j}) has invalid weight {w}")));
            }
            if w == 0.0 {
                continue;
            }
            directed.push((i, j, w));
            directed.push((j, i, w));
        }
        directed.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        directed.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1);
        let mut row_ptr = vec![0usize; n + 1];
        for &(i, _, _) in &directed {
            row_ptr[i + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let cols: Vec<usize> = directed.iter().map(|e| e.1).collect();
        let vals: Vec<f64> = directed.iter().map(|e| e.2).collect();
        let degrees = (0..n).map(|i| vals[row_ptr[i]..row_ptr[i + 1]].iter().sum()).collect();
        Ok(Self { n, row_ptr, cols, vals, degrees, kind })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.cols.len() / 2
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[s..e].iter().copied().zip(self.vals[s..e].iter().copied())
    }

    pub fn row_len(&self, i: usize) -> usize {
        self.row_ptr[i + 1] - self.row_ptr[i]
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.cols[s..e].binary_search(&j) {
            Ok(p) => self.vals[s + p],
            Err(_) => 0.0,
        }
    }

    /// Undirected edges with `i < j`, in row order.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n)
            .flat_map(|i| self.row(i).filter(move |&(j, _)| j > i).map(move |(j, w)| (i, j, w)))
            .collect()
    }

    /// `max |W - W^T|` over stored entries.
    pub fn max_asymmetry(&self) -> f64 {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, w)| (self.weight(j, i) - w).abs()))
            .fold(0.0, f64::max)
    }

    /// Degrees recomputed from the sparse structure.
    pub fn recomputed_degrees(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, w)| w).sum()).collect()
    }

    /// `(L u)(x) = sum_y W(x, y) (u(x) - u(y))`.
    pub fn laplacian_apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.n {
            return Err(invalid(format!("function has {} values for {} nodes", u.len(), self.n)));
        }
        Ok((0..self.n)
            .map(|i| self.row(i).map(|(j, w)| w * (u[i] - u[j])).sum())
            .collect())
    }

    /// Dirichlet energy `sum_{x,y} W(x, y) (u(x) - u(y))^2` over ordered pairs.
    pub fn dirichlet_energy(&self, u: &[f64]) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).map(|(j, w)| w * (u[i] - u[j]).powi(2)).sum::<f64>())
            .sum()
    }

    /// Connected component id of every node (ids ordered by smallest member).
    pub fn components(&self) -> Vec<usize> {
        let mut comp = vec![usize::MAX; self.n];
        let mut next = 0;
        let mut stack = Vec::new();
        for s in 0..self.n {
            if comp[s] != usize::MAX {
                continue;
            }
            comp[s] = next;
            stack.push(s);
            while let Some(i) = stack.pop() {
                for (j, _) in self.row(i) {
                    if comp[j] == usize::MAX {
                        comp[j] = next;
                        stack.push(j);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    pub fn is_connected(&self) -> bool {
        self.components().iter().all(|&c| c == 0)
    }

    /// Edge list text: header `n kernel_kind param`, then `i j weight` with `i < j`.
    pub fn to_edge_list(&self) -> String {
        let (kind, param) = self.kind.header();
        let mut s = format!("{} {kind} {param}\n", self.n);
        for (i, j, w) in self.edges() {
            s.push_str(&format!("{i} {j} {w}\n"));
        }
        s
    }

    pub fn write_edge_list(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_edge_list())?;
        Ok(())
    }

    /// Parses [`Graph::to_edge_list`] output. Kernel dimension is not part of
    /// the format and is restored as 0 for geometric graphs.
    pub fn from_edge_list(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| GlError::Load("empty edge list".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(GlError::Load(format!("bad edge list header {header:?}")));
        }
        let bad = |what: &str| GlError::Load(format!("bad {what} in edge list header"));
        let n: usize = parts[0].parse().map_err(|_| bad("node count"))?;
        let kind = match parts[1] {
            "indicator" | "lipschitz_bump" => {
                let eps: f64 = parts[2].parse().map_err(|_| bad("epsilon"))?;
                let kk = if parts[1] == "indicator" {
                    KernelKind::Indicator
                } else {
                    KernelKind::LipschitzBump
                };
                GraphKind::Epsilon(KernelSpec::new(kk, eps, 0))
            }
            "knn_uniform" | "knn_self_tuning" => {
                let k: usize = parts[2].parse().map_err(|_| bad("k"))?;
                let weights = if parts[1] == "knn_uniform" {
                    KnnWeights::UniformNk
                } else {
                    KnnWeights::self_tuning()
                };
                GraphKind::Knn { k, weights }
            }
            other => return Err(GlError::Load(format!("unknown kernel kind {other:?}"))),
        };
        let mut edges = Vec::new();
        for (ln, line) in lines.enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            let parse_err = || GlError::Load(format!("edge list line {}: {line:?}", ln + 2));
            if f.len() != 3 {
                return Err(parse_err());
            }
            let i: usize = f[0].parse().map_err(|_| parse_err())?;
            let j: usize = f[1].parse().map_err(|_| parse_err())?;
            let w: f64 = f[2].parse().map_err(|_| parse_err())?;
            if i >= j {
                return Err(parse_err());
            }
            edges.push((i, j, w));
        }
        Self::from_edges(n, &edges, kind)
    }

    pub fn read_edge_list(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| GlError::Load(format!("{}: {e}", path.display())))?;
        Self::from_edge_list(&text)
    }
}

/// Geometric graph with `W(i, j) = eps^-d eta(|xi - xj| / eps)`.
pub fn build_epsilon_graph(ds: &Dataset, kernel: KernelSpec) -> Result<Graph> {
    if !(kernel.epsilon > 0.0 && kernel.epsilon.is_finite()) {
        return Err(invalid(format!("epsilon must be positive, got {}", kernel.epsilon)));
    }
    if kernel.dim != ds.dim() {
        return Err(invalid(format!(
            "kernel dimension {} does not match data dimension {}",
            kernel.dim,
            ds.dim()
        )));
    }
    let support = kernel.kind.support().ok_or_else(|| {
        GlError::Unsupported(format!("{} kernel needs a kNN graph", kernel.kind))
    })?;
    let radius = support * kernel.epsilon;
    let index = NeighborIndex::new(ds.points(), ds.dim());
    let edges: Vec<(usize, usize, f64)> = (0..ds.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            index
                .within(ds.point(i), radius, Some(i))
                .into_iter()
                .filter(move |h| h.index > i)
                .map(move |h| (i, h.index, kernel.weight(h.sq_dist.sqrt())))
        })
        .collect();
    Graph::from_edges(ds.len(), &edges, GraphKind::Epsilon(kernel))
}

/// Symmetrized kNN graph: `i ~ j` when either is among the other's `k` nearest.
pub fn build_knn_graph(ds: &Dataset, k: usize, weights: KnnWeights) -> Result<Graph> {
    let n = ds.len();
    if k == 0 || k >= n {
        return Err(invalid(format!("k must satisfy 1 <= k < N = {n}, got {k}")));
    }
    let sigma_rank = match weights {
        KnnWeights::SelfTuningGaussian { sigma_rank: Some(r) } => {
            if r == 0 || r >= n {
                return Err(invalid(format!("sigma rank must be in 1..{n}, got {r}")));
            }
            r
        }
        _ => k,
    };
    let search = k.max(sigma_rank);
    let index = NeighborIndex::new(ds.points(), ds.dim());
    let hits: Vec<Vec<crate::spatial::Hit>> = (0..n)
        .into_par_iter()
        .map(|i| index.knn(ds.point(i), search, Some(i)))
        .collect();
    let sigma: Vec<f64> = hits.iter().map(|h| h[sigma_rank - 1].sq_dist.sqrt()).collect();
    let uniform = n as f64 / k as f64;
    let mut edges = Vec::with_capacity(n * k);
    for (i, h) in hits.iter().enumerate() {
        for hit in &h[..k] {
            let j = hit.index;
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            let w = match weights {
                KnnWeights::UniformNk => uniform,
                KnnWeights::SelfTuningGaussian { .. } => {
                    let d2 = crate::spatial::sq_dist(ds.point(a), ds.point(b));
                    let s = sigma[a] * sigma[b];
                    if d2 == 0.0 {
                        1.0
                    } else if s == 0.0 {
                        0.0
                    } else {
                        (-d2 / s).exp()
                    }
                }
            };
            edges.push((a, b, w));
        }
    }
    edges.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    edges.dedup_by(|x, y| x.0 == y.0 && x.1 == y.1);
    Graph::from_edges(n, &edges, GraphKind::Knn { k, weights })
}

/// `(d, p)`: full degree and degree counted over labeled neighbours only.
pub fn degree_stats(g: &Graph, ds: &Dataset) -> Result<(Vec<f64>, Vec<f64>)> {
    if g.n() != ds.len() {
        return Err(invalid("graph and dataset sizes differ"));
    }
    let mask = ds.labeled_mask();
    let p = (0..g.n())
        .map(|i| g.row(i).filter(|&(j, _)| mask[j]).map(|(_, w)| w).sum())
        .collect();
    Ok((g.degrees().to_vec(), p))
}

/// Kernel moments `sigma_eta = int eta(|z|) z_1^2 dz` and `C_eta = int eta(|z|) dz`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConstants {
    pub sigma_eta: f64,
    pub c_eta: f64,
    pub dim: usize,
}

/// `ln Gamma(d / 2)` for a positive integer `d`.
fn ln_gamma_half(d: usize) -> f64 {
    let (mut x, mut acc) = if d % 2 == 0 { (1.0, 0.0) } else { (0.5, 0.5 * PI.ln()) };
    let target = d as f64 / 2.0;
    while x < target {
        acc += x.ln();
        x += 1.0;
    }
    acc
}

/// Volume of the unit ball in R^d.
pub fn unit_ball_volume(d: usize) -> f64 {
    (0.5 * d as f64 * PI.ln() - ln_gamma_half(d + 2)).exp()
}

/// Surface area of the unit sphere in R^d.
fn unit_sphere_area(d: usize) -> f64 {
    (2f64.ln() + 0.5 * d as f64 * PI.ln() - ln_gamma_half(d)).exp()
}

pub fn kernel_constants(kernel: &KernelSpec) -> Result<KernelConstants> {
    let d = kernel.dim;
    if d == 0 {
        return Err(invalid("kernel dimension must be positive"));
    }
    match kernel.kind {
        KernelKind::SelfTuningGaussian => Err(GlError::Unsupported(
            "self-tuning Gaussian weights are not a compactly supported radial kernel".into(),
        )),
        KernelKind::Indicator => {
            let v = unit_ball_volume(d);
            Ok(KernelConstants { sigma_eta: v / (d as f64 + 2.0), c_eta: v, dim: d })
        }
        kind => {
            // Radial reduction: int eta(|z|) z_1^2 dz = (S/d) int eta(t) t^(d+1) dt.
            let area = unit_sphere_area(d);
            let moment = |p: i32| {
                let f = move |t: f64| kind.eta(t) * t.powi(p);
                adaptive_simpson(&f, 0.0, 1.0, 1e-13) + adaptive_simpson(&f, 1.0, 2.0, 1e-13)
            };
            let c_eta = area * moment(d as i32 - 1);
            let sigma_eta = area / d as f64 * moment(d as i32 + 1);
            Ok(KernelConstants { sigma_eta, c_eta, dim: d })
        }
    }
}

/// A twice-differentiable scalar field with analytic derivatives.
pub trait SmoothField {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn laplacian(&self, x: &[f64]) -> f64;
}

/// [`SmoothField`] from three closures.
pub struct AnalyticField<V, G, L> {
    pub value: V,
    pub gradient: G,
    pub laplacian: L,
}

impl<V, G, L> SmoothField for AnalyticField<V, G, L>
where
    V: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
    L: Fn(&[f64]) -> f64,
{
    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (self.gradient)(x)
    }
    fn laplacian(&self, x: &[f64]) -> f64 {
        (self.laplacian)(x)
    }
}

/// Constant density field.
pub struct ConstantField(pub f64);

impl SmoothField for ConstantField {
    fn value(&self, _: &[f64]) -> f64 {
        self.0
    }
    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        vec![0.0; x.len()]
    }
    fn laplacian(&self, _: &[f64]) -> f64 {
        0.0
    }
}

/// Continuum limit operator `(sigma_eta / rho) div(rho^2 grad phi)` at `x`.
pub fn continuum_operator(
    constants: &KernelConstants,
    phi: &dyn SmoothField,
    rho: &dyn SmoothField,
    x: &[f64],
) -> Result<f64> {
    let r = rho.value(x);
    if !(r > 0.0) {
        return Err(invalid(format!("density must be positive at x, got {r}")));
    }
    let grad_phi = phi.gradient(x);
    let grad_rho = rho.gradient(x);
    let cross: f64 = grad_phi.iter().zip(&grad_rho).map(|(a, b)| a * b).sum();
    // div(rho^2 grad phi) = 2 rho grad rho . grad phi + rho^2 lap phi
    let div = 2.0 * r * cross + r * r * phi.laplacian(x);
    Ok(constants.sigma_eta / r * div)
}

/// Distance from `x` to the boundary of the unit cube `[0,1]^d`.
pub fn unit_cube_boundary_distance(x: &[f64]) -> f64 {
    x.iter().map(|&v| v.min(1.0 - v)).fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_uniform_cube;

    fn line(points: &[f64]) -> Dataset {
        Dataset::new("line", 1, points.to_vec(), vec![0.0; points.len()], vec![true; points.len()])
            .unwrap()
    }

    #[test]
    fn epsilon_graph_on_a_line() {
        let ds = line(&[0.0, 1.0, 2.0]);
        let g = build_epsilon_graph(&ds, KernelSpec::new(KernelKind::Indicator, 1.5, 1)).unwrap();
        assert_eq!(g.edges(), vec![(0, 1, 1.0 / 1.5), (1, 2, 1.0 / 1.5)]);
        assert_eq!(g.weight(0, 2), 0.0);
    }

    #[test]
    fn single_point_graph() {
        let ds = line(&[0.3]);
        let g = build_epsilon_graph(&ds, KernelSpec::new(KernelKind::Indicator, 1.0, 1)).unwrap();
        assert_eq!(g.edge_count(), 0);
        assert_eq!(g.degrees(), &[0.0]);
    }

    #[test]
    fn epsilon_graph_rejects_bad_args() {
        let ds = line(&[0.0, 1.0]);
        assert!(build_epsilon_graph(&ds, KernelSpec::new(KernelKind::Indicator, 0.0, 1)).is_err());
        assert!(build_epsilon_graph(&ds, KernelSpec::new(KernelKind::Indicator, -1.0, 1)).is_err());
        assert!(matches!(
            build_epsilon_graph(&ds, KernelSpec::new(KernelKind::SelfTuningGaussian, 1.0, 1)),
            Err(GlError::Unsupported(_))
        ));
    }

    #[test]
    fn lipschitz_bump_profile() {
        let k = KernelKind::LipschitzBump;
        assert_eq!(k.eta(0.0), 1.0);
        assert_eq!(k.eta(1.0), 1.0);
        assert_eq!(k.eta(1.5), 0.5);
        assert_eq!(k.eta(2.0), 0.0);
        assert_eq!(k.eta(3.0), 0.0);
    }

    #[test]
    fn knn_collinear_symmetrized() {
        let ds = line(&[0.0, 1.0, 2.5]);
        let g = build_knn_graph(&ds, 1, KnnWeights::UniformNk).unwrap();
        let pairs: Vec<(usize, usize)> = g.edges().iter().map(|e| (e.0, e.1)).collect();
        assert_eq!(pairs, vec![(0, 1), (1, 2)]);
        assert!(g.edges().iter().all(|e| e.2 == 3.0));
        assert!(build_knn_graph(&ds, 3, KnnWeights::UniformNk).is_err());
        assert!(build_knn_graph(&ds, 0, KnnWeights::UniformNk).is_err());
    }

    #[test]
    fn knn_matches_brute_force_adjacency() {
        let ds = gen_uniform_cube(50, 2, 12, |_| 0.0).unwrap();
        let g = build_knn_graph(&ds, 5, KnnWeights::UniformNk).unwrap();
        // O(N^2) oracle: sort all distances per point, ties by index.
        let mut adj = vec![vec![false; 50]; 50];
        for i in 0..50 {
            let mut d: Vec<(f64, usize)> = (0..50)
                .filter(|&j| j != i)
                .map(|j| (crate::spatial::sq_dist(ds.point(i), ds.point(j)), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, j) in &d[..5] {
                adj[i][j] = true;
                adj[j][i] = true;
            }
        }
        for i in 0..50 {
            for j in 0..50 {
                assert_eq!(g.weight(i, j) > 0.0, adj[i][j], "pair ({i}, {j})");
                if adj[i][j] {
                    assert_eq!(g.weight(i, j), 10.0);
                }
            }
        }
    }

    #[test]
    fn self_tuning_weights() {
        let ds = gen_uniform_cube(60, 2, 3, |_| 0.0).unwrap();
        let g = build_knn_graph(&ds, 4, KnnWeights::self_tuning()).unwrap();
        assert_eq!(g.max_asymmetry(), 0.0);
        assert!(g.edges().iter().all(|e| e.2 > 0.0 && e.2 <= 1.0));
    }

    #[test]
    fn laplacian_hand_cases() {
        let path = Graph::from_edges(
            3,
            &[(0, 1, 1.0), (1, 2, 1.0)],
            GraphKind::Knn { k: 1, weights: KnnWeights::UniformNk },
        )
        .unwrap();
        assert_eq!(path.laplacian_apply(&[0.0, 1.0, 2.0]).unwrap(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(path.laplacian_apply(&[3.0; 3]).unwrap(), vec![0.0; 3]);
        assert!(path.laplacian_apply(&[0.0; 2]).is_err());
    }

    #[test]
    fn laplacian_matches_dense() {
        use crate::rng::seeded;
        use rand::Rng;
        let mut rng = seeded(21, 0);
        let n = 10;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random::<f64>() < 0.4 {
                    edges.push((i, j, rng.random::<f64>()));
                }
            }
        }
        let g = Graph::from_edges(n, &edges, GraphKind::Knn { k: 1, weights: KnnWeights::UniformNk })
            .unwrap();
        let mut dense = vec![vec![0.0; n]; n];
        for &(i, j, w) in &edges {
            dense[i][j] = w;
            dense[j][i] = w;
        }
        let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let lu = g.laplacian_apply(&u).unwrap();
        for i in 0..n {
            let deg: f64 = dense[i].iter().sum();
            let wu: f64 = (0..n).map(|j| dense[i][j] * u[j]).sum();
            assert!((lu[i] - (deg * u[i] - wu)).abs() < 1e-12);
        }
    }

    #[test]
    fn degree_stats_labeled_subset() {
        let ds = gen_uniform_cube(100, 2, 5, |_| 0.0).unwrap();
        let g = build_epsilon_graph(&ds, KernelSpec::new(KernelKind::Indicator, 0.2, 2)).unwrap();
        let (d, p) = degree_stats(&g, &ds).unwrap();
        assert_eq!(d, p);
        let none = ds.all_unlabeled();
        let (_, p0) = degree_stats(&g, &none).unwrap();
        assert!(p0.iter().all(|&v| v == 0.0));
        assert_eq!(g.recomputed_degrees(), g.degrees());
    }

    #[test]
    fn kernel_constant_values() {
        let ind = kernel_constants(&KernelSpec::new(KernelKind::Indicator, 1.0, 2)).unwrap();
        assert!((ind.c_eta - PI).abs() < 1e-12);
        assert!((ind.sigma_eta - PI / 4.0).abs() < 1e-12);
        let bump = kernel_constants(&KernelSpec::new(KernelKind::LipschitzBump, 1.0, 1)).unwrap();
        assert!((bump.c_eta - 3.0).abs() < 1e-9);
        assert!(kernel_constants(&KernelSpec::new(KernelKind::SelfTuningGaussian, 1.0, 2)).is_err());
    }

    #[test]
    fn numeric_quadrature_agrees_with_closed_form_for_indicator() {
        // Run the quadrature route on the indicator kernel in several dimensions.
        for d in 1..=5 {
            let area = unit_sphere_area(d);
            let f0 = |t: f64| KernelKind::Indicator.eta(t) * t.powi(d as i32 - 1);
            let f2 = |t: f64| KernelKind::Indicator.eta(t) * t.powi(d as i32 + 1);
            let c = area * adaptive_simpson(&f0, 0.0, 1.0, 1e-13);
            let s = area / d as f64 * adaptive_simpson(&f2, 0.0, 1.0, 1e-13);
            let closed = kernel_constants(&KernelSpec::new(KernelKind::Indicator, 1.0, d)).unwrap();
            assert!((c - closed.c_eta).abs() / closed.c_eta < 1e-6);
            assert!((s - closed.sigma_eta).abs() / closed.sigma_eta < 1e-6);
        }
    }

    #[test]
    fn continuum_operator_cases() {
        let k = kernel_constants(&KernelSpec::new(KernelKind::Indicator, 1.0, 2)).unwrap();
        let linear = AnalyticField {
            value: |x: &[f64]| 2.0 * x[0] - x[1],
            gradient: |_: &[f64]| vec![2.0, -1.0],
            laplacian: |_: &[f64]| 0.0,
        };
        assert_eq!(continuum_operator(&k, &linear, &ConstantField(1.0), &[0.3, 0.4]).unwrap(), 0.0);
        let quad = AnalyticField {
            value: |x: &[f64]| 0.5 * (x[0] * x[0] + x[1] * x[1]),
            gradient: |x: &[f64]| x.to_vec(),
            laplacian: |_: &[f64]| 2.0,
        };
        let v = continuum_operator(&k, &quad, &ConstantField(1.0), &[0.1, 0.2]).unwrap();
        assert!((v - PI / 2.0).abs() < 1e-12);
        let bumpy_rho = AnalyticField {
            value: |x: &[f64]| 1.0 + 0.5 * x[0],
            gradient: |_: &[f64]| vec![0.5, 0.0],
            laplacian: |_: &[f64]| 0.0,
        };
        let constant = AnalyticField {
            value: |_: &[f64]| 4.0,
            gradient: |_: &[f64]| vec![0.0, 0.0],
            laplacian: |_: &[f64]| 0.0,
        };
        assert_eq!(continuum_operator(&k, &constant, &bumpy_rho, &[0.5, 0.5]).unwrap(), 0.0);
        assert!(continuum_operator(&k, &quad, &ConstantField(0.0), &[0.1, 0.2]).is_err());
    }

    #[test]
    fn edge_list_round_trip() {
        let ds = gen_uniform_cube(40, 2, 8, |_| 0.0).unwrap();
        let g = build_knn_graph(&ds, 3, KnnWeights::self_tuning()).unwrap();
        let back = Graph::from_edge_list(&g.to_edge_list()).unwrap();
        assert_eq!(back.edges(), g.edges());
        assert_eq!(back.degrees(), g.degrees());
        assert!(g.to_edge_list().starts_with("40 knn_self_tuning 3\n"));
        assert!(Graph::from_edge_list("3 indicator 0.5\n1 0 1.0\n").is_err());
    }
}
