//! Graph construction plus harmonic extension, run transductively: labeled
//! training points and unlabeled query points share one graph.

use crate::classify::{accuracy, gl_classify, knn_classify, Prediction};
use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::graph::{build_epsilon_graph, build_knn_graph, Graph, KernelKind, KernelSpec, KnnWeights};
use crate::solve::{harmonic_extend, HarmonicSolution, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GraphSpec {
    Knn { k: usize, weights: KnnWeights },
    Epsilon { kernel: KernelKind, epsilon: f64 },
}

impl GraphSpec {
    pub fn knn_self_tuning(k: usize) -> Self {
        GraphSpec::Knn { k, weights: KnnWeights::self_tuning() }
    }

    pub fn build(&self, ds: &Dataset) -> Result<Graph> {
        match *self {
            GraphSpec::Knn { k, weights } => build_knn_graph(ds, k, weights),
            GraphSpec::Epsilon { kernel, epsilon } => {
                build_epsilon_graph(ds, KernelSpec::new(kernel, epsilon, ds.dim()))
            }
        }
    }

    pub fn with_k(&self, k: usize) -> Self {
        match *self {
            GraphSpec::Knn { weights, .. } => GraphSpec::Knn { k, weights },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Pipeline {
    pub graph: GraphSpec,
    #[serde(default)]
    pub solver: SolverConfig,
}

/// Solution of a transductive run; `query_u` holds `u` at the query nodes.
#[derive(Debug, Clone)]
pub struct Transductive {
    pub solution: HarmonicSolution,
    pub n_train: usize,
    pub query_u: Vec<f64>,
    pub prediction: Prediction,
}

impl Pipeline {
    pub fn new(graph: GraphSpec) -> Self {
        Self { graph, solver: SolverConfig::default() }
    }

    pub fn solve(&self, ds: &Dataset) -> Result<HarmonicSolution> {
        let g = self.graph.build(ds)?;
        harmonic_extend(&g, ds, &self.solver)
    }

    /// Labeled rows of `train` followed by `queries` as unlabeled nodes.
    pub fn combine(train: &Dataset, queries: &Dataset) -> Result<Dataset> {
        train.labeled_part()?.concat(&queries.all_unlabeled())
    }

    /// Solves on an already combined dataset whose unlabeled rows are the
    /// queries.
    pub fn run_combined(&self, combined: &Dataset) -> Result<Transductive> {
        let solution = self.solve(combined)?;
        let n_train = combined.labeled_count();
        let query_u: Vec<f64> =
            combined.unlabeled_indices().into_iter().map(|i| solution.u[i]).collect();
        let prediction = Prediction::from_scores(query_u.clone());
        Ok(Transductive { solution, n_train, query_u, prediction })
    }

    pub fn transductive(&self, train: &Dataset, queries: &Dataset) -> Result<Transductive> {
        self.run_combined(&Self::combine(train, queries)?)
    }

    /// Accuracy of GL on the unlabeled rows of `combined`.
    pub fn accuracy_combined(&self, combined: &Dataset) -> Result<(f64, Transductive)> {
        let run = self.run_combined(combined)?;
        let truth: Vec<f64> =
            combined.unlabeled_indices().into_iter().map(|i| combined.labels()[i]).collect();
        Ok((accuracy(&run.prediction, &truth, None)?, run))
    }

    /// Victim oracle: GL classes for `points` appended unlabeled to `train`.
    pub fn victim_labels(&self, train: &Dataset, points: &[f64]) -> Result<Vec<u8>> {
        let d = train.dim();
        if points.len() % d != 0 {
            return Err(invalid("query buffer is not a multiple of the dimension"));
        }
        let n = points.len() / d;
        let queries = Dataset::new("queries", d, points.to_vec(), vec![0.0; n], vec![false; n])?;
        Ok(self.transductive(train, &queries)?.prediction.classes)
    }
}

/// Full-graph GL classes of the whole combined dataset (labeled nodes keep
/// their labels).
pub fn gl_classes(sol: &HarmonicSolution) -> Vec<u8> {
    gl_classify(sol).classes
}

/// kNN accuracy on the labeled rows of `test` (or all rows when none are
/// labeled), classifying from the labeled rows of `train`.
pub fn knn_accuracy(train: &Dataset, test_points: &[f64], test_labels: &[f64], k: usize) -> Result<f64> {
    let pred = knn_classify(train, test_points, k)?;
    accuracy(&pred, test_labels, None)
}
