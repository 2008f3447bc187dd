//! Evaluation protocols: pair verification, patch retrieval and mutual
//! nearest-neighbor matching.

mod matching;
mod report;
mod retrieval;
mod verification;

pub use matching::{matching_pr_map, mutual_nn_match, Match};
pub use report::{mean_by_tag, EvalReport};
pub use retrieval::{retrieval_map, DistractorPolicy, RetrievalProtocol};
pub use verification::{fpr95, verification_map, verification_map_from_distances, VerificationSet};

use ndarray::{Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PatchDataset;
use crate::model::{head::binarize, DescriptorModel, Head};
use crate::Result;

/// How descriptors are compared at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Euclidean distance between rows.
    Euclidean,
    /// Number of coordinates whose signs differ (`sign(0) = +1`).
    Hamming,
}

/// Descriptor matrix plus the metric used to compare its rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptors {
    pub data: Array2<f64>,
    pub metric: Metric,
}

impl Descriptors {
    pub fn euclidean(data: Array2<f64>) -> Self {
        Self { data, metric: Metric::Euclidean }
    }

    /// Binarizes `codes` and compares them by Hamming distance.
    pub fn binary(codes: ArrayView2<'_, f64>) -> Self {
        Self {
            data: binarize(codes),
            metric: Metric::Hamming,
        }
    }

    /// Embeds dataset patches with the model, binarizing tanh codes.
    pub fn from_model(model: &DescriptorModel, ds: &PatchDataset, indices: &[usize]) -> Result<Self> {
        let patches: Vec<_> = indices.iter().map(|&i| ds.patch(i)).collect();
        let refs: Vec<_> = patches.iter().collect();
        let emb = model.embed(&refs)?;
        Ok(match model.spec().head {
            Head::UnitNorm => Self::euclidean(emb),
            Head::TanhCode => Self::binary(emb.view()),
        })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.nrows() == 0
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        row_distance(self.data.row(i), self.data.row(j), self.metric)
    }
}

pub fn row_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Metric::Hamming => a.iter().zip(b.iter()).filter(|(x, y)| (**x >= 0.0) != (**y >= 0.0)).count() as f64,
    }
}

/// Distances between every row of `a` and every row of `b`.
pub fn cross_distances(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, metric: Metric) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = (0..a.nrows())
        .into_par_iter()
        .map(|i| b.outer_iter().map(|rb| row_distance(a.row(i), rb, metric)).collect())
        .collect();
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| rows[i][j])
}

/// Indices sorted by increasing `key`, ties broken by position.
pub(crate) fn rank_by(keys: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
    order
}
