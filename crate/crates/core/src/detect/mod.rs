//! CDT detection: a one-dimensional permutation test and binary classifiers
//! evaluated with nested cross-validation.
//!
//! Class 1 is the paired desktop, class 0 the baseline desktop. Every
//! stochastic step takes an explicit seed and reproduces bit-identical output.

mod cv;
mod forest;
mod logistic;
mod metrics;
mod nb;
mod permutation;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cv::{default_grid, fast_grid, grouped_folds, nested_cv, nested_cv_grouped, stratified_folds, CvOptions, EvalReport, FoldResult};
pub use forest::{gini_importance, select_features, DecisionTree, Forest, ForestKind, ForestView, RankedFeature, Selection, TreeParams};
pub use logistic::{LogisticModel, LogisticObjective};
pub use metrics::{auc, auc_bruteforce, metrics, ClassMetrics, Confusion, Metrics, THRESHOLD};
pub use nb::GaussianNb;
pub use permutation::{permutation_test, Decision, PermutationTestResult, EXHAUSTIVE_LIMIT};

#[derive(Debug, Error, PartialEq)]
pub enum DetectError {
    #[error("training data has a single class")]
    SingleClassTraining,
    #[error("need at least {needed} samples per class, found {found}")]
    InsufficientSamples { needed: usize, found: usize },
    #[error("both samples need at least two values")]
    SampleTooSmall,
    #[error("AUC needs both classes")]
    UndefinedAuc,
    #[error("feature importance needs a forest, got {0}")]
    WrongModelKind(String),
    #[error("rows have inconsistent width")]
    Ragged,
    #[error("scores and labels differ in length")]
    LengthMismatch,
}

/// Borrowed design matrix with binary labels.
#[derive(Debug, Clone)]
pub struct Xy<'a> {
    pub x: Vec<&'a [f64]>,
    pub y: Vec<u8>,
}

impl<'a> Xy<'a> {
    pub fn new(rows: &'a [Vec<f64>], labels: &[u8]) -> Result<Self, DetectError> {
        if rows.len() != labels.len() {
            return Err(DetectError::LengthMismatch);
        }
        if let Some(first) = rows.first() {
            if rows.iter().any(|r| r.len() != first.len()) {
                return Err(DetectError::Ragged);
            }
        }
        Ok(Self { x: rows.iter().map(Vec::as_slice).collect(), y: labels.to_vec() })
    }

    pub fn subset(&self, idx: &[usize]) -> Xy<'a> {
        Xy { x: idx.iter().map(|&i| self.x[i]).collect(), y: idx.iter().map(|&i| self.y[i]).collect() }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn width(&self) -> usize {
        self.x.first().map_or(0, |r| r.len())
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.y.iter().filter(|&&l| l == 1).count();
        (self.len() - pos, pos)
    }

    fn require_both_classes(&self) -> Result<(), DetectError> {
        let (neg, pos) = self.class_counts();
        if neg == 0 || pos == 0 {
            Err(DetectError::SingleClassTraining)
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    GaussianNb,
    LogisticRegression { c: f64 },
    RandomForest { n_estimators: usize, max_depth: Option<usize> },
    ExtraTrees { n_estimators: usize, max_depth: Option<usize> },
}

impl ModelSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelSpec::GaussianNb => "gaussian_nb",
            ModelSpec::LogisticRegression { .. } => "logistic_regression",
            ModelSpec::RandomForest { .. } => "random_forest",
            ModelSpec::ExtraTrees { .. } => "extra_trees",
        }
    }

    pub fn forest(&self) -> Option<(ForestKind, usize, Option<usize>)> {
        match *self {
            ModelSpec::RandomForest { n_estimators, max_depth } => Some((ForestKind::Random, n_estimators, max_depth)),
            ModelSpec::ExtraTrees { n_estimators, max_depth } => Some((ForestKind::Extra, n_estimators, max_depth)),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let depth = |d: Option<usize>| d.map_or("none".to_owned(), |d| d.to_string());
        match self {
            ModelSpec::GaussianNb => write!(f, "gaussian_nb"),
            ModelSpec::LogisticRegression { c } => write!(f, "logistic_regression(C={c})"),
            ModelSpec::RandomForest { n_estimators, max_depth } => {
                write!(f, "random_forest(n_estimators={n_estimators}, max_depth={})", depth(*max_depth))
            }
            ModelSpec::ExtraTrees { n_estimators, max_depth } => {
                write!(f, "extra_trees(n_estimators={n_estimators}, max_depth={})", depth(*max_depth))
            }
        }
    }
}

/// Probability of class 1 for one sample.
pub trait Classifier: Send + Sync {
    fn predict_proba(&self, x: &[f64]) -> f64;

    fn predict_all(&self, xs: &[&[f64]]) -> Vec<f64> {
        xs.iter().map(|x| self.predict_proba(x)).collect()
    }
}

pub enum FittedModel {
    GaussianNb(GaussianNb),
    Logistic(LogisticModel),
    Forest(ForestView),
}

impl FittedModel {
    pub fn as_classifier(&self) -> &dyn Classifier {
        match self {
            FittedModel::GaussianNb(m) => m,
            FittedModel::Logistic(m) => m,
            FittedModel::Forest(m) => m,
        }
    }
}

impl Classifier for FittedModel {
    fn predict_proba(&self, x: &[f64]) -> f64 {
        self.as_classifier().predict_proba(x)
    }
}

pub fn fit(spec: &ModelSpec, data: &Xy<'_>, seed: u64) -> Result<FittedModel, DetectError> {
    data.require_both_classes()?;
    Ok(match *spec {
        ModelSpec::GaussianNb => FittedModel::GaussianNb(GaussianNb::fit(data)?),
        ModelSpec::LogisticRegression { c } => FittedModel::Logistic(LogisticModel::fit(data, c)?),
        _ => {
            let (kind, n, depth) = spec.forest().expect("forest spec");
            let forest = Forest::fit(data, kind, n, &TreeParams::default(), seed)?;
            FittedModel::Forest(ForestView::new(std::sync::Arc::new(forest), n, depth))
        }
    })
}

/// Fits on `train` and returns class-1 scores and hard labels for `test`.
pub fn fit_predict(spec: &ModelSpec, train: &Xy<'_>, test: &[&[f64]], seed: u64) -> Result<(Vec<f64>, Vec<u8>), DetectError> {
    let model = fit(spec, train, seed)?;
    let scores = model.predict_all(test);
    let labels = scores.iter().map(|s| u8::from(*s >= THRESHOLD)).collect();
    Ok((scores, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_rejected() {
        let rows = vec![vec![0.0], vec![1.0]];
        let data = Xy::new(&rows, &[1, 1]).unwrap();
        for spec in [ModelSpec::GaussianNb, ModelSpec::LogisticRegression { c: 1.0 }, ModelSpec::RandomForest { n_estimators: 3, max_depth: None }] {
            assert_eq!(fit(&spec, &data, 0).err(), Some(DetectError::SingleClassTraining));
        }
    }

    #[test]
    fn ragged_rows_rejected() {
        let rows = vec![vec![0.0], vec![1.0, 2.0]];
        assert_eq!(Xy::new(&rows, &[0, 1]).err(), Some(DetectError::Ragged));
    }

    #[test]
    fn xor_stump_is_limited() {
        // every depth-1 split of XOR leaves one side mixed, so at most 3 of 4 points are right
        let rows = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 1.0]];
        let labels = [0, 1, 1, 0];
        let data = Xy::new(&rows, &labels).unwrap();
        for seed in 0..20 {
            let spec = ModelSpec::RandomForest { n_estimators: 1, max_depth: Some(1) };
            let (_, pred) = fit_predict(&spec, &data, &data.x, seed).unwrap();
            let correct = pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
            assert!(correct <= 3, "seed {seed}: {correct}");
        }
    }
}
