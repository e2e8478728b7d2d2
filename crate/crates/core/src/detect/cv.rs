//! Stratified nested cross-validation with grid search by AUC.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forest::{gini_importance, Forest, ForestKind, ForestView, RankedFeature, TreeParams};
use super::metrics::{auc, metrics, Metrics};
use super::{fit, Classifier, DetectError, ModelSpec, Xy};
use crate::rng::{derive, stream};

/// Forest sizes and depths crossed for both forest kinds, plus the logistic
/// regularization values and naive Bayes.
pub fn default_grid() -> Vec<ModelSpec> {
    let mut grid = vec![ModelSpec::GaussianNb];
    grid.extend([0.01, 0.1, 1.0, 10.0].map(|c| ModelSpec::LogisticRegression { c }));
    for n_estimators in [50, 100, 200] {
        for max_depth in [Some(10), Some(50), Some(200), None] {
            grid.push(ModelSpec::RandomForest { n_estimators, max_depth });
            grid.push(ModelSpec::ExtraTrees { n_estimators, max_depth });
        }
    }
    grid
}

/// A small grid for sweeps that repeat nested CV many times.
pub fn fast_grid() -> Vec<ModelSpec> {
    vec![
        ModelSpec::GaussianNb,
        ModelSpec::LogisticRegression { c: 0.1 },
        ModelSpec::RandomForest { n_estimators: 50, max_depth: None },
        ModelSpec::ExtraTrees { n_estimators: 50, max_depth: None },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub outer_k: usize,
    pub inner_k: usize,
    pub seed: u64,
    pub importance_k: usize,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self { outer_k: 10, inner_k: 10, seed: 0, importance_k: 30 }
    }
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = stream(seed, "folds", &[]);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in [0u8, 1] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

/// Fold assignment that keeps rows sharing a group id together. Groups are
/// shuffled, ordered by class composition and dealt round-robin, so folds stay
/// close to stratified. Distinct ids for every row reduce to `stratified_folds`.
pub fn grouped_folds(labels: &[u8], groups: &[u64], k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut members: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        members.entry(*g).or_default().push(i);
    }
    if members.len() == labels.len() {
        return stratified_folds(labels, k, seed);
    }
    let mut rng = stream(seed, "group-folds", &[]);
    let mut units: Vec<Vec<usize>> = members.into_values().collect();
    units.shuffle(&mut rng);
    let composition = |u: &Vec<usize>| {
        let pos = u.iter().filter(|&&i| labels[i] == 1).count();
        (pos, u.len() - pos)
    };
    units.sort_by_key(|u| std::cmp::Reverse(composition(u)));
    let mut folds = vec![Vec::new(); k];
    for (n, u) in units.into_iter().enumerate() {
        folds[n % k].extend(u);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

/// Number of distinct groups holding at least one row of `class`.
fn distinct_groups(groups: &[u64], labels: &[u8], class: u8) -> usize {
    let mut seen: Vec<u64> = groups.iter().zip(labels).filter(|(_, l)| **l == class).map(|(g, _)| *g).collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

fn complement(n: usize, held_out: &[usize]) -> Vec<usize> {
    let mut mask = vec![true; n];
    for &i in held_out {
        mask[i] = false;
    }
    (0..n).filter(|&i| mask[i]).collect()
}

/// Scores of every grid entry on `test`, fitting each forest kind once at
/// its largest size and reading smaller sizes and depths off views.
fn score_grid(grid: &[ModelSpec], train: &Xy<'_>, test: &[&[f64]], seed: u64) -> Result<Vec<Vec<f64>>, DetectError> {
    let mut forests: BTreeMap<u8, Arc<Forest>> = BTreeMap::new();
    for (tag, kind) in [(0u8, ForestKind::Random), (1, ForestKind::Extra)] {
        let largest = grid
            .iter()
            .filter_map(|s| s.forest())
            .filter(|(k, _, _)| *k == kind)
            .map(|(_, n, _)| n)
            .max();
        if let Some(n) = largest {
            forests.insert(tag, Arc::new(Forest::fit(train, kind, n, &TreeParams::default(), seed)?));
        }
    }
    grid.iter()
        .map(|spec| match spec.forest() {
            Some((kind, n, depth)) => {
                let tag = u8::from(kind == ForestKind::Extra);
                Ok(ForestView::new(forests[&tag].clone(), n, depth).predict_all(test))
            }
            None => Ok(fit(spec, train, seed)?.predict_all(test)),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub selected: ModelSpec,
    /// Mean inner AUC of the selected model.
    pub inner_auc: f64,
    pub test_auc: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean AUC over the outer test folds.
    pub auc: f64,
    pub auc_std: f64,
    /// Threshold metrics over the pooled outer-fold predictions.
    pub metrics: Metrics,
    /// Most frequent inner-loop winner.
    pub selected: ModelSpec,
    pub folds: Vec<FoldResult>,
    /// Gini ranking from the selected model refit on all samples; empty for
    /// non-forest winners.
    pub importance: Vec<RankedFeature>,
    pub n_samples: usize,
    pub n_features: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "samples: {}", self.n_samples);
        let _ = writeln!(out, "features: {}", self.n_features);
        let _ = writeln!(out, "seed: {}", self.seed);
        let _ = writeln!(out, "selected_model: {}", self.selected);
        let _ = writeln!(out, "auc_outer_mean: {:.4}", self.auc);
        let _ = writeln!(out, "auc_outer_std: {:.4}", self.auc_std);
        for (class, m) in ["baseline", "paired"].iter().zip(&self.metrics.per_class) {
            let _ = writeln!(
                out,
                "class {class}: precision {:.4} recall {:.4} f1 {:.4} support {}{}",
                m.precision,
                m.recall,
                m.f1,
                m.support,
                if m.precision_undefined || m.recall_undefined || m.f1_undefined { " (undefined metric reported as 0)" } else { "" }
            );
        }
        let c = &self.metrics.confusion;
        let _ = writeln!(out, "confusion: tp {} fp {} tn {} fn {}", c.tp, c.fp, c.tn, c.fn_);
        for f in &self.folds {
            let _ = writeln!(out, "fold {}: {} inner_auc {:.4} test_auc {:.4}", f.fold, f.selected, f.inner_auc, f.test_auc);
        }
        for (rank, r) in self.importance.iter().enumerate() {
            let _ = writeln!(out, "importance {}: {} {:.6}", rank + 1, r.name, r.importance);
        }
        out
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Picks the grid entry with the best mean inner-fold AUC; earlier entries
/// win ties.
fn inner_select(grid: &[ModelSpec], data: &Xy<'_>, groups: &[u64], inner_k: usize, seed: u64) -> Result<(usize, f64), DetectError> {
    let folds = grouped_folds(&data.y, groups, inner_k, derive(seed, "inner-folds", &[]));
    let mut sums = vec![0.0; grid.len()];
    for (g, test_idx) in folds.iter().enumerate() {
        let train_idx = complement(data.len(), test_idx);
        let train = data.subset(&train_idx);
        let test = data.subset(test_idx);
        let scores = score_grid(grid, &train, &test.x, derive(seed, "inner-fit", &[g as u64]))?;
        for (acc, s) in sums.iter_mut().zip(&scores) {
            *acc += auc(s, &test.y)?;
        }
    }
    let mut best = 0;
    for i in 1..grid.len() {
        if sums[i] > sums[best] {
            best = i;
        }
    }
    Ok((best, sums[best] / folds.len() as f64))
}

pub fn nested_cv(
    rows: &[Vec<f64>],
    labels: &[u8],
    feature_names: &[String],
    grid: &[ModelSpec],
    opts: &CvOptions,
) -> Result<EvalReport, DetectError> {
    let groups: Vec<u64> = (0..rows.len() as u64).collect();
    nested_cv_grouped(rows, labels, &groups, feature_names, grid, opts)
}

/// Nested CV where rows with the same group id never straddle a train/test
/// split, at either level.
pub fn nested_cv_grouped(
    rows: &[Vec<f64>],
    labels: &[u8],
    groups: &[u64],
    feature_names: &[String],
    grid: &[ModelSpec],
    opts: &CvOptions,
) -> Result<EvalReport, DetectError> {
    let data = Xy::new(rows, labels)?;
    if groups.len() != rows.len() {
        return Err(DetectError::LengthMismatch);
    }
    let fewest = distinct_groups(groups, labels, 0).min(distinct_groups(groups, labels, 1));
    if fewest < opts.outer_k || opts.outer_k < 2 {
        return Err(DetectError::InsufficientSamples { needed: opts.outer_k.max(2), found: fewest });
    }
    let outer = grouped_folds(labels, groups, opts.outer_k, derive(opts.seed, "outer-folds", &[]));
    let results: Vec<(FoldResult, Vec<usize>, Vec<f64>)> = outer
        .par_iter()
        .enumerate()
        .map(|(f, test_idx)| {
            let train_idx = complement(data.len(), test_idx);
            assert!(train_idx.iter().all(|i| test_idx.binary_search(i).is_err()), "outer test rows leaked into training");
            let train = data.subset(&train_idx);
            let test = data.subset(test_idx);
            let train_groups: Vec<u64> = train_idx.iter().map(|&i| groups[i]).collect();
            let tn = distinct_groups(&train_groups, &train.y, 0);
            let tp = distinct_groups(&train_groups, &train.y, 1);
            let inner_k = opts.inner_k.min(tn).min(tp).max(2);
            let fold_seed = derive(opts.seed, "outer", &[f as u64]);
            let (winner, inner_auc) = inner_select(grid, &train, &train_groups, inner_k, fold_seed)?;
            let model = fit(&grid[winner], &train, derive(fold_seed, "refit", &[]))?;
            let scores = model.predict_all(&test.x);
            let test_auc = auc(&scores, &test.y)?;
            let result = FoldResult {
                fold: f,
                selected: grid[winner],
                inner_auc,
                test_auc,
                n_train: train.len(),
                n_test: test.len(),
            };
            Ok((result, test_idx.clone(), scores))
        })
        .collect::<Result<_, DetectError>>()?;
    let mut pooled_scores = vec![0.0; data.len()];
    let mut fold_aucs = Vec::new();
    let mut folds = Vec::new();
    let mut votes: Vec<(ModelSpec, usize)> = Vec::new();
    for (r, idx, scores) in results {
        for (i, s) in idx.into_iter().zip(scores) {
            pooled_scores[i] = s;
        }
        fold_aucs.push(r.test_auc);
        match votes.iter_mut().find(|(s, _)| *s == r.selected) {
            Some((_, n)) => *n += 1,
            None => votes.push((r.selected, 1)),
        }
        folds.push(r);
    }
    let position = |s: &ModelSpec| grid.iter().position(|g| g == s).unwrap_or(usize::MAX);
    votes.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| position(&a.0).cmp(&position(&b.0))));
    let selected = votes[0].0;
    let auc_mean = mean(&fold_aucs);
    let auc_std = (fold_aucs.iter().map(|a| (a - auc_mean).powi(2)).sum::<f64>() / fold_aucs.len() as f64).sqrt();
    let importance = if selected.forest().is_some() {
        let model = fit(&selected, &data, derive(opts.seed, "importance", &[]))?;
        gini_importance(&model, feature_names, opts.importance_k)?
    } else {
        Vec::new()
    };
    Ok(EvalReport {
        auc: auc_mean,
        auc_std,
        metrics: metrics(&pooled_scores, labels)?,
        selected,
        folds,
        importance,
        n_samples: data.len(),
        n_features: data.width(),
        seed: opts.seed,
    })
}
