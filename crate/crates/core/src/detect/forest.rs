//! Gini decision trees, random forests and extra-trees.
//!
//! Each node draws from its own generator, seeded from its parent's seed and
//! the branch taken. A tree grown without a depth limit and cut at depth `d`
//! is therefore identical to the tree grown with `max_depth = d`, and the
//! first `n` trees of a forest are the forest fitted with `n` estimators.
//! [`ForestView`] exploits this so a grid over depths and sizes costs one fit.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Classifier, DetectError, FittedModel, Xy};
use crate::rng::derive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForestKind {
    /// Bootstrap samples and exhaustive thresholds.
    Random,
    /// Full sample and one random threshold per candidate feature.
    Extra,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeParams {
    pub max_depth: Option<usize>,
    /// Candidate features per split; `None` means the square root of the width.
    pub max_features: Option<usize>,
    pub min_samples_split: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self { max_depth: None, max_features: None, min_samples_split: 2 }
    }
}

const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
struct Node {
    feature: u32,
    threshold: f64,
    left: u32,
    right: u32,
    /// Class-1 fraction of the samples reaching this node.
    value: f64,
    samples: u32,
    impurity: f64,
    depth: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    width: usize,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Split {
    feature: usize,
    threshold: f64,
    score: f64,
}

/// Column-major copy of the training matrix.
struct Columns {
    cols: Vec<Vec<f64>>,
    y: Vec<u8>,
}

impl Columns {
    fn new(data: &Xy<'_>) -> Self {
        let cols = (0..data.width()).map(|f| data.x.iter().map(|row| row[f]).collect()).collect();
        Self { cols, y: data.y.clone() }
    }

    fn width(&self) -> usize {
        self.cols.len()
    }
}

struct Grower<'a> {
    data: &'a Columns,
    kind: ForestKind,
    max_features: usize,
    params: &'a TreeParams,
    nodes: Vec<Node>,
}

impl Grower<'_> {
    fn grow(&mut self, idx: &mut [usize], depth: u32, seed: u64) -> u32 {
        let n = idx.len();
        let pos = idx.iter().filter(|&&i| self.data.y[i] == 1).count();
        let id = self.nodes.len() as u32;
        let impurity = gini(pos, n);
        self.nodes.push(Node {
            feature: LEAF,
            threshold: 0.0,
            left: LEAF,
            right: LEAF,
            value: pos as f64 / n as f64,
            samples: n as u32,
            impurity,
            depth,
        });
        let depth_ok = self.params.max_depth.is_none_or(|d| (depth as usize) < d);
        if !depth_ok || n < self.params.min_samples_split || pos == 0 || pos == n {
            return id;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Some(split) = self.best_split(idx, pos, &mut rng) else {
            return id;
        };
        let column = &self.data.cols[split.feature];
        let mut lo = 0;
        for k in 0..n {
            if column[idx[k]] <= split.threshold {
                idx.swap(lo, k);
                lo += 1;
            }
        }
        let (left_idx, right_idx) = idx.split_at_mut(lo);
        let left = self.grow(left_idx, depth + 1, derive(seed, "branch", &[0]));
        let right = self.grow(right_idx, depth + 1, derive(seed, "branch", &[1]));
        let node = &mut self.nodes[id as usize];
        node.feature = split.feature as u32;
        node.threshold = split.threshold;
        node.left = left;
        node.right = right;
        id
    }

    /// Weighted child impurity of the best split among sampled features.
    /// Constant features do not use up the candidate budget.
    fn best_split(&self, idx: &[usize], pos: usize, rng: &mut ChaCha8Rng) -> Option<Split> {
        let width = self.data.width();
        let mut order: Vec<usize> = (0..width).collect();
        let mut best: Option<Split> = None;
        let mut tried = 0;
        let mut values: Vec<(f64, u8)> = Vec::with_capacity(idx.len());
        for drawn in 0..width {
            if tried >= self.max_features {
                break;
            }
            // incremental Fisher-Yates: only the features actually examined are drawn
            let pick = rng.gen_range(drawn..width);
            order.swap(drawn, pick);
            let f = order[drawn];
            values.clear();
            let column = &self.data.cols[f];
            values.extend(idx.iter().map(|&i| (column[i], self.data.y[i])));
            let (min, max) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), (v, _)| (a.min(*v), b.max(*v)));
            if min >= max {
                continue;
            }
            tried += 1;
            let candidate = match self.kind {
                ForestKind::Random => exhaustive_split(&mut values, pos),
                ForestKind::Extra => {
                    let mut t = rng.gen_range(min..max);
                    if t >= max {
                        t = min;
                    }
                    Some(score_threshold(&values, t, pos))
                }
            };
            if let Some((threshold, score)) = candidate {
                if best.as_ref().is_none_or(|b| score < b.score) {
                    best = Some(Split { feature: f, threshold, score });
                }
            }
        }
        best
    }
}

fn score_threshold(values: &[(f64, u8)], t: f64, pos: usize) -> (f64, f64) {
    let (mut nl, mut pl) = (0usize, 0usize);
    for (v, y) in values {
        if *v <= t {
            nl += 1;
            pl += usize::from(*y);
        }
    }
    let n = values.len();
    let score = nl as f64 * gini(pl, nl) + (n - nl) as f64 * gini(pos - pl, n - nl);
    (t, score)
}

fn exhaustive_split(values: &mut [(f64, u8)], pos: usize) -> Option<(f64, f64)> {
    values.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let n = values.len();
    let mut best: Option<(f64, f64)> = None;
    let mut pl = 0usize;
    for k in 0..n - 1 {
        pl += usize::from(values[k].1);
        if values[k].0 == values[k + 1].0 {
            continue;
        }
        let nl = k + 1;
        let score = nl as f64 * gini(pl, nl) + (n - nl) as f64 * gini(pos - pl, n - nl);
        if best.is_none_or(|(_, s)| score < s) {
            let mut t = values[k].0 + (values[k + 1].0 - values[k].0) / 2.0;
            if t >= values[k + 1].0 {
                t = values[k].0;
            }
            best = Some((t, score));
        }
    }
    best
}

impl DecisionTree {
    pub fn fit(data: &Xy<'_>, idx: &[usize], kind: ForestKind, params: &TreeParams, seed: u64) -> Result<Self, DetectError> {
        Self::fit_columns(&Columns::new(data), idx, kind, params, seed)
    }

    fn fit_columns(data: &Columns, idx: &[usize], kind: ForestKind, params: &TreeParams, seed: u64) -> Result<Self, DetectError> {
        if idx.is_empty() {
            return Err(DetectError::InsufficientSamples { needed: 1, found: 0 });
        }
        let width = data.width();
        let max_features = params.max_features.unwrap_or_else(|| (width as f64).sqrt().round() as usize).clamp(1, width.max(1));
        let mut grower = Grower { data, kind, max_features, params, nodes: Vec::new() };
        let mut idx = idx.to_vec();
        grower.grow(&mut idx, 0, seed);
        Ok(Self { nodes: grower.nodes, width })
    }

    /// Class-1 fraction of the node reached, stopping at `max_depth`.
    pub fn predict_at_depth(&self, x: &[f64], max_depth: Option<usize>) -> f64 {
        let mut node = &self.nodes[0];
        while node.feature != LEAF && max_depth.is_none_or(|d| (node.depth as usize) < d) {
            let next = if x[node.feature as usize] <= node.threshold { node.left } else { node.right };
            node = &self.nodes[next as usize];
        }
        node.value
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth as usize).max().unwrap_or(0)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Per-feature impurity decrease weighted by the share of samples at each
    /// split, counting only splits above `max_depth`; normalized to sum 1.
    pub fn importances(&self, max_depth: Option<usize>) -> Vec<f64> {
        let mut imp = vec![0.0; self.width];
        let total = f64::from(self.nodes[0].samples);
        for node in &self.nodes {
            if node.feature == LEAF || !max_depth.is_none_or(|d| (node.depth as usize) < d) {
                continue;
            }
            let l = &self.nodes[node.left as usize];
            let r = &self.nodes[node.right as usize];
            let decrease = f64::from(node.samples) * node.impurity
                - f64::from(l.samples) * l.impurity
                - f64::from(r.samples) * r.impurity;
            imp[node.feature as usize] += decrease / total;
        }
        let sum: f64 = imp.iter().sum();
        if sum > 0.0 {
            imp.iter_mut().for_each(|v| *v /= sum);
        }
        imp
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub kind: ForestKind,
    trees: Vec<DecisionTree>,
}

impl Forest {
    pub fn fit(data: &Xy<'_>, kind: ForestKind, n_estimators: usize, params: &TreeParams, seed: u64) -> Result<Self, DetectError> {
        data.require_both_classes()?;
        let n = data.len();
        let columns = Columns::new(data);
        let trees = (0..n_estimators)
            .into_par_iter()
            .map(|t| {
                let tree_seed = derive(seed, "tree", &[t as u64]);
                let idx: Vec<usize> = match kind {
                    ForestKind::Random => {
                        let mut rng = ChaCha8Rng::seed_from_u64(derive(tree_seed, "bootstrap", &[]));
                        (0..n).map(|_| rng.gen_range(0..n)).collect()
                    }
                    ForestKind::Extra => (0..n).collect(),
                };
                DecisionTree::fit_columns(&columns, &idx, kind, params, tree_seed)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { kind, trees })
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }
}

/// The first `n_trees` trees of a fitted forest, each cut at `max_depth`.
#[derive(Debug, Clone)]
pub struct ForestView {
    forest: Arc<Forest>,
    n_trees: usize,
    max_depth: Option<usize>,
}

impl ForestView {
    pub fn new(forest: Arc<Forest>, n_trees: usize, max_depth: Option<usize>) -> Self {
        assert!(n_trees >= 1 && n_trees <= forest.len(), "view asks for {n_trees} of {} trees", forest.len());
        Self { forest, n_trees, max_depth }
    }

    pub fn kind(&self) -> ForestKind {
        self.forest.kind
    }

    pub fn importances(&self) -> Vec<f64> {
        let trees = &self.forest.trees[..self.n_trees];
        let width = trees[0].width;
        let mut total = vec![0.0; width];
        for t in trees {
            for (acc, v) in total.iter_mut().zip(t.importances(self.max_depth)) {
                *acc += v;
            }
        }
        let sum: f64 = total.iter().sum();
        if sum > 0.0 {
            total.iter_mut().for_each(|v| *v /= sum);
        }
        total
    }
}

impl Classifier for ForestView {
    fn predict_proba(&self, x: &[f64]) -> f64 {
        let trees = &self.forest.trees[..self.n_trees];
        trees.iter().map(|t| t.predict_at_depth(x, self.max_depth)).sum::<f64>() / trees.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub name: String,
    pub importance: f64,
}

/// Top-`k` features by mean Gini importance; ties go to the earlier name.
pub fn gini_importance(model: &FittedModel, feature_names: &[String], k: usize) -> Result<Vec<RankedFeature>, DetectError> {
    let FittedModel::Forest(view) = model else {
        let kind = match model {
            FittedModel::GaussianNb(_) => "gaussian_nb",
            _ => "logistic_regression",
        };
        return Err(DetectError::WrongModelKind(kind.into()));
    };
    let imp = view.importances();
    let mut ranked: Vec<RankedFeature> =
        feature_names.iter().zip(imp).map(|(n, v)| RankedFeature { name: n.clone(), importance: v }).collect();
    ranked.sort_by(|a, b| b.importance.total_cmp(&a.importance).then_with(|| a.name.cmp(&b.name)));
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    pub importances: Vec<f64>,
    pub threshold: f64,
}

/// Extra-trees feature selection: keep columns whose importance is at least
/// the mean importance.
pub fn select_features(data: &Xy<'_>, n_estimators: usize, seed: u64) -> Result<Selection, DetectError> {
    let forest = Forest::fit(data, ForestKind::Extra, n_estimators, &TreeParams::default(), seed)?;
    let importances = ForestView::new(Arc::new(forest), n_estimators, None).importances();
    let threshold = importances.iter().sum::<f64>() / importances.len().max(1) as f64;
    let (kept, dropped): (Vec<usize>, Vec<usize>) =
        (0..importances.len()).partition(|&j| importances[j] >= threshold - 1e-12);
    Ok(Selection { kept, dropped, importances, threshold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{fit, ModelSpec};

    fn rows(n: usize, informative: impl Fn(usize) -> f64, noise_cols: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let label = (i % 2) as u8;
            let mut r = vec![informative(i) + f64::from(label) * 10.0];
            r.extend((0..noise_cols).map(|j| ((i * 7 + j * 13) % 5) as f64));
            x.push(r);
            y.push(label);
        }
        (x, y)
    }

    #[test]
    fn truncated_tree_equals_depth_limited_tree() {
        let (x, y) = rows(60, |i| (i % 7) as f64, 6);
        let data = Xy::new(&x, &y).unwrap();
        let idx: Vec<usize> = (0..x.len()).collect();
        for kind in [ForestKind::Random, ForestKind::Extra] {
            let full = DecisionTree::fit(&data, &idx, kind, &TreeParams::default(), 5).unwrap();
            for d in 0..4 {
                let params = TreeParams { max_depth: Some(d), ..TreeParams::default() };
                let limited = DecisionTree::fit(&data, &idx, kind, &params, 5).unwrap();
                for r in &x {
                    assert_eq!(full.predict_at_depth(r, Some(d)), limited.predict_at_depth(r, None));
                }
                assert_eq!(full.importances(Some(d)), limited.importances(None));
            }
        }
    }

    #[test]
    fn forest_prefix_equals_smaller_forest() {
        let (x, y) = rows(40, |i| (i % 3) as f64, 4);
        let data = Xy::new(&x, &y).unwrap();
        let big = Forest::fit(&data, ForestKind::Random, 20, &TreeParams::default(), 3).unwrap();
        let small = Forest::fit(&data, ForestKind::Random, 5, &TreeParams::default(), 3).unwrap();
        assert_eq!(&big.trees()[..5], small.trees());
    }

    #[test]
    fn dominant_feature_importance() {
        let (x, y) = rows(80, |_| 0.0, 5);
        let data = Xy::new(&x, &y).unwrap();
        let names: Vec<String> = (0..6).map(|j| format!("f{j}")).collect();
        for spec in [ModelSpec::RandomForest { n_estimators: 30, max_depth: None }, ModelSpec::ExtraTrees { n_estimators: 30, max_depth: None }] {
            let model = fit(&spec, &data, 11).unwrap();
            let ranked = gini_importance(&model, &names, 6).unwrap();
            assert_eq!(ranked[0].name, "f0");
            assert!(ranked[0].importance >= 0.9, "{spec}: {}", ranked[0].importance);
            let sum: f64 = ranked.iter().map(|r| r.importance).sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn importance_needs_forest() {
        let (x, y) = rows(10, |_| 0.0, 1);
        let data = Xy::new(&x, &y).unwrap();
        let model = fit(&ModelSpec::GaussianNb, &data, 0).unwrap();
        assert!(matches!(gini_importance(&model, &[], 3), Err(DetectError::WrongModelKind(_))));
    }

    #[test]
    fn selection_drops_constants() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| {
            let mut r = vec![3.0; 10];
            r[0] = f64::from(i % 2) + f64::from(i % 5) * 0.1;
            r
        }).collect();
        let y: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let data = Xy::new(&x, &y).unwrap();
        let sel = select_features(&data, 50, 1).unwrap();
        assert_eq!(sel.kept, vec![0]);
        assert_eq!(sel.dropped.len(), 9);
    }

    #[test]
    fn selection_keeps_symmetric_features() {
        // two identical informative columns share importance equally up to tree randomness
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![f64::from(i % 2); 2]).collect();
        let y: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let data = Xy::new(&x, &y).unwrap();
        let sel = select_features(&data, 200, 4).unwrap();
        assert!(sel.importances.iter().all(|v| *v > 0.3));
        let single = Xy::new(&x[..], &y).unwrap().subset(&(0..40).collect::<Vec<_>>());
        assert_eq!(single.len(), 40);
        let one_col: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0]]).collect();
        let sel1 = select_features(&Xy::new(&one_col, &y).unwrap(), 10, 4).unwrap();
        assert_eq!(sel1.kept, vec![0]);
    }

    #[test]
    fn forest_fit_is_deterministic() {
        let (x, y) = rows(50, |i| (i % 4) as f64, 8);
        let data = Xy::new(&x, &y).unwrap();
        let a = Forest::fit(&data, ForestKind::Extra, 10, &TreeParams::default(), 77).unwrap();
        let b = Forest::fit(&data, ForestKind::Extra, 10, &TreeParams::default(), 77).unwrap();
        assert_eq!(a, b);
    }
}
