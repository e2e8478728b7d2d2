//! L2-regularized logistic regression fitted with L-BFGS.
//!
//! Features are standardized on the training data. The objective is
//! `0.5 * |w|^2 + C * sum(log(1 + exp(-s_i * z_i)))` with `s_i` in {-1, +1}
//! and an unpenalized intercept.

use std::collections::VecDeque;

use super::{Classifier, DetectError, Xy};

const MAX_ITER: usize = 500;
const MEMORY: usize = 10;
const GRAD_TOL: f64 = 1e-6;

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The training objective over standardized data; parameters are the
/// weights followed by the intercept.
pub struct LogisticObjective {
    pub x: Vec<Vec<f64>>,
    pub sign: Vec<f64>,
    pub c: f64,
}

impl LogisticObjective {
    pub fn new(x: Vec<Vec<f64>>, labels: &[u8], c: f64) -> Self {
        let sign = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        Self { x, sign, c }
    }

    pub fn dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len) + 1
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let (w, b) = theta.split_at(theta.len() - 1);
        let reg = 0.5 * dot(w, w);
        let loss: f64 = self.x.iter().zip(&self.sign).map(|(x, s)| log1p_exp(-s * (dot(w, x) + b[0]))).sum();
        reg + self.c * loss
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let (w, b) = theta.split_at(theta.len() - 1);
        let mut g: Vec<f64> = w.to_vec();
        g.push(0.0);
        let last = g.len() - 1;
        for (x, s) in self.x.iter().zip(&self.sign) {
            let z = dot(w, x) + b[0];
            let coef = -self.c * s * sigmoid(-s * z);
            for (gj, xj) in g.iter_mut().zip(x) {
                *gj += coef * xj;
            }
            g[last] += coef;
        }
        g
    }

    /// Minimizes the objective from zero; returns the parameters and the
    /// number of iterations used.
    pub fn minimize(&self) -> (Vec<f64>, usize) {
        let n = self.dim();
        let mut theta = vec![0.0; n];
        let mut f = self.value(&theta);
        let mut g = self.gradient(&theta);
        let g0 = g.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
        let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
        for iter in 0..MAX_ITER {
            if g.iter().map(|v| v.abs()).fold(0.0, f64::max) <= GRAD_TOL * g0 {
                return (theta, iter);
            }
            // two-loop recursion
            let mut q = g.clone();
            let mut alphas = Vec::with_capacity(history.len());
            for (s, y, rho) in history.iter().rev() {
                let a = rho * dot(s, &q);
                q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
                alphas.push(a);
            }
            let gamma = history.back().map_or(1.0 / g0, |(s, y, _)| dot(s, y) / dot(y, y));
            q.iter_mut().for_each(|v| *v *= gamma);
            for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
                let beta = rho * dot(y, &q);
                q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - beta) * si);
            }
            let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
            let mut slope = dot(&g, &dir);
            if slope >= 0.0 {
                dir = g.iter().map(|v| -v).collect();
                slope = dot(&g, &dir);
                history.clear();
            }
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
                let fc = self.value(&cand);
                if fc <= f + 1e-4 * step * slope {
                    accepted = Some((cand, fc));
                    break;
                }
                step *= 0.5;
            }
            let Some((next, fnext)) = accepted else {
                return (theta, iter);
            };
            let gnext = self.gradient(&next);
            let s: Vec<f64> = next.iter().zip(&theta).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gnext.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy = dot(&s, &y);
            if sy > 1e-12 {
                if history.len() == MEMORY {
                    history.pop_front();
                }
                history.push_back((s, y, 1.0 / sy));
            }
            let converged = (f - fnext).abs() <= 1e-12 * f.abs().max(1.0);
            theta = next;
            f = fnext;
            g = gnext;
            if converged {
                return (theta, iter + 1);
            }
        }
        (theta, MAX_ITER)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
}

pub(crate) fn standardizer(data: &Xy<'_>) -> (Vec<f64>, Vec<f64>) {
    let width = data.width();
    let n = data.len() as f64;
    let mut center = vec![0.0; width];
    for x in &data.x {
        center.iter_mut().zip(x.iter()).for_each(|(c, v)| *c += v / n);
    }
    let mut scale = vec![0.0; width];
    for x in &data.x {
        for j in 0..width {
            let d = x[j] - center[j];
            scale[j] += d * d / n;
        }
    }
    scale.iter_mut().for_each(|s| *s = if *s > 0.0 { s.sqrt() } else { 1.0 });
    (center, scale)
}

impl LogisticModel {
    pub fn fit(data: &Xy<'_>, c: f64) -> Result<Self, DetectError> {
        data.require_both_classes()?;
        let (center, scale) = standardizer(data);
        let x: Vec<Vec<f64>> = data
            .x
            .iter()
            .map(|row| row.iter().zip(&center).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
            .collect();
        let objective = LogisticObjective::new(x, &data.y, c);
        let (mut theta, iterations) = objective.minimize();
        let intercept = theta.pop().expect("intercept");
        Ok(Self { center, scale, weights: theta, intercept, iterations })
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        let terms = self.weights.iter().zip(x).zip(self.center.iter().zip(&self.scale));
        self.intercept + terms.map(|((w, v), (m, s))| w * (v - m) / s).sum::<f64>()
    }
}

impl Classifier for LogisticModel {
    fn predict_proba(&self, x: &[f64]) -> f64 {
        sigmoid(self.decision(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn separable() -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            let t = f64::from(i);
            rows.push(vec![t * 0.3, 1.0 + t * 0.2]);
            labels.push(1);
            rows.push(vec![t * 0.3 + 0.5, -1.0 + t * 0.2]);
            labels.push(0);
        }
        (rows, labels)
    }

    #[test]
    fn separable_fixture_is_fit_exactly() {
        let (rows, labels) = separable();
        let data = Xy::new(&rows, &labels).unwrap();
        let m = LogisticModel::fit(&data, 10.0).unwrap();
        let pred: Vec<u8> = rows.iter().map(|r| u8::from(m.predict_proba(r) >= 0.5)).collect();
        assert_eq!(pred, labels);
    }

    #[test]
    fn stronger_regularization_shrinks_weights() {
        let (rows, labels) = separable();
        let data = Xy::new(&rows, &labels).unwrap();
        let strong = LogisticModel::fit(&data, 0.01).unwrap();
        let weak = LogisticModel::fit(&data, 10.0).unwrap();
        let norm = |m: &LogisticModel| dot(&m.weights, &m.weights);
        assert!(norm(&strong) < norm(&weak));
    }

    #[test]
    fn optimum_has_small_gradient() {
        let (rows, labels) = separable();
        let obj = LogisticObjective::new(rows, &labels, 0.1);
        let (theta, _) = obj.minimize();
        let g = obj.gradient(&theta);
        assert!(g.iter().all(|v| v.abs() < 1e-4), "{g:?}");
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences(
            pts in proptest::collection::vec((-2.0f64..2.0, -2.0f64..2.0, any::<bool>()), 3..12),
            theta in proptest::collection::vec(-1.5f64..1.5, 3),
            c in 0.01f64..10.0
        ) {
            let x: Vec<Vec<f64>> = pts.iter().map(|(a, b, _)| vec![*a, *b]).collect();
            let y: Vec<u8> = pts.iter().map(|(_, _, l)| u8::from(*l)).collect();
            let obj = LogisticObjective::new(x, &y, c);
            let g = obj.gradient(&theta);
            for j in 0..theta.len() {
                let h = 1e-5;
                let mut up = theta.clone();
                let mut down = theta.clone();
                up[j] += h;
                down[j] -= h;
                let fd = (obj.value(&up) - obj.value(&down)) / (2.0 * h);
                let rel = (fd - g[j]).abs() / g[j].abs().max(1.0);
                prop_assert!(rel < 1e-6, "component {}: analytic {} numeric {}", j, g[j], fd);
            }
        }
    }
}
