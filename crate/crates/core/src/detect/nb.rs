use super::{Classifier, DetectError, Xy};

/// Added to every per-class variance so constant features stay finite.
pub const VAR_FLOOR: f64 = 1e-9;

/// Gaussian naive Bayes with per-class, per-feature mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianNb {
    pub log_prior: [f64; 2],
    pub mean: [Vec<f64>; 2],
    pub var: [Vec<f64>; 2],
}

impl GaussianNb {
    pub fn fit(data: &Xy<'_>) -> Result<Self, DetectError> {
        data.require_both_classes()?;
        let width = data.width();
        let mut mean = [vec![0.0; width], vec![0.0; width]];
        let mut var = [vec![0.0; width], vec![0.0; width]];
        let mut count = [0usize; 2];
        for (x, &y) in data.x.iter().zip(&data.y) {
            let c = usize::from(y);
            count[c] += 1;
            for (m, v) in mean[c].iter_mut().zip(x.iter()) {
                *m += v;
            }
        }
        for c in 0..2 {
            mean[c].iter_mut().for_each(|m| *m /= count[c] as f64);
        }
        for (x, &y) in data.x.iter().zip(&data.y) {
            let c = usize::from(y);
            for j in 0..width {
                let d = x[j] - mean[c][j];
                var[c][j] += d * d;
            }
        }
        for c in 0..2 {
            var[c].iter_mut().for_each(|v| *v = *v / count[c] as f64 + VAR_FLOOR);
        }
        let n = data.len() as f64;
        Ok(Self { log_prior: [(count[0] as f64 / n).ln(), (count[1] as f64 / n).ln()], mean, var })
    }

    /// Unnormalized log posterior of class `c`.
    pub fn joint_log_likelihood(&self, x: &[f64], c: usize) -> f64 {
        let mut ll = self.log_prior[c];
        for ((xj, mean), v) in x.iter().zip(&self.mean[c]).zip(&self.var[c]) {
            let (v, d) = (*v, xj - mean);
            ll -= 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + d * d / v);
        }
        ll
    }
}

impl Classifier for GaussianNb {
    fn predict_proba(&self, x: &[f64]) -> f64 {
        let l0 = self.joint_log_likelihood(x, 0);
        let l1 = self.joint_log_likelihood(x, 1);
        1.0 / (1.0 + (l0 - l1).exp())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_point_posterior_by_hand() {
        let rows = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![5.0, 5.0], vec![5.0, 6.0]];
        let data = Xy::new(&rows, &[0, 0, 1, 1]).unwrap();
        let nb = GaussianNb::fit(&data).unwrap();
        // class 0: means (0, 0.5), variances (floor, 0.25 + floor); class 1: means (5, 5.5)
        let (v1, v2) = (VAR_FLOOR, 0.25 + VAR_FLOOR);
        let x = [0.0, 0.5];
        let gauss = |x: f64, m: f64, v: f64| (-(x - m) * (x - m) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        // equal priors; compare in log space to avoid underflow of the class-1 density
        let log0 = gauss(x[0], 0.0, v1).ln() + gauss(x[1], 0.5, v2).ln();
        let log1 = -(25.0) / (2.0 * v1) - 0.5 * (2.0 * std::f64::consts::PI * v1).ln() + gauss(x[1], 5.5, v2).ln();
        let want = 1.0 / (1.0 + (log0 - log1).exp());
        let got = nb.predict_proba(&x);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        assert!(got < 0.5);
        assert!(nb.predict_proba(&[5.0, 5.5]) > 0.5);
    }

    #[test]
    fn constant_features_survive() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 5.0], vec![1.0, 6.0]];
        let data = Xy::new(&rows, &[0, 0, 1, 1]).unwrap();
        let nb = GaussianNb::fit(&data).unwrap();
        let p = nb.predict_proba(&[1.0, 5.5]);
        assert!(p.is_finite() && p > 0.5);
    }
}
