//! Logistic regression over the standardized node features: no graph, no history.

use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    /// Full-batch Adam steps on mean binary cross-entropy.
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.05,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub w: Vec<f64>,
    pub b: f64,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl LogisticModel {
    pub fn predict(&self, x: &Tensor) -> Vec<f64> {
        (0..x.rows())
            .map(|i| {
                let dot: f64 = x.row_slice(i).iter().zip(&self.w).map(|(a, b)| a * b).sum();
                sigmoid(dot + self.b)
            })
            .collect()
    }
}

/// Fits `sigmoid(x w + b)` from zero initialisation; deterministic.
pub fn fit_logistic(x: &Tensor, y: &[bool], cfg: &LogisticConfig) -> Result<LogisticModel> {
    let [n, f] = x.shape();
    if n != y.len() || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "{n} feature rows for {} labels",
            y.len()
        )));
    }
    let mut params = ParamStore::default();
    params.insert("w", Tensor::zeros(f, 1))?;
    params.insert("b", Tensor::zeros(1, 1))?;
    let mut state = AdamState::new(&params);
    let adam = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    for _ in 0..cfg.steps {
        let model = LogisticModel {
            w: params.tensor(0).data().to_vec(),
            b: params.tensor(1).item(),
        };
        let p = model.predict(x);
        let mut gw = vec![0.0; f];
        let mut gb = 0.0;
        for (i, (pi, &yi)) in p.iter().zip(y).enumerate() {
            let r = (pi - if yi { 1.0 } else { 0.0 }) / n as f64;
            gb += r;
            for (g, xv) in gw.iter_mut().zip(x.row_slice(i)) {
                *g += r * xv;
            }
        }
        let grads = [Some(Tensor::new(f, 1, gw)?), Some(Tensor::scalar(gb))];
        adam_step(&mut params, &grads, &mut state, &adam)?;
    }
    Ok(LogisticModel {
        w: params.tensor(0).data().to_vec(),
        b: params.tensor(1).item(),
    })
}

fn stack(data: &Dataset, quarters: std::ops::Range<usize>) -> Result<(Tensor, Vec<bool>)> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for t in quarters {
        let s = &data.snapshots[t];
        x.extend_from_slice(s.x.data());
        y.extend_from_slice(&s.labels);
        rows += s.n();
        cols = s.x.cols();
    }
    Ok((Tensor::new(rows, cols, x)?, y))
}

/// Fits on the training quarters and scores the given quarter range, pooled in
/// quarter order. Returns (scores, labels).
pub fn logistic_baseline(
    data: &Dataset,
    train: std::ops::Range<usize>,
    score: std::ops::Range<usize>,
    cfg: &LogisticConfig,
) -> Result<(Vec<f64>, Vec<bool>)> {
    if train.end > data.len() || score.end > data.len() {
        return Err(Error::InvalidArgument(
            "baseline range exceeds the dataset".into(),
        ));
    }
    let (x, y) = stack(data, train)?;
    let model = fit_logistic(&x, &y, cfg)?;
    let (xs, ys) = stack(data, score)?;
    Ok((model.predict(&xs), ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_the_sign_of_a_planted_logit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 2000;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.gen_range(-2.0..2.0);
            let b: f64 = rng.gen_range(-2.0..2.0);
            x.extend([a, b]);
            y.push(rng.gen::<f64>() < sigmoid(2.0 * a - 1.0));
        }
        let x = Tensor::new(n, 2, x).unwrap();
        let m = fit_logistic(&x, &y, &LogisticConfig::default()).unwrap();
        assert!((m.w[0] - 2.0).abs() < 0.4, "{:?}", m);
        assert!(m.w[1].abs() < 0.3, "{:?}", m);
        assert!((m.b + 1.0).abs() < 0.3, "{:?}", m);
        assert_eq!(m, fit_logistic(&x, &y, &LogisticConfig::default()).unwrap());
    }
}
