//! Gradient-boosted trees with logistic loss and second-order (Newton)
//! leaf weights: leaf weight = -ΣG/(ΣH + λ), split gain from the same
//! statistics, raw scores capped so degenerate targets stay finite.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learn::sigmoid;
use crate::learn::tree::{fit_tree, ColMatrix, DecisionTree, FitTarget, TreeParams};
use crate::seeding::{derive_seed, Domain};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbtParams {
    pub learning_rate: f64,
    pub n_rounds: usize,
    pub max_depth: usize,
    /// L2 leaf regularization λ.
    pub lambda: f64,
    /// Raw log-odds scores are clamped to ±this bound.
    pub log_odds_cap: f64,
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            learning_rate: 0.3,
            n_rounds: 100,
            max_depth: 6,
            lambda: 1.0,
            log_odds_cap: 15.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GbtModel {
    pub init_log_odds: f64,
    pub trees: Vec<DecisionTree>,
    pub learning_rate: f64,
    pub log_odds_cap: f64,
    /// Training log loss after each boosting round (round 0 = initial).
    pub staged_train_loss: Vec<f64>,
    pub params: GbtParams,
}

fn log_loss(y: &[u8], p: &[f64]) -> f64 {
    let n = y.len() as f64;
    y.iter()
        .zip(p)
        .map(|(&yi, &pi)| {
            let pi = pi.clamp(1e-12, 1.0 - 1e-12);
            if yi == 1 {
                -pi.ln()
            } else {
                -(1.0 - pi).ln()
            }
        })
        .sum::<f64>()
        / n
}

/// Train a boosted model on binary labels.
pub fn fit_gbt(x: &Array2<f64>, y: &[u8], params: &GbtParams) -> Result<GbtModel> {
    let cols = ColMatrix::from_array(x)?;
    let n = cols.n_rows();
    if y.len() != n {
        return Err(Error::Data(format!("label length {} does not match {n} rows", y.len())));
    }
    if y.iter().any(|v| *v > 1) {
        return Err(Error::Data("labels must be 0/1".into()));
    }
    if !(params.learning_rate > 0.0) || params.log_odds_cap <= 0.0 || params.lambda < 0.0 {
        return Err(Error::Config("invalid boosting parameters".into()));
    }

    let pbar = y.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let cap = params.log_odds_cap;
    // Initial log-odds of the base rate, capped for degenerate targets.
    let init_log_odds = if pbar <= 0.0 {
        -cap
    } else if pbar >= 1.0 {
        cap
    } else {
        (pbar / (1.0 - pbar)).ln().clamp(-cap, cap)
    };

    let mut scores = vec![init_log_odds; n];
    let mut probs: Vec<f64> = scores.iter().map(|&s| sigmoid(s)).collect();
    let mut staged = vec![log_loss(y, &probs)];
    let mut trees = Vec::with_capacity(params.n_rounds);
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];

    for round in 0..params.n_rounds {
        for i in 0..n {
            let p = probs[i];
            grad[i] = p - y[i] as f64;
            hess[i] = (p * (1.0 - p)).max(1e-16);
        }
        let tp = TreeParams {
            max_depth: Some(params.max_depth),
            seed: derive_seed(params.seed, Domain::Gbt, round as u64),
            ..Default::default()
        };
        let tree = fit_tree(
            &cols,
            FitTarget::Newton { grad: &grad, hess: &hess, lambda: params.lambda },
            None,
            &tp,
        )?;
        for (i, row) in x.rows().into_iter().enumerate() {
            let w = tree.predict_row(row.as_slice().expect("row-major"));
            scores[i] = (scores[i] + params.learning_rate * w).clamp(-cap, cap);
            probs[i] = sigmoid(scores[i]);
        }
        staged.push(log_loss(y, &probs));
        trees.push(tree);
    }

    Ok(GbtModel {
        init_log_odds,
        trees,
        learning_rate: params.learning_rate,
        log_odds_cap: cap,
        staged_train_loss: staged,
        params: params.clone(),
    })
}

impl GbtModel {
    pub fn predict_proba(&self, x: &Array2<f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|row| {
                let row = row.as_slice().expect("row-major");
                let mut s = self.init_log_odds;
                for t in &self.trees {
                    s = (s + self.learning_rate * t.predict_row(row))
                        .clamp(-self.log_odds_cap, self.log_odds_cap);
                }
                sigmoid(s)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn line_data(n: usize) -> (Array2<f64>, Vec<u8>) {
        let flat: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y: Vec<u8> = (0..n).map(|i| (i >= n / 2) as u8).collect();
        (Array2::from_shape_vec((n, 1), flat).unwrap(), y)
    }

    #[test]
    fn constant_positive_target_saturates() {
        let x = Array2::from_shape_vec((5, 1), vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = vec![1u8; 5];
        let m = fit_gbt(&x, &y, &GbtParams { n_rounds: 3, ..Default::default() }).unwrap();
        assert_eq!(m.init_log_odds, 15.0);
        for p in m.predict_proba(&x) {
            assert!(p >= 0.99, "saturated prediction {p}");
        }
    }

    #[test]
    fn zero_rounds_predicts_base_rate() {
        let (x, y) = line_data(10);
        let m = fit_gbt(&x, &y, &GbtParams { n_rounds: 0, ..Default::default() }).unwrap();
        for p in m.predict_proba(&x) {
            assert!((p - 0.5).abs() < 1e-12);
        }
        let y_skew = vec![0u8, 0, 0, 0, 0, 0, 0, 0, 1, 1];
        let m = fit_gbt(&x, &y_skew, &GbtParams { n_rounds: 0, ..Default::default() }).unwrap();
        assert!((m.predict_proba(&x)[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn separable_data_drives_loss_down() {
        let (x, y) = line_data(60);
        let m = fit_gbt(&x, &y, &GbtParams { n_rounds: 50, ..Default::default() }).unwrap();
        let final_loss = *m.staged_train_loss.last().unwrap();
        assert!(final_loss < 0.1, "training log loss {final_loss}");
    }

    #[test]
    fn training_loss_is_monotone_nonincreasing() {
        // Noisy two-feature problem.
        let n = 120;
        let mut flat = Vec::with_capacity(n * 2);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let a = ((i * 37) % 100) as f64 / 100.0;
            let b = ((i * 61) % 83) as f64 / 83.0;
            flat.push(a);
            flat.push(b);
            y.push(((a + 0.3 * b + 0.13 * ((i * 17 % 7) as f64 / 7.0)) > 0.6) as u8);
        }
        let x = Array2::from_shape_vec((n, 2), flat).unwrap();
        let m = fit_gbt(&x, &y, &GbtParams { n_rounds: 40, ..Default::default() }).unwrap();
        for w in m.staged_train_loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "loss increased: {} -> {}", w[0], w[1]);
        }
    }
}
