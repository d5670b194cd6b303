//! Random forest of CART classifiers with Gini feature importance.
//!
//! Each tree trains on a bootstrap sample of size n with per-tree seeds
//! derived from the forest seed, and considers floor(sqrt(d)) random
//! features per split. Probabilities are the fixed-order mean of leaf
//! class fractions, so predictions are identical for any thread count.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learn::tree::{fit_tree, ColMatrix, DecisionTree, FitTarget, TreeParams};
use crate::seeding::{derive_seed, rng_for, Domain};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_estimators: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_estimators: 100,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_depth: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    pub tree_seeds: Vec<u64>,
    pub n_features: usize,
    /// floor(sqrt(d)), recorded at fit time.
    pub max_features: usize,
    pub params: ForestParams,
}

/// Train a forest on binary labels.
pub fn fit_forest(x: &Array2<f64>, y: &[u8], params: &ForestParams) -> Result<ForestModel> {
    if params.n_estimators == 0 {
        return Err(Error::Config("n_estimators must be positive".into()));
    }
    let cols = ColMatrix::from_array(x)?;
    if y.len() != cols.n_rows() {
        return Err(Error::Data(format!(
            "label length {} does not match {} rows",
            y.len(),
            cols.n_rows()
        )));
    }
    let d = cols.n_cols();
    let n = cols.n_rows();
    let max_features = ((d as f64).sqrt().floor() as usize).clamp(1, d);

    let tree_seeds: Vec<u64> =
        (0..params.n_estimators).map(|t| derive_seed(params.seed, Domain::Tree, t as u64)).collect();

    let trees: Vec<DecisionTree> = tree_seeds
        .par_iter()
        .enumerate()
        .map(|(t, &tree_seed)| {
            let mut rng = rng_for(params.seed, Domain::Tree, t as u64);
            let rows: Vec<u32> = (0..n).map(|_| rng.random_range(0..n) as u32).collect();
            let tp = TreeParams {
                min_samples_split: params.min_samples_split,
                min_samples_leaf: params.min_samples_leaf,
                max_depth: params.max_depth,
                max_features: Some(max_features),
                seed: tree_seed,
            };
            fit_tree(&cols, FitTarget::Labels(y), Some(&rows), &tp)
        })
        .collect::<Result<_>>()?;

    Ok(ForestModel { trees, tree_seeds, n_features: d, max_features, params: params.clone() })
}

impl ForestModel {
    /// Positive-class probability per row: mean over trees, in tree order.
    pub fn predict_proba(&self, x: &Array2<f64>) -> Vec<f64> {
        let inv = 1.0 / self.trees.len() as f64;
        x.rows()
            .into_iter()
            .map(|row| {
                let row = row.as_slice().expect("row-major");
                let sum: f64 = self.trees.iter().map(|t| t.predict_row(row)).sum();
                sum * inv
            })
            .collect()
    }

    /// Mean decrease in impurity (Gini importance), normalized to sum to 1.
    pub fn feature_importance(&self) -> Result<Vec<f64>> {
        if self.trees.is_empty() {
            return Err(Error::Computation("untrained forest: no trees".into()));
        }
        let mut acc = vec![0.0; self.n_features];
        for tree in &self.trees {
            for (j, v) in tree.feature_decreases().into_iter().enumerate() {
                acc[j] += v;
            }
        }
        let n_trees = self.trees.len() as f64;
        for v in acc.iter_mut() {
            *v /= n_trees;
        }
        let total: f64 = acc.iter().sum();
        if total <= 0.0 {
            return Err(Error::Computation(
                "forest contains no splits; importance undefined".into(),
            ));
        }
        for v in acc.iter_mut() {
            *v /= total;
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::{rng_for, Domain};
    use ndarray::Array2;
    use rand::Rng;

    /// Two Gaussian blobs separated along a linear direction.
    fn blobs(n: usize, seed: u64, gap: f64) -> (Array2<f64>, Vec<u8>) {
        let mut rng = rng_for(seed, Domain::Split, 77);
        let mut flat = Vec::with_capacity(n * 3);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 2) as u8;
            let center = if label == 1 { gap } else { -gap };
            for _ in 0..3 {
                let u: f64 = rng.random_range(-1.0..1.0);
                flat.push(center + u);
            }
            y.push(label);
        }
        (Array2::from_shape_vec((n, 3), flat).unwrap(), y)
    }

    #[test]
    fn separable_data_high_holdout_accuracy() {
        let (xtr, ytr) = blobs(300, 1, 1.6);
        let (xte, yte) = blobs(200, 2, 1.6);
        let model =
            fit_forest(&xtr, &ytr, &ForestParams { n_estimators: 50, seed: 3, ..Default::default() })
                .unwrap();
        let probs = model.predict_proba(&xte);
        let correct = probs
            .iter()
            .zip(&yte)
            .filter(|(p, y)| (**p >= 0.5) == (**y == 1))
            .count();
        let acc = correct as f64 / yte.len() as f64;
        assert!(acc >= 0.95, "held-out accuracy {acc}");
    }

    #[test]
    fn single_tree_forest_equals_tree() {
        let (x, y) = blobs(80, 5, 1.0);
        let params = ForestParams { n_estimators: 1, seed: 9, ..Default::default() };
        let forest = fit_forest(&x, &y, &params).unwrap();
        let probs = forest.predict_proba(&x);
        let direct: Vec<f64> = forest.trees[0].predict(&x);
        assert_eq!(probs, direct);
    }

    #[test]
    fn pure_leaf_rows_memorized() {
        // Fully grown trees end in pure leaves: any tree's prediction for a
        // row inside its bootstrap is exactly that row's class, so every
        // per-tree prediction is 0 or 1 and in-bag rows dominate.
        let x = Array2::from_shape_vec((20, 1), (0..20).map(|i| i as f64).collect()).unwrap();
        let y: Vec<u8> = (0..20).map(|i| (i >= 10) as u8).collect();
        let forest =
            fit_forest(&x, &y, &ForestParams { n_estimators: 30, seed: 2, ..Default::default() })
                .unwrap();
        for tree in &forest.trees {
            for p in tree.predict(&x) {
                assert!(p == 0.0 || p == 1.0, "non-pure leaf value {p}");
            }
        }
        let probs = forest.predict_proba(&x);
        assert!(probs[19] > 0.8, "memorized positive row got {}", probs[19]);
        assert!(probs[0] < 0.2, "memorized negative row got {}", probs[0]);
    }

    #[test]
    fn probabilities_in_unit_interval() {
        let (x, y) = blobs(120, 8, 0.3);
        let forest =
            fit_forest(&x, &y, &ForestParams { n_estimators: 20, seed: 1, ..Default::default() })
                .unwrap();
        for p in forest.predict_proba(&x) {
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn variance_shrinks_with_more_trees() {
        // Variance across forest seeds of the probability at a fixed point
        // shrinks as the ensemble grows.
        let (x, y) = blobs(150, 4, 0.5);
        let probe = Array2::from_shape_vec((1, 3), vec![0.1, -0.2, 0.3]).unwrap();
        let spread = |n_estimators: usize| -> f64 {
            let preds: Vec<f64> = (0..12)
                .map(|seed| {
                    let m = fit_forest(
                        &x,
                        &y,
                        &ForestParams { n_estimators, seed, ..Default::default() },
                    )
                    .unwrap();
                    m.predict_proba(&probe)[0]
                })
                .collect();
            let mean = preds.iter().sum::<f64>() / preds.len() as f64;
            preds.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / preds.len() as f64
        };
        let v10 = spread(10);
        let v100 = spread(100);
        assert!(v100 < v10, "variance did not shrink: 10 trees {v10}, 100 trees {v100}");
    }

    #[test]
    fn importance_finds_the_signal_feature() {
        // Feature 1 carries the signal; 0 and 2 are noise.
        let mut rng = rng_for(31, Domain::Split, 1);
        let n = 200;
        let mut flat = Vec::with_capacity(n * 3);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 2) as u8;
            flat.push(rng.random_range(-1.0..1.0));
            flat.push(label as f64 * 2.0 - 1.0 + rng.random_range(-0.3..0.3));
            flat.push(rng.random_range(-1.0..1.0));
            y.push(label);
        }
        let x = Array2::from_shape_vec((n, 3), flat).unwrap();
        let forest =
            fit_forest(&x, &y, &ForestParams { n_estimators: 40, seed: 6, ..Default::default() })
                .unwrap();
        let imp = forest.feature_importance().unwrap();
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(imp.iter().all(|v| *v >= 0.0));
        assert!(imp[1] > imp[0] && imp[1] > imp[2], "importances {imp:?}");
    }

    #[test]
    fn one_feature_importance_is_one() {
        let x = Array2::from_shape_vec((6, 1), vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let y = vec![0u8, 0, 0, 1, 1, 1];
        let forest =
            fit_forest(&x, &y, &ForestParams { n_estimators: 10, seed: 3, ..Default::default() })
                .unwrap();
        let imp = forest.feature_importance().unwrap();
        assert_eq!(imp.len(), 1);
        assert!((imp[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fit_is_deterministic_per_seed() {
        let (x, y) = blobs(100, 12, 0.8);
        let p = ForestParams { n_estimators: 8, seed: 42, ..Default::default() };
        let a = fit_forest(&x, &y, &p).unwrap();
        let b = fit_forest(&x, &y, &p).unwrap();
        assert_eq!(a.trees, b.trees);
    }
}
