//! CART decision trees grown to purity.
//!
//! One grower serves three split criteria: Gini impurity (classification),
//! variance (regression) and a second-order Newton gain (boosting stages).
//! Candidate thresholds are midpoints between consecutive distinct sorted
//! feature values. Ties in impurity decrease resolve to the lowest feature
//! index, then the lowest threshold, so fitting is fully deterministic.
//!
//! Growth uses per-feature presorted row indices that are stably partitioned
//! at every split, keeping each node's work linear in its row count.

use ndarray::Array2;
use rand::seq::index::sample as index_sample;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MIN_DECREASE: f64 = 1e-12;

/// Column-major copy of a feature matrix, validated finite once so repeated
/// tree fits (forests, boosting rounds, bootstrap replicates) skip the scan.
#[derive(Debug, Clone)]
pub struct ColMatrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl ColMatrix {
    pub fn from_array(x: &Array2<f64>) -> Result<Self> {
        let (n_rows, n_cols) = (x.nrows(), x.ncols());
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::Data("empty feature matrix".into()));
        }
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for j in 0..n_cols {
            for i in 0..n_rows {
                let v = x[(i, j)];
                if !v.is_finite() {
                    return Err(Error::Data(format!(
                        "non-finite feature value at row {i}, column {j}"
                    )));
                }
                data.push(v);
            }
        }
        Ok(ColMatrix { n_rows, n_cols, data })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.n_rows..(j + 1) * self.n_rows]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeMode {
    /// Leaves hold the positive-class fraction.
    Classifier,
    /// Leaves hold the mean target (or a Newton leaf weight for boosting).
    Regressor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: u32,
        right: u32,
        n: u32,
        /// Impurity decrease weighted by the node's sample fraction
        /// (relative to the tree's root), for Gini importance.
        decrease: f64,
    },
    Leaf { value: f64, n: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub mode: TreeMode,
    pub n_features: usize,
    pub nodes: Vec<Node>,
}

/// Fitting targets for the three criteria.
#[derive(Debug, Clone, Copy)]
pub enum FitTarget<'a> {
    /// Binary labels, Gini criterion.
    Labels(&'a [u8]),
    /// Continuous targets, variance criterion.
    Values(&'a [f64]),
    /// Per-row gradient/hessian pairs; leaf weight -G/(H+lambda), split by
    /// second-order gain.
    Newton { grad: &'a [f64], hess: &'a [f64], lambda: f64 },
}

#[derive(Debug, Clone)]
pub struct TreeParams {
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
    /// Features considered per split; `None` means all.
    pub max_features: Option<usize>,
    /// Seeds the per-node feature subsampling (unused when all features are
    /// considered).
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_depth: None,
            max_features: None,
            seed: 0,
        }
    }
}

trait Targets {
    /// Accumulate row `r` into the two running sums.
    fn add(&self, r: u32, a: &mut f64, b: &mut f64);
    /// n-weighted impurity score; split decrease = parent - left - right.
    fn score(&self, n: f64, a: f64, b: f64) -> f64;
    fn leaf(&self, n: f64, a: f64, b: f64) -> f64;
    fn is_pure(&self, n: f64, a: f64, b: f64) -> bool;
    /// Whether zero-decrease splits are taken (classification and regression
    /// keep splitting to purity; boosting stages require positive gain).
    fn allow_zero_decrease(&self) -> bool;
    fn validate(&self, n_rows: usize) -> Result<()>;
}

struct GiniTargets<'a> {
    y: &'a [u8],
}

impl Targets for GiniTargets<'_> {
    #[inline]
    fn add(&self, r: u32, a: &mut f64, _b: &mut f64) {
        *a += self.y[r as usize] as f64;
    }

    #[inline]
    fn score(&self, n: f64, a: f64, _b: f64) -> f64 {
        // n * gini = n * 2p(1-p) with p = a/n.
        2.0 * a * (n - a) / n
    }

    fn leaf(&self, n: f64, a: f64, _b: f64) -> f64 {
        a / n
    }

    fn is_pure(&self, n: f64, a: f64, _b: f64) -> bool {
        a == 0.0 || a == n
    }

    fn allow_zero_decrease(&self) -> bool {
        true
    }

    fn validate(&self, n_rows: usize) -> Result<()> {
        if self.y.len() != n_rows {
            return Err(Error::Data(format!(
                "label length {} does not match {} rows",
                self.y.len(),
                n_rows
            )));
        }
        if let Some(v) = self.y.iter().find(|v| **v > 1) {
            return Err(Error::Data(format!("labels must be 0/1, found {v}")));
        }
        Ok(())
    }
}

struct VarTargets<'a> {
    y: &'a [f64],
}

impl Targets for VarTargets<'_> {
    #[inline]
    fn add(&self, r: u32, a: &mut f64, b: &mut f64) {
        let v = self.y[r as usize];
        *a += v;
        *b += v * v;
    }

    #[inline]
    fn score(&self, n: f64, a: f64, b: f64) -> f64 {
        // Sum of squared deviations.
        (b - a * a / n).max(0.0)
    }

    fn leaf(&self, n: f64, a: f64, _b: f64) -> f64 {
        a / n
    }

    fn is_pure(&self, n: f64, a: f64, b: f64) -> bool {
        self.score(n, a, b) <= MIN_DECREASE
    }

    fn allow_zero_decrease(&self) -> bool {
        true
    }

    fn validate(&self, n_rows: usize) -> Result<()> {
        if self.y.len() != n_rows {
            return Err(Error::Data(format!(
                "target length {} does not match {} rows",
                self.y.len(),
                n_rows
            )));
        }
        if self.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite regression target".into()));
        }
        Ok(())
    }
}

struct NewtonTargets<'a> {
    grad: &'a [f64],
    hess: &'a [f64],
    lambda: f64,
}

impl Targets for NewtonTargets<'_> {
    #[inline]
    fn add(&self, r: u32, a: &mut f64, b: &mut f64) {
        *a += self.grad[r as usize];
        *b += self.hess[r as usize];
    }

    #[inline]
    fn score(&self, _n: f64, a: f64, b: f64) -> f64 {
        // Negated per-node objective, so decrease equals the usual gain:
        // 1/2 [GL^2/(HL+l) + GR^2/(HR+l) - G^2/(H+l)].
        -0.5 * a * a / (b + self.lambda)
    }

    fn leaf(&self, _n: f64, a: f64, b: f64) -> f64 {
        -a / (b + self.lambda)
    }

    fn is_pure(&self, _n: f64, _a: f64, _b: f64) -> bool {
        false
    }

    fn allow_zero_decrease(&self) -> bool {
        false
    }

    fn validate(&self, n_rows: usize) -> Result<()> {
        if self.grad.len() != n_rows || self.hess.len() != n_rows {
            return Err(Error::Data("gradient/hessian length mismatch".into()));
        }
        if self.grad.iter().chain(self.hess).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite gradient statistics".into()));
        }
        Ok(())
    }
}

/// Fit a tree on `x` (optionally restricted to `rows`, with multiplicity).
pub fn fit_tree(
    x: &ColMatrix,
    target: FitTarget<'_>,
    rows: Option<&[u32]>,
    params: &TreeParams,
) -> Result<DecisionTree> {
    match target {
        FitTarget::Labels(y) => {
            let t = GiniTargets { y };
            t.validate(x.n_rows())?;
            grow(x, &t, rows, params, TreeMode::Classifier)
        }
        FitTarget::Values(y) => {
            let t = VarTargets { y };
            t.validate(x.n_rows())?;
            grow(x, &t, rows, params, TreeMode::Regressor)
        }
        FitTarget::Newton { grad, hess, lambda } => {
            let t = NewtonTargets { grad, hess, lambda };
            t.validate(x.n_rows())?;
            grow(x, &t, rows, params, TreeMode::Regressor)
        }
    }
}

struct Work {
    /// Flat feature-major presorted rows: `sorted[j*m..(j+1)*m]` is this
    /// node's rows ordered by feature j.
    sorted: Vec<u32>,
    m: usize,
    depth: usize,
    slot: usize,
}

fn grow<T: Targets>(
    x: &ColMatrix,
    targets: &T,
    rows: Option<&[u32]>,
    params: &TreeParams,
    mode: TreeMode,
) -> Result<DecisionTree> {
    let d = x.n_cols();
    let owned_rows: Vec<u32>;
    let rows: &[u32] = match rows {
        Some(r) => {
            if r.iter().any(|&i| (i as usize) >= x.n_rows()) {
                return Err(Error::Data("row index out of range".into()));
            }
            r
        }
        None => {
            owned_rows = (0..x.n_rows() as u32).collect();
            &owned_rows
        }
    };
    let m = rows.len();
    if m == 0 {
        return Err(Error::Data("no rows to fit".into()));
    }

    // Presort per feature once; splits partition these stably.
    let mut sorted = Vec::with_capacity(d * m);
    for j in 0..d {
        let col = x.col(j);
        let mut idx: Vec<u32> = rows.to_vec();
        idx.sort_unstable_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]));
        sorted.extend_from_slice(&idx);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n_root = m as f64;
    let mut nodes: Vec<Node> = vec![Node::Leaf { value: 0.0, n: 0 }];
    let mut side = vec![false; x.n_rows()];
    let mut stack = vec![Work { sorted, m, depth: 0, slot: 0 }];
    let mut feat_buf: Vec<usize> = Vec::with_capacity(d);

    while let Some(w) = stack.pop() {
        let m = w.m;
        let mf = m as f64;

        // Node statistics from any one feature ordering (first works).
        let (mut a_tot, mut b_tot) = (0.0, 0.0);
        for &r in &w.sorted[..m] {
            targets.add(r, &mut a_tot, &mut b_tot);
        }
        let parent_score = targets.score(mf, a_tot, b_tot);

        let depth_capped = params.max_depth.map(|cap| w.depth >= cap).unwrap_or(false);
        let splittable = m >= params.min_samples_split
            && m >= 2 * params.min_samples_leaf
            && !depth_capped
            && !targets.is_pure(mf, a_tot, b_tot);

        let mut best: Option<(usize, f64, f64)> = None; // (feature, threshold, decrease)
        if splittable {
            feat_buf.clear();
            match params.max_features {
                Some(k) if k < d => {
                    let mut picks = index_sample(&mut rng, d, k).into_vec();
                    picks.sort_unstable();
                    feat_buf.extend(picks);
                }
                _ => feat_buf.extend(0..d),
            }

            let min_keep = if targets.allow_zero_decrease() { -MIN_DECREASE } else { MIN_DECREASE };
            let mut best_dec = f64::NEG_INFINITY;
            for &j in &feat_buf {
                let col = x.col(j);
                let ord = &w.sorted[j * m..(j + 1) * m];
                let (mut a_l, mut b_l) = (0.0, 0.0);
                for i in 0..m - 1 {
                    let r = ord[i];
                    targets.add(r, &mut a_l, &mut b_l);
                    let lo = col[r as usize];
                    let hi = col[ord[i + 1] as usize];
                    if lo >= hi {
                        continue;
                    }
                    let n_l = (i + 1) as f64;
                    let n_r = mf - n_l;
                    if ((i + 1) < params.min_samples_leaf)
                        || ((m - i - 1) < params.min_samples_leaf)
                    {
                        continue;
                    }
                    let dec = parent_score
                        - targets.score(n_l, a_l, b_l)
                        - targets.score(n_r, a_tot - a_l, b_tot - b_l);
                    if dec >= min_keep && dec > best_dec {
                        best_dec = dec;
                        best = Some((j, 0.5 * (lo + hi), dec));
                    }
                }
            }
        }

        match best {
            None => {
                nodes[w.slot] =
                    Node::Leaf { value: targets.leaf(mf, a_tot, b_tot), n: m as u32 };
            }
            Some((feature, threshold, dec)) => {
                let col = x.col(feature);
                let ord = &w.sorted[feature * m..(feature + 1) * m];
                let mut m_left = 0usize;
                for &r in ord {
                    let goes_left = col[r as usize] <= threshold;
                    side[r as usize] = goes_left;
                    if goes_left {
                        m_left += 1;
                    }
                }
                let m_right = m - m_left;

                let mut left_sorted = Vec::with_capacity(d * m_left);
                let mut right_sorted = Vec::with_capacity(d * m_right);
                for j in 0..d {
                    for &r in &w.sorted[j * m..(j + 1) * m] {
                        if side[r as usize] {
                            left_sorted.push(r);
                        } else {
                            right_sorted.push(r);
                        }
                    }
                }

                let left_slot = nodes.len();
                nodes.push(Node::Leaf { value: 0.0, n: 0 });
                let right_slot = nodes.len();
                nodes.push(Node::Leaf { value: 0.0, n: 0 });
                nodes[w.slot] = Node::Split {
                    feature,
                    threshold,
                    left: left_slot as u32,
                    right: right_slot as u32,
                    n: m as u32,
                    decrease: dec.max(0.0) / n_root,
                };
                // Right first: the LIFO stack then grows the left subtree
                // first, keeping RNG consumption in preorder.
                stack.push(Work {
                    sorted: right_sorted,
                    m: m_right,
                    depth: w.depth + 1,
                    slot: right_slot,
                });
                stack.push(Work {
                    sorted: left_sorted,
                    m: m_left,
                    depth: w.depth + 1,
                    slot: left_slot,
                });
            }
        }
    }

    Ok(DecisionTree { mode, n_features: d, nodes })
}

impl DecisionTree {
    /// Leaf value for one feature row.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value, .. } => return *value,
                Node::Split { feature, threshold, left, right, .. } => {
                    at = if row[*feature] <= *threshold { *left as usize } else { *right as usize };
                }
            }
        }
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<f64> {
        x.rows().into_iter().map(|r| self.predict_row(r.as_slice().expect("row-major"))).collect()
    }

    /// Per-feature sum of sample-weighted impurity decreases.
    pub fn feature_decreases(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_features];
        for node in &self.nodes {
            if let Node::Split { feature, decrease, .. } = node {
                out[*feature] += decrease;
            }
        }
        out
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn rec(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => {
                    1 + rec(nodes, *left as usize).max(rec(nodes, *right as usize))
                }
            }
        }
        rec(&self.nodes, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn cm(rows: &[[f64; 2]]) -> ColMatrix {
        let v: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        let arr = Array2::from_shape_vec(
            (rows.len(), 2),
            v.into_iter().flatten().collect(),
        )
        .unwrap();
        ColMatrix::from_array(&arr).unwrap()
    }

    #[test]
    fn pure_root_is_single_leaf() {
        let x = cm(&[[0.0, 1.0], [1.0, 2.0], [2.0, 0.5]]);
        let t = fit_tree(&x, FitTarget::Labels(&[1, 1, 1]), None, &TreeParams::default()).unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.predict_row(&[5.0, 5.0]), 1.0);
    }

    #[test]
    fn separable_threshold_is_depth_one() {
        let x = cm(&[[0.0, 9.0], [1.0, 8.0], [10.0, 7.0], [11.0, 9.5]]);
        let y = [0u8, 0, 1, 1];
        let t = fit_tree(&x, FitTarget::Labels(&y), None, &TreeParams::default()).unwrap();
        assert_eq!(t.depth(), 1);
        for (i, row) in [[0.0, 9.0], [1.0, 8.0], [10.0, 7.0], [11.0, 9.5]].iter().enumerate() {
            assert_eq!(t.predict_row(row), y[i] as f64);
        }
    }

    #[test]
    fn xor_fits_to_purity_with_depth_two() {
        // Hand enumeration: every first split of 4-point XOR has zero Gini
        // decrease; the zero-decrease split is taken and both children then
        // separate perfectly, so training accuracy is 1.0 at depth >= 2.
        let x = cm(&[[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]]);
        let y = [0u8, 1, 1, 0];
        let t = fit_tree(&x, FitTarget::Labels(&y), None, &TreeParams::default()).unwrap();
        assert!(t.depth() >= 2, "depth = {}", t.depth());
        for (row, label) in
            [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]].iter().zip(y.iter())
        {
            assert_eq!(t.predict_row(row), *label as f64);
        }
    }

    #[test]
    fn regression_leaf_is_mean() {
        let x = cm(&[[0.0, 0.0], [0.0, 0.0], [1.0, 0.0]]);
        let y = [1.0, 2.0, 10.0];
        let t = fit_tree(&x, FitTarget::Values(&y), None, &TreeParams::default()).unwrap();
        assert_eq!(t.predict_row(&[0.0, 0.0]), 1.5);
        assert_eq!(t.predict_row(&[1.0, 0.0]), 10.0);
    }

    #[test]
    fn newton_leaf_weight() {
        // Single constant feature: no split possible; leaf = -G/(H+lambda).
        let x = ColMatrix::from_array(&arr2(&[[1.0], [1.0]])).unwrap();
        let t = fit_tree(
            &x,
            FitTarget::Newton { grad: &[-1.0, -1.0], hess: &[0.25, 0.25], lambda: 1.0 },
            None,
            &TreeParams::default(),
        )
        .unwrap();
        assert!((t.predict_row(&[1.0]) - 2.0 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn empty_and_nonfinite_inputs_error() {
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(ColMatrix::from_array(&empty).is_err());
        let bad = arr2(&[[1.0, f64::NAN]]);
        assert!(ColMatrix::from_array(&bad).is_err());
        let x = ColMatrix::from_array(&arr2(&[[1.0], [2.0]])).unwrap();
        assert!(fit_tree(&x, FitTarget::Values(&[1.0, f64::INFINITY]), None, &TreeParams::default())
            .is_err());
        assert!(fit_tree(&x, FitTarget::Labels(&[0, 2]), None, &TreeParams::default()).is_err());
    }

    #[test]
    fn bootstrap_rows_respect_multiplicity() {
        let x = cm(&[[0.0, 0.0], [10.0, 0.0]]);
        // Row 0 three times, row 1 once: leaf fractions reflect weights.
        let t = fit_tree(
            &x,
            FitTarget::Labels(&[0, 1]),
            Some(&[0, 0, 0, 1]),
            &TreeParams { min_samples_split: 5, ..Default::default() },
        )
        .unwrap();
        assert_eq!(t.nodes.len(), 1);
        assert_eq!(t.predict_row(&[0.0, 0.0]), 0.25);
    }

    #[test]
    fn deterministic_under_feature_subsampling() {
        let x = cm(&[
            [0.3, 1.0],
            [0.7, 2.0],
            [1.5, 0.0],
            [2.2, 4.0],
            [3.0, 2.5],
            [4.0, 1.0],
        ]);
        let y = [0u8, 0, 0, 1, 1, 1];
        let p = TreeParams { max_features: Some(1), seed: 99, ..Default::default() };
        let a = fit_tree(&x, FitTarget::Labels(&y), None, &p).unwrap();
        let b = fit_tree(&x, FitTarget::Labels(&y), None, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_never_increases_weighted_impurity() {
        // Weighted child impurity is <= the parent's for every split node.
        let x = cm(&[
            [0.1, 5.0],
            [0.9, 3.0],
            [1.7, 4.0],
            [2.1, 1.0],
            [2.9, 2.0],
            [3.3, 6.0],
            [4.8, 0.5],
            [5.5, 2.5],
        ]);
        let y = [0u8, 1, 0, 0, 1, 1, 0, 1];
        let t = fit_tree(&x, FitTarget::Labels(&y), None, &TreeParams::default()).unwrap();
        for node in &t.nodes {
            if let Node::Split { decrease, .. } = node {
                assert!(*decrease >= 0.0);
            }
        }
        // Fully grown: every training row is predicted exactly.
        for (i, row) in
            [[0.1, 5.0], [0.9, 3.0], [1.7, 4.0], [2.1, 1.0], [2.9, 2.0], [3.3, 6.0], [4.8, 0.5], [5.5, 2.5]]
                .iter()
                .enumerate()
        {
            assert_eq!(t.predict_row(row), y[i] as f64);
        }
    }
}
