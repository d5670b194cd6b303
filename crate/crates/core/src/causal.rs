//! Doubly-robust AIPW estimation of average treatment effects with
//! propensity clipping and bootstrap confidence intervals.
//!
//! The propensity score comes from a decision-tree classifier and the two
//! potential-outcome regressions from decision-tree regressors, all fully
//! grown by default. Fully grown trees memorize the sample and produce
//! degenerate 0/1 propensities on their own rows; clipping to
//! [0.001, 0.999] is the safeguard. Optional depth caps and K-fold
//! cross-fitting are available behind options.
//!
//! The point estimate is the standard doubly-robust form
//!
//! ```text
//! ATE = mean_i [ mu1(x_i) - mu0(x_i)
//!                + T_i (Y_i - mu1(x_i)) / e(x_i)
//!                - (1 - T_i)(Y_i - mu0(x_i)) / (1 - e(x_i)) ]
//! ```
//!
//! which is consistent if either the propensity model or the outcome models
//! are correctly specified.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::domain::Treatment;
use crate::error::{Error, Result};
use crate::eval::percentile_sorted;
use crate::learn::tree::{fit_tree, ColMatrix, FitTarget, TreeParams};
use crate::pipeline::features::Dataset;
use crate::seeding::{derive_seed, rng_for, Domain};

pub const DEFAULT_CLIP: (f64, f64) = (0.001, 0.999);

/// Covariates, binary treatment and binary outcome for one treatment
/// definition. Treatment-defining columns are removed from the covariates.
#[derive(Debug, Clone)]
pub struct CausalFrame {
    pub treatment: String,
    pub x: Array2<f64>,
    pub t: Vec<u8>,
    pub y: Vec<u8>,
    pub columns: Vec<String>,
}

impl CausalFrame {
    pub fn n(&self) -> usize {
        self.t.len()
    }

    pub fn n_treated(&self) -> usize {
        self.t.iter().filter(|&&v| v == 1).count()
    }

    /// Restrict the frame to the given rows.
    pub fn subset(&self, rows: &[usize]) -> CausalFrame {
        let x = Array2::from_shape_fn((rows.len(), self.x.ncols()), |(i, j)| {
            self.x[(rows[i], j)]
        });
        CausalFrame {
            treatment: self.treatment.clone(),
            x,
            t: rows.iter().map(|&i| self.t[i]).collect(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            columns: self.columns.clone(),
        }
    }
}

/// Columns that define exposure to `treatment` and must leave the
/// covariate matrix.
fn treatment_columns(treatment: Treatment) -> Vec<String> {
    match treatment {
        Treatment::Med(class) => {
            let mut cols = vec![
                format!("med_{}_any", class.as_str()),
                format!("med_{}_total", class.as_str()),
                format!("med_{}_max_daily", class.as_str()),
            ];
            if class == crate::domain::DrugClass::Opioid {
                cols.push("max_daily_mme".into());
            }
            cols
        }
        Treatment::Site(site) => vec![format!("site={}", site.as_str())],
    }
}

/// Build a causal frame from an assembled dataset. T is the treatment's
/// any-given medication flag or site flag; with `dose_threshold` set (opioid
/// analyses), T = 1 iff max_daily_mme >= threshold.
pub fn build_frame(
    dataset: &Dataset,
    treatment: Treatment,
    dose_threshold: Option<f64>,
) -> Result<CausalFrame> {
    if dataset.n_rows() == 0 {
        return Err(Error::Data("cannot build a causal frame from an empty cohort".into()));
    }
    let t_column = match (treatment, dose_threshold) {
        (Treatment::Med(crate::domain::DrugClass::Opioid), Some(_)) => "max_daily_mme".to_string(),
        (Treatment::Med(class), _) => format!("med_{}_any", class.as_str()),
        (Treatment::Site(site), _) => format!("site={}", site.as_str()),
    };
    let t_idx = dataset
        .column_index(&t_column)
        .ok_or_else(|| Error::Data(format!("treatment column {t_column:?} absent from dataset")))?;

    let t: Vec<u8> = dataset
        .x
        .column(t_idx)
        .iter()
        .map(|&v| match dose_threshold {
            Some(thr) => (v >= thr) as u8,
            None => (v != 0.0) as u8,
        })
        .collect();

    let removed = treatment_columns(treatment);
    let keep: Vec<usize> = dataset
        .columns
        .iter()
        .enumerate()
        .filter(|(_, name)| {
            !removed.iter().any(|r| *name == r || name.as_str() == format!("{r}_missing"))
        })
        .map(|(j, _)| j)
        .collect();

    let x = Array2::from_shape_fn((dataset.n_rows(), keep.len()), |(i, j)| {
        dataset.x[(i, keep[j])]
    });
    let columns: Vec<String> = keep.iter().map(|&j| dataset.columns[j].clone()).collect();

    let frame = CausalFrame { treatment: treatment.id(), x, t, y: dataset.y.clone(), columns };
    let n_treated = frame.n_treated();
    if n_treated == 0 || n_treated == frame.n() {
        return Err(Error::Positivity(format!(
            "treatment {} has a single arm ({n_treated} treated of {})",
            frame.treatment,
            frame.n()
        )));
    }
    Ok(frame)
}

#[derive(Debug, Clone)]
pub struct CausalOptions {
    /// Depth cap for the propensity tree (None = fully grown).
    pub propensity_max_depth: Option<usize>,
    /// Depth cap for the outcome trees (None = fully grown).
    pub outcome_max_depth: Option<usize>,
    /// K-fold cross-fitting of both nuisance models (None = off).
    pub cross_fit_folds: Option<usize>,
    pub clip: (f64, f64),
    pub n_boot: usize,
    pub level: f64,
}

impl Default for CausalOptions {
    fn default() -> Self {
        CausalOptions {
            propensity_max_depth: None,
            outcome_max_depth: None,
            cross_fit_folds: None,
            clip: DEFAULT_CLIP,
            n_boot: 1000,
            level: 0.95,
        }
    }
}

/// Point estimate with bootstrap uncertainty. `half_width` is the paper's
/// "±" style (1.96 x replicate standard deviation); `ci_low`/`ci_high` are
/// the percentile interval. Both are emitted because the paper does not say
/// which its "±" is.
#[derive(Debug, Clone, Serialize)]
pub struct CausalEstimate {
    pub treatment: String,
    pub point: f64,
    pub half_width: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_boot: usize,
    pub clip: (f64, f64),
    pub n: usize,
    pub n_treated: usize,
    /// Percentile CI excludes zero.
    pub significant: bool,
    #[serde(skip)]
    pub replicates: Vec<f64>,
}

impl CausalEstimate {
    pub fn from_replicates(
        treatment: String,
        point: f64,
        replicates: Vec<f64>,
        level: f64,
        clip: (f64, f64),
        n: usize,
        n_treated: usize,
    ) -> CausalEstimate {
        let n_boot = replicates.len();
        let mean = replicates.iter().sum::<f64>() / n_boot.max(1) as f64;
        let sd = if n_boot > 1 {
            (replicates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n_boot - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        let mut sorted = replicates.clone();
        sorted.sort_by(f64::total_cmp);
        let alpha = 1.0 - level;
        let (ci_low, ci_high) = if sorted.is_empty() {
            (point, point)
        } else {
            (
                percentile_sorted(&sorted, alpha / 2.0),
                percentile_sorted(&sorted, 1.0 - alpha / 2.0),
            )
        };
        CausalEstimate {
            treatment,
            point,
            half_width: 1.96 * sd,
            ci_low,
            ci_high,
            n_boot,
            clip,
            n,
            n_treated,
            significant: ci_low > 0.0 || ci_high < 0.0,
            replicates,
        }
    }
}

impl std::fmt::Display for CausalEstimate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.point, self.half_width)
    }
}

fn rows_all(n: usize) -> Vec<u32> {
    (0..n as u32).collect()
}

fn check_arms(t: &[u8], rows: &[u32]) -> bool {
    let mut seen = [false, false];
    for &r in rows {
        seen[t[r as usize] as usize] = true;
        if seen[0] && seen[1] {
            return true;
        }
    }
    false
}

/// Fit the propensity tree on the rows (with multiplicity) and return
/// clipped e(x) for every frame row.
fn propensity_on_rows(
    cols: &ColMatrix,
    frame: &CausalFrame,
    rows: &[u32],
    opts: &CausalOptions,
) -> Result<Vec<f64>> {
    if !check_arms(&frame.t, rows) {
        return Err(Error::Positivity(format!(
            "treatment {} has a single arm in this sample",
            frame.treatment
        )));
    }
    let tp = TreeParams { max_depth: opts.propensity_max_depth, ..Default::default() };
    let tree = fit_tree(cols, FitTarget::Labels(&frame.t), Some(rows), &tp)?;
    Ok(frame
        .x
        .rows()
        .into_iter()
        .map(|r| tree.predict_row(r.as_slice().expect("row-major")).clamp(opts.clip.0, opts.clip.1))
        .collect())
}

/// Fit the two outcome regressors (treated rows -> mu1, control -> mu0) and
/// return predictions in [0, 1] for every frame row.
fn outcomes_on_rows(
    cols: &ColMatrix,
    frame: &CausalFrame,
    rows: &[u32],
    opts: &CausalOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let y_f: Vec<f64> = frame.y.iter().map(|&v| v as f64).collect();
    let treated: Vec<u32> = rows.iter().copied().filter(|&r| frame.t[r as usize] == 1).collect();
    let control: Vec<u32> = rows.iter().copied().filter(|&r| frame.t[r as usize] == 0).collect();
    if treated.is_empty() || control.is_empty() {
        return Err(Error::Positivity(format!(
            "treatment {} has an empty arm in this sample",
            frame.treatment
        )));
    }
    let tp = TreeParams { max_depth: opts.outcome_max_depth, ..Default::default() };
    let mu1_tree = fit_tree(cols, FitTarget::Values(&y_f), Some(&treated), &tp)?;
    let mu0_tree = fit_tree(cols, FitTarget::Values(&y_f), Some(&control), &tp)?;
    let predict = |tree: &crate::learn::tree::DecisionTree| -> Vec<f64> {
        frame
            .x
            .rows()
            .into_iter()
            .map(|r| tree.predict_row(r.as_slice().expect("row-major")).clamp(0.0, 1.0))
            .collect()
    };
    Ok((predict(&mu1_tree), predict(&mu0_tree)))
}

/// Propensity scores for the full frame (decision-tree classifier, clipped).
pub fn fit_propensity(frame: &CausalFrame, opts: &CausalOptions) -> Result<Vec<f64>> {
    let cols = ColMatrix::from_array(&frame.x)?;
    propensity_on_rows(&cols, frame, &rows_all(frame.n()), opts)
}

/// Potential-outcome predictions (mu1, mu0) for the full frame.
pub fn fit_outcomes(frame: &CausalFrame, opts: &CausalOptions) -> Result<(Vec<f64>, Vec<f64>)> {
    let cols = ColMatrix::from_array(&frame.x)?;
    outcomes_on_rows(&cols, frame, &rows_all(frame.n()), opts)
}

/// The AIPW formula on precomputed nuisances, averaged over `rows` (with
/// multiplicity). Every propensity must already lie inside `clip`.
pub fn aipw_point_on_rows(
    t: &[u8],
    y: &[u8],
    e: &[f64],
    mu1: &[f64],
    mu0: &[f64],
    rows: &[u32],
    clip: (f64, f64),
) -> Result<f64> {
    let n = t.len();
    if y.len() != n || e.len() != n || mu1.len() != n || mu0.len() != n {
        return Err(Error::Data("AIPW input length mismatch".into()));
    }
    if rows.is_empty() {
        return Err(Error::Data("AIPW over an empty sample".into()));
    }
    let mut acc = 0.0;
    for &r in rows {
        let i = r as usize;
        let (ti, yi) = (t[i] as f64, y[i] as f64);
        let ei = e[i];
        if !(ei >= clip.0 && ei <= clip.1) {
            return Err(Error::Computation(format!(
                "propensity {ei} outside clip bounds [{}, {}]",
                clip.0, clip.1
            )));
        }
        if !(mu1[i].is_finite() && mu0[i].is_finite() && yi.is_finite()) {
            return Err(Error::Computation("non-finite AIPW input".into()));
        }
        acc += mu1[i] - mu0[i] + ti * (yi - mu1[i]) / ei
            - (1.0 - ti) * (yi - mu0[i]) / (1.0 - ei);
    }
    Ok(acc / rows.len() as f64)
}

/// Convenience wrapper over all rows.
pub fn aipw_point(
    t: &[u8],
    y: &[u8],
    e: &[f64],
    mu1: &[f64],
    mu0: &[f64],
    clip: (f64, f64),
) -> Result<f64> {
    aipw_point_on_rows(t, y, e, mu1, mu0, &rows_all(t.len()), clip)
}

fn fold_of(row: u32, folds: usize, seed: u64) -> usize {
    (derive_seed(seed, Domain::Split, row as u64) % folds as u64) as usize
}

/// One AIPW estimate on `rows`, refitting both nuisance models. With
/// cross-fitting, each row's nuisances come from models fit on the other
/// folds.
fn estimate_on_rows(
    cols: &ColMatrix,
    frame: &CausalFrame,
    rows: &[u32],
    opts: &CausalOptions,
    cross_fit_seed: u64,
) -> Result<f64> {
    match opts.cross_fit_folds {
        None | Some(0) | Some(1) => {
            let e = propensity_on_rows(cols, frame, rows, opts)?;
            let (mu1, mu0) = outcomes_on_rows(cols, frame, rows, opts)?;
            aipw_point_on_rows(&frame.t, &frame.y, &e, &mu1, &mu0, rows, opts.clip)
        }
        Some(k) => {
            let mut e = vec![f64::NAN; frame.n()];
            let mut mu1 = vec![f64::NAN; frame.n()];
            let mut mu0 = vec![f64::NAN; frame.n()];
            for fold in 0..k {
                let train: Vec<u32> = rows
                    .iter()
                    .copied()
                    .filter(|&r| fold_of(r, k, cross_fit_seed) != fold)
                    .collect();
                if train.is_empty() {
                    return Err(Error::Data(format!("cross-fit fold {fold} has no training rows")));
                }
                let e_f = propensity_on_rows(cols, frame, &train, opts)?;
                let (mu1_f, mu0_f) = outcomes_on_rows(cols, frame, &train, opts)?;
                for &r in rows.iter().filter(|&&r| fold_of(r, k, cross_fit_seed) == fold) {
                    let i = r as usize;
                    e[i] = e_f[i];
                    mu1[i] = mu1_f[i];
                    mu0[i] = mu0_f[i];
                }
            }
            aipw_point_on_rows(&frame.t, &frame.y, &e, &mu1, &mu0, rows, opts.clip)
        }
    }
}

/// AIPW point estimate with a bootstrap confidence interval. Replicates
/// resample rows with replacement and refit both nuisance models; a
/// replicate drawing a single treatment arm is redrawn (up to 10 tries).
/// Deterministic per seed and thread count.
pub fn aipw_ate(frame: &CausalFrame, seed: u64, opts: &CausalOptions) -> Result<CausalEstimate> {
    let cols = ColMatrix::from_array(&frame.x)?;
    let n = frame.n();
    let all = rows_all(n);
    let point = estimate_on_rows(&cols, frame, &all, opts, seed)?;

    let replicates = bootstrap_replicates(&cols, frame, seed, opts)?;
    Ok(CausalEstimate::from_replicates(
        frame.treatment.clone(),
        point,
        replicates,
        opts.level,
        opts.clip,
        n,
        frame.n_treated(),
    ))
}

fn bootstrap_replicates(
    cols: &ColMatrix,
    frame: &CausalFrame,
    seed: u64,
    opts: &CausalOptions,
) -> Result<Vec<f64>> {
    if opts.n_boot < 2 {
        return Err(Error::Config(format!("n_boot must be >= 2, got {}", opts.n_boot)));
    }
    if !(opts.level > 0.0 && opts.level < 1.0) {
        return Err(Error::Config(format!("level must be in (0, 1), got {}", opts.level)));
    }
    let n = frame.n();
    (0..opts.n_boot)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng_for(seed, Domain::Bootstrap, rep as u64);
            let mut rows: Vec<u32> = Vec::with_capacity(n);
            let mut ok = false;
            for _ in 0..10 {
                rows.clear();
                rows.extend((0..n).map(|_| rng.random_range(0..n) as u32));
                if check_arms(&frame.t, &rows) {
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(Error::Positivity(format!(
                    "bootstrap replicate {rep} kept drawing a single arm (10 retries)"
                )));
            }
            estimate_on_rows(cols, frame, &rows, opts, derive_seed(seed, Domain::Bootstrap, rep as u64))
        })
        .collect()
}

/// Per-group CATE report plus the between-group difference.
#[derive(Debug, Clone, Serialize)]
pub struct CateReport {
    pub group_column: String,
    pub groups: std::collections::BTreeMap<String, CausalEstimate>,
    /// First-listed group minus second (male - female for gender).
    pub difference: CausalEstimate,
}

/// AIPW within gender subgroups, plus a bootstrap CI for the difference of
/// the two subgroup effects (replicates paired by index).
pub fn cate_by_gender(frame: &CausalFrame, seed: u64, opts: &CausalOptions) -> Result<CateReport> {
    cate_by_binary_column(frame, "gender=male", ("male", "female"), seed, opts)
}

pub fn cate_by_binary_column(
    frame: &CausalFrame,
    column: &str,
    names: (&str, &str),
    seed: u64,
    opts: &CausalOptions,
) -> Result<CateReport> {
    let j = frame
        .columns
        .iter()
        .position(|c| c == column)
        .ok_or_else(|| Error::Data(format!("group column {column:?} absent from frame")))?;
    let in_group: Vec<usize> =
        (0..frame.n()).filter(|&i| frame.x[(i, j)] != 0.0).collect();
    let out_group: Vec<usize> =
        (0..frame.n()).filter(|&i| frame.x[(i, j)] == 0.0).collect();
    if in_group.is_empty() || out_group.is_empty() {
        return Err(Error::Data(format!("group column {column:?} does not split the cohort")));
    }

    let sub_a = frame.subset(&in_group);
    let sub_b = frame.subset(&out_group);
    let est_a = aipw_ate(&sub_a, derive_seed(seed, Domain::Cate, 0), opts)?;
    let est_b = aipw_ate(&sub_b, derive_seed(seed, Domain::Cate, 1), opts)?;

    let diff_reps: Vec<f64> = est_a
        .replicates
        .iter()
        .zip(&est_b.replicates)
        .map(|(a, b)| a - b)
        .collect();
    let difference = CausalEstimate::from_replicates(
        format!("{} | {} - {}", frame.treatment, names.0, names.1),
        est_a.point - est_b.point,
        diff_reps,
        opts.level,
        opts.clip,
        frame.n(),
        frame.n_treated(),
    );

    let mut groups = std::collections::BTreeMap::new();
    groups.insert(names.0.to_string(), est_a);
    groups.insert(names.1.to_string(), est_b);
    Ok(CateReport { group_column: column.to_string(), groups, difference })
}
