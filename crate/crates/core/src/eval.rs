//! Train/test splitting, classification metrics and false-negative error
//! analysis.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::domain::SurgerySite;
use crate::error::{Error, Result};
use crate::pipeline::features::LabeledSample;
use crate::seeding::{rng_for, Domain};

/// Linear-interpolation percentile of a pre-sorted slice, q in [0, 1].
pub(crate) fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Metrics at a fixed decision threshold. `auroc` is absent when only one
/// class is present.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auroc: Option<f64>,
    pub confusion: Confusion,
    pub threshold: f64,
}

/// Stratified train/test split of row indices. Per class, round(fraction*n)
/// rows go to train; deterministic per seed; both outputs sorted ascending.
pub fn split_indices(
    labels: &[u8],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    if labels.len() < 2 {
        return Err(Error::Data("need at least 2 rows to split".into()));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in labels.iter().enumerate() {
        if y > 1 {
            return Err(Error::Data(format!("labels must be 0/1, found {y}")));
        }
        by_class[y as usize].push(i);
    }
    if by_class[0].is_empty() || by_class[1].is_empty() {
        return Err(Error::Data("single-class dataset cannot be split with stratification".into()));
    }

    let mut rng = rng_for(seed, Domain::Split, 0);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in &mut by_class {
        use rand::seq::SliceRandom;
        class.shuffle(&mut rng);
        let n_train = (train_fraction * class.len() as f64).round() as usize;
        let n_train = n_train.min(class.len());
        train.extend_from_slice(&class[..n_train]);
        test.extend_from_slice(&class[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// AUROC via the Mann-Whitney rank statistic with midranks for ties:
/// P(score_pos > score_neg) + 0.5 P(tie).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data("scores/labels length mismatch".into()));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Data("AUROC requires both classes".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Data("non-finite score".into()));
    }

    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Midrank for the tie group [i, j] (1-based ranks).
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }

    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Confusion-matrix metrics with "score >= threshold predicts positive".
/// Sensitivity/specificity fall back to 0 when their denominator is empty.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> EvalReport {
    let mut c = Confusion { tp: 0, fp: 0, fn_: 0, tn: 0 };
    for (&s, &y) in scores.iter().zip(labels) {
        let pred = s >= threshold;
        match (pred, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let total = (c.tp + c.fp + c.fn_ + c.tn) as f64;
    let frac = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    EvalReport {
        accuracy: if total == 0.0 { 0.0 } else { (c.tp + c.tn) as f64 / total },
        sensitivity: frac(c.tp, c.tp + c.fn_),
        specificity: frac(c.tn, c.tn + c.fp),
        auroc: auroc(scores, labels).ok(),
        confusion: c,
        threshold,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// ROC curve points at every distinct score threshold (descending), with
/// the (0,0) and (1,1) endpoints.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Vec<RocPoint> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let n_neg = (labels.len() - n_pos as usize) as f64;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint { threshold: f64::INFINITY, tpr: 0.0, fpr: 0.0 }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            tpr: if n_pos > 0.0 { tp / n_pos } else { 0.0 },
            fpr: if n_neg > 0.0 { fp / n_neg } else { 0.0 },
        });
    }
    points
}

#[derive(Debug, Clone, Serialize)]
pub struct QuartileSummary {
    pub n: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl QuartileSummary {
    fn from_values(mut values: Vec<f64>) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        values.sort_by(f64::total_cmp);
        Some(QuartileSummary {
            n: values.len(),
            q1: percentile_sorted(&values, 0.25),
            median: percentile_sorted(&values, 0.50),
            q3: percentile_sorted(&values, 0.75),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FeatureContrast {
    pub positives: QuartileSummary,
    pub false_negatives: Option<QuartileSummary>,
}

/// Profile of the test-set positives a model missed: distribution summaries
/// for the dose/stay features and surgery-site frequency histograms for
/// {all positives} vs {false negatives}.
#[derive(Debug, Clone, Serialize)]
pub struct FnProfile {
    pub n_positives: usize,
    pub n_false_negatives: usize,
    /// True when the model produced no false negatives.
    pub empty: bool,
    pub threshold: f64,
    pub features: BTreeMap<String, FeatureContrast>,
    /// Site -> percentage of the group's site flags; sums to 100 per group.
    pub site_pct_positives: BTreeMap<String, f64>,
    pub site_pct_false_negatives: BTreeMap<String, f64>,
}

/// Per-row inputs for the false-negative analysis. `los_until_discharge` is
/// never a model feature; it exists only for this report.
#[derive(Debug, Clone)]
pub struct FnInputs {
    pub labels: Vec<u8>,
    pub scores: Vec<f64>,
    pub max_daily_mme: Vec<f64>,
    pub los_until_surgery: Vec<f64>,
    pub los_until_discharge: Vec<f64>,
    pub site_flags: Vec<[bool; 10]>,
}

impl FnInputs {
    pub fn from_samples(
        samples: &[LabeledSample],
        scores: &[f64],
        los_until_discharge: &[f64],
    ) -> Result<Self> {
        if samples.len() != scores.len() || samples.len() != los_until_discharge.len() {
            return Err(Error::Data("samples/scores/los length mismatch".into()));
        }
        Ok(FnInputs {
            labels: samples.iter().map(|s| s.label as u8).collect(),
            scores: scores.to_vec(),
            max_daily_mme: samples.iter().map(|s| s.features.max_daily_mme).collect(),
            los_until_surgery: samples.iter().map(|s| s.features.los_until_surgery).collect(),
            los_until_discharge: los_until_discharge.to_vec(),
            site_flags: samples.iter().map(|s| s.features.sites).collect(),
        })
    }

    /// Pull the needed columns out of an assembled feature matrix.
    pub fn from_matrix(
        x: &ndarray::Array2<f64>,
        columns: &[String],
        labels: &[u8],
        scores: &[f64],
        los_until_discharge: &[f64],
    ) -> Result<Self> {
        let col = |name: &str| -> Result<usize> {
            columns
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Data(format!("column {name:?} absent from feature matrix")))
        };
        if x.nrows() != labels.len() || x.nrows() != scores.len()
            || x.nrows() != los_until_discharge.len()
        {
            return Err(Error::Data("matrix/labels/scores/los length mismatch".into()));
        }
        let mme = col("max_daily_mme")?;
        let los = col("los_until_surgery")?;
        let mut site_cols = [0usize; 10];
        for (i, site) in SurgerySite::ALL.iter().enumerate() {
            site_cols[i] = col(&format!("site={}", site.as_str()))?;
        }
        let site_flags = (0..x.nrows())
            .map(|i| {
                let mut flags = [false; 10];
                for (k, &j) in site_cols.iter().enumerate() {
                    flags[k] = x[(i, j)] != 0.0;
                }
                flags
            })
            .collect();
        Ok(FnInputs {
            labels: labels.to_vec(),
            scores: scores.to_vec(),
            max_daily_mme: x.column(mme).to_vec(),
            los_until_surgery: x.column(los).to_vec(),
            los_until_discharge: los_until_discharge.to_vec(),
            site_flags,
        })
    }
}

fn site_histogram(flags: &[[bool; 10]], members: &[usize]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    let mut total = 0.0;
    for site in SurgerySite::ALL {
        counts.insert(format!("site:{}", site.as_str()), 0.0);
    }
    for &i in members {
        for (k, site) in SurgerySite::ALL.iter().enumerate() {
            if flags[i][k] {
                *counts.get_mut(&format!("site:{}", site.as_str())).unwrap() += 1.0;
                total += 1.0;
            }
        }
    }
    if total > 0.0 {
        for v in counts.values_mut() {
            *v = *v * 100.0 / total;
        }
    }
    counts
}

/// Compare all positives against the model's false negatives at the given
/// decision threshold.
pub fn false_negative_analysis(inputs: &FnInputs, threshold: f64) -> Result<FnProfile> {
    let n = inputs.labels.len();
    if inputs.scores.len() != n {
        return Err(Error::Data("labels/scores length mismatch".into()));
    }

    let positives: Vec<usize> = (0..n).filter(|&i| inputs.labels[i] == 1).collect();
    let false_negatives: Vec<usize> =
        positives.iter().copied().filter(|&i| inputs.scores[i] < threshold).collect();

    let mut features = BTreeMap::new();
    for (name, values) in [
        ("max_daily_mme", &inputs.max_daily_mme),
        ("los_until_surgery", &inputs.los_until_surgery),
        ("los_until_discharge", &inputs.los_until_discharge),
    ] {
        let take = |idx: &[usize]| idx.iter().map(|&i| values[i]).collect::<Vec<f64>>();
        if let Some(pos) = QuartileSummary::from_values(take(&positives)) {
            features.insert(
                name.to_string(),
                FeatureContrast {
                    positives: pos,
                    false_negatives: QuartileSummary::from_values(take(&false_negatives)),
                },
            );
        }
    }

    Ok(FnProfile {
        n_positives: positives.len(),
        n_false_negatives: false_negatives.len(),
        empty: false_negatives.is_empty(),
        threshold,
        features,
        site_pct_positives: site_histogram(&inputs.site_flags, &positives),
        site_pct_false_negatives: site_histogram(&inputs.site_flags, &false_negatives),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Gender, Timestamp};
    use crate::pipeline::features::{FeatureVector, MedAggregate};

    /// Brute-force pairwise AUROC oracle: average over all (pos, neg) pairs
    /// of win=1 / tie=0.5 / loss=0. Independent of the rank-based path.
    pub(crate) fn auroc_bruteforce(scores: &[f64], labels: &[u8]) -> f64 {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == 1)
            .map(|(s, _)| *s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &y)| y == 0)
            .map(|(s, _)| *s)
            .collect();
        let mut acc = 0.0;
        for p in &pos {
            for q in &neg {
                acc += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
        acc / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn split_is_exact_stratified_disjoint() {
        let labels: Vec<u8> = [vec![1u8; 10], vec![0u8; 10]].concat();
        let (train, test) = split_indices(&labels, 0.7, 5).unwrap();
        assert_eq!(train.len(), 14);
        assert_eq!(test.len(), 6);
        let count = |idx: &[usize], y: u8| idx.iter().filter(|&&i| labels[i] == y).count();
        assert_eq!(count(&train, 1), 7);
        assert_eq!(count(&train, 0), 7);
        assert_eq!(count(&test, 1), 3);
        assert_eq!(count(&test, 0), 3);
        assert!(train.iter().all(|i| !test.contains(i)));
        // Same seed reproduces; different seed differs.
        let again = split_indices(&labels, 0.7, 5).unwrap();
        assert_eq!((train.clone(), test.clone()), again);
        let other = split_indices(&labels, 0.7, 6).unwrap();
        assert_ne!(train, other.0);
    }

    #[test]
    fn split_rejects_single_class() {
        assert!(split_indices(&[1, 1, 1], 0.7, 1).is_err());
    }

    #[test]
    fn auroc_perfect_separation() {
        let s = [0.9, 0.8, 0.3, 0.2];
        let y = [1, 1, 0, 0];
        assert_eq!(auroc(&s, &y).unwrap(), 1.0);
    }

    #[test]
    fn auroc_all_ties_is_half() {
        assert_eq!(auroc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn auroc_hand_enumerated_quarter() {
        // Pairs (0.1 vs 0.2): 0, (0.1 vs 0.4): 0, (0.3 vs 0.2): 1,
        // (0.3 vs 0.4): 0 -> 1/4.
        let s = [0.1, 0.2, 0.3, 0.4];
        let y = [1, 0, 1, 0];
        assert!((auroc(&s, &y).unwrap() - 0.25).abs() < 1e-12);
        assert!((auroc_bruteforce(&s, &y) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn auroc_single_class_errors() {
        assert!(auroc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn confusion_basic_and_boundary() {
        let r = confusion(&[0.6, 0.4], &[1, 0], 0.5);
        assert_eq!((r.confusion.tp, r.confusion.tn, r.confusion.fp, r.confusion.fn_), (1, 1, 0, 0));
        assert_eq!(r.accuracy, 1.0);
        // Score exactly at the threshold predicts positive.
        let r = confusion(&[0.5], &[1], 0.5);
        assert_eq!(r.confusion.tp, 1);
        // All-zero scores: sensitivity 0, specificity 1.
        let r = confusion(&[0.0, 0.0, 0.0], &[1, 1, 0], 0.5);
        assert_eq!(r.sensitivity, 0.0);
        assert_eq!(r.specificity, 1.0);
    }

    #[test]
    fn confusion_counts_sum_to_n() {
        let s = [0.1, 0.9, 0.4, 0.6, 0.5];
        let y = [0, 1, 1, 0, 1];
        let r = confusion(&s, &y, 0.5);
        assert_eq!(r.confusion.tp + r.confusion.fp + r.confusion.fn_ + r.confusion.tn, 5);
    }

    fn sample(mme: f64, los: f64, site_idx: usize, label: bool) -> LabeledSample {
        let mut sites = [false; 10];
        sites[site_idx] = true;
        LabeledSample {
            admission_id: format!("a{mme}-{los}"),
            features: FeatureVector {
                age: 60.0,
                gender: Gender::Male,
                language_level: "english".into(),
                race_level: "white".into(),
                los_until_surgery: los,
                history: [false; 6],
                sites,
                med: [MedAggregate::default(); 6],
                max_daily_mme: mme,
            },
            label,
            t_cutoff: Timestamp(0),
        }
    }

    #[test]
    fn fn_profile_empty_when_model_is_perfect() {
        let samples = vec![sample(10.0, 1.0, 0, true), sample(0.0, 2.0, 1, false)];
        let inputs = FnInputs::from_samples(&samples, &[0.9, 0.1], &[3.0, 4.0]).unwrap();
        let profile = false_negative_analysis(&inputs, 0.5).unwrap();
        assert!(profile.empty);
        assert_eq!(profile.n_false_negatives, 0);
    }

    #[test]
    fn weak_model_misses_low_dose_positives() {
        // Stump "score = 0.9 if mme > 50 else 0.2" misses low-dose
        // positives, so the FN median dose sits below the positive median.
        let samples = vec![
            sample(5.0, 1.0, 0, true),
            sample(10.0, 1.5, 1, true),
            sample(80.0, 2.0, 2, true),
            sample(120.0, 2.5, 3, true),
            sample(3.0, 1.0, 4, false),
        ];
        let scores: Vec<f64> = samples
            .iter()
            .map(|s| if s.features.max_daily_mme > 50.0 { 0.9 } else { 0.2 })
            .collect();
        let los_d = vec![4.0; samples.len()];
        let inputs = FnInputs::from_samples(&samples, &scores, &los_d).unwrap();
        let p = false_negative_analysis(&inputs, 0.5).unwrap();
        assert_eq!(p.n_false_negatives, 2);
        let mme = &p.features["max_daily_mme"];
        let fn_median = mme.false_negatives.as_ref().unwrap().median;
        assert!(
            fn_median < mme.positives.median,
            "fn median {fn_median} vs positive median {}",
            mme.positives.median
        );
    }

    #[test]
    fn site_histograms_sum_to_hundred() {
        let samples = vec![
            sample(5.0, 1.0, 0, true),
            sample(10.0, 1.5, 1, true),
            sample(80.0, 2.0, 1, true),
        ];
        let inputs =
            FnInputs::from_samples(&samples, &[0.1, 0.9, 0.1], &[1.0, 2.0, 3.0]).unwrap();
        let p = false_negative_analysis(&inputs, 0.5).unwrap();
        let sum: f64 = p.site_pct_positives.values().sum();
        assert!((sum - 100.0).abs() < 0.1, "positives histogram sums to {sum}");
        let sum_fn: f64 = p.site_pct_false_negatives.values().sum();
        assert!((sum_fn - 100.0).abs() < 0.1, "fn histogram sums to {sum_fn}");
    }
}
