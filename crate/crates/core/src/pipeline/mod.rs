//! Cohort selection and feature extraction.
//!
//! Implements the cohort-selection flow: keep surgical admissions, exclude
//! prior-aspiration history, label chest X-ray reports, decide positives by
//! a post-operative time window, cut every admission's record at its last
//! pre-aspiration surgery, and downsample negatives to balance classes.

pub mod features;
pub mod labeler;
pub mod mme;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::domain::{AdmissionBundle, Timestamp, MINUTES_PER_DAY};
use crate::error::{Error, Result};
use crate::pipeline::features::{extract_features, FeatureConfig, LabeledSample};
use crate::pipeline::labeler::{label_report, LabelerPolicy};
use crate::seeding::{rng_for, Domain};

/// How negatives are reduced to match the positive count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DownsampleMode {
    /// Uniform random selection with the run seed.
    #[default]
    Uniform,
    /// Match the positives' joint (gender, age-decile) counts where
    /// possible, topping up uniformly from the remainder.
    Stratified,
}

#[derive(Debug, Clone)]
pub struct CohortOptions {
    pub window_days: i64,
    pub seed: u64,
    pub downsample: DownsampleMode,
}

impl Default for CohortOptions {
    fn default() -> Self {
        CohortOptions { window_days: 7, seed: 0, downsample: DownsampleMode::Uniform }
    }
}

/// One selected admission with its feature cutoff. For positives,
/// `t_event` is the confirming report time (the aspiration-time proxy).
#[derive(Debug, Clone, PartialEq)]
pub struct CohortMember {
    pub bundle_index: usize,
    pub admission_id: String,
    pub t_cutoff: Timestamp,
    pub t_event: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Exclusion {
    pub admission_id: String,
    pub reason: String,
}

/// Cohort selection result. `negatives` is the class-balanced set used for
/// model training; `eligible_negatives` is the full pre-downsampling set,
/// kept for population-level (causal) analyses.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub positives: Vec<CohortMember>,
    pub negatives: Vec<CohortMember>,
    pub eligible_negatives: Vec<CohortMember>,
    pub exclusions: Vec<Exclusion>,
}

/// Select the cohort from validated bundles.
///
/// An admission is positive iff some report labeled true falls within
/// `window_days` (inclusive) after a surgery; its cutoff is the last surgery
/// at or before that report, and later surgeries are dropped. Negatives are
/// surgical admissions without an in-window true report; their cutoff is the
/// last surgery.
pub fn select_cohort(
    bundles: &[AdmissionBundle],
    labeler: &LabelerPolicy,
    options: &CohortOptions,
) -> Result<Cohort> {
    if options.window_days <= 0 {
        return Err(Error::Config(format!(
            "window_days must be positive, got {}",
            options.window_days
        )));
    }
    let window_min = options.window_days * MINUTES_PER_DAY;

    let mut positives = Vec::new();
    let mut eligible_negatives = Vec::new();
    let mut exclusions = Vec::new();

    for (idx, b) in bundles.iter().enumerate() {
        if b.surgeries.is_empty() {
            exclusions.push(Exclusion {
                admission_id: b.admission_id.clone(),
                reason: "no_surgery".into(),
            });
            continue;
        }
        if b.has_history(crate::domain::HistoryFlag::PriorAspiration) {
            exclusions.push(Exclusion {
                admission_id: b.admission_id.clone(),
                reason: "prior_aspiration".into(),
            });
            continue;
        }

        // Reports in time order; the first labeled-true report with a
        // surgery inside the window decides positivity (imaging time is the
        // aspiration-time proxy).
        let mut report_times: Vec<Timestamp> = Vec::new();
        let mut order: Vec<usize> = (0..b.reports.len()).collect();
        order.sort_by_key(|&i| b.reports[i].time);
        for i in order {
            let r = &b.reports[i];
            if !label_report(r, labeler)? {
                continue;
            }
            report_times.push(r.time);
        }

        let mut cutoff_if_positive = None;
        for t_cxr in report_times {
            let in_window = b
                .surgeries
                .iter()
                .any(|s| t_cxr >= s.time && t_cxr.0 - s.time.0 <= window_min);
            if in_window {
                let cutoff = b
                    .surgeries
                    .iter()
                    .filter(|s| s.time <= t_cxr)
                    .map(|s| s.time)
                    .max()
                    .expect("an in-window surgery precedes the report");
                cutoff_if_positive = Some((cutoff, t_cxr));
                break;
            }
        }

        match cutoff_if_positive {
            Some((t_cutoff, t_cxr)) => positives.push(CohortMember {
                bundle_index: idx,
                admission_id: b.admission_id.clone(),
                t_cutoff,
                t_event: Some(t_cxr),
            }),
            None => eligible_negatives.push(CohortMember {
                bundle_index: idx,
                admission_id: b.admission_id.clone(),
                t_cutoff: b.last_surgery_time().expect("surgical admission"),
                t_event: None,
            }),
        }
    }

    let negatives = downsample_negatives(
        bundles,
        &positives,
        &eligible_negatives,
        options.downsample,
        options.seed,
    );

    Ok(Cohort { positives, negatives, eligible_negatives, exclusions })
}

fn age_decile(age: i64) -> i64 {
    (age / 10).clamp(0, 9)
}

fn downsample_negatives(
    bundles: &[AdmissionBundle],
    positives: &[CohortMember],
    eligible: &[CohortMember],
    mode: DownsampleMode,
    seed: u64,
) -> Vec<CohortMember> {
    if eligible.len() <= positives.len() {
        return eligible.to_vec();
    }
    let k = positives.len();
    let mut rng = rng_for(seed, Domain::Downsample, 0);

    let mut selected: Vec<usize> = match mode {
        DownsampleMode::Uniform => {
            let mut idx: Vec<usize> = (0..eligible.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(k);
            idx
        }
        DownsampleMode::Stratified => {
            use std::collections::BTreeMap;
            let stratum = |m: &CohortMember| {
                let b = &bundles[m.bundle_index];
                (b.gender, age_decile(b.age))
            };
            let mut target: BTreeMap<_, usize> = BTreeMap::new();
            for p in positives {
                *target.entry(stratum(p)).or_insert(0) += 1;
            }
            let mut by_stratum: BTreeMap<_, Vec<usize>> = BTreeMap::new();
            for (i, m) in eligible.iter().enumerate() {
                by_stratum.entry(stratum(m)).or_default().push(i);
            }
            let mut chosen = Vec::with_capacity(k);
            let mut leftover = Vec::new();
            for (key, mut members) in by_stratum {
                members.shuffle(&mut rng);
                let want = target.get(&key).copied().unwrap_or(0);
                let take = want.min(members.len());
                chosen.extend(members.drain(..take));
                leftover.extend(members);
            }
            leftover.shuffle(&mut rng);
            while chosen.len() < k {
                chosen.push(leftover.pop().expect("eligible exceeds positives"));
            }
            chosen.truncate(k);
            chosen
        }
    };

    selected.sort_unstable();
    selected.into_iter().map(|i| eligible[i].clone()).collect()
}

/// Extract features for cohort members in parallel (order-preserving).
pub fn extract_cohort_samples(
    bundles: &[AdmissionBundle],
    members: &[CohortMember],
    label: bool,
    cfg: &FeatureConfig,
) -> Result<Vec<LabeledSample>> {
    members
        .par_iter()
        .map(|m| {
            let b = &bundles[m.bundle_index];
            Ok(LabeledSample {
                admission_id: m.admission_id.clone(),
                features: extract_features(b, m.t_cutoff, cfg)?,
                label,
                t_cutoff: m.t_cutoff,
            })
        })
        .collect()
}

/// Days from admission to discharge, used only in error analysis (never as
/// a model feature; it leaks post-outcome information).
pub fn los_until_discharge_days(bundle: &AdmissionBundle) -> f64 {
    bundle.t_discharge.days_since(bundle.t_adm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Gender, RadiologyReport, SurgeryEvent, SurgerySite};
    use std::collections::BTreeSet;

    fn surgical_bundle(id: &str, surgery_min: i64, report_offset_min: Option<i64>) -> AdmissionBundle {
        let t_adm = Timestamp(0);
        let surgery = Timestamp(surgery_min);
        let mut reports = Vec::new();
        if let Some(off) = report_offset_min {
            reports.push(RadiologyReport::new(
                Timestamp(surgery_min + off),
                "new opacity concerning for aspiration",
            ));
        }
        let t_end = reports.iter().map(|r| r.time.0).max().unwrap_or(surgery_min) + 1440;
        AdmissionBundle {
            subject_id: format!("s_{id}"),
            admission_id: id.to_string(),
            t_adm,
            t_discharge: Timestamp(t_end),
            age: 60,
            gender: Gender::Male,
            language: "english".into(),
            race: "white".into(),
            history: BTreeSet::new(),
            surgeries: vec![SurgeryEvent { time: surgery, site: SurgerySite::Thorax }],
            medications: vec![],
            reports,
        }
    }

    fn options(seed: u64) -> CohortOptions {
        CohortOptions { window_days: 7, seed, downsample: DownsampleMode::Uniform }
    }

    #[test]
    fn window_boundary_is_inclusive() {
        let policy = LabelerPolicy::default();
        let exactly = surgical_bundle("a", 1440, Some(7 * MINUTES_PER_DAY));
        let over = surgical_bundle("b", 1440, Some(7 * MINUTES_PER_DAY + 1));
        let cohort = select_cohort(&[exactly, over], &policy, &options(1)).unwrap();
        assert_eq!(cohort.positives.len(), 1);
        assert_eq!(cohort.positives[0].admission_id, "a");
        assert_eq!(cohort.eligible_negatives.len(), 1);
        assert_eq!(cohort.eligible_negatives[0].admission_id, "b");
    }

    #[test]
    fn day_eight_report_is_negative() {
        let policy = LabelerPolicy::default();
        let b = surgical_bundle("a", 1440, Some(8 * MINUTES_PER_DAY));
        let cohort = select_cohort(&[b], &policy, &options(1)).unwrap();
        assert!(cohort.positives.is_empty());
        assert_eq!(cohort.eligible_negatives.len(), 1);
    }

    #[test]
    fn exclusions_are_audited() {
        let policy = LabelerPolicy::default();
        let mut no_surgery = surgical_bundle("a", 1440, None);
        no_surgery.surgeries.clear();
        let mut prior = surgical_bundle("b", 1440, None);
        prior.history.insert(crate::domain::HistoryFlag::PriorAspiration);
        let cohort = select_cohort(&[no_surgery, prior], &policy, &options(1)).unwrap();
        let reasons: Vec<&str> = cohort.exclusions.iter().map(|e| e.reason.as_str()).collect();
        assert_eq!(reasons, vec!["no_surgery", "prior_aspiration"]);
    }

    #[test]
    fn downsampling_matches_positive_count() {
        let policy = LabelerPolicy::default();
        let mut bundles = Vec::new();
        for i in 0..10 {
            bundles.push(surgical_bundle(&format!("p{i}"), 1440, Some(1000)));
        }
        for i in 0..90 {
            bundles.push(surgical_bundle(&format!("n{i}"), 1440, None));
        }
        let cohort = select_cohort(&bundles, &policy, &options(3)).unwrap();
        assert_eq!(cohort.positives.len(), 10);
        assert_eq!(cohort.negatives.len(), 10);
        assert_eq!(cohort.eligible_negatives.len(), 90);
        // Deterministic per seed.
        let again = select_cohort(&bundles, &policy, &options(3)).unwrap();
        let ids: Vec<_> = cohort.negatives.iter().map(|m| &m.admission_id).collect();
        let ids2: Vec<_> = again.negatives.iter().map(|m| &m.admission_id).collect();
        assert_eq!(ids, ids2);
        let other_seed = select_cohort(&bundles, &policy, &options(4)).unwrap();
        let ids3: Vec<_> = other_seed.negatives.iter().map(|m| &m.admission_id).collect();
        assert_ne!(ids, ids3);
    }

    #[test]
    fn fewer_negatives_than_positives_keeps_all() {
        let policy = LabelerPolicy::default();
        let mut bundles = Vec::new();
        for i in 0..5 {
            bundles.push(surgical_bundle(&format!("p{i}"), 1440, Some(1000)));
        }
        bundles.push(surgical_bundle("n0", 1440, None));
        let cohort = select_cohort(&bundles, &policy, &options(1)).unwrap();
        assert_eq!(cohort.negatives.len(), 1);
    }

    #[test]
    fn cutoff_drops_surgeries_after_report() {
        let policy = LabelerPolicy::default();
        let mut b = surgical_bundle("a", 1440, Some(1000));
        // Second surgery after the aspiration report.
        b.surgeries.push(SurgeryEvent { time: Timestamp(50_000), site: SurgerySite::Skin });
        b.t_discharge = Timestamp(60_000);
        let cohort = select_cohort(&[b], &policy, &options(1)).unwrap();
        assert_eq!(cohort.positives[0].t_cutoff, Timestamp(1440));
    }

    #[test]
    fn rejects_nonpositive_window() {
        let policy = LabelerPolicy::default();
        let err = select_cohort(&[], &policy, &CohortOptions { window_days: 0, ..options(1) })
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
