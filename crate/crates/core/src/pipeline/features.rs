//! Temporal feature extraction and design-matrix assembly.
//!
//! Every aggregate is computed strictly from events at or before the cutoff
//! time: perturbing anything after the cutoff can never change a feature
//! vector.

use ndarray::Array2;
use serde::Serialize;

use crate::domain::{
    AdmissionBundle, DoseUnit, DrugClass, Gender, SurgerySite, Timestamp,
};
use crate::error::{Error, Result};
use crate::pipeline::mme::{compute_mme, max_daily_mme, MmeTable};

/// Extraction settings: reference timezone, categorical vocabularies and the
/// MME conversion table.
#[derive(Debug, Clone)]
pub struct FeatureConfig {
    pub tz_offset_min: i32,
    /// Known language levels; anything else maps to "other".
    pub language_levels: Vec<String>,
    /// Known race levels; anything else maps to "other".
    pub race_levels: Vec<String>,
    pub mme_table: MmeTable,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            tz_offset_min: 0,
            language_levels: vec!["english".into(), "spanish".into()],
            race_levels: vec!["asian".into(), "black".into(), "hispanic".into(), "white".into()],
            mme_table: MmeTable::conventional(),
        }
    }
}

impl FeatureConfig {
    fn one_hot_levels(levels: &[String]) -> Vec<String> {
        let mut out: Vec<String> = levels.to_vec();
        out.push("other".into());
        out.sort();
        out.dedup();
        out
    }

    /// Language column levels in lexicographic order (including "other").
    pub fn language_one_hot(&self) -> Vec<String> {
        Self::one_hot_levels(&self.language_levels)
    }

    pub fn race_one_hot(&self) -> Vec<String> {
        Self::one_hot_levels(&self.race_levels)
    }

    fn map_level(levels: &[String], value: &str) -> String {
        if levels.iter().any(|l| l == value) {
            value.to_string()
        } else {
            "other".to_string()
        }
    }
}

/// History flags used as features, in column order (prior aspiration is an
/// exclusion criterion, not a feature).
pub const HISTORY_FEATURES: [crate::domain::HistoryFlag; 6] = [
    crate::domain::HistoryFlag::Stroke,
    crate::domain::HistoryFlag::Dyslipidemia,
    crate::domain::HistoryFlag::Dysphagia,
    crate::domain::HistoryFlag::Obesity,
    crate::domain::HistoryFlag::Hypertension,
    crate::domain::HistoryFlag::Diabetes,
];

/// Per-medication-class aggregates over pre-cutoff events. For the opioid
/// class both values are in MME mg; other classes use their native unit with
/// mcg pre-scaled to mg.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct MedAggregate {
    pub any_given: bool,
    pub total_dose: f64,
    pub max_daily: f64,
}

/// The extracted feature set for one admission at one cutoff.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureVector {
    pub age: f64,
    pub gender: Gender,
    /// Mapped language level (vocabulary level or "other").
    pub language_level: String,
    pub race_level: String,
    /// Fractional days from admission to the cutoff.
    pub los_until_surgery: f64,
    /// In `HISTORY_FEATURES` order.
    pub history: [bool; 6],
    /// Any surgery at the site before the cutoff, in `SurgerySite::ALL` order.
    pub sites: [bool; 10],
    /// In `DrugClass::ALL` order.
    pub med: [MedAggregate; 6],
    /// Maximum over calendar days of summed opioid MME (the opioid
    /// `max_daily` aggregate).
    pub max_daily_mme: f64,
}

/// One cohort member ready for model training.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub admission_id: String,
    pub features: FeatureVector,
    pub label: bool,
    pub t_cutoff: Timestamp,
}

fn dose_mg_normalized(dose: f64, unit: DoseUnit) -> f64 {
    match unit {
        DoseUnit::Mcg => dose / 1000.0,
        _ => dose,
    }
}

/// Extract the feature vector for `bundle` at `t_cutoff`. Only events with
/// `time <= t_cutoff` contribute.
pub fn extract_features(
    bundle: &AdmissionBundle,
    t_cutoff: Timestamp,
    cfg: &FeatureConfig,
) -> Result<FeatureVector> {
    if t_cutoff < bundle.t_adm {
        return Err(Error::Data(format!(
            "cutoff {} precedes admission {} for {}",
            t_cutoff, bundle.t_adm, bundle.admission_id
        )));
    }

    let mut history = [false; 6];
    for (i, flag) in HISTORY_FEATURES.iter().enumerate() {
        history[i] = bundle.has_history(*flag);
    }

    let mut sites = [false; 10];
    for s in bundle.surgeries.iter().filter(|s| s.time <= t_cutoff) {
        let idx = SurgerySite::ALL.iter().position(|x| *x == s.site).expect("site in ALL");
        sites[idx] = true;
    }

    let mut med = [MedAggregate::default(); 6];
    let mut daily: Vec<std::collections::BTreeMap<i64, f64>> = vec![Default::default(); 6];
    for e in bundle.medications.iter().filter(|e| e.time <= t_cutoff) {
        let ci = DrugClass::ALL.iter().position(|c| *c == e.drug_class).expect("class in ALL");
        let amount = if e.drug_class == DrugClass::Opioid {
            compute_mme(e, &cfg.mme_table)?
        } else {
            dose_mg_normalized(e.dose, e.unit)
        };
        med[ci].any_given = true;
        med[ci].total_dose += amount;
        *daily[ci].entry(e.time.day_index(cfg.tz_offset_min)).or_insert(0.0) += amount;
    }
    for (ci, per_day) in daily.iter().enumerate() {
        med[ci].max_daily = per_day.values().fold(0.0_f64, |a, &v| a.max(v));
    }

    // The opioid daily maximum restated through the dedicated helper; the
    // [t_adm, t_cutoff] window matches the aggregate loop on valid bundles.
    let mdm =
        max_daily_mme(&bundle.medications, bundle.t_adm, t_cutoff, cfg.tz_offset_min, &cfg.mme_table)?;

    Ok(FeatureVector {
        age: bundle.age as f64,
        gender: bundle.gender,
        language_level: FeatureConfig::map_level(&cfg.language_levels, &bundle.language),
        race_level: FeatureConfig::map_level(&cfg.race_levels, &bundle.race),
        los_until_surgery: t_cutoff.days_since(bundle.t_adm),
        history,
        sites,
        med,
        max_daily_mme: mdm,
    })
}

/// A dense numeric design matrix with a recorded column order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub admission_ids: Vec<String>,
    pub x: Array2<f64>,
    pub y: Vec<u8>,
    pub columns: Vec<String>,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

/// Column names for the given feature configuration, in assembly order.
pub fn feature_columns(cfg: &FeatureConfig) -> Vec<String> {
    let mut cols = vec!["age".to_string()];
    for g in ["female", "male"] {
        cols.push(format!("gender={g}"));
    }
    for l in cfg.language_one_hot() {
        cols.push(format!("language={l}"));
    }
    for r in cfg.race_one_hot() {
        cols.push(format!("race={r}"));
    }
    cols.push("los_until_surgery".into());
    for f in HISTORY_FEATURES {
        cols.push(format!("hist_{}", f.as_str()));
    }
    for s in SurgerySite::ALL {
        cols.push(format!("site={}", s.as_str()));
    }
    for c in DrugClass::ALL {
        cols.push(format!("med_{}_any", c.as_str()));
        cols.push(format!("med_{}_total", c.as_str()));
        if *c == DrugClass::Opioid {
            // The opioid daily maximum is the dedicated max_daily_mme column.
            continue;
        }
        cols.push(format!("med_{}_max_daily", c.as_str()));
    }
    cols.push("max_daily_mme".into());
    cols
}

fn feature_row(fv: &FeatureVector, cfg: &FeatureConfig, out: &mut Vec<f64>) -> Result<()> {
    out.push(fv.age);
    out.push(if fv.gender == Gender::Female { 1.0 } else { 0.0 });
    out.push(if fv.gender == Gender::Male { 1.0 } else { 0.0 });
    for level in cfg.language_one_hot() {
        out.push(if fv.language_level == level { 1.0 } else { 0.0 });
    }
    for level in cfg.race_one_hot() {
        out.push(if fv.race_level == level { 1.0 } else { 0.0 });
    }
    out.push(fv.los_until_surgery);
    for h in fv.history {
        out.push(if h { 1.0 } else { 0.0 });
    }
    for s in fv.sites {
        out.push(if s { 1.0 } else { 0.0 });
    }
    for (i, c) in DrugClass::ALL.iter().enumerate() {
        out.push(if fv.med[i].any_given { 1.0 } else { 0.0 });
        out.push(fv.med[i].total_dose);
        if *c != DrugClass::Opioid {
            out.push(fv.med[i].max_daily);
        }
    }
    out.push(fv.max_daily_mme);
    Ok(())
}

/// Assemble labeled samples into a design matrix plus label vector. One-hot
/// expansion uses lexicographic category order; the column order is fixed
/// and recorded.
pub fn assemble_dataset(samples: &[LabeledSample], cfg: &FeatureConfig) -> Result<Dataset> {
    if samples.is_empty() {
        return Err(Error::Data("cannot assemble an empty dataset".into()));
    }
    let columns = feature_columns(cfg);
    let lang_levels = cfg.language_one_hot();
    let race_levels = cfg.race_one_hot();

    let mut flat = Vec::with_capacity(samples.len() * columns.len());
    let mut y = Vec::with_capacity(samples.len());
    let mut admission_ids = Vec::with_capacity(samples.len());
    for s in samples {
        if !lang_levels.contains(&s.features.language_level)
            || !race_levels.contains(&s.features.race_level)
        {
            return Err(Error::Data(format!(
                "schema mismatch: sample {} carries categorical levels unknown to this \
                 feature configuration",
                s.admission_id
            )));
        }
        feature_row(&s.features, cfg, &mut flat)?;
        y.push(s.label as u8);
        admission_ids.push(s.admission_id.clone());
    }
    let x = Array2::from_shape_vec((samples.len(), columns.len()), flat)
        .map_err(|e| Error::Data(format!("ragged feature rows: {e}")))?;
    Ok(Dataset { admission_ids, x, y, columns })
}

/// Median imputation fitted on the training split. Columns containing
/// missing values in the training data get a companion `<name>_missing`
/// indicator column.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct MedianImputer {
    pub medians: Vec<f64>,
    /// Indices (in the source column order) that receive indicator columns.
    pub indicator_sources: Vec<usize>,
}

fn median_of(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl MedianImputer {
    pub fn fit(train: &Array2<f64>) -> Self {
        let mut medians = Vec::with_capacity(train.ncols());
        let mut indicator_sources = Vec::new();
        for (j, col) in train.columns().into_iter().enumerate() {
            let finite: Vec<f64> = col.iter().copied().filter(|v| v.is_finite()).collect();
            if finite.len() < col.len() {
                indicator_sources.push(j);
            }
            medians.push(median_of(finite));
        }
        MedianImputer { medians, indicator_sources }
    }

    /// Replace non-finite values with the training median and append
    /// missingness indicators for the planned columns.
    pub fn transform(&self, x: &Array2<f64>, columns: &[String]) -> (Array2<f64>, Vec<String>) {
        let (n, d) = (x.nrows(), x.ncols());
        let extra = self.indicator_sources.len();
        let mut out = Array2::zeros((n, d + extra));
        for i in 0..n {
            for j in 0..d {
                let v = x[(i, j)];
                out[(i, j)] = if v.is_finite() { v } else { self.medians[j] };
            }
            for (k, &src) in self.indicator_sources.iter().enumerate() {
                out[(i, d + k)] = if x[(i, src)].is_finite() { 0.0 } else { 1.0 };
            }
        }
        let mut cols = columns.to_vec();
        for &src in &self.indicator_sources {
            cols.push(format!("{}_missing", columns[src]));
        }
        (out, cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{HistoryFlag, MedicationEvent, RadiologyReport, SurgeryEvent};
    use std::collections::BTreeSet;

    fn bundle() -> AdmissionBundle {
        AdmissionBundle {
            subject_id: "s0".into(),
            admission_id: "a0".into(),
            t_adm: Timestamp(0),
            t_discharge: Timestamp(40_000),
            age: 70,
            gender: Gender::Female,
            language: "english".into(),
            race: "martian".into(),
            history: [HistoryFlag::Diabetes].into_iter().collect(),
            surgeries: vec![SurgeryEvent { time: Timestamp(2880), site: SurgerySite::Neck }],
            medications: vec![
                MedicationEvent {
                    time: Timestamp(100),
                    drug_class: DrugClass::Opioid,
                    drug_name: "oxycodone".into(),
                    dose: 10.0,
                    unit: DoseUnit::Mg,
                },
                MedicationEvent {
                    time: Timestamp(3000),
                    drug_class: DrugClass::Antiemetic,
                    drug_name: "ondansetron".into(),
                    dose: 4.0,
                    unit: DoseUnit::Mg,
                },
            ],
            reports: vec![RadiologyReport::new(Timestamp(5000), "no acute process")],
        }
    }

    #[test]
    fn single_site_flag_is_set() {
        let fv = extract_features(&bundle(), Timestamp(2880), &FeatureConfig::default()).unwrap();
        let neck = SurgerySite::ALL.iter().position(|s| *s == SurgerySite::Neck).unwrap();
        for (i, on) in fv.sites.iter().enumerate() {
            assert_eq!(*on, i == neck);
        }
    }

    #[test]
    fn post_cutoff_events_are_excluded() {
        let fv = extract_features(&bundle(), Timestamp(2880), &FeatureConfig::default()).unwrap();
        // The antiemetic at t=3000 is after the cutoff.
        let anti =
            DrugClass::ALL.iter().position(|c| *c == DrugClass::Antiemetic).unwrap();
        assert!(!fv.med[anti].any_given);
        assert_eq!(fv.med[anti].total_dose, 0.0);
        // Opioid before cutoff: oxycodone 10 mg * 1.5.
        assert_eq!(fv.max_daily_mme, 15.0);
    }

    #[test]
    fn los_is_fractional_days() {
        let fv = extract_features(&bundle(), Timestamp(2880), &FeatureConfig::default()).unwrap();
        assert_eq!(fv.los_until_surgery, 2.0);
    }

    #[test]
    fn cutoff_before_admission_is_an_error() {
        let mut b = bundle();
        b.t_adm = Timestamp(100);
        assert!(extract_features(&b, Timestamp(99), &FeatureConfig::default()).is_err());
    }

    #[test]
    fn unseen_race_maps_to_other() {
        let cfg = FeatureConfig::default();
        let fv = extract_features(&bundle(), Timestamp(2880), &cfg).unwrap();
        assert_eq!(fv.race_level, "other");
        let sample = LabeledSample {
            admission_id: "a0".into(),
            features: fv,
            label: false,
            t_cutoff: Timestamp(2880),
        };
        let ds = assemble_dataset(&[sample], &cfg).unwrap();
        let j = ds.column_index("race=other").unwrap();
        assert_eq!(ds.x[(0, j)], 1.0);
        // One-hot group sums to 1.
        let race_sum: f64 = ds
            .columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.starts_with("race="))
            .map(|(j, _)| ds.x[(0, j)])
            .sum();
        assert_eq!(race_sum, 1.0);
    }

    #[test]
    fn assemble_empty_errors() {
        assert!(assemble_dataset(&[], &FeatureConfig::default()).is_err());
    }

    #[test]
    fn assemble_shares_columns() {
        let cfg = FeatureConfig::default();
        let fv = extract_features(&bundle(), Timestamp(2880), &cfg).unwrap();
        let mk = |id: &str, label: bool| LabeledSample {
            admission_id: id.into(),
            features: fv.clone(),
            label,
            t_cutoff: Timestamp(2880),
        };
        let ds = assemble_dataset(&[mk("a", true), mk("b", false)], &cfg).unwrap();
        assert_eq!(ds.x.nrows(), 2);
        assert_eq!(ds.x.ncols(), ds.columns.len());
        assert_eq!(ds.y, vec![1, 0]);
        assert_eq!(ds.columns, feature_columns(&cfg));
    }

    #[test]
    fn max_daily_leq_total_opioid() {
        let fv = extract_features(&bundle(), Timestamp(40_000), &FeatureConfig::default()).unwrap();
        let op = DrugClass::ALL.iter().position(|c| *c == DrugClass::Opioid).unwrap();
        assert!(fv.max_daily_mme <= fv.med[op].total_dose + 1e-12);
    }

    #[test]
    fn imputer_fills_and_flags() {
        let x = ndarray::arr2(&[[1.0, f64::NAN], [3.0, 4.0], [5.0, 6.0]]);
        let imp = MedianImputer::fit(&x);
        assert_eq!(imp.medians, vec![3.0, 5.0]);
        assert_eq!(imp.indicator_sources, vec![1]);
        let cols = vec!["a".to_string(), "b".to_string()];
        let (t, new_cols) = imp.transform(&x, &cols);
        assert_eq!(t[(0, 1)], 5.0);
        assert_eq!(t[(0, 2)], 1.0);
        assert_eq!(t[(1, 2)], 0.0);
        assert_eq!(new_cols.last().unwrap(), "b_missing");
    }
}
