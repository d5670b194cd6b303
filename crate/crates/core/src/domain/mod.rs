//! Core record types shared by the whole pipeline: one hospital admission
//! with its timed surgery, medication and radiology-report events, plus
//! invariant validation and minute-resolution time arithmetic.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod csv_io;

pub const MINUTES_PER_DAY: i64 = 1440;

/// Minutes since an arbitrary epoch. All event times are integer minutes;
/// calendar-day arithmetic applies a single configured timezone offset so
/// "daily" aggregates are unambiguous.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn minutes(self) -> i64 {
        self.0
    }

    /// Calendar-day index in the reference timezone (offset in minutes).
    pub fn day_index(self, tz_offset_min: i32) -> i64 {
        (self.0 + tz_offset_min as i64).div_euclid(MINUTES_PER_DAY)
    }

    /// Fractional days elapsed since `earlier`.
    pub fn days_since(self, earlier: Timestamp) -> f64 {
        (self.0 - earlier.0) as f64 / MINUTES_PER_DAY as f64
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash,
                 Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Data(format!(
                        concat!("unknown ", stringify!($name), " value: {:?}"), other
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

string_enum! {
    Gender {
        Male => "male",
        Female => "female",
    }
}

string_enum! {
    /// The ten operative sites used as surgery-type features.
    SurgerySite {
        Head => "head",
        Neck => "neck",
        Spine => "spine",
        Thorax => "thorax",
        UpperAbdomen => "upper_abdomen",
        LowerAbdomen => "lower_abdomen",
        Pelvis => "pelvis",
        UpperLimbs => "upper_limbs",
        LowerLimbs => "lower_limbs",
        Skin => "skin",
    }
}

string_enum! {
    DrugClass {
        Opioid => "opioid",
        NonOpioidAnalgesic => "non_opioid_analgesic",
        Insulin => "insulin",
        Antiemetic => "antiemetic",
        Antidiabetic => "antidiabetic",
        SalineFlush => "saline_flush",
    }
}

string_enum! {
    DoseUnit {
        Mg => "mg",
        Mcg => "mcg",
        Ml => "ml",
        Units => "units",
    }
}

string_enum! {
    /// Condition-history flags. `PriorAspiration` is an exclusion criterion,
    /// the rest are model features.
    HistoryFlag {
        PriorAspiration => "prior_aspiration",
        Stroke => "stroke",
        Dyslipidemia => "dyslipidemia",
        Dysphagia => "dysphagia",
        Obesity => "obesity",
        Hypertension => "hypertension",
        Diabetes => "diabetes",
    }
}

/// A binarized treatment whose causal effect on aspiration can be estimated:
/// exposure to one of five medication classes, or surgery at one of the ten
/// operative sites. Antidiabetic medication is a model feature but not a
/// treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Treatment {
    Med(DrugClass),
    Site(SurgerySite),
}

impl Treatment {
    pub const MED_CLASSES: [DrugClass; 5] = [
        DrugClass::Opioid,
        DrugClass::NonOpioidAnalgesic,
        DrugClass::Insulin,
        DrugClass::Antiemetic,
        DrugClass::SalineFlush,
    ];

    /// The 15 valid treatments: 5 medication classes and 10 operative sites.
    pub fn all() -> Vec<Treatment> {
        let mut out: Vec<Treatment> = Self::MED_CLASSES.iter().map(|c| Treatment::Med(*c)).collect();
        out.extend(SurgerySite::ALL.iter().map(|s| Treatment::Site(*s)));
        out
    }

    /// Canonical identifier: the drug class name, or `site:<site>`.
    pub fn id(&self) -> String {
        match self {
            Treatment::Med(c) => c.as_str().to_string(),
            Treatment::Site(s) => format!("site:{}", s.as_str()),
        }
    }
}

impl FromStr for Treatment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(site) = s.strip_prefix("site:") {
            let site: SurgerySite = site.parse()?;
            return Ok(Treatment::Site(site));
        }
        if let Ok(class) = s.parse::<DrugClass>() {
            if Self::MED_CLASSES.contains(&class) {
                return Ok(Treatment::Med(class));
            }
        }
        let valid: Vec<String> = Treatment::all().iter().map(|t| t.id()).collect();
        Err(Error::Data(format!(
            "unknown treatment {:?}; valid treatments are: {}",
            s,
            valid.join(", ")
        )))
    }
}

impl fmt::Display for Treatment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeryEvent {
    pub time: Timestamp,
    pub site: SurgerySite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicationEvent {
    pub time: Timestamp,
    pub drug_class: DrugClass,
    pub drug_name: String,
    pub dose: f64,
    pub unit: DoseUnit,
}

/// A chest X-ray report. The report time is the proxy for aspiration time;
/// `label` is set once by a labeler and is immutable afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiologyReport {
    pub time: Timestamp,
    pub text: String,
    pub label: Option<bool>,
}

impl RadiologyReport {
    pub fn new(time: Timestamp, text: impl Into<String>) -> Self {
        RadiologyReport { time, text: text.into(), label: None }
    }

    /// Set the label. Once set, a conflicting re-label is an error.
    pub fn set_label(&mut self, label: bool) -> Result<()> {
        match self.label {
            None => {
                self.label = Some(label);
                Ok(())
            }
            Some(existing) if existing == label => Ok(()),
            Some(existing) => Err(Error::Labeling(format!(
                "report at t={} already labeled {}, refusing re-label to {}",
                self.time, existing, label
            ))),
        }
    }
}

/// One hospital admission: demographics, condition history and the timed
/// event streams everything downstream is computed from.
///
/// All values are immutable after construction and safe to share across
/// threads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissionBundle {
    pub subject_id: String,
    pub admission_id: String,
    pub t_adm: Timestamp,
    pub t_discharge: Timestamp,
    pub age: i64,
    pub gender: Gender,
    pub language: String,
    pub race: String,
    pub history: BTreeSet<HistoryFlag>,
    pub surgeries: Vec<SurgeryEvent>,
    pub medications: Vec<MedicationEvent>,
    pub reports: Vec<RadiologyReport>,
}

impl AdmissionBundle {
    pub fn has_history(&self, flag: HistoryFlag) -> bool {
        self.history.contains(&flag)
    }

    /// Last surgery time, if any surgery exists.
    pub fn last_surgery_time(&self) -> Option<Timestamp> {
        self.surgeries.iter().map(|s| s.time).max()
    }
}

/// One broken invariant. Violations are data, not failures: validation never
/// errors, it reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
    pub detail: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>, detail: impl Into<String>) -> Self {
        Violation { field: field.into(), rule: rule.into(), detail: detail.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.field, self.rule, self.detail)
    }
}

/// Check every type invariant of a bundle. Pure: the same input always
/// yields the same violation list. `known_opioids` is the set of drug names
/// present in the configured MME conversion table.
pub fn validate_bundle(bundle: &AdmissionBundle, known_opioids: &BTreeSet<String>) -> Vec<Violation> {
    let mut out = Vec::new();

    if bundle.t_discharge < bundle.t_adm {
        out.push(Violation::new(
            "t_discharge",
            "admission window",
            format!("t_discharge {} precedes t_adm {}", bundle.t_discharge, bundle.t_adm),
        ));
    }
    if bundle.age < 0 {
        out.push(Violation::new("age", "non-negative", format!("age = {}", bundle.age)));
    }

    let in_window = |t: Timestamp| t >= bundle.t_adm && t <= bundle.t_discharge;

    for (i, s) in bundle.surgeries.iter().enumerate() {
        if !in_window(s.time) {
            out.push(Violation::new(
                format!("surgeries[{i}].time"),
                "event within admission",
                format!("time {} outside [{}, {}]", s.time, bundle.t_adm, bundle.t_discharge),
            ));
        }
    }
    for (i, m) in bundle.medications.iter().enumerate() {
        if !in_window(m.time) {
            out.push(Violation::new(
                format!("medications[{i}].time"),
                "event within admission",
                format!("time {} outside [{}, {}]", m.time, bundle.t_adm, bundle.t_discharge),
            ));
        }
        if !(m.dose >= 0.0) {
            out.push(Violation::new(
                format!("medications[{i}].dose"),
                "non-negative dose",
                format!("dose = {}", m.dose),
            ));
        }
        if m.drug_class == DrugClass::Opioid && !known_opioids.contains(&m.drug_name) {
            out.push(Violation::new(
                format!("medications[{i}].drug_name"),
                "mme conversion",
                format!("opioid {:?} missing from the MME conversion table", m.drug_name),
            ));
        }
    }
    for (i, r) in bundle.reports.iter().enumerate() {
        if !in_window(r.time) {
            out.push(Violation::new(
                format!("reports[{i}].time"),
                "event within admission",
                format!("time {} outside [{}, {}]", r.time, bundle.t_adm, bundle.t_discharge),
            ));
        }
    }

    if !bundle.surgeries.windows(2).all(|w| w[0].time <= w[1].time) {
        out.push(Violation::new("surgeries", "ordering", "not sorted ascending by time"));
    }
    if !bundle.medications.windows(2).all(|w| w[0].time <= w[1].time) {
        out.push(Violation::new("medications", "ordering", "not sorted ascending by time"));
    }

    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn known_opioids() -> BTreeSet<String> {
        ["morphine", "oxycodone", "fentanyl"].iter().map(|s| s.to_string()).collect()
    }

    fn base_bundle() -> AdmissionBundle {
        AdmissionBundle {
            subject_id: "s1".into(),
            admission_id: "a1".into(),
            t_adm: Timestamp(10_000),
            t_discharge: Timestamp(30_000),
            age: 62,
            gender: Gender::Male,
            language: "english".into(),
            race: "white".into(),
            history: BTreeSet::new(),
            surgeries: vec![],
            medications: vec![],
            reports: vec![],
        }
    }

    #[test]
    fn empty_bundle_passes() {
        let b = base_bundle();
        assert!(validate_bundle(&b, &known_opioids()).is_empty());
    }

    #[test]
    fn surgery_before_admission_is_flagged() {
        let mut b = base_bundle();
        b.surgeries.push(SurgeryEvent { time: Timestamp(9_999), site: SurgerySite::Neck });
        let v = validate_bundle(&b, &known_opioids());
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "surgeries[0].time");
        assert_eq!(v[0].rule, "event within admission");
    }

    #[test]
    fn unsorted_medications_are_flagged() {
        let mut b = base_bundle();
        for t in [12_000, 11_000] {
            b.medications.push(MedicationEvent {
                time: Timestamp(t),
                drug_class: DrugClass::Antiemetic,
                drug_name: "ondansetron".into(),
                dose: 4.0,
                unit: DoseUnit::Mg,
            });
        }
        let v = validate_bundle(&b, &known_opioids());
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "medications");
        assert_eq!(v[0].rule, "ordering");
    }

    #[test]
    fn unknown_opioid_name_is_flagged() {
        let mut b = base_bundle();
        b.medications.push(MedicationEvent {
            time: Timestamp(12_000),
            drug_class: DrugClass::Opioid,
            drug_name: "unobtainium".into(),
            dose: 5.0,
            unit: DoseUnit::Mg,
        });
        let v = validate_bundle(&b, &known_opioids());
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].rule, "mme conversion");
    }

    #[test]
    fn validation_is_pure() {
        let mut b = base_bundle();
        b.age = -1;
        let a = validate_bundle(&b, &known_opioids());
        let c = validate_bundle(&b, &known_opioids());
        assert_eq!(a, c);
        assert_eq!(a.len(), 1);
    }

    #[test]
    fn relabeling_a_report_conflictingly_fails() {
        let mut r = RadiologyReport::new(Timestamp(100), "no acute process");
        r.set_label(false).unwrap();
        assert!(r.set_label(false).is_ok());
        assert!(r.set_label(true).is_err());
    }

    #[test]
    fn day_index_respects_timezone_offset() {
        // 23:50 UTC on day 0; with +60 min offset it falls on day 1.
        let t = Timestamp(1430);
        assert_eq!(t.day_index(0), 0);
        assert_eq!(t.day_index(60), 1);
        assert_eq!(Timestamp(-1).day_index(0), -1);
    }

    #[test]
    fn enum_round_trip() {
        for site in SurgerySite::ALL {
            assert_eq!(*site, site.as_str().parse::<SurgerySite>().unwrap());
        }
        assert!("shoulder".parse::<SurgerySite>().is_err());
    }

    #[test]
    fn treatment_ids_round_trip() {
        let all = Treatment::all();
        assert_eq!(all.len(), 15);
        for t in &all {
            assert_eq!(*t, t.id().parse::<Treatment>().unwrap());
        }
        // Antidiabetic is a feature, not a treatment.
        let err = "antidiabetic".parse::<Treatment>().unwrap_err().to_string();
        assert!(err.contains("site:skin"), "{err}");
    }
}
