//! Synthetic admission generator backed by a structural causal model (SCM)
//! with known ground-truth treatment effects.
//!
//! Treatment assignment is Bernoulli(sigmoid(linear in covariates)); the
//! aspiration outcome is Bernoulli(clamp(base risk + Σ τ_t·T_t + covariate
//! terms + noise)). Additive risk makes a configured τ the literal ATE
//! whenever clamping is inactive, which gives the estimator tests a
//! closed-form oracle. Potential outcomes share one uniform draw per
//! admission, so the observed outcome is always consistent with them.
//!
//! Generation is deterministic: every admission gets its own RNG derived
//! from `(seed, admission index)`, and output order is by admission index,
//! so results are independent of thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use rayon::prelude::*;

use crate::domain::{
    AdmissionBundle, DoseUnit, DrugClass, Gender, HistoryFlag, MedicationEvent, RadiologyReport,
    SurgeryEvent, SurgerySite, Timestamp, Treatment, MINUTES_PER_DAY,
};
use crate::error::{Error, Result};
use crate::pipeline::mme::{max_daily_mme, MmeTable};
use crate::seeding::{rng_for, Domain};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const CONFIG_ECHO_FILE: &str = "config_echo.ini";

/// Covariates the SCM can wire into treatment assignment and outcome risk.
/// `age` and `los_days` enter as bounded standardized values in [-1, 1].
pub const COVARIATE_KEYS: &[&str] = &[
    "age",
    "gender_male",
    "hist_stroke",
    "hist_dyslipidemia",
    "hist_dysphagia",
    "hist_obesity",
    "hist_hypertension",
    "hist_diabetes",
    "los_days",
];

const POSITIVE_REPORT_TEMPLATES: &[&str] = &[
    "Findings consistent with aspiration pneumonia in the right lower lobe.",
    "New bibasilar opacities concerning for aspiration.",
    "Patchy consolidation compatible with aspiration pneumonia.",
];

const NEGATIVE_REPORT_TEMPLATES: &[&str] = &[
    "No acute cardiopulmonary process.",
    "Lungs are clear. No evidence of aspiration.",
    "Well expanded lungs without focal consolidation.",
];

const LANGUAGES: &[(&str, f64)] =
    &[("english", 0.70), ("spanish", 0.15), ("russian", 0.10), ("portuguese", 0.05)];

const RACES: &[(&str, f64)] = &[
    ("white", 0.60),
    ("black", 0.18),
    ("hispanic", 0.10),
    ("asian", 0.08),
    ("native_american", 0.02),
    ("unknown", 0.02),
];

/// (flag, prevalence) for the six feature flags.
const HISTORY_PREVALENCE: &[(HistoryFlag, f64)] = &[
    (HistoryFlag::Stroke, 0.08),
    (HistoryFlag::Dyslipidemia, 0.25),
    (HistoryFlag::Dysphagia, 0.06),
    (HistoryFlag::Obesity, 0.30),
    (HistoryFlag::Hypertension, 0.45),
    (HistoryFlag::Diabetes, 0.20),
];

const SITE_WEIGHTS: &[(SurgerySite, f64)] = &[
    (SurgerySite::Thorax, 0.20),
    (SurgerySite::LowerAbdomen, 0.15),
    (SurgerySite::UpperAbdomen, 0.12),
    (SurgerySite::Pelvis, 0.10),
    (SurgerySite::Spine, 0.10),
    (SurgerySite::LowerLimbs, 0.10),
    (SurgerySite::UpperLimbs, 0.08),
    (SurgerySite::Head, 0.06),
    (SurgerySite::Neck, 0.05),
    (SurgerySite::Skin, 0.04),
];

fn default_intercept(class: DrugClass) -> f64 {
    match class {
        DrugClass::Opioid => 0.4,
        DrugClass::NonOpioidAnalgesic => 0.8,
        DrugClass::Insulin => -1.2,
        DrugClass::Antiemetic => -0.5,
        DrugClass::Antidiabetic => -1.4,
        DrugClass::SalineFlush => 1.0,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Configuration of the structural causal model.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_admissions: usize,
    pub seed: u64,
    /// Probability an admission involves at least one surgery.
    pub surgery_rate: f64,
    /// Probability of a prior-aspiration history flag (cohort exclusion).
    pub prior_aspiration_rate: f64,
    /// Baseline aspiration risk for surgical admissions.
    pub base_risk: f64,
    /// Standard deviation of the additive Gaussian risk noise.
    pub noise_sd: f64,
    /// Ratio of male:female expected max-daily opioid dose.
    pub gender_opioid_multiplier: f64,
    /// Additional risk per 100 MME of max-daily opioid dose while treated.
    pub mme_dose_response: f64,
    /// Geometric day-decay of the chest X-ray delay after the last surgery.
    pub offset_decay: f64,
    /// Truncate the X-ray delay to at most this many days (keeps every
    /// positive inside an `offset_max_days` post-operative window).
    pub offset_max_days: Option<u32>,
    /// Probability of a routine negative chest X-ray report.
    pub negative_report_rate: f64,
    /// Per-medication-class assignment logit intercepts (defaults built in).
    pub treatment_intercepts: BTreeMap<String, f64>,
    /// Covariate -> coefficient on every medication assignment logit.
    pub confounder_strengths: BTreeMap<String, f64>,
    /// Covariate -> additive contribution to outcome risk.
    pub outcome_coefficients: BTreeMap<String, f64>,
    /// Treatment id -> additive risk effect τ (the configured ATE away from
    /// clamping). Keys define the set of "configured" treatments.
    pub effect_coefficients: BTreeMap<String, f64>,
}

impl GeneratorConfig {
    /// Desk-scale profile echoing the paper's cohort shape: ~15% surgical
    /// admissions, opioid-dominated risk, male-skewed opioid dosing and a
    /// report-delay distribution keeping >95% of aspirations within 7 days.
    /// At `n_admissions = 40_000` it yields roughly 830 in-window positives.
    pub fn paper_like(n_admissions: usize, seed: u64) -> Self {
        let mut effects = BTreeMap::new();
        for t in Treatment::all() {
            effects.insert(t.id(), 0.0);
        }
        effects.insert("opioid".into(), 0.08);
        effects.insert("non_opioid_analgesic".into(), 0.01);
        effects.insert("site:head".into(), 0.10);
        effects.insert("site:neck".into(), 0.11);
        effects.insert("site:upper_abdomen".into(), 0.08);
        effects.insert("site:spine".into(), 0.05);
        effects.insert("site:thorax".into(), 0.04);
        GeneratorConfig {
            n_admissions,
            seed,
            surgery_rate: 0.15,
            prior_aspiration_rate: 0.01,
            base_risk: 0.02,
            noise_sd: 0.04,
            gender_opioid_multiplier: 25.0,
            mme_dose_response: 0.04,
            offset_decay: 0.4,
            offset_max_days: None,
            negative_report_rate: 0.25,
            treatment_intercepts: BTreeMap::new(),
            confounder_strengths: [("age".to_string(), 0.8), ("hist_dysphagia".to_string(), 0.6)]
                .into_iter()
                .collect(),
            outcome_coefficients: [
                ("age".to_string(), 0.05),
                ("hist_dysphagia".to_string(), 0.04),
                ("hist_stroke".to_string(), 0.03),
                ("los_days".to_string(), 0.03),
            ]
            .into_iter()
            .collect(),
            effect_coefficients: effects,
        }
    }

    /// Covariate-independent treatment assignment with a configured opioid
    /// effect: every admission is surgical and every aspiration falls inside
    /// the 7-day window, so cohort labels equal SCM outcomes exactly.
    pub fn randomized(tau_opioid: f64, n_admissions: usize, seed: u64) -> Self {
        let mut effects = BTreeMap::new();
        for class in Treatment::MED_CLASSES {
            effects.insert(class.as_str().to_string(), 0.0);
        }
        effects.insert("opioid".into(), tau_opioid);
        GeneratorConfig {
            n_admissions,
            seed,
            surgery_rate: 1.0,
            prior_aspiration_rate: 0.0,
            base_risk: 0.30,
            noise_sd: 0.04,
            gender_opioid_multiplier: 1.0,
            mme_dose_response: 0.0,
            offset_decay: 0.5,
            offset_max_days: Some(7),
            negative_report_rate: 0.2,
            treatment_intercepts: [("opioid".to_string(), 0.0)].into_iter().collect(),
            confounder_strengths: BTreeMap::new(),
            outcome_coefficients: [
                ("age".to_string(), 0.08),
                ("hist_hypertension".to_string(), 0.05),
            ]
            .into_iter()
            .collect(),
            effect_coefficients: effects,
        }
    }

    /// Strong age/hypertension confounding of opioid assignment and outcome:
    /// the naive difference in means overshoots τ while the adjusted effect
    /// stays τ.
    pub fn confounded(tau_opioid: f64, n_admissions: usize, seed: u64) -> Self {
        let mut cfg = GeneratorConfig::randomized(tau_opioid, n_admissions, seed);
        cfg.base_risk = 0.35;
        cfg.noise_sd = 0.03;
        cfg.treatment_intercepts = [("opioid".to_string(), -0.45)].into_iter().collect();
        cfg.confounder_strengths =
            [("age".to_string(), 2.0), ("hist_hypertension".to_string(), 1.0)]
                .into_iter()
                .collect();
        cfg.outcome_coefficients =
            [("age".to_string(), 0.22), ("hist_hypertension".to_string(), 0.12)]
                .into_iter()
                .collect();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
            Ok(())
        };
        prob("surgery_rate", self.surgery_rate)?;
        prob("prior_aspiration_rate", self.prior_aspiration_rate)?;
        prob("base_risk", self.base_risk)?;
        prob("negative_report_rate", self.negative_report_rate)?;
        if !(self.offset_decay > 0.0 && self.offset_decay <= 1.0) {
            return Err(Error::Config(format!(
                "offset_decay must be in (0, 1], got {}",
                self.offset_decay
            )));
        }
        if let Some(d) = self.offset_max_days {
            if d == 0 {
                return Err(Error::Config("offset_max_days must be >= 1".into()));
            }
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::Config(format!("noise_sd must be >= 0, got {}", self.noise_sd)));
        }
        if !(self.gender_opioid_multiplier > 0.0 && self.gender_opioid_multiplier.is_finite()) {
            return Err(Error::Config(format!(
                "gender_opioid_multiplier must be > 0, got {}",
                self.gender_opioid_multiplier
            )));
        }
        if !(self.mme_dose_response >= 0.0 && self.mme_dose_response.is_finite()) {
            return Err(Error::Config(format!(
                "mme_dose_response must be >= 0, got {}",
                self.mme_dose_response
            )));
        }
        for key in self.treatment_intercepts.keys() {
            key.parse::<DrugClass>()
                .map_err(|_| Error::Config(format!("treatment_intercepts: unknown class {key:?}")))?;
        }
        for map_name in ["confounder_strengths", "outcome_coefficients"] {
            let map = if map_name == "confounder_strengths" {
                &self.confounder_strengths
            } else {
                &self.outcome_coefficients
            };
            for (key, v) in map {
                if !COVARIATE_KEYS.contains(&key.as_str()) {
                    return Err(Error::Config(format!(
                        "{map_name}: unknown covariate {key:?}; valid: {}",
                        COVARIATE_KEYS.join(", ")
                    )));
                }
                if !v.is_finite() {
                    return Err(Error::Config(format!("{map_name}.{key} must be finite")));
                }
            }
        }
        for (key, v) in &self.effect_coefficients {
            key.parse::<Treatment>()
                .map_err(|e| Error::Config(format!("effect_coefficients: {e}")))?;
            if !v.is_finite() || v.abs() > 1.0 {
                return Err(Error::Config(format!(
                    "effect_coefficients.{key} must be finite in [-1, 1], got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Treatments with a configured effect coefficient.
    pub fn configured_treatments(&self) -> Vec<Treatment> {
        self.effect_coefficients.keys().map(|k| k.parse().expect("validated")).collect()
    }

    /// Render as the flat `key = value` config format (the echo file).
    pub fn to_ini(&self) -> String {
        let mut s = String::from("[generator]\n");
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        push("n_admissions", self.n_admissions.to_string());
        push("seed", self.seed.to_string());
        push("surgery_rate", self.surgery_rate.to_string());
        push("prior_aspiration_rate", self.prior_aspiration_rate.to_string());
        push("base_risk", self.base_risk.to_string());
        push("noise_sd", self.noise_sd.to_string());
        push("gender_opioid_multiplier", self.gender_opioid_multiplier.to_string());
        push("mme_dose_response", self.mme_dose_response.to_string());
        push("offset_decay", self.offset_decay.to_string());
        push(
            "offset_max_days",
            self.offset_max_days.map(|d| d.to_string()).unwrap_or_else(|| "none".into()),
        );
        push("negative_report_rate", self.negative_report_rate.to_string());
        for (k, v) in &self.treatment_intercepts {
            push(&format!("intercept.{k}"), v.to_string());
        }
        for (k, v) in &self.confounder_strengths {
            push(&format!("confounder.{k}"), v.to_string());
        }
        for (k, v) in &self.outcome_coefficients {
            push(&format!("outcome.{k}"), v.to_string());
        }
        for (k, v) in &self.effect_coefficients {
            push(&format!("effect.{k}"), v.to_string());
        }
        s
    }
}

/// Potential outcomes of one admission under one treatment toggled on/off,
/// with the underlying risk probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PotentialOutcome {
    pub y1: bool,
    pub y0: bool,
    pub p1: f64,
    pub p0: f64,
}

/// Generator-known truth for one admission.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissionTruth {
    pub admission_id: String,
    /// Surgical and without prior-aspiration history: part of the causal
    /// analysis population.
    pub eligible: bool,
    /// Observed aspiration outcome under the assigned treatments.
    pub outcome: bool,
    /// Chest X-ray delay after the last surgery, for aspirating admissions.
    pub aspiration_offset_min: Option<i64>,
    /// Potential outcomes per configured treatment (eligible admissions).
    pub per_treatment: BTreeMap<String, PotentialOutcome>,
}

/// Ground truth for a generated population.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub admissions: Vec<AdmissionTruth>,
    /// mean(Y(1) - Y(0)) over the eligible population, per treatment.
    pub analytic_ate: BTreeMap<String, f64>,
}

impl GroundTruth {
    /// Admissions that aspirated with the X-ray within `window_days` of the
    /// last surgery: the set a correct cohort selector must label positive.
    pub fn in_window_positive_ids(&self, window_days: i64) -> BTreeSet<String> {
        self.admissions
            .iter()
            .filter(|a| {
                a.eligible
                    && a.outcome
                    && a.aspiration_offset_min
                        .map(|m| m <= window_days * MINUTES_PER_DAY)
                        .unwrap_or(false)
            })
            .map(|a| a.admission_id.clone())
            .collect()
    }
}

struct Resolved {
    intercepts: [f64; 6],
    med_taus: [f64; 6],
    site_taus: [f64; 10],
    conf: CovariateCoefs,
    out: CovariateCoefs,
}

#[derive(Default, Clone, Copy)]
struct CovariateCoefs {
    age: f64,
    gender_male: f64,
    hist: [f64; 6],
    los_days: f64,
}

impl CovariateCoefs {
    fn from_map(map: &BTreeMap<String, f64>) -> Self {
        let mut c = CovariateCoefs::default();
        for (k, v) in map {
            match k.as_str() {
                "age" => c.age = *v,
                "gender_male" => c.gender_male = *v,
                "hist_stroke" => c.hist[0] = *v,
                "hist_dyslipidemia" => c.hist[1] = *v,
                "hist_dysphagia" => c.hist[2] = *v,
                "hist_obesity" => c.hist[3] = *v,
                "hist_hypertension" => c.hist[4] = *v,
                "hist_diabetes" => c.hist[5] = *v,
                "los_days" => c.los_days = *v,
                _ => unreachable!("validated covariate key"),
            }
        }
        c
    }

    fn dot(&self, x: &Covariates) -> f64 {
        let mut acc = self.age * x.age_u + self.gender_male * x.gender_male;
        for i in 0..6 {
            acc += self.hist[i] * x.hist[i];
        }
        acc + self.los_days * x.los_u
    }
}

struct Covariates {
    age_u: f64,
    gender_male: f64,
    hist: [f64; 6],
    los_u: f64,
}

fn class_index(c: DrugClass) -> usize {
    DrugClass::ALL.iter().position(|x| *x == c).expect("class in ALL")
}

fn site_index(s: SurgerySite) -> usize {
    SurgerySite::ALL.iter().position(|x| *x == s).expect("site in ALL")
}

fn resolve(cfg: &GeneratorConfig) -> Resolved {
    let mut intercepts = [0.0; 6];
    for (i, class) in DrugClass::ALL.iter().enumerate() {
        intercepts[i] = cfg
            .treatment_intercepts
            .get(class.as_str())
            .copied()
            .unwrap_or_else(|| default_intercept(*class));
    }
    let mut med_taus = [0.0; 6];
    let mut site_taus = [0.0; 10];
    for (key, tau) in &cfg.effect_coefficients {
        match key.parse::<Treatment>().expect("validated") {
            Treatment::Med(c) => med_taus[class_index(c)] = *tau,
            Treatment::Site(s) => site_taus[site_index(s)] = *tau,
        }
    }
    Resolved {
        intercepts,
        med_taus,
        site_taus,
        conf: CovariateCoefs::from_map(&cfg.confounder_strengths),
        out: CovariateCoefs::from_map(&cfg.outcome_coefficients),
    }
}

/// Everything the SCM draws for one admission before outcomes are realized.
struct Draw {
    subject_id: String,
    admission_id: String,
    age: i64,
    gender: Gender,
    language: String,
    race: String,
    history: BTreeSet<HistoryFlag>,
    prior_aspiration: bool,
    t_adm: Timestamp,
    surgeries: Vec<SurgeryEvent>,
    cutoff: Timestamp,
    covariates: Covariates,
    med_assigned: [bool; 6],
    site_flags: [bool; 10],
    /// Potential opioid events (attached only when the opioid class is
    /// assigned; always drawn so counterfactual dose exists).
    opioid_events: Vec<MedicationEvent>,
    potential_mme: f64,
    other_events: Vec<MedicationEvent>,
    noise: f64,
    u_outcome: f64,
}

fn weighted_choice<'a, T>(rng: &mut ChaCha8Rng, items: &'a [(T, f64)]) -> &'a T {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut u = rng.random_range(0.0..total);
    for (item, w) in items {
        if u < *w {
            return item;
        }
        u -= w;
    }
    &items[items.len() - 1].0
}

fn sample_geometric_days(rng: &mut ChaCha8Rng, p: f64, max_days: Option<u32>) -> i64 {
    if p >= 1.0 {
        return 0;
    }
    let q = 1.0 - p;
    let u: f64 = match max_days {
        // Truncated inverse CDF: day index <= max_days - 1, so the offset in
        // minutes stays strictly inside the window.
        Some(k) => {
            let cap = 1.0 - q.powi(k as i32);
            rng.random_range(0.0..1.0) * cap
        }
        None => rng.random_range(0.0..1.0),
    };
    let k = ((1.0 - u).ln() / q.ln()).floor() as i64;
    match max_days {
        Some(cap) => k.clamp(0, cap as i64 - 1),
        None => k.max(0),
    }
}

fn draw_admission(
    cfg: &GeneratorConfig,
    res: &Resolved,
    idx: usize,
    rng: &mut ChaCha8Rng,
    table: &MmeTable,
) -> Draw {
    let age_dist = Normal::<f64>::new(62.0, 15.0).expect("valid normal");
    let age = (age_dist.sample(rng).round() as i64).clamp(18, 95);
    let gender = if rng.random_range(0.0..1.0) < 0.5 { Gender::Male } else { Gender::Female };
    let language = weighted_choice(rng, LANGUAGES).to_string();
    let race = weighted_choice(rng, RACES).to_string();

    let mut history = BTreeSet::new();
    let prior_aspiration = rng.random_range(0.0..1.0) < cfg.prior_aspiration_rate;
    if prior_aspiration {
        history.insert(HistoryFlag::PriorAspiration);
    }
    let mut hist_x = [0.0; 6];
    for (i, (flag, prev)) in HISTORY_PREVALENCE.iter().enumerate() {
        if rng.random_range(0.0..1.0) < *prev {
            history.insert(*flag);
            hist_x[i] = 1.0;
        }
    }

    let t_adm = Timestamp(rng.random_range(0..3_000_000i64));

    let surgical = rng.random_range(0.0..1.0) < cfg.surgery_rate;
    let mut surgeries = Vec::new();
    if surgical {
        let n_surg = *weighted_choice(rng, &[(1usize, 0.6), (2, 0.3), (3, 0.1)]);
        let mut t = t_adm.0 + rng.random_range(720..=7200);
        for _ in 0..n_surg {
            let site = *weighted_choice(rng, SITE_WEIGHTS);
            surgeries.push(SurgeryEvent { time: Timestamp(t), site });
            t += rng.random_range(720..=4320);
        }
    }
    let cutoff = surgeries.last().map(|s| s.time).unwrap_or(Timestamp(t_adm.0 + 2880));
    let los_days = cutoff.days_since(t_adm);

    let covariates = Covariates {
        age_u: ((age as f64 - 62.0) / 33.0).clamp(-1.0, 1.0),
        gender_male: if gender == Gender::Male { 1.0 } else { 0.0 },
        hist: hist_x,
        los_u: ((los_days - 3.0) / 3.0).clamp(-1.0, 1.0),
    };

    let conf_term = res.conf.dot(&covariates);
    let mut med_assigned = [false; 6];
    for (i, _) in DrugClass::ALL.iter().enumerate() {
        let p = sigmoid(res.intercepts[i] + conf_term);
        med_assigned[i] = rng.random_range(0.0..1.0) < p;
    }

    let mut site_flags = [false; 10];
    for s in &surgeries {
        site_flags[site_index(s.site)] = true;
    }

    // Potential opioid stream: drawn for everyone so the counterfactual dose
    // under treatment is defined.
    let dose_mult =
        if gender == Gender::Male { cfg.gender_opioid_multiplier } else { 1.0 };
    let mme_dist = LogNormal::new(6.0f64.ln(), 0.7).expect("valid lognormal");
    let n_opioid_events = rng.random_range(1..=4usize);
    let opioid_drugs: [(&str, DoseUnit, f64); 4] = [
        ("morphine", DoseUnit::Mg, 1.0),
        ("oxycodone", DoseUnit::Mg, 1.5),
        ("hydromorphone", DoseUnit::Mg, 4.0),
        ("fentanyl", DoseUnit::Mcg, 0.1),
    ];
    let mut opioid_events = Vec::with_capacity(n_opioid_events);
    for _ in 0..n_opioid_events {
        let (name, unit, factor) = opioid_drugs[rng.random_range(0..opioid_drugs.len())];
        let mme = mme_dist.sample(rng) * dose_mult;
        let time = Timestamp(rng.random_range(t_adm.0..=cutoff.0));
        opioid_events.push(MedicationEvent {
            time,
            drug_class: DrugClass::Opioid,
            drug_name: name.to_string(),
            dose: mme / factor,
            unit,
        });
    }
    opioid_events.sort_by_key(|e| e.time);
    let potential_mme =
        max_daily_mme(&opioid_events, t_adm, cutoff, 0, table).expect("generated opioids convert");

    // Non-opioid medication events for assigned classes.
    let mut other_events = Vec::new();
    for (i, class) in DrugClass::ALL.iter().enumerate() {
        if *class == DrugClass::Opioid || !med_assigned[i] {
            continue;
        }
        let (name, unit, lo, hi) = match class {
            DrugClass::NonOpioidAnalgesic => ("acetaminophen", DoseUnit::Mg, 325.0, 1000.0),
            DrugClass::Insulin => ("insulin_regular", DoseUnit::Units, 2.0, 10.0),
            DrugClass::Antiemetic => ("ondansetron", DoseUnit::Mg, 4.0, 8.0),
            DrugClass::Antidiabetic => ("metformin", DoseUnit::Mg, 500.0, 1000.0),
            DrugClass::SalineFlush => ("saline_flush", DoseUnit::Ml, 3.0, 10.0),
            DrugClass::Opioid => unreachable!(),
        };
        for _ in 0..rng.random_range(1..=2usize) {
            other_events.push(MedicationEvent {
                time: Timestamp(rng.random_range(t_adm.0..=cutoff.0)),
                drug_class: *class,
                drug_name: name.to_string(),
                dose: rng.random_range(lo..=hi),
                unit,
            });
        }
    }

    let noise = if cfg.noise_sd > 0.0 {
        Normal::new(0.0, cfg.noise_sd).expect("valid normal").sample(rng)
    } else {
        0.0
    };
    let u_outcome = rng.random_range(0.0..1.0);

    Draw {
        subject_id: format!("s{idx:06}"),
        admission_id: format!("a{idx:06}"),
        age,
        gender,
        language,
        race,
        history,
        prior_aspiration,
        t_adm,
        surgeries,
        cutoff,
        covariates,
        med_assigned,
        site_flags,
        opioid_events,
        potential_mme,
        other_events,
        noise,
        u_outcome,
    }
}

/// Outcome risk with one treatment optionally forced on or off.
fn risk(cfg: &GeneratorConfig, res: &Resolved, d: &Draw, force: Option<(Treatment, bool)>) -> f64 {
    let mut r = cfg.base_risk + res.out.dot(&d.covariates) + d.noise;
    for (i, class) in DrugClass::ALL.iter().enumerate() {
        let mut on = d.med_assigned[i];
        if let Some((Treatment::Med(c), v)) = force {
            if c == *class {
                on = v;
            }
        }
        if on {
            r += res.med_taus[i];
            if *class == DrugClass::Opioid {
                r += cfg.mme_dose_response * d.potential_mme / 100.0;
            }
        }
    }
    for (i, site) in SurgerySite::ALL.iter().enumerate() {
        let mut on = d.site_flags[i];
        if let Some((Treatment::Site(s), v)) = force {
            if s == *site {
                on = v;
            }
        }
        if on {
            r += res.site_taus[i];
        }
    }
    r.clamp(0.0, 1.0)
}

fn build_admission(
    cfg: &GeneratorConfig,
    res: &Resolved,
    idx: usize,
    table: &MmeTable,
) -> (AdmissionBundle, AdmissionTruth) {
    let mut rng = rng_for(cfg.seed, Domain::Admission, idx as u64);
    let d = draw_admission(cfg, res, idx, &mut rng, table);

    let surgical = !d.surgeries.is_empty();
    let eligible = surgical && !d.prior_aspiration;

    let p_obs = if surgical { risk(cfg, res, &d, None) } else { 0.0 };
    let outcome = d.u_outcome < p_obs;

    let mut per_treatment = BTreeMap::new();
    if eligible {
        for t in cfg.configured_treatments() {
            let p1 = risk(cfg, res, &d, Some((t, true)));
            let p0 = risk(cfg, res, &d, Some((t, false)));
            per_treatment.insert(
                t.id(),
                PotentialOutcome { y1: d.u_outcome < p1, y0: d.u_outcome < p0, p1, p0 },
            );
        }
    }

    let mut medications: Vec<MedicationEvent> = Vec::new();
    if d.med_assigned[class_index(DrugClass::Opioid)] {
        medications.extend(d.opioid_events.iter().cloned());
    }
    medications.extend(d.other_events.iter().cloned());

    let mut reports = Vec::new();
    if rng.random_range(0.0..1.0) < cfg.negative_report_rate {
        let text = NEGATIVE_REPORT_TEMPLATES
            [rng.random_range(0..NEGATIVE_REPORT_TEMPLATES.len())];
        let t = Timestamp(d.t_adm.0 + rng.random_range(60..=1440));
        reports.push(RadiologyReport::new(t, text));
    }

    let mut aspiration_offset_min = None;
    if outcome && surgical {
        let day = sample_geometric_days(&mut rng, cfg.offset_decay, cfg.offset_max_days);
        let offset = day * MINUTES_PER_DAY + rng.random_range(0..MINUTES_PER_DAY);
        aspiration_offset_min = Some(offset);
        let t_cxr = Timestamp(d.cutoff.0 + offset);
        let text =
            POSITIVE_REPORT_TEMPLATES[rng.random_range(0..POSITIVE_REPORT_TEMPLATES.len())];
        reports.push(RadiologyReport::new(t_cxr, text));
    }

    // Post-cutoff medications: present in the record, invisible to features.
    if surgical && rng.random_range(0.0..1.0) < 0.3 {
        let classes = [DrugClass::Opioid, DrugClass::NonOpioidAnalgesic, DrugClass::Antiemetic];
        let class = classes[rng.random_range(0..classes.len())];
        let (name, unit, dose) = match class {
            DrugClass::Opioid => ("morphine", DoseUnit::Mg, 4.0 + rng.random_range(0.0..6.0)),
            DrugClass::NonOpioidAnalgesic => {
                ("acetaminophen", DoseUnit::Mg, 325.0 + rng.random_range(0.0..600.0))
            }
            _ => ("ondansetron", DoseUnit::Mg, 4.0),
        };
        medications.push(MedicationEvent {
            time: Timestamp(d.cutoff.0 + rng.random_range(30..=2880)),
            drug_class: class,
            drug_name: name.to_string(),
            dose,
            unit,
        });
    }

    medications.sort_by_key(|e| e.time);
    reports.sort_by_key(|r| r.time);

    let last_event = d
        .surgeries
        .iter()
        .map(|s| s.time)
        .chain(medications.iter().map(|m| m.time))
        .chain(reports.iter().map(|r| r.time))
        .max()
        .unwrap_or(d.t_adm);
    let t_discharge = Timestamp(last_event.0 + rng.random_range(1440..=10080));

    let bundle = AdmissionBundle {
        subject_id: d.subject_id.clone(),
        admission_id: d.admission_id.clone(),
        t_adm: d.t_adm,
        t_discharge,
        age: d.age,
        gender: d.gender,
        language: d.language.clone(),
        race: d.race.clone(),
        history: d.history.clone(),
        surgeries: d.surgeries.clone(),
        medications,
        reports,
    };
    let truth = AdmissionTruth {
        admission_id: d.admission_id,
        eligible,
        outcome: outcome && surgical,
        aspiration_offset_min,
        per_treatment,
    };
    (bundle, truth)
}

/// Generate a population of admission bundles with ground truth. Pure in
/// `config`: the same configuration yields byte-identical output.
pub fn generate(config: &GeneratorConfig) -> Result<(Vec<AdmissionBundle>, GroundTruth)> {
    config.validate()?;
    let res = resolve(config);
    let table = MmeTable::conventional();

    let pairs: Vec<(AdmissionBundle, AdmissionTruth)> = (0..config.n_admissions)
        .into_par_iter()
        .map(|idx| build_admission(config, &res, idx, &table))
        .collect();

    let mut bundles = Vec::with_capacity(pairs.len());
    let mut admissions = Vec::with_capacity(pairs.len());
    for (b, t) in pairs {
        bundles.push(b);
        admissions.push(t);
    }

    let mut analytic_ate = BTreeMap::new();
    let eligible: Vec<&AdmissionTruth> = admissions.iter().filter(|a| a.eligible).collect();
    if !eligible.is_empty() {
        for t in config.configured_treatments() {
            let id = t.id();
            let sum: f64 = eligible
                .iter()
                .map(|a| {
                    let po = &a.per_treatment[&id];
                    (po.y1 as i64 - po.y0 as i64) as f64
                })
                .sum();
            analytic_ate.insert(id, sum / eligible.len() as f64);
        }
    }

    Ok((bundles, GroundTruth { admissions, analytic_ate }))
}

/// Monte-Carlo estimate of the population ATE of `treatment` under the SCM,
/// by brute-force potential-outcome simulation over `n_mc` eligible
/// admissions drawn from an independent stream.
pub fn true_ate(config: &GeneratorConfig, treatment: &str, n_mc: usize) -> Result<f64> {
    config.validate()?;
    let t: Treatment = treatment.parse()?;
    if !config.effect_coefficients.contains_key(treatment) {
        return Err(Error::Data(format!(
            "treatment {treatment:?} is not configured; configured: {}",
            config.effect_coefficients.keys().cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    if n_mc == 0 {
        return Err(Error::Data("n_mc must be positive".into()));
    }
    let res = resolve(config);
    let table = MmeTable::conventional();

    let mut sum = 0.0;
    let mut count = 0usize;
    let max_attempts = (n_mc as u64).saturating_mul(200).max(100_000);
    let mut idx: u64 = 0;
    while count < n_mc {
        if idx >= max_attempts {
            return Err(Error::Data(format!(
                "could not draw {n_mc} eligible admissions in {max_attempts} attempts \
                 (surgery_rate = {})",
                config.surgery_rate
            )));
        }
        let mut rng = rng_for(config.seed, Domain::TrueAte, idx);
        let d = draw_admission(config, &res, idx as usize, &mut rng, &table);
        idx += 1;
        if d.surgeries.is_empty() || d.prior_aspiration {
            continue;
        }
        let p1 = risk(config, &res, &d, Some((t, true)));
        let p0 = risk(config, &res, &d, Some((t, false)));
        sum += p1 - p0;
        count += 1;
    }
    Ok(sum / n_mc as f64)
}

/// Write the five domain CSVs plus `ground_truth.csv`
/// (`admission_id,treatment,y1,y0`, eligible admissions only) and a config
/// echo file.
pub fn write_outputs(
    dir: &Path,
    bundles: &[AdmissionBundle],
    truth: &GroundTruth,
    config: &GeneratorConfig,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::domain::csv_io::write_bundles(dir, bundles)?;

    let path = dir.join(GROUND_TRUTH_FILE);
    let f = std::fs::File::create(&path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    w.write_record(["admission_id", "treatment", "y1", "y0"])?;
    for a in truth.admissions.iter().filter(|a| a.eligible) {
        for (treatment, po) in &a.per_treatment {
            w.write_record([
                a.admission_id.as_str(),
                treatment.as_str(),
                if po.y1 { "1" } else { "0" },
                if po.y0 { "1" } else { "0" },
            ])?;
        }
    }
    w.flush()?;

    std::fs::write(dir.join(CONFIG_ECHO_FILE), config.to_ini())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_risk_degenerate_has_zero_positives() {
        let mut cfg = GeneratorConfig::randomized(0.0, 2000, 9);
        cfg.base_risk = 0.0;
        cfg.noise_sd = 0.0;
        cfg.outcome_coefficients.clear();
        let (_, truth) = generate(&cfg).unwrap();
        assert!(truth.admissions.iter().all(|a| !a.outcome));
        assert_eq!(truth.analytic_ate["opioid"], 0.0);
    }

    #[test]
    fn ground_truth_ate_matches_configured_tau() {
        let cfg = GeneratorConfig::randomized(0.2, 50_000, 7);
        let (_, truth) = generate(&cfg).unwrap();
        let ate = truth.analytic_ate["opioid"];
        assert!((ate - 0.2).abs() <= 0.01, "ground-truth ATE {ate} not within 0.01 of 0.2");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig::paper_like(500, 123);
        let (b1, t1) = generate(&cfg).unwrap();
        let (b2, t2) = generate(&cfg).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn true_ate_null_effect_is_zero() {
        let cfg = GeneratorConfig::randomized(0.0, 10, 5);
        let ate = true_ate(&cfg, "opioid", 4000).unwrap();
        assert!(ate.abs() < 0.02, "null-effect true ATE was {ate}");
    }

    #[test]
    fn true_ate_additive_recovers_tau() {
        let cfg = GeneratorConfig::randomized(0.25, 10, 5);
        let ate = true_ate(&cfg, "opioid", 4000).unwrap();
        assert!((ate - 0.25).abs() < 0.02, "additive true ATE was {ate}");
    }

    #[test]
    fn true_ate_under_clamping_shrinks() {
        let mut cfg = GeneratorConfig::randomized(0.25, 10, 5);
        cfg.base_risk = 0.9;
        let ate = true_ate(&cfg, "opioid", 4000).unwrap();
        assert!(ate < 0.25 - 0.05, "clamped true ATE was {ate}, expected well below 0.25");
    }

    #[test]
    fn true_ate_rejects_unconfigured_treatment() {
        let cfg = GeneratorConfig::randomized(0.25, 10, 5);
        assert!(true_ate(&cfg, "site:head", 100).is_err());
        assert!(true_ate(&cfg, "bogus", 100).is_err());
    }

    #[test]
    fn analytic_ate_close_to_true_ate() {
        let cfg = GeneratorConfig::confounded(0.2, 20_000, 3);
        let (_, truth) = generate(&cfg).unwrap();
        let mc = true_ate(&cfg, "opioid", 20_000).unwrap();
        // Y(1)-Y(0) differences are Bernoulli-bounded; 3 MC standard errors.
        let n_eligible = truth.admissions.iter().filter(|a| a.eligible).count() as f64;
        let tol = 3.0 * (1.0 / n_eligible.sqrt() + 1.0 / (20_000f64).sqrt());
        assert!(
            (truth.analytic_ate["opioid"] - mc).abs() <= tol,
            "analytic {} vs MC {mc}, tol {tol}",
            truth.analytic_ate["opioid"]
        );
    }

    #[test]
    fn offsets_concentrate_within_seven_days() {
        let cfg = GeneratorConfig::paper_like(60_000, 11);
        let (_, truth) = generate(&cfg).unwrap();
        let offsets: Vec<i64> = truth
            .admissions
            .iter()
            .filter_map(|a| a.aspiration_offset_min)
            .collect();
        assert!(offsets.len() > 200, "too few positives to check: {}", offsets.len());
        let within =
            offsets.iter().filter(|&&m| m <= 7 * MINUTES_PER_DAY).count() as f64;
        let frac = within / offsets.len() as f64;
        assert!(frac >= 0.95, "only {frac:.3} of aspirations within 7 days");
    }

    #[test]
    fn invalid_config_names_the_field() {
        let mut cfg = GeneratorConfig::paper_like(10, 1);
        cfg.surgery_rate = 1.5;
        let err = generate(&cfg).unwrap_err().to_string();
        assert!(err.contains("surgery_rate"), "{err}");

        let mut cfg = GeneratorConfig::paper_like(10, 1);
        cfg.confounder_strengths.insert("bmi".into(), 1.0);
        let err = generate(&cfg).unwrap_err().to_string();
        assert!(err.contains("bmi"), "{err}");
    }
}
