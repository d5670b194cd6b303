//! Run configuration: a flat `key = value` format with `[section]` headers.
//!
//! Every key has a default matching the published settings (seed 42, 7-day
//! window, 70/30 split, 0.5 threshold, 100 trees, 250 hidden units, 500
//! epochs, clip [0.001, 0.999], 1000 bootstrap replicates), so a run with an
//! empty config reproduces them. Unknown keys are configuration errors that
//! name the key.

use std::collections::BTreeMap;
use std::path::Path;

use crate::domain::Treatment;
use crate::error::{Error, Result};
use crate::learn::{GbtParams, MlpParams, ModelFamily};
use crate::pipeline::DownsampleMode;
use crate::synth::GeneratorConfig;

#[derive(Debug, Clone)]
pub struct CausalSettings {
    pub n_boot: usize,
    pub level: f64,
    /// Treatments estimated by `run`/`ate` (default: all 15).
    pub treatments: Vec<Treatment>,
    /// Treatments given a gender-conditional estimate (default: opioid).
    pub cate_treatments: Vec<Treatment>,
    /// Optional opioid dose threshold (MME); None = any-exposure.
    pub dose_threshold: Option<f64>,
    pub propensity_max_depth: Option<usize>,
    pub outcome_max_depth: Option<usize>,
    pub cross_fit_folds: Option<usize>,
}

impl Default for CausalSettings {
    fn default() -> Self {
        CausalSettings {
            n_boot: 1000,
            level: 0.95,
            treatments: Treatment::all(),
            cate_treatments: vec!["opioid".parse().expect("valid")],
            dose_threshold: None,
            propensity_max_depth: None,
            outcome_max_depth: None,
            cross_fit_folds: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorSettings {
    /// Base profile: paper_like, randomized or confounded.
    pub profile: String,
    pub n_admissions: usize,
    /// Opioid effect used by the randomized/confounded profiles.
    pub tau: f64,
    /// Explicit overrides applied on top of the profile, keyed exactly like
    /// the generator's echo file.
    pub overrides: BTreeMap<String, String>,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        GeneratorSettings {
            profile: "paper_like".into(),
            n_admissions: 40_000,
            tau: 0.2,
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub window_days: i64,
    pub train_fraction: f64,
    pub threshold: f64,
    pub model: ModelFamily,
    pub downsample: DownsampleMode,
    pub tz_offset_min: i32,
    pub threads: usize,
    /// Remote labeling endpoint; None = rule-based labeler.
    pub labeler_endpoint: Option<String>,
    pub labeler_timeout_ms: u64,
    pub n_estimators: usize,
    pub gbt: GbtParams,
    pub mlp: MlpParams,
    pub generator: GeneratorSettings,
    pub causal: CausalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            window_days: 7,
            train_fraction: 0.7,
            threshold: 0.5,
            model: ModelFamily::Forest,
            downsample: DownsampleMode::Uniform,
            tz_offset_min: 0,
            threads: 0,
            labeler_endpoint: None,
            labeler_timeout_ms: 10_000,
            n_estimators: 100,
            gbt: GbtParams::default(),
            mlp: MlpParams::default(),
            generator: GeneratorSettings::default(),
            causal: CausalSettings::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| {
        Error::Config(format!("[{section}] {key}: cannot parse {value:?}"))
    })
}

fn parse_opt<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<Option<T>> {
    let v = value.trim();
    if v.eq_ignore_ascii_case("none") || v.is_empty() {
        Ok(None)
    } else {
        Ok(Some(parse_num(section, key, v)?))
    }
}

fn parse_treatments(section: &str, key: &str, value: &str) -> Result<Vec<Treatment>> {
    if value.trim() == "all" {
        return Ok(Treatment::all());
    }
    value
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<Treatment>()
                .map_err(|e| Error::Config(format!("[{section}] {key}: {e}")))
        })
        .collect()
}

impl RunConfig {
    /// Parse the flat `key = value` format. Lines starting with `#` or `;`
    /// are comments.
    pub fn from_ini(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut section = String::from("run");
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(&section, key, value)?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_ini(&text)
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("run", "seed") => self.seed = parse_num(section, key, value)?,
            ("run", "window_days") => self.window_days = parse_num(section, key, value)?,
            ("run", "train_fraction") => self.train_fraction = parse_num(section, key, value)?,
            ("run", "threshold") => self.threshold = parse_num(section, key, value)?,
            ("run", "model") => {
                self.model = value.parse().map_err(|e| Error::Config(format!("[run] model: {e}")))?
            }
            ("run", "downsample") => {
                self.downsample = match value {
                    "uniform" => DownsampleMode::Uniform,
                    "stratified" => DownsampleMode::Stratified,
                    other => {
                        return Err(Error::Config(format!(
                            "[run] downsample: unknown mode {other:?} (uniform, stratified)"
                        )))
                    }
                }
            }
            ("run", "tz_offset_min") => self.tz_offset_min = parse_num(section, key, value)?,
            ("run", "threads") => self.threads = parse_num(section, key, value)?,
            ("run", "labeler_endpoint") => {
                self.labeler_endpoint = if value.eq_ignore_ascii_case("none") || value.is_empty() {
                    None
                } else {
                    Some(value.to_string())
                }
            }
            ("run", "labeler_timeout_ms") => {
                self.labeler_timeout_ms = parse_num(section, key, value)?
            }
            ("forest", "n_estimators") => self.n_estimators = parse_num(section, key, value)?,
            ("gbt", "learning_rate") => self.gbt.learning_rate = parse_num(section, key, value)?,
            ("gbt", "n_rounds") => self.gbt.n_rounds = parse_num(section, key, value)?,
            ("gbt", "max_depth") => self.gbt.max_depth = parse_num(section, key, value)?,
            ("gbt", "lambda") => self.gbt.lambda = parse_num(section, key, value)?,
            ("gbt", "log_odds_cap") => self.gbt.log_odds_cap = parse_num(section, key, value)?,
            ("mlp", "hidden") => self.mlp.hidden = parse_num(section, key, value)?,
            ("mlp", "max_epochs") => self.mlp.max_epochs = parse_num(section, key, value)?,
            ("mlp", "batch_size") => self.mlp.batch_size = parse_num(section, key, value)?,
            ("mlp", "learning_rate") => self.mlp.learning_rate = parse_num(section, key, value)?,
            ("mlp", "tol") => self.mlp.tol = parse_num(section, key, value)?,
            ("mlp", "patience") => self.mlp.patience = parse_num(section, key, value)?,
            ("generator", "profile") => self.generator.profile = value.to_string(),
            ("generator", "n_admissions") => {
                self.generator.n_admissions = parse_num(section, key, value)?
            }
            ("generator", "tau") => self.generator.tau = parse_num(section, key, value)?,
            ("generator", _) if is_generator_override(key) => {
                self.generator.overrides.insert(key.to_string(), value.to_string());
            }
            ("causal", "n_boot") => self.causal.n_boot = parse_num(section, key, value)?,
            ("causal", "level") => self.causal.level = parse_num(section, key, value)?,
            ("causal", "treatments") => {
                self.causal.treatments = parse_treatments(section, key, value)?
            }
            ("causal", "cate_treatments") => {
                self.causal.cate_treatments = parse_treatments(section, key, value)?
            }
            ("causal", "dose_threshold") => {
                self.causal.dose_threshold = parse_opt(section, key, value)?
            }
            ("causal", "propensity_max_depth") => {
                self.causal.propensity_max_depth = parse_opt(section, key, value)?
            }
            ("causal", "outcome_max_depth") => {
                self.causal.outcome_max_depth = parse_opt(section, key, value)?
            }
            ("causal", "cross_fit_folds") => {
                self.causal.cross_fit_folds = parse_opt(section, key, value)?
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown configuration key [{section}] {key}"
                )))
            }
        }
        Ok(())
    }

    /// Resolve the generator configuration: profile, then overrides.
    pub fn resolve_generator(&self) -> Result<GeneratorConfig> {
        let g = &self.generator;
        let mut cfg = match g.profile.as_str() {
            "paper_like" => GeneratorConfig::paper_like(g.n_admissions, self.seed),
            "randomized" => GeneratorConfig::randomized(g.tau, g.n_admissions, self.seed),
            "confounded" => GeneratorConfig::confounded(g.tau, g.n_admissions, self.seed),
            other => {
                return Err(Error::Config(format!(
                    "[generator] profile: unknown profile {other:?} \
                     (paper_like, randomized, confounded)"
                )))
            }
        };
        for (key, value) in &g.overrides {
            apply_generator_override(&mut cfg, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical rendering of the resolved configuration (the echo file).
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        s.push_str("[run]\n");
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("window_days = {}\n", self.window_days));
        s.push_str(&format!("train_fraction = {}\n", self.train_fraction));
        s.push_str(&format!("threshold = {}\n", self.threshold));
        s.push_str(&format!("model = {}\n", self.model.as_str()));
        s.push_str(&format!(
            "downsample = {}\n",
            match self.downsample {
                DownsampleMode::Uniform => "uniform",
                DownsampleMode::Stratified => "stratified",
            }
        ));
        s.push_str(&format!("tz_offset_min = {}\n", self.tz_offset_min));
        s.push_str(&format!("threads = {}\n", self.threads));
        s.push_str(&format!(
            "labeler_endpoint = {}\n",
            self.labeler_endpoint.as_deref().unwrap_or("none")
        ));
        s.push_str(&format!("labeler_timeout_ms = {}\n", self.labeler_timeout_ms));
        s.push_str("\n[forest]\n");
        s.push_str(&format!("n_estimators = {}\n", self.n_estimators));
        s.push_str("\n[gbt]\n");
        s.push_str(&format!("learning_rate = {}\n", self.gbt.learning_rate));
        s.push_str(&format!("n_rounds = {}\n", self.gbt.n_rounds));
        s.push_str(&format!("max_depth = {}\n", self.gbt.max_depth));
        s.push_str("\n[mlp]\n");
        s.push_str(&format!("hidden = {}\n", self.mlp.hidden));
        s.push_str(&format!("max_epochs = {}\n", self.mlp.max_epochs));
        s.push_str("\n[generator]\n");
        s.push_str(&format!("profile = {}\n", self.generator.profile));
        s.push_str(&format!("n_admissions = {}\n", self.generator.n_admissions));
        s.push_str(&format!("tau = {}\n", self.generator.tau));
        for (k, v) in &self.generator.overrides {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s.push_str("\n[causal]\n");
        s.push_str(&format!("n_boot = {}\n", self.causal.n_boot));
        s.push_str(&format!("level = {}\n", self.causal.level));
        s.push_str(&format!(
            "treatments = {}\n",
            self.causal.treatments.iter().map(|t| t.id()).collect::<Vec<_>>().join(",")
        ));
        s.push_str(&format!(
            "cate_treatments = {}\n",
            self.causal.cate_treatments.iter().map(|t| t.id()).collect::<Vec<_>>().join(",")
        ));
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "none".into());
        s.push_str(&format!("dose_threshold = {}\n", opt(self.causal.dose_threshold)));
        let optu =
            |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "none".into());
        s.push_str(&format!(
            "propensity_max_depth = {}\n",
            optu(self.causal.propensity_max_depth)
        ));
        s.push_str(&format!("outcome_max_depth = {}\n", optu(self.causal.outcome_max_depth)));
        s.push_str(&format!("cross_fit_folds = {}\n", optu(self.causal.cross_fit_folds)));
        s
    }

    pub fn causal_options(&self) -> crate::causal::CausalOptions {
        crate::causal::CausalOptions {
            propensity_max_depth: self.causal.propensity_max_depth,
            outcome_max_depth: self.causal.outcome_max_depth,
            cross_fit_folds: self.causal.cross_fit_folds,
            clip: crate::causal::DEFAULT_CLIP,
            n_boot: self.causal.n_boot,
            level: self.causal.level,
        }
    }
}

const GENERATOR_SCALAR_KEYS: &[&str] = &[
    "seed",
    "surgery_rate",
    "prior_aspiration_rate",
    "base_risk",
    "noise_sd",
    "gender_opioid_multiplier",
    "mme_dose_response",
    "offset_decay",
    "offset_max_days",
    "negative_report_rate",
];

fn is_generator_override(key: &str) -> bool {
    GENERATOR_SCALAR_KEYS.contains(&key)
        || key.starts_with("intercept.")
        || key.starts_with("confounder.")
        || key.starts_with("outcome.")
        || key.starts_with("effect.")
}

fn apply_generator_override(cfg: &mut GeneratorConfig, key: &str, value: &str) -> Result<()> {
    let sec = "generator";
    match key {
        "seed" => cfg.seed = parse_num(sec, key, value)?,
        "surgery_rate" => cfg.surgery_rate = parse_num(sec, key, value)?,
        "prior_aspiration_rate" => cfg.prior_aspiration_rate = parse_num(sec, key, value)?,
        "base_risk" => cfg.base_risk = parse_num(sec, key, value)?,
        "noise_sd" => cfg.noise_sd = parse_num(sec, key, value)?,
        "gender_opioid_multiplier" => {
            cfg.gender_opioid_multiplier = parse_num(sec, key, value)?
        }
        "mme_dose_response" => cfg.mme_dose_response = parse_num(sec, key, value)?,
        "offset_decay" => cfg.offset_decay = parse_num(sec, key, value)?,
        "offset_max_days" => cfg.offset_max_days = parse_opt(sec, key, value)?,
        "negative_report_rate" => cfg.negative_report_rate = parse_num(sec, key, value)?,
        _ => {
            if let Some(class) = key.strip_prefix("intercept.") {
                cfg.treatment_intercepts.insert(class.to_string(), parse_num(sec, key, value)?);
            } else if let Some(cov) = key.strip_prefix("confounder.") {
                cfg.confounder_strengths.insert(cov.to_string(), parse_num(sec, key, value)?);
            } else if let Some(cov) = key.strip_prefix("outcome.") {
                cfg.outcome_coefficients.insert(cov.to_string(), parse_num(sec, key, value)?);
            } else if let Some(t) = key.strip_prefix("effect.") {
                cfg.effect_coefficients.insert(t.to_string(), parse_num(sec, key, value)?);
            } else {
                return Err(Error::Config(format!("unknown configuration key [{sec}] {key}")));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_paper_defaults() {
        let cfg = RunConfig::from_ini("").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.window_days, 7);
        assert_eq!(cfg.train_fraction, 0.7);
        assert_eq!(cfg.threshold, 0.5);
        assert_eq!(cfg.model, ModelFamily::Forest);
        assert_eq!(cfg.n_estimators, 100);
        assert_eq!(cfg.mlp.hidden, 250);
        assert_eq!(cfg.mlp.max_epochs, 500);
        assert_eq!(cfg.causal.n_boot, 1000);
        assert_eq!(cfg.causal.treatments.len(), 15);
    }

    #[test]
    fn unknown_key_errors_with_the_key_name() {
        let err = RunConfig::from_ini("[run]\nbanana = 1\n").unwrap_err().to_string();
        assert!(err.contains("banana"), "{err}");
        let err = RunConfig::from_ini("[generator]\nfruit.cherry = 2\n").unwrap_err().to_string();
        assert!(err.contains("fruit.cherry"), "{err}");
    }

    #[test]
    fn parses_sections_and_overrides() {
        let text = "\
# comment
[run]
seed = 7
model = gbt

[generator]
profile = randomized
n_admissions = 500
tau = 0.3
effect.site:head = 0.1

[causal]
treatments = opioid, site:neck
n_boot = 10
";
        let cfg = RunConfig::from_ini(text).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model, ModelFamily::Gbt);
        let gen = cfg.resolve_generator().unwrap();
        assert_eq!(gen.n_admissions, 500);
        assert_eq!(gen.seed, 7);
        assert_eq!(gen.effect_coefficients["opioid"], 0.3);
        assert_eq!(gen.effect_coefficients["site:head"], 0.1);
        assert_eq!(cfg.causal.treatments.len(), 2);
        assert_eq!(cfg.causal.n_boot, 10);
    }

    #[test]
    fn echo_round_trips() {
        let cfg = RunConfig::from_ini("[run]\nseed = 11\n[causal]\nn_boot = 50\n").unwrap();
        let echo = cfg.to_ini();
        let back = RunConfig::from_ini(&echo).unwrap();
        assert_eq!(back.seed, 11);
        assert_eq!(back.causal.n_boot, 50);
        assert_eq!(back.to_ini(), echo);
    }

    #[test]
    fn bad_treatment_in_config_is_a_config_error() {
        let err = RunConfig::from_ini("[causal]\ntreatments = bogus\n").unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
