//! End-to-end command orchestration: generate, pipeline, train, evaluate,
//! treatment-effect tables, false-negative analysis and the combined `run`.
//!
//! Artifact layout (one output directory per run):
//!
//! ```text
//! cohort.csv        admission_id,label,t_cutoff   (class-balanced cohort)
//! features.csv      admission_id,label,los_until_discharge,<features...>
//!                   (every eligible admission; causal analyses use all
//!                   rows, the predictive model uses the cohort subset)
//! exclusions.csv    admission_id,reason
//! model.json        trained model (self-describing)
//! metrics.json      accuracy/sensitivity/specificity/AUROC + confusion
//! roc_curve.csv     threshold,tpr,fpr
//! importance.csv    feature,score,rank            (forest models)
//! ate_table.{json,csv}, site_ate.csv, cate_table.{json,csv}
//! fn_profile.json, fn_sites.csv
//! fig_*.csv         figure-analogue data
//! manifest.json, config_echo.ini
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::causal::{aipw_ate, build_frame, cate_by_gender, CausalEstimate, CateReport};
use crate::config::RunConfig;
use crate::domain::{csv_io, AdmissionBundle, Gender, Treatment, MINUTES_PER_DAY};
use crate::error::{Error, Result};
use crate::eval::{
    auroc, confusion, false_negative_analysis, percentile_sorted, roc_curve, split_indices,
    EvalReport, FnInputs, FnProfile,
};
use crate::learn::{
    fit_forest, fit_gbt, fit_mlp, ForestParams, ModelFamily, ModelKind, SavedModel,
};
use crate::pipeline::features::{
    assemble_dataset, Dataset, FeatureConfig, MedianImputer,
};
use crate::pipeline::labeler::{LabelerPolicy, PhraseBank, RemoteLabeler};
use crate::pipeline::mme::MmeTable;
use crate::pipeline::{
    extract_cohort_samples, los_until_discharge_days, select_cohort, Cohort, CohortOptions,
};
use crate::synth::{generate, write_outputs};

pub const FEATURES_FILE: &str = "features.csv";
pub const COHORT_FILE: &str = "cohort.csv";
pub const EXCLUSIONS_FILE: &str = "exclusions.csv";
pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const ROC_FILE: &str = "roc_curve.csv";
pub const IMPORTANCE_FILE: &str = "importance.csv";
pub const ATE_TABLE_CSV: &str = "ate_table.csv";
pub const ATE_TABLE_JSON: &str = "ate_table.json";
pub const SITE_ATE_FILE: &str = "site_ate.csv";
pub const CATE_TABLE_CSV: &str = "cate_table.csv";
pub const CATE_TABLE_JSON: &str = "cate_table.json";
pub const FN_PROFILE_FILE: &str = "fn_profile.json";
pub const FN_SITES_FILE: &str = "fn_sites.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_ECHO_FILE: &str = "config_echo.ini";
pub const MME_TABLE_FILE: &str = "mme_table.csv";

/// The assembled analysis table: one row per eligible admission, labels,
/// the analysis-only length of stay until discharge, and the raw feature
/// matrix.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub dataset: Dataset,
    pub los_until_discharge: Vec<f64>,
}

impl FeatureTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)
            .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
        let mut header = vec![
            "admission_id".to_string(),
            "label".to_string(),
            "los_until_discharge".to_string(),
        ];
        header.extend(self.dataset.columns.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.dataset.n_rows() {
            let mut row = vec![
                self.dataset.admission_ids[i].clone(),
                self.dataset.y[i].to_string(),
                self.los_until_discharge[i].to_string(),
            ];
            for j in 0..self.dataset.columns.len() {
                let v = self.dataset.x[(i, j)];
                row.push(if v.is_finite() { v.to_string() } else { String::new() });
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(f);
        let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
        if header.len() < 4
            || header[0] != "admission_id"
            || header[1] != "label"
            || header[2] != "los_until_discharge"
        {
            return Err(Error::Data(format!(
                "{}: expected header admission_id,label,los_until_discharge,<features...>",
                path.display()
            )));
        }
        let columns: Vec<String> = header[3..].to_vec();
        let mut admission_ids = Vec::new();
        let mut y = Vec::new();
        let mut los = Vec::new();
        let mut flat: Vec<f64> = Vec::new();
        for record in rdr.records() {
            let record = record?;
            if record.len() != header.len() {
                return Err(Error::Data(format!(
                    "{}: row width {} does not match header {}",
                    path.display(),
                    record.len(),
                    header.len()
                )));
            }
            admission_ids.push(record[0].to_string());
            y.push(match &record[1] {
                "0" => 0u8,
                "1" => 1u8,
                other => {
                    return Err(Error::Data(format!("label must be 0/1, found {other:?}")))
                }
            });
            los.push(parse_cell(&record[2], path)?);
            for cell in record.iter().skip(3) {
                flat.push(parse_cell(cell, path)?);
            }
        }
        if admission_ids.is_empty() {
            return Err(Error::Data(format!("{}: no feature rows", path.display())));
        }
        let x = Array2::from_shape_vec((admission_ids.len(), columns.len()), flat)
            .map_err(|e| Error::Data(format!("ragged feature matrix: {e}")))?;
        Ok(FeatureTable {
            dataset: Dataset { admission_ids, x, y, columns },
            los_until_discharge: los,
        })
    }
}

fn parse_cell(cell: &str, path: &Path) -> Result<f64> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(f64::NAN);
    }
    cell.parse::<f64>()
        .map_err(|_| Error::Data(format!("{}: cannot parse numeric cell {cell:?}", path.display())))
}

#[derive(Debug, Clone, Serialize)]
struct CohortRow {
    admission_id: String,
    label: u8,
    t_cutoff: i64,
}

fn write_cohort_csv(path: &Path, cohort: &Cohort) -> Result<()> {
    let f = std::fs::File::create(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    w.write_record(["admission_id", "label", "t_cutoff"])?;
    for m in &cohort.positives {
        w.serialize(CohortRow { admission_id: m.admission_id.clone(), label: 1, t_cutoff: m.t_cutoff.0 })?;
    }
    for m in &cohort.negatives {
        w.serialize(CohortRow { admission_id: m.admission_id.clone(), label: 0, t_cutoff: m.t_cutoff.0 })?;
    }
    w.flush()?;
    Ok(())
}

fn read_cohort_ids(path: &Path) -> Result<Vec<String>> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(f);
    let header: Vec<&str> = rdr.headers()?.iter().collect();
    if header != ["admission_id", "label", "t_cutoff"] {
        return Err(Error::Data(format!("{}: unexpected cohort header", path.display())));
    }
    let mut ids = Vec::new();
    for record in rdr.records() {
        ids.push(record?[0].to_string());
    }
    Ok(ids)
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, inputs: &[&str]) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        command: &'a str,
        version: &'a str,
        seed: u64,
        config_sha256: String,
        inputs: Vec<String>,
    }
    let echo = cfg.to_ini();
    let digest = Sha256::digest(echo.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    let manifest = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_sha256: hex,
        inputs: inputs.iter().map(|s| s.to_string()).collect(),
    };
    std::fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(out.join(CONFIG_ECHO_FILE), echo)?;
    Ok(())
}

/// `generate`: write the synthetic CSVs, ground truth, MME table, config
/// echo and manifest.
pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<(usize, usize)> {
    let gen_cfg = cfg.resolve_generator()?;
    let (bundles, truth) = generate(&gen_cfg)?;
    std::fs::create_dir_all(out)?;
    write_outputs(out, &bundles, &truth, &gen_cfg)?;
    MmeTable::conventional().to_csv(&out.join(MME_TABLE_FILE))?;
    write_manifest(out, "generate", cfg, &[])?;
    let positives = truth.admissions.iter().filter(|a| a.outcome).count();
    Ok((bundles.len(), positives))
}

fn labeler_from(cfg: &RunConfig) -> LabelerPolicy {
    match &cfg.labeler_endpoint {
        Some(url) => LabelerPolicy::Remote(RemoteLabeler::new(
            url.clone(),
            std::time::Duration::from_millis(cfg.labeler_timeout_ms),
        )),
        None => LabelerPolicy::RuleBased(PhraseBank::default()),
    }
}

fn feature_config(cfg: &RunConfig, input: &Path) -> Result<FeatureConfig> {
    let mme_path = input.join(MME_TABLE_FILE);
    let mme_table =
        if mme_path.exists() { MmeTable::from_csv(&mme_path)? } else { MmeTable::conventional() };
    Ok(FeatureConfig { tz_offset_min: cfg.tz_offset_min, mme_table, ..FeatureConfig::default() })
}

/// Everything the pipeline step produces, in memory.
pub struct PipelineOutput {
    pub table: FeatureTable,
    pub cohort: Cohort,
    /// Admission ids of the class-balanced training cohort.
    pub cohort_ids: Vec<String>,
}

/// `pipeline`: validate bundles, select the cohort, extract features and
/// write cohort/features/exclusions plus the figure-analogue CSVs.
pub fn cmd_pipeline(cfg: &RunConfig, input: &Path, out: &Path) -> Result<PipelineOutput> {
    std::fs::create_dir_all(out)?;
    let feature_cfg = feature_config(cfg, input)?;
    let bundles = csv_io::read_bundles(input)?;

    // Validation first; violations populate the audit log and abort.
    let known = feature_cfg.mme_table.known_names();
    let mut violation_rows: Vec<(String, String)> = Vec::new();
    for b in &bundles {
        for v in crate::domain::validate_bundle(b, &known) {
            violation_rows.push((b.admission_id.clone(), format!("invalid: {v}")));
        }
    }
    if !violation_rows.is_empty() {
        write_exclusions(&out.join(EXCLUSIONS_FILE), &violation_rows)?;
        return Err(Error::Data(format!(
            "{} invariant violations across {} admissions; see {}",
            violation_rows.len(),
            bundles.len(),
            out.join(EXCLUSIONS_FILE).display()
        )));
    }

    let labeler = labeler_from(cfg);
    let options = CohortOptions {
        window_days: cfg.window_days,
        seed: cfg.seed,
        downsample: cfg.downsample,
    };
    let cohort = select_cohort(&bundles, &labeler, &options)?;

    // Feature rows for every eligible admission (positives plus all
    // eligible negatives), ordered by admission index.
    let pos_samples = extract_cohort_samples(&bundles, &cohort.positives, true, &feature_cfg)?;
    let neg_samples =
        extract_cohort_samples(&bundles, &cohort.eligible_negatives, false, &feature_cfg)?;
    let mut merged: Vec<(usize, crate::pipeline::features::LabeledSample)> = cohort
        .positives
        .iter()
        .map(|m| m.bundle_index)
        .zip(pos_samples)
        .chain(cohort.eligible_negatives.iter().map(|m| m.bundle_index).zip(neg_samples))
        .collect();
    merged.sort_by_key(|(idx, _)| *idx);
    let los: Vec<f64> =
        merged.iter().map(|(idx, _)| los_until_discharge_days(&bundles[*idx])).collect();
    let samples: Vec<_> = merged.into_iter().map(|(_, s)| s).collect();
    let dataset = assemble_dataset(&samples, &feature_cfg)?;
    let table = FeatureTable { dataset, los_until_discharge: los };

    table.write_csv(&out.join(FEATURES_FILE))?;
    write_cohort_csv(&out.join(COHORT_FILE), &cohort)?;
    let exclusion_rows: Vec<(String, String)> = cohort
        .exclusions
        .iter()
        .map(|e| (e.admission_id.clone(), e.reason.clone()))
        .collect();
    write_exclusions(&out.join(EXCLUSIONS_FILE), &exclusion_rows)?;
    write_figures(out, &bundles, &cohort, &table)?;

    let cohort_ids: Vec<String> = cohort
        .positives
        .iter()
        .chain(cohort.negatives.iter())
        .map(|m| m.admission_id.clone())
        .collect();
    Ok(PipelineOutput { table, cohort, cohort_ids })
}

fn write_exclusions(path: &Path, rows: &[(String, String)]) -> Result<()> {
    let f = std::fs::File::create(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    w.write_record(["admission_id", "reason"])?;
    for (id, reason) in rows {
        w.write_record([id.as_str(), reason.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_figures(
    out: &Path,
    bundles: &[AdmissionBundle],
    cohort: &Cohort,
    table: &FeatureTable,
) -> Result<()> {
    // Days between the cutoff surgery and the confirming report.
    let mut day_counts: BTreeMap<i64, usize> = BTreeMap::new();
    for m in &cohort.positives {
        if let Some(t_event) = m.t_event {
            *day_counts.entry((t_event.0 - m.t_cutoff.0) / MINUTES_PER_DAY).or_insert(0) += 1;
        }
    }
    write_rows(
        &out.join("fig_postop_days.csv"),
        &["day", "count"],
        day_counts.iter().map(|(d, c)| vec![d.to_string(), c.to_string()]),
    )?;

    // Gender split among eligible admissions vs cohort positives.
    let gender_pct = |members: &[usize]| -> (f64, f64) {
        if members.is_empty() {
            return (0.0, 0.0);
        }
        let male =
            members.iter().filter(|&&i| bundles[i].gender == Gender::Male).count() as f64;
        let n = members.len() as f64;
        (100.0 * male / n, 100.0 * (n - male) / n)
    };
    let eligible: Vec<usize> = cohort
        .positives
        .iter()
        .chain(cohort.eligible_negatives.iter())
        .map(|m| m.bundle_index)
        .collect();
    let positive_idx: Vec<usize> = cohort.positives.iter().map(|m| m.bundle_index).collect();
    let (em, ef) = gender_pct(&eligible);
    let (pm, pf) = gender_pct(&positive_idx);
    write_rows(
        &out.join("fig_gender_split.csv"),
        &["population", "male_pct", "female_pct"],
        [
            vec!["eligible".to_string(), em.to_string(), ef.to_string()],
            vec!["positives".to_string(), pm.to_string(), pf.to_string()],
        ]
        .into_iter(),
    )?;

    // Max-daily opioid MME by gender among cohort positives.
    let mme_col = table
        .dataset
        .column_index("max_daily_mme")
        .ok_or_else(|| Error::Data("max_daily_mme column missing".into()))?;
    let id_to_row: BTreeMap<&str, usize> = table
        .dataset
        .admission_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut by_gender: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for m in &cohort.positives {
        let row = id_to_row[m.admission_id.as_str()];
        let gender = bundles[m.bundle_index].gender.as_str();
        by_gender.entry(gender).or_default().push(table.dataset.x[(row, mme_col)]);
    }
    write_rows(
        &out.join("fig_opioid_dose_by_gender.csv"),
        &["gender", "n", "q1", "median", "q3"],
        by_gender.into_iter().map(|(g, mut v)| {
            v.sort_by(f64::total_cmp);
            vec![
                g.to_string(),
                v.len().to_string(),
                percentile_sorted(&v, 0.25).to_string(),
                percentile_sorted(&v, 0.50).to_string(),
                percentile_sorted(&v, 0.75).to_string(),
            ]
        }),
    )?;
    Ok(())
}

fn write_rows(
    path: &Path,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    let f = std::fs::File::create(path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows of the feature table belonging to the balanced cohort.
fn cohort_rows(table: &FeatureTable, cohort_ids: &[String]) -> Result<Vec<usize>> {
    let index: BTreeMap<&str, usize> = table
        .dataset
        .admission_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    cohort_ids
        .iter()
        .map(|id| {
            index.get(id.as_str()).copied().ok_or_else(|| {
                Error::Data(format!("cohort admission {id:?} missing from features"))
            })
        })
        .collect()
}

fn subset_matrix(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), x.ncols()), |(i, j)| x[(rows[i], j)])
}

/// Train the configured model family on the cohort's training split.
pub fn train_model(cfg: &RunConfig, table: &FeatureTable, cohort_ids: &[String]) -> Result<SavedModel> {
    let rows = cohort_rows(table, cohort_ids)?;
    let labels: Vec<u8> = rows.iter().map(|&i| table.dataset.y[i]).collect();
    let (train_local, _) = split_indices(&labels, cfg.train_fraction, cfg.seed)?;
    let train_rows: Vec<usize> = train_local.iter().map(|&i| rows[i]).collect();

    let x_train_raw = subset_matrix(&table.dataset.x, &train_rows);
    let y_train: Vec<u8> = train_rows.iter().map(|&i| table.dataset.y[i]).collect();
    let imputer = MedianImputer::fit(&x_train_raw);
    let (x_train, columns) = imputer.transform(&x_train_raw, &table.dataset.columns);

    let model = match cfg.model {
        ModelFamily::Forest => {
            let params = ForestParams {
                n_estimators: cfg.n_estimators,
                seed: cfg.seed,
                ..Default::default()
            };
            ModelKind::Forest(fit_forest(&x_train, &y_train, &params)?)
        }
        ModelFamily::Gbt => {
            let mut params = cfg.gbt.clone();
            params.seed = cfg.seed;
            ModelKind::Gbt(fit_gbt(&x_train, &y_train, &params)?)
        }
        ModelFamily::Mlp => {
            let mut params = cfg.mlp.clone();
            params.seed = cfg.seed;
            ModelKind::Mlp(fit_mlp(&x_train, &y_train, &params)?)
        }
    };
    Ok(SavedModel::new(table.dataset.columns.clone(), imputer, columns, model))
}

/// `train`: read features + cohort from `input`, write `model.json`.
pub fn cmd_train(cfg: &RunConfig, input: &Path, out: &Path) -> Result<SavedModel> {
    std::fs::create_dir_all(out)?;
    let table = FeatureTable::read_csv(&input.join(FEATURES_FILE))?;
    let cohort_ids = read_cohort_ids(&input.join(COHORT_FILE))?;
    let model = train_model(cfg, &table, &cohort_ids)?;
    model.save(&out.join(MODEL_FILE))?;
    write_manifest(out, "train", cfg, &[])?;
    Ok(model)
}

/// Metrics, ROC curve and (forest) importances on the held-out test split.
pub fn evaluate_model(
    cfg: &RunConfig,
    table: &FeatureTable,
    cohort_ids: &[String],
    model: &SavedModel,
    out: &Path,
) -> Result<EvalReport> {
    let rows = cohort_rows(table, cohort_ids)?;
    let labels: Vec<u8> = rows.iter().map(|&i| table.dataset.y[i]).collect();
    let (_, test_local) = split_indices(&labels, cfg.train_fraction, cfg.seed)?;
    let test_rows: Vec<usize> = test_local.iter().map(|&i| rows[i]).collect();
    let y_test: Vec<u8> = test_rows.iter().map(|&i| table.dataset.y[i]).collect();
    let x_test = subset_matrix(&table.dataset.x, &test_rows);
    let scores = model.predict_proba(&x_test)?;

    let report = confusion(&scores, &y_test, cfg.threshold);
    std::fs::write(out.join(METRICS_FILE), serde_json::to_string_pretty(&report)?)?;

    write_rows(
        &out.join(ROC_FILE),
        &["threshold", "tpr", "fpr"],
        roc_curve(&scores, &y_test).iter().map(|p| {
            vec![
                if p.threshold.is_finite() { p.threshold.to_string() } else { "inf".into() },
                p.tpr.to_string(),
                p.fpr.to_string(),
            ]
        }),
    )?;

    if let ModelKind::Forest(forest) = &model.model {
        let imp = forest.feature_importance()?;
        let mut ranked: Vec<(usize, f64)> = imp.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        write_rows(
            &out.join(IMPORTANCE_FILE),
            &["feature", "score", "rank"],
            ranked.iter().enumerate().map(|(rank, (j, score))| {
                vec![model.columns[*j].clone(), score.to_string(), (rank + 1).to_string()]
            }),
        )?;
    }
    Ok(report)
}

/// `evaluate` as a standalone command.
pub fn cmd_evaluate(cfg: &RunConfig, input: &Path, out: &Path) -> Result<EvalReport> {
    std::fs::create_dir_all(out)?;
    let table = FeatureTable::read_csv(&input.join(FEATURES_FILE))?;
    let cohort_ids = read_cohort_ids(&input.join(COHORT_FILE))?;
    let model = SavedModel::load(&input.join(MODEL_FILE))?;
    let report = evaluate_model(cfg, &table, &cohort_ids, &model, out)?;
    write_manifest(out, "evaluate", cfg, &[])?;
    Ok(report)
}

/// False-negative profile on the held-out test split.
pub fn fn_analysis(
    cfg: &RunConfig,
    table: &FeatureTable,
    cohort_ids: &[String],
    model: &SavedModel,
    out: &Path,
) -> Result<FnProfile> {
    let rows = cohort_rows(table, cohort_ids)?;
    let labels: Vec<u8> = rows.iter().map(|&i| table.dataset.y[i]).collect();
    let (_, test_local) = split_indices(&labels, cfg.train_fraction, cfg.seed)?;
    let test_rows: Vec<usize> = test_local.iter().map(|&i| rows[i]).collect();
    let y_test: Vec<u8> = test_rows.iter().map(|&i| table.dataset.y[i]).collect();
    let x_test = subset_matrix(&table.dataset.x, &test_rows);
    let los: Vec<f64> = test_rows.iter().map(|&i| table.los_until_discharge[i]).collect();
    let scores = model.predict_proba(&x_test)?;

    let inputs =
        FnInputs::from_matrix(&x_test, &table.dataset.columns, &y_test, &scores, &los)?;
    let profile = false_negative_analysis(&inputs, cfg.threshold)?;
    std::fs::write(out.join(FN_PROFILE_FILE), serde_json::to_string_pretty(&profile)?)?;
    write_rows(
        &out.join(FN_SITES_FILE),
        &["site", "pct_positives", "pct_false_negatives"],
        profile.site_pct_positives.iter().map(|(site, pct)| {
            vec![
                site.clone(),
                pct.to_string(),
                profile.site_pct_false_negatives[site].to_string(),
            ]
        }),
    )?;
    Ok(profile)
}

/// `fn-analysis` as a standalone command.
pub fn cmd_fn_analysis(cfg: &RunConfig, input: &Path, out: &Path) -> Result<FnProfile> {
    std::fs::create_dir_all(out)?;
    let table = FeatureTable::read_csv(&input.join(FEATURES_FILE))?;
    let cohort_ids = read_cohort_ids(&input.join(COHORT_FILE))?;
    let model = SavedModel::load(&input.join(MODEL_FILE))?;
    let profile = fn_analysis(cfg, &table, &cohort_ids, &model, out)?;
    write_manifest(out, "fn-analysis", cfg, &[])?;
    Ok(profile)
}

/// Impute the full analysis matrix if any value is missing (causal path).
fn causal_dataset(table: &FeatureTable) -> Dataset {
    let has_nan = table.dataset.x.iter().any(|v| !v.is_finite());
    if !has_nan {
        return table.dataset.clone();
    }
    let imputer = MedianImputer::fit(&table.dataset.x);
    let (x, columns) = imputer.transform(&table.dataset.x, &table.dataset.columns);
    Dataset {
        admission_ids: table.dataset.admission_ids.clone(),
        x,
        y: table.dataset.y.clone(),
        columns,
    }
}

/// One treatment's AIPW estimate over the full eligible population.
pub fn estimate_treatment(
    cfg: &RunConfig,
    dataset: &Dataset,
    treatment: Treatment,
) -> Result<CausalEstimate> {
    let dose_threshold = match treatment {
        Treatment::Med(crate::domain::DrugClass::Opioid) => cfg.causal.dose_threshold,
        _ => None,
    };
    let frame = build_frame(dataset, treatment, dose_threshold)?;
    aipw_ate(&frame, cfg.seed, &cfg.causal_options())
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
pub enum AteRow {
    Ok(CausalEstimate),
    Failed { treatment: String, error: String },
}

/// ATE table over the configured treatments; single-arm treatments are
/// recorded as failed rows rather than aborting the run.
pub fn ate_table(cfg: &RunConfig, table: &FeatureTable, out: &Path) -> Result<Vec<AteRow>> {
    let dataset = causal_dataset(table);
    let mut rows = Vec::new();
    for &treatment in &cfg.causal.treatments {
        match estimate_treatment(cfg, &dataset, treatment) {
            Ok(est) => rows.push(AteRow::Ok(est)),
            Err(Error::Positivity(msg)) => {
                rows.push(AteRow::Failed { treatment: treatment.id(), error: msg })
            }
            Err(e) => return Err(e),
        }
    }

    std::fs::write(out.join(ATE_TABLE_JSON), serde_json::to_string_pretty(&rows)?)?;
    let est_rows: Vec<&CausalEstimate> = rows
        .iter()
        .filter_map(|r| match r {
            AteRow::Ok(e) => Some(e),
            AteRow::Failed { .. } => None,
        })
        .collect();
    let csv_header = ["treatment", "point", "half_width", "ci_low", "ci_high", "significant"];
    write_rows(
        &out.join(ATE_TABLE_CSV),
        &csv_header,
        est_rows.iter().map(|e| {
            vec![
                e.treatment.clone(),
                e.point.to_string(),
                e.half_width.to_string(),
                e.ci_low.to_string(),
                e.ci_high.to_string(),
                e.significant.to_string(),
            ]
        }),
    )?;
    write_rows(
        &out.join(SITE_ATE_FILE),
        &csv_header,
        est_rows.iter().filter(|e| e.treatment.starts_with("site:")).map(|e| {
            vec![
                e.treatment.clone(),
                e.point.to_string(),
                e.half_width.to_string(),
                e.ci_low.to_string(),
                e.ci_high.to_string(),
                e.significant.to_string(),
            ]
        }),
    )?;
    Ok(rows)
}

/// `ate` as a standalone command over a saved features file.
pub fn cmd_ate(cfg: &RunConfig, input: &Path, out: &Path, treatment: Treatment) -> Result<CausalEstimate> {
    std::fs::create_dir_all(out)?;
    let table = FeatureTable::read_csv(&input.join(FEATURES_FILE))?;
    let dataset = causal_dataset(&table);
    let est = estimate_treatment(cfg, &dataset, treatment)?;
    let mut single = cfg.clone();
    single.causal.treatments = vec![treatment];
    ate_table(&single, &table, out)?;
    write_manifest(out, "ate", cfg, &[])?;
    Ok(est)
}

/// Gender-conditional effects for the configured treatments.
pub fn cate_tables(cfg: &RunConfig, table: &FeatureTable, out: &Path) -> Result<Vec<(String, CateReport)>> {
    let dataset = causal_dataset(table);
    let mut reports = Vec::new();
    for &treatment in &cfg.causal.cate_treatments {
        let dose_threshold = match treatment {
            Treatment::Med(crate::domain::DrugClass::Opioid) => cfg.causal.dose_threshold,
            _ => None,
        };
        let frame = build_frame(&dataset, treatment, dose_threshold)?;
        let report = cate_by_gender(&frame, cfg.seed, &cfg.causal_options())?;
        reports.push((treatment.id(), report));
    }

    #[derive(Serialize)]
    struct CateJson<'a> {
        treatment: &'a str,
        #[serde(flatten)]
        report: &'a CateReport,
    }
    let json: Vec<CateJson> = reports
        .iter()
        .map(|(t, r)| CateJson { treatment: t.as_str(), report: r })
        .collect();
    std::fs::write(out.join(CATE_TABLE_JSON), serde_json::to_string_pretty(&json)?)?;

    let mut csv_rows = Vec::new();
    for (treatment, report) in &reports {
        for (group, est) in &report.groups {
            csv_rows.push(vec![
                treatment.clone(),
                group.clone(),
                est.point.to_string(),
                est.half_width.to_string(),
                est.ci_low.to_string(),
                est.ci_high.to_string(),
                est.significant.to_string(),
            ]);
        }
        let d = &report.difference;
        csv_rows.push(vec![
            treatment.clone(),
            "difference".into(),
            d.point.to_string(),
            d.half_width.to_string(),
            d.ci_low.to_string(),
            d.ci_high.to_string(),
            d.significant.to_string(),
        ]);
    }
    write_rows(
        &out.join(CATE_TABLE_CSV),
        &["treatment", "group", "point", "half_width", "ci_low", "ci_high", "significant"],
        csv_rows.into_iter(),
    )?;
    Ok(reports)
}

/// `cate` as a standalone command.
pub fn cmd_cate(cfg: &RunConfig, input: &Path, out: &Path) -> Result<Vec<(String, CateReport)>> {
    std::fs::create_dir_all(out)?;
    let table = FeatureTable::read_csv(&input.join(FEATURES_FILE))?;
    let reports = cate_tables(cfg, &table, out)?;
    write_manifest(out, "cate", cfg, &[])?;
    Ok(reports)
}

/// Full pipeline: cohort -> features -> model -> metrics -> causal tables
/// -> error analysis. Byte-reproducible given (config, inputs).
pub fn cmd_run(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let pipeline = cmd_pipeline(cfg, input, out)?;
    let model = train_model(cfg, &pipeline.table, &pipeline.cohort_ids)?;
    model.save(&out.join(MODEL_FILE))?;
    evaluate_model(cfg, &pipeline.table, &pipeline.cohort_ids, &model, out)?;
    fn_analysis(cfg, &pipeline.table, &pipeline.cohort_ids, &model, out)?;
    ate_table(cfg, &pipeline.table, out)?;
    cate_tables(cfg, &pipeline.table, out)?;
    write_manifest(out, "run", cfg, &[])?;
    Ok(())
}

/// Formatted line for stdout tables: `opioid  0.25 ± 0.06  significant`.
pub fn format_estimate_line(est: &CausalEstimate) -> String {
    format!(
        "{:<24} {:>7.2} ± {:<5.2} ci=[{:.3}, {:.3}] {}",
        est.treatment,
        est.point,
        est.half_width,
        est.ci_low,
        est.ci_high,
        if est.significant { "significant" } else { "n.s." }
    )
}

/// AUROC of the saved model on its held-out split (used by reporting).
pub fn model_test_auroc(
    cfg: &RunConfig,
    table: &FeatureTable,
    cohort_ids: &[String],
    model: &SavedModel,
) -> Result<Option<f64>> {
    let rows = cohort_rows(table, cohort_ids)?;
    let labels: Vec<u8> = rows.iter().map(|&i| table.dataset.y[i]).collect();
    let (_, test_local) = split_indices(&labels, cfg.train_fraction, cfg.seed)?;
    let test_rows: Vec<usize> = test_local.iter().map(|&i| rows[i]).collect();
    let y_test: Vec<u8> = test_rows.iter().map(|&i| table.dataset.y[i]).collect();
    let x_test = subset_matrix(&table.dataset.x, &test_rows);
    let scores = model.predict_proba(&x_test)?;
    Ok(auroc(&scores, &y_test).ok())
}
