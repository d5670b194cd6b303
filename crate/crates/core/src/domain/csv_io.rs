//! CSV ingestion and serialization for admission bundles.
//!
//! Five files with fixed, header-exact schemas (UTF-8, RFC-4180 quoting):
//!
//! ```text
//! admissions.csv:  subject_id,admission_id,t_adm,t_discharge,age,gender,language,race
//! history.csv:     subject_id,flag            (one row per flag)
//! surgeries.csv:   admission_id,time,site
//! medications.csv: admission_id,time,drug_class,drug_name,dose,unit
//! reports.csv:     admission_id,time,text
//! ```
//!
//! Reading preserves file order (events are not re-sorted, so ordering
//! violations survive for validation to catch). Writing is lossless:
//! a valid bundle round-trips field-for-field.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{
    AdmissionBundle, DoseUnit, DrugClass, Gender, HistoryFlag, MedicationEvent, RadiologyReport,
    SurgeryEvent, SurgerySite, Timestamp,
};
use crate::error::{Error, Result};

pub const ADMISSIONS_FILE: &str = "admissions.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const SURGERIES_FILE: &str = "surgeries.csv";
pub const MEDICATIONS_FILE: &str = "medications.csv";
pub const REPORTS_FILE: &str = "reports.csv";

const ADMISSIONS_HEADER: &[&str] =
    &["subject_id", "admission_id", "t_adm", "t_discharge", "age", "gender", "language", "race"];
const HISTORY_HEADER: &[&str] = &["subject_id", "flag"];
const SURGERIES_HEADER: &[&str] = &["admission_id", "time", "site"];
const MEDICATIONS_HEADER: &[&str] =
    &["admission_id", "time", "drug_class", "drug_name", "dose", "unit"];
const REPORTS_HEADER: &[&str] = &["admission_id", "time", "text"];

#[derive(Serialize, Deserialize)]
struct AdmissionRow {
    subject_id: String,
    admission_id: String,
    t_adm: i64,
    t_discharge: i64,
    age: i64,
    gender: Gender,
    language: String,
    race: String,
}

#[derive(Serialize, Deserialize)]
struct HistoryRow {
    subject_id: String,
    flag: HistoryFlag,
}

#[derive(Serialize, Deserialize)]
struct SurgeryRow {
    admission_id: String,
    time: i64,
    site: SurgerySite,
}

#[derive(Serialize, Deserialize)]
struct MedicationRow {
    admission_id: String,
    time: i64,
    drug_class: DrugClass,
    drug_name: String,
    dose: f64,
    unit: DoseUnit,
}

#[derive(Serialize, Deserialize)]
struct ReportRow {
    admission_id: String,
    time: i64,
    text: String,
}

fn open_reader(dir: &Path, file: &str, expected_header: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let path = dir.join(file);
    let f = std::fs::File::open(&path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(f);
    let headers = rdr.headers()?.clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected_header {
        return Err(Error::Data(format!(
            "{file}: header mismatch, expected {:?}, got {:?}",
            expected_header.join(","),
            got.join(",")
        )));
    }
    Ok(rdr)
}

fn writer(dir: &Path, file: &str, header: &[&str]) -> Result<csv::Writer<std::fs::File>> {
    let path = dir.join(file);
    let f = std::fs::File::create(&path)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
    // Header written explicitly so empty inputs still yield well-formed files.
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
    w.write_record(header)?;
    Ok(w)
}

/// Write the five bundle CSVs into `dir`, preserving slice order.
pub fn write_bundles(dir: &Path, bundles: &[AdmissionBundle]) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut adm = writer(dir, ADMISSIONS_FILE, ADMISSIONS_HEADER)?;
    let mut hist = writer(dir, HISTORY_FILE, HISTORY_HEADER)?;
    let mut surg = writer(dir, SURGERIES_FILE, SURGERIES_HEADER)?;
    let mut meds = writer(dir, MEDICATIONS_FILE, MEDICATIONS_HEADER)?;
    let mut reps = writer(dir, REPORTS_FILE, REPORTS_HEADER)?;

    let mut seen_subjects: BTreeSet<&str> = BTreeSet::new();
    for b in bundles {
        adm.serialize(AdmissionRow {
            subject_id: b.subject_id.clone(),
            admission_id: b.admission_id.clone(),
            t_adm: b.t_adm.0,
            t_discharge: b.t_discharge.0,
            age: b.age,
            gender: b.gender,
            language: b.language.clone(),
            race: b.race.clone(),
        })?;
        if seen_subjects.insert(&b.subject_id) {
            for flag in &b.history {
                hist.serialize(HistoryRow { subject_id: b.subject_id.clone(), flag: *flag })?;
            }
        }
        for s in &b.surgeries {
            surg.serialize(SurgeryRow {
                admission_id: b.admission_id.clone(),
                time: s.time.0,
                site: s.site,
            })?;
        }
        for m in &b.medications {
            meds.serialize(MedicationRow {
                admission_id: b.admission_id.clone(),
                time: m.time.0,
                drug_class: m.drug_class,
                drug_name: m.drug_name.clone(),
                dose: m.dose,
                unit: m.unit,
            })?;
        }
        for r in &b.reports {
            reps.serialize(ReportRow {
                admission_id: b.admission_id.clone(),
                time: r.time.0,
                text: r.text.clone(),
            })?;
        }
    }

    for w in [adm, hist, surg, meds, reps].iter_mut() {
        w.flush()?;
    }
    Ok(())
}

/// Read the five bundle CSVs from `dir`. Bundles come back in
/// `admissions.csv` order with events in file order.
pub fn read_bundles(dir: &Path) -> Result<Vec<AdmissionBundle>> {
    let mut rdr = open_reader(dir, ADMISSIONS_FILE, ADMISSIONS_HEADER)?;
    let mut bundles = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for row in rdr.deserialize() {
        let row: AdmissionRow = row?;
        if index.contains_key(&row.admission_id) {
            return Err(Error::Data(format!("duplicate admission_id {:?}", row.admission_id)));
        }
        index.insert(row.admission_id.clone(), bundles.len());
        bundles.push(AdmissionBundle {
            subject_id: row.subject_id,
            admission_id: row.admission_id,
            t_adm: Timestamp(row.t_adm),
            t_discharge: Timestamp(row.t_discharge),
            age: row.age,
            gender: row.gender,
            language: row.language,
            race: row.race,
            history: BTreeSet::new(),
            surgeries: Vec::new(),
            medications: Vec::new(),
            reports: Vec::new(),
        });
    }

    let mut by_subject: HashMap<String, BTreeSet<HistoryFlag>> = HashMap::new();
    let mut rdr = open_reader(dir, HISTORY_FILE, HISTORY_HEADER)?;
    for row in rdr.deserialize() {
        let row: HistoryRow = row?;
        by_subject.entry(row.subject_id).or_default().insert(row.flag);
    }
    for b in bundles.iter_mut() {
        if let Some(flags) = by_subject.get(&b.subject_id) {
            b.history = flags.clone();
        }
    }

    let lookup = |index: &HashMap<String, usize>, id: &str, file: &str| -> Result<usize> {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Data(format!("{file}: unknown admission_id {id:?}")))
    };

    let mut rdr = open_reader(dir, SURGERIES_FILE, SURGERIES_HEADER)?;
    for row in rdr.deserialize() {
        let row: SurgeryRow = row?;
        let i = lookup(&index, &row.admission_id, SURGERIES_FILE)?;
        bundles[i].surgeries.push(SurgeryEvent { time: Timestamp(row.time), site: row.site });
    }

    let mut rdr = open_reader(dir, MEDICATIONS_FILE, MEDICATIONS_HEADER)?;
    for row in rdr.deserialize() {
        let row: MedicationRow = row?;
        let i = lookup(&index, &row.admission_id, MEDICATIONS_FILE)?;
        bundles[i].medications.push(MedicationEvent {
            time: Timestamp(row.time),
            drug_class: row.drug_class,
            drug_name: row.drug_name,
            dose: row.dose,
            unit: row.unit,
        });
    }

    let mut rdr = open_reader(dir, REPORTS_FILE, REPORTS_HEADER)?;
    for row in rdr.deserialize() {
        let row: ReportRow = row?;
        let i = lookup(&index, &row.admission_id, REPORTS_FILE)?;
        bundles[i].reports.push(RadiologyReport::new(Timestamp(row.time), row.text));
    }

    Ok(bundles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Gender;

    fn sample_bundle(i: usize) -> AdmissionBundle {
        let t0 = 100_000 * (i as i64 + 1);
        AdmissionBundle {
            subject_id: format!("s{i}"),
            admission_id: format!("a{i}"),
            t_adm: Timestamp(t0),
            t_discharge: Timestamp(t0 + 20_000),
            age: 50 + i as i64,
            gender: if i % 2 == 0 { Gender::Male } else { Gender::Female },
            language: "english".into(),
            race: "white".into(),
            history: [HistoryFlag::Diabetes, HistoryFlag::Stroke].into_iter().collect(),
            surgeries: vec![SurgeryEvent { time: Timestamp(t0 + 1000), site: SurgerySite::Thorax }],
            medications: vec![MedicationEvent {
                time: Timestamp(t0 + 500),
                drug_class: DrugClass::Opioid,
                drug_name: "morphine".into(),
                dose: 2.5,
                unit: DoseUnit::Mg,
            }],
            reports: vec![RadiologyReport::new(
                Timestamp(t0 + 3000),
                "Lungs clear, \"no evidence of aspiration\",\nstable.",
            )],
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let bundles: Vec<_> = (0..3).map(sample_bundle).collect();
        write_bundles(dir.path(), &bundles).unwrap();
        let back = read_bundles(dir.path()).unwrap();
        assert_eq!(bundles, back);
    }

    #[test]
    fn empty_input_yields_headed_files() {
        let dir = tempfile::tempdir().unwrap();
        write_bundles(dir.path(), &[]).unwrap();
        let content = std::fs::read_to_string(dir.path().join(ADMISSIONS_FILE)).unwrap();
        assert_eq!(content.trim(), ADMISSIONS_HEADER.join(","));
        assert!(read_bundles(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn missing_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        write_bundles(dir.path(), &[sample_bundle(0)]).unwrap();
        std::fs::remove_file(dir.path().join(MEDICATIONS_FILE)).unwrap();
        let err = read_bundles(dir.path()).unwrap_err();
        assert!(err.to_string().contains("medications.csv"), "{err}");
    }

    #[test]
    fn header_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_bundles(dir.path(), &[]).unwrap();
        std::fs::write(dir.path().join(SURGERIES_FILE), "admission_id,when,site\n").unwrap();
        let err = read_bundles(dir.path()).unwrap_err();
        assert!(err.to_string().contains("header mismatch"), "{err}");
    }
}
