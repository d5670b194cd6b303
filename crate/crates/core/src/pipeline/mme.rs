//! Milligram-morphine-equivalent (MME) dose arithmetic.
//!
//! Opioid doses are normalized to morphine potency via a per-drug conversion
//! table. The table ships with conventional factors and can be replaced by an
//! edited `mme_table.csv` (`drug_name,unit,factor`). A missing factor is an
//! explicit error, never a silent zero.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{DoseUnit, DrugClass, MedicationEvent, Timestamp};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmeEntry {
    /// Unit the factor is expressed in (MME mg per this unit of drug).
    pub unit: DoseUnit,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmeTable {
    entries: BTreeMap<String, MmeEntry>,
}

impl MmeTable {
    /// Conventional conversion factors. The morphine row is the identity.
    pub fn conventional() -> Self {
        let mut entries = BTreeMap::new();
        for (name, unit, factor) in [
            ("morphine", DoseUnit::Mg, 1.0),
            ("oxycodone", DoseUnit::Mg, 1.5),
            ("hydromorphone", DoseUnit::Mg, 4.0),
            ("hydrocodone", DoseUnit::Mg, 1.0),
            ("fentanyl", DoseUnit::Mcg, 0.1),
        ] {
            entries.insert(name.to_string(), MmeEntry { unit, factor });
        }
        MmeTable { entries }
    }

    pub fn get(&self, drug_name: &str) -> Option<&MmeEntry> {
        self.entries.get(drug_name)
    }

    pub fn known_names(&self) -> BTreeSet<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            drug_name: String,
            unit: DoseUnit,
            factor: f64,
        }
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(f);
        let headers: Vec<&str> = rdr.headers()?.iter().collect();
        if headers != ["drug_name", "unit", "factor"] {
            return Err(Error::Data(format!(
                "mme table header mismatch: expected drug_name,unit,factor, got {}",
                headers.join(",")
            )));
        }
        let mut entries = BTreeMap::new();
        for row in rdr.deserialize() {
            let row: Row = row?;
            if !(row.factor > 0.0) {
                return Err(Error::Data(format!(
                    "mme factor for {:?} must be positive, got {}",
                    row.drug_name, row.factor
                )));
            }
            entries.insert(row.drug_name, MmeEntry { unit: row.unit, factor: row.factor });
        }
        Ok(MmeTable { entries })
    }

    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)
            .map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(f);
        w.write_record(["drug_name", "unit", "factor"])?;
        for (name, entry) in &self.entries {
            w.write_record([name.as_str(), entry.unit.as_str(), &entry.factor.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// MME of a single opioid medication event: dose converted to the table
/// row's unit, times the conversion factor.
pub fn compute_mme(event: &MedicationEvent, table: &MmeTable) -> Result<f64> {
    if event.drug_class != DrugClass::Opioid {
        return Err(Error::Data(format!(
            "compute_mme called on non-opioid event ({})",
            event.drug_class
        )));
    }
    let entry = table.get(&event.drug_name).ok_or_else(|| {
        Error::Data(format!("no MME conversion factor for opioid {:?}", event.drug_name))
    })?;
    let dose_in_table_unit = match (event.unit, entry.unit) {
        (a, b) if a == b => event.dose,
        (DoseUnit::Mcg, DoseUnit::Mg) => event.dose / 1000.0,
        (DoseUnit::Mg, DoseUnit::Mcg) => event.dose * 1000.0,
        (a, b) => {
            return Err(Error::Data(format!(
                "cannot convert {:?} dose in {} to table unit {} for MME",
                event.drug_name, a, b
            )))
        }
    };
    Ok(dose_in_table_unit * entry.factor)
}

/// Maximum over calendar days of the summed MME of opioid events in
/// `[t_adm, t_cutoff]`. Days are calendar days in the reference timezone,
/// not rolling 24-hour windows. Returns 0.0 when no opioids were given.
pub fn max_daily_mme(
    events: &[MedicationEvent],
    t_adm: Timestamp,
    t_cutoff: Timestamp,
    tz_offset_min: i32,
    table: &MmeTable,
) -> Result<f64> {
    let mut per_day: BTreeMap<i64, f64> = BTreeMap::new();
    for e in events {
        if e.drug_class != DrugClass::Opioid || e.time < t_adm || e.time > t_cutoff {
            continue;
        }
        *per_day.entry(e.time.day_index(tz_offset_min)).or_insert(0.0) += compute_mme(e, table)?;
    }
    Ok(per_day.values().fold(0.0_f64, |acc, &v| acc.max(v)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opioid(time: i64, name: &str, dose: f64, unit: DoseUnit) -> MedicationEvent {
        MedicationEvent {
            time: Timestamp(time),
            drug_class: DrugClass::Opioid,
            drug_name: name.into(),
            dose,
            unit,
        }
    }

    #[test]
    fn identity_factor() {
        let t = MmeTable::conventional();
        let e = opioid(0, "morphine", 10.0, DoseUnit::Mg);
        assert_eq!(compute_mme(&e, &t).unwrap(), 10.0);
    }

    #[test]
    fn scaled_factor() {
        let t = MmeTable::conventional();
        let e = opioid(0, "oxycodone", 10.0, DoseUnit::Mg);
        assert_eq!(compute_mme(&e, &t).unwrap(), 15.0);
    }

    #[test]
    fn mcg_table_unit() {
        let t = MmeTable::conventional();
        // Fentanyl factor is per mcg: 50 mcg -> 5.0 MME.
        let e = opioid(0, "fentanyl", 50.0, DoseUnit::Mcg);
        assert_eq!(compute_mme(&e, &t).unwrap(), 5.0);
        // Same event expressed in mg pre-scales to mcg.
        let e = opioid(0, "fentanyl", 0.05, DoseUnit::Mg);
        assert!((compute_mme(&e, &t).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn missing_factor_is_an_error() {
        let t = MmeTable::conventional();
        let e = opioid(0, "unobtainium", 10.0, DoseUnit::Mg);
        assert!(compute_mme(&e, &t).is_err());
    }

    #[test]
    fn incompatible_unit_is_an_error() {
        let t = MmeTable::conventional();
        let e = opioid(0, "morphine", 10.0, DoseUnit::Ml);
        assert!(compute_mme(&e, &t).is_err());
    }

    #[test]
    fn max_daily_hand_summed() {
        let t = MmeTable::conventional();
        // Day 0: morphine 10 + oxycodone 10 (-> 25). Day 1: morphine 5.
        let events = vec![
            opioid(100, "morphine", 10.0, DoseUnit::Mg),
            opioid(200, "oxycodone", 10.0, DoseUnit::Mg),
            opioid(1500, "morphine", 5.0, DoseUnit::Mg),
        ];
        let got = max_daily_mme(&events, Timestamp(0), Timestamp(3000), 0, &t).unwrap();
        assert_eq!(got, 25.0);
    }

    #[test]
    fn no_opioids_is_zero() {
        let t = MmeTable::conventional();
        assert_eq!(max_daily_mme(&[], Timestamp(0), Timestamp(10), 0, &t).unwrap(), 0.0);
    }

    #[test]
    fn cutoff_is_inclusive() {
        let t = MmeTable::conventional();
        let events = vec![opioid(3000, "morphine", 10.0, DoseUnit::Mg)];
        let got = max_daily_mme(&events, Timestamp(0), Timestamp(3000), 0, &t).unwrap();
        assert_eq!(got, 10.0);
        let got = max_daily_mme(&events, Timestamp(0), Timestamp(2999), 0, &t).unwrap();
        assert_eq!(got, 0.0);
    }
}
