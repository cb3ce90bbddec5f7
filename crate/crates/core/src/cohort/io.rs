use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{Biologic, CohortError, OutcomeLabel, Patient, PatientRecord, Sex};

/// Exact header of the cohort CSV, in file order.
pub const CSV_COLUMNS: [&str; 16] = [
    "age_years",
    "sex",
    "height_cm",
    "weight_kg",
    "comorbidity_count",
    "age_at_diagnosis",
    "psa_diagnosis",
    "previous_mtx",
    "concurrent_mtx",
    "previous_biologic",
    "baseline_dlqi",
    "baseline_pasi",
    "biologic",
    "repeat_series",
    "treatment_length_months",
    "outcome",
];

const OUTCOME_COLUMNS: [&str; 2] = ["treatment_length_months", "outcome"];

/// Reads a cohort file. Rows are numbered from 1 (the first line after the
/// header) in diagnostics.
pub fn load_cohort(path: impl AsRef<Path>) -> Result<Vec<PatientRecord>, CohortError> {
    read_cohort(File::open(path)?)
}

/// Reads patients only; outcome columns may be absent or empty.
pub fn load_patients(path: impl AsRef<Path>) -> Result<Vec<Patient>, CohortError> {
    read_patients(File::open(path)?)
}

pub fn read_cohort<R: Read>(reader: R) -> Result<Vec<PatientRecord>, CohortError> {
    let mut out = Vec::new();
    parse(reader, true, |patient, outcome| {
        let (treatment_length_months, outcome) = outcome.expect("outcome required");
        out.push(PatientRecord {
            patient,
            treatment_length_months,
            outcome,
        });
    })?;
    Ok(out)
}

pub fn read_patients<R: Read>(reader: R) -> Result<Vec<Patient>, CohortError> {
    let mut out = Vec::new();
    parse(reader, false, |patient, _| out.push(patient))?;
    Ok(out)
}

struct Row<'a> {
    number: usize,
    record: &'a csv::StringRecord,
    index: &'a HashMap<&'static str, usize>,
}

impl Row<'_> {
    fn raw(&self, column: &'static str) -> &str {
        self.index
            .get(column)
            .and_then(|&i| self.record.get(i))
            .map(str::trim)
            .unwrap_or("")
    }

    fn type_error(&self, column: &str, value: &str) -> CohortError {
        CohortError::TypeError {
            row: self.number,
            column: column.to_string(),
            value: value.to_string(),
        }
    }

    fn optional<T>(
        &self,
        column: &'static str,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<Option<T>, CohortError> {
        let raw = self.raw(column);
        if raw.is_empty() {
            return Ok(None);
        }
        parse(raw)
            .map(Some)
            .ok_or_else(|| self.type_error(column, raw))
    }

    fn required<T>(
        &self,
        column: &'static str,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<T, CohortError> {
        self.optional(column, parse)?
            .ok_or_else(|| self.type_error(column, ""))
    }

    fn range(&self, column: &str, reason: String) -> CohortError {
        CohortError::RangeViolation {
            row: self.number,
            column: column.to_string(),
            reason,
        }
    }
}

fn number(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn boolean(s: &str) -> Option<bool> {
    match s {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

fn sex(s: &str) -> Option<Sex> {
    Sex::ALL.into_iter().find(|v| v.token() == s)
}

fn biologic(s: &str) -> Option<Biologic> {
    Biologic::ALL.into_iter().find(|v| v.token() == s)
}

fn parse<R: Read>(
    reader: R,
    require_outcome: bool,
    mut sink: impl FnMut(Patient, Option<(f64, OutcomeLabel)>),
) -> Result<(), CohortError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::Headers)
        .from_reader(reader);
    let headers = csv.headers()?.clone();
    let mut index = HashMap::new();
    for column in CSV_COLUMNS {
        match headers.iter().position(|h| h == column) {
            Some(i) => {
                index.insert(column, i);
            }
            None if !require_outcome && OUTCOME_COLUMNS.contains(&column) => {}
            None => return Err(CohortError::MissingColumn(column.to_string())),
        }
    }

    let mut record = csv::StringRecord::new();
    let mut number_row = 0;
    while csv.read_record(&mut record)? {
        number_row += 1;
        let row = Row {
            number: number_row,
            record: &record,
            index: &index,
        };
        let comorbidity_count = match row.optional("comorbidity_count", |s| s.parse::<i64>().ok())? {
            Some(c) if c < 0 => {
                return Err(row.range("comorbidity_count", format!("{c} is negative")));
            }
            Some(c) => Some(u32::try_from(c).map_err(|_| row.type_error("comorbidity_count", row.raw("comorbidity_count")))?),
            None => None,
        };
        let patient = Patient {
            age_years: row.required("age_years", number)?,
            sex: row.required("sex", sex)?,
            height_cm: row.optional("height_cm", number)?,
            weight_kg: row.optional("weight_kg", number)?,
            comorbidity_count,
            age_at_diagnosis: row.optional("age_at_diagnosis", number)?,
            psa_diagnosis: row.required("psa_diagnosis", boolean)?,
            previous_mtx: row.required("previous_mtx", boolean)?,
            concurrent_mtx: row.optional("concurrent_mtx", boolean)?,
            previous_biologic: row.required("previous_biologic", boolean)?,
            baseline_dlqi: row.optional("baseline_dlqi", number)?,
            baseline_pasi: row.optional("baseline_pasi", number)?,
            biologic: row.required("biologic", biologic)?,
            repeat_series: row.required("repeat_series", boolean)?,
        };
        if let Err(v) = patient.validate() {
            return Err(row.range(v.column, v.reason));
        }
        let outcome = if require_outcome {
            let length = row.required("treatment_length_months", number)?;
            if length < 0.0 {
                return Err(row.range("treatment_length_months", format!("{length} is negative")));
            }
            let label = row.required("outcome", |s| s.parse::<OutcomeLabel>().ok())?;
            Some((length, label))
        } else {
            None
        };
        sink(patient, outcome);
    }
    Ok(())
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn bit(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

/// Writes records with the exact cohort header. Numbers use the shortest
/// representation that parses back to the same `f64`.
pub fn write_cohort<W: Write>(writer: W, records: &[PatientRecord]) -> Result<(), CohortError> {
    let mut csv = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    csv.write_record(CSV_COLUMNS)?;
    for r in records {
        let p = &r.patient;
        csv.write_record([
            p.age_years.to_string(),
            p.sex.token().to_string(),
            opt(p.height_cm),
            opt(p.weight_kg),
            opt(p.comorbidity_count),
            opt(p.age_at_diagnosis),
            bit(p.psa_diagnosis).to_string(),
            bit(p.previous_mtx).to_string(),
            opt(p.concurrent_mtx.map(bit)),
            bit(p.previous_biologic).to_string(),
            opt(p.baseline_dlqi),
            opt(p.baseline_pasi),
            p.biologic.token().to_string(),
            bit(p.repeat_series).to_string(),
            r.treatment_length_months.to_string(),
            r.outcome.token().to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::fixtures::record;

    const HEADER: &str = "age_years,sex,height_cm,weight_kg,comorbidity_count,age_at_diagnosis,psa_diagnosis,previous_mtx,concurrent_mtx,previous_biologic,baseline_dlqi,baseline_pasi,biologic,repeat_series,treatment_length_months,outcome\n";

    #[test]
    fn header_only_file_is_empty_cohort() {
        let records = read_cohort(HEADER.as_bytes()).unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn empty_cells_become_absent() {
        let csv = format!("{HEADER}51,male,,,,,0,1,,1,,,etanercept,0,12.5,lack_of_efficacy\n");
        let r = &read_cohort(csv.as_bytes()).unwrap()[0];
        assert_eq!(r.patient.weight_kg, None);
        assert_eq!(r.patient.concurrent_mtx, None);
        assert_eq!(r.patient.comorbidity_count, None);
        assert!(r.patient.previous_mtx);
        assert_eq!(r.outcome, OutcomeLabel::LackOfEfficacy);
    }

    #[test]
    fn diagnosis_after_age_is_range_violation() {
        let csv = format!("{HEADER}42,female,,,,70,0,0,,0,,,adalimumab,1,3,continue\n");
        match read_cohort(csv.as_bytes()) {
            Err(CohortError::RangeViolation { row, column, .. }) => {
                assert_eq!(row, 1);
                assert_eq!(column, "age_at_diagnosis");
            }
            other => panic!("expected RangeViolation, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_named() {
        let header = HEADER.replace(",outcome", "");
        match read_cohort(header.as_bytes()) {
            Err(CohortError::MissingColumn(c)) => assert_eq!(c, "outcome"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_error_names_row_and_column() {
        let csv = format!(
            "{HEADER}42,female,,,,,0,0,,0,,,adalimumab,1,3,continue\n40,male,,,,,yes,0,,0,,,adalimumab,1,3,continue\n"
        );
        match read_cohort(csv.as_bytes()) {
            Err(CohortError::TypeError { row, column, value }) => {
                assert_eq!((row, column.as_str(), value.as_str()), (2, "psa_diagnosis", "yes"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn patients_without_outcome_columns() {
        let header = HEADER.replace(",treatment_length_months,outcome", "");
        let csv = format!("{header}42,female,,90,,,0,0,,0,,,adalimumab,1\n");
        let p = read_patients(csv.as_bytes()).unwrap();
        assert_eq!(p[0].weight_kg, Some(90.0));
    }

    #[test]
    fn write_then_read_is_identity() {
        let mut a = record(OutcomeLabel::Other);
        a.patient.weight_kg = None;
        a.patient.concurrent_mtx = Some(true);
        a.treatment_length_months = 0.1 + 0.2;
        let b = record(OutcomeLabel::Continue);
        let mut buf = Vec::new();
        write_cohort(&mut buf, &[a.clone(), b.clone()]).unwrap();
        assert!(buf.starts_with(HEADER.as_bytes()));
        let back = read_cohort(buf.as_slice()).unwrap();
        assert_eq!(back, vec![a, b]);
    }
}
