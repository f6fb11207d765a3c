use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use csv::{QuoteStyle, ReaderBuilder, Terminator, WriterBuilder};

use super::{Cohort, FeatureSchema, PatientTrajectory};
use crate::error::{Error, Result};

fn ingestion(row: usize, column: &str, message: impl Into<String>) -> Error {
    Error::Ingestion {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

fn expected_header(schema: &FeatureSchema) -> Vec<String> {
    ["patient_id", "step"]
        .into_iter()
        .map(String::from)
        .chain(schema.feature_names().map(String::from))
        .collect()
}

pub fn load_cohort_csv(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<Cohort> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_cohort_csv(file, schema)
}

struct Partial {
    first_row: usize,
    numeric: Vec<f64>,
    categorical: Vec<usize>,
    seen: Vec<bool>,
}

/// Parses trajectory CSV. Row numbers in errors are file line numbers, with
/// the header on line 1.
pub fn read_cohort_csv<R: Read>(reader: R, schema: &FeatureSchema) -> Result<Cohort> {
    schema.validate()?;
    let header = expected_header(schema);
    let len = schema.sequence_length;
    let (n_num, n_cat) = (schema.n_numeric(), schema.n_categorical());
    let level_index: Vec<HashMap<&str, usize>> = schema
        .categorical_features
        .iter()
        .map(|f| {
            f.levels
                .iter()
                .enumerate()
                .map(|(i, l)| (l.as_str(), i))
                .collect()
        })
        .collect();

    let mut rdr = ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();

    let got = records
        .next()
        .ok_or_else(|| ingestion(1, "header", "empty file"))??;
    if got.len() != header.len() {
        return Err(ingestion(
            1,
            "header",
            format!("expected {} columns, found {}", header.len(), got.len()),
        ));
    }
    for (g, e) in got.iter().zip(&header) {
        if g != e {
            return Err(ingestion(1, e, format!("expected header `{e}`, found `{g}`")));
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut partial: HashMap<String, Partial> = HashMap::new();

    for (i, rec) in records.enumerate() {
        let row = i + 2;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(ingestion(
                row,
                "*",
                format!("expected {} columns, found {}", header.len(), rec.len()),
            ));
        }
        let pid = &rec[0];
        if pid.is_empty() {
            return Err(ingestion(row, "patient_id", "empty patient id"));
        }
        let step: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| ingestion(row, "step", format!("invalid step `{}`", &rec[1])))?;
        if step == 0 || step > len {
            return Err(ingestion(
                row,
                "step",
                format!("step {step} outside 1..={len}"),
            ));
        }
        let entry = partial.entry(pid.to_string()).or_insert_with(|| {
            order.push(pid.to_string());
            Partial {
                first_row: row,
                numeric: vec![0.0; len * n_num],
                categorical: vec![0; len * n_cat],
                seen: vec![false; len],
            }
        });
        if entry.seen[step - 1] {
            return Err(ingestion(
                row,
                "step",
                format!("duplicate step {step} for patient `{pid}`"),
            ));
        }
        entry.seen[step - 1] = true;

        for (f, feat) in schema.numeric_features.iter().enumerate() {
            let cell = &rec[2 + f];
            let v: f64 = cell.trim().parse().map_err(|_| {
                ingestion(row, &feat.name, format!("non-numeric value `{cell}`"))
            })?;
            if !v.is_finite() {
                return Err(ingestion(row, &feat.name, format!("non-finite value `{cell}`")));
            }
            if feat.log_scale && v <= 0.0 {
                return Err(ingestion(
                    row,
                    &feat.name,
                    format!("non-positive value `{cell}` for a log-scale feature"),
                ));
            }
            entry.numeric[(step - 1) * n_num + f] = v;
        }
        for (f, feat) in schema.categorical_features.iter().enumerate() {
            let cell = &rec[2 + n_num + f];
            let lvl = *level_index[f].get(cell).ok_or_else(|| {
                ingestion(row, &feat.name, format!("unknown level `{cell}`"))
            })?;
            entry.categorical[(step - 1) * n_cat + f] = lvl;
        }
    }

    let mut patients = Vec::with_capacity(order.len());
    for pid in order {
        let p = partial.remove(&pid).expect("every ordered id has an entry");
        if let Some(missing) = p.seen.iter().position(|s| !s) {
            return Err(ingestion(
                p.first_row,
                "step",
                format!("missing step {} for patient `{pid}`", missing + 1),
            ));
        }
        patients.push(PatientTrajectory::new(pid, schema, p.numeric, p.categorical)?);
    }
    Cohort::new(schema.clone(), patients)
}

/// Writes the canonical form: patients in cohort order, steps ascending,
/// shortest round-trip float formatting, LF line endings.
pub fn write_cohort_csv_to<W: Write>(cohort: &Cohort, writer: W) -> Result<()> {
    let schema = &cohort.schema;
    let mut w = WriterBuilder::new()
        .quote_style(QuoteStyle::Necessary)
        .terminator(Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(expected_header(schema))?;
    let mut record: Vec<String> = Vec::with_capacity(2 + schema.n_features());
    for p in &cohort.patients {
        for step in 1..=schema.sequence_length {
            record.clear();
            record.push(p.patient_id.clone());
            record.push(step.to_string());
            record.extend(p.numeric_row(step).iter().map(|v| v.to_string()));
            record.extend(
                p.categorical_row(step)
                    .iter()
                    .zip(&schema.categorical_features)
                    .map(|(&l, f)| f.levels[l].clone()),
            );
            w.write_record(&record)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn write_cohort_csv(cohort: &Cohort, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_cohort_csv_to(cohort, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::make_schema;

    fn tiny_schema() -> FeatureSchema {
        let mut s = make_schema("hypotension").unwrap();
        s.sequence_length = 3;
        s
    }

    fn rows(pid: &str, steps: &[usize]) -> String {
        steps
            .iter()
            .map(|s| format!("{pid},{s},65.5,100,1.5,0,\"[0, 250)\"\n"))
            .collect()
    }

    const HEADER: &str = "patient_id,step,MAP,Urine,Lactate,Vasopressors,Fluid Boluses\n";

    #[test]
    fn reads_well_formed_file() {
        let text = format!("{HEADER}{}{}", rows("a", &[1, 2, 3]), rows("b", &[3, 1, 2]));
        let c = read_cohort_csv(text.as_bytes(), &tiny_schema()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.patients[1].patient_id, "b");
        assert_eq!(c.patients[0].numeric(2, 0), 65.5);
        assert_eq!(c.patients[0].categorical(3, 1), 0);
    }

    #[test]
    fn missing_step() {
        let text = format!("{HEADER}{}", rows("a", &[1, 3]));
        let err = read_cohort_csv(text.as_bytes(), &tiny_schema()).unwrap_err();
        assert!(err.to_string().contains("missing step 2"), "{err}");
    }

    #[test]
    fn duplicate_step() {
        let text = format!("{HEADER}{}", rows("a", &[1, 2, 2, 3]));
        let err = read_cohort_csv(text.as_bytes(), &tiny_schema()).unwrap_err();
        assert!(err.to_string().contains("duplicate step"), "{err}");
        assert!(err.to_string().contains("row 4"), "{err}");
    }

    #[test]
    fn unknown_level_and_bad_numbers() {
        let text = format!("{HEADER}a,1,65,100,1.5,XYZ,\"[0, 250)\"\n");
        let err = read_cohort_csv(text.as_bytes(), &tiny_schema()).unwrap_err();
        assert!(err.to_string().contains("unknown level"), "{err}");
        assert!(err.to_string().contains("Vasopressors"), "{err}");

        let text = format!("{HEADER}a,1,high,100,1.5,0,\"[0, 250)\"\n");
        let err = read_cohort_csv(text.as_bytes(), &tiny_schema()).unwrap_err();
        assert!(err.to_string().contains("non-numeric"), "{err}");
        assert!(err.to_string().contains("column MAP"), "{err}");

        let text = format!("{HEADER}a,1,65,100,1.5\n");
        let err = read_cohort_csv(text.as_bytes(), &tiny_schema()).unwrap_err();
        assert!(err.to_string().contains("expected 7 columns"), "{err}");
    }

    #[test]
    fn art_unknown_base_combo() {
        let schema = make_schema("art_hiv").unwrap();
        let text = "patient_id,step,Viral load,CD4 count,Base Combo,Comp. INI,Extra PI\n\
                    a,1,40,500,XYZ,DTG,DRV\n";
        let err = read_cohort_csv(text.as_bytes(), &schema).unwrap_err();
        assert!(err.to_string().contains("unknown level `XYZ`"), "{err}");
    }

    #[test]
    fn canonical_round_trip_is_byte_identical() {
        let text = format!("{HEADER}{}{}", rows("a", &[1, 2, 3]), rows("b", &[1, 2, 3]));
        let c = read_cohort_csv(text.as_bytes(), &tiny_schema()).unwrap();
        let mut out = Vec::new();
        write_cohort_csv_to(&c, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }
}
