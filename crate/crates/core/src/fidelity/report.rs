use serde::{Deserialize, Serialize};

use super::association::{association, Association, Column, Measure};
use super::marginal::{
    categorical_histogram, ks_statistic, level_counts, numeric_histogram, tv_distance, Histogram,
    MarginalKind, MarginalMetric,
};
use crate::cohort::{DatasetId, FeatureSchema, WindowColumns};
use crate::error::{Error, Result};

/// One tile. `value` is `None` for UNDEFINED tiles, which then carry a
/// reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationEntry {
    pub value: Option<f64>,
    pub measure: Measure,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl From<Association> for AssociationEntry {
    fn from(a: Association) -> Self {
        match a {
            Association::Defined { value, measure } => AssociationEntry {
                value: Some(value),
                measure,
                reason: None,
            },
            Association::Undefined { measure, reason } => AssociationEntry {
                value: None,
                measure,
                reason: Some(reason),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationMatrix {
    pub features: Vec<String>,
    pub entries: Vec<Vec<AssociationEntry>>,
}

impl AssociationMatrix {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> &AssociationEntry {
        &self.entries[i][j]
    }

    pub fn value(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i][j].value
    }

    /// CSV form: header row of feature names, one row per feature, empty
    /// cells for UNDEFINED tiles.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let mut header = vec![String::new()];
        header.extend(self.features.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.features.iter().zip(&self.entries) {
            let mut rec = vec![name.clone()];
            rec.extend(
                row.iter()
                    .map(|e| e.value.map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&rec)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::io("<matrix csv>", e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

fn columns<'a>(cols: &'a WindowColumns) -> Vec<Column<'a>> {
    cols.numeric
        .iter()
        .map(|c| Column::Numeric(c))
        .chain(cols.categorical.iter().map(|c| Column::Categorical(c)))
        .collect()
}

/// Fills every feature pair of the pooled window. Only the upper triangle is
/// computed; the lower triangle is mirrored, so the matrix is exactly
/// symmetric.
pub fn association_matrix(window: &WindowColumns, schema: &FeatureSchema) -> Result<AssociationMatrix> {
    if window.numeric.len() != schema.n_numeric() || window.categorical.len() != schema.n_categorical() {
        return Err(Error::shape("window columns do not match the schema"));
    }
    if window.n_rows() == 0 {
        return Err(Error::contract("association_matrix over an empty window"));
    }
    let cols = columns(window);
    let n = cols.len();
    let mut entries: Vec<Vec<Option<AssociationEntry>>> = vec![vec![None; n]; n];
    for i in 0..n {
        for j in i..n {
            let mut e: AssociationEntry = association(&cols[i], &cols[j])?.into();
            if i == j && e.value.is_some() {
                e.value = Some(1.0);
            }
            entries[j][i] = Some(e.clone());
            entries[i][j] = Some(e);
        }
    }
    Ok(AssociationMatrix {
        features: schema.feature_names().map(String::from).collect(),
        entries: entries
            .into_iter()
            .map(|row| row.into_iter().map(|e| e.expect("filled")).collect())
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    /// Mean absolute difference over off-diagonal tiles defined in both
    /// matrices; `None` if there are none.
    pub gap: Option<f64>,
    pub tiles_compared: usize,
    pub tiles_excluded: usize,
}

/// Correlation gap over the upper off-diagonal triangle. UNDEFINED tiles on
/// either side are counted and skipped, never read as numbers.
pub fn correlation_gap(real: &AssociationMatrix, synth: &AssociationMatrix) -> Result<GapSummary> {
    if real.features != synth.features {
        return Err(Error::contract("association matrices over different features"));
    }
    let n = real.len();
    let (mut sum, mut compared, mut excluded) = (0.0, 0, 0);
    for i in 0..n {
        for j in i + 1..n {
            match (real.value(i, j), synth.value(i, j)) {
                (Some(a), Some(b)) => {
                    sum += (a - b).abs();
                    compared += 1;
                }
                _ => excluded += 1,
            }
        }
    }
    Ok(GapSummary {
        gap: (compared > 0).then(|| sum / compared as f64),
        tiles_compared: compared,
        tiles_excluded: excluded,
    })
}

/// Identity of the run a report belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset: DatasetId,
    pub model: String,
    pub g_max: u32,
    /// Seeds and configuration echo, carried verbatim.
    pub provenance: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub dataset: DatasetId,
    pub model: String,
    pub g_max: u32,
    pub marginals: Vec<MarginalMetric>,
    pub histograms: Vec<Histogram>,
    pub assoc_real: AssociationMatrix,
    pub assoc_synthetic: AssociationMatrix,
    pub correlation_gap: GapSummary,
    pub provenance: serde_json::Value,
}

pub fn fidelity_report(
    real: &WindowColumns,
    synth: &WindowColumns,
    schema: &FeatureSchema,
    meta: ReportMeta,
) -> Result<FidelityReport> {
    if real.n_rows() == 0 || synth.n_rows() == 0 {
        return Err(Error::contract("fidelity_report needs nonempty real and synthetic windows"));
    }
    let mut marginals = Vec::with_capacity(schema.n_features());
    let mut histograms = Vec::with_capacity(schema.n_features());
    for (f, feat) in schema.numeric_features.iter().enumerate() {
        let (a, b) = (&real.numeric[f], &synth.numeric[f]);
        marginals.push(MarginalMetric {
            feature: feat.name.clone(),
            kind: MarginalKind::Ks,
            value: ks_statistic(a, b)?,
            n_real: a.len(),
            n_synthetic: b.len(),
        });
        histograms.push(numeric_histogram(&feat.name, a, b, feat.log_scale));
    }
    for (f, feat) in schema.categorical_features.iter().enumerate() {
        let (a, b) = (&real.categorical[f], &synth.categorical[f]);
        let k = feat.levels.len();
        marginals.push(MarginalMetric {
            feature: feat.name.clone(),
            kind: MarginalKind::Tv,
            value: tv_distance(&level_counts(a, k), &level_counts(b, k))?,
            n_real: a.len(),
            n_synthetic: b.len(),
        });
        histograms.push(categorical_histogram(&feat.name, &feat.levels, a, b));
    }
    let assoc_real = association_matrix(real, schema)?;
    let assoc_synthetic = association_matrix(synth, schema)?;
    let gap = correlation_gap(&assoc_real, &assoc_synthetic)?;
    Ok(FidelityReport {
        dataset: meta.dataset,
        model: meta.model,
        g_max: meta.g_max,
        marginals,
        histograms,
        assoc_real,
        assoc_synthetic,
        correlation_gap: gap,
        provenance: meta.provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::make_schema;

    fn window() -> (FeatureSchema, WindowColumns) {
        let schema = make_schema("hypotension").unwrap();
        let mut w = WindowColumns::with_features(3, 2);
        for i in 0..40 {
            let x = i as f64;
            w.push_step(&[60.0 + x, 100.0 + (x * 7.0) % 13.0, 1.0 + x / 40.0], &[i % 3, 0]);
        }
        (schema, w)
    }

    fn meta() -> ReportMeta {
        ReportMeta {
            dataset: DatasetId::Hypotension,
            model: "lstm_seq2seq".into(),
            g_max: 8,
            provenance: serde_json::json!({"master_seed": 7}),
        }
    }

    #[test]
    fn self_comparison_is_all_zero() {
        let (schema, w) = window();
        let r = fidelity_report(&w, &w, &schema, meta()).unwrap();
        assert!(r.marginals.iter().all(|m| m.value == 0.0));
        assert_eq!(r.correlation_gap.gap, Some(0.0));
        assert_eq!(r.g_max, 8);
        assert_eq!(r.provenance["master_seed"], 7);
    }

    #[test]
    fn single_level_feature_row_is_undefined() {
        let (schema, w) = window();
        let m = association_matrix(&w, &schema).unwrap();
        let fluid = 4;
        for j in 0..5 {
            assert_eq!(m.value(fluid, j), None);
            assert_eq!(m.value(j, fluid), None);
            assert!(m.get(fluid, j).reason.is_some());
        }
        for i in 0..4 {
            assert_eq!(m.value(i, i), Some(1.0));
        }
        let csv = m.to_csv().unwrap();
        let last = csv.lines().last().unwrap();
        assert_eq!(last, "Fluid Boluses,,,,,");
        let gap = correlation_gap(&m, &m).unwrap();
        assert_eq!(gap.tiles_compared, 6);
        assert_eq!(gap.tiles_excluded, 4);
    }

    #[test]
    fn matrix_is_symmetric() {
        let (schema, w) = window();
        let m = association_matrix(&w, &schema).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
    }

    #[test]
    fn json_encodes_undefined_as_null_with_reason() {
        let (schema, w) = window();
        let m = association_matrix(&w, &schema).unwrap();
        let v = serde_json::to_value(&m).unwrap();
        assert!(v["entries"][4][0]["value"].is_null());
        assert!(v["entries"][4][0]["reason"].is_string());
        assert!(v["entries"][0][1]["value"].is_number());
    }

    #[test]
    fn empty_side_is_rejected() {
        let (schema, w) = window();
        let empty = WindowColumns::with_features(3, 2);
        assert!(fidelity_report(&w, &empty, &schema, meta()).is_err());
    }
}
