//! Feature schemas, patient trajectories, CSV ingestion, normalisation and
//! the latent-factor synthetic cohort generator.

mod csv_io;
mod generator;
mod normalize;
mod schema;

pub use csv_io::{load_cohort_csv, read_cohort_csv, write_cohort_csv, write_cohort_csv_to};
pub use generator::{
    analytic_association, generate_synthetic_cohort, AssociationEstimate, GeneratorSpec,
    MonteCarloSettings, NumericParams,
};
pub use normalize::{apply_normalizer, fit_normalizer, FeatureStats, Normalizer};
pub use schema::{
    make_schema, CategoricalFeature, DatasetId, FeatureKind, FeatureSchema, NumericFeature,
    TimeUnit,
};

use std::collections::HashSet;

use crate::error::{Error, Result};

/// One patient's complete fixed-length trajectory. Steps are 1-based in the
/// public accessors, matching the CSV format.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientTrajectory {
    pub patient_id: String,
    n_numeric: usize,
    n_categorical: usize,
    numeric: Vec<f64>,
    categorical: Vec<usize>,
}

impl PatientTrajectory {
    /// `numeric` is `length × n_numeric` row-major, `categorical` is
    /// `length × n_categorical` level indices.
    pub fn new(
        patient_id: impl Into<String>,
        schema: &FeatureSchema,
        numeric: Vec<f64>,
        categorical: Vec<usize>,
    ) -> Result<Self> {
        let t = PatientTrajectory {
            patient_id: patient_id.into(),
            n_numeric: schema.n_numeric(),
            n_categorical: schema.n_categorical(),
            numeric,
            categorical,
        };
        t.check(schema)?;
        Ok(t)
    }

    fn check(&self, schema: &FeatureSchema) -> Result<()> {
        let len = schema.sequence_length;
        if self.numeric.len() != len * schema.n_numeric()
            || self.categorical.len() != len * schema.n_categorical()
            || self.n_numeric != schema.n_numeric()
            || self.n_categorical != schema.n_categorical()
        {
            return Err(Error::shape(format!(
                "trajectory `{}` does not match the schema dimensions",
                self.patient_id
            )));
        }
        if let Some(v) = self.numeric.iter().find(|v| !v.is_finite()) {
            return Err(Error::contract(format!(
                "trajectory `{}` holds a non-finite value {v}",
                self.patient_id
            )));
        }
        let counts = schema.level_counts();
        for row in self.categorical.chunks(self.n_categorical.max(1)) {
            for (f, (&lvl, &k)) in row.iter().zip(&counts).enumerate() {
                if lvl >= k {
                    return Err(Error::contract(format!(
                        "trajectory `{}`: level {lvl} invalid for `{}`",
                        self.patient_id, schema.categorical_features[f].name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        if self.n_numeric > 0 {
            self.numeric.len() / self.n_numeric
        } else {
            self.categorical.len() / self.n_categorical
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn numeric(&self, step: usize, feature: usize) -> f64 {
        self.numeric[(step - 1) * self.n_numeric + feature]
    }

    pub fn categorical(&self, step: usize, feature: usize) -> usize {
        self.categorical[(step - 1) * self.n_categorical + feature]
    }

    pub fn numeric_row(&self, step: usize) -> &[f64] {
        &self.numeric[(step - 1) * self.n_numeric..step * self.n_numeric]
    }

    pub fn categorical_row(&self, step: usize) -> &[usize] {
        &self.categorical[(step - 1) * self.n_categorical..step * self.n_categorical]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub schema: FeatureSchema,
    pub patients: Vec<PatientTrajectory>,
}

impl Cohort {
    pub fn new(schema: FeatureSchema, patients: Vec<PatientTrajectory>) -> Result<Self> {
        schema.validate()?;
        let mut ids = HashSet::new();
        for p in &patients {
            p.check(&schema)?;
            if !ids.insert(p.patient_id.as_str()) {
                return Err(Error::contract(format!(
                    "duplicate patient id `{}`",
                    p.patient_id
                )));
            }
        }
        Ok(Cohort { schema, patients })
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }
}

/// Feature columns of a set of trajectory windows, pooled over patients and
/// steps. Numeric columns are in schema units.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WindowColumns {
    pub numeric: Vec<Vec<f64>>,
    pub categorical: Vec<Vec<usize>>,
}

impl WindowColumns {
    pub fn with_features(n_numeric: usize, n_categorical: usize) -> Self {
        WindowColumns {
            numeric: vec![Vec::new(); n_numeric],
            categorical: vec![Vec::new(); n_categorical],
        }
    }

    /// Pools steps `first..=last` of the given patients.
    pub fn from_cohort(cohort: &Cohort, patients: &[usize], first: usize, last: usize) -> Self {
        let s = &cohort.schema;
        let mut cols = WindowColumns::with_features(s.n_numeric(), s.n_categorical());
        for &p in patients {
            let t = &cohort.patients[p];
            for step in first..=last {
                cols.push_step(t.numeric_row(step), t.categorical_row(step));
            }
        }
        cols
    }

    pub fn push_step(&mut self, numeric: &[f64], categorical: &[usize]) {
        for (col, &v) in self.numeric.iter_mut().zip(numeric) {
            col.push(v);
        }
        for (col, &v) in self.categorical.iter_mut().zip(categorical) {
            col.push(v);
        }
    }

    pub fn n_rows(&self) -> usize {
        self.numeric
            .first()
            .map(Vec::len)
            .or_else(|| self.categorical.first().map(Vec::len))
            .unwrap_or(0)
    }
}
