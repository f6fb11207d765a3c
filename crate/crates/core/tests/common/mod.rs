//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use rand::Rng;
use trajbench::cohort::{
    CategoricalFeature, DatasetId, FeatureSchema, GeneratorSpec, NumericFeature, NumericParams, TimeUnit,
};
use trajbench::tensor::{Graph, Tensor, Var};
use trajbench::Result;

pub const FD_STEP: f64 = 1e-5;

/// Worst element of a finite-difference comparison.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub max_rel: f64,
    pub max_abs: f64,
    pub checked: usize,
}

impl GradCheck {
    /// Relative error below `rel`, or both sides essentially zero.
    pub fn passes(&self, rel: f64) -> bool {
        self.max_rel < rel
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        // Gradients near zero have no meaningful relative error; an absolute
        // floor keeps them from dominating.
        let rel = if abs < 1e-8 { 0.0 } else { abs / analytic.abs().max(numeric.abs()) };
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(rel);
        self.checked += 1;
    }
}

/// Random dense matrix with entries uniform in `[-scale, scale]`.
pub fn random_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` with central
/// differences. At most `max_coords` coordinates per input are perturbed,
/// chosen at random.
pub fn grad_check<R, F>(rng: &mut R, inputs: &[Tensor], max_coords: usize, f: F) -> GradCheck
where
    R: Rng,
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars = g.params(inputs).unwrap();
    let loss = f(&g, &vars).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars = g.params(xs).unwrap();
        f(&g, &vars).unwrap().scalar().unwrap()
    };
    let mut out = GradCheck::default();
    let mut work = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.random_range(0..n)).collect()
        };
        for k in coords {
            let x0 = t.data()[k];
            work[i].data_mut()[k] = x0 + FD_STEP;
            let up = eval(&work);
            work[i].data_mut()[k] = x0 - FD_STEP;
            let down = eval(&work);
            work[i].data_mut()[k] = x0;
            out.record(analytic[i][k], (up - down) / (2.0 * FD_STEP));
        }
    }
    out
}

/// Reduces any output to a scalar through a fixed random weighting, so the
/// check covers the whole Jacobian rather than one row of it.
pub fn weighted_sum<'g>(out: Var<'g>, weights: &Tensor) -> Result<Var<'g>> {
    let w = out.graph().constant(weights)?;
    out.mul(w)?.sum()
}

pub fn numeric(name: &str, log_scale: bool) -> NumericFeature {
    NumericFeature {
        name: name.into(),
        unit: "u".into(),
        log_scale,
    }
}

pub fn categorical(name: &str, levels: &[&str]) -> CategoricalFeature {
    CategoricalFeature {
        name: name.into(),
        levels: levels.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn custom_schema(
    numeric: Vec<NumericFeature>,
    categorical: Vec<CategoricalFeature>,
    sequence_length: usize,
) -> FeatureSchema {
    FeatureSchema {
        dataset_id: DatasetId::Custom,
        numeric_features: numeric,
        categorical_features: categorical,
        sequence_length,
        time_unit: TimeUnit::Month,
    }
}

/// Generator over two linear numeric features with the given loadings.
pub fn two_numeric_spec(l1: f64, l2: f64, n_patients: usize) -> GeneratorSpec {
    GeneratorSpec {
        schema: custom_schema(vec![numeric("a", false), numeric("b", false)], vec![], 60),
        n_patients,
        rho: 0.5,
        loadings: vec![l1, l2],
        numeric_params: vec![
            NumericParams { mu: 1.0, sigma: 2.0 },
            NumericParams { mu: -3.0, sigma: 0.5 },
        ],
        categorical_cutpoints: vec![],
    }
}

/// The high-signal ART-shaped cohort: strong persistence and strong loadings
/// on every feature.
pub fn easy_art_spec(n_patients: usize) -> GeneratorSpec {
    let mut spec = GeneratorSpec::calibrated(DatasetId::ArtHiv, n_patients).unwrap();
    spec.rho = 0.9;
    for l in &mut spec.loadings {
        *l = 0.9;
    }
    spec
}
