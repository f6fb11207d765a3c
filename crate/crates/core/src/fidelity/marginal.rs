use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a - F_b|`, with both
/// empirical CDFs evaluated after every distinct pooled value.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("ks_statistic needs two nonempty samples"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::contract("ks_statistic sample contains NaN"));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    let (n, m) = (xs.len(), ys.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = xs[i].min(ys[j]);
        while i < n && xs[i] <= x {
            i += 1;
        }
        while j < m && ys[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    Ok(d)
}

/// Total variation distance between two empirical level distributions.
pub fn tv_distance(p_counts: &[u64], q_counts: &[u64]) -> Result<f64> {
    if p_counts.len() != q_counts.len() {
        return Err(Error::contract(format!(
            "tv_distance over different level sets ({} vs {})",
            p_counts.len(),
            q_counts.len()
        )));
    }
    let p_total: u64 = p_counts.iter().sum();
    let q_total: u64 = q_counts.iter().sum();
    if p_total == 0 || q_total == 0 {
        return Err(Error::contract("tv_distance with a zero total"));
    }
    tv_from_frequencies(
        &p_counts.iter().map(|&c| c as f64 / p_total as f64).collect::<Vec<_>>(),
        &q_counts.iter().map(|&c| c as f64 / q_total as f64).collect::<Vec<_>>(),
    )
}

/// Total variation from already-normalised frequencies.
pub fn tv_from_frequencies(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::contract("tv over different level sets"));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

pub fn level_counts(column: &[usize], levels: usize) -> Vec<u64> {
    let mut counts = vec![0u64; levels];
    for &l in column {
        counts[l] += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalKind {
    Ks,
    Tv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalMetric {
    pub feature: String,
    pub kind: MarginalKind,
    pub value: f64,
    pub n_real: usize,
    pub n_synthetic: usize,
}

/// Binned real-vs-synthetic counts for one feature, kept in the report so
/// plots can be re-rendered without the raw windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub feature: String,
    /// Bin edges for numeric features (`len = bins + 1`), on the scale named
    /// by `scale`; empty for categorical features.
    pub edges: Vec<f64>,
    /// Level labels for categorical features.
    pub labels: Vec<String>,
    pub scale: String,
    pub real: Vec<u64>,
    pub synthetic: Vec<u64>,
}

pub const NUMERIC_BINS: usize = 20;

pub fn numeric_histogram(feature: &str, real: &[f64], synth: &[f64], log: bool) -> Histogram {
    let t = |x: f64| if log { x.ln() } else { x };
    let (lo, hi) = real
        .iter()
        .chain(synth)
        .map(|&x| t(x))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let width = (hi - lo) / NUMERIC_BINS as f64;
    let edges = (0..=NUMERIC_BINS).map(|k| lo + width * k as f64).collect();
    let bin = |x: f64| (((t(x) - lo) / width) as usize).min(NUMERIC_BINS - 1);
    let count = |xs: &[f64]| {
        let mut c = vec![0u64; NUMERIC_BINS];
        xs.iter().for_each(|&x| c[bin(x)] += 1);
        c
    };
    Histogram {
        feature: feature.to_string(),
        edges,
        labels: Vec::new(),
        scale: if log { "ln".into() } else { "linear".into() },
        real: count(real),
        synthetic: count(synth),
    }
}

pub fn categorical_histogram(feature: &str, levels: &[String], real: &[usize], synth: &[usize]) -> Histogram {
    Histogram {
        feature: feature.to_string(),
        edges: Vec::new(),
        labels: levels.to_vec(),
        scale: "levels".into(),
        real: level_counts(real, levels.len()),
        synthetic: level_counts(synth, levels.len()),
    }
}
