use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Column<'a> {
    Numeric(&'a [f64]),
    Categorical(&'a [usize]),
}

impl Column<'_> {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Pearson,
    Eta,
    CramersV,
}

impl Measure {
    pub fn for_kinds(a: &Column<'_>, b: &Column<'_>) -> Measure {
        match (a, b) {
            (Column::Numeric(_), Column::Numeric(_)) => Measure::Pearson,
            (Column::Categorical(_), Column::Categorical(_)) => Measure::CramersV,
            _ => Measure::Eta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Association {
    Defined { value: f64, measure: Measure },
    Undefined { measure: Measure, reason: String },
}

impl Association {
    pub fn value(&self) -> Option<f64> {
        match self {
            Association::Defined { value, .. } => Some(*value),
            Association::Undefined { .. } => None,
        }
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn zero_variance(x: &[f64]) -> bool {
    x.iter().all(|&v| v == x[0])
}

fn observed_levels(x: &[usize]) -> usize {
    let mut seen: Vec<usize> = x.to_vec();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 || zero_variance(x) || zero_variance(y) {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation ratio η on the square-root scale: the share of the numeric
/// variance explained by the categorical grouping.
pub fn correlation_ratio(values: &[f64], groups: &[usize]) -> Option<f64> {
    if values.len() != groups.len()
        || values.len() < 2
        || zero_variance(values)
        || observed_levels(groups) < 2
    {
        return None;
    }
    let overall = mean(values);
    let mut by_group: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (&v, &g) in values.iter().zip(groups) {
        let e = by_group.entry(g).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let between: f64 = by_group
        .values()
        .map(|&(sum, n)| n as f64 * (sum / n as f64 - overall).powi(2))
        .sum();
    let total: f64 = values.iter().map(|v| (v - overall).powi(2)).sum();
    Some((between / total).clamp(0.0, 1.0).sqrt())
}

/// Cramér's V from the bias-uncorrected χ² statistic over observed levels.
pub fn cramers_v(x: &[usize], y: &[usize]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let index = |col: &[usize]| -> BTreeMap<usize, usize> {
        let mut levels: Vec<usize> = col.to_vec();
        levels.sort_unstable();
        levels.dedup();
        levels.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
    };
    let (rx, ry) = (index(x), index(y));
    let (r, c) = (rx.len(), ry.len());
    if r < 2 || c < 2 {
        return None;
    }
    let mut table = vec![0.0; r * c];
    for (a, b) in x.iter().zip(y) {
        table[rx[a] * c + ry[b]] += 1.0;
    }
    Some(cramers_v_from_table(&table, r, c))
}

pub(crate) fn cramers_v_from_table(table: &[f64], r: usize, c: usize) -> f64 {
    let n: f64 = table.iter().sum();
    let row_tot: Vec<f64> = (0..r).map(|i| table[i * c..(i + 1) * c].iter().sum()).collect();
    let col_tot: Vec<f64> = (0..c).map(|j| (0..r).map(|i| table[i * c + j]).sum()).collect();
    let mut chi2 = 0.0;
    for i in 0..r {
        for j in 0..c {
            let e = row_tot[i] * col_tot[j] / n;
            if e > 0.0 {
                chi2 += (table[i * c + j] - e).powi(2) / e;
            }
        }
    }
    let k = (r.min(c) - 1) as f64;
    (chi2 / (n * k)).sqrt().clamp(0.0, 1.0)
}

/// Mixed-type association for a pair of equally long columns.
pub fn association(a: &Column<'_>, b: &Column<'_>) -> Result<Association> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "association over columns of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let measure = Measure::for_kinds(a, b);
    if a.len() < 2 {
        return Ok(Association::Undefined {
            measure,
            reason: "fewer than two observations".into(),
        });
    }
    if let Some(reason) = degeneracy(a).or_else(|| degeneracy(b)) {
        return Ok(Association::Undefined { measure, reason });
    }
    let value = match (a, b) {
        (Column::Numeric(x), Column::Numeric(y)) => pearson(x, y),
        (Column::Numeric(x), Column::Categorical(g)) | (Column::Categorical(g), Column::Numeric(x)) => {
            correlation_ratio(x, g)
        }
        (Column::Categorical(x), Column::Categorical(y)) => cramers_v(x, y),
    }
    .expect("degenerate inputs were handled above");
    Ok(Association::Defined { value, measure })
}

pub(crate) fn degeneracy(c: &Column<'_>) -> Option<String> {
    match c {
        Column::Numeric(x) if zero_variance(x) => Some("numeric feature has zero variance".into()),
        Column::Categorical(x) if observed_levels(x) < 2 => {
            Some("categorical feature has a single observed level".into())
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_self_is_one() {
        let x = [1.0, 4.0, 2.0, 8.0];
        assert_eq!(pearson(&x, &x), Some(1.0));
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(pearson(&x, &neg), Some(-1.0));
    }

    #[test]
    fn cramers_v_extremes() {
        let (mut x, mut y) = (vec![], vec![]);
        for _ in 0..10 {
            x.push(0);
            y.push(0);
            x.push(1);
            y.push(1);
        }
        assert!((cramers_v(&x, &y).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cramers_v_from_table(&[5.0, 5.0, 5.0, 5.0], 2, 2), 0.0);
        assert!((cramers_v_from_table(&[10.0, 0.0, 0.0, 10.0], 2, 2) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn eta_between_groups_only() {
        let eta = correlation_ratio(&[1.0, 1.0, 3.0, 3.0], &[0, 0, 1, 1]).unwrap();
        assert_eq!(eta, 1.0);
        let none = correlation_ratio(&[1.0, 3.0, 1.0, 3.0], &[0, 0, 1, 1]).unwrap();
        assert_eq!(none, 0.0);
    }

    #[test]
    fn single_level_is_undefined() {
        let g = [2usize, 2, 2];
        let x = [1.0, 2.0, 3.0];
        for other in [Column::Numeric(&x), Column::Categorical(&[0, 1, 0])] {
            let a = association(&Column::Categorical(&g), &other).unwrap();
            assert!(matches!(a, Association::Undefined { .. }), "{a:?}");
        }
        let flat = association(&Column::Numeric(&[5.0, 5.0, 5.0]), &Column::Numeric(&x)).unwrap();
        assert_eq!(flat.value(), None);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(association(&Column::Numeric(&[1.0, 2.0]), &Column::Numeric(&[1.0])).is_err());
    }

    #[test]
    fn measure_tags() {
        let x = [1.0, 2.0, 4.0];
        let g = [0usize, 1, 1];
        let m = |a, b| match association(&a, &b).unwrap() {
            Association::Defined { measure, .. } => measure,
            Association::Undefined { measure, .. } => measure,
        };
        assert_eq!(m(Column::Numeric(&x), Column::Numeric(&x)), Measure::Pearson);
        assert_eq!(m(Column::Numeric(&x), Column::Categorical(&g)), Measure::Eta);
        assert_eq!(m(Column::Categorical(&g), Column::Numeric(&x)), Measure::Eta);
        assert_eq!(m(Column::Categorical(&g), Column::Categorical(&g)), Measure::CramersV);
    }
}
