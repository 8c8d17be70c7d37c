//! OLS residualization of condition-level rates on condition-level features.

use crate::error::{insufficient, invalid, Result, StatsError};

/// A column is collinear when orthogonalization leaves less than this
/// fraction of its norm.
const RANK_TOL: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Removes the components of `v` along the orthonormal columns `q`, twice
/// for numerical stability.
fn project_out(v: &mut [f64], q: &[Vec<f64>]) {
    for _ in 0..2 {
        for qi in q {
            let c = dot(qi, v);
            for (x, y) in v.iter_mut().zip(qi) {
                *x -= c * y;
            }
        }
    }
}

/// Orthonormal basis of `[1, features]` by modified Gram-Schmidt.
fn basis(features: &[Vec<f64>], names: &[String]) -> Result<Vec<Vec<f64>>> {
    let n = features.len();
    let mut q: Vec<Vec<f64>> = vec![vec![1.0 / (n as f64).sqrt(); n]];
    let mut collinear = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let mut v: Vec<f64> = features.iter().map(|r| r[j]).collect();
        let norm0 = dot(&v, &v).sqrt();
        project_out(&mut v, &q);
        let norm = dot(&v, &v).sqrt();
        if norm0 == 0.0 || norm <= RANK_TOL * norm0 {
            collinear.push(name.clone());
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        q.push(v);
    }
    if !collinear.is_empty() {
        return Err(StatsError::RankDeficient(collinear));
    }
    Ok(q)
}

/// Per symptom column, residuals of `rates` on the features plus an
/// intercept. `rates` is conditions × symptoms, `features` conditions ×
/// features.
pub fn residualize_profiles(rates: &[Vec<f64>], features: &[Vec<f64>], names: &[String]) -> Result<Vec<Vec<f64>>> {
    let n = rates.len();
    if features.len() != n {
        return invalid("rates and features differ in row count");
    }
    if features.iter().any(|r| r.len() != names.len()) {
        return invalid("feature rows do not match the feature names");
    }
    if n <= names.len() + 1 {
        return insufficient(format!("residualization needs more than {} conditions, got {n}", names.len() + 1));
    }
    let k = rates[0].len();
    if rates.iter().any(|r| r.len() != k) {
        return invalid("rate rows differ in length");
    }
    let q = basis(features, names)?;
    let mut out = vec![vec![0.0; k]; n];
    for j in 0..k {
        let mut y: Vec<f64> = rates.iter().map(|r| r[j]).collect();
        project_out(&mut y, &q);
        for (o, v) in out.iter_mut().zip(y) {
            o[j] = v;
        }
    }
    Ok(out)
}
