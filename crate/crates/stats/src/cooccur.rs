//! Symptom co-occurrence: phi matrices and the Mantel test.

use lesionkit::rng::CounterRng;
use serde::{Deserialize, Serialize};

use crate::describe::{at_least, pearson, smoothed_p};
use crate::error::{insufficient, invalid, Result};

const MANTEL_SALT: u64 = 0x3a27_5742_0000_0004;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhiMatrix {
    /// Symmetric, unit diagonal.
    pub values: Vec<Vec<f64>>,
    /// Off-diagonal pairs (i < j) whose denominator was zero; reported as 0.
    pub undefined: Vec<(usize, usize)>,
}

/// Phi from 2×2 counts: `a` both present, `b` only the first, `c` only the
/// second, `d` neither.
pub fn phi_from_counts(a: u64, b: u64, c: u64, d: u64) -> Option<f64> {
    let (a, b, c, d) = (a as f64, b as f64, c as f64, d as f64);
    let den = ((a + b) * (c + d) * (a + c) * (b + d)).sqrt();
    if den == 0.0 {
        return None;
    }
    Some((a * d - b * c) / den)
}

/// Pairwise phi over the columns of a boolean table.
pub fn phi_matrix(rows: &[Vec<bool>]) -> Result<PhiMatrix> {
    if rows.len() < 2 {
        return insufficient(format!("phi matrix needs at least 2 rows, got {}", rows.len()));
    }
    let k = rows[0].len();
    if rows.iter().any(|r| r.len() != k) {
        return invalid("rows differ in length");
    }
    let mut values = vec![vec![0.0; k]; k];
    let mut undefined = Vec::new();
    for i in 0..k {
        values[i][i] = 1.0;
        for j in i + 1..k {
            let mut n = [0u64; 4];
            for r in rows {
                n[match (r[i], r[j]) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                }] += 1;
            }
            let phi = phi_from_counts(n[0], n[1], n[2], n[3]).unwrap_or_else(|| {
                undefined.push((i, j));
                0.0
            });
            values[i][j] = phi;
            values[j][i] = phi;
        }
    }
    Ok(PhiMatrix { values, undefined })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MantelResult {
    /// `None` when either upper triangle has zero variance.
    pub r: Option<f64>,
    pub p_value: Option<f64>,
    pub n_perm: usize,
    pub seed: u64,
}

pub fn upper_triangle(m: &[Vec<f64>]) -> Vec<f64> {
    let n = m.len();
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| m[i][j]).collect()
}

fn check_square(m: &[Vec<f64>], name: &str) -> Result<()> {
    let n = m.len();
    if m.iter().any(|r| r.len() != n) {
        return invalid(format!("{name} is not square"));
    }
    for i in 0..n {
        for j in 0..i {
            if (m[i][j] - m[j][i]).abs() > 1e-12 {
                return invalid(format!("{name} is not symmetric at ({i}, {j})"));
            }
        }
    }
    Ok(())
}

/// One-sided Mantel test: correlation of strict upper triangles, p from
/// joint row/column permutations of `b`.
pub fn mantel_test(a: &[Vec<f64>], b: &[Vec<f64>], n_perm: usize, seed: u64) -> Result<MantelResult> {
    check_square(a, "A")?;
    check_square(b, "B")?;
    if a.len() != b.len() {
        return invalid("matrices differ in size");
    }
    if a.len() < 3 {
        return insufficient("Mantel test needs matrices of size at least 3");
    }
    if n_perm == 0 {
        return invalid("n_perm must be positive");
    }
    let ua = upper_triangle(a);
    let Some(r) = pearson(&ua, &upper_triangle(b)) else {
        return Ok(MantelResult { r: None, p_value: None, n_perm, seed });
    };
    let n = a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut ub = vec![0.0; ua.len()];
    let mut hits = 0usize;
    for d in 0..n_perm {
        let mut rng = CounterRng::substream(seed ^ MANTEL_SALT, d as u64);
        perm.iter_mut().enumerate().for_each(|(i, p)| *p = i);
        rng.shuffle(&mut perm);
        let mut t = 0;
        for i in 0..n {
            for j in i + 1..n {
                ub[t] = b[perm[i]][perm[j]];
                t += 1;
            }
        }
        if at_least(pearson(&ua, &ub).unwrap_or(0.0), r) {
            hits += 1;
        }
    }
    Ok(MantelResult {
        r: Some(r),
        p_value: Some(smoothed_p(hits, n_perm)),
        n_perm,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_examples() {
        assert!((phi_from_counts(2, 1, 1, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let rows: Vec<Vec<bool>> = [[true, true, false], [false, false, false], [true, true, false]]
            .iter()
            .map(|r| r.to_vec())
            .collect();
        let m = phi_matrix(&rows).unwrap();
        assert_eq!(m.values[0][1], 1.0);
        assert_eq!(m.undefined, vec![(0, 2), (1, 2)]);
        assert_eq!(m.values[2][2], 1.0);
        assert!(phi_matrix(&rows[..1]).is_err());
    }

    fn sym(u: [f64; 6]) -> Vec<Vec<f64>> {
        let mut m = vec![vec![1.0; 4]; 4];
        let mut t = 0;
        for i in 0..4 {
            for j in i + 1..4 {
                m[i][j] = u[t];
                m[j][i] = u[t];
                t += 1;
            }
        }
        m
    }

    #[test]
    fn mantel_extremes() {
        let a = sym([0.1, 0.5, -0.2, 0.3, 0.0, 0.8]);
        let neg = sym([-0.1, -0.5, 0.2, -0.3, 0.0, -0.8]);
        assert!((mantel_test(&a, &a, 100, 0).unwrap().r.unwrap() - 1.0).abs() < 1e-12);
        assert!((mantel_test(&a, &neg, 100, 0).unwrap().r.unwrap() + 1.0).abs() < 1e-12);
        let flat = sym([0.2; 6]);
        assert_eq!(mantel_test(&a, &flat, 100, 0).unwrap().r, None);
        assert!(mantel_test(&a, &a, 0, 0).is_err());
    }
}
