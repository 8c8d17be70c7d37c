//! Symptom prevalence against normalized layer depth, and a category
//! coherence test over the resulting depth profiles.

use lesionkit::rng::CounterRng;
use serde::{Deserialize, Serialize};

use crate::describe::{at_least, pearson, smoothed_p};
use crate::error::{insufficient, invalid, Result};

const DEPTH_SALT: u64 = 0xde97_5742_0000_0005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub model_id: String,
    pub layer: usize,
    pub n_layers: usize,
    pub severity: f64,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthConfig {
    pub severity_min: f64,
    pub n_bins: usize,
    pub n_perm: usize,
    pub seed: u64,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self {
            severity_min: 0.75,
            n_bins: 10,
            n_perm: 5000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthResult {
    /// Rows contributing to each bin.
    pub bin_counts: Vec<usize>,
    /// Mean prevalence per symptom and bin; `None` for empty bins.
    pub prevalence: Vec<Vec<Option<f64>>>,
    /// Min-max normalized within symptom over non-empty bins.
    pub normalized: Vec<Vec<Option<f64>>>,
    /// Symptoms with a constant depth profile (normalized to zeros).
    pub constant_symptoms: Vec<usize>,
    pub within_r: Option<f64>,
    pub cross_r: Option<f64>,
    pub delta_r: Option<f64>,
    pub p_value: Option<f64>,
    /// Mean within-category correlation per category label.
    pub per_category_within: Vec<Option<f64>>,
    pub n_perm: usize,
    pub seed: u64,
}

/// Normalized depth `layer / (n_layers - 1)`, 0 for single-layer models.
pub fn normalized_depth(layer: usize, n_layers: usize) -> f64 {
    if n_layers <= 1 {
        0.0
    } else {
        layer as f64 / (n_layers - 1) as f64
    }
}

fn bin_of(depth: f64, n_bins: usize) -> usize {
    ((depth * n_bins as f64).floor() as usize).min(n_bins - 1)
}

/// Mean within-category and cross-category correlation over defined pairs.
fn coherence(corr: &[Vec<Option<f64>>], labels: &[usize]) -> (Option<f64>, Option<f64>) {
    let (mut w, mut nw, mut c, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if let Some(r) = corr[i][j] {
                if labels[i] == labels[j] {
                    w += r;
                    nw += 1;
                } else {
                    c += r;
                    nc += 1;
                }
            }
        }
    }
    let avg = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    (avg(w, nw), avg(c, nc))
}

/// `categories[j]` labels symptom `j`.
pub fn depth_topography(rows: &[DepthRow], categories: &[usize], cfg: &DepthConfig) -> Result<DepthResult> {
    if cfg.n_bins < 2 {
        return invalid("depth topography needs at least 2 bins");
    }
    let k = categories.len();
    if rows.iter().any(|r| r.rates.len() != k || r.layer >= r.n_layers.max(1)) {
        return invalid("row rates must match the category list and layers must be below n_layers");
    }
    let mut sums = vec![vec![0.0; cfg.n_bins]; k];
    let mut counts = vec![0usize; cfg.n_bins];
    for r in rows.iter().filter(|r| r.severity >= cfg.severity_min - 1e-12) {
        let b = bin_of(normalized_depth(r.layer, r.n_layers), cfg.n_bins);
        counts[b] += 1;
        for (s, v) in sums.iter_mut().zip(&r.rates) {
            s[b] += v;
        }
    }
    let filled: Vec<usize> = (0..cfg.n_bins).filter(|&b| counts[b] > 0).collect();
    if filled.len() < 2 {
        return insufficient(format!("depth topography needs rows in at least 2 bins, got {}", filled.len()));
    }
    let prevalence: Vec<Vec<Option<f64>>> = sums
        .iter()
        .map(|s| (0..cfg.n_bins).map(|b| (counts[b] > 0).then(|| s[b] / counts[b] as f64)).collect())
        .collect();
    let mut constant_symptoms = Vec::new();
    let mut normalized = Vec::with_capacity(k);
    let mut profiles: Vec<Vec<f64>> = Vec::with_capacity(k);
    for (j, row) in prevalence.iter().enumerate() {
        let vals: Vec<f64> = filled.iter().map(|&b| row[b].unwrap()).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        if span <= 0.0 {
            constant_symptoms.push(j);
        }
        normalized.push(
            row.iter()
                .map(|v| v.map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }))
                .collect::<Vec<_>>(),
        );
        profiles.push(vals);
    }
    let corr: Vec<Vec<Option<f64>>> = (0..k)
        .map(|i| (0..k).map(|j| if i == j { Some(1.0) } else { pearson(&profiles[i], &profiles[j]) }).collect())
        .collect();
    let (within_r, cross_r) = coherence(&corr, categories);
    let delta_r = within_r.zip(cross_r).map(|(w, c)| w - c);
    let n_labels = categories.iter().max().map_or(0, |m| m + 1);
    let per_category_within = (0..n_labels)
        .map(|c| {
            let members: Vec<usize> = (0..k).filter(|&j| categories[j] == c).collect();
            let rs: Vec<f64> = members
                .iter()
                .enumerate()
                .flat_map(|(a, &i)| members[a + 1..].iter().map(move |&j| (i, j)))
                .filter_map(|(i, j)| corr[i][j])
                .collect();
            (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64)
        })
        .collect();
    let p_value = match delta_r {
        Some(obs) if cfg.n_perm > 0 => {
            let mut labels = categories.to_vec();
            let mut hits = 0usize;
            for d in 0..cfg.n_perm {
                labels.copy_from_slice(categories);
                CounterRng::substream(cfg.seed ^ DEPTH_SALT, d as u64).shuffle(&mut labels);
                if let (Some(w), Some(c)) = coherence(&corr, &labels) {
                    if at_least(w - c, obs) {
                        hits += 1;
                    }
                }
            }
            Some(smoothed_p(hits, cfg.n_perm))
        }
        _ => None,
    };
    Ok(DepthResult {
        bin_counts: counts,
        prevalence,
        normalized,
        constant_symptoms,
        within_r,
        cross_r,
        delta_r,
        p_value,
        per_category_within,
        n_perm: cfg.n_perm,
        seed: cfg.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(layer: usize, rates: Vec<f64>) -> DepthRow {
        DepthRow {
            model_id: "m".into(),
            layer,
            n_layers: 5,
            severity: 1.0,
            rates,
        }
    }

    #[test]
    fn identical_rows_in_one_category_correlate_fully() {
        let rows: Vec<DepthRow> = (0..5).map(|l| row(l, vec![l as f64 * 0.1, l as f64 * 0.1, 0.5 - l as f64 * 0.05])).collect();
        let r = depth_topography(&rows, &[0, 0, 1], &DepthConfig { n_perm: 10, ..Default::default() }).unwrap();
        assert_eq!(r.per_category_within[0], Some(1.0));
        assert_eq!(r.within_r, Some(1.0));
        assert!((r.cross_r.unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(r.normalized[0][0], Some(0.0));
        assert_eq!(r.normalized[0][9], Some(1.0));
        assert_eq!(r.normalized[0][1], None);
    }

    #[test]
    fn constants_and_bin_errors() {
        let rows: Vec<DepthRow> = (0..5).map(|l| row(l, vec![0.2, l as f64])).collect();
        let r = depth_topography(&rows, &[0, 1], &DepthConfig { n_perm: 0, ..Default::default() }).unwrap();
        assert_eq!(r.constant_symptoms, vec![0]);
        assert!(r.normalized[0].iter().flatten().all(|&v| v == 0.0));
        assert!(depth_topography(&rows, &[0, 1], &DepthConfig { n_bins: 1, ..Default::default() }).is_err());
        let low: Vec<DepthRow> = rows.into_iter().map(|r| DepthRow { severity: 0.5, ..r }).collect();
        assert!(depth_topography(&low, &[0, 1], &DepthConfig::default()).is_err());
    }

    #[test]
    fn planted_early_and_late_categories() {
        let rows: Vec<DepthRow> = (0..5)
            .map(|l| {
                let e = (4 - l) as f64 * 0.1;
                let t = l as f64 * 0.1;
                row(l, vec![e, e * 0.9 + 0.01, e * 1.1, t, t * 0.8 + 0.02, t * 1.2, t * 0.5])
            })
            .collect();
        let r = depth_topography(&rows, &[0, 0, 0, 1, 1, 1, 1], &DepthConfig { n_perm: 999, ..Default::default() }).unwrap();
        assert!(r.delta_r.unwrap() > 1.0);
        assert!(r.p_value.unwrap() < 0.05);
    }
}
