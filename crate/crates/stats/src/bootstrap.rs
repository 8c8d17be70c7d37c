//! Cluster bootstrap for two-sided category-mean differences.

use std::collections::BTreeMap;

use lesionkit::rng::CounterRng;
use serde::{Deserialize, Serialize};

use crate::describe::percentile_ci;
use crate::error::{insufficient, invalid, Result};

const CLUSTER_SALT: u64 = 0xc1c1_5742_0000_0006;
const MEAN_SALT: u64 = 0xb0b0_5742_0000_0009;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteredRow {
    pub cluster: Option<String>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteredBootstrapResult {
    /// Mean of side A minus mean of side B, per column.
    pub observed: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub n_clusters_a: usize,
    pub n_clusters_b: usize,
    pub n_resamples: usize,
    pub seed: u64,
    /// Resampled differences, one row per resample.
    #[serde(skip)]
    pub draws: Vec<Vec<f64>>,
}

/// Per-cluster column sums and row counts, in cluster-name order.
fn clusters(rows: &[ClusteredRow], k: usize, side: &str) -> Result<Vec<(Vec<f64>, usize)>> {
    let mut map: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let Some(c) = r.cluster.as_deref() else {
            return invalid(format!("side {side} row {i} has no cluster key"));
        };
        if r.values.len() != k {
            return invalid(format!("side {side} row {i} has {} values, expected {k}", r.values.len()));
        }
        let e = map.entry(c).or_insert_with(|| (vec![0.0; k], 0));
        for (s, v) in e.0.iter_mut().zip(&r.values) {
            *s += v;
        }
        e.1 += 1;
    }
    if map.len() < 2 {
        return insufficient(format!("side {side} needs at least 2 clusters, got {}", map.len()));
    }
    Ok(map.into_values().collect())
}

fn pooled_mean(chosen: impl Iterator<Item = usize>, cl: &[(Vec<f64>, usize)], k: usize) -> Vec<f64> {
    let mut sum = vec![0.0; k];
    let mut n = 0usize;
    for c in chosen {
        for (s, v) in sum.iter_mut().zip(&cl[c].0) {
            *s += v;
        }
        n += cl[c].1;
    }
    sum.iter().map(|s| s / n as f64).collect()
}

/// Resamples clusters with replacement on each side independently and
/// recomputes the row-pooled mean difference.
pub fn clustered_bootstrap(a: &[ClusteredRow], b: &[ClusteredRow], n_resamples: usize, seed: u64, level: f64) -> Result<ClusteredBootstrapResult> {
    let k = a.first().or(b.first()).map_or(0, |r| r.values.len());
    let ca = clusters(a, k, "A")?;
    let cb = clusters(b, k, "B")?;
    if n_resamples == 0 {
        return invalid("n_resamples must be positive");
    }
    let diff = |x: Vec<f64>, y: Vec<f64>| x.iter().zip(&y).map(|(p, q)| p - q).collect::<Vec<f64>>();
    let observed = diff(pooled_mean(0..ca.len(), &ca, k), pooled_mean(0..cb.len(), &cb, k));
    let draws: Vec<Vec<f64>> = (0..n_resamples)
        .map(|i| {
            let mut rng = CounterRng::substream(seed ^ CLUSTER_SALT, i as u64);
            let pa: Vec<usize> = (0..ca.len()).map(|_| rng.index(ca.len())).collect();
            let pb: Vec<usize> = (0..cb.len()).map(|_| rng.index(cb.len())).collect();
            diff(pooled_mean(pa.into_iter(), &ca, k), pooled_mean(pb.into_iter(), &cb, k))
        })
        .collect();
    let (ci_low, ci_high) = (0..k)
        .map(|j| percentile_ci(&draws.iter().map(|d| d[j]).collect::<Vec<_>>(), level))
        .unzip();
    Ok(ClusteredBootstrapResult {
        observed,
        ci_low,
        ci_high,
        n_clusters_a: ca.len(),
        n_clusters_b: cb.len(),
        n_resamples,
        seed,
        draws,
    })
}

/// Percentile CI for the mean of `xs`, resampling rows with replacement.
pub fn bootstrap_mean_ci(xs: &[f64], n_resamples: usize, seed: u64, level: f64) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return insufficient(format!("bootstrap needs at least 2 values, got {}", xs.len()));
    }
    if n_resamples == 0 {
        return invalid("n_resamples must be positive");
    }
    let n = xs.len();
    let draws: Vec<f64> = (0..n_resamples)
        .map(|i| {
            let mut rng = CounterRng::substream(seed ^ MEAN_SALT, i as u64);
            (0..n).map(|_| xs[rng.index(n)]).sum::<f64>() / n as f64
        })
        .collect();
    Ok(percentile_ci(&draws, level))
}
