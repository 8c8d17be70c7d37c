//! Cosine similarity between mean-centered reference-group profiles and
//! lesion component profiles, with bootstrap intervals and max-T corrected
//! p-values.

use lesionkit::rng::CounterRng;
use serde::{Deserialize, Serialize};

use crate::contrast::burden_adjust;
use crate::describe::{at_least, l2_norm, mean_vector, percentile_ci, smoothed_p};
use crate::error::{insufficient, invalid, Result};

const COSINE_BOOT_SALT: u64 = 0xc051_5742_0000_0007;
const COSINE_PERM_SALT: u64 = 0xc052_5742_0000_0008;

/// Per-record symptom indicators for one named group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordGroup {
    pub name: String,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineConfig {
    pub n_boot: usize,
    pub n_perm: usize,
    pub seed: u64,
    pub level: f64,
}

impl Default for CosineConfig {
    fn default() -> Self {
        Self {
            n_boot: 5000,
            n_perm: 10000,
            seed: 0,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineCell {
    pub group: String,
    pub component: String,
    /// `None` when either centered profile has zero norm.
    pub cosine: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// Corrected against the row-wise maximum over components.
    pub p_row: Option<f64>,
    /// Corrected against the table-wide maximum.
    pub p_table: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineMapResult {
    /// Group-major.
    pub cells: Vec<CosineCell>,
    /// Component with the largest defined cosine, per group.
    pub best_per_row: Vec<Option<String>>,
    pub n_undefined: usize,
    pub n_boot: usize,
    pub n_perm: usize,
    pub seed: u64,
}

/// Cosine of two vectors after centering each across its entries.
pub fn centered_cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let ca = burden_adjust(&[a.to_vec()]).remove(0);
    let cb = burden_adjust(&[b.to_vec()]).remove(0);
    cosine(&ca, &cb)
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na <= 1e-15 || nb <= 1e-15 {
        return None;
    }
    Some((a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0))
}

fn centered_profile(rows: impl IntoIterator<Item = impl AsRef<[f64]>>, k: usize) -> Vec<f64> {
    let rows: Vec<_> = rows.into_iter().collect();
    let m = mean_vector(rows.iter().map(|r| r.as_ref()), k);
    burden_adjust(&[m]).remove(0)
}

fn resample<'a>(rows: &'a [Vec<f64>], rng: &mut CounterRng) -> impl Iterator<Item = &'a [f64]> + 'a {
    let idx: Vec<usize> = (0..rows.len()).map(|_| rng.index(rows.len())).collect();
    idx.into_iter().map(move |i| rows[i].as_slice())
}

pub fn cosine_map(human: &[RecordGroup], lesion: &[RecordGroup], cfg: &CosineConfig) -> Result<CosineMapResult> {
    if human.is_empty() || lesion.is_empty() {
        return insufficient("cosine map needs at least one reference group and one component");
    }
    let k = human[0].rows.first().map_or(0, Vec::len);
    for g in human.iter().chain(lesion) {
        if g.rows.is_empty() {
            return insufficient(format!("group {} has no records", g.name));
        }
        if g.rows.iter().any(|r| r.len() != k) {
            return invalid(format!("group {} does not share the {k}-symptom inventory", g.name));
        }
    }
    let hp: Vec<Vec<f64>> = human.iter().map(|g| centered_profile(&g.rows, k)).collect();
    let lp: Vec<Vec<f64>> = lesion.iter().map(|g| centered_profile(&g.rows, k)).collect();
    let obs: Vec<Vec<Option<f64>>> = hp.iter().map(|h| lp.iter().map(|l| cosine(h, l)).collect()).collect();

    let mut boot: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); lesion.len()]; human.len()];
    for d in 0..cfg.n_boot {
        let mut rng = CounterRng::substream(cfg.seed ^ COSINE_BOOT_SALT, d as u64);
        let bh: Vec<Vec<f64>> = human.iter().map(|g| centered_profile(resample(&g.rows, &mut rng), k)).collect();
        let bl: Vec<Vec<f64>> = lesion.iter().map(|g| centered_profile(resample(&g.rows, &mut rng), k)).collect();
        for (i, h) in bh.iter().enumerate() {
            for (j, l) in bl.iter().enumerate() {
                if let Some(c) = cosine(h, l) {
                    boot[i][j].push(c);
                }
            }
        }
    }

    let pooled: Vec<&Vec<f64>> = lesion.iter().flat_map(|g| &g.rows).collect();
    let sizes: Vec<usize> = lesion.iter().map(|g| g.rows.len()).collect();
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    let mut row_max: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.n_perm); human.len()];
    let mut table_max = Vec::with_capacity(cfg.n_perm);
    for d in 0..cfg.n_perm {
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        CounterRng::substream(cfg.seed ^ COSINE_PERM_SALT, d as u64).shuffle(&mut order);
        let mut start = 0;
        let perm_profiles: Vec<Vec<f64>> = sizes
            .iter()
            .map(|&n| {
                let p = centered_profile(order[start..start + n].iter().map(|&i| pooled[i]), k);
                start += n;
                p
            })
            .collect();
        let mut tmax = f64::NEG_INFINITY;
        for (i, h) in hp.iter().enumerate() {
            let m = perm_profiles.iter().filter_map(|l| cosine(h, l)).fold(f64::NEG_INFINITY, f64::max);
            row_max[i].push(m);
            tmax = tmax.max(m);
        }
        table_max.push(tmax);
    }

    let p_against = |null: &[f64], o: f64| (cfg.n_perm > 0).then(|| smoothed_p(null.iter().filter(|&&m| at_least(m, o)).count(), cfg.n_perm));
    let mut cells = Vec::new();
    let mut best_per_row = Vec::new();
    let mut n_undefined = 0;
    for (i, g) in human.iter().enumerate() {
        let mut best: Option<(f64, &str)> = None;
        for (j, c) in lesion.iter().enumerate() {
            let o = obs[i][j];
            if o.is_none() {
                n_undefined += 1;
            }
            if let Some(v) = o {
                if best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, &c.name));
                }
            }
            let ci = (!boot[i][j].is_empty()).then(|| percentile_ci(&boot[i][j], cfg.level));
            cells.push(CosineCell {
                group: g.name.clone(),
                component: c.name.clone(),
                cosine: o,
                ci_low: ci.map(|c| c.0),
                ci_high: ci.map(|c| c.1),
                p_row: o.and_then(|v| p_against(&row_max[i], v)),
                p_table: o.and_then(|v| p_against(&table_max, v)),
            });
        }
        best_per_row.push(best.map(|(_, n)| n.to_string()));
    }
    Ok(CosineMapResult {
        cells,
        best_per_row,
        n_undefined,
        n_boot: cfg.n_boot,
        n_perm: cfg.n_perm,
        seed: cfg.seed,
    })
}
