//! FFN-versus-attention profile contrasts over paired strata.
//!
//! Distances are L2 norms of mean difference vectors, reported in percentage
//! points (rates × 100). Resampling draws use one counter substream per
//! resample index, so results depend only on the seed.

use std::collections::BTreeMap;

use lesionkit::model::{ComponentKind, Mechanism};
use lesionkit::records::{ConditionProfile, StratumKey, StratumPair};
use lesionkit::rng::CounterRng;
use serde::{Deserialize, Serialize};

use crate::describe::{at_least, bh_adjust, l2_norm, mean_vector, percentile_ci, smoothed_p};
use crate::error::{insufficient, invalid, Result};

pub(crate) const BOOTSTRAP_SALT: u64 = 0xb007_5742_0000_0001;
pub(crate) const FLIP_SALT: u64 = 0xf11f_5742_0000_0002;
pub(crate) const PERMUTE_SALT: u64 = 0x9e4d_5742_0000_0003;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastConfig {
    pub n_resamples: usize,
    pub n_flips: usize,
    pub seed: u64,
    pub ci_level: f64,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            n_resamples: 5000,
            n_flips: 5000,
            seed: 0,
            ci_level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomDiff {
    pub diff_pp: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Two-sided sign-flip p on the absolute mean difference.
    pub p_signflip: f64,
    pub q_bh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileContrastResult {
    pub l2_distance_pp: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub p_signflip: f64,
    /// Restricted component permutation p, when computed alongside.
    pub p_permutation: Option<f64>,
    pub n_strata: usize,
    /// True when all `2^n` sign assignments were enumerated.
    pub exact_signflip: bool,
    pub n_flip_draws: usize,
    pub n_resamples: usize,
    pub seed: u64,
    pub per_symptom: Vec<SymptomDiff>,
}

/// The paired test over stratum FFN/attention means.
pub fn paired_profile_test(pairs: &[StratumPair], cfg: &ContrastConfig) -> Result<ProfileContrastResult> {
    let diffs: Vec<Vec<f64>> = pairs.iter().map(StratumPair::difference).collect();
    paired_profile_test_diffs(&diffs, cfg)
}

/// The paired test over precomputed per-stratum difference vectors.
///
/// Sign-flip p counts assignments whose statistic is at least the observed
/// one, identity included, as `(hits + 1) / (draws + 1)`. When `2^n` does not
/// exceed `n_flips` every assignment is enumerated instead of sampled.
pub fn paired_profile_test_diffs(diffs: &[Vec<f64>], cfg: &ContrastConfig) -> Result<ProfileContrastResult> {
    let n = diffs.len();
    if n < 2 {
        return insufficient(format!("paired profile test needs at least 2 strata, got {n}"));
    }
    let k = diffs[0].len();
    if diffs.iter().any(|d| d.len() != k) {
        return invalid("difference vectors differ in length");
    }
    if !(cfg.ci_level > 0.0 && cfg.ci_level < 1.0) || cfg.n_resamples == 0 || cfg.n_flips == 0 {
        return invalid("n_resamples and n_flips must be positive and ci_level in (0, 1)");
    }
    let observed = mean_vector(diffs.iter().map(Vec::as_slice), k);
    let stat = l2_norm(&observed) * 100.0;

    let mut boot_l2 = Vec::with_capacity(cfg.n_resamples);
    let mut boot_sym: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.n_resamples); k];
    let mut acc = vec![0.0; k];
    for b in 0..cfg.n_resamples {
        let mut rng = CounterRng::substream(cfg.seed ^ BOOTSTRAP_SALT, b as u64);
        acc.iter_mut().for_each(|a| *a = 0.0);
        for _ in 0..n {
            for (a, v) in acc.iter_mut().zip(&diffs[rng.index(n)]) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a *= 100.0 / n as f64);
        boot_l2.push(l2_norm(&acc));
        for (col, a) in boot_sym.iter_mut().zip(&acc) {
            col.push(*a);
        }
    }
    let (ci_low, ci_high) = percentile_ci(&boot_l2, cfg.ci_level);

    let exact = n < usize::BITS as usize - 1 && (1usize << n) <= cfg.n_flips;
    let draws = if exact { 1usize << n } else { cfg.n_flips };
    let mut hits = 0usize;
    let mut sym_hits = vec![0usize; k];
    let mut signs = vec![1.0f64; n];
    for d in 0..draws {
        if exact {
            for (i, s) in signs.iter_mut().enumerate() {
                *s = if d >> i & 1 == 1 { -1.0 } else { 1.0 };
            }
        } else {
            let mut rng = CounterRng::substream(cfg.seed ^ FLIP_SALT, d as u64);
            for s in signs.iter_mut() {
                *s = if rng.coin() { -1.0 } else { 1.0 };
            }
        }
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (diff, s) in diffs.iter().zip(&signs) {
            for (a, v) in acc.iter_mut().zip(diff) {
                *a += s * v;
            }
        }
        acc.iter_mut().for_each(|a| *a *= 100.0 / n as f64);
        if at_least(l2_norm(&acc), stat) {
            hits += 1;
        }
        for j in 0..k {
            if at_least(acc[j].abs(), (observed[j] * 100.0).abs()) {
                sym_hits[j] += 1;
            }
        }
    }
    let sym_p: Vec<f64> = sym_hits.iter().map(|&h| smoothed_p(h, draws)).collect();
    let q = bh_adjust(&sym_p)?;
    let per_symptom = (0..k)
        .map(|j| {
            let (lo, hi) = percentile_ci(&boot_sym[j], cfg.ci_level);
            SymptomDiff {
                diff_pp: observed[j] * 100.0,
                ci_low: lo,
                ci_high: hi,
                p_signflip: sym_p[j],
                q_bh: q[j],
            }
        })
        .collect();
    Ok(ProfileContrastResult {
        l2_distance_pp: stat,
        ci_low,
        ci_high,
        p_signflip: smoothed_p(hits, draws),
        p_permutation: None,
        n_strata: n,
        exact_signflip: exact,
        n_flip_draws: draws,
        n_resamples: cfg.n_resamples,
        seed: cfg.seed,
        per_symptom,
    })
}

/// Component-level rows of one stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentStratum {
    pub key: StratumKey,
    pub components: Vec<ComponentKind>,
    pub rates: Vec<Vec<f64>>,
}

impl ComponentStratum {
    fn has_both_mechanisms(&self) -> bool {
        let ffn = self.components.iter().filter(|c| c.mechanism() == Mechanism::Ffn).count();
        ffn > 0 && ffn < self.components.len()
    }
}

/// Groups lesion profiles (severity > 0, at least one scored response) by
/// stratum, components in canonical order.
pub fn component_strata(profiles: &[ConditionProfile]) -> Vec<ComponentStratum> {
    let mut map: BTreeMap<StratumKey, Vec<(ComponentKind, Vec<f64>)>> = BTreeMap::new();
    for p in profiles {
        let (Some(key), Some(kind)) = (p.key.stratum(), p.key.component) else { continue };
        if key.severity.is_zero() || p.n_responses == 0 {
            continue;
        }
        map.entry(key).or_default().push((kind, p.rates.clone()));
    }
    map.into_iter()
        .map(|(key, mut rows)| {
            rows.sort_by_key(|(k, _)| *k);
            ComponentStratum {
                key,
                components: rows.iter().map(|(k, _)| *k).collect(),
                rates: rows.into_iter().map(|(_, r)| r).collect(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationResult {
    pub statistic_pp: f64,
    pub p_value: f64,
    pub n_strata: usize,
    /// Strata with fewer than two components or a single mechanism.
    pub n_skipped: usize,
    pub n_perm: usize,
    pub seed: u64,
}

/// Mean over strata of (FFN-slot mean minus attention-slot mean), where
/// `order[s][slot]` is the row of stratum `s` carrying that slot's label.
fn grouped_statistic(strata: &[&ComponentStratum], order: &[Vec<usize>], k: usize) -> f64 {
    let mut total = vec![0.0; k];
    for (s, ord) in strata.iter().zip(order) {
        let (mut f, mut a) = (vec![0.0; k], vec![0.0; k]);
        let (mut nf, mut na) = (0usize, 0usize);
        for (slot, &row) in ord.iter().enumerate() {
            let (dst, cnt) = if s.components[slot].mechanism() == Mechanism::Ffn {
                (&mut f, &mut nf)
            } else {
                (&mut a, &mut na)
            };
            for (d, v) in dst.iter_mut().zip(&s.rates[row]) {
                *d += v;
            }
            *cnt += 1;
        }
        for j in 0..k {
            total[j] += f[j] / nf as f64 - a[j] / na as f64;
        }
    }
    let n = strata.len() as f64;
    total.iter().map(|t| t / n * 100.0).map(|x| x * x).sum::<f64>().sqrt()
}

/// Shuffles component labels within each stratum and recomputes the paired
/// statistic.
pub fn restricted_component_permutation(profiles: &[ConditionProfile], n_perm: usize, seed: u64) -> Result<PermutationResult> {
    restricted_permutation_strata(&component_strata(profiles), n_perm, seed)
}

pub fn restricted_permutation_strata(strata: &[ComponentStratum], n_perm: usize, seed: u64) -> Result<PermutationResult> {
    if n_perm == 0 {
        return invalid("n_perm must be positive");
    }
    let usable: Vec<&ComponentStratum> = strata
        .iter()
        .filter(|s| {
            let mut distinct = s.components.clone();
            distinct.dedup();
            distinct.len() >= 2 && s.has_both_mechanisms()
        })
        .collect();
    let skipped = strata.len() - usable.len();
    if usable.is_empty() {
        return insufficient("no stratum has both FFN and attention components");
    }
    let k = usable[0].rates[0].len();
    let identity: Vec<Vec<usize>> = usable.iter().map(|s| (0..s.components.len()).collect()).collect();
    let observed = grouped_statistic(&usable, &identity, k);
    let mut order = identity.clone();
    let mut hits = 0usize;
    for d in 0..n_perm {
        let mut rng = CounterRng::substream(seed ^ PERMUTE_SALT, d as u64);
        for (o, id) in order.iter_mut().zip(&identity) {
            o.copy_from_slice(id);
            rng.shuffle(o);
        }
        if at_least(grouped_statistic(&usable, &order, k), observed) {
            hits += 1;
        }
    }
    Ok(PermutationResult {
        statistic_pp: observed,
        p_value: smoothed_p(hits, n_perm),
        n_strata: usable.len(),
        n_skipped: skipped,
        n_perm,
        seed,
    })
}

/// Subtracts each row's mean across symptoms.
pub fn burden_adjust(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let m = if r.is_empty() { 0.0 } else { r.iter().sum::<f64>() / r.len() as f64 };
            r.iter().map(|v| v - m).collect()
        })
        .collect()
}

/// [`burden_adjust`] applied to every profile's rates.
pub fn burden_adjust_profiles(profiles: &[ConditionProfile]) -> Vec<ConditionProfile> {
    profiles
        .iter()
        .map(|p| ConditionProfile {
            rates: burden_adjust(std::slice::from_ref(&p.rates)).remove(0),
            ..p.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ContrastConfig {
        ContrastConfig {
            n_resamples: 500,
            n_flips: 500,
            ..Default::default()
        }
    }

    #[test]
    fn zero_differences() {
        let r = paired_profile_test_diffs(&vec![vec![0.0; 4]; 12], &cfg()).unwrap();
        assert_eq!(r.l2_distance_pp, 0.0);
        assert_eq!(r.p_signflip, 1.0);
        assert!(r.per_symptom.iter().all(|s| s.q_bh == 1.0));
    }

    #[test]
    fn three_constant_strata_enumerate_exactly() {
        let d = vec![vec![0.05, 0.0, 0.0]; 3];
        let r = paired_profile_test_diffs(&d, &cfg()).unwrap();
        assert!((r.l2_distance_pp - 5.0).abs() < 1e-12);
        assert!(r.exact_signflip);
        assert_eq!(r.n_flip_draws, 8);
        // Identity and the global flip both reach the observed norm.
        assert!((r.p_signflip - 3.0 / 9.0).abs() < 1e-12);
        assert!((r.ci_low - 5.0).abs() < 1e-12 && (r.ci_high - 5.0).abs() < 1e-12);
    }

    #[test]
    fn needs_two_strata() {
        assert!(paired_profile_test_diffs(&[vec![0.1]], &cfg()).is_err());
    }

    #[test]
    fn same_seed_same_result() {
        let d: Vec<Vec<f64>> = (0..20).map(|i| vec![(i as f64 * 0.37).sin() * 0.1, 0.02]).collect();
        let a = paired_profile_test_diffs(&d, &cfg()).unwrap();
        let b = paired_profile_test_diffs(&d, &cfg()).unwrap();
        assert_eq!(a, b);
        let c = paired_profile_test_diffs(&d, &ContrastConfig { seed: 1, ..cfg() }).unwrap();
        assert_eq!(a.l2_distance_pp, c.l2_distance_pp);
    }

    fn stratum(rows: Vec<Vec<f64>>) -> ComponentStratum {
        ComponentStratum {
            key: StratumKey {
                model_id: "m".into(),
                layer: 0,
                severity: lesionkit::lesion::Severity::FULL,
                strategy: lesionkit::lesion::Strategy::Zero,
            },
            components: ComponentKind::ALL.to_vec(),
            rates: rows,
        }
    }

    #[test]
    fn identical_profiles_give_p_one() {
        let s: Vec<ComponentStratum> = (0..4).map(|_| stratum(vec![vec![0.3, 0.1]; 7])).collect();
        let r = restricted_permutation_strata(&s, 200, 3).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(restricted_permutation_strata(&s, 0, 3).is_err());
    }

    #[test]
    fn planted_shift_attains_bound() {
        let s: Vec<ComponentStratum> = (0..6)
            .map(|_| {
                stratum(
                    ComponentKind::ALL
                        .iter()
                        .map(|c| vec![if c.mechanism() == Mechanism::Ffn { 0.5 } else { 0.1 }, 0.2])
                        .collect(),
                )
            })
            .collect();
        let r = restricted_permutation_strata(&s, 999, 3).unwrap();
        assert!((r.statistic_pp - 40.0).abs() < 1e-9);
        assert_eq!(r.p_value, 1.0 / 1000.0);
    }

    #[test]
    fn degenerate_strata_are_skipped() {
        let mut one = stratum(vec![vec![0.1]; 3]);
        one.components = vec![ComponentKind::Gate, ComponentKind::Up, ComponentKind::Down];
        let ok = stratum(vec![vec![0.1]; 7]);
        let r = restricted_permutation_strata(&[one, ok], 10, 0).unwrap();
        assert_eq!((r.n_strata, r.n_skipped), (1, 1));
    }

    #[test]
    fn burden_examples() {
        assert_eq!(burden_adjust(&[vec![0.3; 5]]), vec![vec![0.0; 5]]);
        let a = burden_adjust(&[vec![0.2, 0.4]]);
        assert!((a[0][0] + 0.1).abs() < 1e-15 && (a[0][1] - 0.1).abs() < 1e-15);
        let rows = vec![vec![0.1, 0.7, 0.25], vec![0.9, 0.0, 0.33]];
        let once = burden_adjust(&rows);
        let twice = burden_adjust(&once);
        for (x, y) in once.iter().flatten().zip(twice.iter().flatten()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(once.iter().all(|r| r.iter().sum::<f64>().abs() < 1e-12));
    }
}
