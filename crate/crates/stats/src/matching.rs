//! Nearest-neighbour matching of FFN conditions to attention conditions,
//! either on standardized visible-damage variables within stratum or on
//! internal dose proxies.
//!
//! Ties in distance go to the lexicographically smaller component name.

use std::collections::BTreeMap;

use lesionkit::model::{ComponentKind, Mechanism};
use lesionkit::records::{ConditionKey, StratumKey};
use serde::{Deserialize, Serialize};

use crate::contrast::{paired_profile_test_diffs, ContrastConfig, ProfileContrastResult};
use crate::describe::{l2_distance, mean, median, mean_vector, variance};
use crate::error::{insufficient, invalid, Result};

/// Floor applied to dose proxies before taking log10.
pub const PROXY_FLOOR: f64 = 1e-12;

fn mechanism_of(key: &ConditionKey) -> Result<(ComponentKind, Mechanism)> {
    match key.component {
        Some(c) => Ok((c, c.mechanism())),
        None => invalid("intact condition passed to matching"),
    }
}

/// Index of the candidate minimising `dist`, ties to the smaller component
/// name and then the earlier index.
fn nearest<T>(candidates: &[T], kind: impl Fn(&T) -> ComponentKind, dist: impl Fn(&T) -> f64) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let d = dist(c);
        let better = match best {
            None => true,
            Some((j, bd)) => d < bd || (d == bd && kind(c).name() < kind(&candidates[j]).name()),
        };
        if better {
            best = Some((i, d));
        }
    }
    best
}

/// Column-wise z-scores with an `n - 1` sd. Columns with fewer than two
/// values or zero sd become zeros and are listed in the second return.
pub fn zscore_columns(rows: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let m = rows.first().map_or(0, Vec::len);
    let mut out = vec![vec![0.0; m]; rows.len()];
    let mut flagged = Vec::new();
    for j in 0..m {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let sd = variance(&col).sqrt();
        if rows.len() < 2 || sd <= 0.0 || !sd.is_finite() {
            flagged.push(j);
            continue;
        }
        let mu = mean(&col);
        for (o, v) in out.iter_mut().zip(&col) {
            o[j] = (v - mu) / sd;
        }
    }
    (out, flagged)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchCondition {
    pub key: ConditionKey,
    pub rates: Vec<f64>,
    pub vars: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleMatch {
    pub stratum: StratumKey,
    pub ffn: ComponentKind,
    pub attention: ComponentKind,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisibleMatchResult {
    pub contrast: ProfileContrastResult,
    pub matches: Vec<VisibleMatch>,
    pub mean_match_distance: f64,
    /// Strata lacking one of the two mechanisms.
    pub n_dropped: usize,
    /// (stratum, variable) cells whose variable was constant.
    pub n_constant_vars: usize,
}

/// Matches each FFN condition to its nearest attention condition in z-space
/// within stratum, averages the matched differences per stratum and runs the
/// paired test on those.
pub fn visible_damage_match(conditions: &[MatchCondition], cfg: &ContrastConfig) -> Result<VisibleMatchResult> {
    let mut strata: BTreeMap<StratumKey, Vec<&MatchCondition>> = BTreeMap::new();
    for c in conditions {
        mechanism_of(&c.key)?;
        if let Some(s) = c.key.stratum().filter(|s| !s.severity.is_zero()) {
            strata.entry(s).or_default().push(c);
        }
    }
    let (mut diffs, mut matches) = (Vec::new(), Vec::new());
    let (mut dropped, mut constant) = (0, 0);
    for (key, members) in strata {
        let (z, flagged) = zscore_columns(&members.iter().map(|c| c.vars.clone()).collect::<Vec<_>>());
        let kinds: Vec<ComponentKind> = members.iter().map(|c| c.key.component.unwrap()).collect();
        let attn: Vec<usize> = (0..members.len()).filter(|&i| kinds[i].mechanism() == Mechanism::Attention).collect();
        let ffn: Vec<usize> = (0..members.len()).filter(|&i| kinds[i].mechanism() == Mechanism::Ffn).collect();
        if attn.is_empty() || ffn.is_empty() {
            dropped += 1;
            continue;
        }
        constant += flagged.len();
        let k = members[0].rates.len();
        let mut stratum_diffs = Vec::new();
        for &f in &ffn {
            let (ai, d) = nearest(&attn, |&a| kinds[a], |&a| l2_distance(&z[f], &z[a])).unwrap();
            let a = attn[ai];
            stratum_diffs.push(members[f].rates.iter().zip(&members[a].rates).map(|(x, y)| x - y).collect::<Vec<_>>());
            matches.push(VisibleMatch {
                stratum: key.clone(),
                ffn: kinds[f],
                attention: kinds[a],
                distance: d,
            });
        }
        diffs.push(mean_vector(stratum_diffs.iter().map(Vec::as_slice), k));
    }
    let contrast = paired_profile_test_diffs(&diffs, cfg)?;
    Ok(VisibleMatchResult {
        contrast,
        mean_match_distance: mean(&matches.iter().map(|m| m.distance).collect::<Vec<_>>()),
        matches,
        n_dropped: dropped,
        n_constant_vars: constant,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoseProxy {
    Kl,
    Residual,
    Joint,
}

/// Which attention conditions are candidates for an FFN condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoseScope {
    #[default]
    SameLayer,
    SameModel,
    Any,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseCondition {
    pub key: ConditionKey,
    pub kl: f64,
    pub residual: f64,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseMatch {
    pub ffn: usize,
    pub attention: usize,
    /// Absolute log10 gap in next-token KL.
    pub kl_gap: f64,
    pub residual_gap: f64,
    /// The matching criterion under the chosen proxy.
    pub gap: f64,
    pub profile_l2_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseMatchResult {
    pub proxy: DoseProxy,
    pub scope: DoseScope,
    pub matches: Vec<DoseMatch>,
    pub median_gap: f64,
    pub median_kl_gap: f64,
    pub median_residual_gap: f64,
    pub median_profile_l2_pp: f64,
    pub n_within_quarter: usize,
    pub within_quarter_median_l2_pp: Option<f64>,
    /// FFN conditions with no attention candidate in scope.
    pub n_unmatched: usize,
}

pub fn log10_proxy(v: f64) -> Result<f64> {
    if v.is_nan() {
        return invalid("dose proxy is NaN");
    }
    Ok(v.max(PROXY_FLOOR).log10())
}

fn in_scope(scope: DoseScope, a: &ConditionKey, b: &ConditionKey) -> bool {
    match scope {
        DoseScope::Any => true,
        DoseScope::SameModel => a.model_id == b.model_id,
        DoseScope::SameLayer => a.model_id == b.model_id && a.layer == b.layer,
    }
}

pub fn dose_match(ffn: &[DoseCondition], attention: &[DoseCondition], proxy: DoseProxy, scope: DoseScope) -> Result<DoseMatchResult> {
    if attention.is_empty() {
        return insufficient("dose matching needs at least one attention condition");
    }
    let logs = |c: &DoseCondition| -> Result<(f64, f64)> { Ok((log10_proxy(c.kl)?, log10_proxy(c.residual)?)) };
    let fl: Vec<(f64, f64)> = ffn.iter().map(logs).collect::<Result<_>>()?;
    let al: Vec<(f64, f64)> = attention.iter().map(logs).collect::<Result<_>>()?;
    for c in ffn.iter().chain(attention) {
        mechanism_of(&c.key)?;
    }
    let mut matches = Vec::new();
    let mut unmatched = 0;
    for (i, f) in ffn.iter().enumerate() {
        let cands: Vec<usize> = (0..attention.len()).filter(|&j| in_scope(scope, &f.key, &attention[j].key)).collect();
        let gap_to = |j: usize| {
            let (dk, dr) = ((fl[i].0 - al[j].0).abs(), (fl[i].1 - al[j].1).abs());
            match proxy {
                DoseProxy::Kl => dk,
                DoseProxy::Residual => dr,
                DoseProxy::Joint => (dk * dk + dr * dr).sqrt(),
            }
        };
        let Some((ci, gap)) = nearest(&cands, |&j| attention[j].key.component.unwrap(), |&j| gap_to(j)) else {
            unmatched += 1;
            continue;
        };
        let j = cands[ci];
        matches.push(DoseMatch {
            ffn: i,
            attention: j,
            kl_gap: (fl[i].0 - al[j].0).abs(),
            residual_gap: (fl[i].1 - al[j].1).abs(),
            gap,
            profile_l2_pp: l2_distance(&f.rates, &attention[j].rates) * 100.0,
        });
    }
    if matches.is_empty() {
        return insufficient("no FFN condition has an attention candidate in scope");
    }
    let col = |f: fn(&DoseMatch) -> f64| median(&matches.iter().map(f).collect::<Vec<_>>());
    let quarter: Vec<f64> = matches.iter().filter(|m| m.gap <= 0.25).map(|m| m.profile_l2_pp).collect();
    Ok(DoseMatchResult {
        proxy,
        scope,
        median_gap: col(|m| m.gap),
        median_kl_gap: col(|m| m.kl_gap),
        median_residual_gap: col(|m| m.residual_gap),
        median_profile_l2_pp: col(|m| m.profile_l2_pp),
        n_within_quarter: quarter.len(),
        within_quarter_median_l2_pp: (!quarter.is_empty()).then(|| median(&quarter)),
        matches,
        n_unmatched: unmatched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use lesionkit::lesion::{Severity, Strategy};

    fn key(layer: usize, c: ComponentKind) -> ConditionKey {
        ConditionKey {
            model_id: "m".into(),
            layer: Some(layer),
            component: Some(c),
            severity: Severity::FULL,
            strategy: Strategy::Zero,
        }
    }

    fn dose(c: ComponentKind, kl: f64) -> DoseCondition {
        DoseCondition {
            key: key(0, c),
            kl,
            residual: 0.1,
            rates: vec![0.0],
        }
    }

    #[test]
    fn log_gaps() {
        let r = dose_match(&[dose(ComponentKind::Gate, 10.0)], &[dose(ComponentKind::Key, 1000.0)], DoseProxy::Kl, DoseScope::SameLayer).unwrap();
        assert!((r.matches[0].kl_gap - 2.0).abs() < 1e-12);
        let r = dose_match(&[dose(ComponentKind::Gate, 0.3)], &[dose(ComponentKind::Key, 0.3)], DoseProxy::Joint, DoseScope::SameLayer).unwrap();
        assert_eq!(r.median_gap, 0.0);
        assert_eq!(r.n_within_quarter, 1);
        assert!(dose_match(&[dose(ComponentKind::Gate, 0.3)], &[], DoseProxy::Kl, DoseScope::Any).is_err());
        // Zero KL is floored rather than sent to -inf.
        let r = dose_match(&[dose(ComponentKind::Gate, 0.0)], &[dose(ComponentKind::Key, 1e-10)], DoseProxy::Kl, DoseScope::Any).unwrap();
        assert!((r.matches[0].kl_gap - 2.0).abs() < 1e-9);
    }

    #[test]
    fn ties_go_to_smaller_name() {
        let attn = [dose(ComponentKind::Value, 1.0), dose(ComponentKind::Key, 1.0)];
        let r = dose_match(&[dose(ComponentKind::Up, 1.0)], &attn, DoseProxy::Kl, DoseScope::SameLayer).unwrap();
        assert_eq!(r.matches[0].attention, 1);
    }

    fn cond(c: ComponentKind, vars: Vec<f64>, rate: f64) -> MatchCondition {
        MatchCondition {
            key: key(0, c),
            rates: vec![rate],
            vars,
        }
    }

    #[test]
    fn visible_nearest_and_constant_vars() {
        // z-scores over the stratum: the gate sits nearer the key.
        let conds = vec![
            cond(ComponentKind::Gate, vec![0.0], 0.5),
            cond(ComponentKind::Key, vec![0.1], 0.2),
            cond(ComponentKind::Query, vec![2.0], 0.9),
        ];
        let too_few = visible_damage_match(&conds, &ContrastConfig::default());
        assert!(too_few.is_err(), "one stratum cannot be tested");
        let mut two = conds.clone();
        for c in &conds {
            let mut c = c.clone();
            c.key.layer = Some(1);
            two.push(c);
        }
        let r = visible_damage_match(&two, &ContrastConfig { n_resamples: 50, n_flips: 50, ..Default::default() }).unwrap();
        assert!(r.matches.iter().all(|m| m.attention == ComponentKind::Key));
        assert!((r.contrast.l2_distance_pp - 30.0).abs() < 1e-9);

        let flat: Vec<MatchCondition> = two.iter().map(|c| MatchCondition { vars: vec![1.0], ..c.clone() }).collect();
        let r = visible_damage_match(&flat, &ContrastConfig { n_resamples: 50, n_flips: 50, ..Default::default() }).unwrap();
        assert_eq!(r.n_constant_vars, 2);
        // All candidates tie at distance 0; "key" < "query".
        assert!(r.matches.iter().all(|m| m.attention == ComponentKind::Key && m.distance == 0.0));
    }
}
