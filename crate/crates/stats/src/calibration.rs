//! Effect-size calibration: the FFN split against every 3-versus-4 component
//! partition, and a leave-one-group-out nearest-centroid classifier.
//!
//! The classifier is a deliberately simple stand-in. Its score is
//! `|x - c_attention|^2 - |x - c_ffn|^2`, positive meaning FFN, and a
//! condition is predicted FFN when the score is strictly positive.

use std::collections::{BTreeMap, BTreeSet};

use lesionkit::model::{ComponentKind, Mechanism};
use lesionkit::records::{ConditionKey, StratumKey};
use serde::{Deserialize, Serialize};

use crate::describe::{l2_norm, mean_vector, median};
use crate::error::{insufficient, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub key: ConditionKey,
    pub family: String,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRow {
    pub group: [ComponentKind; 3],
    pub l2_pp: f64,
    /// 1 + number of partitions with a strictly larger distance.
    pub rank: usize,
    pub is_ffn: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaveOut {
    Model,
    Family,
    Severity,
}

impl LeaveOut {
    pub const ALL: [LeaveOut; 3] = [LeaveOut::Model, LeaveOut::Family, LeaveOut::Severity];

    fn group_of(self, p: &CalibrationProfile) -> String {
        match self {
            LeaveOut::Model => p.key.model_id.clone(),
            LeaveOut::Family => p.family.clone(),
            LeaveOut::Severity => p.key.severity.canonical(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub leave_out: LeaveOut,
    /// `None` when no fold could be evaluated or a class never appears.
    pub balanced_accuracy: Option<f64>,
    pub auroc: Option<f64>,
    pub n_folds: usize,
    /// Folds whose training side lacked one of the classes.
    pub n_skipped_folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSizeResult {
    /// Sorted by decreasing distance, then by group.
    pub partitions: Vec<PartitionRow>,
    pub n_partitions: usize,
    pub ffn_rank: usize,
    pub ffn_l2_pp: f64,
    pub median_non_ffn_l2_pp: f64,
    pub classifiers: Vec<ClassifierMetrics>,
}

/// All 35 three-component groups in canonical order.
pub fn three_component_groups() -> Vec<[ComponentKind; 3]> {
    let c = ComponentKind::ALL;
    let mut out = Vec::new();
    for i in 0..7 {
        for j in i + 1..7 {
            for k in j + 1..7 {
                out.push([c[i], c[j], c[k]]);
            }
        }
    }
    out
}

/// Mean over strata of (group mean minus complement mean), in pp. Strata
/// missing either side are ignored.
pub fn partition_distance(profiles: &[CalibrationProfile], group: &[ComponentKind]) -> Option<f64> {
    let mut strata: BTreeMap<StratumKey, (Vec<&[f64]>, Vec<&[f64]>)> = BTreeMap::new();
    let k = profiles.first()?.rates.len();
    for p in profiles {
        let (Some(s), Some(c)) = (p.key.stratum(), p.key.component) else { continue };
        if s.severity.is_zero() {
            continue;
        }
        let e = strata.entry(s).or_default();
        if group.contains(&c) { &mut e.0 } else { &mut e.1 }.push(&p.rates);
    }
    let diffs: Vec<Vec<f64>> = strata
        .values()
        .filter(|(g, r)| !g.is_empty() && !r.is_empty())
        .map(|(g, r)| {
            let (mg, mr) = (mean_vector(g.iter().copied(), k), mean_vector(r.iter().copied(), k));
            mg.iter().zip(&mr).map(|(a, b)| a - b).collect()
        })
        .collect();
    if diffs.is_empty() {
        return None;
    }
    Some(l2_norm(&mean_vector(diffs.iter().map(Vec::as_slice), k)) * 100.0)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mann-Whitney AUROC with ties counted as one half.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| p).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(positive).filter(|(_, &p)| !p).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

pub fn balanced_accuracy(predicted: &[bool], actual: &[bool]) -> Option<f64> {
    let rate = |class: bool| {
        let idx: Vec<usize> = (0..actual.len()).filter(|&i| actual[i] == class).collect();
        (!idx.is_empty()).then(|| idx.iter().filter(|&&i| predicted[i] == class).count() as f64 / idx.len() as f64)
    };
    Some((rate(true)? + rate(false)?) / 2.0)
}

pub fn leave_one_group_out(profiles: &[CalibrationProfile], leave_out: LeaveOut) -> ClassifierMetrics {
    let lesioned: Vec<&CalibrationProfile> = profiles
        .iter()
        .filter(|p| p.key.component.is_some() && !p.key.severity.is_zero())
        .collect();
    let is_ffn = |p: &CalibrationProfile| p.key.component.unwrap().mechanism() == Mechanism::Ffn;
    let groups: BTreeSet<String> = lesioned.iter().map(|p| leave_out.group_of(p)).collect();
    let k = lesioned.first().map_or(0, |p| p.rates.len());
    let (mut scores, mut predicted, mut actual) = (Vec::new(), Vec::new(), Vec::new());
    let (mut n_folds, mut skipped) = (0, 0);
    for g in &groups {
        let (test, train): (Vec<&CalibrationProfile>, Vec<&CalibrationProfile>) =
            lesioned.iter().partition(|p| &leave_out.group_of(p) == g);
        let ffn: Vec<&[f64]> = train.iter().filter(|p| is_ffn(p)).map(|p| p.rates.as_slice()).collect();
        let attn: Vec<&[f64]> = train.iter().filter(|p| !is_ffn(p)).map(|p| p.rates.as_slice()).collect();
        if ffn.is_empty() || attn.is_empty() {
            skipped += 1;
            continue;
        }
        n_folds += 1;
        let (cf, ca) = (mean_vector(ffn, k), mean_vector(attn, k));
        for p in test {
            let s = sq_dist(&p.rates, &ca) - sq_dist(&p.rates, &cf);
            scores.push(s);
            predicted.push(s > 0.0);
            actual.push(is_ffn(p));
        }
    }
    ClassifierMetrics {
        leave_out,
        balanced_accuracy: balanced_accuracy(&predicted, &actual),
        auroc: auroc(&scores, &actual),
        n_folds,
        n_skipped_folds: skipped,
    }
}

pub fn effect_size_calibration(profiles: &[CalibrationProfile]) -> Result<EffectSizeResult> {
    let present: BTreeSet<ComponentKind> = profiles.iter().filter_map(|p| p.key.component).collect();
    if let Some(missing) = ComponentKind::ALL.iter().find(|c| !present.contains(c)) {
        return insufficient(format!("effect-size calibration needs all seven components; {missing} is missing"));
    }
    let ffn_group = [ComponentKind::Gate, ComponentKind::Up, ComponentKind::Down];
    let mut partitions = Vec::with_capacity(35);
    for g in three_component_groups() {
        let Some(d) = partition_distance(profiles, &g) else {
            return insufficient("no stratum contains both sides of a component partition");
        };
        partitions.push(PartitionRow {
            group: g,
            l2_pp: d,
            rank: 0,
            is_ffn: g == ffn_group,
        });
    }
    let dists: Vec<f64> = partitions.iter().map(|p| p.l2_pp).collect();
    for p in partitions.iter_mut() {
        p.rank = 1 + dists.iter().filter(|&&d| d > p.l2_pp).count();
    }
    partitions.sort_by(|a, b| b.l2_pp.total_cmp(&a.l2_pp).then(a.group.cmp(&b.group)));
    let ffn = partitions.iter().find(|p| p.is_ffn).unwrap();
    let (ffn_rank, ffn_l2_pp) = (ffn.rank, ffn.l2_pp);
    let non_ffn: Vec<f64> = partitions.iter().filter(|p| !p.is_ffn).map(|p| p.l2_pp).collect();
    Ok(EffectSizeResult {
        n_partitions: partitions.len(),
        ffn_rank,
        ffn_l2_pp,
        median_non_ffn_l2_pp: median(&non_ffn),
        partitions,
        classifiers: LeaveOut::ALL.iter().map(|&l| leave_one_group_out(profiles, l)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use lesionkit::lesion::{Severity, Strategy};

    fn profiles(shift: f64) -> Vec<CalibrationProfile> {
        let mut out = Vec::new();
        for model in ["a-1", "b-1"] {
            for layer in 0..2 {
                for s in [0.5, 1.0] {
                    for c in ComponentKind::ALL {
                        let bump = if c.mechanism() == Mechanism::Ffn { shift } else { 0.0 };
                        out.push(CalibrationProfile {
                            key: ConditionKey {
                                model_id: model.into(),
                                layer: Some(layer),
                                component: Some(c),
                                severity: Severity::new(s).unwrap(),
                                strategy: Strategy::Zero,
                            },
                            family: model[..1].into(),
                            rates: vec![0.2 + bump, 0.1],
                        });
                    }
                }
            }
        }
        out
    }

    #[test]
    fn partition_count_and_ffn_rank() {
        assert_eq!(three_component_groups().len(), 35);
        let r = effect_size_calibration(&profiles(0.05)).unwrap();
        assert_eq!(r.n_partitions, 35);
        assert_eq!(r.ffn_rank, 1);
        assert!((r.ffn_l2_pp - 5.0).abs() < 1e-9);
        for c in &r.classifiers {
            assert_eq!(c.balanced_accuracy, Some(1.0));
        }
    }

    #[test]
    fn identical_profiles_are_at_chance() {
        let r = effect_size_calibration(&profiles(0.0)).unwrap();
        for c in &r.classifiers {
            assert_eq!(c.balanced_accuracy, Some(0.5));
            assert_eq!(c.auroc, Some(0.5));
        }
    }

    #[test]
    fn missing_component_is_an_error() {
        let p: Vec<_> = profiles(0.0).into_iter().filter(|p| p.key.component != Some(ComponentKind::Up)).collect();
        assert!(effect_size_calibration(&p).is_err());
    }
}
