//! Each procedure against an independent brute-force implementation.

use lesionkit::lesion::{Severity, Strategy};
use lesionkit::model::{ComponentKind, Mechanism};
use lesionkit::records::ConditionKey;
use lesionkit::rng::CounterRng;
use lesionkit_stats::cooccur::upper_triangle;
use lesionkit_stats::describe::pearson;
use lesionkit_stats::matching::log10_proxy;
use lesionkit_stats::*;
use proptest::prelude::*;

fn phi_oracle(rows: &[Vec<bool>], i: usize, j: usize) -> f64 {
    let x: Vec<f64> = rows.iter().map(|r| r[i] as u8 as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r[j] as u8 as f64).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

fn bh_oracle(p: &[f64]) -> Vec<f64> {
    let m = p.len() as f64;
    p.iter()
        .map(|&pi| {
            p.iter()
                .filter(|&&pj| pj >= pi)
                .map(|&pj| m * pj / p.iter().filter(|&&pl| pl <= pj).count() as f64)
                .fold(1.0, f64::min)
        })
        .collect()
}

/// Solves the normal equations by Gauss-Jordan elimination.
fn ols_oracle(y: &[f64], x: &[Vec<f64>]) -> Vec<f64> {
    let n = y.len();
    let p = x[0].len() + 1;
    let design: Vec<Vec<f64>> = x.iter().map(|r| std::iter::once(1.0).chain(r.iter().copied()).collect()).collect();
    let mut a = vec![vec![0.0; p + 1]; p];
    for i in 0..p {
        for j in 0..p {
            a[i][j] = (0..n).map(|r| design[r][i] * design[r][j]).sum();
        }
        a[i][p] = (0..n).map(|r| design[r][i] * y[r]).sum();
    }
    for c in 0..p {
        let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, piv);
        let d = a[c][c];
        for v in a[c].iter_mut() {
            *v /= d;
        }
        for r in 0..p {
            if r != c {
                let f = a[r][c];
                for k in 0..=p {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    (0..n)
        .map(|r| y[r] - (0..p).map(|i| design[r][i] * a[i][p]).sum::<f64>())
        .collect()
}

fn key(model: &str, layer: usize, c: ComponentKind) -> ConditionKey {
    ConditionKey {
        model_id: model.into(),
        layer: Some(layer),
        component: Some(c),
        severity: Severity::FULL,
        strategy: Strategy::Zero,
    }
}

#[test]
fn phi_known_counts_and_independence() {
    let rows: Vec<Vec<bool>> = [(true, true), (true, true), (true, false), (false, true), (false, false), (false, false)]
        .iter()
        .map(|&(a, b)| vec![a, b])
        .collect();
    assert!((phi_matrix(&rows).unwrap().values[0][1] - 1.0 / 3.0).abs() < 1e-15);

    let mut rng = CounterRng::new(11);
    let rows: Vec<Vec<bool>> = (0..100_000).map(|_| vec![rng.bernoulli(0.3), rng.bernoulli(0.6)]).collect();
    assert!(phi_matrix(&rows).unwrap().values[0][1].abs() < 0.02);
}

#[test]
fn mantel_hand_computed_four_by_four() {
    let sym = |u: [f64; 6]| {
        let mut m = vec![vec![0.0; 4]; 4];
        let mut t = 0;
        for i in 0..4 {
            for j in i + 1..4 {
                (m[i][j], m[j][i]) = (u[t], u[t]);
                t += 1;
            }
        }
        m
    };
    let a = sym([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let b = sym([2.0, 1.0, 4.0, 3.0, 6.0, 5.0]);
    // Deviations (-2.5..2.5) and (-1.5,-2.5,.5,-.5,2.5,1.5): 14.5 / 17.5.
    let r = mantel_test(&a, &b, 2000, 4).unwrap();
    assert!((r.r.unwrap() - 29.0 / 35.0).abs() < 1e-12);

    // Exhaustive p over all 24 joint permutations.
    let perms = permutations(4);
    let obs = r.r.unwrap();
    let ua = upper_triangle(&a);
    let hits = perms
        .iter()
        .filter(|p| {
            let pb: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| b[p[i]][p[j]]).collect()).collect();
            pearson(&ua, &upper_triangle(&pb)).unwrap() >= obs - 1e-12
        })
        .count();
    let exact = hits as f64 / 24.0;
    let got = r.p_value.unwrap();
    let se = (exact * (1.0 - exact) / 2000.0).sqrt();
    assert!((got - exact).abs() < 4.0 * se + 1.0 / 2001.0, "{got} vs {exact}");
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn cohens_d_monte_carlo() {
    let mut rng = CounterRng::new(5);
    let x: Vec<f64> = (0..20_000).map(|_| rng.normal()).collect();
    let y: Vec<f64> = (0..20_000).map(|_| 1.0 + rng.normal()).collect();
    let d = cohens_d(&x, &y).unwrap().unwrap();
    assert!((d + 1.0).abs() < 0.05, "{d}");
}

#[test]
fn residuals_match_normal_equations() {
    let mut rng = CounterRng::new(8);
    let n = 20;
    let feats: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.normal(), rng.next_f64() * 40.0, rng.normal() * 0.1]).collect();
    let rates: Vec<Vec<f64>> = feats
        .iter()
        .map(|f| (0..4).map(|j| (0.1 * j as f64 + 0.01 * f[1] + 0.05 * f[0] + 0.02 * rng.normal()).clamp(0.0, 1.0)).collect())
        .collect();
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let res = residualize_profiles(&rates, &feats, &names).unwrap();
    for j in 0..4 {
        let y: Vec<f64> = rates.iter().map(|r| r[j]).collect();
        let want = ols_oracle(&y, &feats);
        for (r, w) in res.iter().zip(&want) {
            assert!((r[j] - w).abs() < 1e-10);
        }
        for f in 0..3 {
            let dot: f64 = res.iter().zip(&feats).map(|(r, x)| r[j] * x[f]).sum();
            assert!(dot.abs() < 1e-8, "residual {j} not orthogonal to feature {f}: {dot}");
        }
        assert!(res.iter().map(|r| r[j]).sum::<f64>().abs() < 1e-10);
    }
}

fn dose_fixture(seed: u64) -> (Vec<DoseCondition>, Vec<DoseCondition>) {
    let mut rng = CounterRng::new(seed);
    let (mut ffn, mut attn) = (Vec::new(), Vec::new());
    for i in 0..20 {
        let c = ComponentKind::ALL[i % 7];
        let cond = DoseCondition {
            key: key(["m0", "m1"][i % 2], rng.index(2), c),
            // Coarse values so that ties occur.
            kl: 10f64.powi(rng.index(5) as i32 - 3),
            residual: (1 + rng.index(4)) as f64 * 0.05,
            rates: (0..5).map(|_| rng.next_f64()).collect(),
        };
        if c.mechanism() == Mechanism::Ffn { &mut ffn } else { &mut attn }.push(cond);
    }
    (ffn, attn)
}

#[test]
fn dose_match_equals_exhaustive_nearest_neighbour() {
    for seed in 0..10 {
        let (ffn, attn) = dose_fixture(seed);
        for proxy in [DoseProxy::Kl, DoseProxy::Residual, DoseProxy::Joint] {
            for scope in [DoseScope::SameLayer, DoseScope::SameModel, DoseScope::Any] {
                let Ok(r) = dose_match(&ffn, &attn, proxy, scope) else { continue };
                let mut m = r.matches.iter();
                for (i, f) in ffn.iter().enumerate() {
                    let mut cands: Vec<(f64, &str, usize)> = attn
                        .iter()
                        .enumerate()
                        .filter(|(_, a)| match scope {
                            DoseScope::Any => true,
                            DoseScope::SameModel => a.key.model_id == f.key.model_id,
                            DoseScope::SameLayer => a.key.model_id == f.key.model_id && a.key.layer == f.key.layer,
                        })
                        .map(|(j, a)| {
                            let dk = log10_proxy(f.kl).unwrap() - log10_proxy(a.kl).unwrap();
                            let dr = log10_proxy(f.residual).unwrap() - log10_proxy(a.residual).unwrap();
                            let g = match proxy {
                                DoseProxy::Kl => dk.abs(),
                                DoseProxy::Residual => dr.abs(),
                                DoseProxy::Joint => dk.hypot(dr),
                            };
                            (g, a.key.component.unwrap().name(), j)
                        })
                        .collect();
                    if cands.is_empty() {
                        continue;
                    }
                    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)).then(a.2.cmp(&b.2)));
                    let got = m.next().unwrap();
                    assert_eq!((got.ffn, got.attention), (i, cands[0].2), "seed {seed} {proxy:?} {scope:?}");
                    assert!((got.gap - cands[0].0).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn visible_match_equals_exhaustive_oracle() {
    let mut rng = CounterRng::new(21);
    let mut conds = Vec::new();
    for layer in 0..4 {
        for c in ComponentKind::ALL {
            conds.push(MatchCondition {
                key: key("m", layer, c),
                rates: (0..3).map(|_| rng.next_f64()).collect(),
                vars: vec![rng.next_f64(), rng.index(3) as f64, 2.0],
            });
        }
    }
    let cfg = ContrastConfig { n_resamples: 20, n_flips: 20, ..Default::default() };
    let r = visible_damage_match(&conds, &cfg).unwrap();
    assert_eq!(r.n_constant_vars, 4, "the constant third variable, once per stratum");
    let mut got = r.matches.iter();
    for layer in 0..4 {
        let members: Vec<&MatchCondition> = conds.iter().filter(|c| c.key.layer == Some(layer)).collect();
        let z = |v: usize, x: f64| {
            let col: Vec<f64> = members.iter().map(|c| c.vars[v]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (col.len() - 1) as f64).sqrt();
            if sd == 0.0 { 0.0 } else { (x - m) / sd }
        };
        for f in members.iter().filter(|c| c.key.component.unwrap().mechanism() == Mechanism::Ffn) {
            let best = members
                .iter()
                .filter(|c| c.key.component.unwrap().mechanism() == Mechanism::Attention)
                .map(|a| {
                    let d: f64 = (0..3).map(|v| (z(v, f.vars[v]) - z(v, a.vars[v])).powi(2)).sum::<f64>().sqrt();
                    (d, a.key.component.unwrap().name())
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)))
                .unwrap();
            let m = got.next().unwrap();
            assert_eq!(m.attention.name(), best.1);
            assert!((m.distance - best.0).abs() < 1e-10);
        }
    }
}

#[test]
fn sign_flip_enumeration_matches_brute_force() {
    let mut rng = CounterRng::new(2);
    for n in 2..=8 {
        let diffs: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.normal() * 0.05).collect()).collect();
        let r = paired_profile_test_diffs(&diffs, &ContrastConfig { n_resamples: 10, ..Default::default() }).unwrap();
        assert!(r.exact_signflip);
        let stat = |signs: u32| {
            let v: Vec<f64> = (0..3)
                .map(|j| (0..n).map(|i| if signs >> i & 1 == 1 { -diffs[i][j] } else { diffs[i][j] }).sum::<f64>() / n as f64)
                .collect();
            v.iter().map(|x| x * x).sum::<f64>().sqrt() * 100.0
        };
        let obs = stat(0);
        let hits = (0..1u32 << n).filter(|&s| stat(s) >= obs - 1e-9).count();
        assert!((r.p_signflip - (hits + 1) as f64 / ((1 << n) + 1) as f64).abs() < 1e-15);
    }
}

proptest! {
    #[test]
    fn phi_matches_pearson_oracle(rows in prop::collection::vec(prop::collection::vec(any::<bool>(), 4), 2..20)) {
        let m = phi_matrix(&rows).unwrap();
        for i in 0..4 {
            prop_assert_eq!(m.values[i][i], 1.0);
            for j in 0..4 {
                prop_assert_eq!(m.values[i][j], m.values[j][i]);
                if i != j {
                    prop_assert!((m.values[i][j] - phi_oracle(&rows, i, j)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn bh_matches_definition(p in prop::collection::vec(0.0f64..=1.0, 1..20)) {
        let q = bh_adjust(&p).unwrap();
        for (a, b) in q.iter().zip(bh_oracle(&p)) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        for (qi, pi) in q.iter().zip(&p) {
            prop_assert!(*qi >= pi - 1e-15 && *qi <= 1.0);
        }
    }

    #[test]
    fn mantel_r_matches_pearson(u in prop::collection::vec(-1.0f64..1.0, 10), v in prop::collection::vec(-1.0f64..1.0, 10)) {
        let sym = |w: &[f64]| {
            let mut m = vec![vec![1.0; 5]; 5];
            let mut t = 0;
            for i in 0..5 { for j in i + 1..5 { m[i][j] = w[t]; m[j][i] = w[t]; t += 1; } }
            m
        };
        let r = mantel_test(&sym(&u), &sym(&v), 10, 0).unwrap();
        if let (Some(r), Some(o)) = (r.r, pearson(&u, &v)) {
            prop_assert!((r - o).abs() < 1e-10);
            prop_assert!(r.abs() <= 1.0);
        }
    }

    #[test]
    fn cohens_d_matches_formula(x in prop::collection::vec(-5.0f64..5.0, 2..20), y in prop::collection::vec(-5.0f64..5.0, 2..20)) {
        let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let ss = |v: &[f64]| { let mu = m(v); v.iter().map(|a| (a - mu).powi(2)).sum::<f64>() };
        let sd = ((ss(&x) + ss(&y)) / (x.len() + y.len() - 2) as f64).sqrt();
        if let Some(d) = cohens_d(&x, &y).unwrap() {
            prop_assert!((d - (m(&x) - m(&y)) / sd).abs() < 1e-10);
        }
    }

    #[test]
    fn burden_adjust_rows_sum_to_zero(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 21), 1..10)) {
        for r in burden_adjust(&rows) {
            prop_assert!(r.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn resampling_is_seed_deterministic(seed: u64) {
        let diffs: Vec<Vec<f64>> = (0..15).map(|i| vec![((i * 7) % 5) as f64 * 0.01 - 0.02, 0.01]).collect();
        let cfg = ContrastConfig { n_resamples: 50, n_flips: 50, seed, ..Default::default() };
        prop_assert_eq!(paired_profile_test_diffs(&diffs, &cfg).unwrap(), paired_profile_test_diffs(&diffs, &cfg).unwrap());
    }
}
