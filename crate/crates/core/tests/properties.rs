use proptest::prelude::*;

use regime_audit::attack::{pgd_attack, AttackConfig};
use regime_audit::dataset::{apply_scaling, classify_regime, fit_scaling, stratified_split};
use regime_audit::explain::{exact_shapley_fn, Attribution, BackgroundSet};
use regime_audit::metrics::{amplification, auroc, confusion_rates, ScoredSet};
use regime_audit::risk::{expected_shortfall, value_at_risk, LossDistribution};
use regime_audit::semantic::{cosine_drift, governance, DriftPair};
use regime_audit::{Dataset, Instance, Regime, RegimeConfig, TrainedModel};

fn scored() -> impl Strategy<Value = ScoredSet> {
    prop::collection::vec((0u8..20, any::<bool>()), 2..60)
        .prop_filter("both classes", |v| v.iter().any(|p| p.1) && v.iter().any(|p| !p.1))
        .prop_map(|v| {
            let (s, l): (Vec<f64>, Vec<u8>) = v.into_iter().map(|(s, y)| (f64::from(s) / 19.0, u8::from(y))).unzip();
            ScoredSet::new(s, l).unwrap()
        })
}

fn dataset(max_rows: usize, d: usize) -> impl Strategy<Value = Dataset> {
    prop::collection::vec((prop::collection::vec(-5.0f64..5.0, d), any::<bool>()), 1..max_rows).prop_map(move |rows| {
        let names = (0..d).map(|j| format!("f{j}")).collect();
        let inst = rows
            .into_iter()
            .enumerate()
            .map(|(i, (features, y))| Instance {
                features,
                label: u8::from(y),
                timestamp: i as i64,
            })
            .collect();
        Dataset::new(names, inst).unwrap()
    })
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Shapley values by averaging marginal contributions over every feature ordering.
fn permutation_oracle(f: &dyn Fn(&[f64]) -> f64, x: &[f64], bg: &[Vec<f64>]) -> Vec<f64> {
    let d = x.len();
    let v = |mask: usize| {
        bg.iter()
            .map(|b| {
                let z: Vec<f64> = (0..d).map(|j| if mask >> j & 1 == 1 { x[j] } else { b[j] }).collect();
                f(&z)
            })
            .sum::<f64>()
            / bg.len() as f64
    };
    let mut phi = vec![0.0; d];
    let mut perm: Vec<usize> = (0..d).collect();
    let mut visit = |perm: &[usize]| {
        let mut mask = 0usize;
        for &j in perm {
            let before = v(mask);
            mask |= 1 << j;
            phi[j] += v(mask) - before;
        }
    };
    // Heap's algorithm
    let mut c = vec![0usize; d];
    visit(&perm);
    let mut i = 0;
    while i < d {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    let n = factorial(d);
    phi.iter().map(|p| p / n).collect()
}

fn attr(phi: Vec<f64>) -> Attribution {
    Attribution {
        instance: 0,
        phi,
        base_value: 0.0,
        value: 0.0,
    }
}

fn regime_rank(r: Regime) -> u8 {
    match r {
        Regime::Calm => 0,
        Regime::Neutral => 1,
        Regime::Stress => 2,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auroc_monotone_invariant_and_complement(s in scored()) {
        let a = auroc(&s).unwrap();
        let warped: Vec<f64> = s.scores().iter().map(|v| (3.0 * v).exp() + v).collect();
        let w = ScoredSet::new(warped, s.labels().to_vec()).unwrap();
        prop_assert!((auroc(&w).unwrap() - a).abs() < 1e-12);
        let flipped: Vec<f64> = s.scores().iter().map(|v| 1.0 - v).collect();
        let f = ScoredSet::new(flipped, s.labels().to_vec()).unwrap();
        prop_assert!((auroc(&f).unwrap() - (1.0 - a)).abs() < 1e-12);
        prop_assert!((auroc(&s.swapped()).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn error_rates_monotone_in_threshold(s in scored(), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = confusion_rates(&s, lo);
        let b = confusion_rates(&s, hi);
        prop_assert!(a.fnr.unwrap() <= b.fnr.unwrap());
        prop_assert!(a.fpr.unwrap() >= b.fpr.unwrap());
    }

    #[test]
    fn amplification_reciprocal(a in 1e-3f64..1.0, b in 1e-3f64..1.0) {
        let ab = amplification(a, b).factor.unwrap();
        let ba = amplification(b, a).factor.unwrap();
        prop_assert!((ab * ba - 1.0).abs() < 1e-12);
        prop_assert!(amplification(a, -b).factor.is_none());
    }

    #[test]
    fn tail_measures(losses in prop::collection::vec(0.0f64..1e3, 1..200), alpha in 0.01f64..0.99) {
        let d = LossDistribution::new(losses).unwrap();
        prop_assert!(expected_shortfall(&d, alpha).unwrap() >= value_at_risk(&d, alpha).unwrap());
    }

    #[test]
    fn tail_invariants(ints in prop::collection::vec(0u32..1000, 1..200), c in 0u32..1000, k in 0i32..4, alpha in 0.01f64..0.99) {
        let d = LossDistribution::new(ints.iter().map(|v| f64::from(*v)).collect()).unwrap();
        let c = f64::from(c);
        let k = 2f64.powi(k);
        let var = value_at_risk(&d, alpha).unwrap();
        let es = expected_shortfall(&d, alpha).unwrap();
        let shifted = d.shifted(c);
        prop_assert_eq!(value_at_risk(&shifted, alpha).unwrap(), var + c);
        prop_assert!((expected_shortfall(&shifted, alpha).unwrap() - (es + c)).abs() < 1e-9);
        let scaled = LossDistribution::new(d.losses().iter().map(|l| l * k).collect()).unwrap();
        prop_assert_eq!(value_at_risk(&scaled, alpha).unwrap(), var * k);
        prop_assert_eq!(expected_shortfall(&scaled, alpha).unwrap(), es * k);
    }

    #[test]
    fn scaling_maps_into_unit_cube(train in dataset(40, 3), test in dataset(20, 3)) {
        let spec = fit_scaling(&train).unwrap();
        for data in [&train, &test] {
            let scaled = apply_scaling(data, &spec).unwrap();
            for inst in &scaled.instances {
                prop_assert!(inst.features.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        let scaled = apply_scaling(&train, &spec).unwrap();
        let again = apply_scaling(&scaled, &fit_scaling(&scaled).unwrap()).unwrap();
        for (a, b) in scaled.instances.iter().zip(&again.instances) {
            for (x, y) in a.features.iter().zip(&b.features) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
        for (raw, s) in train.instances.iter().zip(&scaled.instances) {
            let back = spec.invert_row(&s.features);
            for (j, (x, y)) in raw.features.iter().zip(&back).enumerate() {
                if !spec.constant_features().contains(&j) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn split_is_a_stratified_partition(data in dataset(80, 2), seed in any::<u64>(), frac in 0.1f64..0.9) {
        let Ok(split) = stratified_split(&data, frac, seed) else { return Ok(()); };
        let mut all: Vec<usize> = split.train_indices.iter().chain(&split.test_indices).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
        for class in [0u8, 1] {
            let n = data.instances.iter().filter(|i| i.label == class).count();
            let t = split.test.instances.iter().filter(|i| i.label == class).count();
            prop_assert_eq!(t, (n as f64 * frac).round() as usize);
        }
    }

    #[test]
    fn regime_monotone_in_stress(a in 0.0f64..40.0, b in 0.0f64..40.0, lo in 5.0f64..20.0, gap in 0.0f64..10.0) {
        let cfg = RegimeConfig::new(lo, lo + gap).unwrap();
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(regime_rank(classify_regime(x, &cfg)) <= regime_rank(classify_regime(y, &cfg)));
    }

    #[test]
    fn pgd_respects_budget(
        w in prop::collection::vec(-4.0f64..4.0, 3),
        rows in prop::collection::vec((prop::collection::vec(0.0f64..=1.0, 3), any::<bool>()), 1..20),
        eps in 0.0f64..0.5,
        iters in 1usize..12,
    ) {
        let model = TrainedModel::logistic(w, 0.1);
        let inst = rows.into_iter().enumerate().map(|(i, (features, y))| Instance { features, label: u8::from(y), timestamp: i as i64 }).collect();
        let data = Dataset::new(vec!["a".into(), "b".into(), "c".into()], inst).unwrap();
        let mut cfg = AttackConfig::with_epsilon(eps);
        cfg.iterations = iters;
        let batch = pgd_attack(&model, &data, &cfg).unwrap();
        for (o, p) in batch.originals.instances.iter().zip(&batch.perturbed) {
            for (x, z) in o.features.iter().zip(p) {
                prop_assert!((x - z).abs() <= eps);
                prop_assert!((0.0..=1.0).contains(z));
            }
        }
    }

    #[test]
    fn shapley_matches_permutation_oracle(
        d in 1usize..6,
        coef in prop::collection::vec(-2.0f64..2.0, 8),
        x in prop::collection::vec(0.0f64..1.0, 6),
        bg in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..4),
    ) {
        let f = |z: &[f64]| {
            let lin: f64 = z.iter().zip(&coef).map(|(a, b)| a * b).sum();
            let inter = if z.len() > 1 { coef[6] * z[0] * z[1] } else { 0.0 };
            (lin + inter).tanh() + coef[7] * z[z.len() - 1].powi(2)
        };
        let x = &x[..d];
        let bg: Vec<Vec<f64>> = bg.iter().map(|r| r[..d].to_vec()).collect();
        let a = exact_shapley_fn(f, x, &BackgroundSet::new(bg.clone()).unwrap(), 15).unwrap();
        let oracle = permutation_oracle(&f, x, &bg);
        for (p, q) in a.phi.iter().zip(&oracle) {
            prop_assert!((p - q).abs() < 1e-9);
        }
        prop_assert!((a.base_value + a.phi.iter().sum::<f64>() - f(x)).abs() < 1e-9);
        prop_assert!(a.efficiency_gap().abs() < 1e-9);
    }

    #[test]
    fn cosine_scale_invariant(a in prop::collection::vec(-1.0f64..1.0, 4), b in prop::collection::vec(-1.0f64..1.0, 4), k in 0.01f64..100.0) {
        let base = cosine_drift(&DriftPair::new(attr(a.clone()), attr(b.clone())).unwrap());
        let scaled = cosine_drift(&DriftPair::new(attr(a.iter().map(|v| v * k).collect()), attr(b)).unwrap());
        prop_assert!((base - scaled).abs() < 1e-9);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
    }

    #[test]
    fn governance_monotone(a in -0.5f64..1.5, b in -0.5f64..1.5) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(governance(lo) >= governance(hi));
    }
}
