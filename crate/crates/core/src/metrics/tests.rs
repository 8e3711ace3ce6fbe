use super::*;
use crate::encoders::{AddAgent, Chemo, ChemoAgent, Radio, RadioKind};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Direct O(n²) enumeration of comparable pairs.
fn c_index_pairs(r: &[f64], t: &[f64], d: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..r.len() {
        for j in 0..r.len() {
            if d[i] && t[i] < t[j] {
                den += 1.0;
                if r[i] > r[j] {
                    num += 1.0;
                } else if r[i] == r[j] {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

#[test]
fn c_index_examples() {
    let t = [1.0, 2.0, 3.0, 4.0];
    let d = [true; 4];
    assert_eq!(c_index(&[4.0, 3.0, 2.0, 1.0], &t, &d).unwrap(), 1.0);
    assert_eq!(c_index(&[1.0; 4], &t, &d).unwrap(), 0.5);
    assert_eq!(
        c_index(&[3.0, 1.0, 2.0], &[1.0, 2.0, 3.0], &[true, true, false]).unwrap(),
        2.0 / 3.0
    );
    assert!(matches!(
        c_index(&[1.0, 2.0], &[1.0, 2.0], &[false, false]),
        Err(MetricsError::Undefined(_))
    ));
    assert!(c_index(&[1.0], &[1.0, 2.0], &[true, true]).is_err());
    assert!(c_index(&[1.0, 2.0], &[0.0, 2.0], &[true, true]).is_err());
}

fn survival_data(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (2..=max).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 0.5, 1.0, 2.0, 3.0]), n),
            prop::collection::vec(1u32..8, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #[test]
    fn c_index_matches_pair_enumeration((r, t, d) in survival_data(15)) {
        match (c_index(&r, &t, &d), c_index_pairs(&r, &t, &d)) {
            (Ok(a), Some(b)) => prop_assert_eq!(a, b),
            (Err(MetricsError::Undefined(_)), None) => {}
            (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
        }
    }

    #[test]
    fn c_index_is_rank_invariant((r, t, d) in survival_data(15)) {
        let transformed: Vec<f64> = r.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
        prop_assert_eq!(c_index(&r, &t, &d).ok(), c_index(&transformed, &t, &d).ok());
    }

    #[test]
    fn km_is_monotone_and_bounded((_r, t, d) in survival_data(30)) {
        let c = km_curve(&t, &d).unwrap();
        prop_assert_eq!(c.survival[0], 1.0);
        for w in c.survival.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        for i in 0..c.times.len() {
            prop_assert!((0.0..=1.0).contains(&c.survival[i]));
            prop_assert!(c.lower[i] <= c.survival[i] && c.survival[i] <= c.upper[i]);
        }
    }
}

#[test]
fn km_hand_fixtures() {
    let flat = km_curve(&[3.0, 5.0], &[false, false]).unwrap();
    assert_eq!(flat.survival, vec![1.0]);
    assert_eq!(flat.survival_at(100.0), 1.0);

    let c = km_curve(&[1.0, 2.0], &[true, true]).unwrap();
    assert_eq!(c.times, vec![0.0, 1.0, 2.0]);
    assert_eq!(c.survival, vec![1.0, 0.5, 0.0]);

    // n = 6: deaths at 2 (×2), censor at 3, death at 4, censor at 5 and 6.
    let c = km_curve(&[2.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[true, true, false, true, false, false]).unwrap();
    assert_eq!(c.at_risk, vec![6, 6, 3]);
    let s1 = 4.0 / 6.0;
    let s2 = s1 * (2.0 / 3.0);
    assert!((c.survival[1] - s1).abs() < 1e-12);
    assert!((c.survival[2] - s2).abs() < 1e-12);
    let var2 = s2 * s2 * (2.0 / (6.0 * 4.0) + 1.0 / (3.0 * 2.0));
    assert!((c.lower[2] - (s2 - 1.959963984540054 * var2.sqrt()).max(0.0)).abs() < 1e-12);
    assert!((c.upper[2] - (s2 + 1.959963984540054 * var2.sqrt()).min(1.0)).abs() < 1e-12);
    assert_eq!(c.survival_at(3.0), c.survival[1]);
    assert_eq!(c.survival_at(1.0), 1.0);
    assert!(c.to_csv().starts_with("time,survival,lower,upper,at_risk,events\n0,1,1,1,6,0\n"));

    assert!(km_curve(&[], &[]).is_err());
}

#[test]
fn km_is_invariant_to_duplicating_the_cohort() {
    let t = [3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0];
    let d = [true, false, true, true, false, true, true];
    let a = km_curve(&t, &d).unwrap();
    let t2: Vec<f64> = t.iter().chain(&t).copied().collect();
    let d2: Vec<bool> = d.iter().chain(&d).copied().collect();
    let b = km_curve(&t2, &d2).unwrap();
    assert_eq!(a.times, b.times);
    for (x, y) in a.survival.iter().zip(&b.survival) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn incomplete_gamma_matches_reference() {
    for df in [1.0, 2.0, 3.0, 5.0, 10.0] {
        let chi = ChiSquared::new(df).unwrap();
        for x in [0.01, 0.5, 1.0, 2.5, 6.0, 10.83, 25.0, 60.0] {
            let ours = chi_square_upper_tail(x, df);
            let reference = 1.0 - chi.cdf(x);
            assert!((ours - reference).abs() < 1e-10, "df {df} x {x}: {ours} vs {reference}");
        }
    }
    assert!((chi_square_upper_tail(10.83, 1.0) - 0.001).abs() < 2e-5);
    assert_eq!(regularized_gamma_q(2.0, 0.0), 1.0);
}

fn group(label: &str, t: &[f64], d: &[bool]) -> SurvivalGroup {
    SurvivalGroup {
        label: label.into(),
        times: t.to_vec(),
        events: d.to_vec(),
    }
}

/// Fraction of 10⁴ label permutations whose statistic is at least the
/// observed one.
fn permutation_p(groups: &[SurvivalGroup], seed: u64) -> f64 {
    let observed = log_rank(groups).unwrap().statistic;
    let sizes: Vec<usize> = groups.iter().map(|g| g.times.len()).collect();
    let mut pool: Vec<(f64, bool)> = groups
        .iter()
        .flat_map(|g| g.times.iter().copied().zip(g.events.iter().copied()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    let n = 10_000;
    for _ in 0..n {
        pool.shuffle(&mut rng);
        let mut offset = 0;
        let shuffled: Vec<SurvivalGroup> = sizes
            .iter()
            .map(|&s| {
                let part = &pool[offset..offset + s];
                offset += s;
                SurvivalGroup {
                    label: String::new(),
                    times: part.iter().map(|x| x.0).collect(),
                    events: part.iter().map(|x| x.1).collect(),
                }
            })
            .collect();
        if log_rank(&shuffled).unwrap().statistic >= observed - 1e-12 {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

#[test]
fn log_rank_identical_groups() {
    let t = [2.0, 4.0, 5.0, 7.0, 9.0];
    let d = [true, false, true, true, false];
    let r = log_rank(&[group("a", &t, &d), group("b", &t, &d)]).unwrap();
    assert!(r.statistic.abs() < 1e-12);
    assert!((r.p_value - 1.0).abs() < 1e-9);
    assert_eq!(r.degrees_of_freedom, 1);
    assert!(log_rank(&[group("a", &t, &d)]).is_err());
    assert!(log_rank(&[group("a", &t, &d), group("b", &[], &[])]).is_err());
}

#[test]
fn log_rank_separated_groups() {
    let early: Vec<f64> = (1..=10).map(f64::from).collect();
    let late: Vec<f64> = (11..=20).map(f64::from).collect();
    let d = [true; 10];
    let groups = [group("early", &early, &d), group("late", &late, &d)];
    let r = log_rank(&groups).unwrap();
    assert!(r.p_value < 0.01, "{r:?}");
    assert!(permutation_p(&groups, 0) < 0.01);
}

#[test]
fn log_rank_agrees_with_permutation_oracle() {
    let groups = [
        group("a", &[1.0, 2.0, 3.0, 4.0, 6.0, 8.0, 9.0, 12.0, 13.0, 15.0], &[true; 10]),
        group("b", &[5.0, 7.0, 10.0, 11.0, 14.0, 16.0, 17.0, 18.0, 19.0, 20.0], &[true, true, false, true, true, true, false, true, true, true]),
    ];
    let p = log_rank(&groups).unwrap().p_value;
    let oracle = permutation_p(&groups, 0);
    assert!((p - oracle).abs() <= 0.01, "asymptotic {p} vs permutation {oracle}");
}

/// At n = 20 the chi-square tail runs below the exact permutation p by about
/// 0.013 on interleaved groups.
#[test]
fn log_rank_chi_square_is_anti_conservative_in_small_samples() {
    let groups = [
        group("a", &[1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0, 15.0, 17.0, 19.0], &[true, true, true, false, true, true, true, false, true, true]),
        group("b", &[2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0, 18.0, 20.0], &[true, false, true, true, true, true, false, true, true, true]),
    ];
    let p = log_rank(&groups).unwrap().p_value;
    let oracle = permutation_p(&groups, 0);
    assert!(p < oracle && oracle - p < 0.03, "asymptotic {p} vs permutation {oracle}");
}

#[test]
fn median_split_marks_upper_half() {
    assert_eq!(median_split(&[3.0, 1.0, 2.0, 4.0]), vec![true, false, false, true]);
    assert_eq!(median_split(&[1.0, 2.0, 3.0]), vec![false, false, true]);
    assert!(median_split(&[]).is_empty());
}

fn action(chemo: Option<ChemoAgent>, radio: bool, add: bool) -> TherapyAction {
    TherapyAction {
        chemo: chemo.map(|agent| Chemo {
            agent,
            dose_level: 2,
            cycles: 2,
        }),
        radio: radio.then_some(Radio {
            kind: RadioKind::EbrtStandard,
            dose_level: 2,
        }),
        brachy: false,
        immuno: None,
        add: add.then_some(AddAgent::Bevacizumab),
        interval_days: 28,
    }
}

#[test]
fn prf1_examples() {
    let tmz = Some(ChemoAgent::Tmz);
    let a = action(tmz, true, false);
    assert_eq!(
        prf1(&a, &a).unwrap(),
        Prf1 {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0
        }
    );
    let disjoint = prf1(&action(Some(ChemoAgent::Ccnu), false, false), &action(None, true, true)).unwrap();
    assert_eq!((disjoint.precision, disjoint.recall, disjoint.f1), (0.0, 0.0, 0.0));
    let half = prf1(&a, &action(tmz, false, false)).unwrap();
    assert_eq!((half.precision, half.recall), (0.5, 1.0));
    assert!((half.f1 - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn f1_symmetry_depends_on_set_sizes() {
    let tmz = Some(ChemoAgent::Tmz);
    let (p, g) = (action(tmz, true, false), action(tmz, false, true));
    assert_eq!(prf1(&p, &g).unwrap().f1, prf1(&g, &p).unwrap().f1);
    let (p, g) = (action(tmz, true, false), action(tmz, false, false));
    let (x, y) = (prf1(&p, &g).unwrap(), prf1(&g, &p).unwrap());
    assert_eq!(x.f1, y.f1);
    assert_ne!(x.precision, y.precision);
}

#[test]
fn cohort_report_is_micro_averaged() {
    let tmz = Some(ChemoAgent::Tmz);
    let pairs = [
        (action(tmz, true, false), action(tmz, false, false)),
        (action(tmz, false, false), action(tmz, false, false)),
    ];
    let r = recommendation_report(&pairs).unwrap();
    assert_eq!(r.micro.precision, 2.0 / 3.0);
    assert_eq!(r.micro.recall, 1.0);
    assert_eq!(r.exact_match, 0.5);
    assert!(recommendation_report(&[]).is_err());
}
