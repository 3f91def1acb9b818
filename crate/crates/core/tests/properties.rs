//! Invariants of environments and pathwise survival, checked on random inputs.

use polymer_core::environment::{sample_environment, Disaster, Environment, Interval, TimeSet, Window};
use polymer_core::path_survival::{evaluate, sample_skeleton, Beta, DeathClock};
use polymer_core::rng::SeedStream;
use proptest::prelude::*;

fn window() -> Window {
    Window::new(6.0, vec![(-4.0, 4.0)]).unwrap()
}

fn env_strategy() -> impl Strategy<Value = Environment> {
    prop::collection::vec((0.0f64..6.0, -4.0f64..4.0), 0..40)
        .prop_map(|v| Environment::new(window(), v.into_iter().map(|(t, x)| Disaster::new(t, vec![x])).collect()).unwrap())
}

fn timeset_strategy() -> impl Strategy<Value = TimeSet> {
    prop::collection::vec((0.0f64..6.0, 0.0f64..3.0, any::<bool>()), 0..4).prop_map(|v| {
        TimeSet::new(
            v.into_iter()
                .map(|(a, len, closed)| if closed { Interval::closed(a, a + len) } else { Interval::half_open(a, a + len) })
                .collect(),
        )
    })
}

fn sorted(env: &Environment) -> bool {
    env.disasters().windows(2).all(|w| (w[0].time, w[0].position[0]) < (w[1].time, w[1].position[0]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn restrict_intersection_law(env in env_strategy(), a in timeset_strategy(), b in timeset_strategy()) {
        let both = env.restrict(&a.intersect(&b));
        let nested = env.restrict(&a).restrict(&b);
        prop_assert_eq!(both.disasters(), nested.disasters());
        prop_assert!(env.restrict(&a).len() <= env.len());
        prop_assert!(sorted(&both));
        for d in both.disasters() {
            prop_assert!(a.contains(d.time) && b.contains(d.time));
        }
    }

    #[test]
    fn shift_round_trip(env in env_strategy(), dt in 0.0f64..2.0, dx in -1.0f64..1.0) {
        let there = env.shift(dt, &[dx]).unwrap();
        prop_assert!(sorted(&there));
        let back = there.shift(-dt, &[-dx]).unwrap();
        // Disasters that stay inside the window both ways survive the round trip.
        let kept: Vec<_> = env
            .disasters()
            .iter()
            .filter(|d| d.time >= dt && (d.position[0] - dx).abs() <= 4.0)
            .collect();
        prop_assert_eq!(back.len(), kept.len());
        for (x, y) in back.disasters().iter().zip(kept) {
            prop_assert!((x.time - y.time).abs() < 1e-12 && (x.position[0] - y.position[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn stripe_resampling_is_local(env in env_strategy(), i in 0u64..6, seed in any::<u64>()) {
        let new = env.resample_stripe(i, SeedStream::new(seed)).unwrap();
        prop_assert!(sorted(&new));
        let outside = |e: &Environment| -> Vec<Disaster> {
            e.disasters().iter().filter(|d| d.time < i as f64 || d.time >= i as f64 + 1.0).cloned().collect()
        };
        prop_assert_eq!(outside(&env), outside(&new));
    }

    #[test]
    fn weight_monotone_in_beta(env in env_strategy(), seed in any::<u64>(), modified in any::<bool>()) {
        let sk = sample_skeleton(&env, 6.0, &[0.0], SeedStream::new(seed)).unwrap();
        let clock = |beta| DeathClock { beta, xi: 1.0, modified };
        let mut prev = f64::INFINITY;
        let mut hits = None;
        for b in [0.0, 0.3, 1.0, 2.0, 8.0, 40.0] {
            let v = evaluate(&sk, &env, &clock(Beta::Finite(b)), 6.0).unwrap();
            prop_assert!((v.weight - (-b * v.hit_count as f64).exp()).abs() < 1e-12);
            prop_assert!(v.weight <= prev);
            prev = v.weight;
            hits = Some(v.hit_count);
        }
        let inf = evaluate(&sk, &env, &clock(Beta::Infinite), 6.0).unwrap();
        prop_assert_eq!(Some(inf.hit_count), hits);
        prop_assert_eq!(inf.weight, if inf.hit_count == 0 { 1.0 } else { 0.0 });
        let far = evaluate(&sk, &env, &clock(Beta::Finite(1e3)), 6.0).unwrap();
        prop_assert!((far.weight - inf.weight).abs() < 1e-300);
        prop_assert_eq!(inf.death_time >= 6.0, inf.weight == 1.0);
    }

    #[test]
    fn removing_disasters_never_hurts(env in env_strategy(), keep in timeset_strategy(), seed in any::<u64>(), beta in 0.0f64..3.0) {
        let sk = sample_skeleton(&env, 6.0, &[0.0], SeedStream::new(seed)).unwrap();
        for b in [Beta::Finite(beta), Beta::Infinite] {
            let clock = DeathClock { beta: b, xi: 0.7, modified: false };
            let full = evaluate(&sk, &env, &clock, 6.0).unwrap();
            let fewer = evaluate(&sk, &env.restrict(&keep), &clock, 6.0).unwrap();
            prop_assert!(fewer.weight >= full.weight);
            prop_assert!(fewer.hit_count <= full.hit_count);
            prop_assert!(fewer.death_time >= full.death_time);
        }
    }

    #[test]
    fn modified_clock_dominates(env in env_strategy(), seed in any::<u64>(), xi in 0.01f64..3.0) {
        let sk = sample_skeleton(&env, 6.0, &[0.0], SeedStream::new(seed)).unwrap();
        for b in [Beta::Finite(0.8), Beta::Infinite] {
            let plain = evaluate(&sk, &env, &DeathClock { beta: b, xi, modified: false }, 6.0).unwrap();
            let modified = evaluate(&sk, &env, &DeathClock { beta: b, xi, modified: true }, 6.0).unwrap();
            prop_assert!(modified.weight >= plain.weight);
            prop_assert!(modified.death_time >= plain.death_time);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_inside(seed in any::<u64>()) {
        let w = window();
        let a = sample_environment(&w, SeedStream::new(seed));
        let b = sample_environment(&w, SeedStream::new(seed));
        prop_assert_eq!(a.disasters(), b.disasters());
        prop_assert!(a.disasters().iter().all(|d| w.contains(d)));
        prop_assert!(sorted(&a));
    }
}
