use cbbdm::schedule::{BridgeSchedule, GaussianSchedule};
use proptest::prelude::*;

#[test]
fn four_step_hand_values() {
    let s = BridgeSchedule::new(4).unwrap();
    let want = [0.0, 0.375, 0.5, 0.375, 0.0];
    for (t, w) in want.iter().enumerate() {
        assert!((s.delta(t) - w).abs() < 1e-15);
    }
    assert!((s.delta_cond(2) - 1.0 / 3.0).abs() < 1e-15);
    assert!((s.delta_cond(3) - 0.25).abs() < 1e-15);
    assert!((s.delta_tilde(2) - 0.25).abs() < 1e-15);
    assert!((s.delta_tilde(3) - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(s.delta_tilde(1), 0.0);
    assert_eq!(s.delta_tilde(4), s.delta(3));
    for (t, w) in [(1, 1.0), (2, 0.5), (3, 1.0 / 3.0), (4, 0.0)] {
        assert!((s.c_eps(t) - w).abs() < 1e-15, "t={t}");
    }
}

#[test]
fn midpoint_of_long_schedule() {
    let s = BridgeSchedule::new(1000).unwrap();
    assert_eq!(s.m(500), 0.5);
    assert_eq!(s.delta(500), 0.5);
    assert!(BridgeSchedule::new(1).is_err());
}

#[test]
fn csv_dump_layout() {
    let csv = BridgeSchedule::new(4).unwrap().to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t,m,delta,delta_cond,delta_tilde,c_eps");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].starts_with("0,0,0,"));
    assert_eq!(lines[1].split(',').count(), 6);
}

#[test]
fn gaussian_hand_values() {
    let g = GaussianSchedule::new(2, 0.1, 0.2).unwrap();
    for (t, w) in [1.0, 0.9, 0.72].iter().enumerate() {
        assert!((g.alpha_bar(t) - w).abs() < 1e-15);
    }
    let c = GaussianSchedule::new(7, 0.05, 0.05).unwrap();
    for t in 0..=7 {
        assert!((c.alpha_bar(t) - 0.95f64.powi(t as i32)).abs() < 1e-15);
    }
    let long = GaussianSchedule::new(1000, 1e-4, 0.02).unwrap();
    assert!((1..=1000).all(|t| long.alpha_bar(t) < long.alpha_bar(t - 1)));
    assert!(long.alpha_bar(1000) < 1e-4);
    assert!(GaussianSchedule::new(10, 0.2, 0.1).is_err());
    assert!(GaussianSchedule::new(10, 0.0, 0.1).is_err());
    assert!(GaussianSchedule::new(10, 0.1, 1.0).is_err());
}

proptest! {
    #[test]
    fn bridge_invariants(horizon in 2usize..2000) {
        let s = BridgeSchedule::new(horizon).unwrap();
        let tt = horizon as f64;
        prop_assert_eq!((s.m(0), s.m(horizon), s.delta(0), s.delta(horizon)), (0.0, 1.0, 0.0, 0.0));
        for t in 1..=horizon {
            prop_assert!(s.m(t) > s.m(t - 1));
            prop_assert!((s.delta(t) - s.delta(horizon - t)).abs() < 1e-12);
            prop_assert!(s.delta_cond(t) >= 0.0);
            prop_assert!(s.delta_tilde(t) <= s.delta(t - 1) + 1e-15);
            if t < horizon {
                prop_assert!(s.delta(t) > 0.0);
                let r = (1.0 - s.m(t)) / (1.0 - s.m(t - 1));
                prop_assert!((s.delta(t) - s.delta_cond(t) - s.delta(t - 1) * r * r).abs() < 1e-12);
            }
        }
        let peak = (0..=horizon).map(|t| s.delta(t)).fold(0.0, f64::max);
        prop_assert!(peak <= 0.5);
        if horizon % 2 == 0 {
            prop_assert!((s.delta(horizon / 2) - 0.5).abs() < 1e-15);
            prop_assert_eq!(peak, s.delta(horizon / 2));
        }
        prop_assert!((s.m(1) - 1.0 / tt).abs() < 1e-15);
    }

    #[test]
    fn gaussian_invariants(horizon in 2usize..1500, lo in 1e-5f64..0.01, span in 0.0f64..0.05) {
        let g = GaussianSchedule::new(horizon, lo, lo + span).unwrap();
        prop_assert_eq!(g.alpha_bar(0), 1.0);
        for t in 1..=horizon {
            let want = lo + (t - 1) as f64 * span / (horizon - 1) as f64;
            prop_assert!((g.beta(t) - want).abs() < 1e-15);
            prop_assert!(g.alpha_bar(t) < g.alpha_bar(t - 1));
            prop_assert!((g.alpha_bar(t) - g.alpha_bar(t - 1) * (1.0 - g.beta(t))).abs() < 1e-15);
        }
    }
}
