use std::collections::VecDeque;

use mars_core::env::{target_shares, EnvConfig, PortfolioState};
use mars_core::risk::{
    concentration_score, env_risk, leverage_from_exposure, overlay_validate, post_trade, OverlayConfig, RiskConfig,
    OVERLAY_TOL,
};
use mars_core::rng::SeedStreams;
use mars_core::selftest::{constraint_violation, random_action, random_book};
use proptest::prelude::*;
use rand::Rng;

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, 1..8).prop_map(|w| {
        let s: f64 = w.iter().sum();
        // leave some cash when the draw overshoots
        if s > 1.0 { w.iter().map(|x| x / (s * 1.1)).collect() } else { w }
    })
}

fn shares_of(p: &PortfolioState, a: &[f64], env: &EnvConfig) -> Vec<f64> {
    let v = p.value();
    (0..a.len()).map(|i| target_shares(a[i].clamp(-1.0, 1.0), env.max_trade_fraction, v, p.prices[i])).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn concentration_is_a_unit_score(w in weights()) {
        let c = concentration_score(&w).unwrap();
        prop_assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn shifting_mass_to_the_largest_asset_raises_concentration(w in weights(), frac in 0.01f64..1.0) {
        prop_assume!(w.len() >= 2);
        let big = (0..w.len()).max_by(|a, b| w[*a].total_cmp(&w[*b])).unwrap();
        let small = (0..w.len()).filter(|i| *i != big).min_by(|a, b| w[*a].total_cmp(&w[*b])).unwrap();
        prop_assume!(w[small] > 0.0);
        let mut moved = w.clone();
        let delta = frac * w[small];
        moved[small] -= delta;
        moved[big] += delta;
        prop_assert!(concentration_score(&moved).unwrap() >= concentration_score(&w).unwrap() - 1e-15);
    }

    #[test]
    fn leverage_is_monotone_in_exposure(g1 in 0.0f64..3.0, g2 in 0.0f64..3.0, buffer in 0.0f64..0.5) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let a = leverage_from_exposure(lo, 1.0, buffer);
        let b = leverage_from_exposure(hi, 1.0, buffer);
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        prop_assert!(a <= b);
    }

    #[test]
    fn env_risk_components_are_unit_scores(seed in any::<u64>()) {
        let mut rng = SeedStreams::new(seed).stream("risk-test");
        let env = EnvConfig::default();
        let cfg = RiskConfig::default();
        let p = random_book(&mut rng, &env, &cfg.overlay);
        let d = p.n_assets();
        let returns: Vec<Vec<f64>> = (0..20).map(|_| (0..d).map(|_| rng.random_range(-0.2..0.2)).collect()).collect();
        let a = random_action(&mut rng, d);
        let s = env_risk(&p, &returns, &a, &env, &cfg).unwrap();
        for x in [s.total, s.concentration, s.leverage, s.simulated_volatility] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn overlay_is_sound_idempotent_and_conservative(seed in any::<u64>()) {
        let mut rng = SeedStreams::new(seed).stream("overlay-test");
        let env = EnvConfig::default();
        let o = OverlayConfig::default();
        let p = random_book(&mut rng, &env, &o);
        let a = random_action(&mut rng, p.n_assets());
        let out = overlay_validate(&a, &p, &env, &o).unwrap();
        prop_assert_eq!(constraint_violation(&p, &out, &env, &o), None);
        prop_assert_eq!(&overlay_validate(&out, &p, &env, &o).unwrap(), &out);
        prop_assert!(out.iter().all(|x| (-1.0..=1.0).contains(x)));
        // never trades harder than asked in the buying direction
        let asked = shares_of(&p, &a, &env);
        let done = shares_of(&p, &out, &env);
        for i in 0..a.len() {
            prop_assert!(done[i] <= asked[i].max(-p.holdings[i]), "asset {}: {} vs {}", i, done[i], asked[i]);
        }
    }

    /// One asset, a 30% cap and ample cash: the overlay keeps the feasible
    /// trade closest to the request.
    #[test]
    fn cap_correction_matches_brute_force(
        price in 1.0f64..400.0,
        held_frac in 0.0f64..0.45,
        value in 1e4f64..1e6,
        action in -1.0f64..=1.0,
    ) {
        let env = EnvConfig::default();
        let o = OverlayConfig { concentration_cap: 0.3, cash_buffer: 0.05 };
        let h = (held_frac * value / price).floor();
        let p = PortfolioState { cash: value - h * price, holdings: vec![h], prices: vec![price], t: 0, values: VecDeque::new() };
        let v = p.value();
        let max = (env.max_trade_fraction * v / price).floor();
        let want = target_shares(action, env.max_trade_fraction, v, price).max(-h);
        let feasible = |k: f64| {
            let cash = p.cash - k * price - env.cost_rate * (k * price).abs();
            (h + k) * price <= o.concentration_cap * v + OVERLAY_TOL * v && cash >= o.cash_buffer * v - OVERLAY_TOL * v
        };
        let lo = (-h).max(-max) as i64;
        let best = (lo..=max as i64)
            .map(|k| k as f64)
            .filter(|k| feasible(*k))
            .min_by(|a, b| (a - want).abs().total_cmp(&(b - want).abs()));
        prop_assume!(best.is_some());
        let out = overlay_validate(&[action], &p, &env, &o).unwrap();
        let got = target_shares(out[0], env.max_trade_fraction, v, price);
        prop_assert_eq!(got, best.unwrap());
    }
}

#[test]
fn all_cash_book_scores_zero_and_full_book_scores_one() {
    assert_eq!(concentration_score(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
    assert_eq!(concentration_score(&[1.0, 0.0]).unwrap(), 1.0);
    assert!(concentration_score(&[-0.1, 0.5]).is_err());
    assert_eq!(leverage_from_exposure(0.0, 1.0, 0.05), 0.0);
    assert_eq!(leverage_from_exposure(1.0, 1.0, 0.05), 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 300, max_global_rejects: 20_000, ..ProptestConfig::default() })]

    #[test]
    fn compliant_actions_pass_unchanged(seed in any::<u64>()) {
        let mut rng = SeedStreams::new(seed).stream("overlay-test");
        let env = EnvConfig::default();
        let o = OverlayConfig::default();
        let p = random_book(&mut rng, &env, &o);
        let scale = rng.random_range(0.0..0.3);
        let a: Vec<f64> = random_action(&mut rng, p.n_assets()).iter().map(|x| x * scale).collect();
        let t = post_trade(&p, &a, &env);
        let v = p.value();
        let raw = shares_of(&p, &a, &env);
        let ok = raw.iter().zip(&p.holdings).all(|(s, h)| *s >= -h)
            && t.positions.iter().all(|x| *x <= o.concentration_cap * v + OVERLAY_TOL * v)
            && t.cash >= o.cash_buffer * v - OVERLAY_TOL * v;
        prop_assume!(ok);
        prop_assert_eq!(overlay_validate(&a, &p, &env, &o).unwrap(), a);
    }
}
