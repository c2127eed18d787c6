use proptest::prelude::*;
use xva_core::autodiff::{Container, Tensor};
use xva_core::deep_bsde::compensator;
use xva_core::initial_margin::{empirical_quantile, pinball, RiskMeasure};
use xva_core::portfolio::{call_value, collateral, total_adjustment, AdjustmentRates, ContractSpec, Portfolio};
use xva_core::stochastic::{
    derive_seed, detect_defaults, girsanov_logweight, sample_increments, simulate, Barrier, Correlation, DefaultSpec,
    DriftTilt, MarketModel, Party, TimeGrid,
};

fn rates(lgd_b: f64, lgd_c: f64) -> AdjustmentRates {
    AdjustmentRates {
        risk_free: 0.05,
        collateral_borrow: 0.085,
        collateral_lend: 0.075,
        im_lend: 0.065,
        im_borrow: 0.05,
        funding_borrow: 0.075,
        funding_lend: 0.065,
        lgd_bank: lgd_b,
        lgd_cpty: lgd_c,
        collateral_fraction: 0.5,
    }
}

fn corr3(a: f64, b: f64, c: f64) -> Option<Correlation> {
    Correlation::new(&[vec![1.0, a, b], vec![a, 1.0, c], vec![b, c, 1.0]]).ok()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quantile_is_monotone_and_minimizes_pinball(
        xs in prop::collection::vec(-10.0f64..10.0, 1..200),
        a in 0.01f64..0.99,
        b in 0.01f64..0.99,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let qlo = empirical_quantile(&xs, lo).unwrap();
        let qhi = empirical_quantile(&xs, hi).unwrap();
        prop_assert!(qlo <= qhi);
        let loss = |q: f64| xs.iter().map(|&x| pinball(hi, q, x)).sum::<f64>();
        let best = loss(qhi);
        for &x in &xs {
            prop_assert!(best <= loss(x) + 1e-9);
        }
        prop_assert!(best <= loss(qhi + 0.01) + 1e-9 && best <= loss(qhi - 0.01) + 1e-9);
    }

    #[test]
    fn pinball_is_nonnegative_and_zero_at_the_sample(alpha in 0.0f64..1.0, q in -5.0f64..5.0, x in -5.0f64..5.0) {
        prop_assert!(pinball(alpha, q, x) >= 0.0);
        prop_assert_eq!(pinball(alpha, x, x), 0.0);
    }

    #[test]
    fn margin_horizon_stays_inside_the_grid(mpr in 1usize..20, steps in 1usize..60, n in 0usize..80) {
        let h = RiskMeasure { alpha: 0.99, mpr }.horizon(n, steps);
        prop_assert!(h <= mpr);
        if n <= steps {
            prop_assert!(n + h <= steps);
        } else {
            prop_assert_eq!(h, 0);
        }
    }

    #[test]
    fn increments_do_not_depend_on_chunking(seed in any::<u64>(), split in 1usize..15) {
        let grid = TimeGrid::new(1.0, 6).unwrap();
        let corr = Correlation::new(&[vec![1.0, 0.4], vec![0.4, 1.0]]).unwrap();
        let all = sample_increments(seed, 0, 16, &grid, &corr);
        let head = sample_increments(seed, 0, split, &grid, &corr);
        let tail = sample_increments(seed, split as u64, 16 - split, &grid, &corr);
        let joined: Vec<f64> = head.data.iter().chain(&tail.data).copied().collect();
        prop_assert_eq!(all.data, joined);
    }

    #[test]
    fn coarsening_composes(seed in any::<u64>()) {
        let grid = TimeGrid::new(1.0, 12).unwrap();
        let inc = sample_increments(seed, 0, 3, &grid, &Correlation::identity(2));
        let two_then_three = inc.coarsen(2).unwrap().coarsen(3).unwrap();
        let six = inc.coarsen(6).unwrap();
        for (a, b) in two_then_three.data.iter().zip(&six.data) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!(inc.coarsen(5).is_err());
    }

    #[test]
    fn seeds_are_deterministic_and_label_dependent(master in any::<u64>(), label in "[a-z/]{1,12}") {
        prop_assert_eq!(derive_seed(master, &label), derive_seed(master, &label));
        let other = format!("{label}x");
        prop_assert_ne!(derive_seed(master, &label), derive_seed(master, &other));
    }

    #[test]
    fn call_value_respects_no_arbitrage_bounds(s in 0.2f64..3.0, k in 0.2f64..3.0, tau in 0.01f64..3.0, vol in 0.05f64..0.8) {
        let r = 0.05;
        let c = call_value(s, k, tau, r, r, vol);
        prop_assert!(c >= (s - k * (-r * tau).exp()).max(0.0) - 1e-12);
        prop_assert!(c <= s + 1e-12);
        prop_assert!(call_value(s, k * 1.1, tau, r, r, vol) <= c + 1e-12);
        prop_assert!(call_value(s, k, tau, r, r, vol * 1.1) >= c - 1e-12);
    }

    #[test]
    fn payoff_is_nonnegative(x in prop::collection::vec(0.1f64..3.0, 3), k in 0.0f64..3.0) {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let p = Portfolio::new(&[ContractSpec { assets: vec![1, 3], maturity: 1.0, strike: k }], 3, &grid).unwrap();
        let c = &p.contracts[0];
        let g = c.geometric_mean(&x).unwrap();
        prop_assert!((g - (x[0] * x[2]).sqrt()).abs() < 1e-12);
        prop_assert!(c.payoff(&x).unwrap() >= 0.0);
    }

    #[test]
    fn close_out_splits_into_default_targets(
        q in -2.0f64..2.0, im_fc in 0.0f64..1.0, im_tc in -1.0f64..0.0,
        lgd_b in 0.0f64..1.0, lgd_c in 0.0f64..1.0, who in 0u8..3,
    ) {
        let r = rates(lgd_b, lgd_c);
        let c = collateral(q, r.collateral_fraction);
        let defaulter = [None, Some(Party::Bank), Some(Party::Counterparty)][who as usize];
        let cva = r.cva_target(q, c, im_fc, defaulter);
        let dva = r.dva_target(q, c, im_tc, defaulter);
        prop_assert!(cva >= 0.0 && dva >= 0.0);
        prop_assert!((r.close_out(q, c, im_fc, im_tc, defaulter) - (q - cva + dva)).abs() < 1e-14);
        let zero = rates(0.0, 0.0);
        prop_assert_eq!(zero.cva_target(q, c, im_fc, defaulter), 0.0);
        prop_assert_eq!(zero.dva_target(q, c, im_tc, defaulter), 0.0);
    }

    #[test]
    fn total_adjustment_is_the_signed_sum(v in prop::collection::vec(-5.0f64..5.0, 5)) {
        let t = total_adjustment(v[0], v[1], v[2], v[3], v[4]);
        prop_assert!((t - (v[0] - v[1] + v[2] + v[3] + v[4])).abs() < 1e-12);
    }

    #[test]
    fn compensator_is_bilinear_and_vanishes_without_tilt(
        q in prop::collection::vec(-1.0f64..1.0, 3),
        s in prop::collection::vec(0.05f64..1.0, 3),
        z in prop::collection::vec(-2.0f64..2.0, 3),
        a in -3.0f64..3.0,
    ) {
        prop_assert_eq!(compensator(&[0.0; 3], &s, &z).unwrap(), 0.0);
        let base = compensator(&q, &s, &z).unwrap();
        let qa: Vec<f64> = q.iter().map(|v| a * v).collect();
        let za: Vec<f64> = z.iter().map(|v| a * v).collect();
        prop_assert!((compensator(&qa, &s, &z).unwrap() - a * base).abs() < 1e-10);
        prop_assert!((compensator(&q, &s, &za).unwrap() - a * base).abs() < 1e-10);
    }

    #[test]
    fn default_times_are_consistent(seed in any::<u64>(), bb in 0.7f64..1.0, cb in 0.7f64..1.0) {
        let Some(corr) = corr3(0.1, 0.2, 0.25) else { return Ok(()) };
        let market = MarketModel::new(0.05, vec![0.2, 0.25, 0.3], vec![1.0; 3], corr).unwrap();
        let grid = TimeGrid::new(1.0, 12).unwrap();
        let inc = sample_increments(seed, 0, 32, &grid, &market.correlation);
        let paths = simulate(&market, &DriftTilt::zero(3), &inc, &grid).unwrap();
        let spec = DefaultSpec { bank_index: 1, cpty_index: 2, bank_barrier: Barrier::Constant(bb), cpty_barrier: Barrier::Constant(cb) };
        let times = detect_defaults(&paths, &spec, &grid).unwrap();
        for p in 0..32 {
            let stop = times.stop(p);
            prop_assert!(stop <= grid.steps);
            for n in 1..stop {
                prop_assert!(paths.component(p, n, 1) > bb && paths.component(p, n, 2) > cb);
            }
            match times.first_defaulter(p) {
                Some(Party::Counterparty) => prop_assert!(paths.component(p, stop, 2) <= cb),
                Some(Party::Bank) => prop_assert!(paths.component(p, stop, 1) <= bb && paths.component(p, stop, 2) > cb),
                None => prop_assert_eq!(stop, grid.steps),
            }
            let w = girsanov_logweight(&paths, p, &DriftTilt::zero(3), &market, &grid, stop).unwrap();
            prop_assert_eq!(w, 0.0);
        }
    }

    #[test]
    fn tilt_only_moves_tilted_components(seed in any::<u64>(), q in 0.05f64..0.5) {
        let Some(corr) = corr3(0.3, 0.2, 0.25) else { return Ok(()) };
        let market = MarketModel::new(0.05, vec![0.2, 0.25, 0.3], vec![1.0; 3], corr).unwrap();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let inc = sample_increments(seed, 0, 8, &grid, &market.correlation);
        let base = simulate(&market, &DriftTilt::zero(3), &inc, &grid).unwrap();
        let tilted = simulate(&market, &DriftTilt::new(vec![0.0, 0.0, q]), &inc, &grid).unwrap();
        for p in 0..8 {
            for n in 0..=grid.steps {
                prop_assert_eq!(base.component(p, n, 0), tilted.component(p, n, 0));
                prop_assert_eq!(base.component(p, n, 1), tilted.component(p, n, 1));
            }
            prop_assert!(tilted.component(p, grid.steps, 2) < base.component(p, grid.steps, 2));
        }
    }

    #[test]
    fn container_round_trips_tensors(
        rows in 1usize..5, cols in 1usize..5,
        data in prop::collection::vec(-1e6f64..1e6, 16),
        seed in any::<u64>(),
    ) {
        let t = Tensor::new([rows, cols], data[..rows * cols].to_vec()).unwrap();
        let mut c = Container::new("test", serde_json::json!({ "seed": seed }));
        c.push("a", t.clone());
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        prop_assert_eq!(back.get("a").unwrap(), &t);
        prop_assert!(back.expect_kind("test").is_ok() && back.expect_kind("other").is_err());
    }

    #[test]
    fn leading_correlation_keeps_entries(a in -0.5f64..0.5, b in -0.5f64..0.5, c in -0.5f64..0.5) {
        let Some(corr) = corr3(a, b, c) else { return Ok(()) };
        let sub = corr.leading(2).unwrap();
        prop_assert_eq!(sub.dim(), 2);
        prop_assert_eq!(sub.get(0, 1), a);
    }
}
