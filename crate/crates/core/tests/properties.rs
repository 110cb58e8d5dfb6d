use proptest::prelude::*;

use quasitrace::par::{map_indexed, task_rng, Workers};
use quasitrace::spectral::{fit_decay, CorrelationSeries};
use quasitrace::stats::{bessel_j0, linear_fit, log_grid};
use quasitrace::sumproduct::{exp_sum, pair_counts, ExpSumConfig, ZetaTable};
use quasitrace::thermo;
use quasitrace::trace_map::{apply_t, apply_t2, apply_t_inv, chart_y, fricke_vogt, TraceMapPoint};
use rand::Rng;

fn point() -> impl Strategy<Value = TraceMapPoint> {
    (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, z)| TraceMapPoint::new(x, y, z))
}

proptest! {
    #[test]
    fn t_preserves_fricke_vogt(p in point()) {
        let q = apply_t(p);
        prop_assert!((fricke_vogt(q) - fricke_vogt(p)).abs() <= 1e-12 * 64.0);
    }

    #[test]
    fn t_inverse_undoes_t(p in point()) {
        let q = apply_t_inv(apply_t(p));
        prop_assert!((q.x - p.x).abs() + (q.y - p.y).abs() + (q.z - p.z).abs() <= 1e-13);
    }

    #[test]
    fn t2_is_t_twice(p in point()) {
        prop_assert_eq!(apply_t2(p), apply_t(apply_t(p)));
    }

    #[test]
    fn chart_lands_on_level_set(v in 0.0..2.0f64, x in -1.0..1.0f64, z in -1.0..1.0f64) {
        let c = chart_y(v, x, z).unwrap();
        prop_assert!((fricke_vogt(c.ambient()) - v * v / 4.0).abs() <= 1e-12);
    }

    #[test]
    fn chart_is_symmetric_in_x_and_z(v in 0.0..2.0f64, x in -1.0..1.0f64, z in -1.0..1.0f64) {
        let a = chart_y(v, x, z).unwrap();
        let b = chart_y(v, z, x).unwrap();
        prop_assert!((a.y_val - b.y_val).abs() <= 1e-14);
    }

    #[test]
    fn pair_counts_match_brute_force(
        values in prop::collection::vec(-1.0..1.0f64, 1..60),
        mut sigma in prop::collection::vec(1e-4..1.0f64, 1..6),
    ) {
        sigma.sort_by(f64::total_cmp);
        let fast = pair_counts(&values, &sigma);
        for (s, c) in sigma.iter().zip(&fast) {
            let brute = values.iter().flat_map(|a| values.iter().map(move |b| (a - b).abs() <= *s)).filter(|x| *x).count();
            prop_assert_eq!(*c, brute as u64);
        }
        let m = values.len() as u64;
        prop_assert!(fast.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(fast.iter().all(|c| *c >= m && *c <= m * m));
    }

    #[test]
    fn exp_sum_modulus_is_at_most_one(
        slots in prop::collection::vec(prop::collection::vec(0.1..3.0f64, 1..12), 1..4),
        eps0 in 0.05..0.5f64,
    ) {
        let k = slots.len();
        let t = ZetaTable::from_values(6, slots);
        let cfg = ExpSumConfig::new(6, k, eps0, 8).unwrap();
        let r = exp_sum(&t, &cfg, Workers(1)).unwrap();
        prop_assert!(r.modulus.iter().all(|m| (0.0..=1.0).contains(m)));
        prop_assert!(r.sup_modulus <= 1.0);
    }

    #[test]
    fn constant_table_has_unit_modulus(z in 0.1..3.0f64, sizes in prop::collection::vec(1usize..6, 1..4)) {
        let k = sizes.len();
        let t = ZetaTable::from_values(6, sizes.iter().map(|n| vec![z; *n]).collect());
        let r = exp_sum(&t, &ExpSumConfig::new(6, k, 0.2, 4).unwrap(), Workers(1)).unwrap();
        prop_assert!(r.modulus.iter().all(|m| *m == 1.0));
    }

    #[test]
    fn log_grid_is_geometric(a in 1e-6..1.0f64, ratio in 1.5..1e4f64, n in 2usize..40) {
        let b = a * ratio;
        let g = log_grid(a, b, n);
        prop_assert_eq!(g.len(), n);
        prop_assert!((g[0] / a - 1.0).abs() <= 1e-14 && (g[n - 1] / b - 1.0).abs() <= 1e-12);
        let q = g[1] / g[0];
        prop_assert!(g.windows(2).all(|w| (w[1] / w[0] / q - 1.0).abs() <= 1e-10));
    }

    #[test]
    fn linear_fit_recovers_lines(slope in -5.0..5.0f64, icpt in -5.0..5.0f64, n in 3usize..50) {
        let x: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 - 2.0).collect();
        let y: Vec<f64> = x.iter().map(|x| slope * x + icpt).collect();
        let f = linear_fit(&x, &y).unwrap();
        prop_assert!((f.slope - slope).abs() <= 1e-10 && (f.intercept - icpt).abs() <= 1e-10);
    }

    #[test]
    fn bessel_is_bounded(x in -200.0..200.0f64) {
        let j = bessel_j0(x);
        prop_assert!(j.abs() <= 1.0 + 1e-15);
        prop_assert_eq!(j, bessel_j0(-x));
    }

    #[test]
    fn map_indexed_ignores_worker_count(seed in any::<u64>(), n in 0usize..200, w in 2usize..6) {
        let f = |i: usize| task_rng(seed, i as u64).gen::<u64>();
        prop_assert_eq!(map_indexed(Workers(1), n, f), map_indexed(Workers(w), n, f));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn decay_fit_recovers_power_law(rho in 0.1..1.5f64, c in 0.01..100.0f64) {
        let times: Vec<f64> = (0..=20000).map(|i| i as f64 * 0.01).collect();
        let re: Vec<f64> = times.iter().map(|t| c * (1.0 + t).powf(-rho) * t.cos()).collect();
        let im = vec![0.0; times.len()];
        let s = CorrelationSeries { times, re, im, n_phases: 1 };
        let fit = fit_decay(&s, [10.0, 200.0]).unwrap();
        prop_assert!((fit.rho_hat - rho).abs() <= 0.05 * rho.max(0.2));
        // the exponent does not see the amplitude
        let scaled = CorrelationSeries { re: s.re.iter().map(|x| x * 7.0).collect(), ..s.clone() };
        let g = fit_decay(&scaled, [10.0, 200.0]).unwrap();
        prop_assert!((g.rho_hat - fit.rho_hat).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn gibbs_masses_sum_to_one(idx in 0usize..4, n in 1usize..6) {
        let name = ["triadic", "full-2-shift", "golden-mean", "nonlinear"][idx];
        let sys = thermo::normalize_potential(&thermo::builtin(name).unwrap()).unwrap();
        let g = thermo::equilibrium_masses(&sys, n).unwrap();
        let total: f64 = g.entries.iter().map(|e| e.measure_mass).sum();
        prop_assert!((total - 1.0).abs() <= 1e-8);
        prop_assert!(g.entries.iter().all(|e| e.weight > 0.0 && e.measure_mass > 0.0));
    }
}
