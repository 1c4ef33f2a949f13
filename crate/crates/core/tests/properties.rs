use certismooth::attack::project_l2;
use certismooth::data::{denormalize, normalize};
use certismooth::schedule::{corrected_timestep, sigma_to_timestep, CorrectionFactor, NoiseSchedule, ScheduleKind};
use certismooth::stats::{clopper_pearson_lower, erf, normal_cdf, normal_quantile, regularized_incomplete_beta, Significance};
use proptest::prelude::*;
use statrs::function::beta::beta_reg;
use statrs::function::erf as reference;

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

proptest! {
    #[test]
    fn projection_lands_in_ball_and_fixes_interior(
        pairs in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..12),
        eps in 0.0f64..2.0,
    ) {
        let (x, x_adv): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let p = project_l2(&x_adv, &x, eps);
        prop_assert!(l2(&p, &x) <= eps + 1e-9);
        if l2(&x_adv, &x) <= eps {
            prop_assert!(l2(&p, &x_adv) < 1e-12);
        }
    }

    #[test]
    fn normalize_round_trips(x in prop::collection::vec(0.0f64..=1.0, 1..32)) {
        let y = normalize(&x);
        prop_assert!(y.iter().all(|v| (-1.0..=1.0).contains(v)));
        for (a, b) in denormalize(&y).iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn erf_matches_reference(x in -6.0f64..6.0) {
        // The reference itself is good to a few 1e-11.
        prop_assert!((erf(x) - reference::erf(x)).abs() < 1e-10);
    }

    #[test]
    fn quantile_inverts_cdf(p in 1e-10f64..(1.0 - 1e-10)) {
        let z = normal_quantile(p).unwrap();
        let back = normal_cdf(z).unwrap().get();
        prop_assert!((back - p).abs() <= 1e-12 * p.min(1.0 - p).max(1e-3));
    }

    #[test]
    fn incomplete_beta_matches_reference(a in 0.5f64..200.0, b in 0.5f64..200.0, x in 0.001f64..0.999) {
        let ours = regularized_incomplete_beta(a, b, x);
        let theirs = beta_reg(a, b, x);
        prop_assert!((ours - theirs).abs() < 1e-9, "{} vs {}", ours, theirs);
    }

    #[test]
    fn clopper_pearson_bound_has_tail_alpha(n in 1u64..20_000, frac in 0.0f64..=1.0) {
        let n_a = ((n as f64) * frac).round() as u64;
        let alpha = 0.001;
        let lo = clopper_pearson_lower(n_a, n, Significance::new(alpha).unwrap()).unwrap().get();
        if n_a == 0 {
            prop_assert_eq!(lo, 0.0);
        } else {
            // P[Bin(n, lo) >= n_a] = I_lo(n_a, n - n_a + 1) equals alpha at the bound.
            let tail = beta_reg(n_a as f64, (n - n_a + 1) as f64, lo);
            prop_assert!((tail - alpha).abs() < 1e-8 * alpha.max(1.0), "tail {}", tail);
            prop_assert!(lo <= n_a as f64 / n as f64);
        }
    }

    #[test]
    fn corrected_timestep_stays_on_grid(t in 0usize..=1000, k in 0.01f64..5.0) {
        let tp = corrected_timestep(t, CorrectionFactor::new(k).unwrap(), 1000);
        prop_assert!(tp <= 1000);
        prop_assert_eq!(tp, ((k * t as f64).round() as usize).min(1000));
    }
}

#[test]
fn timestep_match_is_the_grid_argmin() {
    let sched = NoiseSchedule::build(ScheduleKind::Linear, 500).unwrap();
    for sigma in [0.05, 0.25, 0.5, 1.0, 2.0] {
        let m = sigma_to_timestep(&sched, sigma).unwrap();
        let target = sigma * sigma;
        let gap = |t: usize| ((1.0 - sched.alpha_bar(t)) / sched.alpha_bar(t) - target).abs();
        assert!((0..=500).all(|t| gap(m.t_hat) <= gap(t)), "sigma {sigma}");
    }
}
