use proptest::prelude::*;
use rough_young::field::{drift_field, Domain, HolderProfile, TimeFn};
use rough_young::fk::sqrt_spd;
use rough_young::flow::{solve_rough_ode, FlowOptions};
use rough_young::gaussian::{fbm_covariance, sample_fbs, HurstVector};
use rough_young::io::{fmt_f64, GridData};
use rough_young::path::Path;
use rough_young::sewing::{riemann_sum, sew_levels, FnGerm, Partition};

fn g(t: f64) -> f64 {
    t.sin() + 0.3 * t * t
}

fn sorted_points(mut v: Vec<f64>, a: f64, b: f64) -> Vec<f64> {
    v.push(a);
    v.push(b);
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn additive_germ_sums_telescope(inner in prop::collection::vec(0.0f64..1.0, 0..40)) {
        let germ = FnGerm::new(1, 1.0, |s, t, out: &mut [f64]| out[0] = g(t) - g(s));
        let p = Partition::new(sorted_points(inner, 0.0, 1.0)).unwrap();
        let s = riemann_sum(&germ, &p).unwrap()[0];
        prop_assert!((s - (g(1.0) - g(0.0))).abs() < 1e-13);
    }

    #[test]
    fn sewing_is_linear(alpha in -3.0f64..3.0, beta in -3.0f64..3.0, levels in 2usize..10) {
        let f = |s: f64, t: f64| (t - s) * s.cos();
        let h = |s: f64, t: f64| (t - s) * (s * s);
        let gf = FnGerm::new(1, 1.0, move |s, t, out: &mut [f64]| out[0] = f(s, t));
        let gh = FnGerm::new(1, 1.0, move |s, t, out: &mut [f64]| out[0] = h(s, t));
        let gc = FnGerm::new(1, 1.0, move |s, t, out: &mut [f64]| out[0] = alpha * f(s, t) + beta * h(s, t));
        let a = sew_levels(&gf, 0.0, 1.0, levels).unwrap().scalar();
        let b = sew_levels(&gh, 0.0, 1.0, levels).unwrap().scalar();
        let c = sew_levels(&gc, 0.0, 1.0, levels).unwrap().scalar();
        prop_assert!((c - (alpha * a + beta * b)).abs() < 1e-12);
    }

    #[test]
    fn path_hits_its_nodes(vals in prop::collection::vec(-5.0f64..5.0, 2..30)) {
        let n = vals.len();
        let times: Vec<f64> = (0..n).map(|k| k as f64 / (n - 1) as f64).collect();
        let p = Path::scalar(times.clone(), vals.clone(), 0.5).unwrap();
        for (t, v) in times.iter().zip(&vals) {
            prop_assert_eq!(p.eval1(*t).unwrap(), *v);
        }
    }

    #[test]
    fn spd_square_root_squares_back(m in prop::collection::vec(-1.0f64..1.0, 9)) {
        // A = M M^T + I is symmetric positive definite.
        let d = 3;
        let mut a = vec![0.0; 9];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..d).map(|k| m[i * d + k] * m[j * d + k]).sum::<f64>() + if i == j { 1.0 } else { 0.0 };
            }
        }
        let r = sqrt_spd(&a, d).unwrap();
        for i in 0..d {
            for j in 0..d {
                let rr: f64 = (0..d).map(|k| r[i * d + k] * r[k * d + j]).sum();
                prop_assert!((rr - a[i * d + j]).abs() < 1e-10);
                prop_assert!((r[i * d + j] - r[j * d + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn formatted_floats_round_trip(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn grid_data_round_trips(nx in 1usize..6, ny in 1usize..6, dim_out in 1usize..3, seed in any::<u64>()) {
        let axes = vec![(0..nx).map(|i| i as f64 * 0.5).collect(), (0..ny).map(|j| -1.0 + j as f64 / 3.0).collect()];
        let values: Vec<f64> = (0..nx * ny * dim_out)
            .map(|k| ((seed.wrapping_mul(k as u64 + 1) % 10_007) as f64).sqrt() - 50.0)
            .collect();
        let grid = GridData::new(axes, dim_out, values).unwrap();
        prop_assert_eq!(&GridData::from_csv(&grid.to_csv()).unwrap(), &grid);
        prop_assert_eq!(&GridData::from_bytes(&grid.to_bytes()).unwrap(), &grid);
    }

    #[test]
    fn fbm_covariance_is_symmetric_with_power_diagonal(h in 0.05f64..0.95, s in 0.0f64..3.0, t in 0.0f64..3.0) {
        prop_assert!((fbm_covariance(h, s, t) - fbm_covariance(h, t, s)).abs() < 1e-14);
        prop_assert!((fbm_covariance(h, t, t) - t.powf(2.0 * h)).abs() < 1e-13);
    }

    #[test]
    fn sheet_rectangles_add_along_each_axis(h0 in 0.1f64..0.9, h1 in 0.1f64..0.9, seed in any::<u64>()) {
        let axes = vec![vec![0.0, 0.25, 0.5, 1.0], vec![0.0, 0.5, 1.0]];
        let sheet = sample_fbs(HurstVector::new(vec![h0, h1]).unwrap(), axes, seed).unwrap();
        let r = |x: [f64; 2], y: [f64; 2]| sheet.rect_increment(&x, &y).unwrap();
        let whole = r([0.0, 0.0], [1.0, 1.0]);
        prop_assert!((whole - r([0.0, 0.0], [0.5, 1.0]) - r([0.5, 0.0], [1.0, 1.0])).abs() < 1e-12);
        prop_assert!((whole - r([0.0, 0.0], [1.0, 0.5]) - r([0.0, 0.5], [1.0, 1.0])).abs() < 1e-12);
        // Anchored at the origin the increment is the sheet value.
        prop_assert!((whole - sheet.value(&[1.0, 1.0]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn constant_drift_flow_is_exact(b0 in -2.0f64..2.0, b1 in -2.0f64..2.0, x0 in -1.0f64..1.0, steps in 2usize..64) {
        let profile = HolderProfile::new(1.0, 1.0, 0.0).unwrap();
        let dom = Domain::cube((-10.0, 10.0), 2, 50.0).unwrap();
        let field = drift_field(TimeFn::Identity, vec![b0, b1], 2, profile, dom).unwrap();
        let sol = solve_rough_ode(&field, &[x0, -x0], 0.0, 1.0, steps, &FlowOptions::default()).unwrap();
        let end = sol.state(steps);
        prop_assert!((end[0] - (x0 + b0)).abs() < 1e-12);
        prop_assert!((end[1] - (-x0 + b1)).abs() < 1e-12);
    }
}
