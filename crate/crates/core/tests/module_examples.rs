use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rough_young::field::{drift_field, linear_scalar_field, separable_field, Domain, HolderProfile, SpaceFn, TimeFn};
use rough_young::flow::{solve_rough_ode, FlowOptions};
use rough_young::gaussian::{concentration_check, fbm_path, HurstVector};
use rough_young::numeric::{fit_loglog, normal_cdf};
use rough_young::path::{uniform_grid, Path};
use rough_young::sewing::{integral_stability_in_phi, integral_stability_in_w, StabilityConfig};
use rough_young::transport::{uniqueness_probe, InitialDatum, TransportProblem};

fn rough() -> HolderProfile {
    HolderProfile::new(0.78, 1.0, 0.0).unwrap()
}

fn smooth() -> HolderProfile {
    HolderProfile::new(1.0, 1.0, 0.0).unwrap()
}

fn cfg() -> StabilityConfig {
    let mut c = StabilityConfig::default();
    c.sewing.tol = 1e-6;
    c
}

#[test]
fn space_free_perturbation_shifts_the_integral_exactly() {
    let g = TimeFn::sampled(fbm_path(0.8, 1 << 12, 1.0, 7, 0, 0.78).unwrap()).unwrap();
    let phi = fbm_path(0.7, 1 << 12, 1.0, 7, 1, 0.68).unwrap();
    let dom = Domain::cube((0.0, 1.0), 1, 50.0).unwrap();
    let w1 = separable_field(g, SpaceFn::Sin1, 1, rough(), dom.clone()).unwrap();
    let delta = 0.3;
    let w2 = w1.sum(&drift_field(TimeFn::Identity, vec![delta], 1, smooth(), dom).unwrap()).unwrap();
    let (a, b) = (0.2, 0.9);
    let rep = integral_stability_in_w(&w1, &w2, &phi, a, b, &cfg()).unwrap();
    assert!((rep.observed_gap - delta * (b - a)).abs() < 4e-6, "{rep:?}");
    assert!(rep.holds);
}

#[test]
fn constant_path_shift_under_linear_field() {
    let gp = fbm_path(0.8, 1 << 12, 1.0, 8, 0, 0.78).unwrap();
    let g = TimeFn::sampled(gp.clone()).unwrap();
    let field = linear_scalar_field(g.clone(), 1, rough(), Domain::cube((0.0, 1.0), 1, 50.0).unwrap()).unwrap();
    let phi1 = fbm_path(0.7, 1 << 12, 1.0, 8, 1, 0.68).unwrap();
    let h = 0.125;
    let phi2 = phi1.shifted(&[h]).unwrap();
    let (u, v) = (0.0, 1.0);
    let rep = integral_stability_in_phi(&field, &phi1, &phi2, 0.5, u, v, &cfg()).unwrap();
    assert!((rep.observed_gap - h * (g.eval(v) - g.eval(u)).abs()).abs() < 4e-6, "{rep:?}");
}

#[test]
fn euler_self_convergence_rate_on_a_rough_sine_field() {
    let levels: Vec<usize> = (6..=11).collect();
    let mut sq = vec![0.0; levels.len()];
    let instances = 32;
    for i in 0..instances {
        let g = TimeFn::sampled(fbm_path(0.8, 1 << 14, 1.0, 11, i, 0.78).unwrap()).unwrap();
        let field = separable_field(g, SpaceFn::Sin, 1, rough(), Domain::cube((0.0, 1.0), 1, 50.0).unwrap()).unwrap();
        for (k, &l) in levels.iter().enumerate() {
            let n = 1usize << l;
            let coarse = solve_rough_ode(&field, &[0.4], 0.0, 1.0, n, &FlowOptions::default()).unwrap();
            let fine = solve_rough_ode(&field, &[0.4], 0.0, 1.0, 2 * n, &FlowOptions::default()).unwrap();
            let gap = (0..=n).map(|j| (coarse.state(j)[0] - fine.state(2 * j)[0]).abs()).fold(0.0, f64::max);
            sq[k] += gap * gap / instances as f64;
        }
    }
    let steps: Vec<f64> = levels.iter().map(|l| 0.5f64.powi(*l as i32)).collect();
    let rms: Vec<f64> = sq.iter().map(|v| v.sqrt()).collect();
    let fit = fit_loglog(&steps, &rms).unwrap();
    // Fitted slope over six levels; 0.05 of slack for the fit itself.
    assert!(fit.slope >= 0.78 * 2.0 - 1.0 - 0.05, "rate {} from {rms:?}", fit.slope);
}

#[test]
fn linear_transport_discrepancy_halves() {
    let field = linear_scalar_field(TimeFn::Identity, 1, smooth(), Domain::cube((-1.0, 2.0), 1, 50.0).unwrap()).unwrap();
    let grid: Vec<Vec<f64>> = uniform_grid(-1.0, 1.0, 8).into_iter().map(|x| vec![x]).collect();
    let problem = TransportProblem::new(field, InitialDatum::gaussian(), 0.0, grid).unwrap();
    let d = uniqueness_probe(&problem, 1.0, &[64, 128, 256, 512]).unwrap();
    for w in d.windows(2) {
        let ratio = w[0] / w[1];
        assert!((ratio - 2.0).abs() < 0.1, "{d:?}");
    }
}

#[test]
fn rectangle_variance_for_mixed_hurst() {
    let h = HurstVector::new(vec![0.3, 0.8]).unwrap();
    let v = h.rect_variance(&[0.1, 0.2], &[0.6, 0.45]);
    assert!((v - 0.5f64.powf(0.6) * 0.25f64.powf(1.6)).abs() < 1e-14);
}

#[test]
fn half_normal_exceedance_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 200_000;
    let sups: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).map(|z: f64| z.abs()).collect();
    let rep = concentration_check(&sups, 1.0, &[0.5, 1.0, 2.0]).unwrap();
    let m = (2.0 / std::f64::consts::PI).sqrt();
    for (i, r) in rep.r_values.iter().enumerate() {
        // P(||Z| - m| > r) = P(|Z| > m + r) + P(|Z| < m - r).
        let above = 2.0 * (1.0 - normal_cdf(m + r));
        let below = if m > *r { 2.0 * normal_cdf(m - r) - 1.0 } else { 0.0 };
        let exact = above + below;
        assert!((rep.frequencies[i] - exact).abs() < 4.0 * (exact * (1.0 - exact) / n as f64).sqrt() + 1e-3, "{rep:?}");
        assert!(exact <= rep.bounds[i]);
    }
    assert!(rep.pass);
}

#[test]
fn mollified_gradient_error_decays_like_the_holder_exponent() {
    let base = separable_field(
        TimeFn::Poly(vec![1.0]),
        SpaceFn::AbsPow(1.5),
        1,
        smooth(),
        Domain::cube((-1.0, 2.0), 1, 3.0).unwrap(),
    )
    .unwrap();
    let eps: Vec<f64> = (3..=7).map(|k| 0.5f64.powi(k)).collect();
    // The kink sits at 0; probe the band of width eps around it.
    let errs: Vec<f64> = eps
        .iter()
        .map(|e| {
            let m = base.mollify(*e, 16).unwrap();
            uniform_grid(-*e, *e, 9)
                .iter()
                .map(|x| (m.gradient(0.5, &[*x]).unwrap()[0] - base.gradient(0.5, &[*x]).unwrap()[0]).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let fit = fit_loglog(&eps, &errs).unwrap();
    assert!((fit.slope - 0.5).abs() < 0.1, "slope {} from {errs:?}", fit.slope);
}

#[test]
fn shifted_path_keeps_its_exponent() {
    let p = Path::from_fn(0.0, 1.0, 16, 1, 0.7, |t| vec![t * t]).unwrap();
    let q = p.shifted(&[1.0]).unwrap();
    assert_eq!(q.gamma(), 0.7);
    assert_eq!(q.eval1(0.5).unwrap(), p.eval1(0.5).unwrap() + 1.0);
}
