use std::sync::Arc;

use homfilter::averaging::{AnalyticAverages, HomogenizedModel};
use homfilter::catalog::{CatalogModel, Family, InitialLaw, LinearParams, OuParams};
use homfilter::filtering::{
    run_full_filter, run_full_filter_streaming, run_homogenized_filter, run_homogenized_filter_streaming, FilterConfig,
};
use homfilter::measures::{integrate, marginal_x};
use homfilter::model::{simulate_multiscale, simulate_observations, ObservationPath};
use homfilter::rng::{derived_stream, stream};
use homfilter::Error;

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn zero_obs(steps: usize, dt: f64) -> ObservationPath {
    let times = (0..=steps).map(|i| i as f64 * dt).collect();
    ObservationPath::new(times, vec![vec![0.0]; steps]).unwrap()
}

fn blind_linear() -> CatalogModel {
    CatalogModel::new(
        Family::Linear(LinearParams {
            h_x: 0.0,
            ..Default::default()
        }),
        InitialLaw {
            x_mean: 1.0,
            x_std: 0.5,
            ..Default::default()
        },
    )
}

#[test]
fn single_particle_echoes_a_simulated_trajectory() {
    let catalog = CatalogModel::new(Family::OuBenchmark(OuParams::default()), InitialLaw::default());
    let model = catalog.build(0.25).unwrap();
    let (x0, z0) = (vec![0.3], vec![-0.2]);
    let dt = 0.01;
    let signal = simulate_multiscale(&model, &x0, &z0, 0.5, dt, 4, &mut stream(9)).unwrap();
    let obs = simulate_observations(&signal, &model, &mut stream(10)).unwrap();
    let mut cfg = FilterConfig::new(1, dt);
    cfg.substeps_fast = Some(4);
    let history = run_full_filter(&model, &obs, |_| (x0.clone(), z0.clone()), &cfg, &mut stream(9)).unwrap();
    assert_eq!(history.len(), signal.len());
    for (i, ens) in history.iter().enumerate() {
        assert_eq!(ens.weights(), &[1.0]);
        assert_eq!(ens.state(0)[0], signal.slow_states[i][0]);
        assert_eq!(ens.state(0)[1], signal.fast_states[i][0]);
        assert_eq!(ens.time, signal.times[i]);
    }
}

#[test]
fn uninformative_observations_give_the_prior() {
    // dX = -X dt + dV, X0 ~ N(1, 0.25): E[X_T] under Euler is (1 - dt)^n
    let catalog = blind_linear();
    let model = catalog.build(1.0).unwrap();
    let (dt, steps) = (0.01, 50);
    let obs = zero_obs(steps, dt);
    let cfg = FilterConfig::new(4000, dt);
    let ens = run_full_filter_streaming(&model, &obs, |n| catalog.sample_initial(n), &cfg, &mut stream(1), |_, s| {
        assert!(!s.resampled);
    })
    .unwrap();
    let xs: Vec<f64> = ens.states().map(|s| s[0]).collect();
    assert!(ens.weights().iter().all(|w| (w - 1.0 / 4000.0).abs() < 1e-15));

    // plain Monte Carlo of the same signal
    let mut rng = stream(2);
    let plain: Vec<f64> = (0..4000)
        .map(|_| {
            let (x0, z0) = catalog.sample_initial(&mut rng);
            let p = simulate_multiscale(&model, &x0, &z0, steps as f64 * dt, dt, 1, &mut rng).unwrap();
            *p.slow_states.last().unwrap().first().unwrap()
        })
        .collect();
    let (a, sa) = mean_se(&xs);
    let (b, sb) = mean_se(&plain);
    assert!((a - b).abs() <= 3.0 * (sa * sa + sb * sb).sqrt(), "{a} vs {b}");
    let exact = 0.99f64.powi(steps as i32);
    assert!((a - exact).abs() <= 3.0 * sa, "{a} vs {exact}");

    let hmodel = catalog.analytic_homogenized().unwrap();
    let zero_h = HomogenizedModel::analytic(
        1,
        1,
        AnalyticAverages {
            drift: Arc::new(|x: &[f64], out: &mut Vec<f64>| out.push(-x[0])),
            diffsq: Arc::new(|_: &[f64], out: &mut Vec<f64>| out.push(1.0)),
            obs: Arc::new(|_: &[f64], out: &mut Vec<f64>| out.push(0.0)),
        },
    )
    .unwrap();
    let obs_noisy = simulate_observations(
        &simulate_multiscale(&model, &[1.0], &[0.0], steps as f64 * dt, dt, 1, &mut stream(3)).unwrap(),
        &model,
        &mut stream(4),
    )
    .unwrap();
    for h in [&hmodel, &zero_h] {
        let e = run_homogenized_filter_streaming(h, &obs_noisy, |n| catalog.sample_initial_slow(n), &cfg, &mut stream(5), |_, _| {})
            .unwrap();
        let xs: Vec<f64> = e.states().map(|s| s[0]).collect();
        let (m, s) = mean_se(&xs);
        assert!((m - exact).abs() <= 3.0 * s, "{m} vs {exact}");
    }
}

#[test]
fn frozen_homogenized_dynamics_keep_a_point_mass() {
    let frozen = HomogenizedModel::analytic(
        1,
        1,
        AnalyticAverages {
            drift: Arc::new(|_: &[f64], out: &mut Vec<f64>| out.push(0.0)),
            diffsq: Arc::new(|_: &[f64], out: &mut Vec<f64>| out.push(0.0)),
            obs: Arc::new(|x: &[f64], out: &mut Vec<f64>| out.push(x[0])),
        },
    )
    .unwrap();
    let obs = ObservationPath::new(vec![0.0, 0.1, 0.2, 0.3], vec![vec![0.4], vec![-2.0], vec![0.1]]).unwrap();
    let history = run_homogenized_filter(&frozen, &obs, |_| vec![1.5], &FilterConfig::new(32, 0.1), &mut stream(0)).unwrap();
    for ens in history {
        assert!(ens.states().all(|s| s[0] == 1.5));
    }
}

#[test]
fn grid_mismatch_names_both_steps() {
    let catalog = blind_linear();
    let model = catalog.build(1.0).unwrap();
    let obs = zero_obs(10, 0.02);
    let err = run_full_filter(&model, &obs, |n| catalog.sample_initial(n), &FilterConfig::new(8, 0.01), &mut stream(0)).unwrap_err();
    match err {
        Error::GridMismatch { obs_dt, filter_dt } => {
            assert_eq!((obs_dt, filter_dt), (0.02, 0.01));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn filters_are_deterministic_and_marginals_consistent() {
    let catalog = CatalogModel::new(Family::OuBenchmark(OuParams::default()), InitialLaw::default());
    let model = catalog.build(0.2).unwrap();
    let signal = simulate_multiscale(&model, &[0.0], &[0.0], 0.3, 0.01, 5, &mut stream(1)).unwrap();
    let obs = simulate_observations(&signal, &model, &mut stream(2)).unwrap();
    let cfg = FilterConfig::new(200, 0.01);
    let run = || run_full_filter(&model, &obs, |n| catalog.sample_initial(n), &cfg, &mut stream(3)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let last = a.last().unwrap();
    let marginal = marginal_x(last, 1).unwrap();
    assert_eq!(marginal.len(), last.len());
    let phi = |x: &[f64]| (-(x[0] - 0.3).powi(2)).exp();
    let direct: f64 = last.states().zip(last.weights()).map(|(s, w)| w * phi(&s[..1])).sum();
    assert_eq!(integrate(&marginal, phi), direct);
}

/// At small ε the homogenized filter tracks the full filter's posterior mean.
#[test]
fn homogenized_filter_tracks_full_filter_at_small_epsilon() {
    let catalog = CatalogModel::new(Family::OuBenchmark(OuParams::default()), InitialLaw::default());
    let model = catalog.build(0.01).unwrap();
    let hmodel = catalog.analytic_homogenized().unwrap();
    let (dt, horizon, reps) = (0.01, 0.5, 12);
    let mut rng = derived_stream(77, &[0]);
    let (x0, z0) = catalog.sample_initial(&mut rng);
    let signal = simulate_multiscale(&model, &x0, &z0, horizon, dt, 100, &mut rng).unwrap();
    let obs = simulate_observations(&signal, &model, &mut derived_stream(77, &[1])).unwrap();
    let cfg = FilterConfig::new(1000, dt);
    let steps = obs.times.len();
    let mut full = vec![Vec::new(); steps];
    let mut homog = vec![Vec::new(); steps];
    for r in 0..reps {
        run_full_filter_streaming(&model, &obs, |n| catalog.sample_initial(n), &cfg, &mut derived_stream(77, &[2, r]), |_, s| {
            full[s.step].push(s.mean[0])
        })
        .unwrap();
        run_homogenized_filter_streaming(&hmodel, &obs, |n| catalog.sample_initial_slow(n), &cfg, &mut derived_stream(77, &[3, r]), |_, s| {
            homog[s.step].push(s.mean[0])
        })
        .unwrap();
    }
    let mut gap = 0.0;
    let mut se = 0.0;
    for t in 0..steps {
        let (a, sa) = mean_se(&full[t]);
        let (b, sb) = mean_se(&homog[t]);
        gap += (a - b).abs();
        se += (sa * sa + sb * sb).sqrt();
    }
    assert!(gap <= 3.0 * se, "time-averaged gap {} vs combined se {}", gap / steps as f64, se / steps as f64);
}
