use homfilter::averaging::{build_homogenized, estimate_stationary_average, GridAxis, Interpolation, StationaryAverager, TabulationGrid};
use homfilter::catalog::{CatalogModel, Family, InitialLaw, LinearParams, OuParams};
use homfilter::model::{simulate_frozen_fast, simulate_multiscale};
use homfilter::rng::{derived_stream, stream};

fn ou() -> CatalogModel {
    CatalogModel::new(Family::OuBenchmark(OuParams::default()), InitialLaw::default())
}

#[test]
fn halving_the_step_reduces_the_weak_error() {
    // dX = -X dt + dV from x0 = 2: E[X(1)] = 2/e, Euler mean (1 - dt)^n · 2
    let model = CatalogModel::new(Family::Linear(LinearParams::default()), InitialLaw::default())
        .build(1.0)
        .unwrap();
    let reps = 20_000;
    let exact = 2.0 * (-1.0f64).exp();
    let mut errors = Vec::new();
    for (k, dt) in [0.2, 0.1].into_iter().enumerate() {
        let mut rng = derived_stream(3, &[k as u64]);
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..reps {
            let p = simulate_multiscale(&model, &[2.0], &[0.0], 1.0, dt, 1, &mut rng).unwrap();
            let x = p.slow_states.last().unwrap()[0];
            sum += x;
            sum2 += x * x;
        }
        let mean = sum / reps as f64;
        let se = ((sum2 / reps as f64 - mean * mean) / reps as f64).sqrt();
        errors.push(((mean - exact).abs(), se));
    }
    let (coarse, s1) = errors[0];
    let (fine, s2) = errors[1];
    assert!(coarse - fine > 2.0 * (s1 * s1 + s2 * s2).sqrt(), "{errors:?}");
}

fn batch_moments(path: &[Vec<f64>], skip: usize, batches: usize) -> [(f64, f64); 2] {
    let data = &path[skip..];
    let len = data.len() / batches;
    let mut out = [(0.0, 0.0); 2];
    for (p, slot) in out.iter_mut().enumerate() {
        let means: Vec<f64> = (0..batches)
            .map(|b| data[b * len..(b + 1) * len].iter().map(|z| z[0].powi(p as i32 + 1)).sum::<f64>() / len as f64)
            .collect();
        let m = means.iter().sum::<f64>() / batches as f64;
        let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
        *slot = (m, (var / batches as f64).sqrt());
    }
    out
}

#[test]
fn frozen_fast_law_forgets_its_start() {
    let model = ou().build(1.0).unwrap();
    let x = [0.5];
    let mut stats = Vec::new();
    for (k, z0) in [-6.0, 6.0].into_iter().enumerate() {
        let path = simulate_frozen_fast(&model, &x, &[z0], 400.0, 0.01, &mut stream(40 + k as u64)).unwrap();
        stats.push(batch_moments(&path, 1000, 20));
    }
    for p in 0..2 {
        let (a, sa) = stats[0][p];
        let (b, sb) = stats[1][p];
        assert!((a - b).abs() <= 4.0 * (sa * sa + sb * sb).sqrt(), "moment {}: {a} vs {b}", p + 1);
    }
    // invariant law at frozen x is N(x, 1)
    for s in &stats {
        let (m, se) = s[0];
        assert!((m - 0.5).abs() <= 4.0 * se, "mean {m} ± {se}");
        let (m2, se2) = s[1];
        assert!((m2 - 1.25).abs() <= 4.0 * se2, "second moment {m2} ± {se2}");
    }
}

#[test]
fn averaging_error_shrinks_like_inverse_root_time() {
    let model = ou().build(1.0).unwrap();
    let theta = |_: &[f64], z: &[f64], out: &mut Vec<f64>| out.push(z[0]);
    let se = |horizon: f64| {
        let cfg = StationaryAverager {
            burn_in: 5.0,
            sample_horizon: horizon,
            dt: 0.01,
            replicates: 32,
        };
        estimate_stationary_average(&model, &[0.3], &theta, &cfg, &mut stream(11)).unwrap().std_error[0]
    };
    let ratio = se(405.0) / se(805.0);
    let expected = 2f64.sqrt();
    assert!(ratio > expected / 2.0 && ratio < expected * 2.0, "ratio {ratio}");
}

#[test]
fn tabulated_ou_averages_match_closed_form() {
    // b = -x + 0.5 z, σ² = 1 + z²: b̄ = -0.5 x, ā = 2 + x²
    let catalog = CatalogModel::new(
        Family::OuBenchmark(OuParams {
            kappa: 0.5,
            ..Default::default()
        }),
        InitialLaw::default(),
    );
    let model = catalog.build(1.0).unwrap();
    let grid = TabulationGrid::new(vec![GridAxis { lo: -1.0, hi: 1.0, count: 3 }], Interpolation::Multilinear).unwrap();
    let cfg = StationaryAverager {
        burn_in: 5.0,
        sample_horizon: 805.0,
        dt: 0.01,
        replicates: 16,
    };
    let h = build_homogenized(&model, &grid, &cfg, 5).unwrap();
    let table = h.table().unwrap();
    for (i, node) in table.nodes.iter().enumerate() {
        let x = grid.node_coords(i)[0];
        assert!((node.drift[0] + 0.5 * x).abs() <= 3.0 * node.drift_se[0], "b̄({x}) = {}", node.drift[0]);
        assert!((node.diffsq[0] - (2.0 + x * x)).abs() <= 3.0 * node.diffsq_se[0], "ā({x}) = {}", node.diffsq[0]);
        assert!((node.diff[0] * node.diff[0] - node.diffsq[0]).abs() <= 1e-8);
    }
}

#[test]
fn constant_diffusion_tabulates_exactly() {
    let catalog = CatalogModel::new(Family::Linear(LinearParams::default()), InitialLaw::default());
    let model = catalog.build(1.0).unwrap();
    let grid = TabulationGrid::new(vec![GridAxis { lo: -2.0, hi: 2.0, count: 5 }], Interpolation::Nearest).unwrap();
    let cfg = StationaryAverager {
        burn_in: 1.0,
        sample_horizon: 11.0,
        dt: 0.01,
        replicates: 4,
    };
    let h = build_homogenized(&model, &grid, &cfg, 1).unwrap();
    for (i, node) in h.table().unwrap().nodes.iter().enumerate() {
        let x = grid.node_coords(i)[0];
        assert_eq!(node.diffsq, vec![1.0]);
        assert_eq!(node.diff, vec![1.0]);
        assert_eq!(node.diffsq_se, vec![0.0]);
        assert_eq!(node.drift, vec![-x]);
        assert_eq!(node.obs, vec![x]);
    }
}
