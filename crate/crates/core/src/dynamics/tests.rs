use std::f64::consts::TAU;

use super::solvers::*;
use super::*;

fn spec(system: &str) -> SystemSpec {
    SystemSpec::preset(system).unwrap()
}

#[test]
fn heat_single_mode_matches_analytic_decay() {
    let s = SystemSpec {
        grid: vec![32, 32],
        domain_length: 1.0,
        kappa: 0.01,
        dt: 0.01,
        substeps: 1,
        t_steps: 101,
        ..spec("heat2d")
    };
    let (ny, nx) = (32, 32);
    let u0: Vec<f64> = (0..ny * nx).map(|p| (TAU * (p % nx) as f64 / nx as f64).sin()).collect();
    let frames = run_heat2d(&s, &u0);
    let k2 = TAU * TAU;
    let norm0: f64 = u0.iter().map(|v| v * v).sum();
    for t in 1..s.t_steps {
        let f = &frames[t * ny * nx..(t + 1) * ny * nx];
        let amp = f.iter().zip(&u0).map(|(a, b)| a * b).sum::<f64>() / norm0;
        let exact = (-s.kappa * k2 * t as f64 * s.dt).exp();
        assert!((amp / exact - 1.0).abs() < 0.01, "step {t}: {amp} vs {exact}");
    }
}

#[test]
fn heat_null_space_and_zero_diffusivity() {
    let mut s = spec("heat2d");
    s.t_steps = 5;
    let c = vec![2.5; 32 * 32];
    let frames = run_heat2d(&s, &c);
    assert!(frames.iter().all(|&v| v == 2.5));
    s.kappa = 0.0;
    let mut ds = generate(&SystemSpec { n_trajectories: 2, ..s }, None).unwrap();
    let f0 = ds.frame(0, 0).to_vec();
    for t in 1..5 {
        assert_eq!(ds.frame(0, t), &f0[..]);
    }
    ds = generate(&SystemSpec { n_trajectories: 2, ..spec("heat2d") }, None).unwrap();
    assert_ne!(ds.frame(0, 0), ds.frame(0, 1));
}

#[test]
fn heat_refuses_unstable_step() {
    let s = SystemSpec { dt: 0.5, ..spec("heat2d") };
    let Err(err) = s.validate() else { panic!("unstable spec accepted") };
    let msg = err.to_string();
    assert!(matches!(err, DataError::Unstable { .. }));
    assert!(msg.contains("0.25") && msg.contains("kappa*dt/dx^2"), "{msg}");
}

#[test]
fn burgers_conserves_spatial_mean() {
    let s = spec("burgers1d");
    let n = s.grid[0];
    let u0: Vec<f64> = (0..n).map(|i| 0.3 + (TAU * i as f64 / n as f64).sin()).collect();
    let frames = run_burgers(&s, &u0, 8).unwrap();
    let mean = |t: usize| frames[t * n..(t + 1) * n].iter().sum::<f64>() / n as f64;
    let steps = 8 * (s.t_steps - 1);
    let drift = (mean(s.t_steps - 1) - mean(0)).abs();
    assert!(drift / (steps as f64) < 1e-10, "{drift}");
    for t in 1..s.t_steps {
        assert!((mean(t) - mean(t - 1)).abs() < 8e-10);
    }
}

#[test]
fn burgers_strong_viscosity_decays_like_heat() {
    let n = 128;
    let s = SystemSpec {
        nu: 1.0,
        dt: 0.05,
        t_steps: 21,
        ..spec("burgers1d")
    };
    let amp = 0.05;
    let u0: Vec<f64> = (0..n).map(|i| amp * (TAU * i as f64 / n as f64).sin()).collect();
    let frames = run_burgers(&s, &u0, 200).unwrap();
    let last = &frames[(s.t_steps - 1) * n..];
    let t = (s.t_steps - 1) as f64 * s.dt;
    let (mut c, mut sn) = (0.0, 0.0);
    for (i, v) in last.iter().enumerate() {
        let x = TAU * i as f64 / n as f64;
        c += v * x.cos();
        sn += v * x.sin();
    }
    let modulus = 2.0 * (c * c + sn * sn).sqrt() / n as f64;
    let exact = amp * (-s.nu * t).exp();
    assert!((modulus / exact - 1.0).abs() < 0.02, "{modulus} vs {exact}");
    let dev = last.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(dev < amp * 0.5);
}

fn max_gradient(frame: &[f64], dx: f64) -> f64 {
    let n = frame.len();
    (0..n).map(|i| ((frame[(i + 1) % n] - frame[i]) / dx).abs()).fold(0.0, f64::max)
}

#[test]
fn burgers_sine_steepens_before_saturation() {
    // shock time for u0 = sin x is t = 1; check growth up to t = 0.8
    for n in [128usize, 256] {
        let s = SystemSpec {
            grid: vec![n],
            nu: 0.005,
            dt: 0.1,
            t_steps: 9,
            ..spec("burgers1d")
        };
        let u0: Vec<f64> = (0..n).map(|i| (TAU * i as f64 / n as f64).sin()).collect();
        let frames = run_burgers(&s, &u0, 40).unwrap();
        let dx = TAU / n as f64;
        let g: Vec<f64> = (0..s.t_steps).map(|t| max_gradient(&frames[t * n..(t + 1) * n], dx)).collect();
        for w in g.windows(2) {
            assert!(w[1] > w[0], "n={n}: {g:?}");
        }
        assert!(g[8] > 3.0 * g[0]);
    }
}

#[test]
fn burgers_refines_substeps_on_cfl_violation() {
    let s = SystemSpec {
        substeps: 1,
        nu: 0.0,
        dt: 0.2,
        ic_amplitude: 3.0,
        n_trajectories: 2,
        t_steps: 10,
        ..spec("burgers1d")
    };
    let n = s.grid[0];
    assert!(run_burgers(&s, &vec![3.0; n], 1).is_none());
    let ds = generate(&s, None).unwrap();
    assert_eq!(ds.n_trajectories(), 2);
}

#[test]
fn lorenz_zero_forcing_fixed_point() {
    let mut x = vec![0.0; 40];
    let mut w = Rk4Work::new(40);
    assert!(integrate_lorenz96(&mut x, 5.0, 0.01, 0.0, &mut w));
    assert!(x.iter().all(|&v| v == 0.0));
}

#[test]
fn lorenz_twin_runs_separate() {
    let s = spec("lorenz96");
    let mut w = Rk4Work::new(40);
    let mut a: Vec<f64> = (0..40).map(|i| 8.0 + 0.5 * (i as f64 * 0.37).sin()).collect();
    integrate_lorenz96(&mut a, 10.0, 0.01, s.forcing, &mut w);
    let mut b = a.clone();
    b[7] += 1e-8;
    let d0 = 1e-8;
    let mut grew = false;
    for _ in 0..500 {
        rk4_step(&mut a, 0.01, 8.0, &mut w);
        rk4_step(&mut b, 0.01, 8.0, &mut w);
        let d = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        if d >= 10.0 * d0 {
            grew = true;
            break;
        }
    }
    assert!(grew);
}

#[test]
fn lorenz_rk4_is_fourth_order() {
    let x0: Vec<f64> = (0..40).map(|i| 8.0 + (i as f64 * 1.3).cos()).collect();
    let mut w = Rk4Work::new(40);
    let run = |h: f64, w: &mut Rk4Work| {
        let mut x = x0.clone();
        integrate_lorenz96(&mut x, 0.4, h, 8.0, w);
        x
    };
    let reference = run(1e-4, &mut w);
    let err = |x: Vec<f64>| x.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let e1 = err(run(0.02, &mut w));
    let e2 = err(run(0.01, &mut w));
    let ratio = e1 / e2;
    assert!((14.0..18.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn generation_is_thread_count_invariant() {
    let s = SystemSpec {
        n_trajectories: 12,
        t_steps: 20,
        seed: 3,
        ..spec("lorenz96")
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| generate(&s, None).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    let c = generate(&SystemSpec { seed: 4, ..s.clone() }, None).unwrap();
    assert_ne!(a.states(), c.states());
}

#[test]
fn splits_are_disjoint_and_cover() {
    for n in [1usize, 7, 10, 64, 101] {
        let sp = SplitIndices::new(n, 11);
        assert_eq!(sp.train.len(), n * 8 / 10);
        assert_eq!(sp.val.len(), n / 10);
        let mut all: Vec<usize> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
    assert_ne!(SplitIndices::new(50, 1), SplitIndices::new(50, 2));
}

fn small_dataset() -> TrajectoryDataset {
    generate(
        &SystemSpec {
            n_trajectories: 20,
            t_steps: 15,
            seed: 9,
            ..spec("lorenz96")
        },
        Some("abc".into()),
    )
    .unwrap()
}

#[test]
fn normalized_train_split_is_standardised() {
    let ds = small_dataset();
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut count = 0.0;
    for &i in &ds.splits().train {
        for t in 0..ds.t_steps() {
            for v in ds.normalized_frame(i, t) {
                sum += v;
                sq += v * v;
                count += 1.0;
            }
        }
    }
    let mean = sum / count;
    let std = (sq / count - mean * mean).sqrt();
    assert!(mean.abs() < 1e-6, "{mean}");
    assert!((std - 1.0).abs() < 1e-6, "{std}");
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let ds = small_dataset();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    ds.write(&path).unwrap();
    let back = TrajectoryDataset::read(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.config_hash(), "abc");
    let again = back.to_bytes().unwrap();
    assert_eq!(again, std::fs::read(&path).unwrap());
    let recomputed = back.compute_stats();
    for c in 0..ds.channels() {
        assert!((recomputed.mean[c] - back.stats().mean[c]).abs() < 1e-6);
        assert!((recomputed.std[c] - back.stats().std[c]).abs() < 1e-6);
    }
}

#[test]
fn corrupted_files_are_rejected() {
    let bytes = small_dataset().to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(TrajectoryDataset::from_bytes(&bad), Err(DataError::Format(m)) if m.contains("magic")));
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(matches!(TrajectoryDataset::from_bytes(&bad), Err(DataError::Format(m)) if m.contains("version")));
    let mut bad = bytes.clone();
    bad[17] = b'#';
    assert!(matches!(TrajectoryDataset::from_bytes(&bad), Err(DataError::Format(m)) if m.contains("header")));
    let cut = &bytes[..bytes.len() - 3];
    assert!(matches!(TrajectoryDataset::from_bytes(cut), Err(DataError::Format(m)) if m.contains("truncated")));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(TrajectoryDataset::from_bytes(&long), Err(DataError::Format(m)) if m.contains("trailing")));
}

#[test]
fn non_finite_states_are_refused() {
    let ds = small_dataset();
    let mut states = ds.states().to_vec();
    states[ds.frame_len() * 16 + 3] = f32::NAN;
    let err = TrajectoryDataset::new(ds.spec().clone(), 1, vec![40], 20, 15, states, "x".into()).unwrap_err();
    assert!(matches!(err, DataError::NonFinite { trajectory: 1, step: 1 }));
}

#[test]
fn unknown_system_and_bad_grid() {
    assert!(matches!(SystemSpec::preset("navier"), Err(DataError::UnknownSystem(_))));
    let s = SystemSpec { grid: vec![8, 8], ..spec("lorenz96") };
    assert!(matches!(s.validate(), Err(DataError::InvalidSpec(_))));
    assert_eq!(systems().names(), vec!["heat2d", "burgers1d", "lorenz96"]);
}
