use meg_core::baselines::*;
use meg_core::data::{Recording, SignalSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Direct AR(2) recursion with unit Gaussian noise.
fn ar2_series(a: [f64; 2], n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut x = vec![0.0f64; n + 200];
    for t in 2..x.len() {
        x[t] = a[0] * x[t - 1] + a[1] * x[t - 2] + noise.sample(&mut rng);
    }
    x[200..].iter().map(|&v| v as f32).collect()
}

fn lag1(x: &[f64]) -> f64 {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let v: f64 = x.iter().map(|a| (a - m) * (a - m)).sum();
    let c: f64 = x.windows(2).map(|w| (w[0] - m) * (w[1] - m)).sum();
    c / v
}

#[test]
fn recovers_ar2_coefficients() {
    let x = ar2_series([0.5, -0.25], 100_000, 1);
    let fit = fit_ar(&x, 2).unwrap();
    assert!((fit.coeffs[0] - 0.5).abs() < 0.02, "{fit:?}");
    assert!((fit.coeffs[1] + 0.25).abs() < 0.02, "{fit:?}");
    assert!((fit.noise_std - 1.0).abs() < 0.02);
}

#[test]
fn white_noise_gives_near_zero_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let n = 20_000;
    let x: Vec<f32> = (0..n).map(|_| noise.sample(&mut rng) as f32).collect();
    let fit = fit_ar(&x, 10).unwrap();
    let bound = 3.0 / (n as f64).sqrt();
    assert!(fit.coeffs.iter().all(|a| a.abs() < bound), "{fit:?}");
}

#[test]
fn generated_ar2_matches_yule_walker_lag_one() {
    let ch = ArChannel { coeffs: vec![0.5, -0.25], noise_std: 1.0 };
    let x = simulate_ar(&ch, 100_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let rho1 = 0.5 / (1.0 + 0.25);
    assert!((lag1(&x) - rho1).abs() < 0.03, "lag-1 {}", lag1(&x));
}

#[test]
fn generate_then_fit_round_trip() {
    let ch = ArChannel { coeffs: vec![0.5, -0.25], noise_std: 0.7 };
    let x: Vec<f32> = simulate_ar(&ch, 100_000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap().iter().map(|&v| v as f32).collect();
    let fit = fit_ar(&x, 2).unwrap();
    for (a, b) in fit.coeffs.iter().zip(&ch.coeffs) {
        assert!((a - b).abs() < 0.02);
    }
}

#[test]
fn white_noise_generation_has_unit_variance() {
    let ch = ArChannel { coeffs: vec![0.0; 3], noise_std: 1.0 };
    let n = 50_000;
    let x = simulate_ar(&ch, n, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let m = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "{var}");
    assert!(lag1(&x).abs() < 3.0 / (n as f64).sqrt());
}

#[test]
fn set_fit_and_generation_are_reproducible() {
    let recs = (0..2)
        .map(|s| Recording::from_channels(s, 0, &[ar2_series([0.5, -0.25], 5000, 10 + s as u64), ar2_series([1.2, -0.5], 5000, 20 + s as u64)]).unwrap())
        .collect();
    let set = SignalSet::new(250.0, recs);
    let model = fit_ar_set(&set, 4).unwrap();
    assert_eq!(model.channels.len(), 2);
    assert!((model.channels[1].coeffs[0] - 1.2).abs() < 0.05);
    let a = generate_ar(&model, 300, 0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let b = generate_ar(&model, 300, 0, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.channels, a.samples), (2, 300));
    assert_eq!(DEFAULT_ORDER, 80);
}
