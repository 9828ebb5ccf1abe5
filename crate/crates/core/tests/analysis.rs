use meg_core::analysis::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn sine(freq: f64, fs: f64, n: usize, amp: f64) -> Vec<f32> {
    (0..n).map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin()) as f32).collect()
}

fn noise(n: usize, sd: f64, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, sd).unwrap();
    (0..n).map(|_| d.sample(&mut rng) as f32).collect()
}

fn random_feats(n: usize, f: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..f).map(|_| rng.random::<f64>()).collect()).collect()
}

#[test]
fn tone_peaks_at_its_frequency() {
    let x = sine(10.0, 250.0, 250 * 20, 1.0);
    let psd = welch_psd(&[&x], 250.0, 2.0, 0.5).unwrap();
    assert_eq!(psd.window_len, 500);
    assert_eq!(psd.resolution(), 0.5);
    assert_eq!(psd.peak_frequency(0), 10.0);
    assert!(psd.freqs.windows(2).all(|w| w[1] > w[0]));
    assert_eq!(*psd.freqs.last().unwrap(), 125.0);
}

#[test]
fn white_noise_psd_integrates_to_variance() {
    let x = noise(250 * 120, 1.0, 1);
    let psd = welch_psd(&[&x], 250.0, 2.0, 0.5).unwrap();
    let integral: f64 = psd.power[0].iter().sum::<f64>() * psd.resolution();
    let var = {
        let m = x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
        x.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / x.len() as f64
    };
    assert!((integral / var - 1.0).abs() < 0.1, "integral {integral}, variance {var}");
    assert!(psd.power[0].iter().all(|&p| p >= 0.0));
}

#[test]
fn constant_signal_power_stays_at_zero_frequency() {
    let x = vec![2.0f32; 1000];
    let psd = welch_psd(&[&x], 100.0, 2.0, 0.5).unwrap();
    let p = &psd.power[0];
    assert_eq!(psd.peak_frequency(0), 0.0);
    // the Hann main lobe reaches the first bin; nothing beyond it
    assert!(p[2..].iter().all(|&v| v < 1e-20 * p[0]));
    let integral: f64 = p.iter().sum::<f64>() * psd.resolution();
    assert!((integral - 4.0).abs() < 1e-9);
}

#[test]
fn window_longer_than_series_is_an_input_error() {
    let x = vec![0.0f32; 100];
    assert!(matches!(welch_psd(&[&x], 100.0, 2.0, 0.5), Err(meg_core::Error::Input(_))));
}

fn flat_psd(channels: usize, nf: usize) -> Psd {
    Psd {
        freqs: (0..nf).map(|i| i as f64 * 0.5).collect(),
        power: vec![vec![3.0; nf]; channels],
        fs: (nf - 1) as f64,
        window_len: 2 * (nf - 1),
        overlap_len: nf - 1,
        window: "hann",
        segments: 1,
    }
}

#[test]
fn band_maps() {
    let maps = band_power_maps(&flat_psd(2, 251), &CANONICAL_BANDS).unwrap();
    assert!(maps.relative.iter().flatten().all(|&r| (r - 1.0).abs() < 1e-12));

    let tone = sine(10.0, 250.0, 250 * 20, 1.0);
    let quiet = noise(250 * 20, 0.01, 2);
    let psd = welch_psd(&[&quiet, &tone], 250.0, 2.0, 0.5).unwrap();
    let maps = band_power_maps(&psd, &CANONICAL_BANDS).unwrap();
    let alpha = 2;
    for b in 0..5 {
        if b != alpha {
            assert!(maps.relative[alpha][1] > maps.relative[b][1]);
        }
    }
    // contrast sits on the tone channel
    let spread = |c: usize| maps.relative.iter().map(|b| b[c]).fold(0.0, f64::max);
    assert!(spread(1) > 4.0 && spread(0) < 2.0, "{:?}", maps.relative);
    assert!(matches!(band_power_maps(&psd, &[(10.1, 10.2)]), Err(meg_core::Error::Parameter(_))));
    assert!(matches!(band_power_maps(&psd, &[]), Err(meg_core::Error::Parameter(_))));
}

#[test]
fn psd_fingerprint_shapes() {
    let mut psd = flat_psd(8, 64);
    psd.power[3][10] = 9.0;
    let sp = fingerprint_from_psd(&psd, &FingerprintKind::Spatial, 0.0, 1e9).unwrap();
    assert_eq!(sp.len(), 8);
    assert!((sp[3] - (3.0 * 63.0 + 9.0) / 64.0).abs() < 1e-12);
    let sc = fingerprint_from_psd(&psd, &FingerprintKind::Spectral, 0.0, 1e9).unwrap();
    assert_eq!(sc.len(), 64);
    assert!((sc[10] - (3.0 * 7.0 + 9.0) / 8.0).abs() < 1e-12);
    let both = fingerprint_from_psd(&psd, &FingerprintKind::SpatialSpectral, 0.0, 1e9).unwrap();
    assert_eq!(both.len(), 512);
    assert_eq!(both[3 * 64 + 10], 9.0);
}

#[test]
fn tde_covariance_matches_a_direct_loop() {
    let x: Vec<f32> = vec![1.0, 2.0, 4.0, 3.0, 5.0, 0.0, 2.0];
    let got = tde_covariance(&[vec![&x]], &[-1, 0, 1]).unwrap();
    assert_eq!(got.len(), 6);
    let rows: Vec<[f64; 3]> = (1..x.len() - 1).map(|t| [x[t - 1] as f64, x[t] as f64, x[t + 1] as f64]).collect();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut want = Vec::new();
    for i in 0..3 {
        for j in i..3 {
            want.push(rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n - 1.0));
        }
    }
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn tde_of_white_noise_is_near_identity() {
    let x = noise(40_000, 1.0, 3);
    let lags: Vec<isize> = (-2..=2).collect();
    let cov = tde_covariance(&[vec![&x]], &lags).unwrap();
    let t = (x.len() - 4) as f64;
    let mut k = 0;
    for i in 0..5 {
        for j in i..5 {
            if i == j {
                assert!((cov[k] - 1.0).abs() < 0.05);
            } else {
                assert!(cov[k].abs() < 3.0 / t.sqrt(), "({i},{j}) = {}", cov[k]);
            }
            k += 1;
        }
    }
}

#[test]
fn identification_of_identical_and_shuffled_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 10;
    let real = random_feats(n, 30, &mut rng);
    assert_eq!(topk_identify(&real, &real, 1).unwrap(), 1.0);
    let d = correlation_distance(&real, &real);
    assert!((0..n).all(|i| d[i][i].abs() < 1e-12));
    // average over random shuffles approaches chance
    let reps = 3000;
    let mut total = 0.0;
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..reps {
        perm.shuffle(&mut rng);
        let gen: Vec<Vec<f64>> = perm.iter().map(|&i| real[i].clone()).collect();
        total += topk_identify(&real, &gen, 1).unwrap();
    }
    let mean = total / reps as f64;
    // fixed points of a random permutation: mean 1/n, variance of the count is 1
    let sd = 1.0 / n as f64 / (reps as f64).sqrt();
    assert!((mean - 0.1).abs() < 4.0 * sd, "{mean}");
    assert_eq!(topk_identify(&real, &real.iter().rev().cloned().collect::<Vec<_>>(), n).unwrap(), 1.0);
}

#[test]
fn constant_feature_gets_maximal_distance() {
    let real = vec![vec![1.0, 2.0, 3.0], vec![1.0, 1.0, 1.0]];
    let d = correlation_distance(&real, &real);
    assert_eq!(d[1][1], 2.0);
    assert_eq!(d[0][1], 2.0);
}

/// Independent re-implementation: explicit matrices and index loops.
fn brute_consistency(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn corr(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(p, q)| (p - mx) * (q - my)).sum();
        let vx: f64 = x.iter().map(|p| (p - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|q| (q - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }
    let n = a.len();
    let mut u = Vec::new();
    let mut v = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if j > i {
                u.push(corr(&a[i], &a[j]));
                v.push(corr(&b[i], &b[j]));
            }
        }
    }
    corr(&u, &v)
}

#[test]
fn consistency_score_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let real = random_feats(8, 20, &mut rng);
    assert!((consistency_score(&real, &real).unwrap().unwrap() - 1.0).abs() < 1e-12);
    let derangement = [1, 2, 3, 4, 5, 6, 7, 0];
    let gen: Vec<Vec<f64>> = derangement.iter().map(|&i| real[i].clone()).collect();
    let s = consistency_score(&real, &gen).unwrap().unwrap();
    assert!((s - brute_consistency(&real, &gen)).abs() < 1e-12);
    assert!((s - consistency_score(&gen, &real).unwrap().unwrap()).abs() < 1e-15);
    let other = random_feats(8, 20, &mut rng);
    let s2 = consistency_score(&real, &other).unwrap().unwrap();
    assert!((s2 - brute_consistency(&real, &other)).abs() < 1e-12);
    assert!(consistency_score(&real[..2], &real[..2]).is_err());
}

#[test]
fn independent_features_score_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let real = random_feats(50, 40, &mut rng);
    let gen = random_feats(50, 40, &mut rng);
    assert!(consistency_score(&real, &gen).unwrap().unwrap().abs() < 0.3);
}

#[test]
fn self_match_is_significant() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let real = random_feats(20, 30, &mut rng);
    let p = permutation_pvalue(&real, &real, 1000, &mut rng).unwrap();
    assert!(p <= 0.01, "{p}");
    assert!(p > 0.0);
    assert!(matches!(permutation_pvalue(&real, &real, 0, &mut rng), Err(meg_core::Error::Parameter(_))));
    let small = permutation_pvalue(&real[..6], &real[..6], 1000, &mut rng).unwrap();
    assert!(small >= p);
}

#[test]
fn null_p_values_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ps: Vec<f64> = (0..200)
        .map(|_| {
            let real = random_feats(10, 15, &mut rng);
            let gen = random_feats(10, 15, &mut rng);
            permutation_pvalue(&real, &gen, 199, &mut rng).unwrap()
        })
        .collect();
    let (d, p) = ks_uniform(&ps);
    assert!(p > 0.01, "KS D = {d}, p = {p}");
}

#[test]
fn ks_detects_a_skewed_sample() {
    let skewed: Vec<f64> = (0..200).map(|i| (i as f64 / 200.0).powi(3)).collect();
    assert!(ks_uniform(&skewed).1 < 1e-6);
    let even: Vec<f64> = (0..200).map(|i| (i as f64 + 0.5) / 200.0).collect();
    assert!(ks_uniform(&even).1 > 0.99);
}
