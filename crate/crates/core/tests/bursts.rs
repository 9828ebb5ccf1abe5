use meg_core::analysis::welch_psd;
use meg_core::bursts::*;
use meg_core::workbench::synth::markov_path;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_spd(e: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::<f64>::from_fn(e, e, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(e, e) * 0.3
}

fn toy_model(rng: &mut ChaCha8Rng) -> HmmModel {
    let p = rng.random_range(0.2..0.8);
    let stay = [rng.random_range(0.6..0.95), rng.random_range(0.6..0.95)];
    HmmModel {
        initial: vec![p, 1.0 - p],
        transition: vec![vec![stay[0], 1.0 - stay[0]], vec![1.0 - stay[1], stay[1]]],
        covariances: vec![random_spd(2, rng), random_spd(2, rng)],
    }
}

fn toy_data(rows: usize, rng: &mut ChaCha8Rng) -> TdeData {
    let values = (0..rows * 2).map(|_| StandardNormal.sample(rng)).collect();
    TdeData { rows, lags: vec![0, 1], values, offset: 0, channel: 0 }
}

/// Gaussian log density written out from the determinant and inverse.
fn log_density(cov: &DMatrix<f64>, x: &[f64]) -> f64 {
    let v = nalgebra::DVector::from_column_slice(x);
    let inv = cov.clone().try_inverse().unwrap();
    let q = (v.transpose() * inv * &v)[(0, 0)];
    -0.5 * (x.len() as f64 * (2.0 * std::f64::consts::PI).ln() + cov.determinant().ln() + q)
}

/// Log joint probability of every path, by enumeration.
fn enumerate_paths(model: &HmmModel, data: &TdeData) -> Vec<(Vec<usize>, f64)> {
    let t = data.rows;
    (0..1usize << t)
        .map(|bits| {
            let path: Vec<usize> = (0..t).map(|i| (bits >> i) & 1).collect();
            let mut lp = model.initial[path[0]].ln();
            for i in 0..t {
                if i > 0 {
                    lp += model.transition[path[i - 1]][path[i]].ln();
                }
                lp += log_density(&model.covariances[path[i]], data.row(i));
            }
            (path, lp)
        })
        .collect()
}

#[test]
fn posteriors_and_path_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let model = toy_model(&mut rng);
        let data = toy_data(8, &mut rng);
        let all = enumerate_paths(&model, &data);
        let max = all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = all.iter().map(|p| (p.1 - max).exp()).sum();
        let tc = infer_states(&model, &data).unwrap();
        assert!((tc.log_likelihood - (max + z.ln())).abs() < 1e-9);
        for t in 0..8 {
            let p1: f64 = all.iter().filter(|p| p.0[t] == 1).map(|p| (p.1 - max).exp()).sum::<f64>() / z;
            assert!((tc.probs[t * 2 + 1] - p1).abs() < 1e-10, "frame {t}: {} vs {p1}", tc.probs[t * 2 + 1]);
            assert_eq!(tc.path[t], usize::from(p1 > 0.5));
        }
        let best = all.iter().max_by(|a, b| a.1.partial_cmp(&b.1).unwrap()).unwrap();
        assert_eq!(viterbi(&model, &data).unwrap(), best.0);
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn hungarian_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 1..=4 {
        for _ in 0..50 {
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..2.0)).collect()).collect();
            let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>();
            let best = permutations(n).iter().map(|p| total(p)).fold(f64::INFINITY, f64::min);
            let got = hungarian(&cost);
            let mut seen = got.clone();
            seen.sort();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
            assert!((total(&got) - best).abs() < 1e-12);
        }
    }
}

#[test]
fn match_states_recovers_a_relabelling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reference: Vec<DMatrix<f64>> = (0..4).map(|_| random_spd(5, &mut rng)).collect();
    for perm in permutations(4) {
        // new state perm[i] is reference state i, with a small perturbation
        let mut new = vec![DMatrix::zeros(5, 5); 4];
        for (i, &j) in perm.iter().enumerate() {
            new[j] = &reference[i] * 1.5 + DMatrix::from_fn(5, 5, |_, _| rng.random_range(-0.01..0.01));
        }
        assert_eq!(match_states(&reference, &new).unwrap(), perm);
    }
    assert!(match_states(&reference, &reference[..3]).is_err());
}

#[test]
fn burst_stats_survive_relabel_and_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let path: Vec<usize> = (0..500).map(|t| (t / 7 + rng.random_range(0..2)) % 3).collect();
    let data = TdeData { rows: 500, lags: vec![0, 1, 2], values: (0..1500).map(|_| StandardNormal.sample(&mut rng)).collect(), offset: 0, channel: 0 };
    let covs: Vec<DMatrix<f64>> = (0..3).map(|_| random_spd(3, &mut rng)).collect();
    let relabel = [2, 0, 1];
    let relabelled: Vec<usize> = path.iter().map(|&k| relabel[k]).collect();
    let mut new_covs = vec![DMatrix::zeros(3, 3); 3];
    for (i, &j) in relabel.iter().enumerate() {
        new_covs[j] = covs[i].clone();
    }
    let perm = match_states(&covs, &new_covs).unwrap();
    assert_eq!(perm, relabel);
    let mut inverse = [0; 3];
    for (i, &j) in perm.iter().enumerate() {
        inverse[j] = i;
    }
    let restored: Vec<usize> = relabelled.iter().map(|&k| inverse[k]).collect();
    assert_eq!(burst_stats(&restored, 3, 250.0).unwrap(), burst_stats(&path, 3, 250.0).unwrap());
    assert_eq!(path_covariances(&data, &path, 3).len(), 3);
}

fn two_regime(n: usize, dwell: f64, seed: u64) -> (Vec<f32>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = 250.0;
    let mut on = false;
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let mut path = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    for t in 0..n {
        let noise: f64 = StandardNormal.sample(&mut rng);
        let tone = 3.0 * (std::f64::consts::TAU * 10.0 * t as f64 / fs + phase).sin();
        x.push((noise + if on { tone } else { 0.0 }) as f32);
        path.push(usize::from(on));
        if rng.random::<f64>() < 1.0 / dwell {
            on = !on;
        }
    }
    (x, path)
}

fn mean_lifetime(path: &[usize], state: usize) -> f64 {
    burst_stats(path, 2, 1.0).unwrap()[state].mean_lifetime_s.unwrap()
}

#[test]
fn recovers_two_regime_bursts() {
    let dwell = 200.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let on = markov_path(200_000, dwell, dwell, &mut rng);
    let x: Vec<f32> = on
        .iter()
        .enumerate()
        .map(|(t, &b)| {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let tone = if b { 4.0 * (std::f64::consts::TAU * 10.0 * t as f64 / 250.0).sin() } else { 0.0 };
            (noise + tone) as f32
        })
        .collect();
    let data = tde_embed(&standardise(&x), &default_lags(), 0).unwrap();
    let truth: Vec<usize> = on[data.offset..data.offset + data.rows].iter().map(|&b| usize::from(b)).collect();
    let fit = hmm_fit(&data, 2, 100, 1e-7, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    for w in fit.log_likelihood.windows(2) {
        assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "log-likelihood fell from {} to {}", w[0], w[1]);
    }
    let tc = infer_states(&fit.model, &data).unwrap();
    let perm = match_states(&path_covariances(&data, &truth, 2), &fit.model.covariances).unwrap();
    let mut inverse = [0; 2];
    for (i, &j) in perm.iter().enumerate() {
        inverse[j] = i;
    }
    let path: Vec<usize> = tc.path.iter().map(|&k| inverse[k]).collect();
    let acc = frame_accuracy(&path, &truth);
    assert!(acc > 0.9, "frame accuracy {acc}");
    let burst = mean_lifetime(&path, 1);
    assert!((burst - dwell).abs() < 0.1 * dwell, "burst lifetime {burst} vs expected {dwell}");
    eprintln!("background lifetime {:.1} vs expected {dwell}", mean_lifetime(&path, 0));
}

#[test]
fn log_likelihood_never_decreases() {
    for seed in 0..3 {
        let (x, _) = two_regime(4000, 50.0, 10 + seed);
        let data = tde_embed(&standardise(&x), &[-2, -1, 0, 1, 2], 0).unwrap();
        let fit = hmm_fit(&data, 3, 40, 0.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(fit.log_likelihood.len(), 41);
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
    }
}

#[test]
fn single_state_is_the_sample_second_moment() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = toy_data(300, &mut rng);
    let fit = hmm_fit(&data, 1, 5, 1e-9, &mut rng).unwrap();
    let mut m = DMatrix::<f64>::zeros(2, 2);
    for t in 0..300 {
        let r = data.row(t);
        for i in 0..2 {
            for j in 0..2 {
                m[(i, j)] += r[i] * r[j] / 300.0;
            }
        }
    }
    assert!((&fit.model.covariances[0] - m).abs().max() < 1e-12);
    assert_eq!(fit.model.transition, vec![vec![1.0]]);
    assert!(infer_states(&fit.model, &data).unwrap().path.iter().all(|&k| k == 0));
}

#[test]
fn state_psd_of_constant_path_is_plain_welch() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x: Vec<f32> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).map(|v: f64| v as f32).collect();
    let per_state = state_psd(&x, &vec![1; 2000], 2, 250.0, 2.0, 0.5).unwrap();
    assert!(per_state[0].is_none());
    let whole = welch_psd(&[&x], 250.0, 2.0, 0.5).unwrap();
    let one = per_state[1].as_ref().unwrap();
    assert_eq!(one.segments, whole.segments);
    for (a, b) in one.power[0].iter().zip(&whole.power[0]) {
        assert!((a - b).abs() <= 1e-12 * b.abs());
    }
}

#[test]
fn state_psd_separates_tone_segments() {
    let fs = 250.0;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut x = Vec::new();
    let mut path = Vec::new();
    for block in 0..20 {
        let on = block % 2;
        for t in 0..750 {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let tone = if on == 1 { 4.0 * (std::f64::consts::TAU * 20.0 * t as f64 / fs).sin() } else { 0.0 };
            x.push((0.3 * noise + tone) as f32);
            path.push(on);
        }
    }
    let psd = state_psd(&x, &path, 2, fs, 2.0, 0.5).unwrap();
    let on = psd[1].as_ref().unwrap();
    let off = psd[0].as_ref().unwrap();
    assert_eq!(on.peak_frequency(0), 20.0);
    let bin = on.freqs.iter().position(|&f| f == 20.0).unwrap();
    assert!(on.power[0][bin] > 100.0 * off.power[0][bin]);
    // 750-sample segments hold two 500-sample windows at 50% overlap
    assert_eq!(on.segments, 10 * 2);
    let short: Vec<usize> = (0..2000).map(|t| (t / 100) % 2).collect();
    assert!(state_psd(&x[..2000], &short, 2, fs, 2.0, 0.5).unwrap().iter().all(|p| p.is_none()));
}

proptest! {
    #[test]
    fn embedding_columns_are_shifted_copies(len in 20usize..80, lo in -5isize..=0, hi in 0isize..=5) {
        let x: Vec<f32> = (0..len).map(|i| (i as f32 * 0.37).sin()).collect();
        let lags: Vec<isize> = (lo..=hi).collect();
        let d = tde_embed(&x, &lags, 0).unwrap();
        prop_assert_eq!(d.rows, len - (hi - lo) as usize);
        for r in 0..d.rows {
            for (j, &l) in lags.iter().enumerate() {
                prop_assert_eq!(d.row(r)[j], x[(d.offset as isize + r as isize + l) as usize] as f64);
            }
        }
    }

    #[test]
    fn stats_cover_every_frame(path in proptest::collection::vec(0usize..3, 1..200)) {
        let st = burst_stats(&path, 3, 1.0).unwrap();
        let covered: f64 = st.iter().map(|s| s.activations as f64 * s.mean_lifetime_s.unwrap_or(0.0)).sum();
        prop_assert!((covered - path.len() as f64).abs() < 1e-9);
    }
}
