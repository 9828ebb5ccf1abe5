use meg_core::analysis::binomial_upper_tail;
use meg_core::data::{Event, EventTable};
use meg_core::decoding::*;
use meg_core::workbench::{synth_dataset, SynthSpec, TaskProfile};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn blobs(n: usize, f: usize, classes: usize, spread: f64, seed: u64) -> (Features, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f64>> = (0..classes).map(|_| (0..f).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let mut values = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = i % classes;
        for j in 0..f {
            let e: f64 = StandardNormal.sample(&mut rng);
            values.push(centres[c][j] + spread * e);
        }
        y.push(c as u8);
    }
    (Features::new(n, f, values).unwrap(), y)
}

/// Damped Newton on the same objective written independently with dense
/// matrices; features are standardised here as well.
fn newton_objective(x: &Features, y: &[u8], k: usize, lambda: f64) -> f64 {
    let (n, f) = (x.rows, x.cols);
    let mean: Vec<f64> = (0..f).map(|j| (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64).collect();
    let sd: Vec<f64> = (0..f)
        .map(|j| ((0..n).map(|i| (x.row(i)[j] - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt())
        .collect();
    // design with a trailing constant column
    let a = DMatrix::from_fn(n, f + 1, |i, j| if j == f { 1.0 } else { (x.row(i)[j] - mean[j]) / sd[j] });
    let dim = (f + 1) * k;
    let idx = |j: usize, c: usize| c * (f + 1) + j;
    let value = |th: &DVector<f64>| -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let z: Vec<f64> = (0..k).map(|c| (0..=f).map(|j| a[(i, j)] * th[idx(j, c)]).sum()).collect();
            let m = z.iter().copied().fold(f64::MIN, f64::max);
            total += m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - z[y[i] as usize];
        }
        total + 0.5 * lambda * (0..f).flat_map(|j| (0..k).map(move |c| (j, c))).map(|(j, c)| th[idx(j, c)].powi(2)).sum::<f64>()
    };
    let mut th = DVector::<f64>::zeros(dim);
    for _ in 0..100 {
        let mut g = DVector::<f64>::zeros(dim);
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..n {
            let z: Vec<f64> = (0..k).map(|c| (0..=f).map(|j| a[(i, j)] * th[idx(j, c)]).sum()).collect();
            let m = z.iter().copied().fold(f64::MIN, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|v| v / s).collect();
            for c in 0..k {
                let r = p[c] - f64::from(u8::from(y[i] as usize == c));
                for j in 0..=f {
                    g[idx(j, c)] += r * a[(i, j)];
                }
                for d in 0..k {
                    let w = p[c] * (f64::from(u8::from(c == d)) - p[d]);
                    for j in 0..=f {
                        for l in 0..=f {
                            h[(idx(j, c), idx(l, d))] += w * a[(i, j)] * a[(i, l)];
                        }
                    }
                }
            }
        }
        for j in 0..f {
            for c in 0..k {
                g[idx(j, c)] += lambda * th[idx(j, c)];
                h[(idx(j, c), idx(j, c))] += lambda;
            }
        }
        // the softmax Hessian is singular along the all-classes direction
        for d in 0..dim {
            h[(d, d)] += 1e-10;
        }
        let step = h.lu().solve(&g).unwrap();
        let f0 = value(&th);
        let mut t = 1.0;
        while value(&(&th - &step * t)) > f0 && t > 1e-12 {
            t *= 0.5;
        }
        th -= &step * t;
        if g.amax() < 1e-12 {
            break;
        }
    }
    value(&th)
}

#[test]
fn matches_independent_newton_solver() {
    for (k, lambda, seed) in [(4, 1.0, 1), (3, 0.1, 2), (2, 5.0, 3)] {
        let (x, y) = blobs(100, 5, k, 1.5, seed);
        let clf = train_classifier(&x, &y, &ClassifierConfig { lambda, max_iter: 2000, tol: 1e-9 }).unwrap();
        assert_eq!(clf.classes, k);
        assert!(clf.converged);
        let ours = *clf.objective.last().unwrap();
        let oracle = newton_objective(&x, &y, clf.classes, lambda);
        assert!((ours - oracle).abs() < 1e-6, "k={k}: {ours} vs {oracle}");
    }
}

#[test]
fn objective_is_monotone() {
    let (x, y) = blobs(200, 8, 4, 1.0, 4);
    let clf = train_classifier(&x, &y, &ClassifierConfig::default()).unwrap();
    for w in clf.objective.windows(2) {
        assert!(w[1] <= w[0]);
    }
}

#[test]
fn objective_gradient_matches_differences() {
    let (x, y) = blobs(30, 3, 4, 1.0, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let theta: Vec<f64> = (0..16).map(|_| rng.random_range(-0.5..0.5)).collect();
    let (_, g) = objective(&theta, &x, &y, 4, 0.7);
    for i in 0..theta.len() {
        let mut p = theta.clone();
        let mut m = theta.clone();
        p[i] += 1e-6;
        m[i] -= 1e-6;
        let fd = (objective(&p, &x, &y, 4, 0.7).0 - objective(&m, &x, &y, 4, 0.7).0) / 2e-6;
        assert!((fd - g[i]).abs() < 1e-5 * g[i].abs().max(1.0));
    }
}

#[test]
fn separable_two_class_set_is_fit_exactly() {
    let values: Vec<f64> = (0..40).map(|i| if i < 20 { -1.0 - i as f64 * 0.1 } else { 1.0 + i as f64 * 0.1 }).collect();
    let y: Vec<u8> = (0..40).map(|i| u8::from(i >= 20)).collect();
    let x = Features::new(40, 1, values).unwrap();
    let clf = train_classifier(&x, &y, &ClassifierConfig::default()).unwrap();
    let groups = vec![(0, 0); 40];
    let ev = evaluate(&clf, &x, &y, &groups).unwrap();
    assert_eq!(ev.accuracy, 1.0);
    assert_eq!(ev.confusion[0][0] + ev.confusion[1][1], 40);
}

#[test]
fn huge_penalty_predicts_class_priors() {
    let (x, mut y) = blobs(100, 4, 2, 1.0, 7);
    for l in y.iter_mut().take(50) {
        *l = 2;
    }
    let clf = train_classifier(&x, &y, &ClassifierConfig { lambda: 1e9, ..ClassifierConfig::default() }).unwrap();
    assert!(clf.weights.iter().all(|w| w.abs() < 1e-6));
    let p = clf.predict_proba(&x).unwrap();
    let prior = |c: u8| y.iter().filter(|&&l| l == c).count() as f64 / 100.0;
    for c in 0..3u8 {
        assert!((p[c as usize] - prior(c)).abs() < 1e-4, "class {c}: {} vs {}", p[c as usize], prior(c));
    }
    // a constant predictor fills one confusion column
    let ev = evaluate(&clf, &x, &y, &vec![(0, 0); 100]).unwrap();
    let nonzero: Vec<usize> = (0..4).filter(|&c| (0..4).any(|t| ev.confusion[t][c] > 0)).collect();
    assert_eq!(nonzero.len(), 1);
    assert_eq!(ev.accuracy, (0..3).map(prior).fold(0.0, f64::max));
}

#[test]
fn bad_inputs() {
    let (x, y) = blobs(10, 2, 2, 1.0, 8);
    let mut bad = x.clone();
    bad.values[3] = f64::NAN;
    assert!(matches!(train_classifier(&bad, &y, &ClassifierConfig::default()), Err(meg_core::Error::Input(_))));
    assert!(train_classifier(&x, &[0; 10], &ClassifierConfig::default()).is_err());
    let clf = train_classifier(&x, &y, &ClassifierConfig::default()).unwrap();
    let wide = Features::new(10, 3, vec![0.0; 30]).unwrap();
    assert!(matches!(evaluate(&clf, &wide, &y, &vec![(0, 0); 10]), Err(meg_core::Error::Dimension(_))));
}

fn groups(subjects: usize, sessions: usize, trials: usize) -> Vec<(usize, usize)> {
    (0..subjects).flat_map(|s| (0..sessions).flat_map(move |e| std::iter::repeat_n((s, e), trials))).collect()
}

#[test]
fn published_split_shape() {
    let g = groups(19, 6, 3);
    let within = split_protocol(&g, SplitMode::WithinSubject, 18).unwrap();
    let new = split_protocol(&g, SplitMode::NewSubject, 18).unwrap();
    assert_eq!(within.train, new.train);
    for &i in &within.train {
        assert!(g[i].0 < 18 && g[i].1 < 5);
    }
    assert_eq!(within.train.len(), 18 * 5 * 3);
    assert!(within.test.iter().all(|&i| g[i].0 < 18 && g[i].1 == 5));
    assert_eq!(within.test.len(), 18 * 3);
    assert!(new.test.iter().all(|&i| g[i].0 == 18));
    assert_eq!(new.test.len(), 6 * 3);
    for s in [&within, &new] {
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).chain(&s.unused).copied().collect();
        all.sort();
        assert_eq!(all, (0..g.len()).collect::<Vec<_>>());
    }
}

#[test]
fn rotation_holds_out_every_subject() {
    let g = groups(4, 3, 2);
    let splits = rotate_new_subject(&g).unwrap();
    assert_eq!(splits.len(), 4);
    for (s, split) in splits.iter().enumerate() {
        assert!(split.test.iter().all(|&i| g[i].0 == s));
        assert!(split.train.iter().all(|&i| g[i].0 != s));
    }
}

#[test]
fn split_errors() {
    assert!(matches!(split_protocol(&groups(1, 6, 2), SplitMode::NewSubject, 0), Err(meg_core::Error::Config(_))));
    assert!(matches!(split_protocol(&groups(3, 1, 2), SplitMode::WithinSubject, 2), Err(meg_core::Error::Config(_))));
    assert!(matches!(split_protocol(&groups(3, 2, 2), SplitMode::WithinSubject, 7), Err(meg_core::Error::Config(_))));
}

#[test]
fn test_trials_never_touch_standardisation() {
    let (x, y) = blobs(120, 6, 4, 1.0, 9);
    let g = groups(4, 3, 10);
    let split = split_protocol(&g, SplitMode::NewSubject, 3).unwrap();
    let (clf, _) = run_split(&x, &y, &g, &split, &ClassifierConfig::default()).unwrap();
    let mut poisoned = x.clone();
    for &i in &split.test {
        for j in 0..x.cols {
            poisoned.values[i * x.cols + j] = 1e6 * (j + 1) as f64;
        }
    }
    let (clf2, _) = run_split(&poisoned, &y, &g, &split, &ClassifierConfig::default()).unwrap();
    assert_eq!(clf.scaler, clf2.scaler);
    assert_eq!(clf.weights, clf2.weights);
}

fn task_spec() -> SynthSpec {
    SynthSpec {
        subjects: 3,
        sessions: 2,
        channels: 4,
        duration_s: 60.0,
        task: Some(TaskProfile { classes: 4, trials_per_session: 80, evoked_amplitude: 2.0, trial_s: 0.5 }),
        seed: 11,
        ..SynthSpec::default()
    }
}

#[test]
fn evoked_classes_differ_and_decode_above_chance() {
    let out = synth_dataset(&task_spec()).unwrap();
    let ep = epoch(&out.signals, &out.events, 100).unwrap();
    assert_eq!(ep.dropped, 0);
    assert_eq!(ep.trials(), 3 * 2 * 80);
    // Welch t at the class-0 peak latency (80 ms) on channel 0, class 0 vs class 2
    let pick = |c: u8| -> Vec<f64> { (0..ep.trials()).filter(|&i| ep.labels[i] == c).map(|i| ep.trial(i)[20] as f64).collect() };
    let (a, b) = (pick(0), pick(2));
    let mv = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64)
    };
    let ((ma, va), (mb, vb)) = (mv(&a), mv(&b));
    let t = (ma - mb) / (va / a.len() as f64 + vb / b.len() as f64).sqrt();
    assert!(t.abs() > 2.6, "t = {t}");

    let x = baseline_features(&ep);
    assert_eq!(x.cols, 4 * 100);
    let g = ep.groups();
    let split = split_protocol(&g, SplitMode::WithinSubject, 2).unwrap();
    let (_, ev) = run_split(&x, &ep.labels, &g, &split, &ClassifierConfig::default()).unwrap();
    let n = split.test.len();
    let hits = (ev.accuracy * n as f64).round() as usize;
    let p = binomial_upper_tail(hits, n, 0.25);
    assert!(p < 0.01, "accuracy {} over {n} trials, p = {p}", ev.accuracy);
    assert_eq!(ev.confusion.len(), 4);
    assert_eq!(ev.sessions.len(), 2);
}

#[test]
fn token_epochs_follow_signal_epochs() {
    use meg_core::data::{TokenCorpus, TokenRecording};
    let rec = TokenRecording::new(0, 0, 2, 30, (0..60).map(|i| i as u16).collect()).unwrap();
    let corpus = TokenCorpus { k_star: 60, recordings: vec![rec] };
    let events = EventTable { events: vec![Event { session: 0, subject: 0, onset: 3, label: 1 }, Event { session: 0, subject: 0, onset: 26, label: 0 }] };
    let t = epoch_tokens(&corpus, &events, 5).unwrap();
    assert_eq!(t.len(), 1);
    assert_eq!(t[0].labels, vec![3, 4, 5, 6, 7, 33, 34, 35, 36, 37]);
}

proptest! {
    #[test]
    fn flattening_is_lossless(trials in 1usize..5, channels in 1usize..4, window in 1usize..6, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..trials * channels * window).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ep = Epochs { channels, window, data: data.clone(), labels: vec![0; trials], subjects: vec![0; trials], sessions: vec![0; trials], dropped: 0 };
        let f = baseline_features(&ep);
        prop_assert_eq!(f.cols, channels * window);
        let back: Vec<f32> = f.values.iter().map(|&v| v as f32).collect();
        prop_assert_eq!(back, data);
    }
}
