use expool::btd::{self, FitConfig};
use expool::ranking::PairwiseStats;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn naive_probs(a: f64, b: f64, nu: f64) -> (f64, f64, f64) {
    let ea = a.exp();
    let eb = b.exp();
    let et = 2.0 * nu * ((a + b) / 2.0).exp();
    let z = ea + eb + et;
    (ea / z, eb / z, et / z)
}

fn naive_log_likelihood(s: &PairwiseStats, theta: &[f64], nu: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..s.len() {
        for j in (i + 1)..s.len() {
            let (pw, pl, pt) = naive_probs(theta[i], theta[j], nu);
            if s.wins[i][j] > 0 {
                total += s.wins[i][j] as f64 * pw.ln();
            }
            if s.losses[i][j] > 0 {
                total += s.losses[i][j] as f64 * pl.ln();
            }
            if s.ties[i][j] > 0 {
                total += s.ties[i][j] as f64 * pt.ln();
            }
        }
    }
    total
}

fn sample_stats(theta: &[f64], nu: f64, per_pair: usize, rng: &mut ChaCha8Rng) -> PairwiseStats {
    let k = theta.len();
    let mut s = PairwiseStats::new((0..k).map(|i| format!("t{i}")).collect());
    for i in 0..k {
        for j in (i + 1)..k {
            let (pw, pl, _) = naive_probs(theta[i], theta[j], nu);
            for _ in 0..per_pair {
                let x: f64 = rng.random();
                let (a, b) = if x < pw {
                    (&mut s.wins, &mut s.losses)
                } else if x < pw + pl {
                    (&mut s.losses, &mut s.wins)
                } else {
                    s.ties[i][j] += 1;
                    s.ties[j][i] += 1;
                    continue;
                };
                a[i][j] += 1;
                b[j][i] += 1;
            }
        }
    }
    s
}

fn random_stats(k: usize, rng: &mut ChaCha8Rng) -> PairwiseStats {
    let mut s = PairwiseStats::new((0..k).map(|i| format!("t{i}")).collect());
    for i in 0..k {
        for j in (i + 1)..k {
            let (w, l, t) = (rng.random_range(0..12u64), rng.random_range(0..12u64), rng.random_range(0..6u64));
            s.wins[i][j] = w;
            s.losses[j][i] = w;
            s.losses[i][j] = l;
            s.wins[j][i] = l;
            s.ties[i][j] = t;
            s.ties[j][i] = t;
        }
    }
    s
}

#[test]
fn log_likelihood_matches_naive_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let k = rng.random_range(2..7);
        let s = random_stats(k, &mut rng);
        let theta: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let nu = rng.random_range(0.05..3.0);
        let fast = btd::log_likelihood(&s, &theta, nu).unwrap();
        let slow = naive_log_likelihood(&s, &theta, nu);
        assert!((fast - slow).abs() <= 1e-9 * (1.0 + slow.abs()), "{fast} vs {slow}");
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = 1e-5;
    for _ in 0..100 {
        let k = rng.random_range(2..6);
        let s = random_stats(k, &mut rng);
        let theta: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let nu = rng.random_range(0.2..2.0);
        let (g, g_nu) = btd::log_likelihood_gradient(&s, &theta, nu).unwrap();
        let close = |analytic: f64, numeric: f64| {
            (analytic - numeric).abs() <= 1e-5 * analytic.abs().max(numeric.abs()).max(1.0)
        };
        for i in 0..k {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (btd::log_likelihood(&s, &up, nu).unwrap() - btd::log_likelihood(&s, &down, nu).unwrap())
                / (2.0 * h);
            assert!(close(g[i], fd), "θ{i}: {} vs {fd}", g[i]);
        }
        let fd_nu = (btd::log_likelihood(&s, &theta, nu + h).unwrap()
            - btd::log_likelihood(&s, &theta, nu - h).unwrap())
            / (2.0 * h);
        assert!(close(g_nu, fd_nu), "ν: {g_nu} vs {fd_nu}");
    }
}

#[test]
fn recovers_ground_truth_abilities() {
    let truth = [1.0, 0.0, -1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let s = sample_stats(&truth, 0.5, 500, &mut rng);
    let f = btd::fit(&s, &FitConfig::default()).unwrap();
    assert!(f.converged);
    assert!(!f.separated);
    assert_eq!(btd::priority(&f).ordered(), &["t0", "t1", "t2"]);
    let worst = f.theta.iter().zip(truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 0.15, "max error {worst}, θ̂ = {:?}", f.theta);
    assert!((f.nu - 0.5).abs() < 0.15, "ν̂ = {}", f.nu);
    assert!(f.theta.iter().sum::<f64>().abs() < 1e-9);
}

#[test]
fn covariance_is_symmetric_psd() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let truth: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = sample_stats(&truth, 0.4, 25, &mut rng);
        let Ok(f) = btd::fit(&s, &FitConfig::default()) else { continue };
        let cov = nalgebra::DMatrix::from_fn(4, 4, |i, j| f.covariance.as_ref().unwrap()[i][j]);
        assert!((cov.clone() - cov.transpose()).abs().max() < 1e-12);
        let eig = cov.symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&e| e > -1e-9), "{:?}", eig.eigenvalues);
        assert!(f.log_likelihood.is_finite());
        assert!(f.nu >= 0.0);
    }
}

#[test]
fn near_equal_abilities_are_rarely_separated() {
    // Repeated sampling: with close true abilities and 25 records the Wald gate
    // should mostly refuse to declare a winner.
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let truth = [0.05, 0.0, -0.05];
    let mut rejected = 0;
    let trials = 200;
    for _ in 0..trials {
        let s = sample_stats(&truth, 0.5, 25, &mut rng);
        let f = btd::fit(&s, &FitConfig::default()).unwrap();
        if btd::needs_fine_grained(&f, 0.975).unwrap() {
            rejected += 1;
        }
    }
    assert!(rejected as f64 / trials as f64 > 0.8, "{rejected}/{trials}");
}

#[test]
fn two_candidate_priority_matches_summary() {
    use expool::ranking::{summarize, RecordComparison};
    use expool::types::{fidelity_metrics, MetricVector};
    let metrics = fidelity_metrics();
    let mv = |v: [f64; 4]| {
        MetricVector(metrics.iter().zip(v).map(|(m, x)| (m.name.clone(), x)).collect())
    };
    let scored = vec![("a".to_string(), mv([30.0, 0.9, 0.1, 0.1])), ("b".to_string(), mv([28.0, 0.8, 0.2, 0.2]))];
    let record = RecordComparison::compute(&metrics, &scored).unwrap();
    let mut stats = PairwiseStats::new(vec!["a".into(), "b".into()]);
    expool::ranking::accumulate(&mut stats, &record).unwrap();
    // Add a reversed round so the fit is finite.
    let reversed = vec![("a".to_string(), scored[1].1.clone()), ("b".to_string(), scored[0].1.clone())];
    expool::ranking::accumulate(&mut stats, &RecordComparison::compute(&metrics, &reversed).unwrap()).unwrap();
    expool::ranking::accumulate(&mut stats, &record).unwrap();
    let f = btd::fit(&stats, &FitConfig::default()).unwrap();
    let summary = summarize(&record).unwrap();
    assert_eq!(btd::priority(&f), summary.ranking);
}
