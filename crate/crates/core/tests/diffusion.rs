use differ::diffusion::{
    generate, posterior, q_from_start, q_step, reverse_step, sample_categorical, timestep_embedding, CategoricalSeq,
    DiffusionError, NoiseSchedule,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Single-step transition matrix: `m[i][j] = q(next = j | prev = i)`.
fn step_matrix(beta: f64, k: usize) -> Vec<Vec<f64>> {
    (0..k).map(|i| (0..k).map(|j| beta / k as f64 + if i == j { 1.0 - beta } else { 0.0 }).collect()).collect()
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = a.len();
    (0..k).map(|i| (0..k).map(|j| (0..k).map(|m| a[i][m] * b[m][j]).sum()).collect()).collect()
}

fn identity(k: usize) -> Vec<Vec<f64>> {
    (0..k).map(|i| (0..k).map(|j| f64::from(u8::from(i == j))).collect()).collect()
}

/// Product of the step matrices for steps `1..=t`.
fn chain(betas: &[f64], t: usize, k: usize) -> Vec<Vec<f64>> {
    betas[..t].iter().fold(identity(k), |acc, &b| matmul(&acc, &step_matrix(b, k)))
}

fn random_betas(rng: &mut ChaCha8Rng, t: usize) -> Vec<f64> {
    (0..t).map(|_| rng.gen_range(1e-3..=1.0)).collect()
}

#[test]
fn posterior_matches_bayes_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 2..=4 {
        for big_t in 2..=5 {
            for _ in 0..20 {
                let betas = random_betas(&mut rng, big_t);
                let sched = NoiseSchedule::from_betas(betas.clone()).unwrap();
                for t in 1..=big_t {
                    let prior = chain(&betas, t - 1, k);
                    let step = step_matrix(betas[t - 1], k);
                    for a in 0..k {
                        for j in 0..k {
                            // q(y_{t-1} = i | y_t = j, y0 = a) ∝ q(y_t = j | i) q(i | a)
                            let joint: Vec<f64> = (0..k).map(|i| step[i][j] * prior[a][i]).collect();
                            let z: f64 = joint.iter().sum();
                            let y_t = CategoricalSeq::one_hot(&[j as u32], k).unwrap();
                            let y0 = CategoricalSeq::one_hot(&[a as u32], k).unwrap();
                            let got = posterior(&y_t, &y0, t, &sched).unwrap();
                            for i in 0..k {
                                assert!((got.probs()[i] - joint[i] / z).abs() < 1e-12, "K={k} T={big_t} t={t}");
                            }
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn two_step_example_matches_bayes() {
    let sched = NoiseSchedule::from_betas(vec![0.2, 0.4]).unwrap();
    let y0 = CategoricalSeq::one_hot(&[0], 2).unwrap();
    let y2 = CategoricalSeq::one_hot(&[1], 2).unwrap();
    // q(y1|y0=0) = [0.9, 0.1]; q(y2=1|y1) = [0.2, 0.8]
    let joint = [0.9 * 0.2, 0.1 * 0.8];
    let z = joint[0] + joint[1];
    let got = posterior(&y2, &y0, 2, &sched).unwrap();
    assert!((got.probs()[0] - joint[0] / z).abs() < 1e-12);
    assert!((got.probs()[1] - joint[1] / z).abs() < 1e-12);
}

#[test]
fn composed_steps_equal_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 2..=5 {
        for _ in 0..20 {
            let betas = random_betas(&mut rng, 10);
            let sched = NoiseSchedule::from_betas(betas.clone()).unwrap();
            for a in 0..k {
                let y0 = CategoricalSeq::one_hot(&[a as u32], k).unwrap();
                let mut y = y0.clone();
                for t in 1..=10 {
                    y = q_step(&y, t, &sched).unwrap();
                    let closed = q_from_start(&y0, t, &sched).unwrap();
                    let oracle = &chain(&betas, t, k)[a];
                    for c in 0..k {
                        assert!((y.probs()[c] - closed.probs()[c]).abs() < 1e-12);
                        assert!((closed.probs()[c] - oracle[c]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}

#[test]
fn cosine_schedule_values() {
    let s = NoiseSchedule::cosine(200).unwrap();
    assert_eq!(s.alpha_bar(0), 1.0);
    let f = |t: f64| (((t / 200.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let mid = f(100.0) / f(0.0);
    assert!((s.alpha_bar(100) - mid).abs() < 1e-12);
    assert!((s.alpha_bar(100) - 0.494).abs() < 1e-3);
    assert!(s.alpha_bar(200) < 1e-3);
    for t in 1..=200 {
        assert!(s.beta(t) > 0.0 && s.beta(t) <= 0.999);
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
    let y0 = CategoricalSeq::one_hot(&[3, 0, 7], 10).unwrap();
    let q = q_from_start(&y0, 200, &s).unwrap();
    for pos in 0..3 {
        let tv: f64 = q.column(pos).iter().map(|p| (p - 0.1).abs()).sum::<f64>() / 2.0;
        assert!(tv < 1e-3);
    }
}

/// Inverse-CDF reference sampler.
fn inverse_cdf(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Critical values of χ² at α = 0.01 for 1..=7 degrees of freedom.
const CHI2_01: [f64; 7] = [6.635, 9.210, 11.345, 13.277, 15.086, 16.812, 18.475];

/// Two-sample homogeneity statistic.
fn chi2_two_sample(a: &[usize], b: &[usize]) -> f64 {
    let (na, nb) = (a.iter().sum::<usize>() as f64, b.iter().sum::<usize>() as f64);
    let mut stat = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let pooled = (x + y) as f64 / (na + nb);
        if pooled == 0.0 {
            continue;
        }
        let (ea, eb) = (pooled * na, pooled * nb);
        stat += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    stat
}

#[test]
fn gumbel_sampler_agrees_with_inverse_cdf() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut dists: Vec<Vec<f64>> = vec![vec![0.7, 0.2, 0.1]];
    while dists.len() < 10 {
        let k = rng.gen_range(2..=8);
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = raw.iter().sum();
        dists.push(raw.iter().map(|x| x / z).collect());
    }
    for p in &dists {
        let k = p.len();
        let n = 100_000;
        let dist = CategoricalSeq::from_probs(k, p.repeat(n)).unwrap();
        let draws = sample_categorical(&dist, &mut rng).unwrap().argmax();
        let mut gumbel = vec![0usize; k];
        for d in draws {
            gumbel[d as usize] += 1;
        }
        let mut oracle = vec![0usize; k];
        for _ in 0..n {
            oracle[inverse_cdf(p, rng.gen())] += 1;
        }
        let stat = chi2_two_sample(&gumbel, &oracle);
        assert!(stat < CHI2_01[k - 2], "χ²={stat} for {p:?}");
    }
}

#[test]
fn uniform_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let draws = sample_categorical(&CategoricalSeq::uniform(4, 100_000), &mut rng).unwrap().argmax();
    let mut counts = [0usize; 4];
    for d in draws {
        counts[d as usize] += 1;
    }
    for c in counts {
        assert!((c as f64 / 100_000.0 - 0.25).abs() < 0.01);
    }
}

#[test]
fn one_hot_input_samples_itself() {
    let y = CategoricalSeq::one_hot(&[2, 0, 1], 3).unwrap();
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        assert_eq!(sample_categorical(&y, &mut rng).unwrap().argmax(), vec![2, 0, 1]);
    }
}

#[test]
fn reverse_step_frequencies_match_posterior() {
    let sched = NoiseSchedule::from_betas(vec![0.3, 0.5, 0.2]).unwrap();
    let k = 3;
    let y_t = CategoricalSeq::one_hot(&[1], k).unwrap();
    let pred = CategoricalSeq::from_probs(k, vec![0.6, 0.1, 0.3]).unwrap();
    let den = |_: &CategoricalSeq, _: usize| Ok::<_, DiffusionError>(pred.clone());
    let want = posterior(&y_t, &pred, 3, &sched).unwrap();
    let mut counts = [0usize; 3];
    for seed in 0..50_000 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (prev, _) = reverse_step(&y_t, 3, &sched, &den, &mut rng).unwrap();
        counts[prev.argmax()[0] as usize] += 1;
    }
    for c in 0..k {
        assert!((counts[c] as f64 / 50_000.0 - want.probs()[c]).abs() < 0.01);
    }
}

#[test]
fn reverse_step_with_exact_prediction_at_first_step() {
    let sched = NoiseSchedule::cosine(5).unwrap();
    let y0 = CategoricalSeq::one_hot(&[4, 1, 1], 6).unwrap();
    let y_t = CategoricalSeq::one_hot(&[0, 2, 5], 6).unwrap();
    let den = |_: &CategoricalSeq, _: usize| Ok::<_, DiffusionError>(y0.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(reverse_step(&y_t, 1, &sched, &den, &mut rng).unwrap().0, y0);
}

#[test]
fn noiseless_step_keeps_the_current_token() {
    // β_t → 0 and ᾱ_{t−1} = 0: the posterior collapses onto y_t.
    let sched = NoiseSchedule::from_betas(vec![1.0, 1e-300]).unwrap();
    let y_t = CategoricalSeq::one_hot(&[2, 0], 3).unwrap();
    let den = |y: &CategoricalSeq, _: usize| Ok::<_, DiffusionError>(CategoricalSeq::uniform(3, y.len()));
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        assert_eq!(reverse_step(&y_t, 2, &sched, &den, &mut rng).unwrap().0.argmax(), vec![2, 0]);
    }
}

#[test]
fn reverse_step_rejects_wrong_shape() {
    let sched = NoiseSchedule::cosine(5).unwrap();
    let y_t = CategoricalSeq::one_hot(&[0, 1], 4).unwrap();
    let den = |_: &CategoricalSeq, _: usize| Ok::<_, DiffusionError>(CategoricalSeq::uniform(4, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(reverse_step(&y_t, 2, &sched, &den, &mut rng), Err(DiffusionError::Contract(_))));
}

#[test]
fn generate_with_fixed_prediction_returns_it() {
    let target = [5u32, 7, 4, 9];
    for steps in [1, 7, 50] {
        let sched = NoiseSchedule::cosine(steps).unwrap();
        let den = |y: &CategoricalSeq, _: usize| {
            assert_eq!(y.len(), 4);
            CategoricalSeq::one_hot(&target, 10)
        };
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(generate(10, 4, 8, &sched, &den, &mut rng).unwrap(), target);
        }
    }
}

#[test]
fn generate_strips_trailing_pad_and_checks_length() {
    let sched = NoiseSchedule::cosine(4).unwrap();
    let den = |_: &CategoricalSeq, _: usize| CategoricalSeq::one_hot(&[6, 0, 6, 0, 0], 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    assert_eq!(generate(8, 5, 5, &sched, &den, &mut rng).unwrap(), vec![6, 0, 6]);
    assert!(generate(8, 6, 5, &sched, &den, &mut rng).is_err());
    assert!(generate(8, 0, 5, &sched, &den, &mut rng).is_err());
}

#[test]
fn generate_is_deterministic_given_seed() {
    let sched = NoiseSchedule::cosine(10).unwrap();
    let den = |y: &CategoricalSeq, _: usize| {
        // Soft, input-dependent prediction so the outcome depends on the noise.
        let mut probs = Vec::new();
        for pos in 0..y.len() {
            let col = y.column(pos);
            probs.extend(col.iter().map(|p| 0.5 * p + 0.5 / col.len() as f64));
        }
        CategoricalSeq::from_probs(y.k(), probs)
    };
    let run = |seed| generate(6, 6, 6, &sched, &den, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(run(3), run(3));
}

#[test]
fn embedding_is_bounded() {
    for t in [0.0, 1.0, 17.0, 999.0] {
        assert!(timestep_embedding(t, 32).unwrap().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

proptest! {
    #[test]
    fn distance_to_uniform_shrinks_with_t(seed in any::<u64>(), k in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sched = NoiseSchedule::from_betas(random_betas(&mut rng, 12)).unwrap();
        let y0 = CategoricalSeq::one_hot(&[0], k).unwrap();
        let mut last = f64::INFINITY;
        for t in 1..=12 {
            let q = q_from_start(&y0, t, &sched).unwrap();
            let tv: f64 = q.probs().iter().map(|p| (p - 1.0 / k as f64).abs()).sum::<f64>() / 2.0;
            prop_assert!(tv <= last + 1e-15);
            last = tv;
        }
    }

    #[test]
    fn outputs_are_column_stochastic(seed in any::<u64>(), k in 2usize..8, len in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sched = NoiseSchedule::from_betas(random_betas(&mut rng, 6)).unwrap();
        let toks: Vec<u32> = (0..len).map(|_| rng.gen_range(0..k as u32)).collect();
        let y0 = CategoricalSeq::one_hot(&toks, k).unwrap();
        let t = rng.gen_range(1..=6);
        let raw: Vec<f64> = (0..k * len).map(|_| rng.gen_range(0.01..1.0)).collect();
        let soft: Vec<f64> = raw.chunks(k).flat_map(|c| { let z: f64 = c.iter().sum(); c.iter().map(move |x| x / z) }).collect();
        let pred = CategoricalSeq::from_probs(k, soft).unwrap();
        for d in [q_step(&y0, t, &sched).unwrap(), q_from_start(&y0, t, &sched).unwrap(), posterior(&y0, &pred, t, &sched).unwrap()] {
            prop_assert!(CategoricalSeq::from_probs(k, d.probs().to_vec()).is_ok());
        }
    }
}
