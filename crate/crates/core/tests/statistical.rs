use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sessml::data::Session;
use sessml::sampling::{sample_negatives, split_session};

/// Pearson statistic against a uniform expectation.
fn chi_square(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let e = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

/// Every cell within three binomial standard deviations of `n/cells`.
fn within_three_sigma(counts: &[usize]) -> bool {
    let n: usize = counts.iter().sum();
    let p = 1.0 / counts.len() as f64;
    let (mean, sd) = (n as f64 * p, (n as f64 * p * (1.0 - p)).sqrt());
    counts.iter().all(|&c| (c as f64 - mean).abs() <= 3.0 * sd)
}

#[test]
fn split_points_are_uniform() {
    let s = Session {
        session_id: "s".into(),
        items: vec![10, 11, 12, 13, 14],
        timestamps: vec![0, 1, 2, 3, 4],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let mut counts = [0usize; 4];
    for _ in 0..10_000 {
        let (prefix, positives) = split_session(&s, 8, &mut rng).unwrap();
        assert_eq!(prefix.len() + positives.len(), 5);
        counts[prefix.len() - 1] += 1;
    }
    // 3 degrees of freedom, p = 0.001
    let chi = chi_square(&counts);
    assert!(chi < 16.27, "chi² {chi} for {counts:?}");
    assert!(within_three_sigma(&counts), "{counts:?}");
}

#[test]
fn negatives_are_uniform_over_eligible_items() {
    let excluded = [0, 3, 7];
    let vocab = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(50_000);
    let mut counts = vec![0usize; vocab];
    for _ in 0..50_000 {
        for n in sample_negatives(&excluded, vocab, 1, &mut rng).unwrap() {
            counts[n] += 1;
        }
    }
    for &e in &excluded {
        assert_eq!(counts[e], 0);
    }
    let eligible: Vec<usize> = (0..vocab)
        .filter(|i| !excluded.contains(i))
        .map(|i| counts[i])
        .collect();
    // 16 degrees of freedom, p = 0.001
    let chi = chi_square(&eligible);
    assert!(chi < 39.25, "chi² {chi} for {eligible:?}");
    assert!(within_three_sigma(&eligible), "{eligible:?}");
}

#[test]
fn multi_draw_negatives_have_uniform_marginals() {
    // count 4 uses rejection sampling, count 10 of 12 eligible uses a
    // without-replacement shuffle; both must include every item equally often
    for (count, seed) in [(4usize, 1u64), (10, 2)] {
        let excluded = [1, 2];
        let vocab = 14;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = vec![0usize; vocab];
        for _ in 0..20_000 {
            for n in sample_negatives(&excluded, vocab, count, &mut rng).unwrap() {
                counts[n] += 1;
            }
        }
        let eligible: Vec<usize> = (0..vocab)
            .filter(|i| !excluded.contains(i))
            .map(|i| counts[i])
            .collect();
        let chi = chi_square(&eligible);
        // 11 degrees of freedom, p = 0.001; inclusion counts are less
        // dispersed than multinomial cells, so this is conservative
        assert!(chi < 31.26, "count {count}: chi² {chi} for {eligible:?}");
    }
}
