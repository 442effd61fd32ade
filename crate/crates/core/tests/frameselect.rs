mod common;

use common::inclusion_by_enumeration;
use everest::embedding::{EmbedWeights, TubeEmbedConfig};
use everest::frameselect::{expand_candidates, sample_pairs, select_informative, FrameSelectSettings, PairWeights};
use everest::rero::MetricKind;
use everest::videodata::{gen_moving_square, sample_uniform, ChannelNorm, MotionMask, SquareSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 100_000;

fn inclusion(counts: &[usize], tau: usize, smoothing: bool) -> Vec<f64> {
    let w = PairWeights { counts: counts.to_vec() };
    let mut hits = vec![0usize; counts.len()];
    for seed in 0..TRIALS {
        for p in sample_pairs(&w, tau, seed, smoothing).unwrap().pairs {
            hits[p] += 1;
        }
    }
    hits.iter().map(|&h| h as f64 / TRIALS as f64).collect()
}

#[test]
fn four_candidates_two_draws_match_enumeration() {
    let exact = inclusion_by_enumeration(&[3.0, 1.0, 1.0, 1.0], 2);
    assert!((exact.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    let seen = inclusion(&[3, 1, 1, 1], 2, false);
    for (a, b) in seen.iter().zip(&exact) {
        assert!((a - b).abs() < 0.01, "{seen:?} vs {exact:?}");
    }
}

#[test]
fn equal_weights_are_uniform_over_subsets() {
    let w = PairWeights { counts: vec![2; 6] };
    let mut freq = std::collections::HashMap::new();
    for seed in 0..TRIALS {
        *freq.entry(sample_pairs(&w, 3, seed, false).unwrap().pairs).or_insert(0usize) += 1;
    }
    assert_eq!(freq.len(), 20);
    let p = 1.0 / 20.0;
    let sigma = (p * (1.0 - p) / TRIALS as f64).sqrt();
    for (subset, n) in freq {
        let f = n as f64 / TRIALS as f64;
        assert!((f - p).abs() <= 3.0 * sigma, "{subset:?}: {f}");
    }
}

#[test]
fn first_draw_marginal() {
    let counts = [4, 0, 2, 9, 1];
    let seen = inclusion(&counts, 1, true);
    let total: f64 = counts.iter().map(|&c| c as f64 + 1.0).sum();
    for (i, &f) in seen.iter().enumerate() {
        let p = (counts[i] as f64 + 1.0) / total;
        assert!((f - p).abs() <= 3.0 * (p * (1.0 - p) / TRIALS as f64).sqrt(), "pair {i}");
    }
}

#[test]
fn raising_a_count_never_lowers_its_inclusion() {
    let mut last = 0.0;
    for c0 in [0, 1, 3, 8, 20] {
        let f = inclusion(&[c0, 4, 4, 4, 4, 4], 3, true)[0];
        assert!(f >= last, "count {c0}: {f} < {last}");
        last = f;
    }
}

#[test]
fn alpha_one_is_uniform_sampling() {
    let (src, _) = gen_moving_square(&SquareSpec::new(16, 16, 40, 4, (1, 1), 2)).unwrap();
    let cfg = TubeEmbedConfig { patch: 4, embed_dim: 8 };
    let w = EmbedWeights::<f32>::init(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(0));
    for (seed, stride, start) in [(0, 1, 0), (1, 2, 3), (9, 4, 5), (77, 1, 20)] {
        let settings = FrameSelectSettings { tau: 4, alpha: 1.0, stride, rho_pre: 0.3, metric: MetricKind::L2, smoothing: true };
        let (clip, record) = select_informative(&src, &settings, start, &w, 4, &ChannelNorm::imagenet(), seed).unwrap();
        assert_eq!(clip, sample_uniform(&src, 8, stride, start).unwrap());
        assert_eq!(record.selected_pairs, vec![0, 1, 2, 3]);
    }
}

#[test]
fn counts_peak_where_motion_is_largest() {
    let (src, _) = gen_moving_square(&SquareSpec::new(32, 32, 20, 6, (1, 0), 8)).unwrap();
    // pairs 0-2 static, pair 3 jumps twice, pairs 4-5 static again
    let clip = src.select_frames(&[2, 2, 2, 2, 2, 2, 6, 10, 10, 10, 10, 10]).unwrap();
    let motion = MotionMask::from_frames(&clip);
    let moved_patches = |i: usize| -> usize {
        let pair = i.max(1);
        (0..64).filter(|&j| (2 * pair - 1..=2 * pair + 1).any(|t| motion.patch_moved(t, j / 8, j % 8, 4))).count()
    };
    let oracle: Vec<usize> = (0..6).map(moved_patches).collect();
    let peak = (0..6).max_by_key(|&i| (oracle[i], std::cmp::Reverse(i))).unwrap();
    let cfg = TubeEmbedConfig { patch: 4, embed_dim: 24 };
    let w = EmbedWeights::<f32>::init(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(1));
    let settings = FrameSelectSettings { tau: 3, alpha: 2.0, stride: 1, rho_pre: 0.05, metric: MetricKind::L2, smoothing: false };
    let (_, record) = select_informative(&clip, &settings, 0, &w, 4, &ChannelNorm::imagenet(), 0).unwrap();
    let top = (0..6).max_by_key(|&i| (record.counts[i], std::cmp::Reverse(i))).unwrap();
    assert_eq!(top, peak, "counts {:?}, moved patches {oracle:?}", record.counts);
    assert!(oracle[0] == 0 && oracle[1] == 0 && oracle[5] == 0);
}

#[test]
fn paper_geometry_candidates() {
    let (src, _) = gen_moving_square(&SquareSpec::new(8, 8, 40, 2, (1, 0), 0)).unwrap();
    let c = expand_candidates(&src, 8, 1.5, 1, 0).unwrap();
    assert_eq!((c.clip.t_frames, c.pair_count), (24, 12));
}
