use everest::embedding::{add_positional, positional, tube_embed, EmbedWeights, TubeEmbedConfig};
use everest::numerics::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn frames(rng: &mut ChaCha8Rng, t: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::new(vec![t, c, h, w], (0..t * c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn changed(a: &everest::embedding::TokenGrid<f64>, b: &everest::embedding::TokenGrid<f64>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..a.tau {
        for j in 0..a.j {
            if a.token(i, j) != b.token(i, j) {
                out.push((i, j));
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn one_voxel_block_changes_one_token(seed in any::<u64>(), pick in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = TubeEmbedConfig { patch: 2, embed_dim: 5 };
        let w = EmbedWeights::<f64>::init(&cfg, 2, &mut rng);
        let x = frames(&mut rng, 6, 2, 4, 6);
        let base = tube_embed(&x, &w, &cfg).unwrap();
        let (i, py, px) = ((pick % 3) as usize, ((pick >> 8) % 2) as usize, ((pick >> 16) % 3) as usize);
        let mut data = x.data().to_vec();
        for dt in 0..2 {
            for ch in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (((2 * i + dt) * 2 + ch) * 4 + 2 * py + dy) * 6 + 2 * px + dx;
                        data[idx] += 0.5;
                    }
                }
            }
        }
        let moved = tube_embed(&Tensor::new(vec![6, 2, 4, 6], data).unwrap(), &w, &cfg).unwrap();
        prop_assert_eq!(changed(&base, &moved), vec![(i, py * 3 + px)]);
    }

    #[test]
    fn token_depends_on_its_pair_only(seed in any::<u64>(), frame in 0usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = TubeEmbedConfig { patch: 4, embed_dim: 3 };
        let w = EmbedWeights::<f64>::init(&cfg, 1, &mut rng);
        let x = frames(&mut rng, 8, 1, 8, 8);
        let mut data = x.data().to_vec();
        data[frame * 64..(frame + 1) * 64].iter_mut().for_each(|v| *v = -*v + 0.25);
        let a = tube_embed(&x, &w, &cfg).unwrap();
        let b = tube_embed(&Tensor::new(vec![8, 1, 8, 8], data).unwrap(), &w, &cfg).unwrap();
        let pairs: Vec<usize> = changed(&a, &b).into_iter().map(|(i, _)| i).collect();
        prop_assert!(!pairs.is_empty());
        prop_assert!(pairs.iter().all(|&i| i == frame / 2));
    }

    #[test]
    fn positional_subset_order_is_irrelevant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pe = positional::<f64>(3, 4, 6);
        let mut slots: Vec<usize> = (0..12).filter(|_| rng.random_bool(0.5)).collect();
        if slots.is_empty() {
            slots.push(0);
        }
        let tokens: Vec<Vec<f64>> = slots.iter().map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut perm: Vec<usize> = (0..slots.len()).collect();
        perm.reverse();
        perm.rotate_left(seed as usize % slots.len());
        let build = |order: &[usize]| {
            let rows: Vec<f64> = order.iter().flat_map(|&r| tokens[r].clone()).collect();
            let s: Vec<usize> = order.iter().map(|&r| slots[r]).collect();
            add_positional(&Tensor::matrix(order.len(), 6, rows).unwrap(), &pe, Some(&s)).unwrap()
        };
        let ident: Vec<usize> = (0..slots.len()).collect();
        let a = build(&ident);
        let b = build(&perm);
        for (pos, &r) in perm.iter().enumerate() {
            prop_assert_eq!(b.row(pos), a.row(r));
        }
    }
}

#[test]
fn paper_scale_kernel() {
    let cfg = TubeEmbedConfig { patch: 16, embed_dim: 768 };
    assert_eq!(cfg.grid(16, 224, 224).unwrap(), (8, 14, 14));
    assert_eq!(cfg.patch_dim(3), 2 * 3 * 16 * 16);
}
