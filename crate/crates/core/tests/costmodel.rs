use everest::costmodel::{activation_memory, block_flops, compare, finetune_flops, pretrain_flops, reduction_pct, ArchSpec, Comparison, Phase};

/// Every matrix product of one block as (rows, inner, cols).
fn block_products(n: u128, d: u128, r: u128) -> Vec<(u128, u128, u128)> {
    vec![
        (n, d, d), // q
        (n, d, d), // k
        (n, d, d), // v
        (n, d, n), // scores
        (n, n, d), // weighted values
        (n, d, d), // output projection
        (n, d, r * d),
        (n, r * d, d),
    ]
}

#[test]
fn vit_b_block_matches_product_audit() {
    let audit: u128 = block_products(1568, 768, 4).iter().map(|&(m, k, n)| 2 * m * k * n).sum();
    let model = block_flops(1568, 768, 12, 4);
    assert!((model as f64 / audit as f64 - 1.0).abs() < 0.01);
}

#[test]
fn reduction_falls_as_decoder_grows() {
    for arch in ArchSpec::all() {
        let base = pretrain_flops(&arch, 0.1, 1.0);
        let mut last = f64::INFINITY;
        for step in 1..=10 {
            let frac = step as f64 / 10.0;
            let r = reduction_pct(pretrain_flops(&arch, 0.1, frac), base);
            assert!(r < last, "{} at {frac}", arch.name);
            last = r;
        }
        assert_eq!(last, 0.0);
    }
}

#[test]
fn memory_shrinks_with_the_decoder_sequence() {
    let arch = ArchSpec::vit_b();
    assert!(activation_memory(&arch, 8, 0.1, 0.3, 4) < activation_memory(&arch, 8, 0.1, 1.0, 4));
}

#[test]
fn vit_s_pretrain_reduction_near_published() {
    let rows = compare(&ArchSpec::vit_s(), &Comparison::default());
    let ours = rows.iter().find(|r| r.method == "everest" && r.phase == Phase::Pretrain).unwrap();
    let r = ours.reduction_pct.unwrap();
    assert!((r - 45.7).abs() <= 8.0, "{r}");
}

#[test]
fn full_token_finetune_scale() {
    let gmacs = finetune_flops(&ArchSpec::vit_b(), 1.0) as f64 / 2e9;
    assert!((gmacs - 180.5).abs() / 180.5 < 0.01, "{gmacs}");
}

#[test]
fn parameter_count_matches_the_model() {
    use everest::costmodel::{parameter_count, Geometry, Transformer};
    use everest::mva::{ModelConfig, ParamStore, Phase};
    let cfg = ModelConfig { enc_dim: 24, enc_depth: 2, enc_heads: 2, dec_dim: 12, dec_depth: 1, dec_heads: 2, ..ModelConfig::default() };
    let arch = ArchSpec {
        name: "toy",
        encoder: Transformer { depth: cfg.enc_depth, dim: cfg.enc_dim, heads: cfg.enc_heads, mlp_ratio: cfg.mlp_ratio },
        decoder: Transformer { depth: cfg.dec_depth, dim: cfg.dec_dim, heads: cfg.dec_heads, mlp_ratio: cfg.mlp_ratio },
        geometry: Geometry { frames: cfg.frames(), height: cfg.height, width: cfg.width, channels: cfg.channels, patch: cfg.patch, tube: 2 },
        num_classes: cfg.num_classes,
    };
    let store = ParamStore::<f32>::init(&cfg, Phase::Pretrain, 0).unwrap();
    assert_eq!(parameter_count(&arch), store.scalar_count() as u128);
}
