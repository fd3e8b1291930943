use multires_core::cost::{
    compare_systems, count_macs, count_params, system_cost, Component, EncoderArch, FaithfulArch, FusedSystem, FusionKind,
};
use multires_core::encoder::{build_encoder, EncoderConfig};
use multires_core::resolution::ConvStackSpec;
use multires_core::{SplitMix, UpsampleMode};
use proptest::prelude::*;

fn faithful(row: char) -> EncoderArch {
    EncoderArch::Faithful(FaithfulArch::base(row).unwrap())
}

fn random_toy(rng: &mut SplitMix) -> EncoderConfig {
    let heads = 1 + rng.below(4);
    let groups: Vec<(usize, usize, usize)> = (0..1 + rng.below(3))
        .map(|_| {
            let stride = 1 + rng.below(4);
            (stride + rng.below(4), stride, 1 + rng.below(3))
        })
        .collect();
    EncoderConfig {
        conv_stack: ConvStackSpec::from_groups(&groups, 8).unwrap(),
        model_dim: heads * (1 + rng.below(8)),
        ffn_dim: 1 + rng.below(40),
        layers: 1 + rng.below(4),
        heads,
        conv_channels: 1 + rng.below(20),
        sample_rate: 16000,
        seed: rng.next_u64(),
    }
}

#[test]
fn toy_census_matches_instantiation() {
    let mut rng = SplitMix::new(77);
    for _ in 0..25 {
        let cfg = random_toy(&mut rng);
        let census = count_params(&EncoderArch::Toy(cfg.clone())).unwrap();
        let (enc, store) = build_encoder(cfg.clone()).unwrap();
        assert_eq!(census, enc.param_count(&store) as u64, "{cfg:?}");
    }
    for row in ['A', 'B', 'C'] {
        let cfg = EncoderConfig::toy_row(row, 0).unwrap();
        let (enc, store) = build_encoder(cfg.clone()).unwrap();
        assert_eq!(count_params(&EncoderArch::Toy(cfg)).unwrap(), enc.param_count(&store) as u64);
    }
}

#[test]
fn faithful_rows_order_by_macs() {
    let m = |r| count_macs(&faithful(r), 160_000).unwrap().macs();
    assert!(m('C') < m('B') && m('B') < m('A'));
}

#[test]
fn hier_system_cheaper_than_large_and_three_bases() {
    for secs in [1usize, 2, 5, 10, 20] {
        let len = secs * 16000;
        let mrh = FusedSystem {
            name: "mr-h".into(),
            encoders: vec![faithful('C'), faithful('B'), faithful('A')],
            fusion: FusionKind::Hierarchical,
            head_vocab: None,
        };
        let large = FusedSystem {
            name: "large".into(),
            encoders: vec![EncoderArch::Faithful(FaithfulArch::large())],
            fusion: FusionKind::None,
            head_vocab: None,
        };
        let h = system_cost(&mrh, len).unwrap();
        let l = system_cost(&large, len).unwrap();
        let a = count_macs(&faithful('A'), len).unwrap();
        assert!(h.macs() < l.macs(), "{secs} s");
        assert!(h.macs() < 3 * a.macs(), "{secs} s");
    }
}

#[test]
fn fused_system_sums_constituents() {
    let enc = vec![faithful('C'), faithful('B'), faithful('A')];
    for fusion in [FusionKind::Parallel(UpsampleMode::Repeat), FusionKind::Parallel(UpsampleMode::Deconv), FusionKind::Hierarchical] {
        let sys = FusedSystem { name: "s".into(), encoders: enc.clone(), fusion, head_vocab: Some(5) };
        let r = system_cost(&sys, 16000).unwrap();
        let parts: u64 = enc.iter().map(|e| count_macs(e, 16000).unwrap().macs()).sum();
        let extra = r.component(Component::Fusion).macs + r.component(Component::Head).macs;
        assert_eq!(r.macs(), parts + extra);
        assert!(r.component(Component::Fusion).params > 0 || fusion == FusionKind::Parallel(UpsampleMode::Repeat));
    }
}

#[test]
fn comparison_rejects_mixed_lengths_and_reports_ratios() {
    let a = count_macs(&faithful('A'), 16000).unwrap();
    let c = count_macs(&faithful('C'), 16000).unwrap();
    let cmp = compare_systems(&[a.clone(), c], 0).unwrap();
    assert_eq!(cmp.rows[0].macs_ratio, 1.0);
    assert!(cmp.rows[1].macs_ratio < 1.0 && cmp.rows[1].params_ratio > 1.0);
    assert!(compare_systems(&[a, count_macs(&faithful('A'), 8000).unwrap()], 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn macs_grow_with_length(len in 400usize..400_000, row in 0usize..3, toy in any::<bool>()) {
        let r = ['A', 'B', 'C'][row];
        let arch = if toy { EncoderArch::Toy(EncoderConfig::toy_row(r, 0).unwrap()) } else { faithful(r) };
        // next length with at least one more output frame
        let step = arch.conv_stack().stride_product();
        let a = count_macs(&arch, len).unwrap();
        let b = count_macs(&arch, len + step).unwrap();
        prop_assert!(b.macs() > a.macs());
        prop_assert_eq!(a.flops(), 2 * a.macs());
        let total: u64 = a.breakdown().iter().map(|(_, c)| c.macs).sum();
        prop_assert_eq!(total, a.macs());
    }

    #[test]
    fn attention_scores_grow_superlinearly(len in 16_000usize..200_000, row in 0usize..3) {
        let arch = faithful(['A', 'B', 'C'][row]);
        let a = count_macs(&arch, len).unwrap().component(Component::AttentionScores).macs;
        let b = count_macs(&arch, 2 * len).unwrap().component(Component::AttentionScores).macs;
        prop_assert!(b as f64 / a as f64 > 2.0);
    }
}

#[test]
fn doubling_frames_quadruples_score_term() {
    let arch = faithful('A');
    let at = |len| count_macs(&arch, len).unwrap().component(Component::AttentionScores).macs;
    // 320 * 49 + 80 samples give 49 frames; 320 * 98 + 80 give 98
    assert_eq!(at(320 * 98 + 80), 4 * at(320 * 49 + 80));
}
