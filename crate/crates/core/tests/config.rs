use hybridlm::config::{build_layout, parse_config, LayerKind, ModelConfig, Profile};
use proptest::prelude::*;

#[test]
fn text_form_round_trips_for_every_profile() {
    for profile in [Profile::Tiny, Profile::Small, Profile::Paper] {
        let cfg = ModelConfig::from_profile(profile);
        for defaults in [Profile::Tiny, Profile::Small, Profile::Paper] {
            assert_eq!(parse_config(&cfg.to_text(), defaults).unwrap(), cfg);
        }
    }
}

#[test]
fn partial_document_takes_profile_defaults() {
    let cfg = parse_config("# comment\n\nwindow = 16\nseed = 4\n", Profile::Small).unwrap();
    let mut expect = ModelConfig::small();
    expect.window = 16;
    expect.seed = 4;
    assert_eq!(cfg, expect);
}

#[test]
fn context_extension_only_moves_global_rope_base() {
    let base = ModelConfig::tiny();
    let ext = base.clone().with_context_extension();
    assert_ne!(ext.rope_base_ga, base.rope_base_ga);
    assert_eq!(ext.rope_base_swa, base.rope_base_swa);
}

proptest! {
    #[test]
    fn layout_counts(m in 1usize..10, n in 1usize..8) {
        let mut cfg = ModelConfig::tiny();
        cfg.hybrid_blocks = m;
        cfg.swa_per_block = n;
        cfg.num_layers = m * (n + 1);
        prop_assert!(cfg.validate().is_ok());
        let layout = build_layout(&cfg);
        prop_assert_eq!(layout.len(), m * (n + 1));
        prop_assert_eq!(layout[0], LayerKind::GaDense);
        prop_assert_eq!(layout.iter().filter(|k| k.is_global()).count(), m + 1);
        prop_assert_eq!(layout.iter().filter(|k| !k.is_moe()).count(), 1);
        // Every block still ends in a global MoE layer.
        for b in 0..m {
            prop_assert_eq!(layout[b * (n + 1) + n], LayerKind::GaMoe);
        }
    }

    #[test]
    fn inconsistent_layer_count_is_rejected(m in 1usize..10, n in 1usize..8, off in 1usize..3) {
        let mut cfg = ModelConfig::tiny();
        cfg.hybrid_blocks = m;
        cfg.swa_per_block = n;
        cfg.num_layers = m * (n + 1) + off;
        prop_assert!(cfg.validate().is_err());
    }
}
