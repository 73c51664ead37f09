use m2dt_core::mask::{build_layout, MaskVariant, SegmentLayout};
use m2dt_core::model::{init_params_dense, ModelConfig};
use m2dt_core::synthetic::{leakage_probe, reachability};

fn probe_config() -> ModelConfig {
    ModelConfig { depth: 2, dim: 16, heads: 2, text_vocab: 7, token_dim: 3, max_t: 10, max_len: 24 }
}

#[test]
fn observed_leakage_equals_reachability_for_every_variant() {
    let layout = SegmentLayout::uniform(3, 2, 3).unwrap();
    let params = init_params_dense::<f64>(probe_config(), 3, 0.2).unwrap();
    for variant in MaskVariant::ALL {
        let report = leakage_probe(&params, &layout, variant, &[1, 2], 17).unwrap();
        assert!(report.matches(), "{report}");
    }
}

#[test]
fn uneven_layouts_also_match() {
    let layout = build_layout(4, &[1, 3, 2, 2], &[2, 1, 4, 3]).unwrap();
    let params = init_params_dense::<f32>(probe_config(), 4, 0.2).unwrap();
    for variant in MaskVariant::ALL {
        let report = leakage_probe(&params, &layout, variant, &[1, 2], 5).unwrap();
        assert!(report.matches(), "{report}");
    }
}

#[test]
fn reachability_examples() {
    // text_2 -> video_1
    assert!(!reachability(3, MaskVariant::V2, 1)[1][0]);
    assert!(reachability(3, MaskVariant::V2, 2)[1][0]);
    assert!(reachability(3, MaskVariant::V4, 1)[1][0]);
    assert!(!reachability(3, MaskVariant::V1, 5)[1][0]);
    assert!(reachability(3, MaskVariant::V1, 1)[1][1]);
}
