mod common;

use common::*;
use m2dt_core::attention::AttentionRouting;
use m2dt_core::diffusion::make_zero_snr_schedule;
use m2dt_core::mask::{build_attention_mask, build_grouped_plan, MaskVariant};
use m2dt_core::model::{init_params_dense, loss_and_grads};

fn check(conditional: bool, variant: MaskVariant, grouped: bool) -> (GradReport, GradReport) {
    let config = gradcheck_config();
    let layout = gradcheck_layout();
    let sched = make_zero_snr_schedule(config.max_t).unwrap();
    let params = init_params_dense::<f64>(config, 11, 0.1).unwrap();
    let batch = gradcheck_batch(&config, &layout, conditional, 5);
    let plan = build_grouped_plan(&layout, variant);
    let mask = build_attention_mask(&layout, variant);
    let routing = if grouped { AttentionRouting::Grouped(&plan) } else { AttentionRouting::Dense(&mask) };

    let numeric = finite_difference_grads(&params, &layout, routing, &batch, &sched);
    let (_, g64) = loss_and_grads(&params, &layout, routing, &batch, &sched).unwrap();
    let double = compare_grads(&g64, &numeric, 1e-6);

    let p32 = params.cast::<f32>();
    let (_, g32) = loss_and_grads(&p32, &layout, routing, &cast_batch::<f32>(&batch), &sched).unwrap();
    let single = compare_grads(&g32, &numeric, 1e-3);
    (double, single)
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    let (double, single) = check(false, MaskVariant::V2, true);
    println!("double {double:?}\nsingle {single:?}");
    assert!(double.max_rel <= 1e-6, "{double:?}");
    assert!(single.max_rel <= 1e-3, "{single:?}");
}

#[test]
fn conditional_loss_gradients_match_finite_differences() {
    let (double, single) = check(true, MaskVariant::V2, true);
    println!("double {double:?}\nsingle {single:?}");
    assert!(double.max_rel <= 1e-6, "{double:?}");
    assert!(single.max_rel <= 1e-3, "{single:?}");
}

#[test]
fn dense_routing_gradients_match_finite_differences() {
    let (double, _) = check(false, MaskVariant::V4, false);
    assert!(double.max_rel <= 1e-6, "{double:?}");
}
