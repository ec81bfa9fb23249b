use super::*;

#[test]
fn toy_element_counts() {
    let s = ModelSpec::toy();
    assert_eq!(layer_elems(16, 64, 4, 256), 18464);
    assert_eq!(decoder_elems(&s, 16), 50384);
    assert_eq!(embed_elems(&s, 16), 768);
}

#[test]
fn toy_analytic_peaks() {
    let s = ModelSpec::toy();
    let mae = BimPlan::mae(&s, 0.75).unwrap();
    let bim = BimPlan::uniform(&s, 4, 0.75).unwrap();
    assert_eq!(analytic_peak(&s, &mae, 1, DType::F64).unwrap(), 198864 * 8);
    let b = analytic_breakdown(&s, &bim, 1, DType::F32, Terms::ALL).unwrap();
    assert_eq!(b.per_block, vec![88080 * 4, 88336 * 4, 88336 * 4, 88336 * 4]);
}

#[test]
fn idealized_ratio_is_one_over_b() {
    let s = ModelSpec::toy();
    let mae = BimPlan::mae(&s, 0.75).unwrap();
    let a_mae = analytic_breakdown(&s, &mae, 3, DType::F32, Terms::ENCODER_ONLY).unwrap();
    for b in [1, 2, 4, 8] {
        let p = BimPlan::uniform(&s, b, 0.75).unwrap();
        let a = analytic_breakdown(&s, &p, 3, DType::F32, Terms::ENCODER_ONLY).unwrap();
        assert_eq!(a.peak_bytes as f64 / a_mae.peak_bytes as f64, 1.0 / b as f64);
    }
    let one = BimPlan::uniform(&s, 1, 0.75).unwrap();
    assert_eq!(
        analytic_peak(&s, &one, 2, DType::F32).unwrap(),
        analytic_peak(&s, &mae, 2, DType::F32).unwrap()
    );
}

#[test]
fn constants_match_parameter_store() {
    let s = ModelSpec::toy();
    for b in [1, 2, 4] {
        let m = Model::<f32>::new(&s, b, 0).unwrap();
        let plan = BimPlan::uniform(&s, b, 0.75).unwrap();
        let a = analytic_breakdown(&s, &plan, 1, DType::F32, Terms::ALL).unwrap();
        assert_eq!(a.param_bytes, m.store.total_bytes());
        let largest = (0..b)
            .map(|i| {
                m.block_params(i)
                    .iter()
                    .map(|&id| m.store.value(id).size_bytes())
                    .sum::<usize>()
            })
            .max()
            .unwrap();
        assert_eq!(a.grad_bytes, largest);
    }
}

#[test]
fn analytic_equals_measured_on_toy() {
    let s = ModelSpec::toy();
    let plan = BimPlan::with_schedule(&s, vec![0.65, 0.70, 0.80, 0.85]).unwrap();
    let r = compare_peak(&s, &plan, 2).unwrap();
    assert_eq!(r.plan.analytic_peak_bytes, r.plan.measured_peak_bytes);
    assert_eq!(r.mae.analytic_peak_bytes, r.mae.measured_peak_bytes);
    assert!(r.ratio_vs_mae < 1.0);
}

#[test]
fn self_comparison_is_one() {
    let s = ModelSpec::tiny();
    let r = compare_peak(&s, &BimPlan::mae(&s, 0.5).unwrap(), 2).unwrap();
    assert_eq!(r.ratio_vs_mae, 1.0);
}

#[test]
fn budget_overflow_reports_estimate() {
    let s = ModelSpec::toy();
    let plan = BimPlan::uniform(&s, 4, 0.75).unwrap();
    match compare_peak_within(&s, &plan, 4, 1000, 0) {
        Err(BimError::Resource { estimate_bytes, .. }) => assert!(estimate_bytes > 1000),
        other => panic!("expected resource error, got {other:?}"),
    }
}

#[test]
fn flop_linear_term_savings() {
    let s = ModelSpec::toy();
    let inc = BimPlan::with_schedule(&s, vec![0.75, 0.80, 0.85, 0.90]).unwrap();
    let r = flop_estimate(&s, &inc, 0.75).unwrap();
    assert!((r.block_units - 0.70).abs() < 1e-12);
    assert_eq!(r.baseline_block_units, 1.0);
    assert!((r.linear_saving - 0.30).abs() < 1e-12);

    let par = BimPlan::with_schedule(&s, vec![0.65, 0.70, 0.80, 0.85]).unwrap();
    let r = flop_estimate(&s, &par, 0.75).unwrap();
    assert!(r.linear_saving.abs() < 1e-12);

    assert!(BimPlan::uniform(&s, 4, 0.0).is_err());
    let half = BimPlan::uniform(&s, 4, 0.5).unwrap();
    let r = flop_estimate(&s, &half, 0.0).unwrap();
    assert!(r.visible_fractions.iter().all(|&f| f == 0.5));
    assert_eq!(r.linear_saving, 0.5);
    assert!(r.decoder_flops > 0.0 && r.encoder_attention_flops > 0.0);
}
