use tee_cnn_demo::{codec_error_vs_bits, plan_explorer, thrashing_sweep};

#[test]
fn sweep_shows_the_thrashing_cliff() {
    let sweep = thrashing_sweep(6, 3).unwrap();
    assert_eq!(sweep.im2col_mib, 4.0);
    assert_eq!(sweep.points.len(), 6);
    let small = &sweep.points[0];
    let large = &sweep.points[5];
    assert!(small.unmodified >= 10 * large.unmodified, "{small:?} vs {large:?}");
    assert!(small.unmodified >= 50 * small.yplane);
    let ys: Vec<u64> = sweep.points.iter().map(|p| p.yplane).collect();
    assert!(ys.iter().max().unwrap() < &(2 * ys.iter().min().unwrap()), "{ys:?}");
}

#[test]
fn plan_explorer_matches_the_budget() {
    let p = plan_explorer("vgg-large-desk", 7.0).unwrap();
    assert_eq!(p.budget_bytes, 7 * 1024 * 1024);
    assert_eq!(p.rows.len(), 14);
    assert!(p
        .rows
        .iter()
        .all(|r| r.chosen_bytes.is_some_and(|b| b <= p.budget_bytes)));
    assert!(p.min_budget_hybrid < p.min_budget_channel.min(p.min_budget_yplane));
    let json = serde_json::to_value(&p).unwrap();
    assert!(json["rows"][0]["decision"].is_string());
    assert!(plan_explorer("alexnet", 7.0).is_err());
}

#[test]
fn codec_error_falls_with_bits() {
    let points = codec_error_vs_bits(20_000, 1024, 5).unwrap();
    assert_eq!(points[0].codec, "fp16");
    assert_eq!(points.len(), 10);
    let lossy = &points[1..];
    assert!(lossy.windows(2).all(|w| w[1].max_abs_error <= w[0].max_abs_error));
    assert!(lossy.windows(2).all(|w| w[1].mean_abs_error < w[0].mean_abs_error));
    for p in lossy {
        assert_eq!(p.payload_ratio, 32.0 / p.bits as f64);
        assert!(p.total_ratio < p.payload_ratio);
    }
}
