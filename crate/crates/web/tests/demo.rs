use restormixer_web::{degrade_preview, kernel_curve, visit_order};

#[test]
fn kernel_curve_matches_closed_form() {
    let (a_log, delta, b, c) = (0.3f64, 0.2, 0.7, -1.1);
    let k = kernel_curve(a_log, delta, b, c, 16).unwrap();
    let a = -a_log.exp();
    for (j, v) in k.iter().enumerate() {
        let want = c * (delta * a * j as f64).exp() * delta * b;
        assert!((v - want).abs() < 1e-14, "{j}: {v} vs {want}");
    }
    assert!(kernel_curve(0.0, 0.0, 1.0, 1.0, 4).is_err());
}

#[test]
fn visit_orders_cover_the_grid() {
    for dir in ["hf", "hb", "vf", "vb"] {
        let mut order = visit_order(3, 5, dir).unwrap();
        order.sort_unstable();
        assert_eq!(order, (0..15).collect::<Vec<u32>>());
    }
    assert_eq!(visit_order(2, 3, "vb").unwrap(), vec![5, 2, 4, 1, 3, 0]);
    assert!(visit_order(2, 2, "diagonal").is_err());
}

#[test]
fn degrade_preview_scores_the_pair() {
    let out = degrade_preview("rain", 48, 3, 1.0).unwrap();
    assert_eq!(out.size(), 48);
    assert_eq!(out.clean().len(), 48 * 48 * 4);
    assert!(out.psnr().is_finite() && out.psnr() > 5.0);
    assert!(out.ssim() < 1.0 && out.ssim_y() < 1.0);

    let clean = degrade_preview("noise", 32, 1, 0.0).unwrap();
    assert_eq!(clean.psnr(), f64::INFINITY);
    assert!((clean.ssim() - 1.0).abs() < 1e-12);
    assert_eq!(clean.clean(), clean.degraded());

    assert!(degrade_preview("down2", 32, 0, 1.0).is_err());
    assert!(degrade_preview("fog", 32, 0, 1.0).is_err());
}
