//! Metrics checked against direct, unoptimized formulas.

use nmf_cli::metrics::{angular_errors, mae_normals, mae_normals_foreground, mse, psnr, ssim};
use proptest::prelude::*;

fn naive_psnr(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).powi(2);
    }
    let m = s / a.len() as f64;
    if m == 0.0 {
        99.0
    } else {
        (-10.0 * m.log10()).min(99.0)
    }
}

/// SSIM with an explicit 2D window clipped and renormalized at the border.
fn naive_ssim(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    let (c1, c2) = (1e-4, 9e-4);
    let mut total = 0.0;
    for ch in 0..3 {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut ws, mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -5..=5isize {
                    for dx in -5..=5isize {
                        let (xx, yy) = (x + dx, y + dy);
                        if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                            continue;
                        }
                        let g = (-((dx * dx + dy * dy) as f64) / 4.5).exp();
                        let i = (yy as usize * w + xx as usize) * 3 + ch;
                        ws += g;
                        mx += g * a[i];
                        my += g * b[i];
                        sxx += g * a[i] * a[i];
                        syy += g * b[i] * b[i];
                        sxy += g * a[i] * b[i];
                    }
                }
                let (mx, my) = (mx / ws, my / ws);
                let (vx, vy, cxy) = (sxx / ws - mx * mx, syy / ws - my * my, sxy / ws - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
    }
    total / (3 * w * h) as f64
}

fn image(w: usize, h: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, w * h * 3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn psnr_matches_direct_formula(a in image(7, 5), b in image(7, 5)) {
        prop_assert!((psnr(&a, &b).unwrap() - naive_psnr(&a, &b)).abs() < 1e-6);
    }

    #[test]
    fn ssim_matches_2d_window(a in image(13, 9), noise in image(13, 9), t in 0.0f64..1.0) {
        // blend toward `a` so the cases span low to high similarity
        let b: Vec<f64> = a.iter().zip(&noise).map(|(x, n)| (1.0 - t) * x + t * n).collect();
        let got = ssim(&a, &b, 13, 9).unwrap();
        prop_assert!((got - naive_ssim(&a, &b, 13, 9)).abs() < 1e-3);
    }

    #[test]
    fn ssim_of_identical_images_is_one(a in image(12, 12)) {
        prop_assert!((ssim(&a, &a, 12, 12).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn angular_error_matches_acos(
        p in prop::array::uniform3(-1.0f64..1.0),
        g in prop::array::uniform3(-1.0f64..1.0),
    ) {
        let pl = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let gl = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        prop_assume!(pl > 1e-3 && gl > 1e-3);
        let c = ((p[0] * g[0] + p[1] * g[1] + p[2] * g[2]) / (pl * gl)).clamp(-1.0, 1.0);
        let e = angular_errors(&p, &g).unwrap()[0];
        prop_assert!((e - c.acos().to_degrees()).abs() < 1e-6);
    }
}

#[test]
fn identical_images_cap_psnr() {
    let a = vec![0.25; 48];
    assert_eq!(mse(&a, &a).unwrap(), 0.0);
    assert_eq!(psnr(&a, &a).unwrap(), 99.0);
}

#[test]
fn mae_forms_differ_by_coverage() {
    // two pixels, one background: literal form halves the foreground error
    let gt = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    let pred = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
    let a = [1.0, 0.0];
    assert!((mae_normals(&pred, &gt, &a).unwrap() - 45.0).abs() < 1e-12);
    assert!((mae_normals_foreground(&pred, &gt, &a).unwrap() - 90.0).abs() < 1e-12);
    assert_eq!(angular_errors(&gt, &gt).unwrap(), vec![0.0, 0.0]);
}

#[test]
fn length_mismatch_is_an_error() {
    assert!(psnr(&[0.0; 3], &[0.0; 6]).is_err());
    assert!(ssim(&[0.0; 12], &[0.0; 12], 3, 1).is_err());
}
