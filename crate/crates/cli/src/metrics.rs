//! Image and geometry metrics for evaluation.

use nmf_core::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: format!("{a} values"),
            found: format!("{b} values"),
        });
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64)
}

/// PSNR in dB for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m <= 0.0 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with the window renormalized where it leaves
/// the image.
fn blur(img: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, &kv) in k.iter().enumerate() {
                    let o = t as isize - r;
                    let (xx, yy) = if horizontal { (x as isize + o, y as isize) } else { (x as isize, y as isize + o) };
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize {
                        continue;
                    }
                    acc += kv * src[yy as usize * w + xx as usize];
                    norm += kv;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Mean SSIM over pixels and channels, 11x11 Gaussian window with
/// sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    check_len(a.len(), b.len())?;
    check_len(width * height * 3, a.len())?;
    let k = gaussian_window(11, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = (0..width * height).map(|i| a[i * 3 + ch]).collect();
        let y: Vec<f64> = (0..width * height).map(|i| b[i * 3 + ch]).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mx = blur(&x, width, height, &k);
        let my = blur(&y, width, height, &k);
        let sxx = blur(&prod(&x, &x), width, height, &k);
        let syy = blur(&prod(&y, &y), width, height, &k);
        let sxy = blur(&prod(&x, &y), width, height, &k);
        for i in 0..width * height {
            let (vx, vy, cxy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
            total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (3 * width * height) as f64)
}

/// Per-pixel angular error in degrees between unit normals, 90 where the
/// prediction is missing (zero vector).
pub fn angular_errors(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    check_len(gt.len(), pred.len())?;
    Ok(pred
        .chunks_exact(3)
        .zip(gt.chunks_exact(3))
        .map(|(p, g)| {
            let pl = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            let gl = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            if pl < 1e-12 || gl < 1e-12 {
                return 90.0;
            }
            // atan2 stays accurate near 0 and 180 degrees where acos does not
            let dot = p[0] * g[0] + p[1] * g[1] + p[2] * g[2];
            let cross = [p[1] * g[2] - p[2] * g[1], p[2] * g[0] - p[0] * g[2], p[0] * g[1] - p[1] * g[0]];
            let cl = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
            cl.atan2(dot).to_degrees()
        })
        .collect())
}

/// Mean over all pixels of ground-truth opacity times angular error.
pub fn mae_normals(pred: &[f64], gt: &[f64], gt_opacity: &[f64]) -> Result<f64> {
    let e = angular_errors(pred, gt)?;
    check_len(e.len(), gt_opacity.len())?;
    Ok(e.iter().zip(gt_opacity).map(|(e, a)| e * a).sum::<f64>() / e.len().max(1) as f64)
}

/// Opacity-weighted mean angular error over the object only:
/// `sum(a e) / sum(a)`.
pub fn mae_normals_foreground(pred: &[f64], gt: &[f64], gt_opacity: &[f64]) -> Result<f64> {
    let e = angular_errors(pred, gt)?;
    check_len(e.len(), gt_opacity.len())?;
    let wsum: f64 = gt_opacity.iter().sum();
    if wsum <= 0.0 {
        return Ok(0.0);
    }
    Ok(e.iter().zip(gt_opacity).map(|(e, a)| e * a).sum::<f64>() / wsum)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = vec![0.3; 12];
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b[..6]).is_err());
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let img: Vec<f64> = (0..16 * 12 * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        assert!((ssim(&img, &img, 16, 12).unwrap() - 1.0).abs() < 1e-12);
        let other: Vec<f64> = img.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&img, &other, 16, 12).unwrap() < 0.5);
    }

    #[test]
    fn missing_normal_counts_ninety_degrees() {
        let gt = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let pred = [0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(mae_normals(&pred, &gt, &[1.0, 1.0]).unwrap(), 45.0);
        assert_eq!(mae_normals(&pred, &gt, &[1.0, 0.0]).unwrap(), 45.0);
        assert_eq!(mae_normals_foreground(&pred, &gt, &[1.0, 0.0]).unwrap(), 90.0);
        assert_eq!(mae_normals(&gt, &gt, &[1.0, 1.0]).unwrap(), 0.0);
    }
}
