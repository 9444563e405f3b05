//! Owen-scrambled Sobol points, Cranley-Patterson rotation, per-sample
//! point allocation and visible-normal sampling of the Trowbridge-Reitz
//! distribution.
//!
//! Hashing: every seed is derived with the 64-bit finalizer of SplitMix64
//! ([`mix64`]) applied to `seed ^ (key * 0x9E3779B97F4A7C15)`, folded over
//! the keys in order. Owen scrambling uses the Laine-Karras style hash
//! permutation on bit-reversed values with the low 32 bits of the derived
//! seed.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::materials::{ndf, smith_g1};
use crate::math::Vec3;

pub const SOBOL_DIMS: usize = 64;

/// Joe-Kuo primitive polynomial data `(degree, coefficients, initial m)` for
/// dimensions 1..64; dimension 0 is the van der Corput sequence.
const JOE_KUO: [(u32, u32, &[u32]); SOBOL_DIMS - 1] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 15, 13, 25]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
    (7, 4, &[1, 3, 7, 13, 13, 15, 69]),
    (7, 7, &[1, 1, 3, 13, 7, 35, 63]),
    (7, 8, &[1, 3, 5, 9, 1, 25, 53]),
    (7, 14, &[1, 3, 1, 13, 9, 35, 107]),
    (7, 19, &[1, 3, 1, 5, 27, 61, 31]),
    (7, 21, &[1, 1, 5, 11, 19, 41, 61]),
    (7, 28, &[1, 3, 5, 3, 3, 13, 69]),
    (7, 31, &[1, 1, 7, 13, 1, 19, 1]),
    (7, 32, &[1, 3, 7, 5, 13, 19, 59]),
    (7, 37, &[1, 1, 3, 9, 25, 29, 41]),
    (7, 41, &[1, 3, 5, 13, 23, 1, 55]),
    (7, 42, &[1, 3, 7, 3, 13, 59, 17]),
    (7, 50, &[1, 3, 1, 3, 5, 53, 69]),
    (7, 55, &[1, 1, 5, 5, 23, 33, 13]),
    (7, 56, &[1, 1, 7, 7, 1, 61, 123]),
    (7, 59, &[1, 1, 7, 9, 13, 61, 49]),
    (7, 62, &[1, 3, 3, 5, 3, 55, 33]),
    (8, 14, &[1, 3, 1, 15, 31, 13, 49, 245]),
    (8, 21, &[1, 3, 5, 15, 31, 59, 63, 97]),
    (8, 22, &[1, 3, 1, 11, 11, 11, 77, 249]),
    (8, 38, &[1, 3, 1, 11, 27, 43, 71, 9]),
    (8, 47, &[1, 1, 7, 15, 21, 11, 81, 45]),
    (8, 49, &[1, 3, 7, 3, 25, 31, 65, 79]),
    (8, 50, &[1, 3, 1, 1, 19, 11, 3, 205]),
    (8, 52, &[1, 1, 5, 9, 19, 21, 29, 157]),
    (8, 56, &[1, 3, 7, 11, 1, 33, 89, 185]),
    (8, 67, &[1, 3, 3, 3, 15, 9, 79, 71]),
    (8, 70, &[1, 3, 7, 11, 15, 39, 119, 27]),
    (8, 84, &[1, 1, 3, 1, 11, 31, 97, 225]),
    (8, 97, &[1, 1, 1, 3, 23, 43, 57, 177]),
    (8, 103, &[1, 3, 7, 7, 17, 17, 37, 71]),
    (8, 115, &[1, 3, 1, 5, 27, 63, 123, 213]),
    (8, 122, &[1, 1, 3, 5, 11, 43, 53, 133]),
    (9, 8, &[1, 3, 5, 5, 29, 17, 47, 173, 479]),
    (9, 13, &[1, 3, 3, 11, 3, 1, 109, 9, 69]),
    (9, 16, &[1, 1, 1, 5, 17, 39, 23, 5, 343]),
    (9, 22, &[1, 3, 1, 5, 25, 15, 31, 103, 499]),
    (9, 25, &[1, 1, 1, 11, 11, 17, 63, 105, 183]),
    (9, 44, &[1, 1, 5, 11, 9, 29, 97, 231, 363]),
    (9, 47, &[1, 1, 5, 15, 19, 45, 41, 7, 383]),
    (9, 52, &[1, 3, 7, 7, 31, 19, 83, 137, 221]),
    (9, 55, &[1, 1, 1, 3, 23, 15, 111, 223, 83]),
    (9, 59, &[1, 1, 5, 13, 31, 15, 55, 25, 161]),
    (9, 62, &[1, 1, 3, 13, 25, 47, 39, 87, 257]),
];

fn direction_numbers() -> &'static [[u32; 32]; SOBOL_DIMS] {
    static TABLE: OnceLock<[[u32; 32]; SOBOL_DIMS]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut v = [[0u32; 32]; SOBOL_DIMS];
        for (k, e) in v[0].iter_mut().enumerate() {
            *e = 1 << (31 - k);
        }
        for (d, &(s, a, m)) in JOE_KUO.iter().enumerate() {
            let s = s as usize;
            let row = &mut v[d + 1];
            for k in 0..32 {
                if k < s {
                    row[k] = m[k] << (31 - k);
                } else {
                    let mut x = row[k - s] ^ (row[k - s] >> s);
                    for j in 1..s {
                        if (a >> (s - 1 - j)) & 1 == 1 {
                            x ^= row[k - j];
                        }
                    }
                    row[k] = x;
                }
            }
        }
        v
    })
}

/// Unscrambled 32-bit Sobol value.
pub fn sobol_u32(index: u32, dim: usize) -> u32 {
    let v = &direction_numbers()[dim % SOBOL_DIMS];
    let mut x = 0u32;
    let mut i = index;
    let mut k = 0;
    while i != 0 {
        if i & 1 == 1 {
            x ^= v[k];
        }
        i >>= 1;
        k += 1;
    }
    x
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `keys` into `seed` one at a time.
pub fn hash_keys(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix64(seed), |h, &k| {
        mix64(h ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15))
    })
}

/// Uniform value in `[0, 1)` from a hash of `seed` and `keys`.
pub fn hash_uniform(seed: u64, keys: &[u64]) -> f64 {
    (hash_keys(seed, keys) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn lk_permute(mut x: u32, seed: u32) -> u32 {
    x = x.wrapping_add(seed);
    x ^= x.wrapping_mul(0x6c50_b47c);
    x ^= x.wrapping_mul(0xb82f_1e52);
    x ^= x.wrapping_mul(0xc7af_e638);
    x ^= x.wrapping_mul(0x8d22_f6e6);
    x
}

/// Hash-based nested uniform scramble of a 32-bit fixed-point value.
pub fn owen_scramble(x: u32, seed: u32) -> u32 {
    lk_permute(x.reverse_bits(), seed).reverse_bits()
}

fn u32_to_unit(x: u32) -> f64 {
    x as f64 * (1.0 / 4_294_967_296.0)
}

/// Owen-scrambled Sobol point in `[0, 1)`.
pub fn sobol_owen(index: u32, dim: usize, seed: u64) -> f64 {
    let s = hash_keys(seed, &[dim as u64]) as u32;
    u32_to_unit(owen_scramble(sobol_u32(index, dim), s))
}

/// `(u + offset) mod 1`, kept strictly below 1.
pub fn cp_rotate(u: f64, offset: f64) -> f64 {
    let mut r = u + offset;
    if r >= 1.0 {
        r -= 1.0;
    }
    if r >= 1.0 {
        r = 1.0 - f64::EPSILON / 2.0;
    }
    r
}

/// Seeded source of 2D points for the secondary samples of primary samples.
///
/// Points for `(id, bounce)` come from Sobol dimensions `2 * bounce` and
/// `2 * bounce + 1`, Owen-scrambled with a per-bounce seed, over the index
/// range `[(id mod 2^16) * 2^16, + n)`. Each primary sample also receives a
/// Cranley-Patterson offset hashed from the full id so that ids sharing an
/// index range still receive distinct points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleStream {
    pub seed: u64,
}

pub const MAX_POINTS_PER_SAMPLE: usize = 1 << 16;

impl SampleStream {
    pub fn new(seed: u64) -> Self {
        SampleStream { seed }
    }

    pub fn allocate(&self, id: u64, bounce: u32, n: usize) -> Vec<[f64; 2]> {
        let n = n.min(MAX_POINTS_PER_SAMPLE);
        let scramble = hash_keys(self.seed, &[0x5eed, bounce as u64]);
        let base = ((id & 0xFFFF) << 16) as u32;
        let d0 = (2 * bounce as usize) % SOBOL_DIMS;
        let d1 = (2 * bounce as usize + 1) % SOBOL_DIMS;
        let o0 = hash_uniform(self.seed, &[id, bounce as u64, 0]);
        let o1 = hash_uniform(self.seed, &[id, bounce as u64, 1]);
        (0..n as u32)
            .map(|k| {
                [
                    cp_rotate(sobol_owen(base + k, d0, scramble), o0),
                    cp_rotate(sobol_owen(base + k, d1, scramble), o1),
                ]
            })
            .collect()
    }

    /// Uniform scalar for an arbitrary keyed decision.
    pub fn uniform(&self, keys: &[u64]) -> f64 {
        hash_uniform(self.seed, keys)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VndfSample {
    pub h: Vec3,
    pub pdf: f64,
}

/// Draws a half vector from the distribution of visible normals for the
/// local view direction `wo` (normal along +z) by stretching, sampling the
/// projected hemisphere as two half disks and unstretching.
pub fn sample_vndf(u1: f64, u2: f64, wo: Vec3, alpha: f64) -> Result<VndfSample> {
    if wo.z <= 0.0 {
        return Err(Error::BelowHorizon(wo.z));
    }
    if alpha <= 0.0 {
        return Err(Error::InvalidRoughness(alpha));
    }
    let vh = Vec3::new(alpha * wo.x, alpha * wo.y, wo.z).normalize();
    let lensq = vh.x * vh.x + vh.y * vh.y;
    let t1 = if lensq > 0.0 {
        Vec3::new(-vh.y, vh.x, 0.0) / lensq.sqrt()
    } else {
        Vec3::X
    };
    let t2 = vh.cross(t1);
    let r = u1.sqrt();
    let phi = 2.0 * PI * u2;
    let p1 = r * phi.cos();
    let mut p2 = r * phi.sin();
    let s = 0.5 * (1.0 + vh.z);
    p2 = (1.0 - s) * (1.0 - p1 * p1).max(0.0).sqrt() + s * p2;
    let nh = t1 * p1 + t2 * p2 + vh * (1.0 - p1 * p1 - p2 * p2).max(0.0).sqrt();
    let h = Vec3::new(alpha * nh.x, alpha * nh.y, nh.z.max(0.0)).normalize();
    let pdf = vndf_pdf(h, wo, Vec3::Z, alpha);
    Ok(VndfSample { h, pdf })
}

/// Solid-angle density of half vectors under the visible-normal
/// distribution, `G1(wo) max(0, wo.h) D(h) / (wo.n)`.
pub fn vndf_pdf(h: Vec3, wo: Vec3, n: Vec3, alpha: f64) -> f64 {
    let cos_nh = h.dot(n);
    let cos_nv = wo.dot(n);
    if cos_nh <= 0.0 || cos_nv <= 0.0 {
        return 0.0;
    }
    smith_g1(cos_nv, alpha) * wo.dot(h).max(0.0) * ndf(cos_nh, alpha) / cos_nv
}

/// Mirror reflection of `wo` about `h` and the determinant `4 (wo.h)` of its
/// Jacobian.
pub fn reflect(wo: Vec3, h: Vec3) -> (Vec3, f64) {
    let c = wo.dot(h);
    (h * (2.0 * c) - wo, 4.0 * c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::spherical_to_dir;

    #[test]
    fn first_dimension_is_van_der_corput() {
        assert_eq!(sobol_u32(0, 0), 0);
        assert_eq!(sobol_u32(1, 0), 1 << 31);
        assert_eq!(sobol_u32(2, 0), 1 << 30);
        assert_eq!(sobol_u32(3, 0), 3 << 30);
    }

    #[test]
    fn second_dimension_reference_prefix() {
        // natural (not Gray-code) index order
        let expect = [0.0, 0.5, 0.75, 0.25, 0.625, 0.125, 0.375, 0.875];
        for (i, e) in expect.iter().enumerate() {
            assert_eq!(u32_to_unit(sobol_u32(i as u32, 1)), *e);
        }
    }

    fn stratified(points: &[f64], k: u32) -> bool {
        let mut seen = vec![false; 1 << k];
        for &p in points {
            let b = (p * (1u64 << k) as f64) as usize;
            if seen[b] {
                return false;
            }
            seen[b] = true;
        }
        true
    }

    #[test]
    fn elementary_intervals_survive_scrambling() {
        for seed in [0u64, 1, 0xdead_beef] {
            for dim in [0usize, 1, 5, 31, 63] {
                for k in 0..=10u32 {
                    let pts: Vec<f64> = (0..1u32 << k).map(|i| sobol_owen(i, dim, seed)).collect();
                    assert!(stratified(&pts, k), "seed {seed} dim {dim} k {k}");
                }
            }
        }
    }

    #[test]
    fn seeds_change_points() {
        let a: Vec<f64> = (0..64).map(|i| sobol_owen(i, 3, 1)).collect();
        let b: Vec<f64> = (0..64).map(|i| sobol_owen(i, 3, 2)).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn dimension_zero_mean() {
        let m: f64 = (0..4096).map(|i| sobol_owen(i, 0, 42)).sum::<f64>() / 4096.0;
        assert!((m - 0.5).abs() < 0.01);
    }

    #[test]
    fn cp_rotation_cases() {
        assert_eq!(cp_rotate(0.3, 0.0), 0.3);
        assert!((cp_rotate(0.7, 0.5) - 0.2).abs() < 1e-15);
        assert!(cp_rotate(0.999_999_999_999_999_9, 0.999_999_999_999_999_9) < 1.0);
    }

    #[test]
    fn rotation_keeps_stratification_up_to_one_split() {
        let pts: Vec<f64> = (0..256).map(|i| sobol_owen(i, 2, 9)).collect();
        let rotated: Vec<f64> = pts.iter().map(|&u| cp_rotate(u, 0.123_456)).collect();
        // each interval of width 1/256 holds one point before; after the shift
        // at most two points share an interval and at most one interval
        // boundary is split by the wrap
        let mut counts = vec![0; 256];
        for u in rotated {
            counts[(u * 256.0) as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c <= 2));
        let empty = counts.iter().filter(|&&c| c == 0).count();
        assert!(empty <= 256 / 2 + 1);
    }

    #[test]
    fn allocation_is_deterministic_and_distinct() {
        let s = SampleStream::new(7);
        assert!(s.allocate(3, 0, 0).is_empty());
        assert_eq!(s.allocate(11, 1, 16), s.allocate(11, 1, 16));
        let mut firsts = std::collections::HashSet::new();
        for id in 0..10_000u64 {
            let p = s.allocate(id, 0, 2);
            firsts.insert((p[0][0].to_bits(), p[0][1].to_bits()));
        }
        assert_eq!(firsts.len(), 10_000);
        for p in s.allocate(5, 0, 1024) {
            assert!((0.0..1.0).contains(&p[0]) && (0.0..1.0).contains(&p[1]));
        }
    }

    #[test]
    fn reflection_cases() {
        let (wi, j) = reflect(Vec3::Z, Vec3::Z);
        assert!((wi - Vec3::Z).length() < 1e-15 && (j - 4.0).abs() < 1e-15);
        let wo = Vec3::new(1.0, 0.0, 1.0).normalize();
        let (wi, j) = reflect(wo, Vec3::Z);
        assert!((wi - Vec3::new(-1.0, 0.0, 1.0).normalize()).length() < 1e-12);
        assert!((j - 4.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pdf_reference_point() {
        assert!((vndf_pdf(Vec3::Z, Vec3::Z, Vec3::Z, 1.0) - 1.0 / PI).abs() < 1e-15);
        assert_eq!(vndf_pdf(-Vec3::Z, Vec3::Z, Vec3::Z, 0.5), 0.0);
    }

    #[test]
    fn vndf_rejects_below_horizon() {
        assert!(sample_vndf(0.3, 0.3, Vec3::new(0.0, 0.6, -0.8), 0.5).is_err());
    }

    #[test]
    fn pdf_integrates_to_one() {
        for &alpha in &[0.1, 0.5, 1.0] {
            for &theta_o in &[0.0f64, 0.7, 1.3] {
                let wo = spherical_to_dir(theta_o, 0.4);
                let (nt, np) = (2000, 256);
                let mut acc = 0.0;
                for i in 0..nt {
                    let t = (i as f64 + 0.5) / nt as f64 * PI / 2.0;
                    for j in 0..np {
                        let p = (j as f64 + 0.5) / np as f64 * 2.0 * PI;
                        acc += vndf_pdf(spherical_to_dir(t, p), wo, Vec3::Z, alpha) * t.sin();
                    }
                }
                acc *= (PI / 2.0 / nt as f64) * (2.0 * PI / np as f64);
                assert!((acc - 1.0).abs() < 1e-2, "alpha {alpha} theta {theta_o}: {acc}");
            }
        }
    }

    #[test]
    fn samples_report_their_pdf() {
        let wo = Vec3::new(0.5, -0.2, 0.8).normalize();
        for &alpha in &[0.01, 0.3, 1.0] {
            for i in 0..1024u32 {
                let s = sample_vndf(sobol_owen(i, 0, 1), sobol_owen(i, 1, 1), wo, alpha).unwrap();
                assert!((s.h.length() - 1.0).abs() < 1e-12);
                assert!((s.pdf - vndf_pdf(s.h, wo, Vec3::Z, alpha)).abs() <= 1e-5 * s.pdf);
            }
        }
    }

    #[test]
    fn smooth_surfaces_concentrate_near_the_normal() {
        // at wo = n the cosine-weighted distribution has the closed-form
        // tail P(tan > t) = a^2 / (a^2 + t^2)
        let alpha: f64 = 0.01;
        let t2 = 5f64.to_radians().tan().powi(2);
        let expected = 1.0 - alpha * alpha / (alpha * alpha + t2);
        let n = 1u32 << 16;
        let cos5 = 5f64.to_radians().cos();
        let frac = |wo: Vec3| {
            (0..n)
                .filter(|&i| {
                    let s = sample_vndf(sobol_owen(i, 0, 2), sobol_owen(i, 1, 2), wo, alpha).unwrap();
                    s.h.z > cos5
                })
                .count() as f64
                / n as f64
        };
        let at_normal = frac(Vec3::Z);
        assert!((at_normal - expected).abs() < 2e-3, "{at_normal} vs {expected}");
        assert!(frac(Vec3::new(0.5, -0.2, 0.8).normalize()) > 0.98);
    }

    #[test]
    fn normal_view_histogram_matches_cosine_density() {
        // at wo = n and alpha = 1 the density of h is cos/pi, so cos^2 is uniform
        let n = 100_000u32;
        let bins = 20;
        let mut counts = vec![0f64; bins];
        for i in 0..n {
            let s = sample_vndf(sobol_owen(i, 0, 5), sobol_owen(i, 1, 5), Vec3::Z, 1.0).unwrap();
            let c2 = s.h.z * s.h.z;
            counts[((c2 * bins as f64) as usize).min(bins - 1)] += 1.0;
        }
        let e = n as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|c| (c - e) * (c - e) / e).sum();
        // 19 degrees of freedom, 99.9% quantile is 43.8
        assert!(chi2 < 43.8, "chi2 = {chi2}");
    }

    #[test]
    fn importance_sampling_matches_quadrature() {
        let alpha = 0.4;
        let wo = spherical_to_dir(0.9, 1.1);
        let phi_fn = |h: Vec3| 1.0 + 0.5 * h.x + h.z * h.z;
        let (nt, np) = (1000, 256);
        let mut quad = 0.0;
        for i in 0..nt {
            let t = (i as f64 + 0.5) / nt as f64 * PI / 2.0;
            for j in 0..np {
                let p = (j as f64 + 0.5) / np as f64 * 2.0 * PI;
                let h = spherical_to_dir(t, p);
                quad += vndf_pdf(h, wo, Vec3::Z, alpha) * phi_fn(h) * t.sin();
            }
        }
        quad *= (PI / 2.0 / nt as f64) * (2.0 * PI / np as f64);
        let n = 1 << 14;
        let mc: f64 = (0..n)
            .map(|i| {
                let s = sample_vndf(sobol_owen(i, 0, 3), sobol_owen(i, 1, 3), wo, alpha).unwrap();
                phi_fn(s.h)
            })
            .sum::<f64>()
            / n as f64;
        assert!((mc - quad).abs() / quad < 0.02, "{mc} vs {quad}");
    }
}
