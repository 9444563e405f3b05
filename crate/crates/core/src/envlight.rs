//! Far-field illumination stored as a log-parameterized equirectangular
//! image, with summed-area-table rectangle means and degree-2 spherical
//! harmonic irradiance.
//!
//! Row `r` covers polar angles `[r, r + 1) * pi / H` measured from +z and
//! column `c` covers azimuths `[c, c + 1) * 2 pi / W` measured from +x
//! toward +y.

use std::f64::consts::PI;

use crate::math::{dir_to_spherical, spherical_to_dir, Vec3};

/// Clamped-cosine convolution constants per SH band.
pub const COSINE_LOBE: [f64; 3] = [PI, 2.0 * PI / 3.0, PI / 4.0];

const BAND: [usize; 9] = [0, 1, 1, 1, 2, 2, 2, 2, 2];

#[derive(Clone, Debug, PartialEq)]
pub struct SummedAreaTable {
    pub h: usize,
    pub w: usize,
    /// `(h + 1) x (w + 1) x 3` prefix sums.
    pub data: Vec<f64>,
}

impl SummedAreaTable {
    pub fn build(h: usize, w: usize, radiance: &[f64]) -> Self {
        let stride = w + 1;
        let mut data = vec![0.0; (h + 1) * stride * 3];
        for r in 0..h {
            let mut row = [0.0; 3];
            for c in 0..w {
                for ch in 0..3 {
                    row[ch] += radiance[(r * w + c) * 3 + ch];
                    data[((r + 1) * stride + c + 1) * 3 + ch] = data[(r * stride + c + 1) * 3 + ch] + row[ch];
                }
            }
        }
        SummedAreaTable { h, w, data }
    }

    fn at(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[(r * (self.w + 1) + c) * 3 + ch]
    }

    /// Sum of radiance over rows `[r0, r1)` and columns `[c0, c1)`.
    pub fn rect_sum(&self, rect: PixelRect) -> Vec3 {
        let PixelRect { r0, r1, c0, c1 } = rect;
        let s = |ch| self.at(r1, c1, ch) - self.at(r0, c1, ch) - self.at(r1, c0, ch) + self.at(r0, c0, ch);
        Vec3::new(s(0), s(1), s(2))
    }
}

/// Half-open pixel rectangle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PixelRect {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

impl PixelRect {
    pub fn area(&self) -> usize {
        (self.r1 - self.r0) * (self.c1 - self.c0)
    }
}

/// Pixel coverage of a spherical rectangle: one rectangle, or two when the
/// azimuth range crosses the seam.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Footprint {
    pub rects: [PixelRect; 2],
    pub n_rects: usize,
}

impl Footprint {
    pub fn rects(&self) -> &[PixelRect] {
        &self.rects[..self.n_rects]
    }

    pub fn pixel_count(&self) -> usize {
        self.rects().iter().map(|r| r.area()).sum()
    }
}

/// Degree-2 SH projection of the radiance, 9 coefficients per channel.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct IrradianceSH {
    pub coeffs: [[f64; 3]; 9],
}

/// Real orthonormal SH basis up to degree 2.
pub fn sh9(v: Vec3) -> [f64; 9] {
    let s = crate::materials::sh_encode(v);
    let mut out = [0.0; 9];
    out.copy_from_slice(&s[..9]);
    out
}

/// Partial derivatives of [`sh9`] with respect to the Cartesian components.
pub fn sh9_gradient(v: Vec3) -> [Vec3; 9] {
    let c1 = 0.488_602_511_902_919_9;
    let c2 = 1.092_548_430_592_079_2;
    let c3 = 0.315_391_565_252_520_05;
    let c4 = 0.546_274_215_296_039_6;
    let Vec3 { x, y, z } = v;
    [
        Vec3::ZERO,
        Vec3::new(0.0, c1, 0.0),
        Vec3::new(0.0, 0.0, c1),
        Vec3::new(c1, 0.0, 0.0),
        Vec3::new(c2 * y, c2 * x, 0.0),
        Vec3::new(0.0, c2 * z, c2 * y),
        Vec3::new(0.0, 0.0, 6.0 * c3 * z),
        Vec3::new(c2 * z, 0.0, c2 * x),
        Vec3::new(2.0 * c4 * x, -2.0 * c4 * y, 0.0),
    ]
}

impl IrradianceSH {
    /// Irradiance before clamping.
    pub fn irradiance_raw(&self, n: Vec3) -> Vec3 {
        let y = sh9(n);
        let mut e = [0.0; 3];
        for k in 0..9 {
            let a = COSINE_LOBE[BAND[k]] * y[k];
            for (ch, ek) in e.iter_mut().enumerate() {
                *ek += a * self.coeffs[k][ch];
            }
        }
        Vec3::from_array(e)
    }

    /// Irradiance at normal `n`, negative ringing clamped to zero.
    pub fn irradiance(&self, n: Vec3) -> Vec3 {
        let e = self.irradiance_raw(n);
        Vec3::new(e.x.max(0.0), e.y.max(0.0), e.z.max(0.0))
    }

    /// Irradiance independent of orientation: the band-0 term alone.
    pub fn mean_irradiance(&self) -> Vec3 {
        let y0 = 0.282_094_791_773_878_14;
        let c = self.coeffs[0];
        Vec3::new(c[0], c[1], c[2]) * (COSINE_LOBE[0] * y0)
    }

    /// Accumulates coefficient adjoints of [`Self::mean_irradiance`].
    pub fn backprop_mean(&self, out_adj: Vec3, coeff_adj: &mut [[f64; 3]; 9]) {
        let y0 = 0.282_094_791_773_878_14;
        for ch in 0..3 {
            coeff_adj[0][ch] += out_adj[ch] * COSINE_LOBE[0] * y0;
        }
    }

    /// Adjoints of `irradiance(n)` given the output adjoint: returns the
    /// adjoint of `n` and accumulates coefficient adjoints into `coeff_adj`.
    pub fn backprop(&self, n: Vec3, out_adj: Vec3, coeff_adj: &mut [[f64; 3]; 9]) -> Vec3 {
        let raw = self.irradiance_raw(n);
        let adj = [
            if raw.x > 0.0 { out_adj.x } else { 0.0 },
            if raw.y > 0.0 { out_adj.y } else { 0.0 },
            if raw.z > 0.0 { out_adj.z } else { 0.0 },
        ];
        let y = sh9(n);
        let dy = sh9_gradient(n);
        let mut dn = Vec3::ZERO;
        for k in 0..9 {
            let a = COSINE_LOBE[BAND[k]];
            let mut s = 0.0;
            for ch in 0..3 {
                coeff_adj[k][ch] += adj[ch] * a * y[k];
                s += adj[ch] * self.coeffs[k][ch];
            }
            dn += dy[k] * (a * s);
        }
        dn
    }
}

/// Equirectangular environment map parameterized by per-pixel log radiance.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentMap {
    pub h: usize,
    pub w: usize,
    /// Row-major `h x w x 3`.
    pub log_values: Vec<f64>,
    radiance: Vec<f64>,
    sat: SummedAreaTable,
    sh: IrradianceSH,
    stale: bool,
}

impl EnvironmentMap {
    pub fn constant(h: usize, w: usize, value: f64) -> Self {
        Self::from_log_values(h, w, vec![value.ln(); h * w * 3])
    }

    pub fn from_log_values(h: usize, w: usize, log_values: Vec<f64>) -> Self {
        assert!(h >= 1 && w >= 1 && log_values.len() == h * w * 3);
        let mut env = EnvironmentMap {
            h,
            w,
            log_values,
            radiance: Vec::new(),
            sat: SummedAreaTable::build(0, 0, &[]),
            sh: IrradianceSH::default(),
            stale: true,
        };
        env.rebuild();
        env
    }

    /// Builds a map from linear radiance; values are floored at 1e-12.
    pub fn from_radiance(h: usize, w: usize, radiance: &[f64]) -> Self {
        Self::from_log_values(h, w, radiance.iter().map(|v| v.max(1e-12).ln()).collect())
    }

    /// Mutable access to the log values; marks derived tables stale until
    /// [`EnvironmentMap::rebuild`].
    pub fn log_values_mut(&mut self) -> &mut [f64] {
        self.stale = true;
        &mut self.log_values
    }

    pub fn is_stale(&self) -> bool {
        self.stale
    }

    /// Recomputes radiance, the summed-area table and the SH projection.
    pub fn rebuild(&mut self) {
        self.radiance = self.log_values.iter().map(|v| v.exp()).collect();
        self.sat = SummedAreaTable::build(self.h, self.w, &self.radiance);
        self.sh = project_sh_radiance(self.h, self.w, &self.radiance);
        self.stale = false;
    }

    pub fn radiance(&self) -> &[f64] {
        debug_assert!(!self.stale, "environment queried before rebuild");
        &self.radiance
    }

    pub fn sat(&self) -> &SummedAreaTable {
        debug_assert!(!self.stale, "environment queried before rebuild");
        &self.sat
    }

    pub fn sh(&self) -> &IrradianceSH {
        debug_assert!(!self.stale, "environment queried before rebuild");
        &self.sh
    }

    pub fn pixel_radiance(&self, index: usize) -> Vec3 {
        let r = self.radiance();
        Vec3::new(r[index * 3], r[index * 3 + 1], r[index * 3 + 2])
    }

    /// Direction of a pixel center.
    pub fn pixel_dir(&self, r: usize, c: usize) -> Vec3 {
        spherical_to_dir(
            (r as f64 + 0.5) * PI / self.h as f64,
            (c as f64 + 0.5) * 2.0 * PI / self.w as f64,
        )
    }

    /// Index of the pixel containing `(theta, phi)`; `phi` is wrapped.
    pub fn pixel_index(&self, theta: f64, phi: f64) -> usize {
        let r = ((theta / PI * self.h as f64).floor().max(0.0) as usize).min(self.h - 1);
        let c = ((phi.rem_euclid(2.0 * PI) / (2.0 * PI) * self.w as f64).floor() as usize).min(self.w - 1);
        r * self.w + c
    }

    pub fn radiance_at(&self, theta: f64, phi: f64) -> Vec3 {
        self.pixel_radiance(self.pixel_index(theta, phi))
    }

    pub fn radiance_dir(&self, d: Vec3) -> Vec3 {
        let (t, p) = dir_to_spherical(d);
        self.radiance_at(t, p)
    }

    /// Pixels covered by `[theta +- dtheta/2] x [phi +- dphi/2]`, edges
    /// rounded outward, polar range clamped, azimuth wrapped.
    pub fn footprint(&self, theta: f64, phi: f64, dtheta: f64, dphi: f64) -> Footprint {
        let (h, w) = (self.h as f64, self.w as f64);
        let mut r0 = ((theta - dtheta / 2.0) / PI * h).floor().max(0.0) as usize;
        let mut r1 = (((theta + dtheta / 2.0) / PI * h).ceil().min(h)).max(0.0) as usize;
        if r1 <= r0 {
            let r = ((theta / PI * h).floor().max(0.0) as usize).min(self.h - 1);
            r0 = r;
            r1 = r + 1;
        }
        r0 = r0.min(self.h - 1);
        r1 = r1.clamp(r0 + 1, self.h);

        let a = (phi - dphi / 2.0) / (2.0 * PI) * w;
        let b = (phi + dphi / 2.0) / (2.0 * PI) * w;
        let mut c0 = a.floor() as i64;
        let mut c1 = b.ceil() as i64;
        if c1 <= c0 {
            c0 = (phi / (2.0 * PI) * w).floor() as i64;
            c1 = c0 + 1;
        }
        let len = (c1 - c0) as usize;
        let mut fp = Footprint::default();
        if len >= self.w {
            fp.rects[0] = PixelRect { r0, r1, c0: 0, c1: self.w };
            fp.n_rects = 1;
            return fp;
        }
        let start = c0.rem_euclid(self.w as i64) as usize;
        if start + len <= self.w {
            fp.rects[0] = PixelRect { r0, r1, c0: start, c1: start + len };
            fp.n_rects = 1;
        } else {
            fp.rects[0] = PixelRect { r0, r1, c0: start, c1: self.w };
            fp.rects[1] = PixelRect { r0, r1, c0: 0, c1: start + len - self.w };
            fp.n_rects = 2;
        }
        fp
    }

    pub fn footprint_mean(&self, fp: &Footprint) -> Vec3 {
        let sat = self.sat();
        let mut s = Vec3::ZERO;
        for r in fp.rects() {
            s += sat.rect_sum(*r);
        }
        s / fp.pixel_count() as f64
    }

    /// Mean radiance over a spherical rectangle centered at `(theta, phi)`.
    pub fn mean_query(&self, theta: f64, phi: f64, dtheta: f64, dphi: f64) -> Vec3 {
        self.footprint_mean(&self.footprint(theta, phi, dtheta, dphi))
    }

    pub fn irradiance(&self, n: Vec3) -> Vec3 {
        self.sh().irradiance(n)
    }
}

/// Rectangle extent whose pixel count matches `n` samples drawn with
/// solid-angle density `pdf` around polar angle `theta`.
pub fn rect_size(pdf: f64, theta: f64, n: usize, h: usize, w: usize) -> (f64, f64) {
    let dphi = (2.0 * PI * PI * (n as f64 / (h * w) as f64) * pdf).sqrt();
    (dphi * theta.sin().max(1e-4), dphi)
}

pub fn project_sh(env: &EnvironmentMap) -> IrradianceSH {
    project_sh_radiance(env.h, env.w, env.radiance())
}

/// Solid angle weight of a pixel in row `r`.
pub fn pixel_solid_angle(r: usize, h: usize, w: usize) -> f64 {
    let theta = (r as f64 + 0.5) * PI / h as f64;
    theta.sin() * (PI / h as f64) * (2.0 * PI / w as f64)
}

fn project_sh_radiance(h: usize, w: usize, radiance: &[f64]) -> IrradianceSH {
    let mut coeffs = [[0.0; 3]; 9];
    for r in 0..h {
        let theta = (r as f64 + 0.5) * PI / h as f64;
        let dw = pixel_solid_angle(r, h, w);
        for c in 0..w {
            let y = sh9(spherical_to_dir(theta, (c as f64 + 0.5) * 2.0 * PI / w as f64));
            let i = (r * w + c) * 3;
            for k in 0..9 {
                for ch in 0..3 {
                    coeffs[k][ch] += radiance[i + ch] * y[k] * dw;
                }
            }
        }
    }
    IrradianceSH { coeffs }
}

/// Gradient accumulator for environment queries, reduced into adjoints of
/// the log values by [`EnvGradient::finish`].
#[derive(Clone, Debug, PartialEq)]
pub struct EnvGradient {
    pub h: usize,
    pub w: usize,
    /// 2D difference array of per-pixel radiance adjoints from rectangle
    /// means, `(h + 1) x (w + 1) x 3`.
    pub rect_diff: Vec<f64>,
    /// Direct per-pixel radiance adjoints.
    pub pixel: Vec<f64>,
    /// Adjoints of the SH coefficients.
    pub sh: [[f64; 3]; 9],
}

impl EnvGradient {
    pub fn new(h: usize, w: usize) -> Self {
        EnvGradient {
            h,
            w,
            rect_diff: vec![0.0; (h + 1) * (w + 1) * 3],
            pixel: vec![0.0; h * w * 3],
            sh: [[0.0; 3]; 9],
        }
    }

    pub fn add_footprint(&mut self, fp: &Footprint, out_adj: Vec3) {
        let scale = 1.0 / fp.pixel_count() as f64;
        let stride = self.w + 1;
        for r in fp.rects() {
            for (ch, a) in out_adj.to_array().iter().enumerate() {
                let v = a * scale;
                self.rect_diff[(r.r0 * stride + r.c0) * 3 + ch] += v;
                self.rect_diff[(r.r0 * stride + r.c1) * 3 + ch] -= v;
                self.rect_diff[(r.r1 * stride + r.c0) * 3 + ch] -= v;
                self.rect_diff[(r.r1 * stride + r.c1) * 3 + ch] += v;
            }
        }
    }

    pub fn add_pixel(&mut self, index: usize, out_adj: Vec3) {
        for (ch, a) in out_adj.to_array().iter().enumerate() {
            self.pixel[index * 3 + ch] += a;
        }
    }

    pub fn accumulate(&mut self, other: &EnvGradient) {
        for (a, b) in self.rect_diff.iter_mut().zip(&other.rect_diff) {
            *a += b;
        }
        for (a, b) in self.pixel.iter_mut().zip(&other.pixel) {
            *a += b;
        }
        for k in 0..9 {
            for ch in 0..3 {
                self.sh[k][ch] += other.sh[k][ch];
            }
        }
    }

    /// Adjoints of the log values of `env`.
    pub fn finish(&self, env: &EnvironmentMap) -> Vec<f64> {
        let (h, w) = (self.h, self.w);
        let stride = w + 1;
        let mut out = self.pixel.clone();
        // prefix-sum the difference array in place of a per-pixel scatter
        let mut run = vec![0.0; (h + 1) * stride * 3];
        for r in 0..h {
            for c in 0..w {
                for ch in 0..3 {
                    let i = (r * stride + c) * 3 + ch;
                    let up = if r > 0 { run[((r - 1) * stride + c) * 3 + ch] } else { 0.0 };
                    let left = if c > 0 { run[(r * stride + c - 1) * 3 + ch] } else { 0.0 };
                    let diag = if r > 0 && c > 0 { run[((r - 1) * stride + c - 1) * 3 + ch] } else { 0.0 };
                    run[i] = self.rect_diff[i] + up + left - diag;
                    out[(r * w + c) * 3 + ch] += run[i];
                }
            }
        }
        if self.sh.iter().flatten().any(|&v| v != 0.0) {
            for r in 0..h {
                let theta = (r as f64 + 0.5) * PI / h as f64;
                let dw = pixel_solid_angle(r, h, w);
                for c in 0..w {
                    let y = sh9(spherical_to_dir(theta, (c as f64 + 0.5) * 2.0 * PI / w as f64));
                    for ch in 0..3 {
                        let mut s = 0.0;
                        for k in 0..9 {
                            s += self.sh[k][ch] * y[k];
                        }
                        out[(r * w + c) * 3 + ch] += s * dw;
                    }
                }
            }
        }
        let radiance = env.radiance();
        for (o, l) in out.iter_mut().zip(radiance) {
            *o *= l;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (*state >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn constant_initialization() {
        let env = EnvironmentMap::constant(8, 16, 0.5);
        assert!((env.radiance_at(1.0, 2.0).x - 0.5).abs() < 1e-15);
        assert_eq!(env.radiance_at(1.0, 2.0), env.radiance_at(1.0, 2.0 + 2.0 * PI));
    }

    #[test]
    fn single_bright_pixel() {
        let mut log = vec![0.0; 8 * 16 * 3];
        let idx = 3 * 16 + 5;
        log[idx * 3] = 2.0;
        let env = EnvironmentMap::from_log_values(8, 16, log);
        let theta = 3.5 * PI / 8.0;
        let phi = 5.5 * 2.0 * PI / 16.0;
        assert!((env.radiance_at(theta, phi).x - 2f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn rect_size_reference() {
        let (dt, dp) = rect_size(1.0 / (4.0 * PI), PI / 2.0, 128, 512, 1024);
        assert!((dp - 0.01958).abs() < 1e-5, "{dp}");
        assert!((dt - dp).abs() < 1e-12);
        let (dt6, dp6) = rect_size(1.0 / (4.0 * PI), PI / 6.0, 128, 512, 1024);
        assert!((dt6 - 0.5 * dt).abs() < 1e-12 && dp6 == dp);
    }

    #[test]
    fn constant_map_means() {
        let env = EnvironmentMap::constant(16, 32, 1.7);
        for &(t, p, dt, dp) in &[(0.1, 0.2, 0.5, 0.7), (3.0, 6.2, 0.3, 1.0), (1.5, 3.0, 10.0, 10.0)] {
            assert!((env.mean_query(t, p, dt, dp).y - 1.7).abs() < 1e-12);
        }
    }

    #[test]
    fn tiny_rectangle_is_one_pixel() {
        let mut s = 1u64;
        let rad: Vec<f64> = (0..8 * 16 * 3).map(|_| lcg(&mut s) + 0.1).collect();
        let env = EnvironmentMap::from_radiance(8, 16, &rad);
        let fp = env.footprint(1.0, 2.0, 1e-6, 1e-6);
        assert_eq!(fp.pixel_count(), 1);
        assert!((env.footprint_mean(&fp) - env.radiance_at(1.0, 2.0)).length() < 1e-12);
    }

    #[test]
    fn constant_map_irradiance() {
        let env = EnvironmentMap::constant(64, 128, 0.8);
        for n in [Vec3::Z, Vec3::X, Vec3::new(0.3, -0.5, 0.2).normalize()] {
            let e = env.irradiance(n);
            assert!((e.x - PI * 0.8).abs() < 1e-3 * PI * 0.8, "{e:?}");
        }
    }

    #[test]
    fn zonal_pattern_projects_onto_one_coefficient() {
        let (h, w) = (64, 128);
        let mut rad = vec![0.0; h * w * 3];
        let env0 = EnvironmentMap::constant(h, w, 1.0);
        for r in 0..h {
            for c in 0..w {
                let y = sh9(env0.pixel_dir(r, c))[2];
                for ch in 0..3 {
                    rad[(r * w + c) * 3 + ch] = y;
                }
            }
        }
        let shc = project_sh_radiance(h, w, &rad);
        let main = shc.coeffs[2][0];
        for k in 0..9 {
            if k != 2 {
                assert!(shc.coeffs[k][0].abs() < 0.01 * main.abs());
            }
        }
    }

    #[test]
    fn irradiance_gradient_matches_finite_differences() {
        let mut s = 3u64;
        let rad: Vec<f64> = (0..16 * 32 * 3).map(|_| lcg(&mut s) + 0.2).collect();
        let env = EnvironmentMap::from_radiance(16, 32, &rad);
        let sh = env.sh();
        let n = Vec3::new(0.3, 0.4, 0.8);
        let adj = Vec3::new(0.5, -0.2, 1.0);
        let mut cadj = [[0.0; 3]; 9];
        let dn = sh.backprop(n, adj, &mut cadj);
        let f = |n: Vec3| sh.irradiance(n).dot(adj);
        let h = 1e-6;
        for k in 0..3 {
            let mut e = [0.0; 3];
            e[k] = h;
            let e = Vec3::from_array(e);
            let fd = (f(n + e) - f(n - e)) / (2.0 * h);
            assert!((fd - dn[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn env_gradient_matches_finite_differences() {
        let (h, w) = (6, 12);
        let mut s = 9u64;
        let log: Vec<f64> = (0..h * w * 3).map(|_| lcg(&mut s) - 0.5).collect();
        let env = EnvironmentMap::from_log_values(h, w, log.clone());
        let fp = env.footprint(1.2, 6.0, 0.9, 1.5);
        assert_eq!(fp.n_rects, 2);
        let n = Vec3::new(0.1, -0.7, 0.4).normalize();
        let a1 = Vec3::new(1.0, 0.3, -0.4);
        let a2 = Vec3::new(0.2, 0.9, 0.5);
        let a3 = Vec3::new(-0.3, 0.4, 0.1);
        let objective = |env: &EnvironmentMap| {
            env.footprint_mean(&fp).dot(a1) + env.irradiance(n).dot(a2) + env.pixel_radiance(7).dot(a3)
        };
        let mut g = EnvGradient::new(h, w);
        g.add_footprint(&fp, a1);
        env.sh().backprop(n, a2, &mut g.sh);
        g.add_pixel(7, a3);
        let grad = g.finish(&env);
        let eps = 1e-6;
        for i in 0..h * w * 3 {
            let mut lp = log.clone();
            lp[i] += eps;
            let mut lm = log.clone();
            lm[i] -= eps;
            let fd = (objective(&EnvironmentMap::from_log_values(h, w, lp))
                - objective(&EnvironmentMap::from_log_values(h, w, lm)))
                / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-7, "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn rebuild_clears_staleness() {
        let mut env = EnvironmentMap::constant(4, 8, 1.0);
        env.log_values_mut()[0] = 1.0;
        assert!(env.is_stale());
        env.rebuild();
        assert!(!env.is_stale());
        assert!((env.pixel_radiance(0).x - 1f64.exp()).abs() < 1e-12);
    }
}
