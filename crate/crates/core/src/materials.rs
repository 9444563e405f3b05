//! Per-point material decoding and the analytic BRDF terms, plus the
//! learned gain network that modulates the specular lobe.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::math::{sigmoid, Mat3, Vec3};

/// Lower bound on decoded roughness; keeps the distribution and the visible
/// normal sampler well conditioned.
pub const ALPHA_MIN: f64 = 0.01;

/// Number of decoder heads: roughness, albedo RGB, F0 RGB.
pub const DECODER_OUTPUTS: usize = 7;

/// Degree-4 spherical harmonic encoding width.
pub const SH4_LEN: usize = 25;

/// Constant part of the gain network input: encodings of the half and
/// difference vectors.
pub const GAIN_ENCODING_LEN: usize = 2 * SH4_LEN;

#[derive(Clone, Debug, PartialEq)]
pub struct MaterialSample {
    pub alpha: f64,
    pub albedo: Vec3,
    pub f0: Vec3,
    pub features: Vec<f64>,
}

/// Single linear layer with sigmoid activation mapping features to
/// roughness, albedo and normal-incidence reflectance.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub feature_dim: usize,
    /// Row-major `DECODER_OUTPUTS x (feature_dim + 1)`; the last column is the bias.
    pub weights: Vec<f64>,
}

impl Decoder {
    pub fn zeros(feature_dim: usize) -> Self {
        Decoder {
            feature_dim,
            weights: vec![0.0; DECODER_OUTPUTS * (feature_dim + 1)],
        }
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let w = self.feature_dim + 1;
        &self.weights[k * w..(k + 1) * w]
    }

    /// Pre-activation outputs `W x + b`.
    pub fn linear(&self, x: &[f64]) -> [f64; DECODER_OUTPUTS] {
        debug_assert_eq!(x.len(), self.feature_dim);
        let mut out = [0.0; DECODER_OUTPUTS];
        for (k, o) in out.iter_mut().enumerate() {
            let row = self.row(k);
            *o = row[self.feature_dim] + row[..self.feature_dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        out
    }
}

/// Maps decoder pre-activations to material parameters.
pub fn activate_material(pre: &[f64; DECODER_OUTPUTS]) -> (f64, Vec3, Vec3) {
    let alpha = ALPHA_MIN + (1.0 - ALPHA_MIN) * sigmoid(pre[0]);
    let albedo = Vec3::new(sigmoid(pre[1]), sigmoid(pre[2]), sigmoid(pre[3]));
    let f0 = Vec3::new(sigmoid(pre[4]), sigmoid(pre[5]), sigmoid(pre[6]));
    (alpha, albedo, f0)
}

pub fn decode_material(x: &[f64], decoder: &Decoder) -> MaterialSample {
    let (alpha, albedo, f0) = activate_material(&decoder.linear(x));
    MaterialSample {
        alpha,
        albedo,
        f0,
        features: x.to_vec(),
    }
}

/// Schlick's approximation. `cos_oh` outside `[0, 1]` is clamped.
pub fn fresnel_schlick(f0: Vec3, cos_oh: f64) -> Vec3 {
    if !(0.0..=1.0).contains(&cos_oh) {
        log::debug!("fresnel_schlick: cos {cos_oh} clamped to [0, 1]");
    }
    let c = cos_oh.clamp(0.0, 1.0);
    let k = (1.0 - c).powi(5);
    Vec3::new(
        f0.x + (1.0 - f0.x) * k,
        f0.y + (1.0 - f0.y) * k,
        f0.z + (1.0 - f0.z) * k,
    )
}

/// Trowbridge-Reitz normal distribution.
pub fn tr_distribution(cos_nh: f64, alpha: f64) -> Result<f64> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidRoughness(alpha));
    }
    Ok(ndf(cos_nh, alpha))
}

pub(crate) fn ndf(cos_nh: f64, alpha: f64) -> f64 {
    if cos_nh <= 0.0 {
        return 0.0;
    }
    let a2 = alpha * alpha;
    let d = cos_nh * cos_nh * (a2 - 1.0) + 1.0;
    a2 / (PI * d * d)
}

/// Smith masking for the Trowbridge-Reitz distribution.
pub fn smith_g1(cos_nv: f64, alpha: f64) -> f64 {
    if cos_nv <= 0.0 {
        return 0.0;
    }
    let a2 = alpha * alpha;
    2.0 * cos_nv / (cos_nv + (a2 + (1.0 - a2) * cos_nv * cos_nv).sqrt())
}

/// Orthonormal basis whose rows are `(T, B, n)`; multiplying a world vector
/// by it yields local coordinates with the normal along +z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadingFrame {
    pub m: Mat3,
}

impl ShadingFrame {
    pub fn to_local(&self, v: Vec3) -> Vec3 {
        self.m.mul_vec(v)
    }

    pub fn to_world(&self, v: Vec3) -> Vec3 {
        let [t, b, n] = self.m.rows;
        t * v.x + b * v.y + n * v.z
    }

    pub fn normal(&self) -> Vec3 {
        self.m.rows[2]
    }
}

pub fn shading_frame(n: Vec3) -> Result<ShadingFrame> {
    let len = n.length();
    if len < 1e-12 || !len.is_finite() {
        return Err(Error::DegenerateNormal);
    }
    let n = n / len;
    let mut t = Vec3::Z.cross(n);
    if t.length() < 1e-6 {
        t = Vec3::X.cross(n);
    }
    let t = t.normalize();
    let b = n.cross(t);
    Ok(ShadingFrame {
        m: Mat3::from_rows(t, b, n),
    })
}

/// Half and difference vectors in local frames: the half vector in the
/// frame of `n`, the incident direction in the frame of the half vector.
pub fn half_diff_encode(wo: Vec3, wi: Vec3, n: Vec3) -> Result<(Vec3, Vec3)> {
    let sum = wo + wi;
    if sum.length() < 1e-9 {
        return Err(Error::AntiparallelDirections);
    }
    let h = sum.normalize();
    let h_local = shading_frame(n)?.to_local(h).normalize();
    let d_local = shading_frame(h)?.to_local(wi).normalize();
    Ok((h_local, d_local))
}

/// Real orthonormal spherical harmonics up to degree 4, ordered by
/// `(l, m)` with `m = -l..=l`.
pub fn sh_encode(v: Vec3) -> [f64; SH4_LEN] {
    let Vec3 { x, y, z } = v;
    let (x2, y2, z2) = (x * x, y * y, z * z);
    [
        0.282_094_791_773_878_14,
        0.488_602_511_902_919_9 * y,
        0.488_602_511_902_919_9 * z,
        0.488_602_511_902_919_9 * x,
        1.092_548_430_592_079_2 * x * y,
        1.092_548_430_592_079_2 * y * z,
        0.315_391_565_252_520_05 * (3.0 * z2 - 1.0),
        1.092_548_430_592_079_2 * x * z,
        0.546_274_215_296_039_6 * (x2 - y2),
        0.590_043_589_926_643_5 * y * (3.0 * x2 - y2),
        2.890_611_442_640_554 * x * y * z,
        0.457_045_799_464_465_8 * y * (5.0 * z2 - 1.0),
        0.373_176_332_590_115_4 * z * (5.0 * z2 - 3.0),
        0.457_045_799_464_465_8 * x * (5.0 * z2 - 1.0),
        1.445_305_721_320_277 * z * (x2 - y2),
        0.590_043_589_926_643_5 * x * (x2 - 3.0 * y2),
        2.503_342_941_796_705 * x * y * (x2 - y2),
        1.770_130_769_779_930_5 * y * z * (3.0 * x2 - y2),
        0.946_174_695_757_560_1 * x * y * (7.0 * z2 - 1.0),
        0.669_046_543_557_289_2 * y * z * (7.0 * z2 - 3.0),
        0.105_785_546_915_204_2 * (35.0 * z2 * z2 - 30.0 * z2 + 3.0),
        0.669_046_543_557_289_2 * x * z * (7.0 * z2 - 3.0),
        0.473_087_347_878_780_1 * (x2 - y2) * (7.0 * z2 - 1.0),
        1.770_130_769_779_930_5 * x * z * (x2 - 3.0 * y2),
        0.625_835_735_449_176_1 * (x2 * x2 - 6.0 * x2 * y2 + y2 * y2),
    ]
}

/// Encoded constant input of the gain network for one direction pair.
pub fn gain_encoding(h_local: Vec3, d_local: Vec3) -> [f64; GAIN_ENCODING_LEN] {
    let mut out = [0.0; GAIN_ENCODING_LEN];
    out[..SH4_LEN].copy_from_slice(&sh_encode(h_local));
    out[SH4_LEN..].copy_from_slice(&sh_encode(d_local));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GainMode {
    Neural,
    Identity,
}

/// Perceptron with ReLU hidden layers and a sigmoid RGB output. Input is the
/// degree-4 encodings of the half and difference vectors followed by the
/// point's feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GainNetwork {
    pub mode: GainMode,
    pub input_dim: usize,
    pub hidden: usize,
    pub n_hidden_layers: usize,
    /// Layers in order, each stored as row-major weights then biases.
    pub weights: Vec<f64>,
}

pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub offset: usize,
}

impl LayerShape {
    pub fn bias_offset(&self) -> usize {
        self.offset + self.inputs * self.outputs
    }

    pub fn len(&self) -> usize {
        (self.inputs + 1) * self.outputs
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl GainNetwork {
    pub fn new(mode: GainMode, feature_dim: usize, hidden: usize, n_hidden_layers: usize) -> Self {
        let input_dim = GAIN_ENCODING_LEN + feature_dim;
        let mut net = GainNetwork {
            mode,
            input_dim,
            hidden,
            n_hidden_layers,
            weights: Vec::new(),
        };
        let total: usize = net.layers().iter().map(|l| l.len()).sum();
        net.weights = vec![0.0; total];
        net
    }

    /// Xavier-uniform weights, zero biases, drawn from `uniform` in `[0, 1)`.
    pub fn init_weights(&mut self, mut uniform: impl FnMut() -> f64) {
        for layer in self.layers() {
            let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut self.weights[layer.offset..layer.bias_offset()] {
                *w = bound * (2.0 * uniform() - 1.0);
            }
            for b in &mut self.weights[layer.bias_offset()..layer.offset + layer.len()] {
                *b = 0.0;
            }
        }
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat_n(self.hidden, self.n_hidden_layers));
        dims.push(3);
        let mut offset = 0;
        dims.windows(2)
            .map(|w| {
                let l = LayerShape {
                    inputs: w[0],
                    outputs: w[1],
                    offset,
                };
                offset += l.len();
                l
            })
            .collect()
    }

    pub fn feature_dim(&self) -> usize {
        self.input_dim - GAIN_ENCODING_LEN
    }

    /// Forward pass returning the output and every layer's activations
    /// (input first, sigmoid output last).
    pub fn forward_cached(&self, input: &[f64]) -> Vec<Vec<f64>> {
        debug_assert_eq!(input.len(), self.input_dim);
        let layers = self.layers();
        let mut acts = vec![input.to_vec()];
        for (li, l) in layers.iter().enumerate() {
            let x = acts.last().unwrap();
            let w = &self.weights[l.offset..l.bias_offset()];
            let b = &self.weights[l.bias_offset()..l.offset + l.len()];
            let last = li + 1 == layers.len();
            let y: Vec<f64> = (0..l.outputs)
                .map(|o| {
                    let row = &w[o * l.inputs..(o + 1) * l.inputs];
                    let s = b[o] + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
                    if last {
                        sigmoid(s)
                    } else {
                        s.max(0.0)
                    }
                })
                .collect();
            acts.push(y);
        }
        acts
    }

    pub fn forward(&self, input: &[f64]) -> [f64; 3] {
        if self.mode == GainMode::Identity {
            return [1.0; 3];
        }
        let acts = self.forward_cached(input);
        let out = acts.last().unwrap();
        [out[0], out[1], out[2]]
    }

    /// Accumulates `d(out . out_adj) / d(weights)` into `grad` and returns the
    /// adjoint of the input vector.
    pub fn backward(&self, input: &[f64], out_adj: &[f64], grad: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grad.len(), self.weights.len());
        if self.mode == GainMode::Identity {
            return vec![0.0; input.len()];
        }
        let layers = self.layers();
        let acts = self.forward_cached(input);
        // adjoint w.r.t. pre-activation of the current layer
        let out = acts.last().unwrap();
        let mut delta: Vec<f64> = out
            .iter()
            .zip(out_adj)
            .map(|(s, a)| a * s * (1.0 - s))
            .collect();
        for li in (0..layers.len()).rev() {
            let l = &layers[li];
            let x = &acts[li];
            let bo = l.bias_offset();
            for o in 0..l.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[bo + o] += d;
                let row = &mut grad[l.offset + o * l.inputs..l.offset + (o + 1) * l.inputs];
                for (g, v) in row.iter_mut().zip(x) {
                    *g += d * v;
                }
            }
            let w = &self.weights[l.offset..bo];
            let mut dx = vec![0.0; l.inputs];
            for o in 0..l.outputs {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (i, dxi) in dx.iter_mut().enumerate() {
                    *dxi += d * w[o * l.inputs + i];
                }
            }
            if li > 0 {
                // ReLU of the previous layer
                for (dxi, a) in dx.iter_mut().zip(x) {
                    if *a <= 0.0 {
                        *dxi = 0.0;
                    }
                }
            }
            delta = dx;
        }
        delta
    }
}

/// Builds the full network input `[encodings; x]`.
pub fn gain_input(encoding: &[f64; GAIN_ENCODING_LEN], x: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(GAIN_ENCODING_LEN + x.len());
    v.extend_from_slice(encoding);
    v.extend_from_slice(x);
    v
}

/// The learned specular gain `g(x, wo, wi)`.
pub fn gain(x: &[f64], wo: Vec3, wi: Vec3, n: Vec3, net: &GainNetwork) -> Result<Vec3> {
    let (h, d) = half_diff_encode(wo, wi, n)?;
    if net.mode == GainMode::Identity {
        return Ok(Vec3::splat(1.0));
    }
    let out = net.forward(&gain_input(&gain_encoding(h, d), x));
    Ok(Vec3::from_array(out))
}

/// Specular lobe `D G1 g / (4 cosNV cosNL)`. Grazing denominators are
/// clamped at 1e-7. Directions below the surface give zero.
pub fn specular_brdf(wo: Vec3, wi: Vec3, n: Vec3, m: &MaterialSample, net: &GainNetwork) -> Result<Vec3> {
    let cos_nv = n.dot(wo);
    let cos_nl = n.dot(wi);
    if cos_nv <= 0.0 || cos_nl <= 0.0 {
        return Ok(Vec3::ZERO);
    }
    let h = (wo + wi).normalize();
    let d = ndf(n.dot(h), m.alpha);
    let g1 = smith_g1(cos_nv, m.alpha);
    let g = gain(&m.features, wo, wi, n, net)?;
    let denom = (4.0 * cos_nv * cos_nl).max(1e-7);
    Ok(g * (d * g1 / denom))
}

/// Diffuse plus Fresnel-weighted specular BRDF.
pub fn full_brdf(wo: Vec3, wi: Vec3, n: Vec3, m: &MaterialSample, net: &GainNetwork) -> Result<Vec3> {
    if n.dot(wo) <= 0.0 || n.dot(wi) <= 0.0 {
        return Ok(Vec3::ZERO);
    }
    let h = (wo + wi).normalize();
    let f = fresnel_schlick(m.f0, h.dot(wo));
    let fs = specular_brdf(wo, wi, n, m, net)?;
    let diffuse = m.albedo / PI;
    Ok(Vec3::new(
        diffuse.x * (1.0 - f.x) + f.x * fs.x,
        diffuse.y * (1.0 - f.y) + f.y * fs.y,
        diffuse.z * (1.0 - f.z) + f.z * fs.z,
    ))
}
