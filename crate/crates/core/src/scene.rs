//! What the renderer needs from a scene: density, density gradient,
//! materials and the specular gain, all as (possibly tracked) tape values.
//!
//! [`NeuralScene`] is the trainable model; [`SphereScene`] is an analytic
//! scene used to synthesize ground truth.

use crate::field::{Aabb, FactorGrid, NodeDensity, NormalKernel};
use crate::materials::{
    activate_material, gain_input, Decoder, GainMode, GainNetwork, MaterialSample, ALPHA_MIN, DECODER_OUTPUTS,
    GAIN_ENCODING_LEN,
};
use crate::math::{sigmoid, Vec3};
use crate::optim::ext::ExtOp;
use crate::optim::tape::{v3_const, v3_vals, Tape, Var, Var3};

/// Material parameters as tape values.
#[derive(Clone, Debug)]
pub struct MaterialVars<'t> {
    pub alpha: Var<'t>,
    pub albedo: Var3<'t>,
    pub f0: Var3<'t>,
    pub x: Vec<Var<'t>>,
}

impl<'t> MaterialVars<'t> {
    pub fn constant(tape: &'t Tape, m: &MaterialSample) -> Self {
        MaterialVars {
            alpha: tape.constant(m.alpha),
            albedo: v3_const(tape, m.albedo.to_array()),
            f0: v3_const(tape, m.f0.to_array()),
            x: m.features.iter().map(|&v| tape.constant(v)).collect(),
        }
    }

    pub fn value(&self) -> MaterialSample {
        MaterialSample {
            alpha: self.alpha.val(),
            albedo: Vec3::from_array(v3_vals(&self.albedo)),
            f0: Vec3::from_array(v3_vals(&self.f0)),
            features: self.x.iter().map(|v| v.val()).collect(),
        }
    }
}

pub trait Scene: Sync {
    fn bounds(&self) -> Aabb;

    /// Density at `p`; zero outside the bounds.
    fn density<'t>(&self, tape: &'t Tape, p: Vec3) -> Var<'t>;

    /// Gradient of the density used for normals (`n = -g / |g|`). Only
    /// called for points inside the bounds.
    fn density_gradient<'t>(&self, tape: &'t Tape, p: Vec3) -> Var3<'t>;

    fn material<'t>(&self, tape: &'t Tape, p: Vec3) -> MaterialVars<'t>;

    fn gain_mode(&self) -> GainMode;

    /// Specular gain for the given half/difference encoding.
    fn gain<'t>(&self, tape: &'t Tape, m: &MaterialVars<'t>, encoding: &[f64; GAIN_ENCODING_LEN]) -> Var3<'t>;
}

/// The learned model: factor grid, material decoder and gain network.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralScene {
    pub grid: FactorGrid,
    pub decoder: Decoder,
    pub gain: GainNetwork,
    pub kernel: NormalKernel,
    /// Node densities of `grid`; rebuilt by [`NeuralScene::refresh`].
    pub nodes: NodeDensity,
}

impl NeuralScene {
    pub fn new(grid: FactorGrid, decoder: Decoder, gain: GainNetwork, kernel: NormalKernel) -> Self {
        let mut s = NeuralScene {
            grid,
            decoder,
            gain,
            kernel,
            nodes: NodeDensity::default(),
        };
        s.refresh();
        s
    }

    /// Recomputes the node density cache; call after changing the grid.
    pub fn refresh(&mut self) {
        self.nodes = self.grid.node_density();
    }

    pub fn has_node_cache(&self) -> bool {
        self.nodes.res == self.grid.res && !self.nodes.sigma.is_empty()
    }
}

impl Scene for NeuralScene {
    fn bounds(&self) -> Aabb {
        self.grid.bbox
    }

    fn density<'t>(&self, tape: &'t Tape, p: Vec3) -> Var<'t> {
        match self.grid.raw_density(p) {
            None => tape.zero(),
            Some(raw) => tape.custom(ExtOp::Density { p: p.to_array() }, &[], &[raw])[0].softplus(),
        }
    }

    fn density_gradient<'t>(&self, tape: &'t Tape, p: Vec3) -> Var3<'t> {
        let g = if self.has_node_cache() {
            self.grid.density_gradient_cached(p, &self.kernel, &self.nodes)
        } else {
            self.grid.density_gradient(p, &self.kernel)
        }
        .unwrap_or(Vec3::ZERO);
        let v = tape.custom(ExtOp::NormalGradient { p: p.to_array() }, &[], &g.to_array());
        [v[0], v[1], v[2]]
    }

    fn material<'t>(&self, tape: &'t Tape, p: Vec3) -> MaterialVars<'t> {
        let xv = self.grid.sample_feature(p);
        let x = tape.custom(ExtOp::Features { p: p.to_array() }, &[], &xv);
        let pre = self.decoder.linear(&xv);
        let pv = tape.custom(ExtOp::Decoder { x: xv }, &x, &pre);
        debug_assert_eq!(pv.len(), DECODER_OUTPUTS);
        if !tape.is_recording() {
            let (alpha, albedo, f0) = activate_material(&pre);
            return MaterialVars {
                alpha: tape.constant(alpha),
                albedo: v3_const(tape, albedo.to_array()),
                f0: v3_const(tape, f0.to_array()),
                x,
            };
        }
        MaterialVars {
            alpha: pv[0].sigmoid() * (1.0 - ALPHA_MIN) + ALPHA_MIN,
            albedo: [pv[1].sigmoid(), pv[2].sigmoid(), pv[3].sigmoid()],
            f0: [pv[4].sigmoid(), pv[5].sigmoid(), pv[6].sigmoid()],
            x,
        }
    }

    fn gain_mode(&self) -> GainMode {
        self.gain.mode
    }

    fn gain<'t>(&self, tape: &'t Tape, m: &MaterialVars<'t>, encoding: &[f64; GAIN_ENCODING_LEN]) -> Var3<'t> {
        if self.gain.mode == GainMode::Identity {
            return v3_const(tape, [1.0; 3]);
        }
        let xv: Vec<f64> = m.x.iter().map(|v| v.val()).collect();
        let input = gain_input(encoding, &xv);
        let out = self.gain.forward(&input);
        let v = tape.custom(ExtOp::Gain { input }, &m.x, &out);
        [v[0], v[1], v[2]]
    }
}

/// Sphere whose density is a sigmoid of the signed distance to its surface.
#[derive(Clone, Debug, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub material: MaterialSample,
}

/// Analytic scene of soft-shelled spheres with constant materials and an
/// identity gain. Normals are exact density gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct SphereScene {
    pub spheres: Vec<Sphere>,
    pub bbox: Aabb,
    /// Peak density inside a sphere.
    pub sigma_max: f64,
    /// Width of the sigmoid shell, world units.
    pub shell: f64,
}

impl SphereScene {
    fn sphere_density(&self, s: &Sphere, p: Vec3) -> f64 {
        self.sigma_max * sigmoid((s.radius - (p - s.center).length()) / self.shell)
    }

    pub fn density_value(&self, p: Vec3) -> f64 {
        if !self.bbox.contains(p) {
            return 0.0;
        }
        self.spheres.iter().map(|s| self.sphere_density(s, p)).sum()
    }

    pub fn gradient_value(&self, p: Vec3) -> Vec3 {
        let mut g = Vec3::ZERO;
        for s in &self.spheres {
            let d = p - s.center;
            let r = d.length();
            if r == 0.0 {
                continue;
            }
            let sg = sigmoid((s.radius - r) / self.shell);
            // d/dp sigma_max * sigmoid((R - |d|) / shell)
            g += d * (-self.sigma_max * sg * (1.0 - sg) / (self.shell * r));
        }
        g
    }

    /// Material of the sphere with the largest density at `p`.
    pub fn material_value(&self, p: Vec3) -> &MaterialSample {
        self.spheres
            .iter()
            .max_by(|a, b| self.sphere_density(a, p).total_cmp(&self.sphere_density(b, p)))
            .map(|s| &s.material)
            .expect("scene has at least one sphere")
    }
}

impl Scene for SphereScene {
    fn bounds(&self) -> Aabb {
        self.bbox
    }

    fn density<'t>(&self, tape: &'t Tape, p: Vec3) -> Var<'t> {
        tape.constant(self.density_value(p))
    }

    fn density_gradient<'t>(&self, tape: &'t Tape, p: Vec3) -> Var3<'t> {
        v3_const(tape, self.gradient_value(p).to_array())
    }

    fn material<'t>(&self, tape: &'t Tape, p: Vec3) -> MaterialVars<'t> {
        MaterialVars::constant(tape, self.material_value(p))
    }

    fn gain_mode(&self) -> GainMode {
        GainMode::Identity
    }

    fn gain<'t>(&self, tape: &'t Tape, _m: &MaterialVars<'t>, _encoding: &[f64; GAIN_ENCODING_LEN]) -> Var3<'t> {
        v3_const(tape, [1.0; 3])
    }
}
