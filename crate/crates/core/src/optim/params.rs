//! The optimizable model, its parameter groups and gradient buffers, and
//! the backward handler that scatters custom-op adjoints into them.

use crate::envlight::{EnvGradient, EnvironmentMap};
use crate::field::{Aabb, FactorGrid, NormalKernel, GRID_ARRAYS};
use crate::materials::{Decoder, GainMode, GainNetwork, GAIN_ENCODING_LEN};
use crate::math::Vec3;
use crate::optim::ext::ExtOp;
use crate::qmc::hash_uniform;
use crate::scene::NeuralScene;
use crate::{Error, Result};

/// Number of parameter groups: the grid arrays, decoder, gain, env.
pub const N_GROUPS: usize = GRID_ARRAYS.len() + 3;

/// Name of each parameter group, in [`Model::groups`] order.
pub fn group_names() -> [&'static str; N_GROUPS] {
    let mut names = [""; N_GROUPS];
    names[..GRID_ARRAYS.len()].copy_from_slice(&GRID_ARRAYS);
    names[GRID_ARRAYS.len()] = "decoder";
    names[GRID_ARRAYS.len() + 1] = "gain";
    names[GRID_ARRAYS.len() + 2] = "env";
    names
}

/// Whether group `g` is a grid factor (plane, line or basis).
pub fn is_grid_group(g: usize) -> bool {
    g < GRID_ARRAYS.len()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub resolution: usize,
    pub density_rank: usize,
    pub feature_rank: usize,
    pub feature_dim: usize,
    pub bbox: Aabb,
    pub gain_mode: GainMode,
    pub gain_hidden: usize,
    pub gain_layers: usize,
    pub env_height: usize,
    pub env_width: usize,
    /// Initial constant environment radiance.
    pub env_init: f64,
    /// Factor init `scale * U(-1, 1)`.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            resolution: 32,
            density_rank: 8,
            feature_rank: 24,
            feature_dim: 12,
            bbox: Aabb::cube(1.5),
            gain_mode: GainMode::Neural,
            gain_hidden: 32,
            gain_layers: 2,
            env_height: 16,
            env_width: 32,
            env_init: 0.5,
            init_scale: 0.1,
        }
    }
}

/// Learned scene plus environment map.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub scene: NeuralScene,
    pub env: EnvironmentMap,
}

impl Model {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let r = cfg.resolution;
        let mut grid = FactorGrid::zeros([r; 3], cfg.density_rank, cfg.feature_rank, cfg.feature_dim, cfg.bbox)?;
        let mut k = 0u64;
        let mut next = |tag: u64| {
            k += 1;
            hash_uniform(seed, &[tag, k])
        };
        grid.init_uniform(cfg.init_scale, || next(1));
        let mut decoder = Decoder::zeros(cfg.feature_dim);
        let bound = (6.0 / (cfg.feature_dim + 7) as f64).sqrt();
        for w in decoder.weights.iter_mut() {
            *w = bound * (2.0 * next(2) - 1.0);
        }
        // biases last in each row
        for row in 0..crate::materials::DECODER_OUTPUTS {
            decoder.weights[row * (cfg.feature_dim + 1) + cfg.feature_dim] = 0.0;
        }
        let mut gain = GainNetwork::new(cfg.gain_mode, cfg.feature_dim, cfg.gain_hidden, cfg.gain_layers);
        gain.init_weights(|| next(3));
        let env = EnvironmentMap::constant(cfg.env_height, cfg.env_width, cfg.env_init);
        let mut m = Model {
            scene: NeuralScene::new(grid, decoder, gain, NormalKernel::default()),
            env,
        };
        m.quantize();
        Ok(m)
    }

    /// Parameter arrays in group order.
    pub fn groups(&self) -> [&Vec<f64>; N_GROUPS] {
        let g = self.scene.grid.arrays();
        let mut out: [&Vec<f64>; N_GROUPS] = [&self.scene.decoder.weights; N_GROUPS];
        out[..GRID_ARRAYS.len()].copy_from_slice(&g);
        out[GRID_ARRAYS.len() + 1] = &self.scene.gain.weights;
        out[GRID_ARRAYS.len() + 2] = &self.env.log_values;
        out
    }

    /// Mutable parameter arrays in group order. Call [`Model::refresh`]
    /// after writing.
    pub fn groups_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = self.scene.grid.arrays_mut().into_iter().collect();
        out.push(&mut self.scene.decoder.weights);
        out.push(&mut self.scene.gain.weights);
        out.push(&mut self.env.log_values);
        out
    }

    /// Rebuilds tables derived from parameters.
    pub fn refresh(&mut self) {
        self.scene.refresh();
        self.env.rebuild();
    }

    /// Rounds every parameter to single precision so the model is exactly
    /// representable in a checkpoint.
    pub fn quantize(&mut self) {
        for a in self.groups_mut() {
            for v in a.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        self.refresh();
    }

    pub fn parameter_count(&self) -> usize {
        self.groups().iter().map(|g| g.len()).sum()
    }
}

/// Gradient buffers for every parameter group.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub grid: FactorGrid,
    pub decoder: Vec<f64>,
    pub gain: Vec<f64>,
    pub env: EnvGradient,
    /// Adjoints of node densities from normal estimates, pending
    /// [`Gradients::flush_nodes`]; empty when none.
    pub nodes: Vec<f64>,
}

impl Gradients {
    pub fn zeros(model: &Model) -> Self {
        Gradients {
            grid: model.scene.grid.zeros_like(),
            decoder: vec![0.0; model.scene.decoder.weights.len()],
            gain: vec![0.0; model.scene.gain.weights.len()],
            env: EnvGradient::new(model.env.h, model.env.w),
            nodes: Vec::new(),
        }
    }

    pub fn accumulate(&mut self, o: &Gradients) {
        for (a, b) in self.grid.arrays_mut().into_iter().zip(o.grid.arrays()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (x, y) in self.decoder.iter_mut().zip(&o.decoder) {
            *x += y;
        }
        for (x, y) in self.gain.iter_mut().zip(&o.gain) {
            *x += y;
        }
        self.env.accumulate(&o.env);
        if !o.nodes.is_empty() {
            if self.nodes.is_empty() {
                self.nodes = vec![0.0; o.nodes.len()];
            }
            for (x, y) in self.nodes.iter_mut().zip(&o.nodes) {
                *x += y;
            }
        }
    }

    /// Moves pending node-density adjoints into the factor gradients.
    pub fn flush_nodes(&mut self, model: &Model) {
        if !self.nodes.is_empty() {
            let nodes = std::mem::take(&mut self.nodes);
            model.scene.grid.backprop_node_adjoints(&model.scene.nodes, &nodes, &mut self.grid);
        }
    }

    /// Scatters the output adjoints of one custom op into the parameter
    /// gradients and writes the adjoints of its tape inputs.
    pub fn handle(&mut self, model: &Model, op: &ExtOp, out_adj: &[f64], in_adj: &mut [f64]) {
        let scene = &model.scene;
        match op {
            ExtOp::Density { p } => scene.grid.backprop_density(Vec3::from_array(*p), out_adj[0], &mut self.grid),
            ExtOp::Features { p } => scene.grid.backprop_feature(Vec3::from_array(*p), out_adj, &mut self.grid),
            ExtOp::NormalGradient { p } => {
                let adj = Vec3::new(out_adj[0], out_adj[1], out_adj[2]);
                // callers only query inside the box
                if scene.has_node_cache() {
                    if self.nodes.is_empty() {
                        self.nodes = vec![0.0; scene.nodes.sigma.len()];
                    }
                    let _ = scene
                        .grid
                        .node_gradient_adjoint(Vec3::from_array(*p), &scene.kernel, adj, &mut self.nodes);
                } else {
                    let _ = scene
                        .grid
                        .backprop_density_gradient(Vec3::from_array(*p), &scene.kernel, adj, &mut self.grid);
                }
            }
            ExtOp::Decoder { x } => {
                let f = x.len();
                for (k, &a) in out_adj.iter().enumerate() {
                    if a == 0.0 {
                        continue;
                    }
                    let row = &mut self.decoder[k * (f + 1)..(k + 1) * (f + 1)];
                    for i in 0..f {
                        row[i] += a * x[i];
                    }
                    row[f] += a;
                    let w = scene.decoder.row(k);
                    for i in 0..f {
                        in_adj[i] += a * w[i];
                    }
                }
            }
            ExtOp::Gain { input } => {
                let d = scene.gain.backward(input, out_adj, &mut self.gain);
                in_adj.copy_from_slice(&d[GAIN_ENCODING_LEN..]);
            }
            ExtOp::Irradiance { n } => {
                let adj = Vec3::new(out_adj[0], out_adj[1], out_adj[2]);
                let dn = model.env.sh().backprop(Vec3::from_array(*n), adj, &mut self.env.sh);
                in_adj.copy_from_slice(&dn.to_array());
            }
            ExtOp::MeanIrradiance => {
                let adj = Vec3::new(out_adj[0], out_adj[1], out_adj[2]);
                model.env.sh().backprop_mean(adj, &mut self.env.sh);
            }
            ExtOp::EnvMean { footprint } => {
                self.env
                    .add_footprint(footprint, Vec3::new(out_adj[0], out_adj[1], out_adj[2]));
            }
            ExtOp::EnvPixel { index } => {
                self.env.add_pixel(*index, Vec3::new(out_adj[0], out_adj[1], out_adj[2]));
            }
        }
    }

    /// Flat gradient per group, in [`Model::groups`] order. Fails on the
    /// first non-finite entry.
    pub fn into_groups(mut self, model: &Model) -> Result<Vec<Vec<f64>>> {
        self.flush_nodes(model);
        let env = self.env.finish(&model.env);
        let mut out: Vec<Vec<f64>> = self.grid.arrays().into_iter().cloned().collect();
        out.push(self.decoder);
        out.push(self.gain);
        out.push(env);
        let names = group_names();
        for (g, a) in out.iter().enumerate() {
            if let Some(i) = a.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient { group: names[g], index: i });
            }
        }
        Ok(out)
    }
}
