//! Low-rank vector-matrix factored field holding raw density and material
//! features, with smoothed finite-difference normals and resampling.
//!
//! Each of the three modes pairs a plane over two axes with a line along the
//! remaining one. Lattice node `i` on an axis sits at `lo + i * h` with
//! `h = (hi - lo) / (n - 1)`, so the first and last nodes lie on the box faces.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{softplus, sigmoid, Vec3};

/// Plane axes per mode.
pub const MAT_MODE: [[usize; 2]; 3] = [[0, 1], [0, 2], [1, 2]];
/// Line axis per mode.
pub const VEC_MODE: [usize; 3] = [2, 1, 0];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub lo: Vec3,
    pub hi: Vec3,
}

impl Aabb {
    pub fn new(lo: Vec3, hi: Vec3) -> Self {
        Aabb { lo, hi }
    }

    pub fn cube(half: f64) -> Self {
        Aabb::new(Vec3::splat(-half), Vec3::splat(half))
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] <= self.hi[a])
    }

    /// Parametric entry and exit distances of a ray, if it hits the box.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-300 {
                if origin[a] < self.lo[a] || origin[a] > self.hi[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[a];
            let (mut ta, mut tb) = ((self.lo[a] - origin[a]) * inv, (self.hi[a] - origin[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t1 >= t0).then_some((t0, t1))
    }
}

/// Finite-difference normal estimator: central differences smoothed by a
/// 3-tap kernel along the two axes orthogonal to each difference axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalKernel {
    pub taps: [f64; 3],
}

impl Default for NormalKernel {
    fn default() -> Self {
        NormalKernel {
            taps: [0.25, 0.5, 0.25],
        }
    }
}

/// Per-axis node indices, difference weights and smoothing weights of a
/// normal estimate; the weight of node `(x, y, z)` for component `a` is
/// the difference weight along `a` times the smoothing weights along the
/// other two axes.
struct Stencil {
    nodes: [[usize; 4]; 3],
    diff: [[f64; 4]; 3],
    smooth: [[f64; 4]; 3],
}

impl Stencil {
    fn for_each(&self, mut f: impl FnMut([usize; 3], Vec3)) {
        let (d, s) = (&self.diff, &self.smooth);
        for z in 0..4 {
            for y in 0..4 {
                let (syz, dyz, ysz) = (s[1][y] * s[2][z], s[1][y] * d[2][z], d[1][y] * s[2][z]);
                for x in 0..4 {
                    let k = Vec3::new(d[0][x] * syz, s[0][x] * ysz, s[0][x] * dyz);
                    f([self.nodes[0][x], self.nodes[1][y], self.nodes[2][z]], k);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ModeSite {
    plane: [usize; 4],
    plane_w: [f64; 4],
    line: [usize; 2],
    line_w: [f64; 2],
    plane_len: usize,
    line_len: usize,
}

/// Per-node density values cached between parameter updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeDensity {
    pub res: [usize; 3],
    pub sigma: Vec<f64>,
    pub dsigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorGrid {
    pub res: [usize; 3],
    pub density_rank: usize,
    pub feature_rank: usize,
    pub feature_dim: usize,
    pub bbox: Aabb,
    /// Per mode, `rank x n_v x n_u` with `u, v` the mode's plane axes.
    pub density_planes: [Vec<f64>; 3],
    /// Per mode, `rank x n` along the mode's line axis.
    pub density_lines: [Vec<f64>; 3],
    pub feature_planes: [Vec<f64>; 3],
    pub feature_lines: [Vec<f64>; 3],
    /// `feature_dim x (3 * feature_rank)` map from factor products to features.
    pub basis: Vec<f64>,
}

/// Name of every parameter array, in checkpoint and optimizer order.
pub const GRID_ARRAYS: [&str; 13] = [
    "density_plane0",
    "density_plane1",
    "density_plane2",
    "density_line0",
    "density_line1",
    "density_line2",
    "feature_plane0",
    "feature_plane1",
    "feature_plane2",
    "feature_line0",
    "feature_line1",
    "feature_line2",
    "feature_basis",
];

impl FactorGrid {
    pub fn zeros(res: [usize; 3], density_rank: usize, feature_rank: usize, feature_dim: usize, bbox: Aabb) -> Result<Self> {
        if res.iter().any(|&n| n < 2) {
            return Err(Error::InvalidGrid(format!("resolution {res:?} must be at least 2 per axis")));
        }
        if density_rank == 0 || feature_rank == 0 || feature_dim == 0 {
            return Err(Error::InvalidGrid("ranks and feature width must be positive".into()));
        }
        if (0..3).any(|a| bbox.hi[a] <= bbox.lo[a]) {
            return Err(Error::InvalidGrid("empty bounding box".into()));
        }
        let plane = |m: usize, r: usize| vec![0.0; r * res[MAT_MODE[m][0]] * res[MAT_MODE[m][1]]];
        let line = |m: usize, r: usize| vec![0.0; r * res[VEC_MODE[m]]];
        Ok(FactorGrid {
            res,
            density_rank,
            feature_rank,
            feature_dim,
            bbox,
            density_planes: [0, 1, 2].map(|m| plane(m, density_rank)),
            density_lines: [0, 1, 2].map(|m| line(m, density_rank)),
            feature_planes: [0, 1, 2].map(|m| plane(m, feature_rank)),
            feature_lines: [0, 1, 2].map(|m| line(m, feature_rank)),
            basis: vec![0.0; feature_dim * 3 * feature_rank],
        })
    }

    /// Same shape, every value zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut g = self.clone();
        for a in g.arrays_mut() {
            a.fill(0.0);
        }
        g
    }

    /// Factors drawn as `scale * U(-1, 1)`; the basis as
    /// `U(-1, 1) / sqrt(3 * feature_rank)`.
    pub fn init_uniform(&mut self, scale: f64, mut uniform: impl FnMut() -> f64) {
        let basis_scale = 1.0 / ((3 * self.feature_rank) as f64).sqrt();
        for (name, a) in GRID_ARRAYS.iter().zip(self.arrays_mut()) {
            let s = if *name == "feature_basis" { basis_scale } else { scale };
            for v in a.iter_mut() {
                *v = s * (2.0 * uniform() - 1.0);
            }
        }
    }

    pub fn arrays(&self) -> [&Vec<f64>; 13] {
        let [dp0, dp1, dp2] = &self.density_planes;
        let [dl0, dl1, dl2] = &self.density_lines;
        let [fp0, fp1, fp2] = &self.feature_planes;
        let [fl0, fl1, fl2] = &self.feature_lines;
        [dp0, dp1, dp2, dl0, dl1, dl2, fp0, fp1, fp2, fl0, fl1, fl2, &self.basis]
    }

    pub fn arrays_mut(&mut self) -> [&mut Vec<f64>; 13] {
        let [dp0, dp1, dp2] = &mut self.density_planes;
        let [dl0, dl1, dl2] = &mut self.density_lines;
        let [fp0, fp1, fp2] = &mut self.feature_planes;
        let [fl0, fl1, fl2] = &mut self.feature_lines;
        [dp0, dp1, dp2, dl0, dl1, dl2, fp0, fp1, fp2, fl0, fl1, fl2, &mut self.basis]
    }

    /// World spacing of lattice nodes per axis.
    pub fn spacing(&self) -> Vec3 {
        let ext = self.bbox.hi - self.bbox.lo;
        Vec3::new(
            ext.x / (self.res[0] - 1) as f64,
            ext.y / (self.res[1] - 1) as f64,
            ext.z / (self.res[2] - 1) as f64,
        )
    }

    pub fn node_position(&self, i: [usize; 3]) -> Vec3 {
        let h = self.spacing();
        Vec3::new(
            self.bbox.lo.x + i[0] as f64 * h.x,
            self.bbox.lo.y + i[1] as f64 * h.y,
            self.bbox.lo.z + i[2] as f64 * h.z,
        )
    }

    /// Continuous lattice coordinates of `p` split into cell index and
    /// fraction, or `None` outside the box.
    fn cell(&self, p: Vec3) -> Option<[(usize, f64); 3]> {
        if !self.bbox.contains(p) {
            return None;
        }
        let h = self.spacing();
        Some([0, 1, 2].map(|a| {
            let u = (p[a] - self.bbox.lo[a]) / h[a];
            let i = (u.floor().max(0.0) as usize).min(self.res[a] - 2);
            (i, (u - i as f64).clamp(0.0, 1.0))
        }))
    }

    fn sites(&self, c: &[(usize, f64); 3]) -> [ModeSite; 3] {
        [0, 1, 2].map(|m| {
            let [a, b] = MAT_MODE[m];
            let l = VEC_MODE[m];
            let nu = self.res[a];
            let (iu, fu) = c[a];
            let (iv, fv) = c[b];
            let (il, fl) = c[l];
            let base = iv * nu + iu;
            ModeSite {
                plane: [base, base + 1, base + nu, base + nu + 1],
                plane_w: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
                line: [il, il + 1],
                line_w: [1.0 - fl, fl],
                plane_len: nu * self.res[b],
                line_len: self.res[l],
            }
        })
    }

    fn components(planes: &[Vec<f64>; 3], lines: &[Vec<f64>; 3], rank: usize, sites: &[ModeSite; 3], out: &mut Vec<f64>) {
        out.clear();
        for (m, s) in sites.iter().enumerate() {
            for r in 0..rank {
                let pl = &planes[m][r * s.plane_len..];
                let ln = &lines[m][r * s.line_len..];
                let pv: f64 = (0..4).map(|k| s.plane_w[k] * pl[s.plane[k]]).sum();
                let lv = s.line_w[0] * ln[s.line[0]] + s.line_w[1] * ln[s.line[1]];
                out.push(pv * lv);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn scatter(
        planes: &[Vec<f64>; 3],
        lines: &[Vec<f64>; 3],
        g_planes: &mut [Vec<f64>; 3],
        g_lines: &mut [Vec<f64>; 3],
        rank: usize,
        sites: &[ModeSite; 3],
        adj: &[f64],
    ) {
        for (m, s) in sites.iter().enumerate() {
            for r in 0..rank {
                let a = adj[m * rank + r];
                if a == 0.0 {
                    continue;
                }
                let po = r * s.plane_len;
                let lo = r * s.line_len;
                let pv: f64 = (0..4).map(|k| s.plane_w[k] * planes[m][po + s.plane[k]]).sum();
                let lv = s.line_w[0] * lines[m][lo + s.line[0]] + s.line_w[1] * lines[m][lo + s.line[1]];
                for k in 0..4 {
                    g_planes[m][po + s.plane[k]] += a * lv * s.plane_w[k];
                }
                for k in 0..2 {
                    g_lines[m][lo + s.line[k]] += a * pv * s.line_w[k];
                }
            }
        }
    }

    fn raw_at_cell(&self, c: &[(usize, f64); 3]) -> f64 {
        let mut sum = 0.0;
        for (m, s) in self.sites(c).iter().enumerate() {
            for r in 0..self.density_rank {
                let pl = &self.density_planes[m][r * s.plane_len..];
                let ln = &self.density_lines[m][r * s.line_len..];
                let pv = s.plane_w[0] * pl[s.plane[0]]
                    + s.plane_w[1] * pl[s.plane[1]]
                    + s.plane_w[2] * pl[s.plane[2]]
                    + s.plane_w[3] * pl[s.plane[3]];
                sum += pv * (s.line_w[0] * ln[s.line[0]] + s.line_w[1] * ln[s.line[1]]);
            }
        }
        sum
    }

    /// Plane and line offsets of lattice node `i` per mode.
    fn node_sites(&self, i: [usize; 3]) -> [(usize, usize, usize, usize); 3] {
        [0, 1, 2].map(|m| {
            let [a, b] = MAT_MODE[m];
            let l = VEC_MODE[m];
            (i[b] * self.res[a] + i[a], i[l], self.res[a] * self.res[b], self.res[l])
        })
    }

    /// Summed factor value before the activation; `None` outside the box.
    pub fn raw_density(&self, p: Vec3) -> Option<f64> {
        self.cell(p).map(|c| self.raw_at_cell(&c))
    }

    pub fn sample_density(&self, p: Vec3) -> f64 {
        self.raw_density(p).map_or(0.0, softplus)
    }

    /// Raw density exactly at lattice node `i`.
    pub fn node_raw_density(&self, i: [usize; 3]) -> f64 {
        let mut sum = 0.0;
        for (m, (pi, li, plen, llen)) in self.node_sites(i).into_iter().enumerate() {
            let (pl, ln) = (&self.density_planes[m], &self.density_lines[m]);
            for r in 0..self.density_rank {
                sum += pl[r * plen + pi] * ln[r * llen + li];
            }
        }
        sum
    }

    fn backprop_node(&self, i: [usize; 3], adj: f64, grad: &mut FactorGrid) {
        for (m, (pi, li, plen, llen)) in self.node_sites(i).into_iter().enumerate() {
            let (pl, ln) = (&self.density_planes[m], &self.density_lines[m]);
            for r in 0..self.density_rank {
                let (pk, lk) = (r * plen + pi, r * llen + li);
                grad.density_planes[m][pk] += adj * ln[lk];
                grad.density_lines[m][lk] += adj * pl[pk];
            }
        }
    }

    pub fn sample_feature(&self, p: Vec3) -> Vec<f64> {
        match self.cell(p) {
            None => vec![0.0; self.feature_dim],
            Some(c) => {
                let mut comps = Vec::with_capacity(3 * self.feature_rank);
                Self::components(&self.feature_planes, &self.feature_lines, self.feature_rank, &self.sites(&c), &mut comps);
                let k = comps.len();
                (0..self.feature_dim)
                    .map(|f| self.basis[f * k..(f + 1) * k].iter().zip(&comps).map(|(b, a)| b * a).sum())
                    .collect()
            }
        }
    }

    /// Adds `adj * d(raw density)/d(factors)` at `p` into `grad`.
    pub fn backprop_density(&self, p: Vec3, adj: f64, grad: &mut FactorGrid) {
        if let Some(c) = self.cell(p) {
            self.backprop_density_cell(&c, adj, grad);
        }
    }

    fn backprop_density_cell(&self, c: &[(usize, f64); 3], adj: f64, grad: &mut FactorGrid) {
        for (m, s) in self.sites(c).iter().enumerate() {
            let (pl, ln) = (&self.density_planes[m], &self.density_lines[m]);
            for r in 0..self.density_rank {
                let (po, lo) = (r * s.plane_len, r * s.line_len);
                let pv: f64 = (0..4).map(|k| s.plane_w[k] * pl[po + s.plane[k]]).sum();
                let lv = s.line_w[0] * ln[lo + s.line[0]] + s.line_w[1] * ln[lo + s.line[1]];
                for k in 0..4 {
                    grad.density_planes[m][po + s.plane[k]] += adj * lv * s.plane_w[k];
                }
                for k in 0..2 {
                    grad.density_lines[m][lo + s.line[k]] += adj * pv * s.line_w[k];
                }
            }
        }
    }

    /// Adds the pullback of the feature adjoint `adj` at `p` into `grad`.
    pub fn backprop_feature(&self, p: Vec3, adj: &[f64], grad: &mut FactorGrid) {
        let Some(c) = self.cell(p) else { return };
        let sites = self.sites(&c);
        let mut comps = Vec::with_capacity(3 * self.feature_rank);
        Self::components(&self.feature_planes, &self.feature_lines, self.feature_rank, &sites, &mut comps);
        let k = comps.len();
        let mut comp_adj = vec![0.0; k];
        for (f, &a) in adj.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let row = &self.basis[f * k..(f + 1) * k];
            let grow = &mut grad.basis[f * k..(f + 1) * k];
            for j in 0..k {
                grow[j] += a * comps[j];
                comp_adj[j] += a * row[j];
            }
        }
        Self::scatter(
            &self.feature_planes,
            &self.feature_lines,
            &mut grad.feature_planes,
            &mut grad.feature_lines,
            self.feature_rank,
            &sites,
            &comp_adj,
        );
    }

    /// Separable weights of the normal estimate at `p` over its 4x4x4
    /// window of lattice nodes.
    fn normal_stencil(&self, p: Vec3, kernel: &NormalKernel) -> Result<Stencil> {
        let c = self.cell(p).ok_or(Error::OutOfBounds(p.to_array()))?;
        let h = self.spacing();
        let mut st = Stencil {
            nodes: [[0; 4]; 3],
            diff: [[0.0; 4]; 3],
            smooth: [[0.0; 4]; 3],
        };
        for a in 0..3 {
            let (i, f) = c[a];
            let interp = [1.0 - f, f];
            for k in 0..4 {
                st.nodes[a][k] = (i as i64 - 1 + k as i64).clamp(0, self.res[a] as i64 - 1) as usize;
            }
            // window position k holds node i - 1 + k; corners sit at 1 and 2
            for (ci, w) in interp.iter().enumerate() {
                st.diff[a][2 + ci] += w / (2.0 * h[a]);
                st.diff[a][ci] -= w / (2.0 * h[a]);
                for (o, t) in kernel.taps.iter().enumerate() {
                    st.smooth[a][ci + o] += w * t;
                }
            }
        }
        Ok(st)
    }

    /// Smoothed finite-difference gradient of the density at `p`.
    pub fn density_gradient(&self, p: Vec3, kernel: &NormalKernel) -> Result<Vec3> {
        let mut g = Vec3::ZERO;
        self.normal_stencil(p, kernel)?.for_each(|i, k| g += k * softplus(self.node_raw_density(i)));
        Ok(g)
    }

    /// Adds the pullback of an adjoint on [`FactorGrid::density_gradient`].
    pub fn backprop_density_gradient(&self, p: Vec3, kernel: &NormalKernel, adj: Vec3, grad: &mut FactorGrid) -> Result<()> {
        self.normal_stencil(p, kernel)?.for_each(|i, k| {
            let a = k.dot(adj);
            if a != 0.0 {
                self.backprop_node(i, a * sigmoid(self.node_raw_density(i)), grad);
            }
        });
        Ok(())
    }

    /// Unit normal `-grad / |grad|`, or `None` (zero flag) where the
    /// gradient vanishes.
    pub fn normal_at(&self, p: Vec3, kernel: &NormalKernel) -> Result<Option<Vec3>> {
        let g = self.density_gradient(p, kernel)?;
        let len = g.length();
        Ok((len >= 1e-12).then(|| -g / len))
    }

    /// Flat index of lattice node `i`, x fastest.
    pub fn node_index(&self, i: [usize; 3]) -> usize {
        (i[2] * self.res[1] + i[1]) * self.res[0] + i[0]
    }

    /// Density and its derivative with respect to the raw value at every
    /// lattice node.
    pub fn node_density(&self) -> NodeDensity {
        let [nx, ny, nz] = self.res;
        let mut sigma = vec![0.0; nx * ny * nz];
        let mut dsigma = vec![0.0; nx * ny * nz];
        sigma
            .par_chunks_mut(nx * ny)
            .zip(dsigma.par_chunks_mut(nx * ny))
            .enumerate()
            .for_each(|(z, (s, d))| {
                for y in 0..ny {
                    for x in 0..nx {
                        let raw = self.node_raw_density([x, y, z]);
                        s[y * nx + x] = softplus(raw);
                        d[y * nx + x] = sigmoid(raw);
                    }
                }
            });
        NodeDensity {
            res: self.res,
            sigma,
            dsigma,
        }
    }

    /// [`FactorGrid::density_gradient`] from precomputed node densities.
    pub fn density_gradient_cached(&self, p: Vec3, kernel: &NormalKernel, nodes: &NodeDensity) -> Result<Vec3> {
        debug_assert_eq!(nodes.res, self.res);
        let mut g = Vec3::ZERO;
        self.normal_stencil(p, kernel)?.for_each(|i, k| g += k * nodes.sigma[self.node_index(i)]);
        Ok(g)
    }

    /// Adds the pullback of an adjoint on the density gradient at `p` to
    /// per-node density adjoints.
    pub fn node_gradient_adjoint(&self, p: Vec3, kernel: &NormalKernel, adj: Vec3, node_adj: &mut [f64]) -> Result<()> {
        self.normal_stencil(p, kernel)?.for_each(|i, k| node_adj[self.node_index(i)] += k.dot(adj));
        Ok(())
    }

    /// Scatters per-node density adjoints into factor gradients.
    pub fn backprop_node_adjoints(&self, nodes: &NodeDensity, node_adj: &[f64], grad: &mut FactorGrid) {
        let [nx, ny, _] = self.res;
        for (k, &a) in node_adj.iter().enumerate() {
            if a != 0.0 {
                let i = [k % nx, (k / nx) % ny, k / (nx * ny)];
                self.backprop_node(i, a * nodes.dsigma[k], grad);
            }
        }
    }

    /// Linearly resamples every factor onto a finer lattice.
    pub fn upsample(&self, new_res: [usize; 3]) -> Result<FactorGrid> {
        if (0..3).any(|a| new_res[a] < self.res[a]) {
            return Err(Error::Downsample {
                from: self.res,
                to: new_res,
            });
        }
        let mut out = FactorGrid::zeros(new_res, self.density_rank, self.feature_rank, self.feature_dim, self.bbox)?;
        let weights = |a: usize| -> Vec<(usize, f64)> {
            let (n0, n1) = (self.res[a], new_res[a]);
            (0..n1)
                .map(|i| {
                    let u = i as f64 * (n0 - 1) as f64 / (n1 - 1) as f64;
                    let j = (u.floor() as usize).min(n0 - 2);
                    (j, u - j as f64)
                })
                .collect()
        };
        let w: [Vec<(usize, f64)>; 3] = [weights(0), weights(1), weights(2)];
        let resample_plane = |src: &[f64], dst: &mut [f64], m: usize, rank: usize| {
            let [a, b] = MAT_MODE[m];
            let (nu0, nv0) = (self.res[a], self.res[b]);
            let (nu1, nv1) = (new_res[a], new_res[b]);
            for r in 0..rank {
                let s = &src[r * nu0 * nv0..(r + 1) * nu0 * nv0];
                for (v, &(jv, fv)) in w[b].iter().enumerate() {
                    for (u, &(ju, fu)) in w[a].iter().enumerate() {
                        let at = |x: usize, y: usize| s[y * nu0 + x];
                        dst[r * nu1 * nv1 + v * nu1 + u] = (1.0 - fu) * (1.0 - fv) * at(ju, jv)
                            + fu * (1.0 - fv) * at(ju + 1, jv)
                            + (1.0 - fu) * fv * at(ju, jv + 1)
                            + fu * fv * at(ju + 1, jv + 1);
                    }
                }
            }
        };
        let resample_line = |src: &[f64], dst: &mut [f64], m: usize, rank: usize| {
            let a = VEC_MODE[m];
            let (n0, n1) = (self.res[a], new_res[a]);
            for r in 0..rank {
                for (i, &(j, f)) in w[a].iter().enumerate() {
                    dst[r * n1 + i] = (1.0 - f) * src[r * n0 + j] + f * src[r * n0 + j + 1];
                }
            }
        };
        for m in 0..3 {
            resample_plane(&self.density_planes[m], &mut out.density_planes[m], m, self.density_rank);
            resample_plane(&self.feature_planes[m], &mut out.feature_planes[m], m, self.feature_rank);
            resample_line(&self.density_lines[m], &mut out.density_lines[m], m, self.density_rank);
            resample_line(&self.feature_lines[m], &mut out.feature_lines[m], m, self.feature_rank);
        }
        out.basis.clone_from(&self.basis);
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(state: &mut u64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (*state >> 11) as f64 / (1u64 << 53) as f64
    }

    fn grid(n: usize) -> FactorGrid {
        FactorGrid::zeros([n; 3], 1, 1, 1, Aabb::cube(1.0)).unwrap()
    }

    /// Rank-1 grid whose only active mode is plane(x, y) * line(z), set
    /// from the given functions of lattice index.
    fn separable(n: usize, fx: impl Fn(usize) -> f64, fy: impl Fn(usize) -> f64, fz: impl Fn(usize) -> f64) -> FactorGrid {
        let mut g = grid(n);
        for j in 0..n {
            for i in 0..n {
                g.density_planes[0][j * n + i] = fx(i) * fy(j);
                g.feature_planes[0][j * n + i] = fx(i) * fy(j);
            }
        }
        for k in 0..n {
            g.density_lines[0][k] = fz(k);
            g.feature_lines[0][k] = fz(k);
        }
        g.basis = vec![1.0, 0.0, 0.0];
        g
    }

    #[test]
    fn zero_factors_and_out_of_bounds() {
        let g = grid(4);
        assert!((g.sample_density(Vec3::new(0.1, 0.2, -0.3)) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g.sample_density(Vec3::new(1.5, 0.0, 0.0)), 0.0);
        assert_eq!(g.sample_feature(Vec3::new(0.0, 0.0, 0.0)), vec![0.0]);
        assert_eq!(g.sample_feature(Vec3::new(0.0, -1.01, 0.0)), vec![0.0]);
    }

    #[test]
    fn rank_one_density_at_node() {
        let g = separable(5, |_| 2.0, |_| 1.0, |_| 5.0);
        let p = g.node_position([2, 3, 1]);
        let expected = 10.0 + (-10f64).exp().ln_1p();
        assert!((g.sample_density(p) - expected).abs() < 1e-12);
        assert!((expected - 10.000_045_4).abs() < 1e-7);
    }

    #[test]
    fn separable_feature_matches_product() {
        let n = 9;
        let u = |i: usize| (i as f64 * 0.3).sin() + 1.2;
        let v = |j: usize| 0.5 + j as f64 * 0.1;
        let w = |k: usize| (k as f64 * 0.2).cos();
        let g = separable(n, u, v, w);
        for &(i, j, k) in &[(0, 0, 0), (3, 7, 1), (8, 8, 8), (4, 2, 6)] {
            let x = g.sample_feature(g.node_position([i, j, k]))[0];
            let e = u(i) * v(j) * w(k);
            assert!((x - e).abs() <= 1e-6 * e.abs().max(1e-12), "{x} vs {e}");
        }
    }

    #[test]
    fn trilinear_between_nodes() {
        let g = separable(5, |i| i as f64 * 0.7, |j| 1.0 + j as f64, |k| 2.0 - 0.3 * k as f64);
        let a = g.node_position([1, 2, 3]);
        let b = g.node_position([2, 2, 3]);
        let mid = g.raw_density((a + b) * 0.5).unwrap();
        let avg = 0.5 * (g.raw_density(a).unwrap() + g.raw_density(b).unwrap());
        assert!((mid - avg).abs() < 1e-12);
    }

    /// Grid whose raw density is `f` at every node, realized with one
    /// rank per z slice would need many ranks; instead build the field as
    /// a sum of three separable modes that reproduces affine functions.
    fn ramp_grid(n: usize, c: [f64; 3], offset: f64) -> FactorGrid {
        let mut g = FactorGrid::zeros([n; 3], 1, 1, 1, Aabb::cube(1.0)).unwrap();
        let h = 2.0 / (n - 1) as f64;
        let coord = |i: usize| -1.0 + i as f64 * h;
        // mode 0: plane(x,y) = 1, line(z) = c_z z + offset
        // mode 1: plane(x,z) = 1, line(y) = c_y y
        // mode 2: plane(y,z) = 1, line(x) = c_x x
        for m in 0..3 {
            g.density_planes[m].fill(1.0);
        }
        for i in 0..n {
            g.density_lines[0][i] = c[2] * coord(i) + offset;
            g.density_lines[1][i] = c[1] * coord(i);
            g.density_lines[2][i] = c[0] * coord(i);
        }
        g
    }

    #[test]
    fn ramp_normal_points_down_the_gradient() {
        let g = ramp_grid(8, [0.0, 0.0, 3.0], 0.0);
        let n = g.normal_at(Vec3::new(0.1, -0.2, 0.05), &NormalKernel::default()).unwrap().unwrap();
        assert!((n - Vec3::new(0.0, 0.0, -1.0)).length() < 1e-9, "{n:?}");
    }

    #[test]
    fn constant_field_is_zero_flagged() {
        let g = grid(6);
        assert_eq!(g.normal_at(Vec3::new(0.3, 0.3, 0.3), &NormalKernel::default()).unwrap(), None);
        assert!(g.normal_at(Vec3::new(2.0, 0.0, 0.0), &NormalKernel::default()).is_err());
    }

    #[test]
    fn density_gradient_backprop_matches_finite_differences() {
        let mut g = FactorGrid::zeros([5, 6, 4], 2, 2, 3, Aabb::new(Vec3::new(-1.0, -0.5, -1.0), Vec3::new(1.0, 1.0, 0.5))).unwrap();
        let mut s = 1u64;
        g.init_uniform(0.8, || lcg(&mut s));
        let k = NormalKernel::default();
        let p = Vec3::new(0.93, 0.1, -0.97);
        let adj = Vec3::new(0.3, -0.8, 0.5);
        let mut grad = g.zeros_like();
        g.backprop_density_gradient(p, &k, adj, &mut grad).unwrap();
        let eps = 1e-6;
        for ai in 0..6 {
            for j in (0..g.arrays()[ai].len()).step_by(3) {
                let mut gp = g.clone();
                gp.arrays_mut()[ai][j] += eps;
                let mut gm = g.clone();
                gm.arrays_mut()[ai][j] -= eps;
                let fd = (gp.density_gradient(p, &k).unwrap().dot(adj) - gm.density_gradient(p, &k).unwrap().dot(adj)) / (2.0 * eps);
                assert!((fd - grad.arrays()[ai][j]).abs() < 1e-6, "array {ai}[{j}]: {fd} vs {}", grad.arrays()[ai][j]);
            }
        }
    }

    #[test]
    fn node_cache_matches_direct_evaluation() {
        let mut g = FactorGrid::zeros([5, 6, 4], 2, 2, 3, Aabb::new(Vec3::new(-1.0, -0.5, -1.0), Vec3::new(1.0, 1.0, 0.5))).unwrap();
        let mut s = 7u64;
        g.init_uniform(0.8, || lcg(&mut s));
        let k = NormalKernel::default();
        let nodes = g.node_density();
        let adj = Vec3::new(-0.2, 0.6, 0.9);
        let mut direct = g.zeros_like();
        let mut via_nodes = g.zeros_like();
        let mut node_adj = vec![0.0; nodes.sigma.len()];
        for p in [Vec3::new(0.93, 0.1, -0.97), Vec3::new(-0.99, 0.95, 0.45), Vec3::new(0.0, 0.2, -0.3)] {
            let a = g.density_gradient(p, &k).unwrap();
            let b = g.density_gradient_cached(p, &k, &nodes).unwrap();
            assert!((a - b).length() < 1e-12 * a.length().max(1.0));
            g.backprop_density_gradient(p, &k, adj, &mut direct).unwrap();
            g.node_gradient_adjoint(p, &k, adj, &mut node_adj).unwrap();
        }
        g.backprop_node_adjoints(&nodes, &node_adj, &mut via_nodes);
        for (x, y) in direct.arrays().iter().zip(via_nodes.arrays()) {
            for (u, v) in x.iter().zip(y.iter()) {
                assert!((u - v).abs() < 1e-12, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn feature_backprop_matches_finite_differences() {
        let mut g = FactorGrid::zeros([4, 5, 6], 2, 3, 4, Aabb::cube(1.0)).unwrap();
        let mut s = 5u64;
        g.init_uniform(0.5, || lcg(&mut s));
        let p = Vec3::new(-0.3, 0.45, 0.8);
        let adj = [0.5, -1.0, 0.25, 2.0];
        let f = |g: &FactorGrid| g.sample_feature(p).iter().zip(&adj).map(|(a, b)| a * b).sum::<f64>() + g.raw_density(p).unwrap();
        let mut grad = g.zeros_like();
        g.backprop_feature(p, &adj, &mut grad);
        g.backprop_density(p, 1.0, &mut grad);
        let eps = 1e-6;
        for ai in 0..13 {
            for j in 0..g.arrays()[ai].len() {
                let mut gp = g.clone();
                gp.arrays_mut()[ai][j] += eps;
                let mut gm = g.clone();
                gm.arrays_mut()[ai][j] -= eps;
                let fd = (f(&gp) - f(&gm)) / (2.0 * eps);
                assert!((fd - grad.arrays()[ai][j]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn upsample_identity_and_errors() {
        let mut g = FactorGrid::zeros([5; 3], 2, 2, 2, Aabb::cube(1.0)).unwrap();
        let mut s = 2u64;
        g.init_uniform(0.3, || lcg(&mut s));
        let same = g.upsample([5; 3]).unwrap();
        assert_eq!(same, g);
        assert!(g.upsample([4, 5, 5]).is_err());
    }

    #[test]
    fn ramp_upsample_is_exact() {
        let g = ramp_grid(16, [0.4, -0.7, 1.1], 0.2);
        let up = g.upsample([32; 3]).unwrap();
        let mut s = 4u64;
        for _ in 0..500 {
            let p = Vec3::new(2.0 * lcg(&mut s) - 1.0, 2.0 * lcg(&mut s) - 1.0, 2.0 * lcg(&mut s) - 1.0);
            assert!((g.sample_density(p) - up.sample_density(p)).abs() < 1e-6);
        }
    }

    #[test]
    fn intersect_box() {
        let b = Aabb::cube(1.0);
        let (t0, t1) = b.intersect(Vec3::new(0.0, 0.0, 5.0), Vec3::new(0.0, 0.0, -1.0)).unwrap();
        assert!((t0 - 4.0).abs() < 1e-12 && (t1 - 6.0).abs() < 1e-12);
        assert!(b.intersect(Vec3::new(0.0, 3.0, 5.0), Vec3::new(0.0, 0.0, -1.0)).is_none());
    }
}
