//! Trainable radiance field on dense trilinear grids.
//!
//! Density is a softplus of a trilinearly interpolated scalar grid, in units of the
//! inverse cell size; normals are the negated analytic gradient of that interpolant.
//! A coarser grid carries per-vertex
//! diffuse colour, tint and latent features; a two-layer head maps the latent features
//! and the view direction to the specular colour.
//!
//! All parameters live in one flat vector so optimisers, checkpoints and finite
//! differences can treat the field uniformly. Backward passes write into a [`GradSink`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Mat3, Result, Vec3};

/// Threshold on the density gradient norm below which the normal is undefined.
pub const DEGENERATE_GRADIENT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|k| !(max[k] > min[k])) {
            return Err(Error::invalid(format!("degenerate bounding box {min} {max}")));
        }
        Ok(Self { min, max })
    }

    pub fn cube(half: f64) -> Self {
        Self {
            min: Vec3::repeat(-half),
            max: Vec3::repeat(half),
        }
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        (0..3).all(|k| x[k] >= self.min[k] && x[k] <= self.max[k])
    }

    /// Parametric entry/exit distances of a ray, or `None` when it misses.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        for k in 0..3 {
            if dir[k].abs() < 1e-15 {
                if origin[k] < self.min[k] || origin[k] > self.max[k] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / dir[k];
            let mut a = (self.min[k] - origin[k]) * inv;
            let mut b = (self.max[k] - origin[k]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t_near = t_near.max(a);
            t_far = t_far.min(b);
        }
        (t_far > t_near.max(0.0)).then_some((t_near.max(0.0), t_far))
    }
}

/// Vertex counts per axis of a regular grid spanning a bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridDims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl GridDims {
    pub fn cube(n: usize) -> Self {
        Self { nx: n, ny: n, nz: n }
    }

    /// `res` vertices along the longest box axis; other axes keep roughly square cells.
    pub fn for_bounds(bounds: &Aabb, res: usize) -> Self {
        let ext = bounds.max - bounds.min;
        let longest = ext.max();
        let axis = |k: usize| {
            let cells = ((res - 1) as f64 * ext[k] / longest).round() as usize;
            cells.max(1) + 1
        };
        Self {
            nx: axis(0),
            ny: axis(1),
            nz: axis(2),
        }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.ny + iy) * self.nx + ix
    }

    fn axis(&self, k: usize) -> usize {
        [self.nx, self.ny, self.nz][k]
    }
}

/// Trilinear interpolation weights and their spatial derivatives at one point.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    /// d w / d x in world units; zero along axes where the point was clamped.
    pub dw: [[f64; 3]; 8],
}

impl Stencil {
    pub fn new(dims: &GridDims, bounds: &Aabb, x: &Vec3) -> Self {
        let mut i0 = [0usize; 3];
        let mut f = [0f64; 3];
        let mut inv_h = [0f64; 3];
        for k in 0..3 {
            let n = dims.axis(k);
            let h = (bounds.max[k] - bounds.min[k]) / (n - 1) as f64;
            let u = (x[k] - bounds.min[k]) / h;
            let clamped = u.clamp(0.0, (n - 1) as f64);
            let cell = (clamped.floor() as usize).min(n - 2);
            i0[k] = cell;
            f[k] = clamped - cell as f64;
            inv_h[k] = if u == clamped { 1.0 / h } else { 0.0 };
        }
        let mut st = Stencil {
            idx: [0; 8],
            w: [0.0; 8],
            dw: [[0.0; 3]; 8],
        };
        for c in 0..8 {
            let b = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            st.idx[c] = dims.index(i0[0] + b[0], i0[1] + b[1], i0[2] + b[2]);
            let mut lin = [0f64; 3];
            let mut slope = [0f64; 3];
            for k in 0..3 {
                if b[k] == 1 {
                    lin[k] = f[k];
                    slope[k] = inv_h[k];
                } else {
                    lin[k] = 1.0 - f[k];
                    slope[k] = -inv_h[k];
                }
            }
            st.w[c] = lin[0] * lin[1] * lin[2];
            st.dw[c] = [
                slope[0] * lin[1] * lin[2],
                lin[0] * slope[1] * lin[2],
                lin[0] * lin[1] * slope[2],
            ];
        }
        st
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`softplus`] for positive inputs.
pub fn softplus_inv(y: f64) -> f64 {
    let y = y.max(1e-12);
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

/// Shape of a [`FieldParams`] vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldLayout {
    pub bounds: Aabb,
    pub density_dims: GridDims,
    pub color_dims: GridDims,
    pub n_features: usize,
    pub hidden: usize,
}

impl FieldLayout {
    pub fn new(
        bounds: Aabb,
        density_res: usize,
        color_res: usize,
        n_features: usize,
        hidden: usize,
    ) -> Result<Self> {
        if density_res < 2 || color_res < 2 {
            return Err(Error::invalid("grid resolution must be at least 2"));
        }
        if hidden == 0 {
            return Err(Error::invalid("view head needs at least one hidden unit"));
        }
        Ok(Self {
            bounds,
            density_dims: GridDims::for_bounds(&bounds, density_res),
            color_dims: GridDims::for_bounds(&bounds, color_res),
            n_features,
            hidden,
        })
    }

    /// Layout with explicit grid dimensions, e.g. read back from a checkpoint.
    pub fn with_dims(
        bounds: Aabb,
        density_dims: GridDims,
        color_dims: GridDims,
        n_features: usize,
        hidden: usize,
    ) -> Result<Self> {
        let ok = |d: &GridDims| d.nx >= 2 && d.ny >= 2 && d.nz >= 2;
        if !ok(&density_dims) || !ok(&color_dims) {
            return Err(Error::invalid("grid dimensions must be at least 2 per axis"));
        }
        if hidden == 0 {
            return Err(Error::invalid("view head needs at least one hidden unit"));
        }
        Ok(Self {
            bounds,
            density_dims,
            color_dims,
            n_features,
            hidden,
        })
    }

    /// Density units per softplus unit: one over the mean density cell edge.
    pub fn density_scale(&self) -> f64 {
        let d = &self.density_dims;
        let e = self.bounds.max - self.bounds.min;
        let cell = (e.x / (d.nx - 1) as f64 + e.y / (d.ny - 1) as f64 + e.z / (d.nz - 1) as f64) / 3.0;
        1.0 / cell
    }

    /// Channels stored per colour vertex: diffuse (3), tint (3), features.
    pub fn color_channels(&self) -> usize {
        6 + self.n_features
    }

    pub fn head_inputs(&self) -> usize {
        self.n_features + 3
    }

    pub fn density_offset(&self) -> usize {
        0
    }

    pub fn color_offset(&self) -> usize {
        self.density_dims.len()
    }

    pub fn head_offset(&self) -> usize {
        self.color_offset() + self.color_dims.len() * self.color_channels()
    }

    pub fn head_len(&self) -> usize {
        self.hidden * self.head_inputs() + self.hidden + 3 * self.hidden + 3
    }

    pub fn len(&self) -> usize {
        self.head_offset() + self.head_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Whether flat index `i` is a diffuse-colour channel of the colour grid.
    pub fn is_diffuse_param(&self, i: usize) -> bool {
        i >= self.color_offset()
            && i < self.head_offset()
            && (i - self.color_offset()) % self.color_channels() < 3
    }

    fn w1(&self) -> usize {
        self.head_offset()
    }
    fn b1(&self) -> usize {
        self.w1() + self.hidden * self.head_inputs()
    }
    fn w2(&self) -> usize {
        self.b1() + self.hidden
    }
    fn b2(&self) -> usize {
        self.w2() + 3 * self.hidden
    }
}

/// Initialisation of a fresh field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldInit {
    /// Raw (pre-softplus) density at every vertex.
    pub density_bias: f64,
    pub density_noise: f64,
    pub feature_noise: f64,
    pub tint_bias: f64,
    pub seed: u64,
}

impl Default for FieldInit {
    fn default() -> Self {
        Self {
            density_bias: -2.0,
            density_noise: 0.1,
            feature_noise: 0.1,
            tint_bias: 0.0,
            seed: 0,
        }
    }
}

/// Small per-sample vectors (colour channels, head activations) kept off the heap.
pub type Channels = smallvec::SmallVec<[f64; 16]>;

/// Receives gradient contributions keyed by flat parameter index.
pub trait GradSink {
    fn add(&mut self, index: usize, value: f64);
}

impl GradSink for Vec<f64> {
    #[inline]
    fn add(&mut self, index: usize, value: f64) {
        self[index] += value;
    }
}

/// Sparse grid contributions plus a dense block for the (small) view head.
#[derive(Debug, Clone, Default)]
pub struct SparseGrad {
    pub entries: Vec<(u32, f64)>,
    pub head_offset: usize,
    pub head: Vec<f64>,
}

impl SparseGrad {
    pub fn new(layout: &FieldLayout) -> Self {
        Self {
            entries: Vec::new(),
            head_offset: layout.head_offset(),
            head: vec![0.0; layout.head_len()],
        }
    }

    /// Adds every contribution into a dense gradient, in insertion order.
    pub fn scatter_into(&self, dense: &mut [f64]) {
        for &(i, v) in &self.entries {
            dense[i as usize] += v;
        }
        for (k, v) in self.head.iter().enumerate() {
            dense[self.head_offset + k] += v;
        }
    }
}

impl GradSink for SparseGrad {
    #[inline]
    fn add(&mut self, index: usize, value: f64) {
        if index >= self.head_offset {
            self.head[index - self.head_offset] += value;
        } else {
            self.entries.push((index as u32, value));
        }
    }
}

/// Point and view direction at which the field is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldQuery {
    pub position: Vec3,
    pub direction: Vec3,
    /// Footprint covariance. Recorded for integrated encodings; the grid field ignores it.
    pub covariance: Option<Mat3>,
}

impl FieldQuery {
    pub fn new(position: Vec3, direction: Vec3) -> Self {
        Self {
            position,
            direction,
            covariance: None,
        }
    }
}

/// Everything the field reports at one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput {
    pub tau: f64,
    /// Unit normal `-grad tau / |grad tau|`, or zero when `degenerate`.
    pub normal: Vec3,
    pub degenerate: bool,
    pub c_d: Vec3,
    pub tint: Vec3,
    pub c_s: Vec3,
}

impl FieldOutput {
    /// Composite colour `clamp(c_d + s * c_s, 0, 1)`.
    pub fn color(&self) -> Vec3 {
        (self.c_d + self.tint.component_mul(&self.c_s)).map(|v| v.clamp(0.0, 1.0))
    }
}

/// Density branch evaluation kept for the backward pass.
#[derive(Debug, Clone, Copy)]
pub struct DensitySample {
    pub stencil: Stencil,
    pub raw: f64,
    /// Density units per softplus unit.
    pub scale: f64,
    pub tau: f64,
    pub grad_raw: Vec3,
    pub normal: Vec3,
    pub degenerate: bool,
}

impl DensitySample {
    pub fn grad_tau(&self) -> Vec3 {
        self.grad_raw * (self.scale * sigmoid(self.raw))
    }
}

/// Colour-grid evaluation kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ColorSample {
    pub stencil: Stencil,
    pub raw: Channels,
    pub c_d: Vec3,
    pub tint: Vec3,
}

impl ColorSample {
    pub fn features(&self) -> &[f64] {
        &self.raw[6..]
    }
}

/// View-head evaluation kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadSample {
    pub input: Channels,
    pub hidden: Channels,
    pub c_s: Vec3,
}

/// Adjoints of a [`FieldOutput`] flowing back into the parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OutputAdjoint {
    pub tau: f64,
    pub normal: Vec3,
    pub c_d: Vec3,
    pub tint: Vec3,
    pub c_s: Vec3,
}

/// Flat parameter vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub layout: FieldLayout,
    pub values: Vec<f64>,
}

impl FieldParams {
    pub fn new(layout: FieldLayout, init: &FieldInit) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
        let mut values = vec![0.0; layout.len()];
        for v in &mut values[..layout.color_offset()] {
            *v = init.density_bias + init.density_noise * (rng.gen::<f64>() * 2.0 - 1.0);
        }
        let ch = layout.color_channels();
        let color = &mut values[layout.color_offset()..layout.head_offset()];
        for vertex in color.chunks_mut(ch) {
            vertex[3..6].fill(init.tint_bias);
            for f in &mut vertex[6..] {
                *f = init.feature_noise * (rng.gen::<f64>() * 2.0 - 1.0);
            }
        }
        let fan_in = layout.head_inputs() as f64;
        let s1 = (6.0 / (fan_in + layout.hidden as f64)).sqrt();
        let s2 = (6.0 / (layout.hidden as f64 + 3.0)).sqrt();
        let (w1, b1, w2) = (layout.w1(), layout.b1(), layout.w2());
        for v in &mut values[w1..b1] {
            *v = s1 * (rng.gen::<f64>() * 2.0 - 1.0);
        }
        for v in &mut values[w2..w2 + 3 * layout.hidden] {
            *v = s2 * (rng.gen::<f64>() * 2.0 - 1.0);
        }
        Self { layout, values }
    }

    pub fn from_values(layout: FieldLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::DimensionMismatch(format!(
                "layout expects {} parameters, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn density_grid(&self) -> &[f64] {
        &self.values[..self.layout.color_offset()]
    }

    pub fn density_grid_mut(&mut self) -> &mut [f64] {
        let end = self.layout.color_offset();
        &mut self.values[..end]
    }

    /// World position of density vertex `(ix, iy, iz)`.
    pub fn density_vertex(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        vertex_position(&self.layout.density_dims, &self.layout.bounds, ix, iy, iz)
    }

    /// Sets the raw density so that vertex densities equal `tau(x)`.
    pub fn fit_density(&mut self, tau: impl Fn(&Vec3) -> f64) {
        let dims = self.layout.density_dims;
        let scale = self.layout.density_scale();
        let bounds = self.layout.bounds;
        for iz in 0..dims.nz {
            for iy in 0..dims.ny {
                for ix in 0..dims.nx {
                    let x = vertex_position(&dims, &bounds, ix, iy, iz);
                    self.values[dims.index(ix, iy, iz)] = softplus_inv(tau(&x) / scale);
                }
            }
        }
    }

    /// Sets the raw diffuse/tint channels from target colours in (0, 1).
    pub fn fit_color(&mut self, diffuse: impl Fn(&Vec3) -> Vec3, tint: impl Fn(&Vec3) -> Vec3) {
        let dims = self.layout.color_dims;
        let bounds = self.layout.bounds;
        let ch = self.layout.color_channels();
        let off = self.layout.color_offset();
        let logit = |p: f64| {
            let p = p.clamp(1e-4, 1.0 - 1e-4);
            (p / (1.0 - p)).ln()
        };
        for iz in 0..dims.nz {
            for iy in 0..dims.ny {
                for ix in 0..dims.nx {
                    let x = vertex_position(&dims, &bounds, ix, iy, iz);
                    let base = off + dims.index(ix, iy, iz) * ch;
                    let (cd, s) = (diffuse(&x), tint(&x));
                    for k in 0..3 {
                        self.values[base + k] = logit(cd[k]);
                        self.values[base + 3 + k] = logit(s[k]);
                    }
                }
            }
        }
    }

    pub fn density_sample(&self, x: &Vec3) -> DensitySample {
        let st = Stencil::new(&self.layout.density_dims, &self.layout.bounds, x);
        let grid = self.density_grid();
        let mut raw = 0.0;
        let mut g = Vec3::zeros();
        for c in 0..8 {
            let v = grid[st.idx[c]];
            raw += st.w[c] * v;
            g += Vec3::new(st.dw[c][0], st.dw[c][1], st.dw[c][2]) * v;
        }
        let scale = self.layout.density_scale();
        let tau = scale * softplus(raw);
        let grad_tau_norm = scale * g.norm() * sigmoid(raw);
        let degenerate = !(grad_tau_norm > DEGENERATE_GRADIENT);
        let normal = if degenerate { Vec3::zeros() } else { -g / g.norm() };
        DensitySample {
            stencil: st,
            raw,
            scale,
            tau,
            grad_raw: g,
            normal,
            degenerate,
        }
    }

    pub fn color_sample(&self, x: &Vec3) -> ColorSample {
        let st = Stencil::new(&self.layout.color_dims, &self.layout.bounds, x);
        let ch = self.layout.color_channels();
        let grid = &self.values[self.layout.color_offset()..self.layout.head_offset()];
        let mut raw: Channels = smallvec::smallvec![0.0; ch];
        for c in 0..8 {
            let base = st.idx[c] * ch;
            let w = st.w[c];
            for (r, v) in raw.iter_mut().zip(&grid[base..base + ch]) {
                *r += w * v;
            }
        }
        let c_d = Vec3::new(sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2]));
        let tint = Vec3::new(sigmoid(raw[3]), sigmoid(raw[4]), sigmoid(raw[5]));
        ColorSample {
            stencil: st,
            raw,
            c_d,
            tint,
        }
    }

    pub fn head_sample(&self, features: &[f64], dir: &Vec3) -> HeadSample {
        let l = &self.layout;
        let ni = l.head_inputs();
        let mut input = Channels::with_capacity(ni);
        input.extend_from_slice(features);
        input.extend_from_slice(dir.as_slice());
        let w1 = &self.values[l.w1()..l.b1()];
        let b1 = &self.values[l.b1()..l.w2()];
        let w2 = &self.values[l.w2()..l.b2()];
        let b2 = &self.values[l.b2()..l.b2() + 3];
        let hidden: Channels = (0..l.hidden)
            .map(|h| {
                let row = &w1[h * ni..(h + 1) * ni];
                let a: f64 = row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>() + b1[h];
                a.tanh()
            })
            .collect();
        let mut c_s = Vec3::zeros();
        for o in 0..3 {
            let row = &w2[o * l.hidden..(o + 1) * l.hidden];
            let a: f64 = row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>() + b2[o];
            c_s[o] = sigmoid(a);
        }
        HeadSample { input, hidden, c_s }
    }

    /// Full evaluation at one query. Positions outside the bounds are clamped.
    pub fn query(&self, q: &FieldQuery) -> FieldOutput {
        let ds = self.density_sample(&q.position);
        let cs = self.color_sample(&q.position);
        let hs = self.head_sample(cs.features(), &q.direction);
        FieldOutput {
            tau: ds.tau,
            normal: ds.normal,
            degenerate: ds.degenerate,
            c_d: cs.c_d,
            tint: cs.tint,
            c_s: hs.c_s,
        }
    }

    /// Back-propagates adjoints of `tau` and of the normal into the density grid.
    pub fn density_backward<S: GradSink>(
        &self,
        ds: &DensitySample,
        d_tau: f64,
        d_normal: &Vec3,
        sink: &mut S,
    ) {
        let st = &ds.stencil;
        let d_raw = d_tau * ds.scale * sigmoid(ds.raw);
        let mut d_g = Vec3::zeros();
        if !ds.degenerate && d_normal.norm_squared() > 0.0 {
            let n = ds.normal;
            let gn = ds.grad_raw.norm();
            d_g = -(d_normal - n * n.dot(d_normal)) / gn;
        }
        let off = self.layout.density_offset();
        for c in 0..8 {
            let dw = st.dw[c];
            let v = st.w[c] * d_raw + dw[0] * d_g.x + dw[1] * d_g.y + dw[2] * d_g.z;
            if v != 0.0 {
                sink.add(off + st.idx[c], v);
            }
        }
    }

    /// Back-propagates colour-channel adjoints into the colour grid.
    ///
    /// `d_features` can be empty when the head was not evaluated.
    pub fn color_backward<S: GradSink>(
        &self,
        cs: &ColorSample,
        d_cd: &Vec3,
        d_tint: &Vec3,
        d_features: &[f64],
        sink: &mut S,
    ) {
        let ch = self.layout.color_channels();
        let mut d_raw: Channels = smallvec::smallvec![0.0; ch];
        for k in 0..3 {
            d_raw[k] = d_cd[k] * cs.c_d[k] * (1.0 - cs.c_d[k]);
            d_raw[3 + k] = d_tint[k] * cs.tint[k] * (1.0 - cs.tint[k]);
        }
        for (d, f) in d_raw[6..].iter_mut().zip(d_features) {
            *d = *f;
        }
        let off = self.layout.color_offset();
        for c in 0..8 {
            let base = off + cs.stencil.idx[c] * ch;
            let w = cs.stencil.w[c];
            if w == 0.0 {
                continue;
            }
            for (k, d) in d_raw.iter().enumerate() {
                if *d != 0.0 {
                    sink.add(base + k, w * d);
                }
            }
        }
    }

    /// Back-propagates a specular-colour adjoint through the head; returns the feature adjoint.
    pub fn head_backward<S: GradSink>(&self, hs: &HeadSample, d_cs: &Vec3, sink: &mut S) -> Channels {
        let l = &self.layout;
        let ni = l.head_inputs();
        let w1 = &self.values[l.w1()..l.b1()];
        let w2 = &self.values[l.w2()..l.b2()];
        let mut d_hidden: Channels = smallvec::smallvec![0.0; l.hidden];
        for o in 0..3 {
            let d_a = d_cs[o] * hs.c_s[o] * (1.0 - hs.c_s[o]);
            if d_a == 0.0 {
                continue;
            }
            sink.add(l.b2() + o, d_a);
            for h in 0..l.hidden {
                sink.add(l.w2() + o * l.hidden + h, d_a * hs.hidden[h]);
                d_hidden[h] += d_a * w2[o * l.hidden + h];
            }
        }
        let mut d_input: Channels = smallvec::smallvec![0.0; ni];
        for h in 0..l.hidden {
            let d_a = d_hidden[h] * (1.0 - hs.hidden[h] * hs.hidden[h]);
            if d_a == 0.0 {
                continue;
            }
            sink.add(l.b1() + h, d_a);
            for i in 0..ni {
                sink.add(l.w1() + h * ni + i, d_a * hs.input[i]);
                d_input[i] += d_a * w1[h * ni + i];
            }
        }
        d_input.truncate(l.n_features);
        d_input
    }
}

fn vertex_position(dims: &GridDims, bounds: &Aabb, ix: usize, iy: usize, iz: usize) -> Vec3 {
    let f = |i: usize, n: usize, k: usize| {
        bounds.min[k] + (bounds.max[k] - bounds.min[k]) * i as f64 / (n - 1) as f64
    };
    Vec3::new(f(ix, dims.nx, 0), f(iy, dims.ny, 1), f(iz, dims.nz, 2))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(res: usize) -> FieldLayout {
        FieldLayout::new(Aabb::cube(1.0), res, res.min(6), 3, 5).unwrap()
    }

    fn random_params(res: usize, seed: u64) -> FieldParams {
        let mut p = FieldParams::new(layout(res), &FieldInit { seed, ..Default::default() });
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for v in &mut p.values {
            *v = rng.gen_range(-2.0..2.0);
        }
        p
    }

    fn random_interior_point(rng: &mut ChaCha8Rng, dims: &GridDims) -> Vec3 {
        // keep away from cell faces so finite differences stay inside one cell
        let h = 2.0 / (dims.nx - 1) as f64;
        loop {
            let x = Vec3::new(
                rng.gen_range(-0.98..0.98),
                rng.gen_range(-0.98..0.98),
                rng.gen_range(-0.98..0.98),
            );
            let ok = (0..3).all(|k| {
                let u = (x[k] + 1.0) / h;
                let f = u - u.floor();
                f > 0.01 && f < 0.99
            });
            if ok {
                return x;
            }
        }
    }

    #[test]
    fn constant_density_has_degenerate_normal() {
        let mut p = FieldParams::new(layout(8), &FieldInit::default());
        p.density_grid_mut().fill(0.7);
        let out = p.query(&FieldQuery::new(Vec3::new(0.1, 0.2, 0.3), Vec3::z()));
        assert!(out.degenerate);
        assert_eq!(out.normal, Vec3::zeros());
        assert!((out.tau - p.layout.density_scale() * softplus(0.7)).abs() < 1e-12);
    }

    #[test]
    fn linear_density_gives_constant_normal() {
        for slope in [2.0, -3.0] {
            let mut p = FieldParams::new(layout(8), &FieldInit::default());
            let scale = p.layout.density_scale();
            p.fit_density(|x| scale * softplus(slope * x.z));
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            for _ in 0..50 {
                let x = Vec3::new(
                    rng.gen_range(-0.9..0.9),
                    rng.gen_range(-0.9..0.9),
                    rng.gen_range(-0.9..0.9),
                );
                let out = p.query(&FieldQuery::new(x, Vec3::x()));
                let expected = -Vec3::z() * f64::signum(slope);
                assert!((out.normal - expected).norm() < 1e-9, "{}", out.normal);
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let p = random_params(7, 3);
        let dims = p.layout.density_dims;
        let h_cell = 2.0 / (dims.nx - 1) as f64;
        let step = 1e-4 * h_cell;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let x = random_interior_point(&mut rng, &dims);
            let ds = p.density_sample(&x);
            let g = ds.grad_tau();
            for k in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[k] += step;
                xm[k] -= step;
                let fd = (p.density_sample(&xp).tau - p.density_sample(&xm).tau) / (2.0 * step);
                let scale = g.norm().max(1e-3);
                assert!((fd - g[k]).abs() / scale < 1e-5, "axis {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn colors_bounded_for_extreme_parameters() {
        let mut p = random_params(4, 8);
        for (i, v) in p.values.iter_mut().enumerate() {
            *v = if i % 2 == 0 { 1e3 } else { -1e3 };
        }
        let out = p.query(&FieldQuery::new(Vec3::new(0.2, -0.1, 0.5), Vec3::y()));
        for c in [out.c_d, out.tint, out.c_s, out.color()] {
            assert!(c.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn clamped_outside_box() {
        let p = random_params(5, 2);
        let inside = p.query(&FieldQuery::new(Vec3::new(1.0, 0.3, -0.2), Vec3::z()));
        let outside = p.query(&FieldQuery::new(Vec3::new(4.0, 0.3, -0.2), Vec3::z()));
        assert!((inside.tau - outside.tau).abs() < 1e-12);
    }

    #[test]
    fn layout_accounting() {
        let l = layout(4);
        assert_eq!(l.color_offset(), 64);
        assert_eq!(l.head_offset(), 64 + 64 * 9);
        assert_eq!(l.head_len(), 5 * 6 + 5 + 15 + 3);
        assert!(l.is_diffuse_param(64));
        assert!(!l.is_diffuse_param(67));
        assert!(l.is_diffuse_param(64 + 9 + 2));
    }

    #[test]
    fn box_intersection() {
        let b = Aabb::cube(1.0);
        let (t0, t1) = b.intersect(&Vec3::new(0.0, 0.0, 3.0), &-Vec3::z()).unwrap();
        assert!((t0 - 2.0).abs() < 1e-12 && (t1 - 4.0).abs() < 1e-12);
        assert!(b.intersect(&Vec3::new(3.0, 0.0, 3.0), &-Vec3::z()).is_none());
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for y in [1e-6, 1e-3, 0.5, 3.0, 50.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() / y < 1e-9);
        }
    }
}
