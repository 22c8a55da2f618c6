//! Triangular transport maps made of monotone rectified components.
//!
//! Component `j` (in label order) computes
//!
//! ```text
//! φ_j = f_j(c) + z_j · Σ_q w_q · softplus(g_j(t_q z_j, c))
//! ```
//!
//! where `c` holds the already generated outputs `φ_k` for `k ∈ C(j)`. The
//! log-determinant uses the derivative of the exact integral,
//! `Σ_j ln softplus(g_j(z_j, c))`.
//!
//! All parameters live in one flat arena so the optimizer and the checkpoint
//! format see a single vector.

mod quadrature;

pub use quadrature::QuadratureRule;

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::lattice::LatticeGeometry;
use crate::nn::{gather_columns, read_container, write_container, Activation, MlpArch};
use crate::ordering::{
    conditioning_sets, exact_dependency_sets, ConditioningSets, NeighborhoodSpec, Ordering, OrderingKind,
};

/// `ln(e − 1)`, the bias for which `softplus` returns 1.
pub const UNIT_SOFTPLUS_BIAS: f64 = 0.541_324_854_612_918_1;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Which earlier labels each component may read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapMode {
    /// Past stencil neighbors.
    Sparse,
    /// Every earlier label.
    Dense,
    /// Past neighbors in the eliminated (filled-in) graph.
    Exact,
}

impl MapMode {
    pub fn name(self) -> &'static str {
        match self {
            MapMode::Sparse => "sparse",
            MapMode::Dense => "dense",
            MapMode::Exact => "exact",
        }
    }
}

impl fmt::Display for MapMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MapMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparse" => Ok(MapMode::Sparse),
            "dense" => Ok(MapMode::Dense),
            "exact" => Ok(MapMode::Exact),
            _ => Err(Error::UnknownName {
                kind: "map mode",
                name: s.to_string(),
            }),
        }
    }
}

/// Everything needed to rebuild a map's structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapSpec {
    #[serde(rename = "L")]
    pub extent: usize,
    pub dim: usize,
    pub ordering: OrderingKind,
    pub mode: MapMode,
    pub nbhd_order: NeighborhoodSpec,
    pub quadrature: usize,
    pub hidden: Vec<usize>,
}

impl MapSpec {
    /// A 2D map with 15 quadrature nodes and three hidden layers of 64.
    pub fn new(extent: usize, ordering: OrderingKind, mode: MapMode, nbhd_order: NeighborhoodSpec) -> Self {
        Self {
            extent,
            dim: 2,
            ordering,
            mode,
            nbhd_order,
            quadrature: 15,
            hidden: vec![64, 64, 64],
        }
    }

    pub fn with_quadrature(mut self, q: usize) -> Self {
        self.quadrature = q;
        self
    }

    pub fn with_hidden(mut self, hidden: &[usize]) -> Self {
        self.hidden = hidden.to_vec();
        self
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim;
        self
    }
}

/// Parameter initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapInit {
    /// He hidden layers, small integrand output weights with `softplus(bias) = 1`,
    /// zero shift output layer.
    NearIdentity,
    /// All weights zero except integrand output biases; the map is exactly `φ = z`.
    Identity,
    /// He weights everywhere with random biases; for structural tests.
    Random,
}

#[derive(Debug, Clone)]
enum Shift {
    Scalar { offset: usize },
    Net { arch: MlpArch, offset: usize },
}

#[derive(Debug, Clone)]
struct Component {
    shift: Shift,
    g: MlpArch,
    g_offset: usize,
}

/// Output of a batched forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MapOutput {
    /// `B × N` fields in site order.
    pub phi: Array2<f64>,
    /// Log-determinant per batch row.
    pub logdet: Array1<f64>,
}

/// A triangular map together with its parameters.
#[derive(Debug, Clone)]
pub struct TriangularMap {
    spec: MapSpec,
    geom: LatticeGeometry,
    ordering: Ordering,
    cond: ConditioningSets,
    quad: QuadratureRule,
    components: Vec<Component>,
    params: Vec<f64>,
}

impl TriangularMap {
    pub fn new<R: Rng + ?Sized>(spec: MapSpec, init: MapInit, rng: &mut R) -> Result<Self> {
        let mut map = Self::structure(spec)?;
        map.initialize(init, rng);
        Ok(map)
    }

    /// Builds the map with a given parameter vector.
    pub fn with_params(spec: MapSpec, params: Vec<f64>) -> Result<Self> {
        let mut map = Self::structure(spec)?;
        if params.len() != map.params.len() {
            return Err(Error::ShapeMismatch {
                expected: map.params.len(),
                got: params.len(),
            });
        }
        map.params = params;
        Ok(map)
    }

    fn structure(spec: MapSpec) -> Result<Self> {
        let geom = LatticeGeometry::new(spec.extent, spec.dim)?;
        let ordering = spec.ordering.build(&geom)?;
        let cond = match spec.mode {
            MapMode::Sparse => conditioning_sets(&ordering, spec.nbhd_order, &geom),
            MapMode::Dense => ConditioningSets::dense(geom.n_sites()),
            MapMode::Exact => exact_dependency_sets(&ordering, &geom),
        };
        let quad = QuadratureRule::gauss_legendre(spec.quadrature)?;
        let mut offset = 0;
        let mut components = Vec::with_capacity(cond.len());
        for set in cond.iter() {
            let shift = if set.is_empty() {
                offset += 1;
                Shift::Scalar { offset: offset - 1 }
            } else {
                let arch = MlpArch::new(set.len(), &spec.hidden, 1, Activation::Gelu, Activation::Identity);
                let n = arch.n_params();
                offset += n;
                Shift::Net {
                    arch,
                    offset: offset - n,
                }
            };
            let g = MlpArch::new(set.len() + 1, &spec.hidden, 1, Activation::Gelu, Activation::Softplus);
            let g_offset = offset;
            offset += g.n_params();
            components.push(Component { shift, g, g_offset });
        }
        Ok(Self {
            spec,
            geom,
            ordering,
            cond,
            quad,
            components,
            params: vec![0.0; offset],
        })
    }

    fn initialize<R: Rng + ?Sized>(&mut self, init: MapInit, rng: &mut R) {
        self.params.fill(0.0);
        let normal = |std: f64| Normal::new(0.0, std).expect("valid std");
        for comp in &self.components {
            match &comp.shift {
                Shift::Scalar { offset } => {
                    if init == MapInit::Random {
                        self.params[*offset] = normal(1.0).sample(rng);
                    }
                }
                Shift::Net { arch, offset } => {
                    let p = &mut self.params[*offset..*offset + arch.n_params()];
                    match init {
                        MapInit::Identity => {}
                        MapInit::NearIdentity => {
                            arch.init_he(p, rng);
                            let (mut w, _) = arch.layer_mut(p, arch.n_layers() - 1);
                            w.fill(0.0);
                        }
                        MapInit::Random => {
                            arch.init_he(p, rng);
                            randomize_biases(arch, p, rng);
                        }
                    }
                }
            }
            let g = &comp.g;
            let p = &mut self.params[comp.g_offset..comp.g_offset + g.n_params()];
            let last = g.n_layers() - 1;
            match init {
                MapInit::Identity => {
                    let (_, mut b) = g.layer_mut(p, last);
                    b.fill(UNIT_SOFTPLUS_BIAS);
                }
                MapInit::NearIdentity => {
                    g.init_he(p, rng);
                    let (mut w, mut b) = g.layer_mut(p, last);
                    let small = normal(1e-2);
                    w.iter_mut().for_each(|v| *v = small.sample(rng));
                    b.fill(UNIT_SOFTPLUS_BIAS);
                }
                MapInit::Random => {
                    g.init_he(p, rng);
                    randomize_biases(g, p, rng);
                }
            }
        }
    }

    pub fn spec(&self) -> &MapSpec {
        &self.spec
    }

    pub fn geometry(&self) -> &LatticeGeometry {
        &self.geom
    }

    pub fn ordering(&self) -> &Ordering {
        &self.ordering
    }

    pub fn conditioning(&self) -> &ConditioningSets {
        &self.cond
    }

    pub fn quadrature(&self) -> &QuadratureRule {
        &self.quad
    }

    pub fn n_sites(&self) -> usize {
        self.geom.n_sites()
    }

    /// Number of trainable scalars.
    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Rows `[t_q z_b, c_b]` for every node, then `[z_b, c_b]`, per sample `b`.
    fn integrand_inputs(&self, z: ArrayView1<f64>, ctx: ArrayView2<f64>) -> Array2<f64> {
        let q = self.quad.len();
        let c = ctx.ncols();
        let mut rows = Array2::zeros((z.len() * (q + 1), c + 1));
        for (b, (&zb, ctx_b)) in z.iter().zip(ctx.outer_iter()).enumerate() {
            for k in 0..=q {
                let mut row = rows.row_mut(b * (q + 1) + k);
                row[0] = if k < q { self.quad.nodes()[k] * zb } else { zb };
                row.slice_mut(ndarray::s![1..]).assign(&ctx_b);
            }
        }
        rows
    }

    fn shift_forward(&self, comp: &Component, ctx: ArrayView2<f64>) -> Result<Array1<f64>> {
        match &comp.shift {
            Shift::Scalar { offset } => Ok(Array1::from_elem(ctx.nrows(), self.params[*offset])),
            Shift::Net { arch, offset } => {
                let out = arch.forward(&self.params[*offset..*offset + arch.n_params()], ctx)?;
                Ok(out.column(0).to_owned())
            }
        }
    }

    fn g_params(&self, comp: &Component) -> &[f64] {
        &self.params[comp.g_offset..comp.g_offset + comp.g.n_params()]
    }

    /// Evaluates component `label` on a batch: returns `(φ_j, diag_j)`.
    pub fn component_forward(
        &self,
        label: usize,
        z: ArrayView1<f64>,
        ctx: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array1<f64>)> {
        let comp = &self.components[label];
        let expected = self.cond.get(label).len();
        if ctx.ncols() != expected || ctx.nrows() != z.len() {
            return Err(Error::ShapeMismatch {
                expected,
                got: ctx.ncols(),
            });
        }
        let shift = self.shift_forward(comp, ctx)?;
        let r = comp
            .g
            .forward(self.g_params(comp), self.integrand_inputs(z, ctx).view())?;
        let q = self.quad.len();
        let r = r.into_shape_with_order((z.len(), q + 1)).expect("one output per row");
        let mut phi = shift;
        let mut diag = Array1::zeros(z.len());
        for (b, rb) in r.outer_iter().enumerate() {
            let integral: f64 = self.quad.weights().iter().zip(rb.iter()).map(|(w, v)| w * v).sum();
            phi[b] += z[b] * integral;
            diag[b] = rb[q];
        }
        Ok((phi, diag))
    }

    /// Forward pass in label order: `(φ by label, logdet)`.
    pub fn forward_labels(&self, z: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
        let n = self.n_sites();
        if z.ncols() != n {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: z.ncols(),
            });
        }
        let mut phi = Array2::zeros(z.dim());
        let mut logdet = Array1::zeros(z.nrows());
        for label in 0..n {
            let ctx = gather_columns(phi.view(), self.cond.get(label));
            let (p, d) = self.component_forward(label, z.column(label), ctx.view())?;
            let ld = d.mapv(f64::ln);
            if p.iter().chain(ld.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteComponent { label });
            }
            phi.column_mut(label).assign(&p);
            logdet += &ld;
        }
        Ok((phi, logdet))
    }

    /// Maps base samples `z` (`B × N`, label order) to fields in site order.
    pub fn forward(&self, z: ArrayView2<f64>) -> Result<MapOutput> {
        let (phi, logdet) = self.forward_labels(z)?;
        Ok(MapOutput {
            phi: self.labels_to_sites(phi.view()),
            logdet,
        })
    }

    /// Draws `batch` standard normal base samples and pushes them through the map.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<(Array2<f64>, MapOutput)> {
        let z = Array2::from_shape_simple_fn((batch, self.n_sites()), || StandardNormal.sample(rng));
        let out = self.forward(z.view())?;
        Ok((z, out))
    }

    pub fn labels_to_sites(&self, by_label: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(by_label.dim());
        for (label, col) in by_label.axis_iter(Axis(1)).enumerate() {
            out.column_mut(self.ordering.site(label)).assign(&col);
        }
        out
    }

    pub fn sites_to_labels(&self, by_site: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(by_site.dim());
        for (site, col) in by_site.axis_iter(Axis(1)).enumerate() {
            out.column_mut(self.ordering.label(site)).assign(&col);
        }
        out
    }

    /// Parameter gradient of `Σ_b (dphi_b · φ_b + dlogdet_b · logdet_b)`.
    ///
    /// `z` and `out` must come from the same forward pass; `dphi` is in site
    /// order. Contributions through the contexts of later components are
    /// included.
    pub fn gradient(
        &self,
        z: ArrayView2<f64>,
        out: &MapOutput,
        dphi: ArrayView2<f64>,
        dlogdet: ArrayView1<f64>,
    ) -> Result<Vec<f64>> {
        if dphi.dim() != out.phi.dim() || dlogdet.len() != out.logdet.len() || z.dim() != out.phi.dim() {
            return Err(Error::ShapeMismatch {
                expected: out.phi.len(),
                got: dphi.len(),
            });
        }
        let phi = self.sites_to_labels(out.phi.view());
        let mut adj = self.sites_to_labels(dphi);
        let mut grad = vec![0.0; self.params.len()];
        let q = self.quad.len();
        let weights = self.quad.weights();
        for label in (0..self.n_sites()).rev() {
            let comp = &self.components[label];
            let set = self.cond.get(label);
            let ctx = gather_columns(phi.view(), set);
            let a = adj.column(label).to_owned();
            let zj = z.column(label);

            let gp = self.g_params(comp);
            let tape = comp.g.forward_tape(gp, self.integrand_inputs(zj, ctx.view()).view())?;
            let r = tape.output();
            let mut dy = Array2::zeros(r.dim());
            for b in 0..zj.len() {
                for k in 0..q {
                    dy[[b * (q + 1) + k, 0]] = a[b] * zj[b] * weights[k];
                }
                let row = b * (q + 1) + q;
                dy[[row, 0]] = dlogdet[b] / r[[row, 0]];
            }
            let g_grad = &mut grad[comp.g_offset..comp.g_offset + comp.g.n_params()];
            let dx = comp.g.backward(gp, &tape, dy.view(), g_grad)?;
            for b in 0..zj.len() {
                for (k, &src) in set.iter().enumerate() {
                    let s: f64 = (0..=q).map(|i| dx[[b * (q + 1) + i, k + 1]]).sum();
                    adj[[b, src]] += s;
                }
            }

            match &comp.shift {
                Shift::Scalar { offset } => grad[*offset] += a.sum(),
                Shift::Net { arch, offset } => {
                    let fp = &self.params[*offset..*offset + arch.n_params()];
                    let tape = arch.forward_tape(fp, ctx.view())?;
                    let da = a.view().insert_axis(Axis(1));
                    let dx = arch.backward(fp, &tape, da, &mut grad[*offset..*offset + arch.n_params()])?;
                    for b in 0..zj.len() {
                        for (k, &src) in set.iter().enumerate() {
                            adj[[b, src]] += dx[[b, k]];
                        }
                    }
                }
            }
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("map gradient entry {i}")));
        }
        Ok(grad)
    }

    /// Solves `T_j(z; ctx) = φ_j` for `z` by bracketing, bisection and Newton steps.
    pub fn component_inverse(&self, label: usize, phi_j: f64, ctx: &[f64]) -> Result<f64> {
        const MAX_DOUBLINGS: usize = 200;
        const TOL: f64 = 1e-10;
        let ctx = ArrayView2::from_shape((1, ctx.len()), ctx).expect("row context");
        let eval = |z: f64| -> Result<(f64, f64)> {
            let zs = [z];
            let (p, d) = self.component_forward(label, ArrayView1::from(&zs[..]), ctx)?;
            Ok((p[0] - phi_j, d[0]))
        };
        let (mut lo, mut hi) = (-1.0f64, 1.0f64);
        let mut doublings = 0;
        while eval(lo)?.0 > 0.0 {
            lo *= 2.0;
            doublings += 1;
            if doublings > MAX_DOUBLINGS {
                return Err(Error::BracketFailure { label, doublings });
            }
        }
        while eval(hi)?.0 < 0.0 {
            hi *= 2.0;
            doublings += 1;
            if doublings > MAX_DOUBLINGS {
                return Err(Error::BracketFailure { label, doublings });
            }
        }
        let mut z = 0.5 * (lo + hi);
        for _ in 0..400 {
            let (h, d) = eval(z)?;
            if h == 0.0 {
                return Ok(z);
            }
            if h > 0.0 {
                hi = z;
            } else {
                lo = z;
            }
            let step = h / d;
            if h.abs() <= TOL && step.abs() <= 1e-13 * z.abs().max(1.0) {
                return Ok(z);
            }
            let newton = z - step;
            z = if newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo <= f64::EPSILON * lo.abs().max(hi.abs()).max(1.0) {
                return Ok(z);
            }
        }
        Ok(z)
    }

    /// Recovers base samples (label order) from fields in site order.
    pub fn inverse(&self, phi: ArrayView2<f64>) -> Result<Array2<f64>> {
        let phi = self.sites_to_labels(phi);
        let mut z = Array2::zeros(phi.dim());
        for (b, row) in phi.outer_iter().enumerate() {
            for label in 0..self.n_sites() {
                let ctx: Vec<f64> = self.cond.get(label).iter().map(|&k| row[k]).collect();
                z[[b, label]] = self.component_inverse(label, row[label], &ctx)?;
            }
        }
        Ok(z)
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let mut header = serde_json::to_value(&self.spec)?;
        let obj = header.as_object_mut().expect("spec serializes to an object");
        obj.insert("hidden_activation".into(), Value::from("gelu"));
        obj.insert("shift_output".into(), Value::from("identity"));
        obj.insert("integrand_output".into(), Value::from("softplus"));
        obj.insert("n_params".into(), Value::from(self.params.len()));
        write_container(w, &header, &self.params)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let (header, params) = read_container(r)?;
        let spec: MapSpec =
            serde_json::from_value(header).map_err(|e| Error::Checkpoint(format!("invalid map header: {e}")))?;
        Self::with_params(spec, params).map_err(|e| match e {
            Error::ShapeMismatch { expected, got } => {
                Error::Checkpoint(format!("header describes {expected} parameters, file holds {got}"))
            }
            other => other,
        })
    }
}

fn randomize_biases<R: Rng + ?Sized>(arch: &MlpArch, p: &mut [f64], rng: &mut R) {
    let normal = Normal::new(0.0, 0.3).expect("valid std");
    for layer in 0..arch.n_layers() {
        let (_, mut b) = arch.layer_mut(p, layer);
        b.iter_mut().for_each(|v| *v = normal.sample(rng));
    }
}

/// `ln N(z; 0, I)` for one sample.
pub fn base_logdensity(z: ArrayView1<f64>) -> f64 {
    -0.5 * z.dot(&z) - 0.5 * z.len() as f64 * LN_2PI
}

/// `ln p_Φ(φ) = ln p_Z(z) − logdet` per batch row.
pub fn model_logdensity(z: ArrayView2<f64>, logdet: ArrayView1<f64>) -> Array1<f64> {
    Array1::from_iter(z.outer_iter().zip(logdet).map(|(zb, &ld)| base_logdensity(zb) - ld))
}

#[cfg(test)]
mod tests;
