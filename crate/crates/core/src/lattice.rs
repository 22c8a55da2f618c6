//! Periodic hypercubic lattices and the scalar φ⁴ action.
//!
//! Sites are indexed row-major: for coordinates `(c_0, …, c_{D-1})` the index is
//! `Σ_k c_k · L^(D-1-k)`, so in two dimensions `i = row·L + col`. Direction `μ`
//! moves coordinate `μ` by +1, wrapping at the boundary.
//!
//! The action counts each undirected bond once through the forward hop:
//!
//! ```text
//! S[φ] = Σ_x [ ½ Σ_μ (φ_{x+μ} − φ_x)² + (m0²/2) φ_x² + (λ0/4!) φ_x⁴ ]
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of an `L^D` periodic lattice together with its neighbor table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatticeGeometry {
    extent: usize,
    dim: usize,
    n_sites: usize,
    // neighbors[site * 2D + 2μ] is the +μ hop, [.. + 1] the −μ hop
    neighbors: Vec<usize>,
}

impl LatticeGeometry {
    pub fn new(extent: usize, dim: usize) -> Result<Self> {
        if extent == 0 {
            return Err(Error::InvalidGeometry("extent must be positive".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidGeometry("dimension must be positive".into()));
        }
        let n_sites = extent
            .checked_pow(dim as u32)
            .ok_or_else(|| Error::InvalidGeometry("site count overflows".into()))?;
        let mut geom = LatticeGeometry {
            extent,
            dim,
            n_sites,
            neighbors: Vec::with_capacity(n_sites * 2 * dim),
        };
        for site in 0..n_sites {
            let coords = geom.coords(site);
            for mu in 0..dim {
                let mut fwd = coords.clone();
                fwd[mu] = (coords[mu] + 1) % extent;
                let mut bwd = coords.clone();
                bwd[mu] = (coords[mu] + extent - 1) % extent;
                geom.neighbors.push(geom.index_unchecked(&fwd));
                geom.neighbors.push(geom.index_unchecked(&bwd));
            }
        }
        Ok(geom)
    }

    /// Two-dimensional `L × L` lattice.
    pub fn square(extent: usize) -> Result<Self> {
        Self::new(extent, 2)
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    /// Row-major site index of `coords`.
    pub fn site_index(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.dim {
            return Err(Error::ShapeMismatch {
                expected: self.dim,
                got: coords.len(),
            });
        }
        for (axis, &c) in coords.iter().enumerate() {
            if c >= self.extent {
                return Err(Error::CoordinateOutOfRange {
                    axis,
                    coord: c,
                    extent: self.extent,
                });
            }
        }
        Ok(self.index_unchecked(coords))
    }

    fn index_unchecked(&self, coords: &[usize]) -> usize {
        coords.iter().fold(0, |acc, &c| acc * self.extent + c)
    }

    /// Inverse of [`site_index`](Self::site_index).
    pub fn coords(&self, site: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim];
        let mut rest = site;
        for k in (0..self.dim).rev() {
            out[k] = rest % self.extent;
            rest /= self.extent;
        }
        out
    }

    /// Site reached from `site` by a hop of +1 along `mu`.
    #[inline]
    pub fn forward(&self, site: usize, mu: usize) -> usize {
        self.neighbors[site * 2 * self.dim + 2 * mu]
    }

    /// Site reached from `site` by a hop of −1 along `mu`.
    #[inline]
    pub fn backward(&self, site: usize, mu: usize) -> usize {
        self.neighbors[site * 2 * self.dim + 2 * mu + 1]
    }

    /// The `2D` nearest neighbors as `[+0, −0, +1, −1, …]`.
    pub fn neighbors(&self, site: usize) -> &[usize] {
        let w = 2 * self.dim;
        &self.neighbors[site * w..(site + 1) * w]
    }

    /// Site displaced from `site` by an arbitrary periodic offset.
    pub fn shifted(&self, site: usize, offset: &[isize]) -> usize {
        let l = self.extent as isize;
        let coords: Vec<usize> = self
            .coords(site)
            .iter()
            .zip(offset)
            .map(|(&c, &o)| (c as isize + o).rem_euclid(l) as usize)
            .collect();
        self.index_unchecked(&coords)
    }

    /// Squared Euclidean distance between two sites under periodic wrap.
    pub fn periodic_sq_distance(&self, a: usize, b: usize) -> usize {
        let ca = self.coords(a);
        let cb = self.coords(b);
        ca.iter()
            .zip(&cb)
            .map(|(&x, &y)| {
                let d = x.abs_diff(y);
                let d = d.min(self.extent - d);
                d * d
            })
            .sum()
    }
}

/// Bare couplings of the φ⁴ action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhiFourParams {
    pub m0_sq: f64,
    pub lambda0: f64,
}

impl PhiFourParams {
    pub fn new(m0_sq: f64, lambda0: f64) -> Result<Self> {
        if !m0_sq.is_finite() || !lambda0.is_finite() {
            return Err(Error::InvalidCouplings("couplings must be finite".into()));
        }
        if lambda0 < 0.0 {
            return Err(Error::InvalidCouplings(format!(
                "lambda0 = {lambda0} leaves the action unbounded below"
            )));
        }
        Ok(Self { m0_sq, lambda0 })
    }

    #[inline]
    fn potential(&self, v: f64) -> f64 {
        let v2 = v * v;
        0.5 * self.m0_sq * v2 + self.lambda0 / 24.0 * v2 * v2
    }
}

/// A validated field configuration: one finite real per site.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfiguration(Vec<f64>);

impl FieldConfiguration {
    pub fn new(geom: &LatticeGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geom.n_sites() {
            return Err(Error::ShapeMismatch {
                expected: geom.n_sites(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field value at site {i}")));
        }
        Ok(Self(values))
    }

    pub fn zeros(geom: &LatticeGeometry) -> Self {
        Self(vec![0.0; geom.n_sites()])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for FieldConfiguration {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A target density `exp(−S[φ])` known up to normalization.
pub trait Action {
    fn n_sites(&self) -> usize;

    fn action(&self, phi: &[f64]) -> f64;

    /// Writes `∂S/∂φ` into `out`.
    fn gradient(&self, phi: &[f64], out: &mut [f64]);
}

/// The φ⁴ action on a periodic lattice.
#[derive(Debug, Clone)]
pub struct PhiFour {
    pub geom: LatticeGeometry,
    pub params: PhiFourParams,
}

impl PhiFour {
    pub fn new(geom: LatticeGeometry, params: PhiFourParams) -> Self {
        Self { geom, params }
    }

    /// Unnormalized log of the full conditional of one site given its `2D`
    /// neighbors, up to a constant independent of `value`.
    pub fn local_conditional_logdensity(&self, value: f64, neighbor_values: &[f64]) -> Result<f64> {
        let expected = 2 * self.geom.dim();
        if neighbor_values.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: neighbor_values.len(),
            });
        }
        let kinetic: f64 = neighbor_values.iter().map(|&n| 0.5 * (n - value) * (n - value)).sum();
        Ok(-(kinetic + self.params.potential(value)))
    }
}

impl Action for PhiFour {
    fn n_sites(&self) -> usize {
        self.geom.n_sites()
    }

    fn action(&self, phi: &[f64]) -> f64 {
        assert_eq!(phi.len(), self.geom.n_sites(), "field length");
        let mut s = 0.0;
        for (x, &v) in phi.iter().enumerate() {
            let mut kin = 0.0;
            for mu in 0..self.geom.dim() {
                let d = phi[self.geom.forward(x, mu)] - v;
                kin += d * d;
            }
            s += 0.5 * kin + self.params.potential(v);
        }
        s
    }

    fn gradient(&self, phi: &[f64], out: &mut [f64]) {
        assert_eq!(phi.len(), self.geom.n_sites(), "field length");
        assert_eq!(out.len(), phi.len(), "gradient length");
        let PhiFourParams { m0_sq, lambda0 } = self.params;
        for (y, (&v, g)) in phi.iter().zip(out.iter_mut()).enumerate() {
            let mut lap = 0.0;
            for mu in 0..self.geom.dim() {
                lap += 2.0 * v - phi[self.geom.forward(y, mu)] - phi[self.geom.backward(y, mu)];
            }
            *g = lap + m0_sq * v + lambda0 / 6.0 * v * v * v;
        }
    }
}

/// `S[φ] = |φ|² / (2σ²)`: independent normal sites, mostly useful as a test target.
#[derive(Debug, Clone, Copy)]
pub struct IsotropicGaussian {
    pub n_sites: usize,
    pub sigma: f64,
}

impl Action for IsotropicGaussian {
    fn n_sites(&self) -> usize {
        self.n_sites
    }

    fn action(&self, phi: &[f64]) -> f64 {
        let inv = 1.0 / (self.sigma * self.sigma);
        0.5 * inv * phi.iter().map(|v| v * v).sum::<f64>()
    }

    fn gradient(&self, phi: &[f64], out: &mut [f64]) {
        let inv = 1.0 / (self.sigma * self.sigma);
        for (g, &v) in out.iter_mut().zip(phi) {
            *g = inv * v;
        }
    }
}
