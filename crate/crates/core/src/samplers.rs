//! Asymptotically exact samplers: HMC and independence Metropolis–Hastings
//! with a transport map as proposal.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::Action;
use crate::metrics;
use crate::transport::TriangularMap;

pub const CHAIN_CSV_HEADER: &str = "step,accepted,action,magnetization";

/// Acceptance below this after burn-in aborts an IMH run.
pub const MIN_IMH_ACCEPTANCE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcConfig {
    pub leapfrog_steps: usize,
    pub step_size: f64,
    pub target_acceptance: f64,
    /// Adaptation window in steps.
    pub window: usize,
    /// Gain of the multiplicative update `ε ← ε exp(κ (acc − target))`.
    pub gain: f64,
    pub burn_in: usize,
    /// Total number of steps including burn-in.
    pub length: usize,
    pub seed: u64,
}

impl Default for HmcConfig {
    fn default() -> Self {
        Self {
            leapfrog_steps: 10,
            step_size: 0.1,
            target_acceptance: 0.70,
            window: 100,
            gain: 0.5,
            burn_in: 2000,
            length: 20_000,
            seed: 0,
        }
    }
}

impl HmcConfig {
    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.leapfrog_steps == 0 {
            return bad("HMC needs at least one leapfrog step");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("HMC step size must be positive");
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return bad("target acceptance must lie in (0, 1)");
        }
        if self.window == 0 {
            return bad("adaptation window must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImhConfig {
    pub burn_in: usize,
    /// Total number of steps including burn-in.
    pub length: usize,
    /// Initial proposal scale.
    pub scale: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub target_acceptance: f64,
    pub window: usize,
    pub gain: f64,
    /// Proposals pushed through the map per forward call once the scale is frozen.
    pub proposal_batch: usize,
    pub seed: u64,
}

impl Default for ImhConfig {
    fn default() -> Self {
        Self {
            burn_in: 2000,
            length: 20_000,
            scale: 1.0,
            scale_min: 1.0,
            scale_max: 2.0,
            target_acceptance: 0.5,
            window: 100,
            gain: 0.5,
            proposal_batch: 1000,
            seed: 0,
        }
    }
}

impl ImhConfig {
    fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad("proposal scale bounds must satisfy 0 < min <= max");
        }
        if !(self.scale >= self.scale_min && self.scale <= self.scale_max) {
            return bad("initial proposal scale lies outside its bounds");
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return bad("target acceptance must lie in (0, 1)");
        }
        if self.window == 0 || self.proposal_batch == 0 {
            return bad("window and proposal batch must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Hmc,
    Imh,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Hmc => "hmc",
            SamplerKind::Imh => "imh",
        }
    }
}

/// Run metadata written next to the chain CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub sampler: SamplerKind,
    pub n_sites: usize,
    pub seed: u64,
    pub burn_in: usize,
    pub length: usize,
    /// Frozen step size (HMC) or proposal scale (IMH).
    pub tuned: f64,
    /// Acceptance rate over the kept steps.
    pub acceptance: f64,
    /// Proposals rejected because their weight or trajectory was not finite.
    pub non_finite: usize,
}

/// The kept part of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRecord {
    /// `kept × N` configurations in site order.
    pub configs: Array2<f64>,
    pub accepted: Vec<bool>,
    pub action: Vec<f64>,
    /// `|mean(φ)|` per kept step.
    pub magnetization: Vec<f64>,
    pub meta: ChainMeta,
}

impl ChainRecord {
    fn new(meta: ChainMeta, n_sites: usize) -> Self {
        let kept = meta.length.saturating_sub(meta.burn_in);
        Self {
            configs: Array2::zeros((0, n_sites)),
            accepted: Vec::with_capacity(kept),
            action: Vec::with_capacity(kept),
            magnetization: Vec::with_capacity(kept),
            meta,
        }
    }

    fn push(&mut self, phi: ArrayView1<f64>, action: f64, accepted: bool) {
        self.configs.push_row(phi).expect("row length matches the lattice");
        self.accepted.push(accepted);
        self.action.push(action);
        self.magnetization
            .push(metrics::magnetization(phi.as_slice().expect("contiguous row")));
    }

    fn finish(&mut self) {
        let kept = self.accepted.len();
        self.meta.acceptance = if kept == 0 {
            0.0
        } else {
            self.accepted.iter().filter(|&&a| a).count() as f64 / kept as f64
        };
    }

    pub fn len(&self) -> usize {
        self.accepted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accepted.is_empty()
    }

    /// Signed `mean(φ)` per kept step.
    pub fn mean_field(&self) -> Vec<f64> {
        self.configs.mean_axis(Axis(1)).map(|m| m.to_vec()).unwrap_or_default()
    }

    /// Action density per kept step.
    pub fn energy(&self) -> Vec<f64> {
        let n = self.configs.ncols() as f64;
        self.action.iter().map(|s| s / n).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHAIN_CSV_HEADER}")?;
        for (i, ((&acc, s), m)) in self
            .accepted
            .iter()
            .zip(&self.action)
            .zip(&self.magnetization)
            .enumerate()
        {
            writeln!(w, "{},{},{},{}", i, u8::from(acc), s, m)?;
        }
        Ok(())
    }
}

/// Integrates Hamilton's equations for `H = S[φ] + |p|²/2` with `n_steps`
/// leapfrog steps of size `eps`, in place.
pub fn leapfrog<A: Action + ?Sized>(phi: &mut [f64], momentum: &mut [f64], eps: f64, n_steps: usize, action: &A) {
    if n_steps == 0 {
        return;
    }
    let mut force = vec![0.0; phi.len()];
    action.gradient(phi, &mut force);
    for (p, f) in momentum.iter_mut().zip(&force) {
        *p -= 0.5 * eps * f;
    }
    for step in 0..n_steps {
        for (x, p) in phi.iter_mut().zip(momentum.iter()) {
            *x += eps * p;
        }
        action.gradient(phi, &mut force);
        let kick = if step + 1 == n_steps { 0.5 * eps } else { eps };
        for (p, f) in momentum.iter_mut().zip(&force) {
            *p -= kick * f;
        }
    }
}

fn kinetic(p: &[f64]) -> f64 {
    0.5 * p.iter().map(|v| v * v).sum::<f64>()
}

/// HMC from `start` (zeros when `None`). The step size adapts only during burn-in.
pub fn hmc_run<A: Action + ?Sized>(config: &HmcConfig, action: &A, start: Option<&[f64]>) -> Result<ChainRecord> {
    config.validate()?;
    let n = action.n_sites();
    let mut phi = match start {
        Some(s) if s.len() != n => {
            return Err(Error::ShapeMismatch {
                expected: n,
                got: s.len(),
            })
        }
        Some(s) => s.to_vec(),
        None => vec![0.0; n],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut record = ChainRecord::new(
        ChainMeta {
            sampler: SamplerKind::Hmc,
            n_sites: n,
            seed: config.seed,
            burn_in: config.burn_in,
            length: config.length,
            tuned: config.step_size,
            acceptance: 0.0,
            non_finite: 0,
        },
        n,
    );
    let mut eps = config.step_size;
    let mut s_current = action.action(&phi);
    let mut window_accepts = 0usize;
    let mut proposal = vec![0.0; n];
    let mut momentum = vec![0.0; n];
    for step in 0..config.length {
        momentum.iter_mut().for_each(|p| *p = rng.sample(StandardNormal));
        let h0 = s_current + kinetic(&momentum);
        proposal.copy_from_slice(&phi);
        leapfrog(&mut proposal, &mut momentum, eps, config.leapfrog_steps, action);
        let s_prop = action.action(&proposal);
        let h1 = s_prop + kinetic(&momentum);
        let u: f64 = rng.gen();
        let accept = if h1.is_finite() {
            u.ln() < h0 - h1
        } else {
            if step >= config.burn_in {
                record.meta.non_finite += 1;
            }
            false
        };
        if accept {
            std::mem::swap(&mut phi, &mut proposal);
            s_current = s_prop;
        }
        if step < config.burn_in {
            window_accepts += usize::from(accept);
            if (step + 1) % config.window == 0 {
                let rate = window_accepts as f64 / config.window as f64;
                eps *= (config.gain * (rate - config.target_acceptance)).exp();
                window_accepts = 0;
            }
        } else {
            record.push(ArrayView1::from(&phi[..]), s_current, accept);
        }
    }
    record.meta.tuned = eps;
    record.finish();
    Ok(record)
}

/// Current state of an IMH chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ImhState {
    pub phi: Array1<f64>,
    pub z: Array1<f64>,
    pub logdet: f64,
    pub action: f64,
    pub scale: f64,
    /// `−S[φ] − ln q_s(z) + logdet` for the current state.
    pub log_weight: f64,
}

/// `ln N(z; 0, s² I)`.
pub fn scaled_base_logdensity(z: ArrayView1<f64>, scale: f64) -> f64 {
    let n = z.len() as f64;
    -0.5 * z.dot(&z) / (scale * scale) - n * scale.ln() - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

fn imh_log_weight(action: f64, z: ArrayView1<f64>, logdet: f64, scale: f64) -> f64 {
    -action - scaled_base_logdensity(z, scale) + logdet
}

impl ImhState {
    fn new(phi: Array1<f64>, z: Array1<f64>, logdet: f64, action: f64, scale: f64) -> Self {
        let log_weight = imh_log_weight(action, z.view(), logdet, scale);
        Self {
            phi,
            z,
            logdet,
            action,
            scale,
            log_weight,
        }
    }

    /// Changes the proposal scale and refreshes the cached weight.
    pub fn set_scale(&mut self, scale: f64) {
        self.scale = scale;
        self.log_weight = imh_log_weight(self.action, self.z.view(), self.logdet, scale);
    }
}

/// A proposal pushed through the map, or `None` when it was not finite.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub z: Array1<f64>,
    pub mapped: Option<(Array1<f64>, f64)>,
}

/// Draws `count` proposals `z ~ N(0, s² I)` and maps them in one batch.
pub fn draw_proposals<R: Rng + ?Sized>(map: &TriangularMap, count: usize, scale: f64, rng: &mut R) -> Vec<Proposal> {
    let n = map.n_sites();
    let z = Array2::from_shape_simple_fn((count, n), || scale * rng.sample::<f64, _>(StandardNormal));
    let rows: Vec<Option<(Array1<f64>, f64)>> = match map.forward(z.view()) {
        Ok(out) => out
            .phi
            .outer_iter()
            .zip(&out.logdet)
            .map(|(phi, &ld)| Some((phi.to_owned(), ld)))
            .collect(),
        // some row failed; map rows one at a time so only the bad ones are lost
        Err(_) => z
            .outer_iter()
            .map(|row| {
                let out = map.forward(row.insert_axis(Axis(0))).ok()?;
                Some((out.phi.row(0).to_owned(), out.logdet[0]))
            })
            .collect(),
    };
    z.outer_iter()
        .zip(rows)
        .map(|(row, mapped)| Proposal {
            z: row.to_owned(),
            mapped: mapped.filter(|(phi, ld)| ld.is_finite() && phi.iter().all(|v| v.is_finite())),
        })
        .collect()
}

/// One Metropolis–Hastings test of `proposal` against `state`. Returns whether it was accepted.
pub fn imh_step<A: Action + ?Sized, R: Rng + ?Sized>(
    state: &mut ImhState,
    proposal: Proposal,
    action: &A,
    rng: &mut R,
) -> bool {
    let u: f64 = rng.gen();
    let Some((phi, logdet)) = proposal.mapped else {
        return false;
    };
    let s = action.action(phi.as_slice().expect("contiguous row"));
    let log_w = imh_log_weight(s, proposal.z.view(), logdet, state.scale);
    if !log_w.is_finite() {
        return false;
    }
    let accept = u.ln() < log_w - state.log_weight;
    if accept {
        state.phi = phi;
        state.z = proposal.z;
        state.logdet = logdet;
        state.action = s;
        state.log_weight = log_w;
    }
    accept
}

/// Independence Metropolis–Hastings with `map` as proposal.
///
/// The proposal scale adapts during burn-in and is frozen afterwards. Fails
/// with [`Error::LowAcceptance`] when fewer than 1% of kept steps accept.
pub fn imh_run<A: Action + ?Sized>(config: &ImhConfig, map: &TriangularMap, action: &A) -> Result<ChainRecord> {
    config.validate()?;
    let n = map.n_sites();
    if action.n_sites() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: action.n_sites(),
        });
    }
    let mut proposal_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut accept_rng = ChaCha8Rng::seed_from_u64(config.seed);
    accept_rng.set_stream(1);
    let mut record = ChainRecord::new(
        ChainMeta {
            sampler: SamplerKind::Imh,
            n_sites: n,
            seed: config.seed,
            burn_in: config.burn_in,
            length: config.length,
            tuned: config.scale,
            acceptance: 0.0,
            non_finite: 0,
        },
        n,
    );
    if config.length == 0 {
        return Ok(record);
    }

    // the chain starts from the first finite proposal
    let mut state = loop {
        let p = draw_proposals(map, 1, config.scale, &mut proposal_rng)
            .pop()
            .expect("one proposal");
        if let Some((phi, logdet)) = p.mapped {
            let s = action.action(phi.as_slice().expect("contiguous row"));
            if s.is_finite() {
                break ImhState::new(phi, p.z, logdet, s, config.scale);
            }
        }
    };
    let mut window_accepts = 0usize;
    let mut step = 0usize;
    while step < config.length {
        let in_burn_in = step < config.burn_in;
        let chunk = if in_burn_in {
            (config.window - step % config.window).min(config.burn_in - step)
        } else {
            config.proposal_batch.min(config.length - step)
        };
        for proposal in draw_proposals(map, chunk, state.scale, &mut proposal_rng) {
            let finite = proposal.mapped.is_some();
            let accept = imh_step(&mut state, proposal, action, &mut accept_rng);
            if step < config.burn_in {
                window_accepts += usize::from(accept);
                if (step + 1).is_multiple_of(config.window) {
                    let rate = window_accepts as f64 / config.window as f64;
                    let scale = (state.scale * (config.gain * (rate - config.target_acceptance)).exp())
                        .clamp(config.scale_min, config.scale_max);
                    state.set_scale(scale);
                    window_accepts = 0;
                }
            } else {
                if !finite {
                    record.meta.non_finite += 1;
                }
                record.push(state.phi.view(), state.action, accept);
            }
            step += 1;
        }
    }
    record.meta.tuned = state.scale;
    record.finish();
    if !record.is_empty() && record.meta.acceptance < MIN_IMH_ACCEPTANCE {
        return Err(Error::LowAcceptance {
            rate: record.meta.acceptance,
        });
    }
    Ok(record)
}
