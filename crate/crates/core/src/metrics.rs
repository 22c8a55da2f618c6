//! Importance-sampling efficiency, observables and bootstrap errors.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::Action;

/// Sub-sample sizes of the error scan.
pub const DEFAULT_SIZES: [usize; 7] = [200, 500, 1000, 2000, 5000, 10_000, 20_000];

pub const ERROR_CSV_HEADER: &str = "M,estimate,err_lo,err_hi,statistic,sampler,err_ref";

/// Normalized effective sample size `(Σw)² / (M Σw²)` from log-weights.
///
/// Returns 0 when no weight is positive and finite.
pub fn ess(log_weights: &[f64]) -> f64 {
    let max = log_weights
        .iter()
        .copied()
        .filter(|v| !v.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if log_weights.is_empty() || !max.is_finite() {
        return 0.0;
    }
    let (mut s1, mut s2) = (0.0, 0.0);
    for &lw in log_weights {
        let w = if lw.is_nan() { 0.0 } else { (lw - max).exp() };
        s1 += w;
        s2 += w * w;
    }
    s1 * s1 / s2 / log_weights.len() as f64
}

/// `|mean(φ)|`.
pub fn magnetization(phi: &[f64]) -> f64 {
    (phi.iter().sum::<f64>() / phi.len() as f64).abs()
}

/// `N (⟨M²⟩ − ⟨M⟩²)` by the corrected two-pass formula.
pub fn susceptibility(m: &[f64], n_sites: usize) -> f64 {
    let n = m.len() as f64;
    let mean = m.iter().sum::<f64>() / n;
    let (s1, s2) = m.iter().fold((0.0, 0.0), |(s1, s2), v| {
        let d = v - mean;
        (s1 + d, s2 + d * d)
    });
    n_sites as f64 * ((s2 - s1 * s1 / n) / n).max(0.0)
}

/// Action density `S[φ] / N`.
pub fn energy<A: Action + ?Sized>(phi: &[f64], action: &A) -> f64 {
    action.action(phi) / action.n_sites() as f64
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Statistics the error scan knows how to bootstrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Statistic {
    Mean,
    /// Susceptibility of a magnetization series on `n_sites` sites.
    Susceptibility {
        n_sites: usize,
    },
}

impl Statistic {
    pub fn apply(&self, series: &[f64]) -> f64 {
        match *self {
            Statistic::Mean => mean(series),
            Statistic::Susceptibility { n_sites } => susceptibility(series, n_sites),
        }
    }
}

/// Observables named in error tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observable {
    Energy,
    Susceptibility,
    Magnetization,
}

impl Observable {
    pub fn name(self) -> &'static str {
        match self {
            Observable::Energy => "energy",
            Observable::Susceptibility => "susceptibility",
            Observable::Magnetization => "magnetization",
        }
    }
}

impl fmt::Display for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Observable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "energy" => Ok(Observable::Energy),
            "susceptibility" => Ok(Observable::Susceptibility),
            "magnetization" => Ok(Observable::Magnetization),
            _ => Err(Error::UnknownName {
                kind: "observable",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    /// Length of the contiguous blocks that are resampled; 1 is the ordinary bootstrap.
    pub block: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 500,
            level: 0.68,
            block: 1,
            seed: 0,
        }
    }
}

/// Point estimate with a percentile interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BootstrapResult {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub resamples: usize,
}

impl BootstrapResult {
    pub fn half_width(&self) -> f64 {
        0.5 * (self.upper - self.lower)
    }
}

/// Percentile bootstrap of `statistic` with full-length resamples drawn with
/// replacement. Resample `r` uses stream `r` of the seeded generator, so the
/// result does not depend on evaluation order.
///
/// With `block > 1` resamples are concatenations of randomly placed contiguous
/// blocks (moving-block bootstrap), which keeps autocorrelation of Markov
/// chains inside each block.
pub fn bootstrap_ci(series: &[f64], statistic: impl Fn(&[f64]) -> f64, config: &BootstrapConfig) -> BootstrapResult {
    let n = series.len();
    let estimate = statistic(series);
    let block = config.block.clamp(1, n.max(1));
    let mut stats = Vec::with_capacity(config.resamples);
    let mut buf = Vec::with_capacity(n);
    for r in 0..config.resamples {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(r as u64);
        buf.clear();
        while buf.len() < n {
            let start = rng.gen_range(0..=n - block);
            let take = block.min(n - buf.len());
            buf.extend_from_slice(&series[start..start + take]);
        }
        stats.push(statistic(&buf));
    }
    stats.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - config.level);
    BootstrapResult {
        estimate,
        lower: quantile(&stats, tail),
        upper: quantile(&stats, 1.0 - tail),
        resamples: config.resamples,
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// One row of an error-versus-sample-count table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ErrorRow {
    #[serde(rename = "M")]
    pub m: usize,
    pub estimate: f64,
    /// `estimate − lower`
    pub err_lo: f64,
    /// `upper − estimate`
    pub err_hi: f64,
}

impl ErrorRow {
    /// Half the interval width.
    pub fn err(&self) -> f64 {
        0.5 * (self.err_lo + self.err_hi)
    }
}

/// Bootstraps `statistic` on the first `m` entries of `series` for every `m` in `sizes`.
pub fn error_vs_samples(
    series: &[f64],
    statistic: Statistic,
    sizes: &[usize],
    config: &BootstrapConfig,
) -> Result<Vec<ErrorRow>> {
    sizes
        .iter()
        .map(|&m| {
            if m > series.len() {
                return Err(Error::InsufficientSamples {
                    requested: m,
                    available: series.len(),
                });
            }
            let r = bootstrap_ci(&series[..m], |s| statistic.apply(s), config);
            Ok(ErrorRow {
                m,
                estimate: r.estimate,
                err_lo: r.estimate - r.lower,
                err_hi: r.upper - r.estimate,
            })
        })
        .collect()
}

/// `err(M₀) · √(M₀ / M)` anchored at the first row.
pub fn reference_errors(rows: &[ErrorRow]) -> Vec<f64> {
    match rows.first() {
        None => Vec::new(),
        Some(first) => rows
            .iter()
            .map(|r| first.err() * (first.m as f64 / r.m as f64).sqrt())
            .collect(),
    }
}

/// Least-squares slope of `ln err` against `ln M`.
pub fn loglog_slope(rows: &[ErrorRow]) -> f64 {
    let xs: Vec<f64> = rows.iter().map(|r| (r.m as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.err().ln()).collect();
    let (mx, my) = (mean(&xs), mean(&ys));
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{LatticeGeometry, PhiFour, PhiFourParams};
    use rand_distr::StandardNormal;

    #[test]
    fn ess_unit_cases() {
        for m in [1usize, 7, 1000] {
            assert_eq!(ess(&vec![-3.2; m]), 1.0);
            let mut one_hot = vec![f64::NEG_INFINITY; m];
            one_hot[m / 2] = 0.0;
            assert_eq!(ess(&one_hot), 1.0 / m as f64);
        }
        let lw = [0.0, f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        assert_eq!(ess(&lw), 0.25);
    }

    #[test]
    fn ess_is_scale_invariant_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lw: Vec<f64> = (0..500).map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let shifted: Vec<f64> = lw.iter().map(|v| v + 7f64.ln()).collect();
        let far: Vec<f64> = lw.iter().map(|v| v - 2000.0).collect();
        let e = ess(&lw);
        assert!(e > 0.0 && e < 1.0);
        assert!((ess(&shifted) - e).abs() < 1e-14);
        assert!((ess(&far) - e).abs() < 1e-14);
    }

    #[test]
    fn observables() {
        assert_eq!(magnetization(&[0.0; 16]), 0.0);
        assert_eq!(magnetization(&[-1.5; 16]), 1.5);
        assert_eq!(susceptibility(&[0.3; 10], 64), 0.0);
        assert_eq!(susceptibility(&[0.0, 2.0], 4), 4.0);
        let geom = LatticeGeometry::square(8).unwrap();
        let action = PhiFour::new(geom, PhiFourParams::new(-4.0, 8.0).unwrap());
        assert_eq!(energy(&[0.0; 64], &action), 0.0);
        assert!((energy(&[1.0; 64], &action) + 5.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn energy_is_translation_invariant() {
        let geom = LatticeGeometry::square(4).unwrap();
        let action = PhiFour::new(geom.clone(), PhiFourParams::new(-1.0, 2.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let phi: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
        let shifted: Vec<f64> = (0..16).map(|s| phi[geom.shifted(s, &[1, 2])]).collect();
        assert!((energy(&phi, &action) - energy(&shifted, &action)).abs() < 1e-13);
    }

    #[test]
    fn bootstrap_constant_and_determinism() {
        let cfg = BootstrapConfig::default();
        let r = bootstrap_ci(&[2.5; 50], mean, &cfg);
        assert_eq!((r.estimate, r.lower, r.upper), (2.5, 2.5, 2.5));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..300).map(|_| rng.sample(StandardNormal)).collect();
        assert_eq!(bootstrap_ci(&x, mean, &cfg), bootstrap_ci(&x, mean, &cfg));
        let other = BootstrapConfig { seed: 9, ..cfg };
        assert_ne!(bootstrap_ci(&x, mean, &cfg), bootstrap_ci(&x, mean, &other));
    }

    #[test]
    fn bootstrap_full_level_brackets_two_points() {
        let cfg = BootstrapConfig {
            level: 1.0,
            ..Default::default()
        };
        let r = bootstrap_ci(&[1.0, 5.0], mean, &cfg);
        assert!(r.lower <= 1.0 + 1e-12 && r.upper >= 5.0 - 1e-12);
    }

    #[test]
    fn bootstrap_matches_clt() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..10_000).map(|_| rng.sample(StandardNormal)).collect();
        let r = bootstrap_ci(&x, mean, &BootstrapConfig::default());
        // the 68% interval of a normal is ±0.994σ
        let expected = 0.994 / 100.0;
        assert!((r.half_width() - expected).abs() < 0.2 * expected, "{}", r.half_width());
        assert!(r.lower <= r.estimate && r.estimate <= r.upper);
    }

    #[test]
    fn block_bootstrap_sees_autocorrelation() {
        // AR(1) with ρ = 0.8: Var(mean) = (1 + ρ) / (1 − ρ) / n for unit marginal variance
        let rho: f64 = 0.8;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut x = Vec::with_capacity(20_000);
        let mut v: f64 = rng.sample(StandardNormal);
        for _ in 0..20_000 {
            x.push(v);
            v = rho * v + (1.0 - rho * rho).sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        let sigma = ((1.0 + rho) / (1.0 - rho) / 20_000.0).sqrt();
        let blocked = bootstrap_ci(
            &x,
            mean,
            &BootstrapConfig {
                block: 200,
                ..Default::default()
            },
        );
        let naive = bootstrap_ci(&x, mean, &BootstrapConfig::default());
        assert!(
            (blocked.half_width() / 0.994 - sigma).abs() < 0.2 * sigma,
            "{}",
            blocked.half_width()
        );
        assert!(naive.half_width() < 0.5 * sigma);
        let whole = bootstrap_ci(
            &x[..10],
            mean,
            &BootstrapConfig {
                block: 50,
                ..Default::default()
            },
        );
        assert_eq!(whole.lower, whole.upper);
    }

    #[test]
    fn error_scan_follows_inverse_square_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..20_000).map(|_| rng.sample(StandardNormal)).collect();
        let rows = error_vs_samples(&x, Statistic::Mean, &DEFAULT_SIZES, &BootstrapConfig::default()).unwrap();
        assert_eq!(rows.len(), DEFAULT_SIZES.len());
        let slope = loglog_slope(&rows);
        assert!((-0.6..=-0.4).contains(&slope), "slope {slope}");
        for w in rows.windows(2) {
            assert!(w[1].err() <= 2.0 * w[0].err());
        }
        let reference = reference_errors(&rows);
        assert_eq!(reference[0], rows[0].err());
        assert!((reference[2] - rows[0].err() * (200.0f64 / 1000.0).sqrt()).abs() < 1e-15);
        assert!(matches!(
            error_vs_samples(&x[..100], Statistic::Mean, &[200], &BootstrapConfig::default()),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn susceptibility_is_never_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let m: Vec<f64> = (0..rng.gen_range(1..20)).map(|_| rng.gen::<f64>() * 1e6).collect();
            assert!(susceptibility(&m, 64) >= 0.0);
        }
    }
}
