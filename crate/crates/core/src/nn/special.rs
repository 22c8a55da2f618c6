//! Vectorizable standard normal CDF for the GELU layers.
//!
//! For `z = |x|/√2`, `erfc(z) = t · exp(−z² + P(4t − 2))` with `t = 2/(2 + z)`
//! and `P` a Chebyshev series fitted once against `libm::erfc`. Blocks of
//! `LANES` inputs run the Clenshaw recurrence side by side so the loops stay in
//! registers and vectorize.

use std::sync::OnceLock;

const N_COEFFS: usize = 34;
const N_NODES: usize = 96;
const LANES: usize = 16;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
pub(crate) const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn coefficients() -> &'static [f64; N_COEFFS] {
    static COEFFS: OnceLock<[f64; N_COEFFS]> = OnceLock::new();
    COEFFS.get_or_init(fit_series)
}

/// `erfc(z) · exp(z²)` for `z ≥ 0`.
fn erfcx_reference(z: f64) -> f64 {
    if z < 10.0 {
        libm::erfc(z) * (z * z).exp()
    } else {
        // asymptotic series 1/(z√π) · Σ (−1)ⁿ (2n−1)!! / (2z²)ⁿ
        let inv = 1.0 / (2.0 * z * z);
        let mut term = 1.0;
        let mut sum = 1.0;
        for n in 1..30 {
            term *= -((2 * n - 1) as f64) * inv;
            sum += term;
        }
        sum / (z * std::f64::consts::PI.sqrt())
    }
}

fn fit_series() -> [f64; N_COEFFS] {
    let m = N_NODES as f64;
    let angle = |k: usize| std::f64::consts::PI * (k as f64 + 0.5) / m;
    let values: Vec<f64> = (0..N_NODES)
        .map(|k| {
            let t = 0.5 * (angle(k).cos() + 1.0);
            let z = 2.0 / t - 2.0;
            (erfcx_reference(z) / t).ln()
        })
        .collect();
    let mut c = [0.0; N_COEFFS];
    for (n, cn) in c.iter_mut().enumerate() {
        let s: f64 = values
            .iter()
            .enumerate()
            .map(|(k, v)| v * (n as f64 * angle(k)).cos())
            .sum();
        *cn = 2.0 * s / m;
    }
    c[0] *= 0.5;
    c
}

/// `eˣ` by range reduction and a degree-12 Taylor polynomial; flushes to zero below −708.
#[inline(always)]
pub(crate) fn exp_poly(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFTER: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52
    let x = x.min(709.0);
    let xr = x.max(-708.0);
    let kd = xr.mul_add(std::f64::consts::LOG2_E, SHIFTER);
    let bits = kd.to_bits();
    let k = kd - SHIFTER;
    let r = k.mul_add(-LN2_LO, k.mul_add(-LN2_HI, xr));
    let mut p: f64 = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p.mul_add(r, c);
    }
    let y = p * f64::from_bits(bits.wrapping_add(1023) << 52);
    if x > -708.0 {
        y
    } else {
        0.0
    }
}

/// `Φ(x)` for each lane.
#[inline(always)]
fn cdf_block<const W: usize>(c: &[f64; N_COEFFS], x: &[f64; W]) -> [f64; W] {
    let mut t = [0.0; W];
    let mut u2 = [0.0; W];
    for i in 0..W {
        let z = (x[i] * FRAC_1_SQRT_2).abs();
        t[i] = 2.0 / (2.0 + z);
        u2[i] = 4.0 * t[i] - 2.0;
    }
    let mut b1 = [0.0; W];
    let mut b2 = [0.0; W];
    for &ck in c[1..].iter().rev() {
        for i in 0..W {
            let b0 = u2[i].mul_add(b1[i], ck - b2[i]);
            b2[i] = b1[i];
            b1[i] = b0;
        }
    }
    let mut out = [0.0; W];
    for i in 0..W {
        let series = (0.5 * u2[i]).mul_add(b1[i], c[0] - b2[i]);
        // x² split into hi + lo so its rounding does not leak into the exponent
        let sq = x[i] * x[i];
        let sq_lo = if sq.is_finite() { x[i].mul_add(x[i], -sq) } else { 0.0 };
        let scale = (-0.5 * sq_lo).mul_add(0.5 * t[i], 0.5 * t[i]);
        let half_erfc = scale * exp_poly(series - 0.5 * sq);
        out[i] = if x[i] >= 0.0 { 1.0 - half_erfc } else { half_erfc };
    }
    out
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    cdf_block::<1>(coefficients(), &[x])[0]
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    exp_poly(-0.5 * x * x) * INV_SQRT_2PI
}

/// Replaces every `x` with `x Φ(x)`.
pub fn gelu_inplace(values: &mut [f64]) {
    let c = coefficients();
    let mut chunks = values.chunks_exact_mut(LANES);
    for chunk in &mut chunks {
        let x: &mut [f64; LANES] = chunk.try_into().expect("exact chunk");
        let cdf = cdf_block(c, x);
        for i in 0..LANES {
            x[i] *= cdf[i];
        }
    }
    for v in chunks.into_remainder() {
        *v *= cdf_block::<1>(c, &[*v])[0];
    }
}

/// Writes `x Φ(x)` into `out` and `Φ(x) + x φ(x)` into `deriv`.
pub fn gelu_with_derivative(pre: &[f64], out: &mut [f64], deriv: &mut [f64]) {
    assert!(out.len() == pre.len() && deriv.len() == pre.len());
    let c = coefficients();
    let blocks = pre.len() / LANES;
    for b in 0..blocks {
        let r = b * LANES..(b + 1) * LANES;
        let x: &[f64; LANES] = pre[r.clone()].try_into().expect("exact chunk");
        let cdf = cdf_block(c, x);
        let o: &mut [f64; LANES] = (&mut out[r.clone()]).try_into().expect("exact chunk");
        for i in 0..LANES {
            o[i] = x[i] * cdf[i];
        }
        let d: &mut [f64; LANES] = (&mut deriv[r]).try_into().expect("exact chunk");
        for i in 0..LANES {
            d[i] = x[i].mul_add(normal_pdf(x[i]), cdf[i]);
        }
    }
    for i in blocks * LANES..pre.len() {
        let x = pre[i];
        let cdf = cdf_block::<1>(c, &[x])[0];
        out[i] = x * cdf;
        deriv[i] = x.mul_add(normal_pdf(x), cdf);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_matches_std() {
        let mut worst = 0.0f64;
        for i in -70_000..=70_000 {
            let x = i as f64 * 0.01;
            worst = worst.max((exp_poly(x) - x.exp()).abs() / x.exp());
        }
        assert!(worst < 4e-16, "worst relative error {worst:e}");
        assert_eq!(exp_poly(-800.0), 0.0);
    }

    #[test]
    fn series_is_converged() {
        let tail = coefficients()[N_COEFFS - 1];
        assert!(tail.abs() < 1e-15, "{tail:e}");
    }

    /// `libm::erfc` with the rounding of `−x/√2` corrected to first order.
    fn reference_cdf(x: f64) -> f64 {
        const FRAC_1_SQRT_2_LO: f64 = -4.833_646_656_726_457e-17;
        let z = -x * FRAC_1_SQRT_2;
        let dz = (-x).mul_add(FRAC_1_SQRT_2, -z) + (-x) * FRAC_1_SQRT_2_LO;
        let slope = if z > 0.0 {
            2.0 / (std::f64::consts::PI.sqrt() * erfcx_reference(z))
        } else {
            2.0 / std::f64::consts::PI.sqrt() * (-z * z).exp() / libm::erfc(z)
        };
        0.5 * libm::erfc(z) * (1.0 - slope * dz)
    }

    #[test]
    fn cdf_matches_libm() {
        let mut worst_abs = 0.0f64;
        let mut worst_rel = 0.0f64;
        let mut worst_deep = 0.0f64;
        for i in -38_000..=38_000 {
            let x = i as f64 * 1e-3;
            let reference = reference_cdf(x);
            let got = normal_cdf(x);
            worst_abs = worst_abs.max((got - reference).abs());
            if x < 0.0 && reference > f64::MIN_POSITIVE {
                let rel = (got - reference).abs() / reference;
                if x >= -20.0 {
                    worst_rel = worst_rel.max(rel);
                } else {
                    worst_deep = worst_deep.max(rel);
                }
            }
        }
        assert!(worst_abs < 3e-15, "absolute {worst_abs:e}");
        assert!(worst_rel < 2e-14, "relative tail {worst_rel:e}");
        assert!(worst_deep < 1e-12, "relative deep tail {worst_deep:e}");
        assert_eq!(normal_cdf(f64::INFINITY), 1.0);
        assert_eq!(normal_cdf(-60.0), 0.0);
    }

    #[test]
    fn blocked_and_scalar_paths_agree_bitwise() {
        let xs: Vec<f64> = (0..37).map(|i| (i as f64 * 0.77).sin() * 5.0).collect();
        let mut blocked = xs.clone();
        gelu_inplace(&mut blocked);
        let mut out = vec![0.0; xs.len()];
        let mut deriv = vec![0.0; xs.len()];
        gelu_with_derivative(&xs, &mut out, &mut deriv);
        for (i, &x) in xs.iter().enumerate() {
            let scalar = x * normal_cdf(x);
            assert_eq!(blocked[i].to_bits(), scalar.to_bits());
            assert_eq!(out[i].to_bits(), scalar.to_bits());
            let reference = normal_cdf(x) + x * (-0.5 * x * x).exp() * INV_SQRT_2PI;
            assert!((deriv[i] - reference).abs() < 1e-15);
        }
    }
}
