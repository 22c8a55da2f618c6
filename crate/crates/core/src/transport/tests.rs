#![allow(clippy::needless_range_loop)]

use super::*;
use ndarray::{array, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::nn::softplus;

fn spec(l: usize, ordering: OrderingKind, mode: MapMode, order: u8) -> MapSpec {
    MapSpec::new(l, ordering, mode, NeighborhoodSpec::new(order).unwrap())
}

fn random_map(spec: MapSpec, seed: u64) -> TriangularMap {
    TriangularMap::new(spec, MapInit::Random, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn normal_matrix(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((b, n), || StandardNormal.sample(rng))
}

/// Sets the integrand of `label` to the constant `softplus(c)` and the shift to zero.
fn constant_component(map: &mut TriangularMap, label: usize, c: f64) {
    let comp = map.components[label].clone();
    let n = comp.g.n_params();
    let p = &mut map.params[comp.g_offset..comp.g_offset + n];
    p.fill(0.0);
    let (_, mut b) = comp.g.layer_mut(p, comp.g.n_layers() - 1);
    b.fill(c);
    match comp.shift {
        Shift::Scalar { offset } => map.params[offset] = 0.0,
        Shift::Net { arch, offset } => map.params[offset..offset + arch.n_params()].fill(0.0),
    }
}

/// Central-difference Jacobian `∂φ_label / ∂z_label` of one sample, label order.
fn numerical_jacobian(map: &TriangularMap, z: &Array1<f64>, h: f64) -> Array2<f64> {
    let n = z.len();
    let mut jac = Array2::zeros((n, n));
    for k in 0..n {
        let mut zp = z.clone().insert_axis(Axis(0));
        let mut zm = zp.clone();
        zp[[0, k]] += h;
        zm[[0, k]] -= h;
        let (pp, _) = map.forward_labels(zp.view()).unwrap();
        let (pm, _) = map.forward_labels(zm.view()).unwrap();
        for j in 0..n {
            jac[[j, k]] = (pp[[0, j]] - pm[[0, j]]) / (2.0 * h);
        }
    }
    jac
}

#[test]
fn identity_fixture_is_the_identity() {
    let map = TriangularMap::new(
        spec(4, OrderingKind::Checkerboard, MapMode::Sparse, 1),
        MapInit::Identity,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let z = normal_matrix(&mut ChaCha8Rng::seed_from_u64(1), 7, 16);
    let out = map.forward(z.view()).unwrap();
    let z_sites = map.labels_to_sites(z.view());
    for (a, b) in out.phi.iter().zip(z_sites.iter()) {
        assert!((a - b).abs() <= 1e-15 * b.abs().max(1.0));
    }
    assert!(out.logdet.iter().all(|l| l.abs() < 1e-14));
    let lp = model_logdensity(z.view(), out.logdet.view());
    for (b, row) in out.phi.outer_iter().enumerate() {
        let reference = -0.5 * row.dot(&row) - 8.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((lp[b] - reference).abs() < 1e-12);
    }
}

#[test]
fn origin_density() {
    let z = Array2::zeros((1, 5));
    let lp = model_logdensity(z.view(), array![0.7].view());
    assert!((lp[0] - (-2.5 * (2.0 * std::f64::consts::PI).ln() - 0.7)).abs() < 1e-14);
}

#[test]
fn single_site_map_is_its_component() {
    let map = random_map(spec(1, OrderingKind::Lexicographic, MapMode::Sparse, 1), 3);
    assert_eq!(map.n_sites(), 1);
    let z = array![[0.3], [-1.2], [2.5]];
    let out = map.forward(z.view()).unwrap();
    let empty = Array2::zeros((3, 0));
    let (phi, diag) = map.component_forward(0, z.column(0), empty.view()).unwrap();
    assert_eq!(out.phi.column(0), phi);
    for b in 0..3 {
        assert_eq!(out.logdet[b], diag[b].ln());
    }
}

#[test]
fn zero_input_returns_the_shift() {
    let map = random_map(spec(4, OrderingKind::Lexicographic, MapMode::Sparse, 2), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for label in [0usize, 5, 15] {
        let c = map.conditioning().get(label).len();
        let ctx = normal_matrix(&mut rng, 4, c);
        let (phi, _) = map
            .component_forward(label, Array1::zeros(4).view(), ctx.view())
            .unwrap();
        let shift = map.shift_forward(&map.components[label], ctx.view()).unwrap();
        assert_eq!(phi, shift);
    }
}

#[test]
fn constant_integrand_is_linear() {
    let mut map = random_map(spec(4, OrderingKind::Maxmin, MapMode::Sparse, 1), 7);
    let c = -0.8;
    constant_component(&mut map, 9, c);
    let ctx_len = map.conditioning().get(9).len();
    let ctx = vec![0.4; ctx_len];
    let sp = softplus(c);
    for z in [-3.0, -0.1, 0.0, 0.5, 4.0] {
        let zs = [z];
        let ctx2 = ArrayView2::from_shape((1, ctx_len), &ctx).unwrap();
        let (phi, diag) = map.component_forward(9, ArrayView1::from(&zs[..]), ctx2).unwrap();
        assert!((phi[0] - sp * z).abs() < 1e-14);
        assert!((diag[0] - sp).abs() < 1e-15);
        let back = map.component_inverse(9, phi[0], &ctx).unwrap();
        assert!((back - phi[0] / sp).abs() < 1e-10);
    }
}

/// Near-identity map whose output layers are pulled well away from zero.
fn perturbed_map(spec: MapSpec, seed: u64, std: f64) -> TriangularMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = TriangularMap::new(spec, MapInit::NearIdentity, &mut rng).unwrap();
    let noise = Normal::new(0.0, std).unwrap();
    for comp in map.components.clone() {
        let g = &comp.g;
        let p = &mut map.params[comp.g_offset..comp.g_offset + g.n_params()];
        let (mut w, _) = g.layer_mut(p, g.n_layers() - 1);
        w.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        match comp.shift {
            Shift::Scalar { offset } => map.params[offset] = noise.sample(&mut rng),
            Shift::Net { arch, offset } => {
                let p = &mut map.params[offset..offset + arch.n_params()];
                let (mut w, _) = arch.layer_mut(p, arch.n_layers() - 1);
                w.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            }
        }
    }
    map
}

/// Counts probes with `T(lo) ≥ T(hi)` for `z ~ scale · N(0, 1)`.
fn monotonicity_violations(map: &TriangularMap, probes: usize, scale: f64, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = map.n_sites();
    let mut bad = 0;
    for _ in 0..probes {
        let label = rng.gen_range(0..n);
        let c = map.conditioning().get(label).len();
        let ctx = normal_matrix(&mut rng, 1, c);
        let ctx2 = Array2::from_shape_fn((2, c), |(_, k)| ctx[[0, k]]);
        let a: f64 = scale * rng.sample::<f64, _>(StandardNormal);
        let b: f64 = scale * rng.sample::<f64, _>(StandardNormal);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let (phi, diag) = map
            .component_forward(label, array![lo, hi].view(), ctx2.view())
            .unwrap();
        assert!(diag.iter().all(|&d| d > 0.0));
        if phi[1] <= phi[0] && lo < hi {
            bad += 1;
        }
    }
    bad
}

#[test]
fn components_are_monotone() {
    let random = random_map(spec(4, OrderingKind::Checkerboard, MapMode::Sparse, 2), 11);
    assert_eq!(monotonicity_violations(&random, 1000, 1.0, 12), 0);
    let near = perturbed_map(spec(4, OrderingKind::Maxmin, MapMode::Sparse, 2), 13, 0.3);
    assert_eq!(monotonicity_violations(&near, 1000, 3.0, 14), 0);
}

#[test]
fn rectifier_derivative_stays_positive_far_out() {
    let map = random_map(spec(4, OrderingKind::Lexicographic, MapMode::Sparse, 1), 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..1000 {
        let label = rng.gen_range(0..16);
        let c = map.conditioning().get(label).len();
        let ctx = normal_matrix(&mut rng, 1, c);
        let z: f64 = 10.0 * rng.sample::<f64, _>(StandardNormal);
        let (_, diag) = map.component_forward(label, array![z].view(), ctx.view()).unwrap();
        assert!(diag[0] > 0.0 && diag[0].is_finite());
    }
}

#[test]
fn jacobian_is_lower_triangular_with_matching_logdet() {
    for mode in [MapMode::Sparse, MapMode::Dense] {
        for ordering in OrderingKind::ALL {
            let map = random_map(spec(4, ordering, mode, 1).with_hidden(&[16, 16]), 13);
            let z = normal_matrix(&mut ChaCha8Rng::seed_from_u64(14), 1, 16)
                .row(0)
                .to_owned();
            let jac = numerical_jacobian(&map, &z, 1e-5);
            for j in 0..16 {
                for k in j + 1..16 {
                    assert!(
                        jac[[j, k]].abs() < 1e-8,
                        "{mode} {ordering}: J[{j},{k}] = {}",
                        jac[[j, k]]
                    );
                }
            }
            let (_, logdet) = map.forward_labels(z.view().insert_axis(Axis(0))).unwrap();
            let numeric: f64 = (0..16).map(|j| jac[[j, j]].ln()).sum();
            assert!(
                (logdet[0] - numeric).abs() < 1e-4,
                "{mode} {ordering}: {} vs {numeric}",
                logdet[0]
            );
        }
    }
}

#[test]
fn logdet_mismatch_shrinks_with_more_nodes() {
    for (q, tol) in [(15usize, 1e-4), (50, 1e-7)] {
        let map = random_map(
            spec(4, OrderingKind::Checkerboard, MapMode::Sparse, 1).with_quadrature(q),
            15,
        );
        let z = normal_matrix(&mut ChaCha8Rng::seed_from_u64(16), 1, 16)
            .row(0)
            .to_owned();
        let jac = numerical_jacobian(&map, &z, 1e-5);
        let numeric: f64 = (0..16).map(|j| jac[[j, j]]).product();
        let (_, logdet) = map.forward_labels(z.view().insert_axis(Axis(0))).unwrap();
        let rel = (logdet[0].exp() - numeric).abs() / numeric;
        assert!(rel < tol, "q={q}: relative {rel:e}");
    }
}

#[test]
fn unreachable_labels_do_not_influence_components() {
    let map = random_map(
        spec(4, OrderingKind::Lexicographic, MapMode::Sparse, 1).with_hidden(&[8]),
        17,
    );
    let n = 16;
    // reach[j] = labels with a directed path into j through conditioning sets
    let mut reach = vec![vec![false; n]; n];
    for j in 0..n {
        reach[j][j] = true;
        for &k in map.conditioning().get(j) {
            for i in 0..n {
                if reach[k][i] {
                    reach[j][i] = true;
                }
            }
        }
    }
    let z = normal_matrix(&mut ChaCha8Rng::seed_from_u64(18), 1, n);
    let (base, _) = map.forward_labels(z.view()).unwrap();
    for k in 0..n {
        let mut zp = z.clone();
        zp[[0, k]] += 0.7;
        let (pert, _) = map.forward_labels(zp.view()).unwrap();
        for j in 0..n {
            if !reach[j][k] {
                assert_eq!(pert[[0, j]], base[[0, j]], "label {j} moved when z_{k} changed");
            }
        }
    }
}

#[test]
fn inverse_round_trips() {
    let map = random_map(
        spec(4, OrderingKind::Maxmin, MapMode::Sparse, 2).with_hidden(&[32, 32]),
        19,
    );
    let z = normal_matrix(&mut ChaCha8Rng::seed_from_u64(20), 64, 16);
    let out = map.forward(z.view()).unwrap();
    let back = map.inverse(out.phi.view()).unwrap();
    let worst = (&back - &z).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(worst < 1e-9, "worst round-trip error {worst:e}");

    let id = TriangularMap::new(
        spec(2, OrderingKind::Lexicographic, MapMode::Sparse, 1),
        MapInit::Identity,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let phi = array![[0.25, -1.5, 3.0, 0.0]];
    let z = id.inverse(phi.view()).unwrap();
    let z_sites = id.labels_to_sites(z.view());
    for (a, b) in z_sites.iter().zip(phi.iter()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn single_site_density_is_normalized() {
    let map = perturbed_map(
        spec(1, OrderingKind::Lexicographic, MapMode::Sparse, 1).with_hidden(&[16, 16]),
        21,
        0.3,
    );
    let n = 4001;
    let (a, b) = (-10.0, 10.0);
    let h = (b - a) / (n - 1) as f64;
    let mut total = 0.0;
    for i in 0..n {
        let phi = a + i as f64 * h;
        let z = map.component_inverse(0, phi, &[]).unwrap();
        let zs = [z];
        let (_, diag) = map
            .component_forward(0, ArrayView1::from(&zs[..]), Array2::zeros((1, 0)).view())
            .unwrap();
        let lp = model_logdensity(
            ArrayView2::from_shape((1, 1), &zs[..]).unwrap(),
            diag.mapv(f64::ln).view(),
        );
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        total += w * lp[0].exp() * h;
    }
    assert!((total - 1.0).abs() < 1e-4, "integral {total}");
}

/// `Σ_b dphi_b · φ_b + dlogdet_b · logdet_b` for fixed cotangents.
fn functional(map: &TriangularMap, z: &Array2<f64>, dphi: &Array2<f64>, dl: &Array1<f64>) -> f64 {
    let out = map.forward(z.view()).unwrap();
    (&out.phi * dphi).sum() + out.logdet.dot(dl)
}

#[test]
fn gradient_matches_finite_differences() {
    let mut map = random_map(
        spec(2, OrderingKind::Checkerboard, MapMode::Sparse, 1).with_hidden(&[12, 12]),
        23,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let z = normal_matrix(&mut rng, 3, 4);
    let dphi = normal_matrix(&mut rng, 3, 4);
    let dl = array![0.3, -1.1, 0.6];
    let out = map.forward(z.view()).unwrap();
    let grad = map.gradient(z.view(), &out, dphi.view(), dl.view()).unwrap();
    let h = 1e-5;
    let mut fd = vec![0.0; grad.len()];
    for i in 0..grad.len() {
        let p0 = map.params[i];
        map.params[i] = p0 + h;
        let fp = functional(&map, &z, &dphi, &dl);
        map.params[i] = p0 - h;
        let fm = functional(&map, &z, &dphi, &dl);
        map.params[i] = p0;
        fd[i] = (fp - fm) / (2.0 * h);
    }
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (i, (a, n)) in grad.iter().zip(&fd).enumerate() {
        assert!(
            (a - n).abs() <= 1e-4 * n.abs().max(1e-3 * scale),
            "param {i}: {a} vs {n}"
        );
    }
}

#[test]
fn gradient_is_linear_in_the_batch() {
    let map = random_map(
        spec(2, OrderingKind::Lexicographic, MapMode::Sparse, 2).with_hidden(&[8]),
        25,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let z = normal_matrix(&mut rng, 4, 4);
    let dphi = normal_matrix(&mut rng, 4, 4);
    let dl = array![1.0, -0.5, 0.25, 2.0];
    let out = map.forward(z.view()).unwrap();
    let total = map.gradient(z.view(), &out, dphi.view(), dl.view()).unwrap();
    let mut summed = vec![0.0; total.len()];
    for b in 0..4 {
        let zb = z.slice(ndarray::s![b..b + 1, ..]);
        let ob = map.forward(zb).unwrap();
        let g = map
            .gradient(
                zb,
                &ob,
                dphi.slice(ndarray::s![b..b + 1, ..]),
                dl.slice(ndarray::s![b..b + 1]),
            )
            .unwrap();
        summed.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
    }
    for (a, b) in total.iter().zip(&summed) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
    let zero = map
        .gradient(z.view(), &out, Array2::zeros((4, 4)).view(), Array1::zeros(4).view())
        .unwrap();
    assert!(zero.iter().all(|&g| g == 0.0));
}

#[test]
fn checkerboard_first_stage_is_context_free() {
    let map = random_map(
        spec(4, OrderingKind::Checkerboard, MapMode::Sparse, 1).with_hidden(&[4]),
        27,
    );
    for label in 0..8 {
        assert!(map.conditioning().get(label).is_empty());
        assert!(matches!(map.components[label].shift, Shift::Scalar { .. }));
    }
    assert_eq!(map.conditioning().waves().len(), 2);
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let map = random_map(
        spec(4, OrderingKind::Maxmin, MapMode::Sparse, 3).with_hidden(&[8, 8]),
        29,
    );
    let mut buf = Vec::new();
    map.save(&mut buf).unwrap();
    let back = TriangularMap::load(buf.as_slice()).unwrap();
    assert_eq!(back.spec(), map.spec());
    assert_eq!(back.params(), map.params());

    let (mut header, params) = read_container(buf.as_slice()).unwrap();
    header["L"] = Value::from(6);
    let mut bad = Vec::new();
    write_container(&mut bad, &header, &params).unwrap();
    assert!(matches!(TriangularMap::load(bad.as_slice()), Err(Error::Checkpoint(_))));
}

#[test]
fn identity_samples_are_standard_normal() {
    let map = TriangularMap::new(
        spec(2, OrderingKind::Checkerboard, MapMode::Sparse, 1).with_hidden(&[4]),
        MapInit::Identity,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let m = 100_000;
    let (_, out) = map.sample(m, &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
    let mean = out.phi.mean_axis(Axis(0)).unwrap();
    let centered = &out.phi - &mean;
    let cov = centered.t().dot(&centered) / (m as f64 - 1.0);
    let se = 1.0 / (m as f64).sqrt();
    for i in 0..4 {
        assert!(mean[i].abs() < 4.0 * se);
        for j in 0..4 {
            // Var of a sample covariance entry: (1 + δ_ij) / m for unit Gaussians
            let expected = if i == j { 1.0 } else { 0.0 };
            let sd = ((1.0 + expected) / m as f64).sqrt();
            assert!(
                (cov[[i, j]] - expected).abs() < 4.0 * sd,
                "cov[{i},{j}] = {}",
                cov[[i, j]]
            );
        }
    }
}

#[test]
fn mode_names_parse() {
    for m in [MapMode::Sparse, MapMode::Dense, MapMode::Exact] {
        assert_eq!(m.name().parse::<MapMode>().unwrap(), m);
    }
    assert!("banded".parse::<MapMode>().is_err());
}
