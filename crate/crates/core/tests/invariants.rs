use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vcnf::flow::randomize;
use vcnf::oracles;
use vcnf::problems::Gaussian;
use vcnf::{FlowArch, FlowModel};

fn model(dim: usize, seed: u64, scale: f64) -> FlowModel {
    let mut m = FlowModel::new(FlowArch::new(dim), seed).unwrap();
    randomize(&mut m, scale, &mut ChaCha8Rng::seed_from_u64(seed));
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flow_inverse_undoes_forward(
        seed in 0u64..10_000,
        z in prop::collection::vec(-4.0f64..4.0, 3),
        t in 0.0f64..1.0,
    ) {
        let m = model(3, seed, 0.4);
        let (x, ld) = m.forward(&z, t).unwrap();
        let (back, ild) = m.inverse(&x, t).unwrap();
        for (a, b) in back.iter().zip(&z) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!((ld + ild).abs() < 1e-9);
    }

    #[test]
    fn log_density_matches_change_of_variables(
        seed in 0u64..10_000,
        z in prop::collection::vec(-3.0f64..3.0, 2),
        t in 0.0f64..1.0,
    ) {
        let m = model(2, seed, 0.4);
        let (x, ld) = m.forward(&z, t).unwrap();
        let log_q = -0.5 * (z[0] * z[0] + z[1] * z[1]) - (2.0 * std::f64::consts::PI).ln();
        prop_assert!((m.log_density(&x, t).unwrap() - (log_q - ld)).abs() < 1e-9);
    }

    #[test]
    fn forward_separates_distinct_first_coordinates(
        seed in 0u64..10_000,
        z0 in -5.0f64..5.0,
        z1 in -5.0f64..5.0,
        gap in 1e-3f64..1.0,
    ) {
        // the composed map is injective
        let m = model(2, seed, 0.4);
        let (a, _) = m.forward(&[z0, z1], 0.5).unwrap();
        let (b, _) = m.forward(&[z0 + gap, z1], 0.5).unwrap();
        prop_assert!(a != b);
    }

    #[test]
    fn gaussian_ot_map_pushes_covariance(
        a in 0.2f64..3.0, b in -0.5f64..0.5, c in 0.2f64..3.0,
        p in 0.2f64..3.0, q in -0.5f64..0.5, r in 0.2f64..3.0,
    ) {
        prop_assume!(a * c > b * b + 0.05 && p * r > q * q + 0.05);
        let s0 = DMatrix::from_row_slice(2, 2, &[a, b, b, c]);
        let s1 = DMatrix::from_row_slice(2, 2, &[p, q, q, r]);
        let map = oracles::gaussian_ot_map(&[0.0, 0.0], &s0, &[1.0, 2.0], &s1).unwrap();
        // A S0 A^T = S1 with A symmetric positive definite
        let pushed = &map.a * &s0 * map.a.transpose();
        prop_assert!((pushed - &s1).abs().max() < 1e-9);
        prop_assert!((&map.a - map.a.transpose()).abs().max() < 1e-12);
        prop_assert!(map.a.symmetric_eigenvalues().min() > 0.0);
        let w = oracles::gaussian_w2sq(&[0.0, 0.0], &s0, &[1.0, 2.0], &s1).unwrap();
        prop_assert!(w >= 5.0 - 1e-12);
    }

    #[test]
    fn gaussian_w2_is_symmetric(v0 in 0.1f64..4.0, v1 in 0.1f64..4.0, m in -3.0f64..3.0) {
        let g0 = Gaussian::isotropic(vec![m, 0.0], v0).unwrap();
        let g1 = Gaussian::isotropic(vec![0.0, m], v1).unwrap();
        let ab = oracles::gaussian_ot_benchmark(&g0, &g1).unwrap();
        let ba = oracles::gaussian_ot_benchmark(&g1, &g0).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12 * (1.0 + ab));
        // isotropic closed form: |dm|^2 + d (sqrt v0 - sqrt v1)^2, halved
        let expect = 0.5 * (2.0 * m * m + 2.0 * (v0.sqrt() - v1.sqrt()).powi(2));
        prop_assert!((ab - expect).abs() < 1e-10 * (1.0 + expect));
    }

    #[test]
    fn ou_variance_relaxes_monotonically(
        a in 0.1f64..3.0, gamma in 0.1f64..2.0, var0 in 0.1f64..6.0, t in 0.0f64..3.0, dt in 0.01f64..1.0,
    ) {
        let now = oracles::ou_variance(t, a, gamma, var0).unwrap();
        let later = oracles::ou_variance(t + dt, a, gamma, var0).unwrap();
        let stat = gamma / a;
        prop_assert!((later - stat).abs() <= (now - stat).abs() + 1e-15);
    }

    #[test]
    fn assignment_never_beats_brute_force(seed in 0u64..1000) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let cost = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.0..10.0));
        let assign = oracles::hungarian(&cost);
        let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
        let mut best = f64::INFINITY;
        let mut perm: Vec<usize> = (0..n).collect();
        permute(&mut perm, 0, &mut |p| {
            best = best.min(p.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum());
        });
        prop_assert!((total - best).abs() < 1e-9);
    }
}

fn permute(p: &mut Vec<usize>, k: usize, f: &mut dyn FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, f);
        p.swap(k, i);
    }
}
