//! Property suites: Hermite basis, coercivity, decomposition, verdict logic,
//! series arithmetic.

use std::sync::OnceLock;

use blowup_lab::corrector::{solve_hierarchy, BzSeries, CorrectorParams};
use blowup_lab::profile_solver::Profile;
use blowup_lab::simulator::{verdict, verdict_mask, Library, Mode, NormTable, Radial, SimConfig, Simulator};
use blowup_lab::spectral::nondegeneracy_verdict;
use blowup_lab::verify::{random_test_function, COERCIVITY_BOUND};
use blowup_lab::weighted_spaces::{
    coercivity_ratio, hermite_all, hermite_eval, hermite_norm_sq, CylFunction, CylGrid, RadialGrid,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `∫ P_m P_n e^{-z²/4} dz / (‖P_m‖‖P_n‖)` by the trapezoid rule on `[-60, 60]`.
fn hermite_gram(m: usize, n: usize) -> f64 {
    let h = 0.01;
    let norm = (hermite_norm_sq::<f64>(m).unwrap() * hermite_norm_sq::<f64>(n).unwrap()).sqrt();
    (0..=12_000)
        .map(|i| {
            let z = -60.0 + i as f64 * h;
            h * (-z * z / 4.0).exp() * hermite_eval(m, z).unwrap() * hermite_eval(n, z).unwrap()
        })
        .sum::<f64>()
        / norm
}

fn coercivity_grid() -> &'static CylGrid<f64> {
    static G: OnceLock<CylGrid<f64>> = OnceLock::new();
    G.get_or_init(|| CylGrid::new(RadialGrid::uniform(24.0, 0.04).unwrap(), 40.0, 200).unwrap())
}

/// Constant-profile simulator carrying one synthetic `j = -2` mode.
fn kappa_sim() -> &'static Simulator {
    static S: OnceLock<Simulator> = OnceLock::new();
    S.get_or_init(|| {
        let k = Profile::kappa(7.0, 15.0, 0.01).unwrap();
        let c = solve_hierarchy(&k, None, &CorrectorParams::default()).unwrap();
        let h = 0.05;
        let values: Vec<f64> = (0..=300).map(|i| {
            let r = i as f64 * h;
            (1.0 - r * r / 3.0) * (-r * r / 8.0).exp()
        }).collect();
        let extra = vec![Mode { j: -2, m: 0, lambda_j: -2.5, radial: Radial::Samples { h, values } }];
        let cfg = SimConfig { nr: 16, nz: 160, ..Default::default() };
        Simulator::new(cfg, Library::with_modes(c, extra).unwrap()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn hermite_basis_is_orthonormal(m in 0usize..24, n in 0usize..24) {
        let g = hermite_gram(m, n);
        let target = if m == n { 1.0 } else { 0.0 };
        prop_assert!((g - target).abs() < 1e-8, "m={} n={} gram={}", m, n, g);
    }

    #[test]
    fn hermite_eigen_relation(m in 2usize..=60, z in -12.0f64..12.0) {
        // P'' - (z/2) P' = -(m/2) P with P_m' = m P_{m-1}.
        let p = hermite_all::<f64>(m, z).unwrap();
        let mf = m as f64;
        let terms = [mf * (mf - 1.0) * p[m - 2], -0.5 * z * mf * p[m - 1], 0.5 * mf * p[m]];
        let scale = terms.iter().map(|t| t.abs()).fold(f64::MIN_POSITIVE, f64::max);
        prop_assert!(terms.iter().sum::<f64>().abs() <= 1e-8 * scale);
    }

    #[test]
    fn bz_product_matches_pointwise_product(
        a in proptest::collection::vec(-1.0f64..1.0, 4),
        b in proptest::collection::vec(-1.0f64..1.0, 4),
        bb in 0.0f64..0.5,
        t in 0.0f64..2.0,
    ) {
        // Degree (1,1) factors fit in a (2,2) series, so nothing is truncated.
        let build = |c: &[f64]| {
            let mut s = BzSeries::zeros(2, 2, 1);
            for (k, &v) in c.iter().enumerate() {
                s.set(k / 2, k % 2, vec![v]).unwrap();
            }
            s
        };
        let (sa, sb) = (build(&a), build(&b));
        let prod = sa.mul(&sb).unwrap().eval(bb, t, 0);
        let sum = sa.add(&sb).unwrap().eval(bb, t, 0);
        prop_assert!((prod - sa.eval(bb, t, 0) * sb.eval(bb, t, 0)).abs() < 1e-12);
        prop_assert!((sum - sa.eval(bb, t, 0) - sb.eval(bb, t, 0)).abs() < 1e-12);
        prop_assert!((sa.scale(-2.0).eval(bb, t, 0) + 2.0 * sa.eval(bb, t, 0)).abs() < 1e-12);
    }

    #[test]
    fn bz_binomial_is_exact_for_integer_powers(x in -1.0f64..1.0, bb in 0.0f64..0.3) {
        let mut s = BzSeries::zeros(3, 0, 1);
        s.set(1, 0, vec![x]).unwrap();
        let cube = s.one_plus_pow(3.0).unwrap().eval(bb, 0.0, 0);
        prop_assert!((cube - (1.0 + x * bb).powi(3)).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, ..ProptestConfig::default() })]

    #[test]
    fn coercivity_ratio_is_bounded(seed in any::<u64>(), k in 1u32..=6) {
        let grid = coercivity_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = CylFunction::from_fn_grad(grid, random_test_function(&mut rng));
        let ratio = coercivity_ratio(grid, &u, k).unwrap();
        prop_assert!(ratio > 0.0 && ratio <= COERCIVITY_BOUND, "ratio {}", ratio);
    }

    #[test]
    fn nondegeneracy_verdict_logic(
        lm1 in -1.01f64..-0.99,
        deep in proptest::collection::vec(-9.0f64..-1.5, 0..4),
        align in 0.9998f64..1.0,
        tol in 1e-4f64..1e-2,
    ) {
        let mut eigs = deep.clone();
        eigs.sort_by(f64::total_cmp);
        eigs.push(lm1);
        eigs.extend([0.3, 1.4, 2.2]);
        let v = nondegeneracy_verdict(&eigs, align, tol, 60);
        let lm1_ok = (lm1 + 1.0).abs() < tol;
        let collision = deep.iter().any(|l| (l - l.round()).abs() < tol);
        let align_ok = align > 1.0 - 1e-4;
        prop_assert_eq!(v.lambda_minus1_ok, lm1_ok);
        prop_assert_eq!(v.integer_collision, collision);
        prop_assert_eq!(v.deep_modes.len(), deep.len());
        prop_assert_eq!(v.nondegenerate, lm1_ok && align_ok && !collision);
        prop_assert!(v.hermite_cap_ok);
    }

    #[test]
    fn verdict_bits_only_grow_with_norms(
        base in proptest::collection::vec(0.0f64..1e-12, 5),
        bump in 0usize..5,
        s in 60.0f64..300.0,
    ) {
        let cfg = SimConfig::default();
        let c1 = 14.0 / 3.0;
        let table = |v: &[f64]| NormTable {
            eps_h2rho: v[0], grad_eps_l2q2rho: v[1], nuk_l2: v[2], nuk_w1: v[3], v_w1q: v[4], ..Default::default()
        };
        let lam = (-s / 2.0).exp();
        let b = 1.0 / (c1 * s);
        let quiet = verdict_mask(&table(&[0.0; 5]), s, lam, b, &[], c1, &cfg);
        prop_assert_eq!(quiet, 0);
        let mut louder = base.clone();
        louder[bump] = 1.0;
        let m0 = verdict_mask(&table(&base), s, lam, b, &[], c1, &cfg);
        let m1 = verdict_mask(&table(&louder), s, lam, b, &[], c1, &cfg);
        prop_assert_eq!(m0 & !m1, 0);
        prop_assert!(m1 & (verdict::EPS_H2 | verdict::GRAD_EPS | verdict::NU_K_L2 | verdict::NU_K_W1 | verdict::SOBOLEV) != 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn decompose_inverts_compose(mu in 0.8f64..1.25, b in 1e-3f64..3e-2, a in -1e-3f64..1e-3) {
        let sim = kappa_sim();
        let u = sim.compose(mu, b, &[a]).unwrap();
        let d = sim.decompose(&u, b * 1.1).unwrap();
        prop_assert!((d.mu / mu - 1.0).abs() < 1e-8, "mu {} vs {}", d.mu, mu);
        prop_assert!((d.b / b - 1.0).abs() < 1e-8, "b {} vs {}", d.b, b);
        prop_assert!((d.a[0] - a).abs() < 1e-8, "a {} vs {}", d.a[0], a);
    }
}
