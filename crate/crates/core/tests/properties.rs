use std::sync::OnceLock;

use lelong_core::bergman::{assemble_gram, ball_kernel, BasisSpec, GramMethod, GramModel};
use lelong_core::experiment::{ResultManifest, Status, Verdict};
use lelong_core::fit::geometric_grid;
use lelong_core::geometry::{
    quasi_distance, random_unitary, region_volume, rudin_residual, verify_ball_inclusions, CPoint,
    Frame, Region,
};
use lelong_core::oscillation::{
    ap_product, jn_member, mean_oscillation, reverse_jensen_check, sample_family, FamilyMode, Field,
};
use lelong_core::quadrature::{integrate, mean_value, sup_estimate};
use lelong_core::riesz::{green_function, riesz_decompose, DiscSpec};
use lelong_core::rng::SeededStream;
use lelong_core::weights::{directional_lelong_estimate, full_catalog, torus_sup, Weight};
use num_complex::Complex64 as C64;
use proptest::prelude::*;

fn ball_point(n: usize, max_norm: f64) -> impl Strategy<Value = CPoint> {
    (
        prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n),
        0.0f64..1.0,
    )
        .prop_map(move |(raw, s)| {
            let coords: Vec<C64> = raw.iter().map(|(a, b)| C64::new(*a, *b)).collect();
            let norm = coords
                .iter()
                .map(|c| c.norm_sqr())
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            CPoint {
                coords: coords.iter().map(|c| c * (s * max_norm / norm)).collect(),
            }
        })
}

/// Exact unweighted Gram model of degree 20 per dimension; truncation at |z| <= 0.6 is
/// below 1e-7 relative.
fn unweighted_model(n: usize) -> &'static GramModel {
    static MODELS: [OnceLock<GramModel>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    MODELS[n - 1].get_or_init(|| {
        let zero = Weight::parse("zero", n).unwrap();
        assemble_gram(&zero, 0.0, &BasisSpec::full(n, 20), &GramMethod::Exact).unwrap()
    })
}

fn ball(n: usize, radius: f64) -> Region {
    Region::EuclideanBall {
        center: CPoint::origin(n),
        radius,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rudin_identity(n in 1usize..=4, seed in any::<u64>()) {
        let st = SeededStream::new(seed, 0);
        let b = ball(n, 1.0);
        for k in 0..16 {
            let w = lelong_core::quadrature::sample_region(&b, k, &st.child(1));
            let z = lelong_core::quadrature::sample_region(&b, k, &st.child(2));
            prop_assert!(rudin_residual(&w, &z).unwrap() < 1e-12);
        }
    }

    #[test]
    fn quasi_triangle_constant_two(
        (z, u, w) in (2usize..=4).prop_flat_map(|n| (ball_point(n, 1.0), ball_point(n, 1.0), ball_point(n, 1.0)))
    ) {
        let lhs = quasi_distance(&z, &w).unwrap();
        let rhs = quasi_distance(&z, &u).unwrap() + quasi_distance(&u, &w).unwrap();
        prop_assert!(lhs <= 2.0 * rhs * (1.0 + 1e-14));
        prop_assert!(quasi_distance(&z, &z).unwrap() == 0.0);
        prop_assert!(lhs == quasi_distance(&w, &z).unwrap());
    }

    #[test]
    fn nonisotropic_volume_scales_like_r_pow_n_plus_one(n in 1usize..=4, r in 1e-3f64..1.0) {
        let f = Frame::translation(CPoint::origin(n));
        let v = region_volume(&Region::NonisotropicBall { frame: f, r });
        let coef = std::f64::consts::PI.powi(n as i32) / (1..n).map(|k| k as f64).product::<f64>();
        prop_assert!((v / r.powi(n as i32 + 1) / coef - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normal_log_torus_sup_is_exact(c in 0.1f64..3.0, r in 1e-6f64..0.5, n in 1usize..=3) {
        let w = Weight::parse(&format!("normal_log:c={c}"), n).unwrap();
        let s = torus_sup(&w, &CPoint::axis(n, 0, 1.0), r, 0).unwrap();
        prop_assert!((s - c * r.ln()).abs() < 1e-12 * (1.0 + (c * r.ln()).abs()));
    }

    #[test]
    fn green_function_properties(z in ball_point(1, 0.99), w in ball_point(1, 0.99), big in 0.5f64..2.0) {
        let (z0, w0) = (z.coords[0] * big, w.coords[0] * big);
        prop_assume!((z0 - w0).norm() > 1e-9);
        let g = green_function(z0, w0, big).unwrap();
        prop_assert!(g < 1e-12);
        prop_assert!((g - green_function(w0, z0, big).unwrap()).abs() < 1e-10 * (1.0 + g.abs()));
        let edge = C64::from_polar(big * (1.0 - 1e-9), z0.arg());
        prop_assert!(green_function(edge, w0, big).unwrap().abs() < 1e-6 / (big - w0.norm()));
    }

    #[test]
    fn status_follows_exit_code_contract(flags in prop::collection::vec((any::<bool>(), any::<bool>(), any::<bool>()), 0..12)) {
        let verdicts: Vec<Verdict> = flags
            .iter()
            .map(|&(pass, binding, heavy_tail)| Verdict { name: "v".into(), pass, binding, heavy_tail, detail: String::new() })
            .collect();
        let m = ResultManifest {
            schema_version: 1,
            config: Default::default(),
            versions: Default::default(),
            outputs: serde_json::Value::Null,
            empirical_constants: Default::default(),
            verdicts: verdicts.clone(),
            files: Vec::new(),
            wall_clock_secs: 0.0,
        };
        let hard = verdicts.iter().any(|v| v.binding && !v.pass && !v.heavy_tail);
        let soft = verdicts.iter().any(|v| v.binding && !v.pass && v.heavy_tail);
        let expected = if hard { 1 } else if soft { 2 } else { 0 };
        prop_assert_eq!(m.status().exit_code(), expected);
        prop_assert_eq!(m.status() == Status::Pass, expected == 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn ball_inclusions_hold(n in 1usize..=4, r in 0.01f64..0.95, seed in any::<u64>()) {
        let v = verify_ball_inclusions(r, n, 2000, &SeededStream::new(seed, 0)).unwrap();
        prop_assert!(v.pass, "{:?}", v.counterexample);
    }

    #[test]
    fn normalized_catalog_is_nonpositive(n in 1usize..=3, seed in any::<u64>()) {
        let st = SeededStream::new(seed, 0);
        for w in full_catalog(n) {
            let b = ball(n, w.domain_radius);
            for k in 0..2000 {
                let z = lelong_core::quadrature::sample_region(&b, k, &st);
                prop_assert!(w.eval_normalized(&z.coords) <= 1e-12, "{}", w.id());
            }
        }
    }

    #[test]
    fn lelong_of_max_and_sum(c1 in 0.3f64..2.0, c2 in 0.3f64..2.0) {
        let grid = geometric_grid(1e-4, 1e-2, 6);
        let e1 = CPoint::axis(2, 0, 1.0);
        let sum = Weight::parse(&format!("normal_log:c={c1}+tangential_log:c={c2}"), 2).unwrap();
        let max = Weight::parse(&format!("max(normal_log:c={c1}|tangential_log:c={c2})"), 2).unwrap();
        let s = directional_lelong_estimate(&sum, &e1, &grid).unwrap().slope;
        let m = directional_lelong_estimate(&max, &e1, &grid).unwrap().slope;
        prop_assert!((s - (c1 + c2 / 2.0)).abs() < 0.02 * (c1 + c2 / 2.0));
        let lo = c1.min(c2 / 2.0);
        prop_assert!((m - lo).abs() < 0.02 * lo);
    }

    #[test]
    fn quadrature_is_thread_count_invariant(seed in any::<u64>(), n in 1usize..=3) {
        let w = Weight::parse("normal_log:c=1+smooth:a=0.3", n).unwrap();
        let b = ball(n, 0.9);
        let st = SeededStream::new(seed, 3);
        let at = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
                .install(|| mean_value(&w, &b, 20_000, &st).unwrap())
        };
        let (a, c) = (at(1), at(3));
        prop_assert_eq!(a.value.to_bits(), c.value.to_bits());
        prop_assert_eq!(a.stderr.to_bits(), c.stderr.to_bits());
    }

    #[test]
    fn integration_is_linear(alpha in -2.0f64..2.0, beta in -2.0f64..2.0, seed in any::<u64>()) {
        let b = ball(2, 0.8);
        let st = SeededStream::new(seed, 4);
        let f = |z: &[C64]| (C64::new(1.0, 0.0) - z[0]).norm().ln();
        let g = |z: &[C64]| z[1].norm_sqr();
        let h = |z: &[C64]| alpha * f(z) + beta * g(z);
        let (ef, eg, eh) = (integrate(&f, &b, 20_000, &st).unwrap(), integrate(&g, &b, 20_000, &st).unwrap(), integrate(&h, &b, 20_000, &st).unwrap());
        let tol = 1e-9 + 3.0 * eh.stderr;
        prop_assert!((eh.value - (alpha * ef.value + beta * eg.value)).abs() <= tol);
    }

    #[test]
    fn sup_estimate_respects_analytic_sup(cx in -0.5f64..0.5, rho in 0.05f64..0.4, a in 0.1f64..2.0) {
        let region = Region::EuclideanBall { center: CPoint::from_re(&[cx, 0.0]), radius: rho };
        let f = move |z: &[C64]| a * (z[0].norm_sqr() + z[1].norm_sqr());
        let s = sup_estimate(&f, &region, 4000, &SeededStream::new(5, 0));
        let exact = a * (cx.abs() + rho).powi(2);
        prop_assert!(s.value <= exact * (1.0 + 1e-12));
        prop_assert!(s.value >= 0.9 * exact);
    }

    #[test]
    fn unweighted_kernel_matches_closed_form(z in (1usize..=3).prop_flat_map(|n| ball_point(n, 0.6))) {
        let n = z.dim();
        let by_d = unweighted_model(n).kernel_by_degree(&z).unwrap();
        prop_assert!(by_d.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(by_d.iter().all(|v| *v > 0.0));
        let oracle = ball_kernel(n, z.norm_sqr());
        prop_assert!((by_d.last().unwrap() / oracle - 1.0).abs() < 0.01);
    }

    #[test]
    fn mc_kernel_is_monotone_in_degree(z in ball_point(2, 0.8), seed in 0u64..1000) {
        let w = Weight::parse("normal_log:c=1", 2).unwrap();
        let m = assemble_gram(&w, 0.5, &BasisSpec::full(2, 8), &GramMethod::MonteCarlo { budget: 5000, seed }).unwrap();
        let by_d = m.kernel_by_degree(&z).unwrap();
        prop_assert!(by_d.windows(2).all(|w| w[1] >= w[0]));
        prop_assert!(by_d[0] > 0.0);
    }

    #[test]
    fn jn_moments_increase_in_eps(seed in any::<u64>(), r in 0.05f64..0.5) {
        let w = Weight::parse("normal_log:c=1", 1).unwrap();
        let region = Region::EuclideanBall { center: CPoint::from_re(&[0.7]), radius: r };
        let grid: Vec<f64> = (1..=15).map(|k| k as f64 / 10.0).collect();
        let m = jn_member(&w, &region, &grid, 4000, &SeededStream::new(seed, 6)).unwrap();
        prop_assert!(m.windows(2).all(|p| p[1].value >= p[0].value));
        prop_assert!(m.iter().all(|e| e.value >= 1.0 - 3.0 * e.stderr - 1e-12));
    }

    #[test]
    fn reverse_jensen_floor(seed in any::<u64>(), t in -0.9f64..1.5) {
        let w = Weight::parse("normal_log:c=1", 2).unwrap();
        let st = SeededStream::new(seed, 7);
        let fam = sample_family(&w, w.domain_radius, 4, FamilyMode::AllUnitary, &st).unwrap();
        let rj = reverse_jensen_check(&w, t, &fam, 4000, &st.child(1)).unwrap();
        for v in &rj.members {
            prop_assert!(v.base.value >= 1.0 - 3.0 * v.base.stderr - 1e-12);
        }
    }

    #[test]
    fn ap_products_floor_and_decrease_in_p(seed in any::<u64>(), c in 0.1f64..1.5) {
        let omega = Field::new(move |z: &[C64]| (C64::new(1.0, 0.0) - z[0]).norm().powf(c));
        let b = Region::EuclideanBall { center: CPoint::from_re(&[0.5, 0.1]), radius: 0.4 };
        let st = SeededStream::new(seed, 8);
        let prods: Vec<_> = [1.5, 2.0, 3.0, 5.0].iter().map(|&p| ap_product(&omega, p, &b, 4000, &st).unwrap()).collect();
        prop_assert!(prods.iter().all(|e| e.value >= 1.0 - 3.0 * e.stderr - 1e-12));
        prop_assert!(prods.windows(2).all(|w| w[1].value <= w[0].value * (1.0 + 1e-12)));
    }

    #[test]
    fn oscillation_ignores_constant_offsets(k in -50.0f64..50.0, seed in any::<u64>()) {
        let w = Weight::parse("interior_log:c=1,a=0.2@0.1", 1).unwrap();
        let region = ball(1, 0.9);
        let st = SeededStream::new(seed, 9);
        let a = mean_oscillation(&Field::new(|z: &[C64]| w.eval(z)), &region, 4000, &st).unwrap();
        let b = mean_oscillation(&Field::new(|z: &[C64]| w.eval(z) + k), &region, 4000, &st).unwrap();
        prop_assert!((a.value - b.value).abs() <= 1e-12 * (1.0 + k.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn kernel_is_unitarily_invariant(seed in 0u64..1000, s in 0.0f64..0.5) {
        let w = Weight::parse("normal_log:c=1", 2).unwrap();
        let u = random_unitary(2, &SeededStream::new(seed, 10), 0);
        let wu = w.transported(&u);
        let z = CPoint::from_re(&[s, 0.3]);
        let uz = CPoint { coords: u.mul_vec(&z.coords) };
        let basis = BasisSpec::full(2, 8);
        let method = GramMethod::MonteCarlo { budget: 100_000, seed };
        let k = assemble_gram(&w, 0.5, &basis, &method).unwrap().kernel_at_degree(&uz, 8).unwrap().value;
        let ku = assemble_gram(&wu, 0.5, &basis, &method).unwrap().kernel_at_degree(&z, 8).unwrap().value;
        prop_assert!((k / ku - 1.0).abs() < 0.05, "{} vs {}", k, ku);
    }

    #[test]
    fn riesz_decomposition_of_atoms(
        a in ball_point(1, 0.7),
        c in 0.2f64..3.0,
        k in -2.0f64..0.0,
    ) {
        let spec = DiscSpec::new(1.0, 128, 128).unwrap();
        let p = a.coords[0];
        let w = Weight::parse(&format!("interior_log:c={c},a={}@{}+const:k={k}", p.re, p.im), 1).unwrap();
        let d = riesz_decompose(&w, &spec).unwrap();
        let ch = d.checks();
        prop_assert!(ch.reconstruction < 1e-10);
        prop_assert!(ch.majorant_violation <= 1e-6);
        prop_assert!(ch.harmonicity < 1e-3);
    }
}
