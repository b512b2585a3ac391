//! Acceptance criteria 1 to 11. Prints one PASS/FAIL line per criterion and fails if any fails.

use std::io::Write;
use std::time::Instant;

use lelong_core::bergman::{
    assemble_gram, ball_kernel, basis_for, bound_ratio_profile, exponent_fit, kernel_ray,
    BasisSpec, DegreeRule, GramMethod,
};
use lelong_core::experiment::{run, run_with_threads, Budgets, ExperimentConfig, ExperimentKind};
use lelong_core::fit::geometric_grid;
use lelong_core::geometry::{quasi_triangle_sweep, rudin_sweep, verify_ball_inclusions, CPoint};
use lelong_core::oscillation::{default_eps_grid, jn_curve, sample_family, FamilyMode, JN_CAP};
use lelong_core::riesz::{riesz_decompose, DiscSpec};
use lelong_core::rng::SeededStream;
use lelong_core::weights::{
    directional_lelong_estimate, full_catalog, thin_set_lelong, Shrink, Weight,
};
use num_complex::Complex64 as C64;

struct Report {
    failed: Vec<u32>,
}

impl Report {
    fn line(&mut self, id: u32, pass: bool, detail: String) {
        if !pass {
            self.failed.push(id);
        }
        // straight to the stdout handle so the lines survive test output capture
        let tag = if pass { "PASS" } else { "FAIL" };
        let mut out = std::io::stdout();
        writeln!(out, "criterion {id:>2}: {tag}  {detail}").unwrap();
        out.flush().unwrap();
    }
}

fn point(n: usize, norm: f64, k: usize) -> CPoint {
    // fixed, non-axis directions
    let raw: Vec<C64> = (0..n)
        .map(|j| C64::from_polar(1.0 + 0.3 * j as f64, 0.7 * (k + 1) as f64 + 1.3 * j as f64))
        .collect();
    let s: f64 = raw.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    CPoint {
        coords: raw.iter().map(|c| c * (norm / s)).collect(),
    }
}

fn criterion_1(rep: &mut Report) {
    let started = Instant::now();
    let mut worst_exact: f64 = 0.0;
    let mut worst_mc: f64 = 0.0;
    let mut slow = 0.0f64;
    for n in [1usize, 2] {
        let t0 = Instant::now();
        let zero = Weight::parse("zero", n).unwrap();
        let exact = assemble_gram(&zero, 0.0, &BasisSpec::full(n, 30), &GramMethod::Exact).unwrap();
        let mc = assemble_gram(
            &zero,
            0.0,
            &basis_for(&zero, 30),
            &GramMethod::MonteCarlo {
                budget: 1_000_000,
                seed: 11,
            },
        )
        .unwrap();
        for (k, norm) in [0.0, 0.2, 0.4, 0.6].into_iter().enumerate() {
            let z = point(n, norm, k);
            let oracle = ball_kernel(n, z.norm_sqr());
            let e = exact.kernel_at_degree(&z, 30).unwrap().value;
            let m = mc.kernel_at_degree(&z, 30).unwrap().value;
            worst_exact = worst_exact.max((e / oracle - 1.0).abs());
            worst_mc = worst_mc.max((m / oracle - 1.0).abs());
        }
        slow = slow.max(t0.elapsed().as_secs_f64());
    }
    rep.line(
        1,
        worst_exact <= 0.01 && worst_mc <= 0.05 && slow < 120.0,
        format!(
            "ball kernel, d = 30, |z| <= 0.6: exact path max rel err {worst_exact:.2e}, Monte Carlo (1e6) {worst_mc:.2e}; slowest dimension {slow:.1}s (total {:.1}s)",
            started.elapsed().as_secs_f64()
        ),
    );
}

fn criterion_2(rep: &mut Report) {
    let grid = geometric_grid(0.05, 0.3, 8);
    let mut details = Vec::new();
    let mut ok = true;
    for n in [1usize, 2] {
        for (spec, t) in [("zero", 0.0), ("smooth:a=0.5", 1.0)] {
            let w = Weight::parse(spec, n).unwrap();
            let method = if t == 0.0 {
                GramMethod::Exact
            } else {
                GramMethod::MonteCarlo {
                    budget: 1_000_000,
                    seed: 12,
                }
            };
            let ray = kernel_ray(
                &w,
                t,
                &CPoint::axis(n, 0, 1.0),
                &grid,
                &DegreeRule::standard(n),
                &method,
                None,
            )
            .unwrap();
            let fit = exponent_fit(&ray.points).unwrap();
            let err = (fit.fit.slope - (n + 1) as f64).abs();
            ok &= err <= 0.1;
            details.push(format!("n={n} {spec} t={t}: {:.4}", fit.fit.slope));
        }
    }
    rep.line(2, ok, format!("slope = n+1 +- 0.1; {}", details.join(", ")));
}

fn criterion_3(rep: &mut Report) {
    let t0 = Instant::now();
    let w = Weight::parse("normal_log:c=1", 2).unwrap();
    let ray = kernel_ray(
        &w,
        0.5,
        &CPoint::axis(2, 0, 1.0),
        &geometric_grid(0.05, 0.3, 8),
        &DegreeRule::standard(2),
        &GramMethod::MonteCarlo {
            budget: 10_000_000,
            seed: 13,
        },
        None,
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    match exponent_fit(&ray.points) {
        Ok(fit) => rep.line(
            3,
            (fit.fit.slope - 2.5).abs() <= 0.3 && secs < 1800.0,
            format!(
                "normal_log c=1, t=0.5, n=2, budget 1e7: slope {:.4} (target 2.5 +- 0.3; against log(1/r) {:.4}); {} of {} points converged; {secs:.0}s",
                fit.fit.slope,
                fit.raw.slope,
                ray.points.len() - fit.excluded.len(),
                ray.points.len()
            ),
        ),
        Err(e) => rep.line(3, false, format!("fit failed: {e}")),
    }
}

fn criterion_4(rep: &mut Report) {
    let grid = geometric_grid(1e-4, 1e-2, 6);
    let mut worst: f64 = 0.0;
    for c in [0.5, 1.0, 2.0] {
        for (kind, oracle) in [("normal_log", c), ("tangential_log", c / 2.0)] {
            let w = Weight::parse(&format!("{kind}:c={c}"), 2).unwrap();
            let f = directional_lelong_estimate(&w, &CPoint::axis(2, 0, 1.0), &grid).unwrap();
            worst = worst.max((f.slope / oracle - 1.0).abs());
        }
    }
    rep.line(
        4,
        worst <= 0.02,
        format!("directional Lelong estimates, worst relative error {worst:.2e}"),
    );
}

fn criterion_5(rep: &mut Report) {
    let grid = default_eps_grid();
    let step = grid[1] - grid[0];
    let mut ok = true;
    let mut details = Vec::new();
    for c in [1.0f64, 2.0] {
        let w = Weight::parse(&format!("normal_log:c={c}"), 2).unwrap();
        let st = SeededStream::new(15, c as u64);
        let fam = sample_family(&w, w.domain_radius, 16, FamilyMode::AllUnitary, &st).unwrap();
        let curve = jn_curve(&w, &fam, &grid, 100_000, JN_CAP, &st.child(9)).unwrap();
        let threshold = 2.0 / c;
        let bracketed = curve
            .bracket
            .is_some_and(|(lo, hi)| lo - step - 1e-9 <= threshold && threshold <= hi + step + 1e-9);
        let worst = grid
            .iter()
            .zip(&curve.m)
            .filter(|(e, _)| **e <= 0.8 * threshold + 1e-9)
            .map(|(e, m)| {
                let x = e * c;
                m.value / ((x / 2.0).exp() * 2.0 / (2.0 - x))
            })
            .fold(0.0, f64::max);
        ok &= bracketed && worst <= 10.0;
        details.push(format!(
            "c={c}: bracket {:?}, max M/model {worst:.3}",
            curve.bracket
        ));
    }
    rep.line(5, ok, format!("threshold 2/c; {}", details.join("; ")));
}

fn criterion_6(rep: &mut Report) {
    let grid = geometric_grid(0.05, 0.3, 8);
    let t = 0.5;
    let mut worst: f64 = 0.0;
    let mut ok = true;
    let mut count = 0;
    let mut notes = Vec::new();
    for n in [1usize, 2] {
        for (i, w) in full_catalog(n).iter().enumerate() {
            // full monomial bases at n = 2 are out of reach at degree 60
            if n == 2 && !w.is_axis_torus_invariant() {
                continue;
            }
            let method = if matches!(w.expr, lelong_core::weights::WeightExpr::Zero) {
                GramMethod::Exact
            } else {
                GramMethod::MonteCarlo {
                    budget: 1_000_000,
                    seed: 16,
                }
            };
            let st = SeededStream::new(16, (10 * n + i) as u64);
            match bound_ratio_profile(
                w,
                t,
                &CPoint::axis(n, 0, 1.0),
                &grid,
                &DegreeRule::standard(n),
                &method,
                100_000,
                &st,
            ) {
                Ok(p) => {
                    count += 1;
                    worst = worst.max(p.spread);
                    ok &= p.spread <= 4.0;
                    notes.push(format!("n={n} {}: {:.3}", w.id(), p.spread));
                }
                Err(e) => {
                    ok = false;
                    notes.push(format!("n={n} {}: error {e}", w.id()));
                }
            }
        }
    }
    rep.line(
        6,
        ok,
        format!(
            "log bound ratio spread <= 4 at t={t}, {count} weights, largest {worst:.3} [{}]",
            notes.join(", ")
        ),
    );
}

fn criterion_7(rep: &mut Report) {
    let st = SeededStream::new(17, 0);
    let mut rudin: f64 = 0.0;
    for n in 1..=4 {
        rudin = rudin.max(rudin_sweep(n, 10_000, &st.child(n as u64)).unwrap());
    }
    let q = quasi_triangle_sweep(2, 1_000_000, &st.child(10)).unwrap();
    let mut incl = 0;
    for (i, r) in [0.1, 0.5, 0.9].into_iter().enumerate() {
        let v = verify_ball_inclusions(r, 2, 100_000, &st.child(20 + i as u64)).unwrap();
        incl += v.inner_violations + v.outer_violations;
    }
    rep.line(
        7,
        rudin < 1e-12 && q.violations == 0 && q.witness_ratio == Some(2.0) && incl == 0,
        format!(
            "Rudin residual {rudin:.2e}; quasi-triangle max ratio {:.6}, {} violations, witness {:?}; inclusion violations {incl}",
            q.max_ratio, q.violations, q.witness_ratio
        ),
    );
}

fn criterion_8(rep: &mut Report) {
    let mut ok = true;
    let mut notes = Vec::new();
    for n in [1usize, 2] {
        let cfg = ExperimentConfig {
            kind: ExperimentKind::Doubling,
            weight: "catalog".into(),
            n,
            seed: 18,
            configurations: 100,
            budgets: Budgets {
                family: 20_000,
                ..Budgets::default()
            },
            ..Default::default()
        };
        let out = run(&cfg).unwrap();
        let failed: Vec<String> = out
            .manifest
            .verdicts
            .iter()
            .filter(|v| !v.pass)
            .map(|v| format!("{} ({})", v.name, v.detail))
            .collect();
        let retests: f64 = out
            .manifest
            .empirical_constants
            .iter()
            .filter(|(k, _)| k.starts_with("retested"))
            .map(|(_, v)| v)
            .sum();
        ok &= failed.is_empty();
        notes.push(format!(
            "n={n}: {} families, {} failing, {retests} instances retested{}",
            out.manifest.verdicts.len(),
            failed.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(" [{}]", failed.join("; "))
            }
        ));
    }
    rep.line(
        8,
        ok,
        format!(
            "100 configurations x catalog at 3 sigma; {}",
            notes.join("; ")
        ),
    );
}

fn criterion_9(rep: &mut Report) {
    let grid = geometric_grid(1e-6, 1e-3, 8);
    let a = CPoint {
        coords: vec![C64::new(0.3, 0.1), C64::new(0.0, 0.0)],
    };
    let mut ok = true;
    let mut notes = Vec::new();
    for c in [1.0, 3.0] {
        let w = Weight::parse(&format!("interior_log:c={c},a=0.3@0.1;0"), 2).unwrap();
        let f = thin_set_lelong(
            &w,
            &a,
            &grid,
            Shrink::InverseLog,
            4096,
            &SeededStream::new(19, c as u64),
        )
        .unwrap();
        let err = (f.effective.slope / c - 1.0).abs();
        ok &= err <= 0.05;
        notes.push(format!(
            "c={c}: against log(r delta_r) {:.4}, against log r {:.4}",
            f.effective.slope, f.raw.slope
        ));
    }
    rep.line(
        9,
        ok,
        format!(
            "thin-set Lelong, delta_r = 1/log(1/r); {}",
            notes.join("; ")
        ),
    );
}

fn criterion_10(rep: &mut Report) {
    let spec = DiscSpec::new(4.0 / 3.0, 256, 256).unwrap();
    let (mut recon, mut major, mut harm): (f64, f64, f64) = (0.0, f64::NEG_INFINITY, 0.0);
    let mut used = 0;
    let mut skipped = Vec::new();
    let mut atoms_ok = true;
    for w in full_catalog(1) {
        let d = match riesz_decompose(&w, &spec) {
            Ok(d) => d,
            Err(_) => {
                skipped.push(w.id());
                continue;
            }
        };
        used += 1;
        let c = d.checks();
        recon = recon.max(c.reconstruction);
        major = major.max(c.majorant_violation);
        if d.measure.density == 0.0 {
            harm = harm.max(c.harmonicity);
        }
        atoms_ok &= c.pass;
    }
    let ok = recon < 1e-10 && major <= 1e-6 && harm < 1e-3 && atoms_ok;
    rep.line(
        10,
        ok,
        format!(
            "{used} catalog weights on 256x256: reconstruction {recon:.2e}, max(psi - h, h) {major:.2e}, harmonicity {harm:.2e}; no closed-form Laplacian for {skipped:?}"
        ),
    );
}

fn criterion_11(rep: &mut Report) {
    let mut ok = true;
    let mut kinds = Vec::new();
    for kind in ExperimentKind::ALL {
        let mut cfg = ExperimentConfig::for_kind(kind);
        cfg.seed = 21;
        cfg.weight = "normal_log:c=1".into();
        cfg.t = 0.5;
        cfg.budgets = Budgets {
            mean: 4000,
            gram: 20_000,
            family: 2000,
        };
        cfg.family_size = 4;
        cfg.configurations = 3;
        cfg.grid = 64;
        cfg.pairs = 200;
        cfg.triples = 2000;
        cfg.inclusion_samples = 1000;
        cfg.cache = false;
        if kind == ExperimentKind::Lelong {
            cfg.n = 2;
            cfg.weight = "normal_log:c=1+interior_log:c=2,a=0.2;0.1".into();
        }
        let bodies: Vec<String> = [1usize, 4, 8]
            .iter()
            .map(|&threads| {
                let out = run_with_threads(&cfg, threads).unwrap();
                out.tables
                    .iter()
                    .map(|t| format!("## {}\n{}", t.name, t.to_csv()))
                    .collect()
            })
            .collect();
        let same = bodies.windows(2).all(|w| w[0] == w[1]);
        ok &= same;
        kinds.push(format!(
            "{}{}",
            kind.as_str(),
            if same { "" } else { " DIFFERS" }
        ));
    }
    rep.line(
        11,
        ok,
        format!("byte-identical CSV at 1/4/8 threads: {}", kinds.join(", ")),
    );
}

#[test]
fn acceptance() {
    let mut rep = Report { failed: Vec::new() };
    criterion_1(&mut rep);
    criterion_2(&mut rep);
    criterion_3(&mut rep);
    criterion_4(&mut rep);
    criterion_5(&mut rep);
    criterion_6(&mut rep);
    criterion_7(&mut rep);
    criterion_8(&mut rep);
    criterion_9(&mut rep);
    criterion_10(&mut rep);
    criterion_11(&mut rep);
    assert!(rep.failed.is_empty(), "failed criteria: {:?}", rep.failed);
}
