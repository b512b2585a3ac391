//! Config-driven experiment runner: one [`ExperimentConfig`] in, CSV tables and a JSON
//! [`ResultManifest`] out.
//!
//! # Defaults
//!
//! | key                 | default            | used by                                  |
//! |---------------------|--------------------|------------------------------------------|
//! | `kind`              | `kernel-asymptotics` |                                        |
//! | `weight`            | `zero`             | all but `geometry-verify`                |
//! | `n`                 | 1                  | all                                      |
//! | `t`                 | 0                  | kernel-asymptotics, bound-ratio, bmo     |
//! | `seed`              | 1                  | all                                      |
//! | `r_grid`            | 8 geometric points in `[0.05, 0.3]` | kernel, bound-ratio, lelong |
//! | `budgets.mean`      | 10^6               | region means                             |
//! | `budgets.gram`      | 10^7               | Monte Carlo Gram matrices                |
//! | `budgets.family`    | 10^5               | per-member estimates in family sweeps    |
//! | `gram`              | `auto`             | exact when `t = 0` or the weight is zero |
//! | `family_size`       | 16                 | jn-curve, bmo, ap                        |
//! | `configurations`    | 100                | doubling, ap, bernstein                  |
//! | `alpha`             | 1                  | bmo, bernstein, riesz                    |
//! | `p`                 | 2                  | ap, doubling                             |
//! | `eps_step`, `eps_max` | 0.1, 8.0         | jn-curve                                 |
//! | `jn_cap`            | 1000               | jn-curve                                 |
//! | `slope_tol`         | 0.3                | kernel-asymptotics                       |
//! | `spread_tol`        | 4                  | bound-ratio                              |
//! | `disc_radius`       | 4/3                | riesz                                    |
//! | `grid`              | 256                | riesz (both polar resolutions)           |
//! | `pairs`, `triples`, `inclusion_samples` | 10^4, 10^6, 10^5 | geometry-verify       |
//! | `out_dir`           | `out`              | emit                                     |
//! | `cache`             | true               | Gram cache under `out_dir/gram-cache`    |
//!
//! `weight = "catalog"` runs every catalog weight for `n`; accepted by `bound-ratio`,
//! `doubling` and `riesz`.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bergman::{
    bound_ratio_profile, exponent_fit, kernel_ray, DegreeRule, GramCache, GramMethod,
};
use crate::error::{Error, Result};
use crate::fit::geometric_grid;
use crate::geometry::{
    quasi_triangle_sweep, rudin_sweep, verify_ball_inclusions, CPoint, Region, IDENTITY_TOL,
};
use crate::oscillation::{
    ap_constant, ap_doubling_check, ap_variation_check, bernstein_ratio, bmo_norm_estimate,
    confirmed, jn_curve, lambda_recipe, mean_comparison_check, random_cells, random_configuration,
    reverse_holder_check, reverse_jensen_check, sample_family, subharmonic_doubling_check,
    FamilyMode, Field, InequalityVerdict, ReverseHolderReport, CONFIRM_BUDGET_FACTOR,
    CONFIRM_STREAM, REVERSE_HOLDER_RECORD_CAP,
};
use crate::riesz::{hormander_ratio, riesz_decompose, DiscSpec};
use crate::rng::SeededStream;
use crate::weights::{
    directional_lelong_estimate, full_catalog, thin_set_lelong, Shrink, Weight, WeightExpr,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    KernelAsymptotics,
    BoundRatio,
    JnCurve,
    Bmo,
    Ap,
    Bernstein,
    Doubling,
    Riesz,
    Lelong,
    GeometryVerify,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 10] = [
        ExperimentKind::KernelAsymptotics,
        ExperimentKind::BoundRatio,
        ExperimentKind::JnCurve,
        ExperimentKind::Bmo,
        ExperimentKind::Ap,
        ExperimentKind::Bernstein,
        ExperimentKind::Doubling,
        ExperimentKind::Riesz,
        ExperimentKind::Lelong,
        ExperimentKind::GeometryVerify,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::KernelAsymptotics => "kernel-asymptotics",
            ExperimentKind::BoundRatio => "bound-ratio",
            ExperimentKind::JnCurve => "jn-curve",
            ExperimentKind::Bmo => "bmo",
            ExperimentKind::Ap => "ap",
            ExperimentKind::Bernstein => "bernstein",
            ExperimentKind::Doubling => "doubling",
            ExperimentKind::Riesz => "riesz",
            ExperimentKind::Lelong => "lelong",
            ExperimentKind::GeometryVerify => "geometry-verify",
        }
    }

    fn stream_id(self) -> u64 {
        ExperimentKind::ALL.iter().position(|k| *k == self).unwrap() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GramChoice {
    Auto,
    Exact,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    /// Explicit radii; overrides `lo`/`hi`/`points` when present.
    pub values: Option<Vec<f64>>,
}

impl Default for RGrid {
    fn default() -> Self {
        RGrid {
            lo: 0.05,
            hi: 0.3,
            points: 8,
            values: None,
        }
    }
}

impl RGrid {
    pub fn radii(&self) -> Vec<f64> {
        match &self.values {
            Some(v) => v.clone(),
            None => geometric_grid(self.lo, self.hi, self.points),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budgets {
    pub mean: u64,
    pub gram: u64,
    pub family: u64,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            mean: 1_000_000,
            gram: 10_000_000,
            family: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub weight: String,
    pub n: usize,
    pub t: f64,
    pub seed: u64,
    /// Boundary direction as real coordinates; `e_1` when absent.
    pub zeta: Option<Vec<f64>>,
    pub r_grid: RGrid,
    pub budgets: Budgets,
    pub gram: GramChoice,
    pub family_size: usize,
    pub configurations: usize,
    pub alpha: f64,
    pub p: f64,
    pub eps_step: f64,
    pub eps_max: f64,
    pub jn_cap: f64,
    pub slope_tol: f64,
    pub spread_tol: f64,
    pub disc_radius: f64,
    pub grid: usize,
    pub pairs: u64,
    pub triples: u64,
    pub inclusion_samples: u64,
    pub out_dir: PathBuf,
    pub cache: bool,
    pub rebuild_cache: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            kind: ExperimentKind::KernelAsymptotics,
            weight: "zero".into(),
            n: 1,
            t: 0.0,
            seed: 1,
            zeta: None,
            r_grid: RGrid::default(),
            budgets: Budgets::default(),
            gram: GramChoice::Auto,
            family_size: 16,
            configurations: 100,
            alpha: 1.0,
            p: 2.0,
            eps_step: 0.1,
            eps_max: 8.0,
            jn_cap: 1e3,
            slope_tol: 0.3,
            spread_tol: 4.0,
            disc_radius: 4.0 / 3.0,
            grid: 256,
            pairs: 10_000,
            triples: 1_000_000,
            inclusion_samples: 100_000,
            out_dir: PathBuf::from("out"),
            cache: true,
            rebuild_cache: false,
        }
    }
}

fn cfg_err(path: &str, reason: impl Display) -> Error {
    Error::Config {
        path: path.to_string(),
        reason: reason.to_string(),
    }
}

impl ExperimentConfig {
    pub fn for_kind(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| {
            let span = e
                .span()
                .map(|r| format!(" (bytes {}..{})", r.start, r.end))
                .unwrap_or_default();
            cfg_err("<config>", format!("{}{span}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { path: p, reason } if p == "<config>" => {
                cfg_err(&path.display().to_string(), reason)
            }
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn scale_budgets(&mut self, factor: f64) -> Result<()> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(cfg_err("budget_scale", "must be positive"));
        }
        let s = |b: u64| ((b as f64 * factor).round() as u64).max(1);
        self.budgets.mean = s(self.budgets.mean);
        self.budgets.gram = s(self.budgets.gram);
        self.budgets.family = s(self.budgets.family);
        Ok(())
    }

    pub fn is_catalog(&self) -> bool {
        self.weight.trim() == "catalog"
    }

    pub fn weights(&self) -> Result<Vec<Weight>> {
        if self.is_catalog() {
            Ok(full_catalog(self.n))
        } else {
            Weight::parse(&self.weight, self.n)
                .map(|w| vec![w])
                .map_err(|e| cfg_err("weight", e))
        }
    }

    pub fn zeta_point(&self) -> Result<CPoint> {
        match &self.zeta {
            None => Ok(CPoint::axis(self.n, 0, 1.0)),
            Some(v) => {
                let p = CPoint::from_re(v);
                let norm = p.norm();
                if v.len() != self.n || !(norm > 0.0) {
                    return Err(cfg_err(
                        "zeta",
                        format!("needs {} coordinates, not all zero", self.n),
                    ));
                }
                Ok(CPoint {
                    coords: p.coords.iter().map(|c| c / norm).collect(),
                })
            }
        }
    }

    pub fn eps_grid(&self) -> Vec<f64> {
        let k = (self.eps_max / self.eps_step + 1e-9).floor() as usize;
        (1..=k)
            .map(|j| ((j as f64 * self.eps_step) * 1e9).round() / 1e9)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.n) {
            return Err(cfg_err("n", "must lie in 1..=4"));
        }
        if !self.t.is_finite() {
            return Err(cfg_err("t", "must be finite"));
        }
        if self.kind != ExperimentKind::GeometryVerify {
            if self.is_catalog()
                && !matches!(
                    self.kind,
                    ExperimentKind::BoundRatio | ExperimentKind::Doubling | ExperimentKind::Riesz
                )
            {
                return Err(cfg_err(
                    "weight",
                    format!("`catalog` is not accepted by {}", self.kind.as_str()),
                ));
            }
            self.weights()?;
        }
        self.zeta_point()?;
        let g = &self.r_grid;
        match &g.values {
            Some(v) => {
                if v.len() < 4 {
                    return Err(cfg_err("r_grid.values", "needs at least 4 radii"));
                }
                if let Some(r) = v.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
                    return Err(cfg_err(
                        "r_grid.values",
                        format!("radius {r} outside (0, 1)"),
                    ));
                }
            }
            None => {
                if !(g.lo > 0.0) {
                    return Err(cfg_err("r_grid.lo", "must be positive"));
                }
                if !(g.hi > g.lo && g.hi < 1.0) {
                    return Err(cfg_err("r_grid.hi", "must lie in (lo, 1)"));
                }
                if g.points < 4 {
                    return Err(cfg_err("r_grid.points", "needs at least 4"));
                }
            }
        }
        for (name, b) in [
            ("budgets.mean", self.budgets.mean),
            ("budgets.gram", self.budgets.gram),
            ("budgets.family", self.budgets.family),
        ] {
            if b < 16 {
                return Err(cfg_err(name, "must be at least 16"));
            }
        }
        if self.family_size == 0 {
            return Err(cfg_err("family_size", "must be positive"));
        }
        if self.configurations == 0 {
            return Err(cfg_err("configurations", "must be positive"));
        }
        if !(self.alpha >= 1.0) {
            return Err(cfg_err("alpha", "must be at least 1"));
        }
        if !(self.p > 1.0) {
            return Err(cfg_err("p", "must exceed 1"));
        }
        if !(self.eps_step > 0.0 && self.eps_max >= self.eps_step) {
            return Err(cfg_err("eps_step", "needs 0 < eps_step <= eps_max"));
        }
        if !(self.jn_cap > 1.0) {
            return Err(cfg_err("jn_cap", "must exceed 1"));
        }
        if !(self.slope_tol > 0.0) {
            return Err(cfg_err("slope_tol", "must be positive"));
        }
        if !(self.spread_tol > 0.0) {
            return Err(cfg_err("spread_tol", "must be positive"));
        }
        if self.kind == ExperimentKind::Riesz {
            if self.n != 1 {
                return Err(cfg_err("n", "riesz runs in one complex dimension"));
            }
            if !(self.disc_radius > 0.0 && self.disc_radius < crate::weights::DEFAULT_DOMAIN_RADIUS)
            {
                return Err(cfg_err(
                    "disc_radius",
                    "must lie inside the weight's normalization ball",
                ));
            }
            if self.grid < crate::riesz::MIN_GRID {
                return Err(cfg_err(
                    "grid",
                    format!("must be at least {}", crate::riesz::MIN_GRID),
                ));
            }
        }
        if self.kind == ExperimentKind::GeometryVerify
            && (self.pairs == 0 || self.triples == 0 || self.inclusion_samples == 0)
        {
            return Err(cfg_err("pairs", "geometry sample counts must be positive"));
        }
        Ok(())
    }
}

/// One CSV file: header plus rows, already formatted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(name: &str, header: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

macro_rules! row {
    ($($x:expr),* $(,)?) => { vec![$(($x).to_string()),*] };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    /// Failing a binding verdict fails the run; others are recorded only.
    pub binding: bool,
    pub heavy_tail: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    /// Only heavy-tailed binding verdicts failed.
    SoftFail,
    HardFail,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::SoftFail => 2,
            Status::HardFail => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultManifest {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub versions: BTreeMap<String, String>,
    pub outputs: Value,
    pub empirical_constants: BTreeMap<String, f64>,
    pub verdicts: Vec<Verdict>,
    pub files: Vec<String>,
    pub wall_clock_secs: f64,
}

impl ResultManifest {
    pub fn status(&self) -> Status {
        let failed: Vec<&Verdict> = self
            .verdicts
            .iter()
            .filter(|v| v.binding && !v.pass)
            .collect();
        if failed.is_empty() {
            Status::Pass
        } else if failed.iter().all(|v| v.heavy_tail) {
            Status::SoftFail
        } else {
            Status::HardFail
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Serde(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutput {
    pub manifest: ResultManifest,
    pub tables: Vec<Table>,
}

#[derive(Default)]
struct Collector {
    outputs: serde_json::Map<String, Value>,
    constants: BTreeMap<String, f64>,
    verdicts: Vec<Verdict>,
    tables: Vec<Table>,
}

impl Collector {
    fn output<T: Serialize>(&mut self, key: &str, v: &T) {
        self.outputs.insert(
            key.to_string(),
            serde_json::to_value(v).expect("outputs serialize"),
        );
    }

    fn constant(&mut self, key: &str, v: f64) {
        // JSON has no infinities; non-finite constants stay in the outputs only
        if v.is_finite() {
            self.constants.insert(key.to_string(), v);
        }
    }

    fn verdict(&mut self, name: &str, pass: bool, binding: bool, heavy_tail: bool, detail: String) {
        self.verdicts.push(Verdict {
            name: name.to_string(),
            pass,
            binding,
            heavy_tail,
            detail,
        });
    }

    fn family(&mut self, name: &str, members: &[InequalityVerdict]) {
        let failed: Vec<&InequalityVerdict> = members.iter().filter(|v| !v.pass).collect();
        let heavy = failed.iter().all(|v| v.lhs.heavy_tail || v.base.heavy_tail);
        let worst = members
            .iter()
            .map(|v| v.margin / v.margin_stderr.max(f64::MIN_POSITIVE))
            .fold(f64::INFINITY, f64::min);
        let detail = format!(
            "{} of {} failed; smallest margin {:.2} sigma",
            failed.len(),
            members.len(),
            worst
        );
        self.verdict(
            name,
            failed.is_empty(),
            true,
            !failed.is_empty() && heavy,
            detail,
        );
        let c = members
            .iter()
            .map(|v| v.empirical_constant)
            .fold(0.0, f64::max);
        self.constant(&format!("{name} constant"), c);
    }
}

fn gram_method(cfg: &ExperimentConfig, psi: &Weight) -> GramMethod {
    let weightless = cfg.t == 0.0 || matches!(psi.expr, WeightExpr::Zero);
    match (cfg.gram, weightless) {
        (GramChoice::Exact, _) | (GramChoice::Auto, true) => GramMethod::Exact,
        _ => GramMethod::MonteCarlo {
            budget: cfg.budgets.gram,
            seed: cfg.seed,
        },
    }
}

/// `n + 1 - t nu~` when the weight's boundary data at `zeta` is known and `t nu~ < 2`.
fn expected_slope(cfg: &ExperimentConfig, psi: &Weight, zeta: &CPoint) -> Option<f64> {
    let on_axis = (zeta.coords[0] - C64::new(1.0, 0.0)).norm() < 1e-14;
    if !(on_axis || psi.is_unitary_invariant()) {
        return None;
    }
    let nu = psi.oracle()?.nu_tilde;
    (cfg.t * nu < 2.0).then(|| (cfg.n + 1) as f64 - cfg.t * nu)
}

fn kernel_asymptotics(
    cfg: &ExperimentConfig,
    _root: &SeededStream,
    out: &mut Collector,
) -> Result<()> {
    let psi = &cfg.weights()?[0];
    let zeta = cfg.zeta_point()?;
    let method = gram_method(cfg, psi);
    let cache = (cfg.cache && matches!(method, GramMethod::MonteCarlo { .. }))
        .then(|| GramCache::new(cfg.out_dir.join("gram-cache"), cfg.rebuild_cache));
    let ray = kernel_ray(
        psi,
        cfg.t,
        &zeta,
        &cfg.r_grid.radii(),
        &DegreeRule::standard(cfg.n),
        &method,
        cache.as_ref(),
    )?;
    let mut table = Table::new(
        "kernel_asymptotics",
        &["r", "K_d", "degree", "stderr-proxy", "logK", "log1/r"],
    );
    for p in &ray.points {
        table.push(row![
            p.r,
            p.eval.value,
            p.eval.degree,
            p.increment,
            p.eval.value.ln(),
            -p.r.ln()
        ]);
    }
    out.tables.push(table);
    out.output("ray", &ray);
    match exponent_fit(&ray.points) {
        Ok(fit) => {
            out.constant("slope", fit.fit.slope);
            out.constant("slope raw", fit.raw.slope);
            if let Some(expected) = expected_slope(cfg, psi, &zeta) {
                let err = (fit.fit.slope - expected).abs();
                out.verdict(
                    "boundary exponent",
                    err <= cfg.slope_tol,
                    true,
                    false,
                    format!(
                        "slope {:.4}, expected {expected:.4}, tolerance {}",
                        fit.fit.slope, cfg.slope_tol
                    ),
                );
            }
            out.output("fit", &fit);
        }
        Err(e) => out.verdict("boundary exponent", false, true, false, e.to_string()),
    }
    Ok(())
}

fn bound_ratio(cfg: &ExperimentConfig, root: &SeededStream, out: &mut Collector) -> Result<()> {
    let zeta = cfg.zeta_point()?;
    let mut table = Table::new(
        "bound_ratio",
        &[
            "weight",
            "r",
            "log_ratio",
            "K_d",
            "degree",
            "converged",
            "mean_psi",
            "mean_psi_stderr",
        ],
    );
    let mut profiles = Vec::new();
    for (i, psi) in cfg.weights()?.iter().enumerate() {
        let id = psi.id();
        if let Some(o) = psi.oracle() {
            if cfg.t * o.nu_tilde >= 2.0 {
                out.verdict(
                    &format!("bound ratio {id}"),
                    true,
                    false,
                    false,
                    "t beyond the admissible range; skipped".into(),
                );
                continue;
            }
        }
        let method = gram_method(cfg, psi);
        let prof = bound_ratio_profile(
            psi,
            cfg.t,
            &zeta,
            &cfg.r_grid.radii(),
            &DegreeRule::standard(cfg.n),
            &method,
            cfg.budgets.mean,
            &root.child(i as u64),
        )?;
        for p in &prof.points {
            table.push(row![
                id,
                p.r,
                p.log_ratio,
                p.kernel,
                p.degree,
                p.converged,
                p.mean_psi.value,
                p.mean_psi.stderr
            ]);
        }
        out.verdict(
            &format!("bound ratio {id}"),
            prof.spread <= cfg.spread_tol,
            true,
            prof.heavy_tail,
            format!("spread {:.4} (tolerance {})", prof.spread, cfg.spread_tol),
        );
        out.constant(&format!("bound ratio spread {id}"), prof.spread);
        profiles.push(json!({ "weight": id, "profile": prof }));
    }
    out.tables.push(table);
    out.output("profiles", &profiles);
    Ok(())
}

fn jn(cfg: &ExperimentConfig, root: &SeededStream, out: &mut Collector) -> Result<()> {
    let psi = &cfg.weights()?[0];
    let family = sample_family(
        psi,
        psi.domain_radius,
        cfg.family_size,
        FamilyMode::AllUnitary,
        &root.child(1),
    )?;
    let grid = cfg.eps_grid();
    let curve = jn_curve(
        psi,
        &family,
        &grid,
        cfg.budgets.family,
        cfg.jn_cap,
        &root.child(2),
    )?;
    let mut table = Table::new("jn_curve", &["eps", "M", "stderr", "flag"]);
    for (j, e) in grid.iter().enumerate() {
        table.push(row![
            e,
            curve.m[j].value,
            curve.m[j].stderr,
            u8::from(curve.flagged[j])
        ]);
    }
    out.tables.push(table);
    if let Some((lo, hi)) = curve.bracket {
        out.constant("jn bracket lo", lo);
        out.constant("jn bracket hi", hi);
    }
    if let WeightExpr::NormalLog { c } = psi.expr {
        let threshold = 2.0 / c;
        let step = cfg.eps_step;
        let (ok, detail) = match curve.bracket {
            Some((lo, hi)) => (
                lo - step - 1e-12 <= threshold && threshold <= hi + step + 1e-12,
                format!("bracket ({lo}, {hi}), threshold {threshold}"),
            ),
            None => (false, format!("no divergence up to eps = {}", cfg.eps_max)),
        };
        out.verdict("jn threshold", ok, true, false, detail);
        let worst = grid
            .iter()
            .zip(&curve.m)
            .filter(|(e, _)| **e <= 0.8 * threshold + 1e-12)
            .map(|(e, m)| {
                let x = e * c;
                m.value / ((x / 2.0).exp() * 2.0 / (2.0 - x))
            })
            .fold(0.0, f64::max);
        out.verdict(
            "jn radial bound",
            worst <= 10.0,
            true,
            false,
            format!("largest M / radial model below 0.8 threshold: {worst:.4}"),
        );
    }
    out.output("curve", &curve);
    out.output("family", &family);
    Ok(())
}

fn bmo(cfg: &ExperimentConfig, root: &SeededStream, out: &mut Collector) -> Result<()> {
    let psi = &cfg.weights()?[0];
    let rep = bmo_norm_estimate(
        psi,
        psi.domain_radius / 2.0,
        cfg.family_size,
        cfg.alpha,
        cfg.budgets.family,
        &root.child(1),
    )?;
    let mut table = Table::new(
        "bmo",
        &[
            "alpha",
            "norm",
            "stderr",
            "argmax",
            "psi_mean",
            "empirical_constant",
        ],
    );
    table.push(row![
        rep.alpha,
        rep.norm.value,
        rep.norm.stderr,
        rep.argmax,
        rep.psi_mean.value,
        rep.empirical_constant
    ]);
    out.constant("bmo norm", rep.norm.value);
    out.constant("bmo constant", rep.empirical_constant);
    if cfg.t != 0.0 {
        let family = sample_family(
            psi,
            psi.domain_radius,
            cfg.family_size,
            FamilyMode::AllUnitary,
            &root.child(2),
        )?;
        let rj = reverse_jensen_check(psi, cfg.t, &family, cfg.budgets.family, &root.child(3))?;
        out.constant("reverse Jensen constant", rj.empirical_constant);
        out.verdict(
            "reverse Jensen",
            rj.empirical_constant.is_finite(),
            false,
            rj.heavy_tail,
            format!("largest ratio {:.4}", rj.empirical_constant),
        );
        out.output("reverse_jensen", &rj);
    }
    out.tables.push(table);
    out.output("bmo", &rep);
    Ok(())
}

fn ap(cfg: &ExperimentConfig, root: &SeededStream, out: &mut Collector) -> Result<()> {
    let psi = &cfg.weights()?[0];
    let lambda = lambda_recipe(psi, 3.0, 2.0, cfg.budgets.family, &root.child(1))?;
    let omega = Field::new(|z: &[C64]| (psi.eval_normalized(z) / lambda).exp());
    let family = sample_family(
        psi,
        psi.domain_radius,
        cfg.family_size,
        FamilyMode::AllUnitary,
        &root.child(2),
    )?;
    let rep = ap_constant(
        &omega,
        cfg.p,
        &family.regions,
        cfg.budgets.family,
        &root.child(3),
    )?;
    let mut table = Table::new("ap", &["member", "product", "stderr", "heavy_tail"]);
    for (i, e) in rep.products.iter().enumerate() {
        table.push(row![i, e.value, e.stderr, u8::from(e.heavy_tail)]);
    }
    out.tables.push(table);
    out.constant("lambda", lambda);
    out.constant("A_p", rep.a_p);
    let (variation, doubling) = ap_pair(&omega, cfg, psi, rep.a_p, root.child(4))?;
    out.family("A_p variation", &variation);
    out.family("A_p doubling", &doubling);
    out.output("ap", &rep);
    let holder = reverse_holder_family(
        psi,
        lambda,
        &family.regions,
        cfg.budgets.family,
        &root.child(5),
        out,
    )?;
    out.output("reverse_holder", &holder);
    Ok(())
}

/// Reverse Hoelder and exponential doubling at the recipe's `lambda` on the members small
/// enough for the check (`r <= R/4`); constants are recorded, verdicts are informational.
fn reverse_holder_family(
    psi: &Weight,
    lambda: f64,
    regions: &[Region],
    budget: u64,
    st: &SeededStream,
    out: &mut Collector,
) -> Result<Vec<ReverseHolderReport>> {
    let mut reports = Vec::new();
    for (i, reg) in regions.iter().enumerate() {
        if matches!(reg, Region::NonisotropicBall { r, .. } if *r <= psi.domain_radius / 4.0) {
            reports.push(reverse_holder_check(
                psi,
                Some(lambda),
                reg,
                REVERSE_HOLDER_RECORD_CAP,
                budget,
                &st.child(i as u64),
            )?);
        }
    }
    let holder: Vec<&InequalityVerdict> = reports.iter().map(|r| &r.holder).collect();
    let doubling: Vec<&InequalityVerdict> = reports.iter().map(|r| &r.doubling).collect();
    for (name, members) in [
        ("reverse Holder", holder),
        ("exponential doubling", doubling),
    ] {
        let c = members
            .iter()
            .map(|v| v.empirical_constant)
            .fold(0.0, f64::max);
        out.constant(&format!("{name} constant"), c);
        out.verdict(
            name,
            members.iter().all(|v| v.pass),
            false,
            false,
            format!("{} members, largest constant {c:.4} against record cap {REVERSE_HOLDER_RECORD_CAP}", members.len()),
        );
    }
    Ok(reports)
}

fn ap_pair(
    omega: &Field,
    cfg: &ExperimentConfig,
    psi: &Weight,
    a_p: f64,
    st: SeededStream,
) -> Result<(Vec<InequalityVerdict>, Vec<InequalityVerdict>)> {
    let mut variation = Vec::new();
    let mut doubling = Vec::new();
    for k in 0..cfg.configurations as u64 {
        let conf = random_configuration(cfg.n, psi.domain_radius, k, &st.child(0));
        let sk = st.child(1 + k);
        let cells = random_cells(&conf.ball, 4, &sk.child(0))?;
        variation.push(ap_variation_check(
            omega,
            cfg.p,
            a_p,
            &conf.ball,
            &cells,
            cfg.budgets.family,
            &sk.child(1),
        )?);
        doubling.push(ap_doubling_check(
            omega,
            cfg.p,
            a_p,
            &conf.ball,
            cfg.budgets.family,
            &sk.child(2),
        )?);
    }
    Ok((variation, doubling))
}

fn bernstein(cfg: &ExperimentConfig, root: &SeededStream, out: &mut Collector) -> Result<()> {
    let psi = &cfg.weights()?[0];
    let mut table = Table::new("bernstein", &["configuration", "lhs", "base", "ratio"]);
    let mut members = Vec::new();
    for k in 0..cfg.configurations as u64 {
        let conf = random_configuration(cfg.n, psi.domain_radius / 2.0, k, &root.child(0));
        let sk = root.child(1 + k);
        let cells = random_cells(&conf.ball, 4, &sk.child(0))?;
        let v = bernstein_ratio(
            psi,
            &conf.ball,
            &cells,
            cfg.alpha,
            cfg.budgets.family,
            &sk.child(1),
        )?;
        table.push(row![k, v.lhs.value, v.base.value, v.empirical_constant]);
        members.push(v);
    }
    let c = members
        .iter()
        .map(|v| v.empirical_constant)
        .fold(0.0, f64::max);
    out.constant("Bernstein constant", c);
    out.verdict(
        "Bernstein",
        members.iter().all(|v| v.pass),
        false,
        false,
        format!(
            "largest ratio {c:.4} against record cap {}",
            crate::oscillation::BERNSTEIN_RECORD_CAP
        ),
    );
    out.tables.push(table);
    out.output("bernstein", &members);
    Ok(())
}

/// The unconditional inequalities: mean and oscillation comparison, subharmonic doubling,
/// and the A_p variation and doubling bounds.
fn doubling(cfg: &ExperimentConfig, root: &SeededStream, out: &mut Collector) -> Result<()> {
    let mut table = Table::new(
        "inequalities",
        &[
            "weight",
            "configuration",
            "check",
            "lhs",
            "rhs",
            "margin",
            "margin_stderr",
            "pass",
        ],
    );
    for (i, psi) in cfg.weights()?.iter().enumerate() {
        let id = psi.id();
        let st = root.child(i as u64);
        let field = Field::weight(psi);
        let normalized = Field::normalized(psi);
        let omega = Field::new(|z: &[C64]| psi.eval_normalized(z).exp());
        let mut by_check: BTreeMap<String, Vec<InequalityVerdict>> = BTreeMap::new();
        let mut retests = 0u64;
        for k in 0..cfg.configurations as u64 {
            let conf = random_configuration(cfg.n, psi.domain_radius, k, &st.child(0));
            let sk = st.child(1 + k);
            let b = cfg.budgets.family;
            let mut vs: Vec<InequalityVerdict> =
                mean_comparison_check(&field, &conf.v, &conf.w, b, &sk.child(0))?.to_vec();
            if vs.iter().any(|v| !v.pass) {
                let again = mean_comparison_check(
                    &field,
                    &conf.v,
                    &conf.w,
                    b * CONFIRM_BUDGET_FACTOR,
                    &sk.child(0).child(CONFIRM_STREAM),
                )?;
                for (v, a) in vs.iter_mut().zip(again) {
                    if !v.pass {
                        *v = a;
                        retests += 1;
                    }
                }
            }
            let Region::EuclideanBall { center, radius } = &conf.ball else {
                unreachable!("configuration balls are Euclidean")
            };
            let cells = random_cells(&conf.ball, 4, &sk.child(2))?;
            let checks: [(
                u64,
                &dyn Fn(u64, &SeededStream) -> Result<InequalityVerdict>,
            ); 3] = [
                (1, &|b, s| {
                    subharmonic_doubling_check(&normalized, center, radius / 2.0, b, s)
                }),
                (3, &|b, s| {
                    ap_variation_check(&omega, cfg.p, 0.0, &conf.ball, &cells, b, s)
                }),
                (4, &|b, s| {
                    ap_doubling_check(&omega, cfg.p, 0.0, &conf.ball, b, s)
                }),
            ];
            for (id, check) in checks {
                let (v, again) = confirmed(check, b, &sk.child(id))?;
                retests += u64::from(again);
                vs.push(v);
            }
            for v in vs {
                table.push(row![
                    id,
                    k,
                    v.name,
                    v.lhs.value,
                    v.constant * v.base.value,
                    v.margin,
                    v.margin_stderr,
                    u8::from(v.pass)
                ]);
                by_check.entry(v.name.clone()).or_default().push(v);
            }
        }
        for (name, members) in &by_check {
            out.family(&format!("{name} {id}"), members);
        }
        out.constant(&format!("retested instances {id}"), retests as f64);
    }
    out.tables.push(table);
    Ok(())
}

fn riesz(cfg: &ExperimentConfig, root: &SeededStream, out: &mut Collector) -> Result<()> {
    let spec = DiscSpec::new(cfg.disc_radius, cfg.grid, cfg.grid)?;
    let mut table = Table::new(
        "riesz",
        &[
            "weight",
            "reconstruction",
            "majorant_violation",
            "harmonicity",
            "hormander",
        ],
    );
    let mut summaries = Vec::new();
    for (i, psi) in cfg.weights()?.iter().enumerate() {
        let id = psi.id();
        let d = match riesz_decompose(psi, &spec) {
            Ok(d) => d,
            Err(e) => {
                out.verdict(
                    &format!("riesz {id}"),
                    true,
                    false,
                    false,
                    format!("not applicable: {e}"),
                );
                continue;
            }
        };
        let c = d.checks();
        let field = Field::normalized(psi);
        let horm =
            hormander_ratio(&field, cfg.alpha, cfg.budgets.family, &root.child(i as u64)).ok();
        table.push(row![
            id,
            c.reconstruction,
            c.majorant_violation,
            c.harmonicity,
            horm.as_ref()
                .map_or("NA".to_string(), |h| h.value.to_string())
        ]);
        out.verdict(
            &format!("riesz {id}"),
            c.pass,
            true,
            false,
            format!(
                "reconstruction {:.2e}, majorant {:.2e}, harmonicity {:.2e}",
                c.reconstruction, c.majorant_violation, c.harmonicity
            ),
        );
        if let Some(h) = &horm {
            out.constant(&format!("hormander {id}"), h.value);
        }
        for (name, f) in [("psi", &d.psi), ("u", &d.u), ("v", &d.v), ("h", &d.h)] {
            out.tables.push(Table {
                name: format!("riesz_{i}_{name}"),
                header: Vec::new(),
                rows: Vec::new(),
            });
            let csv = f.to_csv();
            let last = out.tables.last_mut().unwrap();
            let mut lines = csv.lines();
            last.header = lines
                .next()
                .unwrap_or_default()
                .split(',')
                .map(String::from)
                .collect();
            last.rows = lines
                .map(|l| l.split(',').map(String::from).collect())
                .collect();
        }
        summaries
            .push(json!({ "weight": id, "checks": c, "measure": d.measure, "hormander": horm }));
    }
    out.tables.insert(0, table);
    out.output("riesz", &summaries);
    Ok(())
}

fn lelong(cfg: &ExperimentConfig, root: &SeededStream, out: &mut Collector) -> Result<()> {
    let psi = &cfg.weights()?[0];
    let zeta = cfg.zeta_point()?;
    let fit = directional_lelong_estimate(psi, &zeta, &cfg.r_grid.radii())?;
    let mut table = Table::new("lelong", &["r", "torus_sup"]);
    for (r, s) in &fit.points {
        table.push(row![r, s]);
    }
    out.tables.push(table);
    out.constant("nu tilde", fit.slope);
    let on_axis = (zeta.coords[0] - C64::new(1.0, 0.0)).norm() < 1e-14;
    if let (Some(o), true) = (psi.oracle(), on_axis || psi.is_unitary_invariant()) {
        let tol = 0.02 * o.nu_tilde.max(1.0);
        out.verdict(
            "directional Lelong",
            (fit.slope - o.nu_tilde).abs() <= tol,
            true,
            false,
            format!("estimate {:.4}, oracle {}", fit.slope, o.nu_tilde),
        );
        let mut thin = Table::new("thin_set", &["pole", "r", "sup"]);
        let grid = geometric_grid(1e-6, 1e-3, 8);
        let mut fits = Vec::new();
        for (j, (p, nu)) in o.interior.iter().enumerate() {
            let f = thin_set_lelong(
                psi,
                p,
                &grid,
                Shrink::InverseLog,
                cfg.budgets.family,
                &root.child(j as u64),
            )?;
            for (r, s) in &f.effective.points {
                thin.push(row![j, r, s]);
            }
            out.verdict(
                &format!("thin-set Lelong pole {j}"),
                (f.effective.slope - nu).abs() <= 0.05 * nu,
                true,
                false,
                format!("estimate {:.4}, oracle {nu}", f.effective.slope),
            );
            fits.push(f);
        }
        out.tables.push(thin);
        out.output("thin_set", &fits);
    }
    out.output("directional", &fit);
    Ok(())
}

fn geometry(cfg: &ExperimentConfig, root: &SeededStream, out: &mut Collector) -> Result<()> {
    let mut table = Table::new(
        "geometry",
        &["check", "n", "parameter", "count", "value", "violations"],
    );
    let mut rudin_worst: f64 = 0.0;
    for n in 1..=4 {
        let w = rudin_sweep(n, cfg.pairs, &root.child(n as u64))?;
        rudin_worst = rudin_worst.max(w);
        table.push(row!["rudin", n, "", cfg.pairs, w, 0]);
    }
    out.verdict(
        "Rudin identity",
        rudin_worst < IDENTITY_TOL,
        true,
        false,
        format!("largest residual {rudin_worst:.3e}"),
    );
    let q = quasi_triangle_sweep(cfg.n.max(2), cfg.triples, &root.child(10))?;
    table.push(row![
        "quasi-triangle",
        q.n,
        "",
        q.triples,
        q.max_ratio,
        q.violations
    ]);
    out.verdict(
        "quasi-triangle",
        q.violations == 0 && q.witness_ratio == Some(2.0),
        true,
        false,
        format!(
            "largest ratio {:.6}, witness {:?}",
            q.max_ratio, q.witness_ratio
        ),
    );
    out.constant("quasi-triangle ratio", q.max_ratio);
    let mut inclusions = Vec::new();
    for (i, r) in [0.1, 0.5, 0.9].into_iter().enumerate() {
        let v =
            verify_ball_inclusions(r, cfg.n, cfg.inclusion_samples, &root.child(20 + i as u64))?;
        table.push(row![
            "inclusions",
            cfg.n,
            r,
            v.samples,
            0,
            v.inner_violations + v.outer_violations
        ]);
        out.verdict(
            &format!("ball inclusions r={r}"),
            v.pass,
            true,
            false,
            format!(
                "{} inner, {} outer violations",
                v.inner_violations, v.outer_violations
            ),
        );
        inclusions.push(v);
    }
    out.tables.push(table);
    out.output("quasi_triangle", &q);
    out.output("inclusions", &inclusions);
    Ok(())
}

/// Runs one experiment in the current rayon pool. Tables are deterministic given the config.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let root = SeededStream::new(cfg.seed, cfg.kind.stream_id());
    let mut out = Collector::default();
    match cfg.kind {
        ExperimentKind::KernelAsymptotics => kernel_asymptotics(cfg, &root, &mut out)?,
        ExperimentKind::BoundRatio => bound_ratio(cfg, &root, &mut out)?,
        ExperimentKind::JnCurve => jn(cfg, &root, &mut out)?,
        ExperimentKind::Bmo => bmo(cfg, &root, &mut out)?,
        ExperimentKind::Ap => ap(cfg, &root, &mut out)?,
        ExperimentKind::Bernstein => bernstein(cfg, &root, &mut out)?,
        ExperimentKind::Doubling => doubling(cfg, &root, &mut out)?,
        ExperimentKind::Riesz => riesz(cfg, &root, &mut out)?,
        ExperimentKind::Lelong => lelong(cfg, &root, &mut out)?,
        ExperimentKind::GeometryVerify => geometry(cfg, &root, &mut out)?,
    }
    let mut versions = BTreeMap::new();
    versions.insert(
        "lelong-core".to_string(),
        env!("CARGO_PKG_VERSION").to_string(),
    );
    versions.insert("schema".to_string(), SCHEMA_VERSION.to_string());
    let manifest = ResultManifest {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        versions,
        outputs: Value::Object(out.outputs),
        empirical_constants: out.constants,
        verdicts: out.verdicts,
        files: out
            .tables
            .iter()
            .map(|t| format!("{}.csv", t.name))
            .collect(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        manifest,
        tables: out.tables,
    })
}

/// [`run`] inside a dedicated pool of `threads` workers.
pub fn run_with_threads(cfg: &ExperimentConfig, threads: usize) -> Result<RunOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| cfg_err("threads", e))?;
    pool.install(|| run(cfg))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes the CSV tables or the manifest (`manifest.json`) under `dir`; returns the paths.
pub fn emit(output: &RunOutput, dir: &Path, format: Format) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.display().to_string(),
        source,
    })?;
    match format {
        Format::Csv => output
            .tables
            .iter()
            .map(|t| {
                let p = dir.join(format!("{}.csv", t.name));
                write(&p, &t.to_csv()).map(|_| p)
            })
            .collect(),
        Format::Json => {
            let p = dir.join("manifest.json");
            write(&p, &output.manifest.to_json())?;
            Ok(vec![p])
        }
    }
}
