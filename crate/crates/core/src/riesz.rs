//! Potential theory on a disc in C: Green function, Riesz decomposition of catalog weights,
//! and the mean-value and Hormander checks.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{CPoint, Region};
use crate::oscillation::Field;
use crate::quadrature::{integrate_with, Estimate, Sampler};
use crate::rng::SeededStream;
use crate::weights::{Weight, WeightExpr};

pub const MIN_GRID: usize = 64;
pub const RECONSTRUCTION_TOL: f64 = 1e-10;
pub const MAJORANT_TOL: f64 = 1e-6;
pub const HARMONICITY_TOL: f64 = 1e-3;

/// Disc of radius `radius` with a polar grid. Field nodes sit at radii `radius * i / n_r` and
/// angles `2 pi (j + 1/4) / n_theta`; density quadrature nodes at the half-integer radii and
/// angles, so the two never coincide.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscSpec {
    pub radius: f64,
    pub n_r: usize,
    pub n_theta: usize,
}

impl DiscSpec {
    pub fn new(radius: f64, n_r: usize, n_theta: usize) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(invalid("radius", "must be positive"));
        }
        if n_r < MIN_GRID || n_theta < MIN_GRID {
            return Err(invalid(
                "grid",
                format!("resolutions must be at least {MIN_GRID}"),
            ));
        }
        Ok(DiscSpec {
            radius,
            n_r,
            n_theta,
        })
    }

    /// `R' = 4R/3`.
    pub fn for_inner_radius(r: f64, n_r: usize, n_theta: usize) -> Result<Self> {
        Self::new(4.0 * r / 3.0, n_r, n_theta)
    }

    pub fn node_radius(&self, i: usize) -> f64 {
        self.radius * i as f64 / self.n_r as f64
    }

    pub fn node_angle(&self, j: usize) -> f64 {
        TAU * (j as f64 + 0.25) / self.n_theta as f64
    }

    pub fn node(&self, i: usize, j: usize) -> C64 {
        C64::from_polar(self.node_radius(i), self.node_angle(j))
    }
}

pub fn green_function(z: C64, w: C64, radius: f64) -> Result<f64> {
    for p in [z, w] {
        if p.norm() >= radius {
            return Err(Error::OutsideBall {
                norm: p.norm(),
                radius,
            });
        }
    }
    if z == w {
        return Ok(f64::NEG_INFINITY);
    }
    Ok((z - w).norm().ln() + (radius / (radius * radius - z * w.conj()).norm()).ln())
}

/// `Delta psi` as point masses plus a constant density on the disc.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplacianMeasure {
    /// `(location, mass)`, mass `2 pi c` for `c log|z - a|`.
    pub atoms: Vec<(C64, f64)>,
    pub density: f64,
}

impl LaplacianMeasure {
    pub fn total_mass(&self, radius: f64) -> f64 {
        self.atoms.iter().map(|(_, m)| m).sum::<f64>() + self.density * PI * radius * radius
    }
}

fn collect_measure(
    expr: &WeightExpr,
    scale: f64,
    radius: f64,
    out: &mut LaplacianMeasure,
) -> Result<()> {
    let one = C64::new(1.0, 0.0);
    let atom = |a: C64, c: f64, out: &mut LaplacianMeasure| {
        // poles outside the disc leave psi harmonic on it
        if a.norm() < radius {
            out.atoms.push((a, TAU * c * scale));
        }
    };
    match expr {
        WeightExpr::Zero | WeightExpr::Constant { .. } => {}
        WeightExpr::Smooth { a } => out.density += 4.0 * a * scale,
        WeightExpr::NormalLog { c } => atom(one, *c, out),
        WeightExpr::InteriorLog { a, c } => atom(a[0], *c, out),
        WeightExpr::ScaledSum(terms) => {
            for (s, e) in terms {
                collect_measure(e, scale * s, radius, out)?;
            }
        }
        WeightExpr::TangentialLog { .. } => {
            return Err(invalid("psi", "tangential weights need n >= 2"))
        }
        WeightExpr::Max(_) => {
            return Err(invalid(
                "psi",
                "the Laplacian of a max combination is not available in closed form",
            ))
        }
    }
    Ok(())
}

pub fn laplacian_measure(psi: &Weight, radius: f64) -> Result<LaplacianMeasure> {
    if psi.n != 1 {
        return Err(Error::Dimension {
            expected: 1,
            got: psi.n,
        });
    }
    if psi.transport.is_some() {
        return Err(invalid("psi", "transported weights are not supported"));
    }
    let mut m = LaplacianMeasure {
        atoms: Vec::new(),
        density: 0.0,
    };
    collect_measure(&psi.expr, 1.0, radius, &mut m)?;
    if !m.total_mass(radius).is_finite() {
        return Err(invalid("psi", "Laplacian mass is not finite"));
    }
    Ok(m)
}

/// Values on the polar grid of `spec`, indexed `[i * n_theta + j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    pub spec: DiscSpec,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn from_fn<F: Fn(C64) -> f64 + Sync>(spec: &DiscSpec, f: F) -> Self {
        let values = (0..spec.n_r)
            .into_par_iter()
            .flat_map_iter(|i| (0..spec.n_theta).map(move |j| (i, j)).collect::<Vec<_>>())
            .map(|(i, j)| f(spec.node(i, j)))
            .collect();
        GridField {
            spec: spec.clone(),
            values,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.spec.n_theta + j]
    }

    /// Bilinear interpolation in `(r, theta)`; `None` beyond the outermost node radius.
    pub fn interpolate(&self, z: C64) -> Option<f64> {
        let s = &self.spec;
        let x = z.norm() / s.radius * s.n_r as f64;
        if x > (s.n_r - 1) as f64 {
            return None;
        }
        let i0 = (x.floor() as usize).min(s.n_r - 2);
        let fx = x - i0 as f64;
        let y = (z.arg() / TAU * s.n_theta as f64 - 0.25).rem_euclid(s.n_theta as f64);
        let j0 = (y.floor() as usize) % s.n_theta;
        let j1 = (j0 + 1) % s.n_theta;
        let fy = y - y.floor();
        let at = |i: usize, j: usize| self.get(i, j);
        Some(
            (1.0 - fx) * ((1.0 - fy) * at(i0, j0) + fy * at(i0, j1))
                + fx * ((1.0 - fy) * at(i0 + 1, j0) + fy * at(i0 + 1, j1)),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Matrix CSV: one row per radius, one column per angle.
    pub fn to_csv(&self) -> String {
        let s = &self.spec;
        let mut out = String::from("r");
        for j in 0..s.n_theta {
            write!(out, ",{}", s.node_angle(j)).unwrap();
        }
        out.push('\n');
        for i in 0..s.n_r {
            write!(out, "{}", s.node_radius(i)).unwrap();
            for j in 0..s.n_theta {
                write!(out, ",{}", self.get(i, j)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// `psi = u + v + h` on the disc: `u` the log potential of `Delta psi / 2 pi`, `v` its
/// boundary correction, `h` the harmonic majorant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RieszDecomposition {
    pub measure: LaplacianMeasure,
    pub psi: GridField,
    pub u: GridField,
    pub v: GridField,
    pub h: GridField,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RieszChecks {
    pub reconstruction: f64,
    /// Largest of `psi - h` and `h` over the grid; at most zero up to tolerance.
    pub majorant_violation: f64,
    pub harmonicity: f64,
    pub pass: bool,
}

/// `(1/2 pi) int log|z - zeta| d mu` and `(1/2 pi) int log(R/|R^2 - z conj(zeta)|) d mu` for the
/// constant-density part, midpoint rule on the half-integer polar nodes. The node set is
/// rotation invariant, so one evaluation per field radius suffices.
fn density_potentials(spec: &DiscSpec, density: f64) -> Vec<(f64, f64)> {
    let (nr, nt, big) = (spec.n_r, spec.n_theta, spec.radius);
    let dr = big / nr as f64;
    let dt = TAU / nt as f64;
    (0..nr)
        .into_par_iter()
        .map(|i| {
            let z = C64::from_polar(spec.node_radius(i), spec.node_angle(0));
            let (mut su, mut sv) = (0.0, 0.0);
            for k in 0..nr {
                let rho = (k as f64 + 0.5) * dr;
                let area = rho * dr * dt;
                let (mut ru, mut rv) = (0.0, 0.0);
                for l in 0..nt {
                    let zeta = C64::from_polar(rho, (l as f64 + 0.5) * dt);
                    ru += (z - zeta).norm().ln();
                    rv += (big / (big * big - z * zeta.conj()).norm()).ln();
                }
                su += ru * area;
                sv += rv * area;
            }
            (density * su / TAU, density * sv / TAU)
        })
        .collect()
}

pub fn riesz_decompose(psi: &Weight, spec: &DiscSpec) -> Result<RieszDecomposition> {
    if spec.radius >= psi.domain_radius {
        return Err(invalid(
            "radius",
            "the weight must be negative on a neighborhood of the closed disc",
        ));
    }
    let measure = laplacian_measure(psi, spec.radius)?;
    let big = spec.radius;
    let dens = if measure.density != 0.0 {
        density_potentials(spec, measure.density)
    } else {
        vec![(0.0, 0.0); spec.n_r]
    };
    let psi_f = GridField::from_fn(spec, |z| psi.eval_normalized(&[z]));
    let atom_u = |z: C64| -> f64 {
        measure
            .atoms
            .iter()
            .map(|(a, m)| m / TAU * (z - a).norm().ln())
            .sum()
    };
    let atom_v = |z: C64| -> f64 {
        measure
            .atoms
            .iter()
            .map(|(a, m)| m / TAU * (big / (big * big - z * a.conj()).norm()).ln())
            .sum()
    };
    let nt = spec.n_theta;
    let u = GridField {
        spec: spec.clone(),
        values: (0..spec.n_r * nt)
            .map(|k| atom_u(spec.node(k / nt, k % nt)) + dens[k / nt].0)
            .collect(),
    };
    let v = GridField {
        spec: spec.clone(),
        values: (0..spec.n_r * nt)
            .map(|k| atom_v(spec.node(k / nt, k % nt)) + dens[k / nt].1)
            .collect(),
    };
    let h = GridField {
        spec: spec.clone(),
        values: (0..spec.n_r * nt)
            .map(|k| psi_f.values[k] - u.values[k] - v.values[k])
            .collect(),
    };
    if let Some(k) = h.values.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            count: h.values.iter().filter(|x| !x.is_finite()).count() as u64,
            first: k as u64,
        });
    }
    Ok(RieszDecomposition {
        measure,
        psi: psi_f,
        u,
        v,
        h,
    })
}

impl RieszDecomposition {
    pub fn checks(&self) -> RieszChecks {
        let n = self.h.values.len();
        let reconstruction = (0..n)
            .map(|k| {
                (self.u.values[k] + self.v.values[k] + self.h.values[k] - self.psi.values[k]).abs()
            })
            .fold(0.0, f64::max);
        let majorant_violation = (0..n)
            .map(|k| (self.psi.values[k] - self.h.values[k]).max(self.h.values[k]))
            .fold(f64::NEG_INFINITY, f64::max);
        let harmonicity = harmonicity_residual(&self.h);
        RieszChecks {
            pass: reconstruction < RECONSTRUCTION_TOL
                && majorant_violation <= MAJORANT_TOL
                && harmonicity < HARMONICITY_TOL,
            reconstruction,
            majorant_violation,
            harmonicity,
        }
    }
}

/// Largest `|h(c) - mean of h on the circle |z - c| = R/4|` over 24 test centers with
/// `|c| <= R/2`, the circle sampled at 128 points.
pub fn harmonicity_residual(h: &GridField) -> f64 {
    let big = h.spec.radius;
    let rho = 0.25 * big;
    let mut centers = vec![C64::new(0.0, 0.0)];
    for ring in [0.25, 0.5] {
        for k in 0..12 {
            centers.push(C64::from_polar(ring * big, TAU * (k as f64 + 0.1) / 12.0));
        }
    }
    let m = 128;
    centers
        .iter()
        .map(|&c| {
            let center = h.interpolate(c).expect("test center inside the grid");
            let mean = (0..m)
                .map(|k| {
                    h.interpolate(c + C64::from_polar(rho, TAU * k as f64 / m as f64))
                        .expect("test circle inside the grid")
                })
                .sum::<f64>()
                / m as f64;
            (center - mean).abs()
        })
        .fold(0.0, f64::max)
}

/// `int_{|z|<3/4} |u|^alpha / |u(0)|^alpha`.
pub fn hormander_ratio(
    u: &Field,
    alpha: f64,
    budget: u64,
    stream: &SeededStream,
) -> Result<Estimate> {
    if !(alpha >= 1.0) {
        return Err(invalid("alpha", "must be at least 1"));
    }
    let u0 = u.eval(&[C64::new(0.0, 0.0)]);
    if !(u0.is_finite() && u0 < 0.0) {
        return Err(invalid(
            "u",
            format!("u(0) = {u0}; needs a finite negative value at the center (recenter the disc)"),
        ));
    }
    let disc = Region::EuclideanBall {
        center: CPoint::origin(1),
        radius: 0.75,
    };
    let sampler = Sampler::new(&disc);
    let mut e = integrate_with(
        &|z: &[C64]| u.eval(z).abs().powf(alpha),
        &sampler,
        budget,
        stream,
    )?;
    let scale = u0.abs().powf(alpha);
    e.value /= scale;
    e.stderr /= scale;
    Ok(e)
}
