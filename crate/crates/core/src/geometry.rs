//! Points, boundary frames and integration regions in C^n.
//!
//! Conventions: `<z, w> = sum z_j conj(w_j)`, `z = (z_1, z')`. A [`Frame`] is the affine map
//! `w -> origin + U w`. Boundary frames from [`frame_at`] send the `w_1` axis to the inward
//! normal, so `F_zeta(w_1, 0) = zeta (1 - w_1)`.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{inner, norm_sqr, CMat};
use crate::rng::{box_muller, SeededStream};

pub const IDENTITY_TOL: f64 = 1e-12;
pub const UNITARY_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CPoint {
    pub coords: Vec<C64>,
}

impl CPoint {
    pub fn new(coords: Vec<C64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(invalid("coords", "dimension must be at least 1"));
        }
        if coords
            .iter()
            .any(|c| !c.re.is_finite() || !c.im.is_finite())
        {
            return Err(invalid("coords", "all components must be finite"));
        }
        Ok(CPoint { coords })
    }

    pub fn origin(n: usize) -> Self {
        CPoint {
            coords: vec![C64::new(0.0, 0.0); n],
        }
    }

    /// `e_j` scaled by `s`.
    pub fn axis(n: usize, j: usize, s: f64) -> Self {
        let mut p = Self::origin(n);
        p.coords[j] = C64::new(s, 0.0);
        p
    }

    pub fn from_re(xs: &[f64]) -> Self {
        CPoint {
            coords: xs.iter().map(|&x| C64::new(x, 0.0)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm_sqr(&self) -> f64 {
        norm_sqr(&self.coords)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn tangential_norm_sqr(&self) -> f64 {
        norm_sqr(&self.coords[1..])
    }
}

fn check_dims(a: &[C64], b: &[C64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

/// Affine map `w -> origin + unitary * w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub origin: CPoint,
    pub unitary: CMat,
}

impl Frame {
    pub fn translation(origin: CPoint) -> Self {
        let n = origin.dim();
        Frame {
            origin,
            unitary: CMat::identity(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.origin.dim()
    }

    pub fn apply(&self, w: &[C64]) -> Vec<C64> {
        let mut out = self.unitary.mul_vec(w);
        for (o, a) in out.iter_mut().zip(&self.origin.coords) {
            *o += a;
        }
        out
    }

    /// Inverse map, `U^H (z - origin)`.
    pub fn pull_back(&self, z: &[C64]) -> Vec<C64> {
        let d: Vec<C64> = z
            .iter()
            .zip(&self.origin.coords)
            .map(|(a, b)| a - b)
            .collect();
        self.unitary.adjoint().mul_vec(&d)
    }
}

/// Boundary frame `F_zeta`. The first column of the unitary is `-zeta`; the remaining
/// columns complete it by pivoted Gram-Schmidt over the standard basis.
pub fn frame_at(zeta: &CPoint) -> Result<Frame> {
    let norm = zeta.norm();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::NotOnSphere { norm });
    }
    let first: Vec<C64> = zeta.coords.iter().map(|c| -c / norm).collect();
    let unitary = complete_unitary(first);
    Ok(Frame {
        origin: CPoint {
            coords: zeta.coords.iter().map(|c| c / norm).collect(),
        },
        unitary,
    })
}

/// Unitary whose first column is the unit vector `first`.
pub fn complete_unitary(first: Vec<C64>) -> CMat {
    let n = first.len();
    let mut cols: Vec<Vec<C64>> = vec![first];
    let mut used = vec![false; n];
    while cols.len() < n {
        let mut best: Option<(usize, Vec<C64>, f64)> = None;
        for j in 0..n {
            if used[j] {
                continue;
            }
            let mut v = vec![C64::new(0.0, 0.0); n];
            v[j] = C64::new(1.0, 0.0);
            for c in &cols {
                let p = inner(&v, c);
                for (vi, ci) in v.iter_mut().zip(c) {
                    *vi -= p * ci;
                }
            }
            let nv = norm_sqr(&v).sqrt();
            if best.as_ref().is_none_or(|b| nv > b.2 + 1e-12) {
                best = Some((j, v, nv));
            }
        }
        let (j, mut v, _) = best.expect("a candidate always remains");
        used[j] = true;
        // a second projection pass keeps orthogonality at machine precision
        for c in &cols {
            let p = inner(&v, c);
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= p * ci;
            }
        }
        let nv2 = norm_sqr(&v).sqrt();
        cols.push(v.into_iter().map(|c| c / nv2).collect());
    }
    CMat::from_columns(&cols)
}

/// Haar-distributed unitary from a seeded stream (QR of a complex Gaussian matrix,
/// phases fixed by the diagonal of R).
pub fn random_unitary(n: usize, stream: &SeededStream, k: u64) -> CMat {
    let mut cur = stream.cursor(k, 2 * n * n);
    let mut cols: Vec<Vec<C64>> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let (a, b) = box_muller(cur.uniform(), cur.uniform());
            v.push(C64::new(a, b));
        }
        for c in &cols {
            let p = inner(&v, c);
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= p * ci;
            }
        }
        let nv = norm_sqr(&v).sqrt();
        cols.push(v.into_iter().map(|c| c / nv).collect());
    }
    CMat::from_columns(&cols)
}

fn check_in_ball(z: &[C64]) -> Result<()> {
    let norm = norm_sqr(z).sqrt();
    if norm >= 1.0 {
        return Err(Error::OutsideBall { norm, radius: 1.0 });
    }
    Ok(())
}

/// Ball automorphism `T_w` with `T_w(w) = 0`; an involution.
pub fn mobius(w: &CPoint, z: &CPoint) -> Result<CPoint> {
    check_dims(&w.coords, &z.coords)?;
    check_in_ball(&w.coords)?;
    check_in_ball(&z.coords)?;
    Ok(CPoint {
        coords: mobius_raw(&w.coords, &z.coords),
    })
}

pub(crate) fn mobius_raw(w: &[C64], z: &[C64]) -> Vec<C64> {
    let w2 = norm_sqr(w);
    let zw = inner(z, w);
    let denom = C64::new(1.0, 0.0) - zw;
    if w2 == 0.0 {
        return z.iter().map(|c| -c).collect();
    }
    let s = (1.0 - w2).sqrt();
    w.iter()
        .zip(z)
        .map(|(wi, zi)| {
            let pz = wi * (zw / w2);
            let qz = zi - pz;
            (wi - pz - qz * s) / denom
        })
        .collect()
}

/// Absolute difference of the two sides of `1-|T_w z|^2 = (1-|z|^2)(1-|w|^2)/|1-<z,w>|^2`.
pub fn rudin_residual(w: &CPoint, z: &CPoint) -> Result<f64> {
    let t = mobius(w, z)?;
    let lhs = 1.0 - t.norm_sqr();
    let rhs = (1.0 - z.norm_sqr()) * (1.0 - w.norm_sqr())
        / (C64::new(1.0, 0.0) - inner(&z.coords, &w.coords)).norm_sqr();
    Ok((lhs - rhs).abs())
}

/// `max{|z_1 - w_1|, |z' - w'|^2}`.
pub fn quasi_distance(z: &CPoint, w: &CPoint) -> Result<f64> {
    check_dims(&z.coords, &w.coords)?;
    let d1 = (z.coords[0] - w.coords[0]).norm();
    let dt: f64 = z.coords[1..]
        .iter()
        .zip(&w.coords[1..])
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    Ok(d1.max(dt))
}

pub const QUASI_TRIANGLE_CONSTANT: f64 = 2.0;

/// Integration domains. Every region is `frame(shape)` for a local shape, which is
/// what the samplers draw from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Region {
    EuclideanBall {
        center: CPoint,
        radius: f64,
    },
    /// `F({|w_1| < r, |w'| < sqrt(r)})`.
    NonisotropicBall {
        frame: Frame,
        r: f64,
    },
    Polydisc {
        center: CPoint,
        radii: Vec<f64>,
    },
    /// `F({(r e^{i t_1}, sqrt(r) e^{i t_2}, ...)})`; measure is the angle measure.
    TorusShell {
        frame: Frame,
        r: f64,
    },
    /// Real segment `[lo, hi]` embedded in the real axis of C^1.
    Interval {
        lo: f64,
        hi: f64,
    },
}

impl Region {
    pub fn dim(&self) -> usize {
        match self {
            Region::EuclideanBall { center, .. } => center.dim(),
            Region::NonisotropicBall { frame, .. } | Region::TorusShell { frame, .. } => {
                frame.dim()
            }
            Region::Polydisc { center, .. } => center.dim(),
            Region::Interval { .. } => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Region::EuclideanBall { radius, .. } => *radius > 0.0 && radius.is_finite(),
            Region::NonisotropicBall { r, .. } | Region::TorusShell { r, .. } => {
                *r > 0.0 && r.is_finite()
            }
            Region::Polydisc { center, radii } => {
                radii.len() == center.dim() && radii.iter().all(|r| *r > 0.0 && r.is_finite())
            }
            Region::Interval { lo, hi } => hi > lo,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Region(format!("malformed region {self:?}")))
        }
    }

    /// The same region with its size parameter scaled by `s` about its own center/frame.
    pub fn scaled(&self, s: f64) -> Region {
        match self {
            Region::EuclideanBall { center, radius } => Region::EuclideanBall {
                center: center.clone(),
                radius: radius * s,
            },
            Region::NonisotropicBall { frame, r } => Region::NonisotropicBall {
                frame: frame.clone(),
                r: r * s,
            },
            Region::Polydisc { center, radii } => Region::Polydisc {
                center: center.clone(),
                radii: radii.iter().map(|r| r * s).collect(),
            },
            Region::TorusShell { frame, r } => Region::TorusShell {
                frame: frame.clone(),
                r: r * s,
            },
            Region::Interval { lo, hi } => {
                let mid = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo) * s;
                Region::Interval {
                    lo: mid - half,
                    hi: mid + half,
                }
            }
        }
    }

    /// Membership test, used for nested-region indicators and containment checks.
    pub fn contains(&self, z: &[C64]) -> bool {
        match self {
            Region::EuclideanBall { center, radius } => {
                let d: f64 = z
                    .iter()
                    .zip(&center.coords)
                    .map(|(a, b)| (a - b).norm_sqr())
                    .sum();
                d < radius * radius
            }
            Region::NonisotropicBall { frame, r } => {
                let w = frame.pull_back(z);
                w[0].norm() < *r && norm_sqr(&w[1..]) < *r
            }
            Region::Polydisc { center, radii } => z
                .iter()
                .zip(&center.coords)
                .zip(radii)
                .all(|((a, b), r)| (a - b).norm() < *r),
            Region::TorusShell { .. } => false,
            Region::Interval { lo, hi } => z[0].re >= *lo && z[0].re <= *hi && z[0].im == 0.0,
        }
    }

    /// Largest Euclidean distance from the region's anchor point to any point of it.
    pub fn euclidean_extent(&self) -> f64 {
        match self {
            Region::EuclideanBall { radius, .. } => *radius,
            Region::NonisotropicBall { r, frame } | Region::TorusShell { r, frame } => {
                if frame.dim() == 1 {
                    *r
                } else {
                    (r * r + r).sqrt()
                }
            }
            Region::Polydisc { radii, .. } => radii.iter().map(|r| r * r).sum::<f64>().sqrt(),
            Region::Interval { lo, hi } => 0.5 * (hi - lo),
        }
    }

    pub fn anchor(&self) -> CPoint {
        match self {
            Region::EuclideanBall { center, .. } | Region::Polydisc { center, .. } => {
                center.clone()
            }
            Region::NonisotropicBall { frame, .. } | Region::TorusShell { frame, .. } => {
                frame.origin.clone()
            }
            Region::Interval { lo, hi } => CPoint::from_re(&[0.5 * (lo + hi)]),
        }
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Closed-form Lebesgue volume (length for intervals, angle measure `(2 pi)^n` for tori).
pub fn region_volume(region: &Region) -> f64 {
    let n = region.dim();
    match region {
        Region::EuclideanBall { radius, .. } => {
            PI.powi(n as i32) * radius.powi(2 * n as i32) / factorial(n)
        }
        Region::NonisotropicBall { r, .. } => {
            PI.powi(n as i32) * r.powi(n as i32 + 1) / factorial(n - 1)
        }
        Region::Polydisc { radii, .. } => radii.iter().map(|r| PI * r * r).product(),
        Region::TorusShell { .. } => (2.0 * PI).powi(n as i32),
        Region::Interval { lo, hi } => hi - lo,
    }
}

/// Outcome of the sampled ball-inclusion check at one radius.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InclusionVerdict {
    pub r: f64,
    pub n: usize,
    pub samples: u64,
    /// Points of `D_r` found outside `B_1`.
    pub inner_violations: u64,
    /// Points with `|T(z)| < 1/sqrt(2)` found outside `D'_r`.
    pub outer_violations: u64,
    pub counterexample: Option<CPoint>,
    pub pass: bool,
}

/// Samples `D_r = {|z_1-(1-r)| < r/2, |z'| < sqrt(r/2)}` and checks it lies in `B_1`; samples
/// the Mobius preimage of `B(0, 1/sqrt 2)` under `T_{(1-r)e_1}` and checks it lies in
/// `D'_r = {|z_1 - 1| < 10r, |z'| < sqrt(20 r)}`.
pub fn verify_ball_inclusions(
    r: f64,
    n: usize,
    samples: u64,
    stream: &SeededStream,
) -> Result<InclusionVerdict> {
    if !(r > 0.0 && r < 1.0) {
        return Err(invalid("r", "must lie in (0, 1)"));
    }
    if n == 0 {
        return Err(invalid("n", "must be at least 1"));
    }
    let mut counterexample = None;
    let mut inner_violations = 0;
    let mut outer_violations = 0;

    let center = CPoint::axis(n, 0, 1.0 - r);
    let s_in = stream.child(1);
    let s_out = stream.child(2);
    let zeta_r = center.coords.clone();
    let ball = Region::EuclideanBall {
        center: CPoint::origin(n),
        radius: std::f64::consts::FRAC_1_SQRT_2,
    };
    let inner_shape = Region::NonisotropicBall {
        frame: Frame::translation(center.clone()),
        r: r / 2.0,
    };
    for k in 0..samples {
        let z = crate::quadrature::sample_region(&inner_shape, k, &s_in);
        if norm_sqr(&z.coords) >= 1.0 {
            inner_violations += 1;
            counterexample.get_or_insert(z);
        }
        let u = crate::quadrature::sample_region(&ball, k, &s_out);
        let z = mobius_raw(&zeta_r, &u.coords);
        let in_outer =
            (z[0] - C64::new(1.0, 0.0)).norm() < 10.0 * r && norm_sqr(&z[1..]) < 20.0 * r;
        if !in_outer {
            outer_violations += 1;
            counterexample.get_or_insert(CPoint { coords: z });
        }
    }
    Ok(InclusionVerdict {
        r,
        n,
        samples,
        inner_violations,
        outer_violations,
        pass: inner_violations == 0 && outer_violations == 0,
        counterexample,
    })
}

/// Largest Rudin identity residual over `pairs` random pairs in `B_1`.
pub fn rudin_sweep(n: usize, pairs: u64, stream: &SeededStream) -> Result<f64> {
    let ball = Region::EuclideanBall {
        center: CPoint::origin(n),
        radius: 1.0,
    };
    let (sw, sz) = (stream.child(1), stream.child(2));
    let mut worst: f64 = 0.0;
    for k in 0..pairs {
        let w = crate::quadrature::sample_region(&ball, k, &sw);
        let z = crate::quadrature::sample_region(&ball, k, &sz);
        worst = worst.max(rudin_residual(&w, &z)?);
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasiTriangleReport {
    pub n: usize,
    pub triples: u64,
    /// Largest `rho(z, w) / (rho(z, u) + rho(u, w))` seen.
    pub max_ratio: f64,
    pub violations: u64,
    /// The ratio at `z = 0, u = (0, 1/4, 0..), w = (0, 1/2, 0..)`, where the constant is attained.
    pub witness_ratio: Option<f64>,
}

pub fn quasi_triangle_sweep(
    n: usize,
    triples: u64,
    stream: &SeededStream,
) -> Result<QuasiTriangleReport> {
    let ball = Region::EuclideanBall {
        center: CPoint::origin(n),
        radius: 1.0,
    };
    let s: Vec<SeededStream> = (1..=3).map(|i| stream.child(i)).collect();
    let mut max_ratio: f64 = 0.0;
    let mut violations = 0;
    for k in 0..triples {
        let z = crate::quadrature::sample_region(&ball, k, &s[0]);
        let u = crate::quadrature::sample_region(&ball, k, &s[1]);
        let w = crate::quadrature::sample_region(&ball, k, &s[2]);
        let lhs = quasi_distance(&z, &w)?;
        let rhs = quasi_distance(&z, &u)? + quasi_distance(&u, &w)?;
        if lhs > QUASI_TRIANGLE_CONSTANT * rhs {
            violations += 1;
        }
        if rhs > 0.0 {
            max_ratio = max_ratio.max(lhs / rhs);
        }
    }
    let witness_ratio = if n >= 2 {
        let z = CPoint::origin(n);
        let u = CPoint::axis(n, 1, 0.25);
        let w = CPoint::axis(n, 1, 0.5);
        Some(quasi_distance(&z, &w)? / (quasi_distance(&z, &u)? + quasi_distance(&u, &w)?))
    } else {
        None
    };
    Ok(QuasiTriangleReport {
        n,
        triples,
        max_ratio,
        violations,
        witness_ratio,
    })
}
