//! Seeded Monte Carlo over regions.
//!
//! Determinism: samples are split into fixed chunks of [`CHUNK`] indices, chunks into a
//! fixed number of contiguous groups (a function of the problem size only), groups are
//! reduced in parallel and then combined by a fixed pairwise tree. Thread count never
//! changes a single bit of the result.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{complete_unitary, region_volume, CPoint, Region};
use crate::linalg::{norm_sqr, CMat};
use crate::rng::{box_muller, SeededStream};
use crate::weights::{AffineFactor, Weight};

pub const CHUNK: u64 = 4096;
pub const MAX_GROUPS: usize = 64;
pub const HEAVY_TAIL_KURTOSIS: f64 = 100.0;
pub const SUP_ROUNDS: usize = 20;
pub const SUP_SHRINK: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n_samples: u64,
    pub seed: u64,
    /// Sample kurtosis of the per-sample contributions (3 for a Gaussian).
    pub kurtosis: f64,
    pub heavy_tail: bool,
}

impl Estimate {
    pub fn exact(value: f64, seed: u64) -> Self {
        Estimate {
            value,
            stderr: 0.0,
            n_samples: 0,
            seed,
            kurtosis: 0.0,
            heavy_tail: false,
        }
    }
}

/// Streaming central moments with an exact pairwise merge.
#[derive(Clone, Copy, Debug, Default)]
pub struct Moments {
    pub n: f64,
    pub mean: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, x: f64) {
        let n1 = self.n;
        self.n += 1.0;
        let n = self.n;
        let delta = x - self.mean;
        let dn = delta / n;
        let dn2 = dn * dn;
        let t1 = delta * dn * n1;
        self.mean += dn;
        self.m4 += t1 * dn2 * (n * n - 3.0 * n + 3.0) + 6.0 * dn2 * self.m2 - 4.0 * dn * self.m3;
        self.m3 += t1 * dn * (n - 2.0) - 3.0 * dn * self.m2;
        self.m2 += t1;
    }

    pub fn merge(a: Moments, b: Moments) -> Moments {
        if a.n == 0.0 {
            return b;
        }
        if b.n == 0.0 {
            return a;
        }
        let n = a.n + b.n;
        let d = b.mean - a.mean;
        let d2 = d * d;
        let d3 = d2 * d;
        let d4 = d2 * d2;
        let mean = a.mean + d * b.n / n;
        let m2 = a.m2 + b.m2 + d2 * a.n * b.n / n;
        let m3 = a.m3
            + b.m3
            + d3 * a.n * b.n * (a.n - b.n) / (n * n)
            + 3.0 * d * (a.n * b.m2 - b.n * a.m2) / n;
        let m4 = a.m4
            + b.m4
            + d4 * a.n * b.n * (a.n * a.n - a.n * b.n + b.n * b.n) / (n * n * n)
            + 6.0 * d2 * (a.n * a.n * b.m2 + b.n * b.n * a.m2) / (n * n)
            + 4.0 * d * (a.n * b.m3 - b.n * a.m3) / n;
        Moments {
            n,
            mean,
            m2,
            m3,
            m4,
        }
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2.0 {
            0.0
        } else {
            self.m2 / (self.n - 1.0)
        }
    }

    pub fn kurtosis(&self) -> f64 {
        if self.m2 <= 0.0 {
            0.0
        } else {
            self.n * self.m4 / (self.m2 * self.m2)
        }
    }

    pub fn to_estimate(&self, scale: f64, seed: u64) -> Estimate {
        let kurtosis = self.kurtosis();
        Estimate {
            value: scale * self.mean,
            stderr: scale.abs() * (self.variance() / self.n.max(1.0)).sqrt(),
            n_samples: self.n as u64,
            seed,
            kurtosis,
            heavy_tail: kurtosis > HEAVY_TAIL_KURTOSIS,
        }
    }
}

/// Fixed group layout for `n` samples whose accumulator occupies `acc_bytes`.
pub fn group_ranges(n: u64, acc_bytes: usize) -> Vec<(u64, u64)> {
    let n_chunks = n.div_ceil(CHUNK).max(1);
    let mem_cap = ((256usize << 20) / acc_bytes.max(1)).max(1);
    let g = (MAX_GROUPS.min(mem_cap) as u64).min(n_chunks).max(1);
    (0..g)
        .map(|i| {
            let c0 = i * n_chunks / g;
            let c1 = (i + 1) * n_chunks / g;
            ((c0 * CHUNK).min(n), (c1 * CHUNK).min(n))
        })
        .collect()
}

/// Run `body(acc, start, len)` for each chunk of `0..n` in group order and combine groups
/// with a fixed pairwise tree.
pub fn chunked_reduce<A, I, B, M>(n: u64, acc_bytes: usize, init: I, body: B, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    B: Fn(&mut A, u64, u64) + Sync,
    M: Fn(A, A) -> A + Sync,
{
    let groups = group_ranges(n, acc_bytes);
    let mut parts: Vec<A> = groups
        .into_par_iter()
        .map(|(g0, g1)| {
            let mut acc = init();
            let mut s = g0;
            while s < g1 {
                let len = CHUNK.min(g1 - s);
                body(&mut acc, s, len);
                s += len;
            }
            acc
        })
        .collect();
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(merge(a, b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop().unwrap_or_else(init)
}

/// Defensive-mixture importance sampling for one factor `|h|^{-q}`: one local coordinate `x`
/// is drawn from `mix * uniform + (1-mix) * power law ~ |x - x*|^{-q}` around the zero of `h`
/// conditional on the other coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub factor: AffineFactor,
    pub q: f64,
    pub mix: f64,
    /// Smallest relative distance the power law proposes; `None` picks the distance at which
    /// a global-coordinate evaluation of the factor runs out of precision.
    pub s_min: Option<f64>,
}

impl Importance {
    pub fn new(factor: AffineFactor, q: f64) -> Self {
        Importance {
            factor,
            q: q.clamp(0.0, 1.95),
            mix: 0.5,
            s_min: None,
        }
    }

    /// For integrands evaluated through [`Sampler::draw_offset`], which keeps relative
    /// precision all the way down.
    pub fn offset_exact(factor: AffineFactor, q: f64) -> Self {
        Importance {
            s_min: Some(1e-200),
            ..Self::new(factor, q)
        }
    }
}

#[derive(Clone, Debug)]
struct IsPlan {
    beta: C64,
    gamma: Vec<C64>,
    /// Local coordinates `start..start + m` form the sampled block, a ball of radius `rho`.
    start: usize,
    m: usize,
    rho: f64,
    /// For `m > 1`, a unitary whose first column is `conj(gamma_block) / |gamma_block|`, so
    /// the factor sees only the first rotated coordinate with coefficient `g`.
    rot: Option<CMat>,
    g: C64,
    q: f64,
    mix: f64,
    /// Power-law draws stop at this fraction of the block radius: closer to the zero set the
    /// computed factor has lost its relative precision.
    s_min: f64,
}

/// Distance from the zero set (relative to the coordinate scale) below which `h(z)` is
/// dominated by rounding.
const IS_PRECISION_FLOOR: f64 = 1e-10;

/// Uniform sampler for a region, optionally with importance sampling; yields points
/// together with a density ratio whose mean is 1.
#[derive(Clone, Debug)]
pub struct Sampler {
    region: Region,
    anchor: Vec<C64>,
    volume: f64,
    is: Option<IsPlan>,
    n: usize,
}

fn ball_uniforms(m: usize) -> usize {
    match m {
        0 => 0,
        1 => 2,
        _ => 2 * m + 1,
    }
}

#[inline]
fn disc(u1: f64, u2: f64, rho: f64) -> C64 {
    C64::from_polar(rho * u1.sqrt(), TAU * u2)
}

fn ball_into(u: &[f64], rho: f64, out: &mut [C64]) {
    let m = out.len();
    if m == 0 {
        return;
    }
    if m == 1 {
        out[0] = disc(u[0], u[1], rho);
        return;
    }
    let mut s = 0.0;
    for j in 0..m {
        let (a, b) = box_muller(u[2 * j], u[2 * j + 1]);
        out[j] = C64::new(a, b);
        s += a * a + b * b;
    }
    let scale = rho * u[2 * m].powf(1.0 / (2 * m) as f64) / s.sqrt();
    for o in out.iter_mut() {
        *o *= scale;
    }
}

impl Sampler {
    pub fn new(region: &Region) -> Self {
        let anchor = match region {
            Region::Interval { .. } => vec![C64::new(0.0, 0.0)],
            other => other.anchor().coords,
        };
        Sampler {
            region: region.clone(),
            anchor,
            volume: region_volume(region),
            is: None,
            n: region.dim(),
        }
    }

    /// Importance sampler on the local block (a disc or ball factor of the region's shape)
    /// across which the factor varies most, when the zero set can come within twice that
    /// variation; otherwise plain uniform sampling.
    pub fn with_importance(region: &Region, imp: Option<&Importance>) -> Self {
        let mut s = Self::new(region);
        let Some(imp) = imp else { return s };
        if imp.q <= 0.0 {
            return s;
        }
        // (start, size, radius) of each independent block of the local shape
        let (origin, u, blocks) = match region {
            Region::NonisotropicBall { frame, r } => {
                let n = frame.dim();
                let mut b = vec![(0, 1, *r)];
                if n > 1 {
                    b.push((1, n - 1, r.sqrt()));
                }
                (frame.origin.coords.clone(), Some(&frame.unitary), b)
            }
            Region::EuclideanBall { center, radius } => (
                center.coords.clone(),
                None,
                vec![(0, center.dim(), *radius)],
            ),
            Region::Polydisc { center, radii } => (
                center.coords.clone(),
                None,
                radii.iter().enumerate().map(|(j, r)| (j, 1, *r)).collect(),
            ),
            _ => return s,
        };
        let n = origin.len();
        let beta = imp.factor.eval(&origin);
        let gamma: Vec<C64> = match u {
            Some(u) => (0..n)
                .map(|j| (0..n).map(|i| imp.factor.v[i] * u.get(i, j)).sum())
                .collect(),
            None => imp.factor.v.clone(),
        };
        let spread: Vec<f64> = blocks
            .iter()
            .map(|&(a, m, rho)| norm_sqr(&gamma[a..a + m]).sqrt() * rho)
            .collect();
        let k = (0..blocks.len()).fold(0, |k, j| if spread[j] > spread[k] { j } else { k });
        if spread[k] == 0.0 {
            return s;
        }
        let others: f64 = spread
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != k)
            .map(|(_, v)| v)
            .sum();
        let reach = (beta.norm() - others).max(0.0);
        if reach > 2.0 * spread[k] {
            return s;
        }
        let (start, m, rho) = blocks[k];
        let (rot, g) = if m == 1 {
            (None, gamma[start])
        } else {
            let gb = &gamma[start..start + m];
            let len = norm_sqr(gb).sqrt();
            (
                Some(complete_unitary(
                    gb.iter().map(|c| c.conj() / len).collect(),
                )),
                C64::new(len, 0.0),
            )
        };
        let scale = 1.0 + norm_sqr(&origin).sqrt();
        s.is = Some(IsPlan {
            beta,
            gamma,
            start,
            m,
            rho,
            rot,
            g,
            q: imp.q,
            mix: imp.mix,
            // offset evaluation is only exact when the anchor sits on the zero set
            s_min: match imp.s_min {
                Some(s) if beta == C64::new(0.0, 0.0) => s,
                _ => (IS_PRECISION_FLOOR * scale / rho).min(1e-2),
            },
        });
        s
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn uniforms_per_sample(&self) -> usize {
        let n = self.n;
        let base = match &self.region {
            Region::EuclideanBall { .. } => ball_uniforms(n),
            Region::NonisotropicBall { .. } => 2 + ball_uniforms(n - 1),
            Region::Polydisc { .. } => 2 * n,
            Region::TorusShell { .. } => n,
            Region::Interval { .. } => 1,
        };
        base + usize::from(self.is.is_some())
    }

    /// Map uniforms to a point; returns the density ratio (0 for points outside the region,
    /// in which case `out` is left unspecified).
    pub fn draw(&self, u: &[f64], local: &mut [C64], out: &mut [C64]) -> f64 {
        let ratio = self.draw_offset(u, local, out);
        for (o, a) in out.iter_mut().zip(&self.anchor) {
            *o = a + *o;
        }
        ratio
    }

    /// Region anchor; [`Sampler::draw_offset`] returns points relative to it.
    pub fn anchor(&self) -> &[C64] {
        &self.anchor
    }

    /// Like [`Sampler::draw`] but writes `z - anchor`, which keeps full relative precision
    /// for points very close to the anchor.
    pub fn draw_offset(&self, u: &[f64], local: &mut [C64], out: &mut [C64]) -> f64 {
        let n = self.n;
        let mut ratio = 1.0;
        match &self.region {
            Region::EuclideanBall { radius, .. } => {
                if let Some(plan) = &self.is {
                    ratio = is_block(plan, u, u[ball_uniforms(n)], local);
                } else {
                    ball_into(u, *radius, local);
                }
                out.copy_from_slice(local);
            }
            Region::NonisotropicBall { frame, r } => {
                let k = ball_uniforms(n - 1);
                match &self.is {
                    Some(plan) if plan.start == 0 => {
                        ball_into(&u[2..2 + k], r.sqrt(), &mut local[1..]);
                        ratio = is_block(plan, &u[0..2], u[2 + k], local);
                    }
                    Some(plan) => {
                        local[0] = disc(u[0], u[1], *r);
                        ratio = is_block(plan, &u[2..2 + k], u[2 + k], local);
                    }
                    None => {
                        local[0] = disc(u[0], u[1], *r);
                        ball_into(&u[2..2 + k], r.sqrt(), &mut local[1..]);
                    }
                }
                let z = frame.unitary.mul_vec(local);
                out.copy_from_slice(&z);
            }
            Region::Polydisc { radii, .. } => {
                let skip = self.is.as_ref().map(|p| p.start);
                for j in (0..n).filter(|&j| Some(j) != skip) {
                    local[j] = disc(u[2 * j], u[2 * j + 1], radii[j]);
                }
                if let Some(plan) = &self.is {
                    let a = plan.start;
                    ratio = is_block(plan, &u[2 * a..2 * a + 2], u[2 * n], local);
                }
                out.copy_from_slice(local);
            }
            Region::TorusShell { frame, r } => {
                for j in 0..n {
                    let rad = if j == 0 { *r } else { r.sqrt() };
                    local[j] = C64::from_polar(rad, TAU * u[j]);
                }
                let z = frame.unitary.mul_vec(local);
                out.copy_from_slice(&z);
            }
            Region::Interval { lo, hi } => {
                local[0] = C64::new(lo + (hi - lo) * u[0], 0.0);
                out[0] = local[0];
            }
        }
        ratio
    }
}

/// Fill the sampled block of `local` (other coordinates already drawn): its first rotated
/// coordinate comes from the defensive mixture of its uniform-ball marginal and a power law
/// around the zero of the factor, the rest from the exact conditional. Returns the density
/// ratio target / proposal.
fn is_block(plan: &IsPlan, u: &[f64], pick: f64, local: &mut [C64]) -> f64 {
    let (a0, m, rho) = (plan.start, plan.m, plan.rho);
    let lin: C64 = plan.beta
        + local
            .iter()
            .zip(&plan.gamma)
            .enumerate()
            .filter(|(j, _)| *j < a0 || *j >= a0 + m)
            .map(|(_, (w, g))| g * w)
            .sum::<C64>();
    let center = -lin / plan.g;
    let (a, floor) = (2.0 - plan.q, plan.s_min.powf(2.0 - plan.q));
    let x = if pick < plan.mix {
        let s2 = 1.0 - (1.0 - u[0]).powf(1.0 / m as f64);
        C64::from_polar(rho * s2.sqrt(), TAU * u[1])
    } else {
        // power law on [s_min, 1): P(s < x) = (x^a - s_min^a) / (1 - s_min^a)
        let s = (floor + u[0] * (1.0 - floor)).powf(1.0 / a);
        center + C64::from_polar(rho * s, TAU * u[1])
    };
    let x2 = x.norm_sqr() / (rho * rho);
    if x2 >= 1.0 {
        return 0.0;
    }
    // block marginal of x relative to the uniform disc density
    let marginal = m as f64 * (1.0 - x2).powi(m as i32 - 1);
    let t = (x - center).norm() / rho;
    let power = if t < 1.0 && t >= plan.s_min {
        0.5 * a * t.powf(-plan.q) / (1.0 - floor)
    } else {
        0.0
    };
    match &plan.rot {
        None => local[a0] = x,
        Some(rot) => {
            let mut y = vec![C64::new(0.0, 0.0); m];
            y[0] = x;
            ball_into(&u[2..], rho * (1.0 - x2).sqrt(), &mut y[1..]);
            local[a0..a0 + m].copy_from_slice(&rot.mul_vec(&y));
        }
    }
    marginal / (plan.mix * marginal + (1.0 - plan.mix) * power)
}

/// Uniform sample `k` of `region` from `stream`.
pub fn sample_region(region: &Region, k: u64, stream: &SeededStream) -> CPoint {
    let s = Sampler::new(region);
    let m = s.uniforms_per_sample();
    let mut u = vec![0.0; m];
    stream.cursor(k, m).fill(&mut u);
    let n = s.dim();
    let mut local = vec![C64::new(0.0, 0.0); n];
    let mut out = vec![C64::new(0.0, 0.0); n];
    s.draw(&u, &mut local, &mut out);
    CPoint { coords: out }
}

#[derive(Clone, Copy, Debug, Default)]
struct ScalarAcc {
    m: Moments,
    bad: u64,
    first_bad: u64,
}

/// Evaluate `visit(index, point, ratio)` over `budget` samples, chunk by chunk.
/// `visit` pushes per-sample contributions into an accumulator it owns.
pub fn for_each_sample<A, I, V, M>(
    sampler: &Sampler,
    budget: u64,
    stream: &SeededStream,
    acc_bytes: usize,
    init: I,
    visit: V,
    merge: M,
) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    V: Fn(&mut A, u64, &[C64], f64) + Sync,
    M: Fn(A, A) -> A + Sync,
{
    let n = sampler.dim();
    for_each_offset_sample(
        sampler,
        budget,
        stream,
        acc_bytes,
        || (init(), vec![C64::new(0.0, 0.0); n]),
        |(acc, z), k, anchor, d, ratio| {
            for j in 0..n {
                z[j] = anchor[j] + d[j];
            }
            visit(acc, k, z, ratio);
        },
        |(a, z), (b, _)| (merge(a, b), z),
    )
    .0
}

/// Same sample sequence as [`for_each_sample`], visited as `(index, anchor, z - anchor, ratio)`.
pub fn for_each_offset_sample<A, I, V, M>(
    sampler: &Sampler,
    budget: u64,
    stream: &SeededStream,
    acc_bytes: usize,
    init: I,
    visit: V,
    merge: M,
) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    V: Fn(&mut A, u64, &[C64], &[C64], f64) + Sync,
    M: Fn(A, A) -> A + Sync,
{
    let m = sampler.uniforms_per_sample();
    let n = sampler.dim();
    chunked_reduce(
        budget,
        acc_bytes,
        init,
        |acc, start, len| {
            let mut cur = stream.cursor(start, m);
            let mut u = vec![0.0; m];
            let mut local = vec![C64::new(0.0, 0.0); n];
            let mut d = vec![C64::new(0.0, 0.0); n];
            for k in start..start + len {
                cur.fill(&mut u);
                let ratio = sampler.draw_offset(&u, &mut local, &mut d);
                visit(acc, k, sampler.anchor(), &d, ratio);
            }
        },
        merge,
    )
}

/// `int_D f` as `|D| * mean(f * ratio)`.
pub fn integrate_with<F>(
    f: &F,
    sampler: &Sampler,
    budget: u64,
    stream: &SeededStream,
) -> Result<Estimate>
where
    F: Fn(&[C64]) -> f64 + Sync + ?Sized,
{
    let acc = for_each_sample(
        sampler,
        budget,
        stream,
        64,
        ScalarAcc::default,
        |acc, k, z, ratio| {
            let y = if ratio == 0.0 { 0.0 } else { f(z) * ratio };
            if y.is_finite() {
                acc.m.push(y);
            } else {
                if acc.bad == 0 {
                    acc.first_bad = k;
                }
                acc.bad += 1;
            }
        },
        |a, b| ScalarAcc {
            m: Moments::merge(a.m, b.m),
            bad: a.bad + b.bad,
            first_bad: if a.bad > 0 { a.first_bad } else { b.first_bad },
        },
    );
    if acc.bad > 0 {
        return Err(Error::NonFinite {
            count: acc.bad,
            first: acc.first_bad,
        });
    }
    Ok(acc.m.to_estimate(sampler.volume(), stream.seed))
}

pub fn integrate<F>(f: &F, region: &Region, budget: u64, stream: &SeededStream) -> Result<Estimate>
where
    F: Fn(&[C64]) -> f64 + Sync + ?Sized,
{
    integrate_with(f, &Sampler::new(region), budget, stream)
}

/// Mean of `f` over the region (`fint_D f`).
pub fn mean_with<F>(
    f: &F,
    sampler: &Sampler,
    budget: u64,
    stream: &SeededStream,
) -> Result<Estimate>
where
    F: Fn(&[C64]) -> f64 + Sync + ?Sized,
{
    let vol = sampler.volume();
    let mut e = integrate_with(f, sampler, budget, stream)?;
    e.value /= vol;
    e.stderr /= vol;
    Ok(e)
}

/// Importance plan for log-type integrands of `psi` on `region`, if `psi` has a
/// hyperplane singularity near it.
pub fn log_importance(psi: &Weight) -> Option<Importance> {
    psi.dominant_factor().map(|f| Importance::new(f, 1.0))
}

/// `psi_D = fint_D psi`.
pub fn mean_value(
    psi: &Weight,
    region: &Region,
    budget: u64,
    stream: &SeededStream,
) -> Result<Estimate> {
    let imp = log_importance(psi);
    let sampler = Sampler::with_importance(region, imp.as_ref());
    mean_with(&|z: &[C64]| psi.eval(z), &sampler, budget, stream)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupEstimate {
    pub value: f64,
    pub point: CPoint,
    /// Refinement gain of the last round; zero once the pattern search has stalled.
    pub last_gain: f64,
}

/// Lower bound for `sup_D f`: sample maxima of the dyadic prefixes of the sample set,
/// each refined by a shrinking-box pattern search in local coordinates.
pub fn sup_estimate<F>(f: &F, region: &Region, budget: u64, stream: &SeededStream) -> SupEstimate
where
    F: Fn(&[C64]) -> f64 + Sync + ?Sized,
{
    let sampler = Sampler::new(region);
    let n = sampler.dim();
    let budget = budget.max(1);
    // per-chunk maxima in index order
    type ChunkMax = Vec<(u64, f64, Vec<C64>)>;
    let chunks: ChunkMax = for_each_sample(
        &sampler,
        budget,
        stream,
        1 << 12,
        Vec::new,
        |acc: &mut ChunkMax, k, z, _| {
            let v = f(z);
            let chunk = k / CHUNK;
            match acc.last_mut() {
                Some(last) if last.0 == chunk => {
                    if v > last.1 || (last.1.is_nan() && !v.is_nan()) {
                        last.1 = v;
                        last.2.copy_from_slice(z);
                    }
                }
                _ => acc.push((chunk, v, z.to_vec())),
            }
        },
        |mut a, mut b| {
            a.append(&mut b);
            a
        },
    );
    let mut prefixes: Vec<u64> = Vec::new();
    let mut p = CHUNK;
    while p < budget {
        prefixes.push(p);
        p *= 2;
    }
    prefixes.push(budget);
    let mut best: Option<SupEstimate> = None;
    let mut starts: Vec<Vec<C64>> = Vec::new();
    for &p in &prefixes {
        let last_chunk = (p - 1) / CHUNK;
        let top = chunks
            .iter()
            .take_while(|c| c.0 <= last_chunk)
            .fold(None::<&(u64, f64, Vec<C64>)>, |acc, c| match acc {
                Some(a) if a.1 >= c.1 => Some(a),
                _ => Some(c),
            })
            .expect("at least one chunk");
        if starts.contains(&top.2) {
            continue;
        }
        starts.push(top.2.clone());
        let cand = refine_sup(f, region, &top.2, top.1, n);
        if best.as_ref().is_none_or(|b| cand.value > b.value) {
            best = Some(cand);
        }
    }
    best.expect("at least one start")
}

fn local_coords(region: &Region, z: &[C64]) -> Vec<C64> {
    match region {
        Region::EuclideanBall { center, .. } | Region::Polydisc { center, .. } => {
            z.iter().zip(&center.coords).map(|(a, b)| a - b).collect()
        }
        Region::NonisotropicBall { frame, .. } | Region::TorusShell { frame, .. } => {
            frame.pull_back(z)
        }
        Region::Interval { .. } => z.to_vec(),
    }
}

fn from_local(region: &Region, w: &[C64]) -> Vec<C64> {
    match region {
        Region::EuclideanBall { center, .. } | Region::Polydisc { center, .. } => {
            w.iter().zip(&center.coords).map(|(a, b)| a + b).collect()
        }
        Region::NonisotropicBall { frame, .. } | Region::TorusShell { frame, .. } => frame.apply(w),
        Region::Interval { .. } => w.to_vec(),
    }
}

fn local_inside(region: &Region, w: &[C64]) -> bool {
    match region {
        Region::EuclideanBall { radius, .. } => norm_sqr(w) <= radius * radius,
        Region::NonisotropicBall { r, .. } => w[0].norm() <= *r && norm_sqr(&w[1..]) <= *r,
        Region::Polydisc { radii, .. } => w.iter().zip(radii).all(|(a, r)| a.norm() <= *r),
        Region::TorusShell { .. } => true,
        Region::Interval { lo, hi } => w[0].re >= *lo && w[0].re <= *hi && w[0].im == 0.0,
    }
}

fn initial_steps(region: &Region, n: usize) -> Vec<f64> {
    let per: Vec<f64> = match region {
        Region::EuclideanBall { radius, .. } => vec![*radius; n],
        Region::NonisotropicBall { r, .. } => {
            (0..n).map(|j| if j == 0 { *r } else { r.sqrt() }).collect()
        }
        Region::Polydisc { radii, .. } => radii.clone(),
        Region::TorusShell { .. } => vec![PI; n],
        Region::Interval { lo, hi } => vec![hi - lo],
    };
    per.iter().flat_map(|s| [0.25 * s, 0.25 * s]).collect()
}

fn refine_sup<F>(f: &F, region: &Region, z0: &[C64], v0: f64, n: usize) -> SupEstimate
where
    F: Fn(&[C64]) -> f64 + ?Sized,
{
    let mut w = local_coords(region, z0);
    let mut best = v0;
    let mut steps = initial_steps(region, n);
    let real_dims = if matches!(region, Region::Interval { .. }) {
        1
    } else {
        2 * n
    };
    let mut last_gain = 0.0;
    let torus = matches!(region, Region::TorusShell { .. });
    for _ in 0..SUP_ROUNDS {
        let before = best;
        for d in 0..real_dims {
            for sign in [1.0, -1.0] {
                let mut cand = w.clone();
                let (j, im) = (d / 2, d % 2 == 1);
                if torus {
                    // move along the angle of coordinate j
                    let ang = if im { 0.0 } else { sign * steps[d] };
                    cand[j] *= C64::from_polar(1.0, ang);
                } else if im {
                    cand[j].im += sign * steps[d];
                } else {
                    cand[j].re += sign * steps[d];
                }
                if !local_inside(region, &cand) {
                    continue;
                }
                let v = f(&from_local(region, &cand));
                if v > best {
                    best = v;
                    w = cand;
                }
            }
        }
        last_gain = best - before;
        for s in steps.iter_mut() {
            *s *= SUP_SHRINK;
        }
    }
    SupEstimate {
        value: best,
        point: CPoint {
            coords: from_local(region, &w),
        },
        last_gain,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Frame;

    fn s(seed: u64) -> SeededStream {
        SeededStream::new(seed, 0)
    }

    fn unit_disc() -> Region {
        Region::EuclideanBall {
            center: CPoint::origin(1),
            radius: 1.0,
        }
    }

    fn nib(n: usize, r: f64) -> Region {
        Region::NonisotropicBall {
            frame: Frame::translation(CPoint::origin(n)),
            r,
        }
    }

    #[test]
    fn moments_merge_matches_sequential() {
        let xs: Vec<f64> = (0..1000)
            .map(|i| ((i * 37 % 101) as f64).sqrt() - 3.0)
            .collect();
        let mut all = Moments::default();
        xs.iter().for_each(|x| all.push(*x));
        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..313].iter().for_each(|x| a.push(*x));
        xs[313..].iter().for_each(|x| b.push(*x));
        let m = Moments::merge(a, b);
        assert!((m.mean - all.mean).abs() < 1e-12);
        assert!((m.m2 - all.m2).abs() < 1e-9 * all.m2);
        assert!((m.m3 - all.m3).abs() < 1e-8 * all.m3.abs().max(1.0));
        assert!((m.m4 - all.m4).abs() < 1e-9 * all.m4);
    }

    #[test]
    fn disc_second_moment() {
        // fint_{|z|<1} |z|^2 = 1/2
        let e = mean_with(
            &|z: &[C64]| z[0].norm_sqr(),
            &Sampler::new(&unit_disc()),
            1_000_000,
            &s(1),
        )
        .unwrap();
        assert!((e.value - 0.5).abs() < 3.0 * e.stderr, "{e:?}");
    }

    #[test]
    fn nonisotropic_quarter_fraction() {
        let r = 0.2;
        let e = mean_with(
            &|z: &[C64]| if z[0].norm() < r / 2.0 { 1.0 } else { 0.0 },
            &Sampler::new(&nib(2, r)),
            200_000,
            &s(2),
        )
        .unwrap();
        assert!((e.value - 0.25).abs() < 3.0 * e.stderr, "{e:?}");
    }

    #[test]
    fn polydisc_components_uncorrelated() {
        let region = Region::Polydisc {
            center: CPoint::origin(2),
            radii: vec![1.0, 2.0],
        };
        let e = mean_with(
            &|z: &[C64]| z[0].re * z[1].re,
            &Sampler::new(&region),
            200_000,
            &s(3),
        )
        .unwrap();
        assert!(e.value.abs() < 3.0 * e.stderr);
    }

    #[test]
    fn constant_and_symmetric_integrands() {
        let e = integrate(&|_: &[C64]| 1.0, &unit_disc(), 10_000, &s(4)).unwrap();
        assert!((e.value - PI).abs() < 1e-12);
        let w = Weight::parse("const:k=-3", 2).unwrap();
        let m = mean_value(&w, &nib(2, 0.1), 10_000, &s(5)).unwrap();
        assert!((m.value + 3.0).abs() < 1e-12 && m.stderr < 1e-12);
        let ball = Region::EuclideanBall {
            center: CPoint::origin(2),
            radius: 0.5,
        };
        let e = mean_with(&|z: &[C64]| z[0].re, &Sampler::new(&ball), 100_000, &s(6)).unwrap();
        assert!(e.value.abs() < 3.0 * e.stderr);
    }

    #[test]
    fn inverse_sqrt_over_disc() {
        // int_{|w|<1} |w|^{-1/2} = 2 pi * int_0^1 t^{1/2} dt = 4 pi / 3
        let f = |z: &[C64]| z[0].norm().powf(-0.5);
        let plain = integrate(&f, &unit_disc(), 400_000, &s(7)).unwrap();
        assert!((plain.value - 4.0 * PI / 3.0).abs() < 4.0 * plain.stderr);
        let fac = AffineFactor {
            v: vec![C64::new(1.0, 0.0)],
            b: C64::new(0.0, 0.0),
            c: 1.0,
        };
        let is = Sampler::with_importance(&unit_disc(), Some(&Importance::new(fac, 0.5)));
        let e = integrate_with(&f, &is, 400_000, &s(7)).unwrap();
        assert!((e.value - 4.0 * PI / 3.0).abs() < 4.0 * e.stderr);
        assert!(e.stderr < plain.stderr);
    }

    #[test]
    fn importance_on_rotated_ball_blocks() {
        // one coordinate of a uniform 2-ball of radius rho has density 2(1 - s^2) in s = |x|/rho,
        // so the mean of |x|^{-3/2} is 4 * (2 - 2/5) * rho^{-3/2}
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let cases = [
            (
                Region::EuclideanBall {
                    center: CPoint::origin(2),
                    radius: 1.0,
                },
                vec![h, h, 0.0],
                1.0f64,
            ),
            (nib(3, 0.04), vec![0.0, h, -h], 0.2),
        ];
        for (region, v, rho) in cases {
            let n = region.dim();
            let fac = AffineFactor {
                v: v[..n].iter().map(|x| C64::new(*x, 0.0)).collect(),
                b: C64::new(0.0, 0.0),
                c: 1.0,
            };
            let f = |z: &[C64]| fac.eval(z).norm().powf(-1.5);
            let is = Sampler::with_importance(&region, Some(&Importance::new(fac.clone(), 1.5)));
            let e = integrate_with(&f, &is, 400_000, &s(9)).unwrap();
            let mean = e.value / is.volume();
            let exact = 6.4 * rho.powf(-1.5);
            assert!(
                (mean - exact).abs() < 4.0 * e.stderr / is.volume(),
                "{mean} vs {exact}"
            );
            assert!(!e.heavy_tail);
        }
    }

    #[test]
    fn log_mean_over_nonisotropic_ball() {
        // fint_{|u|<r} log|u| = log r - 1/2, the tangential part integrates out
        let r = 0.05;
        let c = 1.5;
        let w = Weight::parse("tangential_log:c=1.5", 2).unwrap();
        let u = crate::linalg::CMat::from_columns(&[
            vec![C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
            vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
        ]);
        let region = Region::NonisotropicBall {
            frame: Frame {
                origin: CPoint::origin(2),
                unitary: u,
            },
            r,
        };
        let e = mean_value(&w, &region, 200_000, &s(8)).unwrap();
        let exact = c * (r.ln() - 0.5);
        assert!(
            (e.value - exact).abs() < 3.0 * e.stderr + 1e-12,
            "{e:?} vs {exact}"
        );
    }

    #[test]
    fn heavy_tail_is_flagged() {
        let e = integrate(
            &|z: &[C64]| z[0].norm().powf(-1.8),
            &unit_disc(),
            200_000,
            &s(9),
        )
        .unwrap();
        assert!(e.heavy_tail, "{e:?}");
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let r = integrate(&|_: &[C64]| f64::NAN, &unit_disc(), 100, &s(1));
        assert!(matches!(
            r,
            Err(Error::NonFinite {
                count: 100,
                first: 0
            })
        ));
    }

    #[test]
    fn sup_examples() {
        let ball = Region::EuclideanBall {
            center: CPoint::origin(1),
            radius: 0.3,
        };
        let v = sup_estimate(&|z: &[C64]| z[0].norm().ln(), &ball, 10_000, &s(10));
        assert!(v.value <= 0.3f64.ln() + 1e-15);
        assert!((v.value - 0.3f64.ln()).abs() < 1e-4);
        let unit = Region::EuclideanBall {
            center: CPoint::origin(2),
            radius: 1.0,
        };
        let v = sup_estimate(&|z: &[C64]| -norm_sqr(z), &unit, 10_000, &s(11));
        assert!(v.value <= 0.0 && v.value > -1e-4);
        let r = 0.01;
        let frame = crate::geometry::frame_at(&CPoint::axis(2, 0, 1.0)).unwrap();
        let region = Region::NonisotropicBall { frame, r };
        let v = sup_estimate(
            &|z: &[C64]| (C64::new(1.0, 0.0) - z[0]).norm().ln(),
            &region,
            10_000,
            &s(12),
        );
        assert!(v.value <= r.ln() + 1e-12);
        assert!((v.value - r.ln()).abs() < 1e-3);
    }

    #[test]
    fn sup_is_monotone_over_dyadic_budgets() {
        let ball = Region::EuclideanBall {
            center: CPoint::new(vec![C64::new(0.2, 0.1), C64::new(-0.1, 0.0)]).unwrap(),
            radius: 0.4,
        };
        let f = |z: &[C64]| (z[0] * z[1] - C64::new(0.05, 0.02)).norm().ln() - norm_sqr(z);
        let mut prev = f64::NEG_INFINITY;
        for b in [4096u64, 8192, 16384, 32768] {
            let v = sup_estimate(&f, &ball, b, &s(13)).value;
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn thread_count_does_not_change_bits() {
        let region = nib(2, 0.3);
        let f = |z: &[C64]| (z[0].norm() + 0.1).ln() * z[1].norm();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| integrate(&f, &region, 300_000, &s(14)).unwrap())
        };
        let a = run(1);
        let b = run(4);
        let c = run(8);
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.stderr.to_bits(), c.stderr.to_bits());
    }
}
