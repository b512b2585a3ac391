//! Truncated weighted Bergman kernels on the unit ball.
//!
//! Monomials `z^a` are preconditioned by their exact unweighted norms, so the Gram matrix
//! under `e^{-t psi}` is the identity at `t = 0`. The kernel is `K_d(z) = |L^{-1} b(z)|^2`
//! with `L` the Cholesky factor of the Gram matrix and `b` the preconditioned monomial
//! vector. Bases are ordered by total degree, so the degree-`d` kernel uses a leading
//! block of a single factorization.
//!
//! For weights invariant under rotations of the tangential coordinates, monomials with
//! different tangential exponents are orthogonal and only the `z_1^k` block contributes at
//! points `(z_1, 0)`; such weights use the axis basis (still integrated over the n-ball).

use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fit::{fit_line, SlopeFit};
use crate::geometry::{complete_unitary, frame_at, CPoint, Region};
use crate::linalg::{cholesky_with_ridge, CMat, Cholesky};
use crate::quadrature::{for_each_sample, mean_value, Estimate, Sampler};
use crate::rng::SeededStream;
use crate::weights::Weight;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    /// All multi-indices with `|a| <= d`.
    Full,
    /// Only `z_1^k`, `k <= d`.
    Axis,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub n: usize,
    pub max_degree: usize,
    pub kind: BasisKind,
    pub indices: Vec<Vec<u32>>,
}

fn push_compositions(n: usize, total: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if prefix.len() == n - 1 {
        let used: u32 = prefix.iter().sum();
        let mut a = prefix.clone();
        a.push(total - used);
        out.push(a);
        return;
    }
    let used: u32 = prefix.iter().sum();
    for k in (0..=(total - used)).rev() {
        prefix.push(k);
        push_compositions(n, total, prefix, out);
        prefix.pop();
    }
}

impl BasisSpec {
    /// Graded lexicographic order: by total degree, then larger leading exponents first.
    pub fn full(n: usize, max_degree: usize) -> Self {
        let mut indices = Vec::new();
        for d in 0..=max_degree as u32 {
            push_compositions(n, d, &mut Vec::new(), &mut indices);
        }
        BasisSpec {
            n,
            max_degree,
            kind: BasisKind::Full,
            indices,
        }
    }

    pub fn axis(n: usize, max_degree: usize) -> Self {
        let indices = (0..=max_degree as u32)
            .map(|k| {
                let mut a = vec![0; n];
                a[0] = k;
                a
            })
            .collect();
        BasisSpec {
            n,
            max_degree,
            kind: BasisKind::Axis,
            indices,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Number of basis elements of total degree at most `d`.
    pub fn prefix_len(&self, d: usize) -> usize {
        self.indices
            .iter()
            .take_while(|a| a.iter().sum::<u32>() as usize <= d)
            .count()
    }

    fn norms(&self) -> Vec<f64> {
        self.indices
            .iter()
            .map(|a| exact_monomial_norm(a, self.n))
            .collect()
    }

    /// Preconditioned monomials at `z`, written into `out`.
    fn eval_into(&self, z: &[C64], inv_sqrt_norms: &[f64], pows: &mut [Vec<C64>], out: &mut [C64]) {
        let d = self.max_degree;
        match self.kind {
            BasisKind::Axis => {
                let mut p = C64::new(1.0, 0.0);
                for k in 0..=d {
                    out[k] = p * inv_sqrt_norms[k];
                    p *= z[0];
                }
            }
            BasisKind::Full => {
                for (j, pw) in pows.iter_mut().enumerate() {
                    pw[0] = C64::new(1.0, 0.0);
                    for k in 1..=d {
                        pw[k] = pw[k - 1] * z[j];
                    }
                }
                for (i, a) in self.indices.iter().enumerate() {
                    let mut v = C64::new(inv_sqrt_norms[i], 0.0);
                    for (j, &e) in a.iter().enumerate() {
                        if e > 0 {
                            v *= pows[j][e as usize];
                        }
                    }
                    out[i] = v;
                }
            }
        }
    }

    pub fn eval(&self, z: &[C64]) -> Vec<C64> {
        let inv: Vec<f64> = self.norms().iter().map(|v| 1.0 / v.sqrt()).collect();
        let mut pows = vec![vec![C64::new(0.0, 0.0); self.max_degree + 1]; self.n];
        let mut out = vec![C64::new(0.0, 0.0); self.len()];
        self.eval_into(z, &inv, &mut pows, &mut out);
        out
    }
}

fn ln_factorial(k: u32) -> f64 {
    (1..=k).map(|i| (i as f64).ln()).sum()
}

/// `int_{B_1} |z^a|^2 dV = pi^n a! / (n + |a|)!`.
pub fn exact_monomial_norm(alpha: &[u32], n: usize) -> f64 {
    let total: u32 = alpha.iter().sum();
    let ln = n as f64 * std::f64::consts::PI.ln()
        + alpha.iter().map(|&a| ln_factorial(a)).sum::<f64>()
        - ln_factorial(n as u32 + total);
    ln.exp()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum GramMethod {
    /// Identity Gram; valid only when the weight contributes nothing (`t = 0` or `psi = 0`).
    Exact,
    MonteCarlo {
        budget: u64,
        seed: u64,
    },
}

#[derive(Clone, Debug)]
pub struct GramModel {
    pub basis: BasisSpec,
    pub t: f64,
    pub weight_id: String,
    pub unitary_invariant: bool,
    pub gram: CMat,
    /// Entrywise standard errors (zero on the exact path).
    pub stderr: Vec<f64>,
    pub factor: Cholesky,
    pub ridge_used: f64,
    pub method: GramMethod,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelEvaluation {
    pub z: CPoint,
    pub degree: usize,
    pub value: f64,
    pub t: f64,
    pub weight_id: String,
}

struct GramAcc {
    re: Vec<f64>,
    im: Vec<f64>,
    sq: Vec<f64>,
    // per-group scratch, reused across samples
    pows: Vec<Vec<C64>>,
    p: Vec<C64>,
    pr: Vec<f64>,
    pi: Vec<f64>,
    a: Vec<f64>,
}

/// Monte Carlo (or exact) Gram matrix of the preconditioned basis under `e^{-t psi}` on `B_1`.
/// Every entry uses the same sample set.
pub fn assemble_gram(
    weight: &Weight,
    t: f64,
    basis: &BasisSpec,
    method: &GramMethod,
) -> Result<GramModel> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(invalid("t", "must be finite and >= 0"));
    }
    if basis.n != weight.n {
        return Err(Error::Dimension {
            expected: weight.n,
            got: basis.n,
        });
    }
    let nb = basis.len();
    let (gram, stderr) = match method {
        GramMethod::Exact => {
            let trivial = t == 0.0 || matches!(weight.expr, crate::weights::WeightExpr::Zero);
            if !trivial {
                return Err(invalid(
                    "method",
                    "the exact Gram path needs t = 0 or the zero weight",
                ));
            }
            (CMat::identity(nb), vec![0.0; nb * nb])
        }
        GramMethod::MonteCarlo { budget, seed } => mc_gram(weight, t, basis, *budget, *seed)?,
    };
    let factor = cholesky_with_ridge(&gram)?;
    Ok(GramModel {
        basis: basis.clone(),
        t,
        weight_id: weight.id(),
        unitary_invariant: weight.is_unitary_invariant(),
        ridge_used: factor.ridge,
        gram,
        stderr,
        factor,
        method: method.clone(),
    })
}

fn mc_gram(
    weight: &Weight,
    t: f64,
    basis: &BasisSpec,
    budget: u64,
    seed: u64,
) -> Result<(CMat, Vec<f64>)> {
    if budget < 2 {
        return Err(invalid("budget", "need at least two samples"));
    }
    let n = basis.n;
    let nb = basis.len();
    let ball = Region::EuclideanBall {
        center: CPoint::origin(n),
        radius: 1.0,
    };
    let sampler = Sampler::new(&ball);
    let vol = sampler.volume();
    let inv: Vec<f64> = basis.norms().iter().map(|v| 1.0 / v.sqrt()).collect();
    let stream = SeededStream::new(seed, 0x6772_616d);
    let acc = for_each_sample(
        &sampler,
        budget,
        &stream,
        3 * nb * nb * 8,
        || GramAcc {
            re: vec![0.0; nb * nb],
            im: vec![0.0; nb * nb],
            sq: vec![0.0; nb * nb],
            pows: vec![vec![C64::new(0.0, 0.0); basis.max_degree + 1]; n],
            p: vec![C64::new(0.0, 0.0); nb],
            pr: vec![0.0; nb],
            pi: vec![0.0; nb],
            a: vec![0.0; nb],
        },
        |acc, _k, z, _| {
            let w = if t == 0.0 {
                1.0
            } else {
                (-t * weight.eval(z)).exp()
            };
            let sw = w.sqrt();
            basis.eval_into(z, &inv, &mut acc.pows, &mut acc.p);
            for j in 0..nb {
                acc.pr[j] = acc.p[j].re * sw;
                acc.pi[j] = acc.p[j].im * sw;
                acc.a[j] = acc.pr[j] * acc.pr[j] + acc.pi[j] * acc.pi[j];
            }
            let GramAcc {
                re,
                im,
                sq,
                pr,
                pi,
                a,
                ..
            } = acc;
            for j in 0..nb {
                let (xr, xi, aj) = (pr[j], pi[j], a[j]);
                let row = j * nb;
                let re = &mut re[row + j..row + nb];
                let im = &mut im[row + j..row + nb];
                let sq = &mut sq[row + j..row + nb];
                let (prk, pik, ak) = (&pr[j..], &pi[j..], &a[j..]);
                for k in 0..re.len() {
                    re[k] += xr * prk[k] + xi * pik[k];
                    im[k] += xi * prk[k] - xr * pik[k];
                    sq[k] += aj * ak[k];
                }
            }
        },
        |mut a, b| {
            for (x, y) in a.re.iter_mut().zip(&b.re) {
                *x += y;
            }
            for (x, y) in a.im.iter_mut().zip(&b.im) {
                *x += y;
            }
            for (x, y) in a.sq.iter_mut().zip(&b.sq) {
                *x += y;
            }
            a
        },
    );
    let nf = budget as f64;
    let mut gram = CMat::zeros(nb);
    let mut stderr = vec![0.0; nb * nb];
    for j in 0..nb {
        for k in j..nb {
            let idx = j * nb + k;
            let mean = C64::new(acc.re[idx], acc.im[idx]) / nf;
            let second = acc.sq[idx] / nf;
            let var = (second - mean.norm_sqr()).max(0.0);
            let se = vol * (var / nf).sqrt();
            let g = mean * vol;
            if !g.re.is_finite() || !g.im.is_finite() {
                return Err(Error::NonFinite {
                    count: 1,
                    first: idx as u64,
                });
            }
            gram.set(j, k, g);
            gram.set(k, j, g.conj());
            stderr[idx] = se;
            stderr[k * nb + j] = se;
        }
    }
    Ok((gram, stderr))
}

impl GramModel {
    fn check_point(&self, z: &CPoint) -> Result<Vec<C64>> {
        if z.dim() != self.basis.n {
            return Err(Error::Dimension {
                expected: self.basis.n,
                got: z.dim(),
            });
        }
        let norm = z.norm();
        if norm >= 1.0 {
            return Err(Error::OutsideBall { norm, radius: 1.0 });
        }
        if self.basis.kind == BasisKind::Axis && z.tangential_norm_sqr() > 0.0 {
            if self.unitary_invariant {
                // rotate onto the first axis; the kernel only sees |z|
                return Ok(CPoint::axis(z.dim(), 0, norm).coords);
            }
            return Err(invalid(
                "z",
                "axis-basis models only evaluate on the first coordinate axis",
            ));
        }
        Ok(z.coords.clone())
    }

    /// `K_d(z)` for every `d = 0..=max_degree`.
    pub fn kernel_by_degree(&self, z: &CPoint) -> Result<Vec<f64>> {
        let zc = self.check_point(z)?;
        let b = self.basis.eval(&zc);
        let prefix = self.factor.solve_norm_sqr_prefix(&b);
        Ok((0..=self.basis.max_degree)
            .map(|d| prefix[self.basis.prefix_len(d) - 1])
            .collect())
    }

    pub fn kernel_at_degree(&self, z: &CPoint, d: usize) -> Result<KernelEvaluation> {
        if d > self.basis.max_degree {
            return Err(invalid(
                "d",
                format!("exceeds model degree {}", self.basis.max_degree),
            ));
        }
        let zc = self.check_point(z)?;
        let b = self.basis.eval(&zc);
        let value = self.factor.solve_norm_sqr(&b, self.basis.prefix_len(d));
        Ok(KernelEvaluation {
            z: z.clone(),
            degree: d,
            value,
            t: self.t,
            weight_id: self.weight_id.clone(),
        })
    }

    /// Largest entrywise deviation from the identity, in units of the entry's stderr.
    pub fn identity_deviation_sigmas(&self) -> f64 {
        let nb = self.basis.len();
        let mut worst = 0.0f64;
        for j in 0..nb {
            for k in 0..nb {
                let target = if j == k { 1.0 } else { 0.0 };
                let dev = (self.gram.get(j, k) - C64::new(target, 0.0)).norm();
                let se = self.stderr[j * nb + k];
                worst = worst.max(if se > 0.0 {
                    dev / se
                } else if dev > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                });
            }
        }
        worst
    }
}

pub fn kernel_at(model: &GramModel, z: &CPoint) -> Result<KernelEvaluation> {
    model.kernel_at_degree(z, model.basis.max_degree)
}

/// Unweighted ball kernel `n!/pi^n (1-|z|^2)^{-(n+1)}`.
pub fn ball_kernel(n: usize, z_norm_sqr: f64) -> f64 {
    let fact: f64 = (1..=n).map(|i| i as f64).product();
    fact / std::f64::consts::PI.powi(n as i32) * (1.0 - z_norm_sqr).powi(-(n as i32 + 1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeRule {
    pub start: usize,
    pub step: usize,
    pub tol: f64,
    pub d_max: usize,
}

impl DegreeRule {
    /// Steps of 5 until the relative increment drops below 1%; cap 60 for n <= 2, 30 otherwise.
    pub fn standard(n: usize) -> Self {
        DegreeRule {
            start: 5,
            step: 5,
            tol: 0.01,
            d_max: if n <= 2 { 60 } else { 30 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayPoint {
    pub r: f64,
    pub eval: KernelEvaluation,
    /// Relative change from the previous degree step.
    pub increment: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelRay {
    pub n: usize,
    pub t: f64,
    pub zeta: CPoint,
    pub basis_kind: BasisKind,
    pub ridge_used: f64,
    pub points: Vec<RayPoint>,
}

/// Basis a weight needs after canonicalization.
pub fn basis_for(weight: &Weight, d_max: usize) -> BasisSpec {
    if weight.is_axis_torus_invariant() {
        BasisSpec::axis(weight.n, d_max)
    } else {
        BasisSpec::full(weight.n, d_max)
    }
}

/// Canonical-frame weight for the ray toward `zeta`: `psi o U` with `U e_1 = zeta`.
pub fn canonical_weight(weight: &Weight, zeta: &CPoint) -> Result<Weight> {
    frame_at(zeta)?;
    if weight.is_unitary_invariant() {
        return Ok(weight.clone());
    }
    let u = complete_unitary(zeta.coords.iter().map(|c| c / zeta.norm()).collect());
    Ok(weight.transported(&u))
}

/// Kernel along `(1-r) zeta`, each point at the first degree where the relative increment
/// falls below the rule's tolerance. One Gram model at `d_max` serves every point.
pub fn kernel_ray(
    weight: &Weight,
    t: f64,
    zeta: &CPoint,
    r_grid: &[f64],
    rule: &DegreeRule,
    method: &GramMethod,
    cache: Option<&GramCache>,
) -> Result<KernelRay> {
    let canon = canonical_weight(weight, zeta)?;
    let basis = basis_for(&canon, rule.d_max);
    let model = match cache {
        Some(c) => c.load_or_build(&canon, t, &basis, method)?,
        None => assemble_gram(&canon, t, &basis, method)?,
    };
    let n = weight.n;
    let mut points = Vec::with_capacity(r_grid.len());
    for &r in r_grid {
        if !(r > 0.0 && r < 1.0) {
            return Err(invalid("r_grid", format!("radius {r} outside (0, 1)")));
        }
        let z = CPoint::axis(n, 0, 1.0 - r);
        let by_degree = model.kernel_by_degree(&z)?;
        let mut d = rule.start.min(rule.d_max);
        let mut increment = f64::INFINITY;
        let mut converged = false;
        while d + rule.step <= rule.d_max {
            let next = d + rule.step;
            increment = (by_degree[next] - by_degree[d]) / by_degree[next];
            d = next;
            if increment < rule.tol {
                converged = true;
                break;
            }
        }
        let original_z = CPoint {
            coords: zeta.coords.iter().map(|c| c * (1.0 - r)).collect(),
        };
        points.push(RayPoint {
            r,
            eval: KernelEvaluation {
                z: original_z,
                degree: d,
                value: by_degree[d],
                t,
                weight_id: weight.id(),
            },
            increment,
            converged,
        });
    }
    Ok(KernelRay {
        n,
        t,
        zeta: zeta.clone(),
        basis_kind: basis.kind,
        ridge_used: model.ridge_used,
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    /// `log K` against `log(1/delta)`, `delta = 1 - |z|^2 = r(2-r)`.
    pub fit: SlopeFit,
    /// `log K` against `log(1/r)`; same limit as `r -> 0`, larger curvature on a finite grid.
    pub raw: SlopeFit,
    pub excluded: Vec<f64>,
}

/// Boundary exponent of the kernel from converged ray points (at least four).
pub fn exponent_fit(points: &[RayPoint]) -> Result<ExponentFit> {
    let used: Vec<&RayPoint> = points.iter().filter(|p| p.converged).collect();
    let excluded = points
        .iter()
        .filter(|p| !p.converged)
        .map(|p| p.r)
        .collect();
    if used.len() < 4 {
        return Err(Error::DegenerateFit {
            needed: 4,
            got: used.len(),
        });
    }
    let pts: Vec<(f64, f64)> = used.iter().map(|p| (p.r, p.eval.value)).collect();
    let ys: Vec<f64> = used.iter().map(|p| p.eval.value.ln()).collect();
    let xd: Vec<f64> = used.iter().map(|p| -(p.r * (2.0 - p.r)).ln()).collect();
    let xr: Vec<f64> = used.iter().map(|p| -p.r.ln()).collect();
    Ok(ExponentFit {
        fit: fit_line("log(1/delta)", pts.clone(), &xd, &ys, 4)?,
        raw: fit_line("log(1/r)", pts, &xr, &ys, 4)?,
        excluded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRatioPoint {
    pub r: f64,
    pub log_ratio: f64,
    pub kernel: f64,
    pub degree: usize,
    pub converged: bool,
    pub mean_psi: Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRatioProfile {
    pub points: Vec<BoundRatioPoint>,
    /// `max - min` of the log-ratio over converged points.
    pub spread: f64,
    pub heavy_tail: bool,
}

/// `L(r) = log K((1-r) zeta) + (n+1) log r - t psi_{B~_r(zeta)}` along the ray.
#[allow(clippy::too_many_arguments)]
pub fn bound_ratio_profile(
    weight: &Weight,
    t: f64,
    zeta: &CPoint,
    r_grid: &[f64],
    rule: &DegreeRule,
    method: &GramMethod,
    mean_budget: u64,
    stream: &SeededStream,
) -> Result<BoundRatioProfile> {
    let ray = kernel_ray(weight, t, zeta, r_grid, rule, method, None)?;
    let frame = frame_at(zeta)?;
    let n = weight.n as f64;
    let mut points = Vec::new();
    for (i, p) in ray.points.iter().enumerate() {
        let region = Region::NonisotropicBall {
            frame: frame.clone(),
            r: p.r,
        };
        let mean_psi = mean_value(weight, &region, mean_budget, &stream.child(i as u64))?;
        let log_ratio = p.eval.value.ln() + (n + 1.0) * p.r.ln() - t * mean_psi.value;
        points.push(BoundRatioPoint {
            r: p.r,
            log_ratio,
            kernel: p.eval.value,
            degree: p.eval.degree,
            converged: p.converged,
            mean_psi,
        });
    }
    let conv: Vec<f64> = points
        .iter()
        .filter(|p| p.converged)
        .map(|p| p.log_ratio)
        .collect();
    if conv.is_empty() {
        return Err(Error::DegenerateFit { needed: 1, got: 0 });
    }
    let spread = conv.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - conv.iter().cloned().fold(f64::INFINITY, f64::min);
    let heavy_tail = points.iter().any(|p| p.mean_psi.heavy_tail);
    Ok(BoundRatioProfile {
        points,
        spread,
        heavy_tail,
    })
}

const CACHE_HEADER: &str = "lelong-gram 1";

/// On-disk Gram matrices keyed by weight, `t`, basis and quadrature settings.
#[derive(Clone, Debug)]
pub struct GramCache {
    pub dir: PathBuf,
    pub rebuild: bool,
}

fn fnv64(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

impl GramCache {
    pub fn new(dir: impl Into<PathBuf>, rebuild: bool) -> Self {
        GramCache {
            dir: dir.into(),
            rebuild,
        }
    }

    fn key(weight: &Weight, t: f64, basis: &BasisSpec, method: &GramMethod) -> String {
        format!(
            "{}|n={}|t={:?}|{:?}|d={}|{:?}",
            weight.id(),
            basis.n,
            t,
            basis.kind,
            basis.max_degree,
            method
        )
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{:016x}.gram", fnv64(key)))
    }

    pub fn load_or_build(
        &self,
        weight: &Weight,
        t: f64,
        basis: &BasisSpec,
        method: &GramMethod,
    ) -> Result<GramModel> {
        let key = Self::key(weight, t, basis, method);
        let path = self.path(&key);
        if !self.rebuild {
            if let Some((gram, stderr)) = read_cache(&path, &key, basis.len()) {
                let factor = cholesky_with_ridge(&gram)?;
                return Ok(GramModel {
                    basis: basis.clone(),
                    t,
                    weight_id: weight.id(),
                    unitary_invariant: weight.is_unitary_invariant(),
                    ridge_used: factor.ridge,
                    gram,
                    stderr,
                    factor,
                    method: method.clone(),
                });
            }
        }
        let model = assemble_gram(weight, t, basis, method)?;
        let io = |source| Error::Io {
            path: path.display().to_string(),
            source,
        };
        fs::create_dir_all(&self.dir).map_err(io)?;
        let mut out = String::new();
        out.push_str(&format!(
            "{CACHE_HEADER}\nkey {key}\nsize {}\n",
            basis.len()
        ));
        for (g, se) in model.gram.data.iter().zip(&model.stderr) {
            out.push_str(&format!("{} {} {}\n", g.re, g.im, se));
        }
        let mut f = fs::File::create(&path).map_err(io)?;
        f.write_all(out.as_bytes()).map_err(io)?;
        Ok(model)
    }
}

fn read_cache(path: &std::path::Path, key: &str, size: usize) -> Option<(CMat, Vec<f64>)> {
    let text = fs::read_to_string(path).ok()?;
    let mut lines = text.lines();
    if lines.next()? != CACHE_HEADER || lines.next()?.strip_prefix("key ")? != key {
        return None;
    }
    if lines.next()?.strip_prefix("size ")?.parse::<usize>().ok()? != size {
        return None;
    }
    let mut gram = CMat::zeros(size);
    let mut stderr = Vec::with_capacity(size * size);
    for i in 0..size * size {
        let mut it = lines.next()?.split(' ').map(|v| v.parse::<f64>());
        let (re, im, se) = (it.next()?.ok()?, it.next()?.ok()?, it.next()?.ok()?);
        gram.data[i] = C64::new(re, im);
        stderr.push(se);
    }
    Some((gram, stderr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn zero(n: usize) -> Weight {
        Weight::parse("zero", n).unwrap()
    }

    #[test]
    fn monomial_norm_examples() {
        // n = 1: 2 pi int_0^1 t^{2k+1} dt = pi/(k+1)
        for k in 0..8u32 {
            let oracle = 2.0 * PI / (2.0 * k as f64 + 2.0);
            assert!((exact_monomial_norm(&[k], 1) - oracle).abs() < 1e-14);
        }
        assert!((exact_monomial_norm(&[0], 1) - PI).abs() < 1e-15);
        assert!((exact_monomial_norm(&[0, 0], 2) - PI * PI / 2.0).abs() < 1e-14);
    }

    #[test]
    fn basis_sizes_and_order() {
        let b = BasisSpec::full(2, 3);
        assert_eq!(b.len(), 10);
        assert_eq!(b.indices[1], vec![1, 0]);
        assert_eq!(b.indices[2], vec![0, 1]);
        assert_eq!(b.prefix_len(1), 3);
        let b3 = BasisSpec::full(3, 4);
        assert_eq!(b3.len(), 35);
        assert_eq!(BasisSpec::axis(2, 10).len(), 11);
    }

    #[test]
    fn exact_path_is_identity_and_matches_closed_form() {
        let w = zero(1);
        let m = assemble_gram(&w, 0.0, &BasisSpec::full(1, 10), &GramMethod::Exact).unwrap();
        assert_eq!(m.gram, CMat::identity(11));
        let k0 = kernel_at(&m, &CPoint::origin(1)).unwrap().value;
        assert!((k0 - 1.0 / PI).abs() < 1e-15);
        let m = assemble_gram(&w, 0.0, &BasisSpec::full(1, 40), &GramMethod::Exact).unwrap();
        let k = kernel_at(&m, &CPoint::from_re(&[0.5])).unwrap().value;
        assert!((k / (1.0 / (PI * 0.75 * 0.75)) - 1.0).abs() < 0.01);
        let m = assemble_gram(&zero(2), 0.0, &BasisSpec::full(2, 10), &GramMethod::Exact).unwrap();
        let k = kernel_at(&m, &CPoint::origin(2)).unwrap().value;
        assert!((k - 2.0 / (PI * PI)).abs() < 1e-14);
    }

    #[test]
    fn exact_path_refuses_weighted_gram() {
        let w = Weight::parse("normal_log:c=1", 1).unwrap();
        assert!(assemble_gram(&w, 0.5, &BasisSpec::full(1, 3), &GramMethod::Exact).is_err());
    }

    #[test]
    fn mc_path_is_identity_within_noise() {
        let m = assemble_gram(
            &zero(1),
            0.0,
            &BasisSpec::full(1, 10),
            &GramMethod::MonteCarlo {
                budget: 1_000_000,
                seed: 3,
            },
        )
        .unwrap();
        assert!(
            m.identity_deviation_sigmas() < 4.5,
            "{}",
            m.identity_deviation_sigmas()
        );
        for j in 0..11 {
            for k in 0..11 {
                if j != k {
                    assert!(m.gram.get(j, k).norm() < 4.5 * m.stderr[j * 11 + k]);
                }
            }
        }
    }

    #[test]
    fn axis_and_full_bases_agree_for_invariant_weights() {
        let w = Weight::parse("normal_log:c=1+smooth:a=0.3", 2).unwrap();
        let method = GramMethod::MonteCarlo {
            budget: 200_000,
            seed: 9,
        };
        let full = assemble_gram(&w, 0.5, &BasisSpec::full(2, 6), &method).unwrap();
        let axis = assemble_gram(&w, 0.5, &BasisSpec::axis(2, 6), &method).unwrap();
        let z = CPoint::axis(2, 0, 0.5);
        let kf = kernel_at(&full, &z).unwrap().value;
        let ka = kernel_at(&axis, &z).unwrap().value;
        // the off-block Gram entries are pure noise in the full model
        assert!((kf / ka - 1.0).abs() < 0.02, "{kf} vs {ka}");
    }

    #[test]
    fn axis_model_rejects_off_axis_points_for_non_invariant_weights() {
        let w = Weight::parse("normal_log:c=1", 2).unwrap();
        let m = assemble_gram(
            &w,
            0.0,
            &BasisSpec::axis(2, 3),
            &GramMethod::MonteCarlo {
                budget: 1000,
                seed: 1,
            },
        )
        .unwrap();
        assert!(kernel_at(&m, &CPoint::axis(2, 1, 0.3)).is_err());
        assert!(kernel_at(&m, &CPoint::axis(2, 0, 1.0)).is_err());
    }

    #[test]
    fn kernel_is_monotone_in_degree() {
        let w = Weight::parse("normal_log:c=1", 1).unwrap();
        let m = assemble_gram(
            &w,
            0.7,
            &BasisSpec::full(1, 20),
            &GramMethod::MonteCarlo {
                budget: 50_000,
                seed: 2,
            },
        )
        .unwrap();
        let ks = m.kernel_by_degree(&CPoint::from_re(&[0.8])).unwrap();
        assert!(ks.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn ray_matches_disc_kernel() {
        let grid = crate::fit::geometric_grid(0.05, 0.3, 8);
        let ray = kernel_ray(
            &zero(1),
            0.0,
            &CPoint::axis(1, 0, 1.0),
            &grid,
            &DegreeRule::standard(1),
            &GramMethod::Exact,
            None,
        )
        .unwrap();
        for p in &ray.points {
            let exact = 1.0 / (PI * (2.0 * p.r - p.r * p.r).powi(2));
            assert!(
                (p.eval.value / exact - 1.0).abs() < 0.02,
                "r={} {}",
                p.r,
                p.eval.value / exact
            );
        }
        let fit = exponent_fit(&ray.points).unwrap();
        assert!((fit.fit.slope - 2.0).abs() < 0.02, "{}", fit.fit.slope);
    }

    #[test]
    fn ray_in_other_direction_uses_the_same_geometry() {
        let zeta = CPoint::new(vec![C64::new(0.0, 0.6), C64::new(0.8, 0.0)]).unwrap();
        let grid = [0.1, 0.2, 0.3];
        let ray = kernel_ray(
            &zero(2),
            0.0,
            &zeta,
            &grid,
            &DegreeRule::standard(2),
            &GramMethod::Exact,
            None,
        )
        .unwrap();
        for p in &ray.points {
            let exact = ball_kernel(2, (1.0 - p.r).powi(2));
            assert!((p.eval.value / exact - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("lelong-gram-test-{}", std::process::id()));
        let cache = GramCache::new(&dir, false);
        let w = Weight::parse("normal_log:c=1", 1).unwrap();
        let basis = BasisSpec::full(1, 6);
        let method = GramMethod::MonteCarlo {
            budget: 5000,
            seed: 4,
        };
        let a = cache.load_or_build(&w, 0.5, &basis, &method).unwrap();
        let b = cache.load_or_build(&w, 0.5, &basis, &method).unwrap();
        assert_eq!(a.gram, b.gram);
        assert_eq!(a.stderr, b.stderr);
        let other = cache.load_or_build(&w, 0.6, &basis, &method).unwrap();
        assert_ne!(a.gram, other.gram);
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn exponent_fit_needs_four_converged_points() {
        let mk = |r: f64, converged| RayPoint {
            r,
            eval: KernelEvaluation {
                z: CPoint::origin(1),
                degree: 5,
                value: 1.0 / r,
                t: 0.0,
                weight_id: "zero".into(),
            },
            increment: 0.0,
            converged,
        };
        let pts = vec![mk(0.1, true), mk(0.2, true), mk(0.3, true), mk(0.05, false)];
        assert!(exponent_fit(&pts).is_err());
    }
}
