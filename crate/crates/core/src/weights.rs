//! Catalog of plurisubharmonic test weights with analytic Lelong oracles, the torus
//! supremum, and the directional and thin-set Lelong estimators.
//!
//! Spec strings (CLI and cache keys):
//!
//! ```text
//! weight := term ('+' term)*
//! term   := [coef '*'] atom | [coef '*'] 'max(' weight ('|' weight)* ')'
//! atom   := zero | const:k=K | smooth:a=A | normal_log:c=C | tangential_log:c=C
//!         | interior_log:c=C,a=P
//! P      := comp (';' comp)*        comp := re | re@im
//! ```
//!
//! `smooth` is `a|z|^2`, `normal_log` is `c log|1-z_1|`, `tangential_log` is `c log|z_2|`,
//! `interior_log` is `c log|z-a|`.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fit::{fit_line, SlopeFit};
use crate::geometry::{frame_at, CPoint, Frame, Region};
use crate::linalg::{norm_sqr, CMat};
use crate::quadrature::sup_estimate;
use crate::rng::SeededStream;

pub const DEFAULT_DOMAIN_RADIUS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WeightExpr {
    Zero,
    Constant { k: f64 },
    Smooth { a: f64 },
    NormalLog { c: f64 },
    TangentialLog { c: f64 },
    InteriorLog { a: Vec<C64>, c: f64 },
    ScaledSum(Vec<(f64, WeightExpr)>),
    Max(Vec<WeightExpr>),
}

/// Affine holomorphic factor `h(z) = sum v_j z_j - b`, appearing as `c log|h|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineFactor {
    pub v: Vec<C64>,
    pub b: C64,
    pub c: f64,
}

impl AffineFactor {
    pub fn eval(&self, z: &[C64]) -> C64 {
        self.v.iter().zip(z).map(|(a, b)| a * b).sum::<C64>() - self.b
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SingularLocus {
    None,
    Factors(Vec<AffineFactor>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LelongOracle {
    pub boundary_point: CPoint,
    pub nu_tilde: f64,
    pub interior: Vec<(CPoint, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weight {
    pub n: usize,
    pub expr: WeightExpr,
    pub domain_radius: f64,
    /// Upper bound of the raw weight on the closed domain ball; subtract it to get a
    /// nonpositive weight.
    pub normalization_offset: f64,
    /// Evaluate at `U z` instead of `z`.
    pub transport: Option<CMat>,
}

impl WeightExpr {
    fn eval(&self, z: &[C64]) -> f64 {
        match self {
            WeightExpr::Zero => 0.0,
            WeightExpr::Constant { k } => *k,
            WeightExpr::Smooth { a } => a * norm_sqr(z),
            WeightExpr::NormalLog { c } => c * (C64::new(1.0, 0.0) - z[0]).norm().ln(),
            WeightExpr::TangentialLog { c } => c * z[1].norm().ln(),
            WeightExpr::InteriorLog { a, c } => {
                let d: f64 = z.iter().zip(a).map(|(x, y)| (x - y).norm_sqr()).sum();
                0.5 * c * d.ln()
            }
            WeightExpr::ScaledSum(terms) => terms.iter().map(|(s, e)| s * e.eval(z)).sum(),
            WeightExpr::Max(items) => items
                .iter()
                .map(|e| e.eval(z))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// `eval(a + d)` with affine factors expanded as `h(a) + (linear part)(d)`.
    fn eval_offset(&self, a: &[C64], d: &[C64]) -> f64 {
        let one = C64::new(1.0, 0.0);
        match self {
            WeightExpr::Zero => 0.0,
            WeightExpr::Constant { k } => *k,
            WeightExpr::Smooth { a: s } => {
                s * a
                    .iter()
                    .zip(d)
                    .map(|(x, y)| (x + y).norm_sqr())
                    .sum::<f64>()
            }
            WeightExpr::NormalLog { c } => c * ((one - a[0]) - d[0]).norm().ln(),
            WeightExpr::TangentialLog { c } => c * (a[1] + d[1]).norm().ln(),
            WeightExpr::InteriorLog { a: p, c } => {
                let s: f64 = a
                    .iter()
                    .zip(d)
                    .zip(p)
                    .map(|((x, y), q)| ((x - q) + y).norm_sqr())
                    .sum();
                0.5 * c * s.ln()
            }
            WeightExpr::ScaledSum(terms) => {
                terms.iter().map(|(s, e)| s * e.eval_offset(a, d)).sum()
            }
            WeightExpr::Max(items) => items
                .iter()
                .map(|e| e.eval_offset(a, d))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    fn sup_on_ball(&self, radius: f64) -> f64 {
        match self {
            WeightExpr::Zero => 0.0,
            WeightExpr::Constant { k } => *k,
            WeightExpr::Smooth { a } => a * radius * radius,
            WeightExpr::NormalLog { c } => c * (1.0 + radius).ln(),
            WeightExpr::TangentialLog { c } => c * radius.ln(),
            WeightExpr::InteriorLog { a, c } => c * (radius + norm_sqr(a).sqrt()).ln(),
            WeightExpr::ScaledSum(terms) => {
                terms.iter().map(|(s, e)| s * e.sup_on_ball(radius)).sum()
            }
            WeightExpr::Max(items) => items
                .iter()
                .map(|e| e.sup_on_ball(radius))
                .fold(f64::NEG_INFINITY, f64::max),
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        let nonneg = |name: &str, x: f64| {
            if x.is_finite() && x >= 0.0 {
                Ok(())
            } else {
                Err(invalid(name, format!("must be finite and >= 0, got {x}")))
            }
        };
        match self {
            WeightExpr::Zero => Ok(()),
            WeightExpr::Constant { k } => {
                if k.is_finite() {
                    Ok(())
                } else {
                    Err(invalid("k", "must be finite"))
                }
            }
            WeightExpr::Smooth { a } => nonneg("a", *a),
            WeightExpr::NormalLog { c } => nonneg("c", *c),
            WeightExpr::TangentialLog { c } => {
                if n < 2 {
                    return Err(invalid("tangential_log", "needs n >= 2"));
                }
                nonneg("c", *c)
            }
            WeightExpr::InteriorLog { a, c } => {
                nonneg("c", *c)?;
                if a.len() != n {
                    return Err(Error::Dimension {
                        expected: n,
                        got: a.len(),
                    });
                }
                if a.iter().any(|x| !x.re.is_finite() || !x.im.is_finite()) || norm_sqr(a) >= 1.0 {
                    return Err(invalid("a", "must be a finite point of the open unit ball"));
                }
                Ok(())
            }
            WeightExpr::ScaledSum(terms) => {
                if terms.is_empty() {
                    return Err(invalid("scaled_sum", "needs at least one term"));
                }
                for (s, e) in terms {
                    nonneg("coef", *s)?;
                    e.validate(n)?;
                }
                Ok(())
            }
            WeightExpr::Max(items) => {
                if items.is_empty() {
                    return Err(invalid("max", "needs at least one argument"));
                }
                items.iter().try_for_each(|e| e.validate(n))
            }
        }
    }

    /// Invariant under `z' -> (e^{i t_2} z_2, ..., e^{i t_n} z_n)`.
    fn axis_torus_invariant(&self) -> bool {
        match self {
            WeightExpr::Zero
            | WeightExpr::Constant { .. }
            | WeightExpr::Smooth { .. }
            | WeightExpr::NormalLog { .. }
            | WeightExpr::TangentialLog { .. } => true,
            WeightExpr::InteriorLog { a, .. } => a[1..].iter().all(|x| *x == C64::new(0.0, 0.0)),
            WeightExpr::ScaledSum(t) => t.iter().all(|(_, e)| e.axis_torus_invariant()),
            WeightExpr::Max(t) => t.iter().all(|e| e.axis_torus_invariant()),
        }
    }

    fn unitary_invariant(&self) -> bool {
        match self {
            WeightExpr::Zero | WeightExpr::Constant { .. } | WeightExpr::Smooth { .. } => true,
            WeightExpr::InteriorLog { a, .. } => a.iter().all(|x| *x == C64::new(0.0, 0.0)),
            WeightExpr::ScaledSum(t) => t.iter().all(|(_, e)| e.unitary_invariant()),
            WeightExpr::Max(t) => t.iter().all(|e| e.unitary_invariant()),
            _ => false,
        }
    }

    fn nu_tilde_e1(&self) -> f64 {
        match self {
            WeightExpr::Zero
            | WeightExpr::Constant { .. }
            | WeightExpr::Smooth { .. }
            | WeightExpr::InteriorLog { .. } => 0.0,
            WeightExpr::NormalLog { c } => *c,
            WeightExpr::TangentialLog { c } => 0.5 * c,
            WeightExpr::ScaledSum(t) => t.iter().map(|(s, e)| s * e.nu_tilde_e1()).sum(),
            WeightExpr::Max(t) => t
                .iter()
                .map(|e| e.nu_tilde_e1())
                .fold(f64::INFINITY, f64::min),
        }
    }

    fn lelong_at(&self, p: &[C64]) -> f64 {
        let tol = 1e-14;
        match self {
            WeightExpr::Zero | WeightExpr::Constant { .. } | WeightExpr::Smooth { .. } => 0.0,
            WeightExpr::NormalLog { c } => {
                if (p[0] - C64::new(1.0, 0.0)).norm() < tol {
                    *c
                } else {
                    0.0
                }
            }
            WeightExpr::TangentialLog { c } => {
                if p[1].norm() < tol {
                    *c
                } else {
                    0.0
                }
            }
            WeightExpr::InteriorLog { a, c } => {
                if p.iter().zip(a).all(|(x, y)| (x - y).norm() < tol) {
                    *c
                } else {
                    0.0
                }
            }
            WeightExpr::ScaledSum(t) => t.iter().map(|(s, e)| s * e.lelong_at(p)).sum(),
            WeightExpr::Max(t) => t
                .iter()
                .map(|e| e.lelong_at(p))
                .fold(f64::INFINITY, f64::min),
        }
    }

    fn interior_poles(&self, out: &mut Vec<Vec<C64>>) {
        match self {
            WeightExpr::InteriorLog { a, .. } => {
                if !out.contains(a) {
                    out.push(a.clone());
                }
            }
            WeightExpr::ScaledSum(t) => t.iter().for_each(|(_, e)| e.interior_poles(out)),
            WeightExpr::Max(t) => t.iter().for_each(|e| e.interior_poles(out)),
            _ => {}
        }
    }

    fn factors(&self, n: usize, scale: f64, out: &mut Vec<AffineFactor>) {
        let e = |j: usize| {
            let mut v = vec![C64::new(0.0, 0.0); n];
            v[j] = C64::new(1.0, 0.0);
            v
        };
        match self {
            WeightExpr::NormalLog { c } => {
                let mut v = e(0);
                v[0] = C64::new(-1.0, 0.0);
                out.push(AffineFactor {
                    v,
                    b: C64::new(-1.0, 0.0),
                    c: c * scale,
                });
            }
            WeightExpr::TangentialLog { c } => out.push(AffineFactor {
                v: e(1),
                b: C64::new(0.0, 0.0),
                c: c * scale,
            }),
            WeightExpr::InteriorLog { a, c } if n == 1 => out.push(AffineFactor {
                v: e(0),
                b: a[0],
                c: c * scale,
            }),
            WeightExpr::ScaledSum(t) => t.iter().for_each(|(s, x)| x.factors(n, scale * s, out)),
            WeightExpr::Max(t) => t.iter().for_each(|x| x.factors(n, scale, out)),
            _ => {}
        }
    }

    pub fn to_spec(&self) -> String {
        fn num(x: f64) -> String {
            format!("{x}")
        }
        match self {
            WeightExpr::Zero => "zero".into(),
            WeightExpr::Constant { k } => format!("const:k={}", num(*k)),
            WeightExpr::Smooth { a } => format!("smooth:a={}", num(*a)),
            WeightExpr::NormalLog { c } => format!("normal_log:c={}", num(*c)),
            WeightExpr::TangentialLog { c } => format!("tangential_log:c={}", num(*c)),
            WeightExpr::InteriorLog { a, c } => {
                let pts: Vec<String> = a
                    .iter()
                    .map(|z| {
                        if z.im == 0.0 {
                            num(z.re)
                        } else {
                            format!("{}@{}", num(z.re), num(z.im))
                        }
                    })
                    .collect();
                format!("interior_log:c={},a={}", num(*c), pts.join(";"))
            }
            WeightExpr::ScaledSum(t) => {
                fn flatten(scale: f64, t: &[(f64, WeightExpr)], out: &mut Vec<(f64, WeightExpr)>) {
                    for (s, e) in t {
                        match e {
                            WeightExpr::ScaledSum(inner) => flatten(scale * s, inner, out),
                            _ => out.push((scale * s, e.clone())),
                        }
                    }
                }
                let mut flat = Vec::new();
                flatten(1.0, t, &mut flat);
                flat.iter()
                    .map(|(s, e)| {
                        if *s == 1.0 {
                            e.to_spec()
                        } else {
                            format!("{}*{}", num(*s), e.to_spec())
                        }
                    })
                    .collect::<Vec<_>>()
                    .join("+")
            }
            WeightExpr::Max(items) => format!(
                "max({})",
                items
                    .iter()
                    .map(|e| e.to_spec())
                    .collect::<Vec<_>>()
                    .join("|")
            ),
        }
    }
}

impl Weight {
    pub fn new(expr: WeightExpr, n: usize) -> Result<Self> {
        Self::with_domain(expr, n, DEFAULT_DOMAIN_RADIUS)
    }

    pub fn with_domain(expr: WeightExpr, n: usize, domain_radius: f64) -> Result<Self> {
        if n == 0 {
            return Err(invalid("n", "must be at least 1"));
        }
        if !(domain_radius > 1.0) {
            return Err(invalid("domain_radius", "must exceed 1"));
        }
        expr.validate(n)?;
        let normalization_offset = expr.sup_on_ball(domain_radius);
        Ok(Weight {
            n,
            expr,
            domain_radius,
            normalization_offset,
            transport: None,
        })
    }

    pub fn parse(spec: &str, n: usize) -> Result<Self> {
        Self::new(parse_expr(spec.trim(), spec)?, n)
    }

    pub fn id(&self) -> String {
        let mut s = self.expr.to_spec();
        if let Some(u) = &self.transport {
            let h = u.data.iter().fold(0u64, |acc, c| {
                acc.rotate_left(7) ^ c.re.to_bits() ^ c.im.to_bits().rotate_left(3)
            });
            s.push_str(&format!("@U{h:016x}"));
        }
        s
    }

    #[inline]
    pub fn eval(&self, z: &[C64]) -> f64 {
        match &self.transport {
            None => self.expr.eval(z),
            Some(u) => self.expr.eval(&u.mul_vec(z)),
        }
    }

    /// `psi(anchor + d)`, accurate when `anchor` lies on a singular set and `d` is tiny.
    pub fn eval_offset(&self, anchor: &[C64], d: &[C64]) -> f64 {
        match &self.transport {
            None => self.expr.eval_offset(anchor, d),
            Some(u) => self.expr.eval_offset(&u.mul_vec(anchor), &u.mul_vec(d)),
        }
    }

    /// `psi - normalization_offset`, nonpositive on the closed domain ball.
    #[inline]
    pub fn eval_normalized(&self, z: &[C64]) -> f64 {
        self.eval(z) - self.normalization_offset
    }

    /// `psi o U`.
    pub fn transported(&self, u: &CMat) -> Weight {
        let combined = match &self.transport {
            None => u.clone(),
            Some(v) => v.mul(u),
        };
        Weight {
            transport: if combined.is_identity() {
                None
            } else {
                Some(combined)
            },
            ..self.clone()
        }
    }

    pub fn is_axis_torus_invariant(&self) -> bool {
        self.transport.is_none() && self.expr.axis_torus_invariant()
    }

    pub fn is_unitary_invariant(&self) -> bool {
        self.expr.unitary_invariant()
    }

    pub fn singular_locus(&self) -> SingularLocus {
        let mut f = Vec::new();
        self.expr.factors(self.n, 1.0, &mut f);
        if let Some(u) = &self.transport {
            // h(U z) = (U^T v) . z - b
            for fac in f.iter_mut() {
                let v: Vec<C64> = (0..self.n)
                    .map(|j| (0..self.n).map(|i| fac.v[i] * u.get(i, j)).sum())
                    .collect();
                fac.v = v;
            }
        }
        if f.is_empty() {
            SingularLocus::None
        } else {
            SingularLocus::Factors(f)
        }
    }

    /// Hyperplane factor with the largest coefficient, if any.
    pub fn dominant_factor(&self) -> Option<AffineFactor> {
        match self.singular_locus() {
            SingularLocus::None => None,
            SingularLocus::Factors(f) => f.into_iter().max_by(|a, b| a.c.total_cmp(&b.c)),
        }
    }

    /// Analytic Lelong data in canonical coordinates (boundary point `e_1`). `None` for
    /// transported weights.
    pub fn oracle(&self) -> Option<LelongOracle> {
        if self.transport.is_some() {
            return None;
        }
        let mut poles = Vec::new();
        self.expr.interior_poles(&mut poles);
        Some(LelongOracle {
            boundary_point: CPoint::axis(self.n, 0, 1.0),
            nu_tilde: self.expr.nu_tilde_e1(),
            interior: poles
                .into_iter()
                .map(|a| {
                    let v = self.expr.lelong_at(&a);
                    (CPoint { coords: a }, v)
                })
                .collect(),
        })
    }

    pub fn classical_lelong_at(&self, p: &CPoint) -> f64 {
        match &self.transport {
            None => self.expr.lelong_at(&p.coords),
            Some(u) => self.expr.lelong_at(&u.mul_vec(&p.coords)),
        }
    }
}

fn split_top(s: &str, sep: char) -> Vec<&str> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    let bytes: Vec<char> = s.chars().collect();
    let mut idx = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            c if c == sep && depth == 0 => {
                let exp_sign = sep == '+'
                    && idx > 0
                    && matches!(bytes[idx - 1], 'e' | 'E')
                    && idx >= 2
                    && bytes[idx - 2].is_ascii_digit();
                if !exp_sign {
                    out.push(&s[start..i]);
                    start = i + ch.len_utf8();
                }
            }
            _ => {}
        }
        idx += 1;
    }
    out.push(&s[start..]);
    out
}

fn parse_expr(s: &str, full: &str) -> Result<WeightExpr> {
    let err = |reason: String| Error::WeightSpec {
        spec: full.to_string(),
        reason,
    };
    let terms = split_top(s, '+');
    if terms.iter().any(|t| t.trim().is_empty()) {
        return Err(err("empty term".into()));
    }
    let mut parsed = Vec::new();
    for t in terms {
        let t = t.trim();
        let (coef, body) = match t.find('*') {
            Some(i) if !t[..i].contains('(') => {
                let c: f64 = t[..i]
                    .trim()
                    .parse()
                    .map_err(|_| err(format!("bad coefficient `{}`", &t[..i])))?;
                (c, t[i + 1..].trim())
            }
            _ => (1.0, t),
        };
        let e = if let Some(inner) = body.strip_prefix("max(") {
            let inner = inner
                .strip_suffix(')')
                .ok_or_else(|| err("unbalanced parenthesis".into()))?;
            let args = split_top(inner, '|')
                .into_iter()
                .map(|a| parse_expr(a.trim(), full))
                .collect::<Result<Vec<_>>>()?;
            WeightExpr::Max(args)
        } else {
            parse_atom(body, full)?
        };
        parsed.push((coef, e));
    }
    if parsed.len() == 1 && parsed[0].0 == 1.0 {
        return Ok(parsed.pop().unwrap().1);
    }
    Ok(WeightExpr::ScaledSum(parsed))
}

fn parse_atom(s: &str, full: &str) -> Result<WeightExpr> {
    let err = |reason: String| Error::WeightSpec {
        spec: full.to_string(),
        reason,
    };
    let (name, params) = match s.find(':') {
        Some(i) => (&s[..i], &s[i + 1..]),
        None => (s, ""),
    };
    let mut kv: Vec<(&str, &str)> = Vec::new();
    for p in params.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| err(format!("parameter `{p}` is not key=value")))?;
        kv.push((k.trim(), v.trim()));
    }
    let get = |key: &str| -> Result<f64> {
        let v = kv
            .iter()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| err(format!("`{name}` needs parameter `{key}`")))?
            .1;
        v.parse()
            .map_err(|_| err(format!("`{key}={v}` is not a number")))
    };
    let allowed: &[&str] = match name.trim() {
        "zero" => &[],
        "const" => &["k"],
        "smooth" | "smooth_quadratic" => &["a"],
        "normal_log" | "tangential_log" => &["c"],
        "interior_log" => &["c", "a"],
        other => return Err(err(format!("unknown weight kind `{other}`"))),
    };
    if let Some((k, _)) = kv.iter().find(|(k, _)| !allowed.contains(k)) {
        return Err(err(format!("unknown parameter `{k}` for `{name}`")));
    }
    Ok(match name.trim() {
        "zero" => WeightExpr::Zero,
        "const" => WeightExpr::Constant { k: get("k")? },
        "smooth" | "smooth_quadratic" => WeightExpr::Smooth { a: get("a")? },
        "normal_log" => WeightExpr::NormalLog { c: get("c")? },
        "tangential_log" => WeightExpr::TangentialLog { c: get("c")? },
        _ => {
            let raw = kv
                .iter()
                .find(|(k, _)| *k == "a")
                .ok_or_else(|| err("`interior_log` needs parameter `a`".into()))?
                .1;
            let mut a = Vec::new();
            for comp in raw.split(';') {
                let (re, im) = match comp.split_once('@') {
                    Some((r, i)) => (r, i),
                    None => (comp, "0"),
                };
                let re: f64 = re
                    .trim()
                    .parse()
                    .map_err(|_| err(format!("bad point `{raw}`")))?;
                let im: f64 = im
                    .trim()
                    .parse()
                    .map_err(|_| err(format!("bad point `{raw}`")))?;
                a.push(C64::new(re, im));
            }
            WeightExpr::InteriorLog { a, c: get("c")? }
        }
    })
}

/// Build a catalog weight from a kind name and numeric parameters.
pub fn catalog_make(kind: &str, params: &[(&str, f64)], n: usize) -> Result<Weight> {
    let p = |k: &str| {
        params
            .iter()
            .find(|(name, _)| *name == k)
            .map(|(_, v)| *v)
            .ok_or_else(|| invalid(k, format!("missing for `{kind}`")))
    };
    let expr = match kind {
        "zero" => WeightExpr::Zero,
        "const" => WeightExpr::Constant { k: p("k")? },
        "smooth" | "smooth_quadratic" => WeightExpr::Smooth { a: p("a")? },
        "normal_log" => WeightExpr::NormalLog { c: p("c")? },
        "tangential_log" => WeightExpr::TangentialLog { c: p("c")? },
        "interior_log" => {
            let mut a = vec![C64::new(0.0, 0.0); n];
            for (j, slot) in a.iter_mut().enumerate() {
                if let Some((_, v)) = params.iter().find(|(k, _)| *k == format!("a{}", j + 1)) {
                    *slot = C64::new(*v, 0.0);
                }
            }
            WeightExpr::InteriorLog { a, c: p("c")? }
        }
        other => return Err(invalid("kind", format!("unknown weight kind `{other}`"))),
    };
    Weight::new(expr, n)
}

/// The standard catalog in dimension `n`: one instance of every kind, including a
/// scaled sum and a max combination.
pub fn full_catalog(n: usize) -> Vec<Weight> {
    let mut specs = vec![
        "zero".to_string(),
        "smooth:a=0.5".to_string(),
        "normal_log:c=1".to_string(),
    ];
    let a: Vec<String> = (0..n)
        .map(|j| if j == 0 { "0.3".into() } else { "0".into() })
        .collect();
    specs.push(format!("interior_log:c=1,a={}", a.join(";")));
    specs.push("0.5*normal_log:c=1+smooth:a=0.2".into());
    if n >= 2 {
        specs.push("tangential_log:c=1".into());
        specs.push("max(normal_log:c=1|tangential_log:c=2)".into());
    } else {
        specs.push("max(normal_log:c=1|interior_log:c=2,a=0.3)".to_string());
    }
    specs
        .iter()
        .map(|s| Weight::parse(s, n).expect("catalog specs are valid"))
        .collect()
}

/// Grid resolution per angle for the torus search.
pub fn torus_grid_per_angle(n: usize) -> usize {
    match n {
        1 | 2 => 64,
        3 | 4 => 16,
        _ => 8,
    }
}

fn torus_point(r: f64, angles: &[f64]) -> Vec<C64> {
    let sr = r.sqrt();
    angles
        .iter()
        .enumerate()
        .map(|(j, t)| C64::from_polar(if j == 0 { r } else { sr }, *t))
        .collect()
}

/// Supremum of `f` over the torus `(r e^{i t_1}, sqrt(r) e^{i t_2}, ...)` in local coordinates.
/// Level `l` uses a grid of `base * 2^l` angles per axis followed by cyclic golden-section
/// refinement around the best cell; the result is the max over levels `0..=l`.
pub fn torus_sup_fn<F: Fn(&[C64]) -> f64>(f: F, n: usize, r: f64, level: u32) -> (f64, Vec<f64>) {
    let mut best = (f64::NEG_INFINITY, vec![0.0; n]);
    for l in 0..=level {
        let m = torus_grid_per_angle(n) << l;
        let cand = torus_search_level(&f, n, r, m);
        if cand.0 > best.0 {
            best = cand;
        }
    }
    best
}

fn torus_search_level<F: Fn(&[C64]) -> f64>(f: &F, n: usize, r: f64, m: usize) -> (f64, Vec<f64>) {
    let h = 2.0 * PI / m as f64;
    let total = m.pow(n as u32);
    let mut best_val = f64::NEG_INFINITY;
    let mut best_angles = vec![0.0; n];
    let mut angles = vec![0.0; n];
    for idx in 0..total {
        let mut rem = idx;
        for a in angles.iter_mut() {
            *a = (rem % m) as f64 * h;
            rem /= m;
        }
        let v = f(&torus_point(r, &angles));
        if v > best_val {
            best_val = v;
            best_angles.copy_from_slice(&angles);
        }
    }
    // golden-section per angle, two cyclic passes
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut cur = best_angles.clone();
    let mut cur_val = best_val;
    for _ in 0..2 {
        for j in 0..n {
            let (mut lo, mut hi) = (cur[j] - h, cur[j] + h);
            let eval = |t: f64, cur: &Vec<f64>| {
                let mut a = cur.clone();
                a[j] = t;
                f(&torus_point(r, &a))
            };
            let mut x1 = hi - g * (hi - lo);
            let mut x2 = lo + g * (hi - lo);
            let mut f1 = eval(x1, &cur);
            let mut f2 = eval(x2, &cur);
            for _ in 0..40 {
                if f1 >= f2 {
                    hi = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = hi - g * (hi - lo);
                    f1 = eval(x1, &cur);
                } else {
                    lo = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = lo + g * (hi - lo);
                    f2 = eval(x2, &cur);
                }
            }
            let (xb, fb) = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
            if fb > cur_val {
                cur_val = fb;
                cur[j] = xb;
            }
        }
    }
    (cur_val, cur)
}

/// `sup_theta psi(F_zeta(r e^{i t_1}, sqrt(r) e^{i t_2}, ...))`.
pub fn torus_sup(psi: &Weight, zeta: &CPoint, r: f64, level: u32) -> Result<f64> {
    let frame = frame_at(zeta)?;
    check_torus_domain(psi, &frame, r)?;
    Ok(torus_sup_fn(|w| psi.eval(&frame.apply(w)), psi.n, r, level).0)
}

fn check_torus_domain(psi: &Weight, frame: &Frame, r: f64) -> Result<()> {
    let reach = 1.0
        + Region::TorusShell {
            frame: frame.clone(),
            r,
        }
        .euclidean_extent();
    if !(r > 0.0) || reach >= psi.domain_radius {
        return Err(Error::Region(format!(
            "torus of radius {r} leaves the weight's domain (reach {reach} >= {})",
            psi.domain_radius
        )));
    }
    Ok(())
}

/// Slope of `torus_sup` against `log r`; estimates the directional Lelong number.
pub fn directional_lelong_estimate(
    psi: &Weight,
    zeta: &CPoint,
    r_grid: &[f64],
) -> Result<SlopeFit> {
    if r_grid.len() < 3 {
        return Err(Error::DegenerateFit {
            needed: 3,
            got: r_grid.len(),
        });
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut pts = Vec::new();
    for &r in r_grid {
        let s = torus_sup(psi, zeta, r, 0)?;
        xs.push(r.ln());
        ys.push(s);
        pts.push((r, s));
    }
    fit_line("log r", pts, &xs, &ys, 3)
}

/// Shrink factor `delta_r` for the thin sets `E_r = B(z, r delta_r)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shrink {
    /// `1 / log(1/r)`.
    InverseLog,
    /// `log(1/r)^{-k}`.
    InverseLogPower(f64),
    Constant(f64),
    /// `r^p`; rejected for `p > 0` since `log(1/delta)` is then not `o(log 1/r)`.
    Power(f64),
}

impl Shrink {
    pub fn delta(&self, r: f64) -> f64 {
        match self {
            Shrink::InverseLog => 1.0 / (1.0 / r).ln(),
            Shrink::InverseLogPower(k) => (1.0 / r).ln().powf(-k),
            Shrink::Constant(d) => *d,
            Shrink::Power(p) => r.powf(*p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Shrink::Power(p) if *p > 0.0 => Err(invalid(
                "shrink",
                "r^p with p > 0 violates log(1/delta_r) = o(log 1/r)",
            )),
            Shrink::Constant(d) if !(*d > 0.0 && *d <= 1.0) => {
                Err(invalid("shrink", "constant shrink must lie in (0, 1]"))
            }
            Shrink::InverseLogPower(k) if !(*k >= 0.0) => {
                Err(invalid("shrink", "power must be >= 0"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThinSetFit {
    /// `sup_{E_r} psi` against `log r`.
    pub raw: SlopeFit,
    /// Same values against `log(r delta_r)`, the log-radius of `E_r`.
    pub effective: SlopeFit,
}

/// Lelong number at `z` from suprema over shrunken balls `B(z, r delta_r)`.
pub fn thin_set_lelong(
    psi: &Weight,
    z: &CPoint,
    r_grid: &[f64],
    shrink: Shrink,
    budget: u64,
    stream: &SeededStream,
) -> Result<ThinSetFit> {
    shrink.validate()?;
    if r_grid.len() < 3 {
        return Err(Error::DegenerateFit {
            needed: 3,
            got: r_grid.len(),
        });
    }
    let mut pts = Vec::new();
    let (mut xr, mut xe, mut ys) = (Vec::new(), Vec::new(), Vec::new());
    for (i, &r) in r_grid.iter().enumerate() {
        let rho = r * shrink.delta(r);
        let region = Region::EuclideanBall {
            center: z.clone(),
            radius: rho,
        };
        let s = sup_estimate(
            &|w: &[C64]| psi.eval(w),
            &region,
            budget,
            &stream.child(i as u64),
        );
        pts.push((r, s.value));
        xr.push(r.ln());
        xe.push(rho.ln());
        ys.push(s.value);
    }
    Ok(ThinSetFit {
        raw: fit_line("log r", pts.clone(), &xr, &ys, 3)?,
        effective: fit_line("log(r delta_r)", pts, &xe, &ys, 3)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::geometric_grid;

    fn e1(n: usize) -> CPoint {
        CPoint::axis(n, 0, 1.0)
    }

    #[test]
    fn parse_round_trip() {
        for s in [
            "zero",
            "normal_log:c=1.5+smooth:a=0.2",
            "2*tangential_log:c=1",
            "max(normal_log:c=1|tangential_log:c=2)",
            "interior_log:c=3,a=0.1@0.2;0",
            "const:k=-1",
        ] {
            let w = Weight::parse(s, 2).unwrap();
            let again = Weight::parse(&w.id(), 2).unwrap();
            assert_eq!(w.expr, again.expr, "{s}");
        }
    }

    #[test]
    fn parse_errors() {
        assert!(Weight::parse("bogus:c=1", 2).is_err());
        assert!(Weight::parse("normal_log", 2).is_err());
        assert!(Weight::parse("normal_log:c=-1", 2).is_err());
        assert!(Weight::parse("normal_log:c=1,z=2", 2).is_err());
        assert!(Weight::parse("tangential_log:c=1", 1).is_err());
        assert!(Weight::parse("interior_log:c=1,a=1.5", 1).is_err());
        assert!(Weight::parse("max(zero", 1).is_err());
        assert!(Weight::parse("normal_log:c=1+", 1).is_err());
    }

    #[test]
    fn exponent_sign_is_not_a_term_separator() {
        let w = Weight::parse("smooth:a=1e+0", 1).unwrap();
        assert_eq!(w.expr, WeightExpr::Smooth { a: 1.0 });
    }

    #[test]
    fn catalog_oracles() {
        let w = catalog_make("normal_log", &[("c", 1.0)], 2).unwrap();
        assert_eq!(w.oracle().unwrap().nu_tilde, 1.0);
        let w = catalog_make("tangential_log", &[("c", 1.0)], 2).unwrap();
        assert_eq!(w.oracle().unwrap().nu_tilde, 0.5);
        let w = catalog_make("interior_log", &[("c", 1.0)], 1).unwrap();
        let o = w.oracle().unwrap();
        assert_eq!(o.nu_tilde, 0.0);
        assert_eq!(o.interior, vec![(CPoint::origin(1), 1.0)]);
        let m = Weight::parse("max(normal_log:c=1|tangential_log:c=4)", 2).unwrap();
        assert_eq!(m.oracle().unwrap().nu_tilde, 1.0);
        let s = Weight::parse("normal_log:c=1+tangential_log:c=4", 2).unwrap();
        assert_eq!(s.oracle().unwrap().nu_tilde, 3.0);
    }

    #[test]
    fn normalized_weights_are_nonpositive_on_domain() {
        let s = SeededStream::new(3, 0);
        for n in [1, 2, 3] {
            for w in full_catalog(n) {
                let ball = Region::EuclideanBall {
                    center: CPoint::origin(n),
                    radius: w.domain_radius,
                };
                for k in 0..20_000 {
                    let z = crate::quadrature::sample_region(&ball, k, &s);
                    let v = w.eval_normalized(&z.coords);
                    assert!(v <= 1e-12, "{} at {:?}: {v}", w.id(), z);
                }
            }
        }
    }

    #[test]
    fn torus_sup_examples() {
        let r = 1e-3;
        let w = Weight::parse("normal_log:c=1", 2).unwrap();
        assert!((torus_sup(&w, &e1(2), r, 0).unwrap() - r.ln()).abs() < 1e-12);
        let w = Weight::parse("tangential_log:c=1", 2).unwrap();
        assert!((torus_sup(&w, &e1(2), r, 0).unwrap() - 0.5 * r.ln()).abs() < 1e-12);
        // log|w_1 - 2| peaks at theta_1 = pi
        let r = 0.1;
        let (v, ang) = torus_sup_fn(|w| (w[0] - C64::new(2.0, 0.0)).norm().ln(), 1, r, 0);
        assert!((v - (2.0 + r).ln()).abs() < 1e-12);
        assert!((ang[0] - PI).abs() < 1e-5);
    }

    #[test]
    fn torus_sup_is_monotone_in_level() {
        let w = Weight::parse("interior_log:c=1,a=0.3@0.1;0.2", 2).unwrap();
        let z = CPoint::new(vec![C64::new(0.6, 0.0), C64::new(0.0, 0.8)]).unwrap();
        let a = torus_sup(&w, &z, 0.05, 0).unwrap();
        let b = torus_sup(&w, &z, 0.05, 1).unwrap();
        assert!(b >= a);
    }

    #[test]
    fn torus_leaving_domain_is_rejected() {
        let w = Weight::parse("zero", 2).unwrap();
        assert!(torus_sup(&w, &e1(2), 0.9, 0).is_err());
    }

    #[test]
    fn directional_estimates() {
        let grid = geometric_grid(1e-4, 1e-2, 6);
        let w = Weight::parse("normal_log:c=2", 2).unwrap();
        let f = directional_lelong_estimate(&w, &e1(2), &grid).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-6);
        let w = Weight::parse("tangential_log:c=2", 2).unwrap();
        let f = directional_lelong_estimate(&w, &e1(2), &grid).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-6);
        let w = Weight::parse("zero", 2).unwrap();
        let f = directional_lelong_estimate(&w, &e1(2), &grid).unwrap();
        assert!(f.slope.abs() < 1e-12);
        assert!(directional_lelong_estimate(&w, &e1(2), &grid[..2]).is_err());
    }

    #[test]
    fn shrink_validation() {
        assert!(Shrink::InverseLog.validate().is_ok());
        assert!(Shrink::Power(0.5).validate().is_err());
        let r: f64 = 1e-4;
        assert!((Shrink::InverseLog.delta(r) - 1.0 / (1.0 / r).ln()).abs() < 1e-15);
    }

    #[test]
    fn thin_set_interior_log() {
        let w = catalog_make("interior_log", &[("c", 1.0)], 1).unwrap();
        let grid = geometric_grid(1e-6, 1e-3, 6);
        let f = thin_set_lelong(
            &w,
            &CPoint::origin(1),
            &grid,
            Shrink::InverseLog,
            4096,
            &SeededStream::new(1, 0),
        )
        .unwrap();
        // closed form: sup = log r - log log(1/r)
        for (r, v) in &f.raw.points {
            let exact = r.ln() - (1.0 / r).ln().ln();
            assert!((v - exact).abs() < 1e-3, "{r}: {v} vs {exact}");
        }
        assert!((f.effective.slope - 1.0).abs() < 1e-3);
        let z = Weight::parse("zero", 1).unwrap();
        let f0 = thin_set_lelong(
            &z,
            &CPoint::origin(1),
            &grid,
            Shrink::InverseLog,
            1024,
            &SeededStream::new(1, 0),
        )
        .unwrap();
        assert_eq!(f0.raw.slope, 0.0);
    }
}
