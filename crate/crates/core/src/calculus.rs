//! Cylinder functions on configurations, their gradients, the logarithmic
//! derivative term and the generators of the four diffusions.
//!
//! Configurations are passed as flat coordinate slices (`n * d` values).
//! Pair displacements follow the box convention (minimum image when
//! periodic); the single-particle term `phi(x)` is measured from the origin.

use serde::{Deserialize, Serialize};

use crate::dynamics::System;
use crate::error::{invalid, Error, Result};
use crate::gibbs::EnergyModel;
use crate::potentials::PairPotential;

/// Coefficient of the single-particle term `grad phi(x)` in `grad log p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignConvention {
    Plus,
    Minus,
}

impl SignConvention {
    pub fn value(self) -> f64 {
        match self {
            SignConvention::Plus => 1.0,
            SignConvention::Minus => -1.0,
        }
    }

    /// The convention selected by `verify::resolve_sign_conventions` on
    /// interacting ensembles. It matches the density `exp(-E) prod exp(-phi(x))`.
    pub fn resolved() -> Self {
        SignConvention::Minus
    }

    pub fn flipped(self) -> Self {
        match self {
            SignConvention::Plus => SignConvention::Minus,
            SignConvention::Minus => SignConvention::Plus,
        }
    }
}

impl std::fmt::Display for SignConvention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SignConvention::Plus => "+1",
            SignConvention::Minus => "-1",
        })
    }
}

/// `(b, c, lap)` with `b` the bump value, `grad b = c (x - center)` and `lap = Laplacian b`.
#[inline]
fn bump_parts(x: &[f64], center: &[f64], radius: f64, amplitude: f64) -> (f64, f64, f64) {
    let r2 = radius * radius;
    let s = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>() / r2;
    if s >= 1.0 {
        return (0.0, 0.0, 0.0);
    }
    let u = 1.0 / (1.0 - s);
    let b = amplitude * (1.0 - u).exp();
    if b == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let c = -2.0 * b * u * u / r2;
    let lap = c * (2.0 * s * u * (2.0 - u) + x.len() as f64);
    (b, c, lap)
}

fn check_center(center: &[f64], radius: f64) -> Result<()> {
    if center.is_empty() || center.iter().any(|c| !c.is_finite()) {
        return invalid("center must be a nonempty finite vector");
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return invalid("radius must be positive and finite");
    }
    Ok(())
}

/// Smooth compactly supported `f: R^d -> R` with exact derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TestFunction {
    /// `A exp(1 - 1/(1 - |x - c|^2 / R^2))` inside the ball, 0 outside.
    Bump { center: Vec<f64>, radius: f64, amplitude: f64 },
    /// `(offset + slope . (x - c))` times a unit-amplitude bump.
    LinearBump { center: Vec<f64>, radius: f64, offset: f64, slope: Vec<f64> },
    /// Constant; used only where the support condition is irrelevant.
    Constant(f64),
}

impl TestFunction {
    pub fn bump(center: Vec<f64>, radius: f64, amplitude: f64) -> Result<Self> {
        check_center(&center, radius)?;
        Ok(TestFunction::Bump { center, radius, amplitude })
    }

    pub fn linear_bump(center: Vec<f64>, radius: f64, offset: f64, slope: Vec<f64>) -> Result<Self> {
        check_center(&center, radius)?;
        if slope.len() != center.len() {
            return invalid("slope and center dimensions differ");
        }
        Ok(TestFunction::LinearBump { center, radius, offset, slope })
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            TestFunction::Bump { center, .. } | TestFunction::LinearBump { center, .. } => Some(center.len()),
            TestFunction::Constant(_) => None,
        }
    }

    /// Radius of a ball containing the support, `None` for constants.
    pub fn support_radius(&self) -> Option<(Vec<f64>, f64)> {
        match self {
            TestFunction::Bump { center, radius, .. } | TestFunction::LinearBump { center, radius, .. } => {
                Some((center.clone(), *radius))
            }
            TestFunction::Constant(_) => None,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Bump { center, radius, amplitude } => bump_parts(x, center, *radius, *amplitude).0,
            TestFunction::LinearBump { center, radius, offset, slope } => {
                let b = bump_parts(x, center, *radius, 1.0).0;
                if b == 0.0 {
                    return 0.0;
                }
                (offset + dot_shift(slope, x, center)) * b
            }
            TestFunction::Constant(c) => *c,
        }
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        match self {
            TestFunction::Bump { center, radius, amplitude } => {
                let (_, c, _) = bump_parts(x, center, *radius, *amplitude);
                for k in 0..out.len() {
                    out[k] = c * (x[k] - center[k]);
                }
            }
            TestFunction::LinearBump { center, radius, offset, slope } => {
                let (b, c, _) = bump_parts(x, center, *radius, 1.0);
                let l = offset + dot_shift(slope, x, center);
                for k in 0..out.len() {
                    out[k] = slope[k] * b + l * c * (x[k] - center[k]);
                }
            }
            TestFunction::Constant(_) => out.iter_mut().for_each(|o| *o = 0.0),
        }
    }

    pub fn gradient_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.gradient(x, &mut out);
        out
    }

    pub fn laplacian(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Bump { center, radius, amplitude } => bump_parts(x, center, *radius, *amplitude).2,
            TestFunction::LinearBump { center, radius, offset, slope } => {
                let (_, c, lap) = bump_parts(x, center, *radius, 1.0);
                let l = offset + dot_shift(slope, x, center);
                2.0 * c * dot_shift(slope, x, center) + l * lap
            }
            TestFunction::Constant(_) => 0.0,
        }
    }
}

#[inline]
fn dot_shift(a: &[f64], x: &[f64], c: &[f64]) -> f64 {
    a.iter().zip(x).zip(c).map(|((a, x), c)| a * (x - c)).sum()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Smooth compactly supported vector field with exact divergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum VectorField {
    Zero,
    /// `direction * b(x)` with a unit bump `b`.
    BumpField { direction: Vec<f64>, center: Vec<f64>, radius: f64 },
    /// `A (x - c) b(x)`.
    RadialBump { center: Vec<f64>, radius: f64, amplitude: f64 },
    /// `A (-(x2 - c2), x1 - c1) b(x)` in `d = 2`; divergence free.
    Rotational { center: [f64; 2], radius: f64, amplitude: f64 },
}

impl VectorField {
    pub fn bump_field(direction: Vec<f64>, center: Vec<f64>, radius: f64) -> Result<Self> {
        check_center(&center, radius)?;
        if direction.len() != center.len() {
            return invalid("direction and center dimensions differ");
        }
        Ok(VectorField::BumpField { direction, center, radius })
    }

    pub fn radial_bump(center: Vec<f64>, radius: f64, amplitude: f64) -> Result<Self> {
        check_center(&center, radius)?;
        Ok(VectorField::RadialBump { center, radius, amplitude })
    }

    pub fn rotational(center: [f64; 2], radius: f64, amplitude: f64) -> Result<Self> {
        check_center(&center, radius)?;
        Ok(VectorField::Rotational { center, radius, amplitude })
    }

    pub fn value(&self, x: &[f64], out: &mut [f64]) {
        match self {
            VectorField::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            VectorField::BumpField { direction, center, radius } => {
                let b = bump_parts(x, center, *radius, 1.0).0;
                for k in 0..out.len() {
                    out[k] = direction[k] * b;
                }
            }
            VectorField::RadialBump { center, radius, amplitude } => {
                let b = bump_parts(x, center, *radius, *amplitude).0;
                for k in 0..out.len() {
                    out[k] = (x[k] - center[k]) * b;
                }
            }
            VectorField::Rotational { center, radius, amplitude } => {
                let b = bump_parts(x, center, *radius, *amplitude).0;
                out[0] = -(x[1] - center[1]) * b;
                out[1] = (x[0] - center[0]) * b;
            }
        }
    }

    pub fn value_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.value(x, &mut out);
        out
    }

    pub fn divergence(&self, x: &[f64]) -> f64 {
        match self {
            VectorField::Zero | VectorField::Rotational { .. } => 0.0,
            VectorField::BumpField { direction, center, radius } => {
                let (_, c, _) = bump_parts(x, center, *radius, 1.0);
                c * dot_shift(direction, x, center)
            }
            VectorField::RadialBump { center, radius, amplitude } => {
                let (b, c, _) = bump_parts(x, center, *radius, *amplitude);
                let r2: f64 = x.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                x.len() as f64 * b + c * r2
            }
        }
    }
}

#[inline]
fn sigmoid(q: f64) -> f64 {
    if q >= 0.0 {
        1.0 / (1.0 + (-q).exp())
    } else {
        let e = q.exp();
        e / (1.0 + e)
    }
}

/// Smooth outer function `g: R^N -> R` with exact first and second partials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OuterFunction {
    Constant { value: f64, arity: usize },
    /// `constant + weights . t`.
    Linear { constant: f64, weights: Vec<f64> },
    /// `A exp(-|t - m|^2 / (2 w^2))`.
    GaussianBump { center: Vec<f64>, width: f64, amplitude: f64 },
    /// `p(t) sigmoid(q(t))` with affine `p = p0 + p . t`, `q = q0 + q . t`.
    PolySigmoid { p0: f64, p: Vec<f64>, q0: f64, q: Vec<f64> },
    /// `left(t[..k]) * right(t[k..])` with `k = left.arity()`.
    Product(Box<OuterFunction>, Box<OuterFunction>),
}

impl OuterFunction {
    pub fn identity() -> Self {
        OuterFunction::Linear { constant: 0.0, weights: vec![1.0] }
    }

    pub fn arity(&self) -> usize {
        match self {
            OuterFunction::Constant { arity, .. } => *arity,
            OuterFunction::Linear { weights, .. } => weights.len(),
            OuterFunction::GaussianBump { center, .. } => center.len(),
            OuterFunction::PolySigmoid { p, .. } => p.len(),
            OuterFunction::Product(a, b) => a.arity() + b.arity(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            OuterFunction::GaussianBump { width, .. } if !(*width > 0.0) => invalid("gaussian width must be positive"),
            OuterFunction::PolySigmoid { p, q, .. } if p.len() != q.len() => invalid("sigmoid coefficient lengths differ"),
            OuterFunction::Product(a, b) => {
                a.validate()?;
                b.validate()
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, t: &[f64]) -> f64 {
        match self {
            OuterFunction::Constant { value, .. } => *value,
            OuterFunction::Linear { constant, weights } => constant + dot(weights, t),
            OuterFunction::GaussianBump { center, width, amplitude } => {
                let r2: f64 = t.iter().zip(center).map(|(a, m)| (a - m) * (a - m)).sum();
                amplitude * (-r2 / (2.0 * width * width)).exp()
            }
            OuterFunction::PolySigmoid { p0, p, q0, q } => (p0 + dot(p, t)) * sigmoid(q0 + dot(q, t)),
            OuterFunction::Product(a, b) => {
                let k = a.arity();
                a.value(&t[..k]) * b.value(&t[k..])
            }
        }
    }

    pub fn gradient(&self, t: &[f64]) -> Vec<f64> {
        match self {
            OuterFunction::Constant { arity, .. } => vec![0.0; *arity],
            OuterFunction::Linear { weights, .. } => weights.clone(),
            OuterFunction::GaussianBump { center, width, .. } => {
                let g = self.value(t);
                let w2 = width * width;
                t.iter().zip(center).map(|(a, m)| -g * (a - m) / w2).collect()
            }
            OuterFunction::PolySigmoid { p0, p, q0, q } => {
                let pv = p0 + dot(p, t);
                let s = sigmoid(q0 + dot(q, t));
                let ds = s * (1.0 - s);
                p.iter().zip(q).map(|(pi, qi)| pi * s + pv * ds * qi).collect()
            }
            OuterFunction::Product(a, b) => {
                let k = a.arity();
                let (va, vb) = (a.value(&t[..k]), b.value(&t[k..]));
                let mut g: Vec<f64> = a.gradient(&t[..k]).into_iter().map(|x| x * vb).collect();
                g.extend(b.gradient(&t[k..]).into_iter().map(|x| x * va));
                g
            }
        }
    }

    /// Row-major `N x N` Hessian.
    pub fn hessian(&self, t: &[f64]) -> Vec<f64> {
        let n = self.arity();
        match self {
            OuterFunction::Constant { .. } | OuterFunction::Linear { .. } => vec![0.0; n * n],
            OuterFunction::GaussianBump { center, width, .. } => {
                let g = self.value(t);
                let w2 = width * width;
                let mut h = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let delta = if i == j { 1.0 / w2 } else { 0.0 };
                        h[i * n + j] = g * ((t[i] - center[i]) * (t[j] - center[j]) / (w2 * w2) - delta);
                    }
                }
                h
            }
            OuterFunction::PolySigmoid { p0, p, q0, q } => {
                let pv = p0 + dot(p, t);
                let s = sigmoid(q0 + dot(q, t));
                let ds = s * (1.0 - s);
                let dds = ds * (1.0 - 2.0 * s);
                let mut h = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        h[i * n + j] = ds * (p[i] * q[j] + p[j] * q[i]) + pv * dds * q[i] * q[j];
                    }
                }
                h
            }
            OuterFunction::Product(a, b) => {
                let k = a.arity();
                let (ta, tb) = (&t[..k], &t[k..]);
                let (va, vb) = (a.value(ta), b.value(tb));
                let (ga, gb) = (a.gradient(ta), b.gradient(tb));
                let (ha, hb) = (a.hessian(ta), b.hessian(tb));
                let m = n - k;
                let mut h = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        h[i * n + j] = match (i < k, j < k) {
                            (true, true) => ha[i * k + j] * vb,
                            (false, false) => hb[(i - k) * m + (j - k)] * va,
                            (true, false) => ga[i] * gb[j - k],
                            (false, true) => gb[i - k] * ga[j],
                        };
                    }
                }
                h
            }
        }
    }
}

/// Per-configuration lift data of the inner functions.
struct Lifted {
    /// `<f_j, gamma>`.
    t: Vec<f64>,
    /// `<Laplacian f_j, gamma>`.
    lap: Vec<f64>,
    /// `<grad f_j, gamma>`, row-major `N x d`.
    trans: Vec<f64>,
    /// `grad f_j(x_i)`, indexed `(i * N + j) * d + k`.
    grads: Vec<f64>,
}

/// `F(gamma) = g(<f_1, gamma>, ..., <f_N, gamma>)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CylinderFunction {
    dim: usize,
    outer: OuterFunction,
    inner: Vec<TestFunction>,
}

impl CylinderFunction {
    pub fn new(dim: usize, outer: OuterFunction, inner: Vec<TestFunction>) -> Result<Self> {
        if dim == 0 {
            return invalid("dimension must be positive");
        }
        if inner.is_empty() {
            return invalid("a cylinder function needs at least one inner function");
        }
        if outer.arity() != inner.len() {
            return invalid(format!("outer arity {} does not match {} inner functions", outer.arity(), inner.len()));
        }
        if inner.iter().any(|f| f.dim().is_some_and(|k| k != dim)) {
            return invalid("inner function dimension does not match");
        }
        outer.validate()?;
        Ok(Self { dim, outer, inner })
    }

    /// `F = <f, gamma>`.
    pub fn linear(dim: usize, f: TestFunction) -> Result<Self> {
        Self::new(dim, OuterFunction::identity(), vec![f])
    }

    pub fn constant(dim: usize, value: f64) -> Self {
        Self { dim, outer: OuterFunction::Constant { value, arity: 1 }, inner: vec![TestFunction::Constant(0.0)] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn outer(&self) -> &OuterFunction {
        &self.outer
    }

    pub fn inner(&self) -> &[TestFunction] {
        &self.inner
    }

    /// `F G` as a cylinder function.
    pub fn product(&self, other: &CylinderFunction) -> Result<Self> {
        if self.dim != other.dim {
            return invalid("factors live in different dimensions");
        }
        let mut inner = self.inner.clone();
        inner.extend(other.inner.iter().cloned());
        Self::new(self.dim, OuterFunction::Product(Box::new(self.outer.clone()), Box::new(other.outer.clone())), inner)
    }

    fn check(&self, coords: &[f64]) -> Result<usize> {
        if coords.len() % self.dim != 0 {
            return invalid("coordinate length is not a multiple of the dimension");
        }
        Ok(coords.len() / self.dim)
    }

    pub fn lifts(&self, coords: &[f64]) -> Result<Vec<f64>> {
        self.check(coords)?;
        Ok(self
            .inner
            .iter()
            .map(|f| coords.chunks_exact(self.dim).map(|x| f.value(x)).sum())
            .collect())
    }

    fn lifted(&self, coords: &[f64]) -> Result<Lifted> {
        let n = self.check(coords)?;
        let (nf, d) = (self.inner.len(), self.dim);
        let mut t = vec![0.0; nf];
        let mut lap = vec![0.0; nf];
        let mut trans = vec![0.0; nf * d];
        let mut grads = vec![0.0; n * nf * d];
        for (i, x) in coords.chunks_exact(d).enumerate() {
            for (j, f) in self.inner.iter().enumerate() {
                t[j] += f.value(x);
                lap[j] += f.laplacian(x);
                let g = &mut grads[(i * nf + j) * d..(i * nf + j + 1) * d];
                f.gradient(x, g);
                for k in 0..d {
                    trans[j * d + k] += g[k];
                }
            }
        }
        Ok(Lifted { t, lap, trans, grads })
    }

    pub fn eval(&self, coords: &[f64]) -> Result<f64> {
        Ok(self.outer.value(&self.lifts(coords)?))
    }

    /// `grad_x F` at every point, flat `n * d`.
    pub fn grad_config(&self, coords: &[f64]) -> Result<Vec<f64>> {
        let l = self.lifted(coords)?;
        Ok(self.config_gradient(&l, coords.len() / self.dim, &self.outer.gradient(&l.t)))
    }

    fn config_gradient(&self, l: &Lifted, n: usize, dg: &[f64]) -> Vec<f64> {
        let (nf, d) = (self.inner.len(), self.dim);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..nf {
                if dg[j] == 0.0 {
                    continue;
                }
                for k in 0..d {
                    out[i * d + k] += dg[j] * l.grads[(i * nf + j) * d + k];
                }
            }
        }
        out
    }

    /// Gradient along uniform translations: `sum_j d_j g <grad f_j, gamma>`.
    pub fn grad_translation(&self, coords: &[f64]) -> Result<Vec<f64>> {
        let l = self.lifted(coords)?;
        Ok(self.translation_gradient(&l, &self.outer.gradient(&l.t)))
    }

    fn translation_gradient(&self, l: &Lifted, dg: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        for (j, g) in dg.iter().enumerate() {
            for k in 0..d {
                out[k] += g * l.trans[j * d + k];
            }
        }
        out
    }

    /// `sum_x (grad_x F, v(x))`.
    pub fn directional_derivative(&self, v: &VectorField, coords: &[f64]) -> Result<f64> {
        let g = self.grad_config(coords)?;
        let mut vx = vec![0.0; self.dim];
        let mut s = 0.0;
        for (x, gx) in coords.chunks_exact(self.dim).zip(g.chunks_exact(self.dim)) {
            v.value(x, &mut vx);
            s += dot(gx, &vx);
        }
        Ok(s)
    }

    /// `sum_x Laplacian_x F`.
    fn config_laplacian(&self, l: &Lifted, n: usize, dg: &[f64], h: &[f64]) -> f64 {
        let (nf, d) = (self.inner.len(), self.dim);
        let mut s: f64 = dg.iter().zip(&l.lap).map(|(a, b)| a * b).sum();
        for i in 0..n {
            for a in 0..nf {
                for b in 0..nf {
                    let hab = h[a * nf + b];
                    if hab != 0.0 {
                        let ga = &l.grads[(i * nf + a) * d..(i * nf + a + 1) * d];
                        let gb = &l.grads[(i * nf + b) * d..(i * nf + b + 1) * d];
                        s += hab * dot(ga, gb);
                    }
                }
            }
        }
        s
    }

    /// Second derivative along uniform translations, summed over directions.
    fn translation_laplacian(&self, l: &Lifted, dg: &[f64], h: &[f64]) -> f64 {
        let (nf, d) = (self.inner.len(), self.dim);
        let mut s: f64 = dg.iter().zip(&l.lap).map(|(a, b)| a * b).sum();
        for a in 0..nf {
            for b in 0..nf {
                let hab = h[a * nf + b];
                if hab != 0.0 {
                    s += hab * dot(&l.trans[a * d..(a + 1) * d], &l.trans[b * d..(b + 1) * d]);
                }
            }
        }
        s
    }
}

/// `F(xi, gamma) = f(xi) F(gamma)` on the coupled state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductCylinderFunction {
    pub tagged: TestFunction,
    pub config: CylinderFunction,
}

impl ProductCylinderFunction {
    pub fn new(tagged: TestFunction, config: CylinderFunction) -> Result<Self> {
        if tagged.dim().is_some_and(|k| k != config.dim()) {
            return invalid("tagged factor dimension does not match");
        }
        Ok(Self { tagged, config })
    }

    pub fn eval(&self, xi: &[f64], coords: &[f64]) -> Result<f64> {
        let f = self.tagged.value(xi);
        if f == 0.0 {
            self.config.check(coords)?;
            return Ok(0.0);
        }
        Ok(f * self.config.eval(coords)?)
    }
}

fn core_error(what: &str, r2: f64) -> Error {
    Error::CoreOverlap(format!("{what} at distance {:.3e} is inside the hard core", r2.sqrt()))
}

/// `grad phi(x)` for the single-particle term, with core checks.
fn self_gradient(pot: &PairPotential, x: &[f64], out: &mut [f64]) -> Result<()> {
    let r2: f64 = x.iter().map(|c| c * c).sum();
    if pot.is_zero() {
        out.iter_mut().for_each(|o| *o = 0.0);
        return Ok(());
    }
    if r2 == 0.0 {
        return Err(Error::Singularity("particle at the origin".into()));
    }
    if pot.value_sq(r2).is_infinite() {
        return Err(core_error("particle and origin", r2));
    }
    let f = pot.gradient_factor_sq(r2);
    for (o, c) in out.iter_mut().zip(x) {
        *o = f * c;
    }
    Ok(())
}

/// `-sum_{j != i} grad phi(x_i - x_j)`, including fixed boundary particles.
pub fn pair_drift(model: &EnergyModel, coords: &[f64]) -> Result<Vec<f64>> {
    let b = model.sim_box();
    let d = b.dim();
    if coords.len() % d != 0 {
        return invalid("coordinate length is not a multiple of the dimension");
    }
    let n = coords.len() / d;
    let pot = model.potential();
    let mut out = vec![0.0; coords.len()];
    if pot.is_zero() {
        return Ok(out);
    }
    let mut disp = vec![0.0; d];
    for i in 0..n {
        let xi = &coords[i * d..(i + 1) * d];
        for j in (i + 1)..n {
            let xj = &coords[j * d..(j + 1) * d];
            b.displacement(xi, xj, &mut disp);
            let r2 = dot(&disp, &disp);
            if r2 == 0.0 || pot.value_sq(r2).is_infinite() {
                return Err(core_error("pair", r2));
            }
            let f = pot.gradient_factor_sq(r2);
            for k in 0..d {
                out[i * d + k] -= f * disp[k];
                out[j * d + k] += f * disp[k];
            }
        }
        for q in model.boundary_points() {
            b.displacement(xi, q, &mut disp);
            let r2 = dot(&disp, &disp);
            if r2 == 0.0 || pot.value_sq(r2).is_infinite() {
                return Err(core_error("boundary pair", r2));
            }
            let f = pot.gradient_factor_sq(r2);
            for k in 0..d {
                out[i * d + k] -= f * disp[k];
            }
        }
    }
    Ok(out)
}

/// `sum_x grad phi(x)`.
pub fn self_force_sum(pot: &PairPotential, coords: &[f64], dim: usize) -> Result<Vec<f64>> {
    let mut total = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    for x in coords.chunks_exact(dim) {
        self_gradient(pot, x, &mut g)?;
        for k in 0..dim {
            total[k] += g[k];
        }
    }
    Ok(total)
}

/// `grad_{x_i} log p` for `p = exp(-E) prod exp(s phi(x))`; the single-particle
/// term is omitted when `sign` is `None`.
pub fn log_density_gradient(model: &EnergyModel, coords: &[f64], sign: Option<SignConvention>) -> Result<Vec<f64>> {
    let mut out = pair_drift(model, coords)?;
    if let Some(s) = sign {
        let d = model.sim_box().dim();
        let s = s.value();
        let mut g = vec![0.0; d];
        for (x, o) in coords.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            self_gradient(model.potential(), x, &mut g)?;
            for k in 0..d {
                o[k] += s * g[k];
            }
        }
    }
    Ok(out)
}

/// `B_v = <div v, gamma> + s sum_x (grad phi(x), v(x)) - sum_pairs (grad phi(x - y), v(x) - v(y))`.
pub fn b_term(model: &EnergyModel, v: &VectorField, coords: &[f64], sign: SignConvention) -> Result<f64> {
    let d = model.sim_box().dim();
    let drift = log_density_gradient(model, coords, Some(sign))?;
    let mut vx = vec![0.0; d];
    let mut s = 0.0;
    for (x, dr) in coords.chunks_exact(d).zip(drift.chunks_exact(d)) {
        v.value(x, &mut vx);
        s += v.divergence(x) + dot(dr, &vx);
    }
    Ok(s)
}

fn check_dims(model: &EnergyModel, f: &CylinderFunction) -> Result<()> {
    if model.sim_box().dim() != f.dim() {
        return invalid("function and model dimensions differ");
    }
    Ok(())
}

fn gradient_generator(model: &EnergyModel, f: &CylinderFunction, coords: &[f64], sign: Option<SignConvention>) -> Result<f64> {
    check_dims(model, f)?;
    let n = f.check(coords)?;
    let l = f.lifted(coords)?;
    let dg = f.outer.gradient(&l.t);
    let h = f.outer.hessian(&l.t);
    let mut total = f.config_laplacian(&l, n, &dg, &h);
    if dg.iter().any(|&g| g != 0.0) {
        let drift = log_density_gradient(model, coords, sign)?;
        let grad = f.config_gradient(&l, n, &dg);
        total += dot(&grad, &drift);
    } else {
        log_density_gradient(model, coords, sign)?;
    }
    Ok(total)
}

/// Generator of the gradient dynamics without the single-particle drift.
pub fn gen_gsd(model: &EnergyModel, f: &CylinderFunction, coords: &[f64]) -> Result<f64> {
    gradient_generator(model, f, coords, None)
}

/// `sum d_i d_j g <(grad f_i, grad f_j), gamma> + sum d_j g (<Laplacian f_j, gamma>
/// + s <(grad phi, grad f_j), gamma> - sum_pairs (grad phi(x - y), grad f_j(x) - grad f_j(y)))`.
pub fn gen_gsdad(model: &EnergyModel, f: &CylinderFunction, coords: &[f64], sign: SignConvention) -> Result<f64> {
    gradient_generator(model, f, coords, Some(sign))
}

/// Translation part of the environment generator:
/// `sum d_i d_j g (<grad f_i>, <grad f_j>) + sum d_j g (<Laplacian f_j> + s (<grad phi>, <grad f_j>))`.
pub fn gen_translation(model: &EnergyModel, f: &CylinderFunction, coords: &[f64], sign: SignConvention) -> Result<f64> {
    check_dims(model, f)?;
    let l = f.lifted(coords)?;
    let dg = f.outer.gradient(&l.t);
    let h = f.outer.hessian(&l.t);
    let phi_sum = self_force_sum(model.potential(), coords, f.dim)?;
    let trans = f.translation_gradient(&l, &dg);
    Ok(f.translation_laplacian(&l, &dg, &h) + sign.value() * dot(&phi_sum, &trans))
}

/// `L_gsdad F + gen_translation F`.
pub fn gen_env(model: &EnergyModel, f: &CylinderFunction, coords: &[f64], sign: SignConvention) -> Result<f64> {
    Ok(gen_gsdad(model, f, coords, sign)? + gen_translation(model, f, coords, sign)?)
}

/// `f(xi) L_env F - 2 (grad_gamma F, grad f(xi)) - s sum_x (grad phi(x), grad f(xi)) F + Laplacian f(xi) F`.
pub fn gen_coup(
    model: &EnergyModel,
    p: &ProductCylinderFunction,
    xi: &[f64],
    coords: &[f64],
    sign: SignConvention,
) -> Result<f64> {
    let f = &p.config;
    check_dims(model, f)?;
    if xi.len() != f.dim {
        return invalid("tagged position has the wrong dimension");
    }
    let fx = p.tagged.value(xi);
    let gfx = p.tagged.gradient_vec(xi);
    let lfx = p.tagged.laplacian(xi);
    let env = gen_env(model, f, coords, sign)?;
    let big_f = f.eval(coords)?;
    let trans = f.grad_translation(coords)?;
    let phi_sum = self_force_sum(model.potential(), coords, f.dim)?;
    Ok(fx * env - 2.0 * dot(&trans, &gfx) - sign.value() * dot(&phi_sum, &gfx) * big_f + lfx * big_f)
}

/// Gradients of a state function: tagged, per-particle and translation parts.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGradients {
    pub tagged: Vec<f64>,
    pub config: Vec<f64>,
    pub translation: Vec<f64>,
}

/// A function on the state space of one of the four systems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StateFunction {
    Config(CylinderFunction),
    Tagged(ProductCylinderFunction),
}

impl StateFunction {
    pub fn dim(&self) -> usize {
        match self {
            StateFunction::Config(f) => f.dim(),
            StateFunction::Tagged(p) => p.config.dim(),
        }
    }

    pub fn eval(&self, xi: Option<&[f64]>, coords: &[f64]) -> Result<f64> {
        match self {
            StateFunction::Config(f) => f.eval(coords),
            StateFunction::Tagged(p) => {
                let xi = xi.ok_or_else(|| Error::InvalidArgument("tagged function needs a tagged position".into()))?;
                p.eval(xi, coords)
            }
        }
    }

    pub fn gradients(&self, xi: Option<&[f64]>, coords: &[f64]) -> Result<StateGradients> {
        let d = self.dim();
        match self {
            StateFunction::Config(f) => Ok(StateGradients {
                tagged: vec![0.0; d],
                config: f.grad_config(coords)?,
                translation: f.grad_translation(coords)?,
            }),
            StateFunction::Tagged(p) => {
                let xi = xi.ok_or_else(|| Error::InvalidArgument("tagged function needs a tagged position".into()))?;
                let fx = p.tagged.value(xi);
                let big_f = p.config.eval(coords)?;
                Ok(StateGradients {
                    tagged: p.tagged.gradient_vec(xi).into_iter().map(|g| g * big_f).collect(),
                    config: p.config.grad_config(coords)?.into_iter().map(|g| g * fx).collect(),
                    translation: p.config.grad_translation(coords)?.into_iter().map(|g| g * fx).collect(),
                })
            }
        }
    }

    /// `L F` for the generator of `system`.
    pub fn generator(
        &self,
        system: System,
        model: &EnergyModel,
        xi: Option<&[f64]>,
        coords: &[f64],
        sign: SignConvention,
    ) -> Result<f64> {
        match (self, system) {
            (StateFunction::Config(f), System::Gsd) => gen_gsd(model, f, coords),
            (StateFunction::Config(f), System::Gsdad) => gen_gsdad(model, f, coords, sign),
            (StateFunction::Config(f), System::Env | System::Coup) => gen_env(model, f, coords, sign),
            (StateFunction::Tagged(p), System::Coup) => {
                let xi = xi.ok_or_else(|| Error::InvalidArgument("coupled generator needs a tagged position".into()))?;
                gen_coup(model, p, xi, coords, sign)
            }
            (StateFunction::Tagged(_), _) => invalid(format!("tagged functions are not in the domain of {system}")),
        }
    }
}

/// Pointwise integrand of the Dirichlet form of `system`.
///
/// Per-particle systems use `sum_x (grad_x F, grad_x G)`; the environment adds
/// the translation term and the coupled process also carries the tagged terms.
pub fn carre_du_champ(
    system: System,
    a: &StateFunction,
    b: &StateFunction,
    xi: Option<&[f64]>,
    coords: &[f64],
) -> Result<f64> {
    let ga = a.gradients(xi, coords)?;
    let gb = b.gradients(xi, coords)?;
    let mut s = dot(&ga.config, &gb.config);
    if matches!(system, System::Env | System::Coup) {
        s += dot(&ga.translation, &gb.translation);
    }
    if system == System::Coup {
        s += dot(&ga.tagged, &gb.tagged) - dot(&ga.tagged, &gb.translation) - dot(&ga.translation, &gb.tagged);
    }
    Ok(s)
}

/// `|a - b| / max(|a|, |b|, 1e-3)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Objects whose analytic derivatives `fd_validate` can check.
#[derive(Debug, Clone, Copy)]
pub enum FdObject<'a> {
    Outer(&'a OuterFunction, &'a [f64]),
    Test(&'a TestFunction, &'a [f64]),
    Field(&'a VectorField, &'a [f64]),
    Cylinder(&'a CylinderFunction, &'a [f64]),
}

/// Central difference of `f` along coordinate `k` of `x`.
fn central(f: &dyn Fn(&[f64]) -> f64, x: &[f64], k: usize, h: f64) -> f64 {
    let mut y = x.to_vec();
    y[k] = x[k] + h;
    let fp = f(&y);
    y[k] = x[k] - h;
    let fm = f(&y);
    (fp - fm) / (2.0 * h)
}

/// Richardson-extrapolated second difference along coordinates `i` and `j`.
fn second(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, j: usize, h: f64) -> f64 {
    let at = |h: f64| {
        let mut y = x.to_vec();
        let mut shifted = |di: f64, dj: f64| {
            y.copy_from_slice(x);
            y[i] += di;
            y[j] += dj;
            f(&y)
        };
        if i == j {
            (shifted(h, 0.0) - 2.0 * f(x) + shifted(-h, 0.0)) / (h * h)
        } else {
            (shifted(h, h) - shifted(h, -h) - shifted(-h, h) + shifted(-h, -h)) / (4.0 * h * h)
        }
    };
    (4.0 * at(h) - at(2.0 * h)) / 3.0
}

fn second_steps(h: f64) -> impl Iterator<Item = f64> {
    [1.0, 2.0, 5.0].into_iter().map(move |m| m * h.max(1e-3))
}

/// Largest relative error between analytic derivatives and central differences.
///
/// First derivatives use step `h`. Second derivatives use Richardson pairs
/// at several steps from `max(h, 1e-3)` up and keep the closest agreement.
pub fn fd_validate(obj: FdObject<'_>, h: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&h) {
        return invalid("finite-difference step must lie in [1e-7, 1e-3]");
    }
    let mut worst: f64 = 0.0;
    match obj {
        FdObject::Outer(g, t) => {
            if t.len() != g.arity() {
                return invalid("argument length does not match arity");
            }
            let f = |y: &[f64]| g.value(y);
            let grad = g.gradient(t);
            let hess = g.hessian(t);
            let n = t.len();
            for i in 0..n {
                worst = worst.max(relative_error(grad[i], central(&f, t, i, h)));
                for j in 0..n {
                    let err = second_steps(h).map(|s| relative_error(hess[i * n + j], second(&f, t, i, j, s)));
                    worst = worst.max(err.fold(f64::INFINITY, f64::min));
                }
            }
        }
        FdObject::Test(tf, x) => {
            let f = |y: &[f64]| tf.value(y);
            let grad = tf.gradient_vec(x);
            for k in 0..x.len() {
                worst = worst.max(relative_error(grad[k], central(&f, x, k, h)));
            }
            let lap = tf.laplacian(x);
            let err = second_steps(h).map(|s| relative_error(lap, (0..x.len()).map(|k| second(&f, x, k, k, s)).sum()));
            worst = worst.max(err.fold(f64::INFINITY, f64::min));
        }
        FdObject::Field(v, x) => {
            let mut div = 0.0;
            for k in 0..x.len() {
                let f = |y: &[f64]| v.value_vec(y)[k];
                div += central(&f, x, k, h);
            }
            worst = worst.max(relative_error(v.divergence(x), div));
        }
        FdObject::Cylinder(cf, coords) => {
            let d = cf.dim();
            let f = |y: &[f64]| cf.eval(y).unwrap_or(f64::NAN);
            let grad = cf.grad_config(coords)?;
            for k in 0..coords.len() {
                worst = worst.max(relative_error(grad[k], central(&f, coords, k, h)));
            }
            let trans = cf.grad_translation(coords)?;
            for k in 0..d {
                let shifted = |s: f64| {
                    let y: Vec<f64> = coords.iter().enumerate().map(|(i, c)| if i % d == k { c + s } else { *c }).collect();
                    f(&y)
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                worst = worst.max(relative_error(trans[k], fd));
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BoundaryMode, SimBox};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(d: usize, mode: BoundaryMode, pot: PairPotential) -> EnergyModel {
        EnergyModel::new(pot, SimBox::new(d, 10.0, mode).unwrap())
    }

    fn lj() -> PairPotential {
        PairPotential::lennard_jones(0.04).unwrap()
    }

    fn random_config(rng: &mut ChaCha8Rng, d: usize, n: usize) -> Vec<f64> {
        let mut c: Vec<f64> = Vec::new();
        while c.len() < n * d {
            let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let r2: f64 = p.iter().map(|x| x * x).sum();
            let ok = r2 > 0.81 && c.chunks_exact(d).all(|q| q.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() > 0.81);
            if ok {
                c.extend(p);
            }
        }
        c
    }

    fn random_outer(rng: &mut ChaCha8Rng, n: usize) -> OuterFunction {
        let v = |rng: &mut ChaCha8Rng| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        match rng.gen_range(0..3) {
            0 => OuterFunction::Linear { constant: rng.gen_range(-1.0..1.0), weights: v(rng) },
            1 => OuterFunction::GaussianBump { center: v(rng), width: rng.gen_range(0.5..2.0), amplitude: rng.gen_range(0.5..2.0) },
            _ => OuterFunction::PolySigmoid { p0: rng.gen_range(-1.0..1.0), p: v(rng), q0: rng.gen_range(-1.0..1.0), q: v(rng) },
        }
    }

    fn random_test_function(rng: &mut ChaCha8Rng, d: usize) -> TestFunction {
        let center: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let radius = rng.gen_range(1.5..3.5);
        if rng.gen_bool(0.5) {
            TestFunction::bump(center, radius, rng.gen_range(0.5..2.0)).unwrap()
        } else {
            let slope = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            TestFunction::linear_bump(center, radius, rng.gen_range(-1.0..1.0), slope).unwrap()
        }
    }

    fn random_cylinder(rng: &mut ChaCha8Rng, d: usize) -> CylinderFunction {
        let n = rng.gen_range(1..=3);
        let inner = (0..n).map(|_| random_test_function(rng, d)).collect();
        CylinderFunction::new(d, random_outer(rng, n), inner).unwrap()
    }

    #[test]
    fn bump_derivatives_match_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 1..=3 {
            for _ in 0..50 {
                let f = random_test_function(&mut rng, d);
                let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
                assert!(fd_validate(FdObject::Test(&f, &x), 1e-5).unwrap() < 1e-6);
            }
        }
        let g = TestFunction::bump(vec![0.0, 0.0], 1.0, 1.0).unwrap();
        assert_eq!(g.value(&[0.0, 0.0]), 1.0);
        assert_eq!(g.value(&[1.0, 0.0]), 0.0);
        assert_eq!(g.laplacian(&[0.7, 0.8]), 0.0);
        let c = TestFunction::Constant(2.0);
        assert_eq!(fd_validate(FdObject::Test(&c, &[0.3]), 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn outer_and_field_derivatives() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.gen_range(1..4);
            let g = random_outer(&mut rng, n);
            let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let err = fd_validate(FdObject::Outer(&g, &t), 1e-5).unwrap();
            assert!(err < 1e-6, "{g:?} at {t:?}: {err}");
        }
        let lin = OuterFunction::Linear { constant: 1.0, weights: vec![2.0, -1.0] };
        assert!(lin.hessian(&[0.3, 0.4]).iter().all(|&h| h == 0.0));
        let prod = OuterFunction::Product(Box::new(random_outer(&mut rng, 2)), Box::new(random_outer(&mut rng, 1)));
        assert!(fd_validate(FdObject::Outer(&prod, &[0.2, -0.4, 0.9]), 1e-5).unwrap() < 1e-6);

        let fields = [
            VectorField::bump_field(vec![1.0, -0.5], vec![0.5, 0.0], 2.0).unwrap(),
            VectorField::radial_bump(vec![0.0, 1.0], 1.5, 0.7).unwrap(),
            VectorField::rotational([0.3, -0.2], 2.0, 1.3).unwrap(),
        ];
        for v in &fields {
            for _ in 0..20 {
                let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
                assert!(fd_validate(FdObject::Field(v, &x), 1e-5).unwrap() < 1e-6);
            }
        }
    }

    #[test]
    fn evaluation_examples() {
        let f = TestFunction::bump(vec![0.0], 2.0, 1.0).unwrap();
        let cf = CylinderFunction::linear(1, f.clone()).unwrap();
        assert_eq!(cf.eval(&[]).unwrap(), 0.0);
        assert_eq!(cf.eval(&[0.5]).unwrap(), f.value(&[0.5]));
        assert!(cf.grad_config(&[]).unwrap().is_empty());
        assert_eq!(cf.grad_translation(&[]).unwrap(), vec![0.0]);
        let g = cf.grad_translation(&[0.5, -1.0]).unwrap();
        assert_eq!(g[0], f.gradient_vec(&[0.5])[0] + f.gradient_vec(&[-1.0])[0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let two = CylinderFunction::new(
            2,
            OuterFunction::GaussianBump { center: vec![0.2, 0.1], width: 1.0, amplitude: 1.0 },
            vec![random_test_function(&mut rng, 2), random_test_function(&mut rng, 2)],
        )
        .unwrap();
        let x = random_config(&mut rng, 2, 5);
        let t: Vec<f64> = two.inner().iter().map(|f| x.chunks(2).map(|p| f.value(p)).sum()).collect();
        assert_eq!(two.eval(&x).unwrap(), two.outer().value(&t));
    }

    #[test]
    fn gradients_match_differences_on_random_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for probe in 0..100 {
            let d = 1 + probe % 2;
            let cf = random_cylinder(&mut rng, d);
            let n = rng.gen_range(0..=if d == 1 { 6 } else { 10 });
            let x = random_config(&mut rng, d, n);
            let err = fd_validate(FdObject::Cylinder(&cf, &x), 1e-6).unwrap();
            assert!(err < 1e-5, "probe {probe}: {err}");

            let v = VectorField::radial_bump((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(), 2.5, 0.8).unwrap();
            let flow = |t: f64| {
                let y: Vec<f64> = x.chunks(d).flat_map(|p| {
                    let vp = v.value_vec(p);
                    p.iter().zip(vp).map(move |(a, b)| a + t * b).collect::<Vec<_>>()
                }).collect();
                cf.eval(&y).unwrap()
            };
            let h = 1e-6;
            let fd = (flow(h) - flow(-h)) / (2.0 * h);
            assert!(relative_error(cf.directional_derivative(&v, &x).unwrap(), fd) < 1e-5);
        }
    }

    #[test]
    fn directional_product_rule_is_exact_in_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random_cylinder(&mut rng, 2);
            let b = random_cylinder(&mut rng, 2);
            let ab = a.product(&b).unwrap();
            let x = random_config(&mut rng, 2, 6);
            let v = VectorField::rotational([0.0, 0.0], 3.0, 1.0).unwrap();
            let lhs = ab.directional_derivative(&v, &x).unwrap();
            let rhs = a.eval(&x).unwrap() * b.directional_derivative(&v, &x).unwrap()
                + b.eval(&x).unwrap() * a.directional_derivative(&v, &x).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
            assert_eq!(a.directional_derivative(&VectorField::Zero, &x).unwrap(), 0.0);
        }
    }

    #[test]
    fn b_term_trivial_cases() {
        let m = model(1, BoundaryMode::Free, lj());
        let v = VectorField::bump_field(vec![1.0], vec![1.0], 1.0).unwrap();
        assert_eq!(b_term(&m, &v, &[], SignConvention::Minus).unwrap(), 0.0);
        assert_eq!(b_term(&m, &VectorField::Zero, &[1.5, -2.0], SignConvention::Minus).unwrap(), 0.0);
        assert!(matches!(b_term(&m, &v, &[1.0, 1.0 + 1e-3], SignConvention::Minus), Err(Error::CoreOverlap(_))));
        assert!(matches!(b_term(&m, &v, &[0.0], SignConvention::Minus), Err(Error::Singularity(_))));
    }

    #[test]
    fn log_density_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for mode in [BoundaryMode::Free, BoundaryMode::Periodic] {
            let m = model(2, mode, lj());
            for _ in 0..20 {
                let x = random_config(&mut rng, 2, 6);
                let logp = |y: &[f64]| {
                    let cfg = crate::geometry::Configuration::from_flat(*m.sim_box(), y.to_vec()).unwrap();
                    -crate::gibbs::energy(&m, &cfg) - y.chunks(2).map(|p| m.self_phi(p)).sum::<f64>()
                };
                let g = log_density_gradient(&m, &x, Some(SignConvention::Minus)).unwrap();
                for k in 0..x.len() {
                    assert!(relative_error(g[k], central(&logp, &x, k, 1e-6)) < 1e-5);
                }
            }
        }
    }

    #[test]
    fn generators_annihilate_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = model(2, BoundaryMode::Periodic, lj());
        let one = CylinderFunction::constant(2, 1.0);
        let zero_inner = CylinderFunction::new(
            2,
            OuterFunction::Constant { value: 3.0, arity: 2 },
            vec![random_test_function(&mut rng, 2), random_test_function(&mut rng, 2)],
        )
        .unwrap();
        let tagged = ProductCylinderFunction::new(TestFunction::Constant(1.0), one.clone()).unwrap();
        for _ in 0..20 {
            let x = random_config(&mut rng, 2, 7);
            let s = SignConvention::resolved();
            for f in [&one, &zero_inner] {
                assert_eq!(gen_gsd(&m, f, &x).unwrap(), 0.0);
                assert_eq!(gen_gsdad(&m, f, &x, s).unwrap(), 0.0);
                assert_eq!(gen_env(&m, f, &x, s).unwrap(), 0.0);
            }
            assert_eq!(gen_coup(&m, &tagged, &[0.3, 0.1], &x, s).unwrap(), 0.0);
        }
    }

    #[test]
    fn generator_reductions() {
        let m0 = model(1, BoundaryMode::Free, PairPotential::Zero);
        let f = TestFunction::bump(vec![0.5], 2.0, 1.0).unwrap();
        let cf = CylinderFunction::linear(1, f.clone()).unwrap();
        let x = [0.2, 1.5, -0.9];
        let lap: f64 = x.iter().map(|&p| f.laplacian(&[p])).sum();
        assert!((gen_gsdad(&m0, &cf, &x, SignConvention::Minus).unwrap() - lap).abs() < 1e-14);
        assert!((gen_env(&m0, &cf, &x, SignConvention::Minus).unwrap() - 2.0 * lap).abs() < 1e-14);
        assert_eq!(gen_gsdad(&m0, &cf, &[], SignConvention::Minus).unwrap(), 0.0);
        assert_eq!(gen_env(&m0, &cf, &[], SignConvention::Minus).unwrap(), 0.0);

        let m = model(1, BoundaryMode::Free, lj());
        let y = [1.3];
        let s = SignConvention::Minus;
        let gphi = lj().gradient_vec(&y).unwrap()[0];
        let (fp, lp) = (f.gradient_vec(&y)[0], f.laplacian(&y));
        let expected = lp + s.value() * gphi * fp + lp + s.value() * gphi * fp;
        assert!((gen_env(&m, &cf, &y, s).unwrap() - expected).abs() < 1e-12);

        let p_one = ProductCylinderFunction::new(TestFunction::Constant(1.0), cf.clone()).unwrap();
        let x = [1.2, 2.5, -1.1];
        assert_eq!(gen_coup(&m, &p_one, &[0.4], &x, s).unwrap(), gen_env(&m, &cf, &x, s).unwrap());
        let tf = TestFunction::bump(vec![0.0], 1.0, 1.0).unwrap();
        let p_f = ProductCylinderFunction::new(tf.clone(), CylinderFunction::constant(1, 1.0)).unwrap();
        let xi = [0.3];
        let phi_sum: f64 = x.iter().map(|&p| lj().gradient_vec(&[p]).unwrap()[0]).sum();
        let expected = tf.laplacian(&xi) - s.value() * phi_sum * tf.gradient_vec(&xi)[0];
        assert!((gen_coup(&m, &p_f, &xi, &x, s).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn generators_are_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = model(2, BoundaryMode::Periodic, lj());
        for _ in 0..10 {
            let f = TestFunction::bump(vec![0.5, -0.5], 3.0, 1.0).unwrap();
            let g = TestFunction::linear_bump(vec![-0.5, 0.5], 2.5, 0.3, vec![0.2, -0.1]).unwrap();
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let sum = CylinderFunction::new(2, OuterFunction::Linear { constant: 0.0, weights: vec![a, b] }, vec![f.clone(), g.clone()]).unwrap();
            let cf = CylinderFunction::linear(2, f).unwrap();
            let cg = CylinderFunction::linear(2, g).unwrap();
            let x = random_config(&mut rng, 2, 5);
            let s = SignConvention::resolved();
            let lhs = gen_env(&m, &sum, &x, s).unwrap();
            let rhs = a * gen_env(&m, &cf, &x, s).unwrap() + b * gen_env(&m, &cg, &x, s).unwrap();
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn state_function_dispatch() {
        let m = model(1, BoundaryMode::Free, lj());
        let cf = CylinderFunction::linear(1, TestFunction::bump(vec![0.0], 2.0, 1.0).unwrap()).unwrap();
        let p = ProductCylinderFunction::new(TestFunction::bump(vec![0.0], 1.0, 1.0).unwrap(), cf.clone()).unwrap();
        let sf = StateFunction::Tagged(p);
        assert!(sf.generator(System::Gsdad, &m, Some(&[0.0]), &[1.0], SignConvention::Minus).is_err());
        assert!(sf.eval(None, &[1.0]).is_err());
        let c = StateFunction::Config(cf);
        let same = carre_du_champ(System::Gsdad, &c, &c, None, &[1.2, -1.0]).unwrap();
        let env = carre_du_champ(System::Env, &c, &c, None, &[1.2, -1.0]).unwrap();
        assert!(env >= same);
    }
}
