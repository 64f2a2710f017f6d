//! Combinatorial calculus on finite configurations: K-transform,
//! star-convolution, Lebesgue-Poisson integrals and the correlation identity.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::geometry::{Configuration, SimBox};
use crate::gibbs::{estimate_rho, pair_measure, Binning};
use crate::potentials::PairPotential;
use crate::quadrature::{composite_gauss, panel_simpson};
use crate::verify::MCTestReport;

/// Largest number of subsets `k_transform` will enumerate.
pub const MAX_SUBSETS: usize = 1 << 20;
/// Largest `|eta|` for which a star-convolution is evaluated.
pub const MAX_STAR_POINTS: usize = 12;

pub type Evaluator = Arc<dyn Fn(&[&[f64]]) -> Result<f64> + Send + Sync>;
pub type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type RadialFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// `G(eta) = constant` on `|eta| = 0`, `singleton(x)` on `{x}` and
/// `pair(|x - y|)` on `{x, y}`.
#[derive(Clone)]
pub struct LowOrder {
    pub constant: f64,
    pub singleton: Option<PointFn>,
    pub pair: Option<RadialFn>,
}

/// A function on finite configurations, zero outside `|eta| <= n_max` and `eta` inside `region`.
#[derive(Clone)]
pub struct FiniteConfigFunction {
    eval: Evaluator,
    n_max: usize,
    region: SimBox,
    low_order: Option<LowOrder>,
}

impl std::fmt::Debug for FiniteConfigFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FiniteConfigFunction")
            .field("n_max", &self.n_max)
            .field("region", &self.region)
            .field("low_order", &self.low_order.is_some())
            .finish()
    }
}

impl FiniteConfigFunction {
    pub fn new(n_max: usize, region: SimBox, f: impl Fn(&[&[f64]]) -> f64 + Send + Sync + 'static) -> Self {
        Self { eval: Arc::new(move |eta| Ok(f(eta))), n_max, region, low_order: None }
    }

    pub fn fallible(n_max: usize, region: SimBox, f: Evaluator) -> Self {
        Self { eval: f, n_max, region, low_order: None }
    }

    /// `1` on the empty configuration, `0` elsewhere.
    pub fn empty_indicator(region: SimBox) -> Self {
        Self::from_low_order(region, LowOrder { constant: 1.0, singleton: None, pair: None })
    }

    /// `h(x)` on singletons `{x}`, `0` elsewhere.
    pub fn singleton(region: SimBox, h: PointFn) -> Self {
        Self::from_low_order(region, LowOrder { constant: 0.0, singleton: Some(h), pair: None })
    }

    /// Indicator of `|eta| = n`.
    pub fn sector_indicator(region: SimBox, n: usize) -> Self {
        Self::new(n, region, move |eta| if eta.len() == n { 1.0 } else { 0.0 })
    }

    pub fn from_low_order(region: SimBox, lo: LowOrder) -> Self {
        let n_max = if lo.pair.is_some() {
            2
        } else if lo.singleton.is_some() {
            1
        } else {
            0
        };
        let l = lo.clone();
        let b = region;
        let eval: Evaluator = Arc::new(move |eta: &[&[f64]]| {
            Ok(match eta.len() {
                0 => l.constant,
                1 => l.singleton.as_ref().map_or(0.0, |h| h(eta[0])),
                2 => l.pair.as_ref().map_or(0.0, |u| u(b.distance_sq(eta[0], eta[1]).sqrt())),
                _ => 0.0,
            })
        });
        Self { eval, n_max, region, low_order: Some(lo) }
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn region(&self) -> &SimBox {
        &self.region
    }

    pub fn low_order(&self) -> Option<&LowOrder> {
        self.low_order.as_ref()
    }

    /// `G(eta)`, applying the support restriction.
    pub fn eval(&self, eta: &[&[f64]]) -> Result<f64> {
        if eta.len() > self.n_max || !eta.iter().all(|p| self.region.contains(p)) {
            return Ok(0.0);
        }
        (self.eval)(eta)
    }
}

fn subset_count(n: usize, k_max: usize) -> usize {
    let mut total: usize = 0;
    let mut c: usize = 1;
    for k in 0..=k_max.min(n) {
        total = total.saturating_add(c);
        c = c.saturating_mul(n - k) / (k + 1);
    }
    total
}

fn for_each_subset(
    points: &[&[f64]],
    k_max: usize,
    start: usize,
    chosen: &mut Vec<usize>,
    f: &mut dyn FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    f(chosen)?;
    if chosen.len() == k_max {
        return Ok(());
    }
    for i in start..points.len() {
        chosen.push(i);
        for_each_subset(points, k_max, i + 1, chosen, f)?;
        chosen.pop();
    }
    Ok(())
}

/// `(KG)(gamma) = sum over finite subsets eta of gamma of G(eta)`.
pub fn k_transform(g: &FiniteConfigFunction, gamma: &Configuration) -> Result<f64> {
    let pts: Vec<&[f64]> = gamma.points().collect();
    k_transform_points(g, &pts)
}

fn k_transform_points(g: &FiniteConfigFunction, pts: &[&[f64]]) -> Result<f64> {
    let k_max = g.n_max.min(pts.len());
    let count = subset_count(pts.len(), k_max);
    if count > MAX_SUBSETS {
        return Err(Error::ResourceLimit(format!(
            "{count} subsets of a {}-point configuration exceed the enumeration limit",
            pts.len()
        )));
    }
    let mut total = 0.0;
    let mut buf: Vec<&[f64]> = Vec::with_capacity(k_max);
    for_each_subset(pts, k_max, 0, &mut Vec::new(), &mut |idx| {
        buf.clear();
        buf.extend(idx.iter().map(|&i| pts[i]));
        total += g.eval(&buf)?;
        Ok(())
    })?;
    Ok(total)
}

/// `(G1 * G2)(eta) = sum over ordered 3-partitions (x1, x2, x3) of eta of
/// G1(x1 u x2) G2(x2 u x3)`.
pub fn star_convolution(g1: &FiniteConfigFunction, g2: &FiniteConfigFunction) -> Result<FiniteConfigFunction> {
    if g1.region != g2.region {
        return invalid("star-convolution requires a common support region");
    }
    let (a, b) = (g1.clone(), g2.clone());
    let eval: Evaluator = Arc::new(move |eta: &[&[f64]]| {
        let m = eta.len();
        if m > MAX_STAR_POINTS {
            return Err(Error::ResourceLimit(format!(
                "star-convolution over {m} points exceeds the limit of {MAX_STAR_POINTS}"
            )));
        }
        let mut total = 0.0;
        let mut left: Vec<&[f64]> = Vec::with_capacity(m);
        let mut right: Vec<&[f64]> = Vec::with_capacity(m);
        for code in 0..3usize.pow(m as u32) {
            left.clear();
            right.clear();
            let mut c = code;
            for p in eta {
                match c % 3 {
                    0 => left.push(p),
                    1 => {
                        left.push(p);
                        right.push(p);
                    }
                    _ => right.push(p),
                }
                c /= 3;
            }
            let va = a.eval(&left)?;
            if va != 0.0 {
                total += va * b.eval(&right)?;
            }
        }
        Ok(total)
    });
    Ok(FiniteConfigFunction::fallible(g1.n_max + g2.n_max, g1.region, eval))
}

/// `K(G1 * G2)(gamma) - KG1(gamma) KG2(gamma)` for `|gamma| <= 6`.
pub fn k_homomorphism_check(g1: &FiniteConfigFunction, g2: &FiniteConfigFunction, gamma: &Configuration) -> Result<f64> {
    if gamma.len() > 6 {
        return invalid("homomorphism check is limited to |gamma| <= 6");
    }
    let star = star_convolution(g1, g2)?;
    Ok(k_transform(&star, gamma)? - k_transform(g1, gamma)? * k_transform(g2, gamma)?)
}

/// The intensity measure `z exp(-phi(x)) dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct Intensity {
    pub z: f64,
    pub potential: PairPotential,
}

impl Intensity {
    pub fn density(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|c| c * c).sum();
        if r2 == 0.0 && !self.potential.is_zero() {
            return 0.0;
        }
        self.z * (-self.potential.value_sq(r2)).exp()
    }

    /// `sigma(region)` by nested adaptive quadrature (d <= 3).
    pub fn mass(&self, region: &SimBox) -> Result<f64> {
        let d = region.dim();
        if d > 3 {
            return Err(Error::Unsupported("intensity mass beyond d = 3".into()));
        }
        let h = region.half();
        let tol = 1e-12 * region.volume().max(1.0);
        let mut x = vec![0.0; d];
        Ok(nested(self, &mut x, 0, h, tol))
    }

    /// Draws a point from `sigma` restricted to `region`, normalised.
    pub fn sample(&self, region: &SimBox, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let lower = self.potential.min_value();
        if !lower.is_finite() {
            return Err(Error::Unsupported("rejection sampling needs a finite lower bound of phi".into()));
        }
        let h = region.half();
        for _ in 0..10_000_000 {
            let x: Vec<f64> = (0..region.dim()).map(|_| rng.gen_range(-h..h)).collect();
            let accept = self.density(&x) / (self.z * (-lower).exp());
            if rng.gen::<f64>() < accept {
                return Ok(x);
            }
        }
        Err(Error::ResourceLimit("rejection sampler failed to accept".into()))
    }
}

fn nested(sigma: &Intensity, x: &mut Vec<f64>, axis: usize, h: f64, tol: f64) -> f64 {
    let d = x.len();
    let panels = if d == 1 { 64 } else { 32 };
    let f = |t: f64| {
        let mut y = x.clone();
        y[axis] = t;
        if axis + 1 == d {
            sigma.density(&y)
        } else {
            nested(sigma, &mut y, axis + 1, h, tol)
        }
    };
    panel_simpson(&f, -h, h, panels, tol).value
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LpEstimate {
    pub value: f64,
    pub stderr: f64,
    pub sigma_mass: f64,
}

/// `sum_n (1/n!) int_{L^n} G d sigma^n` over `n <= n_max`, Monte Carlo per sector.
///
/// `samples_per_sector[n]` points are drawn for sector `n >= 1` (the last
/// entry is reused if the slice is short); sector 0 is exact.
pub fn lp_integral(
    g: &FiniteConfigFunction,
    sigma: &Intensity,
    samples_per_sector: &[usize],
    seed: u64,
) -> Result<LpEstimate> {
    let region = *g.region();
    let mass = sigma.mass(&region)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut value = g.eval(&[])?;
    let mut var = 0.0;
    let mut factor = 1.0;
    for n in 1..=g.n_max() {
        factor *= mass / n as f64;
        let m = samples_per_sector
            .get(n)
            .or(samples_per_sector.last())
            .copied()
            .unwrap_or(1)
            .max(1);
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..m {
            let pts: Vec<Vec<f64>> = (0..n).map(|_| sigma.sample(&region, &mut rng)).collect::<Result<_>>()?;
            let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
            let v = g.eval(&refs)?;
            s += v;
            s2 += v * v;
        }
        let mean = s / m as f64;
        let sector_var = if m > 1 { ((s2 / m as f64 - mean * mean).max(0.0)) * m as f64 / (m - 1) as f64 } else { 0.0 };
        value += factor * mean;
        var += factor * factor * sector_var / m as f64;
    }
    Ok(LpEstimate { value, stderr: var.sqrt(), sigma_mass: mass })
}

/// Compares the ensemble mean of `KG` with `int G d rho` built from
/// estimated correlation functions of order at most 2.
pub fn correlation_identity_check(
    g: &FiniteConfigFunction,
    samples: &[Configuration],
    binning: &Binning,
) -> Result<MCTestReport> {
    if g.n_max() > 2 {
        return Err(Error::Unsupported("correlation functions are estimated only up to order 2".into()));
    }
    let lo = g
        .low_order()
        .ok_or_else(|| Error::Unsupported("correlation identity needs a low-order function".into()))?;
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty ensemble".into()))?;
    let b = *first.sim_box();

    let kg: Vec<f64> = samples.iter().map(|s| k_transform(g, s)).collect::<Result<_>>()?;
    let lhs = crate::stats::mean_stderr(&kg);

    let mut rhs = lo.constant;
    let mut rhs_var = 0.0;
    if let Some(h) = &lo.singleton {
        let rho1 = estimate_rho(samples, 1, binning)?;
        let k = binning.bins;
        let d = b.dim();
        for (idx, (v, se)) in rho1.values.iter().zip(&rho1.stderr).enumerate() {
            let mut lo_c = vec![0.0; d];
            let mut rem = idx;
            for axis in (0..d).rev() {
                lo_c[axis] = rho1.edges[rem % k];
                rem /= k;
            }
            let w = rho1.edges[1] - rho1.edges[0];
            let integral = cell_integral(h.as_ref(), &lo_c, w, g.region());
            rhs += v * integral;
            rhs_var += (se * integral).powi(2);
        }
    }
    if let Some(u) = &lo.pair {
        let rho2 = estimate_rho(samples, 2, binning)?;
        for (k, (v, se)) in rho2.values.iter().zip(&rho2.stderr).enumerate() {
            let (a, c) = (rho2.edges[k], rho2.edges[k + 1]);
            let subs = 8;
            let mut integral = 0.0;
            for j in 0..subs {
                let lo_r = a + (c - a) * j as f64 / subs as f64;
                let hi_r = a + (c - a) * (j + 1) as f64 / subs as f64;
                integral += u(0.5 * (lo_r + hi_r)) * pair_measure(&b, lo_r, hi_r);
            }
            rhs += v * integral;
            rhs_var += (se * integral).powi(2);
        }
    }
    let diff = lhs.mean - rhs;
    let se = (lhs.stderr.powi(2) + rhs_var).sqrt();
    Ok(MCTestReport::from_estimate("correlation_identity", diff, se, samples.len())
        .with_meta("k_mean", lhs.mean)
        .with_meta("rho_side", rhs))
}

/// `int h` over the cube `[lo, lo + w]^d` intersected with `region`, Gauss-Legendre.
fn cell_integral(h: &(dyn Fn(&[f64]) -> f64 + Send + Sync), lo: &[f64], w: f64, region: &SimBox) -> f64 {
    let d = lo.len();
    let nodes: Vec<Vec<(f64, f64)>> = lo.iter().map(|&a| composite_gauss(a, a + w, 2, 5)).collect();
    let mut idx = vec![0usize; d];
    let mut total = 0.0;
    let mut x = vec![0.0; d];
    loop {
        let mut weight = 1.0;
        for k in 0..d {
            let (xk, wk) = nodes[k][idx[k]];
            x[k] = xk;
            weight *= wk;
        }
        if region.contains(&x) {
            total += weight * h(&x);
        }
        let mut k = d;
        loop {
            if k == 0 {
                return total;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < nodes[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
}
