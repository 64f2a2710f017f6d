//! Symmetric radial pair potentials and numeric condition checkers.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::SimBox;
use crate::quadrature::{panel_simpson, unit_sphere_area};
use crate::stats::Verdict;

/// Values above this are treated as `+inf`; `exp(-700)` underflows anyway.
pub const HARD_FLOOR: f64 = 700.0;

/// `phi(r) = c (r^-12 - r^-6)`, optionally truncated to zero beyond `cutoff`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LennardJonesParams {
    pub c: f64,
    pub cutoff: Option<f64>,
}

impl LennardJonesParams {
    pub fn new(c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return invalid(format!("Lennard-Jones coefficient must be positive, got {c}"));
        }
        Ok(Self { c, cutoff: None })
    }

    pub fn truncated(c: f64, cutoff: f64) -> Result<Self> {
        if !(cutoff.is_finite() && cutoff > 0.0) {
            return invalid("cutoff must be positive");
        }
        Ok(Self { cutoff: Some(cutoff), ..Self::new(c)? })
    }

    /// Location of the minimum, `2^(1/6)`.
    pub fn r_min() -> f64 {
        2f64.powf(1.0 / 6.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PairPotential {
    Zero,
    LennardJones(LennardJonesParams),
    /// `phi(r) = coefficient * r^-exponent`.
    InversePower { coefficient: f64, exponent: f64 },
}

impl fmt::Display for PairPotential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairPotential::Zero => write!(f, "zero"),
            PairPotential::LennardJones(p) => match p.cutoff {
                None => write!(f, "lj c={}", p.c),
                Some(rc) => write!(f, "lj c={} cutoff={}", p.c, rc),
            },
            PairPotential::InversePower { coefficient, exponent } => {
                write!(f, "power coefficient={coefficient} exponent={exponent}")
            }
        }
    }
}

impl PairPotential {
    pub fn lennard_jones(c: f64) -> Result<Self> {
        Ok(PairPotential::LennardJones(LennardJonesParams::new(c)?))
    }

    pub fn inverse_power(coefficient: f64, exponent: f64) -> Result<Self> {
        if !coefficient.is_finite() || !(exponent.is_finite() && exponent > 0.0) {
            return invalid("inverse power needs a finite coefficient and positive exponent");
        }
        Ok(PairPotential::InversePower { coefficient, exponent })
    }

    /// Parses the form produced by `Display`.
    pub fn from_descriptor(s: &str) -> Result<Self> {
        let mut words = s.split_whitespace();
        let kind = words.next().unwrap_or("");
        let mut kv = BTreeMap::new();
        for w in words {
            let (k, v) = w
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("malformed potential field '{w}'")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("non-numeric potential field '{w}'")))?;
            kv.insert(k.to_string(), v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("potential field '{k}' missing")))
        };
        match kind {
            "zero" => Ok(PairPotential::Zero),
            "lj" => match kv.get("cutoff") {
                Some(&rc) => Ok(PairPotential::LennardJones(LennardJonesParams::truncated(get("c")?, rc)?)),
                None => Self::lennard_jones(get("c")?),
            },
            "power" => Self::inverse_power(get("coefficient")?, get("exponent")?),
            other => invalid(format!("unknown potential '{other}'")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PairPotential::Zero => "zero",
            PairPotential::LennardJones(_) => "lj",
            PairPotential::InversePower { .. } => "power",
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, PairPotential::Zero)
    }

    /// Radius beyond which the potential vanishes identically, if any.
    pub fn range(&self) -> Option<f64> {
        match self {
            PairPotential::Zero => Some(0.0),
            PairPotential::LennardJones(p) => p.cutoff,
            PairPotential::InversePower { .. } => None,
        }
    }

    /// Exponent `p` with `|phi(r)| = O(r^-p)` at infinity; `None` for `phi = 0`.
    pub fn decay_exponent(&self) -> Option<f64> {
        match self {
            PairPotential::Zero => None,
            PairPotential::LennardJones(_) => Some(6.0),
            PairPotential::InversePower { exponent, .. } => Some(*exponent),
        }
    }

    /// Lower bound of `phi` over `r > 0`.
    pub fn min_value(&self) -> f64 {
        match self {
            PairPotential::Zero => 0.0,
            PairPotential::LennardJones(p) => -0.25 * p.c,
            PairPotential::InversePower { coefficient, .. } => {
                if *coefficient >= 0.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    /// Radius below which the value exceeds the hard floor.
    pub fn core_radius(&self) -> f64 {
        match self {
            PairPotential::Zero => 0.0,
            PairPotential::LennardJones(_) => {
                let (mut lo, mut hi) = (1e-6, 1.0);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.radial_raw(mid) > HARD_FLOOR {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                hi
            }
            PairPotential::InversePower { coefficient, exponent } => {
                if *coefficient > 0.0 {
                    (coefficient / HARD_FLOOR).powf(1.0 / exponent)
                } else {
                    0.0
                }
            }
        }
    }

    fn singular(&self) -> bool {
        !self.is_zero()
    }

    fn radial_raw(&self, r: f64) -> f64 {
        match self {
            PairPotential::Zero => 0.0,
            PairPotential::LennardJones(p) => {
                if p.cutoff.is_some_and(|rc| r > rc) {
                    return 0.0;
                }
                let i6 = r.powi(-6);
                p.c * (i6 * i6 - i6)
            }
            PairPotential::InversePower { coefficient, exponent } => coefficient * r.powf(-exponent),
        }
    }

    /// `phi` as a function of the distance, `+inf` above the hard floor.
    pub fn radial(&self, r: f64) -> f64 {
        let v = self.radial_raw(r);
        if v > HARD_FLOOR || v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }

    /// `d phi / d r`.
    pub fn radial_derivative(&self, r: f64) -> f64 {
        match self {
            PairPotential::Zero => 0.0,
            PairPotential::LennardJones(p) => {
                if p.cutoff.is_some_and(|rc| r > rc) {
                    return 0.0;
                }
                let i6 = r.powi(-6);
                p.c * (-12.0 * i6 * i6 + 6.0 * i6) / r
            }
            PairPotential::InversePower { coefficient, exponent } => {
                -exponent * coefficient * r.powf(-exponent - 1.0)
            }
        }
    }

    /// `phi` from a squared distance; the hot path of energy sums.
    #[inline]
    pub fn value_sq(&self, r2: f64) -> f64 {
        match self {
            PairPotential::Zero => 0.0,
            PairPotential::LennardJones(p) => {
                if p.cutoff.is_some_and(|rc| r2 > rc * rc) {
                    return 0.0;
                }
                let i6 = 1.0 / (r2 * r2 * r2);
                let v = p.c * (i6 * i6 - i6);
                if v > HARD_FLOOR || v.is_nan() {
                    f64::INFINITY
                } else {
                    v
                }
            }
            _ => self.radial(r2.sqrt()),
        }
    }

    /// `phi'(r) / r` from a squared distance, so that `grad phi(x) = factor * x`.
    #[inline]
    pub fn gradient_factor_sq(&self, r2: f64) -> f64 {
        match self {
            PairPotential::Zero => 0.0,
            PairPotential::LennardJones(p) => {
                if p.cutoff.is_some_and(|rc| r2 > rc * rc) {
                    return 0.0;
                }
                let i2 = 1.0 / r2;
                let i6 = i2 * i2 * i2;
                p.c * (-12.0 * i6 * i6 + 6.0 * i6) * i2
            }
            _ => {
                let r = r2.sqrt();
                self.radial_derivative(r) / r
            }
        }
    }

    /// `phi(x)`; errors at `x = 0` for singular potentials.
    pub fn value(&self, x: &[f64]) -> Result<f64> {
        let r2: f64 = x.iter().map(|c| c * c).sum();
        if r2 == 0.0 && self.singular() {
            return Err(Error::Singularity("potential evaluated at the origin".into()));
        }
        Ok(self.value_sq(r2))
    }

    /// `grad phi(x)` written into `out`; errors at `x = 0` for singular potentials.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let r2: f64 = x.iter().map(|c| c * c).sum();
        if r2 == 0.0 {
            if self.singular() {
                return Err(Error::Singularity("gradient evaluated at the origin".into()));
            }
            out.iter_mut().for_each(|o| *o = 0.0);
            return Ok(());
        }
        let f = self.gradient_factor_sq(r2);
        for (o, c) in out.iter_mut().zip(x) {
            *o = f * c;
        }
        Ok(())
    }

    pub fn gradient_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; x.len()];
        self.gradient(x, &mut out)?;
        Ok(out)
    }
}

/// Value of the Lennard-Jones formula; `+inf` above the hard floor.
pub fn lj_value(params: &LennardJonesParams, x: &[f64]) -> Result<f64> {
    PairPotential::LennardJones(*params).value(x)
}

pub fn lj_gradient(params: &LennardJonesParams, x: &[f64]) -> Result<Vec<f64>> {
    PairPotential::LennardJones(*params).gradient_vec(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConditionId {
    Integrability,
    Dlq,
    TailDecay,
    StabilityProbe,
    RuelleBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: ConditionId,
    pub estimates: BTreeMap<String, f64>,
    pub tolerance: f64,
    pub verdict: Verdict,
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureParams {
    /// Radial quadrature runs over `(0, r_cut]`; beyond it an analytic tail bound is used.
    pub r_cut: f64,
    pub panels: usize,
    pub tol: f64,
}

impl Default for QuadratureParams {
    fn default() -> Self {
        Self { r_cut: 20.0, panels: 400, tol: 1e-10 }
    }
}

fn log_samples(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let n = n.max(2);
    (0..n).map(move |k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64))
}

/// `sup |h(r)| r^k` over log-spaced samples in `[r_cut, 100 r_cut]`.
fn tail_constant(h: impl Fn(f64) -> f64, k: f64, r_cut: f64) -> f64 {
    log_samples(r_cut, 100.0 * r_cut, 400).map(|r| h(r).abs() * r.powf(k)).fold(0.0, f64::max)
}

fn radial_integral(dim: usize, qp: &QuadratureParams, integrand: impl Fn(f64) -> f64) -> (f64, bool) {
    let q = panel_simpson(&|r: f64| integrand(r) * r.powi(dim as i32 - 1), 0.0, qp.r_cut, qp.panels, qp.tol);
    (unit_sphere_area(dim) * q.value, q.converged && q.value.is_finite())
}

/// `int |exp(-phi) - 1| dx` over `R^dim`.
pub fn check_integrability(pot: &PairPotential, dim: usize, qp: &QuadratureParams) -> ConditionReport {
    let h = |r: f64| {
        let v = if r == 0.0 && !pot.is_zero() { pot.radial(f64::MIN_POSITIVE) } else { pot.radial(r) };
        ((-v).exp() - 1.0).abs()
    };
    let (core, converged) = radial_integral(dim, qp, h);
    let mut estimates = BTreeMap::new();
    estimates.insert("core".into(), core);
    let (tail, tail_ok) = match pot.decay_exponent() {
        None => (0.0, true),
        Some(p) if p > dim as f64 => {
            let c = tail_constant(h, p, qp.r_cut);
            (unit_sphere_area(dim) * c * qp.r_cut.powf(dim as f64 - p) / (p - dim as f64), true)
        }
        Some(_) => (f64::INFINITY, false),
    };
    estimates.insert("tail_bound".into(), tail);
    estimates.insert("total".into(), core + tail);
    let (verdict, note) = if !tail_ok {
        (Verdict::Fail, "tail bound diverges: decay exponent does not exceed the dimension")
    } else if !converged {
        (Verdict::Inconclusive, "radial quadrature did not converge")
    } else {
        (Verdict::Pass, "finite")
    };
    ConditionReport {
        condition: ConditionId::Integrability,
        estimates,
        tolerance: qp.tol,
        verdict,
        note: note.into(),
    }
}

/// `int |grad phi| e^-phi dx` and `int |grad phi|^q e^-phi dx` over `R^dim`.
pub fn check_dlq(pot: &PairPotential, dim: usize, q: f64, qp: &QuadratureParams) -> ConditionReport {
    let mut estimates = BTreeMap::new();
    let mut verdict = Verdict::Pass;
    let mut note = String::from("finite");
    if !(q >= 1.0) {
        return ConditionReport {
            condition: ConditionId::Dlq,
            estimates,
            tolerance: qp.tol,
            verdict: Verdict::Inconclusive,
            note: format!("exponent q = {q} must be at least 1"),
        };
    }
    for (label, k) in [("l1", 1.0), ("lq", q)] {
        let h = |r: f64| {
            if r == 0.0 {
                return 0.0;
            }
            let w = (-pot.radial(r)).exp();
            if w == 0.0 {
                0.0
            } else {
                pot.radial_derivative(r).abs().powf(k) * w
            }
        };
        let (core, converged) = radial_integral(dim, qp, h);
        let tail = match pot.decay_exponent() {
            None => 0.0,
            Some(p) => {
                let e = k * (p + 1.0);
                if e > dim as f64 {
                    let c = tail_constant(h, e, qp.r_cut);
                    unit_sphere_area(dim) * c * qp.r_cut.powf(dim as f64 - e) / (e - dim as f64)
                } else {
                    f64::INFINITY
                }
            }
        };
        estimates.insert(format!("{label}_core"), core);
        estimates.insert(format!("{label}_tail_bound"), tail);
        estimates.insert(label.into(), core + tail);
        if tail.is_infinite() {
            verdict = Verdict::Fail;
            note = format!("{label} tail bound diverges");
        } else if !converged && verdict == Verdict::Pass {
            verdict = Verdict::Inconclusive;
            note = format!("{label} quadrature did not converge");
        }
    }
    ConditionReport { condition: ConditionId::Dlq, estimates, tolerance: qp.tol, verdict, note }
}

/// Probes `|grad phi(x)|_max <= C / |x|_max^alpha` for `|x|` in `[r, 100 r]`.
///
/// Passes when `alpha > dim + 1` and `|grad phi| |x|^alpha` does not grow over
/// the outer decade relative to the inner one.
pub fn check_tail_decay(pot: &PairPotential, dim: usize, r: f64, alpha: f64, samples: usize) -> ConditionReport {
    let mut estimates = BTreeMap::new();
    let directions: Vec<Vec<f64>> = vec![
        {
            let mut e = vec![0.0; dim];
            e[0] = 1.0;
            e
        },
        vec![1.0 / (dim as f64).sqrt(); dim],
    ];
    let mut inner = 0.0f64;
    let mut outer = 0.0f64;
    let mut finite = true;
    let mut grad = vec![0.0; dim];
    for dir in &directions {
        for s in log_samples(r, 100.0 * r, samples.max(4)) {
            let x: Vec<f64> = dir.iter().map(|u| u * s).collect();
            if pot.gradient(&x, &mut grad).is_err() {
                finite = false;
                continue;
            }
            let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            let xmax = x.iter().fold(0.0f64, |m, c| m.max(c.abs()));
            let c = gmax * xmax.powf(alpha);
            if !c.is_finite() {
                finite = false;
            }
            if s <= 10.0 * r {
                inner = inner.max(c);
            } else {
                outer = outer.max(c);
            }
        }
    }
    let c_fit = inner.max(outer);
    let tolerance = 1e-6;
    estimates.insert("C".into(), c_fit);
    estimates.insert("inner_max".into(), inner);
    estimates.insert("outer_max".into(), outer);
    let bounded = outer <= inner * (1.0 + tolerance) + f64::MIN_POSITIVE;
    let (verdict, note) = if !finite {
        (Verdict::Inconclusive, "gradient evaluation failed on the sample range".to_string())
    } else if alpha <= dim as f64 + 1.0 {
        (Verdict::Fail, format!("alpha = {alpha} does not exceed d + 1 = {}", dim + 1))
    } else if !bounded {
        (Verdict::Fail, "gradient decays slower than |x|^-alpha on the sample range".to_string())
    } else {
        (Verdict::Pass, "bound certified at all samples".to_string())
    };
    ConditionReport { condition: ConditionId::TailDecay, estimates, tolerance, verdict, note }
}

/// Minimum of `E(gamma) / |gamma|` over random configurations of size `1..=max_n`.
pub fn stability_probe(pot: &PairPotential, sim_box: &SimBox, trials: usize, max_n: usize, seed: u64) -> ConditionReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = sim_box.half();
    let d = sim_box.dim();
    let mut bound = 0.0f64;
    let mut finite_trials = 0usize;
    if max_n > 0 {
        for _ in 0..trials {
            let n = rng.gen_range(1..=max_n);
            let pts: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-h..h)).collect();
            let mut e = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    e += pot.value_sq(sim_box.distance_sq(&pts[i * d..(i + 1) * d], &pts[j * d..(j + 1) * d]));
                }
            }
            if e.is_finite() {
                finite_trials += 1;
                bound = bound.min(e / n as f64);
            }
        }
    }
    let mut estimates = BTreeMap::new();
    estimates.insert("empirical_bound".into(), bound);
    estimates.insert("finite_trials".into(), finite_trials as f64);
    ConditionReport {
        condition: ConditionId::StabilityProbe,
        estimates,
        tolerance: 0.0,
        verdict: Verdict::Inconclusive,
        note: "empirical probe; not a proof of stability".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundaryMode;

    fn lj() -> PairPotential {
        PairPotential::lennard_jones(0.04).unwrap()
    }

    #[test]
    fn lj_reference_values() {
        let p = LennardJonesParams::new(0.04).unwrap();
        assert_eq!(lj_value(&p, &[1.0]).unwrap(), 0.0);
        let rm = LennardJonesParams::r_min();
        assert!((lj_value(&p, &[rm]).unwrap() + 0.01).abs() < 1e-15);
        assert!(lj_gradient(&p, &[rm, 0.0]).unwrap().iter().all(|g| g.abs() < 1e-15));
        assert!(matches!(lj_value(&p, &[0.0, 0.0]), Err(Error::Singularity(_))));
        assert!(matches!(lj_gradient(&p, &[0.0]), Err(Error::Singularity(_))));
        assert_eq!(lj_value(&p, &[0.3]).unwrap(), f64::INFINITY);
        assert!(LennardJonesParams::new(-1.0).is_err());
    }

    #[test]
    fn core_radius_is_hard_floor_crossing() {
        let pot = lj();
        let rc = pot.core_radius();
        assert!(pot.radial(rc * 0.999).is_infinite());
        assert!(pot.radial(rc * 1.001).is_finite());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let pot = lj();
        let h = 1e-6;
        for k in 0..200 {
            let r = 0.8 + 2.2 * k as f64 / 199.0;
            for x in [vec![r], vec![r * 0.6, -r * 0.8]] {
                let g = pot.gradient_vec(&x).unwrap();
                for a in 0..x.len() {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[a] += h;
                    xm[a] -= h;
                    let fd = (pot.value(&xp).unwrap() - pot.value(&xm).unwrap()) / (2.0 * h);
                    let err = (fd - g[a]).abs() / g[a].abs().max(1e-3);
                    assert!(err < 1e-6, "r={r} a={a} fd={fd} g={}", g[a]);
                }
            }
        }
    }

    #[test]
    fn descriptor_round_trip() {
        for pot in [
            PairPotential::Zero,
            lj(),
            PairPotential::LennardJones(LennardJonesParams::truncated(0.04, 2.5).unwrap()),
            PairPotential::inverse_power(1.5, 3.0).unwrap(),
        ] {
            assert_eq!(PairPotential::from_descriptor(&pot.to_string()).unwrap(), pot);
        }
        assert!(PairPotential::from_descriptor("morse a=1").is_err());
    }

    #[test]
    fn integrability_examples() {
        let qp = QuadratureParams::default();
        let z = check_integrability(&PairPotential::Zero, 1, &qp);
        assert_eq!(z.verdict, Verdict::Pass);
        assert_eq!(z.estimates["total"], 0.0);
        let l = check_integrability(&lj(), 1, &qp);
        assert_eq!(l.verdict, Verdict::Pass);
        assert!(l.estimates["total"].is_finite() && l.estimates["total"] > 0.0);
        let coulomb = PairPotential::inverse_power(1.0, 1.0).unwrap();
        assert_eq!(check_integrability(&coulomb, 3, &qp).verdict, Verdict::Fail);
    }

    #[test]
    fn dlq_examples() {
        let qp = QuadratureParams::default();
        let z = check_dlq(&PairPotential::Zero, 1, 2.0, &qp);
        assert_eq!(z.verdict, Verdict::Pass);
        assert_eq!(z.estimates["l1"], 0.0);
        assert_eq!(z.estimates["lq"], 0.0);
        for q in [2.0, 3.0] {
            let r = check_dlq(&lj(), 1, q, &qp);
            assert_eq!(r.verdict, Verdict::Pass, "{r:?}");
            assert!(r.estimates["lq"].is_finite());
        }
    }

    #[test]
    fn tail_decay_examples() {
        assert_eq!(check_tail_decay(&lj(), 1, 1.0, 7.0, 200).verdict, Verdict::Pass);
        assert_eq!(check_tail_decay(&lj(), 1, 1.0, 14.0, 200).verdict, Verdict::Fail);
        let z = check_tail_decay(&PairPotential::Zero, 1, 1.0, 7.0, 200);
        assert_eq!(z.verdict, Verdict::Pass);
        assert_eq!(z.estimates["C"], 0.0);
    }

    #[test]
    fn stability_probe_examples() {
        let b = SimBox::new(1, 10.0, BoundaryMode::Free).unwrap();
        let rep = stability_probe(&lj(), &b, 5000, 20, 1);
        assert_eq!(rep.verdict, Verdict::Inconclusive);
        let bound = rep.estimates["empirical_bound"];
        assert!(bound.is_finite() && bound < 0.0);
        let rep = stability_probe(&PairPotential::inverse_power(1.0, 6.0).unwrap(), &b, 200, 20, 1);
        assert!(rep.estimates["empirical_bound"] >= 0.0);
        let rep = stability_probe(&lj(), &b, 200, 0, 1);
        assert_eq!(rep.estimates["empirical_bound"], 0.0);
    }

    #[test]
    fn symmetry_on_random_vectors() {
        let pot = lj();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mx: Vec<f64> = x.iter().map(|c| -c).collect();
            assert_eq!(pot.value(&x).unwrap(), pot.value(&mx).unwrap());
            let g = pot.gradient_vec(&x).unwrap();
            let gm = pot.gradient_vec(&mx).unwrap();
            assert!(g.iter().zip(&gm).all(|(a, b)| *a == -*b));
        }
    }
}
