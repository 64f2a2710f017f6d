//! Monte Carlo tests of integration-by-parts, Dirichlet-form, symmetry,
//! invariance and martingale identities.
//!
//! Every test returns an [`MCTestReport`] whose verdict is `|z| <= 3`.
//! Standard errors are corrected for autocorrelation of the integrand along
//! the sample sequence.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{
    b_term, carre_du_champ, gen_translation, self_force_sum, CylinderFunction, ProductCylinderFunction,
    SignConvention, StateFunction, TestFunction, VectorField,
};
use crate::dynamics::{step, IntegratorParams, SDEState, System};
use crate::error::{invalid, Error, Result};
use crate::geometry::Configuration;
use crate::gibbs::EnergyModel;
use crate::quadrature::composite_gauss;
use crate::stats::{integrated_autocorrelation_time, Verdict};

/// Smallest ensemble accepted by the ensemble-average tests.
pub const MIN_SAMPLES: usize = 1000;

/// Outcome of one statistical identity check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCTestReport {
    pub identity: String,
    pub estimate: f64,
    pub stderr: f64,
    pub samples: usize,
    pub z_score: f64,
    pub verdict: Verdict,
    pub metadata: BTreeMap<String, String>,
}

impl MCTestReport {
    /// Builds a report whose verdict is `|estimate / stderr| <= 3`.
    ///
    /// A zero standard error passes only if the estimate is zero up to
    /// `1e-12`, and fails otherwise.
    pub fn from_estimate(identity: impl Into<String>, estimate: f64, stderr: f64, samples: usize) -> Self {
        let (z_score, verdict) = if !estimate.is_finite() || !stderr.is_finite() {
            (f64::NAN, Verdict::Fail)
        } else if stderr > 0.0 {
            let z = estimate / stderr;
            (z, if z.abs() <= 3.0 { Verdict::Pass } else { Verdict::Fail })
        } else if estimate.abs() <= 1e-12 {
            (0.0, Verdict::Pass)
        } else {
            (f64::INFINITY.copysign(estimate), Verdict::Fail)
        };
        Self {
            identity: identity.into(),
            estimate,
            stderr,
            samples,
            z_score,
            verdict,
            metadata: BTreeMap::new(),
        }
    }

    pub fn inconclusive(identity: impl Into<String>, samples: usize, reason: &str) -> Self {
        let mut r = Self::from_estimate(identity, 0.0, 0.0, samples);
        r.verdict = Verdict::Inconclusive;
        r.metadata.insert("reason".into(), reason.into());
        r
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.into(), value.to_string());
        self
    }

    /// Effective sample count recorded by the autocorrelation correction.
    pub fn effective_samples(&self) -> Option<f64> {
        self.metadata.get("effective_samples").and_then(|s| s.parse().ok())
    }
}

/// Report from per-sample integrand values, with autocorrelation-corrected error.
fn report_from_values(identity: &str, xs: &[f64], degenerate_inconclusive: bool) -> MCTestReport {
    let n = xs.len();
    if xs.iter().any(|x| !x.is_finite()) {
        return MCTestReport::from_estimate(identity, f64::NAN, f64::NAN, n).with_meta("reason", "non-finite integrand");
    }
    if degenerate_inconclusive && xs.iter().all(|&x| x == 0.0) {
        return MCTestReport::inconclusive(identity, n, "integrand vanishes on every sample");
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    let tau = integrated_autocorrelation_time(xs);
    let stderr = (var * tau / n as f64).sqrt();
    MCTestReport::from_estimate(identity, mean, stderr, n)
        .with_meta("tau", tau)
        .with_meta("effective_samples", n as f64 / tau)
}

fn require_samples(samples: &[Configuration]) -> Result<()> {
    if samples.len() < MIN_SAMPLES {
        return invalid(format!("at least {MIN_SAMPLES} samples are required, got {}", samples.len()));
    }
    Ok(())
}

fn per_sample<F>(samples: &[Configuration], f: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    samples.par_iter().map(|s| f(s.coords())).collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `E[grad_v F G + F grad_v G + F G B_v]`, which vanishes under the Gibbs measure.
pub fn test_ibp(
    model: &EnergyModel,
    f: &CylinderFunction,
    g: &CylinderFunction,
    v: &VectorField,
    samples: &[Configuration],
    sign: SignConvention,
) -> Result<MCTestReport> {
    require_samples(samples)?;
    let xs = per_sample(samples, |x| {
        let (fv, gv) = (f.eval(x)?, g.eval(x)?);
        Ok(f.directional_derivative(v, x)? * gv + fv * g.directional_derivative(v, x)? + fv * gv * b_term(model, v, x, sign)?)
    })?;
    Ok(report_from_values("ibp", &xs, true).with_meta("sign", sign))
}

/// `E[(grad_gamma F, grad_gamma G) + (L_trans F) G]`.
pub fn test_ibp_translation(
    model: &EnergyModel,
    f: &CylinderFunction,
    g: &CylinderFunction,
    samples: &[Configuration],
    sign: SignConvention,
) -> Result<MCTestReport> {
    require_samples(samples)?;
    let xs = per_sample(samples, |x| {
        Ok(dot(&f.grad_translation(x)?, &g.grad_translation(x)?) + gen_translation(model, f, x, sign)? * g.eval(x)?)
    })?;
    Ok(report_from_values("ibp_translation", &xs, true).with_meta("sign", sign))
}

/// Integrals over the tagged position of products of two tagged factors.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedIntegrals {
    pub fg: f64,
    pub f_grad_g: Vec<f64>,
    pub g_grad_f: Vec<f64>,
    pub grad_f_grad_g: f64,
    pub g_lap_f: f64,
    pub f_lap_g: f64,
}

/// Composite Gauss-Legendre integration over the bounding box of both supports.
pub fn tagged_integrals(f: &TestFunction, g: &TestFunction, dim: usize) -> Result<TaggedIntegrals> {
    let (cf, rf) = f.support_radius().ok_or_else(|| Error::InvalidArgument("tagged factor must have compact support".into()))?;
    let (cg, rg) = g.support_radius().ok_or_else(|| Error::InvalidArgument("tagged factor must have compact support".into()))?;
    if dim == 0 || dim > 3 || cf.len() != dim || cg.len() != dim {
        return invalid("tagged integrals need matching dimensions d <= 3");
    }
    let panels = [0, 256, 64, 16][dim];
    let axes: Vec<Vec<(f64, f64)>> = (0..dim)
        .map(|k| composite_gauss((cf[k] - rf).min(cg[k] - rg), (cf[k] + rf).max(cg[k] + rg), panels, 8))
        .collect();
    let mut out = TaggedIntegrals {
        fg: 0.0,
        f_grad_g: vec![0.0; dim],
        g_grad_f: vec![0.0; dim],
        grad_f_grad_g: 0.0,
        g_lap_f: 0.0,
        f_lap_g: 0.0,
    };
    let mut idx = vec![0usize; dim];
    let mut x = vec![0.0; dim];
    let (mut gf, mut gg) = (vec![0.0; dim], vec![0.0; dim]);
    'outer: loop {
        let mut w = 1.0;
        for k in 0..dim {
            let (xk, wk) = axes[k][idx[k]];
            x[k] = xk;
            w *= wk;
        }
        let (fv, gv) = (f.value(&x), g.value(&x));
        f.gradient(&x, &mut gf);
        g.gradient(&x, &mut gg);
        out.fg += w * fv * gv;
        for k in 0..dim {
            out.f_grad_g[k] += w * fv * gg[k];
            out.g_grad_f[k] += w * gv * gf[k];
        }
        out.grad_f_grad_g += w * dot(&gf, &gg);
        out.g_lap_f += w * gv * f.laplacian(&x);
        out.f_lap_g += w * fv * g.laplacian(&x);
        for k in (0..dim).rev() {
            idx[k] += 1;
            if idx[k] < axes[k].len() {
                continue 'outer;
            }
            idx[k] = 0;
        }
        break;
    }
    Ok(out)
}

/// Configuration-side quantities of `f (x) F` used by the coupled identities.
struct CoupledParts {
    value: f64,
    config_grad: Vec<f64>,
    trans: Vec<f64>,
    /// `L_env F`.
    env: f64,
    /// `-2 grad_gamma F - s (sum grad phi) F`.
    w: Vec<f64>,
}

fn coupled_parts(model: &EnergyModel, p: &ProductCylinderFunction, x: &[f64], sign: SignConvention) -> Result<CoupledParts> {
    let f = &p.config;
    let value = f.eval(x)?;
    let trans = f.grad_translation(x)?;
    let phi = self_force_sum(model.potential(), x, f.dim())?;
    let w = trans.iter().zip(&phi).map(|(t, ph)| -2.0 * t - sign.value() * ph * value).collect();
    Ok(CoupledParts {
        value,
        config_grad: f.grad_config(x)?,
        env: crate::calculus::gen_env(model, f, x, sign)?,
        trans,
        w,
    })
}

fn as_tagged(f: &StateFunction) -> Result<&ProductCylinderFunction> {
    match f {
        StateFunction::Tagged(p) => Ok(p),
        StateFunction::Config(_) => invalid("coupled identities need functions of the form f (x) F"),
    }
}

/// `E_form(F, G) + E[L F G]` for `form` in gsdad, env or coup.
///
/// For `Coup` both functions must be products `f (x) F`; the tagged
/// position is integrated over `R^d` by quadrature.
pub fn test_dirichlet(
    system: System,
    model: &EnergyModel,
    a: &StateFunction,
    b: &StateFunction,
    samples: &[Configuration],
    sign: SignConvention,
) -> Result<MCTestReport> {
    require_samples(samples)?;
    let id = format!("dirichlet_{system}");
    let xs = match system {
        System::Gsd | System::Gsdad | System::Env => per_sample(samples, |x| {
            Ok(carre_du_champ(system, a, b, None, x)? + a.generator(system, model, None, x, sign)? * b.eval(None, x)?)
        })?,
        System::Coup => {
            let (pa, pb) = (as_tagged(a)?, as_tagged(b)?);
            let q = tagged_integrals(&pa.tagged, &pb.tagged, a.dim())?;
            per_sample(samples, |x| {
                let (ca, cb) = (coupled_parts(model, pa, x, sign)?, coupled_parts(model, pb, x, sign)?);
                let form = q.fg * (dot(&ca.config_grad, &cb.config_grad) + dot(&ca.trans, &cb.trans))
                    - cb.value * dot(&ca.trans, &q.f_grad_g)
                    - ca.value * dot(&cb.trans, &q.g_grad_f)
                    + ca.value * cb.value * q.grad_f_grad_g;
                let gen = cb.value * (ca.env * q.fg + dot(&ca.w, &q.g_grad_f) + ca.value * q.g_lap_f);
                Ok(form + gen)
            })?
        }
    };
    Ok(report_from_values(&id, &xs, true).with_meta("sign", sign))
}

/// `E[L F G - F L G]`.
pub fn test_symmetry(
    system: System,
    model: &EnergyModel,
    a: &StateFunction,
    b: &StateFunction,
    samples: &[Configuration],
    sign: SignConvention,
) -> Result<MCTestReport> {
    require_samples(samples)?;
    let id = format!("symmetry_{system}");
    let xs = match system {
        System::Gsd | System::Gsdad | System::Env => per_sample(samples, |x| {
            Ok(a.generator(system, model, None, x, sign)? * b.eval(None, x)?
                - a.eval(None, x)? * b.generator(system, model, None, x, sign)?)
        })?,
        System::Coup => {
            let (pa, pb) = (as_tagged(a)?, as_tagged(b)?);
            let q = tagged_integrals(&pa.tagged, &pb.tagged, a.dim())?;
            per_sample(samples, |x| {
                let (ca, cb) = (coupled_parts(model, pa, x, sign)?, coupled_parts(model, pb, x, sign)?);
                let lab = cb.value * (ca.env * q.fg + dot(&ca.w, &q.g_grad_f) + ca.value * q.g_lap_f);
                let alb = ca.value * (cb.env * q.fg + dot(&cb.w, &q.f_grad_g) + cb.value * q.f_lap_g);
                Ok(lab - alb)
            })?
        }
    };
    Ok(report_from_values(&id, &xs, true).with_meta("sign", sign))
}

/// Settings for the path-based tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathSettings {
    pub integrator: IntegratorParams,
    pub paths: usize,
    /// Initial tagged position for the coupled system.
    pub xi0: [f64; 3],
}

impl PathSettings {
    pub fn new(integrator: IntegratorParams, paths: usize) -> Self {
        Self { integrator, paths, xi0: [0.0; 3] }
    }
}

struct PathOutcome {
    values: Vec<f64>,
    time_average: f64,
    steps: u64,
    rejections: u64,
    warning: bool,
    non_finite: bool,
}

/// Runs one path per seed `seed + k` from sample `k mod len`, handing every
/// state on the step grid to `visit(step_index, state)`.
fn run_paths<V>(
    system: System,
    model: &EnergyModel,
    samples: &[Configuration],
    settings: &PathSettings,
    n_steps: usize,
    visit: V,
) -> Result<Vec<PathOutcome>>
where
    V: Fn(usize, &SDEState, &mut PathOutcome) -> Result<()> + Sync,
{
    if samples.is_empty() || settings.paths == 0 {
        return invalid("path tests need samples and at least one path");
    }
    let p = settings.integrator;
    p.validate(model.sim_box())?;
    let d = model.sim_box().dim();
    (0..settings.paths)
        .into_par_iter()
        .map(|k| {
            let cfg = &samples[k % samples.len()];
            let xi = (system == System::Coup).then(|| settings.xi0[..d].to_vec());
            let mut state = SDEState::new(system, cfg, xi, p.seed.wrapping_add(k as u64))?;
            let mut out = PathOutcome { values: Vec::new(), time_average: 0.0, steps: 0, rejections: 0, warning: false, non_finite: false };
            visit(0, &state, &mut out)?;
            for i in 1..=n_steps {
                step(model, &mut state, &p);
                visit(i, &state, &mut out)?;
            }
            out.steps = state.steps();
            out.rejections = state.rejections();
            out.warning = state.warning();
            out.non_finite = state.coords().iter().chain(state.xi().unwrap_or(&[])).any(|c| !c.is_finite());
            Ok(out)
        })
        .collect()
}

fn path_metadata(mut r: MCTestReport, outs: &[PathOutcome], system: System, p: &IntegratorParams) -> MCTestReport {
    let steps: u64 = outs.iter().map(|o| o.steps).sum();
    let rej: u64 = outs.iter().map(|o| o.rejections).sum();
    let rate = if steps == 0 { 0.0 } else { rej as f64 / steps as f64 };
    let nan = outs.iter().filter(|o| o.non_finite).count();
    if nan > 0 {
        r.verdict = Verdict::Fail;
    }
    r.metadata.insert("system".into(), system.to_string());
    r.metadata.insert("dt".into(), p.dt.to_string());
    r.metadata.insert("seed".into(), p.seed.to_string());
    r.metadata.insert("rejection_rate".into(), rate.to_string());
    r.metadata.insert("rejection_warning".into(), outs.iter().any(|o| o.warning).to_string());
    r.metadata.insert("non_finite_paths".into(), nan.to_string());
    r
}

fn steps_for(t: f64, dt: f64) -> Result<usize> {
    if !(t >= 0.0 && t.is_finite()) {
        return invalid("times must be finite and nonnegative");
    }
    if t == 0.0 {
        return Ok(0);
    }
    if dt <= 0.0 {
        return invalid("positive times need a positive dt");
    }
    Ok((t / dt).round() as usize)
}

/// `E[F(X_T) - F(X_0)]` over paths started from the ensemble.
///
/// Only the configuration part enters, so the coupled system is tested
/// through its environment component.
pub fn test_invariance(
    system: System,
    model: &EnergyModel,
    f: &CylinderFunction,
    samples: &[Configuration],
    settings: &PathSettings,
    t_final: f64,
) -> Result<MCTestReport> {
    let n = steps_for(t_final, settings.integrator.dt)?;
    let outs = run_paths(system, model, samples, settings, n, |i, s, out| {
        let v = f.eval(s.coords())?;
        if i == 0 {
            out.values.push(v);
        }
        if i == n {
            out.values.push(v);
        }
        out.time_average += v / (n + 1) as f64;
        Ok(())
    })?;
    let diffs: Vec<f64> = outs.iter().map(|o| o.values[o.values.len() - 1] - o.values[0]).collect();
    let avg: Vec<f64> = outs.iter().map(|o| o.time_average - o.values[0]).collect();
    let e = crate::stats::mean_stderr(&diffs);
    let ta = crate::stats::mean_stderr(&avg);
    let r = MCTestReport::from_estimate(format!("invariance_{system}"), e.mean, e.stderr, diffs.len())
        .with_meta("t", t_final)
        .with_meta("time_average_shift", ta.mean)
        .with_meta("time_average_stderr", ta.stderr);
    Ok(path_metadata(r, &outs, system, &settings.integrator))
}

/// Ensemble mean of `M_t = G(X_t) - G(X_0) - int_0^t L G(X_s) ds` at each checkpoint,
/// with the time integral by the trapezoid rule on the step grid.
pub fn test_martingale(
    system: System,
    model: &EnergyModel,
    g: &StateFunction,
    samples: &[Configuration],
    settings: &PathSettings,
    checkpoints: &[f64],
    sign: SignConvention,
) -> Result<Vec<MCTestReport>> {
    let dt = settings.integrator.dt;
    let marks: Vec<usize> = checkpoints.iter().map(|&t| steps_for(t, dt)).collect::<Result<_>>()?;
    let n = marks.iter().copied().max().unwrap_or(0);
    let outs = run_paths(system, model, samples, settings, n, |i, s, out| {
        let gv = g.eval(s.xi(), s.coords())?;
        let lg = g.generator(system, model, s.xi(), s.coords(), sign)?;
        if i == 0 {
            // values[0] = G(X_0), values[1] = running integral, values[2] = previous L G.
            out.values = vec![gv, 0.0, lg];
        } else {
            out.values[1] += 0.5 * dt * (out.values[2] + lg);
            out.values[2] = lg;
        }
        for (c, &m) in marks.iter().enumerate() {
            if m == i {
                let mt = gv - out.values[0] - out.values[1];
                let slot = 3 + c;
                if out.values.len() <= slot {
                    out.values.resize(slot + 1, f64::NAN);
                }
                out.values[slot] = mt;
            }
        }
        Ok(())
    })?;
    Ok(checkpoints
        .iter()
        .enumerate()
        .map(|(c, &t)| {
            let m: Vec<f64> = outs.iter().map(|o| o.values[3 + c]).collect();
            let e = crate::stats::mean_stderr(&m);
            let r = MCTestReport::from_estimate(format!("martingale_{system}"), e.mean, e.stderr, m.len())
                .with_meta("t", t)
                .with_meta("sign", sign);
            path_metadata(r, &outs, system, &settings.integrator)
        })
        .collect())
}

/// Runs the integration-by-parts test under both signs and returns the one
/// that passes, with both reports.
pub fn resolve_sign_conventions(
    model: &EnergyModel,
    f: &CylinderFunction,
    g: &CylinderFunction,
    v: &VectorField,
    samples: &[Configuration],
) -> Result<(SignConvention, Vec<MCTestReport>)> {
    if model.potential().is_zero() {
        return Err(Error::Unidentifiable("the single-particle term vanishes for a zero potential".into()));
    }
    let plus = test_ibp(model, f, g, v, samples, SignConvention::Plus)?;
    let minus = test_ibp(model, f, g, v, samples, SignConvention::Minus)?;
    let summary = format!("+1: z = {:.2}, -1: z = {:.2}", plus.z_score, minus.z_score);
    let chosen = match (plus.verdict, minus.verdict) {
        (Verdict::Pass, Verdict::Fail) => SignConvention::Plus,
        (Verdict::Fail, Verdict::Pass) => SignConvention::Minus,
        (Verdict::Fail, Verdict::Fail) => return Err(Error::SignResolution(summary)),
        _ => return Err(Error::Unidentifiable(summary)),
    };
    Ok((chosen, vec![plus, minus]))
}
