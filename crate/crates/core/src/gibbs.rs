//! Energies, grand-canonical Metropolis sampling and correlation estimators.
//!
//! The chain targets, on each `n`-point sector of a box `L`, the density
//! `(z^n / n!) prod_i exp(-phi(x_i)) exp(-E_L(gamma))` with respect to
//! Lebesgue measure, i.e. the specification with intensity `z exp(-phi) dx`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{build_cell_list, BoundaryMode, CellList, Configuration, Point, SimBox};
use crate::potentials::{ConditionId, ConditionReport, PairPotential};
use crate::quadrature::composite_gauss;
use crate::stats::{integrated_autocorrelation_time, Verdict};

/// Potential, box and exterior boundary condition.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyModel {
    potential: PairPotential,
    sim_box: SimBox,
    boundary: Vec<f64>,
}

impl EnergyModel {
    pub fn new(potential: PairPotential, sim_box: SimBox) -> Self {
        Self { potential, sim_box, boundary: Vec::new() }
    }

    /// Adds exterior points; only free boxes admit a boundary condition.
    pub fn with_boundary(mut self, points: &[Point]) -> Result<Self> {
        if !points.is_empty() && self.sim_box.mode() == BoundaryMode::Periodic {
            return invalid("periodic boxes have no exterior boundary condition");
        }
        for p in points {
            if p.dim() != self.sim_box.dim() {
                return invalid("boundary point dimension does not match box");
            }
            if self.sim_box.contains(p.coords()) {
                return invalid("boundary points must lie outside the box");
            }
            self.boundary.extend_from_slice(p.coords());
        }
        Ok(self)
    }

    pub fn potential(&self) -> &PairPotential {
        &self.potential
    }

    pub fn sim_box(&self) -> &SimBox {
        &self.sim_box
    }

    pub fn boundary_points(&self) -> impl Iterator<Item = &[f64]> {
        self.boundary.chunks_exact(self.sim_box.dim())
    }

    #[inline]
    fn pair(&self, p: &[f64], q: &[f64]) -> f64 {
        self.potential.value_sq(self.sim_box.distance_sq(p, q))
    }

    /// Single-particle term `phi(x)` of the intensity, relative to the origin.
    #[inline]
    pub fn self_phi(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|c| c * c).sum();
        if r2 == 0.0 && !self.potential.is_zero() {
            return f64::INFINITY;
        }
        self.potential.value_sq(r2)
    }

    fn boundary_term(&self, x: &[f64]) -> f64 {
        self.boundary_points().map(|b| self.pair(x, b)).sum()
    }
}

/// `E(gamma)`: sum over unordered pairs; `+inf` on core overlap.
pub fn energy(model: &EnergyModel, config: &Configuration) -> f64 {
    let mut e = 0.0;
    for i in 0..config.len() {
        let p = config.point(i);
        for j in (i + 1)..config.len() {
            e += model.pair(p, config.point(j));
        }
    }
    e
}

/// `W(gamma | eta)`: sum over cross pairs.
pub fn interaction(model: &EnergyModel, gamma: &[Point], eta: &[Point]) -> Result<f64> {
    let r2 = model.sim_box.r_distinct().powi(2);
    let mut w = 0.0;
    for p in gamma {
        for q in eta {
            if p.dim() != model.sim_box.dim() || q.dim() != model.sim_box.dim() {
                return invalid("point dimension does not match box");
            }
            let d2 = model.sim_box.distance_sq(p.coords(), q.coords());
            if d2 < r2 {
                return invalid("configurations are not disjoint");
            }
            w += model.potential.value_sq(d2);
        }
    }
    Ok(w)
}

/// `E_L(gamma) = E(gamma) + W(gamma | boundary)`.
pub fn conditional_energy(model: &EnergyModel, config: &Configuration) -> f64 {
    energy(model, config) + config.points().map(|p| model.boundary_term(p)).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Proposal {
    Insert(Vec<f64>),
    Delete(usize),
    Move(usize, Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GcmcParams {
    pub z: f64,
    pub p_birth: f64,
    pub p_death: f64,
    pub p_move: f64,
    pub displacement: f64,
    pub seed: u64,
}

impl GcmcParams {
    pub fn new(z: f64, p_birth: f64, p_death: f64, p_move: f64, displacement: f64, seed: u64) -> Result<Self> {
        if !(z.is_finite() && z > 0.0) {
            return invalid(format!("activity z must be positive, got {z}"));
        }
        if !(p_birth > 0.0 && p_death > 0.0 && p_move >= 0.0) {
            return invalid("birth and death probabilities must be positive, move nonnegative");
        }
        if ((p_birth + p_death + p_move) - 1.0).abs() > 1e-12 {
            return invalid("move probabilities must sum to 1");
        }
        if !(displacement.is_finite() && displacement > 0.0) {
            return invalid("displacement scale must be positive");
        }
        Ok(Self { z, p_birth, p_death, p_move, displacement, seed })
    }

    /// Equal birth/death weights.
    pub fn balanced(z: f64, p_move: f64, displacement: f64, seed: u64) -> Result<Self> {
        let pb = 0.5 * (1.0 - p_move);
        Self::new(z, pb, pb, p_move, displacement, seed)
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Acceptance probability of inserting `x` into an `n`-point state.
pub fn birth_acceptance(z: f64, phi_x: f64, volume: f64, n: usize, delta_e: f64, p_birth: f64, p_death: f64) -> f64 {
    if phi_x == f64::INFINITY || delta_e == f64::INFINITY {
        return 0.0;
    }
    let log_ratio = z.ln() - phi_x + volume.ln() - ((n + 1) as f64).ln() - delta_e + (p_death / p_birth).ln();
    log_ratio.min(0.0).exp()
}

/// Acceptance probability of deleting `x` from an `n`-point state.
pub fn death_acceptance(z: f64, phi_x: f64, volume: f64, n: usize, delta_e: f64, p_birth: f64, p_death: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    if delta_e == f64::INFINITY {
        return 0.0;
    }
    let log_ratio = (n as f64).ln() - z.ln() + phi_x - volume.ln() - delta_e + (p_birth / p_death).ln();
    log_ratio.min(0.0).exp()
}

/// Acceptance probability of moving a particle from `x` to `x'`.
pub fn move_acceptance(phi_old: f64, phi_new: f64, delta_e: f64) -> f64 {
    if phi_new == f64::INFINITY || delta_e == f64::INFINITY {
        return 0.0;
    }
    (phi_old - phi_new - delta_e).min(0.0).exp()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MoveCounters {
    pub birth_proposed: u64,
    pub birth_accepted: u64,
    pub death_proposed: u64,
    pub death_accepted: u64,
    pub move_proposed: u64,
    pub move_accepted: u64,
}

impl MoveCounters {
    fn rate(a: u64, p: u64) -> f64 {
        if p == 0 {
            0.0
        } else {
            a as f64 / p as f64
        }
    }

    pub fn birth_rate(&self) -> f64 {
        Self::rate(self.birth_accepted, self.birth_proposed)
    }

    pub fn death_rate(&self) -> f64 {
        Self::rate(self.death_accepted, self.death_proposed)
    }

    pub fn move_rate(&self) -> f64 {
        Self::rate(self.move_accepted, self.move_proposed)
    }

    fn merge(&mut self, o: &MoveCounters) {
        self.birth_proposed += o.birth_proposed;
        self.birth_accepted += o.birth_accepted;
        self.death_proposed += o.death_proposed;
        self.death_accepted += o.death_accepted;
        self.move_proposed += o.move_proposed;
        self.move_accepted += o.move_accepted;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveKind {
    Birth,
    Death,
    Move,
}

/// A Markov chain with cached conditional energy and single-particle terms.
#[derive(Debug, Clone)]
pub struct ChainState {
    config: Configuration,
    energy: f64,
    /// Cached `phi(x_i)`; the weights are `exp(-phi(x_i))`.
    self_phi: Vec<f64>,
    cells: Option<CellList>,
    steps: u64,
    counters: MoveCounters,
    rng: ChaCha8Rng,
}

impl ChainState {
    pub fn new(model: &EnergyModel, config: Configuration, seed: u64) -> Result<Self> {
        if config.sim_box() != model.sim_box() {
            return invalid("configuration box differs from model box");
        }
        let energy = conditional_energy(model, &config);
        if !energy.is_finite() {
            return invalid("initial configuration has infinite energy");
        }
        let self_phi: Vec<f64> = config.points().map(|p| model.self_phi(p)).collect();
        if self_phi.iter().any(|v| !v.is_finite()) {
            return invalid("initial configuration has a point inside the core around the origin");
        }
        let mut s = Self {
            config,
            energy,
            self_phi,
            cells: None,
            steps: 0,
            counters: MoveCounters::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.rebuild_cells(model)?;
        Ok(s)
    }

    pub fn empty(model: &EnergyModel, seed: u64) -> Result<Self> {
        Self::new(model, Configuration::empty(*model.sim_box()), seed)
    }

    fn cell_cutoff(model: &EnergyModel) -> Option<f64> {
        match model.potential().range() {
            Some(rc) if rc > 0.0 && rc <= model.sim_box().side() => Some(rc),
            _ => None,
        }
    }

    fn rebuild_cells(&mut self, model: &EnergyModel) -> Result<()> {
        self.cells = match Self::cell_cutoff(model) {
            Some(rc) => Some(build_cell_list(&self.config, rc)?),
            None => None,
        };
        Ok(())
    }

    pub fn configuration(&self) -> &Configuration {
        &self.config
    }

    /// Cached `E_L` of the current configuration.
    pub fn energy(&self) -> f64 {
        self.energy
    }

    pub fn self_phi(&self) -> &[f64] {
        &self.self_phi
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn counters(&self) -> &MoveCounters {
        &self.counters
    }

    /// Sum of `phi(x - x_j)` over points `j != skip` near `x`, plus the boundary term.
    fn local_energy(&self, model: &EnergyModel, x: &[f64], skip: Option<usize>) -> Result<f64> {
        let mut e = model.boundary_term(x);
        if model.potential().is_zero() {
            return Ok(e);
        }
        match &self.cells {
            Some(cl) => {
                for j in cl.neighbors(&self.config, x, cl.cutoff(), skip)? {
                    e += model.pair(x, self.config.point(j));
                }
            }
            None => {
                for (j, q) in self.config.points().enumerate() {
                    if Some(j) != skip {
                        e += model.pair(x, q);
                    }
                }
            }
        }
        Ok(e)
    }
}

/// `E_L(after) - E_L(before)` for a proposal, using neighbor queries only.
pub fn delta_energy(model: &EnergyModel, state: &ChainState, proposal: &Proposal) -> Result<f64> {
    let n = state.config.len();
    match proposal {
        Proposal::Insert(x) => {
            if x.len() != model.sim_box().dim() {
                return invalid("proposal dimension mismatch");
            }
            state.local_energy(model, x, None)
        }
        Proposal::Delete(i) => {
            if *i >= n {
                return invalid(format!("delete index {i} out of range"));
            }
            Ok(-state.local_energy(model, state.config.point(*i), Some(*i))?)
        }
        Proposal::Move(i, x) => {
            if *i >= n {
                return invalid(format!("move index {i} out of range"));
            }
            if x.len() != model.sim_box().dim() {
                return invalid("proposal dimension mismatch");
            }
            let new = state.local_energy(model, x, Some(*i))?;
            if new == f64::INFINITY {
                return Ok(f64::INFINITY);
            }
            let old = state.local_energy(model, state.config.point(*i), Some(*i))?;
            Ok(new - old)
        }
    }
}

/// One Metropolis update. Returns the move type and whether it was accepted.
pub fn gcmc_step(model: &EnergyModel, params: &GcmcParams, state: &mut ChainState) -> (MoveKind, bool) {
    state.steps += 1;
    let b = *model.sim_box();
    let n = state.config.len();
    let u: f64 = state.rng.gen();
    let volume = b.volume();

    if u < params.p_birth {
        state.counters.birth_proposed += 1;
        let h = b.half();
        let x: Vec<f64> = (0..b.dim()).map(|_| state.rng.gen_range(-h..h)).collect();
        let phi_x = model.self_phi(&x);
        let accepted = phi_x.is_finite()
            && state.config.admits(&x, None)
            && match delta_energy(model, state, &Proposal::Insert(x.clone())) {
                Ok(de) => {
                    let a = birth_acceptance(params.z, phi_x, volume, n, de, params.p_birth, params.p_death);
                    let ok = state.rng.gen::<f64>() < a;
                    if ok {
                        state.config.insert(&x).expect("admissible insertion");
                        state.self_phi.push(phi_x);
                        state.energy += de;
                    }
                    ok
                }
                Err(_) => false,
            };
        if accepted {
            state.counters.birth_accepted += 1;
            state.rebuild_cells(model).expect("cutoff validated at construction");
        }
        (MoveKind::Birth, accepted)
    } else if u < params.p_birth + params.p_death {
        state.counters.death_proposed += 1;
        if n == 0 {
            return (MoveKind::Death, false);
        }
        let i = state.rng.gen_range(0..n);
        let phi_x = state.self_phi[i];
        let accepted = match delta_energy(model, state, &Proposal::Delete(i)) {
            Ok(de) => {
                let a = death_acceptance(params.z, phi_x, volume, n, de, params.p_birth, params.p_death);
                let ok = state.rng.gen::<f64>() < a;
                if ok {
                    state.config.remove(i).expect("valid index");
                    state.self_phi.swap_remove(i);
                    state.energy += de;
                }
                ok
            }
            Err(_) => false,
        };
        if accepted {
            state.counters.death_accepted += 1;
            state.rebuild_cells(model).expect("cutoff validated at construction");
        }
        (MoveKind::Death, accepted)
    } else {
        state.counters.move_proposed += 1;
        if n == 0 {
            return (MoveKind::Move, false);
        }
        let i = state.rng.gen_range(0..n);
        let mut x: Vec<f64> = state.config.point(i).to_vec();
        for c in x.iter_mut() {
            let g: f64 = state.rng.sample(StandardNormal);
            *c += params.displacement * g;
        }
        b.wrap(&mut x);
        let phi_new = model.self_phi(&x);
        let accepted = phi_new.is_finite()
            && state.config.admits(&x, Some(i))
            && match delta_energy(model, state, &Proposal::Move(i, x.clone())) {
                Ok(de) => {
                    let a = move_acceptance(state.self_phi[i], phi_new, de);
                    let ok = state.rng.gen::<f64>() < a;
                    if ok {
                        state.config.move_point(i, &x).expect("admissible move");
                        state.self_phi[i] = phi_new;
                        state.energy += de;
                    }
                    ok
                }
                Err(_) => false,
            };
        if accepted {
            state.counters.move_accepted += 1;
            state.rebuild_cells(model).expect("cutoff validated at construction");
        }
        (MoveKind::Move, accepted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Thinning {
    Fixed(usize),
    /// Twice the integrated autocorrelation time of `n`, estimated on a pilot run.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub counters: MoveCounters,
    pub birth_rate: f64,
    pub death_rate: f64,
    pub move_rate: f64,
    /// Integrated autocorrelation time of the particle count, in steps.
    pub tau_n: f64,
    pub thinning: usize,
    pub mean_n: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub samples: Vec<Configuration>,
    pub diagnostics: ChainDiagnostics,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Runs one chain from the empty configuration.
pub fn sample_ensemble(
    model: &EnergyModel,
    params: &GcmcParams,
    burn_in: usize,
    thinning: Thinning,
    count: usize,
) -> Result<Ensemble> {
    if count == 0 {
        return invalid("count must be at least 1");
    }
    let mut state = ChainState::empty(model, params.seed)?;
    for _ in 0..burn_in {
        gcmc_step(model, params, &mut state);
    }
    let pilot_len = burn_in.max(2000);
    let mut pilot = Vec::with_capacity(pilot_len);
    let thin = match thinning {
        Thinning::Fixed(k) => k.max(1),
        Thinning::Auto => {
            for _ in 0..pilot_len {
                gcmc_step(model, params, &mut state);
                pilot.push(state.config.len() as f64);
            }
            (2.0 * integrated_autocorrelation_time(&pilot)).ceil() as usize
        }
    };
    let mut samples = Vec::with_capacity(count);
    let mut counts = Vec::with_capacity(count * thin);
    let before = state.counters;
    for _ in 0..count {
        for _ in 0..thin {
            gcmc_step(model, params, &mut state);
            counts.push(state.config.len() as f64);
        }
        samples.push(state.config.clone());
    }
    let mut c = state.counters;
    c.birth_proposed -= before.birth_proposed;
    c.birth_accepted -= before.birth_accepted;
    c.death_proposed -= before.death_proposed;
    c.death_accepted -= before.death_accepted;
    c.move_proposed -= before.move_proposed;
    c.move_accepted -= before.move_accepted;
    let tau_source = if pilot.is_empty() { &counts } else { &pilot };
    let tau_n = integrated_autocorrelation_time(tau_source);
    let mean_n = samples.iter().map(|s| s.len() as f64).sum::<f64>() / count as f64;
    Ok(Ensemble {
        samples,
        diagnostics: ChainDiagnostics {
            counters: c,
            birth_rate: c.birth_rate(),
            death_rate: c.death_rate(),
            move_rate: c.move_rate(),
            tau_n,
            thinning: thin,
            mean_n,
            seeds: vec![params.seed],
        },
    })
}

/// Runs `chains` independent chains in parallel with seeds `seed, seed+1, ...`
/// and concatenates their samples in seed order.
pub fn sample_ensemble_parallel(
    model: &EnergyModel,
    params: &GcmcParams,
    burn_in: usize,
    thinning: Thinning,
    count_per_chain: usize,
    chains: usize,
) -> Result<Ensemble> {
    if chains == 0 {
        return invalid("at least one chain is required");
    }
    let parts: Vec<Result<Ensemble>> = (0..chains as u64)
        .into_par_iter()
        .map(|k| {
            let p = params.with_seed(params.seed.wrapping_add(k));
            sample_ensemble(model, &p, burn_in, thinning, count_per_chain)
        })
        .collect();
    let mut samples = Vec::with_capacity(chains * count_per_chain);
    let mut counters = MoveCounters::default();
    let mut tau = 0.0f64;
    let mut thin = 0usize;
    let mut seeds = Vec::new();
    for part in parts {
        let part = part?;
        counters.merge(&part.diagnostics.counters);
        tau = tau.max(part.diagnostics.tau_n);
        thin = thin.max(part.diagnostics.thinning);
        seeds.extend(part.diagnostics.seeds);
        samples.extend(part.samples);
    }
    let mean_n = samples.iter().map(|s| s.len() as f64).sum::<f64>() / samples.len() as f64;
    Ok(Ensemble {
        samples,
        diagnostics: ChainDiagnostics {
            counters,
            birth_rate: counters.birth_rate(),
            death_rate: counters.death_rate(),
            move_rate: counters.move_rate(),
            tau_n: tau,
            thinning: thin,
            mean_n,
            seeds,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub bins: usize,
    /// Largest separation for order 2; defaults to the largest meaningful one.
    pub r_max: Option<f64>,
}

/// Histogram estimate of a correlation function with per-bin standard errors.
///
/// Order 1 bins form a `bins^d` grid over the box (row-major); order 2 bins
/// are separation shells `[edges[k], edges[k+1])`. Values are densities with
/// respect to Lebesgue measure, so the ideal gas gives `z` and `z^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramEstimate {
    pub order: usize,
    pub dim: usize,
    pub edges: Vec<f64>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Lebesgue measure (order 1) or pair measure (order 2) of each bin.
    pub bin_measure: Vec<f64>,
    pub samples: usize,
}

/// Half the Lebesgue measure of `{(x, y) in box^2 : a <= |x - y| < b}`.
pub fn pair_measure(sim_box: &SimBox, a: f64, b: f64) -> f64 {
    let l = sim_box.side();
    let d = sim_box.dim();
    if b <= a {
        return 0.0;
    }
    if sim_box.mode() == BoundaryMode::Periodic {
        let ball = |r: f64| match d {
            1 => 2.0 * r,
            2 => std::f64::consts::PI * r * r,
            3 => 4.0 / 3.0 * std::f64::consts::PI * r * r * r,
            _ => crate::quadrature::unit_sphere_area(d) * r.powi(d as i32) / d as f64,
        };
        return 0.5 * sim_box.volume() * (ball(b) - ball(a));
    }
    let overlap = |u: &[f64]| u.iter().map(|c| (l - c.abs()).max(0.0)).product::<f64>();
    match d {
        1 => {
            let prim = |u: f64| {
                let u = u.min(l);
                l * u - 0.5 * u * u
            };
            prim(b) - prim(a)
        }
        2 => {
            let rs = composite_gauss(a, b, 4, 8);
            let th = composite_gauss(0.0, 2.0 * std::f64::consts::PI, 64, 8);
            let mut s = 0.0;
            for &(r, wr) in &rs {
                for &(t, wt) in &th {
                    s += wr * wt * r * overlap(&[r * t.cos(), r * t.sin()]);
                }
            }
            0.5 * s
        }
        3 => {
            let rs = composite_gauss(a, b, 4, 6);
            let th = composite_gauss(0.0, std::f64::consts::PI, 24, 6);
            let ph = composite_gauss(0.0, 2.0 * std::f64::consts::PI, 48, 6);
            let mut s = 0.0;
            for &(r, wr) in &rs {
                for &(t, wt) in &th {
                    for &(p, wp) in &ph {
                        let u = [r * t.sin() * p.cos(), r * t.sin() * p.sin(), r * t.cos()];
                        s += wr * wt * wp * r * r * t.sin() * overlap(&u);
                    }
                }
            }
            0.5 * s
        }
        _ => f64::NAN,
    }
}

pub fn estimate_rho(samples: &[Configuration], order: usize, binning: &Binning) -> Result<HistogramEstimate> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty sample list".into()))?;
    if binning.bins == 0 {
        return invalid("at least one bin is required");
    }
    let b = *first.sim_box();
    let d = b.dim();
    let s = samples.len() as f64;
    let (edges, measure, nbins) = match order {
        1 => {
            let k = binning.bins;
            let edges: Vec<f64> = (0..=k).map(|i| -b.half() + b.side() * i as f64 / k as f64).collect();
            let nb = k.checked_pow(d as u32).ok_or_else(|| Error::ResourceLimit("too many bins".into()))?;
            let vol = (b.side() / k as f64).powi(d as i32);
            (edges, vec![vol; nb], nb)
        }
        2 => {
            if d > 3 && b.mode() == BoundaryMode::Free {
                return Err(Error::Unsupported("pair measure for free boxes beyond d = 3".into()));
            }
            let default_max = match b.mode() {
                BoundaryMode::Periodic => b.half(),
                BoundaryMode::Free => b.side() * (d as f64).sqrt(),
            };
            let r_max = binning.r_max.unwrap_or(default_max).min(default_max);
            let k = binning.bins;
            let edges: Vec<f64> = (0..=k).map(|i| r_max * i as f64 / k as f64).collect();
            let measure: Vec<f64> = edges.windows(2).map(|w| pair_measure(&b, w[0], w[1])).collect();
            (edges, measure, k)
        }
        _ => return invalid(format!("correlation order must be 1 or 2, got {order}")),
    };
    let mut sum = vec![0.0; nbins];
    let mut sum2 = vec![0.0; nbins];
    let mut local = vec![0.0; nbins];
    for cfg in samples {
        if cfg.sim_box() != &b {
            return invalid("samples live in different boxes");
        }
        local.iter_mut().for_each(|v| *v = 0.0);
        if order == 1 {
            let k = binning.bins;
            for p in cfg.points() {
                let mut idx = 0usize;
                for &c in p {
                    let i = (((c + b.half()) / b.side()) * k as f64).floor().clamp(0.0, (k - 1) as f64) as usize;
                    idx = idx * k + i;
                }
                local[idx] += 1.0;
            }
        } else {
            let r_max = *edges.last().expect("nonempty edges");
            let width = r_max / nbins as f64;
            for i in 0..cfg.len() {
                for j in (i + 1)..cfg.len() {
                    let r = b.distance_sq(cfg.point(i), cfg.point(j)).sqrt();
                    if r < r_max {
                        local[((r / width) as usize).min(nbins - 1)] += 1.0;
                    }
                }
            }
        }
        for k in 0..nbins {
            sum[k] += local[k];
            sum2[k] += local[k] * local[k];
        }
    }
    let mut values = Vec::with_capacity(nbins);
    let mut stderr = Vec::with_capacity(nbins);
    for k in 0..nbins {
        let m = sum[k] / s;
        let var = if s > 1.0 { (sum2[k] / s - m * m).max(0.0) * s / (s - 1.0) } else { 0.0 };
        values.push(m / measure[k]);
        stderr.push((var / s).sqrt() / measure[k]);
    }
    Ok(HistogramEstimate { order, dim: d, edges, values, stderr, bin_measure: measure, samples: samples.len() })
}

/// Checks `rho1 <= C_R` and `rho2 <= C_R^2` bin-wise, allowing 3 standard errors.
pub fn ruelle_check(rho1: &HistogramEstimate, rho2: &HistogramEstimate, c_r: f64) -> ConditionReport {
    let mut estimates = BTreeMap::new();
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut ok = c_r > 0.0;
    for (est, bound) in [(rho1, c_r), (rho2, c_r * c_r)] {
        let mut max_v: f64 = 0.0;
        for (v, se) in est.values.iter().zip(&est.stderr) {
            if !v.is_finite() {
                continue;
            }
            max_v = max_v.max(*v);
            let excess = v - bound - 3.0 * se;
            worst = worst.max(excess);
            if excess > 0.0 {
                ok = false;
            }
        }
        estimates.insert(format!("max_rho{}", est.order), max_v);
    }
    estimates.insert("C_R".into(), c_r);
    estimates.insert("worst_excess".into(), worst);
    ConditionReport {
        condition: ConditionId::RuelleBound,
        estimates,
        tolerance: 3.0,
        verdict: if ok { Verdict::Pass } else { Verdict::Fail },
        note: "Ruelle bound on estimated correlation functions, 3 standard errors".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::LennardJonesParams;

    fn lj() -> PairPotential {
        PairPotential::lennard_jones(0.04).unwrap()
    }

    fn box1(side: f64) -> SimBox {
        SimBox::new(1, side, BoundaryMode::Free).unwrap()
    }

    #[test]
    fn energy_examples() {
        let m = EnergyModel::new(lj(), box1(10.0));
        let b = *m.sim_box();
        assert_eq!(energy(&m, &Configuration::empty(b)), 0.0);
        assert_eq!(energy(&m, &Configuration::from_flat(b, vec![1.0]).unwrap()), 0.0);
        let rm = LennardJonesParams::r_min();
        let two = Configuration::from_flat(b, vec![0.0, rm]).unwrap();
        assert!((energy(&m, &two) + 0.01).abs() < 1e-15);
        let close = Configuration::from_flat(b, vec![0.0, 0.2]).unwrap();
        assert_eq!(energy(&m, &close), f64::INFINITY);
    }

    #[test]
    fn interaction_examples() {
        let m = EnergyModel::new(lj(), box1(10.0));
        let p = |x: f64| Point::new(vec![x]).unwrap();
        assert_eq!(interaction(&m, &[p(0.0)], &[]).unwrap(), 0.0);
        assert_eq!(interaction(&m, &[p(0.0)], &[p(1.0)]).unwrap(), 0.0);
        let g = [p(0.0), p(3.0)];
        let e1 = [p(1.3)];
        let e2 = [p(4.1), p(-2.0)];
        let e12 = [p(1.3), p(4.1), p(-2.0)];
        let lhs = interaction(&m, &g, &e12).unwrap();
        let rhs = interaction(&m, &g, &e1).unwrap() + interaction(&m, &g, &e2).unwrap();
        assert!((lhs - rhs).abs() < 1e-15);
        assert!(interaction(&m, &g, &[p(3.0)]).is_err());
    }

    #[test]
    fn conditional_energy_examples() {
        let b = box1(10.0);
        let plain = EnergyModel::new(lj(), b);
        let cfg = Configuration::from_flat(b, vec![0.0, 1.5, -2.0]).unwrap();
        assert_eq!(conditional_energy(&plain, &cfg), energy(&plain, &cfg));
        let m = plain.clone().with_boundary(&[Point::new(vec![5.8]).unwrap()]).unwrap();
        assert_eq!(conditional_energy(&m, &Configuration::empty(b)), 0.0);
        let one = Configuration::from_flat(b, vec![4.5]).unwrap();
        let expected = lj().radial(1.3);
        assert!((conditional_energy(&m, &one) - expected).abs() < 1e-15);
        assert!(plain.with_boundary(&[Point::new(vec![1.0]).unwrap()]).is_err());
    }

    #[test]
    fn delta_energy_small_cases() {
        let b = box1(10.0);
        let m = EnergyModel::new(lj(), b).with_boundary(&[Point::new(vec![5.8]).unwrap()]).unwrap();
        let s = ChainState::empty(&m, 1).unwrap();
        let free = EnergyModel::new(lj(), b);
        let s_free = ChainState::empty(&free, 1).unwrap();
        assert_eq!(delta_energy(&free, &s_free, &Proposal::Insert(vec![0.3])).unwrap(), 0.0);
        assert!(delta_energy(&m, &s, &Proposal::Delete(0)).is_err());
        let one = Configuration::from_flat(b, vec![4.5]).unwrap();
        let s1 = ChainState::new(&m, one, 1).unwrap();
        let de = delta_energy(&m, &s1, &Proposal::Delete(0)).unwrap();
        assert!((de + lj().radial(1.3)).abs() < 1e-15);
    }

    #[test]
    fn stale_cell_list_is_detected() {
        let b = SimBox::new(2, 10.0, BoundaryMode::Free).unwrap();
        let pot = PairPotential::LennardJones(LennardJonesParams::truncated(0.04, 2.5).unwrap());
        let m = EnergyModel::new(pot, b);
        let cfg = Configuration::from_flat(b, vec![-1.0, 0.0, 1.0, 1.0]).unwrap();
        let mut s = ChainState::new(&m, cfg, 1).unwrap();
        s.config.move_point(0, &[2.0, 2.0]).unwrap();
        assert_eq!(delta_energy(&m, &s, &Proposal::Insert(vec![3.0, 3.0])), Err(Error::StaleStructure));
    }

    fn incremental_matches_full(model: &EnergyModel, seed: u64) {
        let b = *model.sim_box();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = Configuration::empty(b);
        while cfg.len() < 30 {
            let p: Vec<f64> = (0..b.dim()).map(|_| rng.gen_range(-b.half()..b.half())).collect();
            let r0: f64 = p.iter().map(|c| c * c).sum();
            if r0 > 0.81 && cfg.points().all(|q| b.distance_sq(&p, q) > 0.81) {
                cfg.insert(&p).unwrap();
            }
        }
        let state = ChainState::new(model, cfg.clone(), seed).unwrap();
        let e0 = conditional_energy(model, &cfg);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..b.dim()).map(|_| rng.gen_range(-b.half()..b.half())).collect();
            let i = rng.gen_range(0..cfg.len());
            let (prop, after) = match rng.gen_range(0..3) {
                0 => (Proposal::Insert(x.clone()), cfg.with_inserted(&x)),
                1 => (Proposal::Delete(i), cfg.with_removed(i)),
                _ => (Proposal::Move(i, x.clone()), cfg.with_moved(i, &x)),
            };
            let Ok(after) = after else { continue };
            let full = conditional_energy(model, &after) - e0;
            let inc = delta_energy(model, &state, &prop).unwrap();
            if full.is_infinite() {
                assert_eq!(inc, full);
            } else {
                assert!((inc - full).abs() <= 1e-9 * full.abs().max(1e-3), "{inc} vs {full}");
            }
        }
    }

    #[test]
    fn incremental_energy_matches_recompute() {
        let b2 = SimBox::new(2, 10.0, BoundaryMode::Free).unwrap();
        let bp = SimBox::new(2, 10.0, BoundaryMode::Periodic).unwrap();
        let trunc = PairPotential::LennardJones(LennardJonesParams::truncated(0.04, 2.5).unwrap());
        incremental_matches_full(&EnergyModel::new(lj(), b2), 1);
        incremental_matches_full(&EnergyModel::new(trunc.clone(), b2), 2);
        incremental_matches_full(&EnergyModel::new(trunc, bp), 3);
        let wall = EnergyModel::new(lj(), b2)
            .with_boundary(&[Point::new(vec![5.5, 0.0]).unwrap(), Point::new(vec![-6.0, 1.0]).unwrap()])
            .unwrap();
        incremental_matches_full(&wall, 4);
    }

    #[test]
    fn cached_energy_tracks_chain() {
        let m = EnergyModel::new(lj(), box1(10.0));
        let params = GcmcParams::balanced(0.5, 0.4, 0.3, 17).unwrap();
        let mut s = ChainState::empty(&m, params.seed).unwrap();
        for k in 0..20_000 {
            gcmc_step(&m, &params, &mut s);
            if k % 997 == 0 {
                let full = conditional_energy(&m, s.configuration());
                assert!((s.energy() - full).abs() <= 1e-9 * full.abs().max(1.0));
            }
        }
    }

    /// Exact transition matrix on a discretised box: `k` sites, at most two
    /// particles, births to a uniform site and moves to a uniform other site.
    #[test]
    fn detailed_balance_on_discretised_toy() {
        let z: f64 = 0.7;
        let sites: [f64; 3] = [-0.9, 0.4, 1.6];
        let k = sites.len();
        let cell = 1.3;
        let volume = cell * k as f64;
        let (pb, pd, pm) = (0.3, 0.45, 0.25);
        let pot = lj();
        let phi1 = |s: usize| pot.radial(sites[s].abs());
        let pair = |a: usize, b: usize| pot.radial((sites[a] - sites[b]).abs());
        let energy_of = |st: &[usize]| if st.len() == 2 { pair(st[0], st[1]) } else { 0.0 };

        let mut states: Vec<Vec<usize>> = vec![vec![]];
        for a in 0..k {
            states.push(vec![a]);
            for b in (a + 1)..k {
                states.push(vec![a, b]);
            }
        }
        let weight = |st: &[usize]| {
            (z * cell).powi(st.len() as i32)
                * st.iter().map(|&s| (-phi1(s)).exp()).product::<f64>()
                * (-energy_of(st)).exp()
        };
        let index = |st: &[usize]| {
            let mut v = st.to_vec();
            v.sort();
            states.iter().position(|s| *s == v).unwrap()
        };
        let ns = states.len();
        let mut p = vec![vec![0.0; ns]; ns];
        for (a, st) in states.iter().enumerate() {
            let n = st.len();
            if n < 2 {
                for s in 0..k {
                    if st.contains(&s) {
                        continue;
                    }
                    let mut next = st.clone();
                    next.push(s);
                    let de = energy_of(&next) - energy_of(st);
                    let acc = birth_acceptance(z, phi1(s), volume, n, de, pb, pd);
                    p[a][index(&next)] += pb / k as f64 * acc;
                }
            }
            for (i, &s) in st.iter().enumerate() {
                let mut next = st.clone();
                next.remove(i);
                let de = energy_of(&next) - energy_of(st);
                let acc = death_acceptance(z, phi1(s), volume, n, de, pb, pd);
                p[a][index(&next)] += pd / n as f64 * acc;
                for t in 0..k {
                    if t == s || st.contains(&t) {
                        continue;
                    }
                    let mut moved = next.clone();
                    moved.push(t);
                    let de = energy_of(&moved) - energy_of(st);
                    let acc = move_acceptance(phi1(s), phi1(t), de);
                    p[a][index(&moved)] += pm / n as f64 / (k - 1) as f64 * acc;
                }
            }
            let out: f64 = p[a].iter().sum();
            p[a][a] += 1.0 - out;
        }
        for a in 0..ns {
            for b in 0..ns {
                let lhs = weight(&states[a]) * p[a][b];
                let rhs = weight(&states[b]) * p[b][a];
                assert!((lhs - rhs).abs() <= 1e-14 * lhs.abs().max(rhs.abs()).max(1e-300), "{a}->{b}");
            }
        }
    }

    #[test]
    fn ideal_gas_mean_count() {
        let m = EnergyModel::new(PairPotential::Zero, box1(10.0));
        let params = GcmcParams::balanced(0.5, 0.2, 1.0, 5).unwrap();
        let ens = sample_ensemble(&m, &params, 2000, Thinning::Auto, 4000).unwrap();
        let counts: Vec<f64> = ens.samples.iter().map(|s| s.len() as f64).collect();
        let est = crate::stats::mean_stderr(&counts);
        let se = est.stderr * ens.diagnostics.tau_n.max(1.0).sqrt();
        assert!((est.mean - 5.0).abs() < 3.0 * se + 0.05, "{est:?}");
    }

    #[test]
    fn single_sample_and_vanishing_activity() {
        let m = EnergyModel::new(lj(), box1(10.0));
        let params = GcmcParams::balanced(0.5, 0.2, 0.5, 1).unwrap();
        assert_eq!(sample_ensemble(&m, &params, 10, Thinning::Fixed(1), 1).unwrap().len(), 1);
        let cfg = Configuration::from_flat(*m.sim_box(), vec![-3.0, 0.0 + 1.0, 3.0]).unwrap();
        let tiny = GcmcParams::balanced(1e-9, 0.2, 0.5, 1).unwrap();
        let mut s = ChainState::new(&m, cfg, 1).unwrap();
        for _ in 0..2000 {
            gcmc_step(&m, &tiny, &mut s);
        }
        assert!(s.configuration().is_empty());
    }

    #[test]
    fn parallel_sampling_is_deterministic() {
        let m = EnergyModel::new(lj(), box1(10.0));
        let params = GcmcParams::balanced(0.5, 0.2, 0.5, 40).unwrap();
        let a = sample_ensemble_parallel(&m, &params, 500, Thinning::Fixed(5), 100, 4).unwrap();
        let b = sample_ensemble_parallel(&m, &params, 500, Thinning::Fixed(5), 100, 4).unwrap();
        assert_eq!(a.samples, b.samples);
        let single = sample_ensemble(&m, &params.with_seed(42), 500, Thinning::Fixed(5), 100).unwrap();
        assert_eq!(&a.samples[200..300], &single.samples[..]);
    }

    #[test]
    fn pair_measure_totals() {
        for (d, mode) in [(1, BoundaryMode::Free), (2, BoundaryMode::Free), (3, BoundaryMode::Free)] {
            let b = SimBox::new(d, 2.0, mode).unwrap();
            let total = pair_measure(&b, 0.0, 2.0 * (d as f64).sqrt());
            let exact = 0.5 * b.volume() * b.volume();
            assert!((total - exact).abs() / exact < 1e-3, "d={d}: {total} vs {exact}");
        }
        let l: f64 = 3.0;
        let b = SimBox::new(2, l, BoundaryMode::Free).unwrap();
        let g = |r: f64| 0.5 * (std::f64::consts::PI * l * l * r * r - 8.0 * l * r.powi(3) / 3.0 + 0.5 * r.powi(4));
        for (a, c) in [(0.0, 0.5), (0.5, 1.7), (1.7, 3.0)] {
            let exact = g(c) - g(a);
            assert!((pair_measure(&b, a, c) - exact).abs() < 1e-10 * exact, "[{a},{c}]");
        }
    }

    #[test]
    fn ideal_gas_correlations_are_flat() {
        let b = SimBox::new(1, 10.0, BoundaryMode::Free).unwrap();
        let m = EnergyModel::new(PairPotential::Zero, b);
        let z = 0.5;
        let params = GcmcParams::balanced(z, 0.2, 1.0, 9).unwrap();
        let ens = sample_ensemble_parallel(&m, &params, 2000, Thinning::Fixed(40), 2500, 4).unwrap();
        let r1 = estimate_rho(&ens.samples, 1, &Binning { bins: 10, r_max: None }).unwrap();
        let r2 = estimate_rho(&ens.samples, 2, &Binning { bins: 8, r_max: Some(8.0) }).unwrap();
        let off1 = r1.values.iter().zip(&r1.stderr).filter(|(v, s)| (*v - z).abs() > 4.0 * **s).count();
        let off2 = r2.values.iter().zip(&r2.stderr).filter(|(v, s)| (*v - z * z).abs() > 4.0 * **s).count();
        assert!(off1 <= 1 && off2 <= 1, "{r1:?} {r2:?}");
        assert_eq!(ruelle_check(&r1, &r2, 2.0 * z).verdict, Verdict::Pass);
        assert_eq!(ruelle_check(&r1, &r2, 0.5 * z).verdict, Verdict::Fail);
        assert!(estimate_rho(&[], 1, &Binning { bins: 4, r_max: None }).is_err());
    }

    #[test]
    fn lj_pair_correlation_vanishes_at_contact() {
        let b = SimBox::new(1, 10.0, BoundaryMode::Free).unwrap();
        let m = EnergyModel::new(lj(), b);
        let params = GcmcParams::balanced(0.5, 0.3, 0.5, 3).unwrap();
        let ens = sample_ensemble(&m, &params, 2000, Thinning::Fixed(20), 2000).unwrap();
        let r2 = estimate_rho(&ens.samples, 2, &Binning { bins: 40, r_max: Some(4.0) }).unwrap();
        assert_eq!(r2.values[0], 0.0);
        assert_eq!(r2.values[4], 0.0);
        assert!(r2.values[20] > 0.0);
    }

    #[test]
    fn empty_runs_pass_ruelle() {
        let b = SimBox::new(1, 10.0, BoundaryMode::Free).unwrap();
        let m = EnergyModel::new(PairPotential::Zero, b);
        let params = GcmcParams::balanced(1e-12, 0.2, 0.5, 3).unwrap();
        let ens = sample_ensemble(&m, &params, 10, Thinning::Fixed(1), 50).unwrap();
        let r1 = estimate_rho(&ens.samples, 1, &Binning { bins: 5, r_max: None }).unwrap();
        let r2 = estimate_rho(&ens.samples, 2, &Binning { bins: 5, r_max: None }).unwrap();
        assert_eq!(ruelle_check(&r1, &r2, 1e-3).verdict, Verdict::Pass);
    }

    #[test]
    fn energy_is_permutation_invariant() {
        let b = SimBox::new(2, 10.0, BoundaryMode::Free).unwrap();
        let m = EnergyModel::new(lj(), b);
        let pts = vec![0.0, 0.0, 1.2, 0.3, -2.0, 1.0, 3.0, -3.0];
        let perm = vec![3.0, -3.0, -2.0, 1.0, 0.0, 0.0, 1.2, 0.3];
        let a = energy(&m, &Configuration::from_flat(b, pts).unwrap());
        let c = energy(&m, &Configuration::from_flat(b, perm).unwrap());
        assert!((a - c).abs() < 1e-15);
    }
}
