//! Euler-Maruyama integration of the gradient dynamics, the environment
//! process and the coupled tagged-particle process.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calculus::{log_density_gradient, pair_drift, self_force_sum, SignConvention};
use crate::error::{invalid, Error, Result};
use crate::geometry::{BoundaryMode, Configuration, SimBox};
use crate::gibbs::EnergyModel;

/// Default time step.
pub const DEFAULT_DT: f64 = 1e-4;
/// Rejection-rate threshold above which a state raises its warning flag.
pub const REJECTION_WARNING_RATE: f64 = 0.2;

/// Default core rejection radius `0.5 * 2^(1/6)`.
pub fn default_rejection_radius() -> f64 {
    0.5 * 2f64.powf(1.0 / 6.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    /// Gradient dynamics of the particles alone.
    Gsd,
    /// Gradient dynamics with the extra drift from a particle fixed at the origin.
    Gsdad,
    /// Environment seen from the tagged particle.
    Env,
    /// Tagged position together with its environment.
    Coup,
}

impl System {
    pub const ALL: [System; 4] = [System::Gsd, System::Gsdad, System::Env, System::Coup];

    pub fn as_str(self) -> &'static str {
        match self {
            System::Gsd => "gsd",
            System::Gsdad => "gsdad",
            System::Env => "env",
            System::Coup => "coup",
        }
    }

    /// Whether the system has a particle pinned at the origin.
    pub fn has_origin(self) -> bool {
        self != System::Gsd
    }
}

impl std::fmt::Display for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown system '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryHandling {
    Reflect,
    Periodic,
}

impl BoundaryHandling {
    pub fn for_box(b: &SimBox) -> Self {
        match b.mode() {
            BoundaryMode::Free => BoundaryHandling::Reflect,
            BoundaryMode::Periodic => BoundaryHandling::Periodic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorParams {
    pub dt: f64,
    pub r_rej: f64,
    pub force_clamp: Option<f64>,
    pub boundary: BoundaryHandling,
    pub seed: u64,
    /// Steps per rejection-rate window.
    pub window: u64,
}

impl IntegratorParams {
    pub fn new(dt: f64, boundary: BoundaryHandling, seed: u64) -> Result<Self> {
        let p = Self { dt, r_rej: default_rejection_radius(), force_clamp: None, boundary, seed, window: 1000 };
        p.check()?;
        Ok(p)
    }

    pub fn for_box(b: &SimBox, seed: u64) -> Self {
        Self {
            dt: DEFAULT_DT,
            r_rej: default_rejection_radius(),
            force_clamp: None,
            boundary: BoundaryHandling::for_box(b),
            seed,
            window: 1000,
        }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_rejection_radius(mut self, r: f64) -> Self {
        self.r_rej = r;
        self
    }

    pub fn with_force_clamp(mut self, clamp: Option<f64>) -> Self {
        self.force_clamp = clamp;
        self
    }

    fn check(&self) -> Result<()> {
        if !(self.dt >= 0.0 && self.dt.is_finite()) {
            return invalid("dt must be finite and nonnegative");
        }
        if !(self.r_rej >= 0.0 && self.r_rej.is_finite()) {
            return invalid("rejection radius must be finite and nonnegative");
        }
        if self.force_clamp.is_some_and(|c| !(c > 0.0)) {
            return invalid("force clamp must be positive");
        }
        if self.window == 0 {
            return invalid("rejection window must be positive");
        }
        Ok(())
    }

    /// Checks the parameters against a box.
    pub fn validate(&self, b: &SimBox) -> Result<()> {
        self.check()?;
        if self.r_rej < b.r_distinct() {
            return invalid("rejection radius is below the distinctness radius");
        }
        if self.boundary != BoundaryHandling::for_box(b) {
            return invalid("boundary handling does not match the box mode");
        }
        Ok(())
    }
}

/// Integrator state: positions, optional tagged position, time and RNG.
#[derive(Debug, Clone)]
pub struct SDEState {
    system: System,
    sim_box: SimBox,
    coords: Vec<f64>,
    xi: Option<Vec<f64>>,
    t: f64,
    rng: ChaCha8Rng,
    steps: u64,
    rejections: u64,
    window_steps: u64,
    window_rejections: u64,
    warning: bool,
}

impl SDEState {
    /// The tagged position is required for `Coup` and forbidden otherwise.
    pub fn new(system: System, config: &Configuration, xi: Option<Vec<f64>>, seed: u64) -> Result<Self> {
        let d = config.dim();
        match (&xi, system) {
            (None, System::Coup) => return invalid("the coupled system needs a tagged position"),
            (Some(_), s) if s != System::Coup => return invalid(format!("{s} has no tagged position")),
            (Some(x), _) if x.len() != d || x.iter().any(|c| !c.is_finite()) => {
                return invalid("tagged position must be a finite d-vector")
            }
            _ => {}
        }
        Ok(Self {
            system,
            sim_box: *config.sim_box(),
            coords: config.coords().to_vec(),
            xi,
            t: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            steps: 0,
            rejections: 0,
            window_steps: 0,
            window_rejections: 0,
            warning: false,
        })
    }

    pub fn system(&self) -> System {
        self.system
    }

    pub fn sim_box(&self) -> &SimBox {
        &self.sim_box
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn xi(&self) -> Option<&[f64]> {
        self.xi.as_deref()
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.sim_box.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn rejections(&self) -> u64 {
        self.rejections
    }

    pub fn rejection_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.rejections as f64 / self.steps as f64
        }
    }

    /// Set once some window exceeded the rejection threshold.
    pub fn warning(&self) -> bool {
        self.warning
    }

    pub fn configuration(&self) -> Result<Configuration> {
        Configuration::from_flat(self.sim_box, self.coords.clone())
    }
}

/// `-sum_{j != i} grad phi(x_i - x_j)` per particle, flat.
pub fn drift_gsd(model: &EnergyModel, coords: &[f64]) -> Result<Vec<f64>> {
    pair_drift(model, coords)
}

/// `drift_gsd(i) - grad phi(x_i)`.
pub fn drift_gsdad(model: &EnergyModel, coords: &[f64]) -> Result<Vec<f64>> {
    log_density_gradient(model, coords, Some(SignConvention::Minus))
}

/// `drift_gsdad(i) - sum_j grad phi(y_j)`.
pub fn drift_env(model: &EnergyModel, coords: &[f64]) -> Result<Vec<f64>> {
    let d = model.sim_box().dim();
    let mut out = drift_gsdad(model, coords)?;
    let s = self_force_sum(model.potential(), coords, d)?;
    for o in out.chunks_exact_mut(d) {
        for k in 0..d {
            o[k] -= s[k];
        }
    }
    Ok(out)
}

pub fn drift(system: System, model: &EnergyModel, coords: &[f64]) -> Result<Vec<f64>> {
    match system {
        System::Gsd => drift_gsd(model, coords),
        System::Gsdad => drift_gsdad(model, coords),
        System::Env | System::Coup => drift_env(model, coords),
    }
}

fn clamp(v: &mut [f64], max: f64) {
    let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm > max {
        v.iter_mut().for_each(|c| *c *= max / norm);
    }
}

/// Reflects once at the walls; false if still outside.
fn reflect(p: &mut [f64], h: f64) -> bool {
    for c in p.iter_mut() {
        if *c > h {
            *c = 2.0 * h - *c;
        } else if *c < -h {
            *c = -2.0 * h - *c;
        }
        if !(-h..=h).contains(c) {
            return false;
        }
    }
    true
}

fn admissible(system: System, b: &SimBox, coords: &[f64], r_rej: f64) -> bool {
    let d = b.dim();
    let r2 = r_rej * r_rej;
    let n = coords.len() / d;
    for i in 0..n {
        let p = &coords[i * d..(i + 1) * d];
        if system.has_origin() && p.iter().map(|c| c * c).sum::<f64>() < r2 {
            return false;
        }
        for j in (i + 1)..n {
            if b.distance_sq(p, &coords[j * d..(j + 1) * d]) < r2 {
                return false;
            }
        }
    }
    true
}

/// One Euler-Maruyama step. Returns whether the proposal was accepted;
/// rejected proposals leave positions unchanged but time still advances.
pub fn step(model: &EnergyModel, state: &mut SDEState, params: &IntegratorParams) -> bool {
    let system = state.system;
    let b = state.sim_box;
    let d = b.dim();
    let n = state.len();
    let noise_len = if matches!(system, System::Env | System::Coup) { (n + 1) * d } else { n * d };
    let noise: Vec<f64> = (0..noise_len).map(|_| StandardNormal.sample(&mut state.rng)).collect();
    let sq = (2.0 * params.dt).sqrt();

    let accepted = (|| {
        let mut dr = drift(system, model, &state.coords).ok()?;
        if let Some(c) = params.force_clamp {
            dr.chunks_exact_mut(d).for_each(|v| clamp(v, c));
        }
        let mut next = state.coords.clone();
        let (shared, own) = if noise_len > n * d { noise.split_at(d) } else { noise.split_at(0) };
        for i in 0..n {
            for k in 0..d {
                let z = own[i * d + k] - shared.get(k).copied().unwrap_or(0.0);
                next[i * d + k] += dr[i * d + k] * params.dt + sq * z;
            }
        }
        let next_xi = match (&state.xi, system) {
            (Some(xi), System::Coup) => {
                let mut f = self_force_sum(model.potential(), &state.coords, d).ok()?;
                if let Some(c) = params.force_clamp {
                    clamp(&mut f, c);
                }
                Some((0..d).map(|k| xi[k] + f[k] * params.dt + sq * shared[k]).collect::<Vec<f64>>())
            }
            _ => None,
        };
        for p in next.chunks_exact_mut(d) {
            match params.boundary {
                BoundaryHandling::Periodic => b.wrap(p),
                BoundaryHandling::Reflect => {
                    if !reflect(p, b.half()) {
                        return None;
                    }
                }
            }
        }
        if next.iter().any(|c| !c.is_finite()) || !admissible(system, &b, &next, params.r_rej) {
            return None;
        }
        Some((next, next_xi))
    })();

    let ok = accepted.is_some();
    if let Some((next, next_xi)) = accepted {
        state.coords = next;
        if next_xi.is_some() {
            state.xi = next_xi;
        }
    } else {
        state.rejections += 1;
        state.window_rejections += 1;
    }
    state.t += params.dt;
    state.steps += 1;
    state.window_steps += 1;
    if state.window_steps == params.window {
        if state.window_rejections as f64 > REJECTION_WARNING_RATE * params.window as f64 {
            state.warning = true;
        }
        state.window_steps = 0;
        state.window_rejections = 0;
    }
    ok
}

/// `xi = x_t`, `y_i = x_i - x_t` for the remaining particles in order.
///
/// Displacements follow the source box convention; the environment is
/// validated against `env_box`.
pub fn to_environment_frame(config: &Configuration, tagged: usize, env_box: SimBox) -> Result<(Vec<f64>, Configuration)> {
    if tagged >= config.len() {
        return invalid(format!("tagged index {tagged} out of range for {} particles", config.len()));
    }
    if env_box.dim() != config.dim() {
        return invalid("environment box dimension differs");
    }
    let d = config.dim();
    let xi = config.point(tagged).to_vec();
    let mut coords = Vec::with_capacity((config.len() - 1) * d);
    let mut disp = vec![0.0; d];
    for (i, p) in config.points().enumerate() {
        if i != tagged {
            config.sim_box().displacement(p, &xi, &mut disp);
            coords.extend_from_slice(&disp);
        }
    }
    Ok((xi, Configuration::from_flat(env_box, coords)?))
}

/// `x_1 = xi`, `x_{i+1} = y_i + xi`, wrapped into `target` when periodic.
pub fn from_environment_frame(xi: &[f64], env: &Configuration, target: SimBox) -> Result<Configuration> {
    let d = env.dim();
    if xi.len() != d || target.dim() != d {
        return invalid("dimension mismatch in frame transform");
    }
    let mut coords = Vec::with_capacity((env.len() + 1) * d);
    let mut x0 = xi.to_vec();
    target.wrap(&mut x0);
    coords.extend_from_slice(&x0);
    for y in env.points() {
        let mut p: Vec<f64> = y.iter().zip(xi).map(|(a, b)| a + b).collect();
        target.wrap(&mut p);
        coords.extend_from_slice(&p);
    }
    Configuration::from_flat(target, coords)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    pub xi: Option<Vec<f64>>,
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub system: System,
    pub sim_box: SimBox,
    pub potential: crate::potentials::PairPotential,
    pub params: IntegratorParams,
    pub stride: usize,
    pub frames: Vec<Frame>,
    pub steps: u64,
    pub rejections: u64,
    pub warning: bool,
}

impl Trajectory {
    pub fn rejection_rate(&self) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.rejections as f64 / self.steps as f64
        }
    }
}

fn frame(state: &SDEState) -> Frame {
    Frame { t: state.t, xi: state.xi.clone(), coords: state.coords.clone() }
}

/// Runs `n_steps` steps, recording the initial frame and every `stride`-th one.
///
/// The observer sees the state after every step.
pub fn run_trajectory(
    model: &EnergyModel,
    mut state: SDEState,
    params: &IntegratorParams,
    n_steps: usize,
    stride: usize,
    mut observer: Option<&mut dyn FnMut(&SDEState)>,
) -> Result<(Trajectory, SDEState)> {
    if n_steps == 0 {
        return invalid("at least one step is required");
    }
    if stride == 0 {
        return invalid("stride must be positive");
    }
    params.validate(&state.sim_box)?;
    if model.sim_box() != &state.sim_box {
        return invalid("state and model live in different boxes");
    }
    let mut frames = vec![frame(&state)];
    for k in 1..=n_steps {
        step(model, &mut state, params);
        if let Some(obs) = observer.as_mut() {
            obs(&state);
        }
        if k % stride == 0 {
            frames.push(frame(&state));
        }
    }
    let traj = Trajectory {
        system: state.system,
        sim_box: state.sim_box,
        potential: model.potential().clone(),
        params: *params,
        stride,
        frames,
        steps: state.steps,
        rejections: state.rejections,
        warning: state.warning,
    };
    Ok((traj, state))
}

/// The tagged path of a coupled trajectory.
pub fn tagged_projection(traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
    if traj.system != System::Coup {
        return invalid(format!("tagged projection needs a coupled trajectory, got {}", traj.system));
    }
    traj.frames
        .iter()
        .map(|f| f.xi.clone().ok_or_else(|| Error::InvalidArgument("frame without tagged position".into())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::PairPotential;
    use crate::stats::mean_stderr;
    use rand::Rng;

    fn lj() -> PairPotential {
        PairPotential::lennard_jones(0.04).unwrap()
    }

    fn free(d: usize, side: f64) -> SimBox {
        SimBox::new(d, side, BoundaryMode::Free).unwrap()
    }

    fn spaced(b: SimBox, n: usize, seed: u64) -> Configuration {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = b.dim();
        let mut c: Vec<f64> = Vec::new();
        while c.len() < n * d {
            let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.4 * b.side()..0.4 * b.side())).collect();
            let ok = p.iter().map(|x| x * x).sum::<f64>() > 1.21
                && c.chunks_exact(d).all(|q| b.distance_sq(q, &p) > 1.21);
            if ok {
                c.extend(p);
            }
        }
        Configuration::from_flat(b, c).unwrap()
    }

    #[test]
    fn drift_examples() {
        let m = EnergyModel::new(lj(), free(2, 10.0));
        assert_eq!(drift_gsd(&m, &[1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
        let r = 2f64.powf(1.0 / 6.0);
        let f = drift_gsd(&m, &[0.0, 1.0, r, 1.0]).unwrap();
        assert!(f.iter().all(|v| v.abs() < 1e-12));
        let m0 = EnergyModel::new(PairPotential::Zero, free(2, 10.0));
        assert!(drift_env(&m0, &[1.0, 0.0, 0.0, 1.0]).unwrap().iter().all(|&v| v == 0.0));
        let e = drift_env(&m, &[r, 0.0]).unwrap();
        assert!(e.iter().all(|v| v.abs() < 1e-12));
        let far = drift_gsdad(&m, &[4.9, 4.9]).unwrap();
        assert!(far.iter().all(|v| v.abs() < 1e-5));
        assert!(matches!(drift_gsdad(&m, &[0.0, 0.0]), Err(Error::Singularity(_))));
    }

    #[test]
    fn env_drift_is_transformed_gsd_drift() {
        let big = free(2, 40.0);
        let m = EnergyModel::new(lj(), big);
        for seed in 0..5 {
            let x = spaced(free(2, 10.0), 3, seed);
            let x = Configuration::from_flat(big, x.coords().to_vec()).unwrap();
            let g = drift_gsd(&m, x.coords()).unwrap();
            let (_, env) = to_environment_frame(&x, 0, big).unwrap();
            let e = drift_env(&m, env.coords()).unwrap();
            for i in 0..2 {
                for k in 0..2 {
                    let expected = g[(i + 1) * 2 + k] - g[k];
                    assert!((e[i * 2 + k] - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn frame_round_trip() {
        let b = free(2, 10.0);
        let env_box = free(2, 20.0);
        let single = Configuration::from_flat(b, vec![1.0, 2.0]).unwrap();
        let (xi, env) = to_environment_frame(&single, 0, env_box).unwrap();
        assert_eq!(xi, vec![1.0, 2.0]);
        assert!(env.is_empty());
        let x = spaced(b, 6, 3);
        let (xi, env) = to_environment_frame(&x, 0, env_box).unwrap();
        let back = from_environment_frame(&xi, &env, b).unwrap();
        for (a, c) in back.coords().iter().zip(x.coords()) {
            assert!((a - c).abs() < 1e-12);
        }
        assert_eq!(env.point(0), &[x.point(1)[0] - xi[0], x.point(1)[1] - xi[1]][..]);
        assert!(to_environment_frame(&x, 6, env_box).is_err());
        let empty = Configuration::empty(env_box);
        assert_eq!(from_environment_frame(&[0.5, 0.5], &empty, b).unwrap().coords(), &[0.5, 0.5]);
    }

    #[test]
    fn zero_dt_is_identity() {
        let b = free(2, 10.0);
        let m = EnergyModel::new(lj(), b);
        let x = spaced(b, 5, 1);
        let mut s = SDEState::new(System::Gsdad, &x, None, 3).unwrap();
        let p = IntegratorParams::for_box(&b, 3).with_dt(0.0);
        assert!(step(&m, &mut s, &p));
        assert_eq!(s.coords(), x.coords());
    }

    #[test]
    fn brownian_increments_without_interaction() {
        let b = SimBox::new(2, 10.0, BoundaryMode::Periodic).unwrap();
        let m = EnergyModel::new(PairPotential::Zero, b);
        let dt = 1e-3;
        let p = IntegratorParams::for_box(&b, 0).with_dt(dt).with_rejection_radius(b.r_distinct());
        let x = Configuration::from_flat(b, vec![0.0, 0.0]).unwrap();
        let mut s = SDEState::new(System::Gsd, &x, None, 11).unwrap();
        let mut sq = Vec::new();
        for _ in 0..100_000 {
            let before = s.coords().to_vec();
            step(&m, &mut s, &p);
            let mut dvec = [0.0; 2];
            b.displacement(s.coords(), &before, &mut dvec);
            sq.push(dvec[0] * dvec[0] + dvec[1] * dvec[1]);
        }
        let e = mean_stderr(&sq);
        assert!((e.mean - 4.0 * dt).abs() < 3.0 * e.stderr, "{e:?}");
    }

    #[test]
    fn environment_noise_covariance() {
        let b = SimBox::new(1, 1000.0, BoundaryMode::Periodic).unwrap();
        let m = EnergyModel::new(PairPotential::Zero, b);
        let dt = 1e-2;
        let p = IntegratorParams::for_box(&b, 0).with_dt(dt).with_rejection_radius(b.r_distinct());
        let x = Configuration::from_flat(b, vec![10.0, -20.0]).unwrap();
        let mut s = SDEState::new(System::Env, &x, None, 5).unwrap();
        let (mut c00, mut c01, mut c11) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..100_000 {
            let before = s.coords().to_vec();
            step(&m, &mut s, &p);
            let a = s.coords()[0] - before[0];
            let c = s.coords()[1] - before[1];
            c00.push(a * a);
            c01.push(a * c);
            c11.push(c * c);
        }
        for (v, expected) in [(c00, 4.0 * dt), (c01, 2.0 * dt), (c11, 4.0 * dt)] {
            let e = mean_stderr(&v);
            assert!((e.mean - expected).abs() < 3.0 * e.stderr, "{e:?} vs {expected}");
        }
    }

    #[test]
    fn coupled_run_equals_shifted_gradient_dynamics() {
        let big = free(2, 1000.0);
        let m = EnergyModel::new(lj(), big);
        let x = spaced(free(2, 8.0), 6, 9);
        let x = Configuration::from_flat(big, x.coords().to_vec()).unwrap();
        let (xi, env) = to_environment_frame(&x, 0, big).unwrap();
        let p = IntegratorParams::for_box(&big, 0);
        let (tx, _) = run_trajectory(&m, SDEState::new(System::Gsd, &x, None, 42).unwrap(), &p, 2000, 100, None).unwrap();
        let (tc, _) = run_trajectory(&m, SDEState::new(System::Coup, &env, Some(xi), 42).unwrap(), &p, 2000, 100, None).unwrap();
        assert_eq!(tx.rejections, tc.rejections);
        for (fx, fc) in tx.frames.iter().zip(&tc.frames) {
            let xi = fc.xi.as_ref().unwrap();
            for k in 0..2 {
                assert!((fx.coords[k] - xi[k]).abs() < 1e-9);
            }
            for i in 0..5 {
                for k in 0..2 {
                    let y = fx.coords[(i + 1) * 2 + k] - fx.coords[k];
                    assert!((y - fc.coords[i * 2 + k]).abs() < 1e-9);
                }
            }
        }
        let path = tagged_projection(&tc).unwrap();
        assert_eq!(path.len(), tc.frames.len());
        assert!(tagged_projection(&tx).is_err());
    }

    #[test]
    fn trajectories_are_reproducible() {
        let b = SimBox::new(2, 6.0, BoundaryMode::Periodic).unwrap();
        let m = EnergyModel::new(lj(), b);
        let x = spaced(b, 8, 4);
        let p = IntegratorParams::for_box(&b, 0);
        let run = || run_trajectory(&m, SDEState::new(System::Env, &x, None, 7).unwrap(), &p, 500, 10, None).unwrap().0;
        let (a, c) = (run(), run());
        assert_eq!(a, c);
        assert_eq!(a.frames.len(), 51);
        let (one, _) = run_trajectory(&m, SDEState::new(System::Env, &x, None, 7).unwrap(), &p, 1, 1, None).unwrap();
        let mut s = SDEState::new(System::Env, &x, None, 7).unwrap();
        step(&m, &mut s, &p);
        assert_eq!(one.frames[1].coords, s.coords());
        assert!(a.frames.iter().all(|f| f.coords.len() == x.coords().len()));
    }

    #[test]
    fn rejection_and_warning() {
        let b = free(1, 10.0);
        let m = EnergyModel::new(PairPotential::Zero, b);
        let x = Configuration::from_flat(b, vec![1.0, 1.5]).unwrap();
        let mut s = SDEState::new(System::Gsd, &x, None, 1).unwrap();
        let p = IntegratorParams::for_box(&b, 0).with_dt(1e-6).with_rejection_radius(1.0);
        let mut observed = 0;
        let mut obs = |_: &SDEState| observed += 1;
        let (t, s2) = run_trajectory(&m, s.clone(), &p, 1000, 1000, Some(&mut obs)).unwrap();
        assert_eq!(observed, 1000);
        assert_eq!(t.rejections, 1000);
        assert!(t.warning);
        assert!((s2.time() - 1e-3).abs() < 1e-15);
        assert_eq!(s2.coords(), x.coords());
        assert!(!step(&m, &mut s, &p));
        assert!(run_trajectory(&m, s, &p, 0, 1, None).is_err());
    }

    #[test]
    fn reflection_keeps_particles_inside() {
        let b = free(1, 2.0);
        let m = EnergyModel::new(PairPotential::Zero, b);
        let x = Configuration::from_flat(b, vec![0.99]).unwrap();
        let p = IntegratorParams::for_box(&b, 0).with_dt(1e-3).with_rejection_radius(b.r_distinct());
        let (t, _) = run_trajectory(&m, SDEState::new(System::Gsd, &x, None, 3).unwrap(), &p, 5000, 1, None).unwrap();
        assert!(t.frames.iter().all(|f| f.coords[0].abs() <= 1.0));
    }
}
