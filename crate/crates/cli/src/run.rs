//! The `sample`, `simulate`, `verify`, `conditions` and `report` commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tagdyn_core::calculus::{
    CylinderFunction, OuterFunction, ProductCylinderFunction, SignConvention, StateFunction, TestFunction, VectorField,
};
use tagdyn_core::dynamics::{run_trajectory, IntegratorParams, SDEState, System};
use tagdyn_core::geometry::{Configuration, SimBox};
use tagdyn_core::gibbs::{energy, sample_ensemble_parallel, ChainDiagnostics, EnergyModel, Ensemble, GcmcParams};
use tagdyn_core::potentials::{
    check_dlq, check_integrability, check_tail_decay, stability_probe, ConditionReport, QuadratureParams,
};
use tagdyn_core::stats::Verdict;
use tagdyn_core::verify::{self, MCTestReport, PathSettings};
use tagdyn_core::Error as CoreError;

use crate::config::{emit, ExperimentConfig, Identity, SignChoice};
use crate::error::CliError;
use crate::trajfile::{read_trajectory, write_trajectory, TrajectoryFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Sample,
    Simulate,
    Verify,
    Conditions,
    Report,
}

/// Files written by a command and whether any requested verdict failed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub artifacts: Vec<PathBuf>,
    pub failed: bool,
    pub summary: String,
}

/// Replaces every seed in the configuration by `seed`.
pub fn apply_seed(config: &mut ExperimentConfig, seed: u64) {
    config.sampler.seed = seed;
    config.dynamics.seed = seed;
    config.verify.seeds = vec![seed];
}

pub fn run(command: Command, config: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome, CliError> {
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    match command {
        Command::Sample => sample(config, out_dir),
        Command::Simulate => simulate(config, out_dir),
        Command::Verify => verify_suite(config, out_dir),
        Command::Conditions => conditions(config, out_dir),
        Command::Report => report(config, out_dir),
    }
}

pub fn model(config: &ExperimentConfig) -> Result<EnergyModel, CliError> {
    let m = &config.model;
    let b = SimBox::new(m.dim, m.side, m.boundary)?;
    Ok(EnergyModel::new(m.potential.clone(), b))
}

fn artifact(dir: &Path, config: &ExperimentConfig, suffix: &str) -> PathBuf {
    dir.join(format!("{}_{suffix}", config.output.prefix))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn draw_ensemble(config: &ExperimentConfig, model: &EnergyModel, seed: u64, count: usize) -> Result<Ensemble, CliError> {
    let s = &config.sampler;
    let params = GcmcParams::balanced(config.model.z, s.p_move, s.displacement, seed)?;
    let per_chain = count.div_ceil(s.chains);
    let mut e = sample_ensemble_parallel(model, &params, s.burn_in, s.thinning, per_chain, s.chains)?;
    e.samples.truncate(count);
    Ok(e)
}

fn integrator(config: &ExperimentConfig, b: &SimBox, seed: u64) -> IntegratorParams {
    let d = &config.dynamics;
    let p = IntegratorParams::for_box(b, seed).with_dt(d.dt);
    match d.rejection_radius {
        Some(r) => p.with_rejection_radius(r),
        None => p,
    }
}

/// Writes `t,n,energy[,xi_1..xi_d]` per frame.
pub fn export_csv(path: &Path, file: &TrajectoryFile) -> Result<(), CliError> {
    let b = file.sim_box()?;
    let m = EnergyModel::new(file.potential()?, b);
    let mut w = csv::Writer::from_path(path)?;
    let coupled = file.header.system == Some(System::Coup);
    let mut head = vec!["t".to_string(), "n".into(), "energy".into()];
    if coupled {
        head.extend((1..=b.dim()).map(|k| format!("xi_{k}")));
    }
    w.write_record(&head)?;
    for f in &file.frames {
        let cfg = Configuration::from_flat(b, f.coords.clone())?;
        let mut row = vec![f.t.to_string(), cfg.len().to_string(), energy(&m, &cfg).to_string()];
        if let Some(xi) = &f.xi {
            row.extend(xi.iter().map(f64::to_string));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct SampleOutput<'a> {
    command: &'static str,
    config: String,
    seed: u64,
    count: usize,
    diagnostics: &'a ChainDiagnostics,
}

fn sample(config: &ExperimentConfig, dir: &Path) -> Result<RunOutcome, CliError> {
    let m = model(config)?;
    let seed = config.sampler.seed;
    let e = draw_ensemble(config, &m, seed, config.sampler.count)?;
    let file = TrajectoryFile::from_ensemble(&e.samples, m.potential(), seed)?;
    let (tdt, csv, json) = (artifact(dir, config, "ensemble.tdt"), artifact(dir, config, "ensemble.csv"), artifact(dir, config, "sample.json"));
    write_trajectory(&tdt, &file)?;
    export_csv(&csv, &file)?;
    write_json(&json, &SampleOutput { command: "sample", config: emit(config), seed, count: e.samples.len(), diagnostics: &e.diagnostics })?;
    Ok(RunOutcome {
        summary: format!("sampled {} configurations, mean particle count {:.3}", e.samples.len(), e.diagnostics.mean_n),
        artifacts: vec![tdt, csv, json],
        failed: false,
    })
}

#[derive(Serialize)]
struct SimulateOutput {
    command: &'static str,
    config: String,
    seed: u64,
    system: System,
    steps: u64,
    frames: usize,
    rejections: u64,
    rejection_rate: f64,
    rejection_warning: bool,
}

fn simulate(config: &ExperimentConfig, dir: &Path) -> Result<RunOutcome, CliError> {
    let m = model(config)?;
    let d = &config.dynamics;
    let initial = draw_ensemble(config, &m, config.sampler.seed, 1)?.samples.remove(0);
    let params = integrator(config, m.sim_box(), d.seed);
    params.validate(m.sim_box())?;
    let xi = (d.system == System::Coup).then(|| d.xi.clone().unwrap_or_else(|| vec![0.0; config.model.dim]));
    let state = SDEState::new(d.system, &initial, xi, d.seed)?;
    let (file, out) = if d.steps == 0 {
        let traj = TrajectoryFile {
            header: crate::trajfile::TrajectoryHeader {
                dim: config.model.dim,
                side: config.model.side,
                boundary: config.model.boundary,
                system: Some(d.system),
                dt: d.dt,
                stride: d.stride as u64,
                seed: d.seed,
                potential: m.potential().to_string(),
            },
            frames: Vec::new(),
        };
        let out = SimulateOutput {
            command: "simulate",
            config: emit(config),
            seed: d.seed,
            system: d.system,
            steps: 0,
            frames: 0,
            rejections: 0,
            rejection_rate: 0.0,
            rejection_warning: false,
        };
        (traj, out)
    } else {
        let (traj, _) = run_trajectory(&m, state, &params, d.steps, d.stride, None)?;
        let out = SimulateOutput {
            command: "simulate",
            config: emit(config),
            seed: d.seed,
            system: d.system,
            steps: traj.steps,
            frames: traj.frames.len(),
            rejections: traj.rejections,
            rejection_rate: traj.rejection_rate(),
            rejection_warning: traj.warning,
        };
        (TrajectoryFile::from_trajectory(&traj), out)
    };
    let (tdt, csv, json) = (artifact(dir, config, "trajectory.tdt"), artifact(dir, config, "trajectory.csv"), artifact(dir, config, "simulate.json"));
    write_trajectory(&tdt, &file)?;
    export_csv(&csv, &file)?;
    write_json(&json, &out)?;
    Ok(RunOutcome {
        summary: format!(
            "{} steps of {}, {} frames, rejection rate {:.4}{}",
            out.steps,
            out.system,
            out.frames,
            out.rejection_rate,
            if out.rejection_warning { " (warning: a window exceeded 20%)" } else { "" }
        ),
        artifacts: vec![tdt, csv, json],
        failed: false,
    })
}

/// Test functions used by the verify suite, laid out along the first axis.
pub struct SuiteFunctions {
    pub f: CylinderFunction,
    pub g: CylinderFunction,
    pub v: VectorField,
    pub observable: CylinderFunction,
    pub tagged_a: ProductCylinderFunction,
    pub tagged_b: ProductCylinderFunction,
    pub sign_field: VectorField,
}

impl SuiteFunctions {
    pub fn new(dim: usize) -> Result<Self, CliError> {
        let e1 = |s: f64| {
            let mut v = vec![0.0; dim];
            v[0] = s;
            v
        };
        let f = CylinderFunction::new(
            dim,
            OuterFunction::PolySigmoid { p0: 0.5, p: vec![1.0], q0: -0.2, q: vec![0.7] },
            vec![TestFunction::bump(e1(1.0), 2.5, 1.0)?],
        )?;
        let g = CylinderFunction::new(
            dim,
            OuterFunction::GaussianBump { center: vec![0.5], width: 1.0, amplitude: 1.0 },
            vec![TestFunction::linear_bump(e1(-1.0), 3.0, 0.5, e1(0.3))?],
        )?;
        Ok(Self {
            v: VectorField::bump_field(e1(1.0), e1(0.5), 2.0)?,
            observable: CylinderFunction::linear(dim, TestFunction::bump(vec![0.0; dim], 2.0, 1.0)?)?,
            tagged_a: ProductCylinderFunction::new(TestFunction::bump(e1(0.2), 1.5, 1.0)?, f.clone())?,
            tagged_b: ProductCylinderFunction::new(TestFunction::linear_bump(e1(-0.3), 2.0, 1.0, e1(0.5))?, g.clone())?,
            sign_field: VectorField::radial_bump(vec![0.0; dim], 1.6, 1.0)?,
            f,
            g,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
struct SeedRun {
    seed: u64,
    ensemble_size: usize,
    sign: String,
    sign_source: String,
    sign_reports: Vec<MCTestReport>,
    reports: Vec<MCTestReport>,
}

#[derive(Serialize)]
struct VerifyOutput {
    command: &'static str,
    config: String,
    seeds: Vec<u64>,
    samples: usize,
    runs: Vec<SeedRun>,
    passed: usize,
    failed: usize,
    inconclusive: usize,
    verdict: Verdict,
}

/// Runs one identity and returns its reports.
pub fn run_identity(
    id: Identity,
    m: &EnergyModel,
    fx: &SuiteFunctions,
    samples: &[Configuration],
    settings: &PathSettings,
    config: &ExperimentConfig,
    sign: SignConvention,
) -> Result<Vec<MCTestReport>, CliError> {
    let state_pair = |s: System| match s {
        System::Coup => (StateFunction::Tagged(fx.tagged_a.clone()), StateFunction::Tagged(fx.tagged_b.clone())),
        _ => (StateFunction::Config(fx.f.clone()), StateFunction::Config(fx.g.clone())),
    };
    let reports = match id {
        Identity::Ibp => vec![verify::test_ibp(m, &fx.f, &fx.g, &fx.v, samples, sign)?],
        Identity::IbpTranslation => vec![verify::test_ibp_translation(m, &fx.f, &fx.g, samples, sign)?],
        Identity::Dirichlet(s) => {
            let (a, b) = state_pair(s);
            vec![verify::test_dirichlet(s, m, &a, &b, samples, sign)?]
        }
        Identity::Symmetry(s) => {
            let (a, b) = state_pair(s);
            vec![verify::test_symmetry(s, m, &a, &b, samples, sign)?]
        }
        Identity::Invariance(s) => vec![verify::test_invariance(s, m, &fx.observable, samples, settings, config.verify.time)?],
        Identity::Martingale(s) => {
            let g = match s {
                System::Coup => StateFunction::Tagged(fx.tagged_a.clone()),
                _ => StateFunction::Config(fx.observable.clone()),
            };
            verify::test_martingale(s, m, &g, samples, settings, &config.verify.checkpoints, sign)?
        }
    };
    Ok(reports)
}

fn verify_suite(config: &ExperimentConfig, dir: &Path) -> Result<RunOutcome, CliError> {
    let m = model(config)?;
    let fx = SuiteFunctions::new(config.model.dim)?;
    let one = CylinderFunction::constant(config.model.dim, 1.0);
    let mut runs = Vec::new();
    let mut sign_failed = false;
    for &seed in &config.verify.seeds {
        let e = draw_ensemble(config, &m, seed, config.verify.samples)?;
        let (sign, source, sign_reports) = match config.verify.sign {
            SignChoice::Fixed(s) => (s, "fixed".to_string(), Vec::new()),
            SignChoice::Auto => match verify::resolve_sign_conventions(&m, &one, &one, &fx.sign_field, &e.samples) {
                Ok((s, reps)) => (s, "resolved".to_string(), reps),
                Err(CoreError::Unidentifiable(msg)) => (SignConvention::resolved(), format!("default ({msg})"), Vec::new()),
                Err(CoreError::SignResolution(msg)) => {
                    sign_failed = true;
                    (SignConvention::resolved(), format!("default, both signs failed ({msg})"), Vec::new())
                }
                Err(other) => return Err(other.into()),
            },
        };
        let mut settings = PathSettings::new(integrator(config, m.sim_box(), seed), config.verify.paths);
        if let Some(xi) = &config.dynamics.xi {
            settings.xi0[..xi.len()].copy_from_slice(xi);
        }
        let mut reports = Vec::new();
        for &id in &config.verify.identities {
            for r in run_identity(id, &m, &fx, &e.samples, &settings, config, sign)? {
                reports.push(r.with_meta("seed", seed).with_meta("sign", sign));
            }
        }
        runs.push(SeedRun {
            seed,
            ensemble_size: e.samples.len(),
            sign: sign.to_string(),
            sign_source: source,
            sign_reports,
            reports,
        });
    }
    let all: Vec<&MCTestReport> = runs.iter().flat_map(|r| &r.reports).collect();
    let count = |v: Verdict| all.iter().filter(|r| r.verdict == v).count();
    let (passed, failed, inconclusive) = (count(Verdict::Pass), count(Verdict::Fail), count(Verdict::Inconclusive));
    let any_failed = failed > 0 || sign_failed;
    let out = VerifyOutput {
        command: "verify",
        config: emit(config),
        seeds: config.verify.seeds.clone(),
        samples: config.verify.samples,
        passed,
        failed,
        inconclusive,
        verdict: if any_failed { Verdict::Fail } else { Verdict::Pass },
        runs,
    };
    let json = artifact(dir, config, "verify.json");
    write_json(&json, &out)?;
    let mut summary = String::new();
    for run in &out.runs {
        for r in &run.reports {
            let _ = writeln!(summary, "{}", report_line(run.seed, r));
        }
    }
    let _ = write!(summary, "{passed} passed, {failed} failed, {inconclusive} inconclusive");
    Ok(RunOutcome { artifacts: vec![json], failed: any_failed, summary })
}

fn report_line(seed: u64, r: &MCTestReport) -> String {
    let t = r.metadata.get("t").map(|t| format!(" t={t}")).unwrap_or_default();
    format!(
        "seed {seed:>4}  {:<22} {:>12.4e} +- {:<10.3e} z={:>7.2}  {}",
        format!("{}{t}", r.identity),
        r.estimate,
        r.stderr,
        r.z_score,
        r.verdict
    )
}

#[derive(Serialize)]
struct ConditionsOutput {
    command: &'static str,
    config: String,
    potential: String,
    reports: Vec<ConditionReport>,
    verdict: Verdict,
}

fn conditions(config: &ExperimentConfig, dir: &Path) -> Result<RunOutcome, CliError> {
    let m = model(config)?;
    let d = config.model.dim;
    let pot = m.potential();
    let qp = QuadratureParams::default();
    let reports = vec![
        check_integrability(pot, d, &qp),
        check_dlq(pot, d, 2.0, &qp),
        check_tail_decay(pot, d, 3.0, d as f64 + 2.0, 400),
        stability_probe(pot, m.sim_box(), 200, 20, config.sampler.seed),
    ];
    let failed = reports.iter().any(|r| r.verdict == Verdict::Fail);
    let mut summary = String::new();
    for r in &reports {
        let _ = writeln!(summary, "{:<16} {:<13} {}", format!("{:?}", r.condition), r.verdict.to_string(), r.note);
    }
    let out = ConditionsOutput {
        command: "conditions",
        config: emit(config),
        potential: pot.to_string(),
        verdict: if failed { Verdict::Fail } else { Verdict::Pass },
        reports,
    };
    let json = artifact(dir, config, "conditions.json");
    write_json(&json, &out)?;
    Ok(RunOutcome { artifacts: vec![json], failed, summary: summary.trim_end().to_string() })
}

fn digest_json(name: &str, v: &serde_json::Value, out: &mut String) {
    let cmd = v.get("command").and_then(|c| c.as_str()).unwrap_or("unknown");
    let _ = writeln!(out, "== {name} ({cmd})");
    match cmd {
        "sample" => {
            let d = &v["diagnostics"];
            let _ = writeln!(out, "  seed {}  count {}  mean n {}  tau {}", v["seed"], v["count"], d["mean_n"], d["tau_n"]);
        }
        "simulate" => {
            let _ = writeln!(
                out,
                "  system {}  steps {}  frames {}  rejection rate {}  warning {}",
                v["system"], v["steps"], v["frames"], v["rejection_rate"], v["rejection_warning"]
            );
        }
        "verify" => {
            for run in v["runs"].as_array().into_iter().flatten() {
                let seed = run["seed"].as_u64().unwrap_or(0);
                let _ = writeln!(out, "  seed {seed}: sign {} ({})", run["sign"].as_str().unwrap_or("?"), run["sign_source"].as_str().unwrap_or("?"));
                for r in run["reports"].as_array().into_iter().flatten() {
                    if let Ok(r) = serde_json::from_value::<MCTestReport>(r.clone()) {
                        let _ = writeln!(out, "  {}", report_line(seed, &r));
                    }
                }
            }
            let _ = writeln!(out, "  {} passed, {} failed, {} inconclusive", v["passed"], v["failed"], v["inconclusive"]);
        }
        "conditions" => {
            for r in v["reports"].as_array().into_iter().flatten() {
                let _ = writeln!(out, "  {:<16} {:<13} {}", r["condition"].as_str().unwrap_or("?"), r["verdict"].as_str().unwrap_or("?"), r["note"].as_str().unwrap_or(""));
            }
        }
        _ => {}
    }
}

fn report(config: &ExperimentConfig, dir: &Path) -> Result<RunOutcome, CliError> {
    let prefix = format!("{}_", config.output.prefix);
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with(&prefix) && (n.ends_with(".json") || n.ends_with(".tdt")))
        .collect();
    names.sort();
    let mut text = String::new();
    for name in &names {
        let path = dir.join(name);
        if name.ends_with(".json") {
            let raw = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            digest_json(name, &serde_json::from_str(&raw)?, &mut text);
        } else {
            let f = read_trajectory(&path)?;
            let kind = f.header.system.map_or("ensemble".to_string(), |s| s.to_string());
            let max_n = f.frames.iter().map(|fr| fr.coords.len() / f.header.dim).max().unwrap_or(0);
            let _ = writeln!(
                text,
                "== {name} ({kind})\n  d {}  side {}  potential {}  frames {}  max n {}  checksum ok",
                f.header.dim,
                f.header.side,
                f.header.potential,
                f.frames.len(),
                max_n
            );
        }
    }
    if names.is_empty() {
        let _ = writeln!(text, "no outputs with prefix '{}' in {}", config.output.prefix, dir.display());
    }
    let path = artifact(dir, config, "report.txt");
    fs::write(&path, &text).map_err(|e| CliError::io(&path, e))?;
    Ok(RunOutcome { artifacts: vec![path], failed: false, summary: text.trim_end().to_string() })
}
