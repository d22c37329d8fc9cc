//! Closed-loop optimization of RIS configurations: propose a candidate,
//! simulate it, score the power transfer, repeat. Ships differential
//! evolution (rand/1/bin) over lumped-element values and/or geometry fields
//! of a [`crate::scene::PairSpec`]; any pure fitness function plugs into the
//! same loop.

use crate::mesher::{generate_mesh, Mesh, MeshSpec, MeshError};
use crate::rfanalysis::{
    port_spectra, scattering_matrix, FrequencyGrid, RfError, ScatteringMatrix,
};
use crate::scene::{
    build_pair, LumpedKind, LumpedLoad, PairSpec, PortRole, Scene, SceneError,
};
use crate::solver::{rasterize, RunConfig, Simulation, SolverError, SourceSpec, StopReason};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("invalid parameterization entry `{0}`: {1}")]
    InvalidEntry(String, String),
    #[error("every candidate of the initial population failed to evaluate")]
    AllInitialFailed,
    #[error("scene construction failed: {0}")]
    Scene(#[from] SceneError),
    #[error("meshing failed: {0}")]
    Mesh(#[from] MeshError),
    #[error("solver failed: {0}")]
    Solver(#[from] SolverError),
    #[error("analysis failed: {0}")]
    Rf(#[from] RfError),
    #[error("target frequency {0} Hz outside the analysis grid")]
    TargetOutsideGrid(f64),
}

/// What a parameter entry tunes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    LumpedR,
    LumpedL,
    LumpedC,
    GeometryField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum ParamTarget {
    /// Global port index (pair order: RIS1 row-major, then RIS2).
    Port(usize),
    /// Spec field path; see [`GEOMETRY_FIELDS`] for the supported set.
    Field(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub target: ParamTarget,
    pub lower: f64,
    pub upper: f64,
    /// Documentation only (e.g. "ohm", "farad", "mm"); values are SI for
    /// lumped kinds and mm for geometry fields.
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parameterization {
    pub entries: Vec<ParamEntry>,
}

/// Geometry paths resolvable by [`apply_geometry_field`]. Pitch and cell
/// fields apply to both arrays so the two panels stay identical.
pub const GEOMETRY_FIELDS: &[&str] = &[
    "separation_mm",
    "pitch_mm",
    "patch_width_mm",
    "cell.substrate.thickness_mm",
    "cell.substrate.width_mm",
    "cell.substrate.length_mm",
    "cell.srr.ring_separation_mm",
    "cell.srr.outer_length_mm",
    "cell.srr.outer_width_mm",
];

fn apply_geometry_field(spec: &mut PairSpec, path: &str, value: f64) {
    let both = [&mut spec.ris1, &mut spec.ris2];
    match path {
        "separation_mm" => spec.separation_mm = value,
        "pitch_mm" => {
            for a in both {
                a.pitch_mm = value;
            }
        }
        "patch_width_mm" => {
            for a in both {
                a.patch_width_mm = value;
            }
        }
        "cell.substrate.thickness_mm" => {
            for a in both {
                a.cell.substrate.thickness_mm = value;
            }
        }
        "cell.substrate.width_mm" => {
            for a in both {
                a.cell.substrate.width_mm = value;
            }
        }
        "cell.substrate.length_mm" => {
            for a in both {
                a.cell.substrate.length_mm = value;
            }
        }
        "cell.srr.ring_separation_mm" => {
            for a in both {
                a.cell.srr.ring_separation_mm = value;
            }
        }
        "cell.srr.outer_length_mm" => {
            for a in both {
                a.cell.srr.outer_length_mm = value;
            }
        }
        "cell.srr.outer_width_mm" => {
            for a in both {
                a.cell.srr.outer_width_mm = value;
            }
        }
        _ => unreachable!("validated at construction"),
    }
}

impl Parameterization {
    pub fn validate(&self, n_ports: usize) -> Result<(), OptimError> {
        if self.entries.is_empty() {
            return Err(OptimError::InvalidConfig("no parameter entries".into()));
        }
        for e in &self.entries {
            if !(e.lower < e.upper) {
                return Err(OptimError::InvalidEntry(
                    e.name.clone(),
                    "lower bound must be below upper bound".into(),
                ));
            }
            match (&e.kind, &e.target) {
                (ParamKind::GeometryField, ParamTarget::Field(path)) => {
                    if !GEOMETRY_FIELDS.contains(&path.as_str()) {
                        return Err(OptimError::InvalidEntry(
                            e.name.clone(),
                            format!("unknown geometry field `{path}`"),
                        ));
                    }
                }
                (ParamKind::GeometryField, ParamTarget::Port(_)) => {
                    return Err(OptimError::InvalidEntry(
                        e.name.clone(),
                        "geometry entries target a field path, not a port".into(),
                    ));
                }
                (_, ParamTarget::Port(p)) => {
                    if *p >= n_ports {
                        return Err(OptimError::InvalidEntry(
                            e.name.clone(),
                            format!("port {p} out of range (pair has {n_ports} ports)"),
                        ));
                    }
                }
                (_, ParamTarget::Field(_)) => {
                    return Err(OptimError::InvalidEntry(
                        e.name.clone(),
                        "lumped entries target a port index".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.entries.iter().map(|e| (e.lower, e.upper)).collect()
    }

    /// True when no entry moves mesh lines, so mesh and material grid can be
    /// reused across candidates.
    pub fn lumped_only(&self) -> bool {
        self.entries.iter().all(|e| e.kind != ParamKind::GeometryField)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub params: Vec<f64>,
    pub fitness: f64,
    pub eval_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptStopReason {
    TargetReached,
    EvalBudget,
    TimeBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub best: Candidate,
    /// Fitness of every evaluation, in evaluation order.
    pub history: Vec<f64>,
    pub stop_reason: OptStopReason,
    pub total_evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Population size; defaults to 15 x dimension, capped at 60.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<usize>,
    #[serde(default = "default_f")]
    pub f_weight: f64,
    #[serde(default = "default_cr")]
    pub crossover: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_evals: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_fitness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_budget_s: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate candidate batches on the worker pool; aggregation is ordered
    /// by candidate index, so results never depend on this flag.
    #[serde(default = "default_par")]
    pub parallel: bool,
    /// Explicit initial population (testing/restart hook); random uniform
    /// from the seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_population: Option<Vec<Vec<f64>>>,
}

fn default_f() -> f64 {
    0.7
}
fn default_cr() -> f64 {
    0.9
}
fn default_par() -> bool {
    cfg!(feature = "parallel")
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            population: None,
            f_weight: default_f(),
            crossover: default_cr(),
            max_evals: Some(2000),
            target_fitness: None,
            time_budget_s: None,
            seed: 0,
            parallel: default_par(),
            initial_population: None,
        }
    }
}

impl OptimizerConfig {
    pub fn np(&self, dim: usize) -> usize {
        self.population.unwrap_or_else(|| (15 * dim).clamp(4, 60))
    }

    pub fn validate(&self, dim: usize) -> Result<(), OptimError> {
        if dim == 0 {
            return Err(OptimError::InvalidConfig("zero-dimensional search space".into()));
        }
        if self.np(dim) < 4 {
            return Err(OptimError::InvalidConfig("population must be >= 4".into()));
        }
        if !(0.0..=2.0).contains(&self.f_weight) {
            return Err(OptimError::InvalidConfig("require 0 <= F <= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.crossover) {
            return Err(OptimError::InvalidConfig("require 0 <= CR <= 1".into()));
        }
        if self.max_evals.is_none() && self.target_fitness.is_none() && self.time_budget_s.is_none()
        {
            return Err(OptimError::InvalidConfig(
                "at least one stop condition (max_evals, target_fitness, time_budget_s)".into(),
            ));
        }
        if let Some(init) = &self.initial_population {
            if init.iter().any(|c| c.len() != dim) {
                return Err(OptimError::InvalidConfig(
                    "initial population dimension mismatch".into(),
                ));
            }
        }
        Ok(())
    }
}

fn eval_batch<F>(parallel: bool, fitness: &F, batch: &[Vec<f64>]) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        // Indexed parallel map: output order equals candidate order, so the
        // optimization trajectory is identical for any worker count.
        return batch.par_iter().map(|x| fitness(x)).collect();
    }
    let _ = parallel;
    batch.iter().map(|x| fitness(x)).collect()
}

/// Differential evolution (rand/1/bin) maximizing `fitness` over box bounds.
///
/// Failed evaluations are signalled by the fitness returning
/// `f64::NEG_INFINITY`; such candidates lose every selection.
pub fn optimize<F>(
    bounds: &[(f64, f64)],
    fitness: F,
    cfg: &OptimizerConfig,
) -> Result<OptResult, OptimError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let dim = bounds.len();
    cfg.validate(dim)?;
    for (lo, hi) in bounds {
        if !(lo < hi) {
            return Err(OptimError::InvalidConfig("bounds must satisfy lower < upper".into()));
        }
    }
    let np = cfg.np(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let start = Instant::now();

    let clamp = |x: f64, d: usize| x.clamp(bounds[d].0, bounds[d].1);
    let mut pop: Vec<Vec<f64>> = match &cfg.initial_population {
        Some(init) => init
            .iter()
            .cycle()
            .take(np)
            .map(|c| c.iter().enumerate().map(|(d, &x)| clamp(x, d)).collect())
            .collect(),
        None => (0..np)
            .map(|_| {
                (0..dim)
                    .map(|d| rng.gen_range(bounds[d].0..=bounds[d].1))
                    .collect()
            })
            .collect(),
    };

    let budget = cfg.max_evals.unwrap_or(usize::MAX);
    let mut history: Vec<f64> = Vec::new();
    let mut fit = eval_batch(cfg.parallel, &fitness, &pop[..np.min(budget)]);
    history.extend(fit.iter().copied());
    pop.truncate(fit.len());
    if fit.iter().all(|f| *f == f64::NEG_INFINITY) {
        return Err(OptimError::AllInitialFailed);
    }

    let best_of = |history: &[f64], pop: &[Vec<f64>], fit: &[f64]| -> Candidate {
        let mut bi = 0;
        for i in 1..fit.len() {
            if fit[i] > fit[bi] {
                bi = i;
            }
        }
        let eval_id = history.iter().position(|&h| h == fit[bi]).unwrap_or(0);
        Candidate { params: pop[bi].clone(), fitness: fit[bi], eval_id }
    };
    let target_hit = |best: f64| cfg.target_fitness.map_or(false, |t| best >= t);
    let over_time =
        |start: &Instant| cfg.time_budget_s.map_or(false, |b| start.elapsed().as_secs_f64() >= b);

    let stop;
    let current_best = |fit: &[f64]| fit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    'outer: loop {
        if target_hit(current_best(&fit)) {
            stop = OptStopReason::TargetReached;
            break;
        }
        if history.len() >= budget {
            stop = OptStopReason::EvalBudget;
            break;
        }
        if over_time(&start) {
            stop = OptStopReason::TimeBudget;
            break;
        }
        // Build one generation of trial vectors (all RNG on this thread).
        let mut trials: Vec<Vec<f64>> = Vec::with_capacity(pop.len());
        for i in 0..pop.len() {
            let mut pick = || loop {
                let r = rng.gen_range(0..pop.len());
                if r != i {
                    return r;
                }
            };
            let (a, b, c) = (pick(), pick(), pick());
            let jrand = rng.gen_range(0..dim);
            let trial: Vec<f64> = (0..dim)
                .map(|d| {
                    if d == jrand || rng.gen_range(0.0..1.0) < cfg.crossover {
                        clamp(pop[a][d] + cfg.f_weight * (pop[b][d] - pop[c][d]), d)
                    } else {
                        pop[i][d]
                    }
                })
                .collect();
            trials.push(trial);
        }
        let room = budget - history.len();
        let n_eval = trials.len().min(room);
        let trial_fit = eval_batch(cfg.parallel, &fitness, &trials[..n_eval]);
        history.extend(trial_fit.iter().copied());
        for i in 0..n_eval {
            if trial_fit[i] >= fit[i] && trial_fit[i] != f64::NEG_INFINITY {
                pop[i] = trials[i].clone();
                fit[i] = trial_fit[i];
            }
            if target_hit(fit[i]) {
                stop = OptStopReason::TargetReached;
                break 'outer;
            }
        }
    }

    let best = best_of(&history, &pop, &fit);
    Ok(OptResult { total_evals: history.len(), best, history, stop_reason: stop })
}

/// Power transfer from the active panel to the passive one at one frequency:
/// sum over active column j, passive row i of |S_ij(f_target)|^2, linearly
/// interpolated between the two surrounding grid points.
pub fn default_fitness(
    sm: &ScatteringMatrix,
    roles: &[PortRole],
    f_target_hz: f64,
) -> Result<f64, OptimError> {
    let freqs = &sm.freqs_hz;
    if freqs.is_empty() || f_target_hz < freqs[0] || f_target_hz > freqs[freqs.len() - 1] {
        return Err(OptimError::TargetOutsideGrid(f_target_hz));
    }
    let hi = freqs.partition_point(|&f| f < f_target_hz).min(freqs.len() - 1);
    let lo = hi.saturating_sub(1);
    let t = if hi == lo {
        0.0
    } else {
        (f_target_hz - freqs[lo]) / (freqs[hi] - freqs[lo])
    };
    let mut sum = 0.0;
    for (c, &col_port) in sm.cols.iter().enumerate() {
        if roles.get(col_port).copied() != Some(PortRole::Active) {
            continue;
        }
        for (r, &row_port) in sm.rows.iter().enumerate() {
            if roles.get(row_port).copied() != Some(PortRole::Passive) {
                continue;
            }
            let idx = |f: usize| sm.s[(f * sm.rows.len() + r) * sm.cols.len() + c].norm_sqr();
            sum += (1.0 - t) * idx(lo) + t * idx(hi);
        }
    }
    Ok(sum)
}

/// Electromagnetic optimization problem: a RIS-pair spec plus the settings
/// of the per-candidate simulation protocol.
pub struct EmProblem {
    pub spec: PairSpec,
    pub mesh_spec: MeshSpec,
    pub source: SourceSpec,
    pub run: RunConfig,
    pub freq_grid: FrequencyGrid,
    pub f_target_hz: f64,
    pub z0_ohm: f64,
    pub parameterization: Parameterization,
    /// Mesh/scene cache for lumped-only parameterizations.
    cached: Option<(Scene, Mesh)>,
}

impl EmProblem {
    pub fn new(
        spec: PairSpec,
        mesh_spec: MeshSpec,
        source: SourceSpec,
        run: RunConfig,
        freq_grid: FrequencyGrid,
        f_target_hz: f64,
        parameterization: Parameterization,
    ) -> Result<Self, OptimError> {
        let n_ports = spec.ris1.port_count() + spec.ris2.port_count();
        parameterization.validate(n_ports)?;
        let mut p = Self {
            spec,
            mesh_spec,
            source,
            run,
            freq_grid,
            f_target_hz,
            z0_ohm: 50.0,
            parameterization,
            cached: None,
        };
        if p.parameterization.lumped_only() {
            let scene = build_pair(&p.spec)?;
            let mesh = generate_mesh(&scene, &p.mesh_spec)?;
            p.cached = Some((scene, mesh));
        }
        Ok(p)
    }

    /// Apply a parameter vector: geometry entries mutate a spec clone
    /// (forcing rebuild + remesh), lumped entries mutate the port loads of
    /// the built scene.
    fn realize(&self, x: &[f64]) -> Result<(Scene, Mesh), OptimError> {
        let mut scene;
        let mesh;
        if let Some((s, m)) = &self.cached {
            scene = s.clone();
            mesh = m.clone();
        } else {
            let mut spec = self.spec.clone();
            for (e, &v) in self.parameterization.entries.iter().zip(x) {
                if let (ParamKind::GeometryField, ParamTarget::Field(path)) = (&e.kind, &e.target)
                {
                    apply_geometry_field(&mut spec, path, v);
                }
            }
            scene = build_pair(&spec)?;
            mesh = generate_mesh(&scene, &self.mesh_spec)?;
        }
        // Lumped entries address ports in scene order.
        let port_items: Vec<usize> = scene
            .lumped_items
            .iter()
            .enumerate()
            .filter(|(_, it)| matches!(it.kind, LumpedKind::Port { .. }))
            .map(|(i, _)| i)
            .collect();
        for (e, &v) in self.parameterization.entries.iter().zip(x) {
            let port = match (&e.kind, &e.target) {
                (ParamKind::GeometryField, _) => continue,
                (_, ParamTarget::Port(p)) => *p,
                _ => unreachable!("validated at construction"),
            };
            let item = &mut scene.lumped_items[port_items[port]];
            if let LumpedKind::Port { load, .. } = &mut item.kind {
                let mut l = load.unwrap_or(LumpedLoad::resistor(0.0));
                match e.kind {
                    ParamKind::LumpedR => l.r_ohm = v,
                    ParamKind::LumpedL => l.l_h = v,
                    ParamKind::LumpedC => l.c_f = Some(v),
                    ParamKind::GeometryField => unreachable!(),
                }
                *load = Some(l);
            }
        }
        Ok((scene, mesh))
    }

    /// Run the full per-active-port protocol for one candidate. Diverged or
    /// failed runs yield `NEG_INFINITY` so selection discards them.
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        match self.try_evaluate(x) {
            Ok(f) => f,
            Err(_) => f64::NEG_INFINITY,
        }
    }

    pub fn try_evaluate(&self, x: &[f64]) -> Result<f64, OptimError> {
        let (scene, mesh) = self.realize(x)?;
        let grid = rasterize(&scene, &mesh, self.source.f0_hz)?;
        let roles = grid.port_roles();
        let mut spectra = Vec::new();
        for p in grid.active_ports() {
            let mut sim = Simulation::new(&grid, &mesh, self.source, self.run.clone())?;
            let rec = sim.run(p)?;
            if rec.stop_reason == StopReason::Diverged {
                return Ok(f64::NEG_INFINITY);
            }
            spectra.push(port_spectra(&rec, &self.freq_grid)?);
        }
        let sm = scattering_matrix(&spectra, self.z0_ohm)?;
        default_fitness(&sm, &roles, self.f_target_hz)
    }

    /// Run the optimizer over this problem.
    pub fn optimize(&self, cfg: &OptimizerConfig) -> Result<OptResult, OptimError> {
        let bounds = self.parameterization.bounds();
        optimize(&bounds, |x: &[f64]| self.evaluate(x), cfg)
    }
}
