//! Scenario files and the end-to-end run pipeline: build the scene, mesh
//! it, solve one excitation per driven port, analyze, and persist
//! plot-ready artifacts plus a reproducibility manifest.
//!
//! Scenario keys carry explicit units in their names (`pitch_mm`,
//! `start_hz`); every user-adjustable field is optional with a documented
//! default, and unknown keys are rejected.

use crate::mesher::{generate_mesh, mesh_report, MeshError, MeshSpec};
use crate::optim::{EmProblem, OptimError, OptimizerConfig, Parameterization};
use crate::rfanalysis::{
    feed_impedance, find_max_coupling, find_resonances, port_powers, port_spectra,
    scattering_matrix, touchstone_extension, write_touchstone, FrequencyGrid, MaxCoupling,
    PortSpectra, ResonanceReport, RfError, ScatteringMatrix,
};
use crate::scene::{
    build_pair, build_unit_cell, validate_spec, ArraySpec, LumpedLoad, PairSpec, PortRole, Scene,
    SceneError, SrrSpec, SubstrateSpec, UnitCellSpec, Violation,
};
use crate::solver::{
    rasterize, RunConfig, SimRecord, Simulation, SolverError, SourceSpec, StopReason,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("scenario validation failed:\n{}", format_violations(.0))]
    Validation(Vec<Violation>),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Rf(#[from] RfError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("simulation diverged exciting port {0}")]
    Diverged(usize),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| format!("  {}: {}", x.field, x.constraint))
        .collect::<Vec<_>>()
        .join("\n")
}

// ---------------------------------------------------------------------------
// Scenario schema
// ---------------------------------------------------------------------------

/// Unit-cell geometry/material inputs; defaults are the 8 GHz design values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellInput {
    pub outer_length_mm: f64,
    pub outer_width_mm: f64,
    pub outer_gap_mm: f64,
    pub inner_gap_mm: f64,
    pub trace_width_mm: f64,
    pub ring_separation_mm: f64,
    pub substrate_width_mm: f64,
    pub substrate_length_mm: f64,
    pub substrate_thickness_mm: f64,
    pub eps_r: f64,
    pub tan_delta: f64,
    pub has_groundplane: bool,
    pub port_resistance_ohm: f64,
    /// Series R-L-C load in the port branch (tunable element state).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub load: Option<LumpedLoad>,
}

impl Default for CellInput {
    fn default() -> Self {
        let srr = SrrSpec::reference_design();
        let sub = SubstrateSpec::reference_design();
        Self {
            outer_length_mm: srr.outer_length_mm,
            outer_width_mm: srr.outer_width_mm,
            outer_gap_mm: srr.outer_gap_mm,
            inner_gap_mm: srr.inner_gap_mm,
            trace_width_mm: srr.outer_trace_width_mm,
            ring_separation_mm: srr.ring_separation_mm,
            substrate_width_mm: sub.width_mm,
            substrate_length_mm: sub.length_mm,
            substrate_thickness_mm: sub.thickness_mm,
            eps_r: sub.eps_r,
            tan_delta: sub.tan_delta,
            has_groundplane: false,
            port_resistance_ohm: 50.0,
            load: None,
        }
    }
}

impl CellInput {
    pub fn to_spec(&self) -> UnitCellSpec {
        UnitCellSpec {
            srr: SrrSpec {
                outer_length_mm: self.outer_length_mm,
                outer_width_mm: self.outer_width_mm,
                outer_gap_mm: self.outer_gap_mm,
                inner_gap_mm: self.inner_gap_mm,
                outer_trace_width_mm: self.trace_width_mm,
                inner_trace_width_mm: self.trace_width_mm,
                ring_separation_mm: self.ring_separation_mm,
                metal_thickness_mm: 0.0,
            },
            substrate: SubstrateSpec {
                width_mm: self.substrate_width_mm,
                length_mm: self.substrate_length_mm,
                thickness_mm: self.substrate_thickness_mm,
                eps_r: self.eps_r,
                tan_delta: self.tan_delta,
                has_groundplane: self.has_groundplane,
            },
            port_resistance_ohm: self.port_resistance_ohm,
            lumped_state: self.load,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// One isolated cell (Step 1).
    UnitCell,
    /// Two facing arrays (Steps 2-3).
    Pair,
}

/// Structure inputs. Defaults: 1x1 pair, 10 mm pitch and separation,
/// 1.2 mm load patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairInput {
    pub layout: Layout,
    pub rows: usize,
    pub cols: usize,
    /// Center-to-center distance between the two RIS units (mm). Default
    /// 10 mm.
    pub separation_mm: f64,
    pub pitch_mm: f64,
    pub patch_width_mm: f64,
    pub cell: CellInput,
}

impl Default for PairInput {
    fn default() -> Self {
        Self {
            layout: Layout::Pair,
            rows: 1,
            cols: 1,
            separation_mm: 10.0,
            pitch_mm: 10.0,
            patch_width_mm: 1.2,
            cell: CellInput::default(),
        }
    }
}

impl PairInput {
    fn array(&self, role: PortRole) -> ArraySpec {
        ArraySpec {
            rows: self.rows,
            cols: self.cols,
            cell: self.cell.to_spec(),
            pitch_mm: self.pitch_mm,
            patch_width_mm: self.patch_width_mm,
            patch_thickness_mm: 0.0,
            role,
        }
    }

    pub fn to_pair_spec(&self) -> PairSpec {
        PairSpec {
            ris1: self.array(PortRole::Active),
            ris2: self.array(PortRole::Passive),
            separation_mm: self.separation_mm,
        }
    }
}

/// Excitation defaults: 8 GHz center, 2 GHz characteristic bandwidth, 1 V.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceInput {
    pub f0_hz: f64,
    pub fc_hz: f64,
    pub amplitude_v: f64,
}

impl Default for SourceInput {
    fn default() -> Self {
        let s = SourceSpec::new(8e9, 2e9);
        Self { f0_hz: s.f0_hz, fc_hz: s.fc_hz, amplitude_v: s.amplitude_v }
    }
}

impl SourceInput {
    pub fn to_spec(&self) -> SourceSpec {
        let mut s = SourceSpec::new(self.f0_hz, self.fc_hz);
        s.amplitude_v = self.amplitude_v;
        s
    }
}

/// Mesh defaults: fine 0.35 mm, coarse 1.5 mm, merge threshold = half the
/// fine resolution, 8 absorbing cells, 4.7 mm air padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshInput {
    pub fine_resolution_mm: f64,
    pub coarse_resolution_mm: f64,
    /// Defaults to `fine_resolution_mm / 2` when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merge_threshold_mm: Option<f64>,
    pub pml_cells: usize,
    pub padding_mm: f64,
    pub edge_refinement: bool,
}

impl Default for MeshInput {
    fn default() -> Self {
        Self {
            fine_resolution_mm: 0.35,
            coarse_resolution_mm: 1.5,
            merge_threshold_mm: None,
            pml_cells: 8,
            padding_mm: 4.7,
            edge_refinement: true,
        }
    }
}

impl MeshInput {
    pub fn to_spec(&self) -> MeshSpec {
        let mut spec = MeshSpec::new(
            self.fine_resolution_mm,
            self.coarse_resolution_mm,
            self.pml_cells,
            self.padding_mm,
        );
        if let Some(m) = self.merge_threshold_mm {
            spec.merge_threshold_mm = m;
        }
        spec.edge_refinement = self.edge_refinement;
        spec
    }
}

/// Analysis defaults: 6-10 GHz, 401 points, 50-ohm reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisInput {
    pub start_hz: f64,
    pub stop_hz: f64,
    pub points: usize,
    pub z0_ohm: f64,
    /// Excite every port (full square S-matrix, Touchstone output) instead
    /// of only the active-role ports.
    pub excite_all_ports: bool,
}

impl Default for AnalysisInput {
    fn default() -> Self {
        Self {
            start_hz: 6e9,
            stop_hz: 10e9,
            points: 401,
            z0_ohm: 50.0,
            excite_all_ports: false,
        }
    }
}

impl AnalysisInput {
    pub fn grid(&self) -> FrequencyGrid {
        FrequencyGrid::new(self.start_hz, self.stop_hz, self.points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizationInput {
    pub parameterization: Parameterization,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Frequency at which the default fitness scores coupled power.
    #[serde(default = "default_f_target")]
    pub f_target_hz: f64,
}

fn default_f_target() -> f64 {
    8e9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub schema_version: u32,
    pub pair: PairInput,
    pub source: SourceInput,
    pub mesh: MeshInput,
    pub run: RunConfig,
    pub analysis: AnalysisInput,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimization: Option<OptimizationInput>,
    pub output_dir: PathBuf,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            schema_version: SCENARIO_SCHEMA_VERSION,
            pair: PairInput::default(),
            source: SourceInput::default(),
            mesh: MeshInput::default(),
            run: RunConfig::default(),
            analysis: AnalysisInput::default(),
            optimization: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let violations = validate_spec(&self.pair.to_pair_spec());
        if !violations.is_empty() {
            return Err(PipelineError::Validation(violations));
        }
        self.source.to_spec().validate()?;
        self.mesh.to_spec().validate()?;
        self.run.validate()?;
        self.analysis.grid().validate()?;
        if let Some(opt) = &self.optimization {
            let n_ports = 2 * self.pair.rows * self.pair.cols;
            opt.parameterization.validate(n_ports)?;
            opt.optimizer.validate(opt.parameterization.dim())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    /// Hash over every semantically meaningful field (the output directory
    /// is excluded: it relocates artifacts without changing them).
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("scenario serializes");
        v.as_object_mut().expect("scenario is an object").remove("output_dir");
        let canonical = serde_json::to_string(&v).expect("value serializes");
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        format!("{:x}", h.finalize())
    }

    pub fn build_scene(&self) -> Result<Scene, SceneError> {
        match self.pair.layout {
            Layout::UnitCell => build_unit_cell(&self.pair.cell.to_spec(), [0.0; 3]),
            Layout::Pair => build_pair(&self.pair.to_pair_spec()),
        }
    }
}

pub fn load_scenario(path: &Path) -> Result<Scenario, PipelineError> {
    let text = std::fs::read_to_string(path)?;
    let scenario: Scenario = serde_json::from_str(&text).map_err(|e| PipelineError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    scenario.validate()?;
    Ok(scenario)
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

/// Atomic write: temp file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    /// Deepest resonance of the first driven port, when any.
    pub f_res_hz: Option<f64>,
    pub resonance_depth_db: Option<f64>,
    /// Strongest driven-to-undriven coupling across the grid.
    pub max_coupling_db: Option<f64>,
    pub max_coupling_f_hz: Option<f64>,
    pub no_coupling: bool,
    /// Sum over undriven ports of |S_ij|^2 at the source center frequency.
    pub transferred_power_f0: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub platform_version: String,
    pub created_unix_s: u64,
    pub complete: bool,
    pub artifacts: Vec<String>,
    pub timings_s: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    pub summary: Option<RunSummary>,
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.12e}")
}

fn s_matrix_csv(sm: &ScatteringMatrix) -> String {
    let mut out = String::from("f_hz");
    for &r in &sm.rows {
        for &c in &sm.cols {
            out.push_str(&format!(",s_{r}_{c}_re,s_{r}_{c}_im"));
        }
    }
    out.push('\n');
    for (fi, f) in sm.freqs_hz.iter().enumerate() {
        out.push_str(&fmt_f64(*f));
        for r in 0..sm.rows.len() {
            for c in 0..sm.cols.len() {
                let v = sm.s[(fi * sm.rows.len() + r) * sm.cols.len() + c];
                out.push_str(&format!(",{},{}", fmt_f64(v.re), fmt_f64(v.im)));
            }
        }
        out.push('\n');
    }
    out
}

fn impedance_csv(spectra: &[PortSpectra]) -> Result<String, RfError> {
    let mut out = String::from("f_hz,port,z_re_ohm,z_im_ohm,undefined\n");
    for sp in spectra {
        let z = feed_impedance(sp, sp.active_port)?;
        for (fi, f) in z.freqs_hz.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_f64(*f),
                sp.active_port,
                fmt_f64(z.z_ohm[fi].re),
                fmt_f64(z.z_ohm[fi].im),
                z.undefined[fi]
            ));
        }
    }
    Ok(out)
}

fn power_csv(spectra: &[PortSpectra], z0: f64) -> String {
    let mut out =
        String::from("f_hz,excited_port,port,incident_w,reflected_w,accepted_w\n");
    for sp in spectra {
        let p = port_powers(sp, z0);
        for (slot, &port) in p.ports.iter().enumerate() {
            for (fi, f) in p.freqs_hz.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    fmt_f64(*f),
                    sp.active_port,
                    port,
                    fmt_f64(p.incident_w[slot][fi]),
                    fmt_f64(p.reflected_w[slot][fi]),
                    fmt_f64(p.accepted_w[slot][fi]),
                ));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PortResonance {
    pub port: usize,
    pub reflection: ResonanceReport,
    /// Strongest coupling from this driven port to any other recorded port.
    pub max_coupling: Option<MaxCoupling>,
    pub max_coupling_to: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResonanceArtifact {
    pub schema_version: u32,
    pub ports: Vec<PortResonance>,
}

fn resonance_artifact(sm: &ScatteringMatrix) -> ResonanceArtifact {
    let mut ports = Vec::new();
    for &c in &sm.cols {
        let s11_db = sm.magnitude_db(c, c);
        let reflection = match s11_db {
            Some(db) => find_resonances(&sm.freqs_hz, &db),
            None => find_resonances(&[], &[]),
        };
        let mut best: Option<(MaxCoupling, usize)> = None;
        for &r in &sm.rows {
            if r == c {
                continue;
            }
            if let Some(db) = sm.magnitude_db(r, c) {
                if let Some(mc) = find_max_coupling(&sm.freqs_hz, &db) {
                    let better = match &best {
                        None => true,
                        Some((b, _)) => !mc.no_coupling && mc.s_db > b.s_db,
                    };
                    if better {
                        best = Some((mc, r));
                    }
                }
            }
        }
        let (max_coupling, max_coupling_to) = match best {
            Some((mc, to)) => (Some(mc), Some(to)),
            None => (None, None),
        };
        ports.push(PortResonance { port: c, reflection, max_coupling, max_coupling_to });
    }
    ResonanceArtifact { schema_version: 1, ports }
}

/// Interpolated transferred power Sum_j |S_jc(f0)|^2 over undriven rows.
fn transferred_power_at(sm: &ScatteringMatrix, f0: f64) -> Option<f64> {
    let freqs = &sm.freqs_hz;
    if freqs.is_empty() || f0 < freqs[0] || f0 > freqs[freqs.len() - 1] {
        return None;
    }
    let hi = freqs.partition_point(|&f| f < f0).min(freqs.len() - 1);
    let lo = hi.saturating_sub(1);
    let t = if hi == lo { 0.0 } else { (f0 - freqs[lo]) / (freqs[hi] - freqs[lo]) };
    let mut sum = 0.0;
    for (ci, &c) in sm.cols.iter().enumerate() {
        for (ri, &r) in sm.rows.iter().enumerate() {
            if r == c {
                continue;
            }
            let at = |f: usize| sm.s[(f * sm.rows.len() + ri) * sm.cols.len() + ci].norm_sqr();
            sum += (1.0 - t) * at(lo) + t * at(hi);
        }
    }
    Some(sum)
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

/// In-memory results of a scenario execution.
pub struct RunOutput {
    pub manifest: Manifest,
    pub s_matrix: ScatteringMatrix,
    pub records: Vec<SimRecord>,
}

/// Execute the scenario and write all artifacts under its output directory.
pub fn run_scenario(scenario: &Scenario) -> Result<RunOutput, PipelineError> {
    scenario.validate()?;
    let out_dir = scenario.output_dir.clone();
    std::fs::create_dir_all(&out_dir)?;

    let mut manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config_hash: scenario.config_hash(),
        platform_version: env!("CARGO_PKG_VERSION").to_string(),
        created_unix_s: now_unix(),
        complete: false,
        artifacts: Vec::new(),
        timings_s: BTreeMap::new(),
        warnings: Vec::new(),
        summary: None,
    };

    let result = execute(scenario, &out_dir, &mut manifest);
    if result.is_err() {
        manifest.warnings.push("run aborted; artifact set is incomplete".into());
    }
    manifest.complete = result.is_ok();
    // The manifest is written in both outcomes so partial artifact sets are
    // identifiable.
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out_dir.join("manifest.json"), manifest_json.as_bytes())?;
    let (s_matrix, records) = result?;
    Ok(RunOutput { manifest, s_matrix, records })
}

fn execute(
    scenario: &Scenario,
    out_dir: &Path,
    manifest: &mut Manifest,
) -> Result<(ScatteringMatrix, Vec<SimRecord>), PipelineError> {
    let source = scenario.source.to_spec();
    let grid_spec = scenario.analysis.grid();

    let t = Instant::now();
    let scene = scenario.build_scene()?;
    let mesh = generate_mesh(&scene, &scenario.mesh.to_spec())?;
    manifest.timings_s.insert("mesh".into(), t.elapsed().as_secs_f64());

    let report = mesh_report(&mesh);
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_artifact(out_dir, "mesh_report.json", report_json.as_bytes(), manifest)?;

    let grid = rasterize(&scene, &mesh, source.f0_hz)?;
    let driven: Vec<usize> = if scenario.analysis.excite_all_ports {
        (0..grid.n_ports()).collect()
    } else {
        grid.active_ports()
    };
    if driven.is_empty() {
        manifest.warnings.push("no driven ports; nothing to simulate".into());
    }

    let mut spectra = Vec::new();
    let mut records = Vec::new();
    for &p in &driven {
        let t = Instant::now();
        let mut sim = Simulation::new(&grid, &mesh, source, scenario.run.clone())?;
        let rec = sim.run(p)?;
        manifest
            .timings_s
            .insert(format!("solve_port_{p}"), t.elapsed().as_secs_f64());
        if rec.stop_reason == StopReason::Diverged {
            return Err(PipelineError::Diverged(p));
        }
        spectra.push(port_spectra(&rec, &grid_spec)?);
        records.push(rec);
    }

    let t = Instant::now();
    let sm = scattering_matrix(&spectra, scenario.analysis.z0_ohm)?;

    write_artifact(out_dir, "s_matrix.csv", s_matrix_csv(&sm).as_bytes(), manifest)?;
    if sm.is_square() && !sm.rows.is_empty() {
        let mut buf = Vec::new();
        write_touchstone(&mut buf, &sm)?;
        let name = format!("s_params.{}", touchstone_extension(sm.rows.len()));
        write_artifact(out_dir, &name, &buf, manifest)?;
    } else if !sm.rows.is_empty() {
        manifest.warnings.push(
            "partial S-matrix (undriven ports present): Touchstone output omitted; \
             set analysis.excite_all_ports for a full matrix"
                .into(),
        );
    }
    write_artifact(
        out_dir,
        "impedance.csv",
        impedance_csv(&spectra)?.as_bytes(),
        manifest,
    )?;
    write_artifact(
        out_dir,
        "power.csv",
        power_csv(&spectra, scenario.analysis.z0_ohm).as_bytes(),
        manifest,
    )?;

    let resonance = resonance_artifact(&sm);
    let resonance_json =
        serde_json::to_string_pretty(&resonance).expect("resonance serializes");
    write_artifact(out_dir, "resonance.json", resonance_json.as_bytes(), manifest)?;

    let first = resonance.ports.first();
    manifest.summary = Some(RunSummary {
        f_res_hz: first.and_then(|p| p.reflection.bands.first().map(|b| b.f_res_hz)),
        resonance_depth_db: first.and_then(|p| p.reflection.bands.first().map(|b| b.depth_db)),
        max_coupling_db: first.and_then(|p| p.max_coupling.as_ref().map(|m| m.s_db)),
        max_coupling_f_hz: first.and_then(|p| p.max_coupling.as_ref().map(|m| m.f_hz)),
        no_coupling: first.map_or(true, |p| {
            p.max_coupling.as_ref().map_or(true, |m| m.no_coupling)
        }),
        transferred_power_f0: transferred_power_at(&sm, source.f0_hz),
    });
    manifest.timings_s.insert("analysis".into(), t.elapsed().as_secs_f64());

    if let Some(opt) = &scenario.optimization {
        let t = Instant::now();
        let problem = EmProblem::new(
            scenario.pair.to_pair_spec(),
            scenario.mesh.to_spec(),
            source,
            scenario.run.clone(),
            grid_spec,
            opt.f_target_hz,
            opt.parameterization.clone(),
        )?;
        let result = problem.optimize(&opt.optimizer)?;
        let json = serde_json::to_string_pretty(&result).expect("result serializes");
        write_artifact(out_dir, "optimization.json", json.as_bytes(), manifest)?;
        manifest.timings_s.insert("optimize".into(), t.elapsed().as_secs_f64());
    }

    Ok((sm, records))
}

fn write_artifact(
    dir: &Path,
    name: &str,
    bytes: &[u8],
    manifest: &mut Manifest,
) -> std::io::Result<()> {
    write_atomic(&dir.join(name), bytes)?;
    manifest.artifacts.push(name.to_string());
    Ok(())
}

// ---------------------------------------------------------------------------
// Distance sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub distance_mm: f64,
    pub f_res_hz: Option<f64>,
    pub max_coupling_db: Option<f64>,
    pub transferred_power_f0: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    pub warnings: Vec<String>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("distance_mm,f_res_hz,max_coupling_db,transferred_power_f0,error\n");
        for r in &self.rows {
            let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                fmt_f64(r.distance_mm),
                opt(r.f_res_hz),
                opt(r.max_coupling_db),
                opt(r.transferred_power_f0),
                r.error.clone().unwrap_or_default()
            ));
        }
        out
    }
}

/// Run the scenario once per separation. The structure is untouched between
/// distances — only the gap changes — so the transverse mesh template is
/// identical across rows (mesh generation is deterministic in the scene).
/// Failed distances are recorded and the sweep continues.
pub fn distance_sweep(
    scenario: &Scenario,
    distances_mm: &[f64],
) -> Result<SweepTable, PipelineError> {
    let mut table = SweepTable { rows: Vec::new(), warnings: Vec::new() };
    if distances_mm.is_empty() {
        table.warnings.push("empty distance list: nothing to sweep".into());
    }
    for w in distances_mm.windows(2) {
        if w[1] <= w[0] {
            return Err(PipelineError::Validation(vec![Violation::new(
                "sweep.distances",
                "distances must be positive and strictly ascending",
            )]));
        }
    }
    for &d in distances_mm {
        if !(d > 0.0) {
            return Err(PipelineError::Validation(vec![Violation::new(
                "sweep.distances",
                "distances must be positive and strictly ascending",
            )]));
        }
        let mut s = scenario.clone();
        s.pair.separation_mm = d;
        s.pair.layout = Layout::Pair;
        s.output_dir = scenario.output_dir.join(format!("d_{d}mm"));
        match run_scenario(&s) {
            Ok(out) => {
                let sum = out.manifest.summary.unwrap_or(RunSummary {
                    f_res_hz: None,
                    resonance_depth_db: None,
                    max_coupling_db: None,
                    max_coupling_f_hz: None,
                    no_coupling: true,
                    transferred_power_f0: None,
                });
                table.rows.push(SweepRow {
                    distance_mm: d,
                    f_res_hz: sum.f_res_hz,
                    max_coupling_db: sum.max_coupling_db,
                    transferred_power_f0: sum.transferred_power_f0,
                    error: None,
                });
            }
            Err(e) => table.rows.push(SweepRow {
                distance_mm: d,
                f_res_hz: None,
                max_coupling_db: None,
                transferred_power_f0: None,
                error: Some(e.to_string()),
            }),
        }
    }
    write_atomic(
        &scenario.output_dir.join("sweep.csv"),
        table.to_csv().as_bytes(),
    )?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_scenario_gets_documented_defaults() {
        let s: Scenario = serde_json::from_str(r#"{"pair": {"rows": 1, "cols": 1}}"#).unwrap();
        assert_eq!(s.pair.separation_mm, 10.0);
        assert_eq!(s.pair.pitch_mm, 10.0);
        assert_eq!(s.pair.patch_width_mm, 1.2);
        assert_eq!(s.pair.cell.eps_r, 2.2);
        assert_eq!(s.pair.cell.substrate_thickness_mm, 4.8);
        assert_eq!(s.source.f0_hz, 8e9);
        assert_eq!(s.analysis.points, 401);
        assert_eq!(s.analysis.start_hz, 6e9);
        s.validate().unwrap();
    }

    #[test]
    fn misspelled_key_rejected_by_name() {
        let err = serde_json::from_str::<Scenario>(r#"{"pair": {"epsr_": 2.2}}"#).unwrap_err();
        assert!(err.to_string().contains("epsr_"), "{err}");
    }

    #[test]
    fn tuned_cell_values_map_through() {
        let s: Scenario = serde_json::from_str(
            r#"{"pair": {"rows": 3, "cols": 3, "pitch_mm": 10.0, "patch_width_mm": 1.2}}"#,
        )
        .unwrap();
        let pair = s.pair.to_pair_spec();
        assert_eq!(pair.ris1.rows, 3);
        assert_eq!(pair.ris1.pitch_mm, 10.0);
        assert_eq!(pair.ris1.patch_width_mm, 1.2);
        assert_eq!(pair.ris1.cell.srr.outer_length_mm, 10.36);
        assert_eq!(pair.ris2.role, PortRole::Passive);
        s.validate().unwrap();
    }

    #[test]
    fn scenario_roundtrip_is_fixed_point() {
        let s: Scenario =
            serde_json::from_str(r#"{"pair": {"rows": 2, "cols": 2}, "source": {"f0_hz": 7e9}}"#)
                .unwrap();
        let json = s.to_json().unwrap();
        let s2: Scenario = serde_json::from_str(&json).unwrap();
        assert_eq!(s, s2);
        assert_eq!(json, s2.to_json().unwrap());
    }

    #[test]
    fn config_hash_tracks_meaningful_fields_only() {
        let a = Scenario::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.config_hash(), b.config_hash());
        let mut c = a.clone();
        c.pair.separation_mm = 12.0;
        assert_ne!(a.config_hash(), c.config_hash());
        let mut d = a.clone();
        d.analysis.points = 201;
        assert_ne!(a.config_hash(), d.config_hash());
    }

    #[test]
    fn invalid_pair_fails_validation() {
        let s: Scenario = serde_json::from_str(
            r#"{"pair": {"rows": 2, "cols": 2, "pitch_mm": 5.0}}"#,
        )
        .unwrap();
        match s.validate() {
            Err(PipelineError::Validation(v)) => {
                assert!(v.iter().any(|x| x.field.contains("pitch")));
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\n  \"pair\": ]\n}").unwrap();
        match load_scenario(&path) {
            Err(PipelineError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        // No temp litter left behind.
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn empty_sweep_warns() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = Scenario::default();
        s.output_dir = dir.path().to_path_buf();
        let table = distance_sweep(&s, &[]).unwrap();
        assert!(table.rows.is_empty());
        assert!(!table.warnings.is_empty());
        assert!(dir.path().join("sweep.csv").exists());
    }

    #[test]
    fn descending_distances_rejected() {
        let s = Scenario::default();
        assert!(matches!(
            distance_sweep(&s, &[20.0, 10.0]),
            Err(PipelineError::Validation(_))
        ));
    }
}
