//! Command-line entry point for the RIS simulation platform.

use clap::{Args, Parser, Subcommand};
use ris_core::mesher::{generate_mesh, mesh_report};
use ris_core::pipeline::{
    distance_sweep, load_scenario, run_scenario, Layout, PipelineError, Scenario,
};
use ris_core::solver::rasterize;
use ris_core::validation::{validate_platform, ValidationOptions};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "ris",
    about = "FDTD simulation platform for RIS pairs built from S-SRR unit cells",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a single isolated unit cell (design step 1).
    UnitCell(ScenarioArgs),
    /// Simulate a facing RIS pair (design steps 2-3).
    Pair(ScenarioArgs),
    /// Run a pair scenario across several separations.
    Sweep {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Comma-separated separations in mm, strictly ascending.
        #[arg(long, value_delimiter = ',', required = true)]
        distances_mm: Vec<f64>,
    },
    /// Run the optimization loop of a scenario (requires an `optimization`
    /// section in the scenario file).
    Optimize(ScenarioArgs),
    /// Run the built-in oracle suite and write its JSON report.
    Validate {
        /// Output path for the JSON report.
        #[arg(long, default_value = "validation_report.json")]
        report: PathBuf,
        /// Debug fault injection: disable the absorbing boundary. A healthy
        /// build then fails the free-space check.
        #[arg(long)]
        disable_pml: bool,
        /// Run the solver single-threaded.
        #[arg(long)]
        serial: bool,
    },
    /// Generate and print the mesh without solving.
    MeshPreview(ScenarioArgs),
}

/// Scenario selection plus field overrides; flags win over file values.
#[derive(Args)]
struct ScenarioArgs {
    /// Scenario JSON file; defaults apply when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,

    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    separation_mm: Option<f64>,
    #[arg(long)]
    pitch_mm: Option<f64>,
    #[arg(long)]
    patch_width_mm: Option<f64>,
    #[arg(long)]
    eps_r: Option<f64>,
    #[arg(long)]
    tan_delta: Option<f64>,
    #[arg(long)]
    substrate_thickness_mm: Option<f64>,

    #[arg(long)]
    f0_hz: Option<f64>,
    #[arg(long)]
    fc_hz: Option<f64>,

    #[arg(long)]
    fine_mm: Option<f64>,
    #[arg(long)]
    coarse_mm: Option<f64>,
    #[arg(long)]
    pml_cells: Option<usize>,
    #[arg(long)]
    padding_mm: Option<f64>,

    #[arg(long)]
    start_hz: Option<f64>,
    #[arg(long)]
    stop_hz: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    /// Excite every port for a full square S-matrix (Touchstone output).
    #[arg(long)]
    excite_all_ports: bool,

    #[arg(long)]
    max_timesteps: Option<usize>,
    #[arg(long)]
    energy_stop_db: Option<f64>,
    /// Run the solver single-threaded.
    #[arg(long)]
    serial: bool,

    /// Print the mesh report and a cost estimate without solving.
    #[arg(long)]
    dry_run: bool,
    /// Confirm execution of large arrays (>= 64 cells per panel).
    #[arg(long)]
    large: bool,
}

impl ScenarioArgs {
    fn build(&self, layout: Layout) -> Result<Scenario, PipelineError> {
        let mut s = match &self.scenario {
            Some(path) => load_scenario(path)?,
            None => Scenario::default(),
        };
        s.pair.layout = layout;
        let set = |dst: &mut f64, src: &Option<f64>| {
            if let Some(v) = src {
                *dst = *v;
            }
        };
        if let Some(v) = self.rows {
            s.pair.rows = v;
        }
        if let Some(v) = self.cols {
            s.pair.cols = v;
        }
        set(&mut s.pair.separation_mm, &self.separation_mm);
        set(&mut s.pair.pitch_mm, &self.pitch_mm);
        set(&mut s.pair.patch_width_mm, &self.patch_width_mm);
        set(&mut s.pair.cell.eps_r, &self.eps_r);
        set(&mut s.pair.cell.tan_delta, &self.tan_delta);
        set(&mut s.pair.cell.substrate_thickness_mm, &self.substrate_thickness_mm);
        set(&mut s.source.f0_hz, &self.f0_hz);
        set(&mut s.source.fc_hz, &self.fc_hz);
        set(&mut s.mesh.fine_resolution_mm, &self.fine_mm);
        set(&mut s.mesh.coarse_resolution_mm, &self.coarse_mm);
        if let Some(v) = self.pml_cells {
            s.mesh.pml_cells = v;
        }
        set(&mut s.mesh.padding_mm, &self.padding_mm);
        set(&mut s.analysis.start_hz, &self.start_hz);
        set(&mut s.analysis.stop_hz, &self.stop_hz);
        if let Some(v) = self.points {
            s.analysis.points = v;
        }
        if self.excite_all_ports {
            s.analysis.excite_all_ports = true;
        }
        if let Some(v) = self.max_timesteps {
            s.run.max_timesteps = v;
        }
        set(&mut s.run.energy_stop_db, &self.energy_stop_db);
        if self.serial {
            s.run.parallel = false;
        }
        if let Some(out) = &self.out {
            s.output_dir = out.clone();
        }
        s.validate()?;
        Ok(s)
    }
}

/// Mesh report plus a rough solve-cost estimate for a scenario.
fn preview(s: &Scenario) -> Result<String, PipelineError> {
    let scene = s.build_scene()?;
    let mesh = generate_mesh(&scene, &s.mesh.to_spec())?;
    let report = mesh_report(&mesh);
    let grid = rasterize(&scene, &mesh, s.source.f0_hz)?;
    let driven = if s.analysis.excite_all_ports {
        grid.n_ports()
    } else {
        grid.active_ports().len()
    };
    let mut out = report.to_table();
    out.push_str(&format!("ports: {} ({} excitation runs)\n", grid.n_ports(), driven));
    let updates = report.cell_count as f64 * 6.0 * s.run.max_timesteps as f64 * driven as f64;
    out.push_str(&format!(
        "cost ceiling: {} timesteps x {} cells x {driven} runs (~{updates:.2e} field updates)\n",
        s.run.max_timesteps, report.cell_count
    ));
    Ok(out)
}

fn guard_large(s: &Scenario, large: bool) -> Result<(), String> {
    let cells = s.pair.rows * s.pair.cols;
    if cells >= 64 && !large {
        let est = preview(s).unwrap_or_else(|e| format!("(preview failed: {e})"));
        return Err(format!(
            "{}x{} is a large array ({} sequential excitation runs per panel).\n{}\
             Re-run with --large to confirm.",
            s.pair.rows, s.pair.cols, cells, est
        ));
    }
    Ok(())
}

fn run_common(args: &ScenarioArgs, layout: Layout) -> Result<(), CliError> {
    let s = args.build(layout)?;
    guard_large(&s, args.large).map_err(CliError::Guard)?;
    if args.dry_run {
        print!("{}", preview(&s)?);
        return Ok(());
    }
    let out = run_scenario(&s)?;
    if let Some(sum) = &out.manifest.summary {
        if let Some(f) = sum.f_res_hz {
            println!("resonance: {:.4} GHz ({:.2} dB)", f / 1e9, sum.resonance_depth_db.unwrap_or(0.0));
        } else {
            println!("no resonance found (weak or off-band response)");
        }
        if let Some(db) = sum.max_coupling_db {
            println!(
                "max coupling: {:.2} dB at {:.4} GHz",
                db,
                sum.max_coupling_f_hz.unwrap_or(0.0) / 1e9
            );
        }
    }
    println!("artifacts written to {}", s.output_dir.display());
    Ok(())
}

enum CliError {
    Pipeline(PipelineError),
    Guard(String),
    SuiteFailed,
    MissingOptimization,
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::UnitCell(args) => run_common(&args, Layout::UnitCell),
        Command::Pair(args) => run_common(&args, Layout::Pair),
        Command::Sweep { scenario, distances_mm } => {
            let s = scenario.build(Layout::Pair)?;
            guard_large(&s, scenario.large).map_err(CliError::Guard)?;
            if scenario.dry_run {
                print!("{}", preview(&s)?);
                println!("sweep over {} distances", distances_mm.len());
                return Ok(());
            }
            let table = distance_sweep(&s, &distances_mm)?;
            for w in &table.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", table.to_csv());
            println!("sweep table written to {}", s.output_dir.join("sweep.csv").display());
            Ok(())
        }
        Command::Optimize(args) => {
            let s = args.build(Layout::Pair)?;
            if s.optimization.is_none() {
                return Err(CliError::MissingOptimization);
            }
            guard_large(&s, args.large).map_err(CliError::Guard)?;
            if args.dry_run {
                print!("{}", preview(&s)?);
                return Ok(());
            }
            run_scenario(&s)?;
            println!("artifacts written to {}", s.output_dir.display());
            Ok(())
        }
        Command::Validate { report, disable_pml, serial } => {
            let opts = ValidationOptions { disable_pml, parallel: !serial };
            let r = validate_platform(&opts);
            print!("{}", r.summary());
            let json = r.to_json().expect("report serializes");
            ris_core::pipeline::write_atomic(&report, json.as_bytes())
                .map_err(PipelineError::Io)?;
            println!("report written to {}", report.display());
            if r.passed {
                Ok(())
            } else {
                Err(CliError::SuiteFailed)
            }
        }
        Command::MeshPreview(args) => {
            let s = args.build(Layout::Pair)?;
            print!("{}", preview(&s)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // Exit 1: the inputs or the checked platform are invalid.
        Err(CliError::Pipeline(e @ (PipelineError::Validation(_) | PipelineError::Parse { .. }))) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(CliError::SuiteFailed) => {
            eprintln!("error: validation suite reported failures");
            ExitCode::from(1)
        }
        Err(CliError::MissingOptimization) => {
            eprintln!("error: scenario has no `optimization` section");
            ExitCode::from(1)
        }
        Err(CliError::Guard(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        // Exit 2: the run itself failed.
        Err(CliError::Pipeline(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
