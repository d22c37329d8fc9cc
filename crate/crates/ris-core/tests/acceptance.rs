//! Acceptance suite: one test per platform-level criterion, each printing a
//! single `criterion N: PASS`/`FAIL` line. Tolerances are pinned here.
//! Hours-scale cases are `#[ignore]`d (slow suite: `cargo test -- --ignored`).

use ris_core::mesher::{generate_mesh, MeshSpec};
use ris_core::optim::{
    optimize, EmProblem, OptimizerConfig, ParamEntry, ParamKind, ParamTarget, Parameterization,
};
use ris_core::pipeline::{run_scenario, Layout, Scenario};
use ris_core::rfanalysis::{
    find_resonances, port_spectra, scattering_matrix, FrequencyGrid, ScatteringMatrix,
};
use ris_core::scene::{build_unit_cell, LumpedLoad, UnitCellSpec};
use ris_core::solver::{rasterize, RunConfig, Simulation, SourceSpec, StopReason};
use ris_core::validation::{
    closed_box_energy, free_space_transit, mesh_property_violations, pair_scattering,
    sandbox_impedance, sandbox_s11, ValidationOptions,
};
use std::time::Instant;

fn report(criterion: u32, passed: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} ({detail})",
        if passed { "PASS" } else { "FAIL" }
    );
    assert!(passed, "criterion {criterion} failed: {detail}");
}

fn opts() -> ValidationOptions {
    ValidationOptions { disable_pml: false, parallel: true }
}

// Criterion 1 — lumped-circuit oracle: 50-ohm load reads 50 +- 1 ohm real,
// 0 +- 1 ohm imaginary across 6-10 GHz; 100-ohm load gives |S11| = 1/3 +-
// 0.02. Budget 10 s.
#[test]
fn acceptance_01_lumped_circuit_oracle() {
    let t = Instant::now();
    // The sandbox grid is a few hundred cells; the sequential path avoids
    // per-step work-distribution overhead and is faster there.
    let opts = ValidationOptions { disable_pml: false, parallel: false };
    let grid = FrequencyGrid::new(6e9, 10e9, 41);
    let z = sandbox_impedance(LumpedLoad::resistor(50.0), &grid, &opts).unwrap();
    let re_err = z.iter().map(|z| (z.re - 50.0).abs()).fold(0.0, f64::max);
    let im_err = z.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    let s = sandbox_s11(LumpedLoad::resistor(100.0), &grid, &opts).unwrap();
    let s_err = s.iter().map(|m| (m - 1.0 / 3.0).abs()).fold(0.0, f64::max);
    let elapsed = t.elapsed().as_secs_f64();
    report(
        1,
        re_err <= 1.0 && im_err <= 1.0 && s_err <= 0.02 && elapsed < 10.0,
        &format!(
            "|Re-50| {re_err:.3}, |Im| {im_err:.3}, ||S11|-1/3| {s_err:.4}, {elapsed:.1} s"
        ),
    );
}

// Criterion 2 — free-space propagation: envelope transit over 30 mm of
// vacuum equals 100.07 ps within 2 timesteps. Budget 60 s.
#[test]
fn acceptance_02_free_space_transit() {
    let t = Instant::now();
    let (transit, dt) = free_space_transit(&opts()).unwrap();
    let expected = 30.0e-3 / ris_core::C0;
    let err = (transit - expected).abs();
    let elapsed = t.elapsed().as_secs_f64();
    report(
        2,
        err <= 2.0 * dt && elapsed < 60.0,
        &format!("transit {:.3} ps, expected {:.3} ps, 2dt {:.3} ps, {elapsed:.1} s",
            transit * 1e12, expected * 1e12, 2.0 * dt * 1e12),
    );
}

// Criterion 3 — energy conservation: lossless closed box drifts < 1% over
// 1000 post-extinction steps; lossy variant strictly decays. Budget 60 s.
#[test]
fn acceptance_03_energy_conservation() {
    let t = Instant::now();
    let (drift, lossy_means) = closed_box_energy(&opts()).unwrap();
    let decaying = lossy_means.len() >= 3 && lossy_means.windows(2).all(|w| w[1] < w[0]);
    let elapsed = t.elapsed().as_secs_f64();
    report(
        3,
        drift < 0.01 && decaying && elapsed < 60.0,
        &format!("drift {:.4}%, lossy decaying {decaying}, {elapsed:.1} s", drift * 100.0),
    );
}

// Criterion 4 — reciprocity & passivity on the 1x1 pair at fine = 0.35 mm:
// |S12 - S21| <= 0.5 dB across the band, column power sums <= 1.01 at every
// grid frequency. Budget 30 min.
#[test]
fn acceptance_04_reciprocity_passivity() {
    let t = Instant::now();
    let grid_spec = FrequencyGrid::new(6e9, 10e9, 201);
    let run = RunConfig {
        max_timesteps: 60_000,
        energy_stop_db: -40.0,
        parallel: true,
        ..RunConfig::default()
    };
    let sm = pair_scattering(0.35, &grid_spec, &run).unwrap();
    let mut max_recip = 0.0f64;
    let mut max_power = 0.0f64;
    for f in 0..sm.freqs_hz.len() {
        let db = |c: num_complex::Complex64| 20.0 * c.norm().max(1e-300).log10();
        let s12 = sm.at(f, 0, 1).unwrap();
        let s21 = sm.at(f, 1, 0).unwrap();
        max_recip = max_recip.max((db(s12) - db(s21)).abs());
        for c in 0..2 {
            let p: f64 = (0..2).map(|r| sm.at(f, r, c).unwrap().norm_sqr()).sum();
            max_power = max_power.max(p);
        }
    }
    let elapsed = t.elapsed().as_secs_f64();
    report(
        4,
        max_recip <= 0.5 && max_power <= 1.01 && elapsed < 1800.0,
        &format!("max |S12-S21| {max_recip:.4} dB, max col power {max_power:.4}, {elapsed:.0} s"),
    );
}

fn unit_cell_s11_db(fine_mm: f64, grid_spec: &FrequencyGrid) -> (Vec<f64>, Vec<f64>) {
    let scene = build_unit_cell(&UnitCellSpec::reference_design(), [0.0; 3]).unwrap();
    let mesh = generate_mesh(&scene, &MeshSpec::new(fine_mm, 1.5, 8, 4.7)).unwrap();
    let grid = rasterize(&scene, &mesh, 8e9).unwrap();
    let run = RunConfig {
        max_timesteps: 60_000,
        energy_stop_db: -40.0,
        parallel: true,
        ..RunConfig::default()
    };
    let mut sim = Simulation::new(&grid, &mesh, SourceSpec::new(8e9, 2e9), run).unwrap();
    let rec = sim.run(0).unwrap();
    assert_ne!(rec.stop_reason, StopReason::Diverged);
    let spectra = port_spectra(&rec, grid_spec).unwrap();
    let sm = scattering_matrix(&[spectra], 50.0).unwrap();
    (sm.freqs_hz.clone(), sm.magnitude_db(0, 0).unwrap())
}

// Criterion 5 — design step 1 at reduced fidelity: the 8 GHz unit cell
// resonates with min |S11| inside [7.2, 8.8] GHz. Budget 30 min.
#[test]
fn acceptance_05_unit_cell_resonance() {
    let t = Instant::now();
    let grid_spec = FrequencyGrid::new(6e9, 10e9, 401);
    let (freqs, s11_db) = unit_cell_s11_db(0.35, &grid_spec);
    let rep = find_resonances(&freqs, &s11_db);
    let f_res = rep.bands.first().map(|b| b.f_res_hz).unwrap_or(0.0);
    let elapsed = t.elapsed().as_secs_f64();
    report(
        5,
        !rep.weak && (7.2e9..=8.8e9).contains(&f_res) && elapsed < 1800.0,
        &format!(
            "min |S11| at {:.3} GHz ({:.1} dB), weak {}, {elapsed:.0} s",
            f_res / 1e9,
            rep.bands.first().map(|b| b.depth_db).unwrap_or(0.0),
            rep.weak
        ),
    );
}

fn full_pair_scattering(rows: usize, cols: usize, fine_mm: f64) -> ScatteringMatrix {
    let mut s = Scenario::default();
    s.pair.rows = rows;
    s.pair.cols = cols;
    s.pair.layout = Layout::Pair;
    s.mesh.fine_resolution_mm = fine_mm;
    s.analysis.points = 201;
    s.analysis.excite_all_ports = true;
    s.output_dir = std::env::temp_dir().join(format!("ris-acc-{rows}x{cols}"));
    run_scenario(&s).unwrap().s_matrix
}

// Criterion 6 — design step 2 (3x3): geometrically symmetric ports match
// within 0.5 dB in |S11|; at least one cross pair couples at >= -40 dB.
// Hours-scale: slow suite.
#[test]
#[ignore = "slow suite: hours-scale 3x3 pair (run with --ignored)"]
fn acceptance_06_three_by_three_symmetry() {
    let sm = full_pair_scattering(3, 3, 0.35);
    // Active-panel corner cells are geometrically symmetric: ports 0, 2, 6, 8.
    let corners = [0usize, 2, 6, 8];
    let mut max_sym = 0.0f64;
    for f in 0..sm.freqs_hz.len() {
        let mags: Vec<f64> = corners
            .iter()
            .map(|&p| 20.0 * sm.at(f, p, p).unwrap().norm().max(1e-300).log10())
            .collect();
        for m in &mags[1..] {
            max_sym = max_sym.max((m - mags[0]).abs());
        }
    }
    // Strongest active -> passive coupling.
    let mut best_cross = f64::NEG_INFINITY;
    for f in 0..sm.freqs_hz.len() {
        for a in 0..9usize {
            for p in 9..18usize {
                let db = 20.0 * sm.at(f, p, a).unwrap().norm().max(1e-300).log10();
                best_cross = best_cross.max(db);
            }
        }
    }
    report(
        6,
        max_sym <= 0.5 && best_cross >= -40.0,
        &format!("max corner |S11| spread {max_sym:.3} dB, best coupling {best_cross:.1} dB"),
    );
}

// Criterion 7 — design step 3 (11x11, expected bands ~8 GHz / 200 MHz and
// ~8.9 GHz / 250 MHz): 121 excitation runs on a large grid; shipped as the
// documented long-running scenario `scenarios/pair_11x11.json`, outside the
// default suite.
#[test]
#[ignore = "long-running documented scenario: 121 excitation runs (run with --ignored)"]
fn acceptance_07_eleven_by_eleven_bands() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .join("scenarios/pair_11x11.json");
    let mut s = ris_core::pipeline::load_scenario(&path).unwrap();
    assert_eq!((s.pair.rows, s.pair.cols), (11, 11));
    s.output_dir = std::env::temp_dir().join("ris-acc-11x11");
    let out = run_scenario(&s).unwrap();
    let sm = out.s_matrix;
    let s11_db = sm.magnitude_db(0, 0).unwrap();
    let rep = find_resonances(&sm.freqs_hz, &s11_db);
    let near = |target: f64, bw: f64| {
        rep.bands.iter().any(|b| {
            (b.f_res_hz - target).abs() <= 0.4e9
                && b.bandwidth_hz.map_or(false, |w| (w - bw).abs() <= 0.15e9)
        })
    };
    report(
        7,
        near(8.0e9, 0.2e9) && near(8.9e9, 0.25e9),
        &format!("bands: {:?}", rep.bands),
    );
}

// Criterion 8 — mesher properties over 1000 randomized line sets: fixed
// lines preserved, no removable sub-threshold pair, idempotent,
// deterministic. Budget 5 s.
#[test]
fn acceptance_08_mesher_properties() {
    let t = Instant::now();
    let violations = mesh_property_violations(1000, 0xACCE55);
    let elapsed = t.elapsed().as_secs_f64();
    report(
        8,
        violations == 0 && elapsed < 5.0,
        &format!("{violations} violations, {elapsed:.2} s"),
    );
}

// Criterion 9 (sphere part) — DE reaches best > -1e-6 on the 4-D sphere in
// <= 2000 evaluations for 10/10 seeds. Budget 1 s.
#[test]
fn acceptance_09_de_sphere() {
    let t = Instant::now();
    let bounds = vec![(-5.0, 5.0); 4];
    let mut ok = true;
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let cfg = OptimizerConfig {
            population: Some(20),
            max_evals: Some(2000),
            target_fitness: Some(-1e-6),
            seed,
            ..OptimizerConfig::default()
        };
        let res =
            optimize(&bounds, |x: &[f64]| -x.iter().map(|v| v * v).sum::<f64>(), &cfg).unwrap();
        ok &= res.best.fitness > -1e-6 && res.total_evals <= 2000;
        worst = worst.min(res.best.fitness);
    }
    let elapsed = t.elapsed().as_secs_f64();
    report(
        9,
        ok && elapsed < 1.0,
        &format!("worst best-fitness {worst:.2e} over 10 seeds, {elapsed:.2} s"),
    );
}

// Criterion 9 (pair part) — DE over the passive cell's load capacitance
// beats the best of a 12-point grid sweep within 1e-6. Slow suite.
#[test]
#[ignore = "slow suite: repeated pair simulations (run with --ignored)"]
fn acceptance_09_pair_lumped_c_optimization() {
    let parameterization = Parameterization {
        entries: vec![ParamEntry {
            name: "load-c".into(),
            kind: ParamKind::LumpedC,
            target: ParamTarget::Port(1),
            lower: 0.05e-12,
            upper: 2.0e-12,
            unit: "farad".into(),
        }],
    };
    let run = RunConfig {
        max_timesteps: 20_000,
        energy_stop_db: -35.0,
        parallel: true,
        ..RunConfig::default()
    };
    let problem = EmProblem::new(
        ris_core::scene::PairSpec::reference_unit_cell_pair(),
        MeshSpec::new(1.0, 1.5, 8, 4.7),
        SourceSpec::new(8e9, 2e9),
        run,
        FrequencyGrid::new(6e9, 10e9, 101),
        8e9,
        parameterization,
    )
    .unwrap();

    let mut grid_best = f64::NEG_INFINITY;
    for i in 0..12 {
        let c = 0.05e-12 + (2.0e-12 - 0.05e-12) * i as f64 / 11.0;
        grid_best = grid_best.max(problem.evaluate(&[c]));
    }
    let cfg = OptimizerConfig {
        population: Some(6),
        max_evals: Some(48),
        seed: 11,
        ..OptimizerConfig::default()
    };
    let res = problem.optimize(&cfg).unwrap();
    report(
        9,
        res.best.fitness >= grid_best - 1e-6,
        &format!("DE best {:.6e} vs grid best {:.6e}", res.best.fitness, grid_best),
    );
}

// Criterion 10 — determinism: an identical scenario run twice, and with a
// different worker configuration, yields byte-identical data artifacts
// (manifest timings/timestamps excepted).
#[test]
fn acceptance_10_deterministic_artifacts() {
    let data_files = ["s_matrix.csv", "impedance.csv", "power.csv", "resonance.json",
        "mesh_report.json"];
    let base = std::env::temp_dir().join(format!("ris-acc-det-{}", std::process::id()));
    let run = |tag: &str, parallel: bool| -> Vec<Vec<u8>> {
        let mut s = Scenario::default();
        s.mesh.fine_resolution_mm = 1.0;
        s.analysis.points = 101;
        s.run.max_timesteps = 2_500;
        s.run.energy_stop_db = -300.0;
        s.run.parallel = parallel;
        s.output_dir = base.join(tag);
        run_scenario(&s).unwrap();
        data_files
            .iter()
            .map(|f| std::fs::read(s.output_dir.join(f)).unwrap())
            .collect()
    };
    let a = run("a", true);
    let b = run("b", true);
    let c = run("c", false);
    let same = a == b && a == c;
    std::fs::remove_dir_all(&base).ok();
    report(10, same, "three runs (rerun + serial worker path) compared byte-wise");
}
