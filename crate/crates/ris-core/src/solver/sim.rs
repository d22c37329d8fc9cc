//! Leap-frog time stepping with convolutional-PML absorbing boundaries and
//! semi-implicit lumped element branches.
//!
//! Field updates parallelize over contiguous x-slabs; slabs write disjoint
//! index ranges, so results are bit-identical for any worker count. The
//! total-energy reduction uses fixed per-slab partials summed sequentially
//! for the same reason.

use super::grid::{dual_spacing, LumpedElement, MaterialGrid};
use super::{stable_timestep, SolverError, SourceSpec};
use crate::mesher::Mesh;
use crate::scene::PortRole;
use crate::{EPS0, MU0};
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_cfl")]
    pub cfl_factor: f64,
    #[serde(default = "default_max_steps")]
    pub max_timesteps: usize,
    /// Halt when total energy falls this far below its peak (dB, negative).
    #[serde(default = "default_stop_db")]
    pub energy_stop_db: f64,
    /// Ports to record; all ports when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_ports: Option<Vec<usize>>,
    /// Use the data-parallel update path (requires the `parallel` feature).
    #[serde(default = "default_parallel")]
    pub parallel: bool,
    /// Debug fault injection: leave the boundary layers inactive so outgoing
    /// waves reflect off the domain walls. Never set in normal runs.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub disable_pml: bool,
}

fn default_cfl() -> f64 {
    0.95
}
fn default_max_steps() -> usize {
    60_000
}
fn default_stop_db() -> f64 {
    -40.0
}
fn default_parallel() -> bool {
    cfg!(feature = "parallel")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            cfl_factor: default_cfl(),
            max_timesteps: default_max_steps(),
            energy_stop_db: default_stop_db(),
            record_ports: None,
            parallel: default_parallel(),
            disable_pml: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.cfl_factor > 0.0 && self.cfl_factor < 1.0) {
            return Err(SolverError::InvalidRunConfig("require 0 < cfl_factor < 1".into()));
        }
        if self.max_timesteps == 0 {
            return Err(SolverError::InvalidRunConfig("require max_timesteps > 0".into()));
        }
        if !(self.energy_stop_db < 0.0) {
            return Err(SolverError::InvalidRunConfig("require energy_stop_db < 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    StepLimit,
    Diverged,
}

/// Raw per-port time series from one solver run.
///
/// `port_v[p][n]` is the port voltage at t = (n+1) dt and `port_i[p][n]` the
/// loop current at t = (n+1/2) dt; the half-step offset is compensated
/// during spectral analysis. Port voltage is -sum(E dl) over the port gap,
/// current is the H circulation around the port's middle edge, oriented so
/// that positive current flows into the structure under test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimRecord {
    pub dt_s: f64,
    pub active_port: usize,
    pub recorded_ports: Vec<usize>,
    pub port_roles: Vec<PortRole>,
    pub port_v: Vec<Vec<f64>>,
    pub port_i: Vec<Vec<f64>>,
    /// One E-field sample series per registered probe.
    #[serde(default)]
    pub probe_e: Vec<Vec<f64>>,
    pub energy: Vec<f64>,
    pub steps_executed: usize,
    pub stop_reason: StopReason,
}

impl SimRecord {
    pub fn series(&self, port: usize) -> Option<(&[f64], &[f64])> {
        let slot = self.recorded_ports.iter().position(|&p| p == port)?;
        Some((&self.port_v[slot], &self.port_i[slot]))
    }

    /// CSV export: t, V_p..., I_p... with one row per timestep.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "t_s")?;
        for p in &self.recorded_ports {
            write!(w, ",v{p}_volt")?;
        }
        for p in &self.recorded_ports {
            write!(w, ",i{p}_ampere")?;
        }
        writeln!(w)?;
        for n in 0..self.steps_executed {
            write!(w, "{:.9e}", (n as f64 + 1.0) * self.dt_s)?;
            for v in &self.port_v {
                write!(w, ",{:.9e}", v[n])?;
            }
            for i in &self.port_i {
                write!(w, ",{:.9e}", i[n])?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Compact binary dump (little-endian f64 payload with a JSON header).
    pub fn write_bin<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        let header = serde_json::json!({
            "magic": "simrecord-v1",
            "dt_s": self.dt_s,
            "active_port": self.active_port,
            "recorded_ports": self.recorded_ports,
            "steps": self.steps_executed,
        });
        let hs = serde_json::to_vec(&header)?;
        w.write_all(&(hs.len() as u64).to_le_bytes())?;
        w.write_all(&hs)?;
        for series in self.port_v.iter().chain(self.port_i.iter()) {
            for &x in series {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        for &x in &self.energy {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Thin wrapper making disjoint-slab writes shareable across workers.
/// Safety contract: concurrent callers only write indices belonging to
/// their own x-slab.
#[derive(Clone, Copy)]
struct RawGrid(*mut f64);
unsafe impl Send for RawGrid {}
unsafe impl Sync for RawGrid {}

impl RawGrid {
    #[inline(always)]
    unsafe fn at(self, idx: usize) -> *mut f64 {
        self.0.add(idx)
    }
}

fn par_for(parallel: bool, n: usize, f: impl Fn(usize) + Sync + Send) {
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        (0..n).into_par_iter().for_each(f);
        return;
    }
    let _ = parallel;
    for i in 0..n {
        f(i);
    }
}

/// Order-fixed parallel sum: per-index partials are combined sequentially so
/// the result does not depend on the worker count.
fn par_sum(parallel: bool, n: usize, f: impl Fn(usize) -> f64 + Sync + Send) -> f64 {
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        let partials: Vec<f64> = (0..n).into_par_iter().map(f).collect();
        return partials.iter().sum();
    }
    let _ = parallel;
    (0..n).map(f).sum()
}

struct LumpedState {
    el: LumpedElement,
    /// dt / (eps_e A_e) per edge: field correction per unit branch current.
    corr: Vec<f64>,
    /// Sum of inverse cell capacitances dl/(eps A) over the edges.
    inv_c_sum: f64,
    i_old: f64,
    q: f64,
}

/// One FDTD run instance. Exclusively owned while stepping; independent
/// instances may run concurrently.
pub struct Simulation {
    nx: usize,
    ny: usize,
    nz: usize,
    dt: f64,
    // Primary spacings d[axis][cell] and dual spacings at lines (m), stored
    // as reciprocals for the update loops.
    inv_d: [Vec<f64>; 3],
    inv_dh: [Vec<f64>; 3],
    d: [Vec<f64>; 3],
    dh: [Vec<f64>; 3],
    e: [Vec<f64>; 3],
    h: [Vec<f64>; 3],
    ca: [Vec<f64>; 3],
    cb: [Vec<f64>; 3],
    eps: [Vec<f64>; 3],
    // CPML recursion coefficients at integer (E-side) and half (H-side)
    // positions per axis, plus the index sets where they are active.
    be: [Vec<f64>; 3],
    ce: [Vec<f64>; 3],
    bh: [Vec<f64>; 3],
    ch: [Vec<f64>; 3],
    e_pml_idx: [Vec<usize>; 3],
    h_pml_idx: [Vec<usize>; 3],
    // Split-field convolution state, one array per (component, derivative).
    p_exy: Vec<f64>,
    p_exz: Vec<f64>,
    p_eyx: Vec<f64>,
    p_eyz: Vec<f64>,
    p_ezx: Vec<f64>,
    p_ezy: Vec<f64>,
    p_hxy: Vec<f64>,
    p_hxz: Vec<f64>,
    p_hyx: Vec<f64>,
    p_hyz: Vec<f64>,
    p_hzx: Vec<f64>,
    p_hzy: Vec<f64>,
    lumped: Vec<LumpedState>,
    /// Point probes (component, line indices) sampled after every E update.
    probes: Vec<(usize, [usize; 3])>,
    ports: Vec<usize>,
    port_roles: Vec<PortRole>,
    source: SourceSpec,
    cfg: RunConfig,
}

// PML grading: polynomial order and design reflection coefficient.
const PML_ORDER: i32 = 3;
const PML_R0: f64 = 1e-4;

impl Simulation {
    pub fn new(
        grid: &MaterialGrid,
        mesh: &Mesh,
        source: SourceSpec,
        cfg: RunConfig,
    ) -> Result<Self, SolverError> {
        source.validate()?;
        cfg.validate()?;
        let (nx, ny, nz) = (grid.nx, grid.ny, grid.nz);
        let n = nx * ny * nz;
        let dt = stable_timestep(mesh, grid, cfg.cfl_factor);

        let mut d: [Vec<f64>; 3] = Default::default();
        let mut dh: [Vec<f64>; 3] = Default::default();
        for axis in 0..3 {
            let lines: Vec<f64> = mesh.lines_mm[axis].iter().map(|c| c * 1e-3).collect();
            d[axis] = lines.windows(2).map(|w| w[1] - w[0]).collect();
            dh[axis] = (0..lines.len()).map(|i| dual_spacing(&lines, i)).collect();
        }
        let inv_d = [
            d[0].iter().map(|x| 1.0 / x).collect(),
            d[1].iter().map(|x| 1.0 / x).collect(),
            d[2].iter().map(|x| 1.0 / x).collect(),
        ];
        let inv_dh = [
            dh[0].iter().map(|x| 1.0 / x).collect(),
            dh[1].iter().map(|x| 1.0 / x).collect(),
            dh[2].iter().map(|x| 1.0 / x).collect(),
        ];

        // Lossy-dielectric update coefficients; PEC edges freeze at zero.
        let mut ca: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let mut cb: [Vec<f64>; 3] = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for comp in 0..3 {
            for idx in 0..n {
                if grid.pec[comp][idx] {
                    continue;
                }
                let eps = grid.eps[comp][idx];
                let gamma = grid.sigma[comp][idx] * dt / (2.0 * eps);
                ca[comp][idx] = (1.0 - gamma) / (1.0 + gamma);
                cb[comp][idx] = (dt / eps) / (1.0 + gamma);
            }
        }

        // CPML profiles per axis.
        let npml = mesh.pml_cells;
        let mut be: [Vec<f64>; 3] = Default::default();
        let mut ce: [Vec<f64>; 3] = Default::default();
        let mut bh: [Vec<f64>; 3] = Default::default();
        let mut ch: [Vec<f64>; 3] = Default::default();
        let mut e_pml_idx: [Vec<usize>; 3] = Default::default();
        let mut h_pml_idx: [Vec<usize>; 3] = Default::default();
        for axis in 0..3 {
            let lines: Vec<f64> = mesh.lines_mm[axis].iter().map(|c| c * 1e-3).collect();
            let nl = lines.len();
            let mut be_a = vec![1.0; nl];
            let mut ce_a = vec![0.0; nl];
            let mut bh_a = vec![1.0; nl.saturating_sub(1)];
            let mut ch_a = vec![0.0; nl.saturating_sub(1)];
            if npml > 0 && nl > 2 * npml + 2 {
                let lo_if = lines[npml];
                let hi_if = lines[nl - 1 - npml];
                let d_lo = lo_if - lines[0];
                let d_hi = lines[nl - 1] - hi_if;
                let sigma_at = |pos: f64| -> f64 {
                    let (depth, total) = if pos < lo_if {
                        (lo_if - pos, d_lo)
                    } else if pos > hi_if {
                        (pos - hi_if, d_hi)
                    } else {
                        return 0.0;
                    };
                    let smax = -((PML_ORDER + 1) as f64) * PML_R0.ln()
                        / (2.0 * crate::ETA0 * total);
                    smax * (depth / total).powi(PML_ORDER)
                };
                for l in 0..nl {
                    let s = sigma_at(lines[l]);
                    if s > 0.0 {
                        be_a[l] = (-s * dt / EPS0).exp();
                        ce_a[l] = be_a[l] - 1.0;
                    }
                }
                for l in 0..nl - 1 {
                    let s = sigma_at((lines[l] + lines[l + 1]) / 2.0);
                    if s > 0.0 {
                        bh_a[l] = (-s * dt / EPS0).exp();
                        ch_a[l] = bh_a[l] - 1.0;
                    }
                }
            }
            if !cfg.disable_pml {
                e_pml_idx[axis] =
                    (1..nl.saturating_sub(1)).filter(|&l| ce_a[l] != 0.0).collect();
                h_pml_idx[axis] =
                    (0..nl.saturating_sub(1)).filter(|&l| ch_a[l] != 0.0).collect();
            }
            be[axis] = be_a;
            ce[axis] = ce_a;
            bh[axis] = bh_a;
            ch[axis] = ch_a;
        }

        let lumped = grid
            .lumped
            .iter()
            .map(|el| {
                let corr: Vec<f64> = el
                    .edges
                    .iter()
                    .enumerate()
                    .map(|(e, &idx)| dt / (grid.eps[el.comp][idx] * el.area_m2[e]))
                    .collect();
                let inv_c_sum = el
                    .edges
                    .iter()
                    .enumerate()
                    .map(|(e, &idx)| el.dl_m[e] / (grid.eps[el.comp][idx] * el.area_m2[e]))
                    .sum();
                LumpedState { el: el.clone(), corr, inv_c_sum, i_old: 0.0, q: 0.0 }
            })
            .collect();

        Ok(Self {
            nx,
            ny,
            nz,
            dt,
            inv_d,
            inv_dh,
            d,
            dh,
            e: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            h: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            ca,
            cb,
            eps: grid.eps.clone(),
            be,
            ce,
            bh,
            ch,
            e_pml_idx,
            h_pml_idx,
            p_exy: vec![0.0; n],
            p_exz: vec![0.0; n],
            p_eyx: vec![0.0; n],
            p_eyz: vec![0.0; n],
            p_ezx: vec![0.0; n],
            p_ezy: vec![0.0; n],
            p_hxy: vec![0.0; n],
            p_hxz: vec![0.0; n],
            p_hyx: vec![0.0; n],
            p_hyz: vec![0.0; n],
            p_hzx: vec![0.0; n],
            p_hzy: vec![0.0; n],
            lumped,
            probes: Vec::new(),
            ports: grid.ports.clone(),
            port_roles: grid.port_roles(),
            source,
            cfg,
        })
    }

    pub fn dt_s(&self) -> f64 {
        self.dt
    }

    /// Register a point probe sampling E-component `comp` at line indices
    /// (i, j, k) after every timestep.
    pub fn add_probe(&mut self, comp: usize, ijk: [usize; 3]) {
        assert!(comp < 3 && ijk[0] < self.nx && ijk[1] < self.ny && ijk[2] < self.nz);
        self.probes.push((comp, ijk));
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.ny + j) * self.nz + k
    }

    fn update_h(&mut self) {
        let (nx, ny, nz) = (self.nx, self.ny, self.nz);
        let nynz = ny * nz;
        let dtmu = self.dt / MU0;
        let ex: &[f64] = &self.e[0];
        let ey: &[f64] = &self.e[1];
        let ez: &[f64] = &self.e[2];
        let inv_dx: &[f64] = &self.inv_d[0];
        let inv_dy: &[f64] = &self.inv_d[1];
        let inv_dz: &[f64] = &self.inv_d[2];
        let hx = RawGrid(self.h[0].as_mut_ptr());
        let hy = RawGrid(self.h[1].as_mut_ptr());
        let hz = RawGrid(self.h[2].as_mut_ptr());

        par_for(self.cfg.parallel, nx, |i| unsafe {
            // Hx: all i.
            for j in 0..ny - 1 {
                let row = (i * ny + j) * nz;
                for k in 0..nz - 1 {
                    let id = row + k;
                    let curl = (ez[id + nz] - ez[id]) * inv_dy[j]
                        - (ey[id + 1] - ey[id]) * inv_dz[k];
                    *hx.at(id) -= dtmu * curl;
                }
            }
            if i < nx - 1 {
                // Hy.
                for j in 0..ny {
                    let row = (i * ny + j) * nz;
                    for k in 0..nz - 1 {
                        let id = row + k;
                        let curl = (ex[id + 1] - ex[id]) * inv_dz[k]
                            - (ez[id + nynz] - ez[id]) * inv_dx[i];
                        *hy.at(id) -= dtmu * curl;
                    }
                }
                // Hz.
                for j in 0..ny - 1 {
                    let row = (i * ny + j) * nz;
                    for k in 0..nz {
                        let id = row + k;
                        let curl = (ey[id + nynz] - ey[id]) * inv_dx[i]
                            - (ex[id + nz] - ex[id]) * inv_dy[j];
                        *hz.at(id) -= dtmu * curl;
                    }
                }
            }
        });

        self.update_h_pml(dtmu);
    }

    /// Convolutional-PML corrections for the magnetic field, applied over
    /// the absorbing slabs only.
    fn update_h_pml(&mut self, dtmu: f64) {
        let (nx, ny, nz) = (self.nx, self.ny, self.nz);
        let nynz = ny * nz;

        // d/dx terms: Hy (dEz/dx) and Hz (dEy/dx).
        for &i in &self.h_pml_idx[0] {
            let b = self.bh[0][i];
            let c = self.ch[0][i];
            let inv = self.inv_d[0][i];
            for j in 0..ny {
                let row = (i * ny + j) * nz;
                for k in 0..nz - 1 {
                    let id = row + k;
                    let d = (self.e[2][id + nynz] - self.e[2][id]) * inv;
                    let p = b * self.p_hyx[id] + c * d;
                    self.p_hyx[id] = p;
                    self.h[1][id] += dtmu * p;
                }
            }
            for j in 0..ny - 1 {
                let row = (i * ny + j) * nz;
                for k in 0..nz {
                    let id = row + k;
                    let d = (self.e[1][id + nynz] - self.e[1][id]) * inv;
                    let p = b * self.p_hzx[id] + c * d;
                    self.p_hzx[id] = p;
                    self.h[2][id] -= dtmu * p;
                }
            }
        }
        // d/dy terms: Hx (dEz/dy) and Hz (dEx/dy).
        for &j in &self.h_pml_idx[1] {
            let b = self.bh[1][j];
            let c = self.ch[1][j];
            let inv = self.inv_d[1][j];
            for i in 0..nx {
                let row = (i * ny + j) * nz;
                for k in 0..nz - 1 {
                    let id = row + k;
                    let d = (self.e[2][id + nz] - self.e[2][id]) * inv;
                    let p = b * self.p_hxy[id] + c * d;
                    self.p_hxy[id] = p;
                    self.h[0][id] -= dtmu * p;
                }
                if i < nx - 1 {
                    for k in 0..nz {
                        let id = row + k;
                        let d = (self.e[0][id + nz] - self.e[0][id]) * inv;
                        let p = b * self.p_hzy[id] + c * d;
                        self.p_hzy[id] = p;
                        self.h[2][id] += dtmu * p;
                    }
                }
            }
        }
        // d/dz terms: Hx (dEy/dz) and Hy (dEx/dz).
        for &k in &self.h_pml_idx[2] {
            let b = self.bh[2][k];
            let c = self.ch[2][k];
            let inv = self.inv_d[2][k];
            for i in 0..nx {
                for j in 0..ny {
                    let id = (i * ny + j) * nz + k;
                    if j < ny - 1 {
                        let d = (self.e[1][id + 1] - self.e[1][id]) * inv;
                        let p = b * self.p_hxz[id] + c * d;
                        self.p_hxz[id] = p;
                        self.h[0][id] += dtmu * p;
                    }
                    if i < nx - 1 {
                        let d = (self.e[0][id + 1] - self.e[0][id]) * inv;
                        let p = b * self.p_hyz[id] + c * d;
                        self.p_hyz[id] = p;
                        self.h[1][id] -= dtmu * p;
                    }
                }
            }
        }
    }

    fn update_e(&mut self) {
        let (nx, ny, nz) = (self.nx, self.ny, self.nz);
        let nynz = ny * nz;
        let hx: &[f64] = &self.h[0];
        let hy: &[f64] = &self.h[1];
        let hz: &[f64] = &self.h[2];
        let ca0: &[f64] = &self.ca[0];
        let ca1: &[f64] = &self.ca[1];
        let ca2: &[f64] = &self.ca[2];
        let cb0: &[f64] = &self.cb[0];
        let cb1: &[f64] = &self.cb[1];
        let cb2: &[f64] = &self.cb[2];
        let inv_dxh: &[f64] = &self.inv_dh[0];
        let inv_dyh: &[f64] = &self.inv_dh[1];
        let inv_dzh: &[f64] = &self.inv_dh[2];
        let ex = RawGrid(self.e[0].as_mut_ptr());
        let ey = RawGrid(self.e[1].as_mut_ptr());
        let ez = RawGrid(self.e[2].as_mut_ptr());

        par_for(self.cfg.parallel, nx, |i| unsafe {
            if i < nx - 1 {
                // Ex: tangential boundary edges (j or k extremes) stay zero.
                for j in 1..ny - 1 {
                    let row = (i * ny + j) * nz;
                    for k in 1..nz - 1 {
                        let id = row + k;
                        let curl = (hz[id] - hz[id - nz]) * inv_dyh[j]
                            - (hy[id] - hy[id - 1]) * inv_dzh[k];
                        *ex.at(id) = ca0[id] * *ex.at(id) + cb0[id] * curl;
                    }
                }
            }
            if i >= 1 && i < nx - 1 {
                // Ey.
                for j in 0..ny - 1 {
                    let row = (i * ny + j) * nz;
                    for k in 1..nz - 1 {
                        let id = row + k;
                        let curl = (hx[id] - hx[id - 1]) * inv_dzh[k]
                            - (hz[id] - hz[id - nynz]) * inv_dxh[i];
                        *ey.at(id) = ca1[id] * *ey.at(id) + cb1[id] * curl;
                    }
                }
                // Ez.
                for j in 1..ny - 1 {
                    let row = (i * ny + j) * nz;
                    for k in 0..nz - 1 {
                        let id = row + k;
                        let curl = (hy[id] - hy[id - nynz]) * inv_dxh[i]
                            - (hx[id] - hx[id - nz]) * inv_dyh[j];
                        *ez.at(id) = ca2[id] * *ez.at(id) + cb2[id] * curl;
                    }
                }
            }
        });

        self.update_e_pml();
    }

    fn update_e_pml(&mut self) {
        let (nx, ny, nz) = (self.nx, self.ny, self.nz);
        let nynz = ny * nz;

        // d/dx terms: Ey (dHz/dx) and Ez (dHy/dx).
        for &i in &self.e_pml_idx[0] {
            let b = self.be[0][i];
            let c = self.ce[0][i];
            let inv = self.inv_dh[0][i];
            for j in 0..ny - 1 {
                let row = (i * ny + j) * nz;
                for k in 1..nz - 1 {
                    let id = row + k;
                    let d = (self.h[2][id] - self.h[2][id - nynz]) * inv;
                    let p = b * self.p_eyx[id] + c * d;
                    self.p_eyx[id] = p;
                    self.e[1][id] -= self.cb[1][id] * p;
                }
            }
            for j in 1..ny - 1 {
                let row = (i * ny + j) * nz;
                for k in 0..nz - 1 {
                    let id = row + k;
                    let d = (self.h[1][id] - self.h[1][id - nynz]) * inv;
                    let p = b * self.p_ezx[id] + c * d;
                    self.p_ezx[id] = p;
                    self.e[2][id] += self.cb[2][id] * p;
                }
            }
        }
        // d/dy terms: Ex (dHz/dy) and Ez (dHx/dy).
        for &j in &self.e_pml_idx[1] {
            let b = self.be[1][j];
            let c = self.ce[1][j];
            let inv = self.inv_dh[1][j];
            for i in 0..nx - 1 {
                let row = (i * ny + j) * nz;
                for k in 1..nz - 1 {
                    let id = row + k;
                    let d = (self.h[2][id] - self.h[2][id - nz]) * inv;
                    let p = b * self.p_exy[id] + c * d;
                    self.p_exy[id] = p;
                    self.e[0][id] += self.cb[0][id] * p;
                }
                if i >= 1 {
                    for k in 0..nz - 1 {
                        let id = row + k;
                        let d = (self.h[0][id] - self.h[0][id - nz]) * inv;
                        let p = b * self.p_ezy[id] + c * d;
                        self.p_ezy[id] = p;
                        self.e[2][id] -= self.cb[2][id] * p;
                    }
                }
            }
        }
        // d/dz terms: Ex (dHy/dz) and Ey (dHx/dz).
        for &k in &self.e_pml_idx[2] {
            let b = self.be[2][k];
            let c = self.ce[2][k];
            let inv = self.inv_dh[2][k];
            for i in 0..nx - 1 {
                for j in 0..ny - 1 {
                    let id = (i * ny + j) * nz + k;
                    if j >= 1 {
                        let d = (self.h[1][id] - self.h[1][id - 1]) * inv;
                        let p = b * self.p_exz[id] + c * d;
                        self.p_exz[id] = p;
                        self.e[0][id] -= self.cb[0][id] * p;
                    }
                    if i >= 1 {
                        let d = (self.h[0][id] - self.h[0][id - 1]) * inv;
                        let p = b * self.p_eyz[id] + c * d;
                        self.p_eyz[id] = p;
                        self.e[1][id] += self.cb[1][id] * p;
                    }
                }
            }
        }
    }

    fn branch_voltage(&self, l: usize) -> f64 {
        let st = &self.lumped[l];
        st.el
            .edges
            .iter()
            .zip(st.el.dl_m.iter())
            .map(|(&idx, &dl)| self.e[st.el.comp][idx] * dl)
            .sum()
    }

    /// Semi-implicit series R-L-C branch solve; corrects the edge fields by
    /// the branch current after the regular E update.
    fn lumped_step(&mut self, v_old: &[f64], active_lumped: Option<usize>, t_half: f64) {
        let dt = self.dt;
        for l in 0..self.lumped.len() {
            let v_star = self.branch_voltage(l);
            let st = &mut self.lumped[l];
            let vs = if Some(l) == active_lumped {
                crate::solver::gaussian_excitation(t_half, &self.source)
            } else {
                0.0
            };
            // Branch KVL centered at t_(n+1/2), where the current sample
            // lives: L dI/dt + R I + Q/C + Vs = (V_n + V_(n+1))/2, with
            // V_(n+1) = V* - dt (sum 1/C_cell) I folded into the implicit
            // term. Full R (not R/2) keeps the coupling passive for any R.
            let l_over_dt = st.el.l_h / dt;
            let inv_cl = st.el.c_f.map(|c| 1.0 / c).unwrap_or(0.0);
            let denom = l_over_dt
                + st.el.r_ohm
                + dt * inv_cl / 2.0
                + dt * st.inv_c_sum / 2.0;
            let rhs = l_over_dt * st.i_old - st.q * inv_cl
                + (v_old[l] + v_star) / 2.0
                - vs;
            let i_new = rhs / denom;
            st.i_old = i_new;
            st.q += dt * i_new;
            let comp = st.el.comp;
            for (e, &idx) in st.el.edges.iter().enumerate() {
                self.e[comp][idx] -= st.corr[e] * i_new;
            }
        }
    }

    /// H-field circulation around the element's middle edge: the total
    /// current through the dual face in the +axis direction.
    fn loop_current(&self, l: usize) -> f64 {
        let st = &self.lumped[l];
        let [i, j, k] = st.el.mid_ijk;
        let id = self.idx(i, j, k);
        let nz = self.nz;
        let nynz = self.ny * self.nz;
        match st.el.comp {
            0 => {
                self.dh[1][j] * (self.h[1][id - 1] - self.h[1][id])
                    + self.dh[2][k] * (self.h[2][id] - self.h[2][id - nz])
            }
            1 => {
                self.dh[2][k] * (self.h[2][id - nynz] - self.h[2][id])
                    + self.dh[0][i] * (self.h[0][id] - self.h[0][id - 1])
            }
            _ => {
                self.dh[0][i] * (self.h[0][id - nz] - self.h[0][id])
                    + self.dh[1][j] * (self.h[1][id] - self.h[1][id - nynz])
            }
        }
    }

    /// Instantaneous field energy, 1/2 (eps E^2 + mu H^2) integrated over
    /// the grid, with a worker-count-independent reduction.
    pub fn total_energy(&self) -> f64 {
        let (nx, ny, nz) = (self.nx, self.ny, self.nz);
        let ex: &[f64] = &self.e[0];
        let ey: &[f64] = &self.e[1];
        let ez: &[f64] = &self.e[2];
        let hx: &[f64] = &self.h[0];
        let hy: &[f64] = &self.h[1];
        let hz: &[f64] = &self.h[2];
        let e0: &[f64] = &self.eps[0];
        let e1: &[f64] = &self.eps[1];
        let e2: &[f64] = &self.eps[2];
        let d = &self.d;
        let dh = &self.dh;
        let sum = par_sum(self.cfg.parallel, nx, |i| {
            let mut acc = 0.0;
            for j in 0..ny {
                let row = (i * ny + j) * nz;
                for k in 0..nz {
                    let id = row + k;
                    if i < nx - 1 {
                        acc += e0[id] * ex[id] * ex[id] * d[0][i] * dh[1][j] * dh[2][k];
                    }
                    if j < ny - 1 {
                        acc += e1[id] * ey[id] * ey[id] * dh[0][i] * d[1][j] * dh[2][k];
                    }
                    if k < nz - 1 {
                        acc += e2[id] * ez[id] * ez[id] * dh[0][i] * dh[1][j] * d[2][k];
                    }
                    if j < ny - 1 && k < nz - 1 {
                        acc += MU0 * hx[id] * hx[id] * dh[0][i] * d[1][j] * d[2][k];
                    }
                    if i < nx - 1 && k < nz - 1 {
                        acc += MU0 * hy[id] * hy[id] * d[0][i] * dh[1][j] * d[2][k];
                    }
                    if i < nx - 1 && j < ny - 1 {
                        acc += MU0 * hz[id] * hz[id] * d[0][i] * d[1][j] * dh[2][k];
                    }
                }
            }
            acc
        });
        0.5 * sum
    }

    /// Execute the run with the given active port. All other ports stay
    /// terminated in their internal resistance.
    pub fn run(&mut self, active_port: usize) -> Result<SimRecord, SolverError> {
        if active_port >= self.ports.len() {
            return Err(SolverError::NoSuchPort(active_port, self.ports.len()));
        }
        let active_lumped = Some(self.ports[active_port]);
        let recorded: Vec<usize> = self
            .cfg
            .record_ports
            .clone()
            .unwrap_or_else(|| (0..self.ports.len()).collect());
        for &p in &recorded {
            if p >= self.ports.len() {
                return Err(SolverError::NoSuchPort(p, self.ports.len()));
            }
        }

        let dt = self.dt;
        let stop_ratio = 10f64.powf(self.cfg.energy_stop_db / 10.0);
        let extinct_step = (self.source.extinction_s() / dt).ceil() as usize;
        let mut rec = SimRecord {
            dt_s: dt,
            active_port,
            recorded_ports: recorded.clone(),
            port_roles: self.port_roles.clone(),
            port_v: vec![Vec::new(); recorded.len()],
            port_i: vec![Vec::new(); recorded.len()],
            probe_e: vec![Vec::new(); self.probes.len()],
            energy: Vec::new(),
            steps_executed: 0,
            stop_reason: StopReason::StepLimit,
        };
        let mut v_old = vec![0.0; self.lumped.len()];
        let mut peak = 0.0f64;

        for step in 0..self.cfg.max_timesteps {
            self.update_h();
            for (slot, &p) in recorded.iter().enumerate() {
                rec.port_i[slot].push(self.loop_current(self.ports[p]));
            }
            for l in 0..self.lumped.len() {
                v_old[l] = self.branch_voltage(l);
            }
            self.update_e();
            let t_half = (step as f64 + 0.5) * dt;
            self.lumped_step(&v_old, active_lumped, t_half);
            for (slot, &p) in recorded.iter().enumerate() {
                rec.port_v[slot].push(-self.branch_voltage(self.ports[p]));
            }
            for (slot, &(comp, [i, j, k])) in self.probes.iter().enumerate() {
                rec.probe_e[slot].push(self.e[comp][self.idx(i, j, k)]);
            }
            let en = self.total_energy();
            rec.energy.push(en);
            rec.steps_executed = step + 1;
            if peak > 0.0 && (en > peak * 1e6 || !en.is_finite()) {
                rec.stop_reason = StopReason::Diverged;
                return Ok(rec);
            }
            peak = peak.max(en);
            if step > extinct_step && en <= peak * stop_ratio {
                rec.stop_reason = StopReason::Converged;
                return Ok(rec);
            }
        }
        Ok(rec)
    }
}

/// Convenience wrapper: build a fresh simulation and run one excitation.
pub fn run_simulation(
    grid: &MaterialGrid,
    mesh: &Mesh,
    active_port: usize,
    src: &SourceSpec,
    cfg: &RunConfig,
) -> Result<SimRecord, SolverError> {
    Simulation::new(grid, mesh, src.clone(), cfg.clone())?.run(active_port)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Axis, BoxPrimitive, LumpedKind, LumpedItem, LumpedLoad, Material, Scene};
    use crate::solver::rasterize;

    fn uniform_mesh(n: usize, d_mm: f64, pml: usize) -> Mesh {
        let lines: Vec<f64> = (0..n).map(|i| i as f64 * d_mm).collect();
        Mesh {
            lines_mm: [lines.clone(), lines.clone(), lines],
            fixed: [vec![true; n], vec![true; n], vec![true; n]],
            pml_cells: pml,
            merge_threshold_mm: d_mm / 2.0,
        }
    }

    /// Air box with one z-directed port branch near the middle.
    fn port_in_air(n: usize, d_mm: f64, pml: usize) -> (Scene, Mesh) {
        let mut scene = Scene::new();
        let ext = (n - 1) as f64 * d_mm;
        scene.push_primitive(BoxPrimitive::new([0.0; 3], [ext; 3], Material::Air));
        let mid = (n / 2) as f64 * d_mm;
        scene.push_lumped(LumpedItem {
            start_mm: [mid, mid, mid],
            axis: Axis::Z,
            length_mm: d_mm,
            kind: LumpedKind::Port {
                resistance_ohm: 50.0,
                role: crate::scene::PortRole::Active,
                load: None,
            },
        });
        (scene, uniform_mesh(n, d_mm, pml))
    }

    fn short_cfg(steps: usize) -> RunConfig {
        RunConfig { max_timesteps: steps, cfl_factor: 0.7, ..RunConfig::default() }
    }

    #[test]
    fn zero_amplitude_source_stays_silent() {
        let (scene, mesh) = port_in_air(17, 1.0, 4);
        let grid = rasterize(&scene, &mesh, 8e9).unwrap();
        let mut src = SourceSpec::reference_design();
        src.amplitude_v = 0.0;
        let rec = run_simulation(&grid, &mesh, 0, &src, &short_cfg(200)).unwrap();
        let (v, i) = rec.series(0).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
        assert!(i.iter().all(|&x| x == 0.0));
        assert!(rec.energy.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn response_is_linear_in_amplitude() {
        let (scene, mesh) = port_in_air(17, 1.0, 4);
        let grid = rasterize(&scene, &mesh, 8e9).unwrap();
        let src1 = SourceSpec::reference_design();
        let mut src7 = src1;
        src7.amplitude_v = 7.0;
        let cfg = short_cfg(400);
        let r1 = run_simulation(&grid, &mesh, 0, &src1, &cfg).unwrap();
        let r7 = run_simulation(&grid, &mesh, 0, &src7, &cfg).unwrap();
        let (v1, i1) = r1.series(0).unwrap();
        let (v7, i7) = r7.series(0).unwrap();
        let vmax = v7.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(vmax > 0.0, "port must respond to the excitation");
        for n in 0..v1.len() {
            assert!((7.0 * v1[n] - v7[n]).abs() <= 1e-12 * vmax);
            assert!((7.0 * i1[n] - i7[n]).abs() <= 1e-12 * vmax);
        }
    }

    #[test]
    fn pec_block_tangential_e_stays_zero() {
        let (mut scene, mesh) = port_in_air(17, 1.0, 4);
        scene.push_primitive(BoxPrimitive::new(
            [2.0, 2.0, 2.0],
            [5.0, 5.0, 5.0],
            Material::PerfectConductor,
        ));
        let grid = rasterize(&scene, &mesh, 8e9).unwrap();
        let src = SourceSpec::reference_design();
        let mut sim = Simulation::new(&grid, &mesh, src, short_cfg(300)).unwrap();
        sim.run(0).unwrap();
        for comp in 0..3 {
            for idx in 0..grid.eps[comp].len() {
                if grid.pec[comp][idx] {
                    assert_eq!(sim.e[comp][idx], 0.0);
                }
            }
        }
    }

    #[test]
    fn closed_pec_box_conserves_energy() {
        // No PML, lossless interior: after the source dies the field energy
        // must stay flat (leap-frog is exactly non-dissipative).
        let (scene, mesh) = port_in_air(15, 1.0, 0);
        let mut lossless = Scene::new();
        lossless.primitives = scene.primitives.clone();
        // Port replaced by a zero-loss branch would still dissipate in R, so
        // drive with a hard lumped source of R = 0 via a plain port and strip
        // its resistance:
        let mut item = scene.lumped_items[0].clone();
        item.kind = LumpedKind::Port {
            resistance_ohm: 0.0,
            role: crate::scene::PortRole::Active,
            load: None,
        };
        lossless.push_lumped(item);
        let grid = rasterize(&lossless, &mesh, 8e9).unwrap();
        let src = SourceSpec::reference_design();
        let extinct = src.extinction_s();
        // A very deep stop threshold keeps the run alive to the step
        // limit even though only a small residual stays in the box.
        let cfg = RunConfig {
            max_timesteps: 2500,
            cfl_factor: 0.5,
            energy_stop_db: -300.0,
            ..RunConfig::default()
        };
        let rec = run_simulation(&grid, &mesh, 0, &src, &cfg).unwrap();
        assert_eq!(rec.stop_reason, StopReason::StepLimit);
        let n_ext = (extinct / rec.dt_s).ceil() as usize;
        assert!(n_ext + 100 < rec.steps_executed, "run long enough past extinction");
        // E and H are staggered in time, so the naive sum oscillates within
        // a narrow band; conservation means the band is bounded and shows no
        // systematic trend between the two halves of the tail.
        let tail = &rec.energy[n_ext..];
        assert!(tail[0] > 0.0);
        let mean: f64 = tail.iter().sum::<f64>() / tail.len() as f64;
        let lo = tail.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = tail.iter().cloned().fold(0.0f64, f64::max);
        assert!((hi - lo) / mean < 0.5, "energy band too wide: {lo}..{hi}");
        let half = tail.len() / 2;
        let m1: f64 = tail[..half].iter().sum::<f64>() / half as f64;
        let m2: f64 = tail[half..].iter().sum::<f64>() / (tail.len() - half) as f64;
        assert!((m2 - m1).abs() / mean < 5e-3, "energy trend: {m1} -> {m2}");
    }

    #[test]
    fn pml_absorbs_outgoing_pulse() {
        let (scene, mesh) = port_in_air(25, 1.0, 8);
        let grid = rasterize(&scene, &mesh, 8e9).unwrap();
        let src = SourceSpec::reference_design();
        let cfg = RunConfig { max_timesteps: 4000, cfl_factor: 0.7, ..RunConfig::default() };
        let rec = run_simulation(&grid, &mesh, 0, &src, &cfg).unwrap();
        assert_eq!(rec.stop_reason, StopReason::Converged);
        let peak = rec.energy.iter().cloned().fold(0.0f64, f64::max);
        let last = *rec.energy.last().unwrap();
        assert!(last <= peak * 1e-4, "residual energy {last} vs peak {peak}");
    }

    #[test]
    fn parallel_and_serial_paths_agree_exactly() {
        let (scene, mesh) = port_in_air(15, 1.0, 4);
        let grid = rasterize(&scene, &mesh, 8e9).unwrap();
        let src = SourceSpec::reference_design();
        let base = short_cfg(250);
        let ser = RunConfig { parallel: false, ..base.clone() };
        let par = RunConfig { parallel: true, ..base };
        let a = run_simulation(&grid, &mesh, 0, &src, &ser).unwrap();
        let b = run_simulation(&grid, &mesh, 0, &src, &par).unwrap();
        assert_eq!(a.port_v, b.port_v);
        assert_eq!(a.port_i, b.port_i);
        assert_eq!(a.energy, b.energy);
    }

    #[test]
    fn resistive_load_sees_dc_consistent_current_sign() {
        // Drive a port and check the recorded V/I product integrates to a
        // positive dissipated energy: the sign convention must make a port
        // looking into a passive structure absorb power on average.
        let (scene, mesh) = port_in_air(17, 1.0, 6);
        let grid = rasterize(&scene, &mesh, 8e9).unwrap();
        let src = SourceSpec::reference_design();
        let rec = run_simulation(&grid, &mesh, 0, &src, &short_cfg(2000)).unwrap();
        let (v, i) = rec.series(0).unwrap();
        let p: f64 = v.iter().zip(i.iter()).map(|(a, b)| a * b).sum();
        assert!(p > 0.0, "net power into the structure must be positive, got {p}");
    }

    #[test]
    fn run_config_validation() {
        assert!(RunConfig { cfl_factor: 1.2, ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig { max_timesteps: 0, ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig { energy_stop_db: 0.0, ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn load_branch_participates() {
        // A pure resistive load across the path should change the port
        // response relative to the unloaded box.
        let (scene, mesh) = port_in_air(17, 1.0, 4);
        let mut loaded_scene = Scene::new();
        loaded_scene.primitives = scene.primitives.clone();
        loaded_scene.lumped_items = scene.lumped_items.clone();
        loaded_scene.push_lumped(LumpedItem {
            start_mm: [4.0, 8.0, 8.0],
            axis: Axis::Z,
            length_mm: 1.0,
            kind: LumpedKind::Load(LumpedLoad::resistor(100.0)),
        });
        let g0 = rasterize(&scene, &mesh, 8e9).unwrap();
        let g1 = rasterize(&loaded_scene, &mesh, 8e9).unwrap();
        let src = SourceSpec::reference_design();
        let cfg = short_cfg(600);
        let r0 = run_simulation(&g0, &mesh, 0, &src, &cfg).unwrap();
        let r1 = run_simulation(&g1, &mesh, 0, &src, &cfg).unwrap();
        let (v0, _) = r0.series(0).unwrap();
        let (v1, _) = r1.series(0).unwrap();
        let diff: f64 = v0.iter().zip(v1.iter()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0, "load must perturb the port voltage");
    }
}
