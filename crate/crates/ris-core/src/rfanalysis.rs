//! Frequency-domain post-processing of solver port records: spectra, feed
//! impedances, scattering parameters, port powers and resonance extraction,
//! plus a Touchstone exporter.
//!
//! Voltage samples sit at t = (n+1) dt and current samples at t = (n+1/2) dt
//! (leap-frog staggering); the transforms below evaluate each series at its
//! true sample instants so the half-step offset never shows up as a phase
//! error in impedance or s-parameters.

use crate::solver::SimRecord;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RfError {
    #[error("invalid frequency grid: {0}")]
    InvalidGrid(String),
    #[error("record has no samples")]
    EmptyRecord,
    #[error("port {0} is not present in the spectra")]
    PortNotRecorded(usize),
    #[error("frequency grids do not match between excitations")]
    GridMismatch,
    #[error("scattering matrix is not square (rows {0}, cols {1})")]
    NotSquare(usize, usize),
    #[error("excitations must cover distinct active ports")]
    DuplicateExcitation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyGrid {
    pub start_hz: f64,
    pub stop_hz: f64,
    pub points: usize,
}

impl FrequencyGrid {
    pub fn new(start_hz: f64, stop_hz: f64, points: usize) -> Self {
        Self { start_hz, stop_hz, points }
    }

    pub fn validate(&self) -> Result<(), RfError> {
        if !(self.start_hz > 0.0) || !(self.stop_hz > self.start_hz) && self.points > 1 {
            return Err(RfError::InvalidGrid("require 0 < start < stop".into()));
        }
        if self.points == 0 {
            return Err(RfError::InvalidGrid("require at least one point".into()));
        }
        Ok(())
    }

    pub fn freqs(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.start_hz];
        }
        let step = (self.stop_hz - self.start_hz) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.start_hz + i as f64 * step).collect()
    }
}

/// Discrete-time Fourier transform of one time series sampled at
/// t_n = (n + offset) dt, evaluated at arbitrary frequencies.
fn dtft(samples: &[f64], dt_s: f64, offset: f64, freqs_hz: &[f64]) -> Vec<Complex64> {
    freqs_hz
        .iter()
        .map(|&f| {
            let w = -2.0 * PI * f * dt_s;
            // Incremental phasor rotation keeps this O(N) per frequency
            // without trig calls in the inner loop.
            let rot = Complex64::from_polar(1.0, w);
            let mut ph = Complex64::from_polar(1.0, w * offset);
            let mut acc = Complex64::new(0.0, 0.0);
            for &s in samples {
                ph *= rot;
                acc += s * ph;
            }
            acc * dt_s
        })
        .collect()
}

/// Per-port voltage/current spectra from one solver excitation.
#[derive(Debug, Clone)]
pub struct PortSpectra {
    pub freqs_hz: Vec<f64>,
    /// Ports covered, in record order; indexes `v` and `i`.
    pub ports: Vec<usize>,
    pub active_port: usize,
    pub v: Vec<Vec<Complex64>>,
    pub i: Vec<Vec<Complex64>>,
}

impl PortSpectra {
    fn slot(&self, port: usize) -> Result<usize, RfError> {
        self.ports
            .iter()
            .position(|&p| p == port)
            .ok_or(RfError::PortNotRecorded(port))
    }
}

/// Transform a solver record onto the given frequency grid.
pub fn port_spectra(rec: &SimRecord, grid: &FrequencyGrid) -> Result<PortSpectra, RfError> {
    grid.validate()?;
    if rec.steps_executed == 0 {
        return Err(RfError::EmptyRecord);
    }
    let freqs = grid.freqs();
    let v = rec
        .port_v
        .iter()
        .map(|s| dtft(s, rec.dt_s, 0.0, &freqs))
        .collect();
    let i = rec
        .port_i
        .iter()
        .map(|s| dtft(s, rec.dt_s, -0.5, &freqs))
        .collect();
    Ok(PortSpectra {
        freqs_hz: freqs,
        ports: rec.recorded_ports.clone(),
        active_port: rec.active_port,
        v,
        i,
    })
}

/// Feed impedance Z = V/I at one port across the grid. Points where the
/// current magnitude is negligible are flagged instead of reported as huge
/// meaningless values.
#[derive(Debug, Clone)]
pub struct Impedance {
    pub freqs_hz: Vec<f64>,
    pub z_ohm: Vec<Complex64>,
    pub undefined: Vec<bool>,
}

const CURRENT_FLOOR_REL: f64 = 1e-15;

pub fn feed_impedance(spectra: &PortSpectra, port: usize) -> Result<Impedance, RfError> {
    let slot = spectra.slot(port)?;
    let i_peak = spectra.i[slot]
        .iter()
        .map(|c| c.norm())
        .fold(0.0f64, f64::max);
    let floor = i_peak * CURRENT_FLOOR_REL;
    let mut z = Vec::with_capacity(spectra.freqs_hz.len());
    let mut undefined = Vec::with_capacity(spectra.freqs_hz.len());
    for (vf, ifr) in spectra.v[slot].iter().zip(spectra.i[slot].iter()) {
        if ifr.norm() <= floor {
            z.push(Complex64::new(f64::NAN, f64::NAN));
            undefined.push(true);
        } else {
            z.push(vf / ifr);
            undefined.push(false);
        }
    }
    Ok(Impedance { freqs_hz: spectra.freqs_hz.clone(), z_ohm: z, undefined })
}

/// Power waves of one excitation: a = (V + Z0 I) / (2 sqrt(Z0)),
/// b = (V - Z0 I) / (2 sqrt(Z0)) per recorded port.
fn power_waves(
    spectra: &PortSpectra,
    slot: usize,
    z0: f64,
) -> (Vec<Complex64>, Vec<Complex64>) {
    let s = 2.0 * z0.sqrt();
    let a = spectra.v[slot]
        .iter()
        .zip(spectra.i[slot].iter())
        .map(|(v, i)| (v + z0 * i) / s)
        .collect();
    let b = spectra.v[slot]
        .iter()
        .zip(spectra.i[slot].iter())
        .map(|(v, i)| (v - z0 * i) / s)
        .collect();
    (a, b)
}

/// Full or partial scattering matrix assembled from one excitation per
/// column. `s` is stored flat as s[f * rows * cols + r * cols + c].
#[derive(Debug, Clone)]
pub struct ScatteringMatrix {
    pub freqs_hz: Vec<f64>,
    pub z0_ohm: f64,
    /// Row port ids (response ports).
    pub rows: Vec<usize>,
    /// Column port ids (excited ports), one per input record.
    pub cols: Vec<usize>,
    pub s: Vec<Complex64>,
}

impl ScatteringMatrix {
    pub fn at(&self, f_idx: usize, row_port: usize, col_port: usize) -> Option<Complex64> {
        let r = self.rows.iter().position(|&p| p == row_port)?;
        let c = self.cols.iter().position(|&p| p == col_port)?;
        Some(self.s[(f_idx * self.rows.len() + r) * self.cols.len() + c])
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// |S_rc| in dB across frequency.
    pub fn magnitude_db(&self, row_port: usize, col_port: usize) -> Option<Vec<f64>> {
        let r = self.rows.iter().position(|&p| p == row_port)?;
        let c = self.cols.iter().position(|&p| p == col_port)?;
        Some(
            (0..self.freqs_hz.len())
                .map(|f| {
                    let v = self.s[(f * self.rows.len() + r) * self.cols.len() + c].norm();
                    20.0 * v.max(1e-300).log10()
                })
                .collect(),
        )
    }
}

/// Combine per-excitation spectra into S_rc = b_r / a_c, where record c
/// excites port c and all records share the frequency grid and port set.
pub fn scattering_matrix(
    spectra: &[PortSpectra],
    z0_ohm: f64,
) -> Result<ScatteringMatrix, RfError> {
    let first = spectra.first().ok_or(RfError::EmptyRecord)?;
    let rows = first.ports.clone();
    let nf = first.freqs_hz.len();
    let mut cols = Vec::with_capacity(spectra.len());
    for sp in spectra {
        if sp.ports != rows || sp.freqs_hz != first.freqs_hz {
            return Err(RfError::GridMismatch);
        }
        if cols.contains(&sp.active_port) {
            return Err(RfError::DuplicateExcitation);
        }
        cols.push(sp.active_port);
    }
    let mut s = vec![Complex64::new(0.0, 0.0); nf * rows.len() * cols.len()];
    for (c, sp) in spectra.iter().enumerate() {
        let a_slot = sp.slot(sp.active_port)?;
        let (a_act, _) = power_waves(sp, a_slot, z0_ohm);
        for (r, _port) in rows.iter().enumerate() {
            let (_, b) = power_waves(sp, r, z0_ohm);
            for f in 0..nf {
                s[(f * rows.len() + r) * cols.len() + c] = b[f] / a_act[f];
            }
        }
    }
    Ok(ScatteringMatrix { freqs_hz: first.freqs_hz.clone(), z0_ohm, rows, cols, s })
}

/// Per-port power budget of a single excitation.
#[derive(Debug, Clone)]
pub struct PortPowers {
    pub freqs_hz: Vec<f64>,
    pub ports: Vec<usize>,
    /// |a|^2 / 2 per port (W).
    pub incident_w: Vec<Vec<f64>>,
    /// |b|^2 / 2 per port (W).
    pub reflected_w: Vec<Vec<f64>>,
    /// incident - reflected per port (W); negative at ports that radiate
    /// outward more than they receive.
    pub accepted_w: Vec<Vec<f64>>,
}

pub fn port_powers(spectra: &PortSpectra, z0_ohm: f64) -> PortPowers {
    let mut incident = Vec::new();
    let mut reflected = Vec::new();
    let mut accepted = Vec::new();
    for slot in 0..spectra.ports.len() {
        let (a, b) = power_waves(spectra, slot, z0_ohm);
        let inc: Vec<f64> = a.iter().map(|c| c.norm_sqr() / 2.0).collect();
        let refl: Vec<f64> = b.iter().map(|c| c.norm_sqr() / 2.0).collect();
        let acc = inc.iter().zip(refl.iter()).map(|(i, r)| i - r).collect();
        incident.push(inc);
        reflected.push(refl);
        accepted.push(acc);
    }
    PortPowers {
        freqs_hz: spectra.freqs_hz.clone(),
        ports: spectra.ports.clone(),
        incident_w: incident,
        reflected_w: reflected,
        accepted_w: accepted,
    }
}

/// One matching dip of a reflection trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceBand {
    pub f_res_hz: f64,
    pub depth_db: f64,
    /// -10 dB band edges and width; absent when the dip never crosses the
    /// threshold inside the analyzed span.
    pub f_lo_hz: Option<f64>,
    pub f_hi_hz: Option<f64>,
    pub bandwidth_hz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResonanceReport {
    /// Bands sorted by depth, deepest first.
    pub bands: Vec<ResonanceBand>,
    /// Set when no dip reaches the matching threshold.
    pub weak: bool,
}

pub const MATCH_THRESHOLD_DB: f64 = -10.0;

/// Quadratic vertex refinement through three points (x equally spaced).
fn parabolic_refine(f: [f64; 3], y: [f64; 3]) -> f64 {
    let denom = y[0] - 2.0 * y[1] + y[2];
    if denom.abs() < 1e-30 {
        return f[1];
    }
    let delta = 0.5 * (y[0] - y[2]) / denom;
    // Clamp to the bracketing interval; a vertex outside it means the three
    // points are not locally parabolic.
    f[1] + delta.clamp(-1.0, 1.0) * (f[1] - f[0])
}

/// Linear interpolation of the threshold crossing between two samples.
fn crossing(f0: f64, f1: f64, y0: f64, y1: f64, level: f64) -> f64 {
    if (y1 - y0).abs() < 1e-30 {
        return f0;
    }
    f0 + (level - y0) / (y1 - y0) * (f1 - f0)
}

/// Locate reflection dips in a |S11| trace (dB). Each local minimum below
/// the matching threshold becomes a band with a refined center frequency and
/// -10 dB width; when no dip crosses the threshold, the single deepest
/// minimum is reported with `weak` set.
pub fn find_resonances(freqs_hz: &[f64], s11_db: &[f64]) -> ResonanceReport {
    assert_eq!(freqs_hz.len(), s11_db.len());
    let n = freqs_hz.len();
    if n == 0 {
        return ResonanceReport { bands: Vec::new(), weak: true };
    }
    // Tie-break toward lower frequency on exact plateaus: a minimum must be
    // strictly below its left neighbour and no higher than its right one.
    let mut minima: Vec<usize> = Vec::new();
    for i in 0..n {
        let left_ok = i == 0 || s11_db[i] < s11_db[i - 1];
        let right_ok = i + 1 == n || s11_db[i] <= s11_db[i + 1];
        if left_ok && right_ok {
            minima.push(i);
        }
    }
    let mut bands: Vec<ResonanceBand> = Vec::new();
    for &m in &minima {
        if s11_db[m] > MATCH_THRESHOLD_DB {
            continue;
        }
        let f_res = if m > 0 && m + 1 < n {
            parabolic_refine(
                [freqs_hz[m - 1], freqs_hz[m], freqs_hz[m + 1]],
                [s11_db[m - 1], s11_db[m], s11_db[m + 1]],
            )
        } else {
            freqs_hz[m]
        };
        // Walk outward to the -10 dB crossings.
        let mut f_lo = None;
        for i in (1..=m).rev() {
            if s11_db[i - 1] > MATCH_THRESHOLD_DB {
                f_lo = Some(crossing(
                    freqs_hz[i - 1],
                    freqs_hz[i],
                    s11_db[i - 1],
                    s11_db[i],
                    MATCH_THRESHOLD_DB,
                ));
                break;
            }
        }
        let mut f_hi = None;
        for i in m..n - 1 {
            if s11_db[i + 1] > MATCH_THRESHOLD_DB {
                f_hi = Some(crossing(
                    freqs_hz[i],
                    freqs_hz[i + 1],
                    s11_db[i],
                    s11_db[i + 1],
                    MATCH_THRESHOLD_DB,
                ));
                break;
            }
        }
        let bw = match (f_lo, f_hi) {
            (Some(a), Some(b)) => Some(b - a),
            _ => None,
        };
        bands.push(ResonanceBand {
            f_res_hz: f_res,
            depth_db: s11_db[m],
            f_lo_hz: f_lo,
            f_hi_hz: f_hi,
            bandwidth_hz: bw,
        });
    }
    let weak = bands.is_empty();
    if weak {
        // Report the global minimum anyway so callers can see how close the
        // structure came to matching.
        let m = (0..n)
            .min_by(|&a, &b| s11_db[a].partial_cmp(&s11_db[b]).unwrap())
            .unwrap();
        let f_res = if m > 0 && m + 1 < n {
            parabolic_refine(
                [freqs_hz[m - 1], freqs_hz[m], freqs_hz[m + 1]],
                [s11_db[m - 1], s11_db[m], s11_db[m + 1]],
            )
        } else {
            freqs_hz[m]
        };
        bands.push(ResonanceBand {
            f_res_hz: f_res,
            depth_db: s11_db[m],
            f_lo_hz: None,
            f_hi_hz: None,
            bandwidth_hz: None,
        });
        return ResonanceReport { bands, weak: true };
    }
    bands.sort_by(|a, b| a.depth_db.partial_cmp(&b.depth_db).unwrap());
    ResonanceReport { bands, weak: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaxCoupling {
    pub f_hz: f64,
    pub s_db: f64,
    /// Set when the trace carries no signal at all (numerically zero
    /// transmission everywhere); `f_hz` then degenerates to the grid start.
    pub no_coupling: bool,
}

/// Effectively-zero linear magnitude: `magnitude_db` clamps at 1e-300, so
/// anything this deep is silence, not signal.
const NO_COUPLING_FLOOR_DB: f64 = -300.0;

/// Peak of a transmission magnitude trace (dB) with parabolic refinement;
/// ties resolve toward the lower frequency.
pub fn find_max_coupling(freqs_hz: &[f64], s_db: &[f64]) -> Option<MaxCoupling> {
    let n = freqs_hz.len();
    if n == 0 {
        return None;
    }
    let mut m = 0;
    for i in 1..n {
        if s_db[i] > s_db[m] {
            m = i;
        }
    }
    if s_db[m] <= NO_COUPLING_FLOOR_DB {
        return Some(MaxCoupling { f_hz: freqs_hz[0], s_db: s_db[m], no_coupling: true });
    }
    let f = if m > 0 && m + 1 < n {
        parabolic_refine(
            [freqs_hz[m - 1], freqs_hz[m], freqs_hz[m + 1]],
            [-s_db[m - 1], -s_db[m], -s_db[m + 1]],
        )
    } else {
        freqs_hz[m]
    };
    Some(MaxCoupling { f_hz: f, s_db: s_db[m], no_coupling: false })
}

/// Touchstone 1.x export, magnitude/angle format in Hz. Two-port matrices
/// use the standard S11 S21 S12 S22 column order; larger matrices are
/// written row-major, one matrix row per line.
pub fn write_touchstone<W: Write>(
    w: &mut W,
    sm: &ScatteringMatrix,
) -> Result<(), std::io::Error> {
    let n = sm.rows.len();
    assert!(sm.is_square(), "touchstone requires a full square matrix");
    writeln!(w, "! {n}-port s-parameters", n = n)?;
    writeln!(w, "# HZ S MA R {}", sm.z0_ohm)?;
    let pair = |c: Complex64| format!("{:.9e} {:.6}", c.norm(), c.arg().to_degrees());
    for (fi, &f) in sm.freqs_hz.iter().enumerate() {
        if n == 2 {
            let g = |r: usize, c: usize| sm.s[(fi * n + r) * n + c];
            writeln!(
                w,
                "{f:.6e} {} {} {} {}",
                pair(g(0, 0)),
                pair(g(1, 0)),
                pair(g(0, 1)),
                pair(g(1, 1)),
            )?;
        } else {
            for r in 0..n {
                let mut line = if r == 0 { format!("{f:.6e}") } else { String::new() };
                for c in 0..n {
                    if !line.is_empty() {
                        line.push(' ');
                    }
                    line.push_str(&pair(sm.s[(fi * n + r) * n + c]));
                }
                writeln!(w, "{line}")?;
            }
        }
    }
    Ok(())
}

/// File extension for an N-port touchstone file (`s2p`, ...).
pub fn touchstone_extension(n_ports: usize) -> String {
    format!("s{n_ports}p")
}
