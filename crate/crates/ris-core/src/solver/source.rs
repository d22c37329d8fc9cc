use super::SolverError;
use serde::{Deserialize, Serialize};

/// Gaussian-modulated sinusoidal excitation.
///
/// The pulse width is tied to the bandwidth parameter so that the spectral
/// magnitude is about -20 dB at f0 +/- fc; the default band (f0 = 8 GHz,
/// fc = 2 GHz) covers 6-10 GHz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub f0_hz: f64,
    pub fc_hz: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude_v: f64,
    /// Pulse delay; derived as 3 tau when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_s: Option<f64>,
    /// Pulse width; derived from fc when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_s: Option<f64>,
}

fn default_amplitude() -> f64 {
    1.0
}

impl SourceSpec {
    pub fn new(f0_hz: f64, fc_hz: f64) -> Self {
        Self { f0_hz, fc_hz, amplitude_v: 1.0, delay_s: None, width_s: None }
    }

    /// The 8 GHz / 2 GHz band used throughout the evaluation scenarios.
    pub fn reference_design() -> Self {
        Self::new(8e9, 2e9)
    }

    /// Pulse width: tau = sqrt(2.3) / (pi fc) puts the spectral edges at
    /// roughly -20 dB at f0 +/- fc.
    pub fn tau_s(&self) -> f64 {
        self.width_s.unwrap_or(2.3f64.sqrt() / (std::f64::consts::PI * self.fc_hz))
    }

    pub fn t0_s(&self) -> f64 {
        self.delay_s.unwrap_or(3.0 * self.tau_s())
    }

    /// Time after which the envelope is negligible and the source is
    /// considered extinct.
    pub fn extinction_s(&self) -> f64 {
        self.t0_s() + 5.0 * self.tau_s()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.f0_hz > 0.0) {
            return Err(SolverError::InvalidSource("f0 must be > 0".into()));
        }
        if !(self.fc_hz > 0.0 && self.fc_hz < 2.0 * self.f0_hz) {
            return Err(SolverError::InvalidSource("require 0 < fc < 2 f0".into()));
        }
        if !(self.tau_s() > 0.0) {
            return Err(SolverError::InvalidSource("pulse width must be > 0".into()));
        }
        if self.t0_s() < 3.0 * self.tau_s() - 1e-15 {
            return Err(SolverError::InvalidSource("delay must be >= 3 tau".into()));
        }
        Ok(())
    }

    pub fn eval(&self, t_s: f64) -> f64 {
        gaussian_excitation(t_s, self)
    }
}

/// amplitude * cos(2 pi f0 (t - t0)) * exp(-((t - t0)/tau)^2)
pub fn gaussian_excitation(t_s: f64, src: &SourceSpec) -> f64 {
    let tau = src.tau_s();
    let t0 = src.t0_s();
    let arg = (t_s - t0) / tau;
    src.amplitude_v
        * (2.0 * std::f64::consts::PI * src.f0_hz * (t_s - t0)).cos()
        * (-arg * arg).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_at_t0() {
        let src = SourceSpec::reference_design();
        assert!((src.eval(src.t0_s()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn even_about_t0() {
        let src = SourceSpec::reference_design();
        let t0 = src.t0_s();
        for k in 1..50 {
            let d = k as f64 * 7e-12;
            assert!((src.eval(t0 + d) - src.eval(t0 - d)).abs() < 1e-12);
        }
    }

    #[test]
    fn spectrum_peaks_at_f0() {
        // DFT of the sampled pulse: the peak bin must be within one bin of
        // f0 = 8 GHz for fc = 2 GHz.
        let src = SourceSpec::reference_design();
        let dt = 1e-12;
        let n = 4096;
        let df = 1.0 / (n as f64 * dt);
        let mut best = (0usize, 0.0f64);
        for bin in 0..n / 2 {
            let f = bin as f64 * df;
            let (mut re, mut im) = (0.0, 0.0);
            for s in 0..n {
                let t = s as f64 * dt;
                let v = src.eval(t);
                let ph = -2.0 * std::f64::consts::PI * f * t;
                re += v * ph.cos();
                im += v * ph.sin();
            }
            let mag = (re * re + im * im).sqrt();
            if mag > best.1 {
                best = (bin, mag);
            }
        }
        let f_peak = best.0 as f64 * df;
        assert!((f_peak - 8e9).abs() <= df, "peak at {f_peak}");
    }

    #[test]
    fn spectral_edges_near_minus_20_db() {
        let src = SourceSpec::reference_design();
        // Continuous-time envelope spectrum ratio at +/- fc from f0.
        let tau = src.tau_s();
        let edge = (-(std::f64::consts::PI * src.fc_hz * tau).powi(2)).exp();
        let db = 20.0 * edge.log10();
        assert!((db + 20.0).abs() < 0.1, "edge at {db} dB");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SourceSpec::new(0.0, 1e9).validate().is_err());
        assert!(SourceSpec::new(8e9, 17e9).validate().is_err());
        let mut s = SourceSpec::reference_design();
        s.delay_s = Some(0.0);
        assert!(s.validate().is_err());
    }
}
