//! Dual-polarization fiber propagation.
//!
//! The field obeys the Manakov equation
//!
//! ```text
//! ∂E/∂z = -(α/2) E + j(β2/2) ∂²E/∂t² - j(8/9)γ(|Ex|² + |Ey|²) E
//! ```
//!
//! integrated with symmetric split-step Fourier steps. Under the forward
//! DFT convention `e^{-j2πkn/N}`, `∂²/∂t²` becomes `-ω²`, so the linear
//! operator over a length `h` is `exp(-αh/2) · exp(-j(β2/2)ω²h)`.
//! Units: km for distance, W for power, s for time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{angular_frequency_grid, db_to_linear, DualPolWaveform, FftPlan, RngStream, Sample};

const PLANCK: f64 = 6.626_070_15e-34;
const LIGHT_SPEED: f64 = 299_792_458.0;
const PS2_TO_S2: f64 = 1e-24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkConfig {
    /// Attenuation, dB/km.
    pub alpha: f64,
    /// Group-velocity dispersion, ps²/km.
    pub beta2: f64,
    /// Nonlinear coefficient, 1/(W·km).
    pub gamma: f64,
    /// km.
    pub span_length: f64,
    pub spans: usize,
    /// Lumped amplifier gain, dB.
    pub amp_gain: f64,
    /// dB.
    pub noise_figure: f64,
    /// Split-step length, km.
    pub ssfm_step: f64,
    /// nm.
    pub carrier_wavelength: f64,
    pub noise_enabled: bool,
}

impl Default for LinkConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta2: -21.0,
            gamma: 1.3,
            span_length: 50.0,
            spans: 20,
            amp_gain: 10.0,
            noise_figure: 5.0,
            ssfm_step: 0.1,
            carrier_wavelength: 1550.0,
            noise_enabled: true,
        }
    }
}

impl LinkConfig {
    pub fn total_length(&self) -> f64 {
        self.span_length * self.spans as f64
    }

    pub fn steps_per_span(&self) -> Result<usize> {
        if !(self.ssfm_step > 0.0) || !(self.span_length >= 0.0) {
            return Err(Error::Config("link.ssfm_step must be positive and link.span_length non-negative".into()));
        }
        let ratio = self.span_length / self.ssfm_step;
        let steps = ratio.round();
        if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::Config(format!(
                "link.ssfm_step = {} km does not divide link.span_length = {} km",
                self.ssfm_step, self.span_length
            )));
        }
        Ok(steps as usize)
    }

    /// Checks the invariants of a physical link (gain equals span loss).
    pub fn validate(&self) -> Result<()> {
        self.steps_per_span()?;
        if self.alpha < 0.0 || self.gamma < 0.0 {
            return Err(Error::Config("link.alpha and link.gamma must be non-negative".into()));
        }
        let loss = self.alpha * self.span_length;
        if (self.amp_gain - loss).abs() > 1e-9 * loss.max(1.0) {
            return Err(Error::Config(format!(
                "link.amp_gain = {} dB does not compensate the span loss of {loss} dB",
                self.amp_gain
            )));
        }
        if !(self.carrier_wavelength > 0.0) {
            return Err(Error::Config("link.carrier_wavelength must be positive".into()));
        }
        Ok(())
    }

    /// Power attenuation per km, natural units.
    pub fn alpha_linear(&self) -> f64 {
        self.alpha * std::f64::consts::LN_10 / 10.0
    }

    pub fn carrier_frequency(&self) -> f64 {
        LIGHT_SPEED / (self.carrier_wavelength * 1e-9)
    }

    /// One-sided ASE spectral density per polarization, W/Hz:
    /// `(G-1)·h·ν·n_sp` with `n_sp = NF_lin / 2`.
    pub fn ase_density(&self) -> f64 {
        let g = db_to_linear(self.amp_gain);
        let nsp = db_to_linear(self.noise_figure) / 2.0;
        (g - 1.0).max(0.0) * PLANCK * self.carrier_frequency() * nsp
    }
}

/// Multiplier of each FFT bin for linear propagation over `length` km.
pub fn linear_operator(len: usize, sample_rate: f64, alpha_linear: f64, beta2_ps2_km: f64, length: f64) -> Vec<Sample> {
    let amp = (-alpha_linear * length / 2.0).exp();
    let b2 = beta2_ps2_km * PS2_TO_S2;
    angular_frequency_grid(len, sample_rate)
        .into_iter()
        .map(|w| Sample::from_polar(amp, -0.5 * b2 * w * w * length))
        .collect()
}

/// Applies `exp(-j(β2/2)ω²L)` (lossless dispersion over `length` km).
pub fn apply_dispersion(w: &mut DualPolWaveform, beta2_ps2_km: f64, length: f64) -> Result<()> {
    let op = linear_operator(w.len(), w.sample_rate(), 0.0, beta2_ps2_km, length);
    apply_spectral(w, &op)
}

pub(crate) fn apply_spectral(w: &mut DualPolWaveform, op: &[Sample]) -> Result<()> {
    let mut plan = FftPlan::new(w.len())?;
    for lane in [&mut w.x, &mut w.y] {
        plan.forward(lane);
        lane.iter_mut().zip(op).for_each(|(s, h)| *s *= h);
        plan.inverse(lane);
    }
    Ok(())
}

/// Reusable split-step integrator for one waveform size and link.
#[derive(Debug)]
pub struct SpanPropagator {
    plan: FftPlan,
    half: Vec<Sample>,
    full: Vec<Sample>,
    steps: usize,
    nl_coeff: f64,
}

impl SpanPropagator {
    pub fn new(len: usize, sample_rate: f64, cfg: &LinkConfig) -> Result<Self> {
        let steps = cfg.steps_per_span()?;
        let h = cfg.ssfm_step;
        Ok(Self {
            plan: FftPlan::new(len)?,
            half: linear_operator(len, sample_rate, cfg.alpha_linear(), cfg.beta2, h / 2.0),
            full: linear_operator(len, sample_rate, cfg.alpha_linear(), cfg.beta2, h),
            steps,
            nl_coeff: 8.0 / 9.0 * cfg.gamma * h,
        })
    }

    /// Propagates one span in place. Adjacent half-step linear operators
    /// are merged into full steps, which is algebraically identical to the
    /// plain symmetric scheme.
    pub fn propagate(&mut self, w: &mut DualPolWaveform, span: usize) -> Result<()> {
        if w.len() != self.plan.len() {
            return Err(Error::Size(format!("propagator built for {} samples, got {}", self.plan.len(), w.len())));
        }
        if self.steps == 0 {
            return Ok(());
        }
        let DualPolWaveform { x, y, .. } = w;
        self.plan.forward(x);
        self.plan.forward(y);
        mul(x, &self.half);
        mul(y, &self.half);
        for step in 0..self.steps {
            self.plan.inverse(x);
            self.plan.inverse(y);
            let mut total = 0.0;
            for (a, b) in x.iter_mut().zip(y.iter_mut()) {
                let p = a.norm_sqr() + b.norm_sqr();
                total += p;
                let rot = Sample::from_polar(1.0, -self.nl_coeff * p);
                *a *= rot;
                *b *= rot;
            }
            if !total.is_finite() {
                return Err(Error::Divergence { span, step });
            }
            self.plan.forward(x);
            self.plan.forward(y);
            let op = if step + 1 == self.steps { &self.half } else { &self.full };
            mul(x, op);
            mul(y, op);
        }
        self.plan.inverse(x);
        self.plan.inverse(y);
        Ok(())
    }
}

fn mul(lane: &mut [Sample], op: &[Sample]) {
    lane.iter_mut().zip(op).for_each(|(s, h)| *s *= h);
}

/// Propagates over one span of fiber.
pub fn ssfm_span(w: &DualPolWaveform, cfg: &LinkConfig) -> Result<DualPolWaveform> {
    let mut out = w.clone();
    SpanPropagator::new(w.len(), w.sample_rate(), cfg)?.propagate(&mut out, 0)?;
    Ok(out)
}

/// Lumped amplifier: field gain `√G`, then (optionally) ASE drawn as
/// circular Gaussian noise of variance `S_ASE·fs` per polarization. Noise
/// is consumed from `rng` for every X sample, then every Y sample.
pub fn amplify_in_place(w: &mut DualPolWaveform, cfg: &LinkConfig, rng: &mut RngStream) {
    w.scale(db_to_linear(cfg.amp_gain).sqrt());
    if cfg.noise_enabled {
        let var = cfg.ase_density() * w.sample_rate();
        for s in w.x.iter_mut() {
            *s += rng.complex_gaussian(var);
        }
        for s in w.y.iter_mut() {
            *s += rng.complex_gaussian(var);
        }
    }
}

pub fn amplify(w: &DualPolWaveform, cfg: &LinkConfig, rng: &mut RngStream) -> DualPolWaveform {
    let mut out = w.clone();
    amplify_in_place(&mut out, cfg, rng);
    out
}

/// Full link: every span is followed by its amplifier.
pub fn propagate_link(w: &DualPolWaveform, cfg: &LinkConfig, rng: &mut RngStream) -> Result<DualPolWaveform> {
    let mut out = w.clone();
    if cfg.spans == 0 {
        return Ok(out);
    }
    let mut prop = SpanPropagator::new(w.len(), w.sample_rate(), cfg)?;
    for span in 0..cfg.spans {
        prop.propagate(&mut out, span)?;
        amplify_in_place(&mut out, cfg, rng);
    }
    Ok(out)
}

/// Ideal noiseless digital back-propagation: undoes `propagate_link` with
/// ASE disabled by running every span in reverse with negated loss,
/// dispersion and nonlinearity.
pub fn back_propagate(w: &DualPolWaveform, cfg: &LinkConfig) -> Result<DualPolWaveform> {
    let mut out = w.clone();
    if cfg.spans == 0 {
        return Ok(out);
    }
    let reversed = LinkConfig {
        alpha: -cfg.alpha,
        beta2: -cfg.beta2,
        gamma: -cfg.gamma,
        ..cfg.clone()
    };
    let mut prop = SpanPropagator::new(w.len(), w.sample_rate(), &reversed)?;
    let undo_gain = db_to_linear(-cfg.amp_gain).sqrt();
    for span in (0..cfg.spans).rev() {
        out.scale(undo_gain);
        prop.propagate(&mut out, span)?;
    }
    Ok(out)
}
