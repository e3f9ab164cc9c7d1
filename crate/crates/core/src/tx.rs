//! Transmitter: bit generation, QAM mapping, pulse shaping and WDM assembly.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{dbm_to_watts, streams, DualPolWaveform, FftPlan, RngStream, Sample};

/// Square 16-QAM, Gray labeled per axis: label bits `b0 b1` pick the
/// in-phase level and `b2 b3` the quadrature level, `00,01,11,10 → -3,-1,1,3`.
const QAM16_AXIS: [i32; 4] = [-3, -1, 3, 1];

/// Cross 32-QAM quasi-Gray table, indexed by the 5-bit label (MSB first).
/// Built by folding the outer columns of a Gray-labeled 8×4 rectangle onto
/// the top and bottom rows of the cross. Frozen: datasets depend on it.
const QAM32_TABLE: [(i32, i32); 32] = [
    (-1, -5),
    (-3, -5),
    (-1, 5),
    (-3, 5),
    (-5, -3),
    (-5, -1),
    (-5, 3),
    (-5, 1),
    (-1, -3),
    (-1, -1),
    (-1, 3),
    (-1, 1),
    (-3, -3),
    (-3, -1),
    (-3, 3),
    (-3, 1),
    (1, -5),
    (3, -5),
    (1, 5),
    (3, 5),
    (5, -3),
    (5, -1),
    (5, 3),
    (5, 1),
    (1, -3),
    (1, -1),
    (1, 3),
    (1, 1),
    (3, -3),
    (3, -1),
    (3, 3),
    (3, 1),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Constellation {
    order: usize,
    bits: usize,
    /// `points[i]` is the point whose label is `labels[i]`.
    points: Vec<Sample>,
    labels: Vec<u32>,
    /// Point index for each label value.
    by_label: Vec<usize>,
}

impl Constellation {
    pub fn new(order: usize) -> Result<Self> {
        match order {
            16 => Ok(Self::qam16()),
            32 => Ok(Self::qam32()),
            _ => Err(Error::Config(format!("unsupported QAM order {order} (expected 16 or 32)"))),
        }
    }

    pub fn qam16() -> Self {
        let scale = 1.0 / 10f64.sqrt();
        let mut pts = Vec::with_capacity(16);
        for label in 0..16u32 {
            let i = QAM16_AXIS[(label >> 2) as usize];
            let q = QAM16_AXIS[(label & 3) as usize];
            pts.push(Sample::new(i as f64 * scale, q as f64 * scale));
        }
        Self::from_points(16, pts)
    }

    pub fn qam32() -> Self {
        let scale = 1.0 / 20f64.sqrt();
        let pts = QAM32_TABLE
            .iter()
            .map(|&(i, q)| Sample::new(i as f64 * scale, q as f64 * scale))
            .collect();
        Self::from_points(32, pts)
    }

    fn from_points(order: usize, points: Vec<Sample>) -> Self {
        let labels: Vec<u32> = (0..order as u32).collect();
        let by_label = (0..order).collect();
        Self {
            order,
            bits: order.trailing_zeros() as usize,
            points,
            labels,
            by_label,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.bits
    }

    pub fn points(&self) -> &[Sample] {
        &self.points
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn point_for_label(&self, label: u32) -> Sample {
        self.points[self.by_label[label as usize]]
    }

    pub fn mean_energy(&self) -> f64 {
        self.points.iter().map(|p| p.norm_sqr()).sum::<f64>() / self.order as f64
    }

    /// Index of the nearest point; exact ties go to the lowest index.
    pub fn nearest_index(&self, s: Sample) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (s - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

/// Packs `bits` MSB-first into a label.
fn label_of(bits: &[u8]) -> u32 {
    bits.iter().fold(0u32, |acc, &b| (acc << 1) | (b & 1) as u32)
}

fn push_label(out: &mut Vec<u8>, label: u32, width: usize) {
    for k in (0..width).rev() {
        out.push(((label >> k) & 1) as u8);
    }
}

/// `n` uniform bits: bit `i` is bit `i mod 64` (LSB first) of the
/// `i / 64`-th word drawn from the stream.
pub fn generate_bits(n: usize, rng: &mut RngStream) -> Result<Vec<u8>> {
    if n == 0 {
        return Err(Error::Config("bit count must be positive".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut word = 0u64;
    for i in 0..n {
        if i % 64 == 0 {
            word = rng.next_u64();
        }
        out.push(((word >> (i % 64)) & 1) as u8);
    }
    Ok(out)
}

pub fn qam_modulate(bits: &[u8], c: &Constellation) -> Result<Vec<Sample>> {
    let m = c.bits_per_symbol();
    if !bits.len().is_multiple_of(m) {
        return Err(Error::Framing(format!("{} bits do not divide into {m}-bit symbols", bits.len())));
    }
    Ok(bits.chunks_exact(m).map(|g| c.point_for_label(label_of(g))).collect())
}

/// Hard-decision nearest-point demapper.
pub fn qam_demodulate(symbols: &[Sample], c: &Constellation) -> Vec<u8> {
    let m = c.bits_per_symbol();
    let mut out = Vec::with_capacity(symbols.len() * m);
    for &s in symbols {
        push_label(&mut out, c.labels()[c.nearest_index(s)], m);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TxConfig {
    /// Symbols per second per channel.
    pub symbol_rate: f64,
    pub qam_order: usize,
    pub channels: usize,
    /// Hz between adjacent channel centers.
    pub channel_spacing: f64,
    pub samples_per_symbol: usize,
    pub rrc_enabled: bool,
    pub rrc_rolloff: f64,
    pub rrc_span_symbols: usize,
    pub symbols_per_pol: usize,
    /// Total launch power over all channels and both polarizations.
    pub launch_power_total_dbm: f64,
}

impl Default for TxConfig {
    fn default() -> Self {
        Self {
            symbol_rate: 25e9,
            qam_order: 16,
            channels: 9,
            channel_spacing: 35e9,
            samples_per_symbol: 32,
            rrc_enabled: false,
            rrc_rolloff: 0.2,
            rrc_span_symbols: 64,
            symbols_per_pol: 1 << 17,
            launch_power_total_dbm: 0.0,
        }
    }
}

impl TxConfig {
    pub fn sample_rate(&self) -> f64 {
        self.symbol_rate * self.samples_per_symbol as f64
    }

    pub fn samples(&self) -> usize {
        self.symbols_per_pol * self.samples_per_symbol
    }

    /// Roll-off entering bandwidth computations (zero for unshaped pulses).
    pub fn effective_rolloff(&self) -> f64 {
        if self.rrc_enabled {
            self.rrc_rolloff
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.symbol_rate > 0.0) {
            return Err(Error::Config("tx.symbol_rate must be positive".into()));
        }
        Constellation::new(self.qam_order)?;
        if self.channels == 0 || self.channels.is_multiple_of(2) {
            return Err(Error::Config(format!("tx.channels must be odd, got {}", self.channels)));
        }
        if self.samples_per_symbol < 2 || !self.samples_per_symbol.is_multiple_of(2) {
            return Err(Error::Config("tx.samples_per_symbol must be even and at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.rrc_rolloff) {
            return Err(Error::Config("tx.rrc_rolloff must lie in [0, 1]".into()));
        }
        if self.symbols_per_pol == 0 || !self.samples().is_power_of_two() {
            return Err(Error::Config(format!(
                "tx.symbols_per_pol × tx.samples_per_symbol = {} must be a power of two",
                self.samples()
            )));
        }
        if self.rrc_enabled && self.rrc_span_symbols * self.samples_per_symbol >= self.samples() {
            return Err(Error::Config("tx.rrc_span_symbols exceeds the frame".into()));
        }
        let needed = self.channels as f64 * self.channel_spacing + self.symbol_rate * (1.0 + self.effective_rolloff());
        if self.sample_rate() < needed {
            return Err(Error::Aliasing(format!(
                "simulation band {:.4e} Hz cannot hold the WDM aggregate ({needed:.4e} Hz); raise samples_per_symbol",
                self.sample_rate()
            )));
        }
        Ok(())
    }
}

/// Unit-energy continuous root-raised-cosine pulse at `t` symbol periods.
pub fn rrc_pulse(t: f64, rolloff: f64) -> f64 {
    let b = rolloff;
    if t.abs() < 1e-12 {
        return 1.0 - b + 4.0 * b / PI;
    }
    if b > 0.0 && (t.abs() - 1.0 / (4.0 * b)).abs() < 1e-9 {
        let a = PI / (4.0 * b);
        return b / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos());
    }
    let num = (PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos();
    let den = PI * t * (1.0 - (4.0 * b * t).powi(2));
    num / den
}

/// Odd-length RRC taps spanning `span_symbols` symbols, centered, scaled to
/// unit discrete energy.
pub fn rrc_taps(rolloff: f64, samples_per_symbol: usize, span_symbols: usize) -> Vec<f64> {
    let half = (span_symbols * samples_per_symbol) / 2;
    let sps = samples_per_symbol as f64;
    let mut taps: Vec<f64> = (0..=2 * half).map(|n| rrc_pulse((n as f64 - half as f64) / sps, rolloff)).collect();
    let e: f64 = taps.iter().map(|v| v * v).sum();
    let k = 1.0 / e.sqrt();
    taps.iter_mut().for_each(|v| *v *= k);
    taps
}

/// Fraction of the pulse energy captured by a truncation to `span_symbols`.
pub fn rrc_energy_capture(rolloff: f64, samples_per_symbol: usize, span_symbols: usize) -> f64 {
    let sps = samples_per_symbol as f64;
    let energy = |span: usize| -> f64 {
        let half = (span * samples_per_symbol) / 2;
        (0..=2 * half).map(|n| rrc_pulse((n as f64 - half as f64) / sps, rolloff).powi(2)).sum()
    };
    energy(span_symbols) / energy(span_symbols.max(1024))
}

/// Frequency response of the centered taps on an `n`-point circular grid.
pub fn rrc_frequency_response(taps: &[f64], n: usize) -> Result<Vec<Sample>> {
    let half = taps.len() / 2;
    let mut buf = vec![Sample::default(); n];
    for (i, &t) in taps.iter().enumerate() {
        let idx = (i + n - half) % n;
        buf[idx] += t;
    }
    let mut plan = FftPlan::new(n)?;
    plan.forward(&mut buf);
    Ok(buf)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapingReport {
    pub shaping: String,
    pub energy_capture: f64,
    pub warnings: Vec<String>,
}

/// RRC shaping of one lane: zero-insertion upsampling followed by circular
/// convolution with the centered taps, so symbol `k` peaks at sample
/// `k·samples_per_symbol`.
pub fn rrc_shape(symbols: &[Sample], cfg: &TxConfig) -> Result<(Vec<Sample>, ShapingReport)> {
    if !cfg.rrc_enabled {
        return Err(Error::Config("rrc_shape called with tx.rrc_enabled = false".into()));
    }
    let sps = cfg.samples_per_symbol;
    if sps < 2 {
        return Err(Error::Config("samples_per_symbol must be at least 2 for RRC".into()));
    }
    let n = symbols.len() * sps;
    let taps = rrc_taps(cfg.rrc_rolloff, sps, cfg.rrc_span_symbols);
    if taps.len() > n {
        return Err(Error::Config("RRC span longer than the frame".into()));
    }
    let resp = rrc_frequency_response(&taps, n)?;
    let mut buf = vec![Sample::default(); n];
    for (k, &s) in symbols.iter().enumerate() {
        buf[k * sps] = s;
    }
    let mut plan = FftPlan::new(n)?;
    plan.forward(&mut buf);
    for (b, h) in buf.iter_mut().zip(&resp) {
        *b *= h;
    }
    plan.inverse(&mut buf);

    let capture = rrc_energy_capture(cfg.rrc_rolloff, sps, cfg.rrc_span_symbols);
    let mut warnings = Vec::new();
    if capture < 0.99 {
        warnings.push(format!(
            "RRC span of {} symbols captures only {:.4}% of the pulse energy",
            cfg.rrc_span_symbols,
            capture * 100.0
        ));
    }
    Ok((
        buf,
        ShapingReport {
            shaping: "rrc".into(),
            energy_capture: capture,
            warnings,
        },
    ))
}

/// Unshaped (NRZ) lane: rectangular pulses of one symbol period centered on
/// `k·samples_per_symbol`, band-limited by the transmitter's electrical
/// low-pass at half the symbol rate. The bins exactly at ±R/2 get half
/// weight.
pub fn nrz_shape(symbols: &[Sample], samples_per_symbol: usize) -> Result<Vec<Sample>> {
    let sps = samples_per_symbol;
    let n = symbols.len() * sps;
    let mut buf = vec![Sample::default(); n];
    for (k, &s) in symbols.iter().enumerate() {
        buf[k * sps] = s;
    }
    let mut plan = FftPlan::new(n)?;
    plan.forward(&mut buf);
    let edge = symbols.len() / 2;
    for (k, b) in buf.iter_mut().enumerate() {
        let m = if k < n / 2 { k } else { n - k };
        let gain = match m.cmp(&edge) {
            std::cmp::Ordering::Less => sinc(m as f64 / symbols.len() as f64),
            std::cmp::Ordering::Equal => 0.5 * sinc(0.5),
            std::cmp::Ordering::Greater => 0.0,
        };
        *b *= gain * sps as f64;
    }
    plan.inverse(&mut buf);
    Ok(buf)
}

fn sinc(u: f64) -> f64 {
    if u == 0.0 {
        1.0
    } else {
        let x = std::f64::consts::PI * u;
        x.sin() / x
    }
}

pub fn pulse_shape(symbols: &[Sample], cfg: &TxConfig) -> Result<(Vec<Sample>, ShapingReport)> {
    if cfg.rrc_enabled {
        rrc_shape(symbols, cfg)
    } else {
        let report = ShapingReport {
            shaping: "nrz".into(),
            energy_capture: 1.0,
            warnings: Vec::new(),
        };
        Ok((nrz_shape(symbols, cfg.samples_per_symbol)?, report))
    }
}

/// One channel's shaped X and Y lanes.
#[derive(Clone, Debug)]
pub struct ChannelLanes {
    pub x: Vec<Sample>,
    pub y: Vec<Sample>,
}

/// Frequency offset of channel `index` (0-based, lowest frequency first),
/// rounded to the FFT bin grid so the shift is periodic over the frame.
pub fn channel_offset_hz(index: usize, cfg: &TxConfig, len: usize) -> f64 {
    let rel = index as f64 - (cfg.channels as f64 - 1.0) / 2.0;
    let df = cfg.sample_rate() / len as f64;
    (rel * cfg.channel_spacing / df).round() * df
}

/// Frequency-shifts each channel to its slot, sums them with equal
/// per-channel power and scales the aggregate to the configured total.
pub fn wdm_multiplex(lanes: &[ChannelLanes], cfg: &TxConfig) -> Result<DualPolWaveform> {
    if lanes.is_empty() || lanes.len().is_multiple_of(2) {
        return Err(Error::Config(format!("need an odd number of channels, got {}", lanes.len())));
    }
    let n = lanes[0].x.len();
    if lanes.iter().any(|l| l.x.len() != n || l.y.len() != n) {
        return Err(Error::Size("channel lanes differ in length".into()));
    }
    let fs = cfg.sample_rate();
    let edge = (lanes.len() as f64 - 1.0) / 2.0 * cfg.channel_spacing + cfg.symbol_rate * (1.0 + cfg.effective_rolloff()) / 2.0;
    if edge > fs / 2.0 {
        return Err(Error::Aliasing(format!(
            "outermost channel edge at {edge:.4e} Hz exceeds the Nyquist frequency {:.4e} Hz",
            fs / 2.0
        )));
    }
    let total_w = dbm_to_watts(cfg.launch_power_total_dbm);
    let per_channel = total_w / lanes.len() as f64;
    let mut x = vec![Sample::default(); n];
    let mut y = vec![Sample::default(); n];
    let ch_cfg = TxConfig {
        channels: lanes.len(),
        ..cfg.clone()
    };
    for (c, lane) in lanes.iter().enumerate() {
        let p: f64 = lane.x.iter().chain(&lane.y).map(|s| s.norm_sqr()).sum::<f64>() / n as f64;
        if p == 0.0 {
            continue;
        }
        let g = (per_channel / p).sqrt();
        let f = channel_offset_hz(c, &ch_cfg, n);
        let step = 2.0 * PI * f / fs;
        for t in 0..n {
            let rot = Sample::from_polar(g, step * t as f64);
            x[t] += lane.x[t] * rot;
            y[t] += lane.y[t] * rot;
        }
    }
    let mut w = DualPolWaveform::new(x, y, fs)?;
    if w.mean_power() == 0.0 {
        return Err(Error::DegenerateInput("all channels are dark".into()));
    }
    let k = (total_w / w.mean_power()).sqrt();
    w.scale(k);
    Ok(w)
}

/// Transmitted data of one channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelTruth {
    pub bits_x: Vec<u8>,
    pub bits_y: Vec<u8>,
    pub symbols_x: Vec<Sample>,
    pub symbols_y: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub channels: Vec<ChannelTruth>,
}

impl GroundTruth {
    pub fn central(&self) -> &ChannelTruth {
        &self.channels[self.channels.len() / 2]
    }
}

#[derive(Clone, Debug)]
pub struct Transmission {
    pub waveform: DualPolWaveform,
    pub truth: GroundTruth,
    pub shaping: ShapingReport,
}

/// Full transmitter: independent bit streams per channel and polarization,
/// mapping, shaping and multiplexing.
pub fn transmit(cfg: &TxConfig, seed: u64) -> Result<Transmission> {
    cfg.validate()?;
    let constellation = Constellation::new(cfg.qam_order)?;
    let nbits = cfg.symbols_per_pol * constellation.bits_per_symbol();
    let mut lanes = Vec::with_capacity(cfg.channels);
    let mut truth = Vec::with_capacity(cfg.channels);
    let mut shaping = ShapingReport::default();
    for c in 0..cfg.channels {
        let bits_x = generate_bits(nbits, &mut RngStream::new(seed, streams::tx_bits(c, 0)))?;
        let bits_y = generate_bits(nbits, &mut RngStream::new(seed, streams::tx_bits(c, 1)))?;
        let symbols_x = qam_modulate(&bits_x, &constellation)?;
        let symbols_y = qam_modulate(&bits_y, &constellation)?;
        let (x, rep) = pulse_shape(&symbols_x, cfg)?;
        let (y, _) = pulse_shape(&symbols_y, cfg)?;
        shaping = rep;
        lanes.push(ChannelLanes { x, y });
        truth.push(ChannelTruth {
            bits_x,
            bits_y,
            symbols_x,
            symbols_y,
        });
    }
    let waveform = wdm_multiplex(&lanes, cfg)?;
    Ok(Transmission {
        waveform,
        truth: GroundTruth { channels: truth },
        shaping,
    })
}
