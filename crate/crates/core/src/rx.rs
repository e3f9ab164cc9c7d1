//! Coherent receiver: central-channel filtering, ideal chromatic-dispersion
//! compensation, one-sample-per-symbol decimation and feature conditioning.
//!
//! Synchronization, carrier recovery and polarization demultiplexing are
//! ideal. The residual constant complex gain of each polarization is removed
//! with a data-aided least-squares fit against the transmitted symbols.

use crate::error::{Error, Result};
use crate::fiber::{apply_spectral, linear_operator, LinkConfig};
use crate::frame::{FeatureStats, FrameMeta, SymbolFrame};
use crate::signal::{frequency_grid, DualPolWaveform, Sample};
use crate::tx::{rrc_frequency_response, rrc_taps, GroundTruth, ShapingReport, TxConfig};

/// Ideal low-pass at `R(1+ρ)/2` (ρ = 0 for unshaped pulses).
pub fn brick_wall(len: usize, cfg: &TxConfig) -> Vec<Sample> {
    let cutoff = cfg.symbol_rate / 2.0 * (1.0 + cfg.effective_rolloff());
    frequency_grid(len, cfg.sample_rate())
        .iter()
        .map(|fr| if fr.abs() <= cutoff { Sample::new(1.0, 0.0) } else { Sample::default() })
        .collect()
}

/// Receiver filter response on the waveform's FFT grid.
pub fn receiver_filter(len: usize, cfg: &TxConfig) -> Result<Vec<Sample>> {
    let mut h = brick_wall(len, cfg);
    if cfg.rrc_enabled {
        let taps = rrc_taps(cfg.rrc_rolloff, cfg.samples_per_symbol, cfg.rrc_span_symbols);
        let matched = rrc_frequency_response(&taps, len)?;
        h.iter_mut().zip(&matched).for_each(|(a, b)| *a *= b.conj());
    }
    Ok(h)
}

/// Keeps the central channel (already at 0 Hz) and applies the receiver
/// low-pass: brick-wall at half the symbol rate for unshaped pulses, or the
/// matched RRC inside a brick-wall at `R(1+ρ)/2`.
pub fn channel_select(w: &DualPolWaveform, cfg: &TxConfig) -> Result<DualPolWaveform> {
    if cfg.channels.is_multiple_of(2) {
        return Err(Error::Config("channel count must be odd".into()));
    }
    let h = receiver_filter(w.len(), cfg)?;
    let mut out = w.clone();
    apply_spectral(&mut out, &h)?;
    Ok(out)
}

/// Ideal frequency-domain equalizer: undoes `total_length` km of
/// dispersion, i.e. multiplies by `exp(+j(β2/2)ω²L)`.
pub fn fde_compensate(w: &DualPolWaveform, total_length: f64, beta2: f64) -> Result<DualPolWaveform> {
    let mut out = w.clone();
    let op = linear_operator(w.len(), w.sample_rate(), 0.0, -beta2, total_length);
    apply_spectral(&mut out, &op)?;
    Ok(out)
}

/// Context needed to turn a received waveform into a labeled frame.
pub struct FrameContext<'a> {
    pub tx: &'a TxConfig,
    pub link: &'a LinkConfig,
    pub truth: &'a GroundTruth,
    pub shaping: &'a ShapingReport,
    pub seed: u64,
}

/// Symbols dropped at each end of the block.
pub fn guard_symbols(tx: &TxConfig) -> usize {
    tx.rrc_span_symbols
}

/// Least-squares complex gain `g` minimizing `|r - g·s|²`.
fn ls_gain(received: &[Sample], sent: &[Sample]) -> Sample {
    let num: Sample = received.iter().zip(sent).map(|(r, s)| r * s.conj()).sum();
    let den: f64 = sent.iter().map(|s| s.norm_sqr()).sum();
    num / den
}

/// Takes the center sample of every symbol slot, drops the guard symbols,
/// removes the per-polarization complex gain and attaches the central
/// channel's transmitted bits as labels.
pub fn sample_symbols(w: &DualPolWaveform, ctx: &FrameContext<'_>) -> Result<SymbolFrame> {
    let tx = ctx.tx;
    let sps = tx.samples_per_symbol;
    if w.len() != tx.symbols_per_pol * sps {
        return Err(Error::Framing(format!(
            "waveform of {} samples does not hold {} symbols at {sps} samples each",
            w.len(),
            tx.symbols_per_pol
        )));
    }
    let guard = guard_symbols(tx);
    if 2 * guard >= tx.symbols_per_pol {
        return Err(Error::Framing("guard symbols consume the whole block".into()));
    }
    let central = ctx.truth.central();
    if central.symbols_x.len() != tx.symbols_per_pol {
        return Err(Error::Framing("ground truth length differs from the configured block".into()));
    }
    let range = guard..tx.symbols_per_pol - guard;
    let mut lanes = Vec::with_capacity(2);
    let mut rotation = [[1.0, 0.0]; 2];
    for (pol, (lane, sent)) in [(&w.x, &central.symbols_x), (&w.y, &central.symbols_y)].into_iter().enumerate() {
        let raw: Vec<Sample> = range.clone().map(|k| lane[k * sps]).collect();
        let g = ls_gain(&raw, &sent[range.clone()]);
        if !(g.norm() > 0.0) || !g.norm().is_finite() {
            return Err(Error::DegenerateInput(format!("polarization {pol} carries no signal")));
        }
        rotation[pol] = [g.re, g.im];
        lanes.push(raw.into_iter().map(|r| r / g).collect::<Vec<_>>());
    }
    let features = lanes[0].iter().zip(&lanes[1]).map(|(a, b)| [a.re, a.im, b.re, b.im]).collect();
    let m = tx.qam_order.trailing_zeros() as usize;
    let mut labels = Vec::with_capacity(range.len() * 2 * m);
    for k in range {
        labels.extend_from_slice(&central.bits_x[k * m..(k + 1) * m]);
        labels.extend_from_slice(&central.bits_y[k * m..(k + 1) * m]);
    }
    let meta = FrameMeta {
        qam_order: tx.qam_order,
        launch_power_dbm: tx.launch_power_total_dbm,
        seed: ctx.seed,
        tx: tx.clone(),
        link: ctx.link.clone(),
        guard_symbols: guard,
        shaping: ctx.shaping.clone(),
        ideal_rotation: rotation,
        normalization: None,
        config_hash: None,
    };
    SymbolFrame::new(features, labels, meta)
}

/// Standardizes every feature with statistics fitted on the first
/// `train_len` symbols; the statistics are stored in the frame metadata.
pub fn normalize_features(frame: &SymbolFrame, train_len: usize) -> Result<SymbolFrame> {
    if train_len == 0 || train_len > frame.len() {
        return Err(Error::Split(format!(
            "training split of {train_len} symbols for a frame of {}",
            frame.len()
        )));
    }
    let stats = FeatureStats::fit(&frame.features[..train_len])?;
    Ok(apply_feature_stats(frame, &stats))
}

pub fn apply_feature_stats(frame: &SymbolFrame, stats: &FeatureStats) -> SymbolFrame {
    let mut out = frame.clone();
    out.features = frame.features.iter().map(|f| stats.apply(f)).collect();
    out.meta.normalization = Some(stats.clone());
    out
}
