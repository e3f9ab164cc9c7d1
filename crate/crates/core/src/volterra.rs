//! Third-order (in general K-th order) Volterra equalizer with triangular
//! kernel index sets, one complex lane per polarization, trained with
//! normalized LMS against the transmitted symbols.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::frame::SymbolFrame;
use crate::signal::Sample;
use crate::tx::{qam_demodulate, Constellation};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"NQSV";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VolterraConfig {
    /// Memory length `L_k` of each order, all odd.
    pub lengths: Vec<usize>,
    pub mu: f64,
    pub eps: f64,
    pub epochs: usize,
    pub train_symbols: usize,
    pub test_symbols: usize,
}

impl Default for VolterraConfig {
    fn default() -> Self {
        Self {
            lengths: vec![151, 51, 11],
            mu: 0.05,
            eps: 1e-6,
            epochs: 300,
            train_symbols: 60_000,
            test_symbols: 60_000,
        }
    }
}

impl VolterraConfig {
    pub fn validate(&self) -> Result<()> {
        validate_lengths(&self.lengths)?;
        if !(self.mu > 0.0) || !(self.eps > 0.0) || self.epochs == 0 {
            return Err(Error::Config("mu, eps and epochs must be positive".into()));
        }
        Ok(())
    }
}

fn validate_lengths(lengths: &[usize]) -> Result<()> {
    if lengths.is_empty() {
        return Err(Error::Config("at least one Volterra order is required".into()));
    }
    if let Some(l) = lengths.iter().find(|l| **l % 2 == 0) {
        return Err(Error::Config(format!("Volterra memory length {l} must be odd")));
    }
    Ok(())
}

/// One monomial: window offsets (relative to the output symbol) of its factors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Term {
    pub offsets: Vec<isize>,
}

impl Term {
    pub fn order(&self) -> usize {
        self.offsets.len()
    }
}

/// Every nondecreasing index tuple `i1 ≤ … ≤ ik` in `[-k_k, k_k]` for each order.
pub fn index_sets(lengths: &[usize]) -> Vec<Term> {
    let mut terms = Vec::new();
    for (order, &len) in lengths.iter().enumerate() {
        let k = (len / 2) as isize;
        let mut idx = vec![-k; order + 1];
        loop {
            terms.push(Term { offsets: idx.clone() });
            // next nondecreasing tuple
            let mut p = order as isize;
            while p >= 0 && idx[p as usize] == k {
                p -= 1;
            }
            if p < 0 {
                break;
            }
            let v = idx[p as usize] + 1;
            for slot in &mut idx[p as usize..] {
                *slot = v;
            }
        }
    }
    terms
}

/// Closed-form term count of one order: `C(L + k - 1, k)`.
pub fn term_count(order: usize, length: usize) -> u128 {
    let mut c: u128 = 1;
    for i in 0..order as u128 {
        c = c * (length as u128 + i) / (i + 1);
    }
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolterraEqualizer {
    pub lengths: Vec<usize>,
    /// Weights of the X and Y lanes, in [`index_sets`] order.
    pub weights: [Vec<Sample>; 2],
    pub config: Option<VolterraConfig>,
    pub config_hash: Option<String>,
    terms: Vec<Term>,
}

impl VolterraEqualizer {
    pub fn zeros(lengths: &[usize]) -> Result<Self> {
        validate_lengths(lengths)?;
        let terms = index_sets(lengths);
        let n = terms.len();
        Ok(Self {
            lengths: lengths.to_vec(),
            weights: [vec![Sample::default(); n], vec![Sample::default(); n]],
            config: None,
            config_hash: None,
            terms,
        })
    }

    /// First-order center tap 1 on both lanes, everything else 0.
    pub fn identity(lengths: &[usize]) -> Result<Self> {
        let mut m = Self::zeros(lengths)?;
        let center = m.terms.iter().position(|t| t.offsets == [0]).expect("first order present");
        for lane in &mut m.weights {
            lane[center] = Sample::new(1.0, 0.0);
        }
        Ok(m)
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Largest one-sided memory `max k_j`.
    pub fn reach(&self) -> usize {
        self.lengths.iter().max().copied().unwrap_or(1) / 2
    }

    fn regressor(&self, x: &[Sample], n: usize, u: &mut [Sample]) {
        for (slot, t) in u.iter_mut().zip(&self.terms) {
            let mut p = Sample::new(1.0, 0.0);
            for &o in &t.offsets {
                p *= x[(n as isize + o) as usize];
            }
            *slot = p;
        }
    }

    /// Equalizes one lane. Output `i` belongs to input `i + reach()`;
    /// symbols without full support at either end are dropped.
    pub fn apply_lane(&self, lane: usize, x: &[Sample]) -> Result<Vec<Sample>> {
        let k = self.reach();
        if x.len() < 2 * k + 1 {
            return Err(Error::Support(format!("{} symbols cannot support a memory of {}", x.len(), 2 * k + 1)));
        }
        let w = &self.weights[lane];
        let mut u = vec![Sample::default(); w.len()];
        Ok((k..x.len() - k)
            .map(|n| {
                self.regressor(x, n, &mut u);
                u.iter().zip(w).map(|(a, b)| a * b).sum()
            })
            .collect())
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let header = serde_json::json!({
            "kind": "volterra",
            "lengths": self.lengths,
            "terms": self.terms.len(),
            "config": self.config,
            "config_hash": self.config_hash,
        });
        let mut payload = Vec::new();
        for lane in &self.weights {
            let flat: Vec<f64> = lane.iter().flat_map(|s| [s.re, s.im]).collect();
            container::put_f64s(&mut payload, &flat);
        }
        container::write(out, WEIGHTS_MAGIC, &header, &payload)
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let (header, payload) = container::read(input, WEIGHTS_MAGIC)?;
        if header["kind"] != "volterra" {
            return Err(Error::Format("weight file is not a Volterra equalizer".into()));
        }
        let lengths: Vec<usize> = serde_json::from_value(header["lengths"].clone())?;
        let config: Option<VolterraConfig> = serde_json::from_value(header["config"].clone())?;
        let mut m = Self::zeros(&lengths)?;
        let values = container::get_f64s(&payload)?;
        let n = m.terms.len();
        if values.len() != 4 * n {
            return Err(Error::Format(format!("{} values for two lanes of {n} complex weights", values.len())));
        }
        for (lane, chunk) in m.weights.iter_mut().zip(values.chunks_exact(2 * n)) {
            *lane = chunk.chunks_exact(2).map(|c| Sample::new(c[0], c[1])).collect();
        }
        m.config = config;
        m.config_hash = serde_json::from_value(header["config_hash"].clone()).unwrap_or(None);
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Per-epoch mean squared a-priori error of each lane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolterraHistory {
    pub mse: Vec<[f64; 2]>,
}

/// Adapts one lane in place: `received` and `reference` are aligned full
/// sequences; updates run over the positions in `range` that have full
/// support.
pub fn nlms_lane(
    model: &mut VolterraEqualizer,
    lane: usize,
    received: &[Sample],
    reference: &[Sample],
    range: Range<usize>,
    cfg: &VolterraConfig,
) -> Result<Vec<f64>> {
    let k = model.reach();
    let lo = range.start.max(k);
    let hi = range.end.min(received.len().saturating_sub(k));
    if lo >= hi {
        return Err(Error::Support("no training symbol has full Volterra support".into()));
    }
    let mut u = vec![Sample::default(); model.terms.len()];
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut initial = None;
    for epoch in 0..cfg.epochs {
        let mut sq = 0.0;
        for n in lo..hi {
            model.regressor(received, n, &mut u);
            let w = &mut model.weights[lane];
            let y: Sample = u.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
            let e = reference[n] - y;
            sq += e.norm_sqr();
            let norm: f64 = u.iter().map(|v| v.norm_sqr()).sum();
            let step = e * (cfg.mu / (cfg.eps + norm));
            for (wi, ui) in w.iter_mut().zip(&u) {
                *wi += step * ui.conj();
            }
        }
        let mse = sq / (hi - lo) as f64;
        let base = *initial.get_or_insert(mse);
        if !mse.is_finite() || mse > 1e3 * base.max(f64::MIN_POSITIVE) {
            return Err(Error::TrainingDivergence(format!(
                "Volterra MSE grew from {base:.3e} to {mse:.3e} by epoch {}; try a smaller mu",
                epoch + 1
            )));
        }
        history.push(mse);
    }
    Ok(history)
}

/// Trains both lanes on the first `train_symbols` of the frame (received
/// features on the constellation scale, transmitted symbols as reference).
pub fn volterra_train(frame: &SymbolFrame, cfg: &VolterraConfig) -> Result<(VolterraEqualizer, VolterraHistory)> {
    cfg.validate()?;
    if cfg.train_symbols > frame.len() {
        return Err(Error::Split(format!(
            "{} training symbols requested, frame has {}",
            cfg.train_symbols,
            frame.len()
        )));
    }
    let mut model = VolterraEqualizer::zeros(&cfg.lengths)?;
    let mut lanes = Vec::with_capacity(2);
    for pol in 0..2 {
        let rx = frame.received(pol);
        let tx = frame.transmitted(pol)?;
        lanes.push(nlms_lane(&mut model, pol, &rx, &tx, 0..cfg.train_symbols, cfg)?);
    }
    model.config = Some(cfg.clone());
    let mse = lanes[0].iter().zip(&lanes[1]).map(|(a, b)| [*a, *b]).collect();
    Ok((model, VolterraHistory { mse }))
}

/// Bit errors per polarization lane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolterraBer {
    pub errors: [u64; 2],
    pub total: [u64; 2],
}

impl VolterraBer {
    pub fn ber(&self) -> f64 {
        (self.errors[0] + self.errors[1]) as f64 / (self.total[0] + self.total[1]) as f64
    }

    pub fn lane_ber(&self, pol: usize) -> f64 {
        self.errors[pol] as f64 / self.total[pol] as f64
    }
}

/// Equalizes both lanes over `range` (symbols lacking full support are
/// skipped), demaps and counts errors against the labels.
pub fn volterra_ber(model: &VolterraEqualizer, frame: &SymbolFrame, range: Range<usize>) -> Result<VolterraBer> {
    let c: Constellation = frame.constellation()?;
    let k = model.reach();
    let lo = range.start.max(k);
    let hi = range.end.min(frame.len().saturating_sub(k));
    if lo >= hi {
        return Err(Error::Support("no evaluation symbol has full Volterra support".into()));
    }
    let m = frame.bits_per_pol();
    let mut out = VolterraBer {
        errors: [0; 2],
        total: [0; 2],
    };
    for pol in 0..2 {
        let rx = frame.received(pol);
        let eq = model.apply_lane(pol, &rx[lo - k..hi + k])?;
        let decided = qam_demodulate(&eq, &c);
        let truth = &frame.pol_labels(pol)[lo * m..hi * m];
        out.errors[pol] = decided.iter().zip(truth).filter(|(a, b)| a != b).count() as u64;
        out.total[pol] = truth.len() as u64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::tests::dummy_meta;
    use crate::frame::SymbolFrame;
    use crate::signal::RngStream;
    use crate::tx::{generate_bits, qam_modulate};

    fn random_lane(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = RngStream::new(seed, 3);
        (0..n).map(|_| rng.complex_gaussian(1.0)).collect()
    }

    #[test]
    fn term_counts_match_closed_form_and_enumeration() {
        let terms = index_sets(&[151, 51, 11]);
        let per = |k: usize| terms.iter().filter(|t| t.order() == k).count();
        assert_eq!((per(1), per(2), per(3)), (151, 1326, 286));
        for l in (1..=15).step_by(2) {
            for k in 1..=4 {
                let mut lens = vec![1; k];
                lens[k - 1] = l;
                let brute = brute_tuples(k, l);
                assert_eq!(index_sets(&lens).iter().filter(|t| t.order() == k).count(), brute);
                assert_eq!(term_count(k, l) as usize, brute);
            }
        }
    }

    fn brute_tuples(k: usize, l: usize) -> usize {
        let mut count = 0;
        let total = l.pow(k as u32);
        for code in 0..total {
            let digits: Vec<usize> = (0..k).map(|d| code / l.pow(d as u32) % l).collect();
            if digits.windows(2).all(|w| w[0] >= w[1]) {
                count += 1;
            }
        }
        count
    }

    #[test]
    fn even_length_and_short_input_rejected() {
        assert!(VolterraEqualizer::zeros(&[4, 3]).is_err());
        let m = VolterraEqualizer::zeros(&[5, 3, 3]).unwrap();
        assert!(matches!(m.apply_lane(0, &random_lane(4, 1)), Err(Error::Support(_))));
    }

    #[test]
    fn identity_and_zero_models() {
        let x = random_lane(40, 2);
        let id = VolterraEqualizer::identity(&[7, 5, 3]).unwrap();
        assert_eq!(id.apply_lane(0, &x).unwrap(), x[3..37].to_vec());
        let zero = VolterraEqualizer::zeros(&[7, 5, 3]).unwrap();
        assert!(zero.apply_lane(1, &x).unwrap().iter().all(|v| *v == Sample::default()));
    }

    #[test]
    fn matches_brute_force_sums() {
        let mut m = VolterraEqualizer::zeros(&[3, 3, 3]).unwrap();
        let mut rng = RngStream::new(5, 5);
        m.weights[0].iter_mut().for_each(|w| *w = rng.complex_gaussian(1.0));
        let w = m.weights[0].clone();
        let x = random_lane(12, 6);
        let got = m.apply_lane(0, &x).unwrap();
        // explicit weight lookup, no triangular bookkeeping
        let lookup = |offs: &[isize]| -> Sample {
            let pos = m.terms().iter().position(|t| t.offsets == offs).unwrap();
            w[pos]
        };
        for n in 1..11 {
            let mut y = Sample::default();
            for i1 in -1isize..=1 {
                y += lookup(&[i1]) * x[(n as isize + i1) as usize];
                for i2 in -1isize..=1 {
                    if i2 >= i1 {
                        y += lookup(&[i1, i2]) * x[(n as isize + i1) as usize] * x[(n as isize + i2) as usize];
                    }
                    for i3 in -1isize..=1 {
                        if i2 >= i1 && i3 >= i2 {
                            y +=
                                lookup(&[i1, i2, i3]) * x[(n as isize + i1) as usize] * x[(n as isize + i2) as usize] * x[(n as isize + i3) as usize];
                        }
                    }
                }
            }
            assert!((got[n - 1] - y).norm() < 1e-12);
        }
    }

    #[test]
    fn linear_in_weights_and_order_homogeneous() {
        let lens = [5, 3, 3];
        let mut rng = RngStream::new(7, 7);
        let mut a = VolterraEqualizer::zeros(&lens).unwrap();
        let mut b = a.clone();
        a.weights[0].iter_mut().for_each(|w| *w = rng.complex_gaussian(1.0));
        b.weights[0].iter_mut().for_each(|w| *w = rng.complex_gaussian(1.0));
        let mut sum = a.clone();
        for (s, w) in sum.weights[0].iter_mut().zip(&b.weights[0]) {
            *s = *s * 2.0 + w * 3.0;
        }
        let x = random_lane(20, 8);
        let (ya, yb, ys) = (a.apply_lane(0, &x).unwrap(), b.apply_lane(0, &x).unwrap(), sum.apply_lane(0, &x).unwrap());
        for i in 0..ys.len() {
            assert!((ys[i] - (ya[i] * 2.0 + yb[i] * 3.0)).norm() < 1e-12);
        }
        let s = 1.7;
        let xs: Vec<Sample> = x.iter().map(|v| v * s).collect();
        for order in 1..=3 {
            let mut only = a.clone();
            for (w, t) in only.weights[0].iter_mut().zip(a.terms()) {
                if t.order() != order {
                    *w = Sample::default();
                }
            }
            let (y1, y2) = (only.apply_lane(0, &x).unwrap(), only.apply_lane(0, &xs).unwrap());
            for i in 0..y1.len() {
                assert!((y2[i] - y1[i] * s.powi(order as i32)).norm() < 1e-11);
            }
        }
    }

    fn qam_lane(n: usize, seed: u64) -> Vec<Sample> {
        let c = Constellation::qam16();
        qam_modulate(&generate_bits(4 * n, &mut RngStream::new(seed, 1)).unwrap(), &c).unwrap()
    }

    fn cfg(lengths: Vec<usize>, epochs: usize) -> VolterraConfig {
        VolterraConfig {
            lengths,
            epochs,
            ..VolterraConfig::default()
        }
    }

    #[test]
    fn single_tap_gain_is_inverted() {
        let g = Sample::new(0.6, -0.45);
        let d = qam_lane(4000, 1);
        let r: Vec<Sample> = d.iter().map(|v| v * g).collect();
        let mut m = VolterraEqualizer::zeros(&[1]).unwrap();
        let hist = nlms_lane(&mut m, 0, &r, &d, 0..4000, &cfg(vec![1], 5)).unwrap();
        assert!((m.weights[0][0] - 1.0 / g).norm() < 1e-6);
        assert!(*hist.last().unwrap() < 1e-6);
    }

    #[test]
    fn identity_channel_learns_identity() {
        let d = qam_lane(3000, 2);
        let mut m = VolterraEqualizer::zeros(&[5, 3, 3]).unwrap();
        nlms_lane(&mut m, 0, &d, &d, 0..3000, &cfg(vec![5, 3, 3], 20)).unwrap();
        for (w, t) in m.weights[0].iter().zip(m.terms()) {
            let target = if t.offsets == [0] { 1.0 } else { 0.0 };
            assert!((w - target).norm() < 1e-3, "{:?} {w}", t.offsets);
        }
    }

    #[test]
    fn cubic_channel_inverse_weight() {
        let c = 0.01;
        let d = qam_lane(6000, 3);
        let r: Vec<Sample> = d.iter().map(|x| x + x * x * x * c).collect();
        let mut m = VolterraEqualizer::zeros(&[3, 3, 3]).unwrap();
        nlms_lane(&mut m, 0, &r, &d, 0..6000, &cfg(vec![3, 3, 3], 40)).unwrap();
        let pos = m.terms().iter().position(|t| t.offsets == [0, 0, 0]).unwrap();
        assert!((m.weights[0][pos] + c).norm() < 1e-3, "{}", m.weights[0][pos]);
    }

    #[test]
    fn divergence_detected() {
        let d = qam_lane(500, 4);
        let mut m = VolterraEqualizer::zeros(&[3]).unwrap();
        let bad = VolterraConfig { mu: 2.5, ..cfg(vec![3], 50) };
        let r: Vec<Sample> = d.iter().map(|v| v * 3.0).collect();
        assert!(matches!(nlms_lane(&mut m, 0, &r, &d, 0..500, &bad), Err(Error::TrainingDivergence(_))));
    }

    fn clean_frame(n: usize) -> SymbolFrame {
        let c = Constellation::qam16();
        let bx = generate_bits(4 * n, &mut RngStream::new(9, 1)).unwrap();
        let by = generate_bits(4 * n, &mut RngStream::new(9, 2)).unwrap();
        let sx = qam_modulate(&bx, &c).unwrap();
        let sy = qam_modulate(&by, &c).unwrap();
        let features = sx.iter().zip(&sy).map(|(a, b)| [a.re, a.im, b.re, b.im]).collect();
        let labels = (0..n)
            .flat_map(|i| bx[4 * i..4 * i + 4].iter().chain(&by[4 * i..4 * i + 4]).copied())
            .collect();
        SymbolFrame::new(features, labels, dummy_meta(16)).unwrap()
    }

    #[test]
    fn ber_of_identity_and_zero_models() {
        let frame = clean_frame(12_000);
        let id = VolterraEqualizer::identity(&[7, 5, 3]).unwrap();
        assert_eq!(volterra_ber(&id, &frame, 0..12_000).unwrap().errors, [0, 0]);
        let zero = VolterraEqualizer::zeros(&[7, 5, 3]).unwrap();
        let b = volterra_ber(&zero, &frame, 0..12_000).unwrap();
        assert!((b.ber() - 0.5).abs() < 0.02, "{}", b.ber());
    }

    #[test]
    fn training_does_not_worsen_mse() {
        let n = 4000;
        let c = 0.03;
        let mut frame = clean_frame(n);
        for f in &mut frame.features {
            for pol in 0..2 {
                let x = Sample::new(f[2 * pol], f[2 * pol + 1]);
                let r = x + x * x * x * c + Sample::new(0.02, -0.01);
                f[2 * pol] = r.re;
                f[2 * pol + 1] = r.im;
            }
        }
        let (model, hist) = volterra_train(
            &frame,
            &VolterraConfig {
                train_symbols: n,
                ..cfg(vec![3, 3, 3], 5)
            },
        )
        .unwrap();
        assert_eq!(hist.mse.len(), 5);
        for pol in 0..2 {
            let rx = frame.received(pol);
            let tx = frame.transmitted(pol).unwrap();
            let eq = model.apply_lane(pol, &rx).unwrap();
            let after: f64 = eq.iter().zip(&tx[1..n - 1]).map(|(a, b)| (a - b).norm_sqr()).sum();
            let before: f64 = rx[1..n - 1].iter().zip(&tx[1..n - 1]).map(|(a, b)| (a - b).norm_sqr()).sum();
            assert!(after < before);
        }
    }

    #[test]
    fn weight_file_round_trip() {
        let mut m = VolterraEqualizer::zeros(&[5, 3, 1]).unwrap();
        let mut rng = RngStream::new(1, 1);
        m.weights[1].iter_mut().for_each(|w| *w = rng.complex_gaussian(1.0));
        m.config = Some(VolterraConfig::default());
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(VolterraEqualizer::read_from(&buf[..]).unwrap(), m);
    }
}
