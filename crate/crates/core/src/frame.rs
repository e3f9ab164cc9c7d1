//! Received symbol frames: four real features per symbol (Ix, Qx, Iy, Qy)
//! with the transmitted bits of both polarizations as labels.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::fiber::LinkConfig;
use crate::signal::Sample;
use crate::tx::{qam_demodulate, qam_modulate, Constellation, ShapingReport, TxConfig};

pub const FRAME_MAGIC: &[u8; 4] = b"NQSF";
pub const FEATURES: usize = 4;

pub type Features = [f64; FEATURES];

/// Per-feature standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Features,
    pub std: Features,
}

impl FeatureStats {
    pub fn fit(features: &[Features]) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::DegenerateInput("no symbols to fit normalization on".into()));
        }
        let n = features.len() as f64;
        let mut mean = [0.0; FEATURES];
        for f in features {
            for k in 0..FEATURES {
                mean[k] += f[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; FEATURES];
        for f in features {
            for k in 0..FEATURES {
                var[k] += (f[k] - mean[k]).powi(2);
            }
        }
        let mut std = [0.0; FEATURES];
        for k in 0..FEATURES {
            let v = var[k] / n;
            if !(v > f64::EPSILON * f64::EPSILON * (1.0 + mean[k] * mean[k])) {
                return Err(Error::DegenerateInput(format!("feature {k} has zero variance")));
            }
            std[k] = v.sqrt();
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, f: &Features) -> Features {
        let mut out = [0.0; FEATURES];
        for k in 0..FEATURES {
            out[k] = (f[k] - self.mean[k]) / self.std[k];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub qam_order: usize,
    pub launch_power_dbm: f64,
    pub seed: u64,
    pub tx: TxConfig,
    pub link: LinkConfig,
    /// Symbols dropped at each end of the transmitted block.
    pub guard_symbols: usize,
    pub shaping: ShapingReport,
    /// Data-aided complex gain removed per polarization, `[re, im]`.
    pub ideal_rotation: [[f64; 2]; 2],
    #[serde(default)]
    pub normalization: Option<FeatureStats>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SymbolFrame {
    pub features: Vec<Features>,
    /// Row-major, `label_width()` bits per symbol: X bits then Y bits.
    pub labels: Vec<u8>,
    pub meta: FrameMeta,
}

impl SymbolFrame {
    pub fn new(features: Vec<Features>, labels: Vec<u8>, meta: FrameMeta) -> Result<Self> {
        let frame = Self { features, labels, meta };
        frame.check()?;
        Ok(frame)
    }

    fn check(&self) -> Result<()> {
        if self.labels.len() != self.features.len() * self.label_width() {
            return Err(Error::Framing(format!(
                "{} label bits for {} symbols of width {}",
                self.labels.len(),
                self.features.len(),
                self.label_width()
            )));
        }
        if self.features.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Framing("non-finite feature value".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn bits_per_pol(&self) -> usize {
        self.meta.qam_order.trailing_zeros() as usize
    }

    pub fn label_width(&self) -> usize {
        2 * self.bits_per_pol()
    }

    pub fn constellation(&self) -> Result<Constellation> {
        Constellation::new(self.meta.qam_order)
    }

    /// Label bits of symbol `i` for polarization `pol` (0 = X, 1 = Y).
    pub fn pol_bits(&self, i: usize, pol: usize) -> &[u8] {
        let m = self.bits_per_pol();
        let row = i * 2 * m + pol * m;
        &self.labels[row..row + m]
    }

    /// All label bits of one polarization, symbol-major.
    pub fn pol_labels(&self, pol: usize) -> Vec<u8> {
        (0..self.len()).flat_map(|i| self.pol_bits(i, pol).iter().copied()).collect()
    }

    /// Received complex symbols of one polarization.
    pub fn received(&self, pol: usize) -> Vec<Sample> {
        self.features.iter().map(|f| Sample::new(f[2 * pol], f[2 * pol + 1])).collect()
    }

    /// Transmitted symbols of one polarization, re-mapped from the labels.
    pub fn transmitted(&self, pol: usize) -> Result<Vec<Sample>> {
        qam_modulate(&self.pol_labels(pol), &self.constellation()?)
    }

    /// Contiguous sub-frame `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<SymbolFrame> {
        if start > end || end > self.len() {
            return Err(Error::Split(format!("range {start}..{end} outside frame of {}", self.len())));
        }
        let w = self.label_width();
        Ok(SymbolFrame {
            features: self.features[start..end].to_vec(),
            labels: self.labels[start * w..end * w].to_vec(),
            meta: self.meta.clone(),
        })
    }

    /// Hard-decision bit errors of the received symbols of one polarization
    /// (the linear-equalization-only reference). Requires unnormalized
    /// features on the constellation scale.
    pub fn pol_decision_errors(&self, pol: usize) -> Result<(u64, u64)> {
        let c = self.constellation()?;
        let decided = qam_demodulate(&self.received(pol), &c);
        let truth = self.pol_labels(pol);
        let errors = decided.iter().zip(&truth).filter(|(a, b)| a != b).count() as u64;
        Ok((errors, truth.len() as u64))
    }

    /// Same as [`Self::pol_decision_errors`], pooled over both polarizations.
    pub fn direct_decision_errors(&self) -> Result<(u64, u64)> {
        let (ex, nx) = self.pol_decision_errors(0)?;
        let (ey, ny) = self.pol_decision_errors(1)?;
        Ok((ex + ey, nx + ny))
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let header = serde_json::json!({
            "kind": "symbol_frame",
            "symbols": self.len(),
            "label_width": self.label_width(),
            "meta": self.meta,
        });
        let mut payload = Vec::with_capacity(self.len() * 32 + self.labels.len() / 8 + 1);
        for f in &self.features {
            container::put_f64s(&mut payload, f);
        }
        payload.extend(container::pack_bits(&self.labels));
        container::write(out, FRAME_MAGIC, &header, &payload)
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let (header, payload) = container::read(input, FRAME_MAGIC)?;
        let n = header["symbols"]
            .as_u64()
            .ok_or_else(|| Error::Format("frame header lacks 'symbols'".into()))? as usize;
        let width = header["label_width"]
            .as_u64()
            .ok_or_else(|| Error::Format("frame header lacks 'label_width'".into()))? as usize;
        let meta: FrameMeta = serde_json::from_value(header["meta"].clone())?;
        let feat_bytes = n * FEATURES * 8;
        if payload.len() < feat_bytes {
            return Err(Error::Format("payload shorter than the feature block".into()));
        }
        let values = container::get_f64s(&payload[..feat_bytes])?;
        let features = values.chunks_exact(FEATURES).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        let labels = container::unpack_bits(&payload[feat_bytes..], n * width)?;
        let frame = SymbolFrame { features, labels, meta };
        if frame.label_width() != width {
            return Err(Error::Format("label width disagrees with the QAM order".into()));
        }
        frame.check()?;
        Ok(frame)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub fn dummy_meta(order: usize) -> FrameMeta {
        FrameMeta {
            qam_order: order,
            launch_power_dbm: 0.0,
            seed: 0,
            tx: TxConfig::default(),
            link: LinkConfig::default(),
            guard_symbols: 0,
            shaping: ShapingReport::default(),
            ideal_rotation: [[1.0, 0.0], [1.0, 0.0]],
            normalization: None,
            config_hash: None,
        }
    }

    #[test]
    fn label_shape_checked() {
        assert!(matches!(
            SymbolFrame::new(vec![[0.0; 4]; 2], vec![0; 15], dummy_meta(16)),
            Err(Error::Framing(_))
        ));
        assert!(SymbolFrame::new(vec![[f64::NAN, 0.0, 0.0, 0.0]], vec![0; 8], dummy_meta(16)).is_err());
    }

    #[test]
    fn stats_reject_constant_feature() {
        let f = vec![[1.0, 2.0, 3.0, 4.0], [2.0, 2.0, 1.0, 0.0]];
        assert!(matches!(FeatureStats::fit(&f), Err(Error::DegenerateInput(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn container_round_trip_is_bit_exact(
            raw in prop::collection::vec(prop::array::uniform4(any::<f64>().prop_filter("finite", |v| v.is_finite())), 1..40),
            seed in any::<u64>(),
            order in prop::sample::select(vec![16usize, 32]),
            power in -20.0f64..20.0,
        ) {
            let width = 2 * order.trailing_zeros() as usize;
            let labels: Vec<u8> = (0..raw.len() * width).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
            let mut meta = dummy_meta(order);
            meta.seed = seed;
            meta.launch_power_dbm = power;
            meta.normalization = Some(FeatureStats { mean: [power, 0.1, -0.3, 1e-300], std: [1.0, 2.5, 1.0 / 3.0, 7.0] });
            let frame = SymbolFrame::new(raw, labels, meta).unwrap();
            let mut buf = Vec::new();
            frame.write_to(&mut buf).unwrap();
            let back = SymbolFrame::read_from(&buf[..]).unwrap();
            prop_assert_eq!(&back, &frame);
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            prop_assert_eq!(again, buf);
        }
    }
}
