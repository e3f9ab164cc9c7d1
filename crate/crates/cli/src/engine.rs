//! Per-point work: dataset caching, training, evaluation.

use std::fs;
use std::path::{Path, PathBuf};

use neqsim::chain::simulate_frame;
use neqsim::fiber::LinkConfig;
use neqsim::frame::SymbolFrame;
use neqsim::rnn::{self, BerReport, RnnEqualizer, SequenceData, Split, TrainReport};
use neqsim::rx::{apply_feature_stats, normalize_features};
use neqsim::tx::TxConfig;
use neqsim::volterra::{volterra_ber, volterra_train, VolterraEqualizer, VolterraHistory};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{dataset_key, EqualizerKind, ExperimentConfig, Point};
use crate::error::CliError;

/// One trained or evaluated equalizer instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Model {
    pub kind: EqualizerKind,
    pub hidden: Option<usize>,
}

impl Model {
    pub fn label(&self) -> String {
        match self.hidden {
            Some(h) => format!("{}-h{h}", self.kind.label()),
            None => self.kind.label().to_string(),
        }
    }

    fn extension(&self) -> &'static str {
        if self.kind == EqualizerKind::Volterra {
            "nqsv"
        } else {
            "nqsr"
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub beta2: f64,
    pub power_dbm: f64,
    pub equalizer: String,
    pub hidden: Option<usize>,
    pub seed: u64,
    pub errors: u64,
    pub bits: u64,
    pub ber: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub beta2: f64,
    pub power_dbm: f64,
    pub seed: u64,
    pub dataset: String,
    pub symbols: usize,
    pub fde_errors: u64,
    pub fde_bits: u64,
    pub fde_ber: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub beta2: f64,
    pub power_dbm: f64,
    pub equalizer: String,
    pub hidden: Option<usize>,
    pub position: usize,
    pub errors: u64,
    pub bits: u64,
    pub ber: f64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum CachedHistory {
    Rnn(TrainReport),
    Volterra(VolterraHistory),
}

pub struct Engine<'a> {
    pub cfg: &'a ExperimentConfig,
    pub hash: String,
    pub force: bool,
}

fn io_context(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Writes through a temporary file so readers never see partial output.
pub fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<(), CliError>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_context(dir, e))?;
    }
    let tmp = path.with_extension(format!("{}.tmp", path.extension().and_then(|e| e.to_str()).unwrap_or("")));
    write(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| io_context(path, e))
}

impl<'a> Engine<'a> {
    pub fn new(cfg: &'a ExperimentConfig, force: bool) -> Self {
        Self {
            cfg,
            hash: cfg.hash(),
            force,
        }
    }

    pub fn models(&self) -> Vec<Model> {
        let mut out = Vec::new();
        for &kind in &self.cfg.equalizers {
            if kind.cell().is_some() {
                out.extend(self.cfg.rnn.hidden.iter().map(|&h| Model { kind, hidden: Some(h) }));
            } else {
                out.push(Model { kind, hidden: None });
            }
        }
        out
    }

    pub fn trainable(&self) -> Vec<Model> {
        self.models().into_iter().filter(|m| m.kind != EqualizerKind::Fde).collect()
    }

    fn link_tx(&self, point: &Point) -> (TxConfig, LinkConfig) {
        let tx = TxConfig {
            launch_power_total_dbm: point.power_dbm,
            ..self.cfg.tx.clone()
        };
        let link = LinkConfig {
            beta2: point.beta2,
            ..self.cfg.link.clone()
        };
        (tx, link)
    }

    pub fn frame_path(&self, point: &Point) -> PathBuf {
        let (tx, link) = self.link_tx(point);
        self.cfg
            .cache_dir()
            .join("frames")
            .join(format!("{}.nqsf", dataset_key(&tx, &link, point.seed)))
    }

    /// Loads the cached frame of `point` or simulates and caches it.
    pub fn frame(&self, point: &Point) -> Result<SymbolFrame, CliError> {
        let path = self.frame_path(point);
        if path.exists() && !self.force {
            return Ok(SymbolFrame::load(&path)?);
        }
        let (tx, link) = self.link_tx(point);
        eprintln!("[{}] simulating link", point.tag());
        let mut frame = simulate_frame(&tx, &link, point.seed)?;
        frame.meta.config_hash = Some(dataset_key(&tx, &link, point.seed));
        write_atomic(&path, |tmp| Ok(frame.save(tmp)?))?;
        Ok(frame)
    }

    pub fn dataset_row(&self, point: &Point, frame: &SymbolFrame) -> Result<DatasetRow, CliError> {
        let (errors, bits) = frame.pol_decision_errors(0)?;
        Ok(DatasetRow {
            beta2: point.beta2,
            power_dbm: point.power_dbm,
            seed: point.seed,
            dataset: frame.meta.config_hash.clone().unwrap_or_default(),
            symbols: frame.len(),
            fde_errors: errors,
            fde_bits: bits,
            fde_ber: errors as f64 / bits as f64,
            config_hash: self.hash.clone(),
        })
    }

    fn split(&self, frame: &SymbolFrame) -> Result<Split, CliError> {
        self.cfg.train_config().split(frame.len()).map_err(|e| {
            CliError::Config(format!(
                "split: {e} (dataset/config mismatch; reduce split sizes or raise tx.symbols_per_pol)"
            ))
        })
    }

    fn check_compatible(&self, frame: &SymbolFrame) -> Result<(), CliError> {
        let t = &frame.meta.tx;
        if t.symbol_rate != self.cfg.tx.symbol_rate || t.qam_order != self.cfg.tx.qam_order {
            return Err(CliError::Config(format!(
                "dataset is {} GBaud {}-QAM but the config asks for {} GBaud {}-QAM",
                t.symbol_rate / 1e9,
                t.qam_order,
                self.cfg.tx.symbol_rate / 1e9,
                self.cfg.tx.qam_order
            )));
        }
        Ok(())
    }

    fn model_key(&self, model: &Model, frame: &SymbolFrame, point: &Point) -> String {
        let settings = match model.kind.cell() {
            Some(kind) => serde_json::json!({
                "shape": self.cfg.shape(kind, model.hidden.unwrap_or_default()),
                "train": self.cfg.train_config(),
            }),
            None => serde_json::json!({ "volterra": self.cfg.volterra_config() }),
        };
        let value = serde_json::json!({
            "dataset": frame.meta.config_hash,
            "model": model.label(),
            "seed": point.seed,
            "settings": settings,
        });
        hex::encode(Sha256::digest(serde_json::to_vec(&value).expect("value serializes")))
    }

    pub fn weights_path(&self, model: &Model, point: &Point) -> PathBuf {
        self.cfg
            .output_dir
            .join("weights")
            .join(format!("{}_{}.{}", model.label(), point.tag(), model.extension()))
    }

    pub fn history_path(&self, model: &Model, point: &Point) -> PathBuf {
        self.cfg.output_dir.join("history").join(format!("{}_{}.csv", model.label(), point.tag()))
    }

    /// Trains `model` on the frame of `point` (reusing the model cache),
    /// writes weights and history, and returns the epochs run.
    pub fn train(&self, model: &Model, point: &Point, frame: &SymbolFrame) -> Result<usize, CliError> {
        self.check_compatible(frame)?;
        let split = self.split(frame)?;
        let key = self.model_key(model, frame, point);
        let cache = self.cfg.cache_dir().join("models");
        let cached_weights = cache.join(format!("{key}.{}", model.extension()));
        let cached_history = cache.join(format!("{key}.json"));
        let reuse = !self.force && cached_weights.exists() && cached_history.exists();
        let history: CachedHistory = if reuse {
            serde_json::from_slice(&fs::read(&cached_history).map_err(|e| io_context(&cached_history, e))?)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", cached_history.display())))?
        } else {
            eprintln!("[{}] training {}", point.tag(), model.label());
            let history = match model.kind.cell() {
                Some(kind) => {
                    let shape = self.cfg.shape(kind, model.hidden.unwrap_or_default());
                    let normalized = normalize_features(frame, split.train.end)?;
                    let data = SequenceData::from_frame(&normalized);
                    let mut net = RnnEqualizer::init(shape, point.seed)?;
                    let report = rnn::train(&mut net, &data, &split, &self.cfg.train_config(), point.seed)?;
                    net.meta.normalization = normalized.meta.normalization.clone();
                    write_atomic(&cached_weights, |tmp| Ok(net.save(tmp)?))?;
                    CachedHistory::Rnn(report)
                }
                None => {
                    let (eq, history) = volterra_train(frame, &self.cfg.volterra_config())?;
                    write_atomic(&cached_weights, |tmp| Ok(eq.save(tmp)?))?;
                    CachedHistory::Volterra(history)
                }
            };
            let bytes = serde_json::to_vec(&history).map_err(|e| CliError::Runtime(e.to_string()))?;
            write_atomic(&cached_history, |tmp| fs::write(tmp, &bytes).map_err(|e| io_context(tmp, e)))?;
            history
        };

        let out = self.weights_path(model, point);
        match model.kind.cell() {
            Some(_) => {
                let mut net = RnnEqualizer::load(&cached_weights)?;
                net.meta.config_hash = Some(self.hash.clone());
                write_atomic(&out, |tmp| Ok(net.save(tmp)?))?;
            }
            None => {
                let mut eq = VolterraEqualizer::load(&cached_weights)?;
                eq.config_hash = Some(self.hash.clone());
                write_atomic(&out, |tmp| Ok(eq.save(tmp)?))?;
            }
        }
        let rows: Vec<HistoryRow> = match &history {
            CachedHistory::Rnn(r) => r
                .history
                .iter()
                .map(|h| HistoryRow {
                    epoch: h.epoch,
                    train_loss: h.train_loss,
                    val_loss: h.val_loss,
                    config_hash: self.hash.clone(),
                })
                .collect(),
            // NLMS has no validation pass: both columns hold the per-epoch MSE of the X and Y lanes.
            CachedHistory::Volterra(v) => v
                .mse
                .iter()
                .enumerate()
                .map(|(i, m)| HistoryRow {
                    epoch: i + 1,
                    train_loss: m[0],
                    val_loss: m[1],
                    config_hash: self.hash.clone(),
                })
                .collect(),
        };
        let epochs = rows.len();
        write_csv(&self.history_path(model, point), &rows)?;
        Ok(epochs)
    }

    fn load_rnn(&self, model: &Model, point: &Point) -> Result<RnnEqualizer, CliError> {
        let path = self.weights_path(model, point);
        if !path.exists() {
            return Err(CliError::Runtime(format!("{} not found; run `train` first", path.display())));
        }
        let net = RnnEqualizer::load(&path)?;
        let kind = model.kind.cell().expect("recurrent model");
        if net.shape != self.cfg.shape(kind, model.hidden.unwrap_or_default()) {
            return Err(CliError::Config(format!("{} does not match the configured model shape", path.display())));
        }
        Ok(net)
    }

    fn rnn_data(&self, net: &RnnEqualizer, frame: &SymbolFrame) -> Result<SequenceData, CliError> {
        let stats = net
            .meta
            .normalization
            .as_ref()
            .ok_or_else(|| CliError::Runtime("weight file carries no feature normalization".into()))?;
        Ok(SequenceData::from_frame(&apply_feature_stats(frame, stats)))
    }

    /// X-polarization test-range errors of one model.
    pub fn evaluate(&self, model: &Model, point: &Point, frame: &SymbolFrame) -> Result<ResultRow, CliError> {
        self.check_compatible(frame)?;
        let split = self.split(frame)?;
        let (errors, bits) = match model.kind {
            EqualizerKind::Fde => frame.slice(split.test.start, split.test.end)?.pol_decision_errors(0)?,
            EqualizerKind::Volterra => {
                let path = self.weights_path(model, point);
                if !path.exists() {
                    return Err(CliError::Runtime(format!("{} not found; run `train` first", path.display())));
                }
                let eq = VolterraEqualizer::load(&path)?;
                let ber = volterra_ber(&eq, frame, split.test.clone())?;
                (ber.errors[0], ber.total[0])
            }
            _ => {
                let net = self.load_rnn(model, point)?;
                let report = rnn::infer_ber(&net, &self.rnn_data(&net, frame)?, split.test.clone())?;
                (report.errors, report.total)
            }
        };
        Ok(ResultRow {
            beta2: point.beta2,
            power_dbm: point.power_dbm,
            equalizer: model.kind.label().into(),
            hidden: model.hidden,
            seed: point.seed,
            errors,
            bits,
            ber: errors as f64 / bits as f64,
            config_hash: self.hash.clone(),
        })
    }

    /// Per-window-position error counts on the test range, one window per symbol.
    pub fn per_position(&self, model: &Model, point: &Point, frame: &SymbolFrame) -> Result<BerReport, CliError> {
        let split = self.split(frame)?;
        let net = self.load_rnn(model, point)?;
        Ok(rnn::sliding_position_ber(&net, &self.rnn_data(&net, frame)?, split.test)?)
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    write_atomic(path, |tmp| {
        let mut w = csv::Writer::from_path(tmp)?;
        for row in rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| io_context(tmp, e))
    })
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<T>, _>>()?)
}
