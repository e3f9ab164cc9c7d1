use std::path::{Path, PathBuf};

use neqsim::fiber::LinkConfig;
use neqsim::rnn::{CellKind, RnnShape, TrainConfig};
use neqsim::tx::TxConfig;
use neqsim::volterra::VolterraConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EqualizerKind {
    Fde,
    Lstm,
    Gru,
    Vanilla,
    Volterra,
}

impl EqualizerKind {
    pub fn cell(self) -> Option<CellKind> {
        match self {
            Self::Lstm => Some(CellKind::Lstm),
            Self::Gru => Some(CellKind::Gru),
            Self::Vanilla => Some(CellKind::Vanilla),
            Self::Fde | Self::Volterra => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Fde => "fde",
            Self::Lstm => "bi-lstm",
            Self::Gru => "bi-gru",
            Self::Vanilla => "bi-vanilla",
            Self::Volterra => "volterra",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Total launch powers, dBm.
    pub powers_dbm: Vec<f64>,
    /// Dispersion values, ps²/km; defaults to `link.beta2`.
    #[serde(default)]
    pub beta2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RnnSettings {
    /// One model per hidden size.
    pub hidden: Vec<usize>,
    pub window: usize,
    pub span: usize,
}

impl Default for RnnSettings {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            window: 151,
            span: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    /// Windows per mini-batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            learning_rate: t.learning_rate,
        }
    }
}

/// Consecutive train / validation / test symbol counts shared by every
/// equalizer. The Volterra filter trains on train + validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSettings {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            train: 40_000,
            val: 20_000,
            test: 60_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VolterraSettings {
    pub lengths: Vec<usize>,
    pub mu: f64,
    pub eps: f64,
    pub epochs: usize,
}

impl Default for VolterraSettings {
    fn default() -> Self {
        let v = VolterraConfig::default();
        Self {
            lengths: v.lengths,
            mu: v.mu,
            eps: v.eps,
            epochs: v.epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerPositionSettings {
    pub thresholds: Vec<f64>,
}

impl Default for PerPositionSettings {
    fn default() -> Self {
        Self {
            thresholds: vec![1e-3, crate::plot::FEC_LIMIT],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Frame and model cache; defaults to `<output_dir>/cache`. Relative
    /// paths resolve against the config file's directory.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub tx: TxConfig,
    #[serde(default)]
    pub link: LinkConfig,
    pub sweep: SweepConfig,
    pub equalizers: Vec<EqualizerKind>,
    #[serde(default)]
    pub rnn: RnnSettings,
    #[serde(default)]
    pub train: TrainSettings,
    #[serde(default)]
    pub split: SplitSettings,
    #[serde(default)]
    pub volterra: VolterraSettings,
    #[serde(default)]
    pub per_position: PerPositionSettings,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// One simulated dataset of a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub beta2: f64,
    pub power_dbm: f64,
    pub seed: u64,
}

impl Point {
    pub fn tag(&self) -> String {
        format!("b{}_p{}_s{}", self.beta2, self.power_dbm, self.seed)
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.cache_dir = cfg.cache_dir.map(|d| base.join(d));
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().to_string();
            match inner.span() {
                Some(span) => {
                    let line = text[..span.start].matches('\n').count() + 1;
                    config_error(format!("{path} (line {line}): {msg}"))
                }
                None => config_error(format!("{path}: {msg}")),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(config_error("seeds: at least one seed is required"));
        }
        if self.sweep.powers_dbm.is_empty() || self.sweep.powers_dbm.iter().any(|p| !p.is_finite()) {
            return Err(config_error("sweep.powers_dbm: at least one finite power is required"));
        }
        if self.sweep.beta2.iter().any(|b| !b.is_finite()) {
            return Err(config_error("sweep.beta2: values must be finite"));
        }
        if self.equalizers.is_empty() {
            return Err(config_error("equalizers: select at least one equalizer"));
        }
        self.tx.validate().map_err(|e| config_error(e.to_string()))?;
        for beta2 in self.beta2_values() {
            LinkConfig { beta2, ..self.link.clone() }
                .validate()
                .map_err(|e| config_error(e.to_string()))?;
        }
        if self.split.train == 0 || self.split.test == 0 {
            return Err(config_error("split.train and split.test must be positive"));
        }
        if self.has_rnn() {
            if self.rnn.hidden.is_empty() {
                return Err(config_error("rnn.hidden: at least one hidden size is required"));
            }
            for &h in &self.rnn.hidden {
                self.shape(CellKind::Vanilla, h)
                    .validate()
                    .map_err(|e| config_error(format!("rnn: {e}")))?;
            }
            self.train_config().validate().map_err(|e| config_error(format!("train: {e}")))?;
        }
        if self.equalizers.contains(&EqualizerKind::Volterra) {
            self.volterra_config().validate().map_err(|e| config_error(format!("volterra: {e}")))?;
        }
        if self.per_position.thresholds.iter().any(|t| !(*t > 0.0)) {
            return Err(config_error("per_position.thresholds must be positive"));
        }
        Ok(())
    }

    pub fn has_rnn(&self) -> bool {
        self.equalizers.iter().any(|e| e.cell().is_some())
    }

    pub fn beta2_values(&self) -> Vec<f64> {
        if self.sweep.beta2.is_empty() {
            vec![self.link.beta2]
        } else {
            self.sweep.beta2.clone()
        }
    }

    pub fn points(&self) -> Vec<Point> {
        let mut out = Vec::new();
        for &beta2 in &self.beta2_values() {
            for &power_dbm in &self.sweep.powers_dbm {
                for &seed in &self.seeds {
                    out.push(Point { beta2, power_dbm, seed });
                }
            }
        }
        out
    }

    pub fn shape(&self, kind: CellKind, hidden: usize) -> RnnShape {
        let bits = (self.tx.qam_order as f64).log2().round() as usize;
        RnnShape {
            kind,
            hidden,
            features: 4,
            window: self.rnn.window,
            bits,
            span: self.rnn.span,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            train_symbols: self.split.train,
            val_symbols: self.split.val,
            test_symbols: self.split.test,
            learning_rate: self.train.learning_rate,
        }
    }

    pub fn volterra_config(&self) -> VolterraConfig {
        VolterraConfig {
            lengths: self.volterra.lengths.clone(),
            mu: self.volterra.mu,
            eps: self.volterra.eps,
            epochs: self.volterra.epochs,
            train_symbols: self.split.train + self.split.val,
            test_symbols: self.split.test,
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    /// SHA-256 of the canonical JSON form, ignoring where artifacts are written.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("output_dir");
            map.remove("cache_dir");
        }
        hex::encode(Sha256::digest(serde_json::to_vec(&value).expect("value serializes")))
    }
}

/// Content address of a simulated frame.
pub fn dataset_key(tx: &TxConfig, link: &LinkConfig, seed: u64) -> String {
    let value = serde_json::json!({ "tx": tx, "link": link, "seed": seed });
    hex::encode(Sha256::digest(serde_json::to_vec(&value).expect("value serializes")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "t"
equalizers = ["fde"]
[sweep]
powers_dbm = [0.0]
"#;

    #[test]
    fn minimal_config_takes_table_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.tx, TxConfig::default());
        assert_eq!(cfg.link, LinkConfig::default());
        assert_eq!(cfg.points().len(), 1);
        assert_eq!(cfg.beta2_values(), vec![-21.0]);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let text = format!("{MINIMAL}[link]\nbeta_2 = -4.0\n");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("link") && err.contains("beta_2"), "{err}");
        let text = format!("{MINIMAL}[rnn]\nwindow = \"long\"\n");
        let err = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("rnn.window"), "{err}");
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        let text = MINIMAL.replace("[\"fde\"]", "[\"vanilla\"]") + "[rnn]\nwindow = 150\n";
        assert!(matches!(ExperimentConfig::parse(&text), Err(CliError::Config(_))));
        let text = format!("{MINIMAL}[tx]\nchannels = 2\n");
        assert!(matches!(ExperimentConfig::parse(&text), Err(CliError::Config(_))));
    }

    #[test]
    fn hash_ignores_locations_only() {
        let a = ExperimentConfig::parse(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.cache_dir = Some("cache2".into());
        assert_eq!(a.hash(), b.hash());
        b.seeds = vec![2];
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn dataset_key_tracks_physics() {
        let tx = TxConfig::default();
        let link = LinkConfig::default();
        let k = dataset_key(&tx, &link, 1);
        assert_eq!(k, dataset_key(&tx.clone(), &link.clone(), 1));
        assert_ne!(k, dataset_key(&tx, &link, 2));
        assert_ne!(
            k,
            dataset_key(
                &TxConfig {
                    launch_power_total_dbm: 1.0,
                    ..tx
                },
                &link,
                1
            )
        );
    }
}
