//! Run configuration: JSON file, command-line overrides, hashing.

use std::path::{Path, PathBuf};

use ada_core::attacks::{AttackConfig, AttackKind};
use ada_core::datasets::{self, LabeledDataset};
use ada_core::detectors::DetectorKind;
use ada_core::dnn::{NetworkSpec, TrainConfig};
use ada_core::evaluation::{DetectorSetup, RateTarget, ScenarioConfig, ScenarioKind};
use ada_core::null_models::{self, FitOptions, PairwiseOptions, TapFamily};
use ada_core::provenance::Provenance;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Idx,
    Cifar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_format")]
    pub format: DataFormat,
    /// IDX: `[images, labels]`; CIFAR: batch files.
    pub train: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Keep only the first N training / test images.
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
}

fn default_format() -> DataFormat {
    DataFormat::Idx
}
fn default_classes() -> usize {
    10
}

/// A named architecture or an inline layer list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkChoice {
    Named(String),
    Spec(NetworkSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            learning_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub kind: AttackKind,
    pub strength: f64,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub cw_step: Option<f64>,
    #[serde(default)]
    pub whitebox_step: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default = "default_network")]
    pub network: NetworkChoice,
    #[serde(default)]
    pub train: TrainSection,
    /// Joint null-model taps; empty means the network's default taps.
    #[serde(default)]
    pub taps: Vec<TapFamily>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub pairwise: PairwiseOptions,
    /// Primary detector for `detect`, `curve` and the white-box attack.
    #[serde(default = "default_detector")]
    pub detector: DetectorKind,
    /// Further detectors reported by `eval`.
    #[serde(default)]
    pub detectors: Vec<DetectorSetup>,
    pub attack: AttackSection,
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
    #[serde(default = "default_scenario")]
    pub scenario: ScenarioKind,
    #[serde(default)]
    pub ideal: bool,
    #[serde(default)]
    pub fpr: Option<f64>,
    #[serde(default)]
    pub tpr: Option<f64>,
    /// Attack strengths for `curve`.
    #[serde(default)]
    pub strengths: Vec<f64>,
    #[serde(default = "default_eta")]
    pub confusion_eta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_network() -> NetworkChoice {
    NetworkChoice::Named("lenet5".into())
}
fn default_detector() -> DetectorKind {
    DetectorKind::Ada
}
fn default_attempts() -> usize {
    500
}
fn default_scenario() -> ScenarioKind {
    ScenarioKind::Clean
}
fn default_eta() -> f64 {
    ada_core::detectors::DEFAULT_ETA
}
fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub detector: Option<DetectorKind>,
    pub attack: Option<AttackKind>,
    pub strength: Option<f64>,
    pub scenario: Option<ScenarioKind>,
    pub fpr: Option<f64>,
    pub tpr: Option<f64>,
}

impl RunConfig {
    /// Reads a config file; relative data paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::MissingArtifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in cfg.data.train.iter_mut().chain(cfg.data.test.iter_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(d) = o.detector {
            self.detector = d;
        }
        if let Some(a) = o.attack {
            self.attack.kind = a;
        }
        if let Some(s) = o.strength {
            self.attack.strength = s;
        }
        if let Some(s) = o.scenario {
            self.scenario = s;
        }
        if o.fpr.is_some() || o.tpr.is_some() {
            self.fpr = o.fpr;
            self.tpr = o.tpr;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::ConfigInvalid(m));
        let expected = match self.data.format {
            DataFormat::Idx => Some(2),
            DataFormat::Cifar => None,
        };
        for (name, files) in [("train", &self.data.train), ("test", &self.data.test)] {
            if files.is_empty() || expected.is_some_and(|n| files.len() != n) {
                return bad(format!("data.{name} must list {} file(s)", expected.map_or("one or more".into(), |n| n.to_string())));
            }
        }
        if self.data.num_classes < 2 {
            return bad("data.num_classes must be at least 2".into());
        }
        if self.fpr.is_some() && self.tpr.is_some() {
            return bad("give at most one of fpr and tpr".into());
        }
        for q in self.fpr.iter().chain(&self.tpr) {
            if !(0.0..=1.0).contains(q) {
                return bad(format!("rate {q} outside [0, 1]"));
            }
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 || !(self.train.learning_rate > 0.0) {
            return bad("train needs positive epochs, batch_size and learning_rate".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        self.attack_config().validate().map_err(|e| CliError::ConfigInvalid(e.to_string()))?;
        let spec = self.network_spec()?;
        let n = spec.layers.len();
        for t in &self.taps {
            if t.layer.0 >= n {
                return bad(format!("tap layer {} out of range for a {n}-layer network", t.layer));
            }
        }
        Ok(())
    }

    pub fn network_spec(&self) -> Result<NetworkSpec, CliError> {
        match &self.network {
            NetworkChoice::Named(name) => NetworkSpec::by_name(name, self.data.num_classes)
                .ok_or_else(|| CliError::ConfigInvalid(format!("unknown network {name:?} (expected lenet5 or cifar-small)"))),
            NetworkChoice::Spec(s) => {
                if s.num_classes != self.data.num_classes {
                    return Err(CliError::ConfigInvalid(format!(
                        "network has {} classes, data has {}",
                        s.num_classes, self.data.num_classes
                    )));
                }
                NetworkSpec::new(s.input, s.layers.clone(), s.num_classes).map_err(|e| CliError::ConfigInvalid(e.to_string()))
            }
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed: self.seed,
        }
    }

    pub fn attack_config(&self) -> AttackConfig {
        let mut a = AttackConfig::new(self.attack.kind, self.attack.strength);
        if let Some(m) = self.attack.max_iters {
            a.max_iters = m;
        }
        if let Some(s) = self.attack.cw_step {
            a.cw_step = s;
        }
        if let Some(s) = self.attack.whitebox_step {
            a.whitebox_step = s;
        }
        a.seed = self.seed;
        a
    }

    /// Effective taps: configured, or the network defaults with default families.
    pub fn effective_taps(&self, spec: &NetworkSpec) -> Vec<TapFamily> {
        if !self.taps.is_empty() {
            return self.taps.clone();
        }
        spec.default_taps()
            .into_iter()
            .map(|layer| TapFamily {
                layer,
                family: null_models::default_family(spec, layer),
            })
            .collect()
    }

    /// Primary detector first, then the extra ones not already listed.
    pub fn detector_setups(&self) -> Vec<DetectorSetup> {
        let mut out = vec![self
            .detectors
            .iter()
            .find(|d| d.kind == self.detector)
            .cloned()
            .unwrap_or_else(|| DetectorSetup::new(self.detector))];
        for d in &self.detectors {
            if !out.iter().any(|o| o.kind == d.kind) {
                out.push(d.clone());
            }
        }
        out
    }

    pub fn rate_target(&self) -> RateTarget {
        match (self.fpr, self.tpr) {
            (Some(q), _) => RateTarget::Fpr(q),
            (None, Some(q)) => RateTarget::Tpr(q),
            (None, None) => RateTarget::Tpr(0.8),
        }
    }

    pub fn scenario_config(&self, spec: &NetworkSpec) -> ScenarioConfig {
        let mut sc = ScenarioConfig::new(self.scenario, spec, self.attack_config(), self.detector_setups());
        sc.train = self.train_config();
        sc.taps = self.effective_taps(spec);
        sc.fit = self.fit.clone();
        sc.pairwise = self.pairwise.clone();
        sc.max_attempts = self.max_attempts;
        sc.confusion_eta = self.confusion_eta;
        if let RateTarget::Tpr(q) = self.rate_target() {
            sc.fixed_tpr = q;
        }
        sc.ideal = self.ideal;
        sc.seed = self.seed;
        sc
    }

    /// SHA-256 of the canonical JSON of everything except the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.hash(), self.seed)
    }

    fn load_split(&self, files: &[PathBuf], limit: Option<usize>) -> Result<LabeledDataset, CliError> {
        for f in files {
            if !f.exists() {
                return Err(CliError::MissingArtifact {
                    path: f.clone(),
                    message: "dataset file not found".into(),
                });
            }
        }
        let unreadable = |e: datasets::DatasetError| CliError::UnreadableArtifact {
            path: files[0].clone(),
            message: e.to_string(),
        };
        let data = match self.data.format {
            DataFormat::Idx => datasets::load_idx_files(&files[0], &files[1], self.data.num_classes).map_err(unreadable)?,
            DataFormat::Cifar => datasets::load_cifar10_files(files).map_err(unreadable)?,
        };
        Ok(match limit {
            Some(n) => data.take(n),
            None => data,
        })
    }

    pub fn load_train(&self) -> Result<LabeledDataset, CliError> {
        self.load_split(&self.data.train, self.data.train_limit)
    }

    pub fn load_test(&self) -> Result<LabeledDataset, CliError> {
        self.load_split(&self.data.test, self.data.test_limit)
    }
}
