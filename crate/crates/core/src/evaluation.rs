//! ROC analysis, operating points, conditional accuracy, security curves, and
//! clean/noisy/mismatch scenario orchestration.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{self, AttackConfig, AttackError, AttackKind, AttackRecord};
use crate::datasets::{self, DatasetError, Image, LabeledDataset, NoiseMode, PerturbationStats};
use crate::detectors::{self, Detector, DetectorError, DetectorKind, Statistic, WhiteCountModel};
use crate::dnn::{DnnError, LayerId, Network, NetworkSpec, TrainConfig};
use crate::null_models::{self, FitOptions, NullModelBank, NullModelError, PairwiseOptions, TapFamily};
use crate::rng::{derive_seed, tags};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("statistic list is empty")]
    EmptyList,
    #[error("statistic list contains NaN")]
    NotANumber,
    #[error("operating point unachievable: {0}")]
    Unachievable(String),
    #[error("every clean image was flagged at τ = {threshold}")]
    AllDetected { threshold: f64 },
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dnn(#[from] DnnError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    NullModel(#[from] NullModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvaluationError>;

// -- ROC ------------------------------------------------------------------------------

/// One operating point: an image is flagged when its statistic is strictly above `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// From `(0, 0)` to `(1, 1)`, thresholds descending.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// Trapezoidal area under `points`.
    pub fn trapezoid_area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }

    pub fn write_csv(&self, mut w: impl Write, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(w, "{c}")?;
        }
        writeln!(w, "threshold,fpr,tpr")?;
        for p in &self.points {
            writeln!(w, "{},{},{}", p.threshold, p.fpr, p.tpr)?;
        }
        Ok(())
    }
}

fn check_list(v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(EvaluationError::EmptyList);
    }
    if v.iter().any(|x| x.is_nan()) {
        return Err(EvaluationError::NotANumber);
    }
    Ok(())
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Count of entries of ascending `s` strictly greater than `t`.
fn count_above(s: &[f64], t: f64) -> usize {
    s.len() - s.partition_point(|&x| x <= t)
}

/// Exact Mann–Whitney AUC with half credit for ties, plus the threshold-sweep curve.
pub fn roc_auc(attack: &[f64], clean: &[f64]) -> Result<RocCurve> {
    check_list(attack)?;
    check_list(clean)?;
    let pos = sorted(attack);
    let neg = sorted(clean);
    let mut twice: u128 = 0;
    for &a in &pos {
        let below = neg.partition_point(|&x| x < a);
        let ties = neg.partition_point(|&x| x <= a) - below;
        twice += 2 * below as u128 + ties as u128;
    }
    let auc = twice as f64 / (2 * pos.len() as u128 * neg.len() as u128) as f64;

    let mut pooled: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    pooled.sort_by(|a, b| b.total_cmp(a));
    pooled.dedup();
    let lowest = pooled[pooled.len() - 1].next_down();
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    let points = pooled
        .into_iter()
        .chain(std::iter::once(lowest))
        .map(|t| RocPoint {
            threshold: t,
            fpr: count_above(&neg, t) as f64 / nn,
            tpr: count_above(&pos, t) as f64 / np,
        })
        .collect();
    Ok(RocCurve { points, auc })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "target", content = "rate")]
pub enum RateTarget {
    Fpr(f64),
    Tpr(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// For `Fpr(q)` the smallest τ with FPR ≤ q; for `Tpr(q)` the largest τ with TPR ≥ q.
pub fn threshold_at(attack: &[f64], clean: &[f64], target: RateTarget) -> Result<OperatingPoint> {
    check_list(attack)?;
    check_list(clean)?;
    let q = match target {
        RateTarget::Fpr(q) | RateTarget::Tpr(q) => q,
    };
    if !(0.0..=1.0).contains(&q) {
        return Err(EvaluationError::Unachievable(format!("rate {q} outside [0, 1]")));
    }
    let pos = sorted(attack);
    let neg = sorted(clean);
    let pooled_min = pos[0].min(neg[0]);
    let pooled_max = pos[pos.len() - 1].max(neg[neg.len() - 1]);
    let threshold = match target {
        RateTarget::Fpr(q) => {
            // FPR(τ) only drops at clean values, so the smallest feasible τ is one of them
            let allowed = (q * neg.len() as f64 + 1e-9).floor() as usize;
            if allowed >= neg.len() {
                pooled_min.next_down()
            } else {
                neg[neg.len() - 1 - allowed]
            }
        }
        RateTarget::Tpr(q) => {
            let needed = (q * pos.len() as f64 - 1e-9).ceil().max(0.0) as usize;
            if needed == 0 {
                pooled_max
            } else {
                pos[pos.len() - needed].next_down()
            }
        }
    };
    let op = OperatingPoint {
        threshold,
        fpr: count_above(&neg, threshold) as f64 / neg.len() as f64,
        tpr: count_above(&pos, threshold) as f64 / pos.len() as f64,
    };
    let ok = match target {
        RateTarget::Fpr(q) => op.fpr <= q + 1e-12,
        RateTarget::Tpr(q) => op.tpr + 1e-12 >= q,
    };
    if !ok {
        return Err(EvaluationError::Unachievable(format!("{target:?} at τ = {threshold}")));
    }
    Ok(op)
}

// -- conditional accuracy ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalAccuracy {
    /// Accuracy over clean images not flagged.
    pub accuracy: f64,
    pub retained: usize,
    pub false_detections: usize,
    /// Share of misclassified images among the false detections.
    pub misclassified_among_false_detections: Option<f64>,
}

/// Filter-then-score from precomputed statistics and correctness flags.
pub fn conditional_accuracy_from(stats: &[f64], correct: &[bool], threshold: f64) -> Result<ConditionalAccuracy> {
    if stats.len() != correct.len() {
        return Err(EvaluationError::InvalidConfig(format!(
            "{} statistics vs {} correctness flags",
            stats.len(),
            correct.len()
        )));
    }
    let (mut kept, mut kept_ok, mut flagged, mut flagged_wrong) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &ok) in stats.iter().zip(correct) {
        if s > threshold {
            flagged += 1;
            flagged_wrong += usize::from(!ok);
        } else {
            kept += 1;
            kept_ok += usize::from(ok);
        }
    }
    if kept == 0 {
        return Err(EvaluationError::AllDetected { threshold });
    }
    Ok(ConditionalAccuracy {
        accuracy: kept_ok as f64 / kept as f64,
        retained: kept,
        false_detections: flagged,
        misclassified_among_false_detections: (flagged > 0).then(|| flagged_wrong as f64 / flagged as f64),
    })
}

/// Accuracy of the classifier on clean images whose statistic is at most `threshold`.
pub fn conditional_accuracy(
    net: &Network,
    detector: &Detector,
    threshold: f64,
    clean: &LabeledDataset,
) -> Result<ConditionalAccuracy> {
    let mut stats = Vec::with_capacity(clean.len());
    let mut correct = Vec::with_capacity(clean.len());
    for (x, y) in clean.iter() {
        let (post, acts) = net.forward(x, &detector.taps())?;
        stats.push(detector.score_activations(net, x, &post, &acts)?.value);
        correct.push(post.argmax() == y);
    }
    conditional_accuracy_from(&stats, &correct, threshold)
}

// -- security curves -------------------------------------------------------------------

/// One strength of a security evaluation curve. Detection fields are `None`
/// when no attack succeeded at that strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecurityCurvePoint {
    pub strength: f64,
    pub attempts: usize,
    pub craft_rate: f64,
    pub auc: Option<f64>,
    pub threshold: Option<f64>,
    pub conditional_accuracy: Option<f64>,
    pub fpr_at_fixed_tpr: Option<f64>,
}

pub const CURVE_CSV_HEADER: &str = "strength,craft_rate,auc,cond_acc,fpr";

pub fn write_curve_csv(mut w: impl Write, points: &[SecurityCurvePoint], comment: Option<&str>) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    if let Some(c) = comment {
        writeln!(w, "{c}")?;
    }
    writeln!(w, "{CURVE_CSV_HEADER}")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{}",
            p.strength,
            p.craft_rate,
            opt(p.auc),
            opt(p.conditional_accuracy),
            opt(p.fpr_at_fixed_tpr)
        )?;
    }
    Ok(())
}

/// Statistics and correctness flags of a clean batch.
pub fn score_clean(net: &Network, detector: &Detector, clean: &LabeledDataset) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut stats = Vec::with_capacity(clean.len());
    let mut correct = Vec::with_capacity(clean.len());
    for (x, y) in clean.iter() {
        let (post, acts) = net.forward(x, &detector.taps())?;
        stats.push(detector.score_activations(net, x, &post, &acts)?.value);
        correct.push(post.argmax() == y);
    }
    Ok((stats, correct))
}

/// Crafts attacks at each strength and evaluates detection at a fixed TPR.
///
/// The clean half of every ROC is the whole of `test`; attacks start from its
/// correctly classified images (at most `max_attempts` per strength).
pub fn security_curve(
    net: &Network,
    detector: &Detector,
    base: &AttackConfig,
    strengths: &[f64],
    test: &LabeledDataset,
    fixed_tpr: f64,
    max_attempts: usize,
) -> Result<Vec<SecurityCurvePoint>> {
    if strengths.is_empty() {
        return Err(EvaluationError::InvalidConfig("no strengths given".into()));
    }
    let (clean_stats, correct) = score_clean(net, detector, test)?;
    strengths
        .iter()
        .map(|&s| {
            let cfg = AttackConfig { strength: s, ..base.clone() };
            let recs = attacks::craft_attacks(net, test, &cfg, max_attempts)?;
            let records: Vec<AttackRecord> = recs.into_iter().map(|(_, r)| r).collect();
            let attack_stats: Vec<f64> = records
                .iter()
                .filter(|r| r.success)
                .map(|r| detector.score(net, &r.perturbed).map(|st| st.value))
                .collect::<std::result::Result<_, _>>()?;
            let mut p = SecurityCurvePoint {
                strength: s,
                attempts: records.len(),
                craft_rate: attacks::craft_rate(&records),
                auc: None,
                threshold: None,
                conditional_accuracy: None,
                fpr_at_fixed_tpr: None,
            };
            if !attack_stats.is_empty() {
                p.auc = Some(roc_auc(&attack_stats, &clean_stats)?.auc);
                let op = threshold_at(&attack_stats, &clean_stats, RateTarget::Tpr(fixed_tpr))?;
                p.threshold = Some(op.threshold);
                p.fpr_at_fixed_tpr = Some(op.fpr);
                p.conditional_accuracy = conditional_accuracy_from(&clean_stats, &correct, op.threshold)
                    .ok()
                    .map(|c| c.accuracy);
            }
            Ok(p)
        })
        .collect()
}

// -- scenarios ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    /// Clean training; the detection batch is the clean test set plus attacks.
    Clean,
    /// Noise-matched retraining; the batch is the noisy test set plus new attacks.
    Noisy,
    /// Clean training; the batch is clean test, noisy test, and attacks.
    Mismatch,
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::Clean => "clean",
            ScenarioKind::Noisy => "noisy",
            ScenarioKind::Mismatch => "mismatch",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "clean" => Ok(ScenarioKind::Clean),
            "noisy" => Ok(ScenarioKind::Noisy),
            "mismatch" => Ok(ScenarioKind::Mismatch),
            other => Err(format!("unknown scenario {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    Clean,
    Noisy,
    Attack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSetup {
    pub kind: DetectorKind,
    /// Empty means every joint tap in tap order; single-layer detectors then
    /// read the last tap, which for default taps is the penultimate layer.
    #[serde(default)]
    pub layers: Vec<LayerId>,
}

impl DetectorSetup {
    pub fn new(kind: DetectorKind) -> Self {
        Self { kind, layers: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub train: TrainConfig,
    /// Joint null-model taps.
    pub taps: Vec<TapFamily>,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub pairwise: PairwiseOptions,
    pub detectors: Vec<DetectorSetup>,
    pub attack: AttackConfig,
    pub max_attempts: usize,
    #[serde(default = "default_eta")]
    pub confusion_eta: f64,
    #[serde(default = "default_binarize")]
    pub binarize_threshold: f64,
    #[serde(default = "default_tpr")]
    pub fixed_tpr: f64,
    /// Drop misclassified non-attack images from the detection batch.
    #[serde(default)]
    pub ideal: bool,
    pub seed: u64,
}

fn default_eta() -> f64 {
    detectors::DEFAULT_ETA
}
fn default_binarize() -> f64 {
    detectors::DEFAULT_BINARIZE
}
fn default_tpr() -> f64 {
    0.8
}

impl ScenarioConfig {
    /// Defaults for a network spec: all default taps with their default families.
    pub fn new(kind: ScenarioKind, spec: &NetworkSpec, attack: AttackConfig, detectors: Vec<DetectorSetup>) -> Self {
        Self {
            kind,
            train: TrainConfig::default(),
            taps: spec
                .default_taps()
                .into_iter()
                .map(|layer| TapFamily {
                    layer,
                    family: null_models::default_family(spec, layer),
                })
                .collect(),
            fit: FitOptions::default(),
            pairwise: PairwiseOptions::default(),
            detectors,
            attack,
            max_attempts: 500,
            confusion_eta: default_eta(),
            binarize_threshold: default_binarize(),
            fixed_tpr: default_tpr(),
            ideal: false,
            seed: 0,
        }
    }

    pub fn detector_layers(&self, setup: &DetectorSetup) -> Vec<LayerId> {
        if !setup.layers.is_empty() {
            return setup.layers.clone();
        }
        let mut all = self.taps.iter().map(|t| t.layer);
        match setup.kind {
            DetectorKind::Baseline | DetectorKind::Ada | DetectorKind::AdaAll => all.next_back().into_iter().collect(),
            _ => all.collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.detectors.is_empty() {
            return Err(EvaluationError::InvalidConfig("no detectors configured".into()));
        }
        if self.attack.kind == AttackKind::WhiteBox {
            return Err(EvaluationError::InvalidConfig(
                "scenarios use targeted attacks; run the white-box attack separately".into(),
            ));
        }
        for d in &self.detectors {
            if d.kind.needs_bank() && !matches!(d.kind, DetectorKind::LAwaMaxKl) {
                for l in self.detector_layers(d) {
                    if !self.taps.iter().any(|t| t.layer == l) {
                        return Err(EvaluationError::InvalidConfig(format!(
                            "detector {} reads layer {l} which is not a tap",
                            d.kind
                        )));
                    }
                }
            }
        }
        self.attack.validate()?;
        Ok(())
    }
}

fn noise_mode(kind: AttackKind) -> NoiseMode {
    match kind {
        AttackKind::Jsma => NoiseMode::Subset,
        _ => NoiseMode::Global,
    }
}

/// Fits the joint bank over `cfg.taps`, plus pairwise models for any L-AWA detector.
pub fn fit_scenario_bank(net: &Network, train: &LabeledDataset, cfg: &ScenarioConfig) -> Result<NullModelBank> {
    let fit = FitOptions {
        seed: derive_seed(cfg.seed, &[tags::GMM]),
        ..cfg.fit.clone()
    };
    let mut bank = if cfg.taps.is_empty() {
        NullModelBank::new(train.num_classes())
    } else {
        null_models::fit_null_bank(net, train, &cfg.taps, &fit)?
    };
    let mut pair_layers: Vec<LayerId> = Vec::new();
    for d in cfg.detectors.iter().filter(|d| d.kind == DetectorKind::LAwaMaxKl) {
        for l in cfg.detector_layers(d) {
            if !pair_layers.contains(&l) {
                pair_layers.push(l);
            }
        }
    }
    if !pair_layers.is_empty() {
        let mut opts = cfg.pairwise.clone();
        opts.fit.seed = derive_seed(cfg.seed, &[tags::PAIR]);
        bank.merge(null_models::fit_pairwise_bank(net, train, &pair_layers, &opts)?)?;
    }
    Ok(bank)
}

/// Builds every configured detector against one bank.
pub fn build_detectors(
    net: &Network,
    train: &LabeledDataset,
    bank: &NullModelBank,
    cfg: &ScenarioConfig,
) -> Result<Vec<Detector>> {
    let confusion = if cfg.detectors.iter().any(|d| d.kind.needs_confusion()) {
        Some(detectors::estimate_confusion(net, train, cfg.confusion_eta)?)
    } else {
        None
    };
    let white = cfg
        .detectors
        .iter()
        .any(|d| d.kind == DetectorKind::WhiteCount)
        .then(|| WhiteCountModel::fit(train, cfg.binarize_threshold));
    Ok(cfg
        .detectors
        .iter()
        .map(|d| {
            let mut det = Detector::new(d.kind, cfg.detector_layers(d));
            det.binarize_threshold = cfg.binarize_threshold;
            if d.kind.needs_bank() {
                det = det.with_bank(bank.clone());
            }
            if let (true, Some(c)) = (d.kind.needs_confusion(), &confusion) {
                det = det.with_confusion(c.clone());
            }
            if let (DetectorKind::WhiteCount, Some(w)) = (d.kind, &white) {
                det = det.with_white_count(w.clone());
            }
            det
        })
        .collect())
}

/// One image of the detection batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub image: Image,
    pub label: usize,
    pub population: Population,
    /// Test-set index the image derives from.
    pub source_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BatchComposition {
    pub clean: usize,
    pub noisy: usize,
    pub attack: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorResult {
    pub detector: DetectorKind,
    pub layers: Vec<LayerId>,
    pub auc: f64,
    pub operating_point: OperatingPoint,
    pub conditional_accuracy: Option<ConditionalAccuracy>,
    /// How often each layer produced the maximum over the attack images.
    pub layer_attribution: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: ScenarioKind,
    pub attack: AttackKind,
    pub strength: f64,
    pub ideal: bool,
    pub test_accuracy: f64,
    pub attempts: usize,
    pub craft_rate: f64,
    pub noise: Option<PerturbationStats>,
    pub batch: BatchComposition,
    pub detectors: Vec<DetectorResult>,
}

/// Everything produced by a scenario run.
#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub report: ScenarioReport,
    pub network: Network,
    pub bank: NullModelBank,
    pub batch: Vec<BatchItem>,
    /// Per detector (config order), the statistic of every batch item.
    pub statistics: Vec<Vec<Statistic>>,
    pub rocs: Vec<RocCurve>,
    pub attacks: Vec<AttackRecord>,
}

fn successful_originals(records: &[(usize, AttackRecord)]) -> (Vec<Image>, Vec<Image>) {
    records
        .iter()
        .filter(|(_, r)| r.success)
        .map(|(_, r)| (r.original.clone(), r.perturbed.clone()))
        .unzip()
}

fn attack_config(cfg: &ScenarioConfig, stage: u64) -> AttackConfig {
    AttackConfig {
        seed: derive_seed(cfg.seed, &[tags::TARGET, stage]),
        ..cfg.attack.clone()
    }
}

/// Trains a fresh classifier; initialization is seeded from `train.seed`.
pub fn train_network(spec: &NetworkSpec, data: &LabeledDataset, train: &TrainConfig) -> Result<Network> {
    let init = Network::new(spec.clone(), derive_seed(train.seed, &[tags::INIT]));
    Ok(init.train(data, train)?.0)
}

/// Runs one scenario end to end.
///
/// `clean_net` is reused as the classifier trained on the original training set
/// when given; otherwise it is trained from `spec`. `clean_bank`, when given,
/// must have been fitted on `clean_net` and replaces the refit in the clean
/// and mismatch scenarios. For the noisy scenario the
/// order is: craft on the clean classifier, estimate the perturbation moments,
/// noise the training set, retrain, refit the null models, craft new attacks,
/// noise the test set.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    spec: &NetworkSpec,
    train: &LabeledDataset,
    test: &LabeledDataset,
    clean_net: Option<&Network>,
    clean_bank: Option<&NullModelBank>,
) -> Result<ScenarioOutcome> {
    cfg.validate()?;
    let clean_net = match clean_net {
        Some(n) => n.clone(),
        None => train_network(spec, train, &cfg.train)?,
    };
    let first = attacks::craft_attacks(&clean_net, test, &attack_config(cfg, 0), cfg.max_attempts)?;
    let mode = noise_mode(cfg.attack.kind);
    let noise_stats = |recs: &[(usize, AttackRecord)]| -> Result<PerturbationStats> {
        let (o, p) = successful_originals(recs);
        Ok(datasets::estimate_perturbation_stats_images(&o, &p)?)
    };

    let (net, train_used, records, noise, mut batch_parts) = match cfg.kind {
        ScenarioKind::Clean => (clean_net, train.clone(), first, None, vec![(Population::Clean, test.clone())]),
        ScenarioKind::Mismatch => {
            let stats = noise_stats(&first)?;
            let noisy_test = datasets::add_matched_noise(test, &stats, mode, derive_seed(cfg.seed, &[tags::NOISE, 1]))?;
            (
                clean_net,
                train.clone(),
                first,
                Some(stats),
                vec![(Population::Clean, test.clone()), (Population::Noisy, noisy_test)],
            )
        }
        ScenarioKind::Noisy => {
            let stats = noise_stats(&first)?;
            let noisy_train = datasets::add_matched_noise(train, &stats, mode, derive_seed(cfg.seed, &[tags::NOISE, 0]))?;
            let retrained = train_network(spec, &noisy_train, &cfg.train)?;
            let second = attacks::craft_attacks(&retrained, test, &attack_config(cfg, 1), cfg.max_attempts)?;
            let noisy_test = datasets::add_matched_noise(test, &stats, mode, derive_seed(cfg.seed, &[tags::NOISE, 1]))?;
            (retrained, noisy_train, second, Some(stats), vec![(Population::Noisy, noisy_test)])
        }
    };

    let bank = match (cfg.kind, clean_bank) {
        (ScenarioKind::Clean | ScenarioKind::Mismatch, Some(b)) => b.clone(),
        _ => fit_scenario_bank(&net, &train_used, cfg)?,
    };
    let dets = build_detectors(&net, &train_used, &bank, cfg)?;

    // assemble the detection batch
    let mut batch = Vec::new();
    for (pop, data) in batch_parts.drain(..) {
        for (i, (x, y)) in data.iter().enumerate() {
            if cfg.ideal && net.decide(x)? != y {
                continue;
            }
            batch.push(BatchItem {
                image: x.clone(),
                label: y,
                population: pop,
                source_index: i,
            });
        }
    }
    for (i, r) in records.iter().filter(|(_, r)| r.success) {
        batch.push(BatchItem {
            image: r.perturbed.clone(),
            label: r.true_class,
            population: Population::Attack,
            source_index: *i,
        });
    }
    let composition = batch.iter().fold(BatchComposition::default(), |mut c, b| {
        match b.population {
            Population::Clean => c.clean += 1,
            Population::Noisy => c.noisy += 1,
            Population::Attack => c.attack += 1,
        }
        c
    });

    // score: one forward pass per image covering every detector's taps
    let mut taps: Vec<LayerId> = dets.iter().flat_map(|d| d.taps()).collect();
    taps.sort();
    taps.dedup();
    let mut statistics: Vec<Vec<Statistic>> = vec![Vec::with_capacity(batch.len()); dets.len()];
    let mut correct = Vec::with_capacity(batch.len());
    for item in &batch {
        let (post, acts) = net.forward(&item.image, &taps)?;
        correct.push(post.argmax() == item.label);
        for (d, out) in dets.iter().zip(statistics.iter_mut()) {
            out.push(d.score_activations(&net, &item.image, &post, &acts)?);
        }
    }

    let is_attack: Vec<bool> = batch.iter().map(|b| b.population == Population::Attack).collect();
    let mut results = Vec::new();
    let mut rocs = Vec::new();
    if composition.attack > 0 {
        for (d, stats) in dets.iter().zip(&statistics) {
            let (mut pos, mut neg, mut neg_correct) = (Vec::new(), Vec::new(), Vec::new());
            let mut attribution = BTreeMap::new();
            for ((s, &att), &ok) in stats.iter().zip(&is_attack).zip(&correct) {
                if att {
                    pos.push(s.value);
                    if let Some(l) = s.winning_layer {
                        *attribution.entry(net.spec().layer_name(l)).or_insert(0) += 1;
                    }
                } else {
                    neg.push(s.value);
                    neg_correct.push(ok);
                }
            }
            let roc = roc_auc(&pos, &neg)?;
            let op = threshold_at(&pos, &neg, RateTarget::Tpr(cfg.fixed_tpr))?;
            results.push(DetectorResult {
                detector: d.kind,
                layers: d.layers.clone(),
                auc: roc.auc,
                operating_point: op,
                conditional_accuracy: conditional_accuracy_from(&neg, &neg_correct, op.threshold).ok(),
                layer_attribution: attribution,
            });
            rocs.push(roc);
        }
    }

    let attack_records: Vec<AttackRecord> = records.into_iter().map(|(_, r)| r).collect();
    let test_eval = match cfg.kind {
        ScenarioKind::Noisy => batch_noisy_or(test, &batch),
        _ => test.clone(),
    };
    let report = ScenarioReport {
        scenario: cfg.kind,
        attack: cfg.attack.kind,
        strength: cfg.attack.strength,
        ideal: cfg.ideal,
        test_accuracy: net.accuracy(&test_eval)?,
        attempts: attack_records.len(),
        craft_rate: attacks::craft_rate(&attack_records),
        noise,
        batch: composition,
        detectors: results,
    };
    Ok(ScenarioOutcome {
        report,
        network: net,
        bank,
        batch,
        statistics,
        rocs,
        attacks: attack_records,
    })
}

/// The noisy test images of the batch when the batch holds all of them, else `test`.
fn batch_noisy_or(test: &LabeledDataset, batch: &[BatchItem]) -> LabeledDataset {
    let noisy: Vec<&BatchItem> = batch.iter().filter(|b| b.population == Population::Noisy).collect();
    if noisy.len() != test.len() {
        return test.clone();
    }
    LabeledDataset::new(
        noisy.iter().map(|b| b.image.clone()).collect(),
        noisy.iter().map(|b| b.label).collect(),
        test.num_classes(),
    )
    .unwrap_or_else(|_| test.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for &a in pos {
            for &b in neg {
                s += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_trivial_cases() {
        assert_eq!(roc_auc(&[5.0, 6.0], &[1.0, 2.0]).unwrap().auc, 1.0);
        assert_eq!(roc_auc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().auc, 0.5);
        assert_eq!(roc_auc(&[0.9, 0.4], &[0.5, 0.1]).unwrap().auc, 0.75);
        assert!(matches!(roc_auc(&[], &[1.0]), Err(EvaluationError::EmptyList)));
        assert!(matches!(roc_auc(&[f64::NAN], &[1.0]), Err(EvaluationError::NotANumber)));
    }

    #[test]
    fn curve_endpoints_and_monotone() {
        let c = roc_auc(&[0.9, 0.4, 0.4], &[0.5, 0.1, 0.4]).unwrap();
        let f = c.points.first().unwrap();
        let l = c.points.last().unwrap();
        assert_eq!((f.fpr, f.tpr), (0.0, 0.0));
        assert_eq!((l.fpr, l.tpr), (1.0, 1.0));
        for w in c.points.windows(2) {
            assert!(w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr && w[1].threshold < w[0].threshold);
        }
        assert!((c.trapezoid_area() - c.auc).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(
            pos in prop::collection::vec(0u8..20, 1..100),
            neg in prop::collection::vec(0u8..20, 1..100),
        ) {
            let p: Vec<f64> = pos.iter().map(|&v| v as f64 / 4.0).collect();
            let n: Vec<f64> = neg.iter().map(|&v| v as f64 / 4.0).collect();
            let c = roc_auc(&p, &n).unwrap();
            prop_assert!((c.auc - brute_auc(&p, &n)).abs() < 1e-12);
            prop_assert!((c.trapezoid_area() - c.auc).abs() < 1e-9);
        }

        #[test]
        fn auc_invariant_under_increasing_map(
            pos in prop::collection::vec(-5.0f64..5.0, 1..60),
            neg in prop::collection::vec(-5.0f64..5.0, 1..60),
        ) {
            let a = roc_auc(&pos, &neg).unwrap().auc;
            let f = |v: &f64| v.exp() * 3.0 + 1.0;
            let b = roc_auc(&pos.iter().map(f).collect::<Vec<_>>(), &neg.iter().map(f).collect::<Vec<_>>()).unwrap().auc;
            prop_assert_eq!(a, b);
        }
    }

    fn rates(pos: &[f64], neg: &[f64], t: f64) -> (f64, f64) {
        let fpr = neg.iter().filter(|&&v| v > t).count() as f64 / neg.len() as f64;
        let tpr = pos.iter().filter(|&&v| v > t).count() as f64 / pos.len() as f64;
        (fpr, tpr)
    }

    #[test]
    fn threshold_extremes() {
        let pos = [3.0, 4.0, 2.0];
        let neg = [1.0, 2.5, 0.5];
        let op = threshold_at(&pos, &neg, RateTarget::Fpr(0.0)).unwrap();
        assert!(op.threshold >= 2.5 && op.fpr == 0.0);
        let op = threshold_at(&pos, &neg, RateTarget::Tpr(1.0)).unwrap();
        assert!(op.threshold < 2.0 && op.tpr == 1.0);
        assert!(matches!(
            threshold_at(&pos, &neg, RateTarget::Tpr(1.5)),
            Err(EvaluationError::Unachievable(_))
        ));
    }

    #[test]
    fn threshold_matches_exhaustive_scan() {
        let mut rng = rng_for(11, &[]);
        for _ in 0..200 {
            let pos: Vec<f64> = (0..rng.random_range(1..12)).map(|_| rng.random_range(0..8) as f64).collect();
            let neg: Vec<f64> = (0..rng.random_range(1..12)).map(|_| rng.random_range(0..8) as f64).collect();
            let q = rng.random_range(0..=10) as f64 / 10.0;
            // candidate thresholds: pooled values and the floats just below them
            let mut cands: Vec<f64> = pos.iter().chain(&neg).flat_map(|&v| [v, v.next_down()]).collect();
            cands.sort_by(f64::total_cmp);
            let fpr_best = cands.iter().copied().find(|&t| rates(&pos, &neg, t).0 <= q).unwrap();
            let op = threshold_at(&pos, &neg, RateTarget::Fpr(q)).unwrap();
            assert_eq!(op.threshold, fpr_best, "fpr {q} {pos:?} {neg:?}");
            let tpr_best = cands.iter().rev().copied().find(|&t| rates(&pos, &neg, t).1 >= q).unwrap();
            let op = threshold_at(&pos, &neg, RateTarget::Tpr(q)).unwrap();
            assert_eq!(op.threshold, tpr_best, "tpr {q} {pos:?} {neg:?}");
            assert_eq!((op.fpr, op.tpr), rates(&pos, &neg, op.threshold));
        }
    }

    #[test]
    fn conditional_accuracy_manual_filter() {
        let stats = [0.1, 0.9, 0.3, 0.7, 0.2, 0.95, 0.4, 0.6, 0.05, 0.8];
        let correct = [true, false, true, true, false, true, true, false, true, false];
        let tau = 0.5;
        let c = conditional_accuracy_from(&stats, &correct, tau).unwrap();
        // kept: 0.1 T, 0.3 T, 0.2 F, 0.4 T, 0.05 T → 4/5
        assert_eq!(c.retained, 5);
        assert_eq!(c.accuracy, 0.8);
        // flagged: 0.9 F, 0.7 T, 0.95 T, 0.6 F, 0.8 F → 3/5 misclassified
        assert_eq!(c.misclassified_among_false_detections, Some(0.6));
        let all = conditional_accuracy_from(&stats, &correct, f64::INFINITY).unwrap();
        assert_eq!(all.accuracy, 0.6);
        assert!(matches!(
            conditional_accuracy_from(&stats, &correct, 0.0),
            Err(EvaluationError::AllDetected { .. })
        ));
    }

    #[test]
    fn curve_csv_layout() {
        let p = SecurityCurvePoint {
            strength: 0.5,
            attempts: 4,
            craft_rate: 0.25,
            auc: Some(0.75),
            threshold: Some(1.0),
            conditional_accuracy: None,
            fpr_at_fixed_tpr: Some(0.1),
        };
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &[p], Some("# x")).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "# x\nstrength,craft_rate,auc,cond_acc,fpr\n0.5,0.25,0.75,,0.1\n");
    }

    #[test]
    fn scenario_names_round_trip() {
        for k in [ScenarioKind::Clean, ScenarioKind::Noisy, ScenarioKind::Mismatch] {
            assert_eq!(k.name().parse::<ScenarioKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
    }
}
