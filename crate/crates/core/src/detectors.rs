//! Decision statistics for attack detection.
//!
//! Larger statistics are more anomalous; a detection is declared when the
//! statistic exceeds a threshold `τ`. The KL-based statistics compare a
//! null-model class posterior `P`, built from class-conditional activation
//! densities, with the classifier's posterior `Q`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{Image, LabeledDataset};
use crate::dnn::{self, DnnError, LayerActivations, LayerId, Network, Posterior};
use crate::null_models::{NullModelBank, NullModelError};

/// Floor applied to probability entries before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Default confusion smoothing floor.
pub const DEFAULT_ETA: f64 = 1e-3;
/// Default white-pixel binarization level.
pub const DEFAULT_BINARIZE: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("probability vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no model for layer {layer}, class {class}")]
    MissingModel { layer: LayerId, class: usize },
    #[error("no activations recorded for layer {0}")]
    MissingActivations(LayerId),
    #[error("class {0} has no validation samples")]
    ClassUnderpopulated(usize),
    #[error("white-count histograms not fitted")]
    NoHistograms,
    #[error("detector {kind} needs {what}")]
    MissingComponent { kind: DetectorKind, what: &'static str },
    #[error("no layers given")]
    NoLayers,
    #[error("need at least two classes")]
    TooFewClasses,
    #[error(transparent)]
    NullModel(NullModelError),
    #[error(transparent)]
    Dnn(#[from] DnnError),
}

impl From<NullModelError> for DetectorError {
    fn from(e: NullModelError) -> Self {
        match e {
            NullModelError::MissingModel { layer, class } => DetectorError::MissingModel { layer, class },
            other => DetectorError::NullModel(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, DetectorError>;

/// Which divergence between `P` (null model) and `Q` (classifier) is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlOrientation {
    /// `D(P‖Q)`
    #[default]
    Forward,
    /// `D(Q‖P)`
    Reverse,
    /// `D(P‖Q) + D(Q‖P)`
    Symmetric,
}

/// Which classes enter the ADA probability vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassMode {
    /// Decided class and the estimated source class.
    Two,
    /// All `K` classes.
    All,
}

fn floored(p: &[f64]) -> Vec<f64> {
    let v: Vec<f64> = p.iter().map(|&x| x.max(PROB_FLOOR)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

/// `D_KL(P‖Q) = Σ P_c ln(P_c/Q_c)` after flooring both vectors at
/// [`PROB_FLOOR`] and renormalizing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(DetectorError::LengthMismatch(p.len(), q.len()));
    }
    if p == q {
        return Ok(0.0);
    }
    let (p, q) = (floored(p), floored(q));
    let v: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
    Ok(v.max(0.0))
}

pub fn divergence(p: &[f64], q: &[f64], orientation: KlOrientation) -> Result<f64> {
    Ok(match orientation {
        KlOrientation::Forward => kl_divergence(p, q)?,
        KlOrientation::Reverse => kl_divergence(q, p)?,
        KlOrientation::Symmetric => kl_divergence(p, q)? + kl_divergence(q, p)?,
    })
}

/// Null-model and classifier probability vectors over the same class list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPairPosteriors {
    pub classes: Vec<usize>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// `ln Σ f(z|c)` over `classes`.
    pub log_p0: f64,
    /// `Σ P_DNN(c|x)` over `classes`.
    pub q0: f64,
}

impl ClassPairPosteriors {
    /// Normalizes the class log-densities and posterior entries for `classes`.
    pub fn new(classes: Vec<usize>, log_f: &[f64], posterior: &[f64]) -> Self {
        let lf: Vec<f64> = classes.iter().map(|&c| log_f[c]).collect();
        let log_p0 = crate::numerics::log_sum_exp_unchecked(&lf);
        let p = if log_p0.is_finite() {
            lf.iter().map(|l| (l - log_p0).exp()).collect()
        } else {
            // every density underflowed (or overflowed): no preference
            vec![1.0 / classes.len() as f64; classes.len()]
        };
        let q0: f64 = classes.iter().map(|&c| posterior[c]).sum();
        let q = if q0 > 0.0 {
            classes.iter().map(|&c| posterior[c] / q0).collect()
        } else {
            vec![1.0 / classes.len() as f64; classes.len()]
        };
        Self {
            classes,
            p,
            q,
            log_p0,
            q0,
        }
    }

    pub fn divergence(&self, orientation: KlOrientation) -> f64 {
        divergence(&self.p, &self.q, orientation).expect("aligned vectors")
    }
}

/// A computed statistic before thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Statistic {
    pub value: f64,
    pub winning_layer: Option<LayerId>,
    pub estimated_source: Option<usize>,
    pub destination: usize,
}

impl Statistic {
    pub fn plain(value: f64, destination: usize) -> Self {
        Self {
            value,
            winning_layer: None,
            estimated_source: None,
            destination,
        }
    }

    pub fn decide(&self, threshold: f64) -> DetectorVerdict {
        DetectorVerdict {
            statistic: self.value,
            threshold,
            detected: self.value > threshold,
            winning_layer: self.winning_layer,
            estimated_source: self.estimated_source,
            destination: self.destination,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorVerdict {
    pub statistic: f64,
    pub threshold: f64,
    pub detected: bool,
    pub winning_layer: Option<LayerId>,
    pub estimated_source: Option<usize>,
    pub destination: usize,
}

impl DetectorVerdict {
    pub const CSV_HEADER: &'static str = "image_id,statistic,detected,winning_layer,destination,estimated_source";

    pub fn csv_row(&self, image_id: usize) -> String {
        let opt = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
        format!(
            "{image_id},{},{},{},{},{}",
            self.statistic,
            u8::from(self.detected),
            opt(self.winning_layer.map(|l| l.0)),
            self.destination,
            opt(self.estimated_source)
        )
    }
}

fn argmax_excluding(v: &[f64], skip: usize) -> usize {
    let mut best = None::<usize>;
    for (i, &x) in v.iter().enumerate() {
        if i == skip {
            continue;
        }
        if best.is_none_or(|b| x > v[b]) {
            best = Some(i);
        }
    }
    best.expect("at least two classes")
}

// -- statistics from explicit densities ------------------------------------------

/// `−ln f(z|c*)`.
pub fn baseline_from_densities(log_f: &[f64], posterior: &[f64]) -> Statistic {
    let c_star = dnn::argmax(posterior);
    Statistic::plain(-log_f[c_star], c_star)
}

/// ADA KL statistic from per-class log-densities and the classifier posterior.
pub fn ada_from_densities(log_f: &[f64], posterior: &[f64], mode: ClassMode, orientation: KlOrientation) -> Result<Statistic> {
    if log_f.len() != posterior.len() {
        return Err(DetectorError::LengthMismatch(log_f.len(), posterior.len()));
    }
    if log_f.len() < 2 {
        return Err(DetectorError::TooFewClasses);
    }
    let c_star = dnn::argmax(posterior);
    let source = argmax_excluding(log_f, c_star);
    let classes = match mode {
        ClassMode::Two => vec![c_star, source],
        ClassMode::All => (0..log_f.len()).collect(),
    };
    let pq = ClassPairPosteriors::new(classes, log_f, posterior);
    Ok(Statistic {
        value: pq.divergence(orientation),
        winning_layer: None,
        estimated_source: Some(source),
        destination: c_star,
    })
}

/// Smoothed class-confusion matrix, `entry(decided, true) = P[C* = decided | C = true]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    eta: f64,
    /// Row-major `[decided][true]`.
    entries: Vec<f64>,
}

impl ConfusionMatrix {
    /// From raw counts `counts[decided][true]`. Columns are normalized, entries
    /// below `eta` are raised to `eta` and the remaining mass rescaled so every
    /// entry stays at least `eta`.
    pub fn from_counts(counts: &[Vec<u64>], eta: f64) -> Result<Self> {
        let k = counts.len();
        if k < 2 || counts.iter().any(|r| r.len() != k) || !(eta > 0.0 && eta * k as f64 <= 1.0) {
            return Err(DetectorError::TooFewClasses);
        }
        let mut entries = vec![0.0; k * k];
        for t in 0..k {
            let total: u64 = (0..k).map(|d| counts[d][t]).sum();
            if total == 0 {
                return Err(DetectorError::ClassUnderpopulated(t));
            }
            let mut col: Vec<f64> = (0..k).map(|d| counts[d][t] as f64 / total as f64).collect();
            let mut floored = vec![false; k];
            loop {
                let fixed = floored.iter().filter(|&&f| f).count() as f64 * eta;
                let free: f64 = (0..k).filter(|&d| !floored[d]).map(|d| col[d]).sum();
                let scale = (1.0 - fixed) / free;
                let mut changed = false;
                for d in 0..k {
                    if !floored[d] && col[d] * scale < eta {
                        floored[d] = true;
                        changed = true;
                    }
                }
                if !changed {
                    for d in 0..k {
                        col[d] = if floored[d] { eta } else { col[d] * scale };
                    }
                    break;
                }
            }
            for d in 0..k {
                entries[d * k + t] = col[d];
            }
        }
        Ok(Self { k, eta, entries })
    }

    pub fn uniform(k: usize) -> Self {
        Self {
            k,
            eta: 1.0 / k as f64,
            entries: vec![1.0 / k as f64; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }
    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `P[C* = decided | C = true]`.
    pub fn get(&self, decided: usize, true_class: usize) -> f64 {
        self.entries[decided * self.k + true_class]
    }
}

/// Tallies decisions against labels on a validation set.
pub fn estimate_confusion(net: &Network, validation: &LabeledDataset, eta: f64) -> Result<ConfusionMatrix> {
    let k = validation.num_classes();
    let mut counts = vec![vec![0u64; k]; k];
    for (x, y) in validation.iter() {
        counts[net.decide(x)?][y] += 1;
    }
    ConfusionMatrix::from_counts(&counts, eta)
}

/// Confusion-weighted source-averaged terms; returns (statistic, per-class source weights).
fn aw_terms(
    log_f: &[f64],
    posterior: &[f64],
    c_star: usize,
    confusion: &ConfusionMatrix,
    orientation: KlOrientation,
) -> (f64, Vec<f64>) {
    let k = log_f.len();
    let others: Vec<usize> = (0..k).filter(|&c| c != c_star).collect();
    let lf: Vec<f64> = others.iter().map(|&c| log_f[c]).collect();
    let norm = crate::numerics::log_sum_exp_unchecked(&lf);
    let mut ps = vec![0.0; k];
    for (&c, l) in others.iter().zip(&lf) {
        ps[c] = if norm.is_finite() {
            (l - norm).exp()
        } else {
            1.0 / others.len() as f64
        };
    }
    let mut total = 0.0;
    for &c in &others {
        if ps[c] == 0.0 {
            continue;
        }
        let kl = ClassPairPosteriors::new(vec![c_star, c], log_f, posterior).divergence(orientation);
        total += ps[c] * kl / confusion.get(c_star, c);
    }
    (total, ps)
}

/// AW-ADA: `Σ_{c≠c*} P[C_s=c]·D(P^(c)‖Q^(c)) / P[C*=c*|C=c]`.
pub fn aw_ada_from_densities(
    log_f: &[f64],
    posterior: &[f64],
    confusion: &ConfusionMatrix,
    orientation: KlOrientation,
) -> Result<Statistic> {
    if log_f.len() != posterior.len() || confusion.num_classes() != log_f.len() {
        return Err(DetectorError::LengthMismatch(log_f.len(), posterior.len()));
    }
    if log_f.len() < 2 {
        return Err(DetectorError::TooFewClasses);
    }
    let c_star = dnn::argmax(posterior);
    let (value, ps) = aw_terms(log_f, posterior, c_star, confusion, orientation);
    Ok(Statistic {
        value,
        winning_layer: None,
        estimated_source: Some(argmax_excluding(&ps, c_star)),
        destination: c_star,
    })
}

/// L-AWA from per-pair class log-densities `pair_log_f[p][c]` and pair weights `β_iβ_j`.
pub fn l_awa_from_densities(
    pair_log_f: &[Vec<f64>],
    pair_weights: &[f64],
    posterior: &[f64],
    confusion: &ConfusionMatrix,
    orientation: KlOrientation,
) -> Result<Statistic> {
    if pair_log_f.is_empty() || pair_log_f.len() != pair_weights.len() {
        return Err(DetectorError::LengthMismatch(pair_log_f.len(), pair_weights.len()));
    }
    let k = posterior.len();
    if k < 2 {
        return Err(DetectorError::TooFewClasses);
    }
    let c_star = dnn::argmax(posterior);
    let mut total = 0.0;
    let mut source_mass = vec![0.0; k];
    for (lf, &w) in pair_log_f.iter().zip(pair_weights) {
        if lf.len() != k {
            return Err(DetectorError::LengthMismatch(lf.len(), k));
        }
        let (v, ps) = aw_terms(lf, posterior, c_star, confusion, orientation);
        total += w * v;
        for (m, p) in source_mass.iter_mut().zip(ps) {
            *m += w * p;
        }
    }
    Ok(Statistic {
        value: total / pair_log_f.len() as f64,
        winning_layer: None,
        estimated_source: Some(argmax_excluding(&source_mass, c_star)),
        destination: c_star,
    })
}

/// Maximum of a per-layer statistic; the first layer wins ties.
pub fn maxkl_over_layers(layers: &[LayerId], mut per_layer: impl FnMut(LayerId) -> Result<Statistic>) -> Result<Statistic> {
    let mut best: Option<Statistic> = None;
    for &l in layers {
        let mut s = per_layer(l)?;
        s.winning_layer = Some(l);
        if best.is_none_or(|b| s.value > b.value) {
            best = Some(s);
        }
    }
    best.ok_or(DetectorError::NoLayers)
}

// -- statistics over a bank -------------------------------------------------------

fn layer_z(acts: &LayerActivations, layer: LayerId) -> Result<&[f64]> {
    acts.get(layer).ok_or(DetectorError::MissingActivations(layer))
}

pub fn baseline_density_statistic(
    bank: &NullModelBank,
    acts: &LayerActivations,
    posterior: &Posterior,
    layer: LayerId,
) -> Result<Statistic> {
    let c_star = posterior.argmax();
    let z = layer_z(acts, layer)?;
    let lf = bank.model(layer, c_star)?.log_density(z)?;
    let mut s = Statistic::plain(-lf, c_star);
    s.winning_layer = Some(layer);
    Ok(s)
}

pub fn ada_statistic(
    bank: &NullModelBank,
    acts: &LayerActivations,
    posterior: &Posterior,
    layer: LayerId,
    mode: ClassMode,
    orientation: KlOrientation,
) -> Result<Statistic> {
    let lf = bank.class_log_densities(layer, layer_z(acts, layer)?)?;
    let mut s = ada_from_densities(&lf, posterior.probs(), mode, orientation)?;
    s.winning_layer = Some(layer);
    Ok(s)
}

pub fn ada_maxkl(
    bank: &NullModelBank,
    acts: &LayerActivations,
    posterior: &Posterior,
    layers: &[LayerId],
    mode: ClassMode,
    orientation: KlOrientation,
) -> Result<Statistic> {
    maxkl_over_layers(layers, |l| ada_statistic(bank, acts, posterior, l, mode, orientation))
}

pub fn aw_ada_statistic(
    bank: &NullModelBank,
    acts: &LayerActivations,
    posterior: &Posterior,
    confusion: &ConfusionMatrix,
    layer: LayerId,
    orientation: KlOrientation,
) -> Result<Statistic> {
    let lf = bank.class_log_densities(layer, layer_z(acts, layer)?)?;
    let mut s = aw_ada_from_densities(&lf, posterior.probs(), confusion, orientation)?;
    s.winning_layer = Some(layer);
    Ok(s)
}

pub fn l_awa_statistic(
    bank: &NullModelBank,
    acts: &LayerActivations,
    posterior: &Posterior,
    confusion: &ConfusionMatrix,
    layer: LayerId,
    orientation: KlOrientation,
) -> Result<Statistic> {
    let pl = bank.pair_layer(layer)?;
    let z = layer_z(acts, layer)?;
    let k = bank.num_classes();
    let mut pair_lf = Vec::with_capacity(pl.pairs.len());
    let mut weights = Vec::with_capacity(pl.pairs.len());
    for (p, &(i, j)) in pl.pairs.iter().enumerate() {
        let v = [z[i], z[j]];
        let lf = (0..k)
            .map(|c| pl.models[c][p].log_density(&v))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        pair_lf.push(lf);
        weights.push(pl.beta[i] * pl.beta[j]);
    }
    let mut s = l_awa_from_densities(&pair_lf, &weights, posterior.probs(), confusion, orientation)?;
    s.winning_layer = Some(layer);
    Ok(s)
}

// -- simple baselines --------------------------------------------------------------

/// `1 − max_c P(c|x)`.
pub fn confidence_statistic(posterior: &Posterior) -> f64 {
    1.0 - posterior.max()
}

/// Binary mask of pixels at or above `threshold`, averaging channels.
fn white_mask(image: &Image, threshold: f64) -> Vec<bool> {
    let (c, h, w) = image.shape();
    let px = image.pixels();
    (0..h * w)
        .map(|i| (0..c).map(|ch| px[ch * h * w + i]).sum::<f64>() / c as f64 >= threshold)
        .collect()
}

pub fn white_count(image: &Image, threshold: f64) -> usize {
    white_mask(image, threshold).into_iter().filter(|&b| b).count()
}

/// Per-class histograms of white-pixel counts on clean training images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhiteCountModel {
    pub threshold: f64,
    /// `histograms[c][n]` = number of class-`c` images with exactly `n` white pixels.
    pub histograms: Vec<Vec<u64>>,
}

impl WhiteCountModel {
    pub fn fit(data: &LabeledDataset, threshold: f64) -> Self {
        let max = data.image_shape().map_or(0, |(_, h, w)| h * w);
        let mut histograms = vec![vec![0u64; max + 1]; data.num_classes()];
        for (x, y) in data.iter() {
            histograms[y][white_count(x, threshold)] += 1;
        }
        Self { threshold, histograms }
    }

    fn mean(&self, c: usize) -> Option<f64> {
        let h = &self.histograms[c];
        let n: u64 = h.iter().sum();
        (n > 0).then(|| h.iter().enumerate().map(|(i, &v)| i as f64 * v as f64).sum::<f64>() / n as f64)
    }

    /// Class whose mean white count is nearest `n_w` (lowest index on ties).
    pub fn nearest_class(&self, n_w: usize) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for c in 0..self.histograms.len() {
            if let Some(m) = self.mean(c) {
                let d = (m - n_w as f64).abs();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((c, d));
                }
            }
        }
        best.map(|(c, _)| c)
    }

    /// `1 −` add-one smoothed upper-tail p-value of `n_w` under class `c`.
    pub fn statistic_for_count(&self, n_w: usize, class: usize) -> f64 {
        let h = &self.histograms[class];
        let n: u64 = h.iter().sum();
        let tail: u64 = h.iter().skip(n_w).sum();
        1.0 - (tail as f64 + 1.0) / (n as f64 + 1.0)
    }
}

pub fn white_count_statistic(image: &Image, model: &WhiteCountModel) -> Result<f64> {
    let n_w = white_count(image, model.threshold);
    let c = model.nearest_class(n_w).ok_or(DetectorError::NoHistograms)?;
    Ok(model.statistic_for_count(n_w, c))
}

/// Number of 8-connected white regions.
pub fn region_count_statistic(image: &Image, threshold: f64) -> usize {
    let (_, h, w) = image.shape();
    let mask = white_mask(image, threshold);
    let mut seen = vec![false; h * w];
    let mut regions = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        regions += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    regions
}

/// 3×3 uniform mean over in-bounds neighbours, per channel.
pub fn blur(image: &Image) -> Image {
    let (c, h, w) = image.shape();
    let px = image.pixels();
    let mut out = vec![0.0; px.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                let mut n = 0;
                for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        s += px[(ch * h + yy) * w + xx];
                        n += 1;
                    }
                }
                out[(ch * h + y) * w + x] = s / n as f64;
            }
        }
    }
    image.with_pixels(out).expect("mean of valid pixels")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlurStatistic {
    /// Whether the decision changes after blurring.
    pub flipped: bool,
    /// `D(posterior(x) ‖ posterior(blur(x)))`.
    pub kl: f64,
}

pub fn blur_correction_statistic(net: &Network, image: &Image) -> Result<BlurStatistic> {
    let a = net.predict(image)?;
    let b = net.predict(&blur(image))?;
    Ok(BlurStatistic {
        flipped: a.argmax() != b.argmax(),
        kl: kl_divergence(a.probs(), b.probs())?,
    })
}

// -- configured detectors ------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DetectorKind {
    /// `−ln f(z|c*)` at the first layer.
    Baseline,
    /// Two-class ADA at the first layer.
    Ada,
    /// All-class ADA at the first layer.
    AdaAll,
    AdaMaxKl,
    AwAdaMaxKl,
    LAwaMaxKl,
    Confidence,
    WhiteCount,
    RegionCount,
    /// Continuous blur-correction variant (posterior KL).
    Blur,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 10] = [
        DetectorKind::Baseline,
        DetectorKind::Ada,
        DetectorKind::AdaAll,
        DetectorKind::AdaMaxKl,
        DetectorKind::AwAdaMaxKl,
        DetectorKind::LAwaMaxKl,
        DetectorKind::Confidence,
        DetectorKind::WhiteCount,
        DetectorKind::RegionCount,
        DetectorKind::Blur,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::Baseline => "baseline",
            DetectorKind::Ada => "ada",
            DetectorKind::AdaAll => "ada-all",
            DetectorKind::AdaMaxKl => "ada-maxkl",
            DetectorKind::AwAdaMaxKl => "aw-ada-maxkl",
            DetectorKind::LAwaMaxKl => "l-awa-maxkl",
            DetectorKind::Confidence => "confidence",
            DetectorKind::WhiteCount => "white-count",
            DetectorKind::RegionCount => "region-count",
            DetectorKind::Blur => "blur",
        }
    }

    pub fn needs_bank(&self) -> bool {
        matches!(
            self,
            DetectorKind::Baseline
                | DetectorKind::Ada
                | DetectorKind::AdaAll
                | DetectorKind::AdaMaxKl
                | DetectorKind::AwAdaMaxKl
                | DetectorKind::LAwaMaxKl
        )
    }

    pub fn needs_confusion(&self) -> bool {
        matches!(self, DetectorKind::AwAdaMaxKl | DetectorKind::LAwaMaxKl)
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        DetectorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown detector {s:?}"))
    }
}

impl Serialize for DetectorKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for DetectorKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// A detector with everything it needs to score an image.
#[derive(Debug, Clone)]
pub struct Detector {
    pub kind: DetectorKind,
    pub layers: Vec<LayerId>,
    pub orientation: KlOrientation,
    pub binarize_threshold: f64,
    bank: Option<NullModelBank>,
    confusion: Option<ConfusionMatrix>,
    white: Option<WhiteCountModel>,
}

impl Detector {
    pub fn new(kind: DetectorKind, layers: Vec<LayerId>) -> Self {
        Self {
            kind,
            layers,
            orientation: KlOrientation::Forward,
            binarize_threshold: DEFAULT_BINARIZE,
            bank: None,
            confusion: None,
            white: None,
        }
    }

    pub fn with_bank(mut self, bank: NullModelBank) -> Self {
        self.bank = Some(bank);
        self
    }
    pub fn with_confusion(mut self, confusion: ConfusionMatrix) -> Self {
        self.confusion = Some(confusion);
        self
    }
    pub fn with_white_count(mut self, model: WhiteCountModel) -> Self {
        self.white = Some(model);
        self
    }
    pub fn with_orientation(mut self, orientation: KlOrientation) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn bank(&self) -> Option<&NullModelBank> {
        self.bank.as_ref()
    }

    fn need<'a, T>(&self, v: &'a Option<T>, what: &'static str) -> Result<&'a T> {
        v.as_ref().ok_or(DetectorError::MissingComponent { kind: self.kind, what })
    }

    fn first_layer(&self) -> Result<LayerId> {
        self.layers.first().copied().ok_or(DetectorError::NoLayers)
    }

    /// Layers whose activations `score_activations` reads.
    pub fn taps(&self) -> Vec<LayerId> {
        match self.kind {
            DetectorKind::Baseline | DetectorKind::Ada | DetectorKind::AdaAll => self.layers.iter().take(1).copied().collect(),
            k if k.needs_bank() => self.layers.clone(),
            _ => Vec::new(),
        }
    }

    /// Scores an image whose forward pass is already available.
    pub fn score_activations(
        &self,
        net: &Network,
        image: &Image,
        posterior: &Posterior,
        acts: &LayerActivations,
    ) -> Result<Statistic> {
        let o = self.orientation;
        let dest = posterior.argmax();
        match self.kind {
            DetectorKind::Baseline => {
                baseline_density_statistic(self.need(&self.bank, "a null-model bank")?, acts, posterior, self.first_layer()?)
            }
            DetectorKind::Ada => ada_statistic(
                self.need(&self.bank, "a null-model bank")?,
                acts,
                posterior,
                self.first_layer()?,
                ClassMode::Two,
                o,
            ),
            DetectorKind::AdaAll => ada_statistic(
                self.need(&self.bank, "a null-model bank")?,
                acts,
                posterior,
                self.first_layer()?,
                ClassMode::All,
                o,
            ),
            DetectorKind::AdaMaxKl => ada_maxkl(
                self.need(&self.bank, "a null-model bank")?,
                acts,
                posterior,
                &self.layers,
                ClassMode::Two,
                o,
            ),
            DetectorKind::AwAdaMaxKl => {
                let bank = self.need(&self.bank, "a null-model bank")?;
                let conf = self.need(&self.confusion, "a confusion matrix")?;
                maxkl_over_layers(&self.layers, |l| aw_ada_statistic(bank, acts, posterior, conf, l, o))
            }
            DetectorKind::LAwaMaxKl => {
                let bank = self.need(&self.bank, "a pairwise null-model bank")?;
                let conf = self.need(&self.confusion, "a confusion matrix")?;
                maxkl_over_layers(&self.layers, |l| l_awa_statistic(bank, acts, posterior, conf, l, o))
            }
            DetectorKind::Confidence => Ok(Statistic::plain(confidence_statistic(posterior), dest)),
            DetectorKind::WhiteCount => Ok(Statistic::plain(
                white_count_statistic(image, self.need(&self.white, "white-count histograms")?)?,
                dest,
            )),
            DetectorKind::RegionCount => Ok(Statistic::plain(
                region_count_statistic(image, self.binarize_threshold) as f64,
                dest,
            )),
            DetectorKind::Blur => Ok(Statistic::plain(blur_correction_statistic(net, image)?.kl, dest)),
        }
    }

    pub fn score(&self, net: &Network, image: &Image) -> Result<Statistic> {
        let (post, acts) = net.forward(image, &self.taps())?;
        self.score_activations(net, image, &post, &acts)
    }

    pub fn score_all(&self, net: &Network, images: &[Image]) -> Result<Vec<Statistic>> {
        images.iter().map(|x| self.score(net, x)).collect()
    }
}
