//! Targeted adversarial example crafting and the detector-aware white-box attack.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::{self, Image, LabeledDataset};
use crate::detectors::{Detector, DetectorError};
use crate::dnn::{DnnError, Network, Objective};
use crate::rng::{self, tags};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("input decided as {decided}, true class is {true_class}")]
    NotCorrectlyClassified { decided: usize, true_class: usize },
    #[error("input already detected (statistic {statistic} > τ = {threshold})")]
    InitiallyDetected { statistic: f64, threshold: f64 },
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dnn(#[from] DnnError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Dataset(#[from] datasets::DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AttackError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub original: Image,
    pub perturbed: Image,
    pub true_class: usize,
    /// Target class; for the untargeted white-box attack, the class decided at termination.
    pub target_class: usize,
    pub success: bool,
    pub l2_distortion: f64,
    pub modified_pixels: usize,
    pub iterations: usize,
    /// White-box only: total cost after every accepted move, starting with the initial cost.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cost_trace: Vec<f64>,
}

impl AttackRecord {
    fn new(original: &Image, perturbed: Image, true_class: usize, target: usize, success: bool, iterations: usize) -> Self {
        Self {
            l2_distortion: original.l2_distance(&perturbed),
            modified_pixels: original.count_differing(&perturbed),
            original: original.clone(),
            perturbed,
            true_class,
            target_class: target,
            success,
            iterations,
            cost_trace: Vec::new(),
        }
    }

    pub const CSV_HEADER: &'static str = "source_index,true_class,target_class,success,l2_distortion,modified_pixels,iterations";

    /// One CSV line; `source_index` locates the original in its dataset.
    pub fn csv_row(&self, source_index: usize) -> String {
        format!(
            "{source_index},{},{},{},{},{},{}",
            self.true_class,
            self.target_class,
            u8::from(self.success),
            self.l2_distortion,
            self.modified_pixels,
            self.iterations
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackKind {
    Fgsm,
    Jsma,
    Cw,
    WhiteBox,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Jsma => "jsma",
            AttackKind::Cw => "cw",
            AttackKind::WhiteBox => "whitebox",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "fgsm" => AttackKind::Fgsm,
            "jsma" => AttackKind::Jsma,
            "cw" | "cw-l2" => AttackKind::Cw,
            "whitebox" | "white-box" => AttackKind::WhiteBox,
            other => return Err(format!("unknown attack {other:?}")),
        })
    }
}

impl Serialize for AttackKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for AttackKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Attack parameters. `strength` is the FGSM step, the JSMA pixel fraction,
/// or the CW / white-box Lagrange multiplier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub strength: f64,
    /// FGSM/CW iteration cap; white-box pass cap.
    pub max_iters: usize,
    /// CW gradient step.
    #[serde(default = "default_cw_step")]
    pub cw_step: f64,
    /// White-box coordinate step.
    #[serde(default = "default_wb_step")]
    pub whitebox_step: f64,
    pub seed: u64,
}

fn default_cw_step() -> f64 {
    0.005
}
fn default_wb_step() -> f64 {
    0.05
}

impl AttackConfig {
    pub fn new(kind: AttackKind, strength: f64) -> Self {
        let max_iters = match kind {
            AttackKind::Fgsm | AttackKind::Cw => 1000,
            AttackKind::Jsma => 1,
            AttackKind::WhiteBox => 50,
        };
        Self {
            kind,
            strength,
            max_iters,
            cw_step: default_cw_step(),
            whitebox_step: default_wb_step(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.strength > 0.0 && self.strength.is_finite()) {
            return Err(AttackError::InvalidConfig(format!("strength {} must be positive", self.strength)));
        }
        if self.max_iters == 0 {
            return Err(AttackError::InvalidConfig("iteration cap must be at least 1".into()));
        }
        if self.kind == AttackKind::Jsma && self.strength > 1.0 {
            return Err(AttackError::InvalidConfig("JSMA fraction must be at most 1".into()));
        }
        Ok(())
    }
}

/// Uniform draw from `{0..K−1} \ {true_class}`.
pub fn select_target(true_class: usize, num_classes: usize, seed: u64) -> usize {
    assert!(num_classes >= 2, "need at least two classes");
    let mut rng = rng::rng_for(seed, &[tags::TARGET]);
    let r = rng.random_range(0..num_classes - 1);
    if r >= true_class {
        r + 1
    } else {
        r
    }
}

fn check_correct(net: &Network, x: &Image, true_class: usize) -> Result<()> {
    let decided = net.decide(x)?;
    if decided != true_class {
        return Err(AttackError::NotCorrectlyClassified { decided, true_class });
    }
    Ok(())
}

/// Iterated targeted gradient descent on cross-entropy toward `target`.
pub fn fgsm_attack(net: &Network, x: &Image, true_class: usize, target: usize, step: f64, max_iters: usize) -> Result<AttackRecord> {
    check_correct(net, x, true_class)?;
    let obj = Objective::CrossEntropy { target };
    let mut cur = x.clone();
    let mut iterations = 0;
    let mut success = false;
    if step > 0.0 {
        while iterations < max_iters {
            let g = net.input_gradient(&cur, &obj)?;
            let px: Vec<f64> = cur.pixels().iter().zip(&g).map(|(p, gi)| p - step * gi).collect();
            cur = Image::clamped(cur.channels(), cur.height(), cur.width(), px)?;
            iterations += 1;
            if net.decide(&cur)? == target {
                success = true;
                break;
            }
        }
    }
    Ok(AttackRecord::new(x, cur, true_class, target, success, iterations))
}

/// Pixels below this value count as dark for JSMA.
pub const JSMA_DARK: f64 = 0.5;

/// Saliency-map selection: returns the element to saturate, or `None` when no
/// candidate can help.
fn jsma_pick(alpha: &[f64], beta: &[f64], candidate: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..alpha.len() {
        if candidate[i] && alpha[i] > 0.0 && beta[i] < 0.0 {
            let s = alpha[i] * beta[i].abs();
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    if best.is_none() {
        for i in 0..alpha.len() {
            let s = alpha[i] - beta[i];
            if candidate[i] && s > 0.0 && best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Greedy saliency-map attack saturating dark elements (pixels, or pixel
/// colour planes) to 1, up to `round(max_fraction·d)` of them.
pub fn jsma_attack(net: &Network, x: &Image, true_class: usize, target: usize, max_fraction: f64) -> Result<AttackRecord> {
    check_correct(net, x, true_class)?;
    let k = net.num_classes();
    let d = x.len();
    let budget = (max_fraction * d as f64).round() as usize;
    let mut one_hot = vec![0.0; k];
    one_hot[target] = 1.0;
    let others: Vec<f64> = (0..k).map(|j| if j == target { 0.0 } else { 1.0 }).collect();
    let mut cur = x.clone();
    let mut candidate: Vec<bool> = x.pixels().iter().map(|&p| p < JSMA_DARK).collect();
    let mut used = 0;
    let mut success = false;
    while used < budget {
        let alpha = net.input_gradient(&cur, &Objective::LogitCombination(one_hot.clone()))?;
        let beta = net.input_gradient(&cur, &Objective::LogitCombination(others.clone()))?;
        let Some(i) = jsma_pick(&alpha, &beta, &candidate) else { break };
        let mut px = cur.pixels().to_vec();
        px[i] = 1.0;
        candidate[i] = false;
        cur = cur.with_pixels(px)?;
        used += 1;
        if net.decide(&cur)? == target {
            success = true;
            break;
        }
    }
    Ok(AttackRecord::new(x, cur, true_class, target, success, used))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CwParams {
    pub step: f64,
    pub iterations: usize,
}

impl Default for CwParams {
    fn default() -> Self {
        Self {
            step: default_cw_step(),
            iterations: 1000,
        }
    }
}

/// Projected gradient descent on `‖δ‖² + c·max(0, max_{j≠t} z_j − z_t)` over
/// `x + δ ∈ [0,1]^d`, keeping the lowest-distortion successful iterate.
pub fn cw_l2_attack(net: &Network, x: &Image, true_class: usize, target: usize, c: f64, params: CwParams) -> Result<AttackRecord> {
    check_correct(net, x, true_class)?;
    let obj = Objective::LogitMargin { target };
    let x0 = x.pixels();
    let mut cur = x.clone();
    let mut best: Option<(f64, Image, usize)> = None;
    let mut iterations = 0;
    if c > 0.0 {
        for it in 1..=params.iterations {
            let (margin, g, _) = net.value_and_input_gradient(&cur, &obj)?;
            let px: Vec<f64> = cur
                .pixels()
                .iter()
                .zip(x0)
                .zip(&g)
                .map(|((p, o), gi)| {
                    let hinge = if margin > 0.0 { c * gi } else { 0.0 };
                    p - params.step * (2.0 * (p - o) + hinge)
                })
                .collect();
            cur = Image::clamped(x.channels(), x.height(), x.width(), px)?;
            iterations = it;
            if net.decide(&cur)? == target {
                let dist = x.l2_distance(&cur);
                if best.as_ref().is_none_or(|(b, _, _)| dist < *b) {
                    best = Some((dist, cur.clone(), it));
                }
            }
        }
    }
    Ok(match best {
        Some((_, img, _)) => AttackRecord::new(x, img, true_class, target, true, iterations),
        None => AttackRecord::new(x, x.clone(), true_class, target, false, iterations),
    })
}

/// Untargeted Carlini–Wagner loss on the true class: `max(0, z_y − max_{j≠y} z_j)`.
fn untargeted_loss(logits: &[f64], true_class: usize) -> f64 {
    let other = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != true_class)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    (logits[true_class] - other).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WhiteBoxParams {
    pub lagrange_c: f64,
    pub threshold: f64,
    pub step: f64,
    pub max_passes: usize,
    /// Reject inputs that are misclassified or already detected.
    pub require_clean_input: bool,
}

impl WhiteBoxParams {
    pub fn new(lagrange_c: f64, threshold: f64) -> Self {
        Self {
            lagrange_c,
            threshold,
            step: default_wb_step(),
            max_passes: 50,
            require_clean_input: true,
        }
    }
}

/// Coordinate descent on `‖δ‖₂ + c·(f(x+δ) + max(0, D(x+δ) − τ))`.
///
/// Elements are visited pixel by pixel (row-major) and, within a pixel, colour
/// plane by colour plane. Each element tries `+step` then `−step` (clamped) and
/// keeps the first move that strictly lowers the cost. The search stops after
/// two consecutive passes whose total accepted change is below 1e-4, or after
/// `max_passes`.
pub fn whitebox_attack(net: &Network, detector: &Detector, x: &Image, true_class: usize, params: WhiteBoxParams) -> Result<AttackRecord> {
    let cost_of = |img: &Image| -> Result<(f64, usize, f64)> {
        let logits = net.logits(img)?;
        let stat = detector.score(net, img)?.value;
        let f = untargeted_loss(&logits, true_class);
        let d = (stat - params.threshold).max(0.0);
        let decided = crate::dnn::argmax(&logits);
        Ok((x.l2_distance(img) + params.lagrange_c * (f + d), decided, stat))
    };
    let (mut cost, decided0, stat0) = cost_of(x)?;
    if params.require_clean_input {
        if decided0 != true_class {
            return Err(AttackError::NotCorrectlyClassified {
                decided: decided0,
                true_class,
            });
        }
        if stat0 > params.threshold {
            return Err(AttackError::InitiallyDetected {
                statistic: stat0,
                threshold: params.threshold,
            });
        }
    }
    let (c, h, w) = x.shape();
    let mut px = x.pixels().to_vec();
    let mut trace = vec![cost];
    let mut quiet_passes = 0;
    let mut passes = 0;
    while passes < params.max_passes && quiet_passes < 2 {
        passes += 1;
        let mut change = 0.0;
        for pos in 0..h * w {
            for ch in 0..c {
                let i = ch * h * w + pos;
                let old = px[i];
                for dir in [1.0, -1.0] {
                    let new = (old + dir * params.step).clamp(0.0, 1.0);
                    if new == old {
                        continue;
                    }
                    px[i] = new;
                    let cand = x.with_pixels(px.clone())?;
                    let (cc, _, _) = cost_of(&cand)?;
                    if cc < cost {
                        cost = cc;
                        trace.push(cc);
                        change += (new - old).abs();
                        break;
                    }
                    px[i] = old;
                }
            }
        }
        quiet_passes = if change < 1e-4 { quiet_passes + 1 } else { 0 };
    }
    let out = x.with_pixels(px)?;
    let decided = net.decide(&out)?;
    let stat = detector.score(net, &out)?.value;
    let success = decided != true_class && stat <= params.threshold;
    let mut rec = AttackRecord::new(x, out, true_class, decided, success, passes);
    rec.cost_trace = trace;
    Ok(rec)
}

/// Runs the configured targeted attack (FGSM, JSMA or CW) on one image.
pub fn run_targeted(net: &Network, x: &Image, true_class: usize, target: usize, cfg: &AttackConfig) -> Result<AttackRecord> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm_attack(net, x, true_class, target, cfg.strength, cfg.max_iters),
        AttackKind::Jsma => jsma_attack(net, x, true_class, target, cfg.strength),
        AttackKind::Cw => cw_l2_attack(
            net,
            x,
            true_class,
            target,
            cfg.strength,
            CwParams {
                step: cfg.cw_step,
                iterations: cfg.max_iters,
            },
        ),
        AttackKind::WhiteBox => Err(AttackError::InvalidConfig(
            "the white-box attack needs a detector; use whitebox_attack".into(),
        )),
    }
}

/// Attacks the first `max_attempts` correctly classified images of `data`,
/// with a uniformly drawn target per image. Returns every attempt with the
/// index of its source image.
pub fn craft_attacks(net: &Network, data: &LabeledDataset, cfg: &AttackConfig, max_attempts: usize) -> Result<Vec<(usize, AttackRecord)>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (i, (x, y)) in data.iter().enumerate() {
        if out.len() >= max_attempts {
            break;
        }
        if net.decide(x)? != y {
            continue;
        }
        let target = select_target(y, data.num_classes(), rng::derive_seed(cfg.seed, &[i as u64]));
        out.push((i, run_targeted(net, x, y, target, cfg)?));
    }
    Ok(out)
}

/// Fraction of attempts that succeeded.
pub fn craft_rate(records: &[AttackRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.success).count() as f64 / records.len() as f64
}

/// Writes `(source index, record)` pairs as CSV with an optional leading comment line.
pub fn write_records_csv(mut w: impl Write, records: &[(usize, AttackRecord)], comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        writeln!(w, "{c}")?;
    }
    writeln!(w, "{}", AttackRecord::CSV_HEADER)?;
    for (i, r) in records {
        writeln!(w, "{}", r.csv_row(*i))?;
    }
    Ok(())
}

/// IDX-f32 tensors of the original and perturbed images, in record order.
pub fn record_tensors(records: &[(usize, AttackRecord)]) -> (datasets::FloatTensor, datasets::FloatTensor) {
    let orig: Vec<Image> = records.iter().map(|(_, r)| r.original.clone()).collect();
    let pert: Vec<Image> = records.iter().map(|(_, r)| r.perturbed.clone()).collect();
    (datasets::images_to_tensor(&orig), datasets::images_to_tensor(&pert))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::DetectorKind;
    use crate::dnn::{LayerId, LayerSpec, NetworkSpec, Shape};

    /// Dense(n→k) → RELU → Dense(k→k, identity) → softmax, with a large bias so
    /// the RELU stays active and logits are exactly `W x + b`.
    fn linear_net(w: &[f64], b: &[f64], n: usize, k: usize) -> Network {
        let spec = NetworkSpec::new(
            Shape::new(1, 1, n),
            vec![LayerSpec::Dense { out: k }, LayerSpec::Relu, LayerSpec::Dense { out: k }, LayerSpec::Softmax],
            k,
        )
        .unwrap();
        let mut net = Network::zeros(spec);
        {
            let (nw, nb) = net.layer_params_mut(LayerId(0)).unwrap();
            nw.copy_from_slice(w);
            for (o, v) in nb.iter_mut().zip(b) {
                *o = v + 50.0;
            }
        }
        let (iw, _) = net.layer_params_mut(LayerId(2)).unwrap();
        for i in 0..k {
            iw[i * k + i] = 1.0;
        }
        net
    }

    #[test]
    fn select_target_forced_and_deterministic() {
        for s in 0..50 {
            assert_eq!(select_target(0, 2, s), 1);
            assert_eq!(select_target(1, 2, s), 0);
            assert_eq!(select_target(3, 10, s), select_target(3, 10, s));
            assert_ne!(select_target(3, 10, s), 3);
        }
    }

    #[test]
    fn select_target_is_uniform() {
        let mut counts = [0usize; 10];
        let n = 100_000;
        for s in 0..n {
            counts[select_target(4, 10, s as u64)] += 1;
        }
        assert_eq!(counts[4], 0);
        let p = 1.0 / 9.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for (c, &v) in counts.iter().enumerate() {
            if c != 4 {
                assert!((v as f64 - n as f64 * p).abs() < 3.0 * sd, "class {c}: {v}");
            }
        }
    }

    fn two_class() -> (Network, Image) {
        // class 0 favoured by pixel 0, class 1 by pixel 1
        let net = linear_net(&[2.0, -1.0, -1.0, 2.0], &[0.0, 0.0], 2, 2);
        (net, Image::new(1, 1, 2, vec![0.6, 0.4]).unwrap())
    }

    #[test]
    fn fgsm_zero_step_is_noop() {
        let (net, x) = two_class();
        let r = fgsm_attack(&net, &x, 0, 1, 0.0, 100).unwrap();
        assert!(!r.success);
        assert_eq!(r.perturbed, x);
    }

    #[test]
    fn fgsm_linear_iteration_count_matches_recursion() {
        let (net, x) = two_class();
        // margin m = (w1 − w0)·x; each step adds step·(1 − σ(m))·‖w1 − w0‖²
        let a = [-3.0, 3.0];
        let na2 = 18.0;
        let step = 0.001;
        let mut m: f64 = a[0] * 0.6 + a[1] * 0.4;
        let mut xs = [0.6, 0.4];
        let mut expected = 0;
        while m <= 0.0 {
            let s = 1.0 - 1.0 / (1.0 + (-m).exp());
            m += step * s * na2;
            xs[0] += step * s * a[0];
            xs[1] += step * s * a[1];
            expected += 1;
        }
        assert!(xs.iter().all(|v| (0.0..=1.0).contains(v)));
        let r = fgsm_attack(&net, &x, 0, 1, step, 10_000).unwrap();
        assert!(r.success);
        assert_eq!(r.iterations, expected);
    }

    #[test]
    fn fgsm_rejects_misclassified() {
        let (net, _) = two_class();
        let x = Image::new(1, 1, 2, vec![0.1, 0.9]).unwrap();
        assert!(matches!(
            fgsm_attack(&net, &x, 0, 1, 0.01, 10),
            Err(AttackError::NotCorrectlyClassified { decided: 1, true_class: 0 })
        ));
    }

    #[test]
    fn jsma_zero_budget_is_noop() {
        let (net, x) = two_class();
        let r = jsma_attack(&net, &x, 0, 1, 0.0).unwrap();
        assert!(!r.success && r.perturbed == x && r.modified_pixels == 0);
    }

    #[test]
    fn jsma_greedy_matches_exhaustive_single_saturation() {
        // width-4 binary input, 3 classes, linear logits: saturating a dark
        // pixel changes the logits by exactly that pixel's weight column.
        let w = [
            0.5, -1.0, 0.2, 0.1, // class 0
            1.5, 0.3, -0.4, 0.9, // class 1 (target)
            -0.8, -0.6, 0.7, -1.2, // class 2
        ];
        let b = [2.0, 0.0, 0.0];
        let net = linear_net(&w, &b, 4, 3);
        let x = Image::new(1, 1, 4, vec![0.0; 4]).unwrap();
        assert_eq!(net.decide(&x).unwrap(), 0);
        let target = 1;
        // oracle: saturate each candidate, measure exact logit deltas
        let mut cur = vec![0.0; 4];
        let mut picks = Vec::new();
        loop {
            let base = net.logits(&Image::new(1, 1, 4, cur.clone()).unwrap()).unwrap();
            let mut best: Option<(usize, f64)> = None;
            for i in 0..4 {
                if cur[i] >= 0.5 {
                    continue;
                }
                let mut t = cur.clone();
                t[i] = 1.0;
                let l = net.logits(&Image::new(1, 1, 4, t).unwrap()).unwrap();
                let da = l[target] - base[target];
                let db: f64 = (0..3).filter(|&j| j != target).map(|j| l[j] - base[j]).sum();
                if da > 0.0 && db < 0.0 && best.is_none_or(|(_, s)| da * db.abs() > s) {
                    best = Some((i, da * db.abs()));
                }
            }
            let Some((i, _)) = best else { break };
            cur[i] = 1.0;
            picks.push(i);
            if net.decide(&Image::new(1, 1, 4, cur.clone()).unwrap()).unwrap() == target {
                break;
            }
        }
        let r = jsma_attack(&net, &x, 0, target, 1.0).unwrap();
        let mut got: Vec<usize> = (0..4).filter(|&i| r.perturbed.pixels()[i] == 1.0).collect();
        got.sort();
        let mut want = picks.clone();
        want.sort();
        assert_eq!(got, want);
        assert!(r.success);
        assert_eq!(r.iterations, picks.len());
    }

    #[test]
    fn jsma_respects_budget_and_only_brightens() {
        let net = Network::new(NetworkSpec::lenet5(10), 3);
        let x = crate::datasets::Image::new(1, 28, 28, (0..784).map(|i| ((i * 37) % 100) as f64 / 100.0).collect()).unwrap();
        let y = net.decide(&x).unwrap();
        let r = jsma_attack(&net, &x, y, (y + 1) % 10, 0.02).unwrap();
        assert!(r.modified_pixels <= (0.02f64 * 784.0).round() as usize);
        for (a, b) in x.pixels().iter().zip(r.perturbed.pixels()) {
            assert!(b >= a);
        }
    }

    #[test]
    fn cw_zero_multiplier_is_noop() {
        let (net, x) = two_class();
        let r = cw_l2_attack(&net, &x, 0, 1, 0.0, CwParams::default()).unwrap();
        assert!(!r.success && r.l2_distortion == 0.0);
    }

    #[test]
    fn cw_linear_reaches_min_norm_crossing() {
        let (net, x) = two_class();
        // min-L2 crossing: δ* = (m0/‖a‖²)·a with a = w1 − w0, m0 = −a·x
        let m0: f64 = -(-3.0 * 0.6 + 3.0 * 0.4);
        let analytic = m0 / 18f64.sqrt();
        let r = cw_l2_attack(&net, &x, 0, 1, 10.0, CwParams { step: 0.001, iterations: 1000 }).unwrap();
        assert!(r.success);
        assert!((r.l2_distortion - analytic).abs() <= 0.05 * analytic, "{} vs {}", r.l2_distortion, analytic);
    }

    #[test]
    fn whitebox_fixed_point_on_misclassified_undetected() {
        let (net, _) = two_class();
        let x = Image::new(1, 1, 2, vec![0.2, 0.8]).unwrap();
        let det = Detector::new(DetectorKind::Confidence, vec![]);
        let mut p = WhiteBoxParams::new(1.0, 1.0);
        p.require_clean_input = false;
        let r = whitebox_attack(&net, &det, &x, 0, p).unwrap();
        assert_eq!(r.perturbed, x);
        assert_eq!(r.cost_trace, vec![0.0]);
        assert!(r.success);
    }

    #[test]
    fn whitebox_costs_strictly_decrease_and_success_verifies() {
        let (net, x) = two_class();
        let det = Detector::new(DetectorKind::Confidence, vec![]);
        let tau = 0.45;
        let r = whitebox_attack(&net, &det, &x, 0, WhiteBoxParams::new(5.0, tau)).unwrap();
        assert!(r.cost_trace.windows(2).all(|w| w[1] < w[0]));
        let decided = net.decide(&r.perturbed).unwrap();
        let stat = det.score(&net, &r.perturbed).unwrap().value;
        assert_eq!(r.success, decided != 0 && stat <= tau);
        assert!(matches!(
            whitebox_attack(&net, &det, &x, 0, WhiteBoxParams::new(5.0, 0.0)),
            Err(AttackError::InitiallyDetected { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::new(AttackKind::Fgsm, 0.0).validate().is_err());
        assert!(AttackConfig::new(AttackKind::Jsma, 1.5).validate().is_err());
        assert!(AttackConfig::new(AttackKind::Cw, 3.0).validate().is_ok());
        for k in ["fgsm", "jsma", "cw", "whitebox"] {
            assert_eq!(k.parse::<AttackKind>().unwrap().name(), k);
        }
    }
}
