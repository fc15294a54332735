//! Class-conditional null densities over tapped activations.
//!
//! Three families are supported: a Gaussian kernel estimator with a shared
//! isotropic bandwidth, Gaussian mixtures (full or diagonal covariance) fitted
//! by EM with BIC order selection, and log-normal mixtures, which are Gaussian
//! mixtures fitted to `ln(z + ε)`.
//!
//! EM uses a ridge prior on every covariance: the M-step sets
//! `Σ_k = (S_k + λI) / N_k`, the MAP update for a penalty `-½λ·tr(Σ_k⁻¹)`.
//! The tracked objective is the penalized log-likelihood, which EM never
//! decreases. With `reg_covar = 0` it is the plain log-likelihood.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::LabeledDataset;
use crate::dnn::{DnnError, LayerId, Network, NetworkSpec};
use crate::numerics::{cholesky, log_sum_exp_unchecked, CholeskyFactor, Matrix, NumericsError, LN_2PI};
use crate::provenance::Provenance;
use crate::rng::{self, tags};

/// Offset added before the log transform so exact-zero RELU outputs stay finite.
pub const LOG_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum NullModelError {
    #[error("too few samples: need {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("mixture component collapsed (weight {weight:e}) after re-seeding")]
    DegenerateComponent { weight: f64 },
    #[error("negative input {value} at coordinate {index} for a log-normal model")]
    NegativeInput { index: usize, value: f64 },
    #[error("dimension mismatch: model has {expected}, input has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("class {class} at layer {layer} has {count} samples, need {needed}")]
    ClassUnderpopulated {
        layer: LayerId,
        class: usize,
        count: usize,
        needed: usize,
    },
    #[error("empty k range")]
    EmptyKRange,
    #[error("no model for layer {layer}, class {class}")]
    MissingModel { layer: LayerId, class: usize },
    #[error("invalid samples: {0}")]
    InvalidSamples(String),
    #[error("corrupt bank artifact at byte {offset}: {message}")]
    Corrupt { offset: usize, message: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Dnn(#[from] DnnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NullModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceKind {
    Full,
    Diag,
}

/// Density family for one tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Kernel,
    Gmm(CovarianceKind),
    LogNormal(CovarianceKind),
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Kernel => "kernel",
            Family::Gmm(CovarianceKind::Full) => "gmm-full",
            Family::Gmm(CovarianceKind::Diag) => "gmm-diag",
            Family::LogNormal(CovarianceKind::Full) => "lognormal-full",
            Family::LogNormal(CovarianceKind::Diag) => "lognormal-diag",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "kernel" => Family::Kernel,
            "gmm-full" => Family::Gmm(CovarianceKind::Full),
            "gmm-diag" => Family::Gmm(CovarianceKind::Diag),
            "lognormal-full" => Family::LogNormal(CovarianceKind::Full),
            "lognormal" | "lognormal-diag" => Family::LogNormal(CovarianceKind::Diag),
            other => return Err(format!("unknown density family {other:?}")),
        })
    }
}

impl Serialize for Family {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Family {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SupportTransform {
    Identity,
    LogOffset { eps: f64 },
}

impl SupportTransform {
    /// Maps `z` into the fitting space and returns the log-Jacobian.
    fn apply(&self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        match *self {
            SupportTransform::Identity => Ok((z.to_vec(), 0.0)),
            SupportTransform::LogOffset { eps } => {
                let mut jac = 0.0;
                let mut y = Vec::with_capacity(z.len());
                for (i, &v) in z.iter().enumerate() {
                    if v < 0.0 || v.is_nan() {
                        return Err(NullModelError::NegativeInput { index: i, value: v });
                    }
                    let t = (v + eps).ln();
                    jac -= t;
                    y.push(t);
                }
                Ok((y, jac))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Covariances {
    Full(Vec<(Matrix, CholeskyFactor)>),
    Diag(Vec<Vec<f64>>),
    /// One variance shared by every component and coordinate.
    SharedIsotropic(f64),
}

/// Diagnostics recorded by the fitting routine.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    /// Log-likelihood of the training samples under the returned model
    /// (in the original space, Jacobian included).
    pub log_likelihood: f64,
    pub num_samples: usize,
    /// BIC, when the model came from order selection or a GMM fit.
    pub bic: Option<f64>,
    pub iterations: usize,
    /// Ridge added to every covariance diagonal before dividing by `N_k`.
    pub reg_lambda: f64,
    /// Penalized objective after each E-step since the last (re)start.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_trace: Vec<f64>,
    pub reseeded: bool,
}

/// A finite Gaussian mixture, possibly in a transformed support.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    family: Family,
    transform: SupportTransform,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Covariances,
    // cached per-component normalizers: ln w_k - d/2 ln 2π - ½ ln|Σ_k|
    log_norms: Vec<f64>,
    summary: FitSummary,
}

impl MixtureModel {
    fn assemble(
        family: Family,
        transform: SupportTransform,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Covariances,
        summary: FitSummary,
    ) -> Self {
        let d = means.first().map_or(0, Vec::len) as f64;
        let log_norms = weights
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let half_log_det = match &covs {
                    Covariances::Full(c) => c[k].1.half_log_det(),
                    Covariances::Diag(v) => 0.5 * v[k].iter().map(|x| x.ln()).sum::<f64>(),
                    Covariances::SharedIsotropic(s) => 0.5 * d * s.ln(),
                };
                w.ln() - 0.5 * d * LN_2PI - half_log_det
            })
            .collect();
        Self {
            family,
            transform,
            weights,
            means,
            covs,
            log_norms,
            summary,
        }
    }

    /// Builds a model from explicit parameters (full covariance matrices).
    pub fn from_full(
        family: Family,
        transform: SupportTransform,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covariances: Vec<Matrix>,
    ) -> Result<Self> {
        check_params(&weights, &means)?;
        if covariances.len() != weights.len() {
            return Err(NullModelError::InvalidSamples("one covariance per component".into()));
        }
        let covs = covariances
            .into_iter()
            .map(|m| cholesky(&m).map(|c| (m, c)))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self::assemble(family, transform, weights, means, Covariances::Full(covs), FitSummary::default()))
    }

    /// Builds a model from explicit parameters (diagonal variances).
    pub fn from_diag(
        family: Family,
        transform: SupportTransform,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_params(&weights, &means)?;
        if variances.len() != weights.len()
            || variances
                .iter()
                .any(|v| v.len() != means[0].len() || v.iter().any(|&x| !(x > 0.0 && x.is_finite())))
        {
            return Err(NullModelError::InvalidSamples("bad diagonal variances".into()));
        }
        Ok(Self::assemble(family, transform, weights, means, Covariances::Diag(variances), FitSummary::default()))
    }

    /// Kernel estimator with the given centers and bandwidth variance.
    pub fn kernel(centers: Vec<Vec<f64>>, variance: f64) -> Result<Self> {
        if centers.is_empty() {
            return Err(NullModelError::TooFewSamples { needed: 1, got: 0 });
        }
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(NullModelError::InvalidSamples(format!("bandwidth variance {variance}")));
        }
        let n = centers.len();
        check_params(&vec![1.0 / n as f64; n], &centers)?;
        Ok(Self::assemble(
            Family::Kernel,
            SupportTransform::Identity,
            vec![1.0 / n as f64; n],
            centers,
            Covariances::SharedIsotropic(variance),
            FitSummary::default(),
        ))
    }

    pub fn family(&self) -> Family {
        self.family
    }
    pub fn transform(&self) -> SupportTransform {
        self.transform
    }
    pub fn num_components(&self) -> usize {
        self.weights.len()
    }
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }
    pub fn summary(&self) -> &FitSummary {
        &self.summary
    }

    /// Covariance of component `k` as a dense matrix.
    pub fn covariance(&self, k: usize) -> Matrix {
        match &self.covs {
            Covariances::Full(c) => c[k].0.clone(),
            Covariances::Diag(v) => Matrix::diagonal(&v[k]),
            Covariances::SharedIsotropic(s) => {
                let mut m = Matrix::identity(self.dim());
                m.add_to_diagonal(s - 1.0);
                m
            }
        }
    }

    /// Shared bandwidth variance for kernel models.
    pub fn bandwidth_variance(&self) -> Option<f64> {
        match self.covs {
            Covariances::SharedIsotropic(s) => Some(s),
            _ => None,
        }
    }

    /// Number of free parameters counted by BIC.
    pub fn num_free_params(&self) -> usize {
        bic_param_count(self.num_components(), self.dim(), self.cov_kind())
    }

    fn cov_kind(&self) -> CovarianceKind {
        match self.covs {
            Covariances::Full(_) => CovarianceKind::Full,
            _ => CovarianceKind::Diag,
        }
    }

    /// `ln f(z)` including the Jacobian of the support transform.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(NullModelError::DimensionMismatch {
                expected: self.dim(),
                got: z.len(),
            });
        }
        let (y, jac) = self.transform.apply(z)?;
        Ok(self.log_density_fit_space(&y) + jac)
    }

    /// Per-component log terms `ln w_k + ln N(y; μ_k, Σ_k)` in the fitting space.
    fn component_terms(&self, y: &[f64], out: &mut Vec<f64>, scratch: &mut Vec<f64>) {
        out.clear();
        for (k, mean) in self.means.iter().enumerate() {
            let quad = match &self.covs {
                Covariances::Full(c) => {
                    scratch.clear();
                    scratch.extend(y.iter().zip(mean).map(|(a, b)| a - b));
                    forward_solve_sq(&c[k].1, scratch)
                }
                Covariances::Diag(v) => y
                    .iter()
                    .zip(mean)
                    .zip(&v[k])
                    .map(|((a, b), s)| (a - b) * (a - b) / s)
                    .sum(),
                Covariances::SharedIsotropic(s) => sq_dist(y, mean) / s,
            };
            out.push(self.log_norms[k] - 0.5 * quad);
        }
    }

    fn log_density_fit_space(&self, y: &[f64]) -> f64 {
        let mut terms = Vec::with_capacity(self.num_components());
        let mut scratch = Vec::new();
        self.component_terms(y, &mut terms, &mut scratch);
        log_sum_exp_unchecked(&terms)
    }
}

fn check_params(weights: &[f64], means: &[Vec<f64>]) -> Result<()> {
    if weights.is_empty() || weights.len() != means.len() {
        return Err(NullModelError::InvalidSamples("one mean per component".into()));
    }
    let d = means[0].len();
    if d == 0 || means.iter().any(|m| m.len() != d || m.iter().any(|v| !v.is_finite())) {
        return Err(NullModelError::InvalidSamples("ragged or non-finite means".into()));
    }
    let s: f64 = weights.iter().sum();
    if weights.iter().any(|&w| !(w > 0.0)) || (s - 1.0).abs() > 1e-9 {
        return Err(NullModelError::InvalidSamples("weights must be positive and sum to 1".into()));
    }
    Ok(())
}

/// ‖L⁻¹v‖², solving in place.
fn forward_solve_sq(chol: &CholeskyFactor, v: &mut [f64]) -> f64 {
    let l = chol.lower();
    let mut acc = 0.0;
    for i in 0..v.len() {
        let row = l.row(i);
        let mut s = v[i];
        for k in 0..i {
            s -= row[k] * v[k];
        }
        let yi = s / row[i];
        v[i] = yi;
        acc += yi * yi;
    }
    acc
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn validate_samples(samples: &[Vec<f64>]) -> Result<usize> {
    let d = samples
        .first()
        .map(Vec::len)
        .ok_or(NullModelError::TooFewSamples { needed: 1, got: 0 })?;
    if d == 0 {
        return Err(NullModelError::InvalidSamples("zero-dimensional samples".into()));
    }
    for s in samples {
        if s.len() != d {
            return Err(NullModelError::DimensionMismatch { expected: d, got: s.len() });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(NullModelError::InvalidSamples("non-finite sample".into()));
        }
    }
    Ok(d)
}

// -- kernel density ---------------------------------------------------------

/// Leave-one-out log-likelihood of an isotropic kernel estimator with variance `s`,
/// given pairwise squared distances.
fn kernel_loo_ll(dist: &[f64], n: usize, d: usize, s: f64) -> f64 {
    let mut total = 0.0;
    let mut terms = Vec::with_capacity(n - 1);
    for i in 0..n {
        terms.clear();
        for j in 0..n {
            if j != i {
                terms.push(-dist[i * n + j] / (2.0 * s));
            }
        }
        total += log_sum_exp_unchecked(&terms);
    }
    total - n as f64 * ((n as f64 - 1.0).ln() + 0.5 * d as f64 * (LN_2PI + s.ln()))
}

/// Gaussian kernel estimator whose shared variance maximizes the
/// leave-one-out log-likelihood.
///
/// A 41-point log grid spanning `10^-4..10^1` times the mean per-coordinate
/// squared pair distance is scanned, then the best cell is refined by
/// golden-section search in `ln s`.
pub fn fit_kernel_density(samples: &[Vec<f64>]) -> Result<MixtureModel> {
    let n = samples.len();
    if n < 2 {
        return Err(NullModelError::TooFewSamples { needed: 2, got: n });
    }
    let d = validate_samples(samples)?;
    let mut dist = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sq_dist(&samples[i], &samples[j]);
            dist[i * n + j] = v;
            dist[j * n + i] = v;
            sum += v;
        }
    }
    if sum == 0.0 {
        return Err(NullModelError::InvalidSamples("all samples identical".into()));
    }
    let base = sum / (n * (n - 1) / 2) as f64 / d as f64;
    let grid: Vec<f64> = (0..=40).map(|t| base * 10f64.powf(-4.0 + t as f64 / 8.0)).collect();
    let scores: Vec<f64> = grid.iter().map(|&s| kernel_loo_ll(&dist, n, d, s)).collect();
    let best = (0..grid.len())
        .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
        .expect("nonempty grid");
    let lo = grid[best.saturating_sub(1)].ln();
    let hi = grid[(best + 1).min(grid.len() - 1)].ln();
    let f = |t: f64| kernel_loo_ll(&dist, n, d, t.exp());
    let (mut a, mut b) = (lo, hi);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut e = a + phi * (b - a);
    let (mut fc, mut fe) = (f(c), f(e));
    for _ in 0..60 {
        if fc >= fe {
            b = e;
            e = c;
            fe = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = e;
            fc = fe;
            e = a + phi * (b - a);
            fe = f(e);
        }
    }
    let mid = 0.5 * (a + b);
    let (s, loo) = [(grid[best], scores[best]), (mid.exp(), f(mid))]
        .into_iter()
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .expect("two candidates");
    let mut model = MixtureModel::kernel(samples.to_vec(), s)?;
    model.summary = FitSummary {
        log_likelihood: loo,
        num_samples: n,
        ..FitSummary::default()
    };
    Ok(model)
}

// -- Gaussian mixtures --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmOptions {
    pub max_iter: usize,
    /// Relative objective change below which EM stops.
    pub tol: f64,
    /// Ridge λ as a multiple of the mean per-coordinate sample variance.
    pub reg_covar: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-6,
            reg_covar: 1e-6,
        }
    }
}

/// Minimum sample count for a `k`-component fit in `d` dimensions.
pub fn min_samples(k: usize, d: usize, cov: CovarianceKind) -> usize {
    match cov {
        CovarianceKind::Full => 5 * k * d,
        CovarianceKind::Diag => 5 * k,
    }
}

/// `p` in `BIC = −2·LL + p·ln N`.
pub fn bic_param_count(k: usize, d: usize, cov: CovarianceKind) -> usize {
    match cov {
        CovarianceKind::Full => (k - 1) + k * d + k * d * (d + 1) / 2,
        CovarianceKind::Diag => (k - 1) + 2 * k * d,
    }
}

pub fn bic(log_likelihood: f64, k: usize, d: usize, n: usize, cov: CovarianceKind) -> f64 {
    -2.0 * log_likelihood + bic_param_count(k, d, cov) as f64 * (n as f64).ln()
}

struct Params {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Covariances,
}

impl Params {
    fn model(&self, family: Family) -> MixtureModel {
        MixtureModel::assemble(
            family,
            SupportTransform::Identity,
            self.weights.clone(),
            self.means.clone(),
            self.covs.clone(),
            FitSummary::default(),
        )
    }
}

/// Weight below which a component counts as collapsed.
const COLLAPSE_WEIGHT: f64 = 1e-8;

fn global_moments(x: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() as f64;
    let d = x[0].len();
    let mut mean = vec![0.0; d];
    for r in x {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in x {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    (mean, var)
}

/// k-means++ seeding followed by a hard nearest-center assignment.
fn kmeanspp_responsibilities(x: &[Vec<f64>], k: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = x.iter().map(|r| sq_dist(r, &x[centers[0]])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(pick);
        for (i, r) in x.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, &x[pick]));
        }
    }
    let mut resp = vec![vec![0.0; k]; n];
    for (i, r) in x.iter().enumerate() {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (c, &ci) in centers.iter().enumerate() {
            let dd = sq_dist(r, &x[ci]);
            if dd < bd {
                bd = dd;
                best = c;
            }
        }
        resp[i][best] = 1.0;
    }
    resp
}

/// M-step. Returns the indices of collapsed components (their parameters are
/// left as placeholders to be re-seeded).
fn m_step(x: &[Vec<f64>], resp: &[Vec<f64>], cov: CovarianceKind, lambda: f64) -> Result<(Params, Vec<usize>)> {
    let n = x.len();
    let d = x[0].len();
    let k = resp[0].len();
    let mut nk = vec![0.0; k];
    for r in resp {
        for (a, b) in nk.iter_mut().zip(r) {
            *a += b;
        }
    }
    let mut collapsed = Vec::new();
    let mut weights = vec![0.0; k];
    let mut means = vec![vec![0.0; d]; k];
    for c in 0..k {
        weights[c] = nk[c] / n as f64;
        if weights[c] < COLLAPSE_WEIGHT {
            collapsed.push(c);
            continue;
        }
        for (r, xi) in resp.iter().zip(x) {
            if r[c] != 0.0 {
                for (m, v) in means[c].iter_mut().zip(xi) {
                    *m += r[c] * v;
                }
            }
        }
        means[c].iter_mut().for_each(|m| *m /= nk[c]);
    }
    let covs = match cov {
        CovarianceKind::Diag => {
            let mut vars = vec![vec![1.0; d]; k];
            for c in 0..k {
                if collapsed.contains(&c) {
                    continue;
                }
                let v = &mut vars[c];
                v.iter_mut().for_each(|s| *s = 0.0);
                for (r, xi) in resp.iter().zip(x) {
                    if r[c] != 0.0 {
                        for ((s, a), m) in v.iter_mut().zip(xi).zip(&means[c]) {
                            *s += r[c] * (a - m) * (a - m);
                        }
                    }
                }
                for s in v.iter_mut() {
                    *s = (*s + lambda) / nk[c];
                }
                if let Some(bad) = v.iter().position(|s| !(*s > 0.0 && s.is_finite())) {
                    return Err(NumericsError::NotPositiveDefinite { row: bad, pivot: v[bad] }.into());
                }
            }
            Covariances::Diag(vars)
        }
        CovarianceKind::Full => {
            let mut out = Vec::with_capacity(k);
            for c in 0..k {
                if collapsed.contains(&c) {
                    let m = Matrix::identity(d);
                    let ch = cholesky(&m)?;
                    out.push((m, ch));
                    continue;
                }
                let mut s = vec![0.0; d * d];
                let mut diff = vec![0.0; d];
                for (r, xi) in resp.iter().zip(x) {
                    let w = r[c];
                    if w == 0.0 {
                        continue;
                    }
                    for ((df, a), m) in diff.iter_mut().zip(xi).zip(&means[c]) {
                        *df = a - m;
                    }
                    for i in 0..d {
                        let wi = w * diff[i];
                        let row = &mut s[i * d..i * d + i + 1];
                        for (j, e) in row.iter_mut().enumerate() {
                            *e += wi * diff[j];
                        }
                    }
                }
                for i in 0..d {
                    for j in 0..i {
                        s[j * d + i] = s[i * d + j];
                    }
                }
                let mut m = Matrix::from_vec(d, d, s.into_iter().map(|v| v / nk[c]).collect())?;
                m.add_to_diagonal(lambda / nk[c]);
                let ch = match cholesky(&m) {
                    Ok(ch) => ch,
                    Err(NumericsError::NotPositiveDefinite { .. }) => {
                        // standard jitter retry
                        m.add_to_diagonal(1e-6 * (m.trace() / d as f64).max(f64::MIN_POSITIVE));
                        cholesky(&m)?
                    }
                    Err(e) => return Err(e.into()),
                };
                out.push((m, ch));
            }
            Covariances::Full(out)
        }
    };
    Ok((Params { weights, means, covs }, collapsed))
}

/// `-½λ Σ_k tr(Σ_k⁻¹)`.
fn ridge_penalty(covs: &Covariances, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return 0.0;
    }
    let tr: f64 = match covs {
        Covariances::Diag(v) => v.iter().flatten().map(|s| 1.0 / s).sum(),
        Covariances::Full(c) => c
            .iter()
            .map(|(_, ch)| {
                let d = ch.dim();
                let mut t = 0.0;
                let mut e = vec![0.0; d];
                for i in 0..d {
                    e.iter_mut().for_each(|v| *v = 0.0);
                    e[i] = 1.0;
                    t += forward_solve_sq(ch, &mut e);
                }
                t
            })
            .sum(),
        Covariances::SharedIsotropic(_) => 0.0,
    };
    -0.5 * lambda * tr
}

/// E-step: fills responsibilities, returns total log-likelihood.
fn e_step(x: &[Vec<f64>], model: &MixtureModel, resp: &mut [Vec<f64>], point_ll: &mut [f64]) -> f64 {
    let mut terms = Vec::new();
    let mut scratch = Vec::new();
    let mut total = 0.0;
    for ((xi, r), pl) in x.iter().zip(resp.iter_mut()).zip(point_ll.iter_mut()) {
        model.component_terms(xi, &mut terms, &mut scratch);
        let l = log_sum_exp_unchecked(&terms);
        for (rc, t) in r.iter_mut().zip(&terms) {
            *rc = (t - l).exp();
        }
        *pl = l;
        total += l;
    }
    total
}

/// Fits a `k`-component Gaussian mixture by EM on untransformed samples.
pub fn fit_gmm(samples: &[Vec<f64>], k: usize, cov: CovarianceKind, seed: u64, opts: &EmOptions) -> Result<MixtureModel> {
    let d = validate_samples(samples)?;
    let n = samples.len();
    if k == 0 {
        return Err(NullModelError::EmptyKRange);
    }
    let needed = min_samples(k, d, cov).max(2);
    if n < needed {
        return Err(NullModelError::TooFewSamples { needed, got: n });
    }
    let family = Family::Gmm(cov);
    let (_, gvar) = global_moments(samples);
    let mean_var = gvar.iter().sum::<f64>() / d as f64;
    let lambda = opts.reg_covar * if mean_var > 0.0 { mean_var } else { 1.0 };

    let mut rng = rng::rng_for(seed, &[tags::GMM, k as u64]);
    let mut resp = kmeanspp_responsibilities(samples, k, &mut rng);
    let mut point_ll = vec![0.0; n];
    let mut reseeded = false;
    let mut trace: Vec<f64> = Vec::new();
    let mut params;
    let mut iterations = 0;
    loop {
        let (p, collapsed) = m_step(samples, &resp, cov, lambda)?;
        params = p;
        if !collapsed.is_empty() {
            let c = collapsed[0];
            if reseeded {
                return Err(NullModelError::DegenerateComponent { weight: params.weights[c] });
            }
            reseeded = true;
            reseed(samples, &mut params, &collapsed, &gvar, lambda, &point_ll, iterations == 0)?;
            trace.clear();
        }
        let model = params.model(family);
        let ll = e_step(samples, &model, &mut resp, &mut point_ll);
        let obj = ll + ridge_penalty(&params.covs, lambda);
        iterations += 1;
        let converged = trace
            .last()
            .is_some_and(|&prev| (obj - prev).abs() <= opts.tol * prev.abs().max(1e-300));
        trace.push(obj);
        if converged || iterations >= opts.max_iter {
            let mut model = model;
            model.summary = FitSummary {
                log_likelihood: ll,
                num_samples: n,
                bic: Some(bic(ll, k, d, n, cov)),
                iterations,
                reg_lambda: lambda,
                objective_trace: trace,
                reseeded,
            };
            return Ok(model);
        }
    }
}

/// Moves each collapsed component onto the worst-explained sample with the
/// global variance and an equal share of weight.
fn reseed(
    x: &[Vec<f64>],
    params: &mut Params,
    collapsed: &[usize],
    gvar: &[f64],
    lambda: f64,
    point_ll: &[f64],
    at_init: bool,
) -> Result<()> {
    let k = params.weights.len();
    let n = x.len() as f64;
    let mut order: Vec<usize> = (0..x.len()).collect();
    if at_init {
        // No likelihoods yet: take points far from the surviving means.
        let alive: Vec<usize> = (0..k).filter(|c| !collapsed.contains(c)).collect();
        let score: Vec<f64> = x
            .iter()
            .map(|r| {
                alive
                    .iter()
                    .map(|&c| sq_dist(r, &params.means[c]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    } else {
        order.sort_by(|&a, &b| point_ll[a].total_cmp(&point_ll[b]).then(a.cmp(&b)));
    }
    let var: Vec<f64> = gvar.iter().map(|v| v + lambda / n).collect();
    for (slot, &c) in collapsed.iter().enumerate() {
        params.means[c] = x[order[slot % order.len()]].clone();
        params.weights[c] = 1.0 / k as f64;
        match &mut params.covs {
            Covariances::Diag(v) => v[c] = var.clone(),
            Covariances::Full(f) => {
                let m = Matrix::diagonal(&var);
                let ch = cholesky(&m)?;
                f[c] = (m, ch);
            }
            Covariances::SharedIsotropic(_) => unreachable!("EM never uses a shared variance"),
        }
    }
    let s: f64 = params.weights.iter().sum();
    params.weights.iter_mut().for_each(|w| *w /= s);
    Ok(())
}

/// Fits every feasible `k` in `k_range` and returns the BIC minimizer.
///
/// Orders whose sample requirement is not met are skipped; an order whose fit
/// fails is skipped too unless no order succeeds, in which case the first
/// error is returned.
pub fn select_order_bic(
    samples: &[Vec<f64>],
    k_range: &[usize],
    cov: CovarianceKind,
    seed: u64,
    opts: &EmOptions,
) -> Result<MixtureModel> {
    if k_range.is_empty() {
        return Err(NullModelError::EmptyKRange);
    }
    let d = validate_samples(samples)?;
    let n = samples.len();
    let mut best: Option<MixtureModel> = None;
    let mut first_err = None;
    let mut smallest_need = usize::MAX;
    for &k in k_range {
        let need = min_samples(k, d, cov).max(2);
        if n < need {
            smallest_need = smallest_need.min(need);
            continue;
        }
        match fit_gmm(samples, k, cov, seed, opts) {
            Ok(m) => {
                let b = m.summary.bic.expect("gmm fits record BIC");
                if best.as_ref().is_none_or(|cur| b < cur.summary.bic.expect("bic")) {
                    best = Some(m);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match (best, first_err) {
        (Some(m), _) => Ok(m),
        (None, Some(e)) => Err(e),
        (None, None) => Err(NullModelError::TooFewSamples {
            needed: smallest_need,
            got: n,
        }),
    }
}

/// Log-normal mixture: a BIC-selected GMM on `ln(z + ε)`.
pub fn fit_lognormal_mixture(
    samples: &[Vec<f64>],
    k_range: &[usize],
    cov: CovarianceKind,
    seed: u64,
    opts: &EmOptions,
) -> Result<MixtureModel> {
    validate_samples(samples)?;
    let transform = SupportTransform::LogOffset { eps: LOG_EPS };
    let mut jac_total = 0.0;
    let mut y = Vec::with_capacity(samples.len());
    for s in samples {
        let (t, j) = transform.apply(s)?;
        jac_total += j;
        y.push(t);
    }
    let mut m = select_order_bic(&y, k_range, cov, seed, opts)?;
    m.family = Family::LogNormal(cov);
    m.transform = transform;
    m.summary.log_likelihood += jac_total;
    let (k, d, n) = (m.num_components(), m.dim(), samples.len());
    m.summary.bic = Some(bic(m.summary.log_likelihood, k, d, n, cov));
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Candidate component counts for BIC selection.
    pub k_range: Vec<usize>,
    pub em: EmOptions,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            k_range: (1..=10).collect(),
            em: EmOptions::default(),
            seed: 0,
        }
    }
}

/// Fits one density of the given family.
pub fn fit_family(samples: &[Vec<f64>], family: Family, opts: &FitOptions, seed: u64) -> Result<MixtureModel> {
    match family {
        Family::Kernel => fit_kernel_density(samples),
        Family::Gmm(cov) => select_order_bic(samples, &opts.k_range, cov, seed, &opts.em),
        Family::LogNormal(cov) => fit_lognormal_mixture(samples, &opts.k_range, cov, seed, &opts.em),
    }
}

/// Minimum class population for fitting `family` in `d` dimensions.
fn needed_samples(family: Family, d: usize, k_range: &[usize]) -> usize {
    match family {
        Family::Kernel => 2,
        Family::Gmm(cov) | Family::LogNormal(cov) => {
            let kmin = k_range.iter().copied().min().unwrap_or(1);
            min_samples(kmin, d, cov).max(2)
        }
    }
}

/// Default family: full covariance at the penultimate layer, diagonal elsewhere.
pub fn default_family(spec: &NetworkSpec, layer: LayerId) -> Family {
    if spec.penultimate() == Some(layer) {
        Family::Gmm(CovarianceKind::Full)
    } else {
        Family::Gmm(CovarianceKind::Diag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapFamily {
    pub layer: LayerId,
    pub family: Family,
}

/// Tapped activations of every image, grouped by layer.
pub fn collect_activations(
    net: &Network,
    data: &LabeledDataset,
    taps: &[LayerId],
) -> Result<BTreeMap<LayerId, Vec<Vec<f64>>>> {
    let mut out: BTreeMap<LayerId, Vec<Vec<f64>>> = taps.iter().map(|&t| (t, Vec::with_capacity(data.len()))).collect();
    for (x, _) in data.iter() {
        let (_, acts) = net.forward(x, taps)?;
        for &t in taps {
            out.get_mut(&t)
                .expect("tap")
                .push(acts.get(t).expect("requested tap").to_vec());
        }
    }
    Ok(out)
}

/// Per-cell seed for fitting layer `layer`, class `class` (and pair `i, j`).
pub fn cell_seed(seed: u64, layer: LayerId, class: usize, pair: Option<(usize, usize)>) -> u64 {
    match pair {
        None => rng::derive_seed(seed, &[tags::GMM, layer.0 as u64, class as u64]),
        Some((i, j)) => rng::derive_seed(seed, &[tags::PAIR, layer.0 as u64, class as u64, i as u64, j as u64]),
    }
}

/// Pair-density models for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLayer {
    pub family: Family,
    /// β score of every feature in the layer.
    pub beta: Vec<f64>,
    /// Retained feature pairs `(i, j)`, `i < j`, in lexicographic order.
    pub pairs: Vec<(usize, usize)>,
    /// `models[class][p]` is the density of pair `pairs[p]` under `class`.
    pub models: Vec<Vec<MixtureModel>>,
}

/// Class-conditional null densities for a set of tapped layers.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NullModelBank {
    num_classes: usize,
    widths: BTreeMap<LayerId, usize>,
    joint: BTreeMap<(LayerId, usize), MixtureModel>,
    pairwise: BTreeMap<LayerId, PairLayer>,
}

impl NullModelBank {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            ..Self::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Layers with joint models.
    pub fn layers(&self) -> Vec<LayerId> {
        let mut v: Vec<LayerId> = self.joint.keys().map(|(l, _)| *l).collect();
        v.dedup();
        v
    }

    /// Layers with pairwise models.
    pub fn pair_layers(&self) -> Vec<LayerId> {
        self.pairwise.keys().copied().collect()
    }

    pub fn width(&self, layer: LayerId) -> Option<usize> {
        self.widths.get(&layer).copied()
    }

    pub fn model(&self, layer: LayerId, class: usize) -> Result<&MixtureModel> {
        self.joint
            .get(&(layer, class))
            .ok_or(NullModelError::MissingModel { layer, class })
    }

    pub fn pair_layer(&self, layer: LayerId) -> Result<&PairLayer> {
        self.pairwise
            .get(&layer)
            .ok_or(NullModelError::MissingModel { layer, class: 0 })
    }

    /// Inserts a joint model; the bank's class count grows to cover `class`.
    pub fn insert(&mut self, layer: LayerId, class: usize, model: MixtureModel) -> Result<()> {
        let d = model.dim();
        if let Some(&w) = self.widths.get(&layer) {
            if w != d {
                return Err(NullModelError::DimensionMismatch { expected: w, got: d });
            }
        }
        self.widths.insert(layer, d);
        self.num_classes = self.num_classes.max(class + 1);
        self.joint.insert((layer, class), model);
        Ok(())
    }

    pub fn insert_pair_layer(&mut self, layer: LayerId, width: usize, pl: PairLayer) -> Result<()> {
        if let Some(&w) = self.widths.get(&layer) {
            if w != width {
                return Err(NullModelError::DimensionMismatch { expected: w, got: width });
            }
        }
        if pl.beta.len() != width
            || pl.pairs.iter().any(|&(i, j)| i >= j || j >= width)
            || pl.models.iter().any(|m| m.len() != pl.pairs.len() || m.iter().any(|mm| mm.dim() != 2))
        {
            return Err(NullModelError::InvalidSamples("inconsistent pair layer".into()));
        }
        self.widths.insert(layer, width);
        self.num_classes = self.num_classes.max(pl.models.len());
        self.pairwise.insert(layer, pl);
        Ok(())
    }

    /// Joint log-densities of `z` under every class at `layer`.
    pub fn class_log_densities(&self, layer: LayerId, z: &[f64]) -> Result<Vec<f64>> {
        (0..self.num_classes)
            .map(|c| self.model(layer, c)?.log_density(z))
            .collect()
    }

    /// Merges another bank's models into this one.
    pub fn merge(&mut self, other: NullModelBank) -> Result<()> {
        for ((l, c), m) in other.joint {
            self.insert(l, c, m)?;
        }
        for (l, pl) in other.pairwise {
            let w = other.widths[&l];
            self.insert_pair_layer(l, w, pl)?;
        }
        Ok(())
    }
}

fn group_by_class(labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut g = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        g[y].push(i);
    }
    g
}

/// Fits one density per (tap, class) from the class's training activations.
pub fn fit_null_bank(net: &Network, train: &LabeledDataset, taps: &[TapFamily], opts: &FitOptions) -> Result<NullModelBank> {
    let layers: Vec<LayerId> = taps.iter().map(|t| t.layer).collect();
    let acts = collect_activations(net, train, &layers)?;
    fit_null_bank_from_activations(&acts, train.labels(), train.num_classes(), taps, opts)
}

/// [`fit_null_bank`] on precomputed activations.
pub fn fit_null_bank_from_activations(
    acts: &BTreeMap<LayerId, Vec<Vec<f64>>>,
    labels: &[usize],
    num_classes: usize,
    taps: &[TapFamily],
    opts: &FitOptions,
) -> Result<NullModelBank> {
    let groups = group_by_class(labels, num_classes);
    let mut bank = NullModelBank::new(num_classes);
    for tap in taps {
        let z = acts.get(&tap.layer).ok_or(NullModelError::MissingModel {
            layer: tap.layer,
            class: 0,
        })?;
        let d = z.first().map_or(0, Vec::len);
        for (c, idx) in groups.iter().enumerate() {
            let needed = needed_samples(tap.family, d, &opts.k_range);
            if idx.len() < needed {
                return Err(NullModelError::ClassUnderpopulated {
                    layer: tap.layer,
                    class: c,
                    count: idx.len(),
                    needed,
                });
            }
            let samples: Vec<Vec<f64>> = idx.iter().map(|&i| z[i].clone()).collect();
            let model = fit_family(&samples, tap.family, opts, cell_seed(opts.seed, tap.layer, c, None))?;
            bank.insert(tap.layer, c, model)?;
        }
    }
    Ok(bank)
}

/// Feature pairs ranked by `β_i·β_j` (ties by index), truncated to `cap`,
/// returned in lexicographic order.
pub fn rank_pairs(beta: &[f64], cap: Option<usize>) -> Vec<(usize, usize)> {
    let d = beta.len();
    let mut pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| ((i + 1)..d).map(move |j| (i, j))).collect();
    if let Some(cap) = cap {
        if pairs.len() > cap {
            pairs.sort_by(|a, b| {
                (beta[b.0] * beta[b.1])
                    .total_cmp(&(beta[a.0] * beta[a.1]))
                    .then(a.cmp(b))
            });
            pairs.truncate(cap);
            pairs.sort();
        }
    }
    pairs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseOptions {
    pub family: Family,
    /// `None` models every pair.
    pub max_pairs_per_layer: Option<usize>,
    pub fit: FitOptions,
}

impl Default for PairwiseOptions {
    fn default() -> Self {
        Self {
            family: Family::LogNormal(CovarianceKind::Full),
            max_pairs_per_layer: Some(2000),
            fit: FitOptions {
                k_range: vec![1, 2, 3],
                ..FitOptions::default()
            },
        }
    }
}

/// Fits 2-d densities for the retained feature pairs of every tap.
pub fn fit_pairwise_bank(
    net: &Network,
    train: &LabeledDataset,
    taps: &[LayerId],
    opts: &PairwiseOptions,
) -> Result<NullModelBank> {
    let acts = collect_activations(net, train, taps)?;
    let betas = taps
        .iter()
        .map(|&l| Ok((l, net.outgoing_weight_scores(l)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    fit_pairwise_bank_from_activations(&acts, &betas, train.labels(), train.num_classes(), opts)
}

/// [`fit_pairwise_bank`] on precomputed activations and β scores.
pub fn fit_pairwise_bank_from_activations(
    acts: &BTreeMap<LayerId, Vec<Vec<f64>>>,
    betas: &BTreeMap<LayerId, Vec<f64>>,
    labels: &[usize],
    num_classes: usize,
    opts: &PairwiseOptions,
) -> Result<NullModelBank> {
    let groups = group_by_class(labels, num_classes);
    let mut bank = NullModelBank::new(num_classes);
    for (&layer, beta) in betas {
        let z = acts
            .get(&layer)
            .ok_or(NullModelError::MissingModel { layer, class: 0 })?;
        let width = beta.len();
        let pairs = rank_pairs(beta, opts.max_pairs_per_layer);
        let needed = needed_samples(opts.family, 2, &opts.fit.k_range);
        let mut models = Vec::with_capacity(num_classes);
        for (c, idx) in groups.iter().enumerate() {
            if idx.len() < needed {
                return Err(NullModelError::ClassUnderpopulated {
                    layer,
                    class: c,
                    count: idx.len(),
                    needed,
                });
            }
            let mut row = Vec::with_capacity(pairs.len());
            for &(i, j) in &pairs {
                let samples: Vec<Vec<f64>> = idx.iter().map(|&n| vec![z[n][i], z[n][j]]).collect();
                let seed = cell_seed(opts.fit.seed, layer, c, Some((i, j)));
                row.push(fit_family(&samples, opts.family, &opts.fit, seed)?);
            }
            models.push(row);
        }
        bank.insert_pair_layer(
            layer,
            width,
            PairLayer {
                family: opts.family,
                beta: beta.clone(),
                pairs,
                models,
            },
        )?;
    }
    Ok(bank)
}

// -- persistence ----------------------------------------------------------------

pub const BANK_FORMAT: &str = "ada-null-bank/1";

/// Location and shape of one mixture inside the parameter blob.
///
/// Layout at `offset` (little-endian f64): `k` weights, `k·d` means, then
/// `k·d·d` row-major covariances (full), `k·d` variances (diag), or a single
/// shared variance (kernel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub layer: LayerId,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<(usize, usize)>,
    pub family: Family,
    pub transform: SupportTransform,
    pub k: usize,
    pub dim: usize,
    pub offset: usize,
    pub count: usize,
    pub summary: FitSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLayerEntry {
    pub layer: LayerId,
    pub family: Family,
    pub beta: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankManifest {
    pub format: String,
    pub num_classes: usize,
    pub log_eps: f64,
    pub widths: BTreeMap<LayerId, usize>,
    pub pair_layers: Vec<PairLayerEntry>,
    pub models: Vec<ModelEntry>,
    pub blob_file: String,
    pub blob_len_bytes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl BankManifest {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn blob_path(&self, manifest_path: &Path) -> PathBuf {
        manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&self.blob_file)
    }
}

fn push_model(blob: &mut Vec<f64>, m: &MixtureModel) -> (usize, usize) {
    let start = blob.len();
    blob.extend_from_slice(&m.weights);
    for mu in &m.means {
        blob.extend_from_slice(mu);
    }
    match &m.covs {
        Covariances::Full(c) => c.iter().for_each(|(mat, _)| blob.extend_from_slice(mat.as_slice())),
        Covariances::Diag(v) => v.iter().for_each(|x| blob.extend_from_slice(x)),
        Covariances::SharedIsotropic(s) => blob.push(*s),
    }
    (start * 8, blob.len() - start)
}

fn read_model(e: &ModelEntry, blob: &[f64]) -> Result<MixtureModel> {
    let corrupt = |msg: String| NullModelError::Corrupt {
        offset: e.offset,
        message: msg,
    };
    if e.offset % 8 != 0 {
        return Err(corrupt("unaligned offset".into()));
    }
    let start = e.offset / 8;
    let end = start + e.count;
    let vals = blob
        .get(start..end)
        .ok_or_else(|| NullModelError::Corrupt {
            offset: (blob.len() * 8).min(end * 8),
            message: format!("model block [{}, {}) past end of blob", e.offset, end * 8),
        })?;
    let (k, d) = (e.k, e.dim);
    if k == 0 || d == 0 {
        return Err(corrupt("empty model".into()));
    }
    let cov_len = match e.family {
        Family::Kernel => 1,
        Family::Gmm(CovarianceKind::Full) | Family::LogNormal(CovarianceKind::Full) => k * d * d,
        _ => k * d,
    };
    if vals.len() != k + k * d + cov_len {
        return Err(corrupt("count disagrees with k and dim".into()));
    }
    let weights = vals[..k].to_vec();
    let means: Vec<Vec<f64>> = vals[k..k + k * d].chunks(d).map(<[f64]>::to_vec).collect();
    let rest = &vals[k + k * d..];
    let mut m = match e.family {
        Family::Kernel => MixtureModel::kernel(means, rest[0]),
        Family::Gmm(CovarianceKind::Full) | Family::LogNormal(CovarianceKind::Full) => {
            let covs = rest
                .chunks(d * d)
                .map(|c| Matrix::from_vec(d, d, c.to_vec()))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            MixtureModel::from_full(e.family, e.transform, weights, means, covs)
        }
        _ => MixtureModel::from_diag(e.family, e.transform, weights, means, rest.chunks(d).map(<[f64]>::to_vec).collect()),
    }
    .map_err(|err| corrupt(err.to_string()))?;
    m.summary = e.summary.clone();
    Ok(m)
}

impl NullModelBank {
    /// Writes the JSON manifest and a sibling `.bin` blob of little-endian f64.
    pub fn save(&self, manifest_path: &Path, provenance: Option<&Provenance>) -> Result<()> {
        let blob_path = manifest_path.with_extension("bin");
        let mut blob: Vec<f64> = Vec::new();
        let mut models = Vec::new();
        let mut entry = |layer, class, pair, m: &MixtureModel, blob: &mut Vec<f64>| {
            let (offset, count) = push_model(blob, m);
            let mut summary = m.summary.clone();
            summary.objective_trace.clear();
            models.push(ModelEntry {
                layer,
                class,
                pair,
                family: m.family,
                transform: m.transform,
                k: m.num_components(),
                dim: m.dim(),
                offset,
                count,
                summary,
            });
        };
        for ((l, c), m) in &self.joint {
            entry(*l, *c, None, m, &mut blob);
        }
        let mut pair_layers = Vec::new();
        for (l, pl) in &self.pairwise {
            for (c, row) in pl.models.iter().enumerate() {
                for (p, m) in pl.pairs.iter().zip(row) {
                    entry(*l, c, Some(*p), m, &mut blob);
                }
            }
            pair_layers.push(PairLayerEntry {
                layer: *l,
                family: pl.family,
                beta: pl.beta.clone(),
                pairs: pl.pairs.clone(),
            });
        }
        let bytes: Vec<u8> = blob.iter().flat_map(|v| v.to_le_bytes()).collect();
        let manifest = BankManifest {
            format: BANK_FORMAT.into(),
            num_classes: self.num_classes,
            log_eps: LOG_EPS,
            widths: self.widths.clone(),
            pair_layers,
            models,
            blob_file: blob_path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            blob_len_bytes: bytes.len(),
            provenance: provenance.cloned(),
        };
        fs::write(&blob_path, &bytes)?;
        let mut f = fs::File::create(manifest_path)?;
        f.write_all(&serde_json::to_vec_pretty(&manifest)?)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = BankManifest::read(manifest_path)?;
        let bytes = fs::read(manifest.blob_path(manifest_path))?;
        Self::from_manifest(&manifest, &bytes)
    }

    pub fn from_manifest(manifest: &BankManifest, bytes: &[u8]) -> Result<Self> {
        if manifest.format != BANK_FORMAT {
            return Err(NullModelError::Corrupt {
                offset: 0,
                message: format!("unknown format {:?}", manifest.format),
            });
        }
        if bytes.len() != manifest.blob_len_bytes || bytes.len() % 8 != 0 {
            return Err(NullModelError::Corrupt {
                offset: bytes.len(),
                message: format!("blob holds {} bytes, manifest declares {}", bytes.len(), manifest.blob_len_bytes),
            });
        }
        let blob: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut bank = NullModelBank::new(manifest.num_classes);
        let mut pair_models: BTreeMap<LayerId, BTreeMap<(usize, (usize, usize)), MixtureModel>> = BTreeMap::new();
        for e in &manifest.models {
            let m = read_model(e, &blob)?;
            match e.pair {
                None => bank.insert(e.layer, e.class, m)?,
                Some(p) => {
                    pair_models.entry(e.layer).or_default().insert((e.class, p), m);
                }
            }
        }
        for pl in &manifest.pair_layers {
            let mut found = pair_models.remove(&pl.layer).unwrap_or_default();
            let mut models = Vec::with_capacity(manifest.num_classes);
            for c in 0..manifest.num_classes {
                let row = pl
                    .pairs
                    .iter()
                    .map(|p| {
                        found.remove(&(c, *p)).ok_or(NullModelError::Corrupt {
                            offset: 0,
                            message: format!("missing pair model {p:?} for class {c} at layer {}", pl.layer),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                models.push(row);
            }
            let width = *manifest.widths.get(&pl.layer).ok_or(NullModelError::Corrupt {
                offset: 0,
                message: format!("no width for layer {}", pl.layer),
            })?;
            bank.insert_pair_layer(
                pl.layer,
                width,
                PairLayer {
                    family: pl.family,
                    beta: pl.beta.clone(),
                    pairs: pl.pairs.clone(),
                    models,
                },
            )?;
        }
        bank.num_classes = manifest.num_classes;
        Ok(bank)
    }
}

/// Direct dense log-density, used as an independent oracle in tests.
#[cfg(test)]
pub(crate) fn oracle_log_density(m: &MixtureModel, z: &[f64]) -> f64 {
    let (y, jac) = m.transform.apply(z).unwrap();
    let terms: Vec<f64> = (0..m.num_components())
        .map(|k| {
            let ch = cholesky(&m.covariance(k)).unwrap();
            m.weights[k].ln() + crate::numerics::gaussian_log_pdf(&y, &m.means[k], &ch).unwrap()
        })
        .collect();
    crate::numerics::log_sum_exp(&terms).unwrap() + jac
}
