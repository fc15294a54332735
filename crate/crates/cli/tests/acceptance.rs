//! Acceptance criteria on the bundled MNIST subset.
//!
//! Each test prints one `criterion N ... PASS|FAIL` line straight to stdout (so
//! it shows without `--nocapture`) and then asserts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use ada_core::attacks::{self, AttackConfig, AttackError, AttackKind, WhiteBoxParams};
use ada_core::datasets::{self, Image, LabeledDataset};
use ada_core::detectors::{self, ClassMode, ConfusionMatrix, Detector, DetectorKind, KlOrientation, Statistic};
use ada_core::dnn::{LayerId, LayerSpec, Network, NetworkSpec, Objective, Shape, TrainConfig};
use ada_core::evaluation::{self, DetectorSetup, RateTarget, ScenarioConfig, ScenarioKind, ScenarioOutcome};
use ada_core::null_models::{self, CovarianceKind, EmOptions, Family, NullModelBank, TapFamily};
use ada_core::rng::rng_for;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

const SEED: u64 = 20181011;

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "criterion {id} {name} ... {verdict}: {detail}").unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn mnist() -> &'static (LabeledDataset, LabeledDataset) {
    static DATA: OnceLock<(LabeledDataset, LabeledDataset)> = OnceLock::new();
    DATA.get_or_init(|| {
        let d = data_dir();
        let train = datasets::load_idx_files(&d.join("train-images-idx3-ubyte.gz"), &d.join("train-labels-idx1-ubyte.gz"), 10)
            .expect("MNIST train split");
        let test = datasets::load_idx_files(&d.join("t10k-images-idx3-ubyte.gz"), &d.join("t10k-labels-idx1-ubyte.gz"), 10)
            .expect("MNIST test split");
        (train, test)
    })
}

fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: 15,
        batch_size: 64,
        learning_rate: 0.1,
        seed: SEED,
    }
}

/// LeNet-5 trained once and shared, with its training time in seconds.
fn lenet() -> &'static (Network, f64) {
    static NET: OnceLock<(Network, f64)> = OnceLock::new();
    NET.get_or_init(|| {
        let (train, _) = mnist();
        let t = Instant::now();
        let net = evaluation::train_network(&NetworkSpec::lenet5(10), train, &train_config()).expect("training");
        (net, t.elapsed().as_secs_f64())
    })
}

fn scenario(attack: AttackConfig, detectors: Vec<DetectorSetup>, taps: Vec<TapFamily>, max_attempts: usize) -> ScenarioConfig {
    let spec = NetworkSpec::lenet5(10);
    let mut cfg = ScenarioConfig::new(ScenarioKind::Clean, &spec, attack, detectors);
    cfg.train = train_config();
    cfg.taps = taps;
    cfg.max_attempts = max_attempts;
    cfg.seed = SEED;
    cfg
}

fn run(cfg: &ScenarioConfig) -> ScenarioOutcome {
    let (train, test) = mnist();
    let (net, _) = lenet();
    evaluation::run_scenario(cfg, net.spec(), train, test, Some(net), None).expect("scenario")
}

fn auc_of(o: &ScenarioOutcome, kind: DetectorKind) -> f64 {
    o.report.detectors.iter().find(|d| d.detector == kind).expect("detector in report").auc
}

/// FGSM clean scenario with the penultimate full-covariance GMM.
fn fgsm_outcome() -> &'static (ScenarioOutcome, f64) {
    static OUT: OnceLock<(ScenarioOutcome, f64)> = OnceLock::new();
    OUT.get_or_init(|| {
        let net = &lenet().0;
        let pen = net.spec().penultimate().unwrap();
        let taps = vec![TapFamily {
            layer: pen,
            family: Family::Gmm(CovarianceKind::Full),
        }];
        let dets = [DetectorKind::Baseline, DetectorKind::Ada, DetectorKind::AdaAll]
            .into_iter()
            .map(DetectorSetup::new)
            .collect();
        let mut attack = AttackConfig::new(AttackKind::Fgsm, 0.01);
        attack.max_iters = 300;
        let cfg = scenario(attack, dets, taps, 300);
        let t = Instant::now();
        let o = run(&cfg);
        (o, t.elapsed().as_secs_f64())
    })
}

#[test]
fn criterion_01_classifier_accuracy() {
    let (net, secs) = lenet();
    let acc = net.accuracy(&mnist().1).unwrap();
    report(
        1,
        "LeNet-5 test accuracy >= 0.96",
        acc >= 0.96 && *secs <= 900.0,
        &format!("accuracy {acc:.4} on {} test images, trained in {secs:.0} s", mnist().1.len()),
    );
}

#[test]
fn criterion_02_fgsm_ada_auc() {
    let (o, secs) = fgsm_outcome();
    let auc = auc_of(o, DetectorKind::Ada);
    report(
        2,
        "FGSM clean ADA-GMM penultimate AUC >= 0.95",
        auc >= 0.95 && *secs <= 600.0,
        &format!(
            "AUC {auc:.4}, {} attacks of {} attempts (craft rate {:.3}), {secs:.0} s",
            o.report.batch.attack, o.report.attempts, o.report.craft_rate
        ),
    );
}

#[test]
fn criterion_03_ada_beats_baseline() {
    let (o, _) = fgsm_outcome();
    let ada = auc_of(o, DetectorKind::Ada);
    let base = auc_of(o, DetectorKind::Baseline);
    report(
        3,
        "ADA AUC > baseline AUC + 0.005",
        ada > base + 0.005,
        &format!("ADA {ada:.4} vs destination-only baseline {base:.4}"),
    );
}

fn default_taps(net: &Network) -> Vec<TapFamily> {
    let spec = net.spec();
    spec.default_taps()
        .into_iter()
        .map(|layer| TapFamily {
            layer,
            family: null_models::default_family(spec, layer),
        })
        .collect()
}

#[test]
fn criterion_05_jsma_region_count_and_l_awa() {
    let net = &lenet().0;
    let pen = net.spec().penultimate().unwrap();
    let dets = vec![
        DetectorSetup::new(DetectorKind::RegionCount),
        DetectorSetup {
            kind: DetectorKind::LAwaMaxKl,
            layers: vec![pen],
        },
    ];
    let mut cfg = scenario(AttackConfig::new(AttackKind::Jsma, 0.1), dets, default_taps(net), 150);
    cfg.pairwise.max_pairs_per_layer = Some(300);
    let t = Instant::now();
    let o = run(&cfg);
    let region = auc_of(&o, DetectorKind::RegionCount);
    let lawa = auc_of(&o, DetectorKind::LAwaMaxKl);
    // informational: the same pairwise bank with the KL arguments swapped
    let reverse = {
        let conf = detectors::estimate_confusion(net, &mnist().0, cfg.confusion_eta).unwrap();
        let det = Detector::new(DetectorKind::LAwaMaxKl, vec![pen])
            .with_bank(o.bank.clone())
            .with_confusion(conf)
            .with_orientation(KlOrientation::Reverse);
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for b in &o.batch {
            let v = det.score(net, &b.image).unwrap().value;
            if b.population == evaluation::Population::Attack {
                pos.push(v);
            } else {
                neg.push(v);
            }
        }
        evaluation::roc_auc(&pos, &neg).unwrap().auc
    };
    report(
        5,
        "JSMA region-count AUC >= 0.9 and L-AWA >= region-count - 0.05",
        region >= 0.9 && lawa >= region - 0.05,
        &format!(
            "region-count {region:.4}, L-AWA {lawa:.4} (D(Q||P) variant {reverse:.4}), {} attacks (craft rate {:.3}), {:.0} s",
            o.report.batch.attack,
            o.report.craft_rate,
            t.elapsed().as_secs_f64()
        ),
    );
}

// -- criterion 4: colour substitute for the reduced CIFAR setup ---------------------

/// MNIST digits padded to 32x32 and painted with a random foreground and
/// background colour per image, for the three-channel reduced network.
fn colourize(data: &LabeledDataset, seed: u64) -> LabeledDataset {
    let images = data
        .images()
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let mut rng = rng_for(seed, &[i as u64]);
            let (bg, fg) = loop {
                let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
                let contrast: f64 = bg.iter().zip(&fg).map(|(a, b)| (a - b).abs()).sum();
                if contrast > 0.9 {
                    break (bg, fg);
                }
            };
            let mut px = vec![0.0; 3 * 32 * 32];
            for (ch, (b, f)) in bg.iter().zip(&fg).enumerate() {
                for y in 0..32 {
                    for x in 0..32 {
                        let v = if (2..30).contains(&y) && (2..30).contains(&x) { im.get(0, y - 2, x - 2) } else { 0.0 };
                        px[ch * 1024 + y * 32 + x] = b + v * (f - b);
                    }
                }
            }
            Image::new(3, 32, 32, px).unwrap()
        })
        .collect();
    LabeledDataset::new(images, data.labels().to_vec(), data.num_classes()).unwrap()
}

#[test]
fn criterion_04_all_class_vs_two_class_colour() {
    let (train, test) = mnist();
    let (train, test) = (colourize(train, SEED), colourize(&test.take(1000), SEED + 1));
    let spec = NetworkSpec::cifar_small(10);
    let pen = spec.penultimate().unwrap();
    let taps = vec![TapFamily {
        layer: pen,
        family: Family::Gmm(CovarianceKind::Full),
    }];
    let dets = vec![DetectorSetup::new(DetectorKind::Ada), DetectorSetup::new(DetectorKind::AdaAll)];
    let mut attack = AttackConfig::new(AttackKind::Fgsm, 0.01);
    attack.max_iters = 300;
    let mut cfg = scenario(attack, dets, taps, 200);
    cfg.train.epochs = 10;
    let t = Instant::now();
    let o = evaluation::run_scenario(&cfg, &spec, &train, &test, None, None).expect("scenario");
    let two = auc_of(&o, DetectorKind::Ada);
    let all = auc_of(&o, DetectorKind::AdaAll);
    let (mtwo, mall) = (auc_of(&fgsm_outcome().0, DetectorKind::Ada), auc_of(&fgsm_outcome().0, DetectorKind::AdaAll));
    report(
        4,
        "all-class ADA AUC >= two-class ADA AUC - 0.01 (colourized-MNIST substitute, reduced CIFAR net)",
        all >= two - 0.01,
        &format!(
            "all-class {all:.4}, two-class {two:.4}, test accuracy {:.4}, {} attacks, {:.0} s; \
             on grayscale MNIST all-class {mall:.4}, two-class {mtwo:.4}",
            o.report.test_accuracy,
            o.report.batch.attack,
            t.elapsed().as_secs_f64()
        ),
    );
}

// -- criteria 6 and 7 -------------------------------------------------------------

/// Joint bank over LeNet's default taps, fitted once.
fn default_bank() -> &'static NullModelBank {
    static BANK: OnceLock<NullModelBank> = OnceLock::new();
    BANK.get_or_init(|| {
        let net = &lenet().0;
        let cfg = scenario(AttackConfig::new(AttackKind::Fgsm, 0.01), vec![DetectorSetup::new(DetectorKind::AdaMaxKl)], default_taps(net), 1);
        evaluation::fit_scenario_bank(net, &mnist().0, &cfg).expect("bank")
    })
}

fn ada_maxkl(net: &Network) -> Detector {
    Detector::new(DetectorKind::AdaMaxKl, net.spec().default_taps()).with_bank(default_bank().clone())
}

#[test]
fn criterion_06_security_curve_monotonicity() {
    const BAND: f64 = 0.02;
    let net = &lenet().0;
    let test = &mnist().1;
    let det = ada_maxkl(net);
    let t = Instant::now();
    let mut jsma = AttackConfig::new(AttackKind::Jsma, 0.1);
    jsma.seed = SEED;
    let jc = evaluation::security_curve(net, &det, &jsma, &[0.025, 0.05, 0.1], test, 0.8, 100).expect("JSMA curve");
    let mut cw = AttackConfig::new(AttackKind::Cw, 1.0);
    cw.seed = SEED;
    let cc = evaluation::security_curve(net, &det, &cw, &[0.5, 10.0], test, 0.8, 100).expect("CW curve");

    let auc = |p: &evaluation::SecurityCurvePoint| p.auc.unwrap_or(0.5);
    let jsma_ok = jc
        .windows(2)
        .all(|w| w[1].craft_rate >= w[0].craft_rate - BAND && auc(&w[1]) >= auc(&w[0]) - BAND);
    let cw_ok = cc[1].craft_rate > cc[0].craft_rate && auc(&cc[1]) > auc(&cc[0]);
    let fmt = |c: &[evaluation::SecurityCurvePoint]| {
        c.iter()
            .map(|p| format!("{}: rate {:.3} AUC {:.4}", p.strength, p.craft_rate, auc(p)))
            .collect::<Vec<_>>()
            .join("; ")
    };
    report(
        6,
        "JSMA craft rate and AUC nondecreasing in budget, CW rising from c=0.5 to 10",
        jsma_ok && cw_ok,
        &format!("JSMA [{}], CW [{}], ADA-maxKL, {:.0} s", fmt(&jc), fmt(&cc), t.elapsed().as_secs_f64()),
    );
}

#[test]
fn criterion_07_whitebox() {
    const ATTEMPTS: usize = 12;
    let net = &lenet().0;
    let test = &mnist().1;
    let pen = net.spec().penultimate().unwrap();
    let det = Detector::new(DetectorKind::Ada, vec![pen]).with_bank(fgsm_outcome().0.bank.clone());
    let clean: Vec<f64> = det.score_all(net, test.images()).unwrap().iter().map(|s| s.value).collect();
    let tau = evaluation::threshold_at(&clean, &clean, RateTarget::Fpr(0.05)).unwrap().threshold;
    let params = WhiteBoxParams::new(1.0, tau);

    let t = Instant::now();
    let (mut attempts, mut defeats, mut monotone, mut skipped) = (0, 0, 0, 0);
    for (x, y) in test.iter() {
        if attempts == ATTEMPTS {
            break;
        }
        match attacks::whitebox_attack(net, &det, x, y, params) {
            Ok(r) => {
                attempts += 1;
                defeats += r.success as usize;
                monotone += r.cost_trace.windows(2).all(|w| w[1] < w[0]) as usize;
            }
            Err(AttackError::NotCorrectlyClassified { .. } | AttackError::InitiallyDetected { .. }) => skipped += 1,
            Err(e) => panic!("white-box attack: {e}"),
        }
    }
    let rate = defeats as f64 / attempts as f64;
    report(
        7,
        "white-box cost strictly decreasing on every run, defeat rate <= 0.5",
        monotone == attempts && rate <= 0.5,
        &format!(
            "{monotone}/{attempts} runs strictly decreasing, defeat rate {rate:.3} ({defeats}/{attempts}), \
             tau {tau:.4} at 5% FPR, {skipped} inputs skipped, {:.0} s",
            t.elapsed().as_secs_f64()
        ),
    );
}

// -- criterion 8: property suite -------------------------------------------------------

fn random_mixture_samples(rng: &mut impl Rng, n: usize, d: usize, centers: &[Vec<f64>], spread: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let c = &centers[i % centers.len()];
            (0..d)
                .map(|j| c[j] + spread * { let z: f64 = StandardNormal.sample(rng); z })
                .collect::<Vec<f64>>()
        })
        .collect()
}

fn prop_em_monotone() -> Result<String, String> {
    let mut rng = rng_for(SEED, &[8, 1]);
    let mut fits = 0;
    while fits < 100 {
        let d = rng.random_range(1..=4);
        let k = rng.random_range(1..=3);
        let cov = if rng.random_bool(0.5) { CovarianceKind::Full } else { CovarianceKind::Diag };
        let centers: Vec<Vec<f64>> = (0..rng.random_range(1..=4))
            .map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let n = null_models::min_samples(k, d, cov).max(40) + rng.random_range(0..150);
        let spread = rng.random_range(0.2..2.0);
        let samples = random_mixture_samples(&mut rng, n, d, &centers, spread);
        let m = null_models::fit_gmm(&samples, k, cov, rng.random(), &EmOptions::default()).map_err(|e| e.to_string())?;
        let tr = &m.summary().objective_trace;
        if let Some(w) = tr.windows(2).find(|w| w[1] < w[0] - 1e-9 * w[0].abs().max(1.0)) {
            return Err(format!("fit {fits}: objective fell from {} to {}", w[0], w[1]));
        }
        fits += 1;
    }
    Ok(format!("{fits} fits monotone"))
}

fn prop_bic_recovery() -> Result<String, String> {
    let mut detail = Vec::new();
    for true_k in [1usize, 3] {
        let mut hits = 0;
        for s in 0..20u64 {
            let mut rng = rng_for(SEED, &[8, 2, true_k as u64, s]);
            let centers: Vec<Vec<f64>> = (0..true_k).map(|c| vec![10.0 * c as f64, -8.0 * c as f64]).collect();
            let samples = random_mixture_samples(&mut rng, 300, 2, &centers, 1.0);
            let m = null_models::select_order_bic(&samples, &[1, 2, 3, 4, 5], CovarianceKind::Full, s, &EmOptions::default())
                .map_err(|e| e.to_string())?;
            hits += (m.num_components() == true_k) as usize;
        }
        detail.push(format!("k={true_k}: {hits}/20"));
        if hits <= 10 {
            return Err(detail.join(", "));
        }
    }
    Ok(detail.join(", "))
}

fn prop_gradient_fd() -> Result<String, String> {
    use LayerSpec::*;
    let spec = NetworkSpec::new(
        Shape::new(3, 8, 8),
        vec![
            Conv {
                kernel: 3,
                stride: 1,
                out_channels: 3,
            },
            Relu,
            MaxPool { window: 2 },
            Dense { out: 10 },
            Relu,
            Dense { out: 4 },
            Softmax,
        ],
        4,
    )
    .map_err(|e| e.to_string())?;
    let h = 1e-6;
    let (mut good, mut total) = (0usize, 0usize);
    for s in 0..20u64 {
        let net = Network::new(spec.clone(), s);
        let mut rng = rng_for(SEED, &[8, 3, s]);
        let x = Image::new(3, 8, 8, (0..192).map(|_| rng.random_range(0.1..0.9)).collect()).unwrap();
        let obj = Objective::CrossEntropy { target: (s % 4) as usize };
        let g = net.input_gradient(&x, &obj).map_err(|e| e.to_string())?;
        for i in 0..x.len() {
            let at = |delta: f64| {
                let mut px = x.pixels().to_vec();
                px[i] += delta;
                net.objective_value(&Image::new(3, 8, 8, px).unwrap(), &obj).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8);
            good += (rel <= 1e-4) as usize;
            total += 1;
        }
    }
    let frac = good as f64 / total as f64;
    let msg = format!("{good}/{total} coordinates within 1e-4 relative");
    if frac >= 0.99 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn prop_kl() -> Result<String, String> {
    let mut rng = rng_for(SEED, &[8, 4]);
    let simplex = |rng: &mut rand_chacha::ChaCha8Rng, k: usize| {
        let v: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
    };
    for t in 0..100_000 {
        let k = rng.random_range(2..=10);
        let (p, q) = (simplex(&mut rng, k), simplex(&mut rng, k));
        let d = detectors::kl_divergence(&p, &q).map_err(|e| e.to_string())?;
        let same = detectors::kl_divergence(&p, &p).map_err(|e| e.to_string())?;
        if !(d > 0.0) || same != 0.0 {
            return Err(format!("pair {t}: KL(p,q) = {d}, KL(p,p) = {same}"));
        }
    }
    Ok("100000 pairs: positive for P != Q, zero for P = Q".into())
}

fn prop_auc_brute_force() -> Result<String, String> {
    let mut rng = rng_for(SEED, &[8, 5]);
    for t in 0..1000 {
        let (m, n) = (rng.random_range(1..=100), rng.random_range(1..=100));
        let levels = rng.random_range(2..50);
        let mut draw = |k: usize| (0..k).map(|_| rng.random_range(0..levels) as f64 * 0.1).collect::<Vec<f64>>();
        let (pos, neg) = (draw(m), draw(n));
        let mut score = 0.0;
        for a in &pos {
            for b in &neg {
                score += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
        let brute = score / (m * n) as f64;
        let auc = evaluation::roc_auc(&pos, &neg).map_err(|e| e.to_string())?.auc;
        if (auc - brute).abs() > 1e-12 {
            return Err(format!("instance {t}: {auc} vs brute force {brute}"));
        }
    }
    Ok("1000 instances match pair counting".into())
}

fn prop_lognormal_quadrature() -> Result<String, String> {
    let mut rng = rng_for(SEED, &[8, 6]);
    let samples: Vec<Vec<f64>> = (0..400)
        .map(|i| {
            let mu = if i % 2 == 0 { -1.0 } else { 1.5 };
            vec![(mu + 0.5 * { let z: f64 = StandardNormal.sample(&mut rng); z }).exp()]
        })
        .collect();
    let m = null_models::fit_lognormal_mixture(&samples, &[1, 2, 3], CovarianceKind::Full, 1, &EmOptions::default())
        .map_err(|e| e.to_string())?;
    // integrate in u = ln(z + eps), where dz = e^u du
    let (lo, hi, steps) = (null_models::LOG_EPS.ln(), 12.0, 400_000);
    let du = (hi - lo) / steps as f64;
    let mut total = 0.0;
    for i in 0..=steps {
        let u = lo + i as f64 * du;
        let z = (u.exp() - null_models::LOG_EPS).max(0.0);
        let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
        total += w * (m.log_density(&[z]).map_err(|e| e.to_string())? + u).exp() * du;
    }
    let msg = format!("{}-component fit integrates to {total:.6}", m.num_components());
    if (total - 1.0).abs() <= 1e-3 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn prop_p0_invariance() -> Result<String, String> {
    let mut rng = rng_for(SEED, &[8, 7]);
    for t in 0..100 {
        let k = rng.random_range(2..=10);
        let lf: Vec<f64> = (0..k).map(|_| rng.random_range(-50.0..5.0)).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let post: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let shift = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = lf.iter().map(|l| l + shift).collect();
        let counts: Vec<Vec<u64>> = (0..k).map(|i| (0..k).map(|j| if i == j { 90 } else { rng.random_range(0..5) }).collect()).collect();
        let conf = ConfusionMatrix::from_counts(&counts, 1e-3).map_err(|e| e.to_string())?;
        let stats = |l: &[f64]| -> Result<[f64; 3], String> {
            let e = |x: detectors::DetectorError| x.to_string();
            Ok([
                detectors::ada_from_densities(l, &post, ClassMode::Two, KlOrientation::Forward).map_err(e)?.value,
                detectors::ada_from_densities(l, &post, ClassMode::All, KlOrientation::Forward).map_err(e)?.value,
                detectors::aw_ada_from_densities(l, &post, &conf, KlOrientation::Forward).map_err(e)?.value,
            ])
        };
        let (a, b) = (stats(&lf)?, stats(&shifted)?);
        for (x, y) in a.iter().zip(&b) {
            if (x - y).abs() > 1e-9 * x.abs().max(1.0) {
                return Err(format!("case {t}: {a:?} vs {b:?} after scaling by e^{shift:.2}"));
            }
        }
    }
    Ok("100 cases invariant (two-class, all-class, AW-ADA)".into())
}

fn prop_maxkl_monotone() -> Result<String, String> {
    let mut rng = rng_for(SEED, &[8, 8]);
    for t in 0..1000 {
        let n = rng.random_range(1..=8);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let all: Vec<LayerId> = (0..n).map(LayerId).collect();
        let sub: Vec<LayerId> = all.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
        if sub.is_empty() {
            continue;
        }
        let per = |l: LayerId| Ok(Statistic::plain(values[l.0], 0));
        let big = detectors::maxkl_over_layers(&all, per).map_err(|e| e.to_string())?.value;
        let small = detectors::maxkl_over_layers(&sub, per).map_err(|e| e.to_string())?.value;
        if big < small {
            return Err(format!("case {t}: superset {big} < subset {small}"));
        }
    }
    Ok("superset never below subset over 1000 cases".into())
}

fn prop_round_trip() -> Result<String, String> {
    let mut rng = rng_for(SEED, &[8, 9]);
    let e = |x: datasets::DatasetError| x.to_string();
    // IDX: a raw byte stream with random pixels
    let (n, rows, cols) = (37usize, 11usize, 9usize);
    let mut img_bytes = Vec::new();
    img_bytes.extend_from_slice(&datasets::IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [n, rows, cols] {
        img_bytes.extend_from_slice(&(v as u32).to_be_bytes());
    }
    img_bytes.extend((0..n * rows * cols).map(|_| rng.random::<u8>()));
    let mut lab_bytes = Vec::new();
    lab_bytes.extend_from_slice(&datasets::IDX_LABELS_MAGIC.to_be_bytes());
    lab_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    lab_bytes.extend((0..n).map(|_| rng.random_range(0..10u8)));
    let ds = datasets::load_idx(&img_bytes[..], &lab_bytes[..], 10).map_err(e)?;
    let (mut wi, mut wl) = (Vec::new(), Vec::new());
    datasets::write_idx(&ds, &mut wi, &mut wl).map_err(e)?;
    if wi != img_bytes || wl != lab_bytes {
        return Err("IDX bytes differ after a round trip".into());
    }
    // CIFAR-10 binary records
    let mut cifar = Vec::new();
    for _ in 0..25 {
        cifar.push(rng.random_range(0..10u8));
        cifar.extend((0..datasets::CIFAR_RECORD_LEN - 1).map(|_| rng.random::<u8>()));
    }
    let ds = datasets::load_cifar10(&cifar[..]).map_err(e)?;
    let mut out = Vec::new();
    datasets::write_cifar10(&mut out, &ds).map_err(e)?;
    if out != cifar {
        return Err("CIFAR bytes differ after a round trip".into());
    }
    Ok("IDX and CIFAR byte-identical".into())
}

#[test]
fn criterion_08_property_suite() {
    let props: [(&str, fn() -> Result<String, String>); 9] = [
        ("EM monotone", prop_em_monotone),
        ("BIC recovery", prop_bic_recovery),
        ("gradient FD", prop_gradient_fd),
        ("KL", prop_kl),
        ("AUC brute force", prop_auc_brute_force),
        ("log-normal quadrature", prop_lognormal_quadrature),
        ("p0 invariance", prop_p0_invariance),
        ("maxKL monotone", prop_maxkl_monotone),
        ("round trip", prop_round_trip),
    ];
    let results: Vec<(&str, Result<String, String>)> = props.iter().map(|(n, f)| (*n, f())).collect();
    let pass = results.iter().all(|(_, r)| r.is_ok());
    let detail = results
        .iter()
        .map(|(n, r)| match r {
            Ok(m) => format!("{n} ok ({m})"),
            Err(m) => format!("{n} FAILED ({m})"),
        })
        .collect::<Vec<_>>()
        .join("; ");
    report(8, "property suite", pass, &detail);
}

// -- criterion 9: CLI determinism -------------------------------------------------------

fn write_cli_config(dir: &Path) -> PathBuf {
    let d = data_dir().canonicalize().unwrap();
    let f = |n: &str| d.join(n).to_string_lossy().into_owned();
    let cfg = serde_json::json!({
        "data": {
            "train": [f("train-images-idx3-ubyte.gz"), f("train-labels-idx1-ubyte.gz")],
            "test": [f("t10k-images-idx3-ubyte.gz"), f("t10k-labels-idx1-ubyte.gz")],
            "train_limit": 1500,
            "test_limit": 300
        },
        "network": "lenet5",
        "taps": [{"layer": 5, "family": "gmm-diag"}, {"layer": 9, "family": "gmm-diag"}],
        "train": {"epochs": 2, "batch_size": 64, "learning_rate": 0.1},
        "fit": {"k_range": [1, 2], "em": {"max_iter": 200, "tol": 1e-6, "reg_covar": 1e-6}, "seed": 0},
        "detector": "ada",
        "detectors": [{"kind": "ada-maxkl"}, {"kind": "region-count"}],
        "attack": {"kind": "fgsm", "strength": 0.02, "max_iters": 100},
        "max_attempts": 20,
        "seed": SEED,
        "out": "run"
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn cli_pipeline(dir: &Path) -> Vec<u8> {
    let cfg = write_cli_config(dir);
    for cmd in ["train", "fit-null", "craft", "detect", "eval"] {
        let o = Command::new(env!("CARGO_BIN_EXE_ada"))
            .args([cmd, "--config", cfg.to_str().unwrap()])
            .current_dir(dir)
            .output()
            .unwrap();
        assert!(o.status.success(), "ada {cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
    }
    fs::read(dir.join("run").join("summary.json")).unwrap()
}

#[test]
fn criterion_09_cli_determinism() {
    let t = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = cli_pipeline(a.path());
    let again = cli_pipeline(a.path());
    let elsewhere = cli_pipeline(b.path());
    report(
        9,
        "CLI rerun with identical config and seed gives byte-identical summary.json",
        first == again && first == elsewhere,
        &format!(
            "train, fit-null, craft, detect, eval run three times ({} byte summary), {:.0} s",
            first.len(),
            t.elapsed().as_secs_f64()
        ),
    );
}
