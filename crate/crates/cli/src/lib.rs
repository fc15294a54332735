//! The `ada` command-line pipeline.
//!
//! Every command reads a JSON [`RunConfig`](config::RunConfig), applies flag
//! overrides, and reads or writes artifacts in the output directory. Each
//! artifact carries the config hash and seed.

pub mod config;
pub mod error;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ada_core::attacks::{self, AttackKind, AttackRecord, WhiteBoxParams};
use ada_core::datasets::{self, Image, LabeledDataset};
use ada_core::detectors::{self, ConfusionMatrix, Detector, DetectorKind, WhiteCountModel};
use ada_core::dnn::{self, Network, NetworkManifest};
use ada_core::evaluation::{self, RateTarget, ScenarioReport};
use ada_core::null_models::{self, BankManifest, NullModelBank};
use ada_core::provenance::Provenance;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use config::{Overrides, RunConfig};
pub use error::CliError;

pub const NETWORK_FILE: &str = "network.json";
pub const BANK_FILE: &str = "bank.json";
pub const CONFUSION_FILE: &str = "confusion.json";
pub const ATTACKS_FILE: &str = "attacks.csv";
pub const ATTACKS_ORIGINAL_FILE: &str = "attacks_original.idx";
pub const ATTACKS_PERTURBED_FILE: &str = "attacks_perturbed.idx";
pub const VERDICTS_FILE: &str = "verdicts.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ROC_FILE: &str = "roc.csv";
pub const CURVE_FILE: &str = "curve.csv";

const CONFUSION_FORMAT: &str = "ada-confusion/1";
const SUMMARY_FORMAT: &str = "ada-summary/1";

#[derive(Debug, Parser)]
#[command(name = "ada", version, about = "Detect test-time evasion attacks from deep-layer null models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the classifier and write network.json/.bin.
    Train(RunArgs),
    /// Fit class-conditional null models and the confusion matrix.
    FitNull(RunArgs),
    /// Craft attacks on correctly classified test images.
    Craft(RunArgs),
    /// Score the test set plus crafted attacks and write verdicts.csv.
    Detect(RunArgs),
    /// Run the configured scenario and write summary.json and roc.csv.
    Eval(RunArgs),
    /// Sweep attack strengths and write curve.csv.
    Curve(RunArgs),
    /// Print a human-readable summary of an artifact.
    Describe {
        path: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Global seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Primary detector, e.g. ada, ada-maxkl, aw-ada-maxkl, l-awa-maxkl, region-count.
    #[arg(long)]
    pub detector: Option<String>,
    /// Attack: fgsm, jsma, cw or whitebox.
    #[arg(long)]
    pub attack: Option<String>,
    /// FGSM step, JSMA pixel fraction, or CW / white-box Lagrange multiplier.
    #[arg(long)]
    pub strength: Option<f64>,
    /// clean, noisy or mismatch.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Operate at this false positive rate.
    #[arg(long, conflicts_with = "tpr")]
    pub fpr: Option<f64>,
    /// Operate at this true positive rate (default 0.8).
    #[arg(long)]
    pub tpr: Option<f64>,
}

impl RunArgs {
    fn overrides(&self) -> Result<Overrides, CliError> {
        Ok(Overrides {
            seed: self.seed,
            out: self.out.clone(),
            detector: self.detector.as_deref().map(str::parse).transpose().map_err(CliError::ConfigInvalid)?,
            attack: self.attack.as_deref().map(str::parse).transpose().map_err(CliError::ConfigInvalid)?,
            strength: self.strength,
            scenario: self.scenario.as_deref().map(str::parse).transpose().map_err(CliError::ConfigInvalid)?,
            fpr: self.fpr,
            tpr: self.tpr,
        })
    }

    /// File config with flags applied, validated.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(&self.config)?;
        cfg.apply(&self.overrides()?);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one command; human-readable results go to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(&a.resolve()?, out),
        Command::FitNull(a) => cmd_fit_null(&a.resolve()?, out),
        Command::Craft(a) => cmd_craft(&a.resolve()?, out),
        Command::Detect(a) => cmd_detect(&a.resolve()?, out),
        Command::Eval(a) => cmd_eval(&a.resolve()?, out),
        Command::Curve(a) => cmd_curve(&a.resolve()?, out),
        Command::Describe { path } => describe(&path, out),
    }
}

// -- artifact helpers ------------------------------------------------------------------

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    Ok(cfg.out.clone())
}

fn require(path: PathBuf, producer: &str) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact {
            message: format!("not found; run `ada {producer}` first"),
            path,
        })
    }
}

fn unreadable(path: &Path) -> impl Fn(String) -> CliError + '_ {
    move |message| CliError::UnreadableArtifact {
        path: path.to_path_buf(),
        message,
    }
}

pub fn load_network(dir: &Path) -> Result<Network, CliError> {
    let p = require(dir.join(NETWORK_FILE), "train")?;
    Network::load(&p).map_err(|e| unreadable(&p)(e.to_string()))
}

pub fn load_bank(dir: &Path) -> Result<NullModelBank, CliError> {
    let p = require(dir.join(BANK_FILE), "fit-null")?;
    NullModelBank::load(&p).map_err(|e| unreadable(&p)(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfusionFile {
    format: String,
    provenance: Provenance,
    confusion: ConfusionMatrix,
}

fn load_confusion(dir: &Path) -> Result<ConfusionMatrix, CliError> {
    let p = require(dir.join(CONFUSION_FILE), "fit-null")?;
    let bytes = fs::read(&p).map_err(io_err(&p))?;
    let f: ConfusionFile = serde_json::from_slice(&bytes).map_err(|e| unreadable(&p)(e.to_string()))?;
    if f.format != CONFUSION_FORMAT {
        return Err(unreadable(&p)(format!("unknown format {:?}", f.format)));
    }
    Ok(f.confusion)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(CliError::runtime)?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn csv_buffer(f: impl FnOnce(&mut Vec<u8>) -> Result<(), CliError>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

/// Primary detector with every component it needs, loaded from `dir`.
fn primary_detector(cfg: &RunConfig, train: &LabeledDataset, dir: &Path, spec: &dnn::NetworkSpec) -> Result<Detector, CliError> {
    let sc = cfg.scenario_config(spec);
    let setup = &sc.detectors[0];
    let mut det = Detector::new(setup.kind, sc.detector_layers(setup));
    det.binarize_threshold = sc.binarize_threshold;
    if setup.kind.needs_bank() {
        det = det.with_bank(load_bank(dir)?);
    }
    if setup.kind.needs_confusion() {
        det = det.with_confusion(load_confusion(dir)?);
    }
    if setup.kind == DetectorKind::WhiteCount {
        det = det.with_white_count(WhiteCountModel::fit(train, sc.binarize_threshold));
    }
    Ok(det)
}

// -- commands --------------------------------------------------------------------------

fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let spec = cfg.network_spec()?;
    let train = cfg.load_train()?;
    let test = cfg.load_test()?;
    let net = evaluation::train_network(&spec, &train, &cfg.train_config()).map_err(CliError::runtime)?;
    let dir = out_dir(cfg)?;
    let path = dir.join(NETWORK_FILE);
    net.save(&path, Some(&cfg.provenance())).map_err(CliError::runtime)?;
    let acc = net.accuracy(&test).map_err(CliError::runtime)?;
    writeln!(out, "network={}", path.display()).ok();
    writeln!(out, "params={}", net.param_count()).ok();
    writeln!(out, "test_accuracy={acc}").ok();
    Ok(())
}

fn cmd_fit_null(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let net = load_network(&dir)?;
    let spec = net.spec().clone();
    let train = cfg.load_train()?;
    let sc = cfg.scenario_config(&spec);
    let bank = evaluation::fit_scenario_bank(&net, &train, &sc).map_err(CliError::runtime)?;
    let prov = cfg.provenance();
    bank.save(&dir.join(BANK_FILE), Some(&prov)).map_err(CliError::runtime)?;
    let conf = detectors::estimate_confusion(&net, &train, cfg.confusion_eta).map_err(CliError::runtime)?;
    write_json(
        &dir.join(CONFUSION_FILE),
        &ConfusionFile {
            format: CONFUSION_FORMAT.into(),
            provenance: prov,
            confusion: conf,
        },
    )?;
    writeln!(out, "bank={}", dir.join(BANK_FILE).display()).ok();
    writeln!(out, "layers={}", bank.layers().iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")).ok();
    Ok(())
}

fn clean_threshold(det: &Detector, net: &Network, test: &LabeledDataset, q: f64) -> Result<f64, CliError> {
    let (clean, _) = evaluation::score_clean(net, det, test).map_err(CliError::runtime)?;
    Ok(evaluation::threshold_at(&clean, &clean, RateTarget::Fpr(q)).map_err(CliError::runtime)?.threshold)
}

fn cmd_craft(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let net = load_network(&dir)?;
    let test = cfg.load_test()?;
    let acfg = cfg.attack_config();
    let records: Vec<(usize, AttackRecord)> = if acfg.kind == AttackKind::WhiteBox {
        let train = cfg.load_train()?;
        let det = primary_detector(cfg, &train, &dir, net.spec())?;
        let tau = clean_threshold(&det, &net, &test, cfg.fpr.unwrap_or(0.1))?;
        let mut recs = Vec::new();
        for (i, (x, y)) in test.iter().enumerate() {
            if recs.len() >= cfg.max_attempts {
                break;
            }
            let mut p = WhiteBoxParams::new(acfg.strength, tau);
            p.step = acfg.whitebox_step;
            p.max_passes = acfg.max_iters;
            match attacks::whitebox_attack(&net, &det, x, y, p) {
                Ok(r) => recs.push((i, r)),
                Err(attacks::AttackError::NotCorrectlyClassified { .. } | attacks::AttackError::InitiallyDetected { .. }) => {}
                Err(e) => return Err(CliError::runtime(e)),
            }
        }
        writeln!(out, "threshold={tau}").ok();
        recs
    } else {
        attacks::craft_attacks(&net, &test, &acfg, cfg.max_attempts).map_err(CliError::runtime)?
    };
    let comment = cfg.provenance().csv_comment();
    let csv = csv_buffer(|b| attacks::write_records_csv(b, &records, Some(&comment)).map_err(CliError::runtime))?;
    write_file(&dir.join(ATTACKS_FILE), &csv)?;
    let (orig, pert) = attacks::record_tensors(&records);
    for (name, t) in [(ATTACKS_ORIGINAL_FILE, orig), (ATTACKS_PERTURBED_FILE, pert)] {
        let mut buf = Vec::new();
        datasets::write_idx_f32(&mut buf, &t).map_err(CliError::runtime)?;
        write_file(&dir.join(name), &buf)?;
    }
    let recs: Vec<AttackRecord> = records.into_iter().map(|(_, r)| r).collect();
    writeln!(out, "attempts={}", recs.len()).ok();
    writeln!(out, "craft_rate={}", attacks::craft_rate(&recs)).ok();
    Ok(())
}

/// Successful crafted attacks from the craft artifacts: `(source index, true class, image)`.
fn load_attacks(dir: &Path) -> Result<Option<Vec<(usize, usize, Image)>>, CliError> {
    let csv_path = dir.join(ATTACKS_FILE);
    if !csv_path.exists() {
        return Ok(None);
    }
    let idx_path = require(dir.join(ATTACKS_PERTURBED_FILE), "craft")?;
    let text = fs::read_to_string(&csv_path).map_err(io_err(&csv_path))?;
    let bad = unreadable(&csv_path);
    let mut rows = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(format!("malformed row {line:?}")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
        rows.push((num(f[0])?, num(f[1])?, f[3] == "1"));
    }
    let bytes = fs::read(&idx_path).map_err(io_err(&idx_path))?;
    let images = if rows.is_empty() {
        Vec::new()
    } else {
        let t = datasets::read_idx_f32(bytes.as_slice()).map_err(|e| unreadable(&idx_path)(e.to_string()))?;
        datasets::tensor_to_images(&t).map_err(|e| unreadable(&idx_path)(e.to_string()))?
    };
    if images.len() != rows.len() {
        return Err(unreadable(&idx_path)(format!("{} images for {} attack rows", images.len(), rows.len())));
    }
    Ok(Some(
        rows.into_iter()
            .zip(images)
            .filter(|((_, _, ok), _)| *ok)
            .map(|((i, y, _), img)| (i, y, img))
            .collect(),
    ))
}

fn cmd_detect(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let net = load_network(&dir)?;
    let train = cfg.load_train()?;
    let test = cfg.load_test()?;
    let det = primary_detector(cfg, &train, &dir, net.spec())?;
    let attacks = load_attacks(&dir)?.unwrap_or_default();

    let score = |x: &Image| det.score(&net, x).map_err(CliError::runtime);
    let clean: Vec<_> = test.images().iter().map(score).collect::<Result<_, _>>()?;
    let adv: Vec<_> = attacks.iter().map(|(_, _, x)| score(x)).collect::<Result<_, _>>()?;
    let clean_v: Vec<f64> = clean.iter().map(|s| s.value).collect();
    let adv_v: Vec<f64> = adv.iter().map(|s| s.value).collect();
    let op = match cfg.rate_target() {
        RateTarget::Fpr(q) => {
            let pos = if adv_v.is_empty() { &clean_v } else { &adv_v };
            evaluation::threshold_at(pos, &clean_v, RateTarget::Fpr(q))
        }
        RateTarget::Tpr(q) => {
            if adv_v.is_empty() {
                return Err(CliError::ConfigInvalid(
                    "a TPR operating point needs successful crafted attacks; run `ada craft` or pass --fpr".into(),
                ));
            }
            evaluation::threshold_at(&adv_v, &clean_v, RateTarget::Tpr(q))
        }
    }
    .map_err(CliError::runtime)?;

    let mut buf = Vec::new();
    writeln!(buf, "{}", cfg.provenance().csv_comment()).ok();
    writeln!(buf, "{},population,source_index", detectors::DetectorVerdict::CSV_HEADER).ok();
    let rows = clean
        .iter()
        .enumerate()
        .map(|(i, s)| (s, "clean", i))
        .chain(adv.iter().zip(&attacks).map(|(s, (i, _, _))| (s, "attack", *i)));
    for (id, (s, pop, src)) in rows.enumerate() {
        writeln!(buf, "{},{pop},{src}", s.decide(op.threshold).csv_row(id)).ok();
    }
    write_file(&dir.join(VERDICTS_FILE), &buf)?;
    writeln!(out, "threshold={}", op.threshold).ok();
    writeln!(out, "fpr={}", op.fpr).ok();
    writeln!(out, "tpr={}", op.tpr).ok();
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SummaryFile {
    pub format: String,
    pub provenance: Provenance,
    pub report: ScenarioReport,
}

fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let net = load_network(&dir)?;
    let bank = load_bank(&dir)?;
    let spec = net.spec().clone();
    let train = cfg.load_train()?;
    let test = cfg.load_test()?;
    let sc = cfg.scenario_config(&spec);
    let outcome = evaluation::run_scenario(&sc, &spec, &train, &test, Some(&net), Some(&bank)).map_err(CliError::runtime)?;
    let prov = cfg.provenance();
    write_json(
        &dir.join(SUMMARY_FILE),
        &SummaryFile {
            format: SUMMARY_FORMAT.into(),
            provenance: prov.clone(),
            report: outcome.report.clone(),
        },
    )?;
    match outcome.rocs.first() {
        Some(roc) => {
            let csv = csv_buffer(|b| roc.write_csv(b, Some(&prov.csv_comment())).map_err(CliError::runtime))?;
            write_file(&dir.join(ROC_FILE), &csv)?;
        }
        None => writeln!(out, "warning=no successful attacks; roc.csv not written").unwrap_or(()),
    }
    writeln!(out, "scenario={}", outcome.report.scenario).ok();
    writeln!(out, "craft_rate={}", outcome.report.craft_rate).ok();
    for d in &outcome.report.detectors {
        writeln!(out, "auc[{}]={}", d.detector, d.auc).ok();
    }
    Ok(())
}

fn cmd_curve(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    if cfg.strengths.is_empty() {
        return Err(CliError::ConfigInvalid("curve needs a nonempty `strengths` list".into()));
    }
    if cfg.attack.kind == AttackKind::WhiteBox {
        return Err(CliError::ConfigInvalid("curve supports fgsm, jsma and cw".into()));
    }
    let dir = out_dir(cfg)?;
    let net = load_network(&dir)?;
    let train = cfg.load_train()?;
    let test = cfg.load_test()?;
    let det = primary_detector(cfg, &train, &dir, net.spec())?;
    let tpr = match cfg.rate_target() {
        RateTarget::Tpr(q) => q,
        RateTarget::Fpr(_) => return Err(CliError::ConfigInvalid("curve fixes the TPR; pass --tpr".into())),
    };
    let pts = evaluation::security_curve(&net, &det, &cfg.attack_config(), &cfg.strengths, &test, tpr, cfg.max_attempts)
        .map_err(CliError::runtime)?;
    let comment = cfg.provenance().csv_comment();
    let csv = csv_buffer(|b| evaluation::write_curve_csv(b, &pts, Some(&comment)).map_err(CliError::runtime))?;
    write_file(&dir.join(CURVE_FILE), &csv)?;
    for p in &pts {
        writeln!(out, "strength={} craft_rate={} auc={:?}", p.strength, p.craft_rate, p.auc).ok();
    }
    Ok(())
}

// -- describe --------------------------------------------------------------------------

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn describe(path: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::UnreadableArtifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let bad = unreadable(path);
    if bytes.len() >= 4 && bytes[0] == 0 && bytes[1] == 0 && !bytes.starts_with(b"{") {
        return describe_idx(path, &bytes, out);
    }
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| bad(format!("not a known artifact: {e}")))?;
    let format = value.get("format").and_then(|f| f.as_str()).unwrap_or_default().to_owned();
    let w = |out: &mut dyn Write, s: String| {
        writeln!(out, "{s}").ok();
    };
    match format.as_str() {
        dnn::NETWORK_FORMAT => {
            let m: NetworkManifest = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            let blob_path = m.blob_path(path);
            let blob = fs::read(&blob_path).map_err(|e| unreadable(&blob_path)(e.to_string()))?;
            let net = Network::from_manifest(m.clone(), &blob).map_err(|e| unreadable(&blob_path)(e.to_string()))?;
            let spec = net.spec();
            w(out, format!("format: {format}"));
            w(out, format!("input: {}x{}x{}", spec.input.channels, spec.input.height, spec.input.width));
            w(out, format!("classes: {}", spec.num_classes));
            w(out, format!("parameters: {}", net.param_count()));
            w(out, "layers:".into());
            for (i, (l, s)) in spec.layers.iter().zip(spec.output_shapes()).enumerate() {
                w(
                    out,
                    format!(
                        "  {i:>2} {:<8} {:<40} -> {}x{}x{}",
                        spec.layer_name(dnn::LayerId(i)),
                        serde_json::to_string(l).unwrap_or_default(),
                        s.channels,
                        s.height,
                        s.width
                    ),
                );
            }
            w(out, format!("blob: {} ({} bytes, sha256 {})", blob_path.display(), blob.len(), sha256_hex(&blob)));
            if let Some(p) = &m.provenance {
                w(out, format!("config_hash: {}\nseed: {}", p.config_hash, p.seed));
            }
        }
        null_models::BANK_FORMAT => {
            let m: BankManifest = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            let blob_path = m.blob_path(path);
            let blob = fs::read(&blob_path).map_err(|e| unreadable(&blob_path)(e.to_string()))?;
            NullModelBank::from_manifest(&m, &blob).map_err(|e| unreadable(&blob_path)(e.to_string()))?;
            w(out, format!("format: {format}"));
            w(out, format!("classes: {}", m.num_classes));
            w(out, format!("{:<6} {:<6} {:<12} {:<16} {:>3}", "layer", "class", "pair", "family", "k"));
            for e in &m.models {
                let pair = e.pair.map_or("-".into(), |(i, j)| format!("({i},{j})"));
                w(out, format!("{:<6} {:<6} {:<12} {:<16} {:>3}", e.layer.0, e.class, pair, e.family.to_string(), e.k));
            }
            w(out, format!("blob: {} ({} bytes, sha256 {})", blob_path.display(), blob.len(), sha256_hex(&blob)));
            if let Some(p) = &m.provenance {
                w(out, format!("config_hash: {}\nseed: {}", p.config_hash, p.seed));
            }
        }
        CONFUSION_FORMAT => {
            let f: ConfusionFile = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            let c = &f.confusion;
            w(out, format!("format: {format}\nclasses: {}\neta: {}", c.num_classes(), c.eta()));
            for d in 0..c.num_classes() {
                let row: Vec<String> = (0..c.num_classes()).map(|t| format!("{:.4}", c.get(d, t))).collect();
                w(out, format!("  {}", row.join(" ")));
            }
        }
        SUMMARY_FORMAT => {
            let f: SummaryFile = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
            let r = &f.report;
            w(out, format!("format: {format}\nscenario: {}\nattack: {} (strength {})", r.scenario, r.attack, r.strength));
            w(out, format!("craft_rate: {}\ntest_accuracy: {}", r.craft_rate, r.test_accuracy));
            for d in &r.detectors {
                w(out, format!("  {:<14} auc {:.4}", d.detector.to_string(), d.auc));
            }
        }
        other => return Err(bad(format!("unknown artifact format {other:?}"))),
    }
    Ok(())
}

fn describe_idx(path: &Path, bytes: &[u8], out: &mut dyn Write) -> Result<(), CliError> {
    let dtype = match bytes[2] {
        0x08 => "u8",
        0x0D => "f32",
        other => return Err(unreadable(path)(format!("unsupported IDX type byte 0x{other:02x} at offset 2"))),
    };
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(unreadable(path)(format!("truncated IDX header at offset {}", bytes.len())));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let elem = if dtype == "u8" { 1 } else { 4 };
    let want = header + dims.iter().product::<usize>() * elem;
    if bytes.len() != want {
        return Err(unreadable(path)(format!(
            "IDX body ends at offset {} but dims {dims:?} need {want} bytes",
            bytes.len()
        )));
    }
    writeln!(out, "format: idx-{dtype}\ndims: {dims:?}\nsha256: {}", sha256_hex(bytes)).ok();
    Ok(())
}
