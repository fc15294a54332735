mod common;

use ada_core::attacks::{self, AttackConfig, AttackKind, WhiteBoxParams};
use ada_core::detectors::{self, Detector, DetectorKind};
use ada_core::dnn::{LayerId, Network};
use ada_core::evaluation::{self, RateTarget};
use ada_core::null_models::{self, FitOptions, NullModelBank, PairwiseOptions, TapFamily};
use ada_core::provenance::Provenance;
use common::*;

fn penultimate_bank(net: &Network, train: &ada_core::datasets::LabeledDataset) -> (NullModelBank, LayerId) {
    let spec = net.spec();
    let pen = spec.penultimate().unwrap();
    let taps = [TapFamily {
        layer: pen,
        family: null_models::default_family(spec, pen),
    }];
    let opts = FitOptions { k_range: vec![1, 2], ..FitOptions::default() };
    (null_models::fit_null_bank(net, train, &taps, &opts).unwrap(), pen)
}

#[test]
fn network_and_bank_round_trip_through_disk() {
    let train = toy_dataset(240, 1);
    let net = toy_network(&train);
    let (bank, pen) = penultimate_bank(&net, &train);
    let dir = tempfile::tempdir().unwrap();
    let prov = Provenance::new("abc", 3);

    let npath = dir.path().join("net.json");
    net.save(&npath, Some(&prov)).unwrap();
    let loaded = Network::load(&npath).unwrap();
    assert_eq!(loaded.flat_params(), net.quantized_f32().flat_params());

    let bpath = dir.path().join("bank.json");
    bank.save(&bpath, Some(&prov)).unwrap();
    let lb = NullModelBank::load(&bpath).unwrap();
    let z = loaded.forward(&train.images()[0], &[pen]).unwrap().1;
    let a = bank.class_log_densities(pen, z.get(pen).unwrap()).unwrap();
    let b = lb.class_log_densities(pen, z.get(pen).unwrap()).unwrap();
    assert_eq!(a, b);

    // saving twice gives identical bytes
    let before = std::fs::read_to_string(&bpath).unwrap();
    let before_bin = std::fs::read(bpath.with_extension("bin")).unwrap();
    lb.save(&bpath, Some(&prov)).unwrap();
    assert_eq!(before, std::fs::read_to_string(&bpath).unwrap());
    assert_eq!(before_bin, std::fs::read(bpath.with_extension("bin")).unwrap());
}

#[test]
fn truncated_blob_reports_offset() {
    let train = toy_dataset(60, 1);
    let net = toy_network(&train);
    let dir = tempfile::tempdir().unwrap();
    let npath = dir.path().join("net.json");
    net.save(&npath, None).unwrap();
    let bin = npath.with_extension("bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 10]).unwrap();
    match Network::load(&npath) {
        Err(ada_core::dnn::DnnError::Corrupt { offset, .. }) => assert_eq!(offset, bytes.len() - 10),
        other => panic!("expected Corrupt, got {other:?}"),
    }
}

#[test]
fn ada_separates_fgsm_attacks_on_toy_data() {
    let train = toy_dataset(300, 1);
    let test = toy_dataset(60, 2);
    let net = toy_network(&train);
    assert!(net.accuracy(&test).unwrap() > 0.9);
    let (bank, pen) = penultimate_bank(&net, &train);
    let det = Detector::new(DetectorKind::Ada, vec![pen]).with_bank(bank);
    let mut cfg = AttackConfig::new(AttackKind::Fgsm, 0.05);
    cfg.max_iters = 300;
    let recs = attacks::craft_attacks(&net, &test, &cfg, 30).unwrap();
    let adv: Vec<f64> = recs
        .iter()
        .filter(|(_, r)| r.success)
        .map(|(_, r)| det.score(&net, &r.perturbed).unwrap().value)
        .collect();
    assert!(adv.len() >= 10);
    let (clean, _) = evaluation::score_clean(&net, &det, &test).unwrap();
    let auc = evaluation::roc_auc(&adv, &clean).unwrap().auc;
    assert!(auc > 0.8, "auc {auc}");
}

#[test]
fn l_awa_runs_on_pairwise_bank() {
    let train = toy_dataset(150, 1);
    let net = toy_network(&train);
    let pen = net.spec().penultimate().unwrap();
    let mut opts = PairwiseOptions::default();
    opts.max_pairs_per_layer = Some(10);
    opts.fit.k_range = vec![1];
    let bank = null_models::fit_pairwise_bank(&net, &train, &[pen], &opts).unwrap();
    assert!(bank.pair_layer(pen).unwrap().pairs.len() <= 10);
    let conf = detectors::estimate_confusion(&net, &train, 1e-3).unwrap();
    let det = Detector::new(DetectorKind::LAwaMaxKl, vec![pen]).with_bank(bank).with_confusion(conf);
    for x in train.images().iter().take(5) {
        let s = det.score(&net, x).unwrap();
        assert!(s.value >= 0.0 && s.value.is_finite());
        assert_eq!(s.winning_layer, Some(pen));
    }
}

#[test]
fn whitebox_cost_strictly_decreases_against_ada() {
    let train = toy_dataset(300, 1);
    let test = toy_dataset(12, 3);
    let net = toy_network(&train);
    let (bank, pen) = penultimate_bank(&net, &train);
    let det = Detector::new(DetectorKind::Ada, vec![pen]).with_bank(bank);
    let (clean, _) = evaluation::score_clean(&net, &det, &test).unwrap();
    // τ at 10% false positives on the clean set
    let tau = evaluation::threshold_at(&clean, &clean, RateTarget::Fpr(0.1)).unwrap().threshold;
    let mut runs = 0;
    for (x, y) in test.iter().take(4) {
        let mut p = WhiteBoxParams::new(2.0, tau);
        p.max_passes = 3;
        match attacks::whitebox_attack(&net, &det, x, y, p) {
            Ok(r) => {
                runs += 1;
                assert!(r.cost_trace.windows(2).all(|w| w[1] < w[0]));
                let flagged = det.score(&net, &r.perturbed).unwrap().value > tau;
                assert_eq!(r.success, net.decide(&r.perturbed).unwrap() != y && !flagged);
            }
            Err(attacks::AttackError::NotCorrectlyClassified { .. } | attacks::AttackError::InitiallyDetected { .. }) => {}
            Err(e) => panic!("{e}"),
        }
    }
    assert!(runs > 0);
}
