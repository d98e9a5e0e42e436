//! The evaluation matrix against a hand-written replay of its loop.

use std::collections::BTreeMap;

use ctsanity::classifier::{predict, train, Extractor, ExtractorSpec, FeatureScaler, TrainConfig};
use ctsanity::formats::InputFormat;
use ctsanity::matrix::{
    run_matrix, split_tune, tune_seed, CellKey, Dataset, DatasetInput, MatrixConfig, MemorySource, Patient,
};
use ctsanity::preprocess::{clip_and_normalize, compute_norm_stats, PreprocessConfig};
use ctsanity::stats::{stratified_kfold, RocResult};
use ctsanity::volume::Volume;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn volume(rng: &mut ChaCha8Rng, label: u8) -> Volume {
    let bright = if label == 1 { 80.0 } else { 40.0 };
    let data = Array3::from_shape_fn((4, 16, 16), |(_, y, x)| {
        let blob = if (4..8).contains(&y) && (4..8).contains(&x) { bright } else { 0.0 };
        blob + rng.random_range(-20.0f32..20.0)
    });
    Volume::new(data, [1.0; 3], "test").unwrap()
}

fn dataset(prefix: &str, n: usize, formats: &[InputFormat], seed: u64) -> (Vec<Patient>, MemorySource) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src = MemorySource::default();
    let patients: Vec<Patient> =
        (0..n).map(|i| Patient { id: format!("{prefix}{i:02}"), label: u8::from(i % 2 == 1) }).collect();
    for p in &patients {
        for &f in formats {
            src.0.insert((p.id.clone(), f), volume(&mut rng, p.label));
        }
    }
    (patients, src)
}

fn small_configs() -> (PreprocessConfig, TrainConfig, MatrixConfig, Extractor) {
    let pre = PreprocessConfig { target_hw: (16, 16), ..PreprocessConfig::default() };
    let train = TrainConfig { epochs: 8, lr: 1e-3, seed: 3, ..TrainConfig::default() };
    let m = MatrixConfig { k: 2, fold_seed: 11, tune_fraction: 0.25, ..MatrixConfig::default() };
    let ex = Extractor::from_spec(&ExtractorSpec::default()).unwrap();
    (pre, train, m, ex)
}

#[test]
fn per_fold_results_match_manual_replay() {
    let f = InputFormat::Original;
    let (patients, src) = dataset("p", 8, &[f], 5);
    let (pre, tcfg, mcfg, ex) = small_configs();
    let labels: BTreeMap<String, u8> = patients.iter().map(|p| (p.id.clone(), p.label)).collect();
    let folds = stratified_kfold(&labels, 2, mcfg.fold_seed).unwrap();
    let dev = DatasetInput { patients: patients.clone(), formats: vec![f], source: &src };
    let m = run_matrix(&dev, None, &ex, &pre, &tcfg, &mcfg, &folds).unwrap();
    let cell = m.cell(CellKey::dev(f, f)).unwrap();
    assert_eq!(cell.per_fold.len(), 2);

    let vol = |id: &str| src.0[&(id.to_string(), f)].clone();
    for fold in 0..2 {
        let as_patients =
            |ids: Vec<&str>| -> Vec<Patient> { ids.into_iter().map(|id| Patient { id: id.into(), label: labels[id] }).collect() };
        let train_p = as_patients(folds.train_ids(fold));
        let test_p = as_patients(folds.test_ids(fold));
        let (fit, tune) = split_tune(&train_p, mcfg.tune_fraction, tune_seed(mcfg.fold_seed, fold)).unwrap();
        let train_vols: Vec<Volume> = train_p.iter().map(|p| vol(&p.id)).collect();
        let norm = compute_norm_stats(&train_vols.iter().collect::<Vec<_>>(), &pre).unwrap();
        let embed = |p: &Patient| {
            let v = clip_and_normalize(&vol(&p.id), &pre, norm).unwrap();
            ex.extract(&v, &p.id, p.label, f).unwrap()
        };
        let mut fit_e: Vec<_> = fit.iter().map(embed).collect();
        let mut tune_e: Vec<_> = tune.iter().map(embed).collect();
        let scaler = FeatureScaler::fit(&fit_e).unwrap();
        fit_e.iter_mut().chain(tune_e.iter_mut()).for_each(|e| scaler.apply(e).unwrap());
        let (head, _) = train(&fit_e, &tune_e, &tcfg).unwrap();

        let system = m.systems.iter().find(|s| s.fold == fold).unwrap();
        assert_eq!(system.norm, norm);
        assert_eq!(system.head, head);

        let scores: Vec<f64> = test_p
            .iter()
            .map(|p| {
                let mut e = embed(p);
                scaler.apply(&mut e).unwrap();
                predict(&head, &e).unwrap()
            })
            .collect();
        let want = RocResult::new(
            test_p.iter().map(|p| p.id.clone()).collect(),
            scores,
            test_p.iter().map(|p| p.label).collect(),
        )
        .unwrap();
        assert_eq!(cell.per_fold[fold], want, "fold {fold}");
    }
}

#[test]
fn full_grid_layout() {
    let all = InputFormat::ALL;
    let no_mask = [InputFormat::Original, InputFormat::Noise];
    let (dev_p, dev_src) = dataset("d", 8, &all, 1);
    let (gen_p, gen_src) = dataset("g", 6, &no_mask, 2);
    let (pre, mut tcfg, mcfg, ex) = small_configs();
    tcfg.epochs = 2;
    let labels = dev_p.iter().map(|p| (p.id.clone(), p.label)).collect();
    let folds = stratified_kfold(&labels, 2, 0).unwrap();
    let dev = DatasetInput { patients: dev_p, formats: all.to_vec(), source: &dev_src };
    let gen = DatasetInput { patients: gen_p, formats: no_mask.to_vec(), source: &gen_src };
    let m = run_matrix(&dev, Some(&gen), &ex, &pre, &tcfg, &mcfg, &folds).unwrap();

    let dev_cells: Vec<_> = m.cells.iter().filter(|c| c.key.dataset == Dataset::Development).collect();
    assert_eq!(dev_cells.len(), 16);
    assert_eq!(dev_cells.iter().filter(|c| c.self_test).count(), 4);
    let gen_tests: std::collections::BTreeSet<_> =
        m.cells.iter().filter(|c| c.key.dataset == Dataset::Generalization).map(|c| c.key.test).collect();
    assert_eq!(gen_tests.into_iter().collect::<Vec<_>>(), no_mask.to_vec());
    for c in &m.cells {
        assert!(c.ci95.0 <= c.mean_auc && c.mean_auc <= c.ci95.1, "{}", c.key);
        assert_eq!(c.per_fold.len(), 2);
    }
    assert_eq!(m.systems.len(), 8);
    assert_eq!(m.fold_hash, folds.hash());
}

#[test]
fn missing_volume_names_patient_and_format() {
    let (patients, mut src) = dataset("p", 8, &[InputFormat::Original, InputFormat::Noise], 3);
    src.0.remove(&("p03".to_string(), InputFormat::Noise));
    let (pre, tcfg, mcfg, ex) = small_configs();
    let labels = patients.iter().map(|p| (p.id.clone(), p.label)).collect();
    let folds = stratified_kfold(&labels, 2, 0).unwrap();
    let dev = DatasetInput { patients, formats: vec![InputFormat::Original, InputFormat::Noise], source: &src };
    let err = run_matrix(&dev, None, &ex, &pre, &tcfg, &mcfg, &folds).unwrap_err();
    assert_eq!(err.to_string(), "missing noise data for patient p03");
}

#[test]
fn rerun_is_bit_identical() {
    let f = InputFormat::Original;
    let (patients, src) = dataset("p", 10, &[f], 9);
    let (pre, tcfg, mcfg, ex) = small_configs();
    let labels = patients.iter().map(|p| (p.id.clone(), p.label)).collect();
    let folds = stratified_kfold(&labels, 2, 0).unwrap();
    let dev = DatasetInput { patients, formats: vec![f], source: &src };
    let a = run_matrix(&dev, None, &ex, &pre, &tcfg, &mcfg, &folds).unwrap();
    let b = run_matrix(&dev, None, &ex, &pre, &tcfg, &mcfg, &folds).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}
