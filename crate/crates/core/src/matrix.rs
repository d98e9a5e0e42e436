//! The cross-format evaluation grid: one system per training format, each
//! scored on every available test format.
//!
//! A system is the pair (normalization statistics, trained head). Both are
//! fitted on a fold's training split in the training format, then applied
//! unchanged to the held-out patients in every test format.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{predict, train, EmbeddingSequence, Extractor, FeatureScaler, HeadParams, TrainConfig, TrainHistory};
use crate::error::{Error, Result};
use crate::formats::{format_path, InputFormat};
use crate::preprocess::{clip_and_normalize, NormAccumulator, NormStats, PreprocessConfig};
use crate::stats::{
    auc_ci, cv_auc_ci, delong_test, delong_unpaired, fold_t_ci, repeated_auc_ci, CiMethod, DelongResult, FoldAssignment,
    Interval, RocResult,
};
use crate::volume::{read_volume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Development,
    Generalization,
}

impl Dataset {
    pub fn short(self) -> &'static str {
        match self {
            Dataset::Development => "dev",
            Dataset::Generalization => "gen",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub train: InputFormat,
    pub dataset: Dataset,
    pub test: InputFormat,
}

impl CellKey {
    pub fn new(train: InputFormat, dataset: Dataset, test: InputFormat) -> Self {
        CellKey { train, dataset, test }
    }

    pub fn dev(train: InputFormat, test: InputFormat) -> Self {
        CellKey::new(train, Dataset::Development, test)
    }

    /// Same format for training and development testing.
    pub fn is_self_test(&self) -> bool {
        self.dataset == Dataset::Development && self.train == self.test
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}/{}", self.train, self.dataset.short(), self.test)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Every fold is held out once.
    #[default]
    CrossValidation,
    /// Fold 0 is the only held-out test set.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixConfig {
    pub k: usize,
    pub fold_seed: u64,
    pub split: SplitMode,
    pub alpha: f64,
    pub ci_method: CiMethod,
    /// Share of each class in a training split held back for tuning.
    pub tune_fraction: f64,
    pub significance: f64,
    /// Standardize each embedding dimension with statistics of the fitting
    /// slices before training.
    pub standardize_embeddings: bool,
    /// Defaults to every development format.
    pub train_formats: Option<Vec<InputFormat>>,
    /// Defaults to [`default_pairs`].
    pub pairs: Option<Vec<(CellKey, CellKey)>>,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig {
            k: 5,
            fold_seed: 0,
            split: SplitMode::CrossValidation,
            alpha: 0.05,
            ci_method: CiMethod::Influence,
            tune_fraction: 0.2,
            significance: 0.05,
            standardize_embeddings: true,
            train_formats: None,
            pairs: None,
        }
    }
}

impl MatrixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!("matrix: k must be at least 2, got {}", self.k)));
        }
        if !(self.tune_fraction > 0.0 && self.tune_fraction < 1.0) {
            return Err(Error::InvalidConfig("matrix: tune_fraction must lie in (0, 1)".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("significance", self.significance)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidConfig(format!("matrix: {name} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Where per-patient, per-format volumes come from.
pub trait VolumeSource: Sync {
    fn load(&self, patient_id: &str, format: InputFormat) -> Result<Volume>;

    /// Cheap existence check; defaults to a full load.
    fn check(&self, patient_id: &str, format: InputFormat) -> Result<()> {
        self.load(patient_id, format).map(|_| ())
    }
}

/// `<dir>/<patient_id>.<format>.vol` files.
#[derive(Debug, Clone)]
pub struct DirSource {
    pub dir: PathBuf,
}

impl DirSource {
    pub fn new(dir: impl AsRef<Path>) -> Self {
        DirSource { dir: dir.as_ref().to_path_buf() }
    }
}

impl VolumeSource for DirSource {
    fn load(&self, patient_id: &str, format: InputFormat) -> Result<Volume> {
        self.check(patient_id, format)?;
        read_volume(format_path(&self.dir, patient_id, format))
    }

    fn check(&self, patient_id: &str, format: InputFormat) -> Result<()> {
        if format_path(&self.dir, patient_id, format).is_file() {
            Ok(())
        } else {
            Err(Error::MissingFormat { patient: patient_id.into(), format: format.to_string() })
        }
    }
}

/// Volumes held in memory, keyed by (patient, format).
#[derive(Debug, Clone, Default)]
pub struct MemorySource(pub HashMap<(String, InputFormat), Volume>);

impl VolumeSource for MemorySource {
    fn load(&self, patient_id: &str, format: InputFormat) -> Result<Volume> {
        self.0
            .get(&(patient_id.to_string(), format))
            .cloned()
            .ok_or_else(|| Error::MissingFormat { patient: patient_id.into(), format: format.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patient {
    pub id: String,
    pub label: u8,
}

/// One dataset: its patients, the formats it provides, and their storage.
pub struct DatasetInput<'a> {
    pub patients: Vec<Patient>,
    pub formats: Vec<InputFormat>,
    pub source: &'a dyn VolumeSource,
}

impl DatasetInput<'_> {
    fn labels(&self) -> BTreeMap<&str, u8> {
        self.patients.iter().map(|p| (p.id.as_str(), p.label)).collect()
    }

    fn check_all(&self) -> Result<()> {
        for p in &self.patients {
            for &f in &self.formats {
                self.source.check(&p.id, f)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub key: CellKey,
    pub self_test: bool,
    pub mean_auc: f64,
    pub ci95: (f64, f64),
    pub se: f64,
    pub per_fold: Vec<RocResult>,
    /// One score per patient: out-of-fold scores on development data, the
    /// mean over fold models on generalization data.
    pub pooled: RocResult,
}

impl EvalCell {
    pub fn interval(&self) -> Interval {
        Interval { mean: self.mean_auc, lo: self.ci95.0, hi: self.ci95.1, se: self.se }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub a: CellKey,
    pub b: CellKey,
    /// Whether the two cells share patients (correlated test).
    pub paired: bool,
    pub result: DelongResult,
    pub significant: bool,
}

/// What one (fold, training format) run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSummary {
    pub fold: usize,
    pub train_format: InputFormat,
    pub norm: NormStats,
    pub n_fit: usize,
    pub n_tune: usize,
    pub history: TrainHistory,
    pub scaler: Option<FeatureScaler>,
    pub head: HeadParams,
}

impl SystemSummary {
    /// Probability of the positive class for one stored volume.
    pub fn score(
        &self,
        source: &dyn VolumeSource,
        patient: &Patient,
        format: InputFormat,
        pre: &PreprocessConfig,
        extractor: &Extractor,
    ) -> Result<f64> {
        let mut e = embed(source, patient, format, self.norm, pre, extractor)?;
        if let Some(s) = &self.scaler {
            s.apply(&mut e)?;
        }
        predict(&self.head, &e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub k: usize,
    pub split: SplitMode,
    pub fold_hash: String,
    pub alpha: f64,
    pub significance: f64,
    pub train_formats: Vec<InputFormat>,
    pub dev_formats: Vec<InputFormat>,
    pub gen_formats: Vec<InputFormat>,
    pub cells: Vec<EvalCell>,
    pub pairwise: Vec<PairwiseComparison>,
    pub systems: Vec<SystemSummary>,
}

impl EvalMatrix {
    pub fn cell(&self, key: CellKey) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.key == key)
    }
}

/// Each trained format's self-test against its other development cells,
/// and against the same format on generalization data.
pub fn default_pairs(train: &[InputFormat], dev: &[InputFormat], gen: &[InputFormat]) -> Vec<(CellKey, CellKey)> {
    let mut out = Vec::new();
    for &f in train {
        let own = CellKey::dev(f, f);
        for &g in dev.iter().filter(|&&g| g != f) {
            out.push((own, CellKey::dev(f, g)));
        }
        if gen.contains(&f) {
            out.push((own, CellKey::new(f, Dataset::Generalization, f)));
        }
    }
    out
}

/// Stratified, seeded split of a training fold into fitting and tuning
/// patients. Depends only on the ids and `seed`, never on the format.
pub fn split_tune(train: &[Patient], fraction: f64, seed: u64) -> Result<(Vec<Patient>, Vec<Patient>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fit, mut tune) = (Vec::new(), Vec::new());
    for class in [0u8, 1] {
        let mut members: Vec<&Patient> = train.iter().filter(|p| p.label == class).collect();
        if members.len() < 2 {
            return Err(Error::TooFewInClass { label: class, count: members.len(), k: 2 });
        }
        members.sort_by(|a, b| a.id.cmp(&b.id));
        members.shuffle(&mut rng);
        let n_tune = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        tune.extend(members[..n_tune].iter().map(|&p| p.clone()));
        fit.extend(members[n_tune..].iter().map(|&p| p.clone()));
    }
    fit.sort_by(|a, b| a.id.cmp(&b.id));
    tune.sort_by(|a, b| a.id.cmp(&b.id));
    Ok((fit, tune))
}

/// Normalizes one stored volume with a system's statistics and embeds it.
pub fn embed(
    source: &dyn VolumeSource,
    patient: &Patient,
    format: InputFormat,
    stats: NormStats,
    pre: &PreprocessConfig,
    extractor: &Extractor,
) -> Result<EmbeddingSequence> {
    let vol = source.load(&patient.id, format)?;
    let norm = clip_and_normalize(&vol, pre, stats)?;
    extractor.extract(&norm, &patient.id, patient.label, format)
}

fn embed_all(
    source: &dyn VolumeSource,
    patients: &[Patient],
    format: InputFormat,
    stats: NormStats,
    pre: &PreprocessConfig,
    extractor: &Extractor,
) -> Result<Vec<EmbeddingSequence>> {
    patients.par_iter().map(|p| embed(source, p, format, stats, pre, extractor)).collect()
}

/// Normalization statistics over the training patients in `format`.
pub fn fit_norm_stats(source: &dyn VolumeSource, patients: &[Patient], format: InputFormat, pre: &PreprocessConfig) -> Result<NormStats> {
    let mut acc = NormAccumulator::default();
    for p in patients {
        acc.add(&source.load(&p.id, format)?, pre);
    }
    acc.finish().map_err(|e| e.in_format(format))
}

/// Seed of the tuning split for one fold.
pub fn tune_seed(fold_seed: u64, fold: usize) -> u64 {
    fold_seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(fold as u64 + 1))
}

/// Fits one system on `train_p` in format `f`: normalization statistics
/// over all of `train_p`, then a head trained on its fitting part and
/// checkpointed on its tuning part. `fold` only seeds the tuning split.
#[allow(clippy::too_many_arguments)]
pub fn fit_system(
    source: &dyn VolumeSource,
    train_p: &[Patient],
    f: InputFormat,
    fold: usize,
    extractor: &Extractor,
    pre: &PreprocessConfig,
    train_cfg: &TrainConfig,
    mcfg: &MatrixConfig,
) -> Result<SystemSummary> {
    let (fit, tune) = split_tune(train_p, mcfg.tune_fraction, tune_seed(mcfg.fold_seed, fold))?;
    let norm = fit_norm_stats(source, train_p, f, pre)?;
    let mut fit_e = embed_all(source, &fit, f, norm, pre, extractor)?;
    let mut tune_e = embed_all(source, &tune, f, norm, pre, extractor)?;
    let scaler = if mcfg.standardize_embeddings {
        let s = FeatureScaler::fit(&fit_e)?;
        for e in fit_e.iter_mut().chain(tune_e.iter_mut()) {
            s.apply(e)?;
        }
        Some(s)
    } else {
        None
    };
    let (head, history) = train(&fit_e, &tune_e, train_cfg).map_err(|e| e.in_format(f))?;
    Ok(SystemSummary { fold, train_format: f, norm, n_fit: fit.len(), n_tune: tune.len(), history, scaler, head })
}

type Scores = Vec<(String, u8, f64)>;

struct UnitOutput {
    summary: SystemSummary,
    dev: BTreeMap<InputFormat, Scores>,
    gen: BTreeMap<InputFormat, Scores>,
}

fn score(
    source: &dyn VolumeSource,
    patients: &[Patient],
    format: InputFormat,
    system: &SystemSummary,
    pre: &PreprocessConfig,
    extractor: &Extractor,
) -> Result<Scores> {
    patients
        .par_iter()
        .map(|p| Ok((p.id.clone(), p.label, system.score(source, p, format, pre, extractor)?)))
        .collect()
}

fn roc_of(scores: &Scores) -> Result<RocResult> {
    let mut s = scores.clone();
    s.sort_by(|a, b| a.0.cmp(&b.0));
    RocResult::new(s.iter().map(|x| x.0.clone()).collect(), s.iter().map(|x| x.2).collect(), s.iter().map(|x| x.1).collect())
}

#[allow(clippy::too_many_arguments)]
fn run_unit(
    dev: &DatasetInput<'_>,
    gen: Option<&DatasetInput<'_>>,
    folds: &FoldAssignment,
    fold: usize,
    f: InputFormat,
    extractor: &Extractor,
    pre: &PreprocessConfig,
    train_cfg: &TrainConfig,
    mcfg: &MatrixConfig,
) -> Result<UnitOutput> {
    let labels = dev.labels();
    let patients = |ids: Vec<&str>| -> Vec<Patient> { ids.into_iter().map(|id| Patient { id: id.into(), label: labels[id] }).collect() };
    let train_p = patients(folds.train_ids(fold));
    let test_p = patients(folds.test_ids(fold));
    let summary = fit_system(dev.source, &train_p, f, fold, extractor, pre, train_cfg, mcfg)?;

    let mut dev_scores = BTreeMap::new();
    for &g in &dev.formats {
        dev_scores.insert(g, score(dev.source, &test_p, g, &summary, pre, extractor)?);
    }
    let mut gen_scores = BTreeMap::new();
    if let Some(gen) = gen {
        for &g in &gen.formats {
            gen_scores.insert(g, score(gen.source, &gen.patients, g, &summary, pre, extractor)?);
        }
    }
    Ok(UnitOutput { summary, dev: dev_scores, gen: gen_scores })
}

fn cell_interval(per_fold: &[RocResult], dataset: Dataset, mcfg: &MatrixConfig) -> Result<Interval> {
    if per_fold.len() == 1 {
        return auc_ci(&per_fold[0], mcfg.alpha);
    }
    match (mcfg.ci_method, dataset) {
        (CiMethod::FoldT, _) => fold_t_ci(per_fold, mcfg.alpha),
        (CiMethod::Influence, Dataset::Development) => cv_auc_ci(per_fold, mcfg.alpha),
        (CiMethod::Influence, Dataset::Generalization) => repeated_auc_ci(per_fold, mcfg.alpha),
    }
}

/// Mean score per patient over several models.
fn mean_scores(per_fold: &[&Scores]) -> Scores {
    let mut acc: BTreeMap<&str, (u8, f64)> = BTreeMap::new();
    for scores in per_fold {
        for (id, y, s) in scores.iter() {
            acc.entry(id.as_str()).or_insert((*y, 0.0)).1 += s;
        }
    }
    let k = per_fold.len() as f64;
    acc.into_iter().map(|(id, (y, s))| (id.to_string(), y, s / k)).collect()
}

/// Trains and evaluates every (fold, training format) system and
/// aggregates the results into cells with intervals and DeLong tests.
pub fn run_matrix(
    dev: &DatasetInput<'_>,
    gen: Option<&DatasetInput<'_>>,
    extractor: &Extractor,
    pre: &PreprocessConfig,
    train_cfg: &TrainConfig,
    mcfg: &MatrixConfig,
    folds: &FoldAssignment,
) -> Result<EvalMatrix> {
    mcfg.validate()?;
    train_cfg.validate()?;
    if folds.k != mcfg.k {
        return Err(Error::InvalidConfig(format!("fold assignment has k = {}, config asks for {}", folds.k, mcfg.k)));
    }
    let labels = dev.labels();
    if labels.len() != folds.fold_of.len() || labels.keys().any(|id| !folds.fold_of.contains_key(*id)) {
        return Err(Error::InvalidConfig("fold assignment does not cover the development patients".into()));
    }
    let train_formats = mcfg.train_formats.clone().unwrap_or_else(|| dev.formats.clone());
    if let Some(f) = train_formats.iter().find(|f| !dev.formats.contains(f)) {
        return Err(Error::InvalidConfig(format!("training format {f} is not available in the development data")));
    }
    dev.check_all()?;
    if let Some(gen) = gen {
        gen.check_all()?;
    }

    let eval_folds: Vec<usize> = match mcfg.split {
        SplitMode::CrossValidation => (0..folds.k).collect(),
        SplitMode::Fixed => vec![0],
    };
    let units: Vec<(usize, InputFormat)> =
        train_formats.iter().flat_map(|&f| eval_folds.iter().map(move |&fold| (fold, f))).collect();
    let outputs: Vec<UnitOutput> = units
        .par_iter()
        .map(|&(fold, f)| run_unit(dev, gen, folds, fold, f, extractor, pre, train_cfg, mcfg))
        .collect::<Result<_>>()?;

    let gen_formats = gen.map(|g| g.formats.clone()).unwrap_or_default();
    let mut cells = Vec::new();
    for &f in &train_formats {
        let mine: Vec<&UnitOutput> = outputs.iter().filter(|u| u.summary.train_format == f).collect();
        for (dataset, formats) in [(Dataset::Development, &dev.formats), (Dataset::Generalization, &gen_formats)] {
            for &g in formats {
                let key = CellKey::new(f, dataset, g);
                let fold_scores: Vec<&Scores> =
                    mine.iter().map(|u| if dataset == Dataset::Development { &u.dev[&g] } else { &u.gen[&g] }).collect();
                let per_fold = fold_scores.iter().map(|s| roc_of(s)).collect::<Result<Vec<_>>>()?;
                let ci = cell_interval(&per_fold, dataset, mcfg).map_err(|e| Error::Other(format!("cell {key}: {e}")))?;
                let pooled = match dataset {
                    Dataset::Development => roc_of(&fold_scores.iter().flat_map(|s| s.iter().cloned()).collect())?,
                    Dataset::Generalization => roc_of(&mean_scores(&fold_scores))?,
                };
                cells.push(EvalCell {
                    key,
                    self_test: key.is_self_test(),
                    mean_auc: ci.mean,
                    ci95: (ci.lo, ci.hi),
                    se: ci.se,
                    per_fold,
                    pooled,
                });
            }
        }
    }
    cells.sort_by_key(|c| c.key);

    let pairs = mcfg.pairs.clone().unwrap_or_else(|| default_pairs(&train_formats, &dev.formats, &gen_formats));
    let mut pairwise = Vec::new();
    for (a, b) in pairs {
        let find = |k: CellKey| cells.iter().find(|c| c.key == k).ok_or_else(|| Error::InvalidConfig(format!("no cell {k}")));
        let (ca, cb) = (find(a)?, find(b)?);
        let paired = a.dataset == b.dataset;
        let result = if paired { delong_test(&ca.pooled, &cb.pooled)? } else { delong_unpaired(&ca.pooled, &cb.pooled)? };
        pairwise.push(PairwiseComparison { a, b, paired, significant: result.significant(mcfg.significance), result });
    }

    let mut systems: Vec<SystemSummary> = outputs.into_iter().map(|u| u.summary).collect();
    systems.sort_by_key(|s| (s.train_format, s.fold));
    Ok(EvalMatrix {
        k: folds.k,
        split: mcfg.split,
        fold_hash: folds.hash(),
        alpha: mcfg.alpha,
        significance: mcfg.significance,
        train_formats,
        dev_formats: dev.formats.clone(),
        gen_formats,
        cells,
        pairwise,
        systems,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patients(n: usize) -> Vec<Patient> {
        (0..n).map(|i| Patient { id: format!("p{i:02}"), label: (i % 2) as u8 }).collect()
    }

    #[test]
    fn tune_split_is_stratified_and_format_free() {
        let train = patients(20);
        let (fit, tune) = split_tune(&train, 0.2, 5).unwrap();
        assert_eq!((fit.len(), tune.len()), (16, 4));
        assert_eq!(tune.iter().filter(|p| p.label == 1).count(), 2);
        let mut shuffled = train.clone();
        shuffled.reverse();
        assert_eq!(split_tune(&shuffled, 0.2, 5).unwrap(), (fit, tune));
    }

    #[test]
    fn tune_split_keeps_one_of_each() {
        let (fit, tune) = split_tune(&patients(4), 0.01, 0).unwrap();
        assert_eq!((fit.len(), tune.len()), (2, 2));
        assert!(split_tune(&patients(3), 0.2, 0).is_err());
    }

    #[test]
    fn default_pair_layout() {
        use InputFormat::*;
        let pairs = default_pairs(&[Original, Noise], &InputFormat::ALL, &[Original, Noise]);
        assert_eq!(pairs.len(), 2 * 3 + 2);
        assert!(pairs.iter().all(|(a, _)| a.is_self_test()));
        assert!(pairs.contains(&(CellKey::dev(Noise, Noise), CellKey::new(Noise, Dataset::Generalization, Noise))));
    }

    #[test]
    fn missing_format_names_patient() {
        let src = MemorySource::default();
        let err = src.load("p7", InputFormat::Noise).unwrap_err();
        assert_eq!(err.to_string(), "missing noise data for patient p7");
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(DirSource::new(dir.path()).check("p1", InputFormat::Original), Err(Error::MissingFormat { .. })));
    }

    #[test]
    fn generalization_scores_are_averaged() {
        let a: Scores = vec![("x".into(), 1, 0.2), ("y".into(), 0, 0.4)];
        let b: Scores = vec![("y".into(), 0, 0.0), ("x".into(), 1, 0.6)];
        assert_eq!(mean_scores(&[&a, &b]), vec![("x".to_string(), 1, 0.4), ("y".to_string(), 0, 0.2)]);
    }
}
