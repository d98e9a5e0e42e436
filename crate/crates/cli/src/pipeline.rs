//! Resumable pipeline stages. Each stage records a hash of its inputs and
//! of the files it wrote in `pipeline.json`; a stage whose inputs and
//! files are unchanged is skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ctsanity::classifier::Extractor;
use ctsanity::formats::{format_path, make_target_only, make_target_removed, InputFormat};
use ctsanity::matrix::{fit_system, run_matrix, DatasetInput, DirSource, EvalMatrix, Patient, SystemSummary};
use ctsanity::noise::{extract_noise, NoiseDiagnostics};
use ctsanity::preprocess::preprocess_scan;
use ctsanity::report::{render_report, verdict_text, Report};
use ctsanity::stats::{stratified_kfold, FoldAssignment};
use ctsanity::synth::generate_dataset;
use ctsanity::volume::{read_manifest, read_mask, read_volume, write_manifest, write_mask, write_volume, ScanRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hash_json, DatasetConfig, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Ds {
    Dev,
    Gen,
}

impl fmt::Display for Ds {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ds::Dev => "dev",
            Ds::Gen => "gen",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Source(Ds),
    Preprocess(Ds),
    Formats(Ds),
    Noise(Ds),
    Train,
    Matrix,
    Report,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Source(d) => write!(f, "synth.{d}"),
            Stage::Preprocess(d) => write!(f, "preprocess.{d}"),
            Stage::Formats(d) => write!(f, "gen-formats.{d}"),
            Stage::Noise(d) => write!(f, "gen-noise.{d}"),
            Stage::Train => f.write_str("train"),
            Stage::Matrix => f.write_str("eval-matrix"),
            Stage::Report => f.write_str("report"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct StageRecord {
    input: String,
    output: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct PipelineState {
    config_hash: String,
    seeds: BTreeMap<String, u64>,
    stages: BTreeMap<String, StageRecord>,
}

/// Files a stage owns: everything in `dir` whose name passes `keep`.
struct Outputs {
    dir: PathBuf,
    keep: fn(&str) -> bool,
}

const MASK_FORMATS: [&str; 3] = [".original.vol", ".target_only.vol", ".target_removed.vol"];

fn hash_outputs(o: &Outputs) -> Result<String> {
    let mut names: Vec<String> = match fs::read_dir(&o.dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| (o.keep)(n))
            .collect(),
        Err(_) => return Ok(String::new()),
    };
    if names.is_empty() {
        return Ok(String::new());
    }
    names.sort();
    let mut h = Sha256::new();
    for n in &names {
        let path = o.dir.join(n);
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        h.update(format!("{n}\n{}\n", bytes.len()));
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub struct Pipeline {
    cfg: RunConfig,
    out: PathBuf,
    force: bool,
    state: PipelineState,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, out: PathBuf, force: bool) -> Result<Self> {
        fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
        let path = out.join("pipeline.json");
        let mut state: PipelineState = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            Err(_) => PipelineState::default(),
        };
        state.config_hash = cfg.hash();
        state.seeds = BTreeMap::from([
            ("fold".to_string(), cfg.matrix.fold_seed),
            ("train".to_string(), cfg.train.seed),
            ("extractor".to_string(), cfg.extractor.seed),
        ]);
        if let Some(p) = &cfg.dev.synth {
            state.seeds.insert("synth.dev".into(), p.seed);
        }
        if let Some(p) = cfg.gen.as_ref().and_then(|g| g.synth.as_ref()) {
            state.seeds.insert("synth.gen".into(), p.seed);
        }
        Ok(Pipeline { cfg, out, force, state })
    }

    pub fn datasets(&self) -> Vec<Ds> {
        let mut v = vec![Ds::Dev];
        if self.cfg.gen.is_some() {
            v.push(Ds::Gen);
        }
        v
    }

    fn dataset(&self, ds: Ds) -> Result<&DatasetConfig> {
        match ds {
            Ds::Dev => Ok(&self.cfg.dev),
            Ds::Gen => self.cfg.gen.as_ref().context("no generalization dataset configured"),
        }
    }

    fn dir(&self, ds: Ds, leaf: &str) -> PathBuf {
        self.out.join(ds.to_string()).join(leaf)
    }

    fn outputs(&self, stage: Stage) -> Outputs {
        match stage {
            Stage::Source(d) => Outputs { dir: self.dir(d, "raw"), keep: |_| true },
            Stage::Preprocess(d) => Outputs { dir: self.dir(d, "pre"), keep: |_| true },
            Stage::Formats(d) => {
                Outputs { dir: self.dir(d, "formats"), keep: |n| MASK_FORMATS.iter().any(|s| n.ends_with(s)) }
            }
            Stage::Noise(d) => Outputs {
                dir: self.dir(d, "formats"),
                keep: |n| n.ends_with(".noise.vol") || n == "noise_diagnostics.json",
            },
            Stage::Train => Outputs { dir: self.out.join("systems"), keep: |_| true },
            Stage::Matrix => Outputs { dir: self.out.join("matrix"), keep: |_| true },
            Stage::Report => Outputs { dir: self.out.join("report"), keep: |_| true },
        }
    }

    fn save(&self) -> Result<()> {
        let path = self.out.join("pipeline.json");
        let text = serde_json::to_string_pretty(&self.state)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    /// Output hash of a finished upstream stage, checked against the files
    /// on disk.
    fn upstream(&self, stage: Stage) -> Result<String> {
        if let Stage::Source(d) = stage {
            if let Some(m) = &self.dataset(d)?.manifest {
                return manifest_hash(m);
            }
        }
        let Some(rec) = self.state.stages.get(&stage.to_string()) else {
            bail!("stage {stage} has not run yet; run it first");
        };
        if hash_outputs(&self.outputs(stage))? != rec.output {
            bail!("outputs of stage {stage} changed on disk; rerun it");
        }
        Ok(rec.output.clone())
    }

    /// Runs `body` unless the stage is up to date; returns its output hash.
    fn stage(&mut self, stage: Stage, input: String, body: impl FnOnce(&Self) -> Result<()>) -> Result<String> {
        let name = stage.to_string();
        let outputs = self.outputs(stage);
        if !self.force {
            if let Some(rec) = self.state.stages.get(&name) {
                if rec.input == input && !rec.output.is_empty() && hash_outputs(&outputs)? == rec.output {
                    println!("{name}: skipped (up to date)");
                    return Ok(rec.output.clone());
                }
            }
        }
        // a stage that owns its whole directory starts from a clean slate
        if matches!(stage, Stage::Source(_) | Stage::Preprocess(_) | Stage::Train | Stage::Matrix | Stage::Report)
            && outputs.dir.exists()
        {
            fs::remove_dir_all(&outputs.dir).with_context(|| format!("clearing {}", outputs.dir.display()))?;
        }
        fs::create_dir_all(&outputs.dir).with_context(|| format!("creating {}", outputs.dir.display()))?;
        self.state.stages.remove(&name);
        self.save()?;
        body(self).with_context(|| format!("stage {name}"))?;
        let output = hash_outputs(&outputs)?;
        self.state.stages.insert(name.clone(), StageRecord { input, output: output.clone() });
        self.save()?;
        println!("{name}: done");
        Ok(output)
    }

    fn raw_manifest(&self, ds: Ds) -> Result<PathBuf> {
        Ok(match &self.dataset(ds)?.manifest {
            Some(m) => m.clone(),
            None => self.dir(ds, "raw").join("manifest.json"),
        })
    }

    pub fn synth(&mut self, ds: Ds) -> Result<()> {
        let Some(phantom) = self.dataset(ds)?.synth.clone() else {
            println!("synth.{ds}: skipped (dataset comes from a manifest)");
            return Ok(());
        };
        let dir = self.dir(ds, "raw");
        self.stage(Stage::Source(ds), hash_json(&phantom), |_| {
            generate_dataset(&phantom, &dir)?;
            Ok(())
        })?;
        Ok(())
    }

    pub fn preprocess(&mut self, ds: Ds) -> Result<()> {
        let upstream = self.upstream(Stage::Source(ds))?;
        let input = hash_json(&(&self.cfg.preprocess, upstream));
        let manifest = self.raw_manifest(ds)?;
        let dir = self.dir(ds, "pre");
        let cfg = self.cfg.preprocess.clone();
        self.stage(Stage::Preprocess(ds), input, |_| {
            let records = read_manifest(&manifest)?;
            let out: Vec<ScanRecord> = records
                .par_iter()
                .map(|r| -> Result<ScanRecord> {
                    let vol = read_volume(&r.volume_path)?;
                    let mask = r.mask_path.as_ref().map(read_mask).transpose()?;
                    let (vol, mask) =
                        preprocess_scan(&vol, mask.as_ref(), &cfg).with_context(|| format!("patient {}", r.patient_id))?;
                    let volume_path = PathBuf::from(format!("{}.vol", r.patient_id));
                    write_volume(&vol, dir.join(&volume_path))?;
                    let mask_path = match mask {
                        Some(m) => {
                            let p = PathBuf::from(format!("{}.mask.vol", r.patient_id));
                            write_mask(&m, dir.join(&p))?;
                            Some(p)
                        }
                        None => None,
                    };
                    Ok(ScanRecord { patient_id: r.patient_id.clone(), label: r.label, volume_path, mask_path })
                })
                .collect::<Result<_>>()?;
            write_manifest(&out, dir.join("manifest.json"))?;
            Ok(())
        })?;
        Ok(())
    }

    fn pre_records(&self, ds: Ds) -> Result<Vec<ScanRecord>> {
        Ok(read_manifest(self.dir(ds, "pre").join("manifest.json"))?)
    }

    pub fn gen_formats(&mut self, ds: Ds) -> Result<()> {
        let upstream = self.upstream(Stage::Preprocess(ds))?;
        let fill = self.cfg.preprocess.hu_clip.0 as f32;
        let input = hash_json(&(fill, upstream));
        let records = self.pre_records(ds)?;
        let dir = self.dir(ds, "formats");
        self.stage(Stage::Formats(ds), input, |_| {
            records.par_iter().try_for_each(|r| -> Result<()> {
                let vol = read_volume(&r.volume_path)?;
                write_volume(&vol, format_path(&dir, &r.patient_id, InputFormat::Original))?;
                if let Some(m) = &r.mask_path {
                    let mask = read_mask(m)?;
                    let ctx = || format!("patient {}", r.patient_id);
                    let only = make_target_only(&vol, &mask, fill)
                        .map_err(|e| e.in_format(InputFormat::TargetOnly))
                        .with_context(ctx)?;
                    let removed = make_target_removed(&vol, &mask, fill)
                        .map_err(|e| e.in_format(InputFormat::TargetRemoved))
                        .with_context(ctx)?;
                    write_volume(&only, format_path(&dir, &r.patient_id, InputFormat::TargetOnly))?;
                    write_volume(&removed, format_path(&dir, &r.patient_id, InputFormat::TargetRemoved))?;
                }
                Ok(())
            })
        })?;
        Ok(())
    }

    pub fn gen_noise(&mut self, ds: Ds) -> Result<()> {
        let upstream = self.upstream(Stage::Preprocess(ds))?;
        let input = hash_json(&(&self.cfg.noise, upstream));
        let records = self.pre_records(ds)?;
        let dir = self.dir(ds, "formats");
        let cfg = self.cfg.noise.clone();
        self.stage(Stage::Noise(ds), input, |_| {
            let diags: Vec<(String, NoiseDiagnostics)> = records
                .par_iter()
                .map(|r| -> Result<_> {
                    let vol = read_volume(&r.volume_path)?;
                    let (noise, diag) = extract_noise(&vol, &cfg, vol.hw())
                        .map_err(|e| e.in_format(InputFormat::Noise))
                        .with_context(|| format!("patient {}", r.patient_id))?;
                    write_volume(&noise, format_path(&dir, &r.patient_id, InputFormat::Noise))?;
                    Ok((r.patient_id.clone(), diag))
                })
                .collect::<Result<_>>()?;
            let diags: BTreeMap<String, NoiseDiagnostics> = diags.into_iter().collect();
            fs::write(dir.join("noise_diagnostics.json"), serde_json::to_string_pretty(&diags)? + "\n")?;
            Ok(())
        })?;
        Ok(())
    }

    /// Patients and the formats every one of them provides.
    fn dataset_input(&self, ds: Ds) -> Result<(Vec<Patient>, Vec<InputFormat>, String)> {
        let records = self.pre_records(ds)?;
        let with_masks = records.iter().all(|r| r.mask_path.is_some());
        let mut hashes = vec![self.upstream(Stage::Formats(ds))?, self.upstream(Stage::Noise(ds))?];
        hashes.push(self.upstream(Stage::Preprocess(ds))?);
        let formats = InputFormat::ALL.into_iter().filter(|f| with_masks || !f.needs_mask()).collect();
        let patients = records.into_iter().map(|r| Patient { id: r.patient_id, label: r.label }).collect();
        Ok((patients, formats, hash_json(&hashes)))
    }

    fn folds(&self, patients: &[Patient]) -> Result<FoldAssignment> {
        let labels = patients.iter().map(|p| (p.id.clone(), p.label)).collect();
        Ok(stratified_kfold(&labels, self.cfg.matrix.k, self.cfg.matrix.fold_seed)?)
    }

    /// One system per training format, fitted on the whole development set.
    pub fn train(&mut self) -> Result<()> {
        let (patients, formats, data_hash) = self.dataset_input(Ds::Dev)?;
        let c = &self.cfg;
        let input = hash_json(&(&c.preprocess, &c.extractor, &c.train, &c.matrix, data_hash));
        let train_formats = c.matrix.train_formats.clone().unwrap_or(formats);
        let source = DirSource::new(self.dir(Ds::Dev, "formats"));
        let dir = self.out.join("systems");
        self.stage(Stage::Train, input, |p| {
            let extractor = Extractor::from_spec(&p.cfg.extractor)?;
            // the fold index k is past every validation fold
            let systems: Vec<SystemSummary> = train_formats
                .par_iter()
                .map(|&f| {
                    fit_system(&source, &patients, f, p.cfg.matrix.k, &extractor, &p.cfg.preprocess, &p.cfg.train, &p.cfg.matrix)
                })
                .collect::<Result<_, _>>()?;
            for s in systems {
                let path = dir.join(format!("{}.json", s.train_format));
                fs::write(&path, serde_json::to_string_pretty(&s)? + "\n")?;
            }
            Ok(())
        })?;
        Ok(())
    }

    pub fn eval_matrix(&mut self) -> Result<()> {
        let (dev_p, dev_f, dev_hash) = self.dataset_input(Ds::Dev)?;
        let gen = match self.cfg.gen {
            Some(_) => Some(self.dataset_input(Ds::Gen)?),
            None => None,
        };
        let c = &self.cfg;
        let input =
            hash_json(&(&c.preprocess, &c.extractor, &c.train, &c.matrix, dev_hash, gen.as_ref().map(|g| &g.2)));
        let folds = self.folds(&dev_p)?;
        let dir = self.out.join("matrix");
        let dev_src = DirSource::new(self.dir(Ds::Dev, "formats"));
        let gen_src = DirSource::new(self.dir(Ds::Gen, "formats"));
        self.stage(Stage::Matrix, input, |p| {
            let extractor = Extractor::from_spec(&p.cfg.extractor)?;
            let dev = DatasetInput { patients: dev_p, formats: dev_f, source: &dev_src };
            let gen = gen.map(|(patients, formats, _)| DatasetInput { patients, formats, source: &gen_src });
            let m =
                run_matrix(&dev, gen.as_ref(), &extractor, &p.cfg.preprocess, &p.cfg.train, &p.cfg.matrix, &folds)?;
            fs::write(dir.join("folds.json"), serde_json::to_string_pretty(&folds)? + "\n")?;
            fs::write(dir.join("matrix.json"), serde_json::to_string_pretty(&m)? + "\n")?;
            Ok(())
        })?;
        Ok(())
    }

    /// Renders the report and returns it.
    pub fn report(&mut self) -> Result<Report> {
        let upstream = self.upstream(Stage::Matrix)?;
        let input = hash_json(&(&self.cfg.verdict, upstream));
        let matrix_path = self.out.join("matrix").join("matrix.json");
        let dir = self.out.join("report");
        self.stage(Stage::Report, input, |p| {
            let text = fs::read_to_string(&matrix_path)?;
            let m: EvalMatrix = serde_json::from_str(&text).with_context(|| format!("parsing {}", matrix_path.display()))?;
            render_report(&Report::new(m, &p.cfg.verdict)?, &dir)?;
            Ok(())
        })?;
        let report = Report::read(dir.join("report.json"))?;
        print!("{}", verdict_text(&report));
        Ok(report)
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }
}

/// Hash of an external manifest and every file it names.
fn manifest_hash(path: &Path) -> Result<String> {
    let records = read_manifest(path)?;
    let mut h = Sha256::new();
    h.update(fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    for r in &records {
        for p in std::iter::once(&r.volume_path).chain(r.mask_path.as_ref()) {
            h.update(fs::read(p).with_context(|| format!("reading {}", p.display()))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}
