use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ctsanity::classifier::{ExtractorSpec, TrainConfig};
use ctsanity::matrix::MatrixConfig;
use ctsanity::noise::NoiseConfig;
use ctsanity::preprocess::PreprocessConfig;
use ctsanity::report::VerdictConfig;
use ctsanity::synth::PhantomConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where one dataset comes from: generated phantoms or an existing manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<PhantomConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl DatasetConfig {
    fn validate(&self, name: &str) -> Result<()> {
        match (&self.synth, &self.manifest) {
            (Some(p), None) => p.validate().with_context(|| format!("{name}.synth")),
            (None, Some(_)) => Ok(()),
            _ => bail!("{name}: give exactly one of `synth` or `manifest`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// When set, every component seed is derived from it.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub dev: DatasetConfig,
    #[serde(default)]
    pub gen: Option<DatasetConfig>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub extractor: ExtractorSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub matrix: MatrixConfig,
    #[serde(default)]
    pub verdict: VerdictConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // manifests named in the config are relative to the config file
        let base = path.parent().unwrap_or(Path::new(""));
        for ds in std::iter::once(&mut cfg.dev).chain(cfg.gen.as_mut()) {
            if let Some(m) = ds.manifest.as_mut() {
                if m.is_relative() {
                    *m = base.join(&*m);
                }
            }
        }
        Ok(cfg)
    }

    /// Spreads the master seed over the component seeds.
    pub fn resolve_seeds(&mut self) {
        let Some(seed) = self.seed else { return };
        if let Some(p) = self.dev.synth.as_mut() {
            p.seed = seed;
        }
        if let Some(p) = self.gen.as_mut().and_then(|g| g.synth.as_mut()) {
            p.seed = seed.wrapping_add(0x6765_6e00);
        }
        self.train.seed = seed;
        self.extractor.seed = seed;
        self.matrix.fold_seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.dev.validate("dev")?;
        if let Some(g) = &self.gen {
            g.validate("gen")?;
        }
        self.preprocess.validate().context("preprocess")?;
        self.noise.validate().context("noise")?;
        self.extractor.validate().context("extractor")?;
        self.train.validate().context("train")?;
        self.matrix.validate().context("matrix")?;
        self.verdict.validate().context("verdict")?;
        if let (Some(d), Some(g)) = (&self.dev.synth, self.gen.as_ref().and_then(|g| g.synth.as_ref())) {
            if d.id_prefix == g.id_prefix {
                bail!("dev and gen phantoms share id_prefix {:?}", d.id_prefix);
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        r#"{"dev": {"synth": {"n_per_class": 6}}, "seed": 9}"#
    }

    #[test]
    fn defaults_fill_in() {
        let mut cfg: RunConfig = serde_json::from_str(minimal()).unwrap();
        cfg.resolve_seeds();
        cfg.validate().unwrap();
        assert_eq!(cfg.dev.synth.as_ref().unwrap().seed, 9);
        assert_eq!(cfg.matrix.fold_seed, 9);
        assert_eq!(cfg.matrix.k, 5);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"dev": {"synth": {}}, "trian": {}}"#).unwrap_err();
        assert!(err.to_string().contains("trian"), "{err}");
        let err = serde_json::from_str::<RunConfig>(r#"{"dev": {"synth": {"slicez": 3}}}"#).unwrap_err();
        assert!(err.to_string().contains("slicez"), "{err}");
    }

    #[test]
    fn dataset_needs_one_source() {
        let cfg: RunConfig = serde_json::from_str(r#"{"dev": {}}"#).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a: RunConfig = serde_json::from_str(minimal()).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.epochs += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
