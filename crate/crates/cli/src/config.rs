//! Experiment configuration, read from a single TOML file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use eegvae_core::io::json_digest;
use eegvae_core::preprocess::{NormalizeMode, PreprocessConfig};
use eegvae_core::rng::derive_seed;
use eegvae_core::synth::SynthConfig;
use eegvae_nn::classifier::{Cnn1dConfig, EegNetConfig, MlpConfig};
use eegvae_nn::svm::SvmConfig;
use eegvae_nn::VaeConfig;
use eegvae_viz::TsneConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A feature extractor paired with a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pipeline {
    VaeCnn1d,
    VaeSvm,
    VaeMlp,
    RawEegnet,
}

impl Pipeline {
    pub const ALL: [Pipeline; 4] = [Pipeline::VaeCnn1d, Pipeline::VaeSvm, Pipeline::VaeMlp, Pipeline::RawEegnet];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::VaeCnn1d => "vae+cnn1d",
            Pipeline::VaeSvm => "vae+svm",
            Pipeline::VaeMlp => "vae+mlp",
            Pipeline::RawEegnet => "raw+eegnet",
        }
    }

    pub fn uses_vae(self) -> bool {
        self != Pipeline::RawEegnet
    }
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Pipeline> {
        Pipeline::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pipeline '{s}' (known: vae+cnn1d, vae+svm, vae+mlp, raw+eegnet)")))
    }
}

impl Serialize for Pipeline {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Pipeline {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Pipeline, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Where subject recordings come from. Exactly one of the two must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    /// Directory holding `manifest.json` and per-subject `.eeg` files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { synth: Some(SynthConfig::default()), path: None }
    }
}

/// Input scaling for the raw-epoch baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RawInput {
    /// Filtered epochs in microvolts, without per-subject standardization.
    #[default]
    Microvolts,
    /// The same per-subject standardized epochs the VAE sees.
    Normalized,
}

/// Which epochs enter the dichotomy impurity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DiScope {
    /// Held-out features of every fold stacked, so each subject appears once.
    #[default]
    Pooled,
    /// One report per fold on its held-out subjects; the mean is averaged.
    PerFold,
}

/// Rows shown in t-SNE projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionRows {
    /// Every subject, encoded by the first fold's model.
    #[default]
    All,
    /// Held-out subjects of every fold, each encoded by its own fold's model.
    TestFolds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualizeConfig {
    pub enabled: bool,
    pub tsne: TsneConfig,
    pub rows: ProjectionRows,
    pub subjects_per_class: usize,
}

impl Default for VisualizeConfig {
    fn default() -> Self {
        VisualizeConfig { enabled: true, tsne: TsneConfig::default(), rows: ProjectionRows::All, subjects_per_class: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every component seed is derived from it.
    pub seed: u64,
    pub pipelines: Vec<Pipeline>,
    /// Train one VAE on all subjects instead of one per fold.
    pub global_vae: bool,
    pub raw_input: RawInput,
    pub di_scope: DiScope,
    pub spatial_patterns: bool,
    pub jobs: usize,
    pub corpus: CorpusConfig,
    pub preprocess: PreprocessConfig,
    pub vae: VaeConfig,
    pub cnn1d: Cnn1dConfig,
    pub mlp: MlpConfig,
    pub svm: SvmConfig,
    pub eegnet: EegNetConfig,
    pub visualize: VisualizeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            pipelines: vec![Pipeline::VaeCnn1d, Pipeline::RawEegnet],
            global_vae: false,
            raw_input: RawInput::Microvolts,
            di_scope: DiScope::Pooled,
            spatial_patterns: true,
            jobs: 1,
            corpus: CorpusConfig::default(),
            preprocess: PreprocessConfig::default(),
            vae: VaeConfig::default(),
            cnn1d: Cnn1dConfig::default(),
            mlp: MlpConfig::default(),
            svm: SvmConfig::default(),
            eegnet: EegNetConfig::default(),
            visualize: VisualizeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::from_toml(&text)?;
        // Relative corpus paths are taken relative to the config file.
        if let (Some(p), Some(dir)) = (cfg.corpus.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.pipelines.is_empty() {
            return Err(Error::Config("at least one pipeline is required".into()));
        }
        let mut seen = self.pipelines.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.pipelines.len() {
            return Err(Error::Config("pipelines must not repeat".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        match (&self.corpus.synth, &self.corpus.path) {
            (Some(s), None) => s.validate()?,
            (None, Some(_)) => {}
            _ => return Err(Error::Config("corpus needs exactly one of `synth` or `path`".into())),
        }
        if self.preprocess.normalize == NormalizeMode::None {
            return Err(Error::Config("the VAE needs normalized epochs; use raw_input for the baseline instead".into()));
        }
        self.vae.validate()?;
        if self.visualize.subjects_per_class == 0 {
            return Err(Error::Config("visualize.subjects_per_class must be at least 1".into()));
        }
        Ok(())
    }

    /// Copy with every component seed derived from the master seed.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut c = self.clone();
        let s = self.seed;
        if let Some(synth) = c.corpus.synth.as_mut() {
            synth.seed = derive_seed(s, "synth");
        }
        c.vae.seed = derive_seed(s, "vae");
        c.cnn1d.train.seed = derive_seed(s, "cnn1d");
        c.mlp.train.seed = derive_seed(s, "mlp");
        c.eegnet.train.seed = derive_seed(s, "eegnet");
        c.visualize.tsne.seed = derive_seed(s, "tsne");
        c
    }

    pub fn fold_seed(&self) -> u64 {
        derive_seed(self.seed, "folds")
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn needs_vae(&self) -> bool {
        self.pipelines.iter().any(|p| p.uses_vae())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig { pipelines: Pipeline::ALL.to_vec(), seed: 9, ..Default::default() };
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_pipeline_and_fields_rejected() {
        let err = ExperimentConfig::from_toml("pipelines = [\"vae+knn\"]").unwrap_err();
        assert!(err.to_string().contains("vae+knn"), "{err}");
        assert!(ExperimentConfig::from_toml("[vae]\nlatent = 3").is_err());
        assert!(ExperimentConfig::from_toml("pipelines = []").is_err());
        assert!(ExperimentConfig::from_toml("[corpus]\npath = \"x\"\n[corpus.synth]\nseed = 1").is_err());
    }

    #[test]
    fn seeds_derive_from_master() {
        let a = ExperimentConfig { seed: 1, ..Default::default() }.resolved();
        let b = ExperimentConfig { seed: 2, ..Default::default() }.resolved();
        assert_ne!(a.vae.seed, b.vae.seed);
        assert_ne!(a.corpus.synth.as_ref().unwrap().seed, b.corpus.synth.as_ref().unwrap().seed);
        assert_eq!(a, ExperimentConfig { seed: 1, ..Default::default() }.resolved());
    }

    proptest::proptest! {
        #[test]
        fn any_pipeline_subset_round_trips(seed in 0u64..u64::MAX / 2, mask in 1u8..16, jobs in 1usize..8, global in proptest::bool::ANY) {
            let pipelines: Vec<Pipeline> = Pipeline::ALL.into_iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, p)| p).collect();
            let cfg = ExperimentConfig { seed, pipelines, jobs, global_vae: global, ..Default::default() };
            let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
            proptest::prop_assert_eq!(back.digest(), cfg.digest());
            proptest::prop_assert_eq!(back, cfg);
        }
    }
}
