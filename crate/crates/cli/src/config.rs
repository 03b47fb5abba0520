//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use latentlab::graph::{node_set, LatentGraph, Mask};
use latentlab::ident::RegressorConfig;
use latentlab::mae::{MaskSampler, ModelConfig, TrainConfig};
use latentlab::scm::ScmConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Either an explicit list of masked observables or one draw of the sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum MaskSpec {
    Nodes(Vec<String>),
    Sampler { ratio: f64, patch: usize, seed: u64 },
}

impl MaskSpec {
    pub fn resolve(&self, g: &LatentGraph) -> Result<Mask> {
        match self {
            MaskSpec::Nodes(ids) => Ok(Mask::new(g, node_set(ids.iter().map(String::as_str)))?),
            MaskSpec::Sampler { seed, .. } => Ok(self.sampler(g)?.sample_mask(&mut ChaCha8Rng::seed_from_u64(*seed))),
        }
    }

    pub fn sampler(&self, g: &LatentGraph) -> Result<MaskSampler> {
        match self {
            MaskSpec::Sampler { ratio, patch, .. } => Ok(MaskSampler::for_graph(g, *ratio, *patch)?),
            MaskSpec::Nodes(_) => Err(CliError::Usage("resampled masks need a sampler mask spec".into())),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Train on the configured mask only.
    #[default]
    Fixed,
    /// Draw a fresh mask from the sampler for every minibatch.
    Resampled,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaeSettings {
    /// Defaults to the total dimension of the located `c`.
    pub d_c: Option<usize>,
    /// Defaults to the total dimension of the located `s_m`.
    pub d_sm: Option<usize>,
    pub mask_mode: MaskMode,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Relative paths are resolved against the config file's directory.
    pub graph: PathBuf,
    pub mask: MaskSpec,
    #[serde(default)]
    pub scm: ScmConfig,
    #[serde(default = "default_rows")]
    pub n: usize,
    /// Seed of the exogenous draws, separate from the mixing parameters.
    #[serde(default = "default_sample_seed")]
    pub sample_seed: u64,
    #[serde(default)]
    pub mae: MaeSettings,
    #[serde(default)]
    pub ident: RegressorConfig,
    pub out: PathBuf,
}

fn default_rows() -> usize {
    20_000
}

fn default_sample_seed() -> u64 {
    1
}

impl ExperimentConfig {
    pub fn new(graph: impl Into<PathBuf>, mask: MaskSpec, out: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            graph: graph.into(),
            mask,
            scm: ScmConfig::default(),
            n: default_rows(),
            sample_seed: default_sample_seed(),
            mae: MaeSettings::default(),
            ident: RegressorConfig::default(),
            out: out.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.graph = base.join(&cfg.graph);
        cfg.out = base.join(&cfg.out);
        Ok(cfg)
    }

    pub fn load_graph(&self) -> Result<LatentGraph> {
        if !self.graph.exists() {
            return Err(CliError::Data(format!("graph file {} not found", self.graph.display())));
        }
        let g = LatentGraph::load(&self.graph)?;
        g.ensure_valid()?;
        Ok(g)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.out.join("dataset.bin")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out.join("checkpoint")
    }

    pub fn losses_path(&self) -> PathBuf {
        self.out.join("losses.csv")
    }

    pub fn report_path(&self) -> PathBuf {
        self.out.join("ident.json")
    }

    pub fn summary_path(&self) -> PathBuf {
        self.out.join("summary.csv")
    }
}
