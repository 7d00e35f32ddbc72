//! Pipeline configuration file (TOML) and its defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use ttt_omics_core::training::StageConfig;
use ttt_omics_core::{ModelConfig, Stage};

use crate::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: PathBuf,
    /// When set, replaces every other seed in the file.
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            output_dir: PathBuf::from("ttt_omics_out"),
            seed: None,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Input locations. Unset matrix, label and ordering paths fall back to
/// the files `synth` writes under `<output_dir>/synth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub rna: Option<PathBuf>,
    pub adt: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub gene_order: Option<PathBuf>,
    pub protein_map: Option<PathBuf>,
    /// Enables RPKM; without it RNA is CPM-normalized.
    pub gene_lengths: Option<PathBuf>,
    /// RNA-only dataset for stage 3; defaults to the preprocessed RNA.
    pub transfer_rna: Option<PathBuf>,
    pub n_top_genes: usize,
    pub clr_pseudocount: f64,
    pub log1p: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            rna: None,
            adt: None,
            labels: None,
            gene_order: None,
            protein_map: None,
            gene_lengths: None,
            transfer_rna: None,
            n_top_genes: 4000,
            clr_pseudocount: 1.0,
            log1p: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_cells: usize,
    pub n_genes: usize,
    pub n_proteins: usize,
    pub n_classes: usize,
    pub separation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_cells: 300,
            n_genes: 50,
            n_proteins: 10,
            n_classes: 3,
            separation: 5.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl TrainConfig {
    pub fn stage(&self, s: Stage) -> &StageConfig {
        match s {
            Stage::Pretrain => &self.stage1,
            Stage::Finetune => &self.stage2,
            Stage::Transfer => &self.stage3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    pub resolution: f64,
    pub randomness: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k: 20,
            resolution: 1.0,
            randomness: 0.01,
            max_iterations: 50,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::MissingInput {
            what: "config file",
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Apply command-line overrides, which take precedence over the file.
    pub fn with_overrides(mut self, seed: Option<u64>, output_dir: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = Some(s);
        }
        if let Some(d) = output_dir {
            self.output_dir = d;
        }
        if let Some(s) = self.seed {
            self.synth.seed = s;
            self.model.seed = s;
            self.train.stage1.seed = s;
            self.train.stage2.seed = s;
            self.train.stage3.seed = s;
            self.eval.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for s in [Stage::Pretrain, Stage::Finetune, Stage::Transfer] {
            self.train.stage(s).validate(s)?;
        }
        if self.data.n_top_genes == 0 {
            return Err(CliError::Config("data.n_top_genes must be positive".into()));
        }
        if !(self.data.clr_pseudocount > 0.0) {
            return Err(CliError::Config("data.clr_pseudocount must be positive".into()));
        }
        if self.eval.k == 0 || !(self.eval.resolution > 0.0) {
            return Err(CliError::Config("eval.k and eval.resolution must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn layout(&self) -> Layout {
        Layout {
            root: self.output_dir.clone(),
        }
    }
}

/// File locations under the output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn synth_dir(&self) -> PathBuf {
        self.root.join("synth")
    }

    pub fn prep_dir(&self) -> PathBuf {
        self.root.join("preprocessed")
    }

    pub fn prep_rna(&self) -> PathBuf {
        self.prep_dir().join("rna.csv")
    }

    pub fn prep_adt(&self) -> PathBuf {
        self.prep_dir().join("adt.csv")
    }

    pub fn features(&self) -> PathBuf {
        self.prep_dir().join("features.json")
    }

    pub fn provenance(&self) -> PathBuf {
        self.prep_dir().join("provenance.json")
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("stage{stage}.ckpt"))
    }

    pub fn loss_trace(&self, stage: Stage) -> PathBuf {
        self.root.join(format!("loss_stage{stage}.csv"))
    }

    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.csv")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn clusters(&self) -> PathBuf {
        self.root.join("clusters.csv")
    }
}
