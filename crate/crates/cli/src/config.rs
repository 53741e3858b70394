use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use depthrnn_core::experiment::ExperimentConfig;
use depthrnn_core::reference::REFERENCE_STEP;
use serde::{Deserialize, Serialize};

/// Model selector for eval/finetune/trace: `vanilla` is the plain backbone,
/// everything else is a depth-recurrent cell variant.
pub const MODE_NAMES: [&str; 6] = [
    "vanilla",
    "forced_vanilla",
    "dgdpu",
    "gru",
    "constraint_only",
    "correction_only",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// backbone checkpoint; relative paths resolve against the output directory
    pub backbone: PathBuf,
    /// cell checkpoint; defaults to `cell_<mode>.bin` in the output directory
    pub cell: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            backbone: "backbone.bin".into(),
            cell: None,
            out: "runs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSection {
    /// example ids to trace; empty means search the eval set for disagreements
    pub prompts: Vec<usize>,
    pub max_prompts: usize,
}

impl Default for TraceSection {
    fn default() -> Self {
        Self {
            prompts: Vec::new(),
            max_prompts: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSection {
    pub instances: usize,
    pub dims: Vec<usize>,
    pub layers: usize,
    pub seq: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            instances: 20,
            dims: vec![2, 4, 8],
            layers: 3,
            seq: 6,
            step: REFERENCE_STEP,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: String,
    pub experiment: ExperimentConfig,
    pub paths: Paths,
    pub trace: TraceSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: "dgdpu".into(),
            experiment: ExperimentConfig::desk_scale(),
            paths: Paths::default(),
            trace: TraceSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

impl RunConfig {
    /// Parses JSON; schema errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            anyhow::anyhow!("config field `{path}`: {}", e.into_inner())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if !MODE_NAMES.contains(&self.mode.as_str()) {
            anyhow::bail!(
                "config field `mode`: unknown mode `{}`, expected one of {}",
                self.mode,
                MODE_NAMES.join(", ")
            );
        }
        self.experiment
            .backbone
            .validate()
            .context("config field `experiment.backbone`")?;
        self.experiment.pretrain.validate().context("config field `experiment.pretrain`")?;
        self.experiment.finetune.validate().context("config field `experiment.finetune`")?;
        let world = &self.experiment.data.world;
        world.validate().context("config field `experiment.data.world`")?;
        let vocab = world.vocabulary().size;
        if self.experiment.backbone.vocab != vocab {
            anyhow::bail!(
                "config field `experiment.backbone.vocab`: {} does not match the {vocab} tokens the world needs",
                self.experiment.backbone.vocab
            );
        }
        let needed = world.scene_len + 5;
        if self.experiment.backbone.max_seq < needed {
            anyhow::bail!(
                "config field `experiment.backbone.max_seq`: {} is shorter than the {needed}-token examples",
                self.experiment.backbone.max_seq
            );
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.paths.out.join(p)
        }
    }

    pub fn backbone_path(&self) -> PathBuf {
        self.resolve(&self.paths.backbone)
    }

    pub fn cell_path(&self, mode: &str) -> PathBuf {
        match &self.paths.cell {
            Some(p) => self.resolve(p),
            None => self.paths.out.join(format!("cell_{mode}.bin")),
        }
    }
}
