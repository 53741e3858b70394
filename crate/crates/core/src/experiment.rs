//! End-to-end protocol: pretrain a backbone on a yes-biased corpus, freeze it,
//! fine-tune each cell variant on clean data, and score everything on a
//! held-out set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneConfig, BackboneError, BackboneWeights};
use crate::eval::{self, BiasSpec, DataError, Dataset, EvalError, EvalOutcome, Split, SplitMix, WorldSpec};
use crate::recurrence::{CellInit, CellMode, CellVariant};
use crate::rng;
use crate::training::{self, StepRecord, TrainConfig, TrainError, TrainRecord};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("backbone vocabulary {backbone} does not match data vocabulary {data}")]
    Vocabulary { backbone: usize, data: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub world: WorldSpec,
    pub pretrain_examples: usize,
    pub pretrain_mix: SplitMix,
    pub bias: BiasSpec,
    pub finetune_examples: usize,
    pub finetune_mix: SplitMix,
    pub eval_examples: usize,
    pub eval_mix: SplitMix,
}

/// Missing fields fall back to [`ExperimentConfig::desk_scale`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub data: DataSpec,
    /// epochs on the pretraining scenes with true labels before the biased pass
    pub clean_pretrain_epochs: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub cell_init: CellInit,
    pub variants: Vec<CellVariant>,
}

impl Default for DataSpec {
    fn default() -> Self {
        ExperimentConfig::desk_scale().data
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl ExperimentConfig {
    /// Four-layer, width-32 setup sized to run on one CPU core in minutes.
    pub fn desk_scale() -> Self {
        let world = WorldSpec {
            zipf_exponent: 0.6,
            ..WorldSpec::default()
        };
        Self {
            backbone: BackboneConfig {
                n_layers: 4,
                d_model: 32,
                n_heads: 4,
                vocab: world.vocabulary().size,
                max_seq: world.scene_len + 5,
                ff_mult: 4,
            },
            data: DataSpec {
                world,
                pretrain_examples: 10_000,
                pretrain_mix: SplitMix::even(),
                bias: BiasSpec {
                    popular_flip: 0.75,
                    adversarial_flip: 0.75,
                },
                finetune_examples: 2_000,
                finetune_mix: SplitMix::even(),
                eval_examples: 1_500,
                eval_mix: SplitMix::even(),
            },
            clean_pretrain_epochs: 5,
            pretrain: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 32,
                epochs: 3,
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 10,
                epochs: 5,
                ..TrainConfig::default()
            },
            cell_init: CellInit::Xavier,
            variants: CellVariant::TRAINABLE.to_vec(),
        }
    }
}

/// The three datasets of one run. Each uses its own seed stream.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub pretrain: Dataset,
    pub finetune: Dataset,
    pub eval: Dataset,
}

pub fn build_datasets(spec: &DataSpec, seed: u64) -> Result<Datasets, DataError> {
    let gen = |n, mix, bias, stream| eval::generate_dataset(&spec.world, n, mix, bias, seed.wrapping_mul(1000).wrapping_add(stream));
    Ok(Datasets {
        pretrain: gen(spec.pretrain_examples, spec.pretrain_mix, spec.bias, 1)?,
        finetune: gen(spec.finetune_examples, spec.finetune_mix, BiasSpec::none(), 2)?,
        eval: gen(spec.eval_examples, spec.eval_mix, BiasSpec::none(), 3)?,
    })
}

/// Pretrains a backbone from `seed` and freezes it: first
/// `clean_pretrain_epochs` on the corpus with true labels, then the configured
/// epochs on the corpus as written, bias flips included.
pub fn pretrain(
    cfg: &ExperimentConfig,
    data: &Dataset,
    seed: u64,
) -> Result<(BackboneWeights, Vec<StepRecord>), ExperimentError> {
    if cfg.backbone.vocab != data.vocab.size {
        return Err(ExperimentError::Vocabulary {
            backbone: cfg.backbone.vocab,
            data: data.vocab.size,
        });
    }
    let init = BackboneWeights::init(cfg.backbone, &mut rng::derive(seed, 0xBB))?;
    let tc = TrainConfig { seed, ..cfg.pretrain };
    let (init, mut steps) = if cfg.clean_pretrain_epochs > 0 {
        let clean = TrainConfig {
            epochs: cfg.clean_pretrain_epochs,
            ..tc
        };
        training::pretrain_backbone(init, &training::sequences(&data.with_true_targets()), &clean)?
    } else {
        (init, Vec::new())
    };
    let (w, biased) = training::pretrain_backbone(init, &training::sequences(data), &tc)?;
    steps.extend(biased);
    Ok((w, steps))
}

/// Fine-tunes one fresh cell of `variant` on the frozen backbone.
pub fn finetune_variant(
    cfg: &ExperimentConfig,
    backbone: &BackboneWeights,
    data: &Dataset,
    variant: CellVariant,
    seed: u64,
) -> Result<(CellMode, TrainRecord), ExperimentError> {
    let mode = CellMode::init(variant, cfg.backbone.d_model, cfg.cell_init, &mut rng::derive(seed, 0xCE11));
    let tc = TrainConfig { seed, ..cfg.finetune };
    Ok(training::finetune_cell(backbone, mode, &training::sequences(data), &tc)?)
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: CellVariant,
    pub mode: CellMode,
    pub record: TrainRecord,
    pub outcome: EvalOutcome,
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub backbone: BackboneWeights,
    pub vanilla: EvalOutcome,
    pub variants: Vec<VariantResult>,
}

impl SeedResult {
    pub fn variant(&self, v: CellVariant) -> Option<&VariantResult> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

/// Full protocol for one seed. Every variant starts from the same frozen
/// backbone, fine-tuning data and training seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedResult, ExperimentError> {
    let data = build_datasets(&cfg.data, seed)?;
    let (backbone, _) = pretrain(cfg, &data.pretrain, seed)?;
    let vanilla = eval::run_eval(&eval::VanillaModel { backbone: &backbone }, &data.eval)?;
    let mut variants = Vec::with_capacity(cfg.variants.len());
    for &variant in &cfg.variants {
        let (mode, record) = finetune_variant(cfg, &backbone, &data.finetune, variant, seed)?;
        let outcome = eval::run_eval(
            &eval::RecurrentModel {
                backbone: &backbone,
                mode: &mode,
            },
            &data.eval,
        )?;
        variants.push(VariantResult {
            variant,
            mode,
            record,
            outcome,
        });
    }
    Ok(SeedResult {
        seed,
        backbone,
        vanilla,
        variants,
    })
}

/// Mean accuracy over seeds on one split; `None` if any seed lacks the split.
pub fn mean_accuracy<'a>(outcomes: impl IntoIterator<Item = &'a EvalOutcome>, split: Split) -> Option<f64> {
    let accs: Option<Vec<f64>> = outcomes.into_iter().map(|o| o.accuracy(split)).collect();
    let accs = accs?;
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}
