#![allow(dead_code)]

use std::sync::OnceLock;

use depthrnn_core::backbone::{BackboneConfig, BackboneWeights};
use depthrnn_core::eval::WorldSpec;
use depthrnn_core::experiment::{self, Datasets, ExperimentConfig};

/// Two layers at width 16 over a 16-object world: a few seconds to pretrain.
pub fn tiny() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk_scale();
    c.data.world = WorldSpec {
        n_objects: 16,
        scene_len: 3,
        n_topics: 4,
        topic_boost: 4.0,
        zipf_exponent: 0.6,
        popular_k: 4,
        adversarial_k: 2,
    };
    c.backbone = BackboneConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        vocab: c.data.world.vocabulary().size,
        max_seq: 8,
        ff_mult: 2,
    };
    c.data.pretrain_examples = 2000;
    c.data.finetune_examples = 400;
    c.data.eval_examples = 600;
    c.clean_pretrain_epochs = 6;
    c.pretrain.learning_rate = 5e-3;
    c.pretrain.batch_size = 16;
    c.pretrain.epochs = 2;
    c.finetune.learning_rate = 5e-3;
    c.finetune.epochs = 3;
    c
}

pub struct Biased {
    pub config: ExperimentConfig,
    pub data: Datasets,
    pub backbone: BackboneWeights,
}

/// The tiny setup pretrained once per test binary on its biased corpus.
pub fn biased() -> &'static Biased {
    static CELL: OnceLock<Biased> = OnceLock::new();
    CELL.get_or_init(|| {
        let config = tiny();
        let data = experiment::build_datasets(&config.data, 3).unwrap();
        let (backbone, _) = experiment::pretrain(&config, &data.pretrain, 3).unwrap();
        Biased {
            config,
            data,
            backbone,
        }
    })
}
