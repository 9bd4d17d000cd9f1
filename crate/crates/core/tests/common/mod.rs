//! Small configurations shared by the integration tests.
#![allow(dead_code)]

use larr::pipeline::{DataConfig, LmSection, RunConfig};
use larr::synthworld::WorldConfig;

/// A world and models small enough to run every stage in seconds.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        data: DataConfig {
            world: WorldConfig {
                n_pois: 24,
                n_users: 40,
                ..WorldConfig::default()
            },
            n_interactions: 1_500,
            test_fraction: 0.2,
            generic_lines: 60,
        },
        lm: LmSection {
            layers: 1,
            heads: 2,
            model_dim: 16,
            context_len: 256,
            ff_mult: 2,
            mix_ratio: 0.1,
        },
        ..RunConfig::default()
    };
    cfg.pretrain.batch_size = 8;
    cfg.finetune.steps = 2;
    cfg.finetune.batch_size = 4;
    cfg.fusion.epochs = 2;
    cfg.fusion.batch_size = 32;
    cfg.fusion.d_align = 16;
    cfg.fusion.user_dim = 8;
    cfg.fusion.poi_dim = 8;
    cfg.fusion.projection_hidden = 16;
    cfg.fusion.hidden = 16;
    cfg.seeded(seed)
}
