#![allow(dead_code)]

use std::path::{Path, PathBuf};

use genplanner::artifacts::{plan_shape, save_json, train_encoder, train_generator, train_reward, Recipe};
use genplanner::config::ServiceConfig;
use genplanner::Planner;
use genplanner_core::cvae::CluvaeHyper;
use genplanner_core::dataset::{generate_dataset, DatasetSpec};
use genplanner_core::hier::IhplannerHyper;
use genplanner_core::hitl::RewardHyper;
use genplanner_core::GeneratorKind;
use tempfile::TempDir;

pub fn small_spec() -> DatasetSpec {
    DatasetSpec { n: 6, zones: 3, categories: 6, features: 4, cities: 40, ..DatasetSpec::default() }
}

pub fn small_recipe() -> Recipe {
    Recipe {
        encoder_epochs: 30,
        embedding: 4,
        encoder_hidden: 8,
        hier: IhplannerHyper { hidden: 16, d_f: 8, heads: 2, d_k: 4, epochs: 5, batch_size: 16, ..IhplannerHyper::default() },
        cvae: CluvaeHyper { latent: 4, hidden: 16, epochs: 5, batch_size: 16, ..CluvaeHyper::default() },
        reward: RewardHyper { epochs: 30, ..RewardHyper::default() },
        candidate_sets: 50,
        preference_pairs: 100,
        ..Recipe::default()
    }
}

pub struct World {
    pub dir: TempDir,
    pub config_path: PathBuf,
}

impl World {
    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn config(&self) -> ServiceConfig {
        let text = std::fs::read_to_string(&self.config_path).unwrap();
        let config = ServiceConfig::from_toml(&text).unwrap();
        config.validate().unwrap();
        config
    }

    pub fn planner(&self) -> Planner {
        Planner::load(self.config()).unwrap()
    }
}

/// Dataset, checkpoints and a config file for a small hierarchical planner.
pub fn world(k: usize) -> World {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = generate_dataset::<f64>(&small_spec()).unwrap();
    data.write(&root.join("dataset")).unwrap();
    let recipe = small_recipe();
    let shape = plan_shape(&data).unwrap();
    let encoder = train_encoder(&data.samples, &data, &recipe, 1).unwrap();
    let generator = train_generator(GeneratorKind::Hier, &data.samples, &shape, &encoder, &recipe, 2).unwrap();
    let reward = train_reward(&data.samples, &encoder, &shape, &recipe, 3).unwrap();
    save_json(&root.join("checkpoints/encoder.json"), &encoder).unwrap();
    save_json(&root.join("checkpoints/hier.json"), &generator).unwrap();
    save_json(&root.join("checkpoints/reward.json"), &reward).unwrap();
    let config = format!(
        r#"host = "127.0.0.1"
port = 0
data_dir = "{}"
k = {k}
sigma = 0.1
seed = 5

[checkpoints]
generator_kind = "hier"
generator = "checkpoints/hier.json"
reward = "checkpoints/reward.json"
encoder = "checkpoints/encoder.json"
dataset = "dataset"

[grid]
n = 6
categories = 6
zones = 3
levels = 5
"#,
        root.display()
    );
    let config_path = root.join("genplanner.toml");
    std::fs::write(&config_path, config).unwrap();
    World { dir, config_path }
}
