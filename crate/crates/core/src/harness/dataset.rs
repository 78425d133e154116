//! Synthetic stimulus/response dataset: scenes, captions, rendered images
//! and simulated voxel trials for disjoint train and test splits.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::io::{read_json, Recorder};
use super::HarnessError;
use crate::encoding::{average_repeats, stimulus_features, BrainModel};
use crate::world::{caption_of, render, sample_scene, Image, Scene, TokenSeq};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub index: usize,
    pub scene: Scene,
    pub caption: String,
    pub tokens: Vec<usize>,
    /// PGM path relative to the output root.
    pub image: String,
    pub repeats: u32,
    /// One row per trial, or a single repeat-averaged row (always for test).
    pub voxels: Vec<Vec<f64>>,
}

impl Item {
    pub fn caption_tokens(&self) -> TokenSeq {
        TokenSeq::new(self.tokens.clone()).expect("dataset tokens are in vocabulary")
    }

    /// The stored PGM is a quantized view; pipelines re-render the scene.
    pub fn render(&self) -> Image {
        render(&self.scene)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub split: String,
    pub averaged: bool,
    pub repeat_histogram: BTreeMap<u32, usize>,
    pub items: Vec<Item>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub world_seed: u64,
    pub brain_seed: u64,
    /// Mean per-voxel noise sigma actually used.
    pub sigma: f64,
    pub calibrated: bool,
    pub target_r2: Option<f64>,
    pub train_averaged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub brain: BrainModel,
    pub train: Vec<Item>,
    pub test: Vec<Item>,
}

fn histogram(items: &[Item]) -> BTreeMap<u32, usize> {
    let mut h = BTreeMap::new();
    for it in items {
        *h.entry(it.repeats).or_insert(0) += 1;
    }
    h
}

fn stream(seed: u64, lane: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(lane);
    rng
}

pub fn generate(cfg: &ExperimentConfig) -> Result<Dataset, HarnessError> {
    // independent streams: scenes, captions and repeat counts, trial noise
    let mut scene_rng = stream(cfg.world_seed, 0);
    let mut label_rng = stream(cfg.world_seed, 1);
    let mut noise_rng = stream(cfg.world_seed, 2);

    let mut seen = HashSet::new();
    let mut draw = |n: usize| -> Vec<Scene> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let s = sample_scene(&mut scene_rng);
            if seen.insert(s.seed) {
                out.push(s);
            }
        }
        out
    };
    let train_scenes = draw(cfg.data.train);
    let test_scenes = draw(cfg.data.test);

    let mut brain = BrainModel::build(cfg.brain.seed, 1.0)?;
    brain.tanh = cfg.brain.tanh;
    let (sigma, calibrated) = match cfg.brain.sigma {
        Some(s) => {
            brain.set_noise(s);
            (s, false)
        }
        None => {
            let feats: Vec<_> = train_scenes
                .iter()
                .map(|s| stimulus_features(s, &render(s)))
                .collect();
            let s = brain.calibrate_noise(&feats, cfg.brain.calibration_repeats, cfg.brain.target_r2);
            (s, true)
        }
    };

    let mut build = |split: &str, scenes: Vec<Scene>, test: bool| -> Result<Vec<Item>, HarnessError> {
        let average = test || cfg.data.average_train;
        scenes
            .into_iter()
            .enumerate()
            .map(|(index, scene)| {
                let caption = caption_of(&scene, &mut label_rng);
                let repeats = if test {
                    cfg.data.max_repeats
                } else {
                    label_rng.random_range(1..=cfg.data.max_repeats)
                };
                let image = render(&scene);
                let trials = brain.simulate_voxels(&scene, &image, &mut noise_rng, repeats as usize)?;
                let voxels = if average {
                    vec![average_repeats(&trials)?.values]
                } else {
                    trials.into_iter().map(|t| t.values).collect()
                };
                Ok(Item {
                    index,
                    caption: caption.text(),
                    tokens: caption.ids().to_vec(),
                    image: format!("data/images/{split}_{index:05}.pgm"),
                    scene,
                    repeats,
                    voxels,
                })
            })
            .collect()
    };
    let train = build("train", train_scenes, false)?;
    let test = build("test", test_scenes, true)?;
    Ok(Dataset {
        info: DatasetInfo {
            world_seed: cfg.world_seed,
            brain_seed: cfg.brain.seed,
            sigma,
            calibrated,
            target_r2: calibrated.then_some(cfg.brain.target_r2),
            train_averaged: cfg.data.average_train,
        },
        brain,
        train,
        test,
    })
}

pub const TRAIN_FILE: &str = "data/train.json";
pub const TEST_FILE: &str = "data/test.json";
pub const BRAIN_FILE: &str = "data/brain.json";
pub const INFO_FILE: &str = "data/dataset.json";

impl Dataset {
    pub fn save(&self, rec: &mut Recorder) -> Result<(), HarnessError> {
        for (name, items, averaged) in [("train", &self.train, self.info.train_averaged), ("test", &self.test, true)] {
            for it in items {
                rec.pgm(&it.image, &it.render())?;
            }
            let file = SplitFile {
                split: name.to_string(),
                averaged,
                repeat_histogram: histogram(items),
                items: items.clone(),
            };
            rec.json(&format!("data/{name}.json"), &file)?;
        }
        rec.json(BRAIN_FILE, &self.brain)?;
        rec.json(INFO_FILE, &self.info)?;
        Ok(())
    }

    pub fn load(root: &Path) -> Result<Self, HarnessError> {
        let train: SplitFile = read_json(&root.join(TRAIN_FILE))?;
        let test: SplitFile = read_json(&root.join(TEST_FILE))?;
        Ok(Self {
            info: read_json(&root.join(INFO_FILE))?,
            brain: read_json(&root.join(BRAIN_FILE))?,
            train: train.items,
            test: test.items,
        })
    }

    pub fn repeat_histogram(&self, test: bool) -> BTreeMap<u32, usize> {
        histogram(if test { &self.test } else { &self.train })
    }
}
