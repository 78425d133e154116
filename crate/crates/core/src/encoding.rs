//! Ground-truth voxel simulator with early-visual and category-selective ROIs.
//!
//! Responses are linear in a 32-dim stimulus feature vector
//! `[16 patch means ; 15 semantic multi-hot ; object count]` plus independent
//! Gaussian trial noise.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::standard_normal_vec;
use crate::world::render::{Image, PATCHES};
use crate::world::scene::{Category, Scene, CAT_OFFSET, SEMANTIC_DIM};

pub const VOXELS: usize = 512;
pub const FEATURES: usize = PATCHES + SEMANTIC_DIM + 1;
const SEMANTIC_START: usize = PATCHES;

#[derive(Debug, Error, PartialEq)]
pub enum BrainError {
    #[error("weight matrix has rank {0} < {FEATURES}; rebuild with another seed")]
    RankDeficient(usize),
    #[error("unknown ROI `{0}`")]
    UnknownRoi(String),
    #[error("cannot average trials of different scenes ({0} vs {1})")]
    MixedScenes(u64, u64),
    #[error("no trials to average")]
    NoTrials,
    #[error("repeat count must be at least 1")]
    ZeroRepeats,
    #[error("gain must be non-negative, got {0}")]
    BadGain(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Roi {
    Early,
    Face,
    Word,
    Place,
    Body,
    Mixed,
}

impl Roi {
    pub const CATEGORY_ROIS: [Roi; 4] = [Roi::Face, Roi::Word, Roi::Place, Roi::Body];

    pub fn name(self) -> &'static str {
        match self {
            Roi::Early => "early",
            Roi::Face => "face",
            Roi::Word => "word",
            Roi::Place => "place",
            Roi::Body => "body",
            Roi::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> Result<Self, BrainError> {
        [Roi::Early, Roi::Face, Roi::Word, Roi::Place, Roi::Body, Roi::Mixed]
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| BrainError::UnknownRoi(s.to_string()))
    }

    /// Preferred category of a category-selective ROI.
    pub fn category(self) -> Option<Category> {
        match self {
            Roi::Face => Some(Category::Face),
            Roi::Word => Some(Category::Word),
            Roi::Place => Some(Category::Place),
            Roi::Body => Some(Category::Body),
            _ => None,
        }
    }
}

/// Voxel counts per ROI block, in voxel order.
pub const ROI_LAYOUT: [(Roi, usize); 6] = [
    (Roi::Early, 128),
    (Roi::Face, 80),
    (Roi::Word, 80),
    (Roi::Place, 80),
    (Roi::Body, 80),
    (Roi::Mixed, 64),
];

/// Stimulus features seen by the simulated cortex.
pub fn stimulus_features(scene: &Scene, image: &Image) -> [f64; FEATURES] {
    let mut f = [0.0; FEATURES];
    f[..PATCHES].copy_from_slice(&image.patch_means());
    f[SEMANTIC_START..SEMANTIC_START + SEMANTIC_DIM].copy_from_slice(&scene.semantics());
    f[FEATURES - 1] = scene.objects.len() as f64;
    f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelPattern {
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat: Option<u32>,
}

impl VoxelPattern {
    pub fn new(values: Vec<f64>) -> Self {
        Self {
            values,
            scene_id: None,
            repeat: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrainModel {
    /// `VOXELS` rows of `FEATURES` weights.
    pub weights: Vec<Vec<f64>>,
    pub roi: Vec<Roi>,
    pub noise_sigma: Vec<f64>,
    pub seed: u64,
    /// Pass responses through `tanh` (stress option, default off).
    #[serde(default)]
    pub tanh: bool,
}

impl BrainModel {
    /// Draws weights with the ROI structure and checks full column rank.
    /// Noise is initialised to unit multipliers around `sigma`.
    pub fn build(seed: u64, sigma: f64) -> Result<Self, BrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(VOXELS);
        let mut roi = Vec::with_capacity(VOXELS);
        for (label, count) in ROI_LAYOUT {
            for _ in 0..count {
                weights.push(draw_row(label, &mut rng));
                roi.push(label);
            }
        }
        let noise_sigma = (0..VOXELS)
            .map(|_| sigma * rng.random_range(0.8..1.2))
            .collect();
        let brain = Self {
            weights,
            roi,
            noise_sigma,
            seed,
            tanh: false,
        };
        let rank = brain.rank();
        if rank < FEATURES {
            return Err(BrainError::RankDeficient(rank));
        }
        Ok(brain)
    }

    pub fn weight_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(VOXELS, FEATURES, |i, j| self.weights[i][j])
    }

    pub fn rank(&self) -> usize {
        let sv = self.weight_matrix().singular_values();
        let tol = sv.max() * 1e-10 * VOXELS as f64;
        sv.iter().filter(|&&s| s > tol).count()
    }

    pub fn voxels_in(&self, roi: Roi) -> impl Iterator<Item = usize> + '_ {
        self.roi
            .iter()
            .enumerate()
            .filter(move |(_, r)| **r == roi)
            .map(|(i, _)| i)
    }

    pub fn noiseless(&self, features: &[f64; FEATURES]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| {
                let a: f64 = w.iter().zip(features).map(|(x, y)| x * y).sum();
                if self.tanh {
                    a.tanh()
                } else {
                    a
                }
            })
            .collect()
    }

    /// Rescales the per-voxel noise so that the oracle decoder
    /// `f̂ = W⁺ v` recovers features with mean `R² = target_r2` from
    /// `repeats`-averaged trials. `features` are the calibration stimuli.
    /// Returns the mean noise sigma after rescaling.
    pub fn calibrate_noise(&mut self, features: &[[f64; FEATURES]], repeats: usize, target_r2: f64) -> f64 {
        let pinv = self
            .weight_matrix()
            .pseudo_inverse(1e-12)
            .expect("pseudo-inverse of a full-rank matrix");
        let n = features.len() as f64;
        let mut ratio = 0.0;
        let mut used = 0usize;
        for k in 0..FEATURES {
            let mean = features.iter().map(|f| f[k]).sum::<f64>() / n;
            let var = features.iter().map(|f| (f[k] - mean).powi(2)).sum::<f64>() / n;
            if var < 1e-12 {
                continue;
            }
            // noise variance of feature k per unit sigma scale
            let d: f64 = (0..VOXELS)
                .map(|i| (pinv[(k, i)] * self.noise_sigma[i]).powi(2))
                .sum();
            ratio += d / var;
            used += 1;
        }
        let ratio = ratio / used as f64;
        let scale = ((1.0 - target_r2) * repeats as f64 / ratio).sqrt();
        self.noise_sigma.iter_mut().for_each(|s| *s *= scale);
        self.noise_sigma.iter().sum::<f64>() / VOXELS as f64
    }

    pub fn set_noise(&mut self, sigma: f64) {
        let mean = self.noise_sigma.iter().sum::<f64>() / VOXELS as f64;
        if mean > 0.0 {
            self.noise_sigma.iter_mut().for_each(|s| *s *= sigma / mean);
        } else {
            self.noise_sigma.iter_mut().for_each(|s| *s = sigma);
        }
    }

    pub fn simulate_voxels<R: Rng + ?Sized>(
        &self,
        scene: &Scene,
        image: &Image,
        rng: &mut R,
        repeats: usize,
    ) -> Result<Vec<VoxelPattern>, BrainError> {
        if repeats == 0 {
            return Err(BrainError::ZeroRepeats);
        }
        let clean = self.noiseless(&stimulus_features(scene, image));
        Ok((0..repeats)
            .map(|r| {
                let eps = standard_normal_vec(rng, VOXELS);
                let values = clean
                    .iter()
                    .zip(&eps)
                    .zip(&self.noise_sigma)
                    .map(|((c, e), s)| c + s * e)
                    .collect();
                VoxelPattern {
                    values,
                    scene_id: Some(scene.seed),
                    repeat: Some(r as u32),
                }
            })
            .collect())
    }

    /// Baseline pattern with `roi` voxels raised by `gain` training stds.
    pub fn roi_activation_pattern(
        &self,
        roi: Roi,
        gain: f64,
        baseline: &BaselineStats,
    ) -> Result<VoxelPattern, BrainError> {
        if gain.is_nan() || gain < 0.0 {
            return Err(BrainError::BadGain(gain));
        }
        let values = (0..VOXELS)
            .map(|i| {
                if self.roi[i] == roi {
                    baseline.mean[i] + gain * baseline.std[i]
                } else {
                    baseline.mean[i]
                }
            })
            .collect();
        Ok(VoxelPattern::new(values))
    }
}

fn draw_row<R: Rng + ?Sized>(label: Roi, rng: &mut R) -> Vec<f64> {
    let mut w = vec![0.0; FEATURES];
    match label {
        Roi::Early => {
            // receptive field: one preferred patch plus weak neighbours
            let pref = rng.random_range(0..PATCHES);
            for (p, v) in w.iter_mut().take(PATCHES).enumerate() {
                *v = if p == pref {
                    rng.random_range(1.0..2.0)
                } else {
                    rng.random_range(0.0..0.15)
                };
            }
        }
        Roi::Mixed => {
            for v in &mut w {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        _ => {
            let cat = label.category().expect("category ROI");
            for v in &mut w {
                *v = rng.random_range(0.0..0.2);
            }
            w[SEMANTIC_START + CAT_OFFSET + cat.index()] = rng.random_range(1.0..2.0);
        }
    }
    w
}

/// Per-voxel mean and standard deviation over training responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BaselineStats {
    pub fn from_patterns(patterns: &[VoxelPattern]) -> Self {
        let n = patterns.len() as f64;
        let dim = patterns[0].values.len();
        let mut mean = vec![0.0; dim];
        for p in patterns {
            for (m, v) in mean.iter_mut().zip(&p.values) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; dim];
        for p in patterns {
            for ((s, v), m) in std.iter_mut().zip(&p.values).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        std.iter_mut().for_each(|s| *s = (*s / (n - 1.0).max(1.0)).sqrt());
        Self { mean, std }
    }
}

/// Element-wise mean of repeated trials of one scene.
pub fn average_repeats(trials: &[VoxelPattern]) -> Result<VoxelPattern, BrainError> {
    let first = trials.first().ok_or(BrainError::NoTrials)?;
    for t in trials {
        if let (Some(a), Some(b)) = (first.scene_id, t.scene_id) {
            if a != b {
                return Err(BrainError::MixedScenes(a, b));
            }
        }
    }
    let n = trials.len() as f64;
    let mut values = vec![0.0; first.values.len()];
    for t in trials {
        for (o, v) in values.iter_mut().zip(&t.values) {
            *o += v;
        }
    }
    values.iter_mut().for_each(|v| *v /= n);
    Ok(VoxelPattern {
        values,
        scene_id: first.scene_id,
        repeat: None,
    })
}
