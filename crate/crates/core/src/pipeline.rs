//! Voxels to image and caption: four ridge regressors feed the two
//! diffusion pipelines, whose outputs go through the frozen codecs.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    ddim_sample, train_denoiser, Denoiser, DenoiserConfig, DiffusionError, LossHistory, Pipeline,
    SamplerConfig, Schedule, TrainConfig, TrainItem,
};
use crate::metrics::dedup_sentences;
use crate::ridge::{center, cv_with_folds, CvResult, RidgeError, RidgeModel, Standardizer, SvdPath};
use crate::tensor::Tensor;
use crate::world::codec::CodecError;
use crate::world::render::semantic_readout;
use crate::world::{
    ConditionSet, Embedders, Image, ImageLatentCodec, TextLatentCodec, TokenSeq, COND_DIM,
    IMAGE_COND_TOKENS, TEXT_COND_TOKENS,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ridge(#[from] RidgeError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("{0} rows of voxels but {1} rows of targets")]
    RowMismatch(usize, usize),
}

/// The four decoding targets of one stimulus, flattened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub z_image: Vec<f64>,
    pub z_text: Vec<f64>,
    pub c_image: Vec<f64>,
    pub c_text: Vec<f64>,
}

impl Targets {
    pub fn of(
        image: &Image,
        semantics: &[f64],
        caption: &TokenSeq,
        image_codec: &ImageLatentCodec,
        text_codec: &TextLatentCodec,
        embedders: &Embedders,
    ) -> Result<Self, CodecError> {
        Ok(Self {
            z_image: image_codec.encode(image),
            z_text: text_codec.encode(caption)?,
            c_image: embedders.embed_image_cond(image, semantics).into_data(),
            c_text: embedders.embed_text_cond(caption).into_data(),
        })
    }

    pub fn image_cond(&self) -> Tensor {
        Tensor::from_vec(IMAGE_COND_TOKENS, COND_DIM, self.c_image.clone())
    }

    pub fn text_cond(&self) -> Tensor {
        Tensor::from_vec(TEXT_COND_TOKENS, COND_DIM, self.c_text.clone())
    }
}

pub const TARGET_NAMES: [&str; 4] = ["z_image", "z_text", "c_image", "c_text"];

fn target_block(targets: &[Targets], pick: impl Fn(&Targets) -> &[f64]) -> DMatrix<f64> {
    let q = pick(&targets[0]).len();
    DMatrix::from_fn(targets.len(), q, |i, j| pick(&targets[i])[j])
}

fn blocks(targets: &[Targets]) -> [DMatrix<f64>; 4] {
    [
        target_block(targets, |t| &t.z_image),
        target_block(targets, |t| &t.z_text),
        target_block(targets, |t| &t.c_image),
        target_block(targets, |t| &t.c_text),
    ]
}

/// Separate voxel-to-target ridge models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regressors {
    pub z_image: RidgeModel,
    pub z_text: RidgeModel,
    pub c_image: RidgeModel,
    pub c_text: RidgeModel,
    /// Cross-validation curves, absent when the penalty was fixed.
    #[serde(default)]
    pub cv: Vec<CvResult>,
}

impl Regressors {
    /// Fits all four with one factorization per fold. `folds` labels each
    /// row; `None` skips cross-validation and uses `fixed_lambda`.
    pub fn fit(
        voxels: &DMatrix<f64>,
        targets: &[Targets],
        grid: &[f64],
        folds: Option<&[usize]>,
        fixed_lambda: f64,
    ) -> Result<Self, PipelineError> {
        if voxels.nrows() != targets.len() {
            return Err(PipelineError::RowMismatch(voxels.nrows(), targets.len()));
        }
        let ys = blocks(targets);
        let (lambdas, cv) = match folds {
            Some(f) => {
                let refs: Vec<&DMatrix<f64>> = ys.iter().collect();
                let cv = cv_with_folds(voxels, &refs, grid, f)?;
                (cv.iter().map(|c| c.lambda).collect::<Vec<_>>(), cv)
            }
            None => (vec![fixed_lambda; 4], Vec::new()),
        };
        let stats = Standardizer::fit(voxels)?;
        let path = SvdPath::new(&stats.apply(voxels)?)?;
        let mut models = ys.iter().zip(&lambdas).map(|(y, &lambda)| {
            let (mean, yc) = center(y);
            let w = path.solve(&yc, lambda)?;
            Ok::<_, RidgeError>(RidgeModel::from_parts(w, mean, lambda, stats.clone()))
        });
        let mut next = || models.next().expect("four targets");
        Ok(Self {
            z_image: next()?,
            z_text: next()?,
            c_image: next()?,
            c_text: next()?,
            cv,
        })
    }

    pub fn models(&self) -> [&RidgeModel; 4] {
        [&self.z_image, &self.z_text, &self.c_image, &self.c_text]
    }

    pub fn predict(&self, voxels: &[f64]) -> Result<Targets, PipelineError> {
        Ok(Targets {
            z_image: self.z_image.predict_row(voxels)?,
            z_text: self.z_text.predict_row(voxels)?,
            c_image: self.c_image.predict_row(voxels)?,
            c_text: self.c_text.predict_row(voxels)?,
        })
    }

    /// Held-out R² per target, in [`TARGET_NAMES`] order.
    pub fn r2(&self, voxels: &DMatrix<f64>, targets: &[Targets]) -> Result<[f64; 4], PipelineError> {
        let ys = blocks(targets);
        let mut out = [0.0; 4];
        for (k, (m, y)) in self.models().iter().zip(&ys).enumerate() {
            out[k] = crate::ridge::r2_score(y, &m.predict(voxels)?);
        }
        Ok(out)
    }
}

/// Per-dimension affine map putting latents at zero mean, unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentScaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentScaler {
    pub fn fit(latents: &[Vec<f64>]) -> Self {
        let n = latents.len() as f64;
        let d = latents[0].len();
        let mean: Vec<f64> = (0..d).map(|j| latents.iter().map(|z| z[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| {
                let v = latents.iter().map(|z| (z[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn forward(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

/// Which of the three inputs a run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    OnlyZ,
    OnlyCi,
    OnlyCt,
    WoZ,
    WoCi,
    WoCt,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::OnlyZ,
        Variant::OnlyCi,
        Variant::OnlyCt,
        Variant::WoZ,
        Variant::WoCi,
        Variant::WoCt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::OnlyZ => "only_z",
            Variant::OnlyCi => "only_ci",
            Variant::OnlyCt => "only_ct",
            Variant::WoZ => "wo_z",
            Variant::WoCi => "wo_ci",
            Variant::WoCt => "wo_ct",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn uses_z(self) -> bool {
        !matches!(self, Variant::OnlyCi | Variant::OnlyCt | Variant::WoZ)
    }

    pub fn uses_image_cond(self) -> bool {
        matches!(self, Variant::Full | Variant::OnlyCi | Variant::WoZ | Variant::WoCt)
    }

    pub fn uses_text_cond(self) -> bool {
        matches!(self, Variant::Full | Variant::OnlyCt | Variant::WoZ | Variant::WoCi)
    }
}

/// Everything fitted at training time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Models {
    pub regressors: Regressors,
    pub image_codec: ImageLatentCodec,
    pub image_scaler: LatentScaler,
    pub text_scaler: LatentScaler,
    pub image_denoiser: Denoiser,
    pub text_denoiser: Denoiser,
    pub schedule: Schedule,
}

/// A trained denoiser with its loss curve.
pub type Trained = (Denoiser, LossHistory);

/// Trains the image and text denoisers on ground-truth latents and
/// conditions. The text pipeline uses `seed + 1`.
pub fn train_denoisers(
    targets: &[Targets],
    image_scaler: &LatentScaler,
    text_scaler: &LatentScaler,
    schedule: &Schedule,
    train: &TrainConfig,
) -> Result<(Trained, Trained), PipelineError> {
    let items = |pick: &dyn Fn(&Targets) -> Vec<f64>| -> Vec<TrainItem> {
        targets
            .iter()
            .map(|t| TrainItem {
                z: pick(t),
                cond: ConditionSet::new(Some(t.image_cond()), Some(t.text_cond()), 0.5),
            })
            .collect()
    };
    let image_items = items(&|t| image_scaler.forward(&t.z_image));
    let text_items = items(&|t| text_scaler.forward(&t.z_text));
    let image = train_denoiser(DenoiserConfig::image(), &image_items, schedule, train)?;
    let text_train = TrainConfig {
        seed: train.seed.wrapping_add(1),
        ..train.clone()
    };
    let text = train_denoiser(DenoiserConfig::text(), &text_items, schedule, &text_train)?;
    Ok((image, text))
}

/// Independent stream per (item, pipeline) under one base seed, so items
/// can be processed in any order.
pub fn item_rng(seed: u64, item: usize, pipeline: Pipeline) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lane = match pipeline {
        Pipeline::Image => 0,
        Pipeline::Text => 1,
    };
    rng.set_stream(2 * item as u64 + lane);
    rng
}

fn conditions(pred: &Targets, variant: Variant, mix: f64) -> ConditionSet {
    let image = variant.uses_image_cond().then(|| pred.image_cond());
    let text = variant.uses_text_cond().then(|| pred.text_cond());
    ConditionSet::new(image, text, mix)
}

/// Sampler settings after applying the variant: without a latent the run
/// starts from pure noise at full strength.
fn variant_sampler(config: &SamplerConfig, variant: Variant) -> SamplerConfig {
    if variant.uses_z() {
        config.clone()
    } else {
        SamplerConfig {
            strength: 1.0,
            ..config.clone()
        }
    }
}

pub fn reconstruct_image(
    models: &Models,
    pred: &Targets,
    config: &SamplerConfig,
    variant: Variant,
    item: usize,
) -> Result<Image, PipelineError> {
    let cfg = variant_sampler(config, variant);
    let z_in = models.image_scaler.forward(&pred.z_image);
    let mut rng = item_rng(cfg.seed, item, Pipeline::Image);
    let z = ddim_sample(
        &models.image_denoiser,
        &models.schedule,
        variant.uses_z().then_some(z_in.as_slice()),
        &cfg,
        &conditions(pred, variant, cfg.mix),
        &mut rng,
    )?;
    Ok(models.image_codec.decode(&models.image_scaler.inverse(&z))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: TokenSeq,
    /// Sentence text after repeated-sentence removal.
    pub text: String,
}

pub fn generate_caption(
    models: &Models,
    text_codec: &TextLatentCodec,
    pred: &Targets,
    config: &SamplerConfig,
    variant: Variant,
    item: usize,
) -> Result<Caption, PipelineError> {
    let cfg = variant_sampler(config, variant);
    let z_in = models.text_scaler.forward(&pred.z_text);
    let mut rng = item_rng(cfg.seed, item, Pipeline::Text);
    let z = ddim_sample(
        &models.text_denoiser,
        &models.schedule,
        variant.uses_z().then_some(z_in.as_slice()),
        &cfg,
        &conditions(pred, variant, cfg.mix),
        &mut rng,
    )?;
    let tokens = text_codec.decode(&models.text_scaler.inverse(&z))?;
    let text = dedup_sentences(&tokens.text());
    Ok(Caption { tokens, text })
}

/// Stand-in low-level image embedding: the 16 patch means.
pub fn low_level_embedding(image: &Image) -> Vec<f64> {
    image.patch_means().to_vec()
}

/// Stand-in high-level image embedding: the global semantic token of the
/// pixel-derived semantic readout.
pub fn high_level_embedding(embedders: &Embedders, image: &Image) -> Vec<f64> {
    embedders.semantic_token(&semantic_readout(image))
}

/// Global text token of a caption.
pub fn text_embedding(embedders: &Embedders, caption: &TokenSeq) -> Vec<f64> {
    embedders.text_token(caption)
}
