use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::dataset::{generate, Dataset, Item};
use super::io::{read_json, read_pgm, Recorder, RunManifest};
use super::HarnessError;
use crate::diffusion::{make_schedule, LossHistory, Pipeline, SamplerConfig, TrainConfig};
use crate::encoding::{BaselineStats, Roi, VoxelPattern};
use crate::metrics::{
    embedding_distance, meteor, nway_identification, pixcorr, rouge1, rouge_l, ssim,
    MetricReport, IMAGE_COLUMNS, TEXT_COLUMNS,
};
use crate::pipeline::{
    generate_caption, high_level_embedding, low_level_embedding, reconstruct_image,
    text_embedding, Caption, LatentScaler, Models, Regressors, Targets, Variant,
};
use crate::ridge::fold_labels;
use crate::world::scene::{Category, CAT_OFFSET, SEMANTIC_DIM};
use crate::world::{Embedders, Image, ImageLatentCodec, TextLatentCodec, TokenSeq, COND_DIM};

/// Frozen pieces rebuilt identically in every process.
pub struct Frozen {
    pub embedders: Embedders,
    pub text_codec: TextLatentCodec,
}

impl Frozen {
    pub fn build() -> Result<Self, HarnessError> {
        let embedders = Embedders::frozen();
        let text_codec = TextLatentCodec::build(&embedders)?;
        Ok(Self {
            embedders,
            text_codec,
        })
    }
}

pub fn item_targets(
    item: &Item,
    image_codec: &ImageLatentCodec,
    frozen: &Frozen,
) -> Result<Targets, HarnessError> {
    Ok(Targets::of(
        &item.render(),
        &item.scene.semantics(),
        &item.caption_tokens(),
        image_codec,
        &frozen.text_codec,
        &frozen.embedders,
    )?)
}

fn voxel_matrix(rows: &[&Vec<f64>]) -> DMatrix<f64> {
    let p = rows[0].len();
    DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j])
}

/// Test-set voxels (one averaged row per item) and targets.
pub fn test_design(
    data: &Dataset,
    image_codec: &ImageLatentCodec,
    frozen: &Frozen,
) -> Result<(DMatrix<f64>, Vec<Targets>), HarnessError> {
    let rows: Vec<&Vec<f64>> = data.test.iter().map(|it| &it.voxels[0]).collect();
    let targets = data
        .test
        .iter()
        .map(|it| item_targets(it, image_codec, frozen))
        .collect::<Result<_, _>>()?;
    Ok((voxel_matrix(&rows), targets))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub lambdas: [f64; 4],
    /// Held-out R² on the averaged test trials, per target.
    pub test_r2: [f64; 4],
    pub image_loss: LossHistory,
    pub text_loss: LossHistory,
}

/// Regressors only: single-trial rows, folds grouped by scene so repeats
/// of one image never straddle a split.
pub fn fit_regressors(
    cfg: &ExperimentConfig,
    data: &Dataset,
    image_codec: &ImageLatentCodec,
    frozen: &Frozen,
) -> Result<(Regressors, Vec<Targets>), HarnessError> {
    let item_targets: Vec<Targets> = data
        .train
        .iter()
        .map(|it| item_targets(it, image_codec, frozen))
        .collect::<Result<_, _>>()?;
    let scene_folds = fold_labels(data.train.len(), cfg.ridge.folds.max(2), cfg.ridge.seed);
    let mut rows = Vec::new();
    let mut trial_targets = Vec::new();
    let mut folds = Vec::new();
    for (it, t) in data.train.iter().zip(&item_targets) {
        for trial in &it.voxels {
            rows.push(trial);
            trial_targets.push(t.clone());
            folds.push(scene_folds[it.index]);
        }
    }
    let x = voxel_matrix(&rows);
    let regs = Regressors::fit(
        &x,
        &trial_targets,
        &cfg.ridge.grid,
        cfg.ridge.lambda.is_none().then_some(folds.as_slice()),
        cfg.ridge.lambda.unwrap_or(1.0),
    )?;
    Ok((regs, item_targets))
}

/// Every training stage, in memory.
pub fn fit_models(
    cfg: &ExperimentConfig,
    data: &Dataset,
    frozen: &Frozen,
) -> Result<(Models, TrainSummary), HarnessError> {
    let images: Vec<Image> = data.train.iter().map(Item::render).collect();
    let image_codec = ImageLatentCodec::fit(&images)?;
    let (regressors, targets) = fit_regressors(cfg, data, &image_codec, frozen)?;

    let image_scaler = LatentScaler::fit(&targets.iter().map(|t| t.z_image.clone()).collect::<Vec<_>>());
    let text_scaler = LatentScaler::fit(&targets.iter().map(|t| t.z_text.clone()).collect::<Vec<_>>());
    let d = &cfg.diffusion;
    let schedule = make_schedule(d.t, d.beta_start, d.beta_end)?;
    let train = TrainConfig {
        epochs: d.epochs,
        batch_size: d.batch_size,
        lr: d.lr,
        null_rate: d.null_rate,
        seed: d.seed,
        cosine_decay: true,
    };
    let ((image_denoiser, image_loss), (text_denoiser, text_loss)) =
        crate::pipeline::train_denoisers(&targets, &image_scaler, &text_scaler, &schedule, &train)?;

    let (xt, yt) = test_design(data, &image_codec, frozen)?;
    let test_r2 = regressors.r2(&xt, &yt)?;
    let lambdas = regressors.models().map(|m| m.lambda);
    Ok((
        Models {
            regressors,
            image_codec,
            image_scaler,
            text_scaler,
            image_denoiser,
            text_denoiser,
            schedule,
        },
        TrainSummary {
            lambdas,
            test_r2,
            image_loss,
            text_loss,
        },
    ))
}

pub fn sampler_configs(cfg: &ExperimentConfig) -> (SamplerConfig, SamplerConfig) {
    let d = &cfg.diffusion;
    let image = SamplerConfig {
        steps: d.steps,
        strength: d.strength,
        mix: d.mix_image,
        seed: d.sample_seed,
        pipeline: Pipeline::Image,
    };
    let text = SamplerConfig {
        mix: d.mix_text,
        pipeline: Pipeline::Text,
        ..image.clone()
    };
    (image, text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub item: usize,
    pub caption: Caption,
    pub predicted: Targets,
}

/// Decodes every voxel row; returns images alongside the records.
pub fn decode_all(
    cfg: &ExperimentConfig,
    models: &Models,
    frozen: &Frozen,
    voxels: &[&[f64]],
    variant: Variant,
) -> Result<Vec<(Image, Prediction)>, HarnessError> {
    let (img_cfg, txt_cfg) = sampler_configs(cfg);
    voxels
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let pred = models.regressors.predict(v)?;
            let image = reconstruct_image(models, &pred, &img_cfg, variant, i)?;
            let caption = generate_caption(models, &frozen.text_codec, &pred, &txt_cfg, variant, i)?;
            Ok((
                image,
                Prediction {
                    item: i,
                    caption,
                    predicted: pred,
                },
            ))
        })
        .collect()
}

fn mean_rate(rates: &[f64]) -> Vec<Option<f64>> {
    rates.iter().map(|&r| Some(r)).collect()
}

/// Image and text metric reports of predictions against ground truth.
pub fn evaluate(
    cfg: &ExperimentConfig,
    frozen: &Frozen,
    truth_images: &[Image],
    truth_captions: &[TokenSeq],
    images: &[Image],
    captions: &[TokenSeq],
) -> Result<(MetricReport, MetricReport), HarnessError> {
    let n = truth_images.len();
    if images.len() != n || captions.len() != n || truth_captions.len() != n {
        return Err(HarnessError::Invalid(format!(
            "count mismatch: {n} ground-truth items, {} images, {} captions",
            images.len(),
            captions.len()
        )));
    }
    let e = &cfg.eval;
    let metric = |r: Result<Vec<f64>, crate::metrics::MetricError>| r.map_err(|err| HarnessError::Invalid(err.to_string()));
    let low_t: Vec<Vec<f64>> = truth_images.iter().map(low_level_embedding).collect();
    let low_p: Vec<Vec<f64>> = images.iter().map(low_level_embedding).collect();
    let high_t: Vec<Vec<f64>> = truth_images.iter().map(|i| high_level_embedding(&frozen.embedders, i)).collect();
    let high_p: Vec<Vec<f64>> = images.iter().map(|i| high_level_embedding(&frozen.embedders, i)).collect();
    let ident_low = mean_rate(&metric(nway_identification(&low_t, &low_p, e.n_way, e.trials, e.seed, e.similarity))?);
    let ident_high = mean_rate(&metric(nway_identification(&high_t, &high_p, e.n_way, e.trials, e.seed, e.similarity))?);
    let dist_high = embedding_distance(&high_t, &high_p);

    let mut image_report = MetricReport::new(&IMAGE_COLUMNS, e.n_way, e.trials, e.seed);
    for i in 0..n {
        let s = ssim(images[i].pixels(), truth_images[i].pixels()).map_err(|err| HarnessError::Invalid(err.to_string()))?;
        image_report.push(vec![
            pixcorr(images[i].pixels(), truth_images[i].pixels()),
            Some(s),
            ident_low[i],
            ident_high[i],
            dist_high[i],
        ]);
    }

    let text_t: Vec<Vec<f64>> = truth_captions.iter().map(|c| text_embedding(&frozen.embedders, c)).collect();
    let text_p: Vec<Vec<f64>> = captions.iter().map(|c| text_embedding(&frozen.embedders, c)).collect();
    let ident_text = mean_rate(&metric(nway_identification(&text_t, &text_p, e.n_way, e.trials, e.seed, e.similarity))?);
    let mut text_report = MetricReport::new(&TEXT_COLUMNS, e.n_way, e.trials, e.seed);
    for i in 0..n {
        let (r, h) = (truth_captions[i].words(), captions[i].words());
        text_report.push(vec![Some(meteor(&r, &h)), Some(rouge1(&r, &h)), Some(rouge_l(&r, &h)), ident_text[i]]);
    }
    Ok((image_report, text_report))
}

/// Markdown table of summary rows, one line per labelled report pair.
pub fn markdown_table(rows: &[(String, &MetricReport, &MetricReport)]) -> String {
    let mut out = String::from("| run |");
    let cols: Vec<&str> = IMAGE_COLUMNS.iter().chain(TEXT_COLUMNS.iter()).copied().collect();
    for c in &cols {
        out.push_str(&format!(" {c} |"));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(cols.len()));
    out.push('\n');
    for (label, img, txt) in rows {
        out.push_str(&format!("| {label} |"));
        for v in img.summary().into_iter().chain(txt.summary()) {
            match v {
                Some(x) => out.push_str(&format!(" {x:.4} |")),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

fn csv_bytes(report: &MetricReport) -> Result<Vec<u8>, HarnessError> {
    let mut buf = Vec::new();
    report
        .write_csv(&mut buf)
        .map_err(|e| HarnessError::Invalid(e.to_string()))?;
    Ok(buf)
}

fn loss_csv(history: &LossHistory) -> Result<Vec<u8>, HarnessError> {
    let mut buf = Vec::new();
    history
        .write_csv(&mut buf)
        .map_err(|e| HarnessError::Invalid(e.to_string()))?;
    Ok(buf)
}

const MODELS_FILE: &str = "models/models.json";

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<RunManifest, HarnessError> {
    let root = cfg.output_root();
    let data = generate(cfg)?;
    let mut rec = Recorder::new(&root, "gen-data", cfg.hash());
    data.save(&mut rec)?;
    rec.note("sigma", data.info.sigma);
    rec.note("train_repeats", data.repeat_histogram(false));
    rec.note("test_repeats", data.repeat_histogram(true));
    rec.finish()
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunManifest, HarnessError> {
    let root = cfg.output_root();
    let data = Dataset::load(&root)?;
    let frozen = Frozen::build()?;
    let (models, summary) = fit_models(cfg, &data, &frozen)?;
    let mut rec = Recorder::new(&root, "train", cfg.hash());
    for (name, m) in crate::pipeline::TARGET_NAMES.iter().zip(models.regressors.models()) {
        rec.json(&format!("models/ridge_{name}.json"), m)?;
    }
    rec.json("models/image_codec.json", &models.image_codec)?;
    rec.json("models/text_codec.json", &frozen.text_codec.candidates().iter().map(TokenSeq::text).collect::<Vec<_>>())?;
    rec.json("models/image_denoiser.json", &models.image_denoiser)?;
    rec.json("models/text_denoiser.json", &models.text_denoiser)?;
    rec.json("models/schedule.json", &models.schedule)?;
    rec.json(MODELS_FILE, &models)?;
    rec.bytes("models/loss_image.csv", &loss_csv(&summary.image_loss)?)?;
    rec.bytes("models/loss_text.csv", &loss_csv(&summary.text_loss)?)?;
    for (k, name) in crate::pipeline::TARGET_NAMES.iter().enumerate() {
        rec.note(&format!("lambda_{name}"), summary.lambdas[k]);
        rec.note(&format!("test_r2_{name}"), summary.test_r2[k]);
    }
    rec.finish()
}

fn load_models(root: &Path) -> Result<Models, HarnessError> {
    read_json(&root.join(MODELS_FILE))
}

fn prediction_dir(variant: Variant) -> String {
    format!("predictions/{}", variant.name())
}

pub fn cmd_decode(cfg: &ExperimentConfig) -> Result<RunManifest, HarnessError> {
    let root = cfg.output_root();
    let models = load_models(&root)?;
    let data = Dataset::load(&root)?;
    let frozen = Frozen::build()?;
    let voxels: Vec<&[f64]> = data.test.iter().map(|it| it.voxels[0].as_slice()).collect();
    let decoded = decode_all(cfg, &models, &frozen, &voxels, cfg.variant)?;
    let dir = prediction_dir(cfg.variant);
    let mut rec = Recorder::new(&root, "decode", cfg.hash());
    let mut records = Vec::with_capacity(decoded.len());
    for (image, p) in decoded {
        rec.pgm(&format!("{dir}/images/item_{:05}.pgm", p.item), &image)?;
        records.push(p);
    }
    rec.json(&format!("{dir}/predictions.json"), &records)?;
    rec.note("variant", cfg.variant);
    rec.note("items", records.len());
    rec.finish()
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<RunManifest, HarnessError> {
    let root = cfg.output_root();
    let data = Dataset::load(&root)?;
    let frozen = Frozen::build()?;
    let dir = prediction_dir(cfg.variant);
    let records: Vec<Prediction> = read_json(&root.join(format!("{dir}/predictions.json")))?;
    let truth_images = data.test.iter().map(|it| read_pgm(&root.join(&it.image))).collect::<Result<Vec<_>, _>>()?;
    let truth_captions: Vec<TokenSeq> = data.test.iter().map(Item::caption_tokens).collect();
    let images = records
        .iter()
        .map(|p| read_pgm(&root.join(format!("{dir}/images/item_{:05}.pgm", p.item))))
        .collect::<Result<Vec<_>, _>>()?;
    let captions: Vec<TokenSeq> = records.iter().map(|p| p.caption.tokens.clone()).collect();
    let (img, txt) = evaluate(cfg, &frozen, &truth_images, &truth_captions, &images, &captions)?;
    let out = format!("reports/{}", cfg.variant.name());
    let mut rec = Recorder::new(&root, "evaluate", cfg.hash());
    rec.bytes(&format!("{out}/image_metrics.csv"), &csv_bytes(&img)?)?;
    rec.bytes(&format!("{out}/text_metrics.csv"), &csv_bytes(&txt)?)?;
    let table = markdown_table(&[(cfg.variant.name().to_string(), &img, &txt)]);
    rec.bytes(&format!("{out}/summary.md"), table.as_bytes())?;
    for (c, v) in IMAGE_COLUMNS.iter().zip(img.summary()).chain(TEXT_COLUMNS.iter().zip(txt.summary())) {
        rec.note(c, v);
    }
    rec.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub image: Vec<Option<f64>>,
    pub text: Vec<Option<f64>>,
}

/// The 8-bit view stored on disk, so in-memory scores match file-based ones.
pub fn quantize(image: &Image) -> Image {
    Image::from_bytes(&image.to_bytes())
}

/// One evaluation per variant over the test set, in memory.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    models: &Models,
    data: &Dataset,
    frozen: &Frozen,
) -> Result<Vec<AblationRow>, HarnessError> {
    let voxels: Vec<&[f64]> = data.test.iter().map(|it| it.voxels[0].as_slice()).collect();
    let truth_images: Vec<Image> = data.test.iter().map(|it| quantize(&it.render())).collect();
    let truth_captions: Vec<TokenSeq> = data.test.iter().map(Item::caption_tokens).collect();
    Variant::ALL
        .iter()
        .map(|&variant| {
            let decoded = decode_all(cfg, models, frozen, &voxels, variant)?;
            let images: Vec<Image> = decoded.iter().map(|(i, _)| quantize(i)).collect();
            let captions: Vec<TokenSeq> = decoded.iter().map(|(_, p)| p.caption.tokens.clone()).collect();
            let (img, txt) = evaluate(cfg, frozen, &truth_images, &truth_captions, &images, &captions)?;
            Ok(AblationRow {
                variant,
                image: img.summary(),
                text: txt.summary(),
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<Vec<u8>, HarnessError> {
    let mut wr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["variant"];
    header.extend(IMAGE_COLUMNS);
    header.extend(TEXT_COLUMNS);
    let err = |e: csv::Error| HarnessError::Invalid(e.to_string());
    wr.write_record(&header).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.variant.name().to_string()];
        rec.extend(r.image.iter().chain(&r.text).map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default()));
        wr.write_record(&rec).map_err(err)?;
    }
    wr.into_inner().map_err(|e| HarnessError::Invalid(e.to_string()))
}

pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<RunManifest, HarnessError> {
    let root = cfg.output_root();
    let models = load_models(&root)?;
    let data = Dataset::load(&root)?;
    let frozen = Frozen::build()?;
    let rows = run_ablation(cfg, &models, &data, &frozen)?;
    let mut rec = Recorder::new(&root, "ablate", cfg.hash());
    rec.bytes("reports/ablation.csv", &ablation_csv(&rows)?)?;
    rec.json("reports/ablation.json", &rows)?;
    rec.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiProbeRow {
    pub roi: Roi,
    pub gain: f64,
    pub decoded_category: Category,
    pub caption: String,
    /// PGM path relative to the output root.
    pub image: String,
}

/// Category whose semantic direction best matches the decoded global image
/// token after removing the training mean.
pub fn classify_category(embedders: &Embedders, pred: &Targets, train_mean: &[f64]) -> Category {
    let global = &pred.c_image[pred.c_image.len() - COND_DIM..];
    let centered: Vec<f64> = global.iter().zip(train_mean).map(|(g, m)| g - m).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut best = (Category::ALL[0], f64::NEG_INFINITY);
    for c in Category::ALL {
        let mut onehot = [0.0; SEMANTIC_DIM];
        onehot[CAT_OFFSET + c.index()] = 1.0;
        let dir = embedders.semantic_token(&onehot);
        let dot: f64 = centered.iter().zip(&dir).map(|(a, b)| a * b).sum();
        let cos = dot / (norm(&centered) * norm(&dir)).max(1e-300);
        if cos > best.1 {
            best = (c, cos);
        }
    }
    best.0
}

/// ROI activation patterns decoded through the full pipeline. Returns rows
/// with their images.
pub fn run_roi_probe(
    cfg: &ExperimentConfig,
    models: &Models,
    data: &Dataset,
    frozen: &Frozen,
) -> Result<Vec<(RoiProbeRow, Image)>, HarnessError> {
    let trials: Vec<VoxelPattern> = data
        .train
        .iter()
        .flat_map(|it| it.voxels.iter().map(|v| VoxelPattern::new(v.clone())))
        .collect();
    let baseline = BaselineStats::from_patterns(&trials);
    let train_mean = &models.regressors.c_image.intercept;
    let train_mean = &train_mean[train_mean.len() - COND_DIM..];
    let mut out = Vec::new();
    let mut patterns = Vec::new();
    for roi in Roi::CATEGORY_ROIS {
        for &gain in &cfg.roi.gains {
            patterns.push((roi, gain, data.brain.roi_activation_pattern(roi, gain, &baseline)?));
        }
    }
    let voxels: Vec<&[f64]> = patterns.iter().map(|(_, _, p)| p.values.as_slice()).collect();
    let decoded = decode_all(cfg, models, frozen, &voxels, cfg.variant)?;
    for ((roi, gain, _), (image, p)) in patterns.iter().zip(decoded) {
        out.push((
            RoiProbeRow {
                roi: *roi,
                gain: *gain,
                decoded_category: classify_category(&frozen.embedders, &p.predicted, train_mean),
                caption: p.caption.text.clone(),
                image: format!("roi_probe/{}_k{gain}.pgm", roi.name()),
            },
            image,
        ));
    }
    Ok(out)
}

pub fn cmd_roi_probe(cfg: &ExperimentConfig) -> Result<RunManifest, HarnessError> {
    let root = cfg.output_root();
    let models = load_models(&root)?;
    let data = Dataset::load(&root)?;
    let frozen = Frozen::build()?;
    let rows = run_roi_probe(cfg, &models, &data, &frozen)?;
    let mut rec = Recorder::new(&root, "roi-probe", cfg.hash());
    let mut wr = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| HarnessError::Invalid(e.to_string());
    wr.write_record(["roi", "gain", "decoded_category", "correct", "caption", "image"]).map_err(err)?;
    for (row, image) in &rows {
        rec.pgm(&row.image, image)?;
        let correct = row.roi.category() == Some(row.decoded_category);
        wr.write_record([
            row.roi.name(),
            &row.gain.to_string(),
            row.decoded_category.name(),
            &correct.to_string(),
            &row.caption,
            &row.image,
        ])
        .map_err(err)?;
    }
    let bytes = wr.into_inner().map_err(|e| HarnessError::Invalid(e.to_string()))?;
    rec.bytes("roi_probe/summary.csv", &bytes)?;
    rec.finish()
}
