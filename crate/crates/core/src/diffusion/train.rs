use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, DenoiserConfig, Sample};
use super::schedule::{forward_diffuse, Schedule};
use super::DiffusionError;
use crate::tensor::{standard_normal_vec, AdamState, Graph, Tensor, TensorError};
use crate::world::embed::ConditionSet;

/// One training latent with its full condition pair.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub z: Vec<f64>,
    pub cond: ConditionSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of examples trained with both contexts replaced by the null token.
    pub null_rate: f64,
    pub seed: u64,
    /// Anneal the learning rate from `lr` to zero along a half cosine.
    #[serde(default)]
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 1e-3,
            null_rate: 0.1,
            seed: 0,
            cosine_decay: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    /// `(epoch, step, loss)` per optimizer step.
    pub steps: Vec<(usize, usize, f64)>,
}

impl LossHistory {
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for &(e, _, l) in &self.steps {
            if out.len() <= e {
                out.resize(e + 1, (0.0, 0));
            }
            out[e].0 += l;
            out[e].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["epoch", "step", "loss"])?;
        for (e, s, l) in &self.steps {
            wr.write_record([e.to_string(), s.to_string(), format!("{l:.10}")])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Minimizes the noise-prediction MSE over random `(t, ε)` with Adam.
///
/// Per example: with probability `null_rate` both contexts are dropped;
/// otherwise, when both are present, the mixing rate is drawn from U[0, 1].
pub fn train_denoiser(
    config: DenoiserConfig,
    data: &[TrainItem],
    schedule: &Schedule,
    train: &TrainConfig,
) -> Result<(Denoiser, LossHistory), DiffusionError> {
    if data.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = Denoiser::new(config, &mut rng);
    let mut adam = AdamState::new(train.lr);
    let mut history = LossHistory { steps: Vec::new() };
    let dim = model.config.latent_dim();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batches = data.len().div_ceil(train.batch_size.max(1));
    let total = (batches * train.epochs).max(1);
    let mut step = 0;
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch_size.max(1)) {
            let mut noisy = Vec::with_capacity(chunk.len());
            let mut conds = Vec::with_capacity(chunk.len());
            let mut ts = Vec::with_capacity(chunk.len());
            let mut target = Vec::with_capacity(chunk.len() * dim);
            for &i in chunk {
                let item = &data[i];
                let t = rng.random_range(1..=schedule.len());
                let eps = standard_normal_vec(&mut rng, dim);
                noisy.push(forward_diffuse(&item.z, t, &eps, schedule)?);
                target.extend_from_slice(&eps);
                ts.push(t);
                let drop = rng.random::<f64>() < train.null_rate;
                let mix = rng.random::<f64>();
                conds.push(if drop {
                    ConditionSet::unconditional()
                } else {
                    ConditionSet {
                        mix,
                        ..item.cond.clone()
                    }
                });
            }
            let batch: Vec<Sample> = noisy
                .iter()
                .zip(&ts)
                .zip(&conds)
                .map(|((z, &t), cond)| Sample { z, t, cond })
                .collect();
            let mut g = Graph::new();
            let loss = model
                .forward_graph(&mut g, &batch, None)
                .and_then(|out| {
                    let rows = g.value(out).rows();
                    let cols = g.value(out).cols();
                    Ok(g.mse(out, &Tensor::from_vec(rows, cols, target))?)
                })
                .map_err(|e| diverged(e, epoch, step))?;
            let value = g.value(loss).data()[0];
            history.steps.push((epoch, step, value));
            let grads = g.backward(loss).map_err(|e| diverged(e.into(), epoch, step))?;
            if train.cosine_decay {
                let frac = step as f64 / total as f64;
                adam.lr = 0.5 * train.lr * (1.0 + (std::f64::consts::PI * frac).cos());
            }
            adam.step(&mut model.params, &grads)?;
            if model.params.iter().any(|(_, p)| !p.is_finite()) {
                return Err(DiffusionError::Diverged {
                    epoch,
                    step,
                    detail: "parameters became non-finite".into(),
                });
            }
            step += 1;
        }
    }
    Ok((model, history))
}

fn diverged(e: DiffusionError, epoch: usize, step: usize) -> DiffusionError {
    match e {
        DiffusionError::Tensor(TensorError::NonFinite { op }) => DiffusionError::Diverged {
            epoch,
            step,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}
