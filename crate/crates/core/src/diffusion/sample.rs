use rand::Rng;
use serde::{Deserialize, Serialize};

use super::denoiser::Denoiser;
use super::schedule::{forward_diffuse, Schedule};
use super::DiffusionError;
use crate::tensor::standard_normal_vec;
use crate::world::embed::ConditionSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub strength: f64,
    pub mix: f64,
    pub seed: u64,
    pub pipeline: Pipeline,
}

impl SamplerConfig {
    pub fn image(seed: u64) -> Self {
        Self {
            steps: 50,
            strength: 0.75,
            mix: 0.6,
            seed,
            pipeline: Pipeline::Image,
        }
    }

    pub fn text(seed: u64) -> Self {
        Self {
            mix: 0.9,
            pipeline: Pipeline::Text,
            ..Self::image(seed)
        }
    }

    pub fn validate(&self) -> Result<(), DiffusionError> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(DiffusionError::OutOfRange("strength", self.strength));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(DiffusionError::OutOfRange("mix", self.mix));
        }
        if self.strength > 0.0 && self.steps == 0 {
            return Err(DiffusionError::OutOfRange("steps", 0.0));
        }
        Ok(())
    }
}

/// Evenly spaced timesteps `round(i * T / steps)` for `i = 0..=steps`.
pub fn timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    (0..=steps)
        .map(|i| ((i * t_max) as f64 / steps as f64).round() as usize)
        .collect()
}

/// Deterministic partial-noising sampler.
///
/// Starts at subsequence index `round(strength * steps)`: `z_in` is diffused
/// to that timestep with one draw from `rng` (or, without `z_in` at strength
/// 1, replaced by pure noise), then walked down to `t = 0` with the
/// deterministic update.
pub fn ddim_sample<R: Rng + ?Sized>(
    model: &Denoiser,
    schedule: &Schedule,
    z_in: Option<&[f64]>,
    config: &SamplerConfig,
    cond: &ConditionSet,
    rng: &mut R,
) -> Result<Vec<f64>, DiffusionError> {
    config.validate()?;
    let dim = model.config.latent_dim();
    if let Some(z) = z_in {
        if z.len() != dim {
            return Err(DiffusionError::LatentShape {
                got: z.len(),
                expected: dim,
            });
        }
    }
    let start = (config.strength * config.steps as f64).round() as usize;
    if start == 0 {
        return z_in.map(<[f64]>::to_vec).ok_or(DiffusionError::MissingInput);
    }
    let taus = timesteps(schedule.len(), config.steps);
    let mut z = match z_in {
        Some(z0) => {
            let eps = standard_normal_vec(rng, dim);
            forward_diffuse(z0, taus[start], &eps, schedule)?
        }
        None if start == config.steps => standard_normal_vec(rng, dim),
        None => return Err(DiffusionError::MissingInput),
    };
    let cond = ConditionSet {
        mix: config.mix,
        ..cond.clone()
    };
    for i in (1..=start).rev() {
        let (tau, prev) = (taus[i], taus[i - 1]);
        if tau == prev {
            continue;
        }
        let eps = model.predict(&z, tau, &cond)?;
        z = ddim_step(&z, &eps, schedule.alpha_bar(tau), schedule.alpha_bar(prev));
    }
    Ok(z)
}

/// `z_prev = sqrt(ᾱ_prev) ẑ_0 + sqrt(1 - ᾱ_prev) ε̂`.
pub fn ddim_step(z: &[f64], eps: &[f64], ab: f64, ab_prev: f64) -> Vec<f64> {
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    z.iter()
        .zip(eps)
        .map(|(x, e)| pa * (x - sb * e) / sa + pb * e)
        .collect()
}
