use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Linear-β noise schedule with cumulative products; `alpha_bar(0) == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// `betas[t - 1]` is β_t.
    pub betas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T`.
    pub alpha_bars: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl Default for Schedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

pub fn make_schedule(t: usize, beta_start: f64, beta_end: f64) -> Result<Schedule, DiffusionError> {
    if t < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(DiffusionError::BadSchedule {
            steps: t,
            beta_start,
            beta_end,
        });
    }
    let betas: Vec<f64> = (0..t)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
        .collect();
    let mut alpha_bars = Vec::with_capacity(t + 1);
    alpha_bars.push(1.0);
    for b in &betas {
        let prev = *alpha_bars.last().unwrap();
        alpha_bars.push(prev * (1.0 - b));
    }
    Ok(Schedule { betas, alpha_bars })
}

impl Schedule {
    /// Number of training timesteps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }
}

/// `z_t = sqrt(ᾱ_t) z_0 + sqrt(1 - ᾱ_t) ε`.
pub fn forward_diffuse(
    z0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &Schedule,
) -> Result<Vec<f64>, DiffusionError> {
    if t > schedule.len() {
        return Err(DiffusionError::TimestepOutOfRange {
            t,
            max: schedule.len(),
        });
    }
    if z0.len() != eps.len() {
        return Err(DiffusionError::LatentShape {
            got: eps.len(),
            expected: z0.len(),
        });
    }
    if t == 0 {
        return Ok(z0.to_vec());
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::standard_normal_vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::default();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.alpha_bar(1), 1.0 - 1e-4);
        let mut prod = 1.0;
        for t in 1..=100 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 99.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(100) - prod).abs() < 1e-12);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(make_schedule(10, 0.02, 1e-4).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
    }

    #[test]
    fn diffuse_plug_in_values() {
        let s = Schedule {
            betas: vec![0.75],
            alpha_bars: vec![1.0, 0.25],
        };
        let z = forward_diffuse(&[1.0], 1, &[1.0], &s).unwrap();
        assert!((z[0] - (0.5 + 0.75f64.sqrt())).abs() < 1e-15);
        assert_eq!(forward_diffuse(&[0.3], 0, &[9.0], &s).unwrap(), vec![0.3]);
        assert!(forward_diffuse(&[0.3], 2, &[9.0], &s).is_err());
    }

    #[test]
    fn variance_is_preserved() {
        let s = Schedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let z0 = standard_normal_vec(&mut rng, n);
        let eps = standard_normal_vec(&mut rng, n);
        for t in [1, 10, 50, 100] {
            let z = forward_diffuse(&z0, t, &eps, &s).unwrap();
            let m = z.iter().sum::<f64>() / n as f64;
            let v = z.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
            assert!((v - 1.0).abs() < 0.02, "t={t} var={v}");
        }
    }
}
