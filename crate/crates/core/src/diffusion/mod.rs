//! Noise schedule, forward noising, z₀-prediction loss, and the ancestral
//! sampler.
//!
//! Timesteps are indexed `0..T`; index `t` uses `β_{t+1}` of the usual
//! one-based notation, so `ᾱ_0 = 1 − β_start`.

mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::models::{denoise_batch, ModelConfig};

pub use train::{diffusion_step_loss, train_diffusion, DiffusionItem, DiffusionTrainConfig, DiffusionTrainLog};

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("schedule needs 0 < beta_start <= beta_end < 1 and T >= 1, got T={t}, [{start}, {end}]")]
    BadSchedule { t: usize, start: f64, end: f64 },
    #[error("timestep {t} outside 0..{steps}")]
    Timestep { t: usize, steps: usize },
    #[error("alpha_bar is exactly 1 at t={0}; noise cannot be recovered")]
    NoNoise(usize),
    #[error("vector lengths differ ({0} vs {1})")]
    Length(usize, usize),
    #[error("embedding width {0} must be even")]
    OddWidth(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl Schedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.betas[t].sqrt()
    }

    fn check(&self, t: usize) -> Result<(), DiffusionError> {
        if t < self.steps() {
            Ok(())
        } else {
            Err(DiffusionError::Timestep { t, steps: self.steps() })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    /// Short schedule for desk-scale runs; ᾱ at the last step is ~1e-4.
    pub fn desk() -> Self {
        ScheduleConfig { steps: 50, beta_start: 0.002, beta_end: 0.4 }
    }

    pub fn build(&self) -> Result<Schedule, DiffusionError> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Linear `β` from `beta_start` to `beta_end` over `steps`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<Schedule, DiffusionError> {
    if steps == 0 || !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::BadSchedule { t: steps, start: beta_start, end: beta_end });
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| match steps {
            1 => beta_start,
            _ => beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64,
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(Schedule { betas, alphas, alpha_bars })
}

/// `√ᾱ_t·z₀ + √(1−ᾱ_t)·ε`.
pub fn q_sample(z0: &[f64], t: usize, eps: &[f64], s: &Schedule) -> Result<Vec<f64>, DiffusionError> {
    s.check(t)?;
    if z0.len() != eps.len() {
        return Err(DiffusionError::Length(z0.len(), eps.len()));
    }
    let (a, b) = (s.alpha_bars[t].sqrt(), (1.0 - s.alpha_bars[t]).sqrt());
    Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
}

/// Inverts [`q_sample`] for the noise given a clean-latent estimate.
pub fn eps_from_z0(z_t: &[f64], z0_hat: &[f64], t: usize, s: &Schedule) -> Result<Vec<f64>, DiffusionError> {
    s.check(t)?;
    if z_t.len() != z0_hat.len() {
        return Err(DiffusionError::Length(z_t.len(), z0_hat.len()));
    }
    let ab = s.alpha_bars[t];
    if ab >= 1.0 {
        return Err(DiffusionError::NoNoise(t));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z_t.iter().zip(z0_hat).map(|(z, h)| (z - a * h) / b).collect())
}

/// Sinusoidal embedding: `sin(t·ω_j)` then `cos(t·ω_j)`,
/// `ω_j = 10000^(−j/(dim/2))`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>, DiffusionError> {
    if dim % 2 != 0 {
        return Err(DiffusionError::OddWidth(dim));
    }
    let half = dim / 2;
    let freqs = (0..half).map(|j| 10000f64.powf(-(j as f64) / half as f64));
    let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|w| ((t as f64 * w).sin(), (t as f64 * w).cos())).unzip();
    Ok([sin, cos].concat())
}

/// Mean of `‖Ω(z_t, t | f) − z₀‖²` over the batch; gradients reach the
/// denoiser and whatever produced `f`.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    z0: &[Vec<f64>],
    f: Var,
    t: &[usize],
    eps: &[Vec<f64>],
    s: &Schedule,
) -> Result<Var, DiffusionError> {
    let zt = z0.iter().zip(eps).zip(t).map(|((z, e), &t)| q_sample(z, t, e, s)).collect::<Result<Vec<_>, _>>()?;
    let zt = g.constant(Tensor::from_rows(&zt));
    let target = g.constant(Tensor::from_rows(z0));
    let pred = denoise_batch(g, store, cfg, zt, t, f);
    Ok(g.mse_rows(pred, target))
}

/// Anything that predicts clean latents for a batch of noisy ones at a
/// shared timestep.
pub trait Denoiser {
    fn predict_z0(&self, z_t: &[Vec<f64>], t: usize) -> Vec<Vec<f64>>;
}

/// Network denoiser with one condition row per sample.
pub struct Conditioned<'a> {
    pub store: &'a ParamStore,
    pub cfg: &'a ModelConfig,
    pub conditions: Vec<Vec<f64>>,
}

impl Denoiser for Conditioned<'_> {
    fn predict_z0(&self, z_t: &[Vec<f64>], t: usize) -> Vec<Vec<f64>> {
        assert_eq!(z_t.len(), self.conditions.len(), "one condition per sample");
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_rows(z_t));
        let f = g.constant(Tensor::from_rows(&self.conditions));
        let out = denoise_batch(&mut g, self.store, self.cfg, z, &vec![t; z_t.len()], f);
        let v = g.value(out);
        (0..v.rows()).map(|r| v.row_slice(r).to_vec()).collect()
    }
}

/// Returns a fixed latent regardless of input.
pub struct ConstantDenoiser(pub Vec<f64>);

impl Denoiser for ConstantDenoiser {
    fn predict_z0(&self, z_t: &[Vec<f64>], _t: usize) -> Vec<Vec<f64>> {
        vec![self.0.clone(); z_t.len()]
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

/// Ancestral sampling of `n` latents. Sample `i` draws from its own stream
/// of `seed`, so results do not depend on how samples are batched.
pub fn ddpm_sample_batch(den: &impl Denoiser, s: &Schedule, dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(i as u64 + 1);
            r
        })
        .collect();
    let mut z: Vec<Vec<f64>> = rngs.iter_mut().map(|r| gaussian(r, dim)).collect();
    for t in (0..s.steps()).rev() {
        let z0 = den.predict_z0(&z, t);
        let coef = s.betas[t] / (1.0 - s.alpha_bars[t]).sqrt();
        let inv = 1.0 / s.alphas[t].sqrt();
        for i in 0..n {
            let eps = eps_from_z0(&z[i], &z0[i], t, s).expect("alpha_bar < 1 for a valid schedule");
            let noise = if t > 0 { gaussian(&mut rngs[i], dim) } else { vec![0.0; dim] };
            for j in 0..dim {
                z[i][j] = inv * (z[i][j] - coef * eps[j]) + s.sigma(t) * noise[j];
            }
        }
    }
    z
}

pub fn ddpm_sample(den: &impl Denoiser, s: &Schedule, dim: usize, seed: u64) -> Vec<f64> {
    ddpm_sample_batch(den, s, dim, 1, seed).remove(0)
}

/// Per-dimension standardization of latents before diffusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentNorm {
    pub fn fit(latents: &[Vec<f64>]) -> Self {
        let d = latents[0].len();
        let n = latents.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| latents.iter().map(|z| z[j]).sum::<f64>() / n).collect();
        let std = (0..d)
            .map(|j| {
                let v = latents.iter().map(|z| (z[j] - mean[j]).powi(2)).sum::<f64>() / n;
                v.sqrt().max(1e-6)
            })
            .collect();
        LatentNorm { mean, std }
    }

    pub fn identity(d: usize) -> Self {
        LatentNorm { mean: vec![0.0; d], std: vec![1.0; d] }
    }

    pub fn normalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.std[j]).collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().enumerate().map(|(j, v)| v * self.std[j] + self.mean[j]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(n: usize, seed: u64) -> Vec<f64> {
        gaussian(&mut ChaCha8Rng::seed_from_u64(seed), n)
    }

    #[test]
    fn schedule_shapes() {
        let s = make_schedule(1, 0.01, 0.02).unwrap();
        assert_eq!(s.alpha_bars, vec![0.99]);
        let s = ScheduleConfig::default().build().unwrap();
        assert!(s.alpha_bars[999] < 5e-5);
        assert!(s.alpha_bars.windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas.windows(2).all(|w| w[1] > w[0]));
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(0, 0.1, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn q_sample_limits() {
        let s = make_schedule(10, 1e-9, 1e-8).unwrap();
        let z0 = randn(16, 1);
        let zt = q_sample(&z0, 0, &vec![0.0; 16], &s).unwrap();
        assert!(zt.iter().zip(&z0).all(|(a, b)| (a - b).abs() < 1e-8));
        let s = ScheduleConfig::default().build().unwrap();
        let e = randn(16, 2);
        let zt = q_sample(&vec![0.0; 16], 500, &e, &s).unwrap();
        let c = (1.0 - s.alpha_bars[500]).sqrt();
        assert!(zt.iter().zip(&e).all(|(a, b)| (a - c * b).abs() < 1e-15));
        assert_eq!(q_sample(&z0, 1000, &e, &s), Err(DiffusionError::Timestep { t: 1000, steps: 1000 }));
    }

    #[test]
    fn eps_inversion_is_exact() {
        let s = ScheduleConfig::default().build().unwrap();
        for t in [0, 1, 10, 500, 999] {
            let (z0, e) = (randn(32, t as u64), randn(32, 100 + t as u64));
            let zt = q_sample(&z0, t, &e, &s).unwrap();
            let back = eps_from_z0(&zt, &z0, t, &s).unwrap();
            let err = back.iter().zip(&e).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "t={t} err={err}");
        }
    }

    #[test]
    fn eps_slope_in_z0() {
        let s = ScheduleConfig::default().build().unwrap();
        let t = 300;
        let zt = randn(4, 5);
        let h = randn(4, 6);
        let mut hp = h.clone();
        hp[2] += 1e-3;
        let (a, b) = (eps_from_z0(&zt, &h, t, &s).unwrap(), eps_from_z0(&zt, &hp, t, &s).unwrap());
        let slope = (b[2] - a[2]) / 1e-3;
        let ab = s.alpha_bars[t];
        assert!((slope + ab.sqrt() / (1.0 - ab).sqrt()).abs() < 1e-8);
    }

    #[test]
    fn timestep_embedding_properties() {
        let embs: Vec<Vec<f64>> = (0..1000).map(|t| timestep_embedding(t, 64).unwrap()).collect();
        assert!(embs.iter().flatten().all(|x| (-1.0..=1.0).contains(x)));
        for i in 0..1000 {
            for j in i + 1..1000 {
                assert_ne!(embs[i], embs[j]);
            }
        }
        assert_eq!(timestep_embedding(3, 7), Err(DiffusionError::OddWidth(7)));
    }

    #[test]
    fn oracle_sampler_collapses() {
        let s = ScheduleConfig::default().build().unwrap();
        let target = randn(16, 9);
        let out = ddpm_sample(&ConstantDenoiser(target.clone()), &s, 16, 4);
        let err = out.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        assert_eq!(out, ddpm_sample(&ConstantDenoiser(target), &s, 16, 4));
    }

    #[test]
    fn batched_sampling_matches_single() {
        let s = ScheduleConfig::desk().build().unwrap();
        struct Shrink;
        impl Denoiser for Shrink {
            fn predict_z0(&self, z: &[Vec<f64>], _t: usize) -> Vec<Vec<f64>> {
                z.iter().map(|r| r.iter().map(|x| 0.5 * x).collect()).collect()
            }
        }
        let batch = ddpm_sample_batch(&Shrink, &s, 6, 3, 11);
        assert_eq!(batch[0], ddpm_sample(&Shrink, &s, 6, 11));
        assert_ne!(batch[0], batch[1]);
        assert!(batch.iter().flatten().all(|x| x.is_finite()));
    }

    #[test]
    fn latent_norm_roundtrip() {
        let zs: Vec<Vec<f64>> = (0..50).map(|i| randn(5, i).iter().map(|x| 3.0 * x + 2.0).collect()).collect();
        let n = LatentNorm::fit(&zs);
        let back = n.denormalize(&n.normalize(&zs[3]));
        assert!(back.iter().zip(&zs[3]).all(|(a, b)| (a - b).abs() < 1e-12));
        let normed: Vec<Vec<f64>> = zs.iter().map(|z| n.normalize(z)).collect();
        let m = LatentNorm::fit(&normed);
        assert!(m.mean.iter().all(|x| x.abs() < 1e-12) && m.std.iter().all(|x| (x - 1.0).abs() < 1e-9));
    }
}
