//! A two-cluster latent task where the checker verdict depends only on the
//! sign of the first latent coordinate, for exercising preference tuning
//! end to end at small scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{finetune_dpo, mine_preference_pairs, AlignError, DpoConfig, DpoLog, LatentSample};
use crate::autodiff::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use crate::cad::{parse_sequence, unit_square_json, CadSequence, Command, CommandType};
use crate::diffusion::{ddpm_sample_batch, diffusion_loss, Conditioned, Schedule, ScheduleConfig};
use crate::models::{init_denoiser, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoClusterConfig {
    /// Mean of the valid cluster's first coordinate; the invalid cluster
    /// sits at the negation.
    pub center: f64,
    pub spread: f64,
    /// Fraction of training latents drawn from the valid cluster.
    pub valid_share: f64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub mining_samples: usize,
    pub eval_samples: usize,
    pub dpo: DpoConfig,
    pub seed: u64,
}

impl Default for TwoClusterConfig {
    fn default() -> Self {
        TwoClusterConfig {
            center: 1.5,
            spread: 0.3,
            valid_share: 0.5,
            pretrain_steps: 400,
            pretrain_lr: 3e-3,
            mining_samples: 256,
            eval_samples: 500,
            dpo: DpoConfig { beta: 20.0, steps: 40, batch_size: 64, lr: 5e-4, seed: 0 },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoClusterOutcome {
    pub pre_valid_fraction: f64,
    pub post_valid_fraction: f64,
    pub pairs: usize,
    pub log: DpoLog,
}

pub fn model_config() -> ModelConfig {
    ModelConfig { d_e: 2, d_model: 16, heads: 2, den_blocks: 2, ..ModelConfig::toy() }
}

fn condition(cfg: &ModelConfig) -> Vec<f64> {
    (0..cfg.d_model).map(|i| if i % 2 == 0 { 0.5 } else { -0.5 }).collect()
}

/// Valid decode for the positive half-plane, zero-area loop otherwise.
pub fn decode_by_sign(z: &[f64]) -> CadSequence {
    if z[0] >= 0.0 {
        parse_sequence(unit_square_json()).expect("bundled fixture")
    } else {
        let l = |x, y| Command::new(CommandType::Line, &[x, y]).expect("in range");
        let e = Command::new(CommandType::Extrude, &[0, 128, 128, 128, 128, 128, 128, 191, 128, 0, 0]).expect("in range");
        CadSequence::new(vec![Command::sol(), l(255, 0), l(0, 0), e]).expect("grammatical")
    }
}

pub struct TwoClusterTask {
    pub cfg: ModelConfig,
    pub schedule: Schedule,
    pub tc: TwoClusterConfig,
}

impl TwoClusterTask {
    pub fn new(tc: TwoClusterConfig) -> Self {
        TwoClusterTask { cfg: model_config(), schedule: ScheduleConfig::desk().build().expect("desk schedule"), tc }
    }

    fn draw_latent(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let sign = if rng.random_bool(self.tc.valid_share) { 1.0 } else { -1.0 };
        let n: [f64; 2] = [StandardNormal.sample(&mut *rng), StandardNormal.sample(&mut *rng)];
        vec![sign * self.tc.center + self.tc.spread * n[0], self.tc.spread * n[1]]
    }

    /// Fits the denoiser to the two-cluster mixture under a fixed condition.
    pub fn pretrain(&self) -> ParamStore {
        let mut store = ParamStore::new();
        init_denoiser(&mut store, &self.cfg, self.tc.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(self.tc.seed ^ 0xa5a5);
        let mut opt = Adam::new(AdamConfig { lr: self.tc.pretrain_lr, ..AdamConfig::default() });
        let f = condition(&self.cfg);
        let b = 64;
        for _ in 0..self.tc.pretrain_steps {
            let z0: Vec<Vec<f64>> = (0..b).map(|_| self.draw_latent(&mut rng)).collect();
            let t: Vec<usize> = (0..b).map(|_| rng.random_range(0..self.schedule.steps())).collect();
            let eps: Vec<Vec<f64>> = (0..b).map(|_| (0..2).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
            let mut g = Graph::new();
            let fv = g.constant(Tensor::from_rows(&vec![f.clone(); b]));
            let loss = diffusion_loss(&mut g, &store, &self.cfg, &z0, fv, &t, &eps, &self.schedule).expect("timesteps in range");
            g.backward(loss);
            opt.step(&mut store, &g.param_grads());
        }
        store
    }

    pub fn sample(&self, store: &ParamStore, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let den = Conditioned { store, cfg: &self.cfg, conditions: vec![condition(&self.cfg); n] };
        ddpm_sample_batch(&den, &self.schedule, self.cfg.d_e, n, seed)
    }

    pub fn valid_fraction(&self, store: &ParamStore, n: usize, seed: u64) -> f64 {
        self.sample(store, n, seed).iter().filter(|z| z[0] >= 0.0).count() as f64 / n as f64
    }

    /// Pretrain, mine pairs with the sign decoder, fine-tune, and compare
    /// valid fractions on the same evaluation seed.
    pub fn run(&self) -> Result<TwoClusterOutcome, AlignError> {
        let base = self.pretrain();
        let eval_seed = self.tc.seed.wrapping_add(1000);
        let pre = self.valid_fraction(&base, self.tc.eval_samples, eval_seed);
        let f = condition(&self.cfg);
        let samples: Vec<LatentSample> = self
            .sample(&base, self.tc.mining_samples, self.tc.seed.wrapping_add(2000))
            .into_iter()
            .enumerate()
            .map(|(i, z)| LatentSample { z, condition: f.clone(), seed: i as u64 })
            .collect();
        let mined = mine_preference_pairs(&samples, decode_by_sign, self.tc.mining_samples, self.tc.seed)?;
        let mut policy = base.clone();
        let log = finetune_dpo(&mut policy, &base, &self.cfg, &mined.pairs, &self.schedule, &self.tc.dpo)?;
        let post = self.valid_fraction(&policy, self.tc.eval_samples, eval_seed);
        Ok(TwoClusterOutcome { pre_valid_fraction: pre, post_valid_fraction: post, pairs: mined.pairs.len(), log })
    }
}

/// Means of consecutive non-overlapping windows.
pub fn window_means(xs: &[f64], w: usize) -> Vec<f64> {
    xs.chunks(w).filter(|c| c.len() == w).map(|c| c.iter().sum::<f64>() / w as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::check_validity;

    #[test]
    fn sign_decoder_matches_checker() {
        assert!(check_validity(&decode_by_sign(&[0.3, -1.0])).valid);
        assert!(!check_validity(&decode_by_sign(&[-0.3, 1.0])).valid);
    }

    #[test]
    fn windows_drop_partial_tail() {
        assert_eq!(window_means(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), vec![2.0, 6.0]);
    }

    #[test]
    fn tuning_raises_valid_fraction() {
        let tc = TwoClusterConfig { pretrain_steps: 300, mining_samples: 128, eval_samples: 200, seed: 3, ..Default::default() };
        let out = TwoClusterTask::new(tc).run().unwrap();
        assert!(out.pairs > 20);
        assert!(out.post_valid_fraction > out.pre_valid_fraction + 0.1, "{out:?}");
    }
}
