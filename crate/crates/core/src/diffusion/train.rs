use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{diffusion_loss, DiffusionError, Schedule};
use crate::autodiff::{Adam, AdamConfig, Graph, ParamStore, Var};
use crate::models::{geometry_encode_batch, ModelConfig};
use crate::render::ViewFeature;

/// A normalized latent with its conditioning token sets, one per camera
/// rig (each of 8 tokens).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionItem {
    pub z0: Vec<f64>,
    pub rigs: Vec<Vec<ViewFeature>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig { steps: 2000, batch_size: 16, lr: 1e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTrainLog {
    pub losses: Vec<f64>,
    pub seconds: f64,
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

/// One minibatch of the z₀-prediction loss with a random rig, timestep and
/// noise per item, conditioned through the geometry encoder.
pub fn diffusion_step_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    batch: &[&DiffusionItem],
    s: &Schedule,
    rng: &mut ChaCha8Rng,
) -> Result<Var, DiffusionError> {
    let tokens: Vec<&[ViewFeature]> = batch.iter().map(|it| it.rigs[rng.random_range(0..it.rigs.len())].as_slice()).collect();
    let f = geometry_encode_batch(g, store, cfg, &tokens).expect("rig token sets are well formed");
    let t: Vec<usize> = batch.iter().map(|_| rng.random_range(0..s.steps())).collect();
    let eps: Vec<Vec<f64>> = batch.iter().map(|it| randn(rng, it.z0.len())).collect();
    let z0: Vec<Vec<f64>> = batch.iter().map(|it| it.z0.clone()).collect();
    diffusion_loss(g, store, cfg, &z0, f, &t, &eps, s)
}

/// Joint training of the geometry encoder and denoiser.
pub fn train_diffusion(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    items: &[DiffusionItem],
    s: &Schedule,
    tc: &DiffusionTrainConfig,
) -> Result<DiffusionTrainLog, DiffusionError> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut opt = Adam::new(AdamConfig { lr: tc.lr, ..AdamConfig::default() });
    let mut log = DiffusionTrainLog::default();
    for step in 0..tc.steps {
        let batch: Vec<&DiffusionItem> = (0..tc.batch_size.min(items.len())).map(|_| &items[rng.random_range(0..items.len())]).collect();
        let mut g = Graph::new();
        let loss = diffusion_step_loss(&mut g, store, cfg, &batch, s, &mut rng)?;
        log.losses.push(g.value(loss).item());
        g.backward(loss);
        opt.step(store, &g.param_grads());
        if (step + 1) % 200 == 0 {
            let recent = &log.losses[log.losses.len().saturating_sub(200)..];
            info!("diffusion step {} loss {:.4}", step + 1, recent.iter().sum::<f64>() / recent.len() as f64);
        }
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok(log)
}
