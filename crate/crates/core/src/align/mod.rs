//! Checker-driven preference alignment of the denoiser and distillation of
//! the single-view geometry encoder.

mod distill;
pub mod toy;

use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use crate::cad::CadSequence;
use crate::compiler::{check_validity, FailureCode};
use crate::diffusion::{q_sample, Schedule};
use crate::models::{denoise_batch, ModelConfig};

pub use distill::{distill_loss, distill_loss_graph, mean_distill_loss, train_single_view, SingleViewConfig, SingleViewLog};

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("no {0} samples to pair")]
    EmptyPool(&'static str),
    #[error("reference and policy parameters differ in layout: {0}")]
    Architecture(String),
}

/// A latent the sampler produced, with its condition and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub condition: Vec<f64>,
    pub seed: u64,
}

/// Sampled latents whose decodes the checker accepted (`w`) and rejected
/// (`l`), each with the condition it was sampled under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub z_w: Vec<f64>,
    pub z_l: Vec<f64>,
    pub cond_w: Vec<f64>,
    pub cond_l: Vec<f64>,
    pub seed_w: u64,
    pub seed_l: u64,
    pub failures_l: Vec<FailureCode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningResult {
    pub pairs: Vec<PreferencePair>,
    pub valid: usize,
    pub invalid: usize,
}

/// Decodes and checks every sample, then matches shuffled valid and
/// invalid pools one to one, up to `n` pairs.
pub fn mine_preference_pairs(
    samples: &[LatentSample],
    decode: impl Fn(&[f64]) -> CadSequence,
    n: usize,
    seed: u64,
) -> Result<MiningResult, AlignError> {
    let mut valid = Vec::new();
    let mut invalid = Vec::new();
    for s in samples {
        let report = check_validity(&decode(&s.z));
        if report.valid {
            valid.push(s);
        } else {
            invalid.push((s, report.codes()));
        }
    }
    if valid.is_empty() {
        return Err(AlignError::EmptyPool("valid"));
    }
    if invalid.is_empty() {
        return Err(AlignError::EmptyPool("invalid"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    valid.shuffle(&mut rng);
    invalid.shuffle(&mut rng);
    let k = n.min(valid.len()).min(invalid.len());
    if k < n {
        warn!("only {k} of {n} preference pairs ({} valid, {} invalid samples)", valid.len(), invalid.len());
    }
    let pairs = valid
        .iter()
        .zip(&invalid)
        .take(k)
        .map(|(w, (l, codes))| PreferencePair {
            z_w: w.z.clone(),
            z_l: l.z.clone(),
            cond_w: w.condition.clone(),
            cond_l: l.condition.clone(),
            seed_w: w.seed,
            seed_l: l.seed,
            failures_l: codes.clone(),
        })
        .collect();
    Ok(MiningResult { pairs, valid: valid.len(), invalid: invalid.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        DpoConfig { beta: 20.0, steps: 200, batch_size: 16, lr: 1e-4, seed: 0 }
    }
}

/// Per-row squared error between `eps` and the noise implied by the
/// model's clean-latent prediction at `z_t`.
fn eps_error_rows(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    zt: &[Vec<f64>],
    eps: &[Vec<f64>],
    conds: &[Vec<f64>],
    t: &[usize],
    s: &Schedule,
) -> Var {
    let z = g.constant(Tensor::from_rows(zt));
    let f = g.constant(Tensor::from_rows(conds));
    let z0 = denoise_batch(g, store, cfg, z, t, f);
    // eps − ε̂ = (eps − z_t/√(1−ᾱ)) + ẑ₀·√ᾱ/√(1−ᾱ)
    let (mut offset, mut slope) = (Vec::new(), Vec::new());
    for i in 0..zt.len() {
        let ab = s.alpha_bars[t[i]];
        let b = (1.0 - ab).sqrt();
        offset.push(eps[i].iter().zip(&zt[i]).map(|(e, z)| e - z / b).collect::<Vec<f64>>());
        slope.push(ab.sqrt() / b);
    }
    let off = g.constant(Tensor::from_rows(&offset));
    let scaled = g.scale_rows(z0, &slope);
    let r = g.add(off, scaled);
    g.sum_sq_rows(r)
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

/// Noise draws for one DPO batch: a shared timestep per pair and separate
/// noise for the two latents.
#[derive(Debug, Clone)]
pub struct DpoDraw {
    pub t: Vec<usize>,
    pub eps_w: Vec<Vec<f64>>,
    pub eps_l: Vec<Vec<f64>>,
}

impl DpoDraw {
    pub fn sample(pairs: &[&PreferencePair], s: &Schedule, rng: &mut ChaCha8Rng) -> Self {
        let mut d = DpoDraw { t: Vec::new(), eps_w: Vec::new(), eps_l: Vec::new() };
        for p in pairs {
            d.t.push(rng.random_range(0..s.steps()));
            d.eps_w.push(randn(rng, p.z_w.len()));
            d.eps_l.push(randn(rng, p.z_l.len()));
        }
        d
    }
}

/// Noisy latents, noise targets, conditions and timesteps of a pair batch,
/// preferred rows first.
struct StackedPairs {
    zt: Vec<Vec<f64>>,
    eps: Vec<Vec<f64>>,
    conds: Vec<Vec<f64>>,
    t: Vec<usize>,
}

impl StackedPairs {
    fn new(pairs: &[&PreferencePair], draw: &DpoDraw, s: &Schedule) -> Self {
        let n = pairs.len();
        let mut out = StackedPairs { zt: Vec::with_capacity(2 * n), eps: Vec::with_capacity(2 * n), conds: Vec::with_capacity(2 * n), t: Vec::new() };
        let sides = [(true, &draw.eps_w), (false, &draw.eps_l)];
        for (win, noise) in sides {
            for (i, p) in pairs.iter().enumerate() {
                let (z, c) = if win { (&p.z_w, &p.cond_w) } else { (&p.z_l, &p.cond_l) };
                out.zt.push(q_sample(z, draw.t[i], &noise[i], s).expect("timestep drawn in range"));
                out.eps.push(noise[i].clone());
                out.conds.push(c.clone());
            }
        }
        out.t = draw.t.iter().chain(&draw.t).copied().collect();
        out
    }
}

/// `mean softplus((β/2)·[(e_θ^w − e_ref^w) − (e_θ^l − e_ref^l)])`, i.e. the
/// negative log-sigmoid preference objective. Gradients reach the policy
/// only.
#[allow(clippy::too_many_arguments)]
pub fn dpo_loss(
    g: &mut Graph,
    policy: &ParamStore,
    reference: &ParamStore,
    cfg: &ModelConfig,
    pairs: &[&PreferencePair],
    draw: &DpoDraw,
    s: &Schedule,
    beta: f64,
) -> Result<Var, AlignError> {
    check_same_layout(policy, reference)?;
    let n = pairs.len();
    let StackedPairs { zt, eps, conds, t } = StackedPairs::new(pairs, draw, s);

    let ref_err = {
        let mut rg = Graph::new();
        let e = eps_error_rows(&mut rg, reference, cfg, &zt, &eps, &conds, &t, s);
        rg.value(e).data.clone()
    };
    let ref_gap: Vec<f64> = (0..n).map(|i| ref_err[i] - ref_err[n + i]).collect();

    let err = eps_error_rows(g, policy, cfg, &zt, &eps, &conds, &t, s);
    let w = g.gather_rows(err, &(0..n).collect::<Vec<_>>());
    let l = g.gather_rows(err, &(n..2 * n).collect::<Vec<_>>());
    let gap = g.sub(w, l);
    let rc = g.constant(Tensor::matrix(n, 1, ref_gap));
    let inner = g.sub(gap, rc);
    let scaled = g.scale(inner, beta / 2.0);
    let sp = g.softplus(scaled);
    Ok(g.mean_all(sp))
}

/// Scalar form of the DPO objective from per-pair noise-prediction errors
/// of the policy and reference on the preferred (`w`) and rejected (`l`)
/// latents.
pub fn dpo_objective(err_w: &[f64], ref_w: &[f64], err_l: &[f64], ref_l: &[f64], beta: f64) -> f64 {
    let n = err_w.len();
    let softplus = |x: f64| if x > 30.0 { x } else { x.exp().ln_1p() };
    (0..n).map(|i| softplus(beta / 2.0 * ((err_w[i] - ref_w[i]) - (err_l[i] - ref_l[i])))).sum::<f64>() / n as f64
}

/// Per-pair squared noise-prediction errors `(w, l)` of one model under
/// `draw`.
pub fn eps_errors(store: &ParamStore, cfg: &ModelConfig, pairs: &[&PreferencePair], draw: &DpoDraw, s: &Schedule) -> (Vec<f64>, Vec<f64>) {
    let n = pairs.len();
    let StackedPairs { zt, eps, conds, t } = StackedPairs::new(pairs, draw, s);
    let mut g = Graph::new();
    let e = eps_error_rows(&mut g, store, cfg, &zt, &eps, &conds, &t, s);
    let e = g.value(e).data.clone();
    (e[..n].to_vec(), e[n..].to_vec())
}

fn check_same_layout(a: &ParamStore, b: &ParamStore) -> Result<(), AlignError> {
    let shapes = |s: &ParamStore| s.iter().filter(|(n, _)| n.starts_with("den.")).map(|(n, t)| (n.clone(), t.shape.clone())).collect::<Vec<_>>();
    let (sa, sb) = (shapes(a), shapes(b));
    if sa != sb {
        let diff = sa.iter().zip(&sb).find(|(x, y)| x != y).map_or_else(|| format!("{} vs {} tensors", sa.len(), sb.len()), |(x, _)| x.0.clone());
        return Err(AlignError::Architecture(diff));
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DpoLog {
    pub losses: Vec<f64>,
    pub seconds: f64,
}

/// Adam on the DPO objective, updating only denoiser parameters of
/// `policy`; `reference` is read-only.
pub fn finetune_dpo(
    policy: &mut ParamStore,
    reference: &ParamStore,
    cfg: &ModelConfig,
    pairs: &[PreferencePair],
    s: &Schedule,
    dc: &DpoConfig,
) -> Result<DpoLog, AlignError> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(dc.seed);
    let mut opt = Adam::new(AdamConfig { lr: dc.lr, ..AdamConfig::default() });
    let mut log = DpoLog::default();
    if pairs.is_empty() {
        return Ok(log);
    }
    for step in 0..dc.steps {
        let batch: Vec<&PreferencePair> = (0..dc.batch_size.min(pairs.len())).map(|_| &pairs[rng.random_range(0..pairs.len())]).collect();
        let draw = DpoDraw::sample(&batch, s, &mut rng);
        let mut g = Graph::new();
        let loss = dpo_loss(&mut g, policy, reference, cfg, &batch, &draw, s, dc.beta)?;
        log.losses.push(g.value(loss).item());
        g.backward(loss);
        let grads: Vec<(String, Vec<f64>)> = g.param_grads().into_iter().filter(|(n, _)| n.starts_with("den.")).collect();
        opt.step(policy, &grads);
        if (step + 1) % 50 == 0 {
            info!("dpo step {} loss {:.4}", step + 1, log.losses[step]);
        }
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::param_grad_check;
    use crate::cad::{parse_sequence, unit_square_json, Command, CommandType};
    use crate::diffusion::ScheduleConfig;
    use crate::models::init_denoiser;

    fn valid_seq() -> CadSequence {
        parse_sequence(unit_square_json()).unwrap()
    }

    fn zero_area_seq() -> CadSequence {
        let l = |x, y| Command::new(CommandType::Line, &[x, y]).unwrap();
        let e = Command::new(CommandType::Extrude, &[0, 128, 128, 128, 128, 128, 128, 191, 128, 0, 0]).unwrap();
        CadSequence::new(vec![Command::sol(), l(255, 0), l(0, 0), e]).unwrap()
    }

    fn samples(n: usize, d: usize, seed: u64) -> Vec<LatentSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|i| LatentSample { z: randn(&mut rng, d), condition: randn(&mut rng, 8), seed: i as u64 }).collect()
    }

    #[test]
    fn mining_requires_both_pools() {
        let s = samples(10, 4, 0);
        assert_eq!(mine_preference_pairs(&s, |_| valid_seq(), 5, 0), Err(AlignError::EmptyPool("invalid")));
        assert_eq!(mine_preference_pairs(&s, |_| zero_area_seq(), 5, 0), Err(AlignError::EmptyPool("valid")));
    }

    #[test]
    fn mined_pairs_revalidate_and_are_deterministic() {
        let s = samples(40, 4, 1);
        let dec = |z: &[f64]| if z[0] >= 0.0 { valid_seq() } else { zero_area_seq() };
        let r = mine_preference_pairs(&s, dec, 100, 3).unwrap();
        assert_eq!(r.pairs.len(), r.valid.min(r.invalid));
        for p in &r.pairs {
            assert!(check_validity(&dec(&p.z_w)).valid);
            assert!(!check_validity(&dec(&p.z_l)).valid);
            assert_eq!(p.failures_l, vec![FailureCode::ZeroArea]);
        }
        assert_eq!(r, mine_preference_pairs(&s, dec, 100, 3).unwrap());
    }

    fn setup() -> (ModelConfig, ParamStore, Schedule, Vec<PreferencePair>) {
        let cfg = ModelConfig::toy();
        let mut store = ParamStore::new();
        init_denoiser(&mut store, &cfg, 4);
        let s = ScheduleConfig::desk().build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs = (0..6)
            .map(|i| PreferencePair {
                z_w: randn(&mut rng, cfg.d_e),
                z_l: randn(&mut rng, cfg.d_e),
                cond_w: randn(&mut rng, cfg.d_model),
                cond_l: randn(&mut rng, cfg.d_model),
                seed_w: i,
                seed_l: i + 100,
                failures_l: vec![],
            })
            .collect();
        (cfg, store, s, pairs)
    }

    #[test]
    fn identical_models_give_ln2() {
        let (cfg, store, s, pairs) = setup();
        let refs: Vec<&PreferencePair> = pairs.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let draw = DpoDraw::sample(&refs, &s, &mut rng);
            let mut g = Graph::new();
            let l = dpo_loss(&mut g, &store, &store.clone(), &cfg, &refs, &draw, &s, 20.0).unwrap();
            assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_loss_matches_scalar_objective() {
        let (cfg, store, s, pairs) = setup();
        let mut policy = store.clone();
        policy.get_mut("den.out.w").unwrap().data.iter_mut().for_each(|x| *x *= 0.8);
        let refs: Vec<&PreferencePair> = pairs.iter().collect();
        let draw = DpoDraw::sample(&refs, &s, &mut ChaCha8Rng::seed_from_u64(3));
        let mut g = Graph::new();
        let l = dpo_loss(&mut g, &policy, &store, &cfg, &refs, &draw, &s, 5.0).unwrap();
        let (pw, pl) = eps_errors(&policy, &cfg, &refs, &draw, &s);
        let (rw, rl) = eps_errors(&store, &cfg, &refs, &draw, &s);
        assert!((g.value(l).item() - dpo_objective(&pw, &rw, &pl, &rl, 5.0)).abs() < 1e-12);
    }

    #[test]
    fn dpo_gradient_check() {
        let (cfg, store, s, pairs) = setup();
        let mut policy = store.clone();
        policy.get_mut("den.out.w").unwrap().data.iter_mut().for_each(|x| *x *= 1.3);
        let refs: Vec<&PreferencePair> = pairs.iter().take(3).collect();
        let draw = DpoDraw::sample(&refs, &s, &mut ChaCha8Rng::seed_from_u64(2));
        let names = ["den.out.w", "den.z_in.w", "den.0.attn.q.w", "den.0.ff1.w", "den.f_in.b"];
        let r = param_grad_check(&policy, &names, 6, 1e-5, |g, p| dpo_loss(g, p, &store, &cfg, &refs, &draw, &s, 2.0).unwrap());
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn zero_steps_leave_policy_unchanged() {
        let (cfg, store, s, pairs) = setup();
        let mut policy = store.clone();
        finetune_dpo(&mut policy, &store, &cfg, &pairs, &s, &DpoConfig { steps: 0, ..Default::default() }).unwrap();
        assert_eq!(policy.checksum(), store.checksum());
        let log = finetune_dpo(&mut policy, &store, &cfg, &pairs, &s, &DpoConfig { steps: 3, ..Default::default() }).unwrap();
        assert!((log.losses[0] - 2f64.ln()).abs() < 1e-6);
        assert_ne!(policy.checksum(), store.checksum());
    }

    #[test]
    fn mismatched_architectures_rejected() {
        let (cfg, store, s, pairs) = setup();
        let mut other = ParamStore::new();
        init_denoiser(&mut other, &ModelConfig { den_blocks: 2, ..cfg.clone() }, 4);
        let refs: Vec<&PreferencePair> = pairs.iter().collect();
        let draw = DpoDraw::sample(&refs, &s, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        assert!(matches!(dpo_loss(&mut g, &store, &other, &cfg, &refs, &draw, &s, 20.0), Err(AlignError::Architecture(_))));
    }
}
