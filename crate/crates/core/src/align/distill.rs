use std::time::Instant;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};
use crate::diffusion::{diffusion_loss, DiffusionError, DiffusionItem, Schedule};
use crate::models::{geometry_encode, geometry_encode_batch, ModelConfig};
use crate::render::ViewFeature;

/// `1 − cos(f_s, f_m)`; zero vectors count as orthogonal.
pub fn distill_loss(f_s: &[f64], f_m: &[f64]) -> f64 {
    assert_eq!(f_s.len(), f_m.len(), "feature widths differ");
    let dot: f64 = f_s.iter().zip(f_m).map(|(a, b)| a * b).sum();
    let na = f_s.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = f_m.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

/// Batch mean of `1 − cos` between rows of `f_s` and the constant teacher
/// rows.
pub fn distill_loss_graph(g: &mut Graph, f_s: Var, f_m: &[Vec<f64>]) -> Var {
    let t = g.constant(Tensor::from_rows(f_m));
    let cos = g.cosine_rows(f_s, t);
    let m = g.mean_all(cos);
    let neg = g.scale(m, -1.0);
    let one = g.constant(Tensor::scalar(1.0));
    g.add(one, neg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SingleViewConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Also update the denoiser (off: only the student encoder moves).
    pub train_denoiser: bool,
}

impl Default for SingleViewConfig {
    fn default() -> Self {
        SingleViewConfig { steps: 1000, batch_size: 16, lr: 1e-3, lambda: 1.0, seed: 0, train_denoiser: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SingleViewLog {
    pub losses: Vec<f64>,
    pub distill: Vec<f64>,
    pub seconds: f64,
}

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

/// Trains the student encoder in `student` (initialized from the
/// multi-view weights) on one random view per item, with the diffusion
/// loss through `student`'s denoiser plus `λ·(1 − cos)` toward the frozen
/// multi-view teacher's feature for the same rig.
pub fn train_single_view(
    student: &mut ParamStore,
    teacher: &ParamStore,
    cfg: &ModelConfig,
    items: &[DiffusionItem],
    s: &Schedule,
    sc: &SingleViewConfig,
) -> Result<SingleViewLog, DiffusionError> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut opt = Adam::new(AdamConfig { lr: sc.lr, ..AdamConfig::default() });
    let mut log = SingleViewLog::default();
    if !sc.train_denoiser {
        student.freeze_prefix("den.");
    }
    for step in 0..sc.steps {
        let batch: Vec<&DiffusionItem> = (0..sc.batch_size.min(items.len())).map(|_| &items[rng.random_range(0..items.len())]).collect();
        let mut views: Vec<&[ViewFeature]> = Vec::with_capacity(batch.len());
        let mut f_m = Vec::with_capacity(batch.len());
        for it in &batch {
            let rig = &it.rigs[rng.random_range(0..it.rigs.len())];
            let v = rng.random_range(0..rig.len() / 2);
            views.push(&rig[2 * v..2 * v + 2]);
            f_m.push(geometry_encode(teacher, cfg, rig).expect("rig token sets are well formed"));
        }
        let t: Vec<usize> = batch.iter().map(|_| rng.random_range(0..s.steps())).collect();
        let eps: Vec<Vec<f64>> = batch.iter().map(|it| randn(&mut rng, it.z0.len())).collect();
        let z0: Vec<Vec<f64>> = batch.iter().map(|it| it.z0.clone()).collect();

        let mut g = Graph::new();
        let f_s = geometry_encode_batch(&mut g, student, cfg, &views).expect("view pairs are well formed");
        let dl = diffusion_loss(&mut g, student, cfg, &z0, f_s, &t, &eps, s)?;
        let kd = distill_loss_graph(&mut g, f_s, &f_m);
        let kdw = g.scale(kd, sc.lambda);
        let loss = g.add(dl, kdw);
        log.losses.push(g.value(loss).item());
        log.distill.push(g.value(kd).item());
        g.backward(loss);
        opt.step(student, &g.param_grads());
        if (step + 1) % 200 == 0 {
            info!("single-view step {} loss {:.4} distill {:.4}", step + 1, log.losses[step], log.distill[step]);
        }
    }
    student.unfreeze_all();
    log.seconds = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Mean `1 − cos` between the student's single-view feature and the
/// teacher's rig feature, over every view of every rig of `items`.
pub fn mean_distill_loss(student: &ParamStore, teacher: &ParamStore, cfg: &ModelConfig, items: &[DiffusionItem]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for rig in items.iter().flat_map(|it| &it.rigs) {
        let f_m = geometry_encode(teacher, cfg, rig).expect("rig token sets are well formed");
        for pair in rig.chunks(2) {
            let f_s = geometry_encode(student, cfg, pair).expect("view pairs are well formed");
            total += distill_loss(&f_s, &f_m);
            n += 1;
        }
    }
    total / n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::diffusion::{train_diffusion, DiffusionTrainConfig, ScheduleConfig};
    use crate::models::init_all;
    use crate::render::Modality;

    #[test]
    fn distill_values() {
        assert!(distill_loss(&[1.0, 2.0], &[2.0, 4.0]).abs() < 1e-15);
        assert!((distill_loss(&[1.0, 0.0], &[0.0, 3.0]) - 1.0).abs() < 1e-15);
        assert!((distill_loss(&[1.0, 0.0], &[-1.0, 0.0]) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn distill_graph_matches_and_differentiates() {
        let fm = vec![vec![0.3, -1.0, 2.0], vec![1.0, 1.0, 0.5]];
        let fs = Tensor::from_rows(&[vec![1.0, 0.2, -0.4], vec![0.1, 0.9, 0.3]]);
        let mut g = Graph::new();
        let x = g.input(fs.clone());
        let l = distill_loss_graph(&mut g, x, &fm);
        let want = (distill_loss(fs.row_slice(0), &fm[0]) + distill_loss(fs.row_slice(1), &fm[1])) / 2.0;
        assert!((g.value(l).item() - want).abs() < 1e-14);
        let r = grad_check(|g, v| distill_loss_graph(g, v[0], &fm), &[fs], 1e-6);
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    fn toy_items(cfg: &ModelConfig, n: usize) -> Vec<DiffusionItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..n)
            .map(|_| {
                let base = randn(&mut rng, cfg.d_feat);
                let rig = (0..8)
                    .map(|i| ViewFeature {
                        h: base.iter().zip(randn(&mut rng, cfg.d_feat)).map(|(b, n)| b + 0.5 * n).collect(),
                        modality: if i % 2 == 0 { Modality::Depth } else { Modality::Normal },
                        view: i / 2,
                    })
                    .collect();
                DiffusionItem { z0: base[..cfg.d_e].to_vec(), rigs: vec![rig] }
            })
            .collect()
    }

    #[test]
    fn denoiser_frozen_and_distillation_drops() {
        let cfg = ModelConfig::toy();
        let all = toy_items(&cfg, 80);
        let (items, held_out) = all.split_at(64);
        let s = ScheduleConfig::desk().build().unwrap();
        let mut teacher = init_all(&cfg, 1);
        train_diffusion(&mut teacher, &cfg, items, &s, &DiffusionTrainConfig { steps: 300, batch_size: 16, lr: 3e-3, seed: 0 }).unwrap();
        let mut student = teacher.clone();
        let den_before: Vec<_> = student.iter().filter(|(n, _)| n.starts_with("den.")).map(|(_, t)| t.clone()).collect();
        let sc = SingleViewConfig { steps: 150, batch_size: 8, lr: 3e-3, ..Default::default() };
        let log = train_single_view(&mut student, &teacher, &cfg, items, &s, &sc).unwrap();
        let den_after: Vec<_> = student.iter().filter(|(n, _)| n.starts_with("den.")).map(|(_, t)| t.clone()).collect();
        assert_eq!(den_before, den_after);
        let head: f64 = log.distill[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = log.distill[130..].iter().sum::<f64>() / 20.0;
        assert!(tail < head, "{head} -> {tail}");
        let (before, after) = (mean_distill_loss(&teacher, &teacher, &cfg, held_out), mean_distill_loss(&student, &teacher, &cfg, held_out));
        assert!(after < before, "{before} -> {after}");
        assert!(student.iter().all(|(n, _)| student.is_trainable(n)));
    }
}
