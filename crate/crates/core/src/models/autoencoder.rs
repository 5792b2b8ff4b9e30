use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{block, init_block, init_linear, init_norm, linear, norm, rng_for, ModelConfig};
use crate::autodiff::{Adam, AdamConfig, AttentionShape, Graph, ParamStore, Reduction, Tensor, Var};
use crate::cad::{
    CadSequence, Command, CommandType, ParamVector, Slot, MAX_COMMANDS, NUM_COMMAND_TYPES, NUM_PARAMS, PARAM_BINS,
};
use crate::metrics::{acc_cmd, acc_para, DEFAULT_ETA};

pub fn init_autoencoder(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) {
    let mut rng = rng_for(seed, 1);
    let d = cfg.d_e;
    store.init_normal("ae.emb.cmd", NUM_COMMAND_TYPES, d, 0.5, &mut rng);
    store.init_normal("ae.emb.param", NUM_PARAMS * PARAM_BINS, d, 0.5 / (NUM_PARAMS as f64).sqrt(), &mut rng);
    store.init_normal("ae.emb.pos", MAX_COMMANDS, d, 0.5, &mut rng);
    store.init_normal("ae.dec.pos", MAX_COMMANDS, d, 0.5, &mut rng);
    for i in 0..cfg.ae_blocks {
        init_block(store, &mut rng, &format!("ae.enc.{i}"), d, cfg.ff_mult, cfg.ae_blocks, false);
        init_block(store, &mut rng, &format!("ae.dec.{i}"), d, cfg.ff_mult, cfg.ae_blocks, false);
    }
    init_norm(store, "ae.enc.ln", d);
    init_norm(store, "ae.dec.ln", d);
    if cfg.kl {
        init_linear(store, &mut rng, "ae.enc.logvar", d, d, 0.1);
    }
    init_linear(store, &mut rng, "ae.head.cmd", d, NUM_COMMAND_TYPES, 1.0);
    for s in 0..NUM_PARAMS {
        init_linear(store, &mut rng, &format!("ae.head.param.{s}"), d, PARAM_BINS, 1.0);
    }
}

/// Index form of a batch of sequences.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub len: usize,
    cmd: Vec<usize>,
    param_idx: Vec<usize>,
    pos: Vec<usize>,
    /// Per slot: the token rows whose command uses it, and their levels.
    slot_rows: Vec<Vec<usize>>,
    slot_targets: Vec<Vec<usize>>,
}

impl SequenceBatch {
    pub fn new(seqs: &[&CadSequence]) -> Self {
        let mut b = SequenceBatch {
            len: seqs.len(),
            cmd: Vec::new(),
            param_idx: Vec::new(),
            pos: Vec::new(),
            slot_rows: vec![Vec::new(); NUM_PARAMS],
            slot_targets: vec![Vec::new(); NUM_PARAMS],
        };
        for (si, seq) in seqs.iter().enumerate() {
            for (p, c) in seq.commands().iter().enumerate() {
                let row = si * MAX_COMMANDS + p;
                b.cmd.push(c.kind().tag());
                b.pos.push(p);
                for slot in Slot::ALL {
                    b.param_idx.push(slot.index() * PARAM_BINS + c.params().bin(slot));
                }
                for &slot in c.kind().used_slots() {
                    b.slot_rows[slot.index()].push(row);
                    b.slot_targets[slot.index()].push(c.level(slot) as usize);
                }
            }
        }
        b
    }

    pub fn used_param_count(&self) -> usize {
        self.slot_rows.iter().map(Vec::len).sum()
    }
}

/// `e_cmd + Σ_slots e_param + e_pos` per token, `[len·N_c, d_E]`.
pub fn embed_commands(g: &mut Graph, store: &ParamStore, batch: &SequenceBatch) -> Var {
    let cmd_t = g.param(store, "ae.emb.cmd");
    let par_t = g.param(store, "ae.emb.param");
    let pos_t = g.param(store, "ae.emb.pos");
    let c = g.gather_rows(cmd_t, &batch.cmd);
    let p = g.gather_rows(par_t, &batch.param_idx);
    let p = g.mean_pool_groups(p, NUM_PARAMS);
    let p = g.scale(p, NUM_PARAMS as f64);
    let e = g.gather_rows(pos_t, &batch.pos);
    let x = g.add(c, p);
    g.add(x, e)
}

/// Encoder output. `logvar` is present for the variational encoder.
pub struct EncoderOut {
    pub z: Var,
    pub mu: Var,
    pub logvar: Option<Var>,
}

fn encode_graph(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, batch: &SequenceBatch, noise: Option<&mut rand_chacha::ChaCha8Rng>) -> EncoderOut {
    let mut x = embed_commands(g, store, batch);
    let shape = AttentionShape { batch: batch.len, q_len: MAX_COMMANDS, k_len: MAX_COMMANDS, heads: cfg.heads };
    for i in 0..cfg.ae_blocks {
        x = block(g, store, &format!("ae.enc.{i}"), x, shape, None, None);
    }
    let x = norm(g, store, "ae.enc.ln", x);
    let mu = g.mean_pool_groups(x, MAX_COMMANDS);
    if !cfg.kl {
        return EncoderOut { z: mu, mu, logvar: None };
    }
    let lv = linear(g, store, "ae.enc.logvar", mu);
    let z = match noise {
        Some(rng) => {
            let n = g.value(mu).len();
            let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect();
            let eps = g.constant(Tensor::matrix(batch.len, cfg.d_e, eps));
            let half = g.scale(lv, 0.5);
            let sd = g.exp(half);
            let s = g.mul(sd, eps);
            g.add(mu, s)
        }
        None => mu,
    };
    EncoderOut { z, mu, logvar: Some(lv) }
}

/// Decoder trunk: `z` broadcast to every position plus a positional table.
fn decode_trunk(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, z: Var) -> Var {
    let n = g.value(z).rows();
    let rows: Vec<usize> = (0..n * MAX_COMMANDS).map(|r| r / MAX_COMMANDS).collect();
    let pos: Vec<usize> = (0..n * MAX_COMMANDS).map(|r| r % MAX_COMMANDS).collect();
    let zb = g.gather_rows(z, &rows);
    let pt = g.param(store, "ae.dec.pos");
    let pe = g.gather_rows(pt, &pos);
    let mut x = g.add(zb, pe);
    let shape = AttentionShape { batch: n, q_len: MAX_COMMANDS, k_len: MAX_COMMANDS, heads: cfg.heads };
    for i in 0..cfg.ae_blocks {
        x = block(g, store, &format!("ae.dec.{i}"), x, shape, None, None);
    }
    norm(g, store, "ae.dec.ln", x)
}

fn param_head(g: &mut Graph, store: &ParamStore, slot: usize, h: Var, rows: &[usize]) -> Var {
    let sel = g.gather_rows(h, rows);
    linear(g, store, &format!("ae.head.param.{slot}"), sel)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AeLoss {
    pub total: f64,
    pub cmd: f64,
    pub param: f64,
    pub kl: f64,
}

/// Command cross-entropy (mean over all N_c positions) plus parameter
/// cross-entropy (mean over used slots), plus the weighted KL when enabled.
pub fn ae_loss(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    batch: &SequenceBatch,
    noise: Option<&mut rand_chacha::ChaCha8Rng>,
) -> (Var, AeLoss) {
    let enc = encode_graph(g, store, cfg, batch, noise);
    let h = decode_trunk(g, store, cfg, enc.z);
    let cl = linear(g, store, "ae.head.cmd", h);
    let cmd = g.cross_entropy(cl, &batch.cmd, Reduction::Mean);
    let mut terms = Vec::new();
    for s in 0..NUM_PARAMS {
        if batch.slot_rows[s].is_empty() {
            continue;
        }
        let logits = param_head(g, store, s, h, &batch.slot_rows[s]);
        terms.push(g.cross_entropy(logits, &batch.slot_targets[s], Reduction::Sum));
    }
    let used = batch.used_param_count().max(1);
    let param = match terms.len() {
        0 => g.constant(Tensor::scalar(0.0)),
        _ => {
            let t = g.concat_rows(&terms);
            let m = g.mean_all(t);
            g.scale(m, terms.len() as f64 / used as f64)
        }
    };
    let mut total = g.add(cmd, param);
    let mut kl_v = 0.0;
    if let Some(lv) = enc.logvar {
        let kl = g.gaussian_kl(enc.mu, lv, cfg.kl_prior_std);
        kl_v = g.value(kl).item();
        let w = g.scale(kl, cfg.kl_weight);
        total = g.add(total, w);
    }
    let stats = AeLoss { total: g.value(total).item(), cmd: g.value(cmd).item(), param: g.value(param).item(), kl: kl_v };
    (total, stats)
}

/// Deterministic latents (the mean for the variational encoder).
pub fn ae_encode(store: &ParamStore, cfg: &ModelConfig, seqs: &[&CadSequence]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(32) {
        let mut g = Graph::new();
        let enc = encode_graph(&mut g, store, cfg, &SequenceBatch::new(chunk), None);
        let t = g.value(enc.mu);
        out.extend((0..t.rows()).map(|r| t.row_slice(r).to_vec()));
    }
    out
}

/// Full decoder output for one latent.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedLogits {
    /// `[N_c, 6]`
    pub cmd: Tensor,
    /// `[N_c·16, 257]`, row `position·16 + slot`.
    pub params: Tensor,
}

pub fn ae_decode(store: &ParamStore, cfg: &ModelConfig, z: &[f64]) -> DecodedLogits {
    let mut g = Graph::new();
    let zv = g.constant(Tensor::row(z.to_vec()));
    let h = decode_trunk(&mut g, store, cfg, zv);
    let cl = linear(&mut g, store, "ae.head.cmd", h);
    let all: Vec<usize> = (0..MAX_COMMANDS).collect();
    let mut params = vec![0.0; MAX_COMMANDS * NUM_PARAMS * PARAM_BINS];
    for s in 0..NUM_PARAMS {
        let l = param_head(&mut g, store, s, h, &all);
        let t = g.value(l);
        for p in 0..MAX_COMMANDS {
            let o = (p * NUM_PARAMS + s) * PARAM_BINS;
            params[o..o + PARAM_BINS].copy_from_slice(t.row_slice(p));
        }
    }
    DecodedLogits { cmd: g.value(cl).clone(), params: Tensor::matrix(MAX_COMMANDS * NUM_PARAMS, PARAM_BINS, params) }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn build_command(kind: CommandType, level_of: impl Fn(Slot) -> i16) -> Command {
    let mut pv = ParamVector::unused();
    for &s in kind.used_slots() {
        pv.set(s, level_of(s));
    }
    Command::from_params(kind, pv).expect("levels restricted to the legal range")
}

/// Argmax decoding. Each used slot takes the best legal level of its
/// command; unused slots are left unused. No grammar repair is applied.
pub fn decode_logits(logits: &DecodedLogits) -> CadSequence {
    let cmds = (0..MAX_COMMANDS)
        .map(|p| {
            let kind = CommandType::from_tag(argmax(logits.cmd.row_slice(p))).expect("six command logits");
            build_command(kind, |s| {
                let row = logits.params.row_slice(p * NUM_PARAMS + s.index());
                argmax(&row[..=s.max_level() as usize]) as i16
            })
        })
        .collect();
    CadSequence::from_raw(cmds)
}

/// Batched decode to sequences, evaluating only the parameter heads the
/// decoded commands need. Agrees with `decode_logits(ae_decode(z))`.
pub fn reconstruct(store: &ParamStore, cfg: &ModelConfig, zs: &[Vec<f64>]) -> Vec<CadSequence> {
    let mut out = Vec::with_capacity(zs.len());
    for chunk in zs.chunks(32) {
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_rows(chunk));
        let h = decode_trunk(&mut g, store, cfg, z);
        let cl = linear(&mut g, store, "ae.head.cmd", h);
        let kinds: Vec<CommandType> = (0..chunk.len() * MAX_COMMANDS)
            .map(|r| CommandType::from_tag(argmax(g.value(cl).row_slice(r))).unwrap())
            .collect();
        let mut levels = vec![[0i16; NUM_PARAMS]; kinds.len()];
        for slot in Slot::ALL {
            let rows: Vec<usize> = (0..kinds.len()).filter(|&r| kinds[r].uses(slot)).collect();
            if rows.is_empty() {
                continue;
            }
            let l = param_head(&mut g, store, slot.index(), h, &rows);
            let t = g.value(l);
            for (i, &r) in rows.iter().enumerate() {
                levels[r][slot.index()] = argmax(&t.row_slice(i)[..=slot.max_level() as usize]) as i16;
            }
        }
        for b in 0..chunk.len() {
            let cmds = (0..MAX_COMMANDS)
                .map(|p| {
                    let r = b * MAX_COMMANDS + p;
                    build_command(kinds[r], |s| levels[r][s.index()])
                })
                .collect();
            out.push(CadSequence::from_raw(cmds));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeTrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    /// Stop once both reconstruction accuracies reach these (fractions).
    pub target_acc_cmd: f64,
    pub target_acc_para: f64,
    pub eval_every: usize,
    pub max_seconds: f64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            max_epochs: 400,
            batch_size: 16,
            lr: 2e-3,
            warmup_steps: 100,
            seed: 0,
            target_acc_cmd: 0.995,
            target_acc_para: 0.985,
            eval_every: 5,
            max_seconds: 1500.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AeTrainLog {
    pub epochs: usize,
    pub steps: u64,
    pub seconds: f64,
    pub epoch_loss: Vec<f64>,
    pub acc_cmd: f64,
    pub acc_para: f64,
}

/// Reconstruction accuracies over a corpus, as fractions.
pub fn reconstruction_accuracy(store: &ParamStore, cfg: &ModelConfig, corpus: &[CadSequence]) -> (f64, f64) {
    let refs: Vec<&CadSequence> = corpus.iter().collect();
    let zs = ae_encode(store, cfg, &refs);
    let rec = reconstruct(store, cfg, &zs);
    (acc_cmd(&rec, corpus), acc_para(&rec, corpus, DEFAULT_ETA))
}

/// Adam on the reconstruction loss with shuffled minibatches, stopping at
/// the accuracy targets, the epoch cap, or the time budget.
pub fn train_autoencoder(store: &mut ParamStore, cfg: &ModelConfig, corpus: &[CadSequence], tc: &AeTrainConfig) -> AeTrainLog {
    let start = Instant::now();
    let mut rng = rng_for(tc.seed, 11);
    let mut opt = Adam::new(AdamConfig { lr: tc.lr, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = AeTrainLog::default();
    for epoch in 0..tc.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(tc.batch_size.max(1)) {
            let seqs: Vec<&CadSequence> = idx.iter().map(|&i| &corpus[i]).collect();
            let batch = SequenceBatch::new(&seqs);
            let mut g = Graph::new();
            let (loss, stats) = ae_loss(&mut g, store, cfg, &batch, Some(&mut rng));
            g.backward(loss);
            let warm = ((opt.steps() + 1) as f64 / tc.warmup_steps.max(1) as f64).min(1.0);
            opt.config.lr = tc.lr * warm;
            opt.step(store, &g.param_grads());
            total += stats.total * idx.len() as f64;
        }
        log.epochs = epoch + 1;
        log.epoch_loss.push(total / corpus.len() as f64);
        let timed_out = start.elapsed().as_secs_f64() > tc.max_seconds;
        let last = epoch + 1 == tc.max_epochs || timed_out;
        if (epoch + 1) % tc.eval_every.max(1) == 0 || last {
            let (ac, ap) = reconstruction_accuracy(store, cfg, corpus);
            log.acc_cmd = ac;
            log.acc_para = ap;
            info!("ae epoch {} loss {:.4} acc_cmd {:.4} acc_para {:.4}", epoch + 1, log.epoch_loss[epoch], ac, ap);
            if ac >= tc.target_acc_cmd && ap >= tc.target_acc_para {
                break;
            }
        }
        if timed_out {
            break;
        }
    }
    log.steps = opt.steps();
    log.seconds = start.elapsed().as_secs_f64();
    log
}
