//! Run-directory orchestration: corpus generation, staged training,
//! sampling, checking, evaluation and verification.
//!
//! Layout under the run root:
//!
//! ```text
//! manifest.json  config.toml
//! corpus/index.json  corpus/sequences/  corpus/meshes/  corpus/maps/  corpus/features/
//! checkpoints/<stage>.ckpt(.json)  checkpoints/latents.json  logs/<stage>.json
//! samples/<stage>-<condition>/s<k>/<item>.json(.obj)  samples/<stage>-<condition>/report.json
//! ```

mod config;
mod manifest;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::align::{finetune_dpo, mine_preference_pairs, train_single_view, AlignError, LatentSample};
use crate::autodiff::{load_tensors, manifest_path, save_tensors, CheckpointError, ParamStore};
use crate::cad::{generate_random_sequence, parse_sequence, parse_sequence_lenient, serialize_sequence, CadError, CadSequence};
use crate::compiler::{check_validity, compile_solid, export_obj, CompileError, FailureCode, ObjError};
use crate::diffusion::{ddpm_sample_batch, train_diffusion, Conditioned, DiffusionError, DiffusionItem, LatentNorm};
use crate::metrics::{aggregate, evaluate_item, DatasetReport, MetricsError};
use crate::models::{ae_encode, geometry_encode, init_autoencoder, init_denoiser, init_geometry_encoder, reconstruct, train_autoencoder, GeometryError};
use crate::oracles::{OracleConfig, OracleReport, OracleSuite};
use crate::render::{rasterize_depth_normal, sample_camera_rig, write_depth_pgm, write_normal_ppm, FeatureProjector, RenderError, ViewFeature};

pub use config::{CorpusConfig, MiningConfig, PipelineConfig, RenderConfig, SampleConfig, MAX_SEED, SEED_ENV};
pub use manifest::{sha256_file, sha256_text, DigestMismatch, RunManifest, StageRecord, MANIFEST_FILE};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("stage `{stage}` requires stage `{missing}` to be trained first")]
    Prerequisite { stage: Stage, missing: Stage },
    #[error("no corpus under {0}; run `generate` first")]
    NoCorpus(PathBuf),
    #[error("predictions without a ground-truth item: {0:?}")]
    Unmatched(Vec<String>),
    #[error("{path}: {source}")]
    Sequence { path: PathBuf, source: CadError },
    #[error("{0}")]
    Compile(#[from] CompileError),
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Diffusion(#[from] DiffusionError),
    #[error("{0}")]
    Align(#[from] AlignError),
    #[error("{0}")]
    Metrics(#[from] MetricsError),
    #[error("{0}")]
    Render(#[from] RenderError),
    #[error("{0}")]
    Geometry(#[from] GeometryError),
    #[error("{0}")]
    Obj(#[from] ObjError),
    #[error("{0}")]
    Cad(#[from] CadError),
}

impl PipelineError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.to_path_buf(), source }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Ae,
    DiffusionMv,
    DiffusionSv,
    Dpo,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Ae, Stage::DiffusionMv, Stage::DiffusionSv, Stage::Dpo];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ae => "ae",
            Stage::DiffusionMv => "diffusion-mv",
            Stage::DiffusionSv => "diffusion-sv",
            Stage::Dpo => "dpo",
        }
    }

    /// Checkpoint that must exist before this stage can train.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Ae => None,
            Stage::DiffusionMv => Some(Stage::Ae),
            Stage::DiffusionSv => Some(Stage::DiffusionMv),
            Stage::Dpo => Some(Stage::DiffusionMv),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage `{s}` (ae, diffusion-mv, diffusion-sv, dpo)"))
    }
}

/// Which tokens condition the denoiser: the full 8-token rig, or the depth
/// and normal tokens of one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Views,
    Single,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Views => "views",
            Condition::Single => "single",
        }
    }

    fn tokens(self, rig: &[ViewFeature]) -> &[ViewFeature] {
        match self {
            Condition::Views => rig,
            Condition::Single => &rig[..2],
        }
    }
}

impl FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "views" => Ok(Condition::Views),
            "single" => Ok(Condition::Single),
            _ => Err(format!("unknown condition `{s}` (views, single)")),
        }
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub root: PathBuf,
}

impl Run {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Run { root: root.into() }
    }

    pub fn sequences(&self) -> PathBuf {
        self.root.join("corpus/sequences")
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join(self.checkpoint_rel(stage))
    }

    fn checkpoint_rel(&self, stage: Stage) -> String {
        format!("checkpoints/{stage}.ckpt")
    }

    pub fn has_checkpoint(&self, stage: Stage) -> bool {
        self.checkpoint(stage).exists()
    }

    pub fn samples(&self, stage: Stage, cond: Condition) -> PathBuf {
        self.root.join(format!("samples/{stage}-{}", cond.name()))
    }

    fn index(&self) -> PathBuf {
        self.root.join("corpus/index.json")
    }

    fn mkdir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        fs::create_dir_all(&p).map_err(|e| PipelineError::io(&p, e))?;
        Ok(p)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))
}

fn item_seed(master: u64, i: usize) -> u64 {
    master.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CorpusIndex {
    items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub items: usize,
    pub seconds: f64,
}

/// Writes sequences, meshes, rendered maps and feature tokens for
/// `corpus.size` generated items.
pub fn cmd_generate(cfg: &PipelineConfig, run: &Run) -> Result<GenerateSummary> {
    cfg.validate()?;
    let start = Instant::now();
    for d in ["corpus/sequences", "corpus/meshes", "corpus/features"] {
        run.mkdir(d)?;
    }
    if cfg.corpus.write_maps {
        run.mkdir("corpus/maps")?;
    }
    let mut manifest = RunManifest::load_or_new(&run.root)?;
    let projector = FeatureProjector::new(cfg.render.res, cfg.model.d_feat, cfg.render.projector_seed);
    let mut names = Vec::with_capacity(cfg.corpus.size);
    for i in 0..cfg.corpus.size {
        let name = format!("item_{i:04}");
        let seed = item_seed(cfg.corpus_seed(), i);
        let seq = generate_random_sequence(seed, &cfg.corpus.generator)?;
        let solid = compile_solid(&seq)?;
        let seq_rel = format!("corpus/sequences/{name}.json");
        write(&run.root.join(&seq_rel), &serialize_sequence(&seq))?;
        let mesh_rel = format!("corpus/meshes/{name}.obj");
        export_obj(&solid, &run.root.join(&mesh_rel))?;
        let mut rigs = Vec::with_capacity(cfg.corpus.rigs_per_item);
        for r in 0..cfg.corpus.rigs_per_item {
            let poses = sample_camera_rig(seed ^ (0x5851_f42d_4c95_7f2d_u64.wrapping_mul(r as u64 + 1)));
            rigs.push(projector.view_features(&solid, &poses)?);
            if r == 0 && cfg.corpus.write_maps {
                for (v, pose) in poses.iter().enumerate() {
                    let maps = rasterize_depth_normal(&solid, pose, cfg.render.res)?;
                    for (ext, normal) in [("depth.pgm", false), ("normal.ppm", true)] {
                        let rel = format!("corpus/maps/{name}_v{v}_{ext}");
                        let p = run.root.join(&rel);
                        let mut f = fs::File::create(&p).map_err(|e| PipelineError::io(&p, e))?;
                        let res = if normal { write_normal_ppm(&maps, &mut f) } else { write_depth_pgm(&maps, &mut f) };
                        res.map_err(|e| PipelineError::io(&p, e))?;
                        manifest.record(&run.root, &rel)?;
                    }
                }
            }
        }
        let feat_rel = format!("corpus/features/{name}.json");
        write(&run.root.join(&feat_rel), &serde_json::to_string(&rigs).expect("plain data"))?;
        for rel in [&seq_rel, &mesh_rel, &feat_rel] {
            manifest.record(&run.root, rel)?;
        }
        names.push(name);
    }
    write(&run.index(), &serde_json::to_string_pretty(&CorpusIndex { items: names }).expect("plain data"))?;
    manifest.record(&run.root, "corpus/index.json")?;
    write_config(cfg, run, &mut manifest)?;
    manifest.save(&run.root)?;
    let seconds = start.elapsed().as_secs_f64();
    info!("generated {} items in {seconds:.1}s", cfg.corpus.size);
    Ok(GenerateSummary { items: cfg.corpus.size, seconds })
}

fn write_config(cfg: &PipelineConfig, run: &Run, manifest: &mut RunManifest) -> Result<()> {
    let text = cfg.to_toml();
    write(&run.root.join("config.toml"), &text)?;
    manifest.config_digest = sha256_text(&text);
    manifest.seed = cfg.seed;
    manifest.record(&run.root, "config.toml")
}

pub fn corpus_names(run: &Run) -> Result<Vec<String>> {
    if !run.index().exists() {
        return Err(PipelineError::NoCorpus(run.root.clone()));
    }
    Ok(read_json::<CorpusIndex>(&run.index())?.items)
}

pub fn load_sequence(path: &Path) -> Result<CadSequence> {
    parse_sequence(&read(path)?).map_err(|source| PipelineError::Sequence { path: path.to_path_buf(), source })
}

fn load_rigs(run: &Run, name: &str) -> Result<Vec<Vec<ViewFeature>>> {
    read_json(&run.root.join(format!("corpus/features/{name}.json")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Latents {
    norm: LatentNorm,
    names: Vec<String>,
    z: Vec<Vec<f64>>,
}

fn load_stage(run: &Run, stage: Stage) -> Result<(ParamStore, u64)> {
    let (store, m) = load_tensors(&run.checkpoint(stage))?;
    Ok((store, m.step))
}

fn save_stage(
    run: &Run,
    manifest: &mut RunManifest,
    stage: Stage,
    store: &ParamStore,
    step: u64,
    seconds: f64,
    seed: u64,
    hyper: serde_json::Value,
    summary: serde_json::Value,
    log: &impl Serialize,
) -> Result<StageRecord> {
    run.mkdir("checkpoints")?;
    let rel = run.checkpoint_rel(stage);
    save_tensors(&run.root.join(&rel), store, step, hyper)?;
    let log_rel = format!("logs/{stage}.json");
    write(&run.root.join(&log_rel), &serde_json::to_string(log).expect("plain data"))?;
    let json_rel = manifest_path(Path::new(&rel)).to_string_lossy().into_owned();
    for r in [&rel, &json_rel, &log_rel] {
        manifest.record(&run.root, r)?;
    }
    let rec = StageRecord { checkpoint: rel, step, seconds, seed, summary };
    manifest.stages.insert(stage.name().into(), rec.clone());
    manifest.save(&run.root)?;
    Ok(rec)
}

fn with_prefixes(store: &ParamStore, prefixes: &[&str]) -> ParamStore {
    let mut out = ParamStore::new();
    for (n, t) in store.iter() {
        if prefixes.iter().any(|p| n.starts_with(p)) {
            out.insert(n, t.clone());
        }
    }
    out
}

/// Trains one stage. Prerequisite checkpoints must exist; with `resume`
/// the stage's own checkpoint seeds the parameters and the step counter.
pub fn cmd_train(stage: Stage, cfg: &PipelineConfig, run: &Run, resume: bool) -> Result<StageRecord> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    if let Some(missing) = stage.prerequisite() {
        if !run.has_checkpoint(missing) {
            return Err(PipelineError::Prerequisite { stage, missing });
        }
    }
    let names = corpus_names(run)?;
    let mut manifest = RunManifest::load_or_new(&run.root)?;
    write_config(&cfg, run, &mut manifest)?;
    let resume_from = if resume && run.has_checkpoint(stage) { Some(load_stage(run, stage)?) } else { None };
    let m = &cfg.model;
    let s = cfg.schedule.build()?;
    let hyper = json!({ "stage": stage.name(), "model": m, "schedule": cfg.schedule });

    match stage {
        Stage::Ae => {
            let seqs = names.iter().map(|n| load_sequence(&run.sequences().join(format!("{n}.json")))).collect::<Result<Vec<_>>>()?;
            let (mut store, step0) = resume_from.unwrap_or_else(|| {
                let mut st = ParamStore::new();
                init_autoencoder(&mut st, m, cfg.init_seed());
                (st, 0)
            });
            let log = train_autoencoder(&mut store, m, &seqs, &cfg.ae);
            let refs: Vec<&CadSequence> = seqs.iter().collect();
            let z = ae_encode(&store, m, &refs);
            let latents = Latents { norm: LatentNorm::fit(&z), names: names.clone(), z };
            write(&run.root.join("checkpoints/latents.json"), &serde_json::to_string(&latents).expect("plain data"))?;
            manifest.record(&run.root, "checkpoints/latents.json")?;
            let summary = json!({ "epochs": log.epochs, "acc_cmd": log.acc_cmd, "acc_para": log.acc_para });
            let hyper = json!({ "stage": "ae", "model": m, "train": cfg.ae });
            save_stage(run, &mut manifest, stage, &store, step0 + log.steps, log.seconds, cfg.ae.seed, hyper, summary, &log)
        }
        Stage::DiffusionMv => {
            let latents: Latents = read_json(&run.root.join("checkpoints/latents.json"))?;
            let items = diffusion_items(run, &latents)?;
            let (mut store, step0) = resume_from.unwrap_or_else(|| {
                let mut st = ParamStore::new();
                init_geometry_encoder(&mut st, m, cfg.init_seed());
                init_denoiser(&mut st, m, cfg.init_seed());
                (st, 0)
            });
            let log = train_diffusion(&mut store, m, &items, &s, &cfg.diffusion)?;
            let tail = &log.losses[log.losses.len().saturating_sub(50)..];
            let summary = json!({ "final_loss": tail.iter().sum::<f64>() / tail.len().max(1) as f64 });
            let steps = log.losses.len() as u64;
            save_stage(run, &mut manifest, stage, &store, step0 + steps, log.seconds, cfg.diffusion.seed, hyper, summary, &log)
        }
        Stage::DiffusionSv => {
            let latents: Latents = read_json(&run.root.join("checkpoints/latents.json"))?;
            let items = diffusion_items(run, &latents)?;
            let (teacher, _) = load_stage(run, Stage::DiffusionMv)?;
            let (mut student, step0) = resume_from.unwrap_or_else(|| (teacher.clone(), 0));
            let log = train_single_view(&mut student, &teacher, m, &items, &s, &cfg.single_view)?;
            let tail = &log.distill[log.distill.len().saturating_sub(50)..];
            let summary = json!({ "final_distill": tail.iter().sum::<f64>() / tail.len().max(1) as f64 });
            let steps = log.losses.len() as u64;
            save_stage(run, &mut manifest, stage, &student, step0 + steps, log.seconds, cfg.single_view.seed, hyper, summary, &log)
        }
        Stage::Dpo => {
            let (base_stage, cond) = dpo_base(run);
            let (base, _) = load_stage(run, base_stage)?;
            let (ae, _) = load_stage(run, Stage::Ae)?;
            let latents: Latents = read_json(&run.root.join("checkpoints/latents.json"))?;
            let items: Vec<&String> = names.iter().take(cfg.mining.items).collect();
            let mut conditions = Vec::new();
            for n in &items {
                let rigs = load_rigs(run, n)?;
                let f = geometry_encode(&base, m, cond.tokens(&rigs[0]))?;
                conditions.extend(std::iter::repeat_n(f, cfg.mining.samples_per_item));
            }
            let den = Conditioned { store: &base, cfg: m, conditions: conditions.clone() };
            let zs = ddpm_sample_batch(&den, &s, m.d_e, conditions.len(), cfg.mining_seed());
            let samples: Vec<LatentSample> =
                zs.into_iter().zip(conditions).enumerate().map(|(i, (z, condition))| LatentSample { z, condition, seed: i as u64 }).collect();
            let decode = |z: &[f64]| reconstruct(&ae, m, &[latents.norm.denormalize(z)]).remove(0);
            let mined = mine_preference_pairs(&samples, decode, cfg.mining.max_pairs, cfg.mining_seed())?;
            info!("mined {} pairs from {} valid / {} invalid samples", mined.pairs.len(), mined.valid, mined.invalid);
            let (mut policy, step0) = resume_from.unwrap_or_else(|| (base.clone(), 0));
            let log = finetune_dpo(&mut policy, &base, m, &mined.pairs, &s, &cfg.dpo)?;
            let summary = json!({
                "base": base_stage.name(), "condition": cond.name(), "pairs": mined.pairs.len(),
                "valid": mined.valid, "invalid": mined.invalid,
                "first_loss": log.losses.first(), "last_loss": log.losses.last(),
            });
            let hyper = json!({ "stage": "dpo", "base": base_stage.name(), "condition": cond.name(), "model": m, "dpo": cfg.dpo });
            let steps = log.losses.len() as u64;
            let policy = with_prefixes(&policy, &["geo.", "den."]);
            save_stage(run, &mut manifest, stage, &policy, step0 + steps, log.seconds, cfg.dpo.seed, hyper, summary, &log)
        }
    }
}

/// DPO fine-tunes the single-view model when it exists, else the
/// multi-view one, under that model's conditioning mode.
fn dpo_base(run: &Run) -> (Stage, Condition) {
    if run.has_checkpoint(Stage::DiffusionSv) {
        (Stage::DiffusionSv, Condition::Single)
    } else {
        (Stage::DiffusionMv, Condition::Views)
    }
}

fn diffusion_items(run: &Run, latents: &Latents) -> Result<Vec<DiffusionItem>> {
    latents
        .names
        .iter()
        .zip(&latents.z)
        .map(|(n, z)| Ok(DiffusionItem { z0: latents.norm.normalize(z), rigs: load_rigs(run, n)? }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub stage: Stage,
    /// Defaults to the stage's training condition.
    pub condition: Option<Condition>,
    pub items: usize,
    pub per_item: usize,
    pub seed: Option<u64>,
    pub export_obj: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub item: String,
    pub k: usize,
    pub path: String,
    pub valid: bool,
    pub codes: Vec<FailureCode>,
    pub obj: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub stage: Stage,
    pub condition: Condition,
    pub seed: u64,
    pub samples: Vec<SampleRecord>,
    pub invalid_rate: f64,
}

impl SampleReport {
    /// Items with at least two distinct decoded sequences.
    pub fn diverse_items(&self, run: &Run) -> Result<usize> {
        let mut by_item: std::collections::BTreeMap<&str, Vec<String>> = Default::default();
        for r in &self.samples {
            by_item.entry(&r.item).or_default().push(read(&run.root.join(&r.path))?);
        }
        Ok(by_item.values().filter(|v| v.iter().any(|x| x != &v[0])).count())
    }
}

/// Samples latents for the first `items` corpus items, decodes and checks
/// them, and exports meshes for valid ones on request. Sample `j` of the
/// batch (item-major) uses noise stream `j + 1` of the seed.
pub fn cmd_sample(cfg: &PipelineConfig, run: &Run, req: &SampleRequest) -> Result<SampleReport> {
    cfg.validate()?;
    if req.stage == Stage::Ae {
        return Err(PipelineError::Config("sampling needs a diffusion or dpo checkpoint".into()));
    }
    for st in [Stage::Ae, req.stage] {
        if !run.has_checkpoint(st) {
            return Err(PipelineError::Prerequisite { stage: req.stage, missing: st });
        }
    }
    let m = &cfg.model;
    let cond = req.condition.unwrap_or(match req.stage {
        Stage::DiffusionMv => Condition::Views,
        Stage::Dpo => dpo_base(run).1,
        _ => Condition::Single,
    });
    let seed = req.seed.unwrap_or(cfg.sample_seed());
    let (store, _) = load_stage(run, req.stage)?;
    let (ae, _) = load_stage(run, Stage::Ae)?;
    let latents: Latents = read_json(&run.root.join("checkpoints/latents.json"))?;
    let names: Vec<String> = corpus_names(run)?.into_iter().take(req.items).collect();
    let mut conditions = Vec::new();
    for n in &names {
        let rigs = load_rigs(run, n)?;
        let f = geometry_encode(&store, m, cond.tokens(&rigs[0]))?;
        conditions.extend(std::iter::repeat_n(f, req.per_item));
    }
    let s = cfg.schedule.build()?;
    let den = Conditioned { store: &store, cfg: m, conditions };
    let zs = ddpm_sample_batch(&den, &s, m.d_e, names.len() * req.per_item, seed);
    let zs: Vec<Vec<f64>> = zs.iter().map(|z| latents.norm.denormalize(z)).collect();
    let decoded = reconstruct(&ae, m, &zs);

    let dir = run.samples(req.stage, cond);
    let dir_rel = dir.strip_prefix(&run.root).expect("under root").to_string_lossy().into_owned();
    let mut manifest = RunManifest::load_or_new(&run.root)?;
    let mut records = Vec::with_capacity(decoded.len());
    for (j, seq) in decoded.iter().enumerate() {
        let (item, k) = (&names[j / req.per_item], j % req.per_item);
        let rel = format!("{dir_rel}/s{k}/{item}.json");
        write(&run.root.join(&rel), &serialize_sequence(seq))?;
        manifest.record(&run.root, &rel)?;
        let report = check_validity(seq);
        let obj = if report.valid && req.export_obj {
            let obj_rel = format!("{dir_rel}/s{k}/{item}.obj");
            export_obj(&compile_solid(seq)?, &run.root.join(&obj_rel))?;
            manifest.record(&run.root, &obj_rel)?;
            Some(obj_rel)
        } else {
            None
        };
        records.push(SampleRecord { item: item.clone(), k, path: rel, valid: report.valid, codes: report.codes(), obj });
    }
    let invalid = records.iter().filter(|r| !r.valid).count();
    let report = SampleReport {
        stage: req.stage,
        condition: cond,
        seed,
        invalid_rate: if records.is_empty() { 0.0 } else { invalid as f64 / records.len() as f64 },
        samples: records,
    };
    let rep_rel = format!("{dir_rel}/report.json");
    write(&run.root.join(&rep_rel), &serde_json::to_string_pretty(&report).expect("plain data"))?;
    manifest.record(&run.root, &rep_rel)?;
    manifest.reports.insert(format!("sample-{}-{}", req.stage, cond.name()), rep_rel);
    manifest.save(&run.root)?;
    Ok(report)
}

/// Exit status and stdout body of the `check` command: 0 valid, 1 invalid,
/// 2 unreadable or unparseable.
pub fn cmd_check(path: &Path) -> (i32, String) {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => return (2, json!({ "error": format!("{}: {e}", path.display()) }).to_string()),
    };
    match parse_sequence_lenient(&text) {
        Err(e) => (2, json!({ "error": e.to_string() }).to_string()),
        Ok(seq) => {
            let r = check_validity(&seq);
            (if r.valid { 0 } else { 1 }, r.to_json())
        }
    }
}

fn json_stems(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))? {
        let p = e.map_err(|e| PipelineError::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "json") {
            out.push(p.file_stem().expect("has extension").to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

/// Scores every prediction in `pred_dir` against the same-named
/// ground-truth file. Unparseable predictions count as invalid.
pub fn cmd_eval(pred_dir: &Path, gt_dir: &Path, cfg: &PipelineConfig) -> Result<DatasetReport> {
    let preds = json_stems(pred_dir)?;
    let unmatched: Vec<String> = preds.iter().filter(|n| !gt_dir.join(format!("{n}.json")).exists()).cloned().collect();
    if !unmatched.is_empty() {
        return Err(PipelineError::Unmatched(unmatched));
    }
    let mut items = Vec::with_capacity(preds.len());
    for n in &preds {
        let gt = load_sequence(&gt_dir.join(format!("{n}.json")))?;
        let pred = parse_sequence_lenient(&read(&pred_dir.join(format!("{n}.json")))?).unwrap_or_else(|_| CadSequence::empty());
        items.push(evaluate_item(n, &pred, &gt, &cfg.eval));
    }
    Ok(aggregate(&items, &cfg.eval)?)
}

pub fn cmd_export_obj(seq_path: &Path, obj_path: &Path) -> Result<()> {
    let seq = parse_sequence_lenient(&read(seq_path)?).map_err(|source| PipelineError::Sequence { path: seq_path.to_path_buf(), source })?;
    Ok(export_obj(&compile_solid(&seq)?, obj_path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub oracles: OracleReport,
    pub digest_mismatches: Vec<DigestMismatch>,
    pub artifacts_checked: usize,
}

impl VerifyReport {
    pub fn pass(&self) -> bool {
        self.oracles.all_pass() && self.digest_mismatches.is_empty()
    }
}

/// Runs the oracle suite and, when `run` holds a manifest, re-checks every
/// recorded artifact digest.
pub fn cmd_verify(run: Option<&Run>, oc: &OracleConfig) -> Result<VerifyReport> {
    let oracles = OracleSuite::default().verify(oc);
    let (digest_mismatches, artifacts_checked) = match run {
        Some(r) if r.root.join(MANIFEST_FILE).exists() => {
            let m = RunManifest::load_or_new(&r.root)?;
            (m.verify(&r.root), m.artifacts.len())
        }
        _ => (Vec::new(), 0),
    };
    Ok(VerifyReport { oracles, digest_mismatches, artifacts_checked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cad::unit_square_json;

    fn tiny() -> PipelineConfig {
        let mut c = PipelineConfig::toy();
        c.corpus.size = 4;
        c.corpus.write_maps = true;
        c.render.res = 16;
        c
    }

    #[test]
    fn generate_is_deterministic_and_valid() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let cfg = tiny();
        cmd_generate(&cfg, &Run::new(a.path())).unwrap();
        cmd_generate(&cfg, &Run::new(b.path())).unwrap();
        let ma = RunManifest::load_or_new(a.path()).unwrap();
        let mb = RunManifest::load_or_new(b.path()).unwrap();
        assert_eq!(ma.artifacts, mb.artifacts);
        assert!(ma.verify(a.path()).is_empty());
        let run = Run::new(a.path());
        for n in corpus_names(&run).unwrap() {
            assert!(check_validity(&load_sequence(&run.sequences().join(format!("{n}.json"))).unwrap()).valid);
        }
        assert_eq!(ma.artifacts.keys().filter(|k| k.ends_with(".pgm")).count(), 4 * 4);
    }

    #[test]
    fn stage_order_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(dir.path());
        let cfg = tiny();
        cmd_generate(&cfg, &run).unwrap();
        for (st, missing) in [(Stage::Dpo, Stage::DiffusionMv), (Stage::DiffusionSv, Stage::DiffusionMv), (Stage::DiffusionMv, Stage::Ae)] {
            match cmd_train(st, &cfg, &run, false) {
                Err(PipelineError::Prerequisite { stage, missing: m }) => assert_eq!((stage, m), (st, missing)),
                other => panic!("{other:?}"),
            }
        }
        let e = cmd_train(Stage::Dpo, &cfg, &run, false).unwrap_err().to_string();
        assert!(e.contains("diffusion-mv"), "{e}");
    }

    #[test]
    fn check_exit_codes() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.json");
        fs::write(&ok, unit_square_json()).unwrap();
        assert_eq!(cmd_check(&ok).0, 0);
        let zero = dir.path().join("zero.json");
        fs::write(&zero, r#"{"commands":[{"cmd":"SOL"},{"cmd":"L","x":1,"y":0},{"cmd":"L","x":0,"y":0},
            {"cmd":"E","theta":0,"phi":0,"gamma":0,"px":0,"py":0,"pz":0,"s":1,"e1":0.5,"e2":0,"bool":0,"extent":0}]}"#).unwrap();
        let (code, body) = cmd_check(&zero);
        assert_eq!(code, 1);
        assert!(body.contains("ZeroArea"), "{body}");
        let bad = dir.path().join("bad.json");
        fs::write(&bad, "{\"commands\": [").unwrap();
        assert_eq!(cmd_check(&bad).0, 2);
        assert_eq!(cmd_check(&dir.path().join("missing.json")).0, 2);
    }

    #[test]
    fn eval_self_and_corrupted() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(dir.path());
        let mut cfg = tiny();
        cfg.eval.cd_points = 256;
        cmd_generate(&cfg, &run).unwrap();
        let r = cmd_eval(&run.sequences(), &run.sequences(), &cfg).unwrap();
        assert_eq!((r.acc_cmd, r.acc_para, r.med_cd, r.invalid_rate), (100.0, Some(100.0), Some(0.0), 0.0));
        let pred = dir.path().join("pred");
        fs::create_dir(&pred).unwrap();
        for n in corpus_names(&run).unwrap() {
            fs::copy(run.sequences().join(format!("{n}.json")), pred.join(format!("{n}.json"))).unwrap();
        }
        fs::write(pred.join("item_0000.json"), "not json").unwrap();
        let r = cmd_eval(&pred, &run.sequences(), &cfg).unwrap();
        assert_eq!(r.invalid_rate, 0.25);
        assert_eq!(r, cmd_eval(&pred, &run.sequences(), &cfg).unwrap());
        fs::write(pred.join("stray.json"), unit_square_json()).unwrap();
        assert!(matches!(cmd_eval(&pred, &run.sequences(), &cfg), Err(PipelineError::Unmatched(v)) if v == vec!["stray".to_string()]));
    }
}
