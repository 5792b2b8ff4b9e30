//! Reconstruction accuracies, Chamfer distance, invalid rate, and the
//! dataset report.

mod chamfer;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cad::{CadSequence, CommandType, MAX_COMMANDS};
use crate::compiler::{check_validity, compile_solid, sample_surface_points, SampleError};
use crate::geom::Vec3;

pub use chamfer::{chamfer_distance, chamfer_distance_brute};

/// Default parameter tolerance in quantization levels.
pub const DEFAULT_ETA: i16 = 3;
/// Points sampled per solid for the Chamfer distance.
pub const DEFAULT_CD_POINTS: usize = 2048;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("no items to evaluate")]
    NoItems,
    #[error("sampling: {0}")]
    Sample(#[from] SampleError),
}

/// Positionwise comparison of one prediction with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePairEval {
    pub cmd_bits: Vec<bool>,
    /// `(position, slot index, within tolerance)` for each used slot at
    /// positions whose curve or extrude command matches.
    pub param_bits: Vec<(usize, usize, bool)>,
}

impl SequencePairEval {
    pub fn new(pred: &CadSequence, gt: &CadSequence, eta: i16) -> Self {
        let mut cmd_bits = Vec::with_capacity(MAX_COMMANDS);
        let mut param_bits = Vec::new();
        for (p, (a, b)) in pred.commands().iter().zip(gt.commands()).enumerate() {
            let same = a.kind() == b.kind();
            cmd_bits.push(same);
            if same && !matches!(b.kind(), CommandType::Sol | CommandType::Eos) {
                for &s in b.kind().used_slots() {
                    let ok = (a.level(s) - b.level(s)).abs() <= eta;
                    param_bits.push((p, s.index(), ok));
                }
            }
        }
        SequencePairEval { cmd_bits, param_bits }
    }

    pub fn acc_cmd(&self) -> f64 {
        self.cmd_bits.iter().filter(|&&b| b).count() as f64 / self.cmd_bits.len() as f64
    }

    /// Absent when no position has a matching parameterized command.
    pub fn acc_para(&self) -> Option<f64> {
        if self.param_bits.is_empty() {
            return None;
        }
        Some(self.param_bits.iter().filter(|b| b.2).count() as f64 / self.param_bits.len() as f64)
    }
}

pub fn command_accuracy(pred: &CadSequence, gt: &CadSequence) -> f64 {
    SequencePairEval::new(pred, gt, 0).acc_cmd()
}

pub fn parameter_accuracy(pred: &CadSequence, gt: &CadSequence, eta: i16) -> Option<f64> {
    SequencePairEval::new(pred, gt, eta).acc_para()
}

/// Order-independent mean: values are summed in sorted order.
fn stable_mean(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean per-item command accuracy.
pub fn acc_cmd(preds: &[CadSequence], gts: &[CadSequence]) -> f64 {
    stable_mean(preds.iter().zip(gts).map(|(p, g)| command_accuracy(p, g)).collect()).unwrap_or(0.0)
}

/// Mean per-item parameter accuracy over items where it is defined.
pub fn acc_para(preds: &[CadSequence], gts: &[CadSequence], eta: i16) -> f64 {
    stable_mean(preds.iter().zip(gts).filter_map(|(p, g)| parameter_accuracy(p, g, eta)).collect()).unwrap_or(0.0)
}

pub fn invalid_rate(seqs: &[CadSequence]) -> Result<f64, MetricsError> {
    if seqs.is_empty() {
        return Err(MetricsError::NoItems);
    }
    Ok(seqs.iter().filter(|s| !check_validity(s).valid).count() as f64 / seqs.len() as f64)
}

/// Lower middle for even counts.
pub fn median_lower(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Some(s[(s.len() - 1) / 2])
}

/// Centers and scales both clouds by the ground truth's bounding box so
/// its longest side is 1.
pub fn normalize_pair(pred: &mut [Vec3], gt: &mut [Vec3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in gt.iter() {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let c = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let ext = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max).max(1e-12);
    for p in pred.iter_mut().chain(gt.iter_mut()) {
        for k in 0..3 {
            p[k] = (p[k] - c[k]) / ext;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub eta: i16,
    pub cd_points: usize,
    pub cd_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { eta: DEFAULT_ETA, cd_points: DEFAULT_CD_POINTS, cd_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEval {
    pub name: String,
    pub acc_cmd: f64,
    pub acc_para: Option<f64>,
    pub valid: bool,
    /// Present when both prediction and ground truth compile.
    pub cd: Option<f64>,
}

fn compiled_points(seq: &CadSequence, cfg: &EvalConfig) -> Option<Vec<Vec3>> {
    let solid = compile_solid(seq).ok()?;
    sample_surface_points(&solid, cfg.cd_points, cfg.cd_seed).ok()
}

pub fn evaluate_item(name: &str, pred: &CadSequence, gt: &CadSequence, cfg: &EvalConfig) -> ItemEval {
    let pair = SequencePairEval::new(pred, gt, cfg.eta);
    let valid = check_validity(pred).valid;
    let cd = if valid {
        match (compiled_points(pred, cfg), compiled_points(gt, cfg)) {
            (Some(mut p), Some(mut q)) => {
                normalize_pair(&mut p, &mut q);
                chamfer_distance(&p, &q).ok()
            }
            _ => None,
        }
    } else {
        None
    };
    ItemEval { name: name.to_string(), acc_cmd: pair.acc_cmd(), acc_para: pair.acc_para(), valid, cd }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    /// Percentages.
    pub acc_cmd: f64,
    pub acc_para: Option<f64>,
    pub med_cd: Option<f64>,
    pub med_cd_x100: Option<f64>,
    pub invalid_rate: f64,
    pub n_items: usize,
    pub n_cd: usize,
    pub eta: i16,
    pub cd_points: usize,
    pub cd_seed: u64,
}

pub fn aggregate(items: &[ItemEval], cfg: &EvalConfig) -> Result<DatasetReport, MetricsError> {
    if items.is_empty() {
        return Err(MetricsError::NoItems);
    }
    let cds: Vec<f64> = items.iter().filter_map(|i| i.cd).collect();
    let med = median_lower(&cds);
    Ok(DatasetReport {
        acc_cmd: 100.0 * stable_mean(items.iter().map(|i| i.acc_cmd).collect()).unwrap(),
        acc_para: stable_mean(items.iter().filter_map(|i| i.acc_para).collect()).map(|v| 100.0 * v),
        med_cd: med,
        med_cd_x100: med.map(|m| 100.0 * m),
        invalid_rate: items.iter().filter(|i| !i.valid).count() as f64 / items.len() as f64,
        n_items: items.len(),
        n_cd: cds.len(),
        eta: cfg.eta,
        cd_points: cfg.cd_points,
        cd_seed: cfg.cd_seed,
    })
}

impl DatasetReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table: Acc_cmd, Acc_para, Med CD (×10²), IR.
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"));
        let cells = [
            format!("{:.2}", self.acc_cmd),
            opt(self.acc_para, 2),
            opt(self.med_cd_x100, 3),
            format!("{:.2}", 100.0 * self.invalid_rate),
        ];
        let heads = ["Acc_cmd", "Acc_para", "Med CD", "IR"];
        let w: Vec<usize> = heads.iter().zip(&cells).map(|(h, c)| h.len().max(c.len())).collect();
        let row = |xs: &[String]| xs.iter().zip(&w).map(|(x, w)| format!("{x:>w$}")).collect::<Vec<_>>().join("  ");
        format!("{}\n{}\n", row(&heads.map(String::from)), row(&cells))
    }
}
