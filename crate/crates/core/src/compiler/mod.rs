//! Lowering of command sequences to solids, and the validity checker.
//!
//! The checker is the compiler run to completion with its result dropped,
//! so checker verdicts and compile success agree by construction.

mod frame;
mod obj;
mod sample;
mod sketch;
mod solid;
mod triangulate;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cad::{BooleanOp, CadSequence, Command, CommandType, ExtentType, ParamRangeTable, Slot};

pub use frame::{plane_frame, PlaneFrame};
pub use obj::{export_obj, parse_obj, write_obj, ObjError};
pub use sample::{sample_mesh, sample_surface_points, surface_mesh, SampleError};
pub use sketch::{
    arc_geometry, arc_segments, assemble_loops, classify_profiles, ring_has_foldback, ring_self_intersects,
    rings_touch, segments_touch, ArcGeometry, CurveKind, Loop, LoopCurve, Profile, MIN_ARC_SEGMENTS,
    SEGMENTS_PER_TURN,
};
pub use solid::{Body, Prism, Region, Solid, TriMesh, VoxelGrid, DEFAULT_RESOLUTION, DOMAIN_HALF};
pub use triangulate::triangulate;

/// Checker failure taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FailureCode {
    OpenGrammar,
    ZeroArea,
    SelfIntersect,
    DegenerateCurve,
    DegenerateExtrude,
    EmptyBoolean,
    HoleOutsideOuter,
}

impl fmt::Display for FailureCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub code: FailureCode,
    pub index: usize,
    pub message: String,
}

impl Failure {
    pub fn new(code: FailureCode, index: usize, message: impl Into<String>) -> Self {
        Failure { code, index, message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub valid: bool,
    pub failures: Vec<Failure>,
}

impl ValidityReport {
    fn from_failures(failures: Vec<Failure>) -> Self {
        ValidityReport { valid: failures.is_empty(), failures }
    }

    pub fn codes(&self) -> Vec<FailureCode> {
        self.failures.iter().map(|f| f.code).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CompileError {
    #[error("sequence does not compile: {}", summarize(.0))]
    Invalid(ValidityReport),
}

fn summarize(r: &ValidityReport) -> String {
    r.failures.iter().map(|f| format!("{} at {}: {}", f.code, f.index, f.message)).collect::<Vec<_>>().join("; ")
}

/// Area below which a profile encloses nothing: ten squared quantization
/// steps of the sketch coordinates.
pub fn zero_area_threshold(table: &ParamRangeTable) -> f64 {
    10.0 * table.step(Slot::X).powi(2)
}

/// Thinnest accepted extrusion. `e = 0` quantizes to half a step off zero,
/// so the bound sits just above one full step.
pub fn min_thickness(table: &ParamRangeTable) -> f64 {
    1.25 * table.step(Slot::E1)
}

/// Dry-run compile.
pub fn check_validity(seq: &CadSequence) -> ValidityReport {
    lower(seq, &ParamRangeTable::default(), DEFAULT_RESOLUTION).0
}

pub fn compile_solid(seq: &CadSequence) -> Result<Solid, CompileError> {
    compile_solid_with(seq, &ParamRangeTable::default(), DEFAULT_RESOLUTION)
}

pub fn compile_solid_with(seq: &CadSequence, table: &ParamRangeTable, res: usize) -> Result<Solid, CompileError> {
    match lower(seq, table, res) {
        (r, Some(solid)) if r.valid => Ok(solid),
        (r, _) => Err(CompileError::Invalid(r)),
    }
}

/// Sketch-group commands and the index of the group's first command.
struct Group<'a> {
    start: usize,
    sketch: &'a [Command],
    extrude: &'a Command,
}

fn split_groups(cmds: &[Command]) -> (Vec<Group<'_>>, Vec<Failure>) {
    let mut groups = Vec::new();
    let mut failures = Vec::new();
    let mut start = 0;
    for (i, c) in cmds.iter().enumerate() {
        if c.kind() == CommandType::Extrude {
            groups.push(Group { start, sketch: &cmds[start..i], extrude: c });
            start = i + 1;
        }
    }
    if start < cmds.len() {
        failures.push(Failure::new(FailureCode::OpenGrammar, start, "sketch group has no terminating extrude"));
    }
    if cmds.is_empty() {
        failures.push(Failure::new(FailureCode::OpenGrammar, 0, "empty sequence"));
    }
    (groups, failures)
}

fn lower(seq: &CadSequence, table: &ParamRangeTable, res: usize) -> (ValidityReport, Option<Solid>) {
    let (groups, mut failures) = split_groups(seq.logical());
    let mut prisms = Vec::new();
    for g in &groups {
        match lower_group(g, table) {
            Ok(p) => prisms.push((g.start + g.sketch.len(), p)),
            Err(mut f) => failures.append(&mut f),
        }
    }
    if !failures.is_empty() {
        return (ValidityReport::from_failures(failures), None);
    }

    let mut occupancy = VoxelGrid::new(res);
    let mut bodies = Vec::with_capacity(prisms.len());
    for (index, (op, prism)) in prisms {
        let cells = VoxelGrid::from_prism(res, &prism);
        occupancy.apply(op, &cells);
        if matches!(op, BooleanOp::Cut | BooleanOp::Intersect) && occupancy.is_empty() {
            failures.push(Failure::new(FailureCode::EmptyBoolean, index, format!("{op:?} leaves nothing")));
        }
        let mesh = prism.mesh();
        bodies.push(Body { op, command_index: index, prism, mesh });
    }
    if failures.is_empty() && occupancy.is_empty() {
        failures.push(Failure::new(
            FailureCode::EmptyBoolean,
            bodies.last().map_or(0, |b| b.command_index),
            "solid occupies no cells",
        ));
    }
    if !failures.is_empty() {
        return (ValidityReport::from_failures(failures), None);
    }
    (ValidityReport::from_failures(Vec::new()), Some(Solid { bodies, occupancy }))
}

fn lower_group(g: &Group<'_>, table: &ParamRangeTable) -> Result<(BooleanOp, Prism), Vec<Failure>> {
    let e_index = g.start + g.sketch.len();
    if g.sketch.is_empty() {
        return Err(vec![Failure::new(FailureCode::OpenGrammar, e_index, "extrude without a sketch")]);
    }
    let loops = assemble_loops(g.sketch, g.start, table)?;

    let threshold = zero_area_threshold(table);
    let mut failures = Vec::new();
    for lp in &loops {
        let area = lp.signed_area();
        if area.abs() <= threshold {
            failures.push(Failure::new(
                FailureCode::ZeroArea,
                lp.sol_index,
                format!("loop encloses area {area:.3e}, threshold {threshold:.3e}"),
            ));
        } else if ring_self_intersects(&lp.vertices) || ring_has_foldback(&lp.vertices) {
            failures.push(Failure::new(FailureCode::SelfIntersect, lp.sol_index, "loop crosses itself"));
        }
    }
    if !failures.is_empty() {
        return Err(failures);
    }
    let profiles = classify_profiles(loops)?;
    for p in &profiles {
        if p.signed_area <= threshold {
            failures.push(Failure::new(
                FailureCode::ZeroArea,
                p.outer.sol_index,
                format!("profile net area {:.3e}", p.signed_area),
            ));
        }
    }
    if !failures.is_empty() {
        return Err(failures);
    }

    let e = g.extrude;
    let val = |s| e.value(s, table);
    let (e1, e2) = (val(Slot::E1), val(Slot::E2));
    let extent = ExtentType::from_level(e.level(Slot::Extent)).expect("extent level validated at construction");
    let op = BooleanOp::from_level(e.level(Slot::Boolean)).expect("boolean level validated at construction");
    let (lo, hi) = match extent {
        ExtentType::OneSide => (e1.min(0.0), e1.max(0.0)),
        ExtentType::Symmetric => (-e1.abs(), e1.abs()),
        ExtentType::TwoSides => (-e2, e1),
    };
    let min_t = min_thickness(table);
    if hi - lo < min_t {
        return Err(vec![Failure::new(
            FailureCode::DegenerateExtrude,
            e_index,
            format!("extrusion thickness {:.3e} below {min_t:.3e}", hi - lo),
        )]);
    }
    if e.level(Slot::Scale) == 0 {
        return Err(vec![Failure::new(FailureCode::DegenerateExtrude, e_index, "profile scale is zero")]);
    }
    let frame = plane_frame(val(Slot::Theta), val(Slot::Phi), val(Slot::Gamma), [val(Slot::Px), val(Slot::Py), val(Slot::Pz)]);
    let prism = Prism { frame, scale: val(Slot::Scale), lo, hi, regions: profiles.iter().map(Region::from).collect() };
    Ok((op, prism))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cad::{parse_sequence, unit_square_json};

    fn seq(cmds: Vec<Command>) -> CadSequence {
        CadSequence::from_raw(cmds)
    }

    fn extrude(e1: i16, e2: i16, b: i16, u: i16) -> Command {
        Command::new(CommandType::Extrude, &[0, 128, 128, 128, 128, 128, 128, e1, e2, b, u]).unwrap()
    }

    fn line(x: i16, y: i16) -> Command {
        Command::new(CommandType::Line, &[x, y]).unwrap()
    }

    #[test]
    fn unit_square_valid() {
        let s = parse_sequence(unit_square_json()).unwrap();
        let r = check_validity(&s);
        assert!(r.valid, "{r:?}");
        let solid = compile_solid(&s).unwrap();
        assert!((solid.occupancy.volume() - 0.5).abs() / 0.5 < 0.05);
    }

    #[test]
    fn collinear_is_zero_area() {
        let s = seq(vec![Command::sol(), line(255, 0), line(0, 0), extrude(191, 128, 0, 0)]);
        let r = check_validity(&s);
        assert_eq!(r.codes(), vec![FailureCode::ZeroArea]);
    }

    #[test]
    fn zero_extrude_degenerate() {
        let s = seq(vec![Command::sol(), line(255, 0), line(255, 255), line(0, 255), line(0, 0), extrude(128, 128, 0, 2)]);
        assert_eq!(check_validity(&s).codes(), vec![FailureCode::DegenerateExtrude]);
    }

    #[test]
    fn self_cut_empty() {
        let sq = vec![Command::sol(), line(255, 0), line(255, 255), line(0, 255), line(0, 0)];
        let mut cmds = sq.clone();
        cmds.push(extrude(191, 128, 0, 0));
        cmds.extend(sq);
        cmds.push(extrude(191, 128, 2, 0));
        let r = check_validity(&seq(cmds));
        assert_eq!(r.codes(), vec![FailureCode::EmptyBoolean]);
        assert_eq!(r.failures[0].index, 11);
    }

    #[test]
    fn open_grammar_cases() {
        assert_eq!(check_validity(&CadSequence::empty()).codes(), vec![FailureCode::OpenGrammar]);
        let s = seq(vec![Command::sol(), line(255, 0)]);
        assert_eq!(check_validity(&s).codes(), vec![FailureCode::OpenGrammar]);
        let s = seq(vec![Command::sol(), extrude(191, 128, 0, 0)]);
        assert_eq!(check_validity(&s).codes(), vec![FailureCode::OpenGrammar]);
    }

    #[test]
    fn generated_meshes_match_profile_volume() {
        use crate::cad::{generate_random_sequence, GeneratorConfig};
        use crate::geom::{norm3, ring_area};
        for seed in 0..200 {
            let s = generate_random_sequence(seed, &GeneratorConfig::default()).unwrap();
            let solid = compile_solid(&s).unwrap();
            for b in &solid.bodies {
                let p = &b.prism;
                let area: f64 = p
                    .regions
                    .iter()
                    .map(|r| ring_area(&r.outer) + r.holes.iter().map(|h| ring_area(h)).sum::<f64>())
                    .sum();
                let expect = area * p.scale * p.scale * (p.hi - p.lo);
                let got = b.mesh.signed_volume();
                assert!((got - expect).abs() < 1e-9 * expect.max(1.0), "seed {seed}: {got} vs {expect}");
                assert!((0..b.mesh.triangles.len()).all(|t| norm3(b.mesh.face_normal(t)) > 0.0), "seed {seed}");
            }
        }
    }

    #[test]
    fn report_json_shape() {
        let s = seq(vec![Command::sol(), line(255, 0), line(0, 0), extrude(191, 128, 0, 0)]);
        let v: serde_json::Value = serde_json::from_str(&check_validity(&s).to_json()).unwrap();
        assert_eq!(v["valid"], false);
        assert_eq!(v["failures"][0]["code"], "ZeroArea");
        assert_eq!(v["failures"][0]["index"], 0);
    }
}
