//! Brute-force reference implementations of the fast geometry and metric
//! paths, and a suite that cross-checks each pair.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cad::{
    generate_random_sequence, parse_sequence, unit_square_json, BooleanOp, CadSequence, CommandType, ExtentType,
    GeneratorConfig, ParamRangeTable, Slot,
};
use crate::compiler::{arc_geometry, assemble_loops, check_validity, compile_solid, plane_frame, ring_self_intersects, DOMAIN_HALF};
use crate::geom::{Vec2, Vec3};
use crate::metrics::chamfer_distance;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("polyline is not closed (first and last points differ)")]
    OpenPolyline,
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("sequence does not compile: {0}")]
    Invalid(String),
}

/// Shoelace area of an explicitly closed polyline (last point repeats the
/// first). Positive for counterclockwise loops.
pub fn polygon_area_oracle(pts: &[Vec2]) -> Result<f64, OracleError> {
    if pts.len() < 2 || pts[0] != pts[pts.len() - 1] {
        return Err(OracleError::OpenPolyline);
    }
    let mut acc = 0.0;
    for w in pts.windows(2) {
        acc += w[0][0] * w[1][1] - w[1][0] * w[0][1];
    }
    Ok(acc / 2.0)
}

fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: Vec2, b: Vec2, p: Vec2) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_meet(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

/// All-pairs test over the edges of an implicitly closed ring, skipping
/// edges that share a vertex.
pub fn self_intersection_oracle(ring: &[Vec2]) -> bool {
    let n = ring.len();
    if n < 4 {
        return false;
    }
    for i in 0..n {
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_meet(ring[i], ring[(i + 1) % n], ring[j], ring[(j + 1) % n]) {
                return true;
            }
        }
    }
    false
}

/// Definitional Chamfer distance: mean squared nearest-neighbor distance
/// in both directions, by exhaustive search.
pub fn nn_bruteforce_oracle(p: &[Vec3], q: &[Vec3]) -> Result<f64, OracleError> {
    if p.is_empty() || q.is_empty() {
        return Err(OracleError::EmptyCloud);
    }
    let dir = |a: &[Vec3], b: &[Vec3]| {
        let mut total = 0.0;
        for x in a {
            let mut best = f64::INFINITY;
            for y in b {
                let d = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2);
                if d < best {
                    best = d;
                }
            }
            total += best;
        }
        total / a.len() as f64
    };
    Ok(dir(p, q) + dir(q, p))
}

const ORACLE_ARC_SEGMENTS_PER_TURN: usize = 512;

enum Shape {
    Disk { c: Vec2, r: f64 },
    Ring(Vec<Vec2>),
}

impl Shape {
    fn crossings(&self, p: Vec2) -> bool {
        match self {
            Shape::Disk { c, r } => (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) < r * r,
            Shape::Ring(ring) => crate::geom::point_in_ring(p, ring),
        }
    }

    fn bbox(&self) -> (Vec2, Vec2) {
        match self {
            Shape::Disk { c, r } => ([c[0] - r, c[1] - r], [c[0] + r, c[1] + r]),
            Shape::Ring(ring) => ring.iter().fold(([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]), |(lo, hi), p| {
                ([lo[0].min(p[0]), lo[1].min(p[1])], [hi[0].max(p[0]), hi[1].max(p[1])])
            }),
        }
    }
}

struct Body {
    op: BooleanOp,
    frame: crate::compiler::PlaneFrame,
    scale: f64,
    lo: f64,
    hi: f64,
    shapes: Vec<Shape>,
}

impl Body {
    /// Even-odd over all loops of the sketch, so nested loops are holes.
    fn contains(&self, w: Vec3) -> bool {
        let (p, h) = self.frame.to_local(w, self.scale);
        h >= self.lo && h <= self.hi && self.shapes.iter().filter(|s| s.crossings(p)).count() % 2 == 1
    }

    fn world_bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for s in &self.shapes {
            let (a, b) = s.bbox();
            for p in [a, [a[0], b[1]], [b[0], a[1]], b] {
                for h in [self.lo, self.hi] {
                    let w = self.frame.to_world(p, self.scale, h);
                    for k in 0..3 {
                        lo[k] = lo[k].min(w[k]);
                        hi[k] = hi[k].max(w[k]);
                    }
                }
            }
        }
        (lo, hi)
    }
}

fn bodies(seq: &CadSequence, table: &ParamRangeTable) -> Vec<Body> {
    let mut out = Vec::new();
    let mut shapes = Vec::new();
    let mut curves = Vec::new();
    let flush = |curves: &mut Vec<&crate::cad::Command>, shapes: &mut Vec<Shape>| {
        if curves.is_empty() {
            return;
        }
        let v = |c: &crate::cad::Command, s| c.value(s, table);
        if curves[0].kind() == CommandType::Circle {
            let c = curves[0];
            shapes.push(Shape::Disk { c: [v(c, Slot::X), v(c, Slot::Y)], r: v(c, Slot::Radius) });
        } else {
            let last = curves[curves.len() - 1];
            let mut cursor = [v(last, Slot::X), v(last, Slot::Y)];
            let mut ring = Vec::new();
            for c in curves.iter() {
                let end = [v(c, Slot::X), v(c, Slot::Y)];
                ring.push(cursor);
                if c.kind() == CommandType::Arc {
                    let sweep = v(c, Slot::Alpha);
                    let arc = arc_geometry(cursor, end, sweep, c.level(Slot::Ccw) == 1).expect("valid sequence");
                    let n = ((ORACLE_ARC_SEGMENTS_PER_TURN as f64 * sweep / TAU).ceil() as usize).max(8);
                    for j in 1..n {
                        let a = arc.start_angle + (arc.end_angle - arc.start_angle) * j as f64 / n as f64;
                        ring.push(arc.point_at(a));
                    }
                }
                cursor = end;
            }
            shapes.push(Shape::Ring(ring));
        }
        curves.clear();
    };
    for c in seq.logical() {
        match c.kind() {
            CommandType::Sol => flush(&mut curves, &mut shapes),
            CommandType::Line | CommandType::Arc | CommandType::Circle => curves.push(c),
            CommandType::Extrude => {
                flush(&mut curves, &mut shapes);
                let v = |s| c.value(s, table);
                let (e1, e2) = (v(Slot::E1), v(Slot::E2));
                let (lo, hi) = match ExtentType::from_level(c.level(Slot::Extent)).expect("valid level") {
                    ExtentType::OneSide => (e1.min(0.0), e1.max(0.0)),
                    ExtentType::Symmetric => (-e1.abs(), e1.abs()),
                    ExtentType::TwoSides => (-e2, e1),
                };
                out.push(Body {
                    op: BooleanOp::from_level(c.level(Slot::Boolean)).expect("valid level"),
                    frame: plane_frame(v(Slot::Theta), v(Slot::Phi), v(Slot::Gamma), [v(Slot::Px), v(Slot::Py), v(Slot::Pz)]),
                    scale: v(Slot::Scale),
                    lo,
                    hi,
                    shapes: std::mem::take(&mut shapes),
                });
            }
            CommandType::Eos => {}
        }
    }
    out
}

/// Volume by uniform point sampling over the additive bodies' bounding box
/// (clipped to the modeling domain), with membership from analytic prism
/// tests combined by set algebra in sequence order.
pub fn montecarlo_volume_oracle(seq: &CadSequence, n: usize, seed: u64) -> Result<f64, OracleError> {
    let report = check_validity(seq);
    if !report.valid {
        return Err(OracleError::Invalid(format!("{:?}", report.codes())));
    }
    let bodies = bodies(seq, &ParamRangeTable::default());
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for b in bodies.iter().filter(|b| matches!(b.op, BooleanOp::NewBody | BooleanOp::Join)) {
        let (a, c) = b.world_bounds();
        for k in 0..3 {
            lo[k] = lo[k].min(a[k]).max(-DOMAIN_HALF);
            hi[k] = hi[k].max(c[k]).min(DOMAIN_HALF);
        }
    }
    if (0..3).any(|k| hi[k] <= lo[k]) {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inside = 0usize;
    for _ in 0..n {
        let w = [0, 1, 2].map(|k| rng.random_range(lo[k]..hi[k]));
        let mut s = false;
        for b in &bodies {
            let m = b.contains(w);
            s = match b.op {
                BooleanOp::NewBody | BooleanOp::Join => s || m,
                BooleanOp::Cut => s && !m,
                BooleanOp::Intersect => s && m,
            };
        }
        inside += s as usize;
    }
    let box_volume: f64 = (0..3).map(|k| hi[k] - lo[k]).product();
    Ok(box_volume * inside as f64 / n as f64)
}

/// Fixtures with known volumes: `(name, json, analytic volume)`. The
/// analytic values use the dequantized parameters.
pub fn volume_fixtures() -> Vec<(&'static str, &'static str, f64)> {
    let table = ParamRangeTable::default();
    let q = |s: Slot, v: f64| table.dequantize(s, table.quantize(s, v).unwrap() as i64).unwrap();
    let h = q(Slot::E1, 0.5);
    let s1 = q(Slot::Scale, 1.0);
    let rs = q(Slot::Radius, 0.125) * q(Slot::Scale, 2.0);
    let hole = q(Slot::X, 0.8) - q(Slot::X, 0.2);
    vec![
        ("unit_box", unit_square_json(), s1 * s1 * h),
        ("cylinder", CYLINDER_JSON, std::f64::consts::PI * rs * rs * h),
        ("box_minus_box", BOX_MINUS_BOX_JSON, s1 * s1 * h * (1.0 - hole * hole)),
    ]
}

const CYLINDER_JSON: &str = r#"{"commands":[
  {"cmd":"SOL"},
  {"cmd":"R","x":0.25,"y":0.25,"r":0.125},
  {"cmd":"E","theta":0,"phi":0,"gamma":0,"px":0,"py":0,"pz":0,"s":2,"e1":0.5,"e2":0,"bool":0,"extent":0}
]}"#;

const BOX_MINUS_BOX_JSON: &str = r#"{"commands":[
  {"cmd":"SOL"},
  {"cmd":"L","x":1,"y":0},
  {"cmd":"L","x":1,"y":1},
  {"cmd":"L","x":0,"y":1},
  {"cmd":"L","x":0,"y":0},
  {"cmd":"E","theta":0,"phi":0,"gamma":0,"px":0,"py":0,"pz":0,"s":1,"e1":0.5,"e2":0,"bool":0,"extent":0},
  {"cmd":"SOL"},
  {"cmd":"L","x":0.8,"y":0.2},
  {"cmd":"L","x":0.8,"y":0.8},
  {"cmd":"L","x":0.2,"y":0.8},
  {"cmd":"L","x":0.2,"y":0.2},
  {"cmd":"E","theta":0,"phi":0,"gamma":0,"px":0,"py":0,"pz":0,"s":1,"e1":0.5,"e2":0,"bool":2,"extent":1}
]}"#;

/// Sizes of the shared fixture set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub loops: usize,
    pub cloud_pairs: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { loops: 1000, cloud_pairs: 100, mc_samples: 200_000, seed: 0 }
    }
}

/// Outcome of one fast/brute-force pair on its fixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub cases: usize,
    pub max_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

type CheckFn = fn(&OracleConfig) -> (usize, f64);

/// Registry of `(name, comparison, tolerance)`; each comparison runs the
/// fast path and its brute-force twin and returns the worst disagreement.
pub struct OracleSuite {
    entries: Vec<(&'static str, CheckFn, f64)>,
}

impl Default for OracleSuite {
    fn default() -> Self {
        OracleSuite {
            entries: vec![
                ("polygon_area", check_area as CheckFn, 1e-12),
                ("self_intersection", check_self_intersection, 0.0),
                ("chamfer", check_chamfer, 1e-9),
                ("voxel_volume", check_volume, 0.05),
            ],
        }
    }
}

impl OracleSuite {
    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.0).collect()
    }

    pub fn verify(&self, cfg: &OracleConfig) -> OracleReport {
        let checks = self
            .entries
            .iter()
            .map(|&(name, f, tolerance)| {
                let (cases, max_err) = f(cfg);
                OracleCheck { name: name.into(), cases, max_err, tolerance, pass: max_err <= tolerance }
            })
            .collect();
        OracleReport { checks }
    }
}

/// Random rings on a coarse lattice so collinear and touching edges occur.
pub fn lattice_rings(n: usize, seed: u64) -> Vec<Vec<Vec2>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = rng.random_range(3..10);
            (0..k).map(|_| [rng.random_range(0..8) as f64 / 8.0, rng.random_range(0..8) as f64 / 8.0]).collect()
        })
        .collect()
}

/// Loop vertex rings of generated sequences.
pub fn generated_rings(n: usize, seed: u64) -> Vec<Vec<Vec2>> {
    let table = ParamRangeTable::default();
    let mut out = Vec::new();
    let mut s = seed;
    while out.len() < n {
        let seq = generate_random_sequence(s, &GeneratorConfig::default()).expect("default generator config");
        s += 1;
        let cmds = seq.logical();
        let mut start = 0;
        for (i, c) in cmds.iter().enumerate() {
            if c.kind() == CommandType::Extrude {
                if let Ok(loops) = assemble_loops(&cmds[start..i], start, &table) {
                    out.extend(loops.into_iter().map(|l| l.vertices));
                }
                start = i + 1;
            }
        }
    }
    out.truncate(n);
    out
}

fn check_area(cfg: &OracleConfig) -> (usize, f64) {
    let mut rings = generated_rings(cfg.loops / 2, cfg.seed);
    rings.extend(lattice_rings(cfg.loops - rings.len(), cfg.seed));
    let worst = rings
        .iter()
        .map(|r| {
            let mut closed = r.clone();
            closed.push(r[0]);
            let a = polygon_area_oracle(&closed).expect("closed by construction");
            (crate::geom::ring_area(r) - a).abs() / a.abs().max(1.0)
        })
        .fold(0.0, f64::max);
    (rings.len(), worst)
}

fn check_self_intersection(cfg: &OracleConfig) -> (usize, f64) {
    let mut rings = generated_rings(cfg.loops / 2, cfg.seed + 1);
    rings.extend(lattice_rings(cfg.loops - rings.len(), cfg.seed + 1));
    let mismatches = rings.iter().filter(|r| ring_self_intersects(r) != self_intersection_oracle(r)).count();
    (rings.len(), mismatches as f64)
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, spread: f64, shift: f64) -> Vec<Vec3> {
    (0..n).map(|_| [0, 1, 2].map(|_| shift + rng.random_range(-spread..spread))).collect()
}

fn check_chamfer(cfg: &OracleConfig) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed + 2);
    let mut worst: f64 = 0.0;
    for i in 0..cfg.cloud_pairs {
        let (n, m) = (rng.random_range(1..400), rng.random_range(1..400));
        let p = random_cloud(&mut rng, n, 1.0, 0.0);
        let q = random_cloud(&mut rng, m, if i % 4 == 0 { 0.1 } else { 1.3 }, 0.2);
        let fast = chamfer_distance(&p, &q).expect("nonempty");
        let slow = nn_bruteforce_oracle(&p, &q).expect("nonempty");
        worst = worst.max((fast - slow).abs());
    }
    (cfg.cloud_pairs, worst)
}

/// Worst relative gap between voxel volume and the Monte-Carlo estimate.
fn check_volume(cfg: &OracleConfig) -> (usize, f64) {
    let fixtures = volume_fixtures();
    let worst = fixtures
        .iter()
        .map(|(_, json, _)| {
            let seq = parse_sequence(json).expect("bundled fixture parses");
            let voxel = compile_solid(&seq).expect("bundled fixture compiles").occupancy.volume();
            let mc = montecarlo_volume_oracle(&seq, cfg.mc_samples, cfg.seed).expect("bundled fixture compiles");
            (voxel - mc).abs() / mc
        })
        .fold(0.0, f64::max);
    (fixtures.len(), worst)
}
