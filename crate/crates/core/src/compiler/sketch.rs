//! Curves, loops and profiles in sketch coordinates.

use std::f64::consts::TAU;

use super::{Failure, FailureCode};
use crate::cad::{Command, CommandType, ParamRangeTable, Slot};
use crate::geom::{dot2, norm2, orient2, point_in_ring, ring_area, sub2, Vec2};

/// Segments per full turn when discretizing arcs and circles.
pub const SEGMENTS_PER_TURN: usize = 32;
/// Fewest segments for any arc.
pub const MIN_ARC_SEGMENTS: usize = 4;

const MIN_CHORD: f64 = 1e-9;
const MIN_HALF_SWEEP_SIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcGeometry {
    pub center: Vec2,
    pub radius: f64,
    pub start_angle: f64,
    /// Signed: larger than `start_angle` for counterclockwise arcs.
    pub end_angle: f64,
}

/// Circle through `start` and `end` subtending `sweep`, traversed
/// counterclockwise when `ccw` is set.
pub fn arc_geometry(start: Vec2, end: Vec2, sweep: f64, ccw: bool) -> Result<ArcGeometry, String> {
    let chord = sub2(end, start);
    let len = norm2(chord);
    if len < MIN_CHORD {
        return Err(format!("arc chord length {len:.3e} is degenerate"));
    }
    let half_sin = (sweep / 2.0).sin();
    if half_sin <= MIN_HALF_SWEEP_SIN {
        return Err(format!("arc sweep {sweep:.6} is degenerate"));
    }
    let radius = len / (2.0 * half_sin);
    // Signed distance from the chord midpoint to the center along the left normal.
    let offset = (len / 2.0) * (sweep / 2.0).cos() / half_sin;
    let left = [-chord[1] / len, chord[0] / len];
    let side = if ccw { 1.0 } else { -1.0 };
    let center = [
        (start[0] + end[0]) / 2.0 + side * offset * left[0],
        (start[1] + end[1]) / 2.0 + side * offset * left[1],
    ];
    let start_angle = (start[1] - center[1]).atan2(start[0] - center[0]);
    let end_angle = start_angle + side * sweep;
    Ok(ArcGeometry { center, radius, start_angle, end_angle })
}

impl ArcGeometry {
    pub fn point_at(&self, angle: f64) -> Vec2 {
        [self.center[0] + self.radius * angle.cos(), self.center[1] + self.radius * angle.sin()]
    }
}

/// Segment count for a sweep of `sweep` radians.
pub fn arc_segments(sweep: f64) -> usize {
    ((SEGMENTS_PER_TURN as f64 * sweep.abs() / TAU).ceil() as usize).max(MIN_ARC_SEGMENTS)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CurveKind {
    Line,
    Arc,
    Circle,
}

/// A dequantized curve with the index of the command it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopCurve {
    pub kind: CurveKind,
    pub command_index: usize,
    pub params: Vec<f64>,
}

/// A closed loop: its curves and the discretized ring (first vertex not
/// repeated).
#[derive(Debug, Clone, PartialEq)]
pub struct Loop {
    pub sol_index: usize,
    pub curves: Vec<LoopCurve>,
    pub vertices: Vec<Vec2>,
}

impl Loop {
    /// The ring with the first vertex repeated at the end.
    pub fn closed_polyline(&self) -> Vec<Vec2> {
        let mut v = self.vertices.clone();
        if let Some(&first) = v.first() {
            v.push(first);
        }
        v
    }

    pub fn signed_area(&self) -> f64 {
        ring_area(&self.vertices)
    }

    pub fn is_circle(&self) -> bool {
        self.curves.len() == 1 && self.curves[0].kind == CurveKind::Circle
    }
}

/// Builds loops from the SOL/curve commands of one sketch group. `offset`
/// is the sequence index of the group's first command.
///
/// Each curve starts where the previous one ended; the first curve of a
/// loop starts at the last curve's endpoint, so rings close exactly.
pub fn assemble_loops(commands: &[Command], offset: usize, table: &ParamRangeTable) -> Result<Vec<Loop>, Vec<Failure>> {
    let mut loops: Vec<(usize, Vec<(usize, &Command)>)> = Vec::new();
    let mut failures = Vec::new();
    for (i, cmd) in commands.iter().enumerate() {
        match cmd.kind() {
            CommandType::Sol => loops.push((offset + i, Vec::new())),
            k if k.is_curve() => match loops.last_mut() {
                Some((_, curves)) => curves.push((offset + i, cmd)),
                None => failures.push(Failure::new(FailureCode::OpenGrammar, offset + i, "curve before SOL")),
            },
            other => failures.push(Failure::new(
                FailureCode::OpenGrammar,
                offset + i,
                format!("unexpected {other} inside a sketch"),
            )),
        }
    }
    let mut out = Vec::new();
    for (sol_index, curves) in loops {
        match build_loop(sol_index, &curves, table) {
            Ok(lp) => out.push(lp),
            Err(f) => failures.push(f),
        }
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(failures)
    }
}

fn build_loop(sol_index: usize, curves: &[(usize, &Command)], table: &ParamRangeTable) -> Result<Loop, Failure> {
    if curves.is_empty() {
        return Err(Failure::new(FailureCode::OpenGrammar, sol_index, "loop has no curves"));
    }
    let has_circle = curves.iter().any(|(_, c)| c.kind() == CommandType::Circle);
    if has_circle && curves.len() > 1 {
        let (idx, _) = curves.iter().find(|(_, c)| c.kind() == CommandType::Circle).unwrap();
        return Err(Failure::new(FailureCode::OpenGrammar, *idx, "a circle must be the only curve of its loop"));
    }
    let val = |c: &Command, s: Slot| c.value(s, table);

    if has_circle {
        let (idx, c) = curves[0];
        let (x, y, r) = (val(c, Slot::X), val(c, Slot::Y), val(c, Slot::Radius));
        if c.level(Slot::Radius) == 0 {
            return Err(Failure::new(FailureCode::DegenerateCurve, idx, "circle radius is zero"));
        }
        let vertices = (0..SEGMENTS_PER_TURN)
            .map(|k| {
                let a = TAU * k as f64 / SEGMENTS_PER_TURN as f64;
                [x + r * a.cos(), y + r * a.sin()]
            })
            .collect();
        return Ok(Loop {
            sol_index,
            curves: vec![LoopCurve { kind: CurveKind::Circle, command_index: idx, params: vec![x, y, r] }],
            vertices,
        });
    }

    let ends: Vec<Vec2> = curves.iter().map(|(_, c)| [val(c, Slot::X), val(c, Slot::Y)]).collect();
    let mut vertices = Vec::new();
    let mut loop_curves = Vec::new();
    let mut cursor = *ends.last().unwrap();
    for (k, &(idx, c)) in curves.iter().enumerate() {
        let end = ends[k];
        vertices.push(cursor);
        match c.kind() {
            CommandType::Line => {
                let len = norm2(sub2(end, cursor));
                if len < MIN_CHORD {
                    return Err(Failure::new(FailureCode::DegenerateCurve, idx, format!("line length {len:.3e}")));
                }
                loop_curves.push(LoopCurve { kind: CurveKind::Line, command_index: idx, params: end.to_vec() });
            }
            CommandType::Arc => {
                let sweep = val(c, Slot::Alpha);
                let ccw = c.level(Slot::Ccw) == 1;
                let arc = arc_geometry(cursor, end, sweep, ccw)
                    .map_err(|m| Failure::new(FailureCode::DegenerateCurve, idx, m))?;
                let n = arc_segments(sweep);
                for j in 1..n {
                    let t = j as f64 / n as f64;
                    vertices.push(arc.point_at(arc.start_angle + t * (arc.end_angle - arc.start_angle)));
                }
                loop_curves.push(LoopCurve {
                    kind: CurveKind::Arc,
                    command_index: idx,
                    params: vec![end[0], end[1], sweep, ccw as u8 as f64],
                });
            }
            _ => unreachable!("circles handled above"),
        }
        cursor = end;
    }
    Ok(Loop { sol_index, curves: loop_curves, vertices })
}

/// Closed-segment intersection test by orientation signs.
pub fn segments_touch(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let d1 = orient2(c, d, a);
    let d2 = orient2(c, d, b);
    let d3 = orient2(a, b, c);
    let d4 = orient2(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    let on = |p: Vec2, q: Vec2, r: Vec2, o: f64| {
        o == 0.0 && r[0] >= p[0].min(q[0]) && r[0] <= p[0].max(q[0]) && r[1] >= p[1].min(q[1]) && r[1] <= p[1].max(q[1])
    };
    on(c, d, a, d1) || on(c, d, b, d2) || on(a, b, c, d3) || on(a, b, d, d4)
}

fn adjacent(i: usize, j: usize, n: usize) -> bool {
    let d = i.abs_diff(j);
    d <= 1 || d == n - 1
}

/// Whether any two non-adjacent edges of the ring touch. Edges are swept in
/// order of their minimum x so only overlapping x-intervals are tested.
pub fn ring_self_intersects(ring: &[Vec2]) -> bool {
    let n = ring.len();
    if n < 4 {
        return false;
    }
    let mut edges: Vec<(f64, f64, usize)> = (0..n)
        .map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            (a[0].min(b[0]), a[0].max(b[0]), i)
        })
        .collect();
    edges.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.2.cmp(&y.2)));
    for (k, &(_, max_x, i)) in edges.iter().enumerate() {
        for &(min_x, _, j) in &edges[k + 1..] {
            if min_x > max_x {
                break;
            }
            if adjacent(i, j, n) {
                continue;
            }
            if segments_touch(ring[i], ring[(i + 1) % n], ring[j], ring[(j + 1) % n]) {
                return true;
            }
        }
    }
    false
}

/// A vertex where the ring reverses direction onto itself.
pub fn ring_has_foldback(ring: &[Vec2]) -> bool {
    let n = ring.len();
    (0..n).any(|i| {
        let (a, b, c) = (ring[(i + n - 1) % n], ring[i], ring[(i + 1) % n]);
        let (ab, bc) = (sub2(b, a), sub2(c, b));
        orient2(a, b, c).abs() <= 1e-14 * (norm2(ab) * norm2(bc)).max(1e-300) && dot2(ab, bc) < 0.0
    })
}

/// Whether two rings' boundaries touch.
pub fn rings_touch(a: &[Vec2], b: &[Vec2]) -> bool {
    let (na, nb) = (a.len(), b.len());
    for i in 0..na {
        let (p, q) = (a[i], a[(i + 1) % na]);
        for j in 0..nb {
            if segments_touch(p, q, b[j], b[(j + 1) % nb]) {
                return true;
            }
        }
    }
    false
}

/// Outer ring (counterclockwise) with its holes (clockwise).
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub outer: Loop,
    pub holes: Vec<Loop>,
    pub signed_area: f64,
}

/// Groups loops into profiles by even-odd containment. Loops nested two or
/// more levels deep, or whose boundaries touch, are rejected.
pub fn classify_profiles(mut loops: Vec<Loop>) -> Result<Vec<Profile>, Vec<Failure>> {
    let n = loops.len();
    let mut failures = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rings_touch(&loops[i].vertices, &loops[j].vertices) {
                failures.push(Failure::new(
                    FailureCode::HoleOutsideOuter,
                    loops[j].sol_index,
                    format!("loop at {} crosses loop at {}", loops[j].sol_index, loops[i].sol_index),
                ));
            }
        }
    }
    if !failures.is_empty() {
        return Err(failures);
    }
    let containers: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && point_in_ring(loops[i].vertices[0], &loops[j].vertices)).collect())
        .collect();
    for (i, c) in containers.iter().enumerate() {
        if c.len() >= 2 {
            failures.push(Failure::new(
                FailureCode::HoleOutsideOuter,
                loops[i].sol_index,
                format!("loop nested {} levels deep", c.len()),
            ));
        }
    }
    if !failures.is_empty() {
        return Err(failures);
    }
    for lp in &mut loops {
        lp.vertices.dedup();
    }
    let mut profiles: Vec<(usize, Profile)> = Vec::new();
    for (i, lp) in loops.iter().enumerate() {
        if containers[i].is_empty() {
            let mut outer = lp.clone();
            if outer.signed_area() < 0.0 {
                outer.vertices.reverse();
            }
            let area = outer.signed_area();
            profiles.push((i, Profile { outer, holes: Vec::new(), signed_area: area }));
        }
    }
    for (i, lp) in loops.iter().enumerate() {
        if let Some(&parent) = containers[i].first() {
            let mut hole = lp.clone();
            if hole.signed_area() > 0.0 {
                hole.vertices.reverse();
            }
            let (_, profile) = profiles.iter_mut().find(|(k, _)| *k == parent).expect("depth-1 parent is outer");
            profile.signed_area += hole.signed_area();
            profile.holes.push(hole);
        }
    }
    Ok(profiles.into_iter().map(|(_, p)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cad::{parse_sequence, unit_square_json};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn semicircle_arc() {
        let a = arc_geometry([0.0, 0.0], [2.0, 0.0], PI, true).unwrap();
        assert!((a.center[0] - 1.0).abs() < 1e-12 && a.center[1].abs() < 1e-12);
        assert!((a.radius - 1.0).abs() < 1e-12);
    }

    #[test]
    fn arc_orientation() {
        // A quarter arc from (1,0) to (0,1), ccw about the origin.
        let a = arc_geometry([1.0, 0.0], [0.0, 1.0], PI / 2.0, true).unwrap();
        assert!(a.center[0].abs() < 1e-12 && a.center[1].abs() < 1e-12);
        let b = arc_geometry([1.0, 0.0], [0.0, 1.0], PI / 2.0, false).unwrap();
        assert!((b.center[0] - 1.0).abs() < 1e-12 && (b.center[1] - 1.0).abs() < 1e-12);
        let end = a.point_at(a.end_angle);
        assert!((end[0]).abs() < 1e-12 && (end[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_arcs() {
        assert!(arc_geometry([0.0, 0.0], [0.0, 0.0], PI / 2.0, true).is_err());
        assert!(arc_geometry([0.0, 0.0], [1.0, 0.0], 0.0, true).is_err());
        assert!(arc_geometry([0.0, 0.0], [1.0, 0.0], TAU, true).is_err());
    }

    #[test]
    fn random_arcs_pass_through_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s = [rng.random::<f64>(), rng.random::<f64>()];
            let e = [rng.random::<f64>(), rng.random::<f64>()];
            let sweep = rng.random_range(0.05..(TAU - 0.05));
            let Ok(a) = arc_geometry(s, e, sweep, rng.random_bool(0.5)) else { continue };
            let ds = norm2(sub2(s, a.center));
            let de = norm2(sub2(e, a.center));
            assert!((ds - a.radius).abs() < 1e-9 * a.radius.max(1.0));
            assert!((de - a.radius).abs() < 1e-9 * a.radius.max(1.0));
            let end = a.point_at(a.end_angle);
            assert!(norm2(sub2(end, e)) < 1e-9 * a.radius.max(1.0));
        }
    }

    #[test]
    fn unit_square_loop() {
        let s = parse_sequence(unit_square_json()).unwrap();
        let loops = assemble_loops(&s.commands()[..5], 0, &ParamRangeTable::default()).unwrap();
        assert_eq!(loops.len(), 1);
        assert_eq!(loops[0].vertices.len(), 4);
        let closed = loops[0].closed_polyline();
        assert_eq!(closed.first(), closed.last());
        assert!((loops[0].signed_area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standalone_circle_and_empty_loop() {
        let circle = Command::new(CommandType::Circle, &[128, 128, 64]).unwrap();
        let loops = assemble_loops(&[Command::sol(), circle], 0, &ParamRangeTable::default()).unwrap();
        assert_eq!(loops[0].vertices.len(), SEGMENTS_PER_TURN);
        let err = assemble_loops(&[Command::sol()], 0, &ParamRangeTable::default()).unwrap_err();
        assert_eq!(err[0].code, FailureCode::OpenGrammar);
    }

    #[test]
    fn sweep_detects_bowtie() {
        let bowtie = [[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(ring_self_intersects(&bowtie));
        let square = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(!ring_self_intersects(&square));
    }

    #[test]
    fn foldback_detected() {
        assert!(ring_has_foldback(&[[0.0, 0.0], [1.0, 0.0], [0.5, 0.0], [0.5, 1.0]]));
        assert!(!ring_has_foldback(&[[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]));
    }
}
