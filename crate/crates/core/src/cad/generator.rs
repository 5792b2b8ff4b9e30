//! Procedural generator of compilable sketch-extrude sequences.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CadError, CadSequence, Command, CommandType, ParamRangeTable, Result, Slot, MAX_COMMANDS};
use crate::compiler::{check_validity, plane_frame};

/// Inclusive bounds for the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub loops_per_sketch: (usize, usize),
    pub curves_per_loop: (usize, usize),
    pub sketch_groups: (usize, usize),
    pub max_attempts: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            loops_per_sketch: (1, 3),
            curves_per_loop: (1, 6),
            sketch_groups: (1, 3),
            max_attempts: 1000,
        }
    }
}

impl GeneratorConfig {
    fn validate(&self) -> Result<()> {
        let pairs = [
            ("loops_per_sketch", self.loops_per_sketch),
            ("curves_per_loop", self.curves_per_loop),
            ("sketch_groups", self.sketch_groups),
        ];
        for (name, (lo, hi)) in pairs {
            if lo == 0 || lo > hi {
                return Err(CadError::GeneratorBounds(format!("{name} = ({lo}, {hi})")));
            }
        }
        let min_len = self.sketch_groups.0 * (self.loops_per_sketch.0 * (1 + self.curves_per_loop.0) + 1);
        if min_len > MAX_COMMANDS {
            return Err(CadError::GeneratorBounds(format!(
                "smallest sequence needs {min_len} commands, capacity is {MAX_COMMANDS}"
            )));
        }
        if self.max_attempts == 0 {
            return Err(CadError::GeneratorBounds("max_attempts = 0".into()));
        }
        Ok(())
    }
}

/// Deterministic in `seed`; retries until the checker accepts the result.
pub fn generate_random_sequence(seed: u64, config: &GeneratorConfig) -> Result<CadSequence> {
    config.validate()?;
    let table = ParamRangeTable::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..config.max_attempts {
        let Some(commands) = draft(&mut rng, config, &table) else { continue };
        let Ok(seq) = CadSequence::new(commands) else { continue };
        if check_validity(&seq).valid {
            return Ok(seq);
        }
    }
    Err(CadError::GeneratorExhausted { attempts: config.max_attempts })
}

fn pick(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

/// A curve in real sketch coordinates.
enum Curve {
    Line([f64; 2]),
    Arc([f64; 2], f64),
    Circle([f64; 2], f64),
}

fn draft(rng: &mut ChaCha8Rng, config: &GeneratorConfig, table: &ParamRangeTable) -> Option<Vec<Command>> {
    let groups = pick(rng, config.sketch_groups);
    let mut out = Vec::new();
    for g in 0..groups {
        let budget = MAX_COMMANDS - out.len();
        let mut group = draft_group(rng, config, budget)?;
        if group.is_empty() {
            break;
        }
        let mut cmds = Vec::new();
        for lp in group.drain(..) {
            cmds.push(Command::sol());
            for curve in lp {
                cmds.push(quantize_curve(&curve, table)?);
            }
        }
        cmds.push(draft_extrude(rng, g, table)?);
        if out.len() + cmds.len() > MAX_COMMANDS {
            break;
        }
        out.extend(cmds);
    }
    (!out.is_empty()).then_some(out)
}

fn draft_group(rng: &mut ChaCha8Rng, config: &GeneratorConfig, budget: usize) -> Option<Vec<Vec<Curve>>> {
    // Room for the extrude plus at least SOL + one curve.
    if budget < 3 {
        return Some(Vec::new());
    }
    let mut remaining = budget - 1;
    let loops = pick(rng, config.loops_per_sketch);
    let center = [0.5, 0.5];
    let radius = rng.random_range(0.3..0.47);
    let k = pick(rng, config.curves_per_loop).min(remaining - 1);
    let (outer, inner_radius) = polygon_loop(rng, center, radius, k, true);
    remaining -= 1 + outer.len();
    let mut result = vec![outer];

    let mut holes: Vec<([f64; 2], f64)> = Vec::new();
    for _ in 1..loops {
        if remaining < 2 {
            break;
        }
        let placed = (0..20).find_map(|_| {
            let rh = rng.random_range(0.04..(0.35 * inner_radius).max(0.045));
            let reach = inner_radius - rh - 0.03;
            if reach <= 0.0 {
                return None;
            }
            let ang = rng.random_range(0.0..TAU);
            let d = rng.random_range(0.0..reach);
            let p = [center[0] + d * ang.cos(), center[1] + d * ang.sin()];
            let clear = holes
                .iter()
                .all(|(q, rq)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() > rh + rq + 0.03);
            clear.then_some((p, rh))
        });
        let Some((p, rh)) = placed else { break };
        let k = pick(rng, config.curves_per_loop).min(remaining - 1);
        let (hole, _) = polygon_loop(rng, p, rh, k, false);
        remaining -= 1 + hole.len();
        holes.push((p, rh));
        result.push(hole);
    }
    Some(result)
}

/// A convex loop inscribed in the circle `(center, radius)`. Returns the
/// curves and a radius guaranteed to lie inside the loop.
fn polygon_loop(rng: &mut ChaCha8Rng, center: [f64; 2], radius: f64, k: usize, allow_rect: bool) -> (Vec<Curve>, f64) {
    if k == 1 {
        return (vec![Curve::Circle(center, radius)], radius);
    }
    if k == 4 && allow_rect && rng.random_bool(0.5) {
        let w = rng.random_range(0.45..0.95) * radius;
        let h = rng.random_range(0.45..0.95) * radius;
        let pts = [
            [center[0] + w, center[1] - h],
            [center[0] + w, center[1] + h],
            [center[0] - w, center[1] + h],
            [center[0] - w, center[1] - h],
        ];
        return (pts.iter().map(|&p| Curve::Line(p)).collect(), w.min(h));
    }
    // Sorted angles with a minimum gap; two-point loops sit roughly opposite.
    let start = rng.random_range(0.0..TAU);
    let min_gap = 0.5f64.min(TAU / k as f64 * 0.6);
    let mut gaps: Vec<f64> = (0..k).map(|_| rng.random_range(1.0..2.0)).collect();
    let total: f64 = gaps.iter().sum();
    let free = TAU - min_gap * k as f64;
    for g in &mut gaps {
        *g = min_gap + *g / total * free;
    }
    let mut angles = Vec::with_capacity(k);
    let mut a = start;
    for g in &gaps {
        a += g;
        angles.push(a);
    }
    let mut curves = Vec::with_capacity(k);
    for (i, &ang) in angles.iter().enumerate() {
        let end = [center[0] + radius * ang.cos(), center[1] + radius * ang.sin()];
        // The curve ending at `ang` covers the gap just before it.
        let sweep = gaps[i];
        // Two-curve loops need at least one arc to enclose anything.
        let make_arc = match (k, i) {
            (2, 0) => true,
            (2, _) => rng.random_bool(0.5),
            _ => rng.random_bool(0.3),
        };
        if make_arc && sweep < PI * 1.5 {
            curves.push(Curve::Arc(end, sweep));
        } else {
            curves.push(Curve::Line(end));
        }
    }
    let max_gap = gaps.iter().cloned().fold(0.0, f64::max).min(PI);
    (curves, radius * (max_gap / 2.0).cos().max(0.35))
}

fn quantize_curve(curve: &Curve, table: &ParamRangeTable) -> Option<Command> {
    let q = |slot, v| table.quantize(slot, v).ok();
    let cmd = match *curve {
        Curve::Line([x, y]) => Command::new(CommandType::Line, &[q(Slot::X, x)?, q(Slot::Y, y)?]),
        Curve::Arc([x, y], sweep) => Command::new(
            CommandType::Arc,
            &[q(Slot::X, x)?, q(Slot::Y, y)?, q(Slot::Alpha, sweep)?, 1],
        ),
        Curve::Circle([x, y], r) => {
            Command::new(CommandType::Circle, &[q(Slot::X, x)?, q(Slot::Y, y)?, q(Slot::Radius, r)?])
        }
    };
    cmd.ok()
}

fn draft_extrude(rng: &mut ChaCha8Rng, group: usize, table: &ParamRangeTable) -> Option<Command> {
    let q = |slot, v| table.quantize(slot, v).ok();
    let theta = if rng.random_bool(0.4) { 0.0 } else { rng.random_range(0.0..PI) };
    let phi = if rng.random_bool(0.4) { 0.0 } else { rng.random_range(-PI..PI) };
    let gamma = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(-PI..PI) };
    let s = rng.random_range(0.5..1.0);
    let levels_ang = [q(Slot::Theta, theta)?, q(Slot::Phi, phi)?, q(Slot::Gamma, gamma)?];
    // Place the sketch center near the origin using the quantized frame.
    let deq = |slot: Slot, l: i16| table.dequantize(slot, l as i64).unwrap();
    let frame = plane_frame(
        deq(Slot::Theta, levels_ang[0]),
        deq(Slot::Phi, levels_ang[1]),
        deq(Slot::Gamma, levels_ang[2]),
        [0.0; 3],
    );
    let mut p = [0.0; 3];
    for (i, pi) in p.iter_mut().enumerate() {
        let c = rng.random_range(-0.15..0.15);
        *pi = c - s * 0.5 * (frame.u[i] + frame.v[i]);
    }
    let extent = if rng.random_bool(0.6) { 0 } else if rng.random_bool(0.5) { 1 } else { 2 };
    let e1 = rng.random_range(0.15..0.6);
    let e2 = if extent == 2 { rng.random_range(0.1..0.4) } else { 0.0 };
    let boolean = if group == 0 {
        0
    } else {
        let r: f64 = rng.random();
        if r < 0.5 {
            1
        } else if r < 0.7 {
            0
        } else {
            2
        }
    };
    Command::new(
        CommandType::Extrude,
        &[
            levels_ang[0],
            levels_ang[1],
            levels_ang[2],
            q(Slot::Px, p[0])?,
            q(Slot::Py, p[1])?,
            q(Slot::Pz, p[2])?,
            q(Slot::Scale, s)?,
            q(Slot::E1, e1)?,
            q(Slot::E2, e2)?,
            boolean,
            extent,
        ],
    )
    .ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let c = GeneratorConfig::default();
        assert_eq!(generate_random_sequence(7, &c).unwrap(), generate_random_sequence(7, &c).unwrap());
        assert_ne!(generate_random_sequence(7, &c).unwrap(), generate_random_sequence(8, &c).unwrap());
    }

    #[test]
    fn rejects_impossible_bounds() {
        let c = GeneratorConfig { loops_per_sketch: (3, 3), curves_per_loop: (6, 6), sketch_groups: (3, 3), ..Default::default() };
        assert!(matches!(generate_random_sequence(1, &c), Err(CadError::GeneratorBounds(_))));
        let c = GeneratorConfig { curves_per_loop: (4, 2), ..Default::default() };
        assert!(generate_random_sequence(1, &c).is_err());
    }

    #[test]
    fn many_seeds_valid_and_bounded() {
        let c = GeneratorConfig::default();
        for seed in 0..500 {
            let s = generate_random_sequence(seed, &c).unwrap();
            assert!(s.logical_length() <= MAX_COMMANDS);
            assert!(check_validity(&s).valid, "seed {seed}");
        }
    }
}
