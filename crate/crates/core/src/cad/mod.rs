//! Sketch-extrude command IR.
//!
//! A [`CadSequence`] is a fixed-length list of [`Command`]s. Every command
//! carries a 16-slot [`ParamVector`] of 8-bit quantized levels; slots the
//! command does not use hold [`UNUSED`].

mod generator;
mod json;
mod quant;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use generator::{generate_random_sequence, GeneratorConfig};
pub use json::{describe_sequence, parse_sequence, parse_sequence_lenient, parse_sequence_with, serialize_sequence, unit_square_json};
pub use quant::{dequantize_param, quantize_param, ParamRange, ParamRangeTable};

/// Padded sequence length.
pub const MAX_COMMANDS: usize = 60;
/// Number of parameter slots per command.
pub const NUM_PARAMS: usize = 16;
/// Number of quantization levels for continuous parameters.
pub const NUM_LEVELS: usize = 256;
/// One-hot width of a parameter slot (levels plus the unused bin).
pub const PARAM_BINS: usize = NUM_LEVELS + 1;
/// One-hot bin that encodes an unused slot.
pub const UNUSED_BIN: usize = NUM_LEVELS;
/// IR-level sentinel for an unused slot.
pub const UNUSED: i16 = -1;
/// Number of command types.
pub const NUM_COMMAND_TYPES: usize = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CadError {
    #[error("parameter value {value} for slot {slot} is not finite")]
    NonFinite { slot: Slot, value: f64 },
    #[error("parameter value {value} for slot {slot} is outside [{lo}, {hi}] beyond tolerance")]
    OutOfRange { slot: Slot, value: f64, lo: f64, hi: f64 },
    #[error("level {level} for slot {slot} is outside 0..=255")]
    BadLevel { slot: Slot, level: i64 },
    #[error("discrete slot {slot} accepts 0..={max}, got {value}")]
    BadDiscrete { slot: Slot, value: i64, max: i64 },
    #[error("json: {0}")]
    Json(String),
    #[error("command {index}: unknown command name `{name}`")]
    UnknownCommand { index: usize, name: String },
    #[error("command {index} ({cmd}): {message}")]
    Arity { index: usize, cmd: CommandType, message: String },
    #[error("command {index} ({cmd}): curve appears before any SOL in its sketch group")]
    MissingSol { index: usize, cmd: CommandType },
    #[error("command {index}: sketch group opened here is not terminated by an EXTRUDE")]
    MissingExtrude { index: usize },
    #[error("command {index}: EXTRUDE without a preceding sketch")]
    EmptySketch { index: usize },
    #[error("command {index}: EOS is not allowed inside the command list")]
    InteriorEos { index: usize },
    #[error("sequence has {len} commands, capacity is {MAX_COMMANDS}")]
    TooLong { len: usize },
    #[error("generator bounds invalid: {0}")]
    GeneratorBounds(String),
    #[error("generator exhausted {attempts} attempts without a valid sequence")]
    GeneratorExhausted { attempts: usize },
}

pub type Result<T> = std::result::Result<T, CadError>;

/// Command alphabet. The discriminant is the one-hot tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CommandType {
    Sol = 0,
    Line = 1,
    Arc = 2,
    Circle = 3,
    Extrude = 4,
    Eos = 5,
}

impl CommandType {
    pub const ALL: [CommandType; NUM_COMMAND_TYPES] = [
        CommandType::Sol,
        CommandType::Line,
        CommandType::Arc,
        CommandType::Circle,
        CommandType::Extrude,
        CommandType::Eos,
    ];

    pub fn tag(self) -> usize {
        self as usize
    }

    pub fn from_tag(tag: usize) -> Option<Self> {
        Self::ALL.get(tag).copied()
    }

    /// Short name used in the JSON schema.
    pub fn json_name(self) -> &'static str {
        match self {
            CommandType::Sol => "SOL",
            CommandType::Line => "L",
            CommandType::Arc => "A",
            CommandType::Circle => "R",
            CommandType::Extrude => "E",
            CommandType::Eos => "EOS",
        }
    }

    pub fn from_json_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.json_name() == name)
    }

    /// Slots this command uses, in slot order.
    pub fn used_slots(self) -> &'static [Slot] {
        use Slot::*;
        match self {
            CommandType::Sol | CommandType::Eos => &[],
            CommandType::Line => &[X, Y],
            CommandType::Arc => &[X, Y, Alpha, Ccw],
            CommandType::Circle => &[X, Y, Radius],
            CommandType::Extrude => &[
                Theta, Phi, Gamma, Px, Py, Pz, Scale, E1, E2, Boolean, Extent,
            ],
        }
    }

    pub fn uses(self, slot: Slot) -> bool {
        self.used_slots().contains(&slot)
    }

    pub fn is_curve(self) -> bool {
        matches!(self, CommandType::Line | CommandType::Arc | CommandType::Circle)
    }
}

impl fmt::Display for CommandType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.json_name())
    }
}

/// Parameter slot, in the fixed vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    X = 0,
    Y = 1,
    Alpha = 2,
    Ccw = 3,
    Radius = 4,
    Theta = 5,
    Phi = 6,
    Gamma = 7,
    Px = 8,
    Py = 9,
    Pz = 10,
    Scale = 11,
    E1 = 12,
    E2 = 13,
    Boolean = 14,
    Extent = 15,
}

impl Slot {
    pub const ALL: [Slot; NUM_PARAMS] = [
        Slot::X,
        Slot::Y,
        Slot::Alpha,
        Slot::Ccw,
        Slot::Radius,
        Slot::Theta,
        Slot::Phi,
        Slot::Gamma,
        Slot::Px,
        Slot::Py,
        Slot::Pz,
        Slot::Scale,
        Slot::E1,
        Slot::E2,
        Slot::Boolean,
        Slot::Extent,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Field name in the JSON schema.
    pub fn json_name(self) -> &'static str {
        match self {
            Slot::X => "x",
            Slot::Y => "y",
            Slot::Alpha => "alpha",
            Slot::Ccw => "ccw",
            Slot::Radius => "r",
            Slot::Theta => "theta",
            Slot::Phi => "phi",
            Slot::Gamma => "gamma",
            Slot::Px => "px",
            Slot::Py => "py",
            Slot::Pz => "pz",
            Slot::Scale => "s",
            Slot::E1 => "e1",
            Slot::E2 => "e2",
            Slot::Boolean => "bool",
            Slot::Extent => "extent",
        }
    }

    /// Discrete slots carry small integers instead of quantized levels.
    pub fn discrete_max(self) -> Option<i16> {
        match self {
            Slot::Ccw => Some(1),
            Slot::Boolean => Some(3),
            Slot::Extent => Some(2),
            _ => None,
        }
    }

    pub fn is_continuous(self) -> bool {
        self.discrete_max().is_none()
    }

    /// Largest legal level for this slot.
    pub fn max_level(self) -> i16 {
        self.discrete_max().unwrap_or((NUM_LEVELS - 1) as i16)
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.json_name())
    }
}

/// Boolean combination of an extruded body with the accumulated solid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BooleanOp {
    NewBody,
    Join,
    Cut,
    Intersect,
}

impl BooleanOp {
    pub fn from_level(level: i16) -> Option<Self> {
        match level {
            0 => Some(BooleanOp::NewBody),
            1 => Some(BooleanOp::Join),
            2 => Some(BooleanOp::Cut),
            3 => Some(BooleanOp::Intersect),
            _ => None,
        }
    }
}

/// How the extrusion distances are applied along the plane normal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtentType {
    OneSide,
    Symmetric,
    TwoSides,
}

impl ExtentType {
    pub fn from_level(level: i16) -> Option<Self> {
        match level {
            0 => Some(ExtentType::OneSide),
            1 => Some(ExtentType::Symmetric),
            2 => Some(ExtentType::TwoSides),
            _ => None,
        }
    }
}

/// Sixteen quantized parameter slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamVector([i16; NUM_PARAMS]);

impl ParamVector {
    pub fn unused() -> Self {
        ParamVector([UNUSED; NUM_PARAMS])
    }

    pub fn get(&self, slot: Slot) -> i16 {
        self.0[slot.index()]
    }

    pub fn set(&mut self, slot: Slot, level: i16) {
        self.0[slot.index()] = level;
    }

    pub fn as_array(&self) -> &[i16; NUM_PARAMS] {
        &self.0
    }

    /// One-hot bin for a slot: the level, or [`UNUSED_BIN`].
    pub fn bin(&self, slot: Slot) -> usize {
        let v = self.get(slot);
        if v < 0 {
            UNUSED_BIN
        } else {
            v as usize
        }
    }
}

/// One command line `(type, params)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Command {
    kind: CommandType,
    params: ParamVector,
}

impl Command {
    /// Builds a command from the levels of its used slots, in slot order.
    pub fn new(kind: CommandType, levels: &[i16]) -> Result<Self> {
        let used = kind.used_slots();
        if levels.len() != used.len() {
            return Err(CadError::Arity {
                index: 0,
                cmd: kind,
                message: format!("expected {} levels, got {}", used.len(), levels.len()),
            });
        }
        let mut params = ParamVector::unused();
        for (&slot, &level) in used.iter().zip(levels) {
            check_level(slot, level as i64)?;
            params.set(slot, level);
        }
        Ok(Command { kind, params })
    }

    /// Validates an arbitrary parameter vector against the used-mask.
    pub fn from_params(kind: CommandType, params: ParamVector) -> Result<Self> {
        for slot in Slot::ALL {
            let v = params.get(slot);
            if kind.uses(slot) {
                check_level(slot, v as i64)?;
            } else if v != UNUSED {
                return Err(CadError::Arity {
                    index: 0,
                    cmd: kind,
                    message: format!("slot {slot} must be unused"),
                });
            }
        }
        Ok(Command { kind, params })
    }

    pub fn sol() -> Self {
        Command { kind: CommandType::Sol, params: ParamVector::unused() }
    }

    pub fn eos() -> Self {
        Command { kind: CommandType::Eos, params: ParamVector::unused() }
    }

    pub fn kind(&self) -> CommandType {
        self.kind
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn level(&self, slot: Slot) -> i16 {
        self.params.get(slot)
    }

    /// Dequantized value of a used continuous slot, or the raw integer for
    /// discrete slots.
    pub fn value(&self, slot: Slot, table: &ParamRangeTable) -> f64 {
        let level = self.level(slot);
        if slot.is_continuous() {
            table.dequantize(slot, level as i64).unwrap_or(f64::NAN)
        } else {
            level as f64
        }
    }

    /// Levels of the used slots, in slot order.
    pub fn used_levels(&self) -> Vec<i16> {
        self.kind.used_slots().iter().map(|&s| self.level(s)).collect()
    }

    /// One-hot encoding: a 6-vector over command tags and a 16×257 matrix
    /// (row-major) over parameter bins.
    pub fn onehot(&self) -> ([f64; NUM_COMMAND_TYPES], Vec<f64>) {
        let mut kind = [0.0; NUM_COMMAND_TYPES];
        kind[self.kind.tag()] = 1.0;
        let mut params = vec![0.0; NUM_PARAMS * PARAM_BINS];
        for slot in Slot::ALL {
            params[slot.index() * PARAM_BINS + self.params.bin(slot)] = 1.0;
        }
        (kind, params)
    }
}

fn check_level(slot: Slot, level: i64) -> Result<()> {
    if let Some(max) = slot.discrete_max() {
        if !(0..=max as i64).contains(&level) {
            return Err(CadError::BadDiscrete { slot, value: level, max: max as i64 });
        }
    } else if !(0..NUM_LEVELS as i64).contains(&level) {
        return Err(CadError::BadLevel { slot, level });
    }
    Ok(())
}

/// A padded command sequence of exactly [`MAX_COMMANDS`] entries.
///
/// Sequences built with [`CadSequence::new`] satisfy the sketch grammar.
/// [`CadSequence::from_raw`] accepts anything padding-consistent, which is
/// what model decoders produce; the checker reports grammar problems for
/// those instead of rejecting them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CadSequence {
    commands: Vec<Command>,
    logical_length: usize,
}

impl CadSequence {
    /// Grammar-checked construction from the logical (unpadded) commands.
    pub fn new(commands: Vec<Command>) -> Result<Self> {
        validate_grammar(&commands)?;
        Self::padded(commands)
    }

    /// Padding without grammar checks. Everything from the first EOS on is
    /// replaced by EOS padding.
    pub fn from_raw(mut commands: Vec<Command>) -> Self {
        if let Some(first_eos) = commands.iter().position(|c| c.kind == CommandType::Eos) {
            commands.truncate(first_eos);
        }
        commands.truncate(MAX_COMMANDS);
        Self::padded(commands).expect("length already bounded")
    }

    pub fn empty() -> Self {
        Self::from_raw(Vec::new())
    }

    fn padded(mut commands: Vec<Command>) -> Result<Self> {
        if commands.len() > MAX_COMMANDS {
            return Err(CadError::TooLong { len: commands.len() });
        }
        let logical_length = commands.len();
        commands.resize(MAX_COMMANDS, Command::eos());
        Ok(CadSequence { commands, logical_length })
    }

    pub fn logical_length(&self) -> usize {
        self.logical_length
    }

    /// All [`MAX_COMMANDS`] entries including padding.
    pub fn commands(&self) -> &[Command] {
        &self.commands
    }

    /// The commands before the first EOS.
    pub fn logical(&self) -> &[Command] {
        &self.commands[..self.logical_length]
    }

    pub fn is_grammatical(&self) -> bool {
        validate_grammar(self.logical()).is_ok()
    }
}

/// Checks the SOL / curves / EXTRUDE grouping of an unpadded command list.
pub fn validate_grammar(commands: &[Command]) -> Result<()> {
    if commands.len() > MAX_COMMANDS {
        return Err(CadError::TooLong { len: commands.len() });
    }
    let mut group_start: Option<usize> = None;
    let mut seen_sol = false;
    for (index, cmd) in commands.iter().enumerate() {
        match cmd.kind {
            CommandType::Eos => return Err(CadError::InteriorEos { index }),
            CommandType::Sol => {
                group_start.get_or_insert(index);
                seen_sol = true;
            }
            k if k.is_curve() => {
                if !seen_sol {
                    return Err(CadError::MissingSol { index, cmd: k });
                }
            }
            CommandType::Extrude => {
                if group_start.is_none() {
                    return Err(CadError::EmptySketch { index });
                }
                group_start = None;
                seen_sol = false;
            }
            _ => unreachable!(),
        }
    }
    if let Some(index) = group_start {
        return Err(CadError::MissingExtrude { index });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(x: i16, y: i16) -> Command {
        Command::new(CommandType::Line, &[x, y]).unwrap()
    }

    #[test]
    fn tags_are_stable() {
        for (i, c) in CommandType::ALL.iter().enumerate() {
            assert_eq!(c.tag(), i);
            assert_eq!(CommandType::from_tag(i), Some(*c));
        }
        assert_eq!(CommandType::Eos.tag(), 5);
    }

    #[test]
    fn used_masks_match_table() {
        assert!(CommandType::Sol.used_slots().is_empty());
        assert!(CommandType::Eos.used_slots().is_empty());
        assert_eq!(CommandType::Line.used_slots(), &[Slot::X, Slot::Y]);
        assert_eq!(CommandType::Arc.used_slots().len(), 4);
        assert_eq!(CommandType::Circle.used_slots(), &[Slot::X, Slot::Y, Slot::Radius]);
        assert_eq!(CommandType::Extrude.used_slots().len(), 11);
    }

    #[test]
    fn command_rejects_bad_levels() {
        assert!(Command::new(CommandType::Line, &[256, 0]).is_err());
        assert!(Command::new(CommandType::Line, &[0]).is_err());
        assert!(Command::new(CommandType::Arc, &[0, 0, 10, 2]).is_err());
        assert!(Command::new(CommandType::Arc, &[0, 0, 10, 1]).is_ok());
    }

    #[test]
    fn onehot_eos_and_line() {
        let (k, p) = Command::eos().onehot();
        assert_eq!(k[5], 1.0);
        for row in 0..NUM_PARAMS {
            assert_eq!(p[row * PARAM_BINS + UNUSED_BIN], 1.0);
        }
        let (k, p) = line(10, 20).onehot();
        assert_eq!(k[1], 1.0);
        assert_eq!(p[10], 1.0);
        assert_eq!(p[PARAM_BINS + 20], 1.0);
    }

    #[test]
    fn grammar_errors() {
        let e = Command::new(CommandType::Extrude, &[0, 128, 128, 128, 128, 128, 128, 191, 128, 0, 0])
            .unwrap();
        assert!(matches!(
            CadSequence::new(vec![line(0, 0)]),
            Err(CadError::MissingSol { index: 0, .. })
        ));
        assert!(matches!(
            CadSequence::new(vec![Command::sol(), line(1, 1)]),
            Err(CadError::MissingExtrude { index: 0 })
        ));
        assert!(matches!(CadSequence::new(vec![e]), Err(CadError::EmptySketch { index: 0 })));
        assert!(CadSequence::new(vec![Command::sol(), line(1, 1), e]).is_ok());
    }

    #[test]
    fn padding_invariant() {
        let s = CadSequence::from_raw(vec![Command::sol(), Command::eos(), line(1, 1)]);
        assert_eq!(s.logical_length(), 1);
        assert_eq!(s.commands().len(), MAX_COMMANDS);
        assert!(s.commands()[1..].iter().all(|c| *c == Command::eos()));
    }
}
