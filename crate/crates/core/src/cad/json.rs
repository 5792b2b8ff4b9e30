//! JSON sequence documents.
//!
//! ```json
//! {"commands":[{"cmd":"SOL"},{"cmd":"L","x":1.0,"y":0.0}, ...]}
//! ```
//!
//! Reals are quantized on ingest. A command may instead carry
//! `"levels":[...]` with raw levels for its used slots in slot order; that is
//! the form [`serialize_sequence`] writes.

use serde_json::{json, Map, Value};

use super::{CadError, CadSequence, Command, CommandType, ParamRangeTable, Result, Slot, MAX_COMMANDS};

/// Unit-square fixture: a 1×1 square extruded by 0.5.
pub fn unit_square_json() -> &'static str {
    r#"{"commands":[
  {"cmd":"SOL"},
  {"cmd":"L","x":1,"y":0},
  {"cmd":"L","x":1,"y":1},
  {"cmd":"L","x":0,"y":1},
  {"cmd":"L","x":0,"y":0},
  {"cmd":"E","theta":0,"phi":0,"gamma":0,"px":0,"py":0,"pz":0,"s":1,"e1":0.5,"e2":0,"bool":0,"extent":0}
]}"#
}

pub fn parse_sequence(text: &str) -> Result<CadSequence> {
    parse_sequence_with(text, &ParamRangeTable::default())
}

pub fn parse_sequence_with(text: &str, table: &ParamRangeTable) -> Result<CadSequence> {
    CadSequence::new(parse_commands(text, table)?)
}

/// Parses without the grammar check, so ill-formed decodes can still be
/// handed to the checker.
pub fn parse_sequence_lenient(text: &str) -> Result<CadSequence> {
    let commands = parse_commands(text, &ParamRangeTable::default())?;
    if commands.len() > MAX_COMMANDS {
        return Err(CadError::TooLong { len: commands.len() });
    }
    Ok(CadSequence::from_raw(commands))
}

fn parse_commands(text: &str, table: &ParamRangeTable) -> Result<Vec<Command>> {
    let doc: Value = serde_json::from_str(text).map_err(|e| CadError::Json(e.to_string()))?;
    let list = doc
        .get("commands")
        .and_then(Value::as_array)
        .ok_or_else(|| CadError::Json("document must be an object with a `commands` array".into()))?;
    list.iter().enumerate().map(|(index, v)| parse_command(index, v, table)).collect()
}

fn parse_command(index: usize, value: &Value, table: &ParamRangeTable) -> Result<Command> {
    let obj = value
        .as_object()
        .ok_or_else(|| CadError::Json(format!("command {index} is not an object")))?;
    let name = obj
        .get("cmd")
        .and_then(Value::as_str)
        .ok_or_else(|| CadError::Json(format!("command {index} has no string `cmd` field")))?;
    let kind = CommandType::from_json_name(name)
        .ok_or_else(|| CadError::UnknownCommand { index, name: name.to_string() })?;
    if kind == CommandType::Eos {
        return Err(CadError::InteriorEos { index });
    }
    let arity = |message: String| CadError::Arity { index, cmd: kind, message };
    let used = kind.used_slots();

    let allowed = |key: &str| key == "cmd" || key == "levels" || used.iter().any(|s| s.json_name() == key);
    if let Some(key) = obj.keys().find(|k| !allowed(k)) {
        return Err(arity(format!("unexpected field `{key}`")));
    }

    let levels = if let Some(raw) = obj.get("levels") {
        if used.iter().any(|s| obj.contains_key(s.json_name())) {
            return Err(arity("`levels` cannot be mixed with named parameters".into()));
        }
        let raw = raw.as_array().ok_or_else(|| arity("`levels` must be an array".into()))?;
        if raw.len() != used.len() {
            return Err(arity(format!("expected {} levels, got {}", used.len(), raw.len())));
        }
        raw.iter()
            .zip(used)
            .map(|(v, &slot)| {
                let level = v.as_i64().ok_or_else(|| arity(format!("level for {slot} is not an integer")))?;
                if level < 0 || level > slot.max_level() as i64 {
                    return Err(CadError::BadLevel { slot, level });
                }
                Ok(level as i16)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        used.iter()
            .map(|&slot| {
                let v = field(obj, slot).ok_or_else(|| arity(format!("missing numeric field `{slot}`")))?;
                table.quantize(slot, v)
            })
            .collect::<Result<Vec<_>>>()?
    };
    Command::new(kind, &levels).map_err(|e| match e {
        CadError::Arity { cmd, message, .. } => CadError::Arity { index, cmd, message },
        other => other,
    })
}

fn field(obj: &Map<String, Value>, slot: Slot) -> Option<f64> {
    obj.get(slot.json_name()).and_then(Value::as_f64)
}

/// Writes the levels form; `parse_sequence` reproduces the input exactly.
pub fn serialize_sequence(seq: &CadSequence) -> String {
    let commands: Vec<Value> = seq
        .logical()
        .iter()
        .map(|c| {
            let levels = c.used_levels();
            if levels.is_empty() {
                json!({ "cmd": c.kind().json_name() })
            } else {
                json!({ "cmd": c.kind().json_name(), "levels": levels })
            }
        })
        .collect();
    serde_json::to_string(&json!({ "commands": commands })).expect("plain json values")
}

/// Reals form, for human inspection.
pub fn describe_sequence(seq: &CadSequence, table: &ParamRangeTable) -> Value {
    let commands: Vec<Value> = seq
        .logical()
        .iter()
        .map(|c| {
            let mut obj = Map::new();
            obj.insert("cmd".into(), json!(c.kind().json_name()));
            for &slot in c.kind().used_slots() {
                obj.insert(slot.json_name().into(), json!(c.value(slot, table)));
            }
            Value::Object(obj)
        })
        .collect();
    json!({ "commands": commands })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cad::{GeneratorConfig, MAX_COMMANDS};

    #[test]
    fn lenient_keeps_ungrammatical_commands() {
        let text = r#"{"commands":[{"cmd":"L","x":0.5,"y":0.5},{"cmd":"SOL"}]}"#;
        assert!(parse_sequence(text).is_err());
        let s = parse_sequence_lenient(text).unwrap();
        assert_eq!(s.logical_length(), 2);
        assert!(!s.is_grammatical());
        assert_eq!(parse_sequence_lenient(&serialize_sequence(&s)).unwrap(), s);
        assert!(parse_sequence_lenient("{").is_err());
    }

    #[test]
    fn unit_square_parses() {
        let s = parse_sequence(unit_square_json()).unwrap();
        assert_eq!(s.logical_length(), 6);
        assert_eq!(s.commands()[1].used_levels(), vec![255, 0]);
        let e = &s.commands()[5];
        assert_eq!(e.level(Slot::Scale), 128);
        assert_eq!(e.level(Slot::E1), 191);
    }

    #[test]
    fn empty_list_is_all_eos() {
        let s = parse_sequence(r#"{"commands":[]}"#).unwrap();
        assert_eq!(s.logical_length(), 0);
        assert_eq!(s.commands().len(), MAX_COMMANDS);
        assert_eq!(serialize_sequence(&s), r#"{"commands":[]}"#);
    }

    #[test]
    fn error_kinds() {
        assert!(matches!(
            parse_sequence(r#"{"commands":[{"cmd":"SOL"},{"cmd":"L"}]}"#),
            Err(CadError::Arity { index: 1, .. })
        ));
        assert!(matches!(
            parse_sequence(r#"{"commands":[{"cmd":"Q"}]}"#),
            Err(CadError::UnknownCommand { index: 0, .. })
        ));
        assert!(matches!(
            parse_sequence(r#"{"commands":[{"cmd":"L","x":0,"y":1}]}"#),
            Err(CadError::MissingSol { index: 0, .. })
        ));
        assert!(matches!(
            parse_sequence(r#"{"commands":[{"cmd":"SOL"},{"cmd":"R","x":0.5,"y":0.5,"r":0.2}]}"#),
            Err(CadError::MissingExtrude { index: 0 })
        ));
        assert!(matches!(parse_sequence("{not json"), Err(CadError::Json(_))));
        assert!(matches!(
            parse_sequence(r#"{"commands":[{"cmd":"SOL"},{"cmd":"L","levels":[1]}]}"#),
            Err(CadError::Arity { index: 1, .. })
        ));
    }

    #[test]
    fn unit_square_roundtrip() {
        let s = parse_sequence(unit_square_json()).unwrap();
        let back = parse_sequence(&serialize_sequence(&s)).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn generated_sequences_roundtrip() {
        let cfg = GeneratorConfig::default();
        for seed in 0..100 {
            let s = crate::cad::generate_random_sequence(seed, &cfg).unwrap();
            assert_eq!(parse_sequence(&serialize_sequence(&s)).unwrap(), s, "seed {seed}");
        }
    }
}
