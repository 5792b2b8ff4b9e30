//! Parse a sequence file, report checker verdict and failure codes, and for
//! valid sequences print the voxel volume and write an OBJ mesh.
//!
//! cargo run --release --example check_sequence -- [sequence.json] [out.obj]

use cadcrafter::cad::{describe_sequence, parse_sequence_lenient, unit_square_json, ParamRangeTable};
use cadcrafter::compiler::{check_validity, compile_solid, export_obj};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let text = match args.first() {
        Some(p) => std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{p}: {e}")),
        None => unit_square_json().to_string(),
    };
    let seq = parse_sequence_lenient(&text).expect("sequence parses");
    println!("{}", describe_sequence(&seq, &ParamRangeTable::default()));
    let report = check_validity(&seq);
    if !report.valid {
        for f in &report.failures {
            println!("invalid: {} at command {}: {}", f.code, f.index, f.message);
        }
        return;
    }
    let solid = compile_solid(&seq).expect("checker said valid");
    let tris: usize = solid.meshes().map(|m| m.triangles.len()).sum();
    println!("valid: {} bodies, {tris} triangles, voxel volume {:.4}", solid.bodies.len(), solid.occupancy.volume());
    let out = args.get(1).map_or("sequence.obj", String::as_str);
    export_obj(&solid, std::path::Path::new(out)).expect("obj written");
    println!("wrote {out}");
}
