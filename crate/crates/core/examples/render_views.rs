//! Render depth and normal maps of a sequence from a random four-view
//! camera rig and write them as PGM/PPM images.
//!
//! cargo run --release --example render_views -- [sequence.json] [out dir] [rig seed]

use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use cadcrafter::cad::{parse_sequence, unit_square_json};
use cadcrafter::compiler::compile_solid;
use cadcrafter::render::{rasterize_depth_normal, sample_camera_rig, write_depth_pgm, write_normal_ppm, DEFAULT_RES};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let text = args.first().map_or_else(|| unit_square_json().to_string(), |p| std::fs::read_to_string(p).expect("readable sequence"));
    let out = PathBuf::from(args.get(1).map_or("views", String::as_str));
    let seed = args.get(2).map_or(0, |s| s.parse().expect("seed must be an integer"));
    std::fs::create_dir_all(&out).expect("output dir");
    let solid = compile_solid(&parse_sequence(&text).expect("sequence parses")).expect("valid sequence");
    for (v, pose) in sample_camera_rig(seed).iter().enumerate() {
        let maps = rasterize_depth_normal(&solid, pose, DEFAULT_RES).expect("render");
        write_depth_pgm(&maps, &mut BufWriter::new(File::create(out.join(format!("view{v}_depth.pgm"))).expect("create"))).expect("write");
        write_normal_ppm(&maps, &mut BufWriter::new(File::create(out.join(format!("view{v}_normal.ppm"))).expect("create"))).expect("write");
        println!("view {v}: {} foreground pixels of {}", maps.foreground_count(), DEFAULT_RES * DEFAULT_RES);
    }
    println!("wrote {}", out.display());
}
