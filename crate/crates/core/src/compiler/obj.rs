//! Wavefront OBJ output.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::sample::surface_mesh;
use super::solid::{Solid, TriMesh};

#[derive(Debug, thiserror::Error)]
pub enum ObjError {
    #[error("nothing to export: mesh is empty")]
    Empty,
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// OBJ text for a triangle mesh, 1-based indices.
pub fn write_obj(mesh: &TriMesh) -> Result<String, ObjError> {
    if mesh.is_empty() {
        return Err(ObjError::Empty);
    }
    let mut s = String::with_capacity(mesh.vertices.len() * 32 + mesh.triangles.len() * 24);
    for v in &mesh.vertices {
        writeln!(s, "v {} {} {}", v[0], v[1], v[2]).unwrap();
    }
    for t in &mesh.triangles {
        writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
    }
    Ok(s)
}

/// Writes the boundary of the solid's boolean occupancy.
pub fn export_obj(solid: &Solid, path: &Path) -> Result<(), ObjError> {
    if solid.bodies.is_empty() {
        return Err(ObjError::Empty);
    }
    let text = write_obj(&surface_mesh(&solid.occupancy))?;
    std::fs::write(path, text).map_err(|source| ObjError::Io { path: path.to_path_buf(), source })
}

/// Reads `v` and triangular `f` records back.
pub fn parse_obj(text: &str) -> Result<TriMesh, ObjError> {
    let mut mesh = TriMesh::default();
    for (n, line) in text.lines().enumerate() {
        let err = |message: String| ObjError::Parse { line: n + 1, message };
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let xs: Vec<f64> = it.map(|t| t.parse::<f64>()).collect::<Result<_, _>>().map_err(|e| err(e.to_string()))?;
                if xs.len() != 3 {
                    return Err(err(format!("vertex has {} coordinates", xs.len())));
                }
                mesh.vertices.push([xs[0], xs[1], xs[2]]);
            }
            Some("f") => {
                let ids: Vec<usize> = it
                    .map(|t| t.split('/').next().unwrap_or("").parse::<usize>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| err(e.to_string()))?;
                if ids.len() != 3 {
                    return Err(err(format!("face has {} vertices", ids.len())));
                }
                if ids.iter().any(|&i| i == 0 || i > mesh.vertices.len()) {
                    return Err(err("face index out of range".into()));
                }
                mesh.triangles.push([ids[0] - 1, ids[1] - 1, ids[2] - 1]);
            }
            _ => {}
        }
    }
    Ok(mesh)
}
