//! Boundary extraction from the occupancy grid and surface point sampling.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::solid::{Solid, TriMesh, VoxelGrid, DOMAIN_HALF};
use crate::geom::Vec3;

/// Quads on every face between an occupied cell and an empty neighbour,
/// welded on the lattice and oriented outward.
pub fn surface_mesh(grid: &VoxelGrid) -> TriMesh {
    let r = grid.resolution() as isize;
    let h = grid.cell_size();
    let mut mesh = TriMesh::default();
    let mut ids: HashMap<[isize; 3], usize> = HashMap::new();
    let mut vid = |mesh: &mut TriMesh, p: [isize; 3]| {
        *ids.entry(p).or_insert_with(|| {
            mesh.vertices.push([
                -DOMAIN_HALF + p[0] as f64 * h,
                -DOMAIN_HALF + p[1] as f64 * h,
                -DOMAIN_HALF + p[2] as f64 * h,
            ]);
            mesh.vertices.len() - 1
        })
    };
    for i in 0..r {
        for j in 0..r {
            for k in 0..r {
                if !grid.get_signed(i, j, k) {
                    continue;
                }
                for axis in 0..3 {
                    for dir in [-1isize, 1] {
                        let mut nb = [i, j, k];
                        nb[axis] += dir;
                        if grid.get_signed(nb[0], nb[1], nb[2]) {
                            continue;
                        }
                        // Face corners on the lattice, counterclockwise seen
                        // from the empty side.
                        let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
                        let mut base = [i, j, k];
                        if dir > 0 {
                            base[axis] += 1;
                        }
                        let corner = |da: isize, db: isize| {
                            let mut c = base;
                            c[a1] += da;
                            c[a2] += db;
                            c
                        };
                        let mut quad = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
                        if dir < 0 {
                            quad.reverse();
                        }
                        let q = quad.map(|c| vid(&mut mesh, c));
                        mesh.triangles.push([q[0], q[1], q[2]]);
                        mesh.triangles.push([q[0], q[2], q[3]]);
                    }
                }
            }
        }
    }
    mesh
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SampleError {
    #[error("solid has no surface to sample")]
    EmptySolid,
    #[error("sample count must be at least 1")]
    ZeroCount,
}

/// `n` points drawn uniformly by area from the occupancy boundary.
pub fn sample_surface_points(solid: &Solid, n: usize, seed: u64) -> Result<Vec<Vec3>, SampleError> {
    if n == 0 {
        return Err(SampleError::ZeroCount);
    }
    let mesh = surface_mesh(&solid.occupancy);
    sample_mesh(&mesh, n, seed)
}

/// Area-weighted sampling of a triangle mesh.
pub fn sample_mesh(mesh: &TriMesh, n: usize, seed: u64) -> Result<Vec<Vec3>, SampleError> {
    if mesh.is_empty() {
        return Err(SampleError::EmptySolid);
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for t in 0..mesh.triangles.len() {
        acc += crate::geom::norm3(mesh.face_normal(t));
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random::<f64>() * acc;
        let t = cdf.partition_point(|&c| c <= x).min(cdf.len() - 1);
        let [a, b, c] = mesh.triangles[t].map(|v| mesh.vertices[v]);
        let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        out.push([0, 1, 2].map(|i| a[i] + u * (b[i] - a[i]) + v * (c[i] - a[i])));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cad::{parse_sequence, unit_square_json};
    use crate::compiler::compile_solid;

    #[test]
    fn surface_of_single_cell() {
        let mut g = VoxelGrid::new(4);
        g.set(1, 2, 3, true);
        let m = surface_mesh(&g);
        assert_eq!(m.triangles.len(), 12);
        assert_eq!(m.vertices.len(), 8);
        assert!((m.signed_volume() - g.cell_size().powi(3)).abs() < 1e-12);
    }

    #[test]
    fn box_samples_bounded_and_deterministic() {
        let solid = compile_solid(&parse_sequence(unit_square_json()).unwrap()).unwrap();
        let pts = sample_surface_points(&solid, 2048, 5).unwrap();
        assert_eq!(pts.len(), 2048);
        let h = solid.occupancy.cell_size();
        for p in &pts {
            assert!(p[0] >= -h && p[0] <= 1.0 + h && p[1] >= -h && p[1] <= 1.0 + h);
            assert!(p[2] >= -h && p[2] <= 0.5 + h);
        }
        assert_eq!(pts, sample_surface_points(&solid, 2048, 5).unwrap());
        assert_eq!(sample_surface_points(&solid, 1, 9).unwrap().len(), 1);
        let mesh = surface_mesh(&solid.occupancy);
        assert!((mesh.signed_volume() - solid.occupancy.volume()).abs() < 1e-9);
    }
}
