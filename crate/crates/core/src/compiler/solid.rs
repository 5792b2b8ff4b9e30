//! Extruded bodies, their meshes, and the voxel occupancy accumulator.

use serde::{Deserialize, Serialize};

use super::frame::PlaneFrame;
use super::sketch::Profile;
use super::triangulate::triangulate;
use crate::cad::BooleanOp;
use crate::geom::{cross3, norm3, point_in_ring, sub3, Vec2, Vec3};

/// Half-width of the cubic voxel domain centered on the origin.
pub const DOMAIN_HALF: f64 = 1.25;
/// Default occupancy resolution per axis.
pub const DEFAULT_RESOLUTION: usize = 64;

/// Indexed triangle mesh, counterclockwise seen from outside.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// Unnormalized face normal (twice the area in length).
    pub fn face_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangles[t];
        let (a, b, c) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        cross3(sub3(b, a), sub3(c, a))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| norm3(self.face_normal(t)) / 2.0).sum()
    }

    /// Signed enclosed volume by the divergence theorem.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|&[a, b, c]| {
                let (a, b, c) = (self.vertices[a], self.vertices[b], self.vertices[c]);
                crate::geom::dot3(a, cross3(b, c)) / 6.0
            })
            .sum()
    }

    pub fn append(&mut self, other: &TriMesh) {
        let base = self.vertices.len();
        self.vertices.extend_from_slice(&other.vertices);
        self.triangles
            .extend(other.triangles.iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
    }
}

/// A planar region: counterclockwise outer ring with clockwise holes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub outer: Vec<Vec2>,
    pub holes: Vec<Vec<Vec2>>,
}

impl Region {
    pub fn contains(&self, p: Vec2) -> bool {
        point_in_ring(p, &self.outer) && !self.holes.iter().any(|h| point_in_ring(p, h))
    }
}

impl From<&Profile> for Region {
    fn from(p: &Profile) -> Self {
        Region {
            outer: p.outer.vertices.clone(),
            holes: p.holes.iter().map(|h| h.vertices.clone()).collect(),
        }
    }
}

/// One extrusion: regions in sketch coordinates swept between heights
/// `lo` and `hi` along the frame normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prism {
    pub frame: PlaneFrame,
    pub scale: f64,
    pub lo: f64,
    pub hi: f64,
    pub regions: Vec<Region>,
}

impl Prism {
    pub fn contains(&self, w: Vec3) -> bool {
        let (p, h) = self.frame.to_local(w, self.scale);
        h >= self.lo && h <= self.hi && self.regions.iter().any(|r| r.contains(p))
    }

    /// World-space axis-aligned bounding box.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for r in &self.regions {
            for &p in &r.outer {
                for h in [self.lo, self.hi] {
                    let w = self.frame.to_world(p, self.scale, h);
                    for i in 0..3 {
                        lo[i] = lo[i].min(w[i]);
                        hi[i] = hi[i].max(w[i]);
                    }
                }
            }
        }
        (lo, hi)
    }

    /// Closed outward-oriented surface mesh.
    pub fn mesh(&self) -> TriMesh {
        let mut mesh = TriMesh::default();
        for r in &self.regions {
            let holes: Vec<&[Vec2]> = r.holes.iter().map(|h| h.as_slice()).collect();
            let (ring, tris) = triangulate(&r.outer, &holes);
            let base = mesh.vertices.len();
            let n = ring.len();
            mesh.vertices.extend(ring.iter().map(|&p| self.frame.to_world(p, self.scale, self.lo)));
            mesh.vertices.extend(ring.iter().map(|&p| self.frame.to_world(p, self.scale, self.hi)));
            for t in &tris {
                mesh.triangles.push([base + t[0], base + t[2], base + t[1]]);
                mesh.triangles.push([base + n + t[0], base + n + t[1], base + n + t[2]]);
            }
            for boundary in std::iter::once(&r.outer).chain(r.holes.iter()) {
                let base = mesh.vertices.len();
                let k = boundary.len();
                for &p in boundary {
                    mesh.vertices.push(self.frame.to_world(p, self.scale, self.lo));
                    mesh.vertices.push(self.frame.to_world(p, self.scale, self.hi));
                }
                for i in 0..k {
                    let j = (i + 1) % k;
                    let (a0, a1, b0, b1) = (base + 2 * i, base + 2 * i + 1, base + 2 * j, base + 2 * j + 1);
                    mesh.triangles.push([a0, b0, b1]);
                    mesh.triangles.push([a0, b1, a1]);
                }
            }
        }
        mesh
    }
}

/// An extruded body and how it combines with what came before.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Body {
    pub op: BooleanOp,
    pub command_index: usize,
    pub prism: Prism,
    pub mesh: TriMesh,
}

/// Boolean cells over the cube `[-DOMAIN_HALF, DOMAIN_HALF]³`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct VoxelGrid {
    res: usize,
    cells: Vec<bool>,
}

impl VoxelGrid {
    pub fn new(res: usize) -> Self {
        VoxelGrid { res, cells: vec![false; res * res * res] }
    }

    pub fn resolution(&self) -> usize {
        self.res
    }

    pub fn cell_size(&self) -> f64 {
        2.0 * DOMAIN_HALF / self.res as f64
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.res + j) * self.res + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.cells[self.index(i, j, k)]
    }

    /// Occupancy with out-of-range coordinates treated as empty.
    pub fn get_signed(&self, i: isize, j: isize, k: isize) -> bool {
        let r = self.res as isize;
        (0..r).contains(&i) && (0..r).contains(&j) && (0..r).contains(&k) && self.get(i as usize, j as usize, k as usize)
    }

    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let idx = self.index(i, j, k);
        self.cells[idx] = v;
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let h = self.cell_size();
        [
            -DOMAIN_HALF + (i as f64 + 0.5) * h,
            -DOMAIN_HALF + (j as f64 + 0.5) * h,
            -DOMAIN_HALF + (k as f64 + 0.5) * h,
        ]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    pub fn volume(&self) -> f64 {
        self.count() as f64 * self.cell_size().powi(3)
    }

    fn cell_range(&self, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let h = self.cell_size();
        let a = ((lo + DOMAIN_HALF) / h - 0.5).ceil().max(0.0);
        let b = ((hi + DOMAIN_HALF) / h - 0.5).floor() + 1.0;
        let b = b.min(self.res as f64).max(a);
        a as usize..b as usize
    }

    /// Cells whose centers lie inside `prism`.
    pub fn from_prism(res: usize, prism: &Prism) -> Self {
        let mut grid = VoxelGrid::new(res);
        let (lo, hi) = prism.bounds();
        for i in grid.cell_range(lo[0], hi[0]) {
            for j in grid.cell_range(lo[1], hi[1]) {
                for k in grid.cell_range(lo[2], hi[2]) {
                    if prism.contains(grid.center(i, j, k)) {
                        grid.set(i, j, k, true);
                    }
                }
            }
        }
        grid
    }

    pub fn apply(&mut self, op: BooleanOp, other: &VoxelGrid) {
        assert_eq!(self.res, other.res, "grid resolutions differ");
        for (a, &b) in self.cells.iter_mut().zip(&other.cells) {
            *a = match op {
                BooleanOp::NewBody | BooleanOp::Join => *a || b,
                BooleanOp::Cut => *a && !b,
                BooleanOp::Intersect => *a && b,
            };
        }
    }
}

/// A compiled sequence: per-extrusion bodies and the boolean occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct Solid {
    pub bodies: Vec<Body>,
    pub occupancy: VoxelGrid,
}

impl Solid {
    /// Per-extrusion meshes in sequence order.
    pub fn meshes(&self) -> impl Iterator<Item = &TriMesh> {
        self.bodies.iter().map(|b| &b.mesh)
    }

    /// Exact point membership under the boolean sequence.
    pub fn contains(&self, w: Vec3) -> bool {
        self.bodies.iter().fold(false, |inside, b| {
            let here = b.prism.contains(w);
            match b.op {
                BooleanOp::NewBody | BooleanOp::Join => inside || here,
                BooleanOp::Cut => inside && !here,
                BooleanOp::Intersect => inside && here,
            }
        })
    }

    /// Whether any body subtracts or intersects.
    pub fn has_subtractive(&self) -> bool {
        self.bodies.iter().any(|b| matches!(b.op, BooleanOp::Cut | BooleanOp::Intersect))
    }
}
