//! Depth and normal maps of compiled solids, and the frozen random
//! projection that turns them into conditioning features.
//!
//! Camera space follows the x-right, y-down, z-forward convention; depth is
//! the camera-space z of the visible surface.

mod features;
mod image;

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compiler::Solid;
use crate::geom::{add3, cross3, dot3, normalize3, scale3, sub3, Vec3};

pub use features::{FeatureProjector, Modality, ViewFeature};
pub use image::{write_normal_ppm, write_depth_pgm};

pub const DEFAULT_RES: usize = 64;
pub const DEFAULT_FOV_Y: f64 = 40.0 * PI / 180.0;
pub const VIEWS_PER_RIG: usize = 4;
const AZIMUTH_JITTER: f64 = PI / 12.0;
const ELEVATION_RANGE: (f64, f64) = (15.0 * PI / 180.0, 60.0 * PI / 180.0);
const RADIUS_RANGE: (f64, f64) = (1.8, 2.5);
const NEAR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub azimuth: f64,
    pub elevation: f64,
    pub radius: f64,
    pub fov_y: f64,
}

impl CameraPose {
    pub fn new(azimuth: f64, elevation: f64, radius: f64) -> Self {
        CameraPose { azimuth, elevation, radius, fov_y: DEFAULT_FOV_Y }
    }

    pub fn eye(&self) -> Vec3 {
        let (ce, se) = (self.elevation.cos(), self.elevation.sin());
        [self.radius * ce * self.azimuth.cos(), self.radius * ce * self.azimuth.sin(), self.radius * se]
    }

    /// `(right, down, forward)` looking at the origin with world z up.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let f = normalize3(scale3(self.eye(), -1.0));
        let up = if f[2].abs() > 0.999 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
        let right = normalize3(cross3(f, up));
        let down = cross3(f, right);
        (right, down, f)
    }
}

/// Four views around the object: base azimuths a quarter turn apart, each
/// jittered within ±15°, sharing one elevation and radius.
pub fn sample_camera_rig(seed: u64) -> [CameraPose; VIEWS_PER_RIG] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let elevation = rng.random_range(ELEVATION_RANGE.0..=ELEVATION_RANGE.1);
    let radius = rng.random_range(RADIUS_RANGE.0..=RADIUS_RANGE.1);
    std::array::from_fn(|i| {
        let base = i as f64 * FRAC_PI_2;
        CameraPose::new(base + rng.random_range(-AZIMUTH_JITTER..=AZIMUTH_JITTER), elevation, radius)
    })
}

/// Per-pixel depth (`+∞` on background) and camera-space unit normals
/// (zero on background), row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoMaps {
    pub res: usize,
    pub radius: f64,
    pub depth: Vec<f64>,
    pub normal: Vec<Vec3>,
}

impl GeoMaps {
    pub fn is_background(&self, px: usize) -> bool {
        self.depth[px].is_infinite()
    }

    pub fn foreground_count(&self) -> usize {
        self.depth.iter().filter(|d| d.is_finite()).count()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("solid has no geometry to render")]
    EmptySolid,
    #[error("resolution must be at least 1")]
    ZeroResolution,
}

struct Fragment {
    depth: f64,
    normal: Vec3,
}

/// Perspective z-buffer rasterization of the solid's extrusion meshes.
///
/// When bodies cut or intersect, every fragment along a pixel ray is kept
/// and the nearest one lying on the boolean result's boundary wins; its
/// normal is flipped when the material lies on the face's outer side.
pub fn rasterize_depth_normal(solid: &Solid, pose: &CameraPose, res: usize) -> Result<GeoMaps, RenderError> {
    if res == 0 {
        return Err(RenderError::ZeroResolution);
    }
    if solid.bodies.iter().all(|b| b.mesh.is_empty()) {
        return Err(RenderError::EmptySolid);
    }
    let eye = pose.eye();
    let (right, down, fwd) = pose.basis();
    let focal = (res as f64 / 2.0) / (pose.fov_y / 2.0).tan();
    let half = res as f64 / 2.0;
    let to_cam = |w: Vec3| {
        let d = sub3(w, eye);
        [dot3(d, right), dot3(d, down), dot3(d, fwd)]
    };
    let csg = solid.has_subtractive();
    let mut frags: Vec<Vec<Fragment>> = (0..res * res).map(|_| Vec::new()).collect();

    for body in &solid.bodies {
        let mesh = &body.mesh;
        let cam: Vec<Vec3> = mesh.vertices.iter().map(|&v| to_cam(v)).collect();
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let p = tri.map(|i| cam[i]);
            if p.iter().any(|q| q[2] <= NEAR) {
                continue;
            }
            let n = normalize3(mesh.face_normal(t));
            if !csg && dot3(n, sub3(mesh.vertices[tri[0]], eye)) >= 0.0 {
                continue;
            }
            let s = p.map(|q| [focal * q[0] / q[2] + half, focal * q[1] / q[2] + half]);
            let area = (s[1][0] - s[0][0]) * (s[2][1] - s[0][1]) - (s[1][1] - s[0][1]) * (s[2][0] - s[0][0]);
            if area.abs() < 1e-18 {
                continue;
            }
            let x0 = s.iter().map(|q| q[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
            let x1 = s.iter().map(|q| q[0]).fold(f64::NEG_INFINITY, f64::max).ceil().min(res as f64) as usize;
            let y0 = s.iter().map(|q| q[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
            let y1 = s.iter().map(|q| q[1]).fold(f64::NEG_INFINITY, f64::max).ceil().min(res as f64) as usize;
            for y in y0..y1 {
                for x in x0..x1 {
                    let c = [x as f64 + 0.5, y as f64 + 0.5];
                    let edge = |a: [f64; 2], b: [f64; 2]| (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
                    let w0 = edge(s[1], s[2]) / area;
                    let w1 = edge(s[2], s[0]) / area;
                    let w2 = edge(s[0], s[1]) / area;
                    if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                        continue;
                    }
                    // Perspective-correct: 1/z is affine in screen space.
                    let inv_z = w0 / p[0][2] + w1 / p[1][2] + w2 / p[2][2];
                    frags[y * res + x].push(Fragment { depth: 1.0 / inv_z, normal: n });
                }
            }
        }
    }

    let mut depth = vec![f64::INFINITY; res * res];
    let mut normal = vec![[0.0; 3]; res * res];
    for (px, list) in frags.iter_mut().enumerate() {
        list.sort_by(|a, b| a.depth.total_cmp(&b.depth));
        let ray = add3(
            fwd,
            add3(
                scale3(right, ((px % res) as f64 + 0.5 - half) / focal),
                scale3(down, ((px / res) as f64 + 0.5 - half) / focal),
            ),
        );
        for f in list.iter() {
            let n = if csg {
                let x = add3(eye, scale3(ray, f.depth));
                let eps = 1e-7;
                let inner = solid.contains(sub3(x, scale3(f.normal, eps)));
                let outer = solid.contains(add3(x, scale3(f.normal, eps)));
                if inner == outer {
                    continue;
                }
                let n = if inner { f.normal } else { scale3(f.normal, -1.0) };
                if dot3(n, ray) >= 0.0 {
                    continue;
                }
                n
            } else {
                f.normal
            };
            depth[px] = f.depth;
            normal[px] = [dot3(n, right), dot3(n, down), dot3(n, fwd)];
            break;
        }
    }
    Ok(GeoMaps { res, radius: pose.radius, depth, normal })
}
