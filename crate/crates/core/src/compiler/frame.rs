use serde::{Deserialize, Serialize};

use crate::geom::{add3, cross3, dot3, normalize3, scale3, sub3, Vec2, Vec3};

/// Orthonormal sketch-plane frame with `n = u × v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneFrame {
    pub origin: Vec3,
    pub u: Vec3,
    pub v: Vec3,
    pub n: Vec3,
}

impl PlaneFrame {
    /// Maps a sketch point, scaled by `scale`, at height `h` along `n`.
    pub fn to_world(&self, p: Vec2, scale: f64, h: f64) -> Vec3 {
        let mut w = self.origin;
        for i in 0..3 {
            w[i] += scale * (p[0] * self.u[i] + p[1] * self.v[i]) + h * self.n[i];
        }
        w
    }

    /// Inverse of [`PlaneFrame::to_world`]: `(sketch point, height)`.
    pub fn to_local(&self, w: Vec3, scale: f64) -> (Vec2, f64) {
        let d = sub3(w, self.origin);
        ([dot3(d, self.u) / scale, dot3(d, self.v) / scale], dot3(d, self.n))
    }

    /// Largest deviation of the axes from orthonormality.
    pub fn orthonormality_residual(&self) -> f64 {
        let axes = [self.u, self.v, self.n];
        let mut worst: f64 = 0.0;
        for (i, a) in axes.iter().enumerate() {
            worst = worst.max((dot3(*a, *a) - 1.0).abs());
            for b in &axes[i + 1..] {
                worst = worst.max(dot3(*a, *b).abs());
            }
        }
        let c = cross3(self.u, self.v);
        worst.max(sub3(c, self.n).iter().fold(0.0, |m, x| m.max(x.abs())))
    }
}

/// Sketch plane from orientation angles and origin.
///
/// The normal is the spherical direction `(θ, φ)`; the in-plane reference
/// axis is global x projected onto the plane (global y when x is nearly
/// parallel to the normal), rotated by `γ` about the normal.
pub fn plane_frame(theta: f64, phi: f64, gamma: f64, origin: Vec3) -> PlaneFrame {
    let n = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
    let n = normalize3(n);
    let axis = if n[0].abs() > 0.999 { [0.0, 1.0, 0.0] } else { [1.0, 0.0, 0.0] };
    let reference = normalize3(sub3(axis, scale3(n, dot3(axis, n))));
    let side = cross3(n, reference);
    let u = normalize3(add3(scale3(reference, gamma.cos()), scale3(side, gamma.sin())));
    let v = cross3(n, u);
    PlaneFrame { origin, u, v, n }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn identity_frame() {
        let f = plane_frame(0.0, 0.0, 0.0, [0.0; 3]);
        assert_eq!(f.n, [0.0, 0.0, 1.0]);
        assert_eq!(f.u, [1.0, 0.0, 0.0]);
        assert_eq!(f.v, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn quarter_turn_normal() {
        let f = plane_frame(PI / 2.0, 0.0, 0.0, [0.0; 3]);
        assert!((f.n[0] - 1.0).abs() < 1e-12 && f.n[1].abs() < 1e-12 && f.n[2].abs() < 1e-12);
        assert!(f.orthonormality_residual() < 1e-12);
    }

    #[test]
    fn random_frames_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let f = plane_frame(
                rng.random_range(0.0..PI),
                rng.random_range(-PI..PI),
                rng.random_range(-PI..PI),
                [rng.random(), rng.random(), rng.random()],
            );
            assert!(f.orthonormality_residual() < 1e-9);
        }
    }

    #[test]
    fn local_world_roundtrip() {
        let f = plane_frame(1.1, -0.3, 2.0, [0.1, 0.2, -0.3]);
        let w = f.to_world([0.3, 0.7], 0.8, 0.25);
        let (p, h) = f.to_local(w, 0.8);
        assert!((p[0] - 0.3).abs() < 1e-12 && (p[1] - 0.7).abs() < 1e-12 && (h - 0.25).abs() < 1e-12);
    }
}
