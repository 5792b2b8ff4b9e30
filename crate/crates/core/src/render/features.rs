use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{rasterize_depth_normal, CameraPose, GeoMaps, RenderError};
use crate::compiler::Solid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Depth,
    Normal,
}

impl Modality {
    pub fn index(self) -> usize {
        match self {
            Modality::Depth => 0,
            Modality::Normal => 1,
        }
    }

    fn channels(self) -> usize {
        match self {
            Modality::Depth => 1,
            Modality::Normal => 3,
        }
    }
}

/// One conditioning token before the geometry encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewFeature {
    pub h: Vec<f64>,
    pub modality: Modality,
    pub view: usize,
}

/// Fixed Gaussian projections from flattened maps to `d_feat`, one matrix
/// per modality, entries scaled by `1/sqrt(input width)`.
#[derive(Debug, Clone)]
pub struct FeatureProjector {
    res: usize,
    d_feat: usize,
    seed: u64,
    weights: [Vec<f64>; 2],
}

impl FeatureProjector {
    pub fn new(res: usize, d_feat: usize, seed: u64) -> Self {
        let make = |m: Modality| {
            let cols = res * res * m.channels();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(m.index() as u64 + 1)));
            let scale = 1.0 / (cols as f64).sqrt();
            (0..d_feat * cols).map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            }).collect::<Vec<f64>>()
        };
        FeatureProjector { res, d_feat, seed, weights: [make(Modality::Depth), make(Modality::Normal)] }
    }

    pub fn d_feat(&self) -> usize {
        self.d_feat
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Depth divided by the camera radius with background at zero; normals
    /// as stored.
    pub fn flatten(maps: &GeoMaps, modality: Modality) -> Vec<f64> {
        match modality {
            Modality::Depth => maps.depth.iter().map(|&d| if d.is_finite() { d / maps.radius } else { 0.0 }).collect(),
            Modality::Normal => maps.normal.iter().flat_map(|n| n.iter().copied()).collect(),
        }
    }

    pub fn project(&self, maps: &GeoMaps, modality: Modality) -> Vec<f64> {
        assert_eq!(maps.res, self.res, "map resolution differs from projector");
        let x = Self::flatten(maps, modality);
        let w = &self.weights[modality.index()];
        let cols = x.len();
        (0..self.d_feat).map(|r| w[r * cols..(r + 1) * cols].iter().zip(&x).map(|(a, b)| a * b).sum()).collect()
    }

    /// Depth and normal tokens for each pose, ordered view by view.
    pub fn view_features(&self, solid: &Solid, poses: &[CameraPose]) -> Result<Vec<ViewFeature>, RenderError> {
        let mut out = Vec::with_capacity(2 * poses.len());
        for (view, pose) in poses.iter().enumerate() {
            let maps = rasterize_depth_normal(solid, pose, self.res)?;
            for modality in [Modality::Depth, Modality::Normal] {
                out.push(ViewFeature { h: self.project(&maps, modality), modality, view });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cad::{generate_random_sequence, parse_sequence, unit_square_json, GeneratorConfig};
    use crate::compiler::compile_solid;
    use crate::render::sample_camera_rig;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn deterministic_and_discriminative() {
        let p = FeatureProjector::new(32, 48, 3);
        let a = compile_solid(&parse_sequence(unit_square_json()).unwrap()).unwrap();
        let b = compile_solid(&generate_random_sequence(4, &GeneratorConfig::default()).unwrap()).unwrap();
        let rig = sample_camera_rig(2);
        let fa = p.view_features(&a, &rig).unwrap();
        assert_eq!(fa, p.view_features(&a, &rig).unwrap());
        assert_eq!(fa.len(), 8);
        let fb = p.view_features(&b, &rig).unwrap();
        assert!((norm(&fa[0].h) - norm(&fb[0].h)).abs() > 0.0);
        assert!(fa.iter().all(|f| f.h.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn background_projects_to_zero_and_depth_is_linear() {
        let p = FeatureProjector::new(8, 16, 1);
        let blank = GeoMaps { res: 8, radius: 2.0, depth: vec![f64::INFINITY; 64], normal: vec![[0.0; 3]; 64] };
        assert!(p.project(&blank, Modality::Depth).iter().all(|&x| x == 0.0));
        assert!(p.project(&blank, Modality::Normal).iter().all(|&x| x == 0.0));
        let mut m = blank.clone();
        for (i, d) in m.depth.iter_mut().enumerate() {
            *d = 1.0 + i as f64 * 0.01;
        }
        let base = p.project(&m, Modality::Depth);
        let mut scaled = m.clone();
        scaled.depth.iter_mut().for_each(|d| *d *= 3.0);
        let s = p.project(&scaled, Modality::Depth);
        assert!(base.iter().zip(&s).all(|(a, b)| (3.0 * a - b).abs() < 1e-12));
    }
}
