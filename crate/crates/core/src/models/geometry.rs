use thiserror::Error;

use super::{block, init_block, init_linear, init_norm, linear, norm, rng_for, ModelConfig};
use crate::autodiff::{AttentionShape, Graph, ParamStore, Tensor, Var};
use crate::render::{Modality, ViewFeature};

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("expected 2 (single-view) or 8 (multi-view) tokens, got {0}")]
    TokenCount(usize),
    #[error("items in a batch carry different token counts ({0} vs {1})")]
    MixedCounts(usize, usize),
    #[error("feature width {got} differs from d_feat {expected}")]
    FeatureWidth { expected: usize, got: usize },
    #[error("empty batch")]
    Empty,
}

pub fn init_geometry_encoder(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) {
    let mut rng = rng_for(seed, 2);
    let d = cfg.d_model;
    init_linear(store, &mut rng, "geo.in", cfg.d_feat, d, 1.0);
    store.init_normal("geo.modality", 2, d, 0.5, &mut rng);
    for i in 0..cfg.geo_blocks {
        init_block(store, &mut rng, &format!("geo.{i}"), d, cfg.ff_mult, cfg.geo_blocks, false);
    }
    init_norm(store, "geo.ln", d);
    init_linear(store, &mut rng, "geo.out", d, d, 1.0);
}

/// Project, add modality embeddings, rotate by token index, run the
/// transformer, and mean-pool to one `[d_model]` row per item.
pub fn geometry_encode_batch(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, items: &[&[ViewFeature]]) -> Result<Var, GeometryError> {
    let n = items.first().ok_or(GeometryError::Empty)?.len();
    if n != 2 && n != 8 {
        return Err(GeometryError::TokenCount(n));
    }
    let mut rows = Vec::with_capacity(items.len() * n * cfg.d_feat);
    let mut modality = Vec::with_capacity(items.len() * n);
    let mut positions = Vec::with_capacity(items.len() * n);
    for it in items {
        if it.len() != n {
            return Err(GeometryError::MixedCounts(n, it.len()));
        }
        for (i, f) in it.iter().enumerate() {
            if f.h.len() != cfg.d_feat {
                return Err(GeometryError::FeatureWidth { expected: cfg.d_feat, got: f.h.len() });
            }
            rows.extend_from_slice(&f.h);
            modality.push(match f.modality {
                Modality::Depth => 0,
                Modality::Normal => 1,
            });
            positions.push(i as f64);
        }
    }
    let h = g.constant(Tensor::matrix(items.len() * n, cfg.d_feat, rows));
    let x = linear(g, store, "geo.in", h);
    let table = g.param(store, "geo.modality");
    let e = g.gather_rows(table, &modality);
    let x = g.add(x, e);
    let mut x = g.rope(x, &positions);
    let shape = AttentionShape { batch: items.len(), q_len: n, k_len: n, heads: cfg.heads };
    for i in 0..cfg.geo_blocks {
        x = block(g, store, &format!("geo.{i}"), x, shape, None, None);
    }
    let x = norm(g, store, "geo.ln", x);
    let f = g.mean_pool_groups(x, n);
    Ok(linear(g, store, "geo.out", f))
}

/// The conditioning vector for one item.
pub fn geometry_encode(store: &ParamStore, cfg: &ModelConfig, tokens: &[ViewFeature]) -> Result<Vec<f64>, GeometryError> {
    let mut g = Graph::new();
    let f = geometry_encode_batch(&mut g, store, cfg, &[tokens])?;
    Ok(g.value(f).data.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tokens(n_views: usize, d: usize, seed: u64) -> Vec<ViewFeature> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_views)
            .flat_map(|v| [Modality::Depth, Modality::Normal].map(|m| (v, m)))
            .map(|(view, modality)| ViewFeature { h: (0..d).map(|_| StandardNormal.sample(&mut rng)).collect(), modality, view })
            .collect()
    }

    fn setup() -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig::toy();
        let mut s = ParamStore::new();
        init_geometry_encoder(&mut s, &cfg, 4);
        (cfg, s)
    }

    #[test]
    fn token_counts() {
        let (cfg, s) = setup();
        assert_eq!(geometry_encode(&s, &cfg, &tokens(4, cfg.d_feat, 1)).unwrap().len(), cfg.d_model);
        assert_eq!(geometry_encode(&s, &cfg, &tokens(1, cfg.d_feat, 1)).unwrap().len(), cfg.d_model);
        assert_eq!(geometry_encode(&s, &cfg, &tokens(2, cfg.d_feat, 1)), Err(GeometryError::TokenCount(4)));
        let mut bad = tokens(1, cfg.d_feat, 1);
        bad[0].h.pop();
        assert!(matches!(geometry_encode(&s, &cfg, &bad), Err(GeometryError::FeatureWidth { .. })));
    }

    #[test]
    fn deterministic_and_view_order_sensitive() {
        let (cfg, s) = setup();
        let t = tokens(4, cfg.d_feat, 2);
        let f = geometry_encode(&s, &cfg, &t).unwrap();
        assert_eq!(f, geometry_encode(&s, &cfg, &t).unwrap());
        let mut p = t.clone();
        p.swap(0, 6);
        p.swap(1, 7);
        assert_ne!(f, geometry_encode(&s, &cfg, &p).unwrap());
    }

    #[test]
    fn batch_matches_single() {
        let (cfg, s) = setup();
        let (a, b) = (tokens(4, cfg.d_feat, 3), tokens(4, cfg.d_feat, 4));
        let mut g = Graph::new();
        let f = geometry_encode_batch(&mut g, &s, &cfg, &[&a, &b]).unwrap();
        let fb = g.value(f).row_slice(1).to_vec();
        let single = geometry_encode(&s, &cfg, &b).unwrap();
        assert!(fb.iter().zip(&single).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
