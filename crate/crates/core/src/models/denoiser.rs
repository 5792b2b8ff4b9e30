use super::{block, init_block, init_linear, init_norm, linear, norm, rng_for, ModelConfig};
use crate::autodiff::{AttentionShape, Graph, ParamStore, Tensor, Var};
use crate::diffusion::timestep_embedding;

pub fn init_denoiser(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) {
    let mut rng = rng_for(seed, 3);
    let d = cfg.d_model;
    init_linear(store, &mut rng, "den.z_in", cfg.d_e, d, 1.0);
    init_linear(store, &mut rng, "den.t_in", d, d, 1.0);
    init_linear(store, &mut rng, "den.f_in", d, d, 1.0);
    for i in 0..cfg.den_blocks {
        init_block(store, &mut rng, &format!("den.{i}"), d, cfg.ff_mult, cfg.den_blocks, cfg.cross_attention);
    }
    init_norm(store, "den.ln", d);
    init_linear(store, &mut rng, "den.out", d, cfg.d_e, 1.0);
}

/// Predicts `ẑ₀` for a batch: `z_t` is `[B, d_E]`, `f` is `[B, d_model]`,
/// one timestep per row. The latent, timestep and condition each become a
/// token; the latent token is read out.
pub fn denoise_batch(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, z_t: Var, t: &[usize], f: Var) -> Var {
    let b = g.value(z_t).rows();
    assert_eq!(t.len(), b, "one timestep per latent");
    assert_eq!(g.value(f).rows(), b, "one condition per latent");
    let d = cfg.d_model;
    let emb: Vec<f64> = t.iter().flat_map(|&s| timestep_embedding(s, d).expect("d_model is even")).collect();
    let te = g.constant(Tensor::matrix(b, d, emb));
    let zt = linear(g, store, "den.z_in", z_t);
    let tt = linear(g, store, "den.t_in", te);
    let ft = linear(g, store, "den.f_in", f);
    let (tokens, n, context) = if cfg.cross_attention {
        (vec![zt, tt], 2, Some((ft, 1)))
    } else {
        (vec![zt, tt, ft], 3, None)
    };
    let stacked = g.concat_rows(&tokens);
    // Item-major order: row b·n + k holds token k of item b.
    let order: Vec<usize> = (0..b * n).map(|r| (r % n) * b + r / n).collect();
    let mut x = g.gather_rows(stacked, &order);
    let shape = AttentionShape { batch: b, q_len: n, k_len: n, heads: cfg.heads };
    for i in 0..cfg.den_blocks {
        x = block(g, store, &format!("den.{i}"), x, shape, None, context);
    }
    let read: Vec<usize> = (0..b).map(|i| i * n).collect();
    let z = g.gather_rows(x, &read);
    let z = norm(g, store, "den.ln", z);
    linear(g, store, "den.out", z)
}

pub fn denoise(store: &ParamStore, cfg: &ModelConfig, z_t: &[f64], t: usize, f: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let z = g.constant(Tensor::row(z_t.to_vec()));
    let c = g.constant(Tensor::row(f.to_vec()));
    let out = denoise_batch(&mut g, store, cfg, z, &[t], c);
    g.value(out).data.clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::param_grad_check;

    fn setup(cross: bool) -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig { cross_attention: cross, ..ModelConfig::toy() };
        let mut s = ParamStore::new();
        init_denoiser(&mut s, &cfg, 9);
        (cfg, s)
    }

    #[test]
    fn shape_determinism_and_condition_sensitivity() {
        for cross in [false, true] {
            let (cfg, s) = setup(cross);
            let z: Vec<f64> = (0..cfg.d_e).map(|i| (i as f64 * 0.3).sin()).collect();
            let f: Vec<f64> = (0..cfg.d_model).map(|i| (i as f64 * 0.7).cos()).collect();
            let out = denoise(&s, &cfg, &z, 3, &f);
            assert_eq!(out.len(), cfg.d_e);
            assert_eq!(out, denoise(&s, &cfg, &z, 3, &f));
            assert!(out.iter().all(|x| x.is_finite()));
            let f2: Vec<f64> = f.iter().map(|x| -x).collect();
            assert_ne!(out, denoise(&s, &cfg, &z, 3, &f2));
            assert_ne!(out, denoise(&s, &cfg, &z, 4, &f));
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let (cfg, s) = setup(false);
        let rows: Vec<Vec<f64>> = (0..3).map(|k| (0..cfg.d_e).map(|i| (i + k) as f64 * 0.1).collect()).collect();
        let fs: Vec<Vec<f64>> = (0..3).map(|k| (0..cfg.d_model).map(|i| (i * k) as f64 * 0.05).collect()).collect();
        let mut g = Graph::new();
        let z = g.constant(Tensor::from_rows(&rows));
        let f = g.constant(Tensor::from_rows(&fs));
        let out = denoise_batch(&mut g, &s, &cfg, z, &[1, 5, 9], f);
        for (k, t) in [1, 5, 9].iter().enumerate() {
            let single = denoise(&s, &cfg, &rows[k], *t, &fs[k]);
            assert!(g.value(out).row_slice(k).iter().zip(&single).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn mse_gradient_check() {
        for cross in [false, true] {
            let (cfg, s) = setup(cross);
            let z: Vec<Vec<f64>> = (0..2).map(|k| (0..cfg.d_e).map(|i| ((i * 7 + k) as f64).sin()).collect()).collect();
            let f: Vec<Vec<f64>> = (0..2).map(|k| (0..cfg.d_model).map(|i| ((i * 3 + k) as f64).cos()).collect()).collect();
            let target: Vec<Vec<f64>> = (0..2).map(|k| (0..cfg.d_e).map(|i| ((i + 2 * k) as f64 * 0.4).cos()).collect()).collect();
            let names: Vec<String> = s.iter().map(|(n, _)| n.clone()).collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let r = param_grad_check(&s, &names, 3, 1e-5, |g, st| {
                let zv = g.constant(Tensor::from_rows(&z));
                let fv = g.constant(Tensor::from_rows(&f));
                let tv = g.constant(Tensor::from_rows(&target));
                let out = denoise_batch(g, st, &cfg, zv, &[2, 7], fv);
                g.mse_rows(out, tv)
            });
            assert!(r.max_rel_err < 1e-4, "cross={cross}: {r:?}");
        }
    }
}
