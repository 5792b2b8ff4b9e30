//! Autoencoder, geometry encoder, and denoiser built on [`crate::autodiff`].
//!
//! Parameters live in one [`ParamStore`] under the prefixes `ae.`, `geo.`
//! and `den.`; every forward function takes the store and a [`Graph`].

mod autoencoder;
mod denoiser;
mod geometry;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionShape, Graph, ParamStore, Var};

pub use autoencoder::{
    ae_decode, ae_encode, ae_loss, decode_logits, embed_commands, init_autoencoder, train_autoencoder, AeLoss,
    AeTrainConfig, AeTrainLog, DecodedLogits, EncoderOut, SequenceBatch, reconstruct, reconstruction_accuracy,
};
pub use denoiser::{denoise, denoise_batch, init_denoiser};
pub use geometry::{geometry_encode, geometry_encode_batch, init_geometry_encoder, GeometryError};

/// Network widths and depths. Defaults are desk-scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Command embedding and latent width.
    pub d_e: usize,
    /// Width of the geometry encoder and denoiser.
    pub d_model: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub ae_blocks: usize,
    pub geo_blocks: usize,
    pub den_blocks: usize,
    /// Width of a view feature before the geometry encoder.
    pub d_feat: usize,
    /// Variational encoder with a KL term towards N(0, kl_prior_std²).
    pub kl: bool,
    pub kl_prior_std: f64,
    pub kl_weight: f64,
    /// Feed the condition through cross-attention instead of as a token.
    pub cross_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_e: 64,
            d_model: 64,
            heads: 8,
            ff_mult: 4,
            ae_blocks: 2,
            geo_blocks: 2,
            den_blocks: 4,
            d_feat: 256,
            kl: false,
            kl_prior_std: 0.25,
            kl_weight: 1e-5,
            cross_attention: false,
        }
    }
}

impl ModelConfig {
    /// Small widths for gradient checks and unit tests.
    pub fn toy() -> Self {
        ModelConfig { d_e: 8, d_model: 8, heads: 2, ff_mult: 2, ae_blocks: 1, geo_blocks: 1, den_blocks: 1, d_feat: 12, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, d) in [("d_e", self.d_e), ("d_model", self.d_model)] {
            if d == 0 || d % self.heads.max(1) != 0 || d % 2 != 0 {
                return Err(format!("{name} = {d} must be even and divisible by heads = {}", self.heads));
            }
        }
        if self.heads == 0 || self.ff_mult == 0 || self.d_feat == 0 {
            return Err("heads, ff_mult and d_feat must be positive".into());
        }
        Ok(())
    }
}

/// Parameters for all three networks.
pub fn init_all(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    init_autoencoder(&mut store, cfg, seed);
    init_geometry_encoder(&mut store, cfg, seed.wrapping_add(1));
    init_denoiser(&mut store, cfg, seed.wrapping_add(2));
    store
}

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Linear layer `[fan_in → fan_out]` with scaled Gaussian weights.
pub(crate) fn init_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    store.init_normal(&format!("{name}.w"), fan_in, fan_out, gain / (fan_in as f64).sqrt(), rng);
    store.init_const(&format!("{name}.b"), 1, fan_out, 0.0);
}

pub(crate) fn init_norm(store: &mut ParamStore, name: &str, d: usize) {
    store.init_const(&format!("{name}.g"), 1, d, 1.0);
    store.init_const(&format!("{name}.b"), 1, d, 0.0);
}

/// Pre-norm transformer block parameters; `cross` adds a cross-attention
/// sublayer.
pub(crate) fn init_block(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, ff: usize, depth: usize, cross: bool) {
    let out_gain = 1.0 / (2.0 * depth as f64).sqrt();
    init_norm(store, &format!("{name}.ln1"), d);
    for p in ["q", "k", "v"] {
        init_linear(store, rng, &format!("{name}.attn.{p}"), d, d, 1.0);
    }
    init_linear(store, rng, &format!("{name}.attn.o"), d, d, out_gain);
    if cross {
        init_norm(store, &format!("{name}.lnx"), d);
        for p in ["q", "k", "v"] {
            init_linear(store, rng, &format!("{name}.xattn.{p}"), d, d, 1.0);
        }
        init_linear(store, rng, &format!("{name}.xattn.o"), d, d, out_gain);
    }
    init_norm(store, &format!("{name}.ln2"), d);
    init_linear(store, rng, &format!("{name}.ff1"), d, d * ff, 1.0);
    init_linear(store, rng, &format!("{name}.ff2"), d * ff, d, out_gain);
}

pub(crate) fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let w = g.param(store, &format!("{name}.w"));
    let b = g.param(store, &format!("{name}.b"));
    g.linear(x, w, b)
}

pub(crate) fn norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let gm = g.param(store, &format!("{name}.g"));
    let b = g.param(store, &format!("{name}.b"));
    g.layer_norm(x, gm, b)
}

fn attend(g: &mut Graph, store: &ParamStore, name: &str, q_in: Var, kv_in: Var, shape: AttentionShape, mask: Option<&[bool]>) -> Var {
    let q = linear(g, store, &format!("{name}.q"), q_in);
    let k = linear(g, store, &format!("{name}.k"), kv_in);
    let v = linear(g, store, &format!("{name}.v"), kv_in);
    let a = g.attention(q, k, v, shape, mask);
    linear(g, store, &format!("{name}.o"), a)
}

/// `x + Attn(LN(x))`, optionally `+ XAttn(LN(·), context)`, then
/// `+ FF(LN(·))`. Rows of `x` are `shape.batch` segments of `shape.q_len`.
pub(crate) fn block(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    shape: AttentionShape,
    mask: Option<&[bool]>,
    context: Option<(Var, usize)>,
) -> Var {
    let self_shape = AttentionShape { k_len: shape.q_len, ..shape };
    let h = norm(g, store, &format!("{name}.ln1"), x);
    let a = attend(g, store, &format!("{name}.attn"), h, h, self_shape, mask);
    let mut x = g.add(x, a);
    if let Some((ctx, ctx_len)) = context {
        let h = norm(g, store, &format!("{name}.lnx"), x);
        let cross_shape = AttentionShape { k_len: ctx_len, ..shape };
        let a = attend(g, store, &format!("{name}.xattn"), h, ctx, cross_shape, None);
        x = g.add(x, a);
    }
    let h = norm(g, store, &format!("{name}.ln2"), x);
    let f = linear(g, store, &format!("{name}.ff1"), h);
    let f = g.gelu(f);
    let f = linear(g, store, &format!("{name}.ff2"), f);
    g.add(x, f)
}
