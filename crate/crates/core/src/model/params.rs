use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Ablation, ModelDims};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::Result;
use crate::netrecon::MACRO_HIDDEN;
use crate::panel::{NUM_FEATURES, NUM_MACRO};

/// FNV-1a; a stable stream id per parameter name.
fn stream_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Each tensor draws from its own ChaCha8 stream of `seed`, so blocks shared by
/// several ablations start from the same values.
fn uniform(seed: u64, name: &str, rows: usize, cols: usize, bound: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(name));
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::new(rows, cols, data).expect("shape")
}

/// Fresh parameters for `ablation`: weights uniform in +-1/sqrt(fan_in) keyed by
/// `seed`, biases zero, batchnorm scale one. The first head layer has no bias of
/// its own since batchnorm's shift replaces it.
pub fn init_params(dims: &ModelDims, ablation: Ablation, seed: u64) -> Result<ParamStore> {
    let mut ps = ParamStore::default();
    let w = |ps: &mut ParamStore, name: &str, r: usize, c: usize, fan_in: usize| {
        ps.insert(
            name,
            uniform(seed, name, r, c, 1.0 / (fan_in as f64).sqrt()),
        )
    };
    let ds = dims.spatial_dim();
    for (layer, d_in) in [("gat1", NUM_FEATURES), ("gat2", ds)] {
        w(&mut ps, &format!("{layer}.w"), d_in, ds, d_in)?;
        w(&mut ps, &format!("{layer}.a_dst"), 1, ds, 2 * dims.head_dim)?;
        w(&mut ps, &format!("{layer}.a_src"), 1, ds, 2 * dims.head_dim)?;
    }
    if ablation.uses_macro() {
        w(&mut ps, "macro.w1", NUM_MACRO, MACRO_HIDDEN, NUM_MACRO)?;
        ps.insert("macro.b1", Tensor::zeros(1, MACRO_HIDDEN))?;
        w(&mut ps, "macro.w2", MACRO_HIDDEN, 1, MACRO_HIDDEN)?;
        ps.insert("macro.b2", Tensor::zeros(1, 1))?;
    }
    let h = dims.lstm_hidden;
    let context = if ablation.uses_lstm() {
        for layer in 0..dims.lstm_layers {
            let d_in = if layer == 0 { ds } else { 2 * h };
            for dir in ["fwd", "bwd"] {
                let p = format!("lstm.l{layer}.{dir}");
                w(&mut ps, &format!("{p}.wx"), d_in, 4 * h, h)?;
                w(&mut ps, &format!("{p}.wh"), h, 4 * h, h)?;
                ps.insert(&format!("{p}.b"), Tensor::zeros(1, 4 * h))?;
            }
        }
        if ablation.uses_temporal_attention() {
            w(&mut ps, "tattn.w", 2 * h, dims.attn_dim, 2 * h)?;
            ps.insert("tattn.b", Tensor::zeros(1, dims.attn_dim))?;
            w(&mut ps, "tattn.v", dims.attn_dim, 1, dims.attn_dim)?;
        }
        2 * h
    } else {
        ds
    };
    let head_in = context + NUM_FEATURES + NUM_MACRO;
    w(&mut ps, "head.w1", head_in, dims.head_hidden, head_in)?;
    ps.insert("head.bn_gamma", Tensor::ones(1, dims.head_hidden))?;
    ps.insert("head.bn_beta", Tensor::zeros(1, dims.head_hidden))?;
    w(&mut ps, "head.w2", dims.head_hidden, 1, dims.head_hidden)?;
    ps.insert("head.b2", Tensor::zeros(1, 1))?;
    Ok(ps)
}
