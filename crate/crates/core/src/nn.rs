//! Transformer building blocks expressed as graph operations.
//!
//! Parameter names follow `{prefix}.{sublayer}.{weight|bias|gamma|beta}`.

use rand::Rng;

use crate::params::{init_layer_norm, init_linear, ParamStore};
use crate::tensor::{Graph, NodeId};

pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
    let w = g.param(store, &format!("{prefix}.weight"));
    let b = g.param(store, &format!("{prefix}.bias"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
    let gamma = g.param(store, &format!("{prefix}.gamma"));
    let beta = g.param(store, &format!("{prefix}.beta"));
    g.layer_norm(x, gamma, beta)
}

/// Multi-head scaled dot-product attention with `{prefix}.{q,k,v,o}`
/// projections. Rows of `queries` attend over rows of `keys_values`.
pub fn attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    queries: NodeId,
    keys_values: NodeId,
    heads: usize,
    causal: bool,
) -> NodeId {
    let q = linear(g, store, &format!("{prefix}.q"), queries);
    let k = linear(g, store, &format!("{prefix}.k"), keys_values);
    let v = linear(g, store, &format!("{prefix}.v"), keys_values);
    let width = g.value(q).cols();
    let head_dim = width / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim);
        let kh = g.slice_cols(k, h * head_dim, head_dim);
        let vh = g.slice_cols(v, h * head_dim, head_dim);
        let scores = g.matmul_t(qh, kh);
        let scores = g.scale(scores, scale);
        let probs = g.softmax(scores, causal);
        outs.push(g.matmul(probs, vh));
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    };
    linear(g, store, &format!("{prefix}.o"), merged)
}

pub fn init_attention<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    width: usize,
    std: f64,
) {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, rng, &format!("{prefix}.{p}"), width, width, std);
    }
}

/// Two-layer GELU feed-forward `{prefix}.fc1`, `{prefix}.fc2`.
pub fn mlp(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> NodeId {
    let h = linear(g, store, &format!("{prefix}.fc1"), x);
    let h = g.gelu(h);
    linear(g, store, &format!("{prefix}.fc2"), h)
}

pub fn init_mlp<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    width: usize,
    hidden: usize,
    std: f64,
) {
    init_linear(store, rng, &format!("{prefix}.fc1"), width, hidden, std);
    init_linear(store, rng, &format!("{prefix}.fc2"), hidden, width, std);
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub fn self_attention_block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: NodeId,
    heads: usize,
    causal: bool,
) -> NodeId {
    let h = layer_norm(g, store, &format!("{prefix}.ln1"), x);
    let a = attention(g, store, &format!("{prefix}.attn"), h, h, heads, causal);
    let x = g.add(x, a);
    let h = layer_norm(g, store, &format!("{prefix}.ln2"), x);
    let m = mlp(g, store, &format!("{prefix}.mlp"), h);
    g.add(x, m)
}

pub fn init_self_attention_block<R: Rng + ?Sized>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    width: usize,
    hidden: usize,
    std: f64,
) {
    init_layer_norm(store, &format!("{prefix}.ln1"), width);
    init_attention(store, rng, &format!("{prefix}.attn"), width, std);
    init_layer_norm(store, &format!("{prefix}.ln2"), width);
    init_mlp(store, rng, &format!("{prefix}.mlp"), width, hidden, std);
}
