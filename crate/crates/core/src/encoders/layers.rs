use super::params::Graph;
use crate::substrate::{Real, Segment, Var};

pub(crate) fn linear<'g, T: Real>(g: &'g Graph<'_, T>, x: Var<'g, T>, prefix: &str) -> Var<'g, T> {
    x.matmul(g.param(&format!("{prefix}.weight")))
        .add_row(g.param(&format!("{prefix}.bias")))
}

/// Linear map without bias.
pub(crate) fn project<'g, T: Real>(g: &'g Graph<'_, T>, x: Var<'g, T>, prefix: &str) -> Var<'g, T> {
    x.matmul(g.param(&format!("{prefix}.weight")))
}

pub(crate) fn layer_norm<'g, T: Real>(
    g: &'g Graph<'_, T>,
    x: Var<'g, T>,
    prefix: &str,
    eps: f64,
) -> Var<'g, T> {
    x.layer_norm(eps)
        .mul_row(g.param(&format!("{prefix}.gain")))
        .add_row(g.param(&format!("{prefix}.bias")))
}

/// Pre-norm transformer block: attention then GELU feed-forward, both residual.
pub(crate) fn block<'g, T: Real>(
    g: &'g Graph<'_, T>,
    x: Var<'g, T>,
    prefix: &str,
    segments: &[Segment],
    heads: usize,
    eps: f64,
) -> Var<'g, T> {
    let h = layer_norm(g, x, &format!("{prefix}.ln1"), eps);
    let q = linear(g, h, &format!("{prefix}.attn.q"));
    let k = linear(g, h, &format!("{prefix}.attn.k"));
    let v = linear(g, h, &format!("{prefix}.attn.v"));
    let a = q.attention(k, v, segments.to_vec(), heads);
    let x = x.add(linear(g, a, &format!("{prefix}.attn.o")));
    let h = layer_norm(g, x, &format!("{prefix}.ln2"), eps);
    let f = linear(
        g,
        linear(g, h, &format!("{prefix}.ffn.up")).gelu(),
        &format!("{prefix}.ffn.down"),
    );
    x.add(f)
}

pub(crate) fn stack<'g, T: Real>(
    g: &'g Graph<'_, T>,
    mut x: Var<'g, T>,
    encoder: &str,
    layers: usize,
    segments: &[Segment],
    heads: usize,
    eps: f64,
) -> Var<'g, T> {
    for l in 0..layers {
        x = block(g, x, &format!("{encoder}.blocks.{l}"), segments, heads, eps);
    }
    layer_norm(g, x, &format!("{encoder}.ln_f"), eps)
}
