//! Scene-view aggregation and gated bidirectional cross-view attention.

use crate::error::{CaupsiError, Result};
use crate::nn::{add_linear, add_mha_params, linear, mha, Bindings, Init, ParamStore};
use crate::tensor::{Graph, Scalar, Var};

pub const SCENE_ATT: &str = "fusion.scene_att";
pub const CROSS_IN: &str = "fusion.cross.in";
pub const CROSS_SCENE: &str = "fusion.cross.scene";

/// Registers the scene-attention MLP (`N_s*d_c -> hidden -> N_s`, no biases).
pub fn add_scene_attention<F: Scalar>(
    store: &mut ParamStore<F>,
    n_scene: usize,
    d_c: usize,
    hidden: usize,
    seed: u64,
) -> Result<()> {
    add_linear(store, &format!("{SCENE_ATT}.w1"), n_scene * d_c, hidden, false, seed)?;
    add_linear(store, &format!("{SCENE_ATT}.w2"), hidden, n_scene, false, seed)
}

#[derive(Clone, Copy, Debug)]
pub struct SceneFusion {
    /// `[batch, d_c]`
    pub fused: Var,
    /// `[batch, N_s]`, rows on the simplex.
    pub alpha: Var,
}

/// `alpha = softmax(W2 relu(W1 [h_1; ...; h_N]))`, output `sum_i alpha_i h_i`.
pub fn fuse_scenes<F: Scalar>(g: &mut Graph<F>, p: &Bindings, views: &[Var]) -> Result<SceneFusion> {
    if views.is_empty() {
        return Err(CaupsiError::Shape("fuse_scenes needs at least one view".into()));
    }
    let (batch, d) = match g.shape(views[0]) {
        [b, d] => (*b, *d),
        s => return Err(CaupsiError::Shape(format!("scene view {s:?}"))),
    };
    let n = views.len();
    let cat = g.concat(views)?;
    let h = linear(g, p, &format!("{SCENE_ATT}.w1"), cat)?;
    let h = g.relu(h);
    let logits = linear(g, p, &format!("{SCENE_ATT}.w2"), h)?;
    let alpha = g.softmax(logits)?;
    let stacked = g.reshape(cat, [batch, n, d])?;
    let a3 = g.reshape(alpha, [batch, 1, n])?;
    let fused = g.bmm(a3, stacked, false)?;
    let fused = g.reshape(fused, [batch, d])?;
    Ok(SceneFusion { fused, alpha })
}

/// Registers both attention directions: MHA, query layer norm, and gate.
pub fn add_cross_view<F: Scalar>(store: &mut ParamStore<F>, d_f: usize, seed: u64) -> Result<()> {
    for prefix in [CROSS_IN, CROSS_SCENE] {
        add_mha_params(store, &format!("{prefix}.attn"), d_f, seed)?;
        store.add(&format!("{prefix}.ln.gamma"), &[d_f], Init::Constant(1.0), true, seed)?;
        store.add(&format!("{prefix}.ln.beta"), &[d_f], Init::Constant(0.0), true, seed)?;
        add_linear(store, &format!("{prefix}.gate"), 2 * d_f, d_f, true, seed)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct CrossViewOut {
    pub f_in: Var,
    pub f_scene: Var,
    /// Attended context per direction.
    pub c_in: Var,
    pub c_scene: Var,
    pub g_in: Var,
    pub g_scene: Var,
}

/// One direction: `c = MHA(LN(src), other, other)`, `g = sigmoid(W_g [src; c] + b_g)`,
/// `src + g * c`. Returns `(updated, c, g)`.
fn attend<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bindings,
    prefix: &str,
    src: Var,
    other_tokens: Var,
    batch: usize,
    heads: usize,
    ln_eps: f64,
) -> Result<(Var, Var, Var)> {
    let gamma = p.get(&format!("{prefix}.ln.gamma"))?;
    let beta = p.get(&format!("{prefix}.ln.beta"))?;
    let q = g.layer_norm(src, gamma, beta, F::lit(ln_eps))?;
    let c = mha(g, p, &format!("{prefix}.attn"), q, other_tokens, batch, heads)?.out;
    let cat = g.concat(&[src, c])?;
    let pre = linear(g, p, &format!("{prefix}.gate"), cat)?;
    let gate = g.sigmoid(pre);
    let upd = g.mul(gate, c)?;
    Ok((g.add(src, upd)?, c, gate))
}

/// Gated bidirectional cross-view attention between the inside and scene streams.
///
/// By default each side attends to the other's single vector. With
/// `scene_tokens` (`[batch * N_s, d_f]`), the inside stream attends over the
/// per-view scene tokens instead.
pub fn cross_view<F: Scalar>(
    g: &mut Graph<F>,
    p: &Bindings,
    f_in: Var,
    f_scene: Var,
    scene_tokens: Option<Var>,
    heads: usize,
    ln_eps: f64,
) -> Result<CrossViewOut> {
    if g.shape(f_in) != g.shape(f_scene) || g.shape(f_in).len() != 2 {
        return Err(CaupsiError::Shape(format!(
            "cross_view: {:?} vs {:?}",
            g.shape(f_in),
            g.shape(f_scene)
        )));
    }
    let batch = g.shape(f_in)[0];
    let kv_scene = scene_tokens.unwrap_or(f_scene);
    let (t_in, c_in, g_in) = attend(g, p, CROSS_IN, f_in, kv_scene, batch, heads, ln_eps)?;
    let (t_scene, c_scene, g_scene) = attend(g, p, CROSS_SCENE, f_scene, f_in, batch, heads, ln_eps)?;
    Ok(CrossViewOut {
        f_in: t_in,
        f_scene: t_scene,
        c_in,
        c_scene,
        g_in,
        g_scene,
    })
}
