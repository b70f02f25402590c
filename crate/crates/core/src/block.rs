//! Semantic-embedded token learning and visual enhancement.
//!
//! Inside a selected encoder, after self-attention:
//!
//! 1. the `[cls]` token is mapped to attribute space (`z_hat`) and the class
//!    prototype back to visual space (`cls_hat`); during training the stream's cls
//!    becomes `γ·cls + (1−γ)·cls_hat`;
//! 2. the (possibly enhanced) cls queries the patch tokens, giving one
//!    visual-semantic score per patch;
//! 3. the top-`k` patches (`k = max(1, ⌊κn⌋)`) are kept and the rest are folded
//!    into a single score-weighted fused token;
//! 4. the feed-forward sublayer runs over `[cls ∥ kept ∥ fused]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, linear, BackboneConfig, Provenance, TokenSet, INIT_STD};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{ParamStore, ParamVars};

/// Source of the keys and values scored by the cls query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KvProjection {
    /// Keys and values are the self-attention outputs themselves.
    #[default]
    Identity,
    /// Learned `d×d` key and value projections.
    Learned,
}

/// What survives for kept tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeptTokens {
    /// Kept tokens pass through unchanged.
    #[default]
    Raw,
    /// Kept tokens are replaced by `a_i · v_i`.
    Scaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub gamma: f64,
    pub kappa: f64,
    pub kv_projection: KvProjection,
    pub kept_tokens: KeptTokens,
    /// Width of both hidden layers of the two bridge MLPs.
    pub bridge_hidden: usize,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            gamma: 0.9,
            kappa: 0.9,
            kv_projection: KvProjection::Identity,
            kept_tokens: KeptTokens::Raw,
            bridge_hidden: 64,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        check_kappa(self.kappa)?;
        if self.bridge_hidden == 0 {
            return Err(Error::config("bridge_hidden", "must be positive"));
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::config("gamma", format!("{gamma} outside [0, 1]")));
    }
    Ok(())
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(Error::config("kappa", format!("{kappa} outside (0, 1]")));
    }
    Ok(())
}

/// Number of patch tokens kept out of `n`: `max(1, ⌊κn⌋)`.
pub fn keep_count(n: usize, kappa: f64) -> usize {
    // The epsilon absorbs products like 0.29 * 100 = 28.999999999999996.
    ((kappa * n as f64 + 1e-9).floor() as usize).clamp(1, n.max(1))
}

/// Patch-token count after a fusion stage with `n` inputs.
pub fn patches_after(n: usize, kappa: f64) -> usize {
    if n < 2 {
        return n;
    }
    let k = keep_count(n, kappa);
    if k < n {
        k + 1
    } else {
        k
    }
}

/// Initializes one encoder's semantic bridge and, if configured, its K/V projections.
pub fn init_params<R: Rng + ?Sized>(
    layer: usize,
    backbone: &BackboneConfig,
    block: &BlockConfig,
    attr_dim: usize,
    store: &mut ParamStore,
    rng: &mut R,
) {
    let d = backbone.embed_dim;
    let h = block.bridge_hidden;
    for (name, dims) in [("v2s", [d, h, h, attr_dim]), ("s2v", [attr_dim, h, h, d])] {
        for i in 0..3 {
            store.insert(
                format!("enc{layer}.{name}.{i}.w"),
                Tensor::trunc_normal(&[dims[i], dims[i + 1]], INIT_STD, rng),
            );
            store.insert(format!("enc{layer}.{name}.{i}.b"), Tensor::zeros(&[dims[i + 1]]));
        }
    }
    if block.kv_projection == KvProjection::Learned {
        store.insert(format!("enc{layer}.kv.k"), Tensor::eye(d));
        store.insert(format!("enc{layer}.kv.v"), Tensor::eye(d));
    }
}

/// Two-hidden-layer ReLU MLP of the semantic bridge (`v2s` or `s2v`).
pub fn bridge_mlp(g: &mut Graph, pv: &ParamVars, layer: usize, which: &str, x: Var) -> Result<Var> {
    let mut h = x;
    for i in 0..3 {
        h = linear(
            g,
            h,
            pv.get(&format!("enc{layer}.{which}.{i}.w"))?,
            pv.get(&format!("enc{layer}.{which}.{i}.b"))?,
        )?;
        if i < 2 {
            h = g.relu(h);
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy)]
pub struct Enhanced {
    /// Cls carried forward: enhanced during training, the input cls otherwise.
    pub cls_enhanced: Var,
    /// Attribute reconstruction from the visual cls, `[B×|A|]`.
    pub z_hat: Var,
    /// Visual reconstruction from the prototype, `[B×d]`; training only.
    pub cls_hat: Option<Var>,
}

/// Maps cls to attribute space and, when training, mixes the prototype's visual
/// reconstruction into cls with weight `1−γ`.
pub fn semantic_enhance(
    g: &mut Graph,
    pv: &ParamVars,
    layer: usize,
    cls: Var,
    z: Option<Var>,
    gamma: f64,
    training: bool,
) -> Result<Enhanced> {
    check_gamma(gamma)?;
    let z_hat = bridge_mlp(g, pv, layer, "v2s", cls)?;
    if !training {
        return Ok(Enhanced {
            cls_enhanced: cls,
            z_hat,
            cls_hat: None,
        });
    }
    let z = z.ok_or_else(|| Error::Contract("class prototype required while training".into()))?;
    let cls_hat = bridge_mlp(g, pv, layer, "s2v", z)?;
    if g.shape(cls_hat) != g.shape(cls) {
        return Err(Error::dim(
            "semantic_enhance",
            format!("cls {:?} vs reconstruction {:?}", g.shape(cls), g.shape(cls_hat)),
        ));
    }
    let keep = g.scale(cls, gamma);
    let mix = g.scale(cls_hat, 1.0 - gamma);
    let cls_enhanced = g.add(keep, mix)?;
    Ok(Enhanced {
        cls_enhanced,
        z_hat,
        cls_hat: Some(cls_hat),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    /// Visual-semantic scores, `[B×n]`, each row a distribution.
    pub a: Var,
    /// Values, `[B·n×d]`.
    pub v: Var,
    /// Score-weighted values `a_i·v_i`, `[B·n×d]`; rows of one image sum to the readout `a·V`.
    pub f: Var,
}

/// Single-query attention from each image's cls over its `n` patch tokens,
/// scaled by `√d`.
pub fn token_attention(
    g: &mut Graph,
    cls_enhanced: Var,
    patches: Var,
    batch: usize,
    n: usize,
    kv: Option<(Var, Var)>,
) -> Result<Attention> {
    if n == 0 {
        return Err(Error::dim("token_attention", "no patch tokens"));
    }
    let d = g.shape(patches)[1];
    let (k, v) = match kv {
        Some((wk, wv)) => (g.matmul(patches, wk)?, g.matmul(patches, wv)?),
        None => (patches, patches),
    };
    let q = g.reshape(cls_enhanced, &[batch, 1, d])?;
    let k3 = g.reshape(k, &[batch, n, d])?;
    let logits = g.bmm(q, k3, true)?;
    let logits = g.reshape(logits, &[batch, n])?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    let a = g.softmax(logits)?;
    let a_flat = g.reshape(a, &[batch * n])?;
    let f = g.scale_rows(v, a_flat)?;
    Ok(Attention { a, v, f })
}

#[derive(Debug, Clone)]
pub struct VieOutput {
    /// Per image, kept patch positions (ascending, 0-based within the input).
    pub kept: Vec<Vec<usize>>,
    /// Per image, fused-away positions (ascending).
    pub dropped: Vec<Vec<usize>>,
    /// `[B×d]`, absent when nothing was dropped.
    pub fused: Option<Var>,
    /// `[B·n_out×d]`: kept tokens in input order, then the fused token.
    pub patches_out: Var,
    pub n_out: usize,
}

/// Top-`k` positions of `scores` by value, ties to the lower index, returned ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut kept = order[..k.min(scores.len())].to_vec();
    kept.sort_unstable();
    kept
}

/// Keeps the top-`k` scored patches of every image and folds the rest into
/// `Σ a_j v_j`.
pub fn visual_enhance(g: &mut Graph, att: &Attention, batch: usize, n: usize, kappa: f64, kept_mode: KeptTokens) -> Result<VieOutput> {
    check_kappa(kappa)?;
    let keep_src = match kept_mode {
        KeptTokens::Raw => att.v,
        KeptTokens::Scaled => att.f,
    };
    if n < 2 {
        log::warn!("visual enhancement skipped: only {n} patch token(s)");
        let patches_out = g.select_rows(keep_src, &(0..batch * n).collect::<Vec<_>>())?;
        return Ok(VieOutput {
            kept: vec![(0..n).collect(); batch],
            dropped: vec![Vec::new(); batch],
            fused: None,
            patches_out,
            n_out: n,
        });
    }
    let k = keep_count(n, kappa);
    let scores = g.value(att.a).clone();
    let mut kept = Vec::with_capacity(batch);
    let mut dropped = Vec::with_capacity(batch);
    for b in 0..batch {
        let p = top_k(scores.row(b), k);
        let nset: Vec<usize> = (0..n).filter(|i| p.binary_search(i).is_err()).collect();
        kept.push(p);
        dropped.push(nset);
    }
    let kept_rows: Vec<usize> = kept
        .iter()
        .enumerate()
        .flat_map(|(b, p)| p.iter().map(move |i| b * n + i))
        .collect();
    let kept_v = g.select_rows(keep_src, &kept_rows)?;
    let m = n - k;
    if m == 0 {
        return Ok(VieOutput {
            kept,
            dropped,
            fused: None,
            patches_out: kept_v,
            n_out: k,
        });
    }
    let d = g.shape(att.v)[1];
    let drop_rows: Vec<usize> = dropped
        .iter()
        .enumerate()
        .flat_map(|(b, nset)| nset.iter().map(move |j| b * n + j))
        .collect();
    let dropped_f = g.select_rows(att.f, &drop_rows)?;
    let dropped_f = g.reshape(dropped_f, &[batch, m, d])?;
    let fused = g.sum_axis(dropped_f, 1)?;
    let joined = g.concat(&[kept_v, fused], 0)?;
    let order: Vec<usize> = (0..batch)
        .flat_map(|b| (0..k).map(move |i| b * k + i).chain(std::iter::once(batch * k + b)))
        .collect();
    let patches_out = g.select_rows(joined, &order)?;
    Ok(VieOutput {
        kept,
        dropped,
        fused: Some(fused),
        patches_out,
        n_out: k + 1,
    })
}

/// Everything a semantic layer exposes for losses and tracing.
#[derive(Debug, Clone)]
pub struct SetOutput {
    pub layer: usize,
    /// Cls before enhancement, `[B×d]` (the visual reconstruction target).
    pub cls_in: Var,
    pub enhanced: Enhanced,
    pub attention: Attention,
}

#[derive(Debug, Clone)]
pub struct LayerOutput {
    pub set: SetOutput,
    pub vie: VieOutput,
    /// Provenance of the patch tokens entering the fusion stage.
    pub provenance_in: Vec<Vec<Provenance>>,
    /// Self-attention probabilities of this layer, `[B·heads, T, T]`.
    pub mhsa_attn: Var,
}

/// Encoder with the semantic stages between self-attention and the FFN.
/// `z` holds the ground-truth prototypes `[B×|A|]` and is only read when training.
#[allow(clippy::too_many_arguments)]
pub fn zslvit_encoder(
    g: &mut Graph,
    pv: &ParamVars,
    layer: usize,
    backbone_cfg: &BackboneConfig,
    cfg: &BlockConfig,
    tokens: &TokenSet,
    z: Option<Var>,
    training: bool,
) -> Result<(TokenSet, LayerOutput)> {
    let prefix = format!("enc{layer}");
    let (t, mhsa_attn) = backbone::mhsa(g, pv, &prefix, backbone_cfg, tokens)?;
    let (batch, n) = (t.batch, t.n);
    let cls_in = t.cls(g)?;
    let patches = t.patches(g)?;
    let enhanced = semantic_enhance(g, pv, layer, cls_in, z, cfg.gamma, training)?;
    let kv = match cfg.kv_projection {
        KvProjection::Identity => None,
        KvProjection::Learned => Some((pv.get(&format!("{prefix}.kv.k"))?, pv.get(&format!("{prefix}.kv.v"))?)),
    };
    let attention = token_attention(g, enhanced.cls_enhanced, patches, batch, n, kv)?;
    let vie = visual_enhance(g, &attention, batch, n, cfg.kappa, cfg.kept_tokens)?;

    let provenance: Vec<Vec<Provenance>> = t
        .provenance
        .iter()
        .enumerate()
        .map(|(b, prov)| {
            let mut out: Vec<Provenance> = vie.kept[b].iter().map(|&i| prov[i].clone()).collect();
            if !vie.dropped[b].is_empty() {
                let mut members: Vec<usize> = vie.dropped[b].iter().flat_map(|&j| prov[j].patches()).collect();
                members.sort_unstable();
                out.push(Provenance::Fused(members));
            }
            out
        })
        .collect();
    let x = TokenSet::assemble(g, enhanced.cls_enhanced, vie.patches_out, batch, vie.n_out)?;
    let next = TokenSet {
        x,
        batch,
        n: vie.n_out,
        provenance,
    };
    let out = backbone::ffn(g, pv, &prefix, &next)?;
    Ok((
        out,
        LayerOutput {
            set: SetOutput {
                layer,
                cls_in,
                enhanced,
                attention,
            },
            vie,
            provenance_in: t.provenance,
            mhsa_attn,
        },
    ))
}

#[cfg(test)]
mod tests;
