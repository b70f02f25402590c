//! Pre-norm ViT machinery: patch embedding, multi-head self-attention and the
//! feed-forward sublayer, all operating on a batch of token sequences.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{ParamStore, ParamVars};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_layers: usize,
    /// Encoder indices carrying the semantic token learning and fusion stages.
    pub set_layers: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            num_heads: 4,
            mlp_ratio: 2,
            num_layers: 6,
            set_layers: vec![2, 4],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_layers", self.num_layers),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(
                "patch_size",
                format!("{} does not divide image_size {}", self.patch_size, self.image_size),
            ));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(
                "num_heads",
                format!("{} does not divide embed_dim {}", self.num_heads, self.embed_dim),
            ));
        }
        if self.set_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("set_layers", "indices must be strictly increasing"));
        }
        if let Some(&l) = self.set_layers.iter().find(|&&l| l >= self.num_layers) {
            return Err(Error::config(
                "set_layers",
                format!("layer {l} out of range for {} layers", self.num_layers),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn is_set_layer(&self, layer: usize) -> bool {
        self.set_layers.contains(&layer)
    }
}

/// Where a patch token came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    /// An original image patch, by row-major grid index.
    Patch(usize),
    /// A fused token; lists every original patch folded into it.
    Fused(Vec<usize>),
}

impl Provenance {
    pub fn patches(&self) -> Vec<usize> {
        match self {
            Provenance::Patch(i) => vec![*i],
            Provenance::Fused(v) => v.clone(),
        }
    }
}

/// Token state for a batch of images. Rows of `x` are laid out image-major:
/// image `b` owns rows `b*(1+n) .. (b+1)*(1+n)`, the first being its `[cls]` token.
#[derive(Debug, Clone)]
pub struct TokenSet {
    pub x: Var,
    pub batch: usize,
    pub n: usize,
    pub provenance: Vec<Vec<Provenance>>,
}

impl TokenSet {
    pub fn seq_len(&self) -> usize {
        self.n + 1
    }

    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq_len()).collect()
    }

    pub fn patch_rows(&self) -> Vec<usize> {
        (0..self.batch)
            .flat_map(|b| (1..self.seq_len()).map(move |i| b * (self.n + 1) + i))
            .collect()
    }

    /// `[B×d]` view of the cls tokens.
    pub fn cls(&self, g: &mut Graph) -> Result<Var> {
        g.select_rows(self.x, &self.cls_rows())
    }

    /// `[B·n×d]` view of the patch tokens.
    pub fn patches(&self, g: &mut Graph) -> Result<Var> {
        g.select_rows(self.x, &self.patch_rows())
    }

    /// Rebuilds a token matrix from `cls: [B×d]` and `patches: [B·n×d]`.
    pub fn assemble(g: &mut Graph, cls: Var, patches: Var, batch: usize, n: usize) -> Result<Var> {
        let joined = g.concat(&[cls, patches], 0)?;
        let order: Vec<usize> = (0..batch)
            .flat_map(|b| std::iter::once(b).chain((0..n).map(move |i| batch + b * n + i)))
            .collect();
        g.select_rows(joined, &order)
    }
}

pub fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = g.matmul(x, w)?;
    g.bias_add(h, b)
}

/// Initializes the backbone parameters (patch embedding, cls, positions, encoders,
/// final norm) into `store`.
pub fn init_params<R: Rng + ?Sized>(cfg: &BackboneConfig, store: &mut ParamStore, rng: &mut R) {
    let d = cfg.embed_dim;
    let h = cfg.hidden_dim();
    store.insert("patch.w", Tensor::trunc_normal(&[cfg.patch_dim(), d], INIT_STD, rng));
    store.insert("patch.b", Tensor::zeros(&[d]));
    store.insert("cls", Tensor::zeros(&[d]));
    store.insert("pos", Tensor::trunc_normal(&[cfg.num_patches() + 1, d], INIT_STD, rng));
    for l in 0..cfg.num_layers {
        let p = format!("enc{l}");
        store.insert(format!("{p}.ln1.g"), Tensor::ones(&[d]));
        store.insert(format!("{p}.ln1.b"), Tensor::zeros(&[d]));
        store.insert(format!("{p}.attn.qkv.w"), Tensor::trunc_normal(&[d, 3 * d], INIT_STD, rng));
        store.insert(format!("{p}.attn.qkv.b"), Tensor::zeros(&[3 * d]));
        store.insert(format!("{p}.attn.proj.w"), Tensor::trunc_normal(&[d, d], INIT_STD, rng));
        store.insert(format!("{p}.attn.proj.b"), Tensor::zeros(&[d]));
        store.insert(format!("{p}.ln2.g"), Tensor::ones(&[d]));
        store.insert(format!("{p}.ln2.b"), Tensor::zeros(&[d]));
        store.insert(format!("{p}.ffn.fc1.w"), Tensor::trunc_normal(&[d, h], INIT_STD, rng));
        store.insert(format!("{p}.ffn.fc1.b"), Tensor::zeros(&[h]));
        store.insert(format!("{p}.ffn.fc2.w"), Tensor::trunc_normal(&[h, d], INIT_STD, rng));
        store.insert(format!("{p}.ffn.fc2.b"), Tensor::zeros(&[d]));
    }
    store.insert("norm.g", Tensor::ones(&[d]));
    store.insert("norm.b", Tensor::zeros(&[d]));
}

/// Flattens a batch of `C×H×W` images into a `[B·n × C·p·p]` patch matrix.
/// Patches are taken in row-major grid order; each is flattened channel-major.
pub fn patchify(images: &[&Tensor], cfg: &BackboneConfig) -> Result<Tensor> {
    let (s, p, c) = (cfg.image_size, cfg.patch_size, cfg.channels);
    let grid = cfg.grid();
    let pd = cfg.patch_dim();
    let mut out = Vec::with_capacity(images.len() * cfg.num_patches() * pd);
    for img in images {
        if img.shape() != [c, s, s] {
            return Err(Error::dim(
                "patch_embed",
                format!("image {:?}, expected [{c}, {s}, {s}]", img.shape()),
            ));
        }
        let data = img.data();
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c {
                    for dy in 0..p {
                        let row = (ch * s + gy * p + dy) * s + gx * p;
                        out.extend_from_slice(&data[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::matrix(images.len() * cfg.num_patches(), pd, out)
}

/// Projects patches, prepends the learned cls token and adds positional embeddings.
pub fn patch_embed(g: &mut Graph, pv: &ParamVars, cfg: &BackboneConfig, images: &[&Tensor]) -> Result<TokenSet> {
    let batch = images.len();
    if batch == 0 {
        return Err(Error::Contract("patch_embed on an empty batch".into()));
    }
    let n = cfg.num_patches();
    let d = cfg.embed_dim;
    let patches = g.constant(patchify(images, cfg)?);
    let proj = linear(g, patches, pv.get("patch.w")?, pv.get("patch.b")?)?;
    let cls = g.reshape(pv.get("cls")?, &[1, d])?;
    let cls = g.select_rows(cls, &vec![0; batch])?;
    let x = TokenSet::assemble(g, cls, proj, batch, n)?;
    let x = g.reshape(x, &[batch, n + 1, d])?;
    let pos = g.reshape(pv.get("pos")?, &[1, n + 1, d])?;
    let pos = g.select_rows(pos, &vec![0; batch])?;
    let x = g.add(x, pos)?;
    let x = g.reshape(x, &[batch * (n + 1), d])?;
    Ok(TokenSet {
        x,
        batch,
        n,
        provenance: vec![(0..n).map(Provenance::Patch).collect(); batch],
    })
}

/// Pre-norm residual multi-head self-attention over each `(1+n)`-token sequence.
/// Also returns the attention probabilities, shaped `[B·heads, T, T]`.
pub fn mhsa(g: &mut Graph, pv: &ParamVars, prefix: &str, cfg: &BackboneConfig, tokens: &TokenSet) -> Result<(TokenSet, Var)> {
    let (b, t, d, h) = (tokens.batch, tokens.seq_len(), cfg.embed_dim, cfg.num_heads);
    let hd = d / h;
    let x = g.layer_norm(
        tokens.x,
        pv.get(&format!("{prefix}.ln1.g"))?,
        pv.get(&format!("{prefix}.ln1.b"))?,
        LN_EPS,
    )?;
    let qkv = linear(
        g,
        x,
        pv.get(&format!("{prefix}.attn.qkv.w"))?,
        pv.get(&format!("{prefix}.attn.qkv.b"))?,
    )?;
    let qkv = g.reshape(qkv, &[b, t, 3, h, hd])?;
    let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?; // [3, B, h, T, hd]
    let mut parts = Vec::with_capacity(3);
    for i in 0..3 {
        let s = g.slice(qkv, 0, i, i + 1)?;
        parts.push(g.reshape(s, &[b * h, t, hd])?);
    }
    let scores = g.bmm(parts[0], parts[1], true)?;
    let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
    let attn = g.softmax(scores)?;
    let out = g.bmm(attn, parts[2], false)?; // [B·h, T, hd]
    let out = g.reshape(out, &[b, h, t, hd])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[b * t, d])?;
    let out = linear(
        g,
        out,
        pv.get(&format!("{prefix}.attn.proj.w"))?,
        pv.get(&format!("{prefix}.attn.proj.b"))?,
    )?;
    let x = g.add(tokens.x, out)?;
    Ok((TokenSet { x, ..tokens.clone() }, attn))
}

/// Pre-norm residual two-layer GELU MLP applied to every token.
pub fn ffn(g: &mut Graph, pv: &ParamVars, prefix: &str, tokens: &TokenSet) -> Result<TokenSet> {
    let x = g.layer_norm(
        tokens.x,
        pv.get(&format!("{prefix}.ln2.g"))?,
        pv.get(&format!("{prefix}.ln2.b"))?,
        LN_EPS,
    )?;
    let hdn = linear(
        g,
        x,
        pv.get(&format!("{prefix}.ffn.fc1.w"))?,
        pv.get(&format!("{prefix}.ffn.fc1.b"))?,
    )?;
    let hdn = g.gelu(hdn);
    let out = linear(
        g,
        hdn,
        pv.get(&format!("{prefix}.ffn.fc2.w"))?,
        pv.get(&format!("{prefix}.ffn.fc2.b"))?,
    )?;
    let x = g.add(tokens.x, out)?;
    Ok(TokenSet { x, ..tokens.clone() })
}

/// A plain encoder: attention followed by the feed-forward sublayer.
pub fn encoder(g: &mut Graph, pv: &ParamVars, layer: usize, cfg: &BackboneConfig, tokens: &TokenSet) -> Result<(TokenSet, Var)> {
    let prefix = format!("enc{layer}");
    let (t, attn) = mhsa(g, pv, &prefix, cfg, tokens)?;
    Ok((ffn(g, pv, &prefix, &t)?, attn))
}
