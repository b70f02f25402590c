//! The full network: patch embedding, a stack of plain and semantic encoders,
//! the final norm and the visual-to-attribute head.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig, TokenSet, INIT_STD, LN_EPS};
use crate::block::{self, BlockConfig, LayerOutput};
use crate::error::{Error, Result};
use crate::numerics::{Graph, L1Reduction, Tensor, Var};
use crate::objectives::{self, LossBreakdown, LossWeights};
use crate::params::{ParamStore, ParamVars};
use crate::prototypes::{ClassId, PrototypeTable};

pub const CONFIG_FILE: &str = "model.toml";
pub const HEAD: &str = "head.w_v2s";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub block: BlockConfig,
    pub attr_dim: usize,
    /// L2-normalize prototype rows wherever they enter the network or the logits.
    pub normalize_prototypes: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            block: BlockConfig::default(),
            attr_dim: 16,
            normalize_prototypes: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.block.validate()?;
        if self.attr_dim == 0 {
            return Err(Error::config("attr_dim", "must be positive"));
        }
        Ok(())
    }

    /// Patch tokens entering each encoder, followed by the count leaving the last one.
    pub fn token_schedule(&self) -> Vec<usize> {
        let mut n = self.backbone.num_patches();
        let mut out = vec![n];
        for l in 0..self.backbone.num_layers {
            if self.backbone.is_set_layer(l) {
                n = block::patches_after(n, self.block.kappa);
            }
            out.push(n);
        }
        out
    }

    /// Σ over encoders of the patch tokens each one processes after its self-attention.
    pub fn patch_token_layers(&self) -> usize {
        let s = self.token_schedule();
        // tokens entering the FFN of layer l are the ones leaving it
        s[1..].iter().sum()
    }
}

/// Class semantics supplied to a training forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Semantics<'a> {
    pub table: &'a PrototypeTable,
    pub labels: &'a [ClassId],
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Normalized cls of the last encoder, `[B×d]`.
    pub cls_final: Var,
    /// `cls_final · W_V2S`, `[B×|A|]`.
    pub phi: Var,
    /// Ground-truth prototypes fed to the semantic layers, when training.
    pub z: Option<Var>,
    pub layers: Vec<LayerOutput>,
    /// Self-attention weights of every encoder, `[B·h × T × T]`.
    pub mhsa_attn: Vec<Var>,
    pub tokens: TokenSet,
}

#[derive(Debug, Clone)]
pub struct ZslVit {
    cfg: ModelConfig,
    params: ParamStore,
}

impl ZslVit {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, seed);
        Ok(ZslVit { cfg, params })
    }

    /// Wraps existing parameters after checking names and shapes against `cfg`.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let expected = init_params(&cfg, 0);
        for (name, t) in expected.iter() {
            match params.get(name) {
                None => return Err(Error::Contract(format!("missing parameter `{name}`"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::dim(
                        "from_parts",
                        format!("`{name}` has shape {:?}, expected {:?}", p.shape(), t.shape()),
                    ))
                }
                Some(_) => {}
            }
        }
        if params.len() != expected.len() {
            let extra: Vec<&str> = params.names().filter(|n| !expected.contains(n)).collect();
            return Err(Error::Contract(format!("unexpected parameters {extra:?}")));
        }
        Ok(ZslVit { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save(dir)?;
        let text = toml::to_string(&self.cfg).map_err(|e| Error::Contract(e.to_string()))?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let cfg: ModelConfig = toml::from_str(&text).map_err(|e| Error::format(&path, None, e.message().to_string()))?;
        let params = ParamStore::load(dir)?;
        ZslVit::from_parts(cfg, params)
    }

    /// Records a forward pass over `images` on `g`. Prototypes are read only when
    /// `training` is set, in which case `semantics` is required.
    pub fn forward(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        images: &[&Tensor],
        semantics: Option<Semantics<'_>>,
        training: bool,
    ) -> Result<ForwardOutput> {
        let bcfg = &self.cfg.backbone;
        let z = if training && !bcfg.set_layers.is_empty() {
            let s = semantics.ok_or_else(|| Error::Contract("class semantics required while training".into()))?;
            if s.labels.len() != images.len() {
                return Err(Error::Contract(format!(
                    "{} labels for {} images",
                    s.labels.len(),
                    images.len()
                )));
            }
            let rows = s.table.rows(s.labels, self.cfg.normalize_prototypes)?;
            Some(g.constant(rows))
        } else {
            None
        };

        let mut tokens = backbone::patch_embed(g, pv, bcfg, images)?;
        let mut layers = Vec::new();
        let mut mhsa_attn = Vec::with_capacity(bcfg.num_layers);
        for l in 0..bcfg.num_layers {
            if bcfg.is_set_layer(l) {
                let (t, out) = block::zslvit_encoder(g, pv, l, bcfg, &self.cfg.block, &tokens, z, training)?;
                mhsa_attn.push(out.mhsa_attn);
                layers.push(out);
                tokens = t;
            } else {
                let (t, attn) = backbone::encoder(g, pv, l, bcfg, &tokens)?;
                mhsa_attn.push(attn);
                tokens = t;
            }
        }
        let cls = tokens.cls(g)?;
        let cls_final = g.layer_norm(cls, pv.get("norm.g")?, pv.get("norm.b")?, LN_EPS)?;
        let phi = objectives::embed(g, cls_final, pv.get(HEAD)?)?;
        Ok(ForwardOutput {
            cls_final,
            phi,
            z,
            layers,
            mhsa_attn,
            tokens,
        })
    }

    /// Training objective on one minibatch. Returns the scalar loss node and its
    /// value breakdown with per-image reconstruction terms.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        images: &[&Tensor],
        labels: &[ClassId],
        table: &PrototypeTable,
        weights: &LossWeights,
        reduction: L1Reduction,
    ) -> Result<(Var, LossBreakdown)> {
        let out = self.forward(g, pv, images, Some(Semantics { table, labels }), true)?;
        let mut pairs = Vec::with_capacity(out.layers.len());
        let mut per_layer = Vec::new();
        if let Some(z) = out.z {
            for layer in &out.layers {
                pairs.push(objectives::set_losses(g, &layer.set, z, reduction)?);
                per_layer.extend(objectives::per_image_set_losses(g, &layer.set, z, reduction)?);
            }
        }
        let l_set = objectives::aggregate_set_loss_graph(g, &pairs, weights)?;
        let seen = table.seen_ids();
        let protos = g.constant(table.rows(&seen, self.cfg.normalize_prototypes)?);
        let l_pre = objectives::prediction_loss(g, out.cls_final, pv.get(HEAD)?, protos, &seen, labels)?;
        let total = match l_set {
            Some(s) => g.add(s, l_pre)?,
            None => l_pre,
        };
        let set_value = l_set.map_or(0.0, |s| g.value(s).item());
        let mut breakdown = objectives::total_loss(set_value, g.value(l_pre).item());
        breakdown.per_layer = per_layer;
        Ok((total, breakdown))
    }

    /// Inference features `φ` of each image, `[B×|A|]`. Never consults prototypes.
    pub fn embed(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let pv = self.params.attach(&mut g, false);
        let out = self.forward(&mut g, &pv, images, None, false)?;
        Ok(g.value(out.phi).clone())
    }

    /// Inference features over many images, in chunks of `chunk`, in parallel.
    pub fn embed_all(&self, images: &[&Tensor], chunk: usize) -> Result<Tensor> {
        use rayon::prelude::*;
        let chunk = chunk.max(1);
        let parts: Vec<Tensor> = images
            .par_chunks(chunk)
            .map(|c| self.embed(c))
            .collect::<Result<_>>()?;
        let a = self.cfg.attr_dim;
        let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::matrix(images.len(), a, data)
    }
}

fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    backbone::init_params(&cfg.backbone, &mut store, &mut rng);
    for &l in &cfg.backbone.set_layers {
        block::init_params(l, &cfg.backbone, &cfg.block, cfg.attr_dim, &mut store, &mut rng);
    }
    store.insert(
        HEAD,
        Tensor::trunc_normal(&[cfg.backbone.embed_dim, cfg.attr_dim], INIT_STD, &mut rng),
    );
    store
}
