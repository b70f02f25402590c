//! Reconstruction losses of the semantic layers, their aggregate, the
//! attribute-based cross-entropy and the total objective.

use serde::{Deserialize, Serialize};

use crate::block::SetOutput;
use crate::error::{Error, Result};
use crate::numerics::{Graph, L1Reduction, Tensor, Var};
use crate::prototypes::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_sr: f64,
    pub lambda_vr: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sr: 0.1,
            lambda_vr: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("lambda_sr", self.lambda_sr), ("lambda_vr", self.lambda_vr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, format!("{v} must be a finite non-negative number")));
            }
        }
        Ok(())
    }
}

/// Reconstruction losses of one image at one semantic layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerLoss {
    pub layer: usize,
    pub image: usize,
    pub l_sr: f64,
    pub l_vr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_set: f64,
    pub l_pre: f64,
    pub total: f64,
    pub per_layer: Vec<LayerLoss>,
}

/// `‖a − b‖₁` of each image, then averaged over the batch.
fn batch_l1(g: &mut Graph, a: Var, b: Var, reduction: L1Reduction) -> Result<Var> {
    let rows = g.value(a).rows();
    let l = g.l1_loss(a, b, reduction)?;
    Ok(match reduction {
        L1Reduction::Mean => l,
        L1Reduction::Sum => g.scale(l, 1.0 / rows as f64),
    })
}

fn row_l1(a: &Tensor, b: &Tensor, reduction: L1Reduction) -> Vec<f64> {
    (0..a.rows())
        .map(|r| {
            let s: f64 = a.row(r).iter().zip(b.row(r)).map(|(x, y)| (x - y).abs()).sum();
            match reduction {
                L1Reduction::Mean => s / a.cols() as f64,
                L1Reduction::Sum => s,
            }
        })
        .collect()
}

/// Semantic (`‖z − z_hat‖₁`) and visual (`‖cls_in − cls_hat‖₁`) reconstruction
/// losses of one layer, averaged over the batch. `cls_in` is the layer's cls before
/// enhancement.
pub fn set_losses(g: &mut Graph, set: &SetOutput, z: Var, reduction: L1Reduction) -> Result<(Var, Var)> {
    let cls_hat = set
        .enhanced
        .cls_hat
        .ok_or_else(|| Error::Contract("reconstruction losses need a training-mode forward".into()))?;
    let l_sr = batch_l1(g, z, set.enhanced.z_hat, reduction)?;
    let l_vr = batch_l1(g, set.cls_in, cls_hat, reduction)?;
    Ok((l_sr, l_vr))
}

/// Per-image values of [`set_losses`].
pub fn per_image_set_losses(g: &Graph, set: &SetOutput, z: Var, reduction: L1Reduction) -> Result<Vec<LayerLoss>> {
    let cls_hat = set
        .enhanced
        .cls_hat
        .ok_or_else(|| Error::Contract("reconstruction losses need a training-mode forward".into()))?;
    let sr = row_l1(g.value(z), g.value(set.enhanced.z_hat), reduction);
    let vr = row_l1(g.value(set.cls_in), g.value(cls_hat), reduction);
    Ok(sr
        .into_iter()
        .zip(vr)
        .enumerate()
        .map(|(image, (l_sr, l_vr))| LayerLoss {
            layer: set.layer,
            image,
            l_sr,
            l_vr,
        })
        .collect())
}

/// `(1/B)(1/S) Σ_i Σ_s (λ_SR·l_sr + λ_VR·l_vr)`; zero when there are no semantic layers.
pub fn aggregate_set_loss(per_layer: &[LayerLoss], weights: &LossWeights, batch: usize, num_layers: usize) -> f64 {
    if num_layers == 0 {
        log::warn!("no semantic layers: the set loss is zero");
        return 0.0;
    }
    let s: f64 = per_layer
        .iter()
        .map(|l| weights.lambda_sr * l.l_sr + weights.lambda_vr * l.l_vr)
        .sum();
    s / batch as f64 / num_layers as f64
}

/// Graph version of [`aggregate_set_loss`] over batch-mean layer losses.
pub fn aggregate_set_loss_graph(g: &mut Graph, layer_losses: &[(Var, Var)], weights: &LossWeights) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for &(sr, vr) in layer_losses {
        let a = g.scale(sr, weights.lambda_sr);
        let b = g.scale(vr, weights.lambda_vr);
        let t = g.add(a, b)?;
        total = Some(match total {
            Some(acc) => g.add(acc, t)?,
            None => t,
        });
    }
    Ok(total.map(|t| g.scale(t, 1.0 / layer_losses.len() as f64)))
}

/// `φ = cls_final · W_V2S`, `[B×|A|]`.
pub fn embed(g: &mut Graph, cls_final: Var, w_v2s: Var) -> Result<Var> {
    g.matmul(cls_final, w_v2s)
}

/// Compatibility logits `φ · zᶜ` for every candidate prototype row, `[B×C]`.
pub fn class_logits(g: &mut Graph, phi: Var, prototypes: Var) -> Result<Var> {
    let zt = g.transpose(prototypes)?;
    g.matmul(phi, zt)
}

/// Attribute-based cross-entropy over seen classes, averaged over the batch.
/// `seen_ids` orders the rows of `prototypes_seen`; every label must be among them.
pub fn prediction_loss(
    g: &mut Graph,
    cls_final: Var,
    w_v2s: Var,
    prototypes_seen: Var,
    seen_ids: &[ClassId],
    labels: &[ClassId],
) -> Result<Var> {
    let targets = labels
        .iter()
        .map(|l| {
            seen_ids
                .iter()
                .position(|s| s == l)
                .ok_or_else(|| Error::Contract(format!("label {l} is not a seen class")))
        })
        .collect::<Result<Vec<_>>>()?;
    let phi = embed(g, cls_final, w_v2s)?;
    let logits = class_logits(g, phi, prototypes_seen)?;
    let logp = g.log_softmax(logits)?;
    let picked = g.pick(logp, &targets)?;
    let m = g.mean(picked);
    Ok(g.scale(m, -1.0))
}

/// Total objective with the prediction loss weighted by one.
pub fn total_loss(l_set: f64, l_pre: f64) -> LossBreakdown {
    LossBreakdown {
        l_set,
        l_pre,
        total: l_set + l_pre,
        per_layer: Vec::new(),
    }
}
