//! Symmetric InfoNCE over matched image/text embeddings.
//!
//! The label-guided form drops non-matching pairs that share a class label
//! from both softmax denominators, so those pairs are neither attracted nor
//! repelled. The plain CLIP loss is the same computation with only the
//! diagonal kept as positive and every other pair as negative.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Initial temperature.
pub const TAU_INIT: f64 = 0.07;
/// Upper bound on the logit scale `exp(s)`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;
/// Tolerance used to decide whether an embedding row is already unit-norm.
pub const UNIT_NORM_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    LabelGuided,
    Clip,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::LabelGuided => "label_guided",
            LossKind::Clip => "clip",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "label_guided" => Ok(LossKind::LabelGuided),
            "clip" => Ok(LossKind::Clip),
            _ => Err(Error::InvalidConfig(format!("unknown loss `{s}`"))),
        }
    }
}

/// Trainable temperature stored as `s = ln(1/τ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature {
    pub log_scale: f64,
}

impl Temperature {
    pub fn from_tau(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self { log_scale: (1.0 / tau).ln() })
    }

    /// Effective logit scale `min(exp(s), 100)`.
    pub fn scale(&self) -> f64 {
        self.log_scale.exp().min(MAX_LOGIT_SCALE)
    }

    pub fn tau(&self) -> f64 {
        1.0 / self.scale()
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self { log_scale: (1.0 / TAU_INIT).ln() }
    }
}

/// Row-major `B × B` indicator: `true` iff `i == k` or the labels differ.
/// Without labels every sample is treated as its own class.
pub fn label_mask(labels: Option<&[usize]>, batch: usize) -> Vec<bool> {
    let mut mask = vec![true; batch * batch];
    if let Some(labels) = labels {
        for i in 0..batch {
            for k in 0..batch {
                mask[i * batch + k] = i == k || labels[i] != labels[k];
            }
        }
    }
    mask
}

/// Clamped logit scale on the graph from the log-scale scalar `s`.
pub fn logit_scale_var(g: &mut Graph, log_scale: Var) -> Var {
    let e = g.exp(log_scale);
    g.clamp_max(e, MAX_LOGIT_SCALE)
}

/// Loss from a precomputed similarity matrix `sim[i,k] = ⟨v_i, t_k⟩` and a
/// scalar logit scale.
pub fn loss_from_similarity_var(g: &mut Graph, sim: Var, scale: Var, mask: Vec<bool>) -> Result<Var> {
    let b = g.shape(sim)[0];
    if g.shape(sim) != [b, b] || mask.len() != b * b || b == 0 {
        return Err(Error::shape("contrastive_loss", &[g.shape(sim), &[mask.len()]]));
    }
    let logits = g.scale_by(sim, scale)?;
    let logits_t = g.transpose(logits)?;
    let mut mask_t = vec![false; b * b];
    for i in 0..b {
        for k in 0..b {
            mask_t[k * b + i] = mask[i * b + k];
        }
    }
    let lse_img = g.masked_logsumexp(logits, mask)?;
    let lse_txt = g.masked_logsumexp(logits_t, mask_t)?;
    let pos = g.diag(logits)?;
    let a = g.sub(lse_img, pos)?;
    let c = g.sub(lse_txt, pos)?;
    let both = g.add(a, c)?;
    let total = g.sum_all(both);
    Ok(g.scale(total, 1.0 / (2.0 * b as f64)))
}

/// Loss over already-normalized embeddings `B × d`.
pub fn contrastive_loss_var(g: &mut Graph, v: Var, t: Var, scale: Var, mask: Vec<bool>) -> Result<Var> {
    if g.shape(v) != g.shape(t) {
        return Err(Error::shape("contrastive_loss", &[g.shape(v), g.shape(t)]));
    }
    let tt = g.transpose(t)?;
    let sim = g.matmul(v, tt)?;
    loss_from_similarity_var(g, sim, scale, mask)
}

/// Returns `x` unchanged when every row is unit-norm, otherwise a normalized
/// copy and a warning.
pub fn ensure_unit_rows(x: &Tensor, what: &str) -> Tensor {
    let rows = x.rows();
    let unit = (0..rows).all(|i| {
        let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        (n - 1.0).abs() <= UNIT_NORM_TOL
    });
    if unit {
        return x.clone();
    }
    warn!("{what} embeddings are not unit-norm; normalizing");
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let n = g.l2_normalize(v).expect("rank-2 input");
    g.value(n).clone()
}

fn evaluate(v: &Tensor, t: &Tensor, mask: Vec<bool>, temp: &Temperature) -> Result<f64> {
    let v = ensure_unit_rows(v, "image");
    let t = ensure_unit_rows(t, "text");
    let mut g = Graph::new();
    let (vv, tv) = (g.constant(v), g.constant(t));
    let s = g.constant(Tensor::scalar(temp.log_scale));
    let scale = logit_scale_var(&mut g, s);
    let loss = contrastive_loss_var(&mut g, vv, tv, scale, mask)?;
    Ok(g.value(loss).data()[0])
}

/// Label-guided InfoNCE on `B × d` image and text embeddings.
pub fn label_guided_infonce(v: &Tensor, t: &Tensor, labels: Option<&[usize]>, temp: &Temperature) -> Result<f64> {
    let b = v.rows();
    if labels.is_some_and(|l| l.len() != b) {
        return Err(Error::shape("label_guided_infonce", &[v.shape(), &[labels.map_or(0, <[usize]>::len)]]));
    }
    evaluate(v, t, label_mask(labels, b), temp)
}

/// Plain symmetric CLIP loss.
pub fn clip_loss(v: &Tensor, t: &Tensor, temp: &Temperature) -> Result<f64> {
    evaluate(v, t, label_mask(None, v.rows()), temp)
}
