//! Dual-encoder model: frozen image and text stacks, LoRA adapters on their
//! attention projections, an optional hypergraph refinement per modality,
//! and a trainable logit scale.
//!
//! Trainable state lives in a [`ParamSet`] with these names:
//! `lora.{image|text}.{layer}.{q|k|v}.{a|b}`, `hgnn.{modality}.phi{1|2}.{down|up}`,
//! `gat.{modality}.{w|a}` and `logit_scale`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::PairedSample;
use crate::encoder::{self, BoundStack, EncoderConfig, EncoderStack, InputKind};
use crate::error::{Error, Result};
use crate::hgnn::{self, GatParams, HgnnWeights, IncidenceMatrix, PhiVars, Variant, LEAKY_SLOPE};
use crate::lora::{self, AdapterVars, LoraTarget, Modality, Projection};
use crate::loss::{self, LossKind, Temperature};
use crate::tensor::{GradRecord, ParamSet, Tensor};

pub const LOGIT_SCALE: &str = "logit_scale";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: EncoderConfig,
    pub text: EncoderConfig,
    pub lora: bool,
    pub rank: usize,
    pub gamma: f64,
    pub hgnn_image: bool,
    pub hgnn_text: bool,
    pub variant: Variant,
    pub k: usize,
    pub d_prime: usize,
    pub tau_init: f64,
}

impl ModelConfig {
    /// Small model used by the synthetic experiments.
    pub fn toy() -> Self {
        Self {
            image: EncoderConfig::toy_image(),
            text: EncoderConfig::toy_text(),
            lora: true,
            rank: 4,
            gamma: 1.0,
            hgnn_image: true,
            hgnn_text: true,
            variant: Variant::Ours,
            k: 5,
            d_prime: 64,
            tau_init: loss::TAU_INIT,
        }
    }

    /// Base-size shapes (12 layers, width 768) for parameter accounting only.
    pub fn base_scale() -> Self {
        let enc = |input| EncoderConfig {
            num_layers: 12,
            num_heads: 12,
            model_dim: 768,
            mlp_hidden: 3072,
            input,
            activation: encoder::Activation::Gelu,
        };
        Self {
            image: enc(InputKind::Image { side: 14, patch_dim: 768 }),
            text: enc(InputKind::Text { vocab_size: 30522, max_len: 256 }),
            ..Self::toy()
        }
    }

    pub fn hgnn_enabled(&self, modality: Modality) -> bool {
        match modality {
            Modality::Image => self.hgnn_image,
            Modality::Text => self.hgnn_text,
        }
    }

    pub fn encoder(&self, modality: Modality) -> &EncoderConfig {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        if self.image.modality() != Modality::Image || self.text.modality() != Modality::Text {
            return Err(Error::InvalidConfig("encoder input kinds are swapped".into()));
        }
        if self.image.model_dim != self.text.model_dim {
            return Err(Error::InvalidConfig(format!(
                "image width {} differs from text width {}",
                self.image.model_dim, self.text.model_dim
            )));
        }
        if self.lora && (self.rank == 0 || self.rank >= self.image.model_dim.min(self.text.model_dim)) {
            return Err(Error::InvalidConfig(format!("LoRA rank {} out of range", self.rank)));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.d_prime == 0 {
            return Err(Error::InvalidConfig("bottleneck width must be at least 1".into()));
        }
        if !(self.tau_init > 0.0) {
            return Err(Error::InvalidConfig("initial temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable parameter counts by group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableCount {
    pub lora: usize,
    pub hgnn: usize,
    pub gat: usize,
    pub temperature: usize,
    pub total: usize,
}

/// Counts trainable parameters from shapes alone.
pub fn count_trainable(cfg: &ModelConfig) -> TrainableCount {
    let mut c = TrainableCount {
        lora: 0,
        hgnn: 0,
        gat: 0,
        temperature: 1,
        total: 0,
    };
    for m in [Modality::Image, Modality::Text] {
        let enc = cfg.encoder(m);
        let d = enc.model_dim;
        if cfg.lora {
            c.lora += 3 * enc.num_layers * cfg.rank * (d + d);
        }
        if cfg.hgnn_enabled(m) {
            let phis = if cfg.variant == Variant::Gnn { 1 } else { 2 };
            c.hgnn += phis * 2 * d * cfg.d_prime;
            c.gat += match cfg.variant {
                Variant::Gat => d * d + 2 * d,
                Variant::Gatv2 => 2 * d * d + d,
                Variant::Ours | Variant::Gnn => 0,
            };
        }
    }
    c.total = c.lora + c.hgnn + c.gat + c.temperature;
    c
}

/// Seeds for every independent random component, derived from one seed.
#[derive(Clone, Copy, Debug)]
pub struct SeedPlan {
    pub image_backbone: u64,
    pub text_backbone: u64,
    pub lora: u64,
    pub hgnn: u64,
    pub shuffle: u64,
}

impl SeedPlan {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            image_backbone: rng.random(),
            text_backbone: rng.random(),
            lora: rng.random(),
            hgnn: rng.random(),
            shuffle: rng.random(),
        }
    }
}

/// Frozen weights of both encoders.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub image: EncoderStack,
    pub text: EncoderStack,
}

impl DualEncoder {
    pub fn random(cfg: &ModelConfig, seeds: &SeedPlan) -> Result<Self> {
        Ok(Self {
            image: EncoderStack::random(&cfg.image, seeds.image_backbone)?,
            text: EncoderStack::random(&cfg.text, seeds.text_backbone)?,
        })
    }

    pub fn stack(&self, modality: Modality) -> &EncoderStack {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    /// Frozen tensors with `frozen.{modality}.` prefixes.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for m in [Modality::Image, Modality::Text] {
            for (name, t) in self.stack(m).named_tensors() {
                out.push((format!("frozen.{}.{name}", m.as_str()), t));
            }
        }
        out
    }

    pub fn from_named(cfg: &ModelConfig, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        let image = EncoderStack::from_named(&cfg.image, |n| lookup(&format!("frozen.image.{n}")))?;
        let text = EncoderStack::from_named(&cfg.text, |n| lookup(&format!("frozen.text.{n}")))?;
        Ok(Self { image, text })
    }
}

/// Fresh trainable parameters for `cfg`.
pub fn init_trainable(cfg: &ModelConfig, seeds: &SeedPlan) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    if cfg.lora {
        for adapter in lora::inject(&cfg.image, &cfg.text, cfg.rank, cfg.gamma, seeds.lora)? {
            adapter.insert_into(&mut params);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.hgnn);
    for m in [Modality::Image, Modality::Text] {
        let d = cfg.encoder(m).model_dim;
        // Draw both modalities' weights even when one is disabled, so toggling
        // one encoder leaves the other's initialization unchanged.
        let weights = HgnnWeights::init(d, cfg.d_prime, &mut rng);
        let gat = GatParams::init(cfg.variant, d, &mut rng);
        if cfg.hgnn_enabled(m) {
            hgnn::insert_params(&mut params, m, cfg.variant, &weights, gat.as_ref());
        }
    }
    let temp = Temperature::from_tau(cfg.tau_init)?;
    params.insert(LOGIT_SCALE, Tensor::new(vec![1], vec![temp.log_scale])?);
    Ok(params)
}

/// Embedded input sequence for one modality.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub tokens: Tensor,
    pub mask: Vec<bool>,
}

pub fn prepare_image(stack: &EncoderStack, grid: &Tensor) -> Result<Prepared> {
    let tokens = encoder::embed_image(grid, stack)?;
    let mask = vec![true; tokens.rows()];
    Ok(Prepared { tokens, mask })
}

pub fn prepare_text(stack: &EncoderStack, ids: &[usize]) -> Result<Prepared> {
    let (tokens, mask) = encoder::embed_text_padded(ids, stack)?;
    Ok(Prepared { tokens, mask })
}

struct BoundHgnn {
    phi1: Option<PhiVars>,
    phi2: PhiVars,
    gat: Option<(Var, Var)>,
}

/// Frozen stacks and trainable parameters recorded into one graph.
pub struct BoundModel<'m> {
    pub config: &'m ModelConfig,
    vars: BTreeMap<String, Var>,
    image: BoundStack,
    text: BoundStack,
    adapters_image: Vec<(LoraTarget, AdapterVars)>,
    adapters_text: Vec<(LoraTarget, AdapterVars)>,
    hgnn_image: Option<BoundHgnn>,
    hgnn_text: Option<BoundHgnn>,
    pub logit_scale: Var,
}

/// Result of running one modality through its encoder and refinement.
pub struct Refined {
    /// Final per-position states (refined when the hypergraph module is on).
    pub tokens: Var,
    /// Position 0 of `tokens`, unnormalized, `1 × d`.
    pub global: Var,
    pub mask: Vec<bool>,
    pub incidence: Option<IncidenceMatrix>,
}

impl<'m> BoundModel<'m> {
    /// Binds every trainable tensor as a named leaf when `trainable`, or as a
    /// constant otherwise (evaluation).
    pub fn bind(g: &mut Graph, config: &'m ModelConfig, frozen: &DualEncoder, params: &ParamSet, trainable: bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            let v = if trainable {
                g.param(name.clone(), t.clone())
            } else {
                g.constant(t.clone())
            };
            vars.insert(name.clone(), v);
        }
        let fetch = |name: &str| -> Result<Var> {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("missing trainable tensor `{name}`")))
        };
        let adapters = |m: Modality, g: &mut Graph| -> Result<Vec<(LoraTarget, AdapterVars)>> {
            let mut out = Vec::new();
            if !config.lora {
                return Ok(out);
            }
            for layer in 0..config.encoder(m).num_layers {
                for matrix in Projection::ALL {
                    let target = LoraTarget {
                        modality: m,
                        layer,
                        matrix,
                    };
                    let prefix = target.param_prefix();
                    let a = fetch(&format!("{prefix}.a"))?;
                    let b = fetch(&format!("{prefix}.b"))?;
                    out.push((target, AdapterVars::bind(g, a, b, config.gamma)?));
                }
            }
            Ok(out)
        };
        let adapters_image = adapters(Modality::Image, g)?;
        let adapters_text = adapters(Modality::Text, g)?;
        let bind_hgnn = |m: Modality, g: &mut Graph| -> Result<Option<BoundHgnn>> {
            if !config.hgnn_enabled(m) {
                return Ok(None);
            }
            let name = |part: &str| hgnn::param_name(m, part);
            let phi1 = if config.variant == Variant::Gnn {
                None
            } else {
                Some(PhiVars::bind(g, fetch(&name("phi1.down"))?, fetch(&name("phi1.up"))?)?)
            };
            let phi2 = PhiVars::bind(g, fetch(&name("phi2.down"))?, fetch(&name("phi2.up"))?)?;
            let gat = match config.variant {
                Variant::Gat | Variant::Gatv2 => Some((fetch(&name("gat.w"))?, fetch(&name("gat.a"))?)),
                Variant::Ours | Variant::Gnn => None,
            };
            Ok(Some(BoundHgnn { phi1, phi2, gat }))
        };
        let hgnn_image = bind_hgnn(Modality::Image, g)?;
        let hgnn_text = bind_hgnn(Modality::Text, g)?;
        let s = fetch(LOGIT_SCALE)?;
        let logit_scale = loss::logit_scale_var(g, s);
        Ok(Self {
            config,
            image: frozen.image.bind(g),
            text: frozen.text.bind(g),
            vars,
            adapters_image,
            adapters_text,
            hgnn_image,
            hgnn_text,
            logit_scale,
        })
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Encoder pass plus optional refinement for one prepared input.
    pub fn forward(&self, g: &mut Graph, modality: Modality, input: &Prepared) -> Result<Refined> {
        let (stack, adapters, module) = match modality {
            Modality::Image => (&self.image, &self.adapters_image, &self.hgnn_image),
            Modality::Text => (&self.text, &self.adapters_text, &self.hgnn_text),
        };
        let trace = encoder::encode(g, stack, &input.tokens, &input.mask, adapters)?;
        let Some(module) = module else {
            let global = g.slice_rows(trace.tokens, 0, 1)?;
            return Ok(Refined {
                tokens: trace.tokens,
                global,
                mask: trace.mask,
                incidence: None,
            });
        };
        let last = trace
            .attention
            .last()
            .ok_or_else(|| Error::InvalidConfig("encoder has no layers".into()))?;
        let agg = hgnn::aggregate_attention_var(g, last)?;
        let s = hgnn::affinity_var(g, agg, trace.tokens)?;
        let affinity = hgnn::AffinityMatrix::from_scores(g.value(s), &trace.mask)?;
        let omega = hgnn::select_supports(&affinity, self.config.k)?;
        let scores = match module.gat {
            Some((w, a)) => hgnn::learned_scores_var(g, self.config.variant, trace.tokens, &omega, w, a, LEAKY_SLOPE)?,
            None => s,
        };
        let incidence = IncidenceMatrix::from_scores(g.value(scores), omega.clone(), self.config.k);
        let h = g.incidence(scores, omega)?;
        let refined = hgnn::message_pass_var(g, h, trace.tokens, module.phi1, module.phi2, LEAKY_SLOPE)?;
        let global = g.slice_rows(refined, 0, 1)?;
        Ok(Refined {
            tokens: refined,
            global,
            mask: trace.mask,
            incidence: Some(incidence),
        })
    }
}

/// Frozen backbone plus current trainable parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub frozen: DualEncoder,
    pub params: ParamSet,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let seeds = SeedPlan::new(seed);
        let frozen = DualEncoder::random(&config, &seeds)?;
        let params = init_trainable(&config, &seeds)?;
        Ok(Self { config, frozen, params })
    }

    pub fn temperature(&self) -> Temperature {
        let s = self.params.get(LOGIT_SCALE).map_or(0.0, |t| t.data()[0]);
        Temperature { log_scale: s }
    }

    pub fn prepare(&self, modality: Modality, sample: &PairedSample) -> Result<Prepared> {
        match modality {
            Modality::Image => prepare_image(&self.frozen.image, &sample.image),
            Modality::Text => prepare_text(&self.frozen.text, &sample.tokens),
        }
    }

    /// Refined tokens and incidence for one input, evaluated without gradients.
    pub fn refine(&self, modality: Modality, input: &Prepared) -> Result<(Tensor, Option<IncidenceMatrix>)> {
        let mut g = Graph::new();
        let bound = BoundModel::bind(&mut g, &self.config, &self.frozen, &self.params, false)?;
        let out = bound.forward(&mut g, modality, input)?;
        Ok((g.value(out.tokens).clone(), out.incidence))
    }

    /// Unit-norm global embedding of one input.
    pub fn embed(&self, modality: Modality, input: &Prepared) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = BoundModel::bind(&mut g, &self.config, &self.frozen, &self.params, false)?;
        let out = bound.forward(&mut g, modality, input)?;
        let unit = g.l2_normalize(out.global)?;
        Ok(g.value(unit).data().to_vec())
    }

    pub fn embed_image(&self, grid: &Tensor) -> Result<Vec<f64>> {
        self.embed(Modality::Image, &prepare_image(&self.frozen.image, grid)?)
    }

    pub fn embed_text(&self, ids: &[usize]) -> Result<Vec<f64>> {
        self.embed(Modality::Text, &prepare_text(&self.frozen.text, ids)?)
    }
}

/// Records the batch loss on `g` with the model's trainable tensors as
/// leaves drawn from `params`.
pub fn record_batch_loss(
    g: &mut Graph,
    model: &Model,
    params: &ParamSet,
    batch: &[(&Prepared, &Prepared, usize)],
    kind: LossKind,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let bound = BoundModel::bind(g, &model.config, &model.frozen, params, true)?;
    let mut images = Vec::with_capacity(batch.len());
    let mut texts = Vec::with_capacity(batch.len());
    for (img, txt, _) in batch {
        images.push(bound.forward(g, Modality::Image, img)?.global);
        texts.push(bound.forward(g, Modality::Text, txt)?.global);
    }
    let v = g.concat_rows(&images)?;
    let t = g.concat_rows(&texts)?;
    let v = g.l2_normalize(v)?;
    let t = g.l2_normalize(t)?;
    let labels: Vec<usize> = batch.iter().map(|b| b.2).collect();
    let mask = match kind {
        LossKind::LabelGuided => loss::label_mask(Some(&labels), batch.len()),
        LossKind::Clip => loss::label_mask(None, batch.len()),
    };
    loss::contrastive_loss_var(g, v, t, bound.logit_scale, mask)
}

/// Batch loss and gradients for every trainable tensor.
pub fn loss_and_grads(
    model: &Model,
    params: &ParamSet,
    batch: &[(&Prepared, &Prepared, usize)],
    kind: LossKind,
) -> Result<(f64, GradRecord)> {
    let mut g = Graph::new();
    let loss = record_batch_loss(&mut g, model, params, batch, kind)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    Ok((value, grads))
}

/// Batch loss only.
pub fn batch_loss(model: &Model, params: &ParamSet, batch: &[(&Prepared, &Prepared, usize)], kind: LossKind) -> Result<f64> {
    let mut g = Graph::new();
    let loss = record_batch_loss(&mut g, model, params, batch, kind)?;
    Ok(g.value(loss).data()[0])
}
