//! Frozen transformer encoders for patch grids and token sequences.
//!
//! Blocks are pre-norm residual: `z' = z + SA(LN(z))`, `z_out = z' + MLP(LN(z'))`.
//! Projection weights are stored `out × in` and applied to row-token matrices
//! as `X · Wᵀ`. Position 0 of every sequence is the global (CLS) token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::lora::{AdapterVars, LoraTarget, Modality, Projection};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    LeakyRelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Image { side: usize, patch_dim: usize },
    Text { vocab_size: usize, max_len: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub mlp_hidden: usize,
    pub input: InputKind,
    pub activation: Activation,
}

/// Negative slope used when the MLP activation is LeakyReLU.
pub const MLP_LEAKY_SLOPE: f64 = 0.01;

impl EncoderConfig {
    pub fn toy_image() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            model_dim: 16,
            mlp_hidden: 32,
            input: InputKind::Image {
                side: 4,
                patch_dim: 8,
            },
            activation: Activation::Gelu,
        }
    }

    pub fn toy_text() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            model_dim: 16,
            mlp_hidden: 32,
            input: InputKind::Text {
                vocab_size: 64,
                max_len: 12,
            },
            activation: Activation::Gelu,
        }
    }

    pub fn modality(&self) -> Modality {
        match self.input {
            InputKind::Image { .. } => Modality::Image,
            InputKind::Text { .. } => Modality::Text,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Token positions including the global token: `N + 1` for images
    /// (`N = side²`), `max_len + 1` for text.
    pub fn seq_len(&self) -> usize {
        match self.input {
            InputKind::Image { side, .. } => side * side + 1,
            InputKind::Text { max_len, .. } => max_len + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.num_layers == 0 || self.num_heads == 0 || self.model_dim == 0 || self.mlp_hidden == 0 {
            return bad(format!("encoder extents must be positive: {self:?}"));
        }
        if self.model_dim % self.num_heads != 0 {
            return bad(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        match self.input {
            InputKind::Image { side, patch_dim } if side == 0 || patch_dim == 0 => {
                bad("image side and patch_dim must be positive".into())
            }
            InputKind::Text { vocab_size, .. } if vocab_size == 0 => {
                bad("vocab_size must be positive".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc1: Tensor,
    pub fc1_bias: Tensor,
    pub fc2: Tensor,
    pub fc2_bias: Tensor,
}

impl LayerWeights {
    const NAMES: [&'static str; 12] = [
        "ln1_gamma", "ln1_beta", "wq", "wk", "wv", "wo", "ln2_gamma", "ln2_beta", "fc1",
        "fc1_bias", "fc2", "fc2_bias",
    ];

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.fc1,
            &self.fc1_bias,
            &self.fc2,
            &self.fc2_bias,
        ]
    }

    pub fn projection(&self, p: Projection) -> &Tensor {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
        }
    }
}

/// Frozen encoder weights. Nothing in here is ever trained.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack {
    pub config: EncoderConfig,
    /// Image: `d × patch_dim` patch projection. Text: `vocab × d` embedding table.
    pub embed: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerWeights>,
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

impl EncoderStack {
    /// Deterministic random weights standing in for a pretrained backbone.
    pub fn random(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let h = config.mlp_hidden;
        let embed = match config.input {
            InputKind::Image { patch_dim, .. } => {
                normal(&mut rng, &[d, patch_dim], 1.0 / (patch_dim as f64).sqrt())
            }
            InputKind::Text { vocab_size, .. } => normal(&mut rng, &[vocab_size, d], 1.0),
        };
        let cls = normal(&mut rng, &[1, d], 1.0);
        let pos = normal(&mut rng, &[config.seq_len(), d], 0.1);
        let wstd = 1.0 / (d as f64).sqrt();
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                ln1_gamma: Tensor::full(&[d], 1.0),
                ln1_beta: Tensor::zeros(&[d]),
                wq: normal(&mut rng, &[d, d], wstd),
                wk: normal(&mut rng, &[d, d], wstd),
                wv: normal(&mut rng, &[d, d], wstd),
                wo: normal(&mut rng, &[d, d], wstd),
                ln2_gamma: Tensor::full(&[d], 1.0),
                ln2_beta: Tensor::zeros(&[d]),
                fc1: normal(&mut rng, &[h, d], wstd),
                fc1_bias: Tensor::zeros(&[h]),
                fc2: normal(&mut rng, &[d, h], 1.0 / (h as f64).sqrt()),
                fc2_bias: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            embed,
            cls,
            pos,
            layers,
        })
    }

    /// All weights with stable names, for serialization.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("embed".to_string(), &self.embed),
            ("cls".to_string(), &self.cls),
            ("pos".to_string(), &self.pos),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerWeights::NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out
    }

    /// Rebuilds a stack from `named_tensors` output; shapes are checked
    /// against a freshly initialized stack of the same config.
    pub fn from_named(
        config: &EncoderConfig,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) -> Result<Self> {
        let mut stack = Self::random(config, 0)?;
        let mut fetch = |name: &str, slot: &mut Tensor| -> Result<()> {
            let t = lookup(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing frozen tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "frozen tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
            Ok(())
        };
        fetch("embed", &mut stack.embed)?;
        fetch("cls", &mut stack.cls)?;
        fetch("pos", &mut stack.pos)?;
        for (l, layer) in stack.layers.iter_mut().enumerate() {
            let slots = [
                &mut layer.ln1_gamma,
                &mut layer.ln1_beta,
                &mut layer.wq,
                &mut layer.wk,
                &mut layer.wv,
                &mut layer.wo,
                &mut layer.ln2_gamma,
                &mut layer.ln2_beta,
                &mut layer.fc1,
                &mut layer.fc1_bias,
                &mut layer.fc2,
                &mut layer.fc2_bias,
            ];
            for (name, slot) in LayerWeights::NAMES.iter().zip(slots) {
                fetch(&format!("layer{l}.{name}"), slot)?;
            }
        }
        Ok(stack)
    }

    /// Records the frozen weights as graph constants, pre-transposed for
    /// row-token products.
    pub fn bind(&self, g: &mut Graph) -> BoundStack {
        let layers = self
            .layers
            .iter()
            .map(|w| BoundLayer {
                ln1_gamma: g.constant(w.ln1_gamma.clone()),
                ln1_beta: g.constant(w.ln1_beta.clone()),
                wq_t: g.constant(w.wq.transpose()),
                wk_t: g.constant(w.wk.transpose()),
                wv_t: g.constant(w.wv.transpose()),
                wo_t: g.constant(w.wo.transpose()),
                ln2_gamma: g.constant(w.ln2_gamma.clone()),
                ln2_beta: g.constant(w.ln2_beta.clone()),
                fc1_t: g.constant(w.fc1.transpose()),
                fc1_bias: g.constant(w.fc1_bias.clone()),
                fc2_t: g.constant(w.fc2.transpose()),
                fc2_bias: g.constant(w.fc2_bias.clone()),
            })
            .collect();
        BoundStack {
            config: self.config.clone(),
            layers,
        }
    }
}

pub struct BoundLayer {
    ln1_gamma: Var,
    ln1_beta: Var,
    wq_t: Var,
    wk_t: Var,
    wv_t: Var,
    wo_t: Var,
    ln2_gamma: Var,
    ln2_beta: Var,
    fc1_t: Var,
    fc1_bias: Var,
    fc2_t: Var,
    fc2_bias: Var,
}

/// An [`EncoderStack`] recorded into one [`Graph`].
pub struct BoundStack {
    pub config: EncoderConfig,
    layers: Vec<BoundLayer>,
}

/// Graph handles for one encoder pass.
pub struct ForwardTrace {
    /// Final token states, `seq_len × d`.
    pub tokens: Var,
    /// Post-softmax attention probabilities, indexed `[layer][head]`.
    pub attention: Vec<Vec<Var>>,
    /// `true` for real positions, `false` for padding.
    pub mask: Vec<bool>,
}

/// Prepends the global token and adds positional embeddings to the patch
/// projections of a `side × side × patch_dim` grid (row-major patch order).
pub fn embed_image(grid: &Tensor, stack: &EncoderStack) -> Result<Tensor> {
    let InputKind::Image { side, patch_dim } = stack.config.input else {
        return Err(Error::InvalidConfig("embed_image needs an image encoder".into()));
    };
    if grid.shape() != [side, side, patch_dim] {
        return Err(Error::shape("embed_image", &[grid.shape(), &[side, side, patch_dim]]));
    }
    let d = stack.config.model_dim;
    let patches = Tensor::new(vec![side * side, patch_dim], grid.data().to_vec())?;
    let projected = patches.matmul(&stack.embed.transpose())?;
    let mut out = Vec::with_capacity((side * side + 1) * d);
    out.extend(stack.cls.data().iter().zip(stack.pos.row(0)).map(|(c, p)| c + p));
    for i in 0..side * side {
        out.extend(projected.row(i).iter().zip(stack.pos.row(i + 1)).map(|(a, p)| a + p));
    }
    Tensor::new(vec![side * side + 1, d], out)
}

fn check_ids(ids: &[usize], stack: &EncoderStack) -> Result<(usize, usize)> {
    let InputKind::Text {
        vocab_size,
        max_len,
    } = stack.config.input
    else {
        return Err(Error::InvalidConfig("embed_text needs a text encoder".into()));
    };
    if ids.len() > max_len {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::OutOfVocabulary {
            id,
            vocab: vocab_size,
        });
    }
    Ok((vocab_size, max_len))
}

/// Global token followed by the token embeddings, no padding. The mask is all
/// `true`.
pub fn embed_text(ids: &[usize], stack: &EncoderStack) -> Result<(Tensor, Vec<bool>)> {
    check_ids(ids, stack)?;
    embed_text_to(ids, stack, ids.len() + 1)
}

/// Like [`embed_text`] but padded to `max_len + 1` positions. Padding rows
/// carry only their positional embedding and are masked out.
pub fn embed_text_padded(ids: &[usize], stack: &EncoderStack) -> Result<(Tensor, Vec<bool>)> {
    let (_, max_len) = check_ids(ids, stack)?;
    embed_text_to(ids, stack, max_len + 1)
}

fn embed_text_to(ids: &[usize], stack: &EncoderStack, len: usize) -> Result<(Tensor, Vec<bool>)> {
    let d = stack.config.model_dim;
    let mut out = Vec::with_capacity(len * d);
    out.extend(stack.cls.data().iter().zip(stack.pos.row(0)).map(|(c, p)| c + p));
    for t in 1..len {
        let pos = stack.pos.row(t);
        match ids.get(t - 1) {
            Some(&id) => out.extend(stack.embed.row(id).iter().zip(pos).map(|(e, p)| e + p)),
            None => out.extend_from_slice(pos),
        }
    }
    let mask = (0..len).map(|t| t <= ids.len()).collect();
    Ok((Tensor::new(vec![len, d], out)?, mask))
}

/// `x · W₀ᵀ`, plus `γ · (x · Aᵀ) · Bᵀ` when an adapter is attached.
fn project(g: &mut Graph, x: Var, w_t: Var, adapter: Option<&AdapterVars>) -> Result<Var> {
    let base = g.matmul(x, w_t)?;
    match adapter {
        None => Ok(base),
        Some(a) => {
            let low = g.matmul(x, a.a_t)?;
            let delta = g.matmul(low, a.b_t)?;
            let delta = g.scale(delta, a.gamma);
            g.add(base, delta)
        }
    }
}

/// Runs every block over `input` (`seq_len × d` token embeddings).
///
/// `adapters` attaches LoRA pairs to query/key/value projections; each target
/// must name this encoder's modality and an existing layer.
pub fn encode(
    g: &mut Graph,
    stack: &BoundStack,
    input: &Tensor,
    mask: &[bool],
    adapters: &[(LoraTarget, AdapterVars)],
) -> Result<ForwardTrace> {
    let cfg = &stack.config;
    let (n, d) = (input.rows(), cfg.model_dim);
    if input.shape() != [n, d] || mask.len() != n || n == 0 {
        return Err(Error::shape("encode", &[input.shape(), &[mask.len(), d]]));
    }
    let mut slots: Vec<[Option<&AdapterVars>; 3]> = vec![[None; 3]; cfg.num_layers];
    for (target, vars) in adapters {
        if target.modality != cfg.modality() || target.layer >= cfg.num_layers {
            return Err(Error::AdapterTarget(format!(
                "{target} on a {:?} encoder with {} layers",
                cfg.modality(),
                cfg.num_layers
            )));
        }
        slots[target.layer][target.matrix.index()] = Some(vars);
    }

    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut z = g.constant(input.clone());
    let mut attention = Vec::with_capacity(cfg.num_layers);
    for (layer, slot) in stack.layers.iter().zip(&slots) {
        let x = g.layer_norm(z, layer.ln1_gamma, layer.ln1_beta)?;
        let q = project(g, x, layer.wq_t, slot[0])?;
        let k = project(g, x, layer.wk_t, slot[1])?;
        let v = project(g, x, layer.wv_t, slot[2])?;
        let mut maps = Vec::with_capacity(heads);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, inv_sqrt);
            let probs = g.softmax(scores, Some(mask.to_vec()))?;
            outs.push(g.matmul(probs, vh)?);
            maps.push(probs);
        }
        let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
        let sa = g.matmul(merged, layer.wo_t)?;
        let z_mid = g.add(z, sa)?;

        let x2 = g.layer_norm(z_mid, layer.ln2_gamma, layer.ln2_beta)?;
        let hdn = g.matmul(x2, layer.fc1_t)?;
        let hdn = g.add_bias(hdn, layer.fc1_bias)?;
        let hdn = match cfg.activation {
            Activation::Gelu => g.gelu(hdn),
            Activation::LeakyRelu => g.leaky_relu(hdn, MLP_LEAKY_SLOPE),
        };
        let mlp = g.matmul(hdn, layer.fc2_t)?;
        let mlp = g.add_bias(mlp, layer.fc2_bias)?;
        z = g.add(z_mid, mlp)?;
        attention.push(maps);
    }
    Ok(ForwardTrace {
        tokens: z,
        attention,
        mask: mask.to_vec(),
    })
}

/// Plain-value view of a [`ForwardTrace`].
#[derive(Clone, Debug)]
pub struct EncodedTrace {
    pub tokens: Tensor,
    pub attention: Vec<Vec<Tensor>>,
    pub mask: Vec<bool>,
}

/// Frozen forward pass outside any caller-owned graph.
pub fn encode_frozen(stack: &EncoderStack, input: &Tensor, mask: &[bool]) -> Result<EncodedTrace> {
    let mut g = Graph::new();
    let bound = stack.bind(&mut g);
    let trace = encode(&mut g, &bound, input, mask, &[])?;
    Ok(EncodedTrace {
        tokens: g.value(trace.tokens).clone(),
        attention: trace
            .attention
            .iter()
            .map(|hs| hs.iter().map(|v| g.value(*v).clone()).collect())
            .collect(),
        mask: trace.mask,
    })
}
