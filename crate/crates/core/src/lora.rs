//! Low-rank adapters `h = W₀x + γ·B(Ax)` on frozen projections.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

/// Attention projections that can carry an adapter. The output projection is
/// never adapted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Projection {
    Q,
    K,
    V,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Q, Projection::K, Projection::V];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LoraTarget {
    pub modality: Modality,
    pub layer: usize,
    pub matrix: Projection,
}

impl LoraTarget {
    pub fn param_prefix(&self) -> String {
        format!("lora.{}.{}.{}", self.modality.as_str(), self.layer, self.matrix.as_str())
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/layer{}/{}", self.modality.as_str(), self.layer, self.matrix.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `r × k`, Kaiming-uniform at init.
    pub a: Tensor,
    /// `d × r`, zero at init.
    pub b: Tensor,
    pub rank: usize,
    pub gamma: f64,
    pub target: LoraTarget,
}

impl LoraAdapter {
    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    pub fn insert_into(&self, params: &mut ParamSet) {
        let prefix = self.target.param_prefix();
        params.insert(format!("{prefix}.a"), self.a.clone());
        params.insert(format!("{prefix}.b"), self.b.clone());
    }
}

/// Half-width of the Kaiming-uniform range for fan-in `fan_in`.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

pub(crate) fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = kaiming_bound(fan_in);
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Fresh adapter for a `d × k` frozen weight.
pub fn init_lora(
    d: usize,
    k: usize,
    r: usize,
    gamma: f64,
    seed: u64,
    target: LoraTarget,
) -> Result<LoraAdapter> {
    if r == 0 || r >= d.min(k) {
        return Err(Error::InvalidConfig(format!(
            "LoRA rank {r} must satisfy 1 <= r < min(d, k) = {}",
            d.min(k)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(LoraAdapter {
        a: kaiming_uniform(&mut rng, &[r, k], k),
        b: Tensor::zeros(&[d, r]),
        rank: r,
        gamma,
        target,
    })
}

/// `W₀x + γ·B(Ax)` for a `k`-vector (`[k]` or `[k, 1]`) or a `k × batch` matrix.
pub fn lora_forward(w0: &Tensor, adapter: &LoraAdapter, x: &Tensor) -> Result<Tensor> {
    let as_column = x.shape().len() == 1;
    let xm = if as_column {
        x.clone().reshape(vec![x.numel(), 1])?
    } else {
        x.clone()
    };
    if w0.shape().len() != 2
        || w0.shape() != [adapter.b.rows(), adapter.a.cols()]
        || xm.rows() != w0.cols()
    {
        return Err(Error::shape("lora_forward", &[w0.shape(), adapter.a.shape(), adapter.b.shape(), x.shape()]));
    }
    let base = w0.matmul(&xm)?;
    let delta = adapter.b.matmul(&adapter.a.matmul(&xm)?)?;
    let data = base
        .data()
        .iter()
        .zip(delta.data())
        .map(|(h, dv)| h + adapter.gamma * dv)
        .collect();
    let out = Tensor::new(base.shape().to_vec(), data)?;
    if as_column {
        out.reshape(vec![w0.rows()])
    } else {
        Ok(out)
    }
}

/// Graph handles for an adapter, pre-transposed for row-token products.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub a_t: Var,
    pub b_t: Var,
    pub gamma: f64,
}

impl AdapterVars {
    pub fn bind(g: &mut Graph, a: Var, b: Var, gamma: f64) -> Result<Self> {
        Ok(Self {
            a_t: g.transpose(a)?,
            b_t: g.transpose(b)?,
            gamma,
        })
    }
}

/// One adapter on each of Q, K, V in every layer of both encoders.
pub fn inject(
    image: &EncoderConfig,
    text: &EncoderConfig,
    rank: usize,
    gamma: f64,
    seed: u64,
) -> Result<Vec<LoraAdapter>> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * (image.num_layers + text.num_layers));
    for cfg in [image, text] {
        cfg.validate()?;
        let d = cfg.model_dim;
        for layer in 0..cfg.num_layers {
            for matrix in Projection::ALL {
                let target = LoraTarget {
                    modality: cfg.modality(),
                    layer,
                    matrix,
                };
                out.push(init_lora(d, d, rank, gamma, master.random(), target)?);
            }
        }
    }
    Ok(out)
}
