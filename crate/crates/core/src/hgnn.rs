//! Attention-based context enhancement over encoder tokens.
//!
//! Tokens are hypergraph vertices; each token `i` owns one hyperedge whose
//! support `Ω_i` is the top-k of its affinity row. Row 0 of the affinity
//! matrix comes from the head-averaged attention of the global token, the
//! local block from cosine similarity between local tokens. Hyperedge
//! weights are a softmax over each support, the diagonal is fixed to 1, and
//! column 0 mirrors row 0. Message passing is two bottleneck projections:
//! `h_E = φ₁(H·v)`, `v' = φ₂(Hᵀ·h_E)`.
//!
//! Support selection is not differentiable. Gradients reach the affinity
//! (or learned scores) only at the selected positions.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{incidence_weights, Graph, Var};
use crate::error::{Error, Result};
use crate::lora::{kaiming_uniform, Modality};
use crate::tensor::{topk_indices, ParamSet, Tensor};

/// Negative slope of the LeakyReLU used inside φ and the GAT scores.
pub const LEAKY_SLOPE: f64 = 0.2;

/// How hyperedge weights inside each support are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Softmax over the attention/cosine affinity.
    Ours,
    /// Learned GAT scores `LeakyReLU(aᵀ[Wv_i ∥ Wv_j])`.
    Gat,
    /// Learned GATv2 scores `aᵀ LeakyReLU(W[v_i ∥ v_j])`.
    Gatv2,
    /// Affinity weights, but `φ₁` is the identity (plain graph propagation).
    Gnn,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ours, Variant::Gat, Variant::Gatv2, Variant::Gnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ours => "ours",
            Variant::Gat => "gat",
            Variant::Gatv2 => "gatv2",
            Variant::Gnn => "gnn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`")))
    }
}

/// One bottleneck projection `W_up · σ(W_down · z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiWeights {
    /// `d' × d`
    pub down: Tensor,
    /// `d × d'`
    pub up: Tensor,
}

impl PhiWeights {
    pub fn init(d: usize, d_prime: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            down: kaiming_uniform(rng, &[d_prime, d], d),
            up: kaiming_uniform(rng, &[d, d_prime], d_prime),
        }
    }

    pub fn bottleneck(&self) -> usize {
        self.down.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HgnnWeights {
    pub phi1: PhiWeights,
    pub phi2: PhiWeights,
    pub slope: f64,
}

impl HgnnWeights {
    pub fn init(d: usize, d_prime: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            phi1: PhiWeights::init(d, d_prime, rng),
            phi2: PhiWeights::init(d, d_prime, rng),
            slope: LEAKY_SLOPE,
        }
    }
}

/// Learnable parameters of the GAT/GATv2 edge scorers.
#[derive(Clone, Debug, PartialEq)]
pub struct GatParams {
    /// GAT: `d × d`. GATv2: `d × 2d`.
    pub w: Tensor,
    /// GAT: `1 × 2d`. GATv2: `1 × d`.
    pub a: Tensor,
}

impl GatParams {
    pub fn init(variant: Variant, d: usize, rng: &mut ChaCha8Rng) -> Option<Self> {
        match variant {
            Variant::Gat => Some(Self {
                w: kaiming_uniform(rng, &[d, d], d),
                a: kaiming_uniform(rng, &[1, 2 * d], 2 * d),
            }),
            Variant::Gatv2 => Some(Self {
                w: kaiming_uniform(rng, &[d, 2 * d], 2 * d),
                a: kaiming_uniform(rng, &[1, d], d),
            }),
            Variant::Ours | Variant::Gnn => None,
        }
    }
}

/// Parameter names used for one modality's hypergraph weights.
pub fn param_name(modality: Modality, part: &str) -> String {
    match part {
        "gat.w" | "gat.a" => format!("gat.{}.{}", modality.as_str(), &part[4..]),
        _ => format!("hgnn.{}.{part}", modality.as_str()),
    }
}

/// Inserts the trainable tensors of one modality's module into `params`.
/// The GNN variant has no `φ₁`.
pub fn insert_params(
    params: &mut ParamSet,
    modality: Modality,
    variant: Variant,
    weights: &HgnnWeights,
    gat: Option<&GatParams>,
) {
    if variant != Variant::Gnn {
        params.insert(param_name(modality, "phi1.down"), weights.phi1.down.clone());
        params.insert(param_name(modality, "phi1.up"), weights.phi1.up.clone());
    }
    params.insert(param_name(modality, "phi2.down"), weights.phi2.down.clone());
    params.insert(param_name(modality, "phi2.up"), weights.phi2.up.clone());
    if let Some(gat) = gat {
        params.insert(param_name(modality, "gat.w"), gat.w.clone());
        params.insert(param_name(modality, "gat.a"), gat.a.clone());
    }
}

// ---------------------------------------------------------------------------
// Affinity

/// Mean over heads of the row-L2-normalized attention maps.
pub fn aggregate_attention_var(g: &mut Graph, heads: &[Var]) -> Result<Var> {
    let (first, rest) = heads
        .split_first()
        .ok_or_else(|| Error::InvalidConfig("aggregate_attention needs at least one head".into()))?;
    let mut acc = g.l2_normalize(*first)?;
    for h in rest {
        let n = g.l2_normalize(*h)?;
        acc = g.add(acc, n)?;
    }
    Ok(if heads.len() == 1 {
        acc
    } else {
        g.scale(acc, 1.0 / heads.len() as f64)
    })
}

pub fn aggregate_attention(heads: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = heads.iter().map(|h| g.constant(h.clone())).collect();
    let out = aggregate_attention_var(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

/// Raw affinity with `-inf` at positions that may never be selected:
/// masked rows and columns, the diagonal, `S[0,0]`, and `S[i,0]` for `i ≥ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub s: Tensor,
    pub mask: Vec<bool>,
    /// Set when a local token had zero norm and its cosines were taken as 0.
    pub zero_norm_token: bool,
}

impl AffinityMatrix {
    /// Applies the sentinels to finite affinity values (as produced by
    /// [`affinity_var`]).
    pub fn from_scores(values: &Tensor, mask: &[bool]) -> Result<Self> {
        let n = values.rows();
        if values.shape() != [n, n] || mask.len() != n {
            return Err(Error::shape("affinity", &[values.shape(), &[mask.len()]]));
        }
        let mut s = values.clone();
        for i in 0..n {
            for j in 0..n {
                if i == j || j == 0 || !mask[i] || !mask[j] {
                    s.set(i, j, f64::NEG_INFINITY);
                }
            }
        }
        Ok(Self {
            s,
            mask: mask.to_vec(),
            zero_norm_token: false,
        })
    }

    pub fn size(&self) -> usize {
        self.s.rows()
    }
}

/// Finite affinity on the graph: row 0 is the aggregated attention row
/// (entry 0 set to 0), rows `1..` are `[0 | cos(v_i, v_j)]`.
pub fn affinity_var(g: &mut Graph, aggregated: Var, tokens: Var) -> Result<Var> {
    let n = g.shape(tokens)[0];
    if g.shape(aggregated) != [n, n] {
        return Err(Error::shape("build_affinity", &[g.shape(aggregated), g.shape(tokens)]));
    }
    if n == 1 {
        return Ok(g.constant(Tensor::zeros(&[1, 1])));
    }
    let row0 = g.slice_rows(aggregated, 0, 1)?;
    let alpha = g.slice_cols(row0, 1, n)?;
    let local = g.slice_rows(tokens, 1, n)?;
    let unit = g.l2_normalize(local)?;
    let unit_t = g.transpose(unit)?;
    let cos = g.matmul(unit, unit_t)?;
    let z11 = g.constant(Tensor::zeros(&[1, 1]));
    let zcol = g.constant(Tensor::zeros(&[n - 1, 1]));
    let top = g.concat_cols(&[z11, alpha])?;
    let bottom = g.concat_cols(&[zcol, cos])?;
    g.concat_rows(&[top, bottom])
}

pub fn build_affinity(aggregated: &Tensor, tokens: &Tensor, mask: &[bool]) -> Result<AffinityMatrix> {
    let mut g = Graph::new();
    let a = g.constant(aggregated.clone());
    let t = g.constant(tokens.clone());
    let s = affinity_var(&mut g, a, t)?;
    let mut aff = AffinityMatrix::from_scores(g.value(s), mask)?;
    aff.zero_norm_token = !g.warnings().is_empty();
    Ok(aff)
}

// ---------------------------------------------------------------------------
// Incidence

#[derive(Clone, Debug, PartialEq)]
pub struct IncidenceMatrix {
    /// Final weights, after the column-0 symmetry overwrite.
    pub h: Tensor,
    /// Weights before the overwrite.
    pub pre_symmetry: Tensor,
    /// Selected support of each row, best first.
    pub omega: Vec<Vec<usize>>,
    pub k: usize,
}

impl IncidenceMatrix {
    pub fn from_scores(scores: &Tensor, omega: Vec<Vec<usize>>, k: usize) -> Self {
        let (pre, post) = incidence_weights(scores, &omega);
        Self {
            h: post,
            pre_symmetry: pre,
            omega,
            k,
        }
    }

    /// Plain-text dump: a header, one line of weights per row, then the supports.
    pub fn to_debug_text(&self) -> String {
        let n = self.h.rows();
        let mut out = format!("# incidence n={n} k={}\n", self.k);
        for i in 0..n {
            let row: Vec<String> = self.h.row(i).iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        for (i, support) in self.omega.iter().enumerate() {
            let ids: Vec<String> = support.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "omega[{i}] = {{{}}}", ids.join(", "));
        }
        out
    }
}

/// Top-k support of every row, skipping sentinel entries.
pub fn select_supports(affinity: &AffinityMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let n = affinity.size();
    Ok((0..n)
        .map(|i| {
            let excluded: BTreeSet<usize> = std::iter::once(i)
                .chain((0..n).filter(|&j| !affinity.mask[j]))
                .collect();
            if affinity.mask[i] {
                topk_indices(affinity.s.row(i), k, &excluded)
            } else {
                Vec::new()
            }
        })
        .collect())
}

pub fn build_incidence(affinity: &AffinityMatrix, k: usize) -> Result<IncidenceMatrix> {
    let omega = select_supports(affinity, k)?;
    Ok(IncidenceMatrix::from_scores(&affinity.s, omega, k))
}

// ---------------------------------------------------------------------------
// Message passing

/// Transposed φ weights bound into a graph.
#[derive(Clone, Copy, Debug)]
pub struct PhiVars {
    pub down_t: Var,
    pub up_t: Var,
}

impl PhiVars {
    pub fn bind(g: &mut Graph, down: Var, up: Var) -> Result<Self> {
        Ok(Self {
            down_t: g.transpose(down)?,
            up_t: g.transpose(up)?,
        })
    }

    fn constants(g: &mut Graph, w: &PhiWeights) -> Self {
        Self {
            down_t: g.constant(w.down.transpose()),
            up_t: g.constant(w.up.transpose()),
        }
    }
}

/// Row-wise `φ(z) = W_up · LeakyReLU(W_down · z)`, no bias.
pub fn phi_var(g: &mut Graph, z: Var, w: PhiVars, slope: f64) -> Result<Var> {
    let down = g.matmul(z, w.down_t)?;
    let act = g.leaky_relu(down, slope);
    g.matmul(act, w.up_t)
}

/// `φ₂(Hᵀ · φ₁(H · v))`; with `phi1 = None` this is the GNN reduction
/// `φ₂(Hᵀ · H · v)`.
pub fn message_pass_var(
    g: &mut Graph,
    h: Var,
    v: Var,
    phi1: Option<PhiVars>,
    phi2: PhiVars,
    slope: f64,
) -> Result<Var> {
    let hv = g.matmul(h, v)?;
    let edges = match phi1 {
        Some(p) => phi_var(g, hv, p, slope)?,
        None => hv,
    };
    let ht = g.transpose(h)?;
    let back = g.matmul(ht, edges)?;
    phi_var(g, back, phi2, slope)
}

pub fn phi(z: &Tensor, weights: &PhiWeights, slope: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let zv = g.constant(z.clone());
    let w = PhiVars::constants(&mut g, weights);
    let out = phi_var(&mut g, zv, w, slope)?;
    Ok(g.value(out).clone())
}

pub fn message_pass(h: &Tensor, v: &Tensor, weights: &HgnnWeights) -> Result<Tensor> {
    let mut g = Graph::new();
    let (hv, vv) = (g.constant(h.clone()), g.constant(v.clone()));
    let p1 = PhiVars::constants(&mut g, &weights.phi1);
    let p2 = PhiVars::constants(&mut g, &weights.phi2);
    let out = message_pass_var(&mut g, hv, vv, Some(p1), p2, weights.slope)?;
    Ok(g.value(out).clone())
}

pub fn message_pass_gnn(h: &Tensor, v: &Tensor, weights: &HgnnWeights) -> Result<Tensor> {
    let mut g = Graph::new();
    let (hv, vv) = (g.constant(h.clone()), g.constant(v.clone()));
    let p2 = PhiVars::constants(&mut g, &weights.phi2);
    let out = message_pass_var(&mut g, hv, vv, None, p2, weights.slope)?;
    Ok(g.value(out).clone())
}

// ---------------------------------------------------------------------------
// Learned edge scores

fn support_pairs(omega: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>, Vec<(usize, usize)>) {
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut pos = Vec::new();
    for (i, support) in omega.iter().enumerate() {
        for &j in support {
            rows.push(i);
            cols.push(j);
            pos.push((i, j));
        }
    }
    (rows, cols, pos)
}

/// Unnormalized edge scores at the support positions (zero elsewhere), ready
/// for [`Graph::incidence`].
pub fn learned_scores_var(
    g: &mut Graph,
    variant: Variant,
    v: Var,
    omega: &[Vec<usize>],
    w: Var,
    a: Var,
    slope: f64,
) -> Result<Var> {
    let n = g.shape(v)[0];
    let d = g.shape(v)[1];
    let (rows, cols, pos) = support_pairs(omega);
    if pos.is_empty() {
        return Ok(g.constant(Tensor::zeros(&[n, n])));
    }
    let e = match variant {
        Variant::Gat => {
            let dw = g.shape(w)[0];
            if g.shape(w) != [dw, d] || g.shape(a) != [1, 2 * dw] {
                return Err(Error::shape("gat_scores", &[g.shape(w), g.shape(a)]));
            }
            let wt = g.transpose(w)?;
            let p = g.matmul(v, wt)?;
            let a_src = g.slice_cols(a, 0, dw)?;
            let a_dst = g.slice_cols(a, dw, 2 * dw)?;
            let a_src_t = g.transpose(a_src)?;
            let a_dst_t = g.transpose(a_dst)?;
            let s_src = g.matmul(p, a_src_t)?;
            let s_dst = g.matmul(p, a_dst_t)?;
            let gi = g.gather_rows(s_src, rows)?;
            let gj = g.gather_rows(s_dst, cols)?;
            let sum = g.add(gi, gj)?;
            g.leaky_relu(sum, slope)
        }
        Variant::Gatv2 => {
            let dw = g.shape(w)[0];
            if g.shape(w) != [dw, 2 * d] || g.shape(a) != [1, dw] {
                return Err(Error::shape("gatv2_scores", &[g.shape(w), g.shape(a)]));
            }
            let w_src = g.slice_cols(w, 0, d)?;
            let w_dst = g.slice_cols(w, d, 2 * d)?;
            let w_src_t = g.transpose(w_src)?;
            let w_dst_t = g.transpose(w_dst)?;
            let p_src = g.matmul(v, w_src_t)?;
            let p_dst = g.matmul(v, w_dst_t)?;
            let gi = g.gather_rows(p_src, rows)?;
            let gj = g.gather_rows(p_dst, cols)?;
            let sum = g.add(gi, gj)?;
            let act = g.leaky_relu(sum, slope);
            let at = g.transpose(a)?;
            g.matmul(act, at)?
        }
        Variant::Ours | Variant::Gnn => {
            return Err(Error::InvalidConfig(format!(
                "{} has no learned edge scores",
                variant.as_str()
            )))
        }
    };
    g.scatter_entries(e, pos, n, n)
}

fn variant_weights(variant: Variant, v: &Tensor, omega: &[Vec<usize>], params: &GatParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let vv = g.constant(v.clone());
    let w = g.constant(params.w.clone());
    let a = g.constant(params.a.clone());
    let scores = learned_scores_var(&mut g, variant, vv, omega, w, a, LEAKY_SLOPE)?;
    let (mut pre, _) = incidence_weights(g.value(scores), omega);
    for i in 0..pre.rows() {
        if !omega[i].contains(&i) {
            pre.set(i, i, 0.0);
        }
    }
    Ok(pre)
}

/// GAT replacement weights: `α_ij` at support positions, zero elsewhere.
pub fn variant_scores_gat(v: &Tensor, omega: &[Vec<usize>], params: &GatParams) -> Result<Tensor> {
    variant_weights(Variant::Gat, v, omega, params)
}

/// GATv2 replacement weights: `α_ij` at support positions, zero elsewhere.
pub fn variant_scores_gatv2(v: &Tensor, omega: &[Vec<usize>], params: &GatParams) -> Result<Tensor> {
    variant_weights(Variant::Gatv2, v, omega, params)
}
