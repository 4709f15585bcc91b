//! Central finite differences and gradient comparison.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Activation, EncoderConfig, InputKind};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::model::{batch_loss, loss_and_grads, prepare_image, prepare_text, Model, ModelConfig, Prepared, LOGIT_SCALE};
use crate::tensor::{GradRecord, ParamSet, Tensor};

/// Relative-error denominator floor.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Numerical gradient of `loss_fn` at `params` by central differences,
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut loss_fn: F, params: &ParamSet, epsilon: f64) -> Result<GradRecord>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut probe = params.clone();
    let mut record = GradRecord::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let base = params.get(&name).expect("name from params").clone();
        let mut grad = vec![0.0; base.numel()];
        for (idx, g) in grad.iter_mut().enumerate() {
            let theta = base.data()[idx];
            probe.get_mut(&name).expect("present").data_mut()[idx] = theta + epsilon;
            let plus = loss_fn(&probe)?;
            probe.get_mut(&name).expect("present").data_mut()[idx] = theta - epsilon;
            let minus = loss_fn(&probe)?;
            probe.get_mut(&name).expect("present").data_mut()[idx] = theta;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at probe {name}[{idx}] is not finite ({plus}, {minus})"
                )));
            }
            *g = (plus - minus) / (2.0 * epsilon);
        }
        record.insert(name, Tensor::new(base.shape().to_vec(), grad)?);
    }
    Ok(record)
}

fn central<F>(loss_fn: &mut F, probe: &mut ParamSet, name: &str, idx: usize, h: f64) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let theta = probe.get(name).expect("present").data()[idx];
    probe.get_mut(name).expect("present").data_mut()[idx] = theta + h;
    let plus = loss_fn(probe)?;
    probe.get_mut(name).expect("present").data_mut()[idx] = theta - h;
    let minus = loss_fn(probe)?;
    probe.get_mut(name).expect("present").data_mut()[idx] = theta;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::NonFinite(format!("loss at probe {name}[{idx}] is not finite ({plus}, {minus})")));
    }
    Ok((plus - minus) / (2.0 * h))
}

/// `(8(f(θ+h) − f(θ−h)) − (f(θ+2h) − f(θ−2h))) / 12h`: central differences
/// with the h² error term cancelled.
fn richardson<F>(loss_fn: &mut F, probe: &mut ParamSet, name: &str, idx: usize, h: f64) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let near = central(loss_fn, probe, name, idx, h)?;
    let far = central(loss_fn, probe, name, idx, 2.0 * h)?;
    Ok((4.0 * near - far) / 3.0)
}

/// Step of the narrow estimate that guards the wide one.
const FINE_STEP: f64 = 1e-4;

/// Largest gap between the two central differences of a narrow estimate
/// taken as smooth; a jump or kink inside the stencil opens a far wider one.
const SMOOTH: f64 = 1e-6;

/// A smooth narrow estimate whose noise is at most this fraction of its
/// magnitude is final.
const PRECISE: f64 = 1e-6;

/// Fraction of the noise bound within which the wide estimate must match
/// the narrow one. The bound assumes 64 ulp of error in the loss; a few ulp is
/// typical, and a wide estimate fooled by a jump can land inside the full bound.
const GUARD: f64 = 0.125;

/// Relative agreement required between narrow estimates at neighbouring steps.
const AGREE: f64 = 1e-7;

/// Narrow estimate: Richardson at [`FINE_STEP`], shrinking the step while a
/// kink inside the stencil makes neighbouring estimates disagree.
fn fine_estimate<F>(
    loss_fn: &mut F,
    probe: &mut ParamSet,
    name: &str,
    idx: usize,
    first: f64,
    noise: &impl Fn(f64) -> f64,
) -> Result<(f64, f64)>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut h = FINE_STEP;
    let mut est = first;
    for _ in 0..2 {
        let next = richardson(loss_fn, probe, name, idx, h / 10.0)?;
        if (next - est).abs() <= AGREE * est.abs().max(next.abs()) + noise(h / 10.0) {
            break;
        }
        est = next;
        h /= 10.0;
    }
    Ok((est, h))
}

/// Step shrink factor between rows of the extrapolation table.
const RIDDERS_SHRINK: f64 = 2.0;
/// Rows of the extrapolation table; the smallest step is `h0 / 2^(rows-1)`.
const RIDDERS_ROWS: usize = 7;
/// Stop once the error estimate grows past this multiple of the best one.
const RIDDERS_SAFE: f64 = 2.0;
/// Stop early once the error estimate is this small relative to the answer.
const RIDDERS_TARGET: f64 = 1e-10;
/// Absolute error below which an estimate is treated as converged.
const RIDDERS_ABS: f64 = 1e-15;

/// One derivative by Ridders' method: central differences at steps
/// `h0, h0/2, h0/4, ...` extrapolated to zero step by Neville's scheme.
/// `widest` is the central difference at `h0`. Returns the estimate with the
/// smallest error estimate.
fn ridders<F>(loss_fn: &mut F, probe: &mut ParamSet, name: &str, idx: usize, h0: f64, widest: f64) -> Result<f64>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let c2 = RIDDERS_SHRINK * RIDDERS_SHRINK;
    let mut h = h0;
    let mut prev = vec![widest];
    let mut best = widest;
    let mut err = f64::INFINITY;
    for _ in 1..RIDDERS_ROWS {
        h /= RIDDERS_SHRINK;
        let mut row = Vec::with_capacity(prev.len() + 1);
        row.push(central(loss_fn, probe, name, idx, h)?);
        let mut fac = c2;
        for j in 1..=prev.len() {
            let next = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
            fac *= c2;
            let e = (next - row[j - 1]).abs().max((next - prev[j - 1]).abs());
            if e <= err {
                err = e;
                best = next;
            }
            row.push(next);
        }
        let diverging = (row[row.len() - 1] - prev[prev.len() - 1]).abs() >= RIDDERS_SAFE * err;
        if diverging || err <= RIDDERS_TARGET * best.abs() + RIDDERS_ABS {
            break;
        }
        prev = row;
    }
    Ok(best)
}

/// Central differences at `h0, h0/10, ...` down to [`FINE_STEP`] for a
/// derivative the narrow estimate cannot tell from zero. The first step whose
/// difference stays inside its own noise band wins: along that coordinate the
/// loss is flat over the whole stencil, and wider steps are less noisy.
fn zero_estimate<F>(
    loss_fn: &mut F,
    probe: &mut ParamSet,
    name: &str,
    idx: usize,
    h0: f64,
    widest: f64,
    noise: &impl Fn(f64) -> f64,
) -> Result<Option<f64>>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let mut h = h0;
    let mut c = widest;
    while h > FINE_STEP {
        if c.abs() <= noise(h) {
            return Ok(Some(c));
        }
        h /= 10.0;
        c = central(loss_fn, probe, name, idx, h)?;
    }
    Ok(None)
}

/// Numerical gradient accurate enough to check small derivatives.
///
/// Each coordinate gets two estimates. The narrow one is Richardson at a
/// `1e-4` step, shrunk past any kink (a ReLU-type activation) inside the
/// stencil; it is robust but carries cancellation noise of `~ulp(f)/h`. The
/// wide one is Ridders' extrapolation from step `h0`, which is far less noisy
/// but can be fooled by a jump of the loss, such as a top-k selection
/// changing, inside its stencil. The wide estimate is used when it agrees
/// with the narrow one to within the narrow one's noise; otherwise the narrow
/// one is kept. A derivative the narrow estimate cannot tell from zero is
/// re-measured with the widest step over which the loss stays flat. Large,
/// smooth derivatives skip the wide estimate: the narrow one is already
/// precise.
pub fn finite_diff_grad_refined<F>(mut loss_fn: F, params: &ParamSet, h0: f64) -> Result<GradRecord>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(h0 > FINE_STEP) {
        return Err(Error::InvalidConfig(format!("initial step must exceed {FINE_STEP}, got {h0}")));
    }
    let f0 = loss_fn(params)?;
    let noise = move |h: f64| 64.0 * f64::EPSILON * f0.abs().max(1.0) / h;
    let mut probe = params.clone();
    let mut record = GradRecord::new();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let shape = params.get(&name).expect("name from params").shape().to_vec();
        let n = params.get(&name).expect("name from params").numel();
        let mut grad = vec![0.0; n];
        for (idx, g) in grad.iter_mut().enumerate() {
            let near = central(&mut loss_fn, &mut probe, &name, idx, FINE_STEP)?;
            let far = central(&mut loss_fn, &mut probe, &name, idx, 2.0 * FINE_STEP)?;
            let fine = (4.0 * near - far) / 3.0;
            let smooth = (near - far).abs() <= SMOOTH * fine.abs().max(1.0);
            if smooth && noise(FINE_STEP) <= PRECISE * fine.abs() {
                *g = fine;
                continue;
            }
            let widest = central(&mut loss_fn, &mut probe, &name, idx, h0)?;
            if fine.abs() <= noise(FINE_STEP) {
                if let Some(z) = zero_estimate(&mut loss_fn, &mut probe, &name, idx, h0, widest, &noise)? {
                    *g = z;
                    continue;
                }
            }
            let wide = ridders(&mut loss_fn, &mut probe, &name, idx, h0, widest)?;
            *g = if (wide - fine).abs() <= GUARD * noise(FINE_STEP) {
                wide
            } else {
                let (fine, h) = fine_estimate(&mut loss_fn, &mut probe, &name, idx, fine, &noise)?;
                if (wide - fine).abs() <= GUARD * noise(h) {
                    wide
                } else {
                    fine
                }
            };
        }
        record.insert(name, Tensor::new(shape, grad)?);
    }
    Ok(record)
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(REL_ERR_FLOOR);
    (a - b).abs() / denom
}

/// Worst relative error per parameter name. A name missing from either record
/// is compared against zeros.
pub fn compare_grads(analytic: &GradRecord, numeric: &GradRecord) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    let names: std::collections::BTreeSet<&String> =
        analytic.names().chain(numeric.names()).collect();
    for name in names {
        let a = analytic.get(name);
        let n = numeric.get(name);
        let len = a.or(n).map_or(0, Tensor::numel);
        let worst = (0..len)
            .map(|i| {
                let av = a.map_or(0.0, |t| t.data()[i]);
                let nv = n.map_or(0.0, |t| t.data()[i]);
                relative_error(av, nv)
            })
            .fold(0.0, f64::max);
        out.insert(name.clone(), worst);
    }
    out
}

/// Bound on the worst relative error of a model-level check.
pub const MODEL_TOLERANCE: f64 = 1e-5;

/// Initial finite-difference step used for model-level checks.
pub const MODEL_EPSILON: f64 = 1e-1;

/// The small dual encoder used for end-to-end gradient checks: width 8,
/// two layers, two heads, a 2×2 patch grid.
pub fn tiny_model_config() -> ModelConfig {
    let image = EncoderConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 8,
        mlp_hidden: 16,
        input: InputKind::Image { side: 2, patch_dim: 4 },
        activation: Activation::Gelu,
    };
    let text = EncoderConfig {
        input: InputKind::Text { vocab_size: 16, max_len: 5 },
        ..image.clone()
    };
    ModelConfig {
        image,
        text,
        d_prime: 4,
        k: 2,
        ..ModelConfig::toy()
    }
}

/// Worst relative error per parameter group (`lora`, `hgnn`, `gat`,
/// `temperature`) of one end-to-end check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGradcheck {
    pub seed: u64,
    pub groups: BTreeMap<String, f64>,
    pub worst: f64,
    pub worst_param: String,
    /// Analytic and numeric values at the worst coordinate.
    pub worst_values: (f64, f64),
    /// Loss evaluations spent on the numerical gradient.
    pub evaluations: usize,
}

impl ModelGradcheck {
    pub fn passed(&self) -> bool {
        self.worst < MODEL_TOLERANCE
    }
}

fn group_of(name: &str) -> &str {
    match name.split('.').next().unwrap_or(name) {
        LOGIT_SCALE => "temperature",
        g => g,
    }
}

/// Compares backward() against central differences for the full batch loss
/// of a freshly initialized model whose zero-initialized LoRA `B` factors
/// are replaced by small random values, so every gradient is exercised.
pub fn check_model(cfg: &ModelConfig, seed: u64, batch_size: usize, kind: LossKind, epsilon: f64) -> Result<ModelGradcheck> {
    let mut model = Model::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let names: Vec<String> = model.params.names().filter(|n| n.ends_with(".b")).cloned().collect();
    for name in names {
        let t = model.params.get_mut(&name).expect("listed");
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let (side, patch_dim) = match cfg.image.input {
        InputKind::Image { side, patch_dim } => (side, patch_dim),
        InputKind::Text { .. } => return Err(Error::InvalidConfig("image encoder expected".into())),
    };
    let (vocab, max_len) = match cfg.text.input {
        InputKind::Text { vocab_size, max_len } => (vocab_size, max_len),
        InputKind::Image { .. } => return Err(Error::InvalidConfig("text encoder expected".into())),
    };
    let mut inputs = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let grid = Tensor::new(
            vec![side, side, patch_dim],
            (0..side * side * patch_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let len = rng.random_range(1..max_len.max(2));
        let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
        let image = prepare_image(&model.frozen.image, &grid)?;
        let text = prepare_text(&model.frozen.text, &ids)?;
        // Labels 0,1,0,1,...: the first and third samples share a label.
        inputs.push((image, text, i % 2));
    }
    let batch: Vec<(&Prepared, &Prepared, usize)> = inputs.iter().map(|(a, b, l)| (a, b, *l)).collect();
    let (_, analytic) = loss_and_grads(&model, &model.params, &batch, kind)?;
    let mut evaluations = 0;
    let numeric = finite_diff_grad_refined(
        |p| {
            evaluations += 1;
            batch_loss(&model, p, &batch, kind)
        },
        &model.params,
        epsilon,
    )?;
    let per_param = compare_grads(&analytic, &numeric);
    let mut worst_values = (0.0, 0.0);
    let mut groups = BTreeMap::new();
    let mut worst = 0.0;
    let mut worst_param = String::new();
    for (name, err) in &per_param {
        let e = groups.entry(group_of(name).to_string()).or_insert(0.0f64);
        *e = e.max(*err);
        if *err > worst || worst_param.is_empty() {
            worst = *err;
            worst_param = name.clone();
            let (a, n) = (analytic.get(name).expect("analytic"), numeric.get(name).expect("numeric"));
            worst_values = a
                .data()
                .iter()
                .zip(n.data())
                .map(|(&x, &y)| (x, y))
                .max_by(|p, q| relative_error(p.0, p.1).total_cmp(&relative_error(q.0, q.1)))
                .unwrap_or((0.0, 0.0));
        }
    }
    Ok(ModelGradcheck {
        seed,
        groups,
        worst,
        worst_param,
        worst_values,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::scalar(value));
        p
    }

    #[test]
    fn quadratic() {
        let g = finite_diff_grad(
            |p| Ok(p.get("t").unwrap().data()[0].powi(2)),
            &single("t", 3.0),
            1e-4,
        )
        .unwrap();
        assert!((g.get("t").unwrap().data()[0] - 6.0).abs() < 1e-7);
    }

    #[test]
    fn exponential() {
        let g = finite_diff_grad(
            |p| Ok(p.get("t").unwrap().data()[0].exp()),
            &single("t", 0.0),
            1e-5,
        )
        .unwrap();
        assert!((g.get("t").unwrap().data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_epsilon_and_nonfinite_loss() {
        let p = single("t", 1.0);
        assert!(finite_diff_grad(|_| Ok(0.0), &p, 0.0).is_err());
        assert!(finite_diff_grad(|_| Ok(f64::NAN), &p, 1e-3).is_err());
    }

    fn at(p: &ParamSet) -> f64 {
        p.get("t").unwrap().data()[0]
    }

    #[test]
    fn refined_smooth_is_tight() {
        let g = finite_diff_grad_refined(|p| Ok(at(p).sin() * at(p).exp()), &single("t", 0.3), MODEL_EPSILON).unwrap();
        let exact = 0.3f64.exp() * (0.3f64.sin() + 0.3f64.cos());
        assert!(relative_error(g.get("t").unwrap().data()[0], exact) < 1e-10);
    }

    #[test]
    fn refined_flat_direction_is_near_zero() {
        // Shifting both logits by t leaves the log-softmax unchanged.
        let f = |p: &ParamSet| {
            let t = at(p);
            let (a, b) = (0.7 + t, -1.3 + t);
            let m = a.max(b);
            Ok(a - (m + ((a - m).exp() + (b - m).exp()).ln()))
        };
        let g = finite_diff_grad_refined(f, &single("t", 0.2), MODEL_EPSILON).unwrap();
        assert!(g.get("t").unwrap().data()[0].abs() < 1e-14);
    }

    #[test]
    fn refined_steps_past_kink_and_jump() {
        // Kink at 0.03 and a unit jump at 0.05, both inside the widest stencil.
        let f = |p: &ParamSet| {
            let t = at(p);
            Ok(0.5 * t * t - (t - 0.03).abs() + if t > 0.05 { 1.0 } else { 0.0 })
        };
        let g = finite_diff_grad_refined(f, &single("t", 0.0), MODEL_EPSILON).unwrap();
        assert!((g.get("t").unwrap().data()[0] - 1.0).abs() < 1e-9);
        assert!(finite_diff_grad_refined(|_| Ok(0.0), &single("t", 0.0), 1e-5).is_err());
    }

    #[test]
    fn tiny_model_passes() {
        let r = check_model(&tiny_model_config(), 0, 3, LossKind::LabelGuided, MODEL_EPSILON).unwrap();
        assert!(r.passed(), "{r:?}");
        for group in ["lora", "hgnn", "temperature"] {
            assert!(r.groups.contains_key(group), "{group} missing");
        }
        assert!(r.evaluations > 0);
    }

    #[test]
    fn corrupted_backward_is_caught() {
        crate::autodiff::inject_backward_fault(true);
        let r = check_model(&tiny_model_config(), 0, 3, LossKind::LabelGuided, MODEL_EPSILON);
        crate::autodiff::inject_backward_fault(false);
        assert!(!r.unwrap().passed());
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
