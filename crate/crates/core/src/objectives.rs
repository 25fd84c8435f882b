//! Self-supervised and supervised objectives: spatio-temporal masking,
//! masked Poisson reconstruction, cross-site contrastive repulsion, MSE and
//! the coefficient of determination.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const POISSON_EPS: f64 = 1e-8;
const MASK_RETRIES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskStrategy {
    /// Per batch element, draw p_t ~ U(0,1) and p_n ~ U(0,1), then mask whole
    /// time bins with probability p_t and whole neuron columns with
    /// probability p_n (union of the two structured masks).
    UniformRandom,
    /// Same structured union with fixed ratios.
    Fixed { p_neuron: f64, p_time: f64 },
    /// Literal entrywise reading: p ~ U(0,1) per batch element, each entry
    /// masked independently with probability p.
    Entrywise,
}

impl std::str::FromStr for MaskStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "uniform" || s == "uniform_random" {
            return Ok(MaskStrategy::UniformRandom);
        }
        if s == "entrywise" {
            return Ok(MaskStrategy::Entrywise);
        }
        if let Some(rest) = s.strip_prefix("fixed:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() == 2 {
                let p_neuron = parts[0].parse::<f64>().map_err(|_| {
                    Error::Config(format!("bad masking ratio '{}'", parts[0]))
                })?;
                let p_time = parts[1].parse::<f64>().map_err(|_| {
                    Error::Config(format!("bad masking ratio '{}'", parts[1]))
                })?;
                return Ok(MaskStrategy::Fixed { p_neuron, p_time });
            }
        }
        Err(Error::Config(format!(
            "unknown masking strategy '{}' (expected uniform|entrywise|fixed:PN,PT)",
            s
        )))
    }
}

/// A realized binary spatio-temporal mask. `mask` entries: 1 = visible,
/// 0 = masked (reconstruction target).
#[derive(Clone, Debug)]
pub struct MaskSpec {
    pub strategy: MaskStrategy,
    /// Realized per-batch-element neuron ratios.
    pub p_neuron: Vec<f64>,
    /// Realized per-batch-element temporal ratios.
    pub p_time: Vec<f64>,
    pub mask: Tensor,
}

impl MaskSpec {
    pub fn masked_count(&self) -> usize {
        self.mask.data.iter().filter(|v| **v == 0.0).count()
    }

    pub fn masked_fraction(&self) -> f64 {
        self.masked_count() as f64 / self.mask.numel() as f64
    }
}

/// Sample a `[b, t, n]` mask. Each batch element must keep at least one
/// visible and one masked position; degenerate draws are resampled a bounded
/// number of times before erroring out.
pub fn sample_mask(
    b: usize,
    t: usize,
    n: usize,
    strategy: MaskStrategy,
    rng: &mut impl Rng,
) -> Result<MaskSpec> {
    if b == 0 || t == 0 || n == 0 {
        return Err(Error::Config(format!("mask dims must be positive, got {}x{}x{}", b, t, n)));
    }
    let mut mask = vec![1.0; b * t * n];
    let mut p_neuron = Vec::with_capacity(b);
    let mut p_time = Vec::with_capacity(b);
    for bi in 0..b {
        let elem = &mut mask[bi * t * n..(bi + 1) * t * n];
        let mut ok = false;
        let mut pn = 0.0;
        let mut pt = 0.0;
        for _ in 0..MASK_RETRIES {
            for v in elem.iter_mut() {
                *v = 1.0;
            }
            match strategy {
                MaskStrategy::UniformRandom | MaskStrategy::Fixed { .. } => {
                    (pn, pt) = match strategy {
                        MaskStrategy::Fixed { p_neuron, p_time } => (p_neuron, p_time),
                        _ => (rng.gen::<f64>(), rng.gen::<f64>()),
                    };
                    let time_masked: Vec<bool> = (0..t).map(|_| rng.gen::<f64>() < pt).collect();
                    let neuron_masked: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < pn).collect();
                    for (ti, tm) in time_masked.iter().enumerate() {
                        for (ni, nm) in neuron_masked.iter().enumerate() {
                            if *tm || *nm {
                                elem[ti * n + ni] = 0.0;
                            }
                        }
                    }
                }
                MaskStrategy::Entrywise => {
                    let p = rng.gen::<f64>();
                    pn = p;
                    pt = p;
                    for v in elem.iter_mut() {
                        if rng.gen::<f64>() < p {
                            *v = 0.0;
                        }
                    }
                }
            }
            let visible = elem.iter().filter(|v| **v == 1.0).count();
            if visible > 0 && visible < elem.len() {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Config(format!(
                "mask sampling exhausted {} retries for batch element {} (strategy {:?})",
                MASK_RETRIES, bi, strategy
            )));
        }
        p_neuron.push(pn);
        p_time.push(pt);
    }
    Ok(MaskSpec {
        strategy,
        p_neuron,
        p_time,
        mask: Tensor::new(vec![b, t, n], mask)?,
    })
}

/// Zero out masked entries; the original tensor stays untouched as the loss
/// target.
pub fn apply_mask(x: &Tensor, spec: &MaskSpec) -> Result<Tensor> {
    if x.numel() != spec.mask.numel() {
        return Err(Error::Shape(format!(
            "spikes {:?} vs mask {:?}",
            x.shape, spec.mask.shape
        )));
    }
    let mut out = x.clone();
    for (v, m) in out.data.iter_mut().zip(&spec.mask.data) {
        if *m == 0.0 {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Per-loss-term record; `total == recon + mu * contrast`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub contrast: f64,
    pub total: f64,
    pub masked_count: usize,
    pub mu: f64,
}

/// Masked Poisson negative log-likelihood on the tape:
/// sum over masked positions of `lambda - x*log(lambda + eps)`, then mean
/// over the leading batch extent. `visible` marks kept inputs with 1.
pub fn poisson_loss_graph(
    tape: &mut Tape,
    lambda: TensorId,
    x: &Tensor,
    visible: &Tensor,
) -> Result<TensorId> {
    if tape.shape(lambda) != x.shape.as_slice() {
        return Err(Error::Shape(format!(
            "rates {:?} vs targets {:?}",
            tape.shape(lambda),
            x.shape
        )));
    }
    if let Some(v) = tape.data(lambda).iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Numeric(format!(
            "poisson loss requires strictly positive rates, got {}",
            v
        )));
    }
    if let Some(v) = x.data.iter().find(|v| **v < 0.0) {
        return Err(Error::Domain(format!("spike counts must be nonnegative, got {}", v)));
    }
    let batch = x.shape.first().copied().unwrap_or(1).max(1);
    let xs = tape.constant(x);
    let mut target = visible.clone();
    for v in target.data.iter_mut() {
        *v = 1.0 - *v;
    }
    let masked = tape.constant(&target);
    let shifted = tape.add_scalar(lambda, POISSON_EPS);
    let lg = tape.log(shifted)?;
    let xlog = tape.mul(xs, lg)?;
    let per_pos = tape.sub(lambda, xlog)?;
    let picked = tape.mul(per_pos, masked)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, 1.0 / batch as f64))
}

/// Value-level Poisson loss (runs a throwaway tape).
pub fn poisson_loss(lambda: &Tensor, x: &Tensor, visible: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(lambda);
    let loss = poisson_loss_graph(&mut tape, l, x, visible)?;
    tape.scalar_value(loss)
}

/// Cross-site contrastive repulsion on the tape. `z` is `[B,S,T,D]`; site
/// summaries are time-then-batch means; similarity is cosine. The numerator
/// is the self-similarity term, so minimizing pushes distinct sites apart.
pub fn contrastive_loss_graph(tape: &mut Tape, z: TensorId, tau: f64) -> Result<TensorId> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("contrastive input must be [B,S,T,D], got {:?}", shape)));
    }
    let s = shape[1];
    if s < 2 {
        return Err(Error::Config(format!(
            "contrastive loss needs at least 2 sites, got {} (set its weight to 0)",
            s
        )));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {}", tau)));
    }
    let tmean = tape.mean_axis(z, 2)?; // [B,S,D]
    let zbar = tape.mean_axis(tmean, 0)?; // [S,D]
    let sq = tape.mul(zbar, zbar)?;
    let norm_sq = tape.sum_axis(sq, 1)?; // [S]
    let guarded = tape.add_scalar(norm_sq, 1e-24);
    let norm = tape.sqrt(guarded)?;
    let norm_col = tape.reshape(norm, &[s, 1])?;
    let zn = tape.div(zbar, norm_col)?; // rows on the unit sphere
    let znt = tape.transpose_last2(zn)?;
    let sims = tape.matmul(zn, znt)?; // [S,S] cosine similarities
    let scaled = tape.scale(sims, 1.0 / tau);
    let sm = tape.softmax(scaled, 1)?;
    let log_sm = tape.log(sm)?;
    let mut eye = Tensor::zeros(&[s, s]);
    for i in 0..s {
        eye.data[i * s + i] = 1.0;
    }
    let eye = tape.constant(&eye);
    let diag = tape.mul(log_sm, eye)?;
    let total = tape.sum_all(diag);
    Ok(tape.scale(total, -1.0 / s as f64))
}

/// Value-level contrastive loss.
pub fn contrastive_loss(z: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let id = tape.constant(z);
    let loss = contrastive_loss_graph(&mut tape, id, tau)?;
    tape.scalar_value(loss)
}

/// Mean squared error on the tape.
pub fn mse_loss_graph(tape: &mut Tape, pred: TensorId, target: &Tensor) -> Result<TensorId> {
    if tape.shape(pred) != target.shape.as_slice() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            tape.shape(pred),
            target.shape
        )));
    }
    let t = tape.constant(target);
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred);
    let loss = mse_loss_graph(&mut tape, p, target)?;
    tape.scalar_value(loss)
}

/// Coefficient of determination, computed per output dimension (last axis)
/// against the evaluation-set mean, then averaged. A zero-variance target
/// dimension yields NaN with a logged warning.
pub fn r2_score(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape != target.shape {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape, target.shape
        )));
    }
    let d = *target.shape.last().ok_or_else(|| Error::Usage("r2 on rank-0 tensor".into()))?;
    let rows = target.numel() / d;
    let mut total = 0.0;
    for dim in 0..d {
        let mut mean = 0.0;
        for r in 0..rows {
            mean += target.data[r * d + dim];
        }
        mean /= rows as f64;
        let mut ss_res = 0.0;
        let mut ss_tot = 0.0;
        for r in 0..rows {
            let y = target.data[r * d + dim];
            let p = pred.data[r * d + dim];
            ss_res += (p - y) * (p - y);
            ss_tot += (y - mean) * (y - mean);
        }
        if ss_tot == 0.0 {
            log::warn!("r2 undefined: target dimension {} has zero variance", dim);
            return Ok(f64::NAN);
        }
        total += 1.0 - ss_res / ss_tot;
    }
    Ok(total / d as f64)
}
