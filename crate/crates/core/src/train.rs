//! Training engine: decoupled-weight-decay Adam with linear-warmup cosine
//! decay and global-norm clipping, the self-supervised pretraining loop, the
//! supervised finetuning loop (full / few-shot / scratch), grid sweeps, and
//! the whole-model gradient checker.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{Dataset, SpikeBatch};
use crate::error::{Error, Result};
use crate::model::{BoundModel, RpntConfig, RpntModel};
use crate::nn::{ForwardCtx, ParamVisitor};
use crate::objectives::{
    apply_mask, contrastive_loss_graph, mse_loss_graph, poisson_loss_graph, r2_score, sample_mask,
    LossBreakdown, MaskStrategy,
};
use crate::posenc::PeKind;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Contrastive weight mu (0 disables the term).
    pub contrastive_weight: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub mask: MaskStrategy,
    pub seed: u64,
}

impl Hyper {
    /// Benchmark-scale pretraining row: lr 5e-5, 100 epochs, 50 warmup,
    /// batch 64, no contrastive term.
    pub fn pretrain_benchmark() -> Self {
        Hyper {
            lr: 5e-5,
            epochs: 100,
            warmup_epochs: 50,
            batch_size: 64,
            weight_decay: 0.01,
            grad_clip: 1.0,
            contrastive_weight: 0.0,
            tau: 0.1,
            mask: MaskStrategy::UniformRandom,
            seed: 3407,
        }
    }

    /// Probe-scale pretraining row: 10 warmup epochs, batch 32, mu 0.1.
    pub fn pretrain_neuropixel() -> Self {
        Hyper {
            lr: 5e-5,
            epochs: 100,
            warmup_epochs: 10,
            batch_size: 32,
            weight_decay: 0.01,
            grad_clip: 1.0,
            contrastive_weight: 0.1,
            tau: 0.1,
            mask: MaskStrategy::UniformRandom,
            seed: 3407,
        }
    }

    /// Desk-scale pretraining defaults (10% warmup).
    pub fn pretrain_desk(epochs: usize, seed: u64) -> Self {
        Hyper {
            lr: 1e-3,
            epochs,
            warmup_epochs: (epochs / 10).max(1),
            batch_size: 32,
            weight_decay: 0.01,
            grad_clip: 1.0,
            contrastive_weight: 0.0,
            tau: 0.1,
            mask: MaskStrategy::UniformRandom,
            seed,
        }
    }

    /// Supervised finetuning row: lr 1e-4, batch 32, no warmup.
    pub fn sft_default() -> Self {
        Hyper {
            lr: 1e-4,
            epochs: 200,
            warmup_epochs: 0,
            batch_size: 32,
            weight_decay: 0.01,
            grad_clip: 1.0,
            contrastive_weight: 0.0,
            tau: 0.1,
            mask: MaskStrategy::UniformRandom,
            seed: 3407,
        }
    }

    /// Desk-scale finetuning defaults.
    pub fn sft_desk(epochs: usize, seed: u64) -> Self {
        Hyper { lr: 1e-3, epochs, batch_size: 16, ..Hyper::sft_default() }.with_seed(seed)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Linear warmup to the peak, then cosine decay to zero at the final step.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.peak;
        }
        let progress = (step - self.warmup_steps) as f64
            / (self.total_steps - self.warmup_steps) as f64;
        let progress = progress.min(1.0);
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Global-norm clip: returns (pre-clip norm, scale factor applied).
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> (f64, f64) {
    let mut sq = 0.0;
    for g in grads.iter() {
        for v in g {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
        (norm, scale)
    } else {
        (norm, 1.0)
    }
}

/// One decoupled-weight-decay adaptive-moment update on a flat buffer.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: usize,
    lr: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..param.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * param[i]);
    }
}

/// Optimizer state over a model's parameter tensors (visitor order).
pub struct AdamW {
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

pub struct StepStats {
    pub lr: f64,
    pub grad_norm: f64,
}

impl AdamW {
    pub fn new(model: &RpntModel, schedule: LrSchedule, weight_decay: f64, grad_clip: f64) -> Self {
        let mut m = Vec::new();
        model.visit("model", &mut |_, t| m.push(vec![0.0; t.numel()]));
        let v = m.clone();
        AdamW { schedule, weight_decay, grad_clip, step: 0, m, v }
    }

    /// Consumes the gradients stored on the parameters.
    pub fn apply(&mut self, model: &mut RpntModel) -> Result<StepStats> {
        let lr = self.schedule.at(self.step);
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(self.m.len());
        let mut any = false;
        model.visit("model", &mut |_, t| match &t.grad {
            Some(g) => {
                grads.push(g.clone());
                any = true;
            }
            // not reachable from this loss (e.g. the rate decoder during
            // supervised finetuning): zero gradient, decay still applies
            None => grads.push(vec![0.0; t.numel()]),
        });
        if !any {
            return Err(Error::Usage(
                "no parameter has a gradient; run backward before stepping".into(),
            ));
        }
        let (grad_norm, _) = clip_global_norm(&mut grads, self.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {}", grad_norm)));
        }
        self.step += 1;
        let step = self.step;
        let wd = self.weight_decay;
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("model", &mut |_, t| {
            adamw_update(&mut t.data, &grads[i], &mut ms[i], &mut vs[i], step, lr, wd);
            t.grad = None;
            i += 1;
        });
        Ok(StepStats { lr, grad_norm })
    }
}

/// Newline-delimited JSON metrics stream.
pub struct MetricsWriter {
    out: Option<std::io::BufWriter<std::fs::File>>,
}

impl MetricsWriter {
    pub fn create(path: Option<&Path>) -> Result<Self> {
        let out = match path {
            Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
            None => None,
        };
        Ok(MetricsWriter { out })
    }

    pub fn emit(&mut self, record: &serde_json::Value) -> Result<()> {
        if let Some(w) = &mut self.out {
            use std::io::Write;
            serde_json::to_writer(&mut *w, record)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.out {
            use std::io::Write;
            w.flush()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_recon: f64,
    pub loss_contrast: f64,
    pub loss_total: f64,
    pub val_loss: Option<f64>,
    pub r2: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RpntConfig,
    pub hyper: Hyper,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub final_r2: Option<f64>,
    pub final_r2_per_dim: Option<Vec<f64>>,
    pub wall_ms: u128,
}

fn step_rng(seed: u64, purpose: u64, epoch: usize, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 56) | ((epoch as u64) << 28) | step as u64);
    rng
}

/// Flattened per-sequence view of a spike batch: every (trial, site) pair
/// becomes one `[T,N]` row with its site's coordinates.
pub struct SeqRows {
    /// `[R, T, N]`
    pub spikes: Tensor,
    /// `[R, T, 2]`
    pub velocity: Tensor,
    pub coords: Vec<Vec<f64>>,
}

pub fn flatten_rows(sb: &SpikeBatch) -> SeqRows {
    let (c, s, t, n) = (sb.n_trials(), sb.n_sites(), sb.t_bins(), sb.n_neurons());
    let spikes = sb.spikes.clone().reshaped(vec![c * s, t, n]).unwrap();
    let velocity = sb.velocity.clone().reshaped(vec![c * s, t, 2]).unwrap();
    let coords = (0..c * s).map(|i| sb.positions[i % s].clone()).collect();
    SeqRows { spikes, velocity, coords }
}

/// Rows of the held-out session restricted to a trial range.
pub fn heldout_rows(ds: &Dataset, range: std::ops::Range<usize>) -> SeqRows {
    let sb = &ds.heldout;
    let (t, n) = (sb.t_bins(), sb.n_neurons());
    let len = range.len();
    let spikes = Tensor::new(
        vec![len, t, n],
        sb.spikes.data[range.start * t * n..range.end * t * n].to_vec(),
    )
    .unwrap();
    let velocity = Tensor::new(
        vec![len, t, 2],
        sb.velocity.data[range.start * t * 2..range.end * t * 2].to_vec(),
    )
    .unwrap();
    let coords = (0..len).map(|_| sb.positions[0].clone()).collect();
    SeqRows { spikes, velocity, coords }
}

fn gather_rows(rows: &SeqRows, idx: &[usize]) -> SeqRows {
    let t = rows.spikes.shape[1];
    let n = rows.spikes.shape[2];
    let mut spikes = Tensor::zeros(&[idx.len(), t, n]);
    let mut velocity = Tensor::zeros(&[idx.len(), t, 2]);
    let mut coords = Vec::with_capacity(idx.len());
    for (o, &r) in idx.iter().enumerate() {
        spikes.data[o * t * n..(o + 1) * t * n]
            .copy_from_slice(&rows.spikes.data[r * t * n..(r + 1) * t * n]);
        velocity.data[o * t * 2..(o + 1) * t * 2]
            .copy_from_slice(&rows.velocity.data[r * t * 2..(r + 1) * t * 2]);
        coords.push(rows.coords[r].clone());
    }
    SeqRows { spikes, velocity, coords }
}

fn gather_trials(sb: &SpikeBatch, idx: &[usize]) -> (Tensor, Vec<Vec<f64>>) {
    let (s, t, n) = (sb.n_sites(), sb.t_bins(), sb.n_neurons());
    let stride = s * t * n;
    let mut spikes = Tensor::zeros(&[idx.len(), s, t, n]);
    for (o, &c) in idx.iter().enumerate() {
        spikes.data[o * stride..(o + 1) * stride]
            .copy_from_slice(&sb.spikes.data[c * stride..(c + 1) * stride]);
    }
    (spikes, sb.positions.clone())
}

fn shuffled(len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Masked-Poisson loss (plus optional contrastive term) for one batch.
/// Returns the breakdown and leaves gradients on the model.
fn pretrain_step_loss(
    model: &RpntModel,
    batch_spikes: &Tensor,
    coords: &[Vec<f64>],
    hyper: &Hyper,
    mask_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
    train: bool,
) -> Result<(Tape, BoundModel, crate::tape::TensorId, LossBreakdown)> {
    let multi_site = batch_spikes.shape.len() == 4;
    let (rows, t, n) = if multi_site {
        (
            batch_spikes.shape[0] * batch_spikes.shape[1],
            batch_spikes.shape[2],
            batch_spikes.shape[3],
        )
    } else {
        (batch_spikes.shape[0], batch_spikes.shape[1], batch_spikes.shape[2])
    };
    let spec = sample_mask(rows, t, n, hyper.mask, mask_rng)?;
    let flat = batch_spikes.clone().reshaped(vec![rows, t, n])?;
    let masked = apply_mask(&flat, &spec)?.reshaped(batch_spikes.shape.clone())?;

    let mut tape = Tape::new();
    let bm = model.bind(&mut tape);
    let mut ctx = ForwardCtx::new(train, model.config.dropout, dropout_rng);
    let out = model.forward_pretrain(&mut tape, &bm, &masked, coords, &mut ctx)?;
    let visible = spec.mask.clone().reshaped(batch_spikes.shape.clone())?;
    let recon = poisson_loss_graph(&mut tape, out.rates, batch_spikes, &visible)?;
    let mu = hyper.contrastive_weight;
    let (total, contrast_val) = if mu > 0.0 {
        let con = contrastive_loss_graph(&mut tape, out.encoded, hyper.tau)?;
        let scaled = tape.scale(con, mu);
        let total = tape.add(recon, scaled)?;
        (total, tape.scalar_value(con)?)
    } else {
        (recon, 0.0)
    };
    let breakdown = LossBreakdown {
        recon: tape.scalar_value(recon)?,
        contrast: contrast_val,
        total: tape.scalar_value(total)?,
        masked_count: spec.masked_count(),
        mu,
    };
    Ok((tape, bm, total, breakdown))
}

/// Self-supervised pretraining with per-epoch validation and early-stopping
/// checkpoint selection. Returns the best-validation model.
pub fn pretrain(
    mut model: RpntModel,
    dataset: &Dataset,
    hyper: &Hyper,
    out_dir: Option<&Path>,
) -> Result<(RpntModel, RunRecord)> {
    let start = Instant::now();
    let multi_site = model.config.n_spatial_layers > 0 || hyper.contrastive_weight > 0.0;
    let train_sb = dataset
        .pretrain
        .get("train")
        .ok_or_else(|| Error::Data("dataset has no train split".into()))?;
    let val_sb = dataset.pretrain.get("val");
    if hyper.contrastive_weight > 0.0 && train_sb.n_sites() < 2 {
        return Err(Error::Config(
            "contrastive weight must be 0 for single-site pretraining".into(),
        ));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut metrics =
        MetricsWriter::create(out_dir.map(|d| d.join("pretrain_metrics.ndjson")).as_deref())?;

    let flat_rows = if multi_site { None } else { Some(flatten_rows(train_sb)) };
    let n_items = if multi_site { train_sb.n_trials() } else { flat_rows.as_ref().unwrap().spikes.shape[0] };
    let steps_per_epoch = n_items.div_ceil(hyper.batch_size);
    let schedule = LrSchedule {
        peak: hyper.lr,
        warmup_steps: hyper.warmup_epochs * steps_per_epoch,
        total_steps: hyper.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(&model, schedule, hyper.weight_decay, hyper.grad_clip);

    let mut record = RunRecord {
        config: model.config.clone(),
        hyper: hyper.clone(),
        seed: hyper.seed,
        epochs: Vec::new(),
        best_epoch: None,
        checkpoint: None,
        final_r2: None,
        final_r2_per_dim: None,
        wall_ms: 0,
    };
    let mut best_val = f64::INFINITY;
    let mut best_model = model.clone();
    let last_path = out_dir.map(|d| d.join("last.rpnt"));
    let best_path = out_dir.map(|d| d.join("best.rpnt"));

    for epoch in 0..hyper.epochs {
        let mut order_rng = step_rng(hyper.seed, 1, epoch, 0);
        let order = shuffled(n_items, &mut order_rng);
        let mut sum = LossBreakdown { recon: 0.0, contrast: 0.0, total: 0.0, masked_count: 0, mu: hyper.contrastive_weight };
        let mut last_stats = StepStats { lr: 0.0, grad_norm: 0.0 };
        for (step, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let (batch, coords) = if multi_site {
                gather_trials(train_sb, chunk)
            } else {
                let rows = gather_rows(flat_rows.as_ref().unwrap(), chunk);
                (rows.spikes, rows.coords)
            };
            let mut mask_rng = step_rng(hyper.seed, 2, epoch, step);
            let mut drop_rng = step_rng(hyper.seed, 3, epoch, step);
            let result = pretrain_step_loss(
                &model, &batch, &coords, hyper, &mut mask_rng, &mut drop_rng, true,
            )
            .and_then(|(mut tape, bm, total, breakdown)| {
                if !breakdown.total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "loss became {} at epoch {} step {}",
                        breakdown.total, epoch, step
                    )));
                }
                tape.backward(total)?;
                bm.absorb_grads(&tape, &mut model);
                Ok(breakdown)
            })
            .and_then(|breakdown| {
                let stats = opt.apply(&mut model)?;
                Ok((breakdown, stats))
            });
            let (breakdown, stats) = match result {
                Ok(r) => r,
                Err(e) => {
                    // abort with the last-good checkpoint still on disk
                    if let (Some(best), Some(dir)) = (&best_path, out_dir) {
                        let _ = checkpoint::save(&best_model, best);
                        let _ = dir;
                    }
                    return Err(Error::Numeric(format!(
                        "pretraining aborted at epoch {} step {}: {} (last good checkpoint: {})",
                        epoch,
                        step,
                        e,
                        best_path.as_deref().map(|p| p.display().to_string()).unwrap_or_else(|| "in memory".into())
                    )));
                }
            };
            sum.recon += breakdown.recon;
            sum.contrast += breakdown.contrast;
            sum.total += breakdown.total;
            sum.masked_count += breakdown.masked_count;
            metrics.emit(&serde_json::json!({
                "epoch": epoch,
                "step": step,
                "loss_recon": breakdown.recon,
                "loss_contrast": breakdown.contrast,
                "loss_total": breakdown.total,
                "lr": stats.lr,
                "grad_norm": stats.grad_norm,
            }))?;
            last_stats = stats;
        }

        // deterministic validation: same masks every epoch
        let val_loss = match val_sb {
            Some(sb) => {
                let mut total = 0.0;
                let mut batches = 0.0f64;
                let items = if multi_site { sb.n_trials() } else { sb.n_trials() * sb.n_sites() };
                let val_rows = if multi_site { None } else { Some(flatten_rows(sb)) };
                let idx: Vec<usize> = (0..items).collect();
                for (step, chunk) in idx.chunks(hyper.batch_size).enumerate() {
                    let (batch, coords) = if multi_site {
                        gather_trials(sb, chunk)
                    } else {
                        let rows = gather_rows(val_rows.as_ref().unwrap(), chunk);
                        (rows.spikes, rows.coords)
                    };
                    let mut mask_rng = step_rng(hyper.seed, 4, 0, step);
                    let mut drop_rng = step_rng(hyper.seed, 5, 0, step);
                    let (_t, _b, _id, breakdown) = pretrain_step_loss(
                        &model, &batch, &coords, hyper, &mut mask_rng, &mut drop_rng, false,
                    )?;
                    total += breakdown.total;
                    batches += 1.0;
                }
                Some(total / batches.max(1.0))
            }
            None => None,
        };

        let steps = steps_per_epoch as f64;
        record.epochs.push(EpochRecord {
            epoch,
            loss_recon: sum.recon / steps,
            loss_contrast: sum.contrast / steps,
            loss_total: sum.total / steps,
            val_loss,
            r2: None,
            lr: last_stats.lr,
            grad_norm: last_stats.grad_norm,
        });

        if let Some(p) = &last_path {
            checkpoint::save(&model, p)?;
        }
        let improved = match val_loss {
            Some(v) => v < best_val,
            None => true, // no validation split: keep the latest
        };
        if improved {
            if let Some(v) = val_loss {
                best_val = v;
            }
            best_model = model.clone();
            record.best_epoch = Some(epoch);
            if let Some(p) = &best_path {
                checkpoint::save(&best_model, p)?;
            }
        }
    }
    metrics.flush()?;
    record.checkpoint = best_path;
    record.wall_ms = start.elapsed().as_millis();
    Ok((best_model, record))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// All available downstream training data (pretrain sites + held-out
    /// train slice).
    FullSft,
    /// Single downstream session: the held-out site's train slice only.
    FsSft,
    /// Same data as few-shot, from randomly initialized weights.
    Scratch,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_sft" | "full" => Ok(FinetuneMode::FullSft),
            "fs_sft" | "fs" => Ok(FinetuneMode::FsSft),
            "scratch" => Ok(FinetuneMode::Scratch),
            other => Err(Error::Config(format!(
                "unknown finetune mode '{}' (expected full_sft|fs_sft|scratch)",
                other
            ))),
        }
    }
}

/// Supervised velocity finetuning. The caller passes the initial model
/// (pretrained for full/fs modes, freshly initialized for scratch); a task
/// head is attached here. Metrics are reported from the final epoch.
pub fn finetune(
    mut model: RpntModel,
    mode: FinetuneMode,
    dataset: &Dataset,
    train_ratio: f64,
    hyper: &Hyper,
    out_dir: Option<&Path>,
) -> Result<(RpntModel, RunRecord)> {
    let start = Instant::now();
    let mut head_rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0xbead);
    model.attach_task_head(&mut head_rng);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut metrics =
        MetricsWriter::create(out_dir.map(|d| d.join("finetune_metrics.ndjson")).as_deref())?;

    let (train_range, _val_range, test_range) = dataset.heldout_split(train_ratio)?;
    let ho_train = heldout_rows(dataset, train_range);
    let test = heldout_rows(dataset, test_range);
    let train_rows = match mode {
        FinetuneMode::FsSft | FinetuneMode::Scratch => ho_train,
        FinetuneMode::FullSft => {
            let mut base = flatten_rows(
                dataset
                    .pretrain
                    .get("train")
                    .ok_or_else(|| Error::Data("dataset has no train split".into()))?,
            );
            let t = base.spikes.shape[1];
            let n = base.spikes.shape[2];
            let r0 = base.spikes.shape[0];
            let r1 = ho_train.spikes.shape[0];
            let mut spikes = Tensor::zeros(&[r0 + r1, t, n]);
            spikes.data[..r0 * t * n].copy_from_slice(&base.spikes.data);
            spikes.data[r0 * t * n..].copy_from_slice(&ho_train.spikes.data);
            let mut velocity = Tensor::zeros(&[r0 + r1, t, 2]);
            velocity.data[..r0 * t * 2].copy_from_slice(&base.velocity.data);
            velocity.data[r0 * t * 2..].copy_from_slice(&ho_train.velocity.data);
            base.coords.extend(ho_train.coords);
            SeqRows { spikes, velocity, coords: base.coords }
        }
    };

    let n_rows = train_rows.spikes.shape[0];
    if n_rows == 0 {
        return Err(Error::Config("finetune train split is empty".into()));
    }
    let steps_per_epoch = n_rows.div_ceil(hyper.batch_size);
    let schedule = LrSchedule {
        peak: hyper.lr,
        warmup_steps: hyper.warmup_epochs * steps_per_epoch,
        total_steps: hyper.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(&model, schedule, hyper.weight_decay, hyper.grad_clip);
    let mut record = RunRecord {
        config: model.config.clone(),
        hyper: hyper.clone(),
        seed: hyper.seed,
        epochs: Vec::new(),
        best_epoch: None,
        checkpoint: None,
        final_r2: None,
        final_r2_per_dim: None,
        wall_ms: 0,
    };

    for epoch in 0..hyper.epochs {
        let mut order_rng = step_rng(hyper.seed, 11, epoch, 0);
        let order = shuffled(n_rows, &mut order_rng);
        let mut loss_sum = 0.0;
        let mut last_stats = StepStats { lr: 0.0, grad_norm: 0.0 };
        for (step, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let batch = gather_rows(&train_rows, chunk);
            let mut drop_rng = step_rng(hyper.seed, 13, epoch, step);
            let mut tape = Tape::new();
            let bm = model.bind(&mut tape);
            let mut ctx = ForwardCtx::new(true, model.config.dropout, &mut drop_rng);
            let pred = model.forward_decode(&mut tape, &bm, &batch.spikes, &batch.coords, &mut ctx)?;
            let loss = mse_loss_graph(&mut tape, pred, &batch.velocity)?;
            let loss_val = tape.scalar_value(loss)?;
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "finetune loss became {} at epoch {} step {}",
                    loss_val, epoch, step
                )));
            }
            tape.backward(loss)?;
            bm.absorb_grads(&tape, &mut model);
            let stats = opt.apply(&mut model)?;
            loss_sum += loss_val;
            metrics.emit(&serde_json::json!({
                "epoch": epoch,
                "step": step,
                "loss_total": loss_val,
                "lr": stats.lr,
                "grad_norm": stats.grad_norm,
            }))?;
            last_stats = stats;
        }
        record.epochs.push(EpochRecord {
            epoch,
            loss_recon: loss_sum / steps_per_epoch as f64,
            loss_contrast: 0.0,
            loss_total: loss_sum / steps_per_epoch as f64,
            val_loss: None,
            r2: None,
            lr: last_stats.lr,
            grad_norm: last_stats.grad_norm,
        });
    }

    // final-epoch evaluation on the held-out test slice
    let (pred, truth) = evaluate_decode(&model, &test)?;
    let mut per_dim = Vec::with_capacity(2);
    for dim in 0..2 {
        let rows = pred.numel() / 2;
        let mut p = Tensor::zeros(&[rows, 1]);
        let mut y = Tensor::zeros(&[rows, 1]);
        for r in 0..rows {
            p.data[r] = pred.data[r * 2 + dim];
            y.data[r] = truth.data[r * 2 + dim];
        }
        per_dim.push(r2_score(&p, &y)?);
    }
    let r2 = r2_score(&pred, &truth)?;
    if let Some(last) = record.epochs.last_mut() {
        last.r2 = Some(r2);
    }
    record.final_r2 = Some(r2);
    record.final_r2_per_dim = Some(per_dim);
    if let Some(dir) = out_dir {
        let p = dir.join("finetuned.rpnt");
        checkpoint::save(&model, &p)?;
        record.checkpoint = Some(p);
    }
    metrics.flush()?;
    record.wall_ms = start.elapsed().as_millis();
    Ok((model, record))
}

/// Batched evaluation forward; returns (predictions, targets) as `[rows*T, 2]`.
pub fn evaluate_decode(model: &RpntModel, rows: &SeqRows) -> Result<(Tensor, Tensor)> {
    let n_rows = rows.spikes.shape[0];
    let t = rows.spikes.shape[1];
    let mut pred = Tensor::zeros(&[n_rows * t, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx: Vec<usize> = (0..n_rows).collect();
    for chunk in idx.chunks(32) {
        let batch = gather_rows(rows, chunk);
        let mut tape = Tape::new();
        let bm = model.bind(&mut tape);
        let mut ctx = ForwardCtx::new(false, 0.0, &mut rng);
        let out = model.forward_decode(&mut tape, &bm, &batch.spikes, &batch.coords, &mut ctx)?;
        let data = tape.data(out);
        for (o, &r) in chunk.iter().enumerate() {
            pred.data[r * t * 2..(r + 1) * t * 2]
                .copy_from_slice(&data[o * t * 2..(o + 1) * t * 2]);
        }
    }
    let truth = rows.velocity.clone().reshaped(vec![n_rows * t, 2])?;
    Ok((pred, truth))
}

/// Decode the held-out test slice with a finetuned model and score it.
pub fn test_r2(model: &RpntModel, ds: &Dataset, train_ratio: f64) -> Result<f64> {
    let (_tr, _va, te) = ds.heldout_split(train_ratio)?;
    let rows = heldout_rows(ds, te);
    let (pred, truth) = evaluate_decode(model, &rows)?;
    r2_score(&pred, &truth)
}

// ── sweeps ───────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    TrainRatio,
    KernelSize,
    Layers,
    Heads,
    PeKind,
    AttentionKind,
    Masking,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_ratio" => Ok(SweepAxis::TrainRatio),
            "kernel_size" | "kernel" => Ok(SweepAxis::KernelSize),
            "layers" => Ok(SweepAxis::Layers),
            "heads" => Ok(SweepAxis::Heads),
            "pe_kind" | "pe" => Ok(SweepAxis::PeKind),
            "attention_kind" | "attention" => Ok(SweepAxis::AttentionKind),
            "masking" => Ok(SweepAxis::Masking),
            other => Err(Error::Config(format!("unknown sweep axis '{}'", other))),
        }
    }
}

/// Grids mirroring the reported ablation tables.
pub fn default_grid(axis: SweepAxis) -> Vec<String> {
    match axis {
        SweepAxis::TrainRatio => ["1%", "5%", "10%", "20%", "30%", "40%", "50%"]
            .map(String::from)
            .to_vec(),
        SweepAxis::KernelSize => ["3x3", "7x7", "9x9", "11x11", "15x15"].map(String::from).to_vec(),
        SweepAxis::Layers => ["2", "3", "4", "5", "6"].map(String::from).to_vec(),
        SweepAxis::Heads => ["4", "8", "16", "32", "64"].map(String::from).to_vec(),
        SweepAxis::PeKind => ["sinusoidal", "rope", "learnable", "mrope"].map(String::from).to_vec(),
        SweepAxis::AttentionKind => ["standard", "context"].map(String::from).to_vec(),
        SweepAxis::Masking => [
            "fixed:0.25,0.25",
            "fixed:0.5,0.5",
            "fixed:0.75,0.75",
            "fixed:0.25,0.75",
            "fixed:0.75,0.25",
            "uniform",
        ]
        .map(String::from)
        .to_vec(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub r2: Option<f64>,
    pub pretrain_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

fn parse_ratio(s: &str) -> Result<f64> {
    let t = s.trim();
    if let Some(p) = t.strip_suffix('%') {
        let v: f64 = p.parse().map_err(|_| Error::Config(format!("bad ratio '{}'", s)))?;
        return Ok(v / 100.0);
    }
    t.parse().map_err(|_| Error::Config(format!("bad ratio '{}'", s)))
}

fn parse_kernel(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() == 1 {
        let k: usize = parts[0].parse().map_err(|_| Error::Config(format!("bad kernel '{}'", s)))?;
        return Ok((k, k));
    }
    if parts.len() == 2 {
        let a = parts[0].parse().map_err(|_| Error::Config(format!("bad kernel '{}'", s)))?;
        let b = parts[1].parse().map_err(|_| Error::Config(format!("bad kernel '{}'", s)))?;
        return Ok((a, b));
    }
    Err(Error::Config(format!("bad kernel '{}'", s)))
}

/// One short pretrain + few-shot finetune per grid point (a single pretrain
/// shared across points for the train-ratio axis). Per-point failures are
/// recorded and the sweep continues.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    axis: SweepAxis,
    grid: &[String],
    dataset: &Dataset,
    base_config: &RpntConfig,
    pre_hyper: &Hyper,
    ft_hyper: &Hyper,
    ft_ratio: f64,
    out_dir: Option<&Path>,
) -> Result<SweepTable> {
    let mut points = Vec::with_capacity(grid.len());

    let run_point = |config: RpntConfig,
                     pre: &Hyper,
                     ratio: f64,
                     pretrained: Option<&RpntModel>|
     -> Result<(f64, f64)> {
        let (model, prec) = match pretrained {
            Some(m) => (m.clone(), None),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(pre.seed);
                let model = RpntModel::new(config, &mut rng)?;
                let (m, rec) = pretrain(model, dataset, pre, None)?;
                let loss = rec.epochs.last().map(|e| e.loss_total).unwrap_or(f64::NAN);
                (m, Some(loss))
            }
        };
        let (_m, rec) = finetune(model, FinetuneMode::FsSft, dataset, ratio, ft_hyper, None)?;
        Ok((rec.final_r2.unwrap_or(f64::NAN), prec.unwrap_or(f64::NAN)))
    };

    if axis == SweepAxis::TrainRatio {
        // one pretrain, many finetunes
        let mut rng = ChaCha8Rng::seed_from_u64(pre_hyper.seed);
        let model = RpntModel::new(base_config.clone(), &mut rng)?;
        let (pretrained, prec) = pretrain(model, dataset, pre_hyper, None)?;
        let loss = prec.epochs.last().map(|e| e.loss_total);
        for label in grid {
            let result = parse_ratio(label)
                .and_then(|r| run_point(base_config.clone(), pre_hyper, r, Some(&pretrained)));
            points.push(match result {
                Ok((r2, _)) => SweepPoint {
                    label: label.clone(),
                    r2: Some(r2),
                    pretrain_loss: loss,
                    error: None,
                },
                Err(e) => SweepPoint {
                    label: label.clone(),
                    r2: None,
                    pretrain_loss: loss,
                    error: Some(e.to_string()),
                },
            });
        }
    } else {
        for label in grid {
            let configured: Result<RpntConfig> = (|| {
                let mut cfg = base_config.clone();
                match axis {
                    SweepAxis::KernelSize => cfg.kernel = parse_kernel(label)?,
                    SweepAxis::Layers => {
                        cfg.n_temporal_layers = label
                            .parse()
                            .map_err(|_| Error::Config(format!("bad layer count '{}'", label)))?;
                    }
                    SweepAxis::Heads => {
                        cfg.n_heads = label
                            .parse()
                            .map_err(|_| Error::Config(format!("bad head count '{}'", label)))?;
                    }
                    SweepAxis::PeKind => cfg.pe = label.parse::<PeKind>()?,
                    SweepAxis::AttentionKind => cfg.attention = label.parse()?,
                    SweepAxis::Masking | SweepAxis::TrainRatio => {}
                }
                cfg.validate()?;
                Ok(cfg)
            })();
            let result = configured.and_then(|cfg| {
                let mut pre = pre_hyper.clone();
                if axis == SweepAxis::Masking {
                    pre.mask = label.parse()?;
                }
                run_point(cfg, &pre, ft_ratio, None)
            });
            points.push(match result {
                Ok((r2, loss)) => SweepPoint {
                    label: label.clone(),
                    r2: Some(r2),
                    pretrain_loss: Some(loss),
                    error: None,
                },
                Err(e) => SweepPoint {
                    label: label.clone(),
                    r2: None,
                    pretrain_loss: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    let table = SweepTable { axis, points };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let name = format!("sweep_{}.json", serde_json::to_string(&axis)?.trim_matches('"'));
        std::fs::write(dir.join(name), serde_json::to_vec_pretty(&table)?)?;
    }
    Ok(table)
}

// ── whole-model gradient check ───────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradReport {
    /// Max relative error per parameter tensor, visitor order.
    pub per_param: Vec<(String, f64)>,
    pub worst: (String, f64),
}

impl GradReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.worst.1 <= threshold
    }
}

/// Deterministic pretrain-loss fixture for gradient checking: fixed batch,
/// fixed mask, dropout disabled.
pub struct GradFixture {
    pub batch: Tensor,
    pub coords: Vec<Vec<f64>>,
    pub visible: Tensor,
    pub mu: f64,
    pub tau: f64,
}

impl GradFixture {
    /// Tiny multi-site batch: `[B=4, S=2, T=6, N=4]` with a frozen mask. A
    /// few diverse trials keep every parameter coordinate measurably coupled
    /// to the loss (single-trial fixtures leave some gradients at the
    /// finite-difference noise floor through accidental cancellation).
    pub fn tiny(seed: u64) -> GradFixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, s, t, n) = (4, 2, 6, 4);
        let mut batch = Tensor::zeros(&[b, s, t, n]);
        for v in batch.data.iter_mut() {
            *v = rng.gen_range(0..5) as f64;
        }
        let spec = sample_mask(b * s, t, n, MaskStrategy::UniformRandom, &mut rng).unwrap();
        let visible = spec.mask.reshaped(vec![b, s, t, n]).unwrap();
        GradFixture {
            batch,
            coords: vec![vec![0.0, 1.0], vec![2.0, -1.0]],
            visible,
            mu: 0.1,
            tau: 0.1,
        }
    }

    pub fn loss(&self, model: &RpntModel) -> Result<f64> {
        let masked_data: Vec<f64> = self
            .batch
            .data
            .iter()
            .zip(&self.visible.data)
            .map(|(x, m)| if *m == 0.0 { 0.0 } else { *x })
            .collect();
        let masked = Tensor::new(self.batch.shape.clone(), masked_data)?;
        let mut tape = Tape::new();
        let bm = model.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::new(false, 0.0, &mut rng);
        let out = model.forward_pretrain(&mut tape, &bm, &masked, &self.coords, &mut ctx)?;
        let recon = poisson_loss_graph(&mut tape, out.rates, &self.batch, &self.visible)?;
        if self.mu > 0.0 && self.batch.shape.len() == 4 && self.batch.shape[1] >= 2 {
            let con = contrastive_loss_graph(&mut tape, out.encoded, self.tau)?;
            let scaled = tape.scale(con, self.mu);
            let total = tape.add(recon, scaled)?;
            tape.scalar_value(total)
        } else {
            tape.scalar_value(recon)
        }
    }

    fn loss_with_grads(&self, model: &mut RpntModel) -> Result<f64> {
        let masked_data: Vec<f64> = self
            .batch
            .data
            .iter()
            .zip(&self.visible.data)
            .map(|(x, m)| if *m == 0.0 { 0.0 } else { *x })
            .collect();
        let masked = Tensor::new(self.batch.shape.clone(), masked_data)?;
        let mut tape = Tape::new();
        let bm = model.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::new(false, 0.0, &mut rng);
        let out = model.forward_pretrain(&mut tape, &bm, &masked, &self.coords, &mut ctx)?;
        let recon = poisson_loss_graph(&mut tape, out.rates, &self.batch, &self.visible)?;
        let total = if self.mu > 0.0 && self.batch.shape.len() == 4 && self.batch.shape[1] >= 2 {
            let con = contrastive_loss_graph(&mut tape, out.encoded, self.tau)?;
            let scaled = tape.scale(con, self.mu);
            tape.add(recon, scaled)?
        } else {
            recon
        };
        let value = tape.scalar_value(total)?;
        tape.backward(total)?;
        bm.absorb_grads(&tape, model);
        Ok(value)
    }
}

/// Reference gradient-check setup: the tiny configuration with parameters
/// jittered per tensor class (score and kernel-generation paths harder), so
/// every coordinate's gradient sits well above the finite-difference noise
/// floor. Shared by the CLI command and the acceptance suite.
pub fn gradcheck_reference() -> (RpntModel, GradFixture) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = RpntModel::new(RpntConfig::tiny(), &mut rng).expect("static config");
    model.visit_mut("model", &mut |name, t| {
        let j = if name.contains(".wq.") || name.contains(".wk.") {
            1.0
        } else if name.contains("ctx_") || name.contains("pool_query") {
            0.6
        } else if name.contains("kernel_gen") {
            1.2
        } else {
            0.3
        };
        for v in t.data.iter_mut() {
            *v += rng.gen_range(-j..j);
        }
    });
    let mut fixture = GradFixture::tiny(2077);
    fixture.mu = 0.5;
    (model, fixture)
}

/// Central-difference check of every parameter against the tape gradients.
pub fn gradcheck_model(model: &mut RpntModel, fixture: &GradFixture, h: f64) -> Result<GradReport> {
    // analytic gradients
    let _ = fixture.loss_with_grads(model)?;
    let mut names = Vec::new();
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    model.visit("model", &mut |name, t| {
        names.push(name.to_string());
        analytic.push(t.grad.clone().unwrap_or_else(|| vec![0.0; t.numel()]));
    });

    let n_tensors = names.len();
    let mut per_param = Vec::with_capacity(n_tensors);
    for ti in 0..n_tensors {
        let numel = analytic[ti].len();
        let mut max_err = 0.0f64;
        for ci in 0..numel {
            let bump = |model: &mut RpntModel, delta: f64| {
                let mut k = 0;
                model.visit_mut("model", &mut |_, t| {
                    if k == ti {
                        t.data[ci] += delta;
                    }
                    k += 1;
                });
            };
            bump(model, h);
            let fp = fixture.loss(model)?;
            bump(model, -2.0 * h);
            let fm = fixture.loss(model)?;
            bump(model, h);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][ci];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            max_err = max_err.max(err);
        }
        per_param.push((names[ti].clone(), max_err));
    }
    let worst = per_param
        .iter()
        .cloned()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or(("<none>".into(), 0.0));
    Ok(GradReport { per_param, worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, load_dataset, SyntheticConfig};
    use approx::assert_abs_diff_eq;

    fn tiny_dataset(dir: &Path, seed: u64) -> Dataset {
        let mut cfg = SyntheticConfig::desk(3, 4, 16, seed);
        cfg.drift_sigma = 0.01;
        build_dataset(&cfg, 2, 4, 1, (0.8, 0.1, 0.1), (0.2, 0.3, 0.5), dir).unwrap();
        load_dataset(dir).unwrap()
    }

    fn tiny_hyper(epochs: usize) -> Hyper {
        Hyper {
            lr: 3e-3,
            epochs,
            warmup_epochs: 1,
            batch_size: 8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            contrastive_weight: 0.0,
            tau: 0.1,
            mask: MaskStrategy::UniformRandom,
            seed: 7,
        }
    }

    #[test]
    fn lr_schedule_matches_closed_form() {
        let s = LrSchedule { peak: 2.0, warmup_steps: 10, total_steps: 110 };
        assert_eq!(s.at(0), 0.0);
        assert_abs_diff_eq!(s.at(5), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.at(10), 2.0, epsilon = 1e-15);
        // cosine tail: halfway -> peak/2, end -> 0
        assert_abs_diff_eq!(s.at(60), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.at(110), 0.0, epsilon = 1e-15);
        for step in 0..=110 {
            let expect = if step < 10 {
                2.0 * step as f64 / 10.0
            } else {
                let p = (step - 10) as f64 / 100.0;
                2.0 * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
            };
            assert_abs_diff_eq!(s.at(step), expect, epsilon = 1e-12);
            assert!(s.at(step) >= 0.0);
        }
    }

    #[test]
    fn clip_preserves_direction_and_bounds_norm() {
        let mut g = vec![vec![3.0, 4.0], vec![0.0, 12.0]];
        let (norm, scale) = clip_global_norm(&mut g, 1.0);
        assert_abs_diff_eq!(norm, 13.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scale, 1.0 / 13.0, epsilon = 1e-15);
        let clipped: f64 = g.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        assert!(clipped <= 1.0 + 1e-9);
        // direction preserved
        assert_abs_diff_eq!(g[0][0] / g[0][1], 3.0 / 4.0, epsilon = 1e-12);
        // below the bound: untouched
        let mut small = vec![vec![0.1, 0.2]];
        let (_, scale) = clip_global_norm(&mut small, 1.0);
        assert_eq!(scale, 1.0);
        assert_eq!(small[0], vec![0.1, 0.2]);
    }

    #[test]
    fn adamw_matches_hand_trace_on_quadratic() {
        // two parameters, loss = 0.5*(p0^2 + 10*p1^2), grads = (p0, 10 p1);
        // scalar reference trace with bias correction and decoupled decay
        let lr = 0.1;
        let wd = 0.01;
        let mut p = [1.0, -2.0];
        let mut m = [0.0, 0.0];
        let mut v = [0.0, 0.0];
        let mut p_ref = p;
        let mut m_ref = m;
        let mut v_ref = v;
        for step in 1..=5 {
            let g = [p[0], 10.0 * p[1]];
            adamw_update(&mut p, &g, &mut m, &mut v, step, lr, wd);

            let g_ref = [p_ref[0], 10.0 * p_ref[1]];
            for i in 0..2 {
                m_ref[i] = 0.9 * m_ref[i] + (1.0 - 0.9) * g_ref[i];
                v_ref[i] = 0.999 * v_ref[i] + (1.0 - 0.999) * g_ref[i] * g_ref[i];
                let mhat = m_ref[i] / (1.0 - 0.9f64.powi(step as i32));
                let vhat = v_ref[i] / (1.0 - 0.999f64.powi(step as i32));
                p_ref[i] -= lr * (mhat / (vhat.sqrt() + 1e-8) + wd * p_ref[i]);
            }
            assert_eq!(p, p_ref, "trace diverged at step {step}");
            assert!(v[0] >= 0.0 && v[1] >= 0.0);
        }
    }

    #[test]
    fn pretrain_loss_decreases_on_fixed_tiny_batch() {
        // overfit smoke test: ~200 steps over a small fixed set
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut cfg = RpntConfig::tiny();
        cfg.n_spatial_layers = 0;
        let model = RpntModel::new(cfg, &mut rng).unwrap();
        let hyper = tiny_hyper(50); // 24 rows, batch 8 -> 3 steps/epoch = 150 steps
        let (_m, rec) = pretrain(model, &ds, &hyper, None).unwrap();
        let first: f64 = rec.epochs[..3].iter().map(|e| e.loss_total).sum::<f64>() / 3.0;
        let last: f64 = rec.epochs[rec.epochs.len() - 3..]
            .iter()
            .map(|e| e.loss_total)
            .sum::<f64>()
            / 3.0;
        assert!(
            last < first,
            "smoothed loss did not decrease: first {first} last {last}"
        );
    }

    #[test]
    fn single_site_config_skips_contrastive() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = RpntConfig::tiny();
        cfg.n_spatial_layers = 0;
        let model = RpntModel::new(cfg, &mut rng).unwrap();
        let mut hyper = tiny_hyper(2);
        hyper.contrastive_weight = 0.0;
        let (_m, rec) = pretrain(model, &ds, &hyper, None).unwrap();
        assert!(rec.epochs.iter().all(|e| e.loss_contrast == 0.0));
    }

    #[test]
    fn multi_site_pretrain_exercises_contrastive_and_spatial() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = RpntModel::new(RpntConfig::tiny(), &mut rng).unwrap(); // 1 spatial layer
        let mut hyper = tiny_hyper(2);
        hyper.contrastive_weight = 0.1;
        hyper.batch_size = 4;
        let (_m, rec) = pretrain(model, &ds, &hyper, None).unwrap();
        assert!(rec.epochs.iter().any(|e| e.loss_contrast != 0.0));
        // combined total equals recon + mu * contrast
        for e in &rec.epochs {
            assert_abs_diff_eq!(e.loss_total, e.loss_recon + 0.1 * e.loss_contrast, epsilon = 1e-9);
        }
    }

    #[test]
    fn same_seed_reproduces_the_run() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 6);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let mut cfg = RpntConfig::tiny();
            cfg.n_spatial_layers = 0;
            let model = RpntModel::new(cfg, &mut rng).unwrap();
            let (_m, rec) = pretrain(model, &ds, &tiny_hyper(3), None).unwrap();
            rec.epochs.iter().map(|e| e.loss_total.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_weights_abort_with_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = RpntConfig::tiny();
        cfg.n_spatial_layers = 0;
        let mut model = RpntModel::new(cfg, &mut rng).unwrap();
        model.embed.w.data[0] = f64::NAN;
        let err = pretrain(model, &ds, &tiny_hyper(2), None).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
        assert!(err.to_string().contains("epoch 0"), "{err}");
    }

    #[test]
    fn finetune_reports_r2_per_dim_and_average() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut cfg = RpntConfig::tiny();
        cfg.n_spatial_layers = 0;
        let model = RpntModel::new(cfg, &mut rng).unwrap();
        let mut hyper = tiny_hyper(2);
        hyper.batch_size = 2;
        let (_m, rec) = finetune(model, FinetuneMode::FsSft, &ds, 0.2, &hyper, None).unwrap();
        let per_dim = rec.final_r2_per_dim.unwrap();
        assert_eq!(per_dim.len(), 2);
        let avg = (per_dim[0] + per_dim[1]) / 2.0;
        assert_abs_diff_eq!(rec.final_r2.unwrap(), avg, epsilon = 1e-12);
    }

    #[test]
    fn scratch_reaches_high_r2_on_noiseless_linear_task() {
        // velocity linearly decodable from the inputs with no noise: the
        // least-squares ceiling is ~1 and scratch finetuning must get close
        let dir = tempfile::tempdir().unwrap();
        let mut ds = tiny_dataset(dir.path(), 9);
        // overwrite held-out spikes with an exact linear image of velocity
        let c = ds.heldout.n_trials();
        let t = ds.heldout.t_bins();
        let n = ds.heldout.n_neurons();
        let sq = 0.5f64.sqrt();
        let maps = [(1.0, 0.0), (0.0, 1.0), (sq, sq), (sq, -sq)];
        for ci in 0..c {
            for ti in 0..t {
                let vx = ds.heldout.velocity.data[(ci * t + ti) * 2];
                let vy = ds.heldout.velocity.data[(ci * t + ti) * 2 + 1];
                for ni in 0..n {
                    let (wx, wy) = maps[ni % 4];
                    ds.heldout.spikes.data[(ci * t + ti) * n + ni] = wx * vx + wy * vy;
                }
            }
        }
        // least-squares oracle on the test slice
        let (_tr, _va, te) = ds.heldout_split(0.5).unwrap();
        let rows = heldout_rows(&ds, te);
        let x2 = rows.spikes.clone().reshaped(vec![rows.spikes.shape[0] * t, n]).unwrap();
        let y2 = rows.velocity.clone().reshaped(vec![rows.spikes.shape[0] * t, 2]).unwrap();
        let dec = crate::oracle::LinearDecoder::fit(&x2, &y2, 1e-9).unwrap();
        let lsq_r2 = r2_score(&dec.predict(&x2).unwrap(), &y2).unwrap();
        assert!(lsq_r2 >= 0.99, "least-squares oracle r2 {lsq_r2}");

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cfg = RpntConfig::tiny();
        cfg.n_spatial_layers = 0;
        cfg.dropout = 0.0;
        let model = RpntModel::new(cfg, &mut rng).unwrap();
        let mut hyper = tiny_hyper(400);
        hyper.batch_size = 4;
        hyper.lr = 1e-2;
        hyper.warmup_epochs = 10;
        let (_m, rec) =
            finetune(model, FinetuneMode::Scratch, &ds, 0.5, &hyper, None).unwrap();
        let r2 = rec.final_r2.unwrap();
        assert!(r2 >= 0.95, "scratch r2 on noiseless linear task: {r2}");
        assert!(r2 <= lsq_r2 + 0.01);
    }

    #[test]
    fn sweep_grids_are_complete_and_failures_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset(dir.path(), 10);
        let mut cfg = RpntConfig::tiny();
        cfg.n_spatial_layers = 0;
        let pre = tiny_hyper(1);
        let ft = tiny_hyper(1);
        let grid = vec!["2".to_string(), "5".to_string()];
        let table = sweep(SweepAxis::Heads, &grid, &ds, &cfg, &pre, &ft, 0.2, None).unwrap();
        assert_eq!(table.points.len(), 2);
        assert!(table.points[0].r2.is_some()); // 2 heads divides d=12
        assert!(table.points[1].error.is_some()); // 5 heads does not
    }
}
