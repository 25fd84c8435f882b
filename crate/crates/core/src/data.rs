//! Synthetic multi-site spiking data: minimum-jerk reaches drive
//! cosine-tuned Poisson neurons with slow multiplicative gain drift. Also
//! spike binning, per-site standardization (split, neuron multi-sampling,
//! trial sampling), neuron-width resampling, and the on-disk dataset format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::softplus_scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReachModel {
    /// Fixed radial targets at k*2pi/n, amplitude jittered per trial.
    CenterOut { n_targets: usize },
    /// Continuously re-sampled target directions.
    RandomTarget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_sites: usize,
    /// Integer grid coordinates per site.
    pub site_coords: Vec<(i64, i64)>,
    pub neurons_per_site: Vec<usize>,
    pub trials_per_site: Vec<usize>,
    pub bin_ms: f64,
    pub window_s: f64,
    /// Std of the per-window log-gain random walk (0 disables drift).
    pub drift_sigma: f64,
    pub reach: ReachModel,
    /// Baseline firing rate draw range (Hz).
    pub baseline_hz: (f64, f64),
    /// Velocity gain draw range (Hz per unit speed).
    pub gain_hz: (f64, f64),
    /// Reach extent (same units as velocity integrals).
    pub reach_radius: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn desk(n_sites: usize, neurons: usize, trials: usize, seed: u64) -> Self {
        let site_coords = (0..n_sites).map(|i| ((i % 3) as i64, (i / 3) as i64 + 1)).collect();
        SyntheticConfig {
            n_sites,
            site_coords,
            neurons_per_site: vec![neurons; n_sites],
            trials_per_site: vec![trials; n_sites],
            bin_ms: 20.0,
            window_s: 1.0,
            drift_sigma: 0.02,
            reach: ReachModel::CenterOut { n_targets: 8 },
            baseline_hz: (5.0, 15.0),
            gain_hz: (0.4, 1.2),
            reach_radius: 8.0,
            seed,
        }
    }

    pub fn t_bins(&self) -> usize {
        (self.window_s * 1000.0 / self.bin_ms).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sites == 0
            || self.site_coords.len() != self.n_sites
            || self.neurons_per_site.len() != self.n_sites
            || self.trials_per_site.len() != self.n_sites
        {
            return Err(Error::Config("per-site vectors must match n_sites".into()));
        }
        if !(self.bin_ms > 0.0) || !(self.window_s > 0.0) {
            return Err(Error::Config("bin and window must be positive".into()));
        }
        if let ReachModel::CenterOut { n_targets } = self.reach {
            if n_targets == 0 {
                return Err(Error::Config("center-out needs at least one target".into()));
            }
        }
        Ok(())
    }
}

/// Ground truth retained for oracle decoding.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionTruth {
    /// Preferred direction per neuron (radians).
    pub theta: Vec<f64>,
    /// Baseline rate per neuron (Hz).
    pub baseline: Vec<f64>,
    /// Velocity gain per neuron (Hz per unit speed).
    pub gain_coef: Vec<f64>,
    /// Per-trial, per-neuron drift gains, row-major `[C, N]`.
    pub gains: Vec<f64>,
    /// Per-trial reach direction (radians).
    pub angle: Vec<f64>,
    /// Per-trial amplitude multiplier.
    pub amplitude: Vec<f64>,
}

impl SessionTruth {
    /// Restrict neurons to the given source columns (after width resampling).
    pub fn select_neurons(&self, cols: &[usize], n_trials: usize) -> SessionTruth {
        let n_old = self.theta.len();
        let mut gains = Vec::with_capacity(n_trials * cols.len());
        for c in 0..n_trials {
            for &j in cols {
                gains.push(self.gains[c * n_old + j]);
            }
        }
        SessionTruth {
            theta: cols.iter().map(|&j| self.theta[j]).collect(),
            baseline: cols.iter().map(|&j| self.baseline[j]).collect(),
            gain_coef: cols.iter().map(|&j| self.gain_coef[j]).collect(),
            gains,
            angle: self.angle.clone(),
            amplitude: self.amplitude.clone(),
        }
    }

    /// Restrict trials to the given indices.
    pub fn select_trials(&self, trials: &[usize]) -> SessionTruth {
        let n = self.theta.len();
        let mut gains = Vec::with_capacity(trials.len() * n);
        for &c in trials {
            gains.extend_from_slice(&self.gains[c * n..(c + 1) * n]);
        }
        SessionTruth {
            theta: self.theta.clone(),
            baseline: self.baseline.clone(),
            gain_coef: self.gain_coef.clone(),
            gains,
            angle: trials.iter().map(|&c| self.angle[c]).collect(),
            amplitude: trials.iter().map(|&c| self.amplitude[c]).collect(),
        }
    }
}

/// One generated recording site.
#[derive(Clone, Debug)]
pub struct SiteSession {
    pub coord: (i64, i64),
    /// Binned counts `[C, T, N]`.
    pub counts: Tensor,
    /// Behavior stream `[C, T, 2]`.
    pub velocity: Tensor,
    pub truth: SessionTruth,
}

/// Minimum-jerk speed profile between `t0` and `t0+dur`, scaled so the path
/// length equals `extent`.
pub fn min_jerk_velocity(t: f64, t0: f64, dur: f64, extent: f64) -> f64 {
    if t < t0 || t > t0 + dur {
        return 0.0;
    }
    let tau = (t - t0) / dur;
    extent / dur * (30.0 * tau * tau - 60.0 * tau * tau * tau + 30.0 * tau * tau * tau * tau)
}

const REACH_ONSET_S: f64 = 0.1;
const REACH_DURATION_S: f64 = 0.7;

fn trial_velocity(cfg: &SyntheticConfig, angle: f64, amplitude: f64) -> Vec<f64> {
    let t = cfg.t_bins();
    let dt = cfg.bin_ms / 1000.0;
    let mut v = vec![0.0; t * 2];
    for ti in 0..t {
        let time = (ti as f64 + 0.5) * dt;
        let speed =
            min_jerk_velocity(time, REACH_ONSET_S, REACH_DURATION_S, amplitude * cfg.reach_radius);
        v[ti * 2] = speed * angle.cos();
        v[ti * 2 + 1] = speed * angle.sin();
    }
    v
}

/// Instantaneous rate of one neuron (Hz): softplus(b + a*(cos,sin)dot v) * g.
fn neuron_rate(b: f64, a: f64, theta: f64, vx: f64, vy: f64, gain: f64) -> f64 {
    softplus_scalar(b + a * (theta.cos() * vx + theta.sin() * vy)) * gain
}

fn trial_rng(seed: u64, site: usize, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((site as u64 + 1) << 32) | (trial as u64 + 1));
    rng
}

fn site_rng(seed: u64, site: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(site as u64 + 1);
    rng
}

/// Spike times of one trial, per neuron (seconds within the window).
/// Piecewise-constant rates per bin; counts are Poisson(rate*dt) with times
/// placed uniformly inside the bin.
pub fn generate_trial_spike_times(
    cfg: &SyntheticConfig,
    truth: &SessionTruth,
    trial: usize,
    site: usize,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = truth.theta.len();
    let t = cfg.t_bins();
    let dt = cfg.bin_ms / 1000.0;
    let velocity = trial_velocity(cfg, truth.angle[trial], truth.amplitude[trial]);
    let mut rng = trial_rng(cfg.seed, site, trial);
    let mut times: Vec<Vec<f64>> = vec![Vec::new(); n];
    for ti in 0..t {
        let (vx, vy) = (velocity[ti * 2], velocity[ti * 2 + 1]);
        for ni in 0..n {
            let g = truth.gains[trial * n + ni];
            let rate =
                neuron_rate(truth.baseline[ni], truth.gain_coef[ni], truth.theta[ni], vx, vy, g);
            let count = sample_poisson(rate * dt, &mut rng);
            for _ in 0..count {
                times[ni].push((ti as f64 + rng.gen::<f64>()) * dt);
            }
        }
    }
    (times, velocity)
}

/// Knuth sampling; adequate for the small per-bin means used here.
fn sample_poisson(lambda: f64, rng: &mut impl Rng) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    let l = (-lambda).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.gen::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
        if k > 10_000 {
            return k; // unreachable at sane rates
        }
    }
}

/// Count spikes into `[T, N]` with half-open bins `[t_k, t_{k+1})`.
pub fn bin_spikes(spike_times: &[Vec<f64>], bin_s: f64, window_s: f64) -> Result<Tensor> {
    if !(bin_s > 0.0) || !(window_s > 0.0) {
        return Err(Error::Config("bin and window must be positive".into()));
    }
    let t = (window_s / bin_s).round() as usize;
    let n = spike_times.len();
    let mut counts = Tensor::zeros(&[t, n]);
    for (ni, times) in spike_times.iter().enumerate() {
        for (k, &time) in times.iter().enumerate() {
            if time < 0.0 || time >= window_s {
                return Err(Error::Data(format!(
                    "spike {} of neuron {} at {}s is outside the {}s window",
                    k, ni, time, window_s
                )));
            }
            let bin = ((time / bin_s).floor() as usize).min(t - 1);
            // floor puts a boundary time into the upper bin by construction
            counts.data[bin * n + ni] += 1.0;
        }
    }
    Ok(counts)
}

/// Generate one site: draw tuning and drift, then trials (parallel, each on
/// its own derived rng stream).
pub fn generate_session(cfg: &SyntheticConfig, site: usize) -> Result<SiteSession> {
    cfg.validate()?;
    if site >= cfg.n_sites {
        return Err(Error::Config(format!("site {} out of range", site)));
    }
    let n = cfg.neurons_per_site[site];
    let c = cfg.trials_per_site[site];
    let t = cfg.t_bins();
    let mut rng = site_rng(cfg.seed, site);

    let theta: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * std::f64::consts::TAU).collect();
    let baseline: Vec<f64> =
        (0..n).map(|_| rng.gen_range(cfg.baseline_hz.0..=cfg.baseline_hz.1)).collect();
    let gain_coef: Vec<f64> = (0..n).map(|_| rng.gen_range(cfg.gain_hz.0..=cfg.gain_hz.1)).collect();

    // per-neuron multiplicative gain random walk across windows
    let mut gains = vec![0.0; c * n];
    for ni in 0..n {
        let mut g = 1.0f64;
        for ci in 0..c {
            gains[ci * n + ni] = g;
            if cfg.drift_sigma > 0.0 {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                g = (g * (cfg.drift_sigma * z).exp()).clamp(0.2, 5.0);
            }
        }
    }

    let (angle, amplitude): (Vec<f64>, Vec<f64>) = (0..c)
        .map(|_| {
            let angle = match cfg.reach {
                ReachModel::CenterOut { n_targets } => {
                    let k = rng.gen_range(0..n_targets);
                    k as f64 * std::f64::consts::TAU / n_targets as f64
                }
                ReachModel::RandomTarget => rng.gen::<f64>() * std::f64::consts::TAU,
            };
            (angle, rng.gen_range(0.8..=1.2))
        })
        .unzip();

    let truth = SessionTruth { theta, baseline, gain_coef, gains, angle, amplitude };

    let per_trial: Vec<(Tensor, Vec<f64>)> = (0..c)
        .into_par_iter()
        .map(|trial| {
            let (times, velocity) = generate_trial_spike_times(cfg, &truth, trial, site);
            let counts = bin_spikes(&times, cfg.bin_ms / 1000.0, cfg.window_s)
                .expect("generated times lie inside the window");
            (counts, velocity)
        })
        .collect();

    let mut counts = Tensor::zeros(&[c, t, n]);
    let mut velocity = Tensor::zeros(&[c, t, 2]);
    for (ci, (tc, vel)) in per_trial.into_iter().enumerate() {
        counts.data[ci * t * n..(ci + 1) * t * n].copy_from_slice(&tc.data);
        velocity.data[ci * t * 2..(ci + 1) * t * 2].copy_from_slice(&vel);
    }
    Ok(SiteSession { coord: cfg.site_coords[site], counts, velocity, truth })
}

// ── sampling primitives (shared with the trace oracle in tests) ────────

/// Partial Fisher-Yates draw of `k` distinct indices from `0..n`.
pub fn sample_without_replacement(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool
}

/// `k` independent draws from `0..n`.
pub fn sample_with_replacement(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..k).map(|_| rng.gen_range(0..n)).collect()
}

/// Standardize one session to a fixed neuron width (downstream-session path):
/// deficit columns are replicated by cycling through the existing neurons in
/// order; surplus widths draw a random subset without replacement. Returns
/// the standardized data and the source column of every output column.
pub fn resample_to_width(x: &Tensor, width: usize, rng: &mut impl Rng) -> Result<(Tensor, Vec<usize>)> {
    if x.shape.len() != 2 {
        return Err(Error::Shape(format!("resample_to_width expects [T,N], got {:?}", x.shape)));
    }
    let (t, n) = (x.shape[0], x.shape[1]);
    if n == 0 {
        return Err(Error::Config("cannot resample a zero-neuron session".into()));
    }
    let cols: Vec<usize> = if n == width {
        (0..n).collect()
    } else if n < width {
        (0..n).chain((0..width - n).map(|i| i % n)).collect()
    } else {
        sample_without_replacement(n, width, rng)
    };
    let mut out = Tensor::zeros(&[t, width]);
    for ti in 0..t {
        for (j, &src) in cols.iter().enumerate() {
            out.data[ti * width + j] = x.data[ti * n + src];
        }
    }
    Ok((out, cols))
}

/// Per-site view of one split's raw data.
pub struct SplitView<'a> {
    /// `[C_i, T, N_i]`
    pub counts: &'a Tensor,
    /// `[C_i, T, 2]`
    pub velocity: &'a Tensor,
}

/// Standardized multi-site tensors plus the sampling trace that produced
/// them.
pub struct Standardized {
    /// `[C_target, S, T, N]`
    pub spikes: Tensor,
    /// `[C_target, S, T, 2]`
    pub velocity: Tensor,
    /// Per site: the `N*M` sampled raw neuron columns.
    pub neuron_sources: Vec<Vec<usize>>,
    /// Per site: the `C_target` indices into the multisampled trial axis
    /// (index = raw_trial * M + copy).
    pub trial_sources: Vec<Vec<usize>>,
}

/// Split-first standardization: neuron multi-sampling (without replacement
/// when the site is wide enough, with replacement otherwise), reshape to
/// `(C*M, T, N)`, then trial sampling toward the split target.
pub fn standardize_sites(
    sites: &[SplitView<'_>],
    target_neurons: usize,
    sample_times: usize,
    target_trials: usize,
    rng: &mut impl Rng,
) -> Result<Standardized> {
    if sites.is_empty() {
        return Err(Error::Config("standardize_sites needs at least one site".into()));
    }
    if target_neurons == 0 || sample_times == 0 || target_trials == 0 {
        return Err(Error::Config("standardization targets must be positive".into()));
    }
    let t = sites[0].counts.shape[1];
    for (i, s) in sites.iter().enumerate() {
        if s.counts.shape.len() != 3 || s.counts.shape[1] != t {
            return Err(Error::Config(format!(
                "site {} has inconsistent shape {:?} (expected [C,{} ,N])",
                i, s.counts.shape, t
            )));
        }
        if s.counts.shape[0] == 0 || s.counts.shape[2] == 0 {
            return Err(Error::Config(format!("site {} has no trials or neurons", i)));
        }
        if s.velocity.shape != vec![s.counts.shape[0], t, 2] {
            return Err(Error::Config(format!(
                "site {} velocity {:?} does not match counts {:?}",
                i, s.velocity.shape, s.counts.shape
            )));
        }
    }
    let s_count = sites.len();
    let n = target_neurons;
    let m = sample_times;
    let mut spikes = Tensor::zeros(&[target_trials, s_count, t, n]);
    let mut velocity = Tensor::zeros(&[target_trials, s_count, t, 2]);
    let mut neuron_sources = Vec::with_capacity(s_count);
    let mut trial_sources = Vec::with_capacity(s_count);

    for (si, site) in sites.iter().enumerate() {
        let c_i = site.counts.shape[0];
        let n_i = site.counts.shape[2];
        let n_total = n * m;
        let nu = if n_i >= n_total {
            sample_without_replacement(n_i, n_total, rng)
        } else {
            sample_with_replacement(n_i, n_total, rng)
        };
        let available = c_i * m;
        let tau = if available >= target_trials {
            sample_without_replacement(available, target_trials, rng)
        } else {
            sample_with_replacement(available, target_trials, rng)
        };
        for (out_c, &zi) in tau.iter().enumerate() {
            let (raw_c, copy) = (zi / m, zi % m);
            let cols = &nu[copy * n..(copy + 1) * n];
            for ti in 0..t {
                let src = (raw_c * t + ti) * n_i;
                let dst = ((out_c * s_count + si) * t + ti) * n;
                for (j, &col) in cols.iter().enumerate() {
                    spikes.data[dst + j] = site.counts.data[src + col];
                }
                let vsrc = (raw_c * t + ti) * 2;
                let vdst = ((out_c * s_count + si) * t + ti) * 2;
                velocity.data[vdst] = site.velocity.data[vsrc];
                velocity.data[vdst + 1] = site.velocity.data[vsrc + 1];
            }
        }
        neuron_sources.push(nu);
        trial_sources.push(tau);
    }
    Ok(Standardized { spikes, velocity, neuron_sources, trial_sources })
}

// ── on-disk dataset format ──────────────────────────────────────────────

/// Binned spike tensors for one split, sites stacked.
#[derive(Clone, Debug)]
pub struct SpikeBatch {
    /// `[C, S, T, N]` nonnegative counts.
    pub spikes: Tensor,
    /// `[C, S, T, 2]` behavior stream.
    pub velocity: Tensor,
    /// Per-site non-temporal coordinates, e.g. `[x, y]`.
    pub positions: Vec<Vec<f64>>,
    pub split: String,
}

impl SpikeBatch {
    pub fn n_trials(&self) -> usize {
        self.spikes.shape[0]
    }
    pub fn n_sites(&self) -> usize {
        self.spikes.shape[1]
    }
    pub fn t_bins(&self) -> usize {
        self.spikes.shape[2]
    }
    pub fn n_neurons(&self) -> usize {
        self.spikes.shape[3]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitShape {
    pub trials: usize,
    pub sites: usize,
    pub t_bins: usize,
    pub neurons: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub config: SyntheticConfig,
    /// Index of the session held out for downstream evaluation.
    pub held_out_site: usize,
    pub target_neurons: usize,
    pub sample_times: usize,
    /// Pretrain split ratios over trials, temporal order.
    pub pretrain_ratios: (f64, f64, f64),
    /// Held-out split ratios (train/val/test), temporal order.
    pub heldout_ratios: (f64, f64, f64),
    pub pretrain_shapes: std::collections::BTreeMap<String, SplitShape>,
    pub heldout_shape: SplitShape,
    pub pretrain_coords: Vec<Vec<f64>>,
    pub heldout_coord: Vec<f64>,
}

pub struct Dataset {
    pub manifest: DatasetManifest,
    pub pretrain: std::collections::BTreeMap<String, SpikeBatch>,
    /// Full held-out session `[C, 1, T, N]`, sliced by ratio at use time.
    pub heldout: SpikeBatch,
    pub heldout_truth: SessionTruth,
}

impl Dataset {
    /// Trial range of the held-out session for a train ratio: train is the
    /// first `ratio` of trials, test the fixed last `test_frac`, validation
    /// whatever lies between.
    pub fn heldout_split(&self, ratio: f64) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>)> {
        let c = self.heldout.n_trials();
        let test_frac = self.manifest.heldout_ratios.2;
        if !(ratio > 0.0) || ratio > 1.0 - test_frac + 1e-9 {
            return Err(Error::Config(format!(
                "train ratio {} must lie in (0, {}]",
                ratio,
                1.0 - test_frac
            )));
        }
        let train_end = ((c as f64 * ratio).round() as usize).max(1);
        let test_start = (c as f64 * (1.0 - test_frac)).round() as usize;
        Ok((0..train_end, train_end..test_start, test_start..c))
    }
}

fn write_raw(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_raw(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    let mut r = BufReader::new(File::open(path)?);
    let mut data = Vec::with_capacity(numel);
    let mut buf = [0u8; 8];
    for _ in 0..numel {
        r.read_exact(&mut buf).map_err(|e| {
            Error::Data(format!("{} shorter than manifest shape {:?}: {}", path.display(), shape, e))
        })?;
        data.push(f64::from_le_bytes(buf));
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Data(format!(
            "{} longer than manifest shape {:?}",
            path.display(),
            shape
        )));
    }
    Tensor::new(shape.to_vec(), data)
}

fn split_ranges(c: usize, ratios: (f64, f64, f64)) -> [std::ops::Range<usize>; 3] {
    let a = (c as f64 * ratios.0).round() as usize;
    let b = (c as f64 * (ratios.0 + ratios.1)).round() as usize;
    [0..a, a..b.min(c), b.min(c)..c]
}

fn slice_trials(t: &Tensor, range: std::ops::Range<usize>) -> Tensor {
    let per_trial: usize = t.shape[1..].iter().product();
    let mut shape = t.shape.clone();
    shape[0] = range.len();
    Tensor::new(shape, t.data[range.start * per_trial..range.end * per_trial].to_vec()).unwrap()
}

/// Generate every site, standardize the pretrain sites per split, width-fit
/// the held-out site, and write the whole dataset directory.
pub fn build_dataset(
    cfg: &SyntheticConfig,
    held_out_site: usize,
    target_neurons: usize,
    sample_times: usize,
    pretrain_ratios: (f64, f64, f64),
    heldout_ratios: (f64, f64, f64),
    dir: &Path,
) -> Result<DatasetManifest> {
    cfg.validate()?;
    if held_out_site >= cfg.n_sites {
        return Err(Error::Config(format!("held-out site {} out of range", held_out_site)));
    }
    if cfg.n_sites < 2 {
        return Err(Error::Config("need at least one pretrain site plus the held-out site".into()));
    }
    std::fs::create_dir_all(dir)?;
    let sessions: Vec<SiteSession> =
        (0..cfg.n_sites).map(|s| generate_session(cfg, s)).collect::<Result<_>>()?;

    let pretrain_sites: Vec<usize> =
        (0..cfg.n_sites).filter(|s| *s != held_out_site).collect();
    let t = cfg.t_bins();

    // split first, then standardize each split independently
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5f5f_5f5f);
    let mut pretrain_shapes = std::collections::BTreeMap::new();
    let split_names = ["train", "val", "test"];
    let mut split_tensors: Vec<(String, Tensor, Tensor)> = Vec::new();
    for (si, name) in split_names.iter().enumerate() {
        let mut views_counts: Vec<Tensor> = Vec::new();
        let mut views_vel: Vec<Tensor> = Vec::new();
        for &site in &pretrain_sites {
            let c = sessions[site].counts.shape[0];
            let ranges = split_ranges(c, pretrain_ratios);
            views_counts.push(slice_trials(&sessions[site].counts, ranges[si].clone()));
            views_vel.push(slice_trials(&sessions[site].velocity, ranges[si].clone()));
        }
        let views: Vec<SplitView> = views_counts
            .iter()
            .zip(&views_vel)
            .map(|(c, v)| SplitView { counts: c, velocity: v })
            .collect();
        let target = if *name == "train" {
            views.iter().map(|v| v.counts.shape[0] * sample_times).max().unwrap()
        } else {
            views.iter().map(|v| v.counts.shape[0] * sample_times).min().unwrap()
        };
        if target == 0 {
            return Err(Error::Config(format!(
                "split '{}' is empty; adjust the ratios or trial counts",
                name
            )));
        }
        let std =
            standardize_sites(&views, target_neurons, sample_times, target, &mut rng)?;
        pretrain_shapes.insert(
            name.to_string(),
            SplitShape {
                trials: target,
                sites: pretrain_sites.len(),
                t_bins: t,
                neurons: target_neurons,
            },
        );
        split_tensors.push((name.to_string(), std.spikes, std.velocity));
    }

    // held-out session: width-fit whole trials, stored unsplit
    let ho = &sessions[held_out_site];
    let c_ho = ho.counts.shape[0];
    let n_ho = ho.counts.shape[2];
    let flat = ho.counts.clone().reshaped(vec![c_ho * t, n_ho])?;
    let (fitted, cols) = resample_to_width(&flat, target_neurons, &mut rng)?;
    let ho_spikes = fitted.reshaped(vec![c_ho, 1, t, target_neurons])?;
    let mut ho_vel = Tensor::zeros(&[c_ho, 1, t, 2]);
    ho_vel.data.copy_from_slice(&ho.velocity.data);
    let ho_truth = ho.truth.select_neurons(&cols, c_ho);

    let manifest = DatasetManifest {
        version: 1,
        config: cfg.clone(),
        held_out_site,
        target_neurons,
        sample_times,
        pretrain_ratios,
        heldout_ratios,
        pretrain_shapes,
        heldout_shape: SplitShape { trials: c_ho, sites: 1, t_bins: t, neurons: target_neurons },
        pretrain_coords: pretrain_sites
            .iter()
            .map(|&s| vec![cfg.site_coords[s].0 as f64, cfg.site_coords[s].1 as f64])
            .collect(),
        heldout_coord: vec![
            cfg.site_coords[held_out_site].0 as f64,
            cfg.site_coords[held_out_site].1 as f64,
        ],
    };

    for (name, spikes, velocity) in &split_tensors {
        write_raw(&dir.join(format!("pretrain_{name}_spikes.bin")), spikes)?;
        write_raw(&dir.join(format!("pretrain_{name}_velocity.bin")), velocity)?;
    }
    write_raw(&dir.join("heldout_spikes.bin"), &ho_spikes)?;
    write_raw(&dir.join("heldout_velocity.bin"), &ho_vel)?;
    std::fs::write(dir.join("heldout_truth.json"), serde_json::to_vec_pretty(&ho_truth)?)?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&std::fs::read(PathBuf::from(dir).join("manifest.json"))?)?;
    let mut pretrain = std::collections::BTreeMap::new();
    for (name, shape) in &manifest.pretrain_shapes {
        let sshape = [shape.trials, shape.sites, shape.t_bins, shape.neurons];
        let vshape = [shape.trials, shape.sites, shape.t_bins, 2];
        let spikes = read_raw(&dir.join(format!("pretrain_{name}_spikes.bin")), &sshape)?;
        let velocity = read_raw(&dir.join(format!("pretrain_{name}_velocity.bin")), &vshape)?;
        pretrain.insert(
            name.clone(),
            SpikeBatch {
                spikes,
                velocity,
                positions: manifest.pretrain_coords.clone(),
                split: name.clone(),
            },
        );
    }
    let hs = &manifest.heldout_shape;
    let heldout = SpikeBatch {
        spikes: read_raw(
            &dir.join("heldout_spikes.bin"),
            &[hs.trials, 1, hs.t_bins, hs.neurons],
        )?,
        velocity: read_raw(&dir.join("heldout_velocity.bin"), &[hs.trials, 1, hs.t_bins, 2])?,
        positions: vec![manifest.heldout_coord.clone()],
        split: "heldout".into(),
    };
    let heldout_truth: SessionTruth =
        serde_json::from_slice(&std::fs::read(dir.join("heldout_truth.json"))?)?;
    Ok(Dataset { manifest, pretrain, heldout, heldout_truth })
}
