//! Command-line driver: synthetic data generation, self-supervised
//! pretraining, supervised finetuning, ablation sweeps, gradient checking and
//! connectivity export.
//!
//! Exit codes: 0 ok, 1 usage/configuration, 2 numeric fault, 3 check failure.

mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rpnt_core::checkpoint;
use rpnt_core::data::{build_dataset, load_dataset, ReachModel, SyntheticConfig};
use rpnt_core::error::{Error, Result};
use rpnt_core::model::{extract_fc, RpntConfig, RpntModel};
use rpnt_core::nn::ForwardCtx;
use rpnt_core::tape::Tape;
use rpnt_core::tensor::Tensor;
use rpnt_core::train::{
    default_grid, finetune, gradcheck_model, gradcheck_reference, pretrain, sweep, FinetuneMode,
    Hyper, RunRecord, SweepAxis,
};

use config::{apply_hyper, apply_model, parse_kernel, FileConfig};

#[derive(Parser)]
#[command(name = "rpnt", version, about = "Spike-train transformer trainer and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-site dataset directory.
    GenData(GenDataArgs),
    /// Self-supervised pretraining on the pretrain sites.
    Pretrain(PretrainArgs),
    /// Supervised velocity finetuning on the held-out session.
    Finetune(FinetuneArgs),
    /// Grid sweep over one configuration axis.
    Sweep(SweepArgs),
    /// Finite-difference check of every parameter's gradient.
    Gradcheck(GradcheckArgs),
    /// Export the cross-site connectivity matrix and heatmaps.
    ExportFc(ExportFcArgs),
}

#[derive(Args, Clone)]
struct ModelFlags {
    /// TOML configuration file ([model] / [pretrain] / [finetune] sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base model preset: desk | benchmark | neuropixel | tiny.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Positional encoding: mrope | rope | sinusoidal | learnable.
    #[arg(long)]
    pe: Option<String>,
    /// Attention: context | standard.
    #[arg(long)]
    attention: Option<String>,
    /// Convolution kernel, e.g. 9x9.
    #[arg(long)]
    kernel: Option<String>,
    /// Feedforward sublayer: on | off.
    #[arg(long)]
    ffn: Option<String>,
    /// Kernel-context history: full | past:K.
    #[arg(long)]
    history: Option<String>,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// Masking strategy: uniform | entrywise | fixed:PN,PT.
    #[arg(long)]
    masking: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Contrastive loss weight.
    #[arg(long)]
    mu: Option<f64>,
    /// Output directory (default: $RPNT_OUT_DIR or ./rpnt_out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    sites: usize,
    #[arg(long, default_value_t = 20)]
    neurons: usize,
    #[arg(long, default_value_t = 400)]
    trials: usize,
    #[arg(long, default_value_t = 3407)]
    seed: u64,
    /// Site held out for downstream evaluation (default: the last one).
    #[arg(long)]
    held_out: Option<usize>,
    /// Gain random-walk std per window.
    #[arg(long, default_value_t = 0.02)]
    drift: f64,
    /// Reach model: center_out | random_target.
    #[arg(long, default_value = "center_out")]
    reach: String,
    /// Standardized neuron width (defaults to --neurons).
    #[arg(long)]
    target_neurons: Option<usize>,
    /// Neuron multi-sampling factor M.
    #[arg(long, default_value_t = 1)]
    sample_times: usize,
    /// Pretrain split ratios, e.g. 0.8,0.1,0.1.
    #[arg(long, default_value = "0.8,0.1,0.1")]
    pretrain_ratios: String,
    /// Held-out split ratios, e.g. 0.2,0.3,0.5.
    #[arg(long, default_value = "0.2,0.3,0.5")]
    heldout_ratios: String,
}

#[derive(Args)]
struct PretrainArgs {
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pretrained checkpoint (required unless --mode scratch).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// full_sft | fs_sft | scratch.
    #[arg(long, default_value = "fs_sft")]
    mode: String,
    /// Fraction of held-out trials used for training.
    #[arg(long, default_value_t = 0.2)]
    ratio: f64,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Axis: pe | attention | masking | kernel | layers | heads | train_ratio.
    #[arg(long)]
    axis: String,
    /// Comma-separated grid values (defaults to the reported grids).
    #[arg(long)]
    grid: Option<String>,
    /// Finetune train ratio for non-ratio axes.
    #[arg(long, default_value_t = 0.2)]
    ratio: f64,
    #[command(flatten)]
    model: ModelFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Failure threshold on the max relative error.
    #[arg(long, default_value_t = 1e-4)]
    threshold: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
}

#[derive(Args)]
struct ExportFcArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Timestamps (ms) to render as heatmaps.
    #[arg(long, default_value = "0,300,600")]
    at_ms: String,
    /// Cap on evaluation trials.
    #[arg(long, default_value_t = 64)]
    max_trials: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn out_dir(flag: &Option<PathBuf>) -> PathBuf {
    flag.clone()
        .or_else(|| std::env::var_os("RPNT_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("rpnt_out"))
}

fn parse_ratios(s: &str) -> Result<(f64, f64, f64)> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad ratios '{s}'")))?;
    if parts.len() != 3 || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("ratios '{s}' must be three numbers summing to 1")));
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn build_model_config(flags: &ModelFlags, file: &FileConfig, n_neurons: usize) -> Result<RpntConfig> {
    let mut cfg = match flags.preset.as_str() {
        "desk" => RpntConfig::desk(n_neurons),
        "benchmark" => RpntConfig::benchmark(n_neurons),
        "neuropixel" => RpntConfig::neuropixel(n_neurons),
        "tiny" => {
            let mut c = RpntConfig::tiny();
            c.n_neurons = n_neurons;
            c
        }
        other => return Err(Error::Config(format!("unknown preset '{other}'"))),
    };
    if let Some(sec) = &file.model {
        apply_model(&mut cfg, sec)?;
    }
    if let Some(v) = &flags.pe {
        cfg.pe = v.parse()?;
    }
    if let Some(v) = &flags.attention {
        cfg.attention = v.parse()?;
    }
    if let Some(v) = &flags.kernel {
        cfg.kernel = parse_kernel(v)?;
    }
    if let Some(v) = &flags.ffn {
        cfg.ffn = match v.as_str() {
            "on" => true,
            "off" => false,
            other => return Err(Error::Config(format!("--ffn expects on|off, got '{other}'"))),
        };
    }
    if let Some(v) = &flags.history {
        cfg.history = v.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn build_hyper(base: Hyper, section: Option<&config::HyperSection>, flags: &TrainFlags) -> Result<Hyper> {
    let mut hyper = base;
    if let Some(sec) = section {
        apply_hyper(&mut hyper, sec)?;
    }
    if let Some(v) = &flags.masking {
        hyper.mask = v.parse()?;
    }
    if let Some(v) = flags.seed {
        hyper.seed = v;
    }
    if let Some(v) = flags.epochs {
        hyper.epochs = v;
    }
    if let Some(v) = flags.lr {
        hyper.lr = v;
    }
    if let Some(v) = flags.batch {
        hyper.batch_size = v;
    }
    if let Some(v) = flags.mu {
        hyper.contrastive_weight = v;
    }
    Ok(hyper)
}

fn write_record(dir: &Path, name: &str, record: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(name), serde_json::to_vec_pretty(record)?)?;
    Ok(())
}

fn loss_curve(dir: &Path, name: &str, record: &RunRecord) -> Result<()> {
    let train: Vec<(f64, f64)> =
        record.epochs.iter().map(|e| (e.epoch as f64, e.loss_total)).collect();
    let mut series = vec![("train".to_string(), train)];
    let val: Vec<(f64, f64)> = record
        .epochs
        .iter()
        .filter_map(|e| e.val_loss.map(|v| (e.epoch as f64, v)))
        .collect();
    if !val.is_empty() {
        series.push(("val".to_string(), val));
    }
    plot::line_svg(&dir.join(name), "loss", "epoch", "loss", &series)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let reach = match args.reach.as_str() {
        "center_out" => ReachModel::CenterOut { n_targets: 8 },
        "random_target" => ReachModel::RandomTarget,
        other => return Err(Error::Config(format!("unknown reach model '{other}'"))),
    };
    let mut cfg = SyntheticConfig::desk(args.sites, args.neurons, args.trials, args.seed);
    cfg.drift_sigma = args.drift;
    cfg.reach = reach;
    let held_out = args.held_out.unwrap_or(args.sites.saturating_sub(1));
    let manifest = build_dataset(
        &cfg,
        held_out,
        args.target_neurons.unwrap_or(args.neurons),
        args.sample_times,
        parse_ratios(&args.pretrain_ratios)?,
        parse_ratios(&args.heldout_ratios)?,
        &args.out,
    )?;
    println!(
        "wrote dataset to {}: {} pretrain sites, held-out site {}, splits {:?}",
        args.out.display(),
        manifest.pretrain_coords.len(),
        manifest.held_out_site,
        manifest.pretrain_shapes.keys().collect::<Vec<_>>()
    );
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let file = FileConfig::load(args.model.config.as_deref())?;
    let cfg = build_model_config(&args.model, &file, dataset.manifest.target_neurons)?;
    let base = match args.model.preset.as_str() {
        "benchmark" => Hyper::pretrain_benchmark(),
        "neuropixel" => Hyper::pretrain_neuropixel(),
        _ => Hyper::pretrain_desk(20, 3407),
    };
    let hyper = build_hyper(base, file.pretrain.as_ref(), &args.train)?;
    let dir = out_dir(&args.train.out);
    std::fs::create_dir_all(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let model = RpntModel::new(cfg, &mut rng)?;
    log::info!("pretraining {} parameters for {} epochs", model.param_count(), hyper.epochs);
    let (_best, record) = pretrain(model, &dataset, &hyper, Some(&dir))?;
    write_record(&dir, "pretrain_record.json", &record)?;
    loss_curve(&dir, "pretrain_loss.svg", &record)?;
    println!(
        "pretrain done: best epoch {:?}, checkpoint {}",
        record.best_epoch,
        dir.join("best.rpnt").display()
    );
    Ok(())
}

fn cmd_finetune(args: FinetuneArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let file = FileConfig::load(args.model.config.as_deref())?;
    let mode: FinetuneMode = args.mode.parse()?;
    let hyper = build_hyper(Hyper::sft_desk(40, 3407), file.finetune.as_ref(), &args.train)?;
    let model = match (&args.checkpoint, mode) {
        (Some(p), _) => checkpoint::load(p)?,
        (None, FinetuneMode::Scratch) => {
            let cfg = build_model_config(&args.model, &file, dataset.manifest.target_neurons)?;
            let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
            RpntModel::new(cfg, &mut rng)?
        }
        (None, _) => {
            return Err(Error::Usage(
                "finetuning a pretrained model needs --checkpoint (or use --mode scratch)".into(),
            ))
        }
    };
    let dir = out_dir(&args.train.out);
    let (_m, record) = finetune(model, mode, &dataset, args.ratio, &hyper, Some(&dir))?;
    write_record(&dir, "finetune_record.json", &record)?;
    loss_curve(&dir, "finetune_loss.svg", &record)?;
    let per_dim = record.final_r2_per_dim.clone().unwrap_or_default();
    println!(
        "finetune done ({:?}, ratio {}): r2 = {:.4} (vx {:.4}, vy {:.4})",
        mode,
        args.ratio,
        record.final_r2.unwrap_or(f64::NAN),
        per_dim.first().copied().unwrap_or(f64::NAN),
        per_dim.get(1).copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let dataset = load_dataset(&args.data)?;
    let file = FileConfig::load(args.model.config.as_deref())?;
    let axis: SweepAxis = args.axis.parse()?;
    let base = build_model_config(&args.model, &file, dataset.manifest.target_neurons)?;
    let pre = build_hyper(Hyper::pretrain_desk(10, 3407), file.pretrain.as_ref(), &args.train)?;
    let ft = build_hyper(Hyper::sft_desk(30, 3407), file.finetune.as_ref(), &args.train)?;
    let grid: Vec<String> = match &args.grid {
        Some(g) => g.split(',').map(|s| s.trim().to_string()).collect(),
        None => default_grid(axis),
    };
    let dir = out_dir(&args.train.out);
    let table = sweep(axis, &grid, &dataset, &base, &pre, &ft, args.ratio, Some(&dir))?;
    let axis_name = serde_json::to_string(&axis)?.trim_matches('"').to_string();
    let pts: Vec<(f64, f64)> = table
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (i as f64, p.r2.unwrap_or(f64::NAN)))
        .collect();
    plot::line_svg(
        &dir.join(format!("sweep_{axis_name}.svg")),
        &format!("{axis_name} sweep"),
        &axis_name,
        "r2",
        &[("r2".to_string(), pts)],
    )
    .ok();
    for p in &table.points {
        match (&p.r2, &p.error) {
            (Some(r2), _) => println!("{:>16}  r2 = {:.4}", p.label, r2),
            (None, Some(e)) => println!("{:>16}  failed: {}", p.label, e),
            _ => {}
        }
    }
    println!("table written to {}", dir.join(format!("sweep_{axis_name}.json")).display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let (mut model, fixture) = gradcheck_reference();
    let report = gradcheck_model(&mut model, &fixture, args.step)?;
    for (name, err) in &report.per_param {
        println!("{err:>12.3e}  {name}");
    }
    println!(
        "worst: {} at {:.3e} (threshold {:.1e})",
        report.worst.0, report.worst.1, args.threshold
    );
    if !report.passes(args.threshold) {
        eprintln!(
            "gradient check FAILED: {} has relative error {:.3e}",
            report.worst.0, report.worst.1
        );
        return Ok(ExitCode::from(3));
    }
    println!("gradient check passed");
    Ok(ExitCode::SUCCESS)
}

fn cmd_export_fc(args: ExportFcArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    if model.config.n_spatial_layers == 0 {
        return Err(Error::Usage(
            "this checkpoint has no spatial encoder; connectivity export needs one".into(),
        ));
    }
    let dataset = load_dataset(&args.data)?;
    let sb = dataset
        .pretrain
        .get("test")
        .or_else(|| dataset.pretrain.get("val"))
        .ok_or_else(|| Error::Data("dataset has no evaluation split".into()))?;
    let trials = sb.n_trials().min(args.max_trials);
    let (s, t, n) = (sb.n_sites(), sb.t_bins(), sb.n_neurons());
    let dir = out_dir(&args.out);
    std::fs::create_dir_all(&dir)?;

    // average connectivity over evaluation trials, eval mode, no masking
    let mut fc_sum = Tensor::zeros(&[t, s, s]);
    let mut batches = 0.0;
    let chunk_size = 16;
    for start in (0..trials).step_by(chunk_size) {
        let end = (start + chunk_size).min(trials);
        let stride = s * t * n;
        let batch = Tensor::new(
            vec![end - start, s, t, n],
            sb.spikes.data[start * stride..end * stride].to_vec(),
        )?;
        let mut tape = Tape::new();
        let bm = model.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ctx = ForwardCtx::new(false, 0.0, &mut rng);
        let out = model.forward_pretrain(&mut tape, &bm, &batch, &sb.positions, &mut ctx)?;
        let weights: Vec<Tensor> = out.spatial_weights.iter().map(|id| tape.value(*id)).collect();
        let fc = extract_fc(&weights)?;
        for (acc, v) in fc_sum.data.iter_mut().zip(&fc.data) {
            *acc += v;
        }
        batches += 1.0;
    }
    for v in fc_sum.data.iter_mut() {
        *v /= batches;
    }

    // tensor file in the dataset raw format plus a shape sidecar
    let bin = dir.join("fc.bin");
    let mut bytes = Vec::with_capacity(fc_sum.numel() * 8);
    for v in &fc_sum.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&bin, bytes)?;
    std::fs::write(
        dir.join("fc.json"),
        serde_json::to_vec_pretty(&serde_json::json!({
            "shape": [t, s, s],
            "bin_ms": dataset.manifest.config.bin_ms,
            "trials_averaged": trials,
        }))?,
    )?;

    let bin_ms = dataset.manifest.config.bin_ms;
    for ms in args.at_ms.split(',') {
        let ms: f64 = ms
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad --at-ms entry '{ms}'")))?;
        let bin_idx = ((ms / bin_ms).round() as usize).min(t - 1);
        let slice = Tensor::new(
            vec![s, s],
            fc_sum.data[bin_idx * s * s..(bin_idx + 1) * s * s].to_vec(),
        )?;
        let path = dir.join(format!("fc_{:04}ms.png", ms as usize));
        plot::heatmap_png(&path, &slice, 32)?;
        println!("wrote {} (time bin {})", path.display(), bin_idx);
    }
    println!("connectivity tensor written to {}", bin.display());
    Ok(())
}

fn run() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::GenData(a) => cmd_gen_data(a).map(|_| ExitCode::SUCCESS),
        Command::Pretrain(a) => cmd_pretrain(a).map(|_| ExitCode::SUCCESS),
        Command::Finetune(a) => cmd_finetune(a).map(|_| ExitCode::SUCCESS),
        Command::Sweep(a) => cmd_sweep(a).map(|_| ExitCode::SUCCESS),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ExportFc(a) => cmd_export_fc(a).map(|_| ExitCode::SUCCESS),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
