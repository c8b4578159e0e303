//! CLI: synthetic data emission, training, editing, generation, evaluation,
//! and frame resampling. Exit codes: 0 success, 1 validation error,
//! 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use motionfill::bench::{emit_dataset, manifest_stats, BenchManifest, SynthConfig};
use motionfill::dit::{load_checkpoint, save_checkpoint, Checkpoint, DiTConfig, DiTParameters};
use motionfill::error::Error;
use motionfill::masking::build_edit_timeline;
use motionfill::metrics::{motion_continuity_latent, BoundarySet};
use motionfill::motion::{
    read_motion, read_speech, write_motion, EditSpec, MotionSequence,
};
use motionfill::pipelines::{edit_motion, generate_motion, TrainConfig, Trainer};
use motionfill::resample::{
    read_fvid, read_png_dir, resample_sequence, write_fvid, write_png_dir, RegionMask,
};
use motionfill::sampler::SamplerConfig;

/// Output root: paths given on the command line resolve under this
/// directory when it is set.
const OUTPUT_ROOT_ENV: &str = "MOTIONFILL_OUTPUT_ROOT";

fn out_path(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(p),
        None => p.to_path_buf(),
    }
}

#[derive(Parser)]
#[command(name = "motionfill", version, about = "Speech-conditional facial motion infilling")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Emit a synthetic paired dataset plus a benchmark manifest.
    Synth(SynthArgs),
    /// Train a model on a synthetic dataset directory.
    Train(TrainArgs),
    /// Infill an edited span of a motion sequence.
    Edit(EditArgs),
    /// Generate motion from speech, optionally after a prefix.
    Generate(GenerateArgs),
    /// Evaluate edited outputs against a manifest.
    Eval(EvalArgs),
    /// Resample a frame sequence to a target frame count.
    Resample(ResampleArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    speech_dim: usize,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    #[arg(long, default_value_t = 50.0)]
    feature_rate: f64,
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Optional TrainConfig JSON; flags below override nothing when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    preset: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_ts: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint output path (.mfck).
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV path.
    #[arg(long)]
    losses: Option<PathBuf>,
}

#[derive(Args)]
struct SamplerArgs {
    #[arg(long, default_value_t = 32)]
    n_steps: usize,
    #[arg(long, default_value_t = -1.0)]
    sway: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Freeze unmasked rows during integration instead of re-noising them.
    #[arg(long, default_value_t = false)]
    freeze_unmasked: bool,
    /// Sample with raw weights instead of the EMA shadow.
    #[arg(long, default_value_t = false)]
    no_ema: bool,
}

impl SamplerArgs {
    fn to_config(&self) -> SamplerConfig {
        SamplerConfig {
            n_steps: self.n_steps,
            sway_s: self.sway,
            seed: self.seed,
            renoise_unmasked: !self.freeze_unmasked,
        }
    }
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    motion: PathBuf,
    /// Speech features spanning the full edited utterance.
    #[arg(long)]
    speech: PathBuf,
    /// EditSpec JSON file.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    speech: PathBuf,
    #[arg(long)]
    prefix: Option<PathBuf>,
    #[arg(long)]
    target_frames: usize,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    sampler: SamplerArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of edited outputs named <sample-id>.fmot.
    #[arg(long)]
    outputs: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ResampleArgs {
    /// Input: .fvid file or a directory of PNG frames.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    target_frames: usize,
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    /// Output: .fvid path or a directory for PNG frames.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // usage/flag problems are validation errors
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Validation(_) | Error::Format(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Edit(a) => cmd_edit(a),
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Resample(a) => cmd_resample(a),
    }
}

fn cmd_synth(a: SynthArgs) -> Result<(), Error> {
    let cfg = SynthConfig {
        seed: a.seed,
        sample_index: 0,
        t: a.frames,
        d: a.speech_dim,
        fps: a.fps,
        feature_rate_hz: a.feature_rate,
        smoothness_sigma: a.sigma,
    };
    let dir = out_path(&a.out);
    let manifest = emit_dataset(&cfg, a.count, &dir)?;
    let stats = manifest_stats(&manifest)?;
    println!(
        "wrote {} samples to {} (kinds: {:?})",
        stats.total,
        dir.display(),
        stats.kind_totals
    );
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<(MotionSequence, motionfill::motion::SpeechFeatureSequence)>, Error> {
    let manifest = BenchManifest::load(dir.join("manifest.json"))?;
    let mut pairs = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        let motion = read_motion(&s.motion_path)?;
        let speech = read_speech(&s.speech_path)?;
        pairs.push((motion, speech));
    }
    if pairs.is_empty() {
        return Err(Error::validation("dataset is empty"));
    }
    Ok(pairs)
}

fn cmd_train(a: TrainArgs) -> Result<(), Error> {
    let pairs = load_dataset(&a.data)?;
    let speech_dim = pairs[0].1.dim();

    let mut tcfg = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.steps {
        tcfg.total_steps = v;
        tcfg.warmup_steps = tcfg.warmup_steps.min(v / 10);
    }
    if let Some(v) = a.warmup {
        tcfg.warmup_steps = v;
    }
    if let Some(v) = a.batch_size {
        tcfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        tcfg.lr_peak = v;
    }
    if let Some(v) = a.lambda_ts {
        tcfg.loss_weights = motionfill::cfm::LossWeights::new(v)?;
    }
    tcfg.seed = a.seed;

    let mcfg = match a.preset.as_str() {
        "toy" => DiTConfig::toy(speech_dim),
        "full" => DiTConfig::full(speech_dim),
        other => return Err(Error::validation(format!("unknown preset '{other}'"))),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let params = DiTParameters::init(&mcfg, &mut rng)?;
    let mut trainer = Trainer::new(mcfg.clone(), tcfg.clone(), params)?;

    let mut csv = String::from("step,total,cfm,ts,lr\n");
    while trainer.step < tcfg.total_steps {
        let batch: Vec<_> = (0..tcfg.batch_size)
            .map(|k| pairs[(trainer.step * tcfg.batch_size + k) % pairs.len()].clone())
            .collect();
        let loss = trainer.train_step(&batch, &mut rng)?;
        if trainer.step % 50 == 0 || trainer.step == tcfg.total_steps {
            println!(
                "step {:>6}  total {:.6}  cfm {:.6}  ts {:.6}  lr {:.2e}",
                trainer.step, loss.total, loss.cfm, loss.ts, loss.lr
            );
        }
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            trainer.step, loss.total, loss.cfm, loss.ts, loss.lr
        ));
    }

    let ckpt = Checkpoint {
        config: mcfg,
        params: trainer.params.clone(),
        ema: Some(trainer.ema_params()?),
    };
    let out = out_path(&a.out);
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_checkpoint(&ckpt, &out)?;
    println!("checkpoint written to {}", out.display());
    if let Some(losses) = &a.losses {
        let lp = out_path(losses);
        std::fs::write(&lp, csv)?;
        println!("loss curve written to {}", lp.display());
    }
    Ok(())
}

fn inference_params(ckpt: &Checkpoint, no_ema: bool) -> &DiTParameters {
    match (&ckpt.ema, no_ema) {
        (Some(ema), false) => ema,
        _ => &ckpt.params,
    }
}

fn cmd_edit(a: EditArgs) -> Result<(), Error> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let orig = read_motion(&a.motion)?;
    let speech = read_speech(&a.speech)?;
    let spec: EditSpec = serde_json::from_str(&std::fs::read_to_string(&a.spec)?)?;
    let params = inference_params(&ckpt, a.sampler.no_ema);
    let out = edit_motion(&orig, &speech, &spec, params, &ckpt.config, &a.sampler.to_config())?;
    let path = out_path(&a.out);
    write_motion(&out, &path)?;
    println!("edited motion ({} frames) written to {}", out.len(), path.display());
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<(), Error> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let speech = read_speech(&a.speech)?;
    let prefix = a.prefix.as_ref().map(read_motion).transpose()?;
    let params = inference_params(&ckpt, a.sampler.no_ema);
    let out = generate_motion(
        prefix.as_ref(),
        &speech,
        a.target_frames,
        a.fps,
        params,
        &ckpt.config,
        &a.sampler.to_config(),
    )?;
    let path = out_path(&a.out);
    write_motion(&out, &path)?;
    println!("generated motion ({} frames) written to {}", out.len(), path.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Error> {
    let manifest = BenchManifest::load(&a.manifest)?;
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for s in &manifest.samples {
        let output_path = a.outputs.join(format!("{}.fmot", s.id));
        if !output_path.exists() {
            continue;
        }
        let edited = read_motion(&output_path)?;
        let orig = read_motion(&s.motion_path)?;
        let timeline = build_edit_timeline(orig.len(), &s.edit)?;
        if edited.len() != timeline.new_total_frames {
            return Err(Error::validation(format!(
                "sample {}: output has {} frames, timeline expects {}",
                s.id,
                edited.len(),
                timeline.new_total_frames
            )));
        }
        let boundaries = BoundarySet::from_timeline(&timeline);
        if boundaries.is_empty() {
            continue;
        }
        let v = motion_continuity_latent(&edited, &boundaries)?;
        values.push(v);
        rows.push(serde_json::json!({
            "id": s.id,
            "edit_kind": s.edit_kind.to_string(),
            "span_class": s.span_class,
            "motion_continuity_latent": v,
        }));
    }
    if values.is_empty() {
        return Err(Error::validation("no evaluable outputs found"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let report = serde_json::json!({
        "samples": rows,
        "aggregate": {
            "motion_continuity_latent_mean": mean,
            "motion_continuity_latent_std": std,
            "count": values.len(),
        }
    });
    let path = out_path(&a.report);
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    println!(
        "evaluated {} samples: motion_continuity_latent {:.6} +/- {:.6} -> {}",
        values.len(),
        mean,
        std,
        path.display()
    );
    Ok(())
}

fn cmd_resample(a: ResampleArgs) -> Result<(), Error> {
    let seq = if a.input.is_dir() {
        read_png_dir(&a.input, a.fps)?
    } else {
        read_fvid(&a.input)?
    };
    let regions: Vec<_> = (0..seq.len())
        .map(|_| RegionMask::centered_ellipse(seq.height(), seq.width()))
        .collect();
    let out = resample_sequence(&seq, a.target_frames, &regions)?;
    let path = out_path(&a.out);
    if path.extension().is_some_and(|e| e == "fvid") {
        write_fvid(&out, &path)?;
    } else {
        write_png_dir(&out, &path)?;
    }
    println!(
        "resampled {} -> {} frames -> {}",
        seq.len(),
        out.len(),
        path.display()
    );
    Ok(())
}
