//! End-to-end orchestration: the training loop (AdamW + linear warmup/decay
//! + EMA), talking-motion editing, and from-scratch generation.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cfm::{self, FlowTime, LossWeights};
use crate::dit::{backward, forward, DiTConfig, DiTParameters};
use crate::error::{Error, Result};
use crate::masking::{
    build_edit_timeline, build_generation_timeline, sample_training_mask, EditTimeline,
    MaskSamplerConfig,
};
use crate::motion::{EditSpec, MotionSequence, SpeechFeatureSequence, TemporalMask};
use crate::sampler::{euler_solve, EmaState, SamplerConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub loss_weights: LossWeights,
    pub mask_cfg: MaskSamplerConfig,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-4,
            warmup_steps: 20_000,
            total_steps: 100_000,
            batch_size: 8,
            ema_decay: 0.999,
            loss_weights: LossWeights::default(),
            mask_cfg: MaskSamplerConfig::default(),
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_peak <= 0.0 || self.batch_size == 0 || self.total_steps == 0 {
            return Err(Error::validation("lr, batch size, total steps must be positive"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::validation("warmup_steps must be <= total_steps"));
        }
        if self.ema_decay < 0.0 || self.ema_decay >= 1.0 {
            return Err(Error::validation("ema_decay must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Piecewise-linear schedule: 0 -> lr_peak over warmup, then linearly to 0
/// at total_steps. lr(0)=0, lr(warmup)=peak, lr(total)=0.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step >= cfg.total_steps {
        return 0.0;
    }
    if cfg.warmup_steps > 0 && step < cfg.warmup_steps {
        cfg.lr_peak * step as f64 / cfg.warmup_steps as f64
    } else if cfg.total_steps == cfg.warmup_steps {
        cfg.lr_peak
    } else {
        let frac =
            (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
        cfg.lr_peak * (1.0 - frac)
    }
}

/// Decoupled-weight-decay Adam over the flattened parameter vector.
struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl AdamW {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let eps = 1e-8;
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * (mhat / (vhat.sqrt() + eps) + cfg.weight_decay * params[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossScalars {
    pub total: f64,
    pub cfm: f64,
    pub ts: f64,
    pub lr: f64,
}

/// Training state: parameters, optimizer moments, EMA shadow, step counter.
pub struct Trainer {
    pub model_cfg: DiTConfig,
    pub train_cfg: TrainConfig,
    pub params: DiTParameters,
    pub ema: EmaState,
    opt: AdamW,
    pub step: usize,
}

impl Trainer {
    pub fn new(model_cfg: DiTConfig, train_cfg: TrainConfig, params: DiTParameters) -> Result<Self> {
        model_cfg.validate()?;
        train_cfg.validate()?;
        let flat = params.to_flat();
        let n = flat.len();
        let ema = EmaState::new(flat, train_cfg.ema_decay)?;
        Ok(Self {
            model_cfg,
            train_cfg,
            params,
            ema,
            opt: AdamW::new(n),
            step: 0,
        })
    }

    /// EMA weights as a parameter struct, for inference.
    pub fn ema_params(&self) -> Result<DiTParameters> {
        let mut p = DiTParameters::zeros(&self.model_cfg);
        p.set_flat(&self.ema.shadow)?;
        Ok(p)
    }

    /// One optimizer step on a batch of paired sequences. All items in a
    /// batch must share motion length and speech length (the caller buckets).
    pub fn train_step(
        &mut self,
        batch: &[(MotionSequence, SpeechFeatureSequence)],
        rng: &mut impl Rng,
    ) -> Result<LossScalars> {
        if batch.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let t_len = batch[0].0.len();
        let n_len = batch[0].1.len();
        if batch
            .iter()
            .any(|(m, s)| m.len() != t_len || s.len() != n_len)
        {
            return Err(Error::validation(
                "batch items must share motion/speech lengths",
            ));
        }

        let mut grads = DiTParameters::zeros(&self.model_cfg);
        let mut total = 0.0;
        let mut cfm_sum = 0.0;
        let mut ts_sum = 0.0;
        let scale = 1.0 / batch.len() as f64;

        for (motion, speech) in batch {
            let x1 = motion.data();
            let t = FlowTime::new(rng.random::<f64>())?;
            let x0 = Array2::from_shape_fn(x1.raw_dim(), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            let mask = sample_training_mask(t_len, &self.train_cfg.mask_cfg, rng)?;
            let xt = cfm::interpolate(&x0, x1, t)?;
            let mask_mat = mask.to_matrix(x1.ncols());
            let cond = x1 * &(1.0 - &mask_mat);

            let (v_pred, cache) =
                forward(&self.params, &self.model_cfg, &xt, &cond, t.value(), speech.feats())?;
            let (terms, grad_v) = cfm::total_loss_and_grad(
                &v_pred,
                &xt,
                &x0,
                x1,
                t,
                &mask,
                self.train_cfg.loss_weights,
            )?;
            if !terms.total.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at step {} (cfm {}, ts {})",
                    self.step, terms.cfm, terms.ts
                )));
            }
            total += terms.total * scale;
            cfm_sum += terms.cfm * scale;
            ts_sum += terms.ts * scale;
            let d_v = grad_v.mapv(|g| g * scale);
            backward(&self.params, &self.model_cfg, &cache, &d_v, &mut grads);
        }

        let lr = lr_at(self.step, &self.train_cfg);
        let mut flat = self.params.to_flat();
        let gflat = grads.to_flat();
        self.opt.step(&mut flat, &gflat, lr, &self.train_cfg);
        self.params.set_flat(&flat)?;
        self.ema.update(&flat)?;
        self.step += 1;

        Ok(LossScalars {
            total,
            cfm: cfm_sum,
            ts: ts_sum,
            lr,
        })
    }
}

/// Velocity field backed by the DiT with fixed conditioning.
pub struct DiTField<'a> {
    pub params: &'a DiTParameters,
    pub cfg: &'a DiTConfig,
    pub cond: Array2<f64>,
    pub speech: &'a Array2<f64>,
}

impl crate::sampler::VelocityField for DiTField<'_> {
    fn velocity(&self, x: &Array2<f64>, t: FlowTime) -> Result<Array2<f64>> {
        let (v, _) = forward(self.params, self.cfg, x, &self.cond, t.value(), self.speech)?;
        Ok(v)
    }
}

fn solve_timeline(
    timeline: &EditTimeline,
    orig_data: &Array2<f64>,
    fps: f64,
    speech: &SpeechFeatureSequence,
    params: &DiTParameters,
    model_cfg: &DiTConfig,
    scfg: &SamplerConfig,
) -> Result<MotionSequence> {
    let placed = timeline.place_frames(orig_data)?;
    if timeline.new_total_frames == 0 {
        return Err(Error::validation("edit produces an empty sequence"));
    }
    let mask_mat = timeline.mask.to_matrix(placed.ncols());
    let cond = &placed * &(1.0 - &mask_mat);
    let field = DiTField {
        params,
        cfg: model_cfg,
        cond,
        speech: speech.feats(),
    };
    let out = euler_solve(&field, &placed, &timeline.mask, scfg)?;
    MotionSequence::new(out, fps)
}

/// Edit an utterance's motion: build the timeline for `spec`, copy surviving
/// frames, infill the masked span conditioned on the edited speech. Unmasked
/// frames of the output equal the originals bit-exactly.
pub fn edit_motion(
    orig: &MotionSequence,
    edited_speech: &SpeechFeatureSequence,
    spec: &EditSpec,
    params: &DiTParameters,
    model_cfg: &DiTConfig,
    scfg: &SamplerConfig,
) -> Result<MotionSequence> {
    let timeline = build_edit_timeline(orig.len(), spec)?;
    solve_timeline(
        &timeline,
        orig.data(),
        orig.fps(),
        edited_speech,
        params,
        model_cfg,
        scfg,
    )
}

/// Generate `t_target` new frames after an optional source prefix.
pub fn generate_motion(
    src_prefix: Option<&MotionSequence>,
    speech: &SpeechFeatureSequence,
    t_target: usize,
    fps: f64,
    params: &DiTParameters,
    model_cfg: &DiTConfig,
    scfg: &SamplerConfig,
) -> Result<MotionSequence> {
    let t_src = src_prefix.map_or(0, |m| m.len());
    let timeline = build_generation_timeline(t_src, t_target)?;
    let empty;
    let orig_data: &Array2<f64> = match src_prefix {
        Some(m) => m.data(),
        None => {
            empty = Array2::zeros((0, model_cfg.motion_width));
            &empty
        }
    };
    let fps = src_prefix.map_or(fps, |m| m.fps());
    solve_timeline(&timeline, orig_data, fps, speech, params, model_cfg, scfg)
}

/// Mean per-row L2 distance at masked rows; evaluation helper.
pub fn masked_mse(a: &Array2<f64>, b: &Array2<f64>, mask: &TemporalMask) -> Result<f64> {
    if a.dim() != b.dim() || mask.len() != a.nrows() {
        return Err(Error::validation("masked_mse shape mismatch"));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, flag) in mask.flags().iter().enumerate() {
        if *flag {
            let d = &a.index_axis(Axis(0), i) - &b.index_axis(Axis(0), i);
            sum += d.mapv(|x| x * x).sum();
            n += d.len();
        }
    }
    if n == 0 {
        return Err(Error::validation("no masked rows"));
    }
    Ok(sum / n as f64)
}
