//! Synthetic speech-to-motion oracle data, benchmark manifest handling, and
//! dataset emission. The oracle map is deterministic given the seed, so
//! ground-truth masked content is always recoverable for evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{
    write_motion, write_speech, EditKind, EditSpec, MotionSequence, SpeechFeatureSequence,
    DELTA_WIDTH, MOTION_WIDTH,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Dataset family seed: ties down the oracle projection W and the
    /// pose component, which are shared by every sample in a dataset so
    /// the speech-to-motion map is a single learnable function.
    pub seed: u64,
    /// Sample index within the family: varies only the speech draw.
    #[serde(default)]
    pub sample_index: u64,
    /// Motion frames.
    pub t: usize,
    /// Speech feature channels.
    pub d: usize,
    pub fps: f64,
    pub feature_rate_hz: f64,
    /// Temporal Gaussian kernel width, in frames/samples.
    pub smoothness_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sample_index: 0,
            t: 64,
            d: 32,
            fps: 25.0,
            feature_rate_hz: 50.0,
            smoothness_sigma: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.d == 0 {
            return Err(Error::validation("T and D must be positive"));
        }
        if !(self.fps > 0.0) || !(self.feature_rate_hz > 0.0) || !(self.smoothness_sigma > 0.0) {
            return Err(Error::validation("rates and sigma must be positive"));
        }
        Ok(())
    }

    pub fn speech_len(&self) -> usize {
        ((self.t as f64 / self.fps) * self.feature_rate_hz).round().max(1.0) as usize
    }

    /// Seed for per-sample draws: splitmix-style mix of the index so
    /// adjacent indices decorrelate fully.
    pub fn sample_seed(&self) -> u64 {
        let mut z = self.sample_index.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        self.seed ^ z ^ (z >> 31)
    }
}

/// Per-channel temporal Gaussian smoothing (truncated at 3 sigma).
fn smooth_columns(x: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let (n, d) = x.dim();
    Array2::from_shape_fn((n, d), |(i, j)| {
        let mut acc = 0.0;
        let mut wsum = 0.0;
        for (ki, kw) in kernel.iter().enumerate() {
            let off = ki as i64 - radius;
            let idx = i as i64 + off;
            if idx >= 0 && idx < n as i64 {
                acc += kw * x[[idx as usize, j]];
                wsum += kw;
            }
        }
        // renormalize at the ends so boundaries are not damped
        acc / wsum.max(ksum * 1e-12)
    })
}

/// Linear time resampling of an N x D matrix to T rows.
fn resample_time(x: &Array2<f64>, t_out: usize) -> Array2<f64> {
    let (n, d) = x.dim();
    Array2::from_shape_fn((t_out, d), |(i, j)| {
        if t_out == 1 || n == 1 {
            return x[[0.min(n - 1), j]];
        }
        let s = i as f64 * (n - 1) as f64 / (t_out - 1) as f64;
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let f = s - lo as f64;
        x[[lo, j]] * (1.0 - f) + x[[hi, j]] * f
    })
}

/// Seed-derived sparse-ish speech-to-motion projection W (D x 75). Each
/// entry is kept with probability 0.7; support is deterministic per seed.
pub fn oracle_projection(seed: u64, d: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5747_5f50_524f_4a00);
    let scale = 1.0 / (d as f64).sqrt();
    Array2::from_shape_fn((d, MOTION_WIDTH), |_| {
        let keep = rng.random::<f64>() < 0.7;
        let v: f64 = rng.sample(rand_distr::StandardNormal);
        if keep {
            v * scale
        } else {
            0.0
        }
    })
}

/// Deterministic low-frequency sinusoidal head-pose component on the
/// rotation/translation channels (columns 63..75).
fn pose_component(seed: u64, t: usize, fps: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x504f_5345_5f43_4f4d);
    let mut p = Array2::zeros((t, MOTION_WIDTH));
    for ch in DELTA_WIDTH..MOTION_WIDTH {
        let amp = 0.1 + 0.2 * rng.random::<f64>();
        // Hz; head pose drifts slowly, so a masked span covers well under
        // half a period and continuation from context is well-posed
        let freq = 0.1 + 0.3 * rng.random::<f64>();
        let phase = rng.random::<f64>() * std::f64::consts::TAU;
        for k in 0..t {
            let time = k as f64 / fps;
            p[[k, ch]] = amp * (std::f64::consts::TAU * freq * time + phase).sin();
        }
    }
    p
}

/// Draw one paired sample: speech A is smoothed white noise (N x D); motion
/// is F = smooth(resample_time(A) . W) + P with a fixed seed-derived W and a
/// sinusoidal pose term P. Deterministic given the config.
pub fn synth_pair(cfg: &SynthConfig) -> Result<(SpeechFeatureSequence, MotionSequence)> {
    cfg.validate()?;
    let n = cfg.speech_len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed());
    let white = Array2::from_shape_fn((n, cfg.d), |_| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let speech = smooth_columns(&white, cfg.smoothness_sigma);
    let motion = motion_from_speech(cfg, &speech)?;
    Ok((
        SpeechFeatureSequence::new(speech, cfg.feature_rate_hz)?,
        motion,
    ))
}

/// The deterministic speech-to-motion oracle map, exposed separately so
/// evaluations can recover ground truth for arbitrary speech.
pub fn motion_from_speech(cfg: &SynthConfig, speech: &Array2<f64>) -> Result<MotionSequence> {
    cfg.validate()?;
    if speech.ncols() != cfg.d {
        return Err(Error::validation("speech channel count mismatch"));
    }
    let w = oracle_projection(cfg.seed, cfg.d);
    let driven = resample_time(speech, cfg.t).dot(&w);
    let smoothed = smooth_columns(&driven, cfg.smoothness_sigma);
    let pose = pose_component(cfg.seed, cfg.t, cfg.fps);
    MotionSequence::new(smoothed + pose, cfg.fps)
}

/// Span-length class per Table-1-style word-count bands: 1-3 words (short),
/// 4-6 (medium), 7-10 (long), at 10 frames per word (0.4 s at 25 fps).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanClass {
    Short,
    Medium,
    Long,
}

pub const FRAMES_PER_WORD: usize = 10;

impl SpanClass {
    pub fn from_words(words: usize) -> Result<Self> {
        match words {
            1..=3 => Ok(SpanClass::Short),
            4..=6 => Ok(SpanClass::Medium),
            7..=10 => Ok(SpanClass::Long),
            _ => Err(Error::validation(format!(
                "word count {words} outside Table 1 bands (1-10)"
            ))),
        }
    }

    pub fn from_frames(frames: usize) -> Result<Self> {
        Self::from_words(frames.div_ceil(FRAMES_PER_WORD).max(1))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSample {
    pub id: String,
    pub motion_path: PathBuf,
    pub speech_path: PathBuf,
    pub edited_speech_path: PathBuf,
    pub edit: EditSpec,
    pub edit_kind: EditKind,
    pub span_class: SpanClass,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchManifest {
    pub samples: Vec<ManifestSample>,
}

impl BenchManifest {
    /// The edited span in frames that governs the span class: the new span
    /// for substitutions/insertions, the removed span for deletions.
    fn class_frames(s: &ManifestSample) -> usize {
        match s.edit_kind {
            EditKind::Deletion => s.edit.orig_end_frame - s.edit.orig_start_frame,
            _ => s.edit.new_span_frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            if s.edit_kind != s.edit.kind {
                return Err(Error::validation(format!(
                    "sample {}: edit_kind disagrees with edit.kind",
                    s.id
                )));
            }
            let expect = SpanClass::from_frames(Self::class_frames(s))?;
            if expect != s.span_class {
                return Err(Error::validation(format!(
                    "sample {}: span_class {:?} inconsistent with span length ({} frames)",
                    s.id, s.span_class, Self::class_frames(s)
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Load a manifest; relative sample paths resolve against the
    /// manifest's own directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path)?;
        let mut m: Self = serde_json::from_str(&json)?;
        if let Some(dir) = path.parent() {
            for s in &mut m.samples {
                for p in [&mut s.motion_path, &mut s.speech_path, &mut s.edited_speech_path] {
                    if p.is_relative() {
                        *p = dir.join(&p);
                    }
                }
            }
        }
        m.validate()?;
        Ok(m)
    }
}

/// Counts by (edit kind x span class); rows/columns always present so the
/// table partitions the sample set.
#[derive(Debug, Clone, Serialize)]
pub struct ManifestStats {
    pub cells: BTreeMap<String, BTreeMap<String, usize>>,
    pub kind_totals: BTreeMap<String, usize>,
    pub class_totals: BTreeMap<String, usize>,
    pub total: usize,
}

pub fn manifest_stats(m: &BenchManifest) -> Result<ManifestStats> {
    m.validate()?;
    let kinds = ["substitution", "insertion", "deletion"];
    let classes = ["short", "medium", "long"];
    let mut cells: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for k in kinds {
        let row: BTreeMap<String, usize> = classes.iter().map(|c| (c.to_string(), 0)).collect();
        cells.insert(k.to_string(), row);
    }
    for s in &m.samples {
        let k = s.edit_kind.to_string();
        let c = match s.span_class {
            SpanClass::Short => "short",
            SpanClass::Medium => "medium",
            SpanClass::Long => "long",
        };
        *cells
            .get_mut(&k)
            .ok_or_else(|| Error::validation(format!("unknown edit kind {k}")))?
            .get_mut(c)
            .unwrap() += 1;
    }
    let kind_totals: BTreeMap<String, usize> = cells
        .iter()
        .map(|(k, row)| (k.clone(), row.values().sum()))
        .collect();
    let mut class_totals: BTreeMap<String, usize> =
        classes.iter().map(|c| (c.to_string(), 0)).collect();
    for row in cells.values() {
        for (c, v) in row {
            *class_totals.get_mut(c).unwrap() += v;
        }
    }
    let total = m.samples.len();
    debug_assert_eq!(kind_totals.values().sum::<usize>(), total);
    Ok(ManifestStats {
        cells,
        kind_totals,
        class_totals,
        total,
    })
}

/// Emit a synthetic dataset: `count` paired samples plus a manifest with one
/// random edit spec per sample. Byte-identical output for identical seeds.
pub fn emit_dataset(base: &SynthConfig, count: usize, dir: impl AsRef<Path>) -> Result<BenchManifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let cfg = SynthConfig {
            sample_index: base.sample_index.wrapping_add(i as u64),
            ..base.clone()
        };
        let (speech, motion) = synth_pair(&cfg)?;
        let id = format!("sample_{i:05}");
        // stored relative so the dataset directory is relocatable and
        // byte-identical across identically seeded runs
        let motion_path = PathBuf::from(format!("{id}.fmot"));
        let speech_path = PathBuf::from(format!("{id}.sfea"));
        write_motion(&motion, dir.join(&motion_path))?;
        write_speech(&speech, dir.join(&speech_path))?;

        // deterministic random edit spec per sample
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.sample_seed() ^ 0x4544_4954_5350_4543);
        let words = rng.random_range(1..=10usize);
        let span = words * FRAMES_PER_WORD;
        let kind = match rng.random_range(0..3u8) {
            0 => EditKind::Substitution,
            1 => EditKind::Insertion,
            _ => EditKind::Deletion,
        };
        let t = base.t;
        let edit = match kind {
            EditKind::Substitution => {
                let len = span.min(t.saturating_sub(1)).max(1);
                let start = rng.random_range(0..=(t - len));
                EditSpec {
                    kind,
                    orig_start_frame: start,
                    orig_end_frame: start + len,
                    new_span_frames: span,
                    context_margin_frames: 0,
                }
            }
            EditKind::Insertion => {
                let at = rng.random_range(0..=t);
                EditSpec {
                    kind,
                    orig_start_frame: at,
                    orig_end_frame: at,
                    new_span_frames: span,
                    context_margin_frames: 0,
                }
            }
            EditKind::Deletion => {
                let len = span.min(t.saturating_sub(1)).max(1);
                let start = rng.random_range(0..=(t - len));
                EditSpec {
                    kind,
                    orig_start_frame: start,
                    orig_end_frame: start + len,
                    new_span_frames: 0,
                    context_margin_frames: 0,
                }
            }
        };
        let class_frames = match kind {
            EditKind::Deletion => edit.orig_end_frame - edit.orig_start_frame,
            _ => edit.new_span_frames,
        };
        samples.push(ManifestSample {
            id,
            motion_path,
            speech_path: speech_path.clone(),
            // the synthetic oracle uses one coherent feature sequence
            edited_speech_path: speech_path,
            edit,
            edit_kind: kind,
            span_class: SpanClass::from_frames(class_frames)?,
        });
    }
    let manifest = BenchManifest { samples };
    manifest.validate()?;
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Per-channel mean and variance of a motion sequence, for normalized-error
/// thresholds.
pub fn channel_variance(m: &MotionSequence) -> Array1<f64> {
    let data = m.data();
    let t = data.nrows() as f64;
    let mean = data.sum_axis(ndarray::Axis(0)) / t;
    let mut var = Array1::zeros(data.ncols());
    for row in data.rows() {
        let d = &row - &mean;
        var = var + d.mapv(|x| x * x);
    }
    var / t
}
