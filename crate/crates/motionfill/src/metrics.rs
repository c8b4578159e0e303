//! Boundary-continuity evaluation: photometric and motion continuity at
//! edit seams, identity similarity, and a motion-latent analogue.

use ndarray::Array3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::masking::EditTimeline;
use crate::motion::{FrameSequence, MotionSequence};
use crate::resample::FlowField;

/// Direction of a seam between unedited and edited content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BoundaryDirection {
    /// last original frame -> first edited frame
    IntoEdit,
    /// last edited frame -> first original frame
    OutOfEdit,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Boundary {
    /// Index of the edited-side frame of the seam pair.
    pub frame: usize,
    pub direction: BoundaryDirection,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundarySet {
    pub boundaries: Vec<Boundary>,
}

impl BoundarySet {
    pub fn new(mut boundaries: Vec<Boundary>) -> Self {
        boundaries.sort_by_key(|b| b.frame);
        Self { boundaries }
    }

    pub fn is_empty(&self) -> bool {
        self.boundaries.is_empty()
    }

    /// Seams implied by an edit timeline: every transition between masked
    /// and unmasked runs of the edited sequence.
    pub fn from_timeline(timeline: &EditTimeline) -> Self {
        let flags = timeline.mask.flags();
        let mut out = Vec::new();
        for k in 1..flags.len() {
            if !flags[k - 1] && flags[k] {
                out.push(Boundary {
                    frame: k,
                    direction: BoundaryDirection::IntoEdit,
                });
            } else if flags[k - 1] && !flags[k] {
                out.push(Boundary {
                    frame: k - 1,
                    direction: BoundaryDirection::OutOfEdit,
                });
            }
        }
        Self::new(out)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundaryScore {
    pub frame: usize,
    pub cross: f64,
    pub baseline: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub p_continuity: f64,
    pub m_continuity: f64,
    pub idsim: f64,
    pub motion_continuity_latent: f64,
    pub per_boundary: Vec<BoundaryScore>,
}

/// Per-pixel mean absolute difference between two frames.
fn frame_mad(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n
}

const BASELINE_WINDOW: usize = 10;

/// Baseline statistic over up to `BASELINE_WINDOW` adjacent pairs of the
/// original sequence near `frame`, clipped at sequence ends.
fn baseline_pairs(t: usize, frame: usize) -> Vec<(usize, usize)> {
    if t < 2 {
        return Vec::new();
    }
    let half = BASELINE_WINDOW / 2;
    let lo = frame.saturating_sub(half).min(t - 2);
    let hi = (lo + BASELINE_WINDOW).min(t - 1);
    let lo = hi.saturating_sub(BASELINE_WINDOW);
    (lo..hi).map(|i| (i, i + 1)).collect()
}

fn boundary_pair(b: &Boundary, t_edited: usize) -> Option<(usize, usize)> {
    // (original-side frame, edited-side frame) of the seam, in edited coords
    match b.direction {
        BoundaryDirection::IntoEdit => {
            if b.frame == 0 {
                None
            } else {
                Some((b.frame - 1, b.frame))
            }
        }
        BoundaryDirection::OutOfEdit => {
            if b.frame + 1 >= t_edited {
                None
            } else {
                Some((b.frame + 1, b.frame))
            }
        }
    }
}

/// Pixel-level continuity at edit seams: mean over boundaries of
/// max(0, d_cross - d_base), where d_cross is the mean abs difference across
/// the seam pair and d_base the mean adjacent-frame difference in the
/// original's neighborhood. Zero when the seam is indistinguishable from
/// natural frame-to-frame change.
pub fn photometric_continuity(
    orig: &FrameSequence,
    edited: &FrameSequence,
    b: &BoundarySet,
) -> Result<(f64, Vec<BoundaryScore>)> {
    if b.is_empty() {
        return Err(Error::validation("empty boundary set"));
    }
    let mut scores = Vec::new();
    for boundary in &b.boundaries {
        let Some((orig_side, edit_side)) = boundary_pair(boundary, edited.len()) else {
            continue;
        };
        if orig_side >= edited.len() || edit_side >= edited.len() {
            return Err(Error::validation("boundary outside edited sequence"));
        }
        let d_cross = frame_mad(&edited.frames[orig_side], &edited.frames[edit_side]);
        let pairs = baseline_pairs(orig.len(), orig_side.min(orig.len().saturating_sub(1)));
        let d_base = if pairs.is_empty() {
            0.0
        } else {
            pairs
                .iter()
                .map(|&(i, j)| frame_mad(&orig.frames[i], &orig.frames[j]))
                .sum::<f64>()
                / pairs.len() as f64
        };
        let score = (d_cross - d_base).max(0.0);
        scores.push(BoundaryScore {
            frame: boundary.frame,
            cross: d_cross,
            baseline: d_base,
            score,
        });
    }
    if scores.is_empty() {
        return Err(Error::validation("no interior boundaries to score"));
    }
    let mean = scores.iter().map(|s| s.score).sum::<f64>() / scores.len() as f64;
    Ok((mean, scores))
}

/// Optical-flow-magnitude continuity at edit seams, same baseline-subtracted
/// clamped form as the photometric metric. `flow_fn` conforms to
/// dense_flow's contract.
pub fn motion_continuity<F>(
    orig: &FrameSequence,
    edited: &FrameSequence,
    b: &BoundarySet,
    flow_fn: F,
) -> Result<(f64, Vec<BoundaryScore>)>
where
    F: Fn(&Array3<f64>, &Array3<f64>) -> Result<FlowField>,
{
    if b.is_empty() {
        return Err(Error::validation("empty boundary set"));
    }
    let mut scores = Vec::new();
    for boundary in &b.boundaries {
        let Some((orig_side, edit_side)) = boundary_pair(boundary, edited.len()) else {
            continue;
        };
        if orig_side >= edited.len() || edit_side >= edited.len() {
            return Err(Error::validation("boundary outside edited sequence"));
        }
        let m_cross = flow_fn(&edited.frames[orig_side], &edited.frames[edit_side])?
            .mean_magnitude();
        let pairs = baseline_pairs(orig.len(), orig_side.min(orig.len().saturating_sub(1)));
        let m_base = if pairs.is_empty() {
            0.0
        } else {
            let mut sum = 0.0;
            for &(i, j) in &pairs {
                sum += flow_fn(&orig.frames[i], &orig.frames[j])?.mean_magnitude();
            }
            sum / pairs.len() as f64
        };
        let score = (m_cross - m_base).max(0.0);
        scores.push(BoundaryScore {
            frame: boundary.frame,
            cross: m_cross,
            baseline: m_base,
            score,
        });
    }
    if scores.is_empty() {
        return Err(Error::validation("no interior boundaries to score"));
    }
    let mean = scores.iter().map(|s| s.score).sum::<f64>() / scores.len() as f64;
    Ok((mean, scores))
}

/// Maps a frame to an identity feature vector.
pub trait IdentityEmbedder {
    fn embed(&self, frame: &Array3<f64>) -> Vec<f64>;
}

/// Deterministic toy embedder: 4x4 downsampled grayscale plus a coarse
/// gradient-orientation histogram. A stand-in for a face-recognition
/// backbone in tests.
pub struct ToyEmbedder;

impl IdentityEmbedder for ToyEmbedder {
    fn embed(&self, frame: &Array3<f64>) -> Vec<f64> {
        let (h, w, _) = frame.dim();
        let gray = |y: usize, x: usize| {
            0.299 * frame[[y, x, 0]] + 0.587 * frame[[y, x, 1]] + 0.114 * frame[[y, x, 2]]
        };
        let mut feat = Vec::with_capacity(16 + 8);
        // 4x4 pooled grayscale, zero-centered
        for by in 0..4 {
            for bx in 0..4 {
                let y0 = by * h / 4;
                let y1 = ((by + 1) * h / 4).max(y0 + 1).min(h);
                let x0 = bx * w / 4;
                let x1 = ((bx + 1) * w / 4).max(x0 + 1).min(w);
                let mut sum = 0.0;
                let mut n = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += gray(y, x);
                        n += 1.0;
                    }
                }
                feat.push(sum / n - 0.5);
            }
        }
        // 8-bin gradient orientation histogram
        let mut hist = [0.0f64; 8];
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let gx = gray(y, x + 1) - gray(y, x - 1);
                let gy = gray(y + 1, x) - gray(y - 1, x);
                let mag = (gx * gx + gy * gy).sqrt();
                if mag < 1e-9 {
                    continue;
                }
                let ang = gy.atan2(gx); // [-pi, pi]
                let bin = (((ang + std::f64::consts::PI) / (2.0 * std::f64::consts::PI) * 8.0)
                    .floor() as usize)
                    .min(7);
                hist[bin] += mag;
            }
        }
        let total: f64 = hist.iter().sum::<f64>().max(1e-9);
        feat.extend(hist.iter().map(|v| v / total));
        feat
    }
}

/// Cosine similarity between the mean embedding of `orig` frames and the
/// mean embedding of `gen` frames.
pub fn idsim<E: IdentityEmbedder>(
    orig: &FrameSequence,
    gen: &FrameSequence,
    embedder: &E,
) -> Result<f64> {
    let mean_embed = |seq: &FrameSequence| -> Vec<f64> {
        let mut acc: Vec<f64> = Vec::new();
        for frame in &seq.frames {
            let e = embedder.embed(frame);
            if acc.is_empty() {
                acc = e;
            } else {
                for (a, b) in acc.iter_mut().zip(&e) {
                    *a += b;
                }
            }
        }
        let n = seq.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    };
    let a = mean_embed(orig);
    let b = mean_embed(gen);
    if a.len() != b.len() {
        return Err(Error::validation("embedding dimension mismatch"));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::numeric("zero-norm mean embedding"));
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Motion-domain analogue of boundary continuity: mean boundary-adjacent
/// L1 frame difference minus the sequence's median adjacent difference,
/// clamped at zero.
pub fn motion_continuity_latent(motion: &MotionSequence, b: &BoundarySet) -> Result<f64> {
    let t = motion.len();
    if t < 2 {
        return Err(Error::validation("motion_continuity_latent requires T >= 2"));
    }
    if b.is_empty() {
        return Err(Error::validation("empty boundary set"));
    }
    let data = motion.data();
    let adjacent_l1 = |k: usize| -> f64 {
        let d = &data.row(k) - &data.row(k - 1);
        d.mapv(f64::abs).sum()
    };
    let mut all: Vec<f64> = (1..t).map(adjacent_l1).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if all.len() % 2 == 1 {
        all[all.len() / 2]
    } else {
        0.5 * (all[all.len() / 2 - 1] + all[all.len() / 2])
    };
    let mut sum = 0.0;
    let mut n = 0.0;
    for boundary in &b.boundaries {
        let k = boundary.frame.clamp(1, t - 1);
        sum += adjacent_l1(k);
        n += 1.0;
    }
    Ok((sum / n - median).max(0.0))
}
