//! Random span masking for training and mask/timeline construction for
//! editing and generation.
//!
//! An [`EditTimeline`] describes the edited sequence's coordinate system:
//! its length, which frames are synthesized (the mask), and where each
//! surviving original frame lands (the copy map).

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{EditSpec, TemporalMask};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaskSamplerConfig {
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub n_spans: usize,
}

impl MaskSamplerConfig {
    pub fn new(min_ratio: f64, max_ratio: f64, n_spans: usize) -> Result<Self> {
        if !(0.0 < min_ratio && min_ratio <= 1.0) || !(0.0 < max_ratio && max_ratio <= 1.0) {
            return Err(Error::validation("mask ratios must lie in (0, 1]"));
        }
        if min_ratio > max_ratio {
            return Err(Error::validation("min_ratio must not exceed max_ratio"));
        }
        if n_spans == 0 {
            return Err(Error::validation("n_spans must be positive"));
        }
        Ok(Self { min_ratio, max_ratio, n_spans })
    }
}

impl Default for MaskSamplerConfig {
    /// Single contiguous span, masked ratio uniform in [0.1, 0.9].
    fn default() -> Self {
        Self { min_ratio: 0.1, max_ratio: 0.9, n_spans: 1 }
    }
}

/// Draw a training mask: `n_spans` disjoint contiguous spans whose total
/// masked ratio lies in [min_ratio, max_ratio]. Deterministic given the rng.
pub fn sample_training_mask(
    t: usize,
    cfg: &MaskSamplerConfig,
    rng: &mut impl Rng,
) -> Result<TemporalMask> {
    if t < 2 {
        return Err(Error::validation("training mask requires T >= 2"));
    }
    let lo = (cfg.min_ratio * t as f64).ceil() as usize;
    let hi = (cfg.max_ratio * t as f64).floor() as usize;
    let lo = lo.max(cfg.n_spans).max(1);
    let hi = hi.min(t);
    if hi < lo {
        return Err(Error::validation(format!(
            "infeasible mask config: no total in [{lo}, {hi}] for T={t}, n_spans={}",
            cfg.n_spans
        )));
    }
    // spans must stay disjoint and non-adjacent, which costs n_spans-1 gap frames
    if hi + cfg.n_spans - 1 > t && lo + cfg.n_spans - 1 > t {
        return Err(Error::validation(format!(
            "infeasible mask config: {} spans do not fit in T={t}",
            cfg.n_spans
        )));
    }
    let hi = hi.min(t - (cfg.n_spans - 1));
    let total = rng.random_range(lo..=hi);

    // split total into n_spans positive lengths via random cut points
    let mut lengths = vec![1usize; cfg.n_spans];
    for _ in 0..total - cfg.n_spans {
        let i = rng.random_range(0..cfg.n_spans);
        lengths[i] += 1;
    }
    // distribute the remaining slack among the n_spans + 1 gaps
    let slack = t - total - (cfg.n_spans - 1);
    let mut gaps = vec![0usize; cfg.n_spans + 1];
    for _ in 0..slack {
        let i = rng.random_range(0..gaps.len());
        gaps[i] += 1;
    }

    let mut flags = vec![false; t];
    let mut pos = 0;
    for (i, &len) in lengths.iter().enumerate() {
        pos += gaps[i];
        if i > 0 {
            pos += 1; // separating gap frame
        }
        for f in flags.iter_mut().skip(pos).take(len) {
            *f = true;
        }
        pos += len;
    }
    TemporalMask::new(flags)
}

/// The edited sequence's coordinate system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditTimeline {
    pub new_total_frames: usize,
    pub mask: TemporalMask,
    /// (source_frame, target_frame) pairs for surviving original content,
    /// strictly increasing in both coordinates.
    pub copy_map: Vec<(usize, usize)>,
}

impl EditTimeline {
    /// Place surviving original frames at their target positions; masked
    /// positions are left zero.
    pub fn place_frames(&self, orig: &Array2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((self.new_total_frames, orig.ncols()));
        for &(src, dst) in &self.copy_map {
            if src >= orig.nrows() {
                return Err(Error::validation(format!(
                    "copy_map source {src} outside original length {}",
                    orig.nrows()
                )));
            }
            out.row_mut(dst).assign(&orig.row(src));
        }
        Ok(out)
    }
}

/// Build the timeline for an edit: the new length, the synthesized span
/// (extended by the context margin on each side), and the copy map for
/// surviving original frames.
pub fn build_edit_timeline(t_orig: usize, spec: &EditSpec) -> Result<EditTimeline> {
    spec.validate(t_orig)?;
    let (s, e) = (spec.orig_start_frame, spec.orig_end_frame);
    let removed = e - s;
    let added = spec.new_span_frames;
    let t_new = t_orig - removed + added;
    if t_new == 0 {
        return Err(Error::validation("edit removes the entire sequence"));
    }

    let m = spec.context_margin_frames;
    let mask_start = s.saturating_sub(m);
    let mask_end = (s + added + m).min(t_new);

    let masked = |dst: usize| dst >= mask_start && dst < mask_end;

    let mut copy_map = Vec::with_capacity(t_orig - removed);
    for src in 0..s {
        if !masked(src) {
            copy_map.push((src, src));
        }
    }
    for src in e..t_orig {
        let dst = src - e + s + added;
        if !masked(dst) {
            copy_map.push((src, dst));
        }
    }

    let mut flags = vec![true; t_new];
    for &(_, dst) in &copy_map {
        flags[dst] = false;
    }
    Ok(EditTimeline {
        new_total_frames: t_new,
        mask: TemporalMask::new(flags)?,
        copy_map,
    })
}

/// Timeline for from-scratch or continued generation: an insertion at the
/// end of the source, masked on [T_src, T_src + T_target).
pub fn build_generation_timeline(t_src: usize, t_target: usize) -> Result<EditTimeline> {
    if t_target == 0 {
        return Err(Error::validation("generation target length must be >= 1"));
    }
    let t_new = t_src + t_target;
    let mut flags = vec![false; t_new];
    for f in flags.iter_mut().skip(t_src) {
        *f = true;
    }
    Ok(EditTimeline {
        new_total_frames: t_new,
        mask: TemporalMask::new(flags)?,
        copy_map: (0..t_src).map(|i| (i, i)).collect(),
    })
}
