//! Domain types for motion sequences, speech features, masks, and edit specs,
//! plus the portable binary file formats.
//!
//! A motion frame is a flat 75-vector `[delta (63) | rot (9) | trans (3)]`:
//! expression deformation (21x3), head rotation (3x3), and translation (1x3).
//! The model consumes frames as opaque flat vectors; component views are
//! provided for consumers that care about the decomposition.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DELTA_WIDTH: usize = 63;
pub const ROT_WIDTH: usize = 9;
pub const TRANS_WIDTH: usize = 3;
/// Total per-frame channel count: 63 + 9 + 3.
pub const MOTION_WIDTH: usize = DELTA_WIDTH + ROT_WIDTH + TRANS_WIDTH;

const MOTION_MAGIC: &[u8; 4] = b"FMOT";
const SPEECH_MAGIC: &[u8; 4] = b"SFEA";
const FORMAT_VERSION: u32 = 1;

/// Borrowed view of a single 75-wide motion frame.
#[derive(Debug, Clone, Copy)]
pub struct MotionFrame<'a> {
    row: ArrayView1<'a, f64>,
}

impl<'a> MotionFrame<'a> {
    pub fn delta(&self) -> ArrayView1<'a, f64> {
        self.row.slice_move(s![..DELTA_WIDTH])
    }

    pub fn rot(&self) -> ArrayView1<'a, f64> {
        self.row.slice_move(s![DELTA_WIDTH..DELTA_WIDTH + ROT_WIDTH])
    }

    pub fn trans(&self) -> ArrayView1<'a, f64> {
        self.row.slice_move(s![DELTA_WIDTH + ROT_WIDTH..])
    }

    pub fn as_view(&self) -> ArrayView1<'a, f64> {
        self.row
    }
}

/// A T x 75 sequence of motion latents at a fixed frame rate.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    data: Array2<f64>,
    fps: f64,
}

impl MotionSequence {
    pub fn new(data: Array2<f64>, fps: f64) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::validation("motion sequence must have T >= 1"));
        }
        if data.ncols() != MOTION_WIDTH {
            return Err(Error::validation(format!(
                "motion width must be {MOTION_WIDTH}, got {}",
                data.ncols()
            )));
        }
        if !(fps > 0.0) {
            return Err(Error::validation(format!("fps must be positive, got {fps}")));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("motion values must be finite"));
        }
        Ok(Self { data, fps })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // T >= 1 by construction
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn frame(&self, i: usize) -> MotionFrame<'_> {
        MotionFrame { row: self.data.row(i) }
    }

    /// Split into (delta, rot, trans) channel views; concatenating them along
    /// channels reproduces the original sequence.
    pub fn component_views(&self) -> (ArrayView2<'_, f64>, ArrayView2<'_, f64>, ArrayView2<'_, f64>) {
        (
            self.data.slice(s![.., ..DELTA_WIDTH]),
            self.data.slice(s![.., DELTA_WIDTH..DELTA_WIDTH + ROT_WIDTH]),
            self.data.slice(s![.., DELTA_WIDTH + ROT_WIDTH..]),
        )
    }
}

/// N x D speech conditioning features at a fixed feature rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeechFeatureSequence {
    feats: Array2<f64>,
    feature_rate_hz: f64,
}

impl SpeechFeatureSequence {
    pub fn new(feats: Array2<f64>, feature_rate_hz: f64) -> Result<Self> {
        if feats.nrows() == 0 || feats.ncols() == 0 {
            return Err(Error::validation("speech features must be non-empty (N >= 1, D >= 1)"));
        }
        if !(feature_rate_hz > 0.0) {
            return Err(Error::validation("feature rate must be positive"));
        }
        if !feats.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("speech features must be finite"));
        }
        Ok(Self { feats, feature_rate_hz })
    }

    pub fn len(&self) -> usize {
        self.feats.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.feats.ncols()
    }

    pub fn feature_rate_hz(&self) -> f64 {
        self.feature_rate_hz
    }

    pub fn feats(&self) -> &Array2<f64> {
        &self.feats
    }
}

/// Per-frame binary mask; `true` marks frames to synthesize. Broadcasting to
/// T x 75 yields a channel-uniform mask (constant rows).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalMask {
    flags: Vec<bool>,
}

impl TemporalMask {
    pub fn new(flags: Vec<bool>) -> Result<Self> {
        if flags.is_empty() {
            return Err(Error::validation("mask must cover at least one frame"));
        }
        Ok(Self { flags })
    }

    pub fn all_true(len: usize) -> Result<Self> {
        Self::new(vec![true; len])
    }

    pub fn all_false(len: usize) -> Result<Self> {
        Self::new(vec![false; len])
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.flags[i]
    }

    pub fn masked_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn any(&self) -> bool {
        self.flags.iter().any(|&f| f)
    }

    /// Broadcast to a T x width matrix of {0.0, 1.0}, rows constant.
    pub fn to_matrix(&self, width: usize) -> Array2<f64> {
        let mut m = Array2::zeros((self.flags.len(), width));
        for (i, &f) in self.flags.iter().enumerate() {
            if f {
                m.row_mut(i).fill(1.0);
            }
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    Substitution,
    Insertion,
    Deletion,
}

impl std::fmt::Display for EditKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EditKind::Substitution => "substitution",
            EditKind::Insertion => "insertion",
            EditKind::Deletion => "deletion",
        };
        f.write_str(s)
    }
}

/// An edit operation on the original timeline: a half-open frame span to
/// replace, the replacement length, and a context margin masked around the
/// seam so the model can smooth it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSpec {
    pub kind: EditKind,
    pub orig_start_frame: usize,
    pub orig_end_frame: usize,
    pub new_span_frames: usize,
    #[serde(default)]
    pub context_margin_frames: usize,
}

impl EditSpec {
    pub fn validate(&self, t_orig: usize) -> Result<()> {
        if self.orig_start_frame > self.orig_end_frame {
            return Err(Error::validation(format!(
                "edit span start {} exceeds end {}",
                self.orig_start_frame, self.orig_end_frame
            )));
        }
        if self.orig_end_frame > t_orig {
            return Err(Error::validation(format!(
                "edit span end {} outside original length {t_orig}",
                self.orig_end_frame
            )));
        }
        match self.kind {
            EditKind::Insertion if self.orig_start_frame != self.orig_end_frame => {
                Err(Error::validation("insertion requires an empty original span"))
            }
            EditKind::Deletion if self.new_span_frames != 0 => {
                Err(Error::validation("deletion requires new_span_frames == 0"))
            }
            _ => Ok(()),
        }
    }

    /// Convert a span in seconds to a frame-resolved spec (frame = round(s * fps)).
    pub fn frame_of_seconds(seconds: f64, fps: f64) -> usize {
        (seconds * fps).round().max(0.0) as usize
    }
}

/// A sequence of H x W x 3 frames with values in [0, 1].
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Vec<Array3<f64>>,
    pub fps: f64,
}

impl FrameSequence {
    pub fn new(frames: Vec<Array3<f64>>, fps: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::validation("frame sequence must be non-empty"));
        }
        if !(fps > 0.0) {
            return Err(Error::validation("fps must be positive"));
        }
        let dim = frames[0].dim();
        if dim.2 != 3 {
            return Err(Error::validation("frames must have 3 channels"));
        }
        if frames.iter().any(|f| f.dim() != dim) {
            return Err(Error::validation("all frames must share dimensions"));
        }
        Ok(Self { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn height(&self) -> usize {
        self.frames[0].dim().0
    }

    pub fn width(&self) -> usize {
        self.frames[0].dim().1
    }
}

/// Motion file: magic "FMOT", version u32 LE, T u32, C u32 (=75), fps f32,
/// then T*C f32 LE row-major.
pub fn write_motion(seq: &MotionSequence, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MOTION_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(seq.len() as u32)?;
    w.write_u32::<LittleEndian>(MOTION_WIDTH as u32)?;
    w.write_f32::<LittleEndian>(seq.fps() as f32)?;
    for v in seq.data().iter() {
        w.write_f32::<LittleEndian>(*v as f32)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_motion(path: impl AsRef<Path>) -> Result<MotionSequence> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MOTION_MAGIC {
        return Err(Error::format(format!("bad motion magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported motion file version {version}")));
    }
    let t = r.read_u32::<LittleEndian>()? as usize;
    let c = r.read_u32::<LittleEndian>()? as usize;
    if c != MOTION_WIDTH {
        return Err(Error::validation(format!(
            "motion file channel count {c} != {MOTION_WIDTH}"
        )));
    }
    let fps = r.read_f32::<LittleEndian>()? as f64;
    let data = read_f32_matrix(&mut r, t, c)?;
    MotionSequence::new(data, fps)
}

/// Speech-feature file: magic "SFEA", version u32 LE, N u32, D u32,
/// feature_rate f32, then N*D f32 LE row-major.
pub fn write_speech(seq: &SpeechFeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SPEECH_MAGIC)?;
    w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
    w.write_u32::<LittleEndian>(seq.len() as u32)?;
    w.write_u32::<LittleEndian>(seq.dim() as u32)?;
    w.write_f32::<LittleEndian>(seq.feature_rate_hz() as f32)?;
    for v in seq.feats().iter() {
        w.write_f32::<LittleEndian>(*v as f32)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_speech(path: impl AsRef<Path>) -> Result<SpeechFeatureSequence> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SPEECH_MAGIC {
        return Err(Error::format(format!("bad speech magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!("unsupported speech file version {version}")));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let d = r.read_u32::<LittleEndian>()? as usize;
    let rate = r.read_f32::<LittleEndian>()? as f64;
    let feats = read_f32_matrix(&mut r, n, d)?;
    SpeechFeatureSequence::new(feats, rate)
}

fn read_f32_matrix(r: &mut impl Read, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format("matrix size overflow"))?;
    let mut buf = vec![0f32; count];
    r.read_f32_into::<LittleEndian>(&mut buf)
        .map_err(|e| Error::format(format!("truncated payload: {e}")))?;
    Array2::from_shape_vec((rows, cols), buf.into_iter().map(f64::from).collect())
        .map_err(|e| Error::format(e.to_string()))
}
