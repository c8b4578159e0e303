//! Frame resampling for duration changes: classical coarse-to-fine dense
//! optical flow, flow-based frame interpolation with region splitting, and
//! frame container IO (raw FVID files or numbered PNG directories).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::motion::FrameSequence;

/// Per-pixel displacement in pixels: u along x (columns), v along y (rows).
#[derive(Debug, Clone)]
pub struct FlowField {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            u: Array2::zeros((h, w)),
            v: Array2::zeros((h, w)),
        }
    }

    pub fn mean_magnitude(&self) -> f64 {
        let n = self.u.len() as f64;
        self.u
            .iter()
            .zip(self.v.iter())
            .map(|(a, b)| (a * a + b * b).sqrt())
            .sum::<f64>()
            / n
    }
}

/// true = facial region.
#[derive(Debug, Clone)]
pub struct RegionMask {
    pub face: Array2<bool>,
}

impl RegionMask {
    /// Centered-ellipse face mask covering roughly the middle of the frame;
    /// test stand-in for a detector.
    pub fn centered_ellipse(h: usize, w: usize) -> Self {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (ry, rx) = (h as f64 * 0.35, w as f64 * 0.3);
        let face = Array2::from_shape_fn((h, w), |(y, x)| {
            let dy = (y as f64 - cy) / ry.max(1e-9);
            let dx = (x as f64 - cx) / rx.max(1e-9);
            dy * dy + dx * dx <= 1.0
        });
        Self { face }
    }

    pub fn all_background(h: usize, w: usize) -> Self {
        Self {
            face: Array2::from_elem((h, w), false),
        }
    }
}

fn to_gray(frame: &Array3<f64>) -> Array2<f64> {
    let (h, w, _) = frame.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * frame[[y, x, 0]] + 0.587 * frame[[y, x, 1]] + 0.114 * frame[[y, x, 2]]
    })
}

/// 2x2 box downsampling (odd trailing row/col averaged over what exists).
fn downsample(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    Array2::from_shape_fn((h2, w2), |(y, x)| {
        let mut sum = 0.0;
        let mut n = 0.0;
        for dy in 0..2 {
            for dx in 0..2 {
                let (yy, xx) = (2 * y + dy, 2 * x + dx);
                if yy < h && xx < w {
                    sum += img[[yy, xx]];
                    n += 1.0;
                }
            }
        }
        sum / n
    })
}

fn bilinear(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let yc = y.clamp(0.0, (h - 1) as f64);
    let xc = x.clamp(0.0, (w - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;
    img[[y0, x0]] * (1.0 - fy) * (1.0 - fx)
        + img[[y0, x1]] * (1.0 - fy) * fx
        + img[[y1, x0]] * fy * (1.0 - fx)
        + img[[y1, x1]] * fy * fx
}

/// 3x3 box blur, used to regularize the flow between iterations.
fn box3(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut sum = 0.0;
        let mut n = 0.0;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let yy = y as i64 + dy;
                let xx = x as i64 + dx;
                if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                    sum += img[[yy as usize, xx as usize]];
                    n += 1.0;
                }
            }
        }
        sum / n
    })
}

const PYRAMID_LEVELS: usize = 3;
const WARP_ITERS: usize = 5;
const LK_RADIUS: i64 = 3;

/// One Lucas-Kanade refinement pass at a single pyramid level: warp `b` by
/// the current flow, then solve the local 7x7 least-squares system per pixel.
fn lk_refine(a: &Array2<f64>, b: &Array2<f64>, flow: &mut FlowField) {
    let (h, w) = a.dim();
    // warped b and spatial gradients of the warped image; samples whose
    // source lands outside b are clamped by bilinear() and would inject
    // spurious temporal differences, so they are excluded from the solve
    let warped = Array2::from_shape_fn((h, w), |(y, x)| {
        bilinear(b, y as f64 + flow.v[[y, x]], x as f64 + flow.u[[y, x]])
    });
    let valid = Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = y as f64 + flow.v[[y, x]];
        let sx = x as f64 + flow.u[[y, x]];
        sy >= 0.0 && sy <= (h - 1) as f64 && sx >= 0.0 && sx <= (w - 1) as f64
    });
    let gx = Array2::from_shape_fn((h, w), |(y, x)| {
        let x0 = x.saturating_sub(1);
        let x1 = (x + 1).min(w - 1);
        (warped[[y, x1]] - warped[[y, x0]]) / (x1 - x0).max(1) as f64
    });
    let gy = Array2::from_shape_fn((h, w), |(y, x)| {
        let y0 = y.saturating_sub(1);
        let y1 = (y + 1).min(h - 1);
        (warped[[y1, x]] - warped[[y0, x]]) / (y1 - y0).max(1) as f64
    });
    let it = &warped - a;

    let mut du = Array2::zeros((h, w));
    let mut dv = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (mut sxx, mut sxy, mut syy, mut sxt, mut syt) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -LK_RADIUS..=LK_RADIUS {
                for dx in -LK_RADIUS..=LK_RADIUS {
                    let yy = y as i64 + dy;
                    let xx = x as i64 + dx;
                    if yy < 0 || yy >= h as i64 || xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    let (yy, xx) = (yy as usize, xx as usize);
                    if !valid[[yy, xx]] {
                        continue;
                    }
                    let (ix, iy, t) = (gx[[yy, xx]], gy[[yy, xx]], it[[yy, xx]]);
                    sxx += ix * ix;
                    sxy += ix * iy;
                    syy += iy * iy;
                    sxt += ix * t;
                    syt += iy * t;
                }
            }
            // damped 2x2 solve; the damping suppresses noise in flat regions
            let lambda = 1e-4;
            let det = (sxx + lambda) * (syy + lambda) - sxy * sxy;
            if det.abs() > 1e-12 {
                du[[y, x]] = -((syy + lambda) * sxt - sxy * syt) / det;
                dv[[y, x]] = -((sxx + lambda) * syt - sxy * sxt) / det;
            }
        }
    }
    flow.u = box3(&(&flow.u + &du));
    flow.v = box3(&(&flow.v + &dv));
}

/// Dense flow a -> b: classical pyramidal (coarse-to-fine) gradient-based
/// estimation, 3 levels, 5 warping iterations per level. Identical frames
/// produce an exactly zero field.
pub fn dense_flow(a: &Array3<f64>, b: &Array3<f64>) -> Result<FlowField> {
    if a.dim() != b.dim() {
        return Err(Error::validation("dense_flow frames differ in dimensions"));
    }
    if a == b {
        return Ok(FlowField::zeros(a.dim().0, a.dim().1));
    }
    let ga = to_gray(a);
    let gb = to_gray(b);

    let mut pyr_a = vec![ga];
    let mut pyr_b = vec![gb];
    for _ in 1..PYRAMID_LEVELS {
        let next_a = downsample(pyr_a.last().unwrap());
        let next_b = downsample(pyr_b.last().unwrap());
        if next_a.nrows() < 4 || next_a.ncols() < 4 {
            break;
        }
        pyr_a.push(next_a);
        pyr_b.push(next_b);
    }

    let coarsest = pyr_a.len() - 1;
    let mut flow = FlowField::zeros(pyr_a[coarsest].nrows(), pyr_a[coarsest].ncols());
    for level in (0..=coarsest).rev() {
        if level != coarsest {
            // upsample the flow to this level and double the displacements
            let (h, w) = pyr_a[level].dim();
            let (ph, pw) = pyr_a[level + 1].dim();
            let su = Array2::from_shape_fn((h, w), |(y, x)| {
                2.0 * bilinear(
                    &flow.u,
                    y as f64 * (ph - 1) as f64 / (h - 1).max(1) as f64,
                    x as f64 * (pw - 1) as f64 / (w - 1).max(1) as f64,
                )
            });
            let sv = Array2::from_shape_fn((h, w), |(y, x)| {
                2.0 * bilinear(
                    &flow.v,
                    y as f64 * (ph - 1) as f64 / (h - 1).max(1) as f64,
                    x as f64 * (pw - 1) as f64 / (w - 1).max(1) as f64,
                )
            });
            flow = FlowField { u: su, v: sv };
        }
        for _ in 0..WARP_ITERS {
            lk_refine(&pyr_a[level], &pyr_b[level], &mut flow);
        }
    }
    Ok(flow)
}

/// Bilinear splat of `value`-weighted colors from a source frame into the
/// accumulator restricted to source pixels selected by `select`.
fn splat_region(
    frame: &Array3<f64>,
    dx: &Array2<f64>,
    dy: &Array2<f64>,
    select: impl Fn(usize, usize) -> bool,
    acc: &mut Array3<f64>,
    weight: &mut Array2<f64>,
    w_scale: f64,
) {
    let (h, w, _) = frame.dim();
    for y in 0..h {
        for x in 0..w {
            if !select(y, x) {
                continue;
            }
            let ty = y as f64 + dy[[y, x]];
            let tx = x as f64 + dx[[y, x]];
            if ty < -1.0 || tx < -1.0 || ty > h as f64 || tx > w as f64 {
                continue;
            }
            let y0 = ty.floor() as i64;
            let x0 = tx.floor() as i64;
            let fy = ty - y0 as f64;
            let fx = tx - x0 as f64;
            for (oy, ox, wgt) in [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x0 + 1, (1.0 - fy) * fx),
                (y0 + 1, x0, fy * (1.0 - fx)),
                (y0 + 1, x0 + 1, fy * fx),
            ] {
                if oy < 0 || oy >= h as i64 || ox < 0 || ox >= w as i64 || wgt == 0.0 {
                    continue;
                }
                let (oy, ox) = (oy as usize, ox as usize);
                let wv = wgt * w_scale;
                for c in 0..3 {
                    acc[[oy, ox, c]] += wv * frame[[y, x, c]];
                }
                weight[[oy, ox]] += wv;
            }
        }
    }
}

/// Interpolate between `a` and `b` at `alpha`: face and background splatted
/// separately along the alpha-scaled flow, holes filled by blending the
/// unwarped endpoints. alpha=0 returns `a` exactly; alpha=1 returns `b`.
pub fn interpolate_frames(
    a: &Array3<f64>,
    b: &Array3<f64>,
    alpha: f64,
    flow_ab: &FlowField,
    region: &RegionMask,
) -> Result<Array3<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::validation("interpolate_frames dimension mismatch"));
    }
    let (h, w, _) = a.dim();
    if flow_ab.u.dim() != (h, w) || region.face.dim() != (h, w) {
        return Err(Error::validation("flow/region dimension mismatch"));
    }
    let alpha = alpha.clamp(0.0, 1.0);
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    if alpha == 1.0 {
        return Ok(b.clone());
    }

    // forward splat from a along +alpha*flow, backward splat from b along
    // -(1-alpha)*flow, each split by region
    let mut out = Array3::zeros((h, w, 3));
    for (is_face_pass, face_mask) in [(true, &region.face), (false, &region.face)] {
        let mut acc = Array3::zeros((h, w, 3));
        let mut weight = Array2::zeros((h, w));
        let fa_u = flow_ab.u.mapv(|v| v * alpha);
        let fa_v = flow_ab.v.mapv(|v| v * alpha);
        splat_region(
            a,
            &fa_u,
            &fa_v,
            |y, x| face_mask[[y, x]] == is_face_pass,
            &mut acc,
            &mut weight,
            1.0 - alpha,
        );
        let fb_u = flow_ab.u.mapv(|v| -v * (1.0 - alpha));
        let fb_v = flow_ab.v.mapv(|v| -v * (1.0 - alpha));
        splat_region(
            b,
            &fb_u,
            &fb_v,
            |y, x| face_mask[[y, x]] == is_face_pass,
            &mut acc,
            &mut weight,
            alpha,
        );
        for y in 0..h {
            for x in 0..w {
                if region.face[[y, x]] != is_face_pass {
                    continue;
                }
                let wgt = weight[[y, x]];
                for c in 0..3 {
                    out[[y, x, c]] = if wgt > 1e-9 {
                        acc[[y, x, c]] / wgt
                    } else {
                        // occlusion hole: blend the unwarped endpoints
                        (1.0 - alpha) * a[[y, x, c]] + alpha * b[[y, x, c]]
                    };
                }
            }
        }
    }
    Ok(out)
}

/// Resample to `target_count` frames. Source index s_j = j*(T-1)/(T'-1);
/// integer indices copy frames bit-exactly, fractional indices interpolate
/// between the floor/ceil neighbors.
pub fn resample_sequence(
    frames: &FrameSequence,
    target_count: usize,
    regions: &[RegionMask],
) -> Result<FrameSequence> {
    if target_count < 1 {
        return Err(Error::validation("target_count must be >= 1"));
    }
    let t = frames.len();
    if regions.len() != t {
        return Err(Error::validation(format!(
            "expected {t} region masks, got {}",
            regions.len()
        )));
    }
    if target_count == t {
        return Ok(frames.clone());
    }
    let mut out = Vec::with_capacity(target_count);
    for j in 0..target_count {
        let s = if target_count == 1 {
            0.0
        } else {
            j as f64 * (t - 1) as f64 / (target_count - 1) as f64
        };
        let lo = s.floor() as usize;
        let frac = s - lo as f64;
        if frac.abs() < 1e-12 || lo + 1 >= t {
            out.push(frames.frames[lo].clone());
        } else {
            let a = &frames.frames[lo];
            let b = &frames.frames[lo + 1];
            let flow = dense_flow(a, b)?;
            out.push(interpolate_frames(a, b, frac, &flow, &regions[lo])?);
        }
    }
    FrameSequence::new(out, frames.fps)
}

const FVID_MAGIC: &[u8; 4] = b"FVID";

/// Raw video container: magic "FVID", H, W, T u32 LE, fps f32 LE, then
/// T frames of H*W*3 u8 RGB.
pub fn write_fvid(seq: &FrameSequence, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FVID_MAGIC)?;
    w.write_u32::<LittleEndian>(seq.height() as u32)?;
    w.write_u32::<LittleEndian>(seq.width() as u32)?;
    w.write_u32::<LittleEndian>(seq.len() as u32)?;
    w.write_f32::<LittleEndian>(seq.fps as f32)?;
    for frame in &seq.frames {
        for v in frame.iter() {
            w.write_all(&[(v.clamp(0.0, 1.0) * 255.0).round() as u8])?;
        }
    }
    Ok(())
}

pub fn read_fvid(path: impl AsRef<Path>) -> Result<FrameSequence> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FVID_MAGIC {
        return Err(Error::format("bad FVID magic"));
    }
    let h = r.read_u32::<LittleEndian>()? as usize;
    let w = r.read_u32::<LittleEndian>()? as usize;
    let t = r.read_u32::<LittleEndian>()? as usize;
    let fps = r.read_f32::<LittleEndian>()? as f64;
    if h == 0 || w == 0 || t == 0 {
        return Err(Error::format("FVID dimensions must be positive"));
    }
    let mut frames = Vec::with_capacity(t);
    let mut buf = vec![0u8; h * w * 3];
    for _ in 0..t {
        r.read_exact(&mut buf)?;
        let frame = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            buf[(y * w + x) * 3 + c] as f64 / 255.0
        });
        frames.push(frame);
    }
    FrameSequence::new(frames, fps)
}

/// Write frames as zero-padded numbered PNGs (frame_000001.png, ...).
pub fn write_png_dir(seq: &FrameSequence, dir: impl AsRef<Path>) -> Result<()> {
    std::fs::create_dir_all(&dir)?;
    let (h, w) = (seq.height(), seq.width());
    for (i, frame) in seq.frames.iter().enumerate() {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    (frame[[y, x, 0]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (frame[[y, x, 1]].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (frame[[y, x, 2]].clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        let path = dir.as_ref().join(format!("frame_{i:06}.png"));
        img.save(&path)
            .map_err(|e| Error::format(format!("png write: {e}")))?;
    }
    Ok(())
}

pub fn read_png_dir(dir: impl AsRef<Path>, fps: f64) -> Result<FrameSequence> {
    let mut paths: Vec<_> = std::fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::validation("no PNG frames in directory"));
    }
    let mut frames = Vec::with_capacity(paths.len());
    for p in paths {
        let img = image::open(&p)
            .map_err(|e| Error::format(format!("png read {}: {e}", p.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        frames.push(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        }));
    }
    FrameSequence::new(frames, fps)
}
