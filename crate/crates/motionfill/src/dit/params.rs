//! Parameter container, initialization, flattening, and checkpoint IO.
//!
//! Checkpoint layout (all integers little-endian): magic "MFCK", version u32,
//! config JSON (u32 length + bytes), tensor count u32, then per tensor:
//! name (u16 length + UTF-8), ndim u8, dims (u32 each), data f32 LE
//! row-major. EMA shadow tensors, when present, use an `ema/` name prefix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use super::DiTConfig;
use crate::error::{Error, Result};

const CKPT_MAGIC: &[u8; 4] = b"MFCK";
const CKPT_VERSION: u32 = 1;

/// Modulation vectors per block: shift/scale/gate for self-attn, cross-attn,
/// and FFN.
pub const MOD_PER_BLOCK: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,

    pub wcq: Array2<f64>,
    pub bcq: Array1<f64>,
    pub wck: Array2<f64>,
    pub bck: Array1<f64>,
    pub wcv: Array2<f64>,
    pub bcv: Array1<f64>,
    pub wco: Array2<f64>,
    pub bco: Array1<f64>,

    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,

    pub wmod: Array2<f64>,
    pub bmod: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiTParameters {
    pub w_in: Array2<f64>,
    pub b_in: Array1<f64>,
    pub conv1_w: Array2<f64>,
    pub conv1_b: Array1<f64>,
    pub conv2_w: Array2<f64>,
    pub conv2_b: Array1<f64>,
    pub wt1: Array2<f64>,
    pub bt1: Array1<f64>,
    pub wt2: Array2<f64>,
    pub bt2: Array1<f64>,
    pub w_sp: Array2<f64>,
    pub b_sp: Array1<f64>,
    pub blocks: Vec<BlockParams>,
    pub w_modf: Array2<f64>,
    pub b_modf: Array1<f64>,
    pub w_head: Array2<f64>,
    pub b_head: Array1<f64>,
}

fn randn_mat(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        rng.sample::<f64, _>(StandardNormal) * std
    })
}

impl BlockParams {
    fn zeros(cfg: &DiTConfig) -> Self {
        let d = cfg.d_model;
        Self {
            wq: Array2::zeros((d, d)),
            bq: Array1::zeros(d),
            wk: Array2::zeros((d, d)),
            bk: Array1::zeros(d),
            wv: Array2::zeros((d, d)),
            bv: Array1::zeros(d),
            wo: Array2::zeros((d, d)),
            bo: Array1::zeros(d),
            wcq: Array2::zeros((d, d)),
            bcq: Array1::zeros(d),
            wck: Array2::zeros((d, d)),
            bck: Array1::zeros(d),
            wcv: Array2::zeros((d, d)),
            bcv: Array1::zeros(d),
            wco: Array2::zeros((d, d)),
            bco: Array1::zeros(d),
            w1: Array2::zeros((d, cfg.d_ffn)),
            b1: Array1::zeros(cfg.d_ffn),
            w2: Array2::zeros((cfg.d_ffn, d)),
            b2: Array1::zeros(d),
            wmod: Array2::zeros((d, MOD_PER_BLOCK * d)),
            bmod: Array1::zeros(MOD_PER_BLOCK * d),
        }
    }
}

impl DiTParameters {
    pub fn zeros(cfg: &DiTConfig) -> Self {
        let d = cfg.d_model;
        Self {
            w_in: Array2::zeros((2 * cfg.motion_width, d)),
            b_in: Array1::zeros(d),
            conv1_w: Array2::zeros((d, cfg.conv_kernel)),
            conv1_b: Array1::zeros(d),
            conv2_w: Array2::zeros((d, cfg.conv_kernel)),
            conv2_b: Array1::zeros(d),
            wt1: Array2::zeros((d, d)),
            bt1: Array1::zeros(d),
            wt2: Array2::zeros((d, d)),
            bt2: Array1::zeros(d),
            w_sp: Array2::zeros((cfg.speech_dim, d)),
            b_sp: Array1::zeros(d),
            blocks: (0..cfg.n_layers).map(|_| BlockParams::zeros(cfg)).collect(),
            w_modf: Array2::zeros((d, 2 * d)),
            b_modf: Array1::zeros(2 * d),
            w_head: Array2::zeros((d, cfg.motion_width)),
            b_head: Array1::zeros(cfg.motion_width),
        }
    }

    /// Training initialization: scaled-normal projections, zero-initialized
    /// modulation and head so every block starts as identity and the initial
    /// velocity is zero.
    pub fn init(cfg: &DiTConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut p = Self::zeros(cfg);
        let std_in = 1.0 / (2.0 * cfg.motion_width as f64).sqrt();
        p.w_in = randn_mat(rng, 2 * cfg.motion_width, d, std_in);
        let conv_std = 1.0 / (cfg.conv_kernel as f64).sqrt();
        p.conv1_w = randn_mat(rng, d, cfg.conv_kernel, conv_std);
        p.conv2_w = randn_mat(rng, d, cfg.conv_kernel, conv_std);
        let std_d = 1.0 / (d as f64).sqrt();
        p.wt1 = randn_mat(rng, d, d, std_d);
        p.wt2 = randn_mat(rng, d, d, std_d);
        p.w_sp = randn_mat(rng, cfg.speech_dim, d, 1.0 / (cfg.speech_dim as f64).sqrt());
        for b in &mut p.blocks {
            b.wq = randn_mat(rng, d, d, std_d);
            b.wk = randn_mat(rng, d, d, std_d);
            b.wv = randn_mat(rng, d, d, std_d);
            b.wo = randn_mat(rng, d, d, std_d);
            b.wcq = randn_mat(rng, d, d, std_d);
            b.wck = randn_mat(rng, d, d, std_d);
            b.wcv = randn_mat(rng, d, d, std_d);
            b.wco = randn_mat(rng, d, d, std_d);
            b.w1 = randn_mat(rng, d, cfg.d_ffn, std_d);
            b.w2 = randn_mat(rng, cfg.d_ffn, d, 1.0 / (cfg.d_ffn as f64).sqrt());
            // wmod/bmod stay zero: gates start closed
        }
        // w_modf, w_head stay zero
        Ok(p)
    }

    /// Fully random initialization (including modulation and head) so that
    /// every parameter participates in gradient checks.
    pub fn init_dense_random(cfg: &DiTConfig, rng: &mut impl Rng, std: f64) -> Result<Self> {
        let mut p = Self::init(cfg, rng)?;
        let d = cfg.d_model;
        for b in &mut p.blocks {
            b.wmod = randn_mat(rng, d, MOD_PER_BLOCK * d, std);
            b.bmod = randn_mat(rng, 1, MOD_PER_BLOCK * d, std).row(0).to_owned();
        }
        p.w_modf = randn_mat(rng, d, 2 * d, std);
        p.b_modf = randn_mat(rng, 1, 2 * d, std).row(0).to_owned();
        p.w_head = randn_mat(rng, d, cfg.motion_width, std);
        p.b_head = randn_mat(rng, 1, cfg.motion_width, std).row(0).to_owned();
        Ok(p)
    }

    /// Visit all tensors in a fixed deterministic order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, TensorRef<'a>)) {
        f("w_in".into(), TensorRef::Mat(&self.w_in));
        f("b_in".into(), TensorRef::Vec(&self.b_in));
        f("conv1_w".into(), TensorRef::Mat(&self.conv1_w));
        f("conv1_b".into(), TensorRef::Vec(&self.conv1_b));
        f("conv2_w".into(), TensorRef::Mat(&self.conv2_w));
        f("conv2_b".into(), TensorRef::Vec(&self.conv2_b));
        f("wt1".into(), TensorRef::Mat(&self.wt1));
        f("bt1".into(), TensorRef::Vec(&self.bt1));
        f("wt2".into(), TensorRef::Mat(&self.wt2));
        f("bt2".into(), TensorRef::Vec(&self.bt2));
        f("w_sp".into(), TensorRef::Mat(&self.w_sp));
        f("b_sp".into(), TensorRef::Vec(&self.b_sp));
        for (i, b) in self.blocks.iter().enumerate() {
            let names: [(&str, TensorRef<'a>); 22] = [
                ("wq", TensorRef::Mat(&b.wq)),
                ("bq", TensorRef::Vec(&b.bq)),
                ("wk", TensorRef::Mat(&b.wk)),
                ("bk", TensorRef::Vec(&b.bk)),
                ("wv", TensorRef::Mat(&b.wv)),
                ("bv", TensorRef::Vec(&b.bv)),
                ("wo", TensorRef::Mat(&b.wo)),
                ("bo", TensorRef::Vec(&b.bo)),
                ("wcq", TensorRef::Mat(&b.wcq)),
                ("bcq", TensorRef::Vec(&b.bcq)),
                ("wck", TensorRef::Mat(&b.wck)),
                ("bck", TensorRef::Vec(&b.bck)),
                ("wcv", TensorRef::Mat(&b.wcv)),
                ("bcv", TensorRef::Vec(&b.bcv)),
                ("wco", TensorRef::Mat(&b.wco)),
                ("bco", TensorRef::Vec(&b.bco)),
                ("w1", TensorRef::Mat(&b.w1)),
                ("b1", TensorRef::Vec(&b.b1)),
                ("w2", TensorRef::Mat(&b.w2)),
                ("b2", TensorRef::Vec(&b.b2)),
                ("wmod", TensorRef::Mat(&b.wmod)),
                ("bmod", TensorRef::Vec(&b.bmod)),
            ];
            for (name, t) in names {
                f(format!("blocks.{i}.{name}"), t);
            }
        }
        f("w_modf".into(), TensorRef::Mat(&self.w_modf));
        f("b_modf".into(), TensorRef::Vec(&self.b_modf));
        f("w_head".into(), TensorRef::Mat(&self.w_head));
        f("b_head".into(), TensorRef::Vec(&self.b_head));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, TensorMut<'_>)) {
        f("w_in".into(), TensorMut::Mat(&mut self.w_in));
        f("b_in".into(), TensorMut::Vec(&mut self.b_in));
        f("conv1_w".into(), TensorMut::Mat(&mut self.conv1_w));
        f("conv1_b".into(), TensorMut::Vec(&mut self.conv1_b));
        f("conv2_w".into(), TensorMut::Mat(&mut self.conv2_w));
        f("conv2_b".into(), TensorMut::Vec(&mut self.conv2_b));
        f("wt1".into(), TensorMut::Mat(&mut self.wt1));
        f("bt1".into(), TensorMut::Vec(&mut self.bt1));
        f("wt2".into(), TensorMut::Mat(&mut self.wt2));
        f("bt2".into(), TensorMut::Vec(&mut self.bt2));
        f("w_sp".into(), TensorMut::Mat(&mut self.w_sp));
        f("b_sp".into(), TensorMut::Vec(&mut self.b_sp));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(format!("blocks.{i}.wq"), TensorMut::Mat(&mut b.wq));
            f(format!("blocks.{i}.bq"), TensorMut::Vec(&mut b.bq));
            f(format!("blocks.{i}.wk"), TensorMut::Mat(&mut b.wk));
            f(format!("blocks.{i}.bk"), TensorMut::Vec(&mut b.bk));
            f(format!("blocks.{i}.wv"), TensorMut::Mat(&mut b.wv));
            f(format!("blocks.{i}.bv"), TensorMut::Vec(&mut b.bv));
            f(format!("blocks.{i}.wo"), TensorMut::Mat(&mut b.wo));
            f(format!("blocks.{i}.bo"), TensorMut::Vec(&mut b.bo));
            f(format!("blocks.{i}.wcq"), TensorMut::Mat(&mut b.wcq));
            f(format!("blocks.{i}.bcq"), TensorMut::Vec(&mut b.bcq));
            f(format!("blocks.{i}.wck"), TensorMut::Mat(&mut b.wck));
            f(format!("blocks.{i}.bck"), TensorMut::Vec(&mut b.bck));
            f(format!("blocks.{i}.wcv"), TensorMut::Mat(&mut b.wcv));
            f(format!("blocks.{i}.bcv"), TensorMut::Vec(&mut b.bcv));
            f(format!("blocks.{i}.wco"), TensorMut::Mat(&mut b.wco));
            f(format!("blocks.{i}.bco"), TensorMut::Vec(&mut b.bco));
            f(format!("blocks.{i}.w1"), TensorMut::Mat(&mut b.w1));
            f(format!("blocks.{i}.b1"), TensorMut::Vec(&mut b.b1));
            f(format!("blocks.{i}.w2"), TensorMut::Mat(&mut b.w2));
            f(format!("blocks.{i}.b2"), TensorMut::Vec(&mut b.b2));
            f(format!("blocks.{i}.wmod"), TensorMut::Mat(&mut b.wmod));
            f(format!("blocks.{i}.bmod"), TensorMut::Vec(&mut b.bmod));
        }
        f("w_modf".into(), TensorMut::Mat(&mut self.w_modf));
        f("b_modf".into(), TensorMut::Vec(&mut self.b_modf));
        f("w_head".into(), TensorMut::Mat(&mut self.w_head));
        f("b_head".into(), TensorMut::Vec(&mut self.b_head));
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, t| match t {
            TensorRef::Mat(m) => out.extend(m.iter()),
            TensorRef::Vec(v) => out.extend(v.iter()),
        });
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::validation(format!(
                "flat parameter length {} != {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut pos = 0;
        self.visit_mut(&mut |_, t| match t {
            TensorMut::Mat(m) => {
                for v in m.iter_mut() {
                    *v = flat[pos];
                    pos += 1;
                }
            }
            TensorMut::Vec(a) => {
                for v in a.iter_mut() {
                    *v = flat[pos];
                    pos += 1;
                }
            }
        });
        Ok(())
    }
}

pub enum TensorRef<'a> {
    Mat(&'a Array2<f64>),
    Vec(&'a Array1<f64>),
}

impl TensorRef<'_> {
    fn len(&self) -> usize {
        match self {
            TensorRef::Mat(m) => m.len(),
            TensorRef::Vec(v) => v.len(),
        }
    }
}

enum TensorMut<'a> {
    Mat(&'a mut Array2<f64>),
    Vec(&'a mut Array1<f64>),
}

/// A saved model: config, weights, and optionally the EMA shadow weights.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: DiTConfig,
    pub params: DiTParameters,
    pub ema: Option<DiTParameters>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_u32::<LittleEndian>(CKPT_VERSION)?;
    let cfg_json = serde_json::to_vec(&ckpt.config)?;
    w.write_u32::<LittleEndian>(cfg_json.len() as u32)?;
    w.write_all(&cfg_json)?;

    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    let mut collect = |prefix: &str, p: &DiTParameters| {
        p.visit(&mut |name, t| {
            let (dims, data) = match t {
                TensorRef::Mat(m) => (vec![m.nrows(), m.ncols()], m.iter().cloned().collect()),
                TensorRef::Vec(v) => (vec![v.len()], v.iter().cloned().collect()),
            };
            entries.push((format!("{prefix}{name}"), dims, data));
        });
    };
    collect("model/", &ckpt.params);
    if let Some(ema) = &ckpt.ema {
        collect("ema/", ema);
    }

    w.write_u32::<LittleEndian>(entries.len() as u32)?;
    for (name, dims, data) in entries {
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(dims.len() as u8)?;
        for d in dims {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for v in data {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CKPT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.read_u32::<LittleEndian>()? as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf)?;
    let config: DiTConfig = serde_json::from_slice(&cfg_buf)?;
    config.validate()?;

    let n_tensors = r.read_u32::<LittleEndian>()? as usize;
    let mut tensors = std::collections::HashMap::new();
    for _ in 0..n_tensors {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::format("non-utf8 tensor name"))?;
        let ndim = r.read_u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let count: usize = dims.iter().product();
        let mut data = vec![0f32; count];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|e| Error::format(format!("truncated tensor {name}: {e}")))?;
        tensors.insert(name, (dims, data));
    }

    let load_set = |prefix: &str| -> Result<DiTParameters> {
        let mut p = DiTParameters::zeros(&config);
        let mut missing = Vec::new();
        p.visit_mut(&mut |name, t| {
            let key = format!("{prefix}{name}");
            let Some((dims, data)) = tensors.get(&key) else {
                missing.push(key);
                return;
            };
            match t {
                TensorMut::Mat(m) => {
                    if dims.as_slice() == [m.nrows(), m.ncols()] {
                        for (dst, src) in m.iter_mut().zip(data.iter()) {
                            *dst = *src as f64;
                        }
                    } else {
                        missing.push(format!("{key} (shape mismatch)"));
                    }
                }
                TensorMut::Vec(v) => {
                    if dims.as_slice() == [v.len()] {
                        for (dst, src) in v.iter_mut().zip(data.iter()) {
                            *dst = *src as f64;
                        }
                    } else {
                        missing.push(format!("{key} (shape mismatch)"));
                    }
                }
            }
        });
        if !missing.is_empty() {
            return Err(Error::format(format!("checkpoint tensors missing or malformed: {missing:?}")));
        }
        Ok(p)
    };

    let params = load_set("model/")?;
    let ema = if tensors.keys().any(|k| k.starts_with("ema/")) {
        Some(load_set("ema/")?)
    } else {
        None
    };
    Ok(Checkpoint { config, params, ema })
}
