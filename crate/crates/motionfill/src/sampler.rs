//! Euler ODE sampling with Sway timestep scheduling, masked compositing,
//! and EMA parameter tracking.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::cfm::FlowTime;
use crate::error::{Error, Result};
use crate::motion::TemporalMask;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub sway_s: f64,
    pub seed: u64,
    /// When false, unmasked rows are frozen at the original content during
    /// integration instead of being held on the noising path.
    pub renoise_unmasked: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 32,
            sway_s: -1.0,
            seed: 0,
            renoise_unmasked: true,
        }
    }
}

/// Non-uniform timestep grid t_i = u_i + s*(cos(pi*u_i/2) - 1 + u_i) over the
/// uniform grid u_i = i/n; concentrates steps near t=0 for s < 0. Returns
/// n_steps + 1 ascending times with exact endpoints 0 and 1.
pub fn sway_schedule(n_steps: usize, s: f64) -> Result<Vec<FlowTime>> {
    if n_steps < 1 {
        return Err(Error::validation("n_steps must be >= 1"));
    }
    if !(-1.0..=0.0).contains(&s) {
        return Err(Error::validation(format!(
            "sway coefficient must be in [-1, 0], got {s}"
        )));
    }
    let n = n_steps as f64;
    let mut ts = Vec::with_capacity(n_steps + 1);
    for i in 0..=n_steps {
        // endpoints pinned exactly; cos(pi/2) is only ~6e-17 in floating point
        let t = if i == 0 {
            0.0
        } else if i == n_steps {
            1.0
        } else {
            let u = i as f64 / n;
            u + s * ((std::f64::consts::FRAC_PI_2 * u).cos() - 1.0 + u)
        };
        ts.push(FlowTime::new(t.clamp(0.0, 1.0))?);
    }
    Ok(ts)
}

/// A velocity field v(x, t) conditioned on fixed context (speech + masked
/// motion), abstracted so the solver can run against the DiT or analytic
/// test fields.
pub trait VelocityField {
    fn velocity(&self, x: &Array2<f64>, t: FlowTime) -> Result<Array2<f64>>;
}

impl<F> VelocityField for F
where
    F: Fn(&Array2<f64>, FlowTime) -> Result<Array2<f64>>,
{
    fn velocity(&self, x: &Array2<f64>, t: FlowTime) -> Result<Array2<f64>> {
        self(x, t)
    }
}

/// Integrate the flow ODE over masked rows. `orig_placed` carries the copied
/// original frames at unmasked positions (values at masked positions are
/// ignored). The output equals the originals bit-exactly at unmasked rows.
pub fn euler_solve<V: VelocityField>(
    field: &V,
    orig_placed: &Array2<f64>,
    mask: &TemporalMask,
    cfg: &SamplerConfig,
) -> Result<Array2<f64>> {
    let (t_len, width) = orig_placed.dim();
    if mask.len() != t_len {
        return Err(Error::validation(format!(
            "mask length {} != sequence length {t_len}",
            mask.len()
        )));
    }
    if !mask.any() {
        // pure compositing: nothing to synthesize
        return Ok(orig_placed.clone());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Array2::from_shape_fn((t_len, width), |_| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });

    let schedule = sway_schedule(cfg.n_steps, cfg.sway_s)?;
    let mut x = noise.clone();
    if !cfg.renoise_unmasked {
        for (i, flag) in mask.flags().iter().enumerate() {
            if !*flag {
                x.row_mut(i).assign(&orig_placed.row(i));
            }
        }
    }

    for step in 0..cfg.n_steps {
        let t = schedule[step];
        if cfg.renoise_unmasked {
            // hold unmasked rows on the interpolation path x_t = (1-t)x0 + t*x1
            // so the model sees in-distribution inputs at every step
            for (i, flag) in mask.flags().iter().enumerate() {
                if !*flag {
                    let row: Array1<f64> = (1.0 - t.value()) * &noise.row(i)
                        + t.value() * &orig_placed.row(i);
                    x.row_mut(i).assign(&row);
                }
            }
        }
        let v = field.velocity(&x, t)?;
        if v.dim() != (t_len, width) {
            return Err(Error::validation("velocity field shape mismatch"));
        }
        if !v.iter().all(|a| a.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite velocity at solver step {step} (t = {})",
                t.value()
            )));
        }
        let dt = schedule[step + 1].value() - t.value();
        x = x + v * dt;
    }

    // composite: unmasked rows are the bit-exact originals
    for (i, flag) in mask.flags().iter().enumerate() {
        if !*flag {
            x.row_mut(i).assign(&orig_placed.row(i));
        }
    }
    Ok(x)
}

/// Exponential moving average over flattened parameters.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub shadow: Vec<f64>,
    pub decay: f64,
}

impl EmaState {
    pub fn new(initial: Vec<f64>, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::validation("EMA decay must be in [0, 1]"));
        }
        Ok(Self {
            shadow: initial,
            decay,
        })
    }

    /// shadow <- decay*shadow + (1-decay)*params
    pub fn update(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::validation(format!(
                "EMA shape mismatch: {} vs {}",
                params.len(),
                self.shadow.len()
            )));
        }
        let d = self.decay;
        for (s, p) in self.shadow.iter_mut().zip(params) {
            *s = d * *s + (1.0 - d) * p;
        }
        Ok(())
    }
}
