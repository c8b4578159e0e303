//! Conditional flow matching: linear interpolation path, conditional target
//! velocity, infilling losses, and the one-step x1 estimator feeding the
//! temporal smoothness term.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::motion::TemporalMask;

/// A flow timestep in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowTime(f64);

impl FlowTime {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::validation(format!("flow time {t} outside [0,1]")));
        }
        Ok(Self(t))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_ts: f64,
}

impl LossWeights {
    pub fn new(lambda_ts: f64) -> Result<Self> {
        if lambda_ts < 0.0 {
            return Err(Error::validation("lambda_ts must be non-negative"));
        }
        Ok(Self { lambda_ts })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_ts: 0.2 }
    }
}

fn check_same_shape(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Linear path x_t = (1-t) x0 + t x1.
pub fn interpolate(x0: &Array2<f64>, x1: &Array2<f64>, t: FlowTime) -> Result<Array2<f64>> {
    check_same_shape(x0, x1)?;
    let t = t.value();
    Ok(x0 * (1.0 - t) + x1 * t)
}

/// Conditional vector field u_t = x1 - x0, constant in t.
pub fn target_velocity(x0: &Array2<f64>, x1: &Array2<f64>) -> Result<Array2<f64>> {
    check_same_shape(x0, x1)?;
    Ok(x1 - x0)
}

/// Velocity regression loss: mean squared residual against x1 - x0, averaged
/// over masked positions only (all channels of masked frames).
pub fn cfm_loss(
    v_pred: &Array2<f64>,
    x0: &Array2<f64>,
    x1: &Array2<f64>,
    mask: &TemporalMask,
) -> Result<f64> {
    let (loss, _) = cfm_loss_and_grad(v_pred, x0, x1, mask)?;
    Ok(loss)
}

/// As `cfm_loss`, also returning d(loss)/d(v_pred). Residuals at unmasked
/// frames contribute nothing to either.
pub fn cfm_loss_and_grad(
    v_pred: &Array2<f64>,
    x0: &Array2<f64>,
    x1: &Array2<f64>,
    mask: &TemporalMask,
) -> Result<(f64, Array2<f64>)> {
    check_same_shape(v_pred, x0)?;
    check_same_shape(v_pred, x1)?;
    if mask.len() != v_pred.nrows() {
        return Err(Error::validation("mask length must match sequence length"));
    }
    if !mask.any() {
        return Err(Error::validation("cfm_loss requires at least one masked frame"));
    }
    let width = v_pred.ncols();
    let count = (mask.masked_count() * width) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(v_pred.raw_dim());
    for k in 0..v_pred.nrows() {
        if !mask.is_masked(k) {
            continue;
        }
        for c in 0..width {
            let r = v_pred[[k, c]] - (x1[[k, c]] - x0[[k, c]]);
            loss += r * r;
            grad[[k, c]] = 2.0 * r / count;
        }
    }
    Ok((loss / count, grad))
}

/// One-step flow extrapolation to t = 1: x1_hat = x_t + (1 - t) v_pred.
pub fn estimate_x1(xt: &Array2<f64>, v_pred: &Array2<f64>, t: FlowTime) -> Result<Array2<f64>> {
    check_same_shape(xt, v_pred)?;
    Ok(xt + &(v_pred * (1.0 - t.value())))
}

/// Temporal smoothness: mean over adjacent frame pairs of the L1 difference,
/// (1/(T-1)) sum_k ||x[k] - x[k-1]||_1.
pub fn ts_loss(x1_hat: &Array2<f64>) -> Result<f64> {
    let (loss, _) = ts_loss_and_grad(x1_hat)?;
    Ok(loss)
}

/// As `ts_loss`, also returning the (sub)gradient with respect to x1_hat.
pub fn ts_loss_and_grad(x1_hat: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    let t = x1_hat.nrows();
    if t < 2 {
        return Err(Error::validation("ts_loss requires T >= 2"));
    }
    let norm = (t - 1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(x1_hat.raw_dim());
    for k in 1..t {
        for c in 0..x1_hat.ncols() {
            let d = x1_hat[[k, c]] - x1_hat[[k - 1, c]];
            loss += d.abs();
            let s = d.signum();
            grad[[k, c]] += s / norm;
            grad[[k - 1, c]] -= s / norm;
        }
    }
    Ok((loss / norm, grad))
}

/// Combined objective: cfm + lambda_ts * ts.
pub fn total_loss(cfm: f64, ts: f64, w: LossWeights) -> f64 {
    cfm + w.lambda_ts * ts
}

/// Per-call loss terms for logging.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub cfm: f64,
    pub ts: f64,
    pub total: f64,
}

/// Full training objective and its gradient with respect to the predicted
/// velocity. The smoothness term acts on x1_hat = x_t + (1 - t) v_pred over
/// the whole sequence; it is skipped when lambda_ts is 0 (allowing T = 1).
pub fn total_loss_and_grad(
    v_pred: &Array2<f64>,
    xt: &Array2<f64>,
    x0: &Array2<f64>,
    x1: &Array2<f64>,
    t: FlowTime,
    mask: &TemporalMask,
    w: LossWeights,
) -> Result<(LossTerms, Array2<f64>)> {
    let (cfm, mut grad_v) = cfm_loss_and_grad(v_pred, x0, x1, mask)?;
    let mut ts = 0.0;
    if w.lambda_ts > 0.0 {
        let x1_hat = estimate_x1(xt, v_pred, t)?;
        let (ts_val, grad_x1hat) = ts_loss_and_grad(&x1_hat)?;
        ts = ts_val;
        // d(x1_hat)/d(v_pred) = (1 - t)
        grad_v = grad_v + grad_x1hat * (w.lambda_ts * (1.0 - t.value()));
    }
    let total = total_loss(cfm, ts, w);
    Ok((LossTerms { cfm, ts, total }, grad_v))
}
