//! Full DiT forward pass with cached activations and the matching backward
//! pass accumulating parameter gradients.
//!
//! Per block: timestep-modulated layer norm, windowed rotary self-attention,
//! windowed rotary cross-attention to projected speech, and a GELU FFN, all
//! gated residuals. Inputs are the noisy motion and the masked conditioning
//! motion concatenated along channels.

use ndarray::{concatenate, s, Array1, Array2, Axis};

use super::ops::*;
use super::params::{BlockParams, DiTParameters, MOD_PER_BLOCK};
use super::{build_cross_bias, build_self_bias, DiTConfig};
use crate::error::{Error, Result};

pub struct SublayerCache {
    ln: LayerNormCache,
    xmod: Array2<f64>,
    scale: Array1<f64>,
    gate: Array1<f64>,
    /// Sub-layer output before gating (needed for the gate gradient).
    out: Array2<f64>,
}

pub struct BlockCache {
    self_attn: AttnCache,
    self_attn_out: Array2<f64>, // concat-heads output, input to wo
    cross_attn: AttnCache,
    cross_attn_out: Array2<f64>,
    ffn_pre: Array2<f64>,  // pre-GELU
    ffn_act: Array2<f64>,  // post-GELU
    sub_self: SublayerCache,
    sub_cross: SublayerCache,
    sub_ffn: SublayerCache,
}

pub struct ForwardCache {
    xin: Array2<f64>,
    h0: Array2<f64>,
    conv_pre: Array2<f64>, // first conv output, pre-SiLU
    conv_act: Array2<f64>, // post-SiLU, input to second conv
    temb: Array2<f64>,     // (1, d) sinusoidal embedding
    temb_pre: Array2<f64>, // (1, d) first MLP output, pre-SiLU
    temb_act: Array2<f64>, // (1, d) post-SiLU
    cond_vec: Array2<f64>, // (1, d) timestep conditioning c
    speech_in: Array2<f64>,
    speech_proj: Array2<f64>,
    blocks: Vec<BlockCache>,
    ln_final: LayerNormCache,
    final_scale: Array1<f64>,
    final_xhat: Array2<f64>,
    final_mod: Array2<f64>, // modulated output, input to the head
    pos_self: Vec<f64>,
    pos_cross_q: Vec<f64>,
    pos_cross_k: Vec<f64>,
}

/// x * (1 + scale) + shift, per-channel affine broadcast over frames.
fn modulate(x: &Array2<f64>, scale: &Array1<f64>, shift: &Array1<f64>) -> Array2<f64> {
    x * &(scale + 1.0) + shift
}

fn split_mod(mods: &Array2<f64>, d: usize, idx: usize) -> Array1<f64> {
    mods.slice(s![0, idx * d..(idx + 1) * d]).to_owned()
}

fn sublayer_norm_mod(
    h: &Array2<f64>,
    mods: &Array2<f64>,
    d: usize,
    base: usize,
) -> (Array2<f64>, LayerNormCache, Array1<f64>, Array1<f64>) {
    let shift = split_mod(mods, d, base);
    let scale = split_mod(mods, d, base + 1);
    let gate = split_mod(mods, d, base + 2);
    let (xhat, ln) = layernorm_fw(h);
    let xmod = modulate(&xhat, &scale, &shift);
    (xmod, ln, scale, gate)
}

/// Velocity prediction v_theta(noisy, t; speech, cond). Deterministic given
/// inputs and parameters.
pub fn forward(
    params: &DiTParameters,
    cfg: &DiTConfig,
    noisy: &Array2<f64>,
    cond: &Array2<f64>,
    t: f64,
    speech: &Array2<f64>,
) -> Result<(Array2<f64>, ForwardCache)> {
    cfg.validate()?;
    let t_len = noisy.nrows();
    let n_len = speech.nrows();
    if noisy.dim() != cond.dim() {
        return Err(Error::validation("noisy/cond shape mismatch"));
    }
    if noisy.ncols() != cfg.motion_width {
        return Err(Error::validation(format!(
            "motion width {} != config {}",
            noisy.ncols(),
            cfg.motion_width
        )));
    }
    if speech.ncols() != cfg.speech_dim {
        return Err(Error::validation("speech feature dim mismatch"));
    }
    if n_len == 0 {
        return Err(Error::validation("speech must be non-empty"));
    }
    if !noisy.iter().all(|v| v.is_finite())
        || !cond.iter().all(|v| v.is_finite())
        || !speech.iter().all(|v| v.is_finite())
        || !t.is_finite()
    {
        return Err(Error::numeric("non-finite model input"));
    }
    let d = cfg.d_model;

    let self_w = cfg.self_window.unwrap_or(t_len).max(1);
    let cross_w = cfg.cross_window.unwrap_or(n_len).max(1);
    let self_bias = build_self_bias(t_len, self_w)?.0;
    let cross_bias = build_cross_bias(t_len, n_len, cross_w)?.0;

    let pos_self: Vec<f64> = (0..t_len).map(|i| i as f64 / cfg.rope_scale).collect();
    let pos_cross_q = pos_self.clone();
    // key positions rescaled onto the query time axis
    let rate = t_len as f64 / n_len as f64;
    let pos_cross_k: Vec<f64> = (0..n_len)
        .map(|j| j as f64 * rate / cfg.rope_scale)
        .collect();

    // input projection of channel-concatenated noisy + masked motion
    let xin = concatenate(Axis(1), &[noisy.view(), cond.view()])
        .map_err(|e| Error::validation(e.to_string()))?;
    let h0 = linear_fw(&xin, &params.w_in, &params.b_in);

    // convolutional positional embedding, residual
    let conv_pre = dwconv_fw(&h0, &params.conv1_w, &params.conv1_b);
    let conv_act = silu_fw(&conv_pre);
    let conv_out = dwconv_fw(&conv_act, &params.conv2_w, &params.conv2_b);
    let mut h = &h0 + &conv_out;

    // timestep conditioning vector
    let temb = time_embedding(t, d).insert_axis(Axis(0));
    let temb_pre = linear_fw(&temb, &params.wt1, &params.bt1);
    let temb_act = silu_fw(&temb_pre);
    let cond_vec = linear_fw(&temb_act, &params.wt2, &params.bt2);

    // speech projection, shared across blocks
    let speech_proj = linear_fw(speech, &params.w_sp, &params.b_sp);

    let mut block_caches = Vec::with_capacity(cfg.n_layers);
    for b in &params.blocks {
        let mods = linear_fw(&cond_vec, &b.wmod, &b.bmod);
        debug_assert_eq!(mods.ncols(), MOD_PER_BLOCK * d);

        // self-attention
        let (xmod1, ln1, sc1, g1) = sublayer_norm_mod(&h, &mods, d, 0);
        let q = linear_fw(&xmod1, &b.wq, &b.bq);
        let k = linear_fw(&xmod1, &b.wk, &b.bk);
        let v = linear_fw(&xmod1, &b.wv, &b.bv);
        let (attn_out, self_attn) =
            attention_fw(&q, &k, &v, &self_bias, cfg.n_heads, &pos_self, &pos_self)?;
        let sa = linear_fw(&attn_out, &b.wo, &b.bo);
        h = &h + &(&sa * &g1);
        let sub_self = SublayerCache { ln: ln1, xmod: xmod1, scale: sc1, gate: g1, out: sa };

        // cross-attention to speech
        let (xmod2, ln2, sc2, g2) = sublayer_norm_mod(&h, &mods, d, 3);
        let qc = linear_fw(&xmod2, &b.wcq, &b.bcq);
        let kc = linear_fw(&speech_proj, &b.wck, &b.bck);
        let vc = linear_fw(&speech_proj, &b.wcv, &b.bcv);
        let (cross_out, cross_attn) = attention_fw(
            &qc,
            &kc,
            &vc,
            &cross_bias,
            cfg.n_heads,
            &pos_cross_q,
            &pos_cross_k,
        )?;
        let ca = linear_fw(&cross_out, &b.wco, &b.bco);
        h = &h + &(&ca * &g2);
        let sub_cross = SublayerCache { ln: ln2, xmod: xmod2, scale: sc2, gate: g2, out: ca };

        // feed-forward
        let (xmod3, ln3, sc3, g3) = sublayer_norm_mod(&h, &mods, d, 6);
        let ffn_pre = linear_fw(&xmod3, &b.w1, &b.b1);
        let ffn_act = gelu_fw(&ffn_pre);
        let ff = linear_fw(&ffn_act, &b.w2, &b.b2);
        h = &h + &(&ff * &g3);
        let sub_ffn = SublayerCache { ln: ln3, xmod: xmod3, scale: sc3, gate: g3, out: ff };

        block_caches.push(BlockCache {
            self_attn,
            self_attn_out: attn_out,
            cross_attn,
            cross_attn_out: cross_out,
            ffn_pre,
            ffn_act,
            sub_self,
            sub_cross,
            sub_ffn,
        });
    }

    // final modulated norm + velocity head
    let final_mods = linear_fw(&cond_vec, &params.w_modf, &params.b_modf);
    let final_shift = split_mod(&final_mods, d, 0);
    let final_scale = split_mod(&final_mods, d, 1);
    let (final_xhat, ln_final) = layernorm_fw(&h);
    let final_mod = modulate(&final_xhat, &final_scale, &final_shift);
    let velocity = linear_fw(&final_mod, &params.w_head, &params.b_head);

    if !velocity.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite model output"));
    }

    let cache = ForwardCache {
        xin,
        h0,
        conv_pre,
        conv_act,
        temb,
        temb_pre,
        temb_act,
        cond_vec,
        speech_in: speech.clone(),
        speech_proj,
        blocks: block_caches,
        ln_final,
        final_scale,
        final_xhat,
        final_mod,
        pos_self,
        pos_cross_q,
        pos_cross_k,
    };
    Ok((velocity, cache))
}

/// Backward: d(modulated input), d(shift), d(scale) of a modulated norm.
fn modulate_bw(
    dxmod: &Array2<f64>,
    xhat: &Array2<f64>,
    scale: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let dxhat = dxmod * &(scale + 1.0);
    let dscale = (dxmod * xhat).sum_axis(Axis(0));
    let dshift = dxmod.sum_axis(Axis(0));
    (dxhat, dscale, dshift)
}

/// Accumulate parameter gradients for d(loss)/d(velocity). Returns nothing;
/// gradients are summed into `grads` (shaped like the parameters).
pub fn backward(
    params: &DiTParameters,
    cfg: &DiTConfig,
    cache: &ForwardCache,
    d_velocity: &Array2<f64>,
    grads: &mut DiTParameters,
) {
    let d = cfg.d_model;

    // velocity head
    let (d_final_mod, dw_head, db_head) =
        linear_bw(&cache.final_mod, &params.w_head, d_velocity);
    grads.w_head += &dw_head;
    grads.b_head += &db_head;

    // final modulation + norm
    let (d_final_xhat, dsc_f, dsh_f) =
        modulate_bw(&d_final_mod, &cache.final_xhat, &cache.final_scale);
    let mut d_final_mods = Array2::zeros((1, 2 * d));
    d_final_mods.slice_mut(s![0, 0..d]).assign(&dsh_f);
    d_final_mods.slice_mut(s![0, d..2 * d]).assign(&dsc_f);
    let (dc_final, dw_modf, db_modf) =
        linear_bw(&cache.cond_vec, &params.w_modf, &d_final_mods);
    grads.w_modf += &dw_modf;
    grads.b_modf += &db_modf;
    let mut d_cond = dc_final;

    let mut dh = layernorm_bw(&cache.ln_final, &d_final_xhat);
    let mut d_speech_proj: Array2<f64> = Array2::zeros(cache.speech_proj.raw_dim());

    for idx in (0..params.blocks.len()).rev() {
        let b = &params.blocks[idx];
        let bc = &cache.blocks[idx];
        let gb = grads_block(b, bc, cfg, cache, &mut dh, &mut d_speech_proj);
        // modulation gradient back to the conditioning vector
        let (dc_b, dwmod, dbmod) = linear_bw(&cache.cond_vec, &b.wmod, &gb.d_mods);
        d_cond = d_cond + dc_b;
        let g = &mut grads.blocks[idx];
        g.wq += &gb.wq;
        g.bq += &gb.bq;
        g.wk += &gb.wk;
        g.bk += &gb.bk;
        g.wv += &gb.wv;
        g.bv += &gb.bv;
        g.wo += &gb.wo;
        g.bo += &gb.bo;
        g.wcq += &gb.wcq;
        g.bcq += &gb.bcq;
        g.wck += &gb.wck;
        g.bck += &gb.bck;
        g.wcv += &gb.wcv;
        g.bcv += &gb.bcv;
        g.wco += &gb.wco;
        g.bco += &gb.bco;
        g.w1 += &gb.w1;
        g.b1 += &gb.b1;
        g.w2 += &gb.w2;
        g.b2 += &gb.b2;
        g.wmod += &dwmod;
        g.bmod += &dbmod;
    }

    // speech projection
    let (_, dw_sp, db_sp) = linear_bw(&cache.speech_in, &params.w_sp, &d_speech_proj);
    grads.w_sp += &dw_sp;
    grads.b_sp += &db_sp;

    // timestep MLP
    let (d_temb_act, dwt2, dbt2) = linear_bw(&cache.temb_act, &params.wt2, &d_cond);
    grads.wt2 += &dwt2;
    grads.bt2 += &dbt2;
    let d_temb_pre = silu_bw(&cache.temb_pre, &d_temb_act);
    let (_, dwt1, dbt1) = linear_bw(&cache.temb, &params.wt1, &d_temb_pre);
    grads.wt1 += &dwt1;
    grads.bt1 += &dbt1;

    // convolutional positional embedding: h = h0 + conv2(silu(conv1(h0)))
    let (d_conv_act, dconv2_w, dconv2_b) = dwconv_bw(&cache.conv_act, &params.conv2_w, &dh);
    grads.conv2_w += &dconv2_w;
    grads.conv2_b += &dconv2_b;
    let d_conv_pre = silu_bw(&cache.conv_pre, &d_conv_act);
    let (dh0_conv, dconv1_w, dconv1_b) = dwconv_bw(&cache.h0, &params.conv1_w, &d_conv_pre);
    grads.conv1_w += &dconv1_w;
    grads.conv1_b += &dconv1_b;
    let dh0 = &dh + &dh0_conv;

    let (_, dw_in, db_in) = linear_bw(&cache.xin, &params.w_in, &dh0);
    grads.w_in += &dw_in;
    grads.b_in += &db_in;
}

struct BlockGrads {
    wq: Array2<f64>,
    bq: Array1<f64>,
    wk: Array2<f64>,
    bk: Array1<f64>,
    wv: Array2<f64>,
    bv: Array1<f64>,
    wo: Array2<f64>,
    bo: Array1<f64>,
    wcq: Array2<f64>,
    bcq: Array1<f64>,
    wck: Array2<f64>,
    bck: Array1<f64>,
    wcv: Array2<f64>,
    bcv: Array1<f64>,
    wco: Array2<f64>,
    bco: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    d_mods: Array2<f64>,
}

/// Backward through one block. `dh` enters as d(block output) and leaves as
/// d(block input); speech-projection gradients accumulate across blocks.
fn grads_block(
    b: &BlockParams,
    bc: &BlockCache,
    _cfg: &DiTConfig,
    cache: &ForwardCache,
    dh: &mut Array2<f64>,
    d_speech_proj: &mut Array2<f64>,
) -> BlockGrads {
    let d = b.wq.nrows();
    let mut d_mods = Array2::zeros((1, MOD_PER_BLOCK * d));
    let set_mod = |m: &mut Array2<f64>, idx: usize, v: &Array1<f64>| {
        m.slice_mut(s![0, idx * d..(idx + 1) * d]).assign(v);
    };

    // --- FFN sublayer ---
    let sc = &bc.sub_ffn;
    let dg3 = (&*dh * &sc.out).sum_axis(Axis(0));
    let dff = &*dh * &sc.gate;
    let (d_ffn_act, dw2, db2) = linear_bw(&bc.ffn_act, &b.w2, &dff);
    let d_ffn_pre = gelu_bw(&bc.ffn_pre, &d_ffn_act);
    let (dxmod3, dw1, db1) = linear_bw(&sc.xmod, &b.w1, &d_ffn_pre);
    let (dxhat3, dsc3, dsh3) = modulate_bw(&dxmod3, &sc.ln.xhat, &sc.scale);
    *dh = &*dh + &layernorm_bw(&sc.ln, &dxhat3);
    set_mod(&mut d_mods, 6, &dsh3);
    set_mod(&mut d_mods, 7, &dsc3);
    set_mod(&mut d_mods, 8, &dg3);

    // --- cross-attention sublayer ---
    let sc = &bc.sub_cross;
    let dg2 = (&*dh * &sc.out).sum_axis(Axis(0));
    let dca = &*dh * &sc.gate;
    let (d_cross_out, dwco, dbco) = linear_bw(&bc.cross_attn_out, &b.wco, &dca);
    let (dqc, dkc, dvc) = attention_bw(
        &bc.cross_attn,
        &d_cross_out,
        &cache.pos_cross_q,
        &cache.pos_cross_k,
    );
    let (dxmod2_q, dwcq, dbcq) = linear_bw(&sc.xmod, &b.wcq, &dqc);
    let (ds_k, dwck, dbck) = linear_bw(&cache.speech_proj, &b.wck, &dkc);
    let (ds_v, dwcv, dbcv) = linear_bw(&cache.speech_proj, &b.wcv, &dvc);
    *d_speech_proj = &*d_speech_proj + &ds_k + &ds_v;
    let (dxhat2, dsc2, dsh2) = modulate_bw(&dxmod2_q, &sc.ln.xhat, &sc.scale);
    *dh = &*dh + &layernorm_bw(&sc.ln, &dxhat2);
    set_mod(&mut d_mods, 3, &dsh2);
    set_mod(&mut d_mods, 4, &dsc2);
    set_mod(&mut d_mods, 5, &dg2);

    // --- self-attention sublayer ---
    let sc = &bc.sub_self;
    let dg1 = (&*dh * &sc.out).sum_axis(Axis(0));
    let dsa = &*dh * &sc.gate;
    let (d_attn_out, dwo, dbo) = linear_bw(&bc.self_attn_out, &b.wo, &dsa);
    let (dq, dk, dv) = attention_bw(&bc.self_attn, &d_attn_out, &cache.pos_self, &cache.pos_self);
    let (dxmod1_q, dwq, dbq) = linear_bw(&sc.xmod, &b.wq, &dq);
    let (dxmod1_k, dwk, dbk) = linear_bw(&sc.xmod, &b.wk, &dk);
    let (dxmod1_v, dwv, dbv) = linear_bw(&sc.xmod, &b.wv, &dv);
    let dxmod1 = dxmod1_q + dxmod1_k + dxmod1_v;
    let (dxhat1, dsc1, dsh1) = modulate_bw(&dxmod1, &sc.ln.xhat, &sc.scale);
    *dh = &*dh + &layernorm_bw(&sc.ln, &dxhat1);
    set_mod(&mut d_mods, 0, &dsh1);
    set_mod(&mut d_mods, 1, &dsc1);
    set_mod(&mut d_mods, 2, &dg1);

    BlockGrads {
        wq: dwq,
        bq: dbq,
        wk: dwk,
        bk: dbk,
        wv: dwv,
        bv: dbv,
        wo: dwo,
        bo: dbo,
        wcq: dwcq,
        bcq: dbcq,
        wck: dwck,
        bck: dbck,
        wcv: dwcv,
        bcv: dbcv,
        wco: dwco,
        bco: dbco,
        w1: dw1,
        b1: db1,
        w2: dw2,
        b2: db2,
        d_mods,
    }
}
