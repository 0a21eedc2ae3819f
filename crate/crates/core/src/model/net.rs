//! U-Net forward and backward passes.
//!
//! Layout: stem conv at full resolution, two pooled encoder stages with two
//! attention blocks each, a bottleneck conv, the mirrored decoder with
//! additive skip connections, and a zero-initialized prediction head. Each
//! attention block is pre-norm self-attention followed by pre-norm
//! cross-attention onto the prompt tokens, both with residuals.
//!
//! The forward pass exposes every self-attention layer to an optional
//! override (given all batch elements' Q/K/V and default outputs) and can
//! record triplets and cross-attention probabilities. The backward pass
//! refuses to run over an overridden forward.

use ndarray::{Array1, Array2, Array3};

use super::ops::*;
use super::params::{AttnH, ConvH, Handles, LinH, Seg};
use super::taps::{AttnSite, CrossAttnMap, OverrideFn, TapRecord};
use super::{ModelConfig, PaddedPrompt};
use crate::attention::{AttentionTriplet, BranchTag, FeatureMap};
use crate::error::{Error, Result};

/// `[C, H, W]` -> `[T, C]` token-major view for attention.
fn to_tokens(x: &Array3<f32>) -> Array2<f32> {
    let (c, h, w) = x.dim();
    Array2::from_shape_fn((h * w, c), |(t, ci)| x[[ci, t / w, t % w]])
}

fn from_tokens(x: &Array2<f32>, h: usize, w: usize) -> Array3<f32> {
    let (_, c) = x.dim();
    Array3::from_shape_fn((c, h, w), |(ci, y, xx)| x[[y * w + xx, ci]])
}

fn split_heads(x: &Array2<f32>, heads: usize, d: usize) -> Array3<f32> {
    let t = x.shape()[0];
    Array3::from_shape_fn((heads, t, d), |(hh, tt, dd)| x[[tt, hh * d + dd]])
}

fn merge_heads(x: &Array3<f32>) -> Array2<f32> {
    let (heads, t, d) = x.dim();
    Array2::from_shape_fn((t, heads * d), |(tt, i)| x[[i / d, tt, i % d]])
}

pub struct BlockCache {
    pub ln1: Vec<LayerNormCache>,
    pub ln1_out: Vec<Array2<f32>>,
    pub q: Vec<Array3<f32>>,
    pub k: Vec<Array3<f32>>,
    pub v: Vec<Array3<f32>>,
    pub probs: Vec<Array3<f32>>,
    pub feat2d: Vec<Array2<f32>>,
    pub overridden: Vec<bool>,
    pub after_self: Vec<Array3<f32>>,
    pub ln2: Vec<LayerNormCache>,
    pub ln2_out: Vec<Array2<f32>>,
    pub xq: Vec<Array3<f32>>,
    pub xk: Vec<Array3<f32>>,
    pub xv: Vec<Array3<f32>>,
    pub xprobs: Vec<Array3<f32>>,
    pub xfeat2d: Vec<Array2<f32>>,
    pub out: Vec<Array3<f32>>,
}

pub struct Cache {
    pub input: Vec<Array3<f32>>,
    pub t_sin: Vec<Array1<f32>>,
    pub t_h1_pre: Vec<Array1<f32>>,
    pub t_h1: Vec<Array1<f32>>,
    pub prompts: Vec<PaddedPrompt>,
    pub tok_feats: Vec<Array2<f32>>,
    pub t_feat: Vec<Array1<f32>>,
    pub stem_out: Vec<Array3<f32>>,
    pub d1_pool: Vec<Array3<f32>>,
    pub d1_pre: Vec<Array3<f32>>,
    pub d1_out: Vec<Array3<f32>>,
    pub blocks: Vec<BlockCache>, // 8, forward order
    pub d2_pool: Vec<Array3<f32>>,
    pub d2_pre: Vec<Array3<f32>>,
    pub d2_out: Vec<Array3<f32>>,
    pub mid_pre: Vec<Array3<f32>>,
    pub mid_out: Vec<Array3<f32>>,
    pub up1_pre: Vec<Array3<f32>>,
    pub up1_act: Vec<Array3<f32>>,
    pub u1_skip: Vec<Array3<f32>>,
    pub up2_pre: Vec<Array3<f32>>,
    pub up2_act: Vec<Array3<f32>>,
    pub u2_skip: Vec<Array3<f32>>,
}

pub struct ForwardArtifacts {
    pub eps: Vec<Array3<f32>>,
    pub taps: Option<TapRecord>,
    pub cache: Cache,
}

pub struct ForwardOptions<'a, 'b> {
    pub record_taps: bool,
    pub override_fn: Option<&'a mut OverrideFn<'b>>,
    /// Branch tags per batch element; defaults to Target.
    pub branch_tags: Option<Vec<BranchTag>>,
}

impl Default for ForwardOptions<'_, '_> {
    fn default() -> Self {
        ForwardOptions { record_taps: false, override_fn: None, branch_tags: None }
    }
}

fn add_time_bias(pre: &mut Array3<f32>, tproj: Seg, params: &[f32], t_feat: &Array1<f32>, td: usize) {
    let (c, h, w) = pre.dim();
    let proj = tproj.view2(params, c, td);
    for ci in 0..c {
        let mut bias = 0f32;
        for d in 0..td {
            bias += proj[[ci, d]] * t_feat[d];
        }
        for y in 0..h {
            for x in 0..w {
                pre[[ci, y, x]] += bias;
            }
        }
    }
}

fn add_time_bias_backward(
    d_pre: &Array3<f32>,
    tproj: Seg,
    params: &[f32],
    t_feat: &Array1<f32>,
    td: usize,
    grads: &mut [f32],
    d_t_feat: &mut Array1<f32>,
) {
    let (c, _, _) = d_pre.dim();
    let proj = tproj.view2(params, c, td);
    let mut chan_sum = vec![0f32; c];
    for ((ci, _, _), v) in d_pre.indexed_iter() {
        chan_sum[ci] += *v;
    }
    {
        let mut dproj = tproj.view2_mut(grads, c, td);
        for ci in 0..c {
            for d in 0..td {
                dproj[[ci, d]] += chan_sum[ci] * t_feat[d];
            }
        }
    }
    for d in 0..td {
        let mut acc = 0f32;
        for ci in 0..c {
            acc += proj[[ci, d]] * chan_sum[ci];
        }
        d_t_feat[d] += acc;
    }
}

struct AttnParams<'p> {
    h: AttnH,
    params: &'p [f32],
    heads: usize,
    head_dim: usize,
}

impl<'p> AttnParams<'p> {
    fn lw(&self, l: &LinH) -> ndarray::ArrayView2<'p, f32> {
        l.w.view2(self.params, l.fan_in, l.fan_out)
    }

    fn lb(&self, l: &LinH) -> Option<ndarray::ArrayView1<'p, f32>> {
        l.b.map(|b| b.view1(self.params))
    }
}

/// Self+cross attention block over the whole batch. Invokes the override
/// once with every element's triplet and default output.
#[allow(clippy::too_many_arguments)]
fn attn_block_forward(
    ap: &AttnParams,
    xs: &[Array3<f32>],
    tok_feats: &[Array2<f32>],
    prompts: &[PaddedPrompt],
    site: &AttnSite,
    tags: &[BranchTag],
    record_taps: bool,
    override_fn: &mut Option<&mut OverrideFn<'_>>,
    taps: &mut TapRecord,
) -> Result<BlockCache> {
    let b = xs.len();
    let (heads, d) = (ap.heads, ap.head_dim);
    let (_, hh, ww) = xs[0].dim();
    let scale = 1.0 / (d as f32).sqrt();

    let mut ln1 = Vec::with_capacity(b);
    let mut ln1_out = Vec::with_capacity(b);
    let mut qs = Vec::with_capacity(b);
    let mut ks = Vec::with_capacity(b);
    let mut vs = Vec::with_capacity(b);
    let mut probs_all = Vec::with_capacity(b);
    let mut feats: Vec<FeatureMap> = Vec::with_capacity(b);

    for x in xs {
        let x2 = to_tokens(x);
        let (n, c1) = layernorm_forward(&x2, ap.h.ln1_g.view1(ap.params), ap.h.ln1_b.view1(ap.params));
        let q = split_heads(&linear_forward(&n, ap.lw(&ap.h.wq), None), heads, d);
        let k = split_heads(&linear_forward(&n, ap.lw(&ap.h.wk), None), heads, d);
        let v = split_heads(&linear_forward(&n, ap.lw(&ap.h.wv), None), heads, d);

        let t = q.shape()[1];
        let mut probs = Array3::zeros((heads, t, t));
        let mut feat = Array3::zeros((heads, t, d));
        for hd in 0..heads {
            let qh = q.index_axis(ndarray::Axis(0), hd);
            let kh = k.index_axis(ndarray::Axis(0), hd);
            let vh = v.index_axis(ndarray::Axis(0), hd);
            let mut logits = qh.dot(&kh.t());
            logits.mapv_inplace(|lv| lv * scale);
            let p = softmax_rows(&logits);
            let f = p.dot(&vh);
            probs.index_axis_mut(ndarray::Axis(0), hd).assign(&p);
            feat.index_axis_mut(ndarray::Axis(0), hd).assign(&f);
        }
        ln1.push(c1);
        ln1_out.push(n);
        qs.push(q);
        ks.push(k);
        vs.push(v);
        probs_all.push(probs);
        feats.push(feat);
    }

    let mut overridden = vec![false; b];
    if override_fn.is_some() || record_taps {
        let triplets: Vec<AttentionTriplet> = (0..b)
            .map(|i| AttentionTriplet {
                q: qs[i].clone(),
                k: ks[i].clone(),
                v: vs[i].clone(),
                layer: site.layer,
                branch: tags[i],
                resolution: site.resolution,
            })
            .collect();
        if let Some(f) = override_fn.as_mut() {
            if let Some(replacements) = f(site, &triplets, &feats)? {
                if replacements.len() != b {
                    return Err(Error::ContractViolation(format!(
                        "override returned {} maps for batch of {b}",
                        replacements.len()
                    )));
                }
                for (i, r) in replacements.into_iter().enumerate() {
                    if r.dim() != feats[i].dim() {
                        return Err(Error::ContractViolation(format!(
                            "override output shape {:?} != expected {:?} at layer {}",
                            r.dim(),
                            feats[i].dim(),
                            site.layer
                        )));
                    }
                    if r != feats[i] {
                        overridden[i] = true;
                    }
                    feats[i] = r;
                }
            }
        }
        if record_taps {
            taps.self_attention.push(triplets);
        }
    }

    let mut feat2d = Vec::with_capacity(b);
    let mut after_self = Vec::with_capacity(b);
    let mut ln2 = Vec::with_capacity(b);
    let mut ln2_out = Vec::with_capacity(b);
    let mut xqs = Vec::with_capacity(b);
    let mut xks = Vec::with_capacity(b);
    let mut xvs = Vec::with_capacity(b);
    let mut xprobs_all = Vec::with_capacity(b);
    let mut xfeat2d = Vec::with_capacity(b);
    let mut outs = Vec::with_capacity(b);

    for i in 0..b {
        let f2 = merge_heads(&feats[i]);
        let attn_out = linear_forward(&f2, ap.lw(&ap.h.wo), ap.lb(&ap.h.wo));
        let res = &xs[i] + &from_tokens(&attn_out, hh, ww);

        let r2 = to_tokens(&res);
        let (n2, c2) =
            layernorm_forward(&r2, ap.h.ln2_g.view1(ap.params), ap.h.ln2_b.view1(ap.params));
        let xq = split_heads(&linear_forward(&n2, ap.lw(&ap.h.xq), None), heads, d);
        let xk = split_heads(&linear_forward(&tok_feats[i], ap.lw(&ap.h.xk), None), heads, d);
        let xv = split_heads(&linear_forward(&tok_feats[i], ap.lw(&ap.h.xv), None), heads, d);

        let t = xq.shape()[1];
        let l = xk.shape()[1];
        let mut xp = Array3::zeros((heads, t, l));
        let mut xf = Array3::zeros((heads, t, d));
        for hd in 0..heads {
            let qh = xq.index_axis(ndarray::Axis(0), hd);
            let kh = xk.index_axis(ndarray::Axis(0), hd);
            let vh = xv.index_axis(ndarray::Axis(0), hd);
            let mut logits = qh.dot(&kh.t());
            logits.mapv_inplace(|lv| lv * scale);
            let p = softmax_rows(&logits);
            let f = p.dot(&vh);
            xp.index_axis_mut(ndarray::Axis(0), hd).assign(&p);
            xf.index_axis_mut(ndarray::Axis(0), hd).assign(&f);
        }
        if record_taps {
            taps.cross_attention.push(CrossAttnMap {
                layer: site.layer,
                batch_index: i,
                resolution: site.resolution,
                prompt_len: prompts[i].len,
                probs: xp.clone(),
                is_decoder: site.is_decoder,
            });
        }

        let xf2 = merge_heads(&xf);
        let xout = linear_forward(&xf2, ap.lw(&ap.h.xo), ap.lb(&ap.h.xo));
        let out = &res + &from_tokens(&xout, hh, ww);

        feat2d.push(f2);
        after_self.push(res);
        ln2.push(c2);
        ln2_out.push(n2);
        xqs.push(xq);
        xks.push(xk);
        xvs.push(xv);
        xprobs_all.push(xp);
        xfeat2d.push(xf2);
        outs.push(out);
    }

    Ok(BlockCache {
        ln1,
        ln1_out,
        q: qs,
        k: ks,
        v: vs,
        probs: probs_all,
        feat2d,
        overridden,
        after_self,
        ln2,
        ln2_out,
        xq: xqs,
        xk: xks,
        xv: xvs,
        xprobs: xprobs_all,
        xfeat2d,
        out: outs,
    })
}

/// Backward through one attention block for one sample. Returns `dx` and
/// accumulates parameter gradients and the token-feature gradient.
#[allow(clippy::too_many_arguments)]
fn attn_block_backward(
    ap: &AttnParams,
    x_in: &Array3<f32>,
    bc: &BlockCache,
    tok_feats: &Array2<f32>,
    i: usize,
    dout: &Array3<f32>,
    grads: &mut [f32],
    d_tokf: &mut Array2<f32>,
) -> Result<Array3<f32>> {
    if bc.overridden[i] {
        return Err(Error::ContractViolation(
            "cannot backpropagate through an overridden attention output".into(),
        ));
    }
    let h = &ap.h;
    let (heads, d) = (ap.heads, ap.head_dim);
    let (_, hh, ww) = x_in.dim();
    let scale = 1.0 / (d as f32).sqrt();

    // out = after_self + xout
    let mut d_after_self = dout.clone();
    let d_xout = to_tokens(dout);

    // cross-attention output projection
    let dxf2 = {
        let mut dw = h.xo.w.view2_mut(grads, h.xo.fan_in, h.xo.fan_out);
        // db handled separately to avoid two mutable grad borrows
        linear_backward(&bc.xfeat2d[i], ap.lw(&h.xo), &d_xout, &mut dw, None)
    };
    if let Some(bseg) = h.xo.b {
        let mut db = bseg.view1_mut(grads);
        for row in d_xout.rows() {
            db += &row;
        }
    }
    // through cross attention heads
    let dxf3 = split_heads(&dxf2, heads, d);
    let t = bc.xq[i].shape()[1];
    let l = bc.xk[i].shape()[1];
    let mut dxq3 = Array3::zeros((heads, t, d));
    let mut dxk3 = Array3::zeros((heads, l, d));
    let mut dxv3 = Array3::zeros((heads, l, d));
    for hd in 0..heads {
        let dfh = dxf3.index_axis(ndarray::Axis(0), hd);
        let ph = bc.xprobs[i].index_axis(ndarray::Axis(0), hd).to_owned();
        let vh = bc.xv[i].index_axis(ndarray::Axis(0), hd);
        let qh = bc.xq[i].index_axis(ndarray::Axis(0), hd);
        let kh = bc.xk[i].index_axis(ndarray::Axis(0), hd);

        let dprobs = dfh.dot(&vh.t());
        dxv3.index_axis_mut(ndarray::Axis(0), hd).assign(&ph.t().dot(&dfh));
        let mut dlogits = softmax_rows_backward(&ph, &dprobs);
        dlogits.mapv_inplace(|v| v * scale);
        dxq3.index_axis_mut(ndarray::Axis(0), hd).assign(&dlogits.dot(&kh));
        dxk3.index_axis_mut(ndarray::Axis(0), hd).assign(&dlogits.t().dot(&qh));
    }
    let dxq2 = merge_heads(&dxq3);
    let d_ln2_out = {
        let mut dw = h.xq.w.view2_mut(grads, h.xq.fan_in, h.xq.fan_out);
        linear_backward(&bc.ln2_out[i], ap.lw(&h.xq), &dxq2, &mut dw, None)
    };
    let dxk2 = merge_heads(&dxk3);
    let dxv2 = merge_heads(&dxv3);
    {
        let mut dw = h.xk.w.view2_mut(grads, h.xk.fan_in, h.xk.fan_out);
        *d_tokf += &linear_backward(tok_feats, ap.lw(&h.xk), &dxk2, &mut dw, None);
    }
    {
        let mut dw = h.xv.w.view2_mut(grads, h.xv.fan_in, h.xv.fan_out);
        *d_tokf += &linear_backward(tok_feats, ap.lw(&h.xv), &dxv2, &mut dw, None);
    }

    // layernorm 2
    {
        let (dg, dbs) = (h.ln2_g, h.ln2_b);
        let mut dgv = dg.view1_mut(grads);
        // split borrows: gains first, then bias
        let mut db_local = Array1::zeros(dgv.len());
        let dr2 = layernorm_backward(
            &bc.ln2[i],
            h.ln2_g.view1(ap.params),
            &d_ln2_out,
            &mut dgv,
            &mut db_local.view_mut(),
        );
        drop(dgv);
        let mut dbv = dbs.view1_mut(grads);
        dbv += &db_local.view();
        d_after_self = &d_after_self + &from_tokens(&dr2, hh, ww);
    }

    // self-attention residual: after_self = x + attn_out
    let mut dx = d_after_self.clone();
    let d_attn_out = to_tokens(&d_after_self);

    let df2 = {
        let mut dw = h.wo.w.view2_mut(grads, h.wo.fan_in, h.wo.fan_out);
        linear_backward(&bc.feat2d[i], ap.lw(&h.wo), &d_attn_out, &mut dw, None)
    };
    if let Some(bseg) = h.wo.b {
        let mut db = bseg.view1_mut(grads);
        for row in d_attn_out.rows() {
            db += &row;
        }
    }

    let df3 = split_heads(&df2, heads, d);
    let tq = bc.q[i].shape()[1];
    let mut dq3 = Array3::zeros((heads, tq, d));
    let mut dk3 = Array3::zeros((heads, tq, d));
    let mut dv3 = Array3::zeros((heads, tq, d));
    for hd in 0..heads {
        let dfh = df3.index_axis(ndarray::Axis(0), hd);
        let ph = bc.probs[i].index_axis(ndarray::Axis(0), hd).to_owned();
        let vh = bc.v[i].index_axis(ndarray::Axis(0), hd);
        let qh = bc.q[i].index_axis(ndarray::Axis(0), hd);
        let kh = bc.k[i].index_axis(ndarray::Axis(0), hd);

        let dprobs = dfh.dot(&vh.t());
        dv3.index_axis_mut(ndarray::Axis(0), hd).assign(&ph.t().dot(&dfh));
        let mut dlogits = softmax_rows_backward(&ph, &dprobs);
        dlogits.mapv_inplace(|v| v * scale);
        dq3.index_axis_mut(ndarray::Axis(0), hd).assign(&dlogits.dot(&kh));
        dk3.index_axis_mut(ndarray::Axis(0), hd).assign(&dlogits.t().dot(&qh));
    }
    let dq2 = merge_heads(&dq3);
    let dk2 = merge_heads(&dk3);
    let dv2 = merge_heads(&dv3);

    let mut d_ln1_out = {
        let mut dw = h.wq.w.view2_mut(grads, h.wq.fan_in, h.wq.fan_out);
        linear_backward(&bc.ln1_out[i], ap.lw(&h.wq), &dq2, &mut dw, None)
    };
    {
        let mut dw = h.wk.w.view2_mut(grads, h.wk.fan_in, h.wk.fan_out);
        d_ln1_out += &linear_backward(&bc.ln1_out[i], ap.lw(&h.wk), &dk2, &mut dw, None);
    }
    {
        let mut dw = h.wv.w.view2_mut(grads, h.wv.fan_in, h.wv.fan_out);
        d_ln1_out += &linear_backward(&bc.ln1_out[i], ap.lw(&h.wv), &dv2, &mut dw, None);
    }

    {
        let mut dgv = h.ln1_g.view1_mut(grads);
        let mut db_local = Array1::zeros(dgv.len());
        let dx2 = layernorm_backward(
            &bc.ln1[i],
            h.ln1_g.view1(ap.params),
            &d_ln1_out,
            &mut dgv,
            &mut db_local.view_mut(),
        );
        drop(dgv);
        let mut dbv = h.ln1_b.view1_mut(grads);
        dbv += &db_local.view();
        dx = &dx + &from_tokens(&dx2, hh, ww);
    }

    Ok(dx)
}

/// Full forward pass. `xs` are per-sample `[channels, size, size]` latents.
pub fn forward(
    cfg: &ModelConfig,
    handles: &Handles,
    params: &[f32],
    xs: &[Array3<f32>],
    ts: &[usize],
    prompts: &[PaddedPrompt],
    mut opts: ForwardOptions<'_, '_>,
) -> Result<ForwardArtifacts> {
    let b = xs.len();
    if ts.len() != b || prompts.len() != b {
        return Err(Error::invalid("forward: batch length mismatch"));
    }
    for x in xs {
        let (c, h, w) = x.dim();
        if c != cfg.channels || h != cfg.image_size || w != cfg.image_size {
            return Err(Error::invalid(format!(
                "forward: expected [{}, {}, {}] input, got {:?}",
                cfg.channels,
                cfg.image_size,
                cfg.image_size,
                x.dim()
            )));
        }
    }
    let tags = opts
        .branch_tags
        .clone()
        .unwrap_or_else(|| vec![BranchTag::Target; b]);
    if tags.len() != b {
        return Err(Error::invalid("forward: branch tag length mismatch"));
    }

    let td = cfg.time_dim;
    let mut taps = TapRecord::default();

    // time features
    let mut t_sin = Vec::with_capacity(b);
    let mut t_h1_pre = Vec::with_capacity(b);
    let mut t_h1 = Vec::with_capacity(b);
    let mut t_feat = Vec::with_capacity(b);
    for &t in ts {
        let sin = time_embedding(t, td);
        let sin2 = sin.clone().insert_axis(ndarray::Axis(0));
        let h1p = linear_forward(
            &sin2,
            handles.time_fc1.w.view2(params, td, td),
            handles.time_fc1.b.map(|s| s.view1(params)),
        )
        .remove_axis(ndarray::Axis(0));
        let h1 = silu_vec_forward(&h1p);
        let h12 = h1.clone().insert_axis(ndarray::Axis(0));
        let feat = linear_forward(
            &h12,
            handles.time_fc2.w.view2(params, td, td),
            handles.time_fc2.b.map(|s| s.view1(params)),
        )
        .remove_axis(ndarray::Axis(0));
        t_sin.push(sin);
        t_h1_pre.push(h1p);
        t_h1.push(h1);
        t_feat.push(feat);
    }

    // token features: embedding + positional
    let tok_dim = cfg.token_dim();
    let embed = handles.tok_embed.view2(params, cfg.vocab_size, tok_dim);
    let pos = handles.tok_pos.view2(params, cfg.max_tokens, tok_dim);
    let mut tok_feats = Vec::with_capacity(b);
    for p in prompts {
        if p.ids.len() != cfg.max_tokens {
            return Err(Error::invalid("prompt not padded to max_tokens"));
        }
        let mut f = Array2::zeros((cfg.max_tokens, tok_dim));
        for (l, id) in p.ids.iter().enumerate() {
            if *id >= cfg.vocab_size {
                return Err(Error::invalid(format!("token id {id} outside vocab")));
            }
            for dd in 0..tok_dim {
                f[[l, dd]] = embed[[*id, dd]] + pos[[l, dd]];
            }
        }
        tok_feats.push(f);
    }

    let conv = |x: &Array3<f32>, h: &ConvH| {
        conv3_forward(x, h.w.view2(params, h.cout, h.cin * 9), h.b.view1(params))
    };

    // stem
    let stem_out: Vec<_> = xs.iter().map(|x| conv(x, &handles.stem)).collect();

    // encoder stage 1 (half resolution)
    let d1_pool: Vec<_> = stem_out.iter().map(avgpool2_forward).collect();
    let mut d1_pre: Vec<_> = d1_pool.iter().map(|p| conv(p, &handles.down1)).collect();
    for (i, pre) in d1_pre.iter_mut().enumerate() {
        add_time_bias(pre, handles.tproj[0], params, &t_feat[i], td);
    }
    let d1_out: Vec<_> = d1_pre.iter().map(silu_forward).collect();

    let mk_site = |layer: usize| {
        let desc = &super::attention_layout(cfg)[layer];
        AttnSite {
            layer,
            dispatch_index: desc.dispatch_index,
            resolution: desc.resolution,
            is_decoder: desc.is_decoder,
        }
    };
    let ap = |layer: usize| AttnParams {
        h: handles.attn[layer],
        params,
        heads: cfg.heads,
        head_dim: cfg.head_dim,
    };

    let mut blocks = Vec::with_capacity(8);
    let run_block = |layer: usize,
                     xs: &[Array3<f32>],
                     blocks: &mut Vec<BlockCache>,
                     taps: &mut TapRecord,
                     opts: &mut ForwardOptions<'_, '_>,
                     tok_feats: &[Array2<f32>]|
     -> Result<Vec<Array3<f32>>> {
        let bc = attn_block_forward(
            &ap(layer),
            xs,
            tok_feats,
            prompts,
            &mk_site(layer),
            &tags,
            opts.record_taps,
            &mut opts.override_fn,
            taps,
        )?;
        let outs = bc.out.clone();
        blocks.push(bc);
        Ok(outs)
    };

    let enc_a = run_block(0, &d1_out, &mut blocks, &mut taps, &mut opts, &tok_feats)?;
    let enc_b = run_block(1, &enc_a, &mut blocks, &mut taps, &mut opts, &tok_feats)?;

    // encoder stage 2 (quarter resolution)
    let d2_pool: Vec<_> = enc_b.iter().map(avgpool2_forward).collect();
    let mut d2_pre: Vec<_> = d2_pool.iter().map(|p| conv(p, &handles.down2)).collect();
    for (i, pre) in d2_pre.iter_mut().enumerate() {
        add_time_bias(pre, handles.tproj[1], params, &t_feat[i], td);
    }
    let d2_out: Vec<_> = d2_pre.iter().map(silu_forward).collect();

    let enc_c = run_block(2, &d2_out, &mut blocks, &mut taps, &mut opts, &tok_feats)?;
    let enc_d = run_block(3, &enc_c, &mut blocks, &mut taps, &mut opts, &tok_feats)?;

    // bottleneck
    let mut mid_pre: Vec<_> = enc_d.iter().map(|x| conv(x, &handles.mid)).collect();
    for (i, pre) in mid_pre.iter_mut().enumerate() {
        add_time_bias(pre, handles.tproj[2], params, &t_feat[i], td);
    }
    let mid_out: Vec<_> = mid_pre.iter().map(silu_forward).collect();

    let dec_a = run_block(4, &mid_out, &mut blocks, &mut taps, &mut opts, &tok_feats)?;
    let dec_b = run_block(5, &dec_a, &mut blocks, &mut taps, &mut opts, &tok_feats)?;

    // decoder stage 1: conv at quarter res, upsample, add encoder skip
    let mut up1_pre: Vec<_> = dec_b.iter().map(|x| conv(x, &handles.up1)).collect();
    for (i, pre) in up1_pre.iter_mut().enumerate() {
        add_time_bias(pre, handles.tproj[3], params, &t_feat[i], td);
    }
    let up1_act: Vec<_> = up1_pre.iter().map(silu_forward).collect();
    let u1_skip: Vec<_> = up1_act
        .iter()
        .zip(&enc_b)
        .map(|(u, skip)| &upsample2_forward(u) + skip)
        .collect();

    let dec_c = run_block(6, &u1_skip, &mut blocks, &mut taps, &mut opts, &tok_feats)?;
    let dec_d = run_block(7, &dec_c, &mut blocks, &mut taps, &mut opts, &tok_feats)?;

    // decoder stage 2
    let up2_pre: Vec<_> = dec_d.iter().map(|x| conv(x, &handles.up2)).collect();
    let up2_act: Vec<_> = up2_pre.iter().map(silu_forward).collect();
    let u2_skip: Vec<_> = up2_act
        .iter()
        .zip(&stem_out)
        .map(|(u, skip)| &upsample2_forward(u) + skip)
        .collect();

    let eps: Vec<_> = u2_skip.iter().map(|x| conv(x, &handles.head)).collect();

    let cache = Cache {
        input: xs.to_vec(),
        t_sin,
        t_h1_pre,
        t_h1,
        prompts: prompts.to_vec(),
        tok_feats,
        t_feat,
        stem_out,
        d1_pool,
        d1_pre,
        d1_out,
        blocks,
        d2_pool,
        d2_pre,
        d2_out,
        mid_pre,
        mid_out,
        up1_pre,
        up1_act,
        u1_skip,
        up2_pre,
        up2_act,
        u2_skip,
    };

    Ok(ForwardArtifacts { eps, taps: if opts.record_taps { Some(taps) } else { None }, cache })
}

/// Full backward pass; accumulates into `grads` (same layout as params).
pub fn backward(
    cfg: &ModelConfig,
    handles: &Handles,
    params: &[f32],
    cache: &Cache,
    d_eps: &[Array3<f32>],
    grads: &mut [f32],
) -> Result<()> {
    let b = cache.input.len();
    if d_eps.len() != b {
        return Err(Error::invalid("backward: gradient batch mismatch"));
    }
    let td = cfg.time_dim;

    let conv_back = |x: &Array3<f32>, h: &ConvH, dy: &Array3<f32>, grads: &mut [f32]| {
        let w = h.w.view2(params, h.cout, h.cin * 9);
        // gradient views created per call to satisfy the borrow checker
        let mut dwv = h.w.view2_mut(grads, h.cout, h.cin * 9);
        // SAFETY note: dw/db are disjoint segments of the same grads slice,
        // so take them one at a time.
        let dx = {
            let mut dbv_local = Array1::zeros(h.cout);
            let dx =
                conv3_backward(x, w, dy, &mut dwv, &mut dbv_local.view_mut());
            drop(dwv);
            let mut dbv = h.b.view1_mut(grads);
            dbv += &dbv_local.view();
            dx
        };
        dx
    };

    let ap = |layer: usize| AttnParams {
        h: handles.attn[layer],
        params,
        heads: cfg.heads,
        head_dim: cfg.head_dim,
    };

    let mut d_t_feat: Vec<Array1<f32>> = (0..b).map(|_| Array1::zeros(td)).collect();
    let mut d_tokf: Vec<Array2<f32>> =
        (0..b).map(|_| Array2::zeros((cfg.max_tokens, cfg.token_dim()))).collect();

    let block_input = |layer: usize, i: usize| -> &Array3<f32> {
        match layer {
            0 => &cache.d1_out[i],
            1 => &cache.blocks[0].out[i],
            2 => &cache.d2_out[i],
            3 => &cache.blocks[2].out[i],
            4 => &cache.mid_out[i],
            5 => &cache.blocks[4].out[i],
            6 => &cache.u1_skip[i],
            7 => &cache.blocks[6].out[i],
            _ => unreachable!(),
        }
    };

    let block_back = |layer: usize,
                          douts: &[Array3<f32>],
                          grads: &mut [f32],
                          d_tokf: &mut [Array2<f32>]|
     -> Result<Vec<Array3<f32>>> {
        let mut dxs = Vec::with_capacity(b);
        for i in 0..b {
            let dx = attn_block_backward(
                &ap(layer),
                block_input(layer, i),
                &cache.blocks[layer],
                &cache.tok_feats[i],
                i,
                &douts[i],
                grads,
                &mut d_tokf[i],
            )?;
            dxs.push(dx);
        }
        Ok(dxs)
    };

    // head
    let mut d_u2: Vec<Array3<f32>> = Vec::with_capacity(b);
    for i in 0..b {
        d_u2.push(conv_back(&cache.u2_skip[i], &handles.head, &d_eps[i], grads));
    }

    // u2 = upsample(up2_act) + stem_out
    let mut d_stem_accum: Vec<Array3<f32>> = d_u2.clone();
    let mut d_dec_d: Vec<Array3<f32>> = Vec::with_capacity(b);
    for i in 0..b {
        let d_up2_act = upsample2_backward(&d_u2[i]);
        let d_up2_pre = silu_backward(&cache.up2_pre[i], &d_up2_act);
        d_dec_d.push(conv_back(&cache.blocks[7].out[i], &handles.up2, &d_up2_pre, grads));
    }

    let d_dec_c = block_back(7, &d_dec_d, grads, &mut d_tokf)?;
    let d_u1 = block_back(6, &d_dec_c, grads, &mut d_tokf)?;

    // u1 = upsample(up1_act) + enc_b_out
    let mut d_enc_b_accum: Vec<Array3<f32>> = d_u1.clone();
    let mut d_dec_b: Vec<Array3<f32>> = Vec::with_capacity(b);
    for i in 0..b {
        let d_up1_act = upsample2_backward(&d_u1[i]);
        let d_up1_pre = silu_backward(&cache.up1_pre[i], &d_up1_act);
        add_time_bias_backward(
            &d_up1_pre,
            handles.tproj[3],
            params,
            &cache.t_feat[i],
            td,
            grads,
            &mut d_t_feat[i],
        );
        d_dec_b.push(conv_back(&cache.blocks[5].out[i], &handles.up1, &d_up1_pre, grads));
    }

    let d_dec_a = block_back(5, &d_dec_b, grads, &mut d_tokf)?;
    let d_mid_out = block_back(4, &d_dec_a, grads, &mut d_tokf)?;

    // bottleneck
    let mut d_enc_d: Vec<Array3<f32>> = Vec::with_capacity(b);
    for i in 0..b {
        let d_mid_pre = silu_backward(&cache.mid_pre[i], &d_mid_out[i]);
        add_time_bias_backward(
            &d_mid_pre,
            handles.tproj[2],
            params,
            &cache.t_feat[i],
            td,
            grads,
            &mut d_t_feat[i],
        );
        d_enc_d.push(conv_back(&cache.blocks[3].out[i], &handles.mid, &d_mid_pre, grads));
    }

    let d_enc_c = block_back(3, &d_enc_d, grads, &mut d_tokf)?;
    let d_d2_out = block_back(2, &d_enc_c, grads, &mut d_tokf)?;

    // encoder stage 2
    for i in 0..b {
        let d_d2_pre = silu_backward(&cache.d2_pre[i], &d_d2_out[i]);
        add_time_bias_backward(
            &d_d2_pre,
            handles.tproj[1],
            params,
            &cache.t_feat[i],
            td,
            grads,
            &mut d_t_feat[i],
        );
        let d_d2_pool = conv_back(&cache.d2_pool[i], &handles.down2, &d_d2_pre, grads);
        let (_, hh, ww) = cache.blocks[1].out[i].dim();
        d_enc_b_accum[i] = &d_enc_b_accum[i] + &avgpool2_backward(&d_d2_pool, hh, ww);
    }

    let d_enc_a = block_back(1, &d_enc_b_accum, grads, &mut d_tokf)?;
    let d_d1_out = block_back(0, &d_enc_a, grads, &mut d_tokf)?;

    // encoder stage 1
    for i in 0..b {
        let d_d1_pre = silu_backward(&cache.d1_pre[i], &d_d1_out[i]);
        add_time_bias_backward(
            &d_d1_pre,
            handles.tproj[0],
            params,
            &cache.t_feat[i],
            td,
            grads,
            &mut d_t_feat[i],
        );
        let d_d1_pool = conv_back(&cache.d1_pool[i], &handles.down1, &d_d1_pre, grads);
        let (_, hh, ww) = cache.stem_out[i].dim();
        d_stem_accum[i] = &d_stem_accum[i] + &avgpool2_backward(&d_d1_pool, hh, ww);
    }

    // stem
    for i in 0..b {
        let _ = conv_back(&cache.input[i], &handles.stem, &d_stem_accum[i], grads);
    }

    // time MLP
    for i in 0..b {
        let d_feat2 = d_t_feat[i].clone().insert_axis(ndarray::Axis(0));
        let h1_2 = cache.t_h1[i].clone().insert_axis(ndarray::Axis(0));
        let d_h1 = {
            let mut dw = handles.time_fc2.w.view2_mut(grads, td, td);
            let mut db_local = Array1::zeros(td);
            let d = linear_backward(
                &h1_2,
                handles.time_fc2.w.view2(params, td, td),
                &d_feat2,
                &mut dw,
                Some(&mut db_local.view_mut()),
            );
            drop(dw);
            if let Some(bseg) = handles.time_fc2.b {
                let mut dbv = bseg.view1_mut(grads);
                dbv += &db_local.view();
            }
            d.remove_axis(ndarray::Axis(0))
        };
        let d_h1_pre = silu_vec_backward(&cache.t_h1_pre[i], &d_h1);
        let d_h1_pre2 = d_h1_pre.insert_axis(ndarray::Axis(0));
        let sin2 = cache.t_sin[i].clone().insert_axis(ndarray::Axis(0));
        {
            let mut dw = handles.time_fc1.w.view2_mut(grads, td, td);
            let mut db_local = Array1::zeros(td);
            let _ = linear_backward(
                &sin2,
                handles.time_fc1.w.view2(params, td, td),
                &d_h1_pre2,
                &mut dw,
                Some(&mut db_local.view_mut()),
            );
            drop(dw);
            if let Some(bseg) = handles.time_fc1.b {
                let mut dbv = bseg.view1_mut(grads);
                dbv += &db_local.view();
            }
        }
    }

    // token embedding + positions
    {
        let tok_dim = cfg.token_dim();
        for i in 0..b {
            let ids = &cache.prompts[i].ids;
            let mut dembed = handles.tok_embed.view2_mut(grads, cfg.vocab_size, tok_dim);
            for (l, id) in ids.iter().enumerate() {
                for dd in 0..tok_dim {
                    dembed[[*id, dd]] += d_tokf[i][[l, dd]];
                }
            }
            drop(dembed);
            let mut dpos = handles.tok_pos.view2_mut(grads, cfg.max_tokens, tok_dim);
            for l in 0..cfg.max_tokens {
                for dd in 0..tok_dim {
                    dpos[[l, dd]] += d_tokf[i][[l, dd]];
                }
            }
        }
    }

    Ok(())
}

