//! Scaled dot-product attention with additive key masking.
//!
//! The mask-fill rule adds a large negative constant to the logits of every
//! key whose mask bit equals the fill value, before the softmax. A row whose
//! keys are all filled falls back to the unmasked attention output for that
//! row, keeping the operation total and deterministic.

use ndarray::{Array3, ArrayView2};

use crate::error::{Error, Result};

/// Additive logit penalty for filled keys.
pub const MASK_FILL_VALUE: f32 = -1e9;

/// Attention-layer output or intermediate feature block, `[heads, tokens, d]`.
pub type FeatureMap = Array3<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BranchTag {
    Subject,
    Condition,
    Target,
}

/// Query/key/value block exposed at one self-attention layer of one branch.
#[derive(Debug, Clone)]
pub struct AttentionTriplet {
    /// `[heads, tokens, d]`
    pub q: Array3<f32>,
    pub k: Array3<f32>,
    pub v: Array3<f32>,
    pub layer: usize,
    pub branch: BranchTag,
    /// Spatial resolution (h, w); tokens = h * w.
    pub resolution: (usize, usize),
}

impl AttentionTriplet {
    pub fn heads(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.q.shape()[2]
    }

    pub fn check(&self) -> Result<()> {
        if self.q.shape() != self.k.shape() || self.q.shape() != self.v.shape() {
            return Err(Error::invalid("attention triplet Q/K/V shape mismatch"));
        }
        let (h, w) = self.resolution;
        if h * w != self.tokens() {
            return Err(Error::invalid("attention triplet resolution does not match tokens"));
        }
        if self.head_dim() == 0 {
            return Err(Error::invalid("attention head dim must be positive"));
        }
        Ok(())
    }
}

/// Which mask value gets filled (excluded from attention).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskFill {
    /// Exclude keys where the mask bit is 0 (attend inside the mask).
    WhereZero,
    /// Exclude keys where the mask bit is 1 (attend outside the mask).
    WhereOne,
}

impl MaskFill {
    fn excludes(self, bit: bool) -> bool {
        match self {
            MaskFill::WhereZero => !bit,
            MaskFill::WhereOne => bit,
        }
    }
}

/// `Q Kᵀ / sqrt(d)` per head: `[heads, tokens_q, tokens_k]`.
pub fn attention_logits(q: &Array3<f32>, k: &Array3<f32>) -> Result<Array3<f32>> {
    let (hq, tq, dq) = q.dim();
    let (hk, tk, dk) = k.dim();
    if hq != hk || dq != dk {
        return Err(Error::invalid(format!(
            "attention_logits: Q [{hq},{tq},{dq}] vs K [{hk},{tk},{dk}]"
        )));
    }
    let scale = 1.0 / (dq as f32).sqrt();
    let mut out = Array3::zeros((hq, tq, tk));
    for h in 0..hq {
        let qh: ArrayView2<f32> = q.index_axis(ndarray::Axis(0), h);
        let kh: ArrayView2<f32> = k.index_axis(ndarray::Axis(0), h);
        let logits = qh.dot(&kh.t());
        let mut oh = out.index_axis_mut(ndarray::Axis(0), h);
        oh.assign(&logits);
        oh.mapv_inplace(|v| v * scale);
    }
    Ok(out)
}

/// Row-wise softmax with additive mask fill.
///
/// `mask`, when present, has one bit per key; keys excluded by `fill` get
/// [`MASK_FILL_VALUE`] added to their logits. If every key is excluded the
/// whole softmax falls back to the unmasked logits.
pub fn masked_softmax(
    logits: &Array3<f32>,
    mask: Option<(&[bool], MaskFill)>,
    out: &mut Array3<f32>,
) -> Result<()> {
    let (heads, tq, tk) = logits.dim();
    debug_assert_eq!(out.dim(), logits.dim());

    let exclusion: Option<Vec<bool>> = match mask {
        Some((bits, fill)) => {
            if bits.len() != tk {
                return Err(Error::invalid(format!(
                    "mask length {} does not match key count {tk}",
                    bits.len()
                )));
            }
            let excl: Vec<bool> = bits.iter().map(|b| fill.excludes(*b)).collect();
            if excl.iter().all(|e| *e) {
                None // all keys excluded: fall back to unmasked attention
            } else {
                Some(excl)
            }
        }
        None => None,
    };

    for h in 0..heads {
        for i in 0..tq {
            let row = logits.index_axis(ndarray::Axis(0), h);
            let row = row.row(i);
            let mut max = f32::NEG_INFINITY;
            for j in 0..tk {
                let l = match &exclusion {
                    Some(excl) if excl[j] => row[j] + MASK_FILL_VALUE,
                    _ => row[j],
                };
                if l > max {
                    max = l;
                }
            }
            let mut sum = 0.0f32;
            for j in 0..tk {
                let l = match &exclusion {
                    Some(excl) if excl[j] => row[j] + MASK_FILL_VALUE,
                    _ => row[j],
                };
                let e = (l - max).exp();
                out[[h, i, j]] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for j in 0..tk {
                out[[h, i, j]] *= inv;
            }
        }
    }
    Ok(())
}

/// `probs @ V` per head.
pub fn attention_apply(probs: &Array3<f32>, v: &Array3<f32>) -> FeatureMap {
    let (heads, tq, _tk) = probs.dim();
    let d = v.shape()[2];
    let mut out = Array3::zeros((heads, tq, d));
    for h in 0..heads {
        let ph = probs.index_axis(ndarray::Axis(0), h);
        let vh = v.index_axis(ndarray::Axis(0), h);
        let oh = ph.dot(&vh);
        out.index_axis_mut(ndarray::Axis(0), h).assign(&oh);
    }
    out
}

/// Masked attention: softmax(QKᵀ/sqrt(d) with mask fill) @ V.
pub fn masked_attention(
    q: &Array3<f32>,
    k: &Array3<f32>,
    v: &Array3<f32>,
    mask: &[bool],
    fill: MaskFill,
) -> Result<FeatureMap> {
    if k.shape() != v.shape() {
        return Err(Error::invalid("masked_attention: K/V shape mismatch"));
    }
    let logits = attention_logits(q, k)?;
    let mut probs = Array3::zeros(logits.dim());
    masked_softmax(&logits, Some((mask, fill)), &mut probs)?;
    Ok(attention_apply(&probs, v))
}

/// Plain (unmasked) attention.
pub fn plain_attention(q: &Array3<f32>, k: &Array3<f32>, v: &Array3<f32>) -> Result<FeatureMap> {
    let logits = attention_logits(q, k)?;
    let mut probs = Array3::zeros(logits.dim());
    masked_softmax(&logits, None, &mut probs)?;
    Ok(attention_apply(&probs, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn approx(a: f32, b: f32, tol: f32) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn logits_identity_rows() {
        // Q = K = identity rows, d = 1 per-entry: use 2x2 identity with d=2,
        // then check hand values instead.
        let q = array![[[1.0f32, 0.0], [0.0, 1.0]]];
        let k = q.clone();
        let l = attention_logits(&q, &k).unwrap();
        let s = 1.0 / (2.0f32).sqrt();
        approx(l[[0, 0, 0]], s, 1e-6);
        approx(l[[0, 0, 1]], 0.0, 1e-6);
        approx(l[[0, 1, 1]], s, 1e-6);
    }

    #[test]
    fn logits_orthogonal_and_scaled() {
        // d=2, Q=[[1,0]], K=[[0,1]] -> 0
        let q = array![[[1.0f32, 0.0]]];
        let k = array![[[0.0f32, 1.0]]];
        approx(attention_logits(&q, &k).unwrap()[[0, 0, 0]], 0.0, 1e-7);

        // d=4, Q=[[2,0,0,0]], K=[[3,0,0,0]] -> 6/2 = 3
        let q = array![[[2.0f32, 0.0, 0.0, 0.0]]];
        let k = array![[[3.0f32, 0.0, 0.0, 0.0]]];
        approx(attention_logits(&q, &k).unwrap()[[0, 0, 0]], 3.0, 1e-6);
    }

    #[test]
    fn logits_dimension_mismatch_rejected() {
        let q = array![[[1.0f32, 0.0]]];
        let k = array![[[1.0f32, 0.0, 0.0]]];
        assert!(attention_logits(&q, &k).is_err());
    }

    #[test]
    fn all_keys_allowed_equals_plain() {
        let q = array![[[0.3f32, -1.0], [2.0, 0.5]]];
        let k = array![[[1.0f32, 0.2], [-0.4, 0.9]]];
        let v = array![[[5.0f32, 1.0], [-2.0, 3.0]]];
        let mask = vec![true, true];
        let a = masked_attention(&q, &k, &v, &mask, MaskFill::WhereZero).unwrap();
        let b = plain_attention(&q, &k, &v).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_allowed_key_copies_its_value_row() {
        let q = array![[[0.3f32, -1.0], [2.0, 0.5]]];
        let k = array![[[1.0f32, 0.2], [-0.4, 0.9]]];
        let v = array![[[5.0f32, 1.0], [-2.0, 3.0]]];
        let mask = vec![false, true]; // only key 1 allowed under WhereZero
        let out = masked_attention(&q, &k, &v, &mask, MaskFill::WhereZero).unwrap();
        for i in 0..2 {
            approx(out[[0, i, 0]], -2.0, 1e-5);
            approx(out[[0, i, 1]], 3.0, 1e-5);
        }
    }

    #[test]
    fn uniform_logits_allowed_pair_averages_values() {
        // 3-token case, uniform logits (Q=0), keys {0,2} allowed -> (V0+V2)/2
        let q = Array3::zeros((1, 3, 2));
        let k = array![[[1.0f32, 0.0], [0.0, 1.0], [1.0, 1.0]]];
        let v = array![[[1.0f32, 2.0], [10.0, 20.0], [3.0, 4.0]]];
        let mask = vec![true, false, true];
        let out = masked_attention(&q, &k, &v, &mask, MaskFill::WhereZero).unwrap();
        for i in 0..3 {
            approx(out[[0, i, 0]], 2.0, 1e-5);
            approx(out[[0, i, 1]], 3.0, 1e-5);
        }
    }

    #[test]
    fn mask_length_mismatch_rejected() {
        let q = Array3::<f32>::zeros((1, 2, 2));
        let mask = vec![true; 3];
        assert!(masked_attention(&q, &q, &q, &mask, MaskFill::WhereZero).is_err());
    }

    #[test]
    fn fully_masked_falls_back_to_plain() {
        let q = array![[[0.3f32, -1.0], [2.0, 0.5]]];
        let k = array![[[1.0f32, 0.2], [-0.4, 0.9]]];
        let v = array![[[5.0f32, 1.0], [-2.0, 3.0]]];
        let mask = vec![false, false];
        let out = masked_attention(&q, &k, &v, &mask, MaskFill::WhereZero).unwrap();
        let plain = plain_attention(&q, &k, &v).unwrap();
        assert_eq!(out, plain);
    }

    #[test]
    fn fill_where_one_excludes_set_bits() {
        let q = Array3::zeros((1, 1, 2));
        let k = array![[[1.0f32, 0.0], [0.0, 1.0]]];
        let v = array![[[7.0f32, 0.0], [0.0, 9.0]]];
        let mask = vec![true, false];
        let out = masked_attention(&q, &k, &v, &mask, MaskFill::WhereOne).unwrap();
        approx(out[[0, 0, 0]], 0.0, 1e-6);
        approx(out[[0, 0, 1]], 9.0, 1e-5);
    }
}
