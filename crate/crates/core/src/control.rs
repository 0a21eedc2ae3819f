//! Control schedules, the per-(step, layer) edit dispatcher, and the two
//! branch-fusion operations.
//!
//! Step index 0 is the first (noisiest) denoising step. Windows are half-open
//! `[start, end)` and the layer thresholds are inclusive (`layer >= bound`),
//! so a zero threshold means "all layers". Layer indices live in a 16-layer
//! dispatch convention; the denoiser maps its own attention layers into that
//! space (see [`crate::model::AttnLayerDesc::dispatch_index`]).

use std::fmt;

use crate::attention::{masked_attention, AttentionTriplet, FeatureMap, MaskFill};
use crate::error::{Error, Result};

/// Number of layer slots in the dispatch convention (a 16-layer U-Net).
pub const DISPATCH_LAYERS: usize = 16;

/// Step/layer windows for the two control operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlSchedule {
    pub s_gi: usize,
    pub e_gi: usize,
    pub s_lq: usize,
    pub e_lq: usize,
    pub layer_gi: usize,
    pub layer_lq: usize,
    pub total_steps: usize,
}

impl ControlSchedule {
    /// Schedule with both windows empty: every (t, l) dispatches Standard.
    pub fn disabled(total_steps: usize) -> ControlSchedule {
        ControlSchedule {
            s_gi: 0,
            e_gi: 0,
            s_lq: 0,
            e_lq: 0,
            layer_gi: 0,
            layer_lq: 0,
            total_steps,
        }
    }

    /// Named presets. Window endpoints are defined for a 50-step run and are
    /// scaled proportionally (floor) for other step counts.
    pub fn preset(name: &str, total_steps: usize) -> Option<ControlSchedule> {
        let (s_gi, e_gi, e_lq, layer_gi, layer_lq) = match name {
            "swap-uniform" => (0, 20, 48, 0, 8),
            "gen-uniform" => (0, 35, 48, 0, 0),
            _ => return None,
        };
        let scale = |v: usize| v * total_steps / 50;
        let e_gi = scale(e_gi);
        Some(ControlSchedule {
            s_gi: scale(s_gi),
            e_gi,
            s_lq: e_gi,
            e_lq: scale(e_lq),
            layer_gi,
            layer_lq,
            total_steps,
        })
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["swap-uniform", "gen-uniform"]
    }

    /// Plain-text `key=value` block, one key per line, stable ordering.
    pub fn to_text(&self) -> String {
        format!(
            "s_gi={}\ne_gi={}\ns_lq={}\ne_lq={}\nlayer_gi={}\nlayer_lq={}\ntotal_steps={}\n",
            self.s_gi, self.e_gi, self.s_lq, self.e_lq, self.layer_gi, self.layer_lq,
            self.total_steps
        )
    }

    pub fn from_text(text: &str) -> Result<ControlSchedule> {
        let mut vals = std::collections::BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("schedule line {line:?} is not key=value")))?;
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::format(format!("schedule value {v:?} is not an integer")))?;
            vals.insert(k.trim().to_string(), n);
        }
        let get = |k: &str| {
            vals.get(k)
                .copied()
                .ok_or_else(|| Error::format(format!("schedule missing key {k}")))
        };
        let known = ["s_gi", "e_gi", "s_lq", "e_lq", "layer_gi", "layer_lq", "total_steps"];
        for k in vals.keys() {
            if !known.contains(&k.as_str()) {
                return Err(Error::format(format!("unknown schedule key {k}")));
            }
        }
        Ok(ControlSchedule {
            s_gi: get("s_gi")?,
            e_gi: get("e_gi")?,
            s_lq: get("s_lq")?,
            e_lq: get("e_lq")?,
            layer_gi: get("layer_gi")?,
            layer_lq: get("layer_lq")?,
            total_steps: get("total_steps")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditDecision {
    GlobalInject,
    LocalQuery,
    Standard,
}

/// The per-(step, layer) dispatch rule.
///
/// GlobalInject iff `t` in `[s_gi, e_gi)` and `layer >= layer_gi`; LocalQuery
/// iff `t` in `[s_lq, e_lq)` and `layer >= layer_lq`; otherwise Standard.
/// Validated schedules have disjoint windows, so at most one rule can fire.
pub fn edit_dispatch(t: usize, layer: usize, schedule: &ControlSchedule) -> EditDecision {
    if t >= schedule.s_gi && t < schedule.e_gi && layer >= schedule.layer_gi {
        EditDecision::GlobalInject
    } else if t >= schedule.s_lq && t < schedule.e_lq && layer >= schedule.layer_lq {
        EditDecision::LocalQuery
    } else {
        EditDecision::Standard
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleViolation {
    GiStartAfterEnd,
    LqStartAfterEnd,
    GapBetweenWindows,
    WindowsOverlap,
    GiEndPastTotal,
    LqEndPastTotal,
}

impl fmt::Display for ScheduleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScheduleViolation::GiStartAfterEnd => "s_gi <= e_gi",
            ScheduleViolation::LqStartAfterEnd => "s_lq <= e_lq",
            ScheduleViolation::GapBetweenWindows => "no gap between windows",
            ScheduleViolation::WindowsOverlap => "windows must not cross",
            ScheduleViolation::GiEndPastTotal => "e_gi <= total_steps",
            ScheduleViolation::LqEndPastTotal => "e_lq <= total_steps",
        };
        write!(f, "{s}")
    }
}

fn windows_overlap(a: (usize, usize), b: (usize, usize)) -> bool {
    // half-open intervals; empty intervals never overlap
    a.0 < a.1 && b.0 < b.1 && a.0 < b.1 && b.0 < a.1
}

/// Checks the default layout: the injection window runs first, the query
/// window follows immediately (`e_gi == s_lq`), and the two never cross.
/// Violations are returned as data, one entry per violated clause.
pub fn validate_schedule(s: &ControlSchedule) -> Vec<ScheduleViolation> {
    let mut v = Vec::new();
    if s.s_gi > s.e_gi {
        v.push(ScheduleViolation::GiStartAfterEnd);
    }
    if s.s_lq > s.e_lq {
        v.push(ScheduleViolation::LqStartAfterEnd);
    }
    if s.e_gi != s.s_lq {
        v.push(ScheduleViolation::GapBetweenWindows);
    }
    if windows_overlap((s.s_gi, s.e_gi), (s.s_lq, s.e_lq)) {
        v.push(ScheduleViolation::WindowsOverlap);
    }
    if s.e_gi > s.total_steps {
        v.push(ScheduleViolation::GiEndPastTotal);
    }
    if s.e_lq > s.total_steps {
        v.push(ScheduleViolation::LqEndPastTotal);
    }
    v
}

/// Validation for the reversed execution-order ablation: the query window
/// runs first and the injection window follows immediately (`e_lq == s_gi`).
pub fn validate_schedule_reversed(s: &ControlSchedule) -> Vec<ScheduleViolation> {
    let mut v = Vec::new();
    if s.s_gi > s.e_gi {
        v.push(ScheduleViolation::GiStartAfterEnd);
    }
    if s.s_lq > s.e_lq {
        v.push(ScheduleViolation::LqStartAfterEnd);
    }
    if s.e_lq != s.s_gi {
        v.push(ScheduleViolation::GapBetweenWindows);
    }
    if windows_overlap((s.s_gi, s.e_gi), (s.s_lq, s.e_lq)) {
        v.push(ScheduleViolation::WindowsOverlap);
    }
    if s.e_gi > s.total_steps {
        v.push(ScheduleViolation::GiEndPastTotal);
    }
    if s.e_lq > s.total_steps {
        v.push(ScheduleViolation::LqEndPastTotal);
    }
    v
}

/// Which constituent goes inside the editable region during fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionOrder {
    /// Subject-derived features fill the editable region (default).
    #[default]
    SubjectInEditable,
    /// Compatibility mode: condition-derived features fill the editable
    /// region, subject features the complement.
    ConditionInEditable,
}

fn check_fusion_inputs(
    triplets: &[&AttentionTriplet],
    m_s: &[bool],
    m_c: &[bool],
) -> Result<(usize, usize, usize)> {
    let first = triplets[0];
    first.check()?;
    let dims = (first.heads(), first.tokens(), first.head_dim());
    for t in &triplets[1..] {
        t.check()?;
        if (t.heads(), t.tokens(), t.head_dim()) != dims {
            return Err(Error::invalid("fusion: triplet shape mismatch across branches"));
        }
        if t.resolution != first.resolution {
            return Err(Error::invalid("fusion: triplet resolution mismatch across branches"));
        }
    }
    if m_s.len() != dims.1 || m_c.len() != dims.1 {
        return Err(Error::invalid(format!(
            "fusion: mask lengths ({}, {}) do not match token count {}",
            m_s.len(),
            m_c.len(),
            dims.1
        )));
    }
    Ok(dims)
}

/// Per-query-token selection between two feature maps: positions where the
/// editable mask is set take `inside`, the rest take `outside`.
fn fuse_by_mask(
    inside: &FeatureMap,
    outside: &FeatureMap,
    m_c: &[bool],
    order: FusionOrder,
) -> FeatureMap {
    let (heads, tokens, d) = inside.dim();
    let mut out = FeatureMap::zeros((heads, tokens, d));
    for h in 0..heads {
        for i in 0..tokens {
            let take_inside = match order {
                FusionOrder::SubjectInEditable => m_c[i],
                FusionOrder::ConditionInEditable => !m_c[i],
            };
            let src = if take_inside { inside } else { outside };
            for j in 0..d {
                out[[h, i, j]] = src[[h, i, j]];
            }
        }
    }
    out
}

/// Local query: the target's queries attend to subject keys/values inside
/// the subject mask and to condition keys/values outside the editable mask;
/// the two feature maps are then fused per query position.
pub fn local_query_fuse(
    target: &AttentionTriplet,
    subject: &AttentionTriplet,
    condition: &AttentionTriplet,
    m_s: &[bool],
    m_c: &[bool],
    order: FusionOrder,
) -> Result<FeatureMap> {
    check_fusion_inputs(&[target, subject, condition], m_s, m_c)?;
    let foreground = masked_attention(&target.q, &subject.k, &subject.v, m_s, MaskFill::WhereZero)?;
    let background =
        masked_attention(&target.q, &condition.k, &condition.v, m_c, MaskFill::WhereOne)?;
    Ok(fuse_by_mask(&foreground, &background, m_c, order))
}

/// Global injection: masked self-attention outputs of the subject and
/// condition branches (their own queries) replace the target layer's output.
pub fn global_inject_fuse(
    subject: &AttentionTriplet,
    condition: &AttentionTriplet,
    m_s: &[bool],
    m_c: &[bool],
    order: FusionOrder,
) -> Result<FeatureMap> {
    check_fusion_inputs(&[subject, condition], m_s, m_c)?;
    let foreground = masked_attention(&subject.q, &subject.k, &subject.v, m_s, MaskFill::WhereZero)?;
    let background =
        masked_attention(&condition.q, &condition.k, &condition.v, m_c, MaskFill::WhereOne)?;
    Ok(fuse_by_mask(&foreground, &background, m_c, order))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{plain_attention, BranchTag};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn swap_preset() -> ControlSchedule {
        ControlSchedule::preset("swap-uniform", 50).unwrap()
    }

    fn gen_preset() -> ControlSchedule {
        ControlSchedule::preset("gen-uniform", 50).unwrap()
    }

    #[test]
    fn presets_have_reported_values() {
        let s = swap_preset();
        assert_eq!((s.s_gi, s.e_gi, s.s_lq, s.e_lq, s.layer_gi, s.layer_lq), (0, 20, 20, 48, 0, 8));
        let g = gen_preset();
        assert_eq!((g.s_gi, g.e_gi, g.s_lq, g.e_lq, g.layer_gi, g.layer_lq), (0, 35, 35, 48, 0, 0));
        assert!(validate_schedule(&s).is_empty());
        assert!(validate_schedule(&g).is_empty());
    }

    #[test]
    fn dispatch_matches_documented_cases() {
        let s = swap_preset();
        assert_eq!(edit_dispatch(5, 3, &s), EditDecision::GlobalInject);
        assert_eq!(edit_dispatch(30, 10, &s), EditDecision::LocalQuery);
        assert_eq!(edit_dispatch(30, 5, &s), EditDecision::Standard);
        for l in 0..DISPATCH_LAYERS {
            assert_eq!(edit_dispatch(49, l, &s), EditDecision::Standard);
        }
    }

    #[test]
    fn validate_reports_every_violation() {
        let s = ControlSchedule {
            s_gi: 10,
            e_gi: 5,
            s_lq: 7,
            e_lq: 60,
            layer_gi: 0,
            layer_lq: 0,
            total_steps: 50,
        };
        let v = validate_schedule(&s);
        assert!(v.contains(&ScheduleViolation::GiStartAfterEnd));
        assert!(v.contains(&ScheduleViolation::GapBetweenWindows));
        assert!(v.contains(&ScheduleViolation::LqEndPastTotal));
    }

    #[test]
    fn reversed_layout_rejected_by_default_accepted_by_ablation_validator() {
        // SALQ [0, 20) then SAGI [20, 48)
        let rev = ControlSchedule {
            s_gi: 20,
            e_gi: 48,
            s_lq: 0,
            e_lq: 20,
            layer_gi: 0,
            layer_lq: 0,
            total_steps: 50,
        };
        assert!(!validate_schedule(&rev).is_empty());
        assert!(validate_schedule_reversed(&rev).is_empty());
    }

    #[test]
    fn schedule_text_round_trip_and_unknown_key() {
        let s = swap_preset();
        let text = s.to_text();
        assert_eq!(ControlSchedule::from_text(&text).unwrap(), s);
        assert!(ControlSchedule::from_text("bogus=1\n").is_err());
    }

    fn random_triplet(
        rng: &mut ChaCha8Rng,
        heads: usize,
        res: (usize, usize),
        d: usize,
        branch: BranchTag,
    ) -> AttentionTriplet {
        let tokens = res.0 * res.1;
        let mut gen = |_| rng.random_range(-1.0f32..1.0);
        AttentionTriplet {
            q: Array3::from_shape_simple_fn((heads, tokens, d), || 0.0).mapv(&mut gen),
            k: Array3::from_shape_simple_fn((heads, tokens, d), || 0.0).mapv(&mut gen),
            v: Array3::from_shape_simple_fn((heads, tokens, d), || 0.0).mapv(&mut gen),
            layer: 0,
            branch,
            resolution: res,
        }
    }

    #[test]
    fn local_query_degenerate_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tgt = random_triplet(&mut rng, 2, (2, 2), 3, BranchTag::Target);
        let sub = random_triplet(&mut rng, 2, (2, 2), 3, BranchTag::Subject);
        let con = random_triplet(&mut rng, 2, (2, 2), 3, BranchTag::Condition);

        // M_C all zeros: pure background term = unmasked attention onto condition
        let m_s = vec![true; 4];
        let m_c = vec![false; 4];
        let fused = local_query_fuse(&tgt, &sub, &con, &m_s, &m_c, FusionOrder::default()).unwrap();
        let expect = plain_attention(&tgt.q, &con.k, &con.v).unwrap();
        assert_eq!(fused, expect);

        // M_C and M_S all ones: unmasked attention onto subject
        let m_c = vec![true; 4];
        let fused = local_query_fuse(&tgt, &sub, &con, &m_s, &m_c, FusionOrder::default()).unwrap();
        let expect = plain_attention(&tgt.q, &sub.k, &sub.v).unwrap();
        assert_eq!(fused, expect);
    }

    #[test]
    fn global_inject_degenerate_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sub = random_triplet(&mut rng, 2, (2, 2), 3, BranchTag::Subject);
        let con = random_triplet(&mut rng, 2, (2, 2), 3, BranchTag::Condition);

        let m_s = vec![true; 4];
        let m_c = vec![false; 4];
        let fused = global_inject_fuse(&sub, &con, &m_s, &m_c, FusionOrder::default()).unwrap();
        let expect = plain_attention(&con.q, &con.k, &con.v).unwrap();
        assert_eq!(fused, expect);

        let m_c = vec![true; 4];
        let fused = global_inject_fuse(&sub, &con, &m_s, &m_c, FusionOrder::default()).unwrap();
        let expect = plain_attention(&sub.q, &sub.k, &sub.v).unwrap();
        assert_eq!(fused, expect);
    }

    #[test]
    fn fusion_order_flag_swaps_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sub = random_triplet(&mut rng, 1, (2, 2), 2, BranchTag::Subject);
        let con = random_triplet(&mut rng, 1, (2, 2), 2, BranchTag::Condition);
        let m_s = vec![true; 4];
        let m_c = vec![true, false, true, false];
        let prose =
            global_inject_fuse(&sub, &con, &m_s, &m_c, FusionOrder::SubjectInEditable).unwrap();
        let printed =
            global_inject_fuse(&sub, &con, &m_s, &m_c, FusionOrder::ConditionInEditable).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                // at each query position the two orders pick opposite constituents
                assert_ne!(prose[[0, i, j]], printed[[0, i, j]]);
            }
        }
    }

    #[test]
    fn resolution_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sub = random_triplet(&mut rng, 1, (2, 2), 2, BranchTag::Subject);
        let con = random_triplet(&mut rng, 1, (1, 4), 2, BranchTag::Condition);
        let m = vec![true; 4];
        assert!(global_inject_fuse(&sub, &con, &m, &m, FusionOrder::default()).is_err());
    }
}
