//! Recording and override surfaces of the hookable forward pass.

use ndarray::Array3;

use crate::attention::{AttentionTriplet, FeatureMap};
use crate::error::Result;

/// Identifies one self-attention site during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnSite {
    /// Model layer index, 0-based in forward execution order.
    pub layer: usize,
    /// Position of this layer in the 16-slot dispatch convention.
    pub dispatch_index: usize,
    pub resolution: (usize, usize),
    pub is_decoder: bool,
}

/// Attention override invoked at every self-attention layer.
///
/// Receives the site, the Q/K/V triplets of every batch element, and the
/// default (unmodified) attention outputs. Returns one replacement feature
/// map per batch element, or `None` to keep the defaults. Replacements must
/// match the default shapes exactly.
pub type OverrideFn<'a> =
    dyn FnMut(&AttnSite, &[AttentionTriplet], &[FeatureMap]) -> Result<Option<Vec<FeatureMap>>> + 'a;

/// Cross-attention probabilities recorded at one layer for one batch element.
#[derive(Debug, Clone)]
pub struct CrossAttnMap {
    pub layer: usize,
    pub batch_index: usize,
    pub resolution: (usize, usize),
    /// Unpadded prompt length; token indices at or past this are padding.
    pub prompt_len: usize,
    /// `[heads, query_tokens, key_tokens]`, rows sum to 1.
    pub probs: Array3<f32>,
    pub is_decoder: bool,
}

/// Everything recorded by a tapped forward pass.
#[derive(Debug, Clone, Default)]
pub struct TapRecord {
    /// `[layer][batch]` self-attention triplets.
    pub self_attention: Vec<Vec<AttentionTriplet>>,
    pub cross_attention: Vec<CrossAttnMap>,
}

impl TapRecord {
    /// Cross-attention maps for one batch element, optionally restricted to
    /// decoder layers at a given resolution.
    pub fn cross_maps_for(
        &self,
        batch_index: usize,
        resolution: Option<(usize, usize)>,
        decoder_only: bool,
    ) -> Vec<&CrossAttnMap> {
        self.cross_attention
            .iter()
            .filter(|m| m.batch_index == batch_index)
            .filter(|m| resolution.map_or(true, |r| m.resolution == r))
            .filter(|m| !decoder_only || m.is_decoder)
            .collect()
    }
}
