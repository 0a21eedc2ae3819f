//! The trainable toy denoiser.
//!
//! A small pixel-space U-Net with eight self-attention layers (four encoder,
//! four decoder), each paired with a cross-attention block onto the caption
//! tokens. Weights live in a single flat f32 vector. The forward pass is
//! bit-deterministic for fixed inputs, weights, and overrides.

mod gradcheck;
pub mod net;
pub mod ops;
pub mod params;
pub mod taps;
pub mod vocab;

use std::path::Path;

use ndarray::{Array3, Array4};

pub use taps::{AttnSite, CrossAttnMap, OverrideFn, TapRecord};
use vocab::{TokenId, Vocab, MAX_TOKENS, NULL_TOKEN};

use crate::attention::BranchTag;
use crate::error::{Error, Result};
use crate::Latent;

/// Architecture hyperparameters. `c0/c1/c2` are the channel widths at full,
/// half, and quarter resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub c0: usize,
    pub c1: usize,
    pub c2: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub time_dim: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            channels: 3,
            c0: 16,
            c1: 32,
            c2: 48,
            heads: 2,
            head_dim: 16,
            time_dim: 32,
            vocab_size: Vocab.len(),
            max_tokens: MAX_TOKENS,
        }
    }
}

impl ModelConfig {
    pub fn token_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 4 != 0 || self.image_size < 8 {
            return Err(Error::invalid("image_size must be a multiple of 4, at least 8"));
        }
        if self.heads == 0 || self.head_dim == 0 || self.time_dim < 2 {
            return Err(Error::invalid("heads, head_dim, time_dim must be positive"));
        }
        Ok(())
    }
}

pub const ATTN_LAYERS: usize = 8;
pub const DECODER_START: usize = 4;

/// Descriptor of one self-attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnLayerDesc {
    pub index: usize,
    /// Slot in the 16-layer dispatch convention used by control schedules.
    pub dispatch_index: usize,
    pub resolution: (usize, usize),
    pub heads: usize,
    pub head_dim: usize,
    pub channels: usize,
    pub is_decoder: bool,
}

/// Fixed attention layout: two blocks at half resolution and two at quarter
/// resolution per side, encoder first. Layer `i` maps to dispatch slot
/// `2 * i`, so the decoder starts at slot 8 as in the 16-layer convention.
pub fn attention_layout(cfg: &ModelConfig) -> Vec<AttnLayerDesc> {
    let half = cfg.image_size / 2;
    let quarter = cfg.image_size / 4;
    let plan: [((usize, usize), usize, bool); ATTN_LAYERS] = [
        ((half, half), cfg.c1, false),
        ((half, half), cfg.c1, false),
        ((quarter, quarter), cfg.c2, false),
        ((quarter, quarter), cfg.c2, false),
        ((quarter, quarter), cfg.c2, true),
        ((quarter, quarter), cfg.c2, true),
        ((half, half), cfg.c1, true),
        ((half, half), cfg.c1, true),
    ];
    plan.iter()
        .enumerate()
        .map(|(i, &(resolution, channels, is_decoder))| AttnLayerDesc {
            index: i,
            dispatch_index: if i < DECODER_START {
                i * 8 / DECODER_START
            } else {
                8 + (i - DECODER_START) * 8 / (ATTN_LAYERS - DECODER_START)
            },
            resolution,
            heads: cfg.heads,
            head_dim: cfg.head_dim,
            channels,
            is_decoder,
        })
        .collect()
}

/// A caption padded to `max_tokens` with null tokens. `len` is the unpadded
/// prompt length (0 for unconditional input).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedPrompt {
    pub ids: Vec<TokenId>,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    cfg: ModelConfig,
    handles: params::Handles,
    weights: Vec<f32>,
    layers: Vec<AttnLayerDesc>,
}

impl ToyDenoiser {
    /// Fresh network with seeded initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<ToyDenoiser> {
        cfg.validate()?;
        let handles = params::build_handles(&cfg);
        let weights = params::init_params(&cfg, &handles, seed);
        let layers = attention_layout(&cfg);
        Ok(ToyDenoiser { cfg, handles, weights, layers })
    }

    pub fn from_weights(cfg: ModelConfig, weights: Vec<f32>) -> Result<ToyDenoiser> {
        cfg.validate()?;
        let handles = params::build_handles(&cfg);
        if weights.len() != handles.total {
            return Err(Error::format(format!(
                "weight vector has {} parameters, architecture needs {}",
                weights.len(),
                handles.total
            )));
        }
        let layers = attention_layout(&cfg);
        Ok(ToyDenoiser { cfg, handles, weights, layers })
    }

    pub fn load(path: &Path) -> Result<ToyDenoiser> {
        let (cfg, weights) = params::load_weights(path)?;
        ToyDenoiser::from_weights(cfg, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        params::save_weights(path, &self.cfg, &self.weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn handles(&self) -> &params::Handles {
        &self.handles
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn param_count(&self) -> usize {
        self.handles.total
    }

    pub fn attention_layers(&self) -> &[AttnLayerDesc] {
        &self.layers
    }

    /// Distinct attention resolutions, coarse to fine.
    pub fn attention_resolutions(&self) -> Vec<(usize, usize)> {
        let mut rs: Vec<(usize, usize)> = self.layers.iter().map(|l| l.resolution).collect();
        rs.sort();
        rs.dedup();
        rs
    }

    /// Finest attention resolution (used for cross-attention mask extraction).
    pub fn finest_attention_resolution(&self) -> (usize, usize) {
        *self.attention_resolutions().last().expect("at least one attention layer")
    }

    /// Pads a caption for the forward pass. `None` is the unconditional
    /// (all-null) prompt.
    pub fn pad_prompt(&self, tokens: Option<&[TokenId]>) -> Result<PaddedPrompt> {
        match tokens {
            None => Ok(PaddedPrompt { ids: vec![NULL_TOKEN; self.cfg.max_tokens], len: 0 }),
            Some(t) => {
                if t.len() > self.cfg.max_tokens {
                    return Err(Error::invalid(format!(
                        "prompt of {} tokens exceeds max {}",
                        t.len(),
                        self.cfg.max_tokens
                    )));
                }
                for id in t {
                    if *id >= self.cfg.vocab_size {
                        return Err(Error::invalid(format!("unknown token id {id}")));
                    }
                }
                let mut ids = t.to_vec();
                ids.resize(self.cfg.max_tokens, NULL_TOKEN);
                Ok(PaddedPrompt { ids, len: t.len() })
            }
        }
    }

    /// Raw per-sample forward pass (f32).
    pub fn forward_raw(
        &self,
        xs: &[Array3<f32>],
        ts: &[usize],
        prompts: &[PaddedPrompt],
        opts: net::ForwardOptions<'_, '_>,
    ) -> Result<net::ForwardArtifacts> {
        net::forward(&self.cfg, &self.handles, &self.weights, xs, ts, prompts, opts)
    }

    /// Backward pass over a cached forward; accumulates into `grads`.
    pub fn backward_raw(
        &self,
        cache: &net::Cache,
        d_eps: &[Array3<f32>],
        grads: &mut [f32],
    ) -> Result<()> {
        net::backward(&self.cfg, &self.handles, &self.weights, cache, d_eps, grads)
    }

    /// Plain noise prediction over a batch with per-element conditioning.
    pub fn predict_batch(
        &self,
        z: &Latent,
        t: usize,
        cond: &[Option<&[TokenId]>],
    ) -> Result<Latent> {
        let xs = latent_to_samples(z);
        if cond.len() != xs.len() {
            return Err(Error::invalid("conditioning length must match batch"));
        }
        let prompts: Vec<PaddedPrompt> =
            cond.iter().map(|c| self.pad_prompt(*c)).collect::<Result<_>>()?;
        let arts =
            self.forward_raw(&xs, &vec![t; xs.len()], &prompts, net::ForwardOptions::default())?;
        Ok(samples_to_latent(&arts.eps))
    }

    /// Hookable prediction: returns the noise estimate together with every
    /// self-attention triplet and cross-attention map, applying `override_fn`
    /// (when given) at each self-attention layer.
    pub fn denoise_with_taps(
        &self,
        z: &Latent,
        t: usize,
        cond: &[Option<&[TokenId]>],
        override_fn: Option<&mut OverrideFn<'_>>,
        branch_tags: Option<Vec<BranchTag>>,
    ) -> Result<(Latent, TapRecord)> {
        let xs = latent_to_samples(z);
        let b = xs.len();
        if cond.len() != b {
            return Err(Error::invalid("conditioning length must match batch"));
        }
        let prompts: Vec<PaddedPrompt> =
            cond.iter().map(|c| self.pad_prompt(*c)).collect::<Result<_>>()?;
        let arts = self.forward_raw(
            &xs,
            &vec![t; b],
            &prompts,
            net::ForwardOptions { record_taps: true, override_fn, branch_tags },
        )?;
        Ok((samples_to_latent(&arts.eps), arts.taps.unwrap_or_default()))
    }
}

/// `[B, C, H, W]` f64 latent to per-sample f32 arrays.
pub fn latent_to_samples(z: &Latent) -> Vec<Array3<f32>> {
    let (b, c, h, w) = z.dim();
    (0..b)
        .map(|i| Array3::from_shape_fn((c, h, w), |(ci, y, x)| z[[i, ci, y, x]] as f32))
        .collect()
}

pub fn samples_to_latent(xs: &[Array3<f32>]) -> Latent {
    let (c, h, w) = xs[0].dim();
    Array4::from_shape_fn((xs.len(), c, h, w), |(i, ci, y, x)| xs[i][[ci, y, x]] as f64)
}
