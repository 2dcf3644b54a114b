//! The trainable model: shared encoder, pair module, classifier head.
//!
//! Two wirings exist. The full model runs the cross attention module; the
//! `cross_attention = false` ablation pools each sentence's encoder states
//! independently and concatenates them, `z = [a_p; a_h]`.

use serde::{Deserialize, Serialize};

use crate::crossattn::{self, init_cross_attn, CrossAttnParams, PairCache, PairRep, PoolCache};
use crate::encoder::{self, init_encoder, EncodeCache, EncoderParams, TokenSeq};
use crate::error::{Error, Result};
use crate::objectives::{total_loss, Batch, ClassifierParams, LossConfig, Objectives};
use crate::tensor::{Mat, Param};

pub const N_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub k: usize,
    pub d: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub cross_attention: bool,
}

impl ModelDims {
    /// Width of `z`: `8k` with cross attention, `4k` for the concat ablation.
    pub fn rep_width(&self) -> usize {
        if self.cross_attention {
            8 * self.k
        } else {
            4 * self.k
        }
    }
}

/// SplitMix64 finalizer; turns one user seed into independent sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchProbe {
    pub objectives: Objectives,
    pub kink_margin: f64,
    pub max_inv_std: f64,
    pub pattern: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub encoder: EncoderParams,
    pub cross: Option<CrossAttnParams>,
    pub classifier: ClassifierParams,
}

#[derive(Debug, Clone)]
pub enum ForwardCache {
    Cross(Box<PairCache>),
    Concat {
        enc_p: EncodeCache,
        enc_h: EncodeCache,
        pool_p: PoolCache,
        pool_h: PoolCache,
        sp: Mat,
        sh: Mat,
    },
}

impl ForwardCache {
    /// Distance to the nearest ReLU kink or max-pool tie; finite-difference
    /// checks need this to exceed the step size comfortably.
    pub fn kink_margin(&self) -> f64 {
        match self {
            ForwardCache::Cross(c) => c.min_relu_margin().min(c.min_max_gap()),
            ForwardCache::Concat { sp, sh, .. } => {
                crossattn::min_top2_gap(sp).min(crossattn::min_top2_gap(sh))
            }
        }
    }

    /// Largest layer-norm amplification; 0 without cross attention.
    pub fn max_inv_std(&self) -> f64 {
        match self {
            ForwardCache::Cross(c) => c.max_inv_std(),
            ForwardCache::Concat { .. } => 0.0,
        }
    }

    /// See [`PairCache::activation_pattern`].
    pub fn activation_pattern(&self) -> Vec<usize> {
        match self {
            ForwardCache::Cross(c) => c.activation_pattern(),
            ForwardCache::Concat { sp, sh, .. } => {
                let mut out = crossattn::argmax_pattern(sp);
                out.extend(crossattn::argmax_pattern(sh));
                out
            }
        }
    }
}

impl Model {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Model> {
        if dims.n_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let encoder = init_encoder(dims.vocab_size, dims.k, dims.max_len, derive_seed(seed, 1))?;
        let cross = if dims.cross_attention {
            Some(init_cross_attn(dims.k, dims.d, derive_seed(seed, 2))?)
        } else {
            None
        };
        let classifier = ClassifierParams::new(dims.rep_width(), dims.n_classes, derive_seed(seed, 3))?;
        Ok(Model {
            dims,
            encoder,
            cross,
            classifier,
        })
    }

    pub fn forward(&self, xp: &TokenSeq, xh: &TokenSeq) -> Result<(PairRep, ForwardCache)> {
        if xp.is_empty() || xh.is_empty() {
            return Err(Error::Degenerate("empty premise or hypothesis".into()));
        }
        match &self.cross {
            Some(cross) => {
                let (rep, cache) = crossattn::forward_pair(xp, xh, &self.encoder, cross)?;
                Ok((rep, ForwardCache::Cross(Box::new(cache))))
            }
            None => {
                let (hp, enc_p) = encoder::encode(xp, &self.encoder)?;
                let (hh, enc_h) = encoder::encode(xh, &self.encoder)?;
                let (a_p, pool_p) = crossattn::pool(&hp.states)?;
                let (a_h, pool_h) = crossattn::pool(&hh.states)?;
                let rep = PairRep::from_z([a_p, a_h].concat());
                Ok((
                    rep,
                    ForwardCache::Concat {
                        enc_p,
                        enc_h,
                        pool_p,
                        pool_h,
                        sp: hp.states,
                        sh: hh.states,
                    },
                ))
            }
        }
    }

    pub fn represent(&self, xp: &TokenSeq, xh: &TokenSeq) -> Result<PairRep> {
        Ok(self.forward(xp, xh)?.0)
    }

    /// Accumulates encoder and pair-module gradients from `d_z` (gradient on raw `z`).
    pub fn backward(&mut self, cache: &ForwardCache, d_z: &[f64]) -> Result<()> {
        match cache {
            ForwardCache::Cross(c) => {
                let cross = self
                    .cross
                    .as_mut()
                    .ok_or_else(|| Error::Config("cross-attention cache on a concat model".into()))?;
                crossattn::backward_pair(c, d_z, &mut self.encoder, cross)
            }
            ForwardCache::Concat {
                enc_p,
                enc_h,
                pool_p,
                pool_h,
                ..
            } => {
                let half = d_z.len() / 2;
                let d_sp = crossattn::pool_backward(pool_p, &d_z[..half])?;
                let d_sh = crossattn::pool_backward(pool_h, &d_z[half..])?;
                encoder::encode_backward(enc_p, &d_sp, &mut self.encoder)?;
                encoder::encode_backward(enc_h, &d_sh, &mut self.encoder)
            }
        }
    }

    pub fn predict(&self, xp: &TokenSeq, xh: &TokenSeq) -> Result<usize> {
        let rep = self.represent(xp, xh)?;
        Ok(self.classifier.predict(&rep.z))
    }

    /// Forward every pair, evaluate the objective, backpropagate, and add
    /// the result into each parameter's gradient. Gradients are not zeroed here.
    pub fn accumulate_batch(
        &mut self,
        pairs: &[(&TokenSeq, &TokenSeq)],
        labels: &[usize],
        cfg: &LossConfig,
    ) -> Result<Objectives> {
        let (objectives, caches, grads) = self.evaluate_batch(pairs, labels, cfg)?;
        if let Some(ce) = &grads.ce {
            self.classifier.accumulate(ce, cfg.alpha)?;
        }
        for (cache, d_z) in caches.iter().zip(&grads.d_z) {
            self.backward(cache, d_z)?;
        }
        Ok(objectives)
    }

    /// Loss of a batch without touching gradients.
    pub fn batch_objectives(
        &self,
        pairs: &[(&TokenSeq, &TokenSeq)],
        labels: &[usize],
        cfg: &LossConfig,
    ) -> Result<Objectives> {
        Ok(self.evaluate_batch(pairs, labels, cfg)?.0)
    }

    /// Like [`Model::batch_objectives`] but also reports how close the batch
    /// sits to a non-differentiable point.
    pub fn batch_probe(
        &self,
        pairs: &[(&TokenSeq, &TokenSeq)],
        labels: &[usize],
        cfg: &LossConfig,
    ) -> Result<BatchProbe> {
        let (objectives, caches, _) = self.evaluate_batch(pairs, labels, cfg)?;
        Ok(BatchProbe {
            objectives,
            kink_margin: caches.iter().map(|c| c.kink_margin()).fold(f64::INFINITY, f64::min),
            max_inv_std: caches.iter().map(|c| c.max_inv_std()).fold(0.0, f64::max),
            pattern: caches.iter().flat_map(|c| c.activation_pattern()).collect(),
        })
    }

    fn evaluate_batch(
        &self,
        pairs: &[(&TokenSeq, &TokenSeq)],
        labels: &[usize],
        cfg: &LossConfig,
    ) -> Result<(Objectives, Vec<ForwardCache>, crate::objectives::BatchGrads)> {
        let mut reps = Vec::with_capacity(pairs.len());
        let mut caches = Vec::with_capacity(pairs.len());
        for (xp, xh) in pairs {
            let (rep, cache) = self.forward(xp, xh)?;
            reps.push(rep);
            caches.push(cache);
        }
        let batch = Batch {
            reps,
            labels: labels.to_vec(),
        };
        let (objectives, grads) = total_loss(&batch, cfg, &self.classifier)?;
        Ok((objectives, caches, grads))
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = self.encoder.params();
        if let Some(c) = &self.cross {
            out.extend(c.params());
        }
        out.extend(self.classifier.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.encoder.params_mut();
        if let Some(c) = &mut self.cross {
            out.extend(c.params_mut());
        }
        out.extend(self.classifier.params_mut());
        out
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn n_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
