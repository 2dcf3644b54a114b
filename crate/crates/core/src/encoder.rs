//! Token encoder: embedding lookup plus a learned position table, followed
//! by one tanh mixing layer.
//!
//! `states[i] = tanh(mix_w · (token_table[ids[i]] + pos_table[i]) + mix_b)`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, column_sums, Mat, Param};

/// Reserved padding id. Its embedding row is frozen at zero.
pub const PAD_ID: u32 = 0;

/// A padded token sequence: `ids.len() == max_len`, positions past `len` are PAD.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    ids: Vec<u32>,
    len: usize,
}

impl TokenSeq {
    /// Pads `tokens` with PAD up to `max_len`.
    pub fn new(tokens: &[u32], max_len: usize) -> Result<Self> {
        if tokens.len() > max_len {
            return Err(Error::Config(format!(
                "sequence of length {} exceeds max_len {max_len}",
                tokens.len()
            )));
        }
        let mut ids = tokens.to_vec();
        ids.resize(max_len, PAD_ID);
        Ok(TokenSeq {
            ids,
            len: tokens.len(),
        })
    }

    /// Builds from an already padded id list and a true length.
    pub fn from_padded(ids: Vec<u32>, len: usize) -> Result<Self> {
        if len > ids.len() {
            return Err(Error::Config(format!(
                "length {len} exceeds padded length {}",
                ids.len()
            )));
        }
        if let Some(pos) = ids[len..].iter().position(|&id| id != PAD_ID) {
            return Err(Error::Config(format!(
                "non-PAD id at padded position {}",
                len + pos
            )));
        }
        Ok(TokenSeq { ids, len })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// All ids including padding.
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// The real (unpadded) tokens.
    pub fn tokens(&self) -> &[u32] {
        &self.ids[..self.len]
    }

    /// `true` at real positions.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.len).collect()
    }
}

/// Per-token hidden states (unpadded, `len × k`) and the padded length they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSeq {
    pub states: Mat,
    pub max_len: usize,
}

impl HiddenSeq {
    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows() == 0
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.max_len).map(|i| i < self.len()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_table: Param,
    pub pos_table: Param,
    pub mix_w: Param,
    pub mix_b: Param,
}

impl EncoderParams {
    pub fn vocab_size(&self) -> usize {
        self.token_table.value.rows()
    }

    pub fn hidden(&self) -> usize {
        self.token_table.value.cols()
    }

    pub fn max_len(&self) -> usize {
        self.pos_table.value.rows()
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.token_table, &self.pos_table, &self.mix_w, &self.mix_b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.token_table,
            &mut self.pos_table,
            &mut self.mix_w,
            &mut self.mix_b,
        ]
    }
}

pub(crate) fn uniform_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Mat {
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Mat::from_vec(rows, cols, data).expect("sized by construction")
}

/// Uniform init in `[−1/√k, 1/√k]` from a seeded ChaCha stream; PAD row zeroed.
pub fn init_encoder(vocab_size: usize, k: usize, max_len: usize, seed: u64) -> Result<EncoderParams> {
    if vocab_size < 1 || k < 1 || max_len < 1 {
        return Err(Error::Config(format!(
            "encoder sizes must be >= 1 (vocab {vocab_size}, k {k}, max_len {max_len})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (k as f64).sqrt();
    let token_table = Param::new("encoder.token_table", uniform_mat(&mut rng, vocab_size, k, bound))
        .with_frozen_rows(vec![PAD_ID as usize]);
    let pos_table = Param::new("encoder.pos_table", uniform_mat(&mut rng, max_len, k, bound));
    let mix_w = Param::new("encoder.mix_w", uniform_mat(&mut rng, k, k, bound));
    let mix_b = Param::new("encoder.mix_b", uniform_mat(&mut rng, 1, k, bound));
    Ok(EncoderParams {
        token_table,
        pos_table,
        mix_w,
        mix_b,
    })
}

#[derive(Debug, Clone)]
pub struct EncodeCache {
    tokens: Vec<u32>,
    inputs: Mat,
    states: Mat,
}

pub fn encode(seq: &TokenSeq, params: &EncoderParams) -> Result<(HiddenSeq, EncodeCache)> {
    let vocab_size = params.vocab_size();
    let k = params.hidden();
    if seq.max_len() > params.max_len() {
        return Err(Error::Config(format!(
            "sequence padded to {} but position table holds {}",
            seq.max_len(),
            params.max_len()
        )));
    }
    if let Some(&id) = seq.ids().iter().find(|&&id| id as usize >= vocab_size) {
        return Err(Error::Vocabulary { id, vocab_size });
    }
    let tokens = seq.tokens().to_vec();
    let mut inputs = Mat::zeros(tokens.len(), k);
    for (i, &id) in tokens.iter().enumerate() {
        let tok = params.token_table.value.row(id as usize);
        let pos = params.pos_table.value.row(i);
        for ((x, t), p) in inputs.row_mut(i).iter_mut().zip(tok).zip(pos) {
            *x = t + p;
        }
    }
    let mut pre = tensor::matmul_nt(&inputs, &params.mix_w.value)?;
    let bias = params.mix_b.value.row(0);
    for i in 0..pre.rows() {
        for (x, b) in pre.row_mut(i).iter_mut().zip(bias) {
            *x += b;
        }
    }
    let states = tensor::tanh(&pre);
    let hidden = HiddenSeq {
        states: states.clone(),
        max_len: seq.max_len(),
    };
    Ok((
        hidden,
        EncodeCache {
            tokens,
            inputs,
            states,
        },
    ))
}

/// Accumulates parameter gradients given `d_states` (`len × k`).
pub fn encode_backward(cache: &EncodeCache, d_states: &Mat, params: &mut EncoderParams) -> Result<()> {
    let d_pre = tensor::tanh_backward(&cache.states, d_states)?;
    // pre = inputs · mix_wᵀ + b
    let d_mix_w = tensor::matmul_tn(&d_pre, &cache.inputs)?;
    params.mix_w.accumulate(&d_mix_w)?;
    params.mix_b.accumulate(&Mat::row_vector(&column_sums(&d_pre)))?;
    let d_inputs = tensor::matmul(&d_pre, &params.mix_w.value)?;
    for (i, &id) in cache.tokens.iter().enumerate() {
        let g = d_inputs.row(i);
        params.token_table.accumulate_row(id as usize, g);
        params.pos_table.accumulate_row(i, g);
    }
    Ok(())
}
