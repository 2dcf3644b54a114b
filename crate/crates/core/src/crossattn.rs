//! Cross attention between premise and hypothesis token states, producing a
//! fixed-width pair representation.
//!
//! Pipeline for one pair, each stage with its own backward:
//!
//! 1. co-attention `C[i][j] = Pᵀ tanh(W (sp_i ⊙ sh_j))`
//! 2. alignment: row softmax of `C` attends premise tokens over the
//!    hypothesis, column softmax attends hypothesis tokens over the premise
//! 3. enhancement `ReLU(W_enh [s; s'; s − s'; s ⊙ s'] + b_enh)`, one shared
//!    projection for every token of both sentences
//! 4. per-token layer norm
//! 5. aggregation: each side is pooled to `[mean; max]` over its tokens
//!    (`2k`), then `z = [a_p; a_h; a_p − a_h; a_p ⊙ a_h]` (`8k`)
//!
//! Sequences are handled in their unpadded form, so padded positions are
//! excluded from every softmax and every pool.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, uniform_mat, EncodeCache, EncoderParams, TokenSeq};
use crate::error::{Error, Result};
use crate::tensor::{
    self, column_sums, concat_cols, elem_mul, matmul, matmul_nt, matmul_tn, norm2, relu,
    relu_backward, softmax, softmax_backward, split_cols, sub, LayerNormCache, Mat, Param,
    LAYER_NORM_EPS,
};

#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnParams {
    /// `d × k`
    pub w: Param,
    /// `1 × d`
    pub p: Param,
    /// `k × 4k`
    pub w_enh: Param,
    /// `1 × k`
    pub b_enh: Param,
    pub ln_gamma: Param,
    pub ln_beta: Param,
}

impl CrossAttnParams {
    pub fn hidden(&self) -> usize {
        self.w.value.cols()
    }

    pub fn proj_dim(&self) -> usize {
        self.w.value.rows()
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.w,
            &self.p,
            &self.w_enh,
            &self.b_enh,
            &self.ln_gamma,
            &self.ln_beta,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w,
            &mut self.p,
            &mut self.w_enh,
            &mut self.b_enh,
            &mut self.ln_gamma,
            &mut self.ln_beta,
        ]
    }
}

/// Uniform init with bound `1/√fan_in`; layer-norm gain 1 and shift 0.
pub fn init_cross_attn(k: usize, d: usize, seed: u64) -> Result<CrossAttnParams> {
    if k < 1 || d < 1 {
        return Err(Error::Config(format!("cross attention needs k >= 1 and d >= 1 (k {k}, d {d})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bk = 1.0 / (k as f64).sqrt();
    let bd = 1.0 / (d as f64).sqrt();
    let b4k = 1.0 / ((4 * k) as f64).sqrt();
    let mut ln_gamma = Mat::zeros(1, k);
    ln_gamma.fill(1.0);
    Ok(CrossAttnParams {
        w: Param::new("cross.w", uniform_mat(&mut rng, d, k, bk)),
        p: Param::new("cross.p", uniform_mat(&mut rng, 1, d, bd)),
        w_enh: Param::new("cross.w_enh", uniform_mat(&mut rng, k, 4 * k, b4k)),
        b_enh: Param::new("cross.b_enh", uniform_mat(&mut rng, 1, k, b4k)),
        ln_gamma: Param::new("cross.ln_gamma", ln_gamma),
        ln_beta: Param::new("cross.ln_beta", Mat::zeros(1, k)),
    })
}

/// Pair-level representation: raw `z` for the classifier and its unit-norm
/// copy for the contrastive term.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRep {
    pub z: Vec<f64>,
    pub z_norm: Vec<f64>,
    pub norm: f64,
}

impl PairRep {
    /// A zero `z` keeps `z_norm` all-zero; see [`PairRep::is_degenerate`].
    pub fn from_z(z: Vec<f64>) -> Self {
        let norm = norm2(&z);
        let z_norm = if norm > 0.0 {
            z.iter().map(|x| x / norm).collect()
        } else {
            z.clone()
        };
        PairRep { z, z_norm, norm }
    }

    pub fn is_degenerate(&self) -> bool {
        self.norm == 0.0
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Maps a gradient on `z_norm` back to `z`.
    pub fn normalize_backward(&self, d_z_norm: &[f64]) -> Vec<f64> {
        if self.is_degenerate() {
            return vec![0.0; self.z.len()];
        }
        let inner = tensor::dot(&self.z_norm, d_z_norm);
        d_z_norm
            .iter()
            .zip(&self.z_norm)
            .map(|(g, u)| (g - u * inner) / self.norm)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CoattnCache {
    m: usize,
    n: usize,
    /// `(m·n) × k`, row `i·n + j` is `sp_i ⊙ sh_j`
    u: Mat,
    /// `(m·n) × d`, `tanh(W u)`
    t: Mat,
}

/// `C[i][j] = Pᵀ tanh(W (sp_i ⊙ sh_j))`, an `m × n` matrix.
pub fn coattention(sp: &Mat, sh: &Mat, params: &CrossAttnParams) -> Result<(Mat, CoattnCache)> {
    let (m, n) = (sp.rows(), sh.rows());
    if m == 0 || n == 0 {
        return Err(Error::Degenerate(format!("co-attention over empty sequence ({m} × {n})")));
    }
    let k = params.hidden();
    if sp.cols() != k || sh.cols() != k {
        return Err(Error::shape("coattention", sp.shape(), sh.shape()));
    }
    let mut u = Mat::zeros(m * n, k);
    for i in 0..m {
        for j in 0..n {
            for ((o, a), b) in u.row_mut(i * n + j).iter_mut().zip(sp.row(i)).zip(sh.row(j)) {
                *o = a * b;
            }
        }
    }
    let t = tensor::tanh(&matmul_nt(&u, &params.w.value)?);
    let proj = params.p.value.row(0);
    let c_data = (0..m * n).map(|r| tensor::dot(t.row(r), proj)).collect();
    let c = Mat::from_vec(m, n, c_data)?;
    Ok((c, CoattnCache { m, n, u, t }))
}

/// Accumulates `W`, `P` gradients and returns `(d_sp, d_sh)`.
pub fn coattention_backward(
    cache: &CoattnCache,
    sp: &Mat,
    sh: &Mat,
    dc: &Mat,
    params: &mut CrossAttnParams,
) -> Result<(Mat, Mat)> {
    let (m, n) = (cache.m, cache.n);
    if dc.shape() != (m, n) {
        return Err(Error::shape("coattention_backward", (m, n), dc.shape()));
    }
    let d = params.proj_dim();
    let proj = params.p.value.row(0).to_vec();
    let mut d_p = vec![0.0; d];
    let mut d_t = Mat::zeros(m * n, d);
    for r in 0..m * n {
        let g = dc.data()[r];
        for (dp, t) in d_p.iter_mut().zip(cache.t.row(r)) {
            *dp += g * t;
        }
        for (dt, p) in d_t.row_mut(r).iter_mut().zip(&proj) {
            *dt = g * p;
        }
    }
    params.p.accumulate(&Mat::row_vector(&d_p))?;
    let d_a = tensor::tanh_backward(&cache.t, &d_t)?;
    params.w.accumulate(&matmul_tn(&d_a, &cache.u)?)?;
    let d_u = matmul(&d_a, &params.w.value)?;
    let k = sp.cols();
    let mut d_sp = Mat::zeros(m, k);
    let mut d_sh = Mat::zeros(n, k);
    for i in 0..m {
        for j in 0..n {
            let du = d_u.row(i * n + j);
            for ((o, g), b) in d_sp.row_mut(i).iter_mut().zip(du).zip(sh.row(j)) {
                *o += g * b;
            }
            for ((o, g), a) in d_sh.row_mut(j).iter_mut().zip(du).zip(sp.row(i)) {
                *o += g * a;
            }
        }
    }
    Ok((d_sp, d_sh))
}

#[derive(Debug, Clone)]
pub struct AlignCache {
    /// Row-softmax of `C` (`m × n`); row `i` is premise token `i`'s attention.
    pub premise_attn: Mat,
    /// Column-softmax of `C` (`m × n`); column `j` is hypothesis token `j`'s attention.
    pub hypothesis_attn: Mat,
}

/// Returns `(sp_attn, sh_attn)`: each premise token's convex combination of
/// hypothesis states and vice versa.
pub fn align(c: &Mat, sp: &Mat, sh: &Mat) -> Result<(Mat, Mat, AlignCache)> {
    let (m, n) = c.shape();
    if sp.rows() != m || sh.rows() != n {
        return Err(Error::shape("align", c.shape(), (sp.rows(), sh.rows())));
    }
    let mut premise_attn = Mat::zeros(m, n);
    for i in 0..m {
        let row = softmax(c.row(i), None)?;
        premise_attn.row_mut(i).copy_from_slice(&row);
    }
    let mut hypothesis_attn = Mat::zeros(m, n);
    for j in 0..n {
        let col: Vec<f64> = (0..m).map(|i| c.get(i, j)).collect();
        for (i, a) in softmax(&col, None)?.into_iter().enumerate() {
            hypothesis_attn.set(i, j, a);
        }
    }
    let sp_attn = matmul(&premise_attn, sh)?;
    let sh_attn = matmul_tn(&hypothesis_attn, sp)?;
    Ok((
        sp_attn,
        sh_attn,
        AlignCache {
            premise_attn,
            hypothesis_attn,
        },
    ))
}

/// Returns `(d_c, d_sp, d_sh)`.
pub fn align_backward(
    cache: &AlignCache,
    sp: &Mat,
    sh: &Mat,
    d_sp_attn: &Mat,
    d_sh_attn: &Mat,
) -> Result<(Mat, Mat, Mat)> {
    let (m, n) = cache.premise_attn.shape();
    // sp_attn = A_p · sh
    let d_ap = matmul_nt(d_sp_attn, sh)?;
    let d_sh = matmul_tn(&cache.premise_attn, d_sp_attn)?;
    // sh_attn = A_hᵀ · sp
    let d_ah = matmul_nt(sp, d_sh_attn)?;
    let d_sp = matmul(&cache.hypothesis_attn, d_sh_attn)?;

    let mut d_c = Mat::zeros(m, n);
    for i in 0..m {
        let g = softmax_backward(cache.premise_attn.row(i), d_ap.row(i));
        d_c.row_mut(i).copy_from_slice(&g);
    }
    for j in 0..n {
        let y: Vec<f64> = (0..m).map(|i| cache.hypothesis_attn.get(i, j)).collect();
        let dy: Vec<f64> = (0..m).map(|i| d_ah.get(i, j)).collect();
        for (i, g) in softmax_backward(&y, &dy).into_iter().enumerate() {
            d_c.set(i, j, d_c.get(i, j) + g);
        }
    }
    Ok((d_c, d_sp, d_sh))
}

#[derive(Debug, Clone)]
pub struct EnhanceCache {
    s: Mat,
    s_attn: Mat,
    features: Mat,
    pre: Mat,
}

/// `ReLU(W_enh [s; s'; s − s'; s ⊙ s'] + b_enh)` per token.
pub fn enhance(s: &Mat, s_attn: &Mat, params: &CrossAttnParams) -> Result<(Mat, EnhanceCache)> {
    let diff = sub(s, s_attn)?;
    let prod = elem_mul(s, s_attn)?;
    let features = concat_cols(&[s, s_attn, &diff, &prod])?;
    let mut pre = matmul_nt(&features, &params.w_enh.value)?;
    let bias = params.b_enh.value.row(0);
    for i in 0..pre.rows() {
        for (x, b) in pre.row_mut(i).iter_mut().zip(bias) {
            *x += b;
        }
    }
    let out = relu(&pre);
    Ok((
        out,
        EnhanceCache {
            s: s.clone(),
            s_attn: s_attn.clone(),
            features,
            pre,
        },
    ))
}

/// Accumulates `W_enh`, `b_enh` gradients and returns `(d_s, d_s_attn)`.
pub fn enhance_backward(
    cache: &EnhanceCache,
    d_out: &Mat,
    params: &mut CrossAttnParams,
) -> Result<(Mat, Mat)> {
    let d_pre = relu_backward(&cache.pre, d_out)?;
    params.w_enh.accumulate(&matmul_tn(&d_pre, &cache.features)?)?;
    params.b_enh.accumulate(&Mat::row_vector(&column_sums(&d_pre)))?;
    let d_features = matmul(&d_pre, &params.w_enh.value)?;
    let k = cache.s.cols();
    let blocks = split_cols(&d_features, &[k, k, k, k])?;
    let (d_self, d_other, d_diff, d_prod) = (&blocks[0], &blocks[1], &blocks[2], &blocks[3]);
    let mut d_s = tensor::add(d_self, d_diff)?;
    d_s.add_assign(&elem_mul(d_prod, &cache.s_attn)?)?;
    let mut d_s_attn = sub(d_other, d_diff)?;
    d_s_attn.add_assign(&elem_mul(d_prod, &cache.s)?)?;
    Ok((d_s, d_s_attn))
}

#[derive(Debug, Clone)]
pub struct NormCache {
    rows: Vec<LayerNormCache>,
}

/// Row-wise layer norm with the shared gain and shift.
pub fn normalize_seq(s: &Mat, params: &CrossAttnParams) -> Result<(Mat, NormCache)> {
    let gamma = params.ln_gamma.value.row(0);
    let beta = params.ln_beta.value.row(0);
    let mut out = Mat::zeros(s.rows(), s.cols());
    let mut rows = Vec::with_capacity(s.rows());
    for i in 0..s.rows() {
        let (y, c) = tensor::layer_norm(s.row(i), gamma, beta, LAYER_NORM_EPS)?;
        out.row_mut(i).copy_from_slice(&y);
        rows.push(c);
    }
    Ok((out, NormCache { rows }))
}

pub fn normalize_seq_backward(
    cache: &NormCache,
    d_out: &Mat,
    params: &mut CrossAttnParams,
) -> Result<Mat> {
    let gamma = params.ln_gamma.value.row(0).to_vec();
    let k = gamma.len();
    let mut d_s = Mat::zeros(d_out.rows(), k);
    let mut d_gamma = vec![0.0; k];
    let mut d_beta = vec![0.0; k];
    for (i, c) in cache.rows.iter().enumerate() {
        let (dx, dg, db) = tensor::layer_norm_backward(c, &gamma, d_out.row(i));
        d_s.row_mut(i).copy_from_slice(&dx);
        d_gamma.iter_mut().zip(&dg).for_each(|(a, b)| *a += b);
        d_beta.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
    }
    params.ln_gamma.accumulate(&Mat::row_vector(&d_gamma))?;
    params.ln_beta.accumulate(&Mat::row_vector(&d_beta))?;
    Ok(d_s)
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    rows: usize,
    argmax: Vec<usize>,
}

/// `[mean over tokens; max over tokens]`, length `2k`.
pub fn pool(s: &Mat) -> Result<(Vec<f64>, PoolCache)> {
    let mean = tensor::mean_over_rows(s)?;
    let (max, argmax) = tensor::max_over_rows(s)?;
    Ok((
        [mean, max].concat(),
        PoolCache {
            rows: s.rows(),
            argmax,
        },
    ))
}

pub fn pool_backward(cache: &PoolCache, d_pooled: &[f64]) -> Result<Mat> {
    let k = cache.argmax.len();
    let mut d = tensor::mean_over_rows_backward(cache.rows, &d_pooled[..k]);
    d.add_assign(&tensor::max_over_rows_backward(cache.rows, &cache.argmax, &d_pooled[k..]))?;
    Ok(d)
}

impl PoolCache {
    /// Row chosen by each column's max.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

#[derive(Debug, Clone)]
pub struct AggregateCache {
    a_p: Vec<f64>,
    a_h: Vec<f64>,
    pool_p: PoolCache,
    pool_h: PoolCache,
}

/// `z = [a_p; a_h; a_p − a_h; a_p ⊙ a_h]` over the pooled sides.
pub fn aggregate(sp_hat: &Mat, sh_hat: &Mat) -> Result<(PairRep, AggregateCache)> {
    if sp_hat.rows() == 0 || sh_hat.rows() == 0 {
        return Err(Error::Degenerate("aggregate over an empty sequence".into()));
    }
    let (a_p, pool_p) = pool(sp_hat)?;
    let (a_h, pool_h) = pool(sh_hat)?;
    let diff: Vec<f64> = a_p.iter().zip(&a_h).map(|(x, y)| x - y).collect();
    let prod: Vec<f64> = a_p.iter().zip(&a_h).map(|(x, y)| x * y).collect();
    let z = [a_p.clone(), a_h.clone(), diff, prod].concat();
    Ok((
        PairRep::from_z(z),
        AggregateCache {
            a_p,
            a_h,
            pool_p,
            pool_h,
        },
    ))
}

/// Returns `(d_sp_hat, d_sh_hat)` from a gradient on raw `z`.
pub fn aggregate_backward(cache: &AggregateCache, d_z: &[f64]) -> Result<(Mat, Mat)> {
    let w = cache.a_p.len();
    if d_z.len() != 4 * w {
        return Err(Error::shape("aggregate_backward", (1, 4 * w), (1, d_z.len())));
    }
    let (d1, rest) = d_z.split_at(w);
    let (d2, rest) = rest.split_at(w);
    let (d3, d4) = rest.split_at(w);
    let d_ap: Vec<f64> = (0..w).map(|i| d1[i] + d3[i] + d4[i] * cache.a_h[i]).collect();
    let d_ah: Vec<f64> = (0..w).map(|i| d2[i] - d3[i] + d4[i] * cache.a_p[i]).collect();
    Ok((
        pool_backward(&cache.pool_p, &d_ap)?,
        pool_backward(&cache.pool_h, &d_ah)?,
    ))
}

/// Everything the backward pass of [`forward_pair`] needs.
#[derive(Debug, Clone)]
pub struct PairCache {
    pub enc_p: EncodeCache,
    pub enc_h: EncodeCache,
    pub sp: Mat,
    pub sh: Mat,
    pub coattn: CoattnCache,
    pub c: Mat,
    pub align: AlignCache,
    pub enh_p: EnhanceCache,
    pub enh_h: EnhanceCache,
    pub norm_p: NormCache,
    pub norm_h: NormCache,
    pub sp_hat: Mat,
    pub sh_hat: Mat,
    pub agg: AggregateCache,
}

impl PairCache {
    /// Smallest distance of any ReLU pre-activation from zero.
    pub fn min_relu_margin(&self) -> f64 {
        self.enh_p
            .pre
            .data()
            .iter()
            .chain(self.enh_h.pre.data())
            .fold(f64::INFINITY, |m, x| m.min(x.abs()))
    }

    /// Smallest gap between the top two entries of any max-pooled column.
    pub fn min_max_gap(&self) -> f64 {
        min_top2_gap(&self.sp_hat).min(min_top2_gap(&self.sh_hat))
    }

    /// Largest layer-norm `1/sqrt(var + eps)` over all normalized rows.
    pub fn max_inv_std(&self) -> f64 {
        self.norm_p
            .rows
            .iter()
            .chain(&self.norm_h.rows)
            .fold(0.0, |m, r| m.max(r.inv_std))
    }

    /// Which ReLUs are active and which rows win each max pool. Two inputs
    /// with equal patterns lie on the same linear piece of every kink.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let relu = self
            .enh_p
            .pre
            .data()
            .iter()
            .chain(self.enh_h.pre.data())
            .map(|&x| usize::from(x > 0.0));
        relu.chain(argmax_pattern(&self.sp_hat))
            .chain(argmax_pattern(&self.sh_hat))
            .collect()
    }
}

pub(crate) fn argmax_pattern(m: &Mat) -> Vec<usize> {
    tensor::max_over_rows(m).map(|(_, idx)| idx).unwrap_or_default()
}

pub(crate) fn min_top2_gap(m: &Mat) -> f64 {
    let mut gap = f64::INFINITY;
    if m.rows() < 2 {
        return gap;
    }
    for j in 0..m.cols() {
        let mut col: Vec<f64> = (0..m.rows()).map(|i| m.get(i, j)).collect();
        col.sort_by(|a, b| b.total_cmp(a));
        gap = gap.min(col[0] - col[1]);
    }
    gap
}

/// Encoder → co-attention → align → enhance → layer norm → aggregate.
/// Premise and hypothesis share the encoder and the enhancement projection.
pub fn forward_pair(
    xp: &TokenSeq,
    xh: &TokenSeq,
    enc: &EncoderParams,
    cross: &CrossAttnParams,
) -> Result<(PairRep, PairCache)> {
    let (hp, enc_p) = encoder::encode(xp, enc)?;
    let (hh, enc_h) = encoder::encode(xh, enc)?;
    let (sp, sh) = (hp.states, hh.states);
    let (c, coattn) = coattention(&sp, &sh, cross)?;
    let (sp_attn, sh_attn, align_cache) = align(&c, &sp, &sh)?;
    let (sp_tilde, enh_p) = enhance(&sp, &sp_attn, cross)?;
    let (sh_tilde, enh_h) = enhance(&sh, &sh_attn, cross)?;
    let (sp_hat, norm_p) = normalize_seq(&sp_tilde, cross)?;
    let (sh_hat, norm_h) = normalize_seq(&sh_tilde, cross)?;
    let (rep, agg) = aggregate(&sp_hat, &sh_hat)?;
    Ok((
        rep,
        PairCache {
            enc_p,
            enc_h,
            sp,
            sh,
            coattn,
            c,
            align: align_cache,
            enh_p,
            enh_h,
            norm_p,
            norm_h,
            sp_hat,
            sh_hat,
            agg,
        },
    ))
}

/// Accumulates gradients of every encoder and cross-attention parameter
/// given `d_z`, the gradient on raw `z`.
pub fn backward_pair(
    cache: &PairCache,
    d_z: &[f64],
    enc: &mut EncoderParams,
    cross: &mut CrossAttnParams,
) -> Result<()> {
    let (d_sp_hat, d_sh_hat) = aggregate_backward(&cache.agg, d_z)?;
    let d_sp_tilde = normalize_seq_backward(&cache.norm_p, &d_sp_hat, cross)?;
    let d_sh_tilde = normalize_seq_backward(&cache.norm_h, &d_sh_hat, cross)?;
    let (mut d_sp, d_sp_attn) = enhance_backward(&cache.enh_p, &d_sp_tilde, cross)?;
    let (mut d_sh, d_sh_attn) = enhance_backward(&cache.enh_h, &d_sh_tilde, cross)?;
    let (d_c, d_sp2, d_sh2) = align_backward(&cache.align, &cache.sp, &cache.sh, &d_sp_attn, &d_sh_attn)?;
    d_sp.add_assign(&d_sp2)?;
    d_sh.add_assign(&d_sh2)?;
    let (d_sp3, d_sh3) = coattention_backward(&cache.coattn, &cache.sp, &cache.sh, &d_c, cross)?;
    d_sp.add_assign(&d_sp3)?;
    d_sh.add_assign(&d_sh3)?;
    encoder::encode_backward(&cache.enc_p, &d_sp, enc)?;
    encoder::encode_backward(&cache.enc_h, &d_sh, enc)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_encoder;

    fn tiny_params(k: usize, d: usize) -> CrossAttnParams {
        init_cross_attn(k, d, 5).unwrap()
    }

    #[test]
    fn coattention_hand_value() {
        let mut p = tiny_params(2, 1);
        p.w.value = Mat::from_rows(&[[1.0, 0.0]]).unwrap();
        p.p.value = Mat::from_rows(&[[1.0]]).unwrap();
        let sp = Mat::from_rows(&[[2.0, 3.0]]).unwrap();
        let sh = Mat::from_rows(&[[1.0, 0.0]]).unwrap();
        let (c, _) = coattention(&sp, &sh, &p).unwrap();
        assert_eq!(c.shape(), (1, 1));
        assert!((c.get(0, 0) - 2f64.tanh()).abs() < 1e-15);
        assert!((c.get(0, 0) - 0.96403).abs() < 1e-5);
    }

    #[test]
    fn coattention_zero_projection_and_zero_state() {
        let mut p = tiny_params(3, 2);
        let sp = Mat::from_rows(&[[0.3, -0.2, 0.9], [0.1, 0.4, -0.5]]).unwrap();
        let sh = Mat::from_rows(&[[0.7, 0.1, 0.2], [0.0, 0.0, 0.0]]).unwrap();
        let (c, _) = coattention(&sp, &sh, &p).unwrap();
        assert_eq!(c.get(0, 1), 0.0);
        assert_eq!(c.get(1, 1), 0.0);
        let l1: f64 = p.p.value.data().iter().map(|x| x.abs()).sum();
        assert!(c.data().iter().all(|x| x.abs() < l1));

        p.p.value.fill(0.0);
        let (c, _) = coattention(&sp, &sh, &p).unwrap();
        assert!(c.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn coattention_rejects_empty() {
        let p = tiny_params(2, 2);
        let err = coattention(&Mat::zeros(0, 2), &Mat::zeros(1, 2), &p).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn align_single_hypothesis_token() {
        let c = Mat::from_rows(&[[0.3], [-2.0], [5.0]]).unwrap();
        let sp = Mat::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let sh = Mat::from_rows(&[[0.25, -0.5]]).unwrap();
        let (sp_attn, _, _) = align(&c, &sp, &sh).unwrap();
        for i in 0..3 {
            assert_eq!(sp_attn.row(i), sh.row(0));
        }
    }

    #[test]
    fn align_uniform_row_is_mean() {
        let c = Mat::from_rows(&[[1.5, 1.5, 1.5]]).unwrap();
        let sp = Mat::from_rows(&[[1.0, 2.0]]).unwrap();
        let sh = Mat::from_rows(&[[1.0, 0.0], [2.0, 3.0], [0.0, 3.0]]).unwrap();
        let (sp_attn, _, _) = align(&c, &sp, &sh).unwrap();
        assert!((sp_attn.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((sp_attn.get(0, 1) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn align_near_one_hot() {
        let c = Mat::from_rows(&[[10.0, -10.0], [-10.0, 10.0]]).unwrap();
        let sp = Mat::from_rows(&[[0.1, 0.2], [0.3, 0.4]]).unwrap();
        let sh = Mat::from_rows(&[[1.0, -1.0], [0.5, 2.0]]).unwrap();
        let (sp_attn, _, cache) = align(&c, &sp, &sh).unwrap();
        for i in 0..2 {
            for (a, b) in sp_attn.row(i).iter().zip(sh.row(i)) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
        for i in 0..2 {
            let s: f64 = cache.premise_attn.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn enhance_hand_value() {
        let mut p = tiny_params(1, 1);
        p.w_enh.value = Mat::from_rows(&[[1.0, 1.0, 1.0, 1.0]]).unwrap();
        p.b_enh.value.fill(0.0);
        let (out, _) = enhance(&Mat::from_rows(&[[2.0]]).unwrap(), &Mat::from_rows(&[[0.5]]).unwrap(), &p)
            .unwrap();
        assert_eq!(out.data(), &[5.0]);
    }

    #[test]
    fn enhance_relu_clamps() {
        let mut p = tiny_params(2, 1);
        p.b_enh.value.fill(-1.0);
        let z = Mat::zeros(3, 2);
        let (out, _) = enhance(&z, &z, &p).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn enhance_perfect_alignment_zeroes_difference_block() {
        let mut p = tiny_params(2, 1);
        // Only read the s − s' block.
        p.w_enh.value = Mat::from_rows(&[
            [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        ])
        .unwrap();
        p.b_enh.value.fill(0.0);
        let s = Mat::from_rows(&[[0.4, -0.7], [1.2, 0.3]]).unwrap();
        let (out, _) = enhance(&s, &s, &p).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalize_seq_examples() {
        let mut p = tiny_params(4, 1);
        let s = Mat::from_rows(&[[2.0, 2.0, 2.0, 2.0], [1.0, -3.0, 0.5, 4.0]]).unwrap();
        let (out, _) = normalize_seq(&s, &p).unwrap();
        assert_eq!(out.shape(), s.shape());
        assert!(out.row(0).iter().all(|&x| x == 0.0));

        p.ln_gamma.value.fill(0.0);
        p.ln_beta.value = Mat::from_rows(&[[0.1, 0.2, 0.3, 0.4]]).unwrap();
        let (out, _) = normalize_seq(&s, &p).unwrap();
        for i in 0..2 {
            assert_eq!(out.row(i), &[0.1, 0.2, 0.3, 0.4]);
        }
    }

    #[test]
    fn aggregate_hand_value() {
        let sp = Mat::from_rows(&[[1.0], [3.0]]).unwrap();
        let sh = Mat::from_rows(&[[2.0]]).unwrap();
        let (rep, _) = aggregate(&sp, &sh).unwrap();
        assert_eq!(rep.z, vec![2.0, 3.0, 2.0, 2.0, 0.0, 1.0, 4.0, 6.0]);
        assert!((norm2(&rep.z_norm) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn aggregate_identical_and_single_token() {
        let s = Mat::from_rows(&[[0.5, -1.0], [2.0, 0.1]]).unwrap();
        let (rep, _) = aggregate(&s, &s).unwrap();
        assert!(rep.z[8..12].iter().all(|&x| x == 0.0));

        let one = Mat::from_rows(&[[0.3, -0.4]]).unwrap();
        let (a, _) = pool(&one).unwrap();
        assert_eq!(a, vec![0.3, -0.4, 0.3, -0.4]);
    }

    #[test]
    fn zero_z_is_flagged() {
        let rep = PairRep::from_z(vec![0.0; 8]);
        assert!(rep.is_degenerate());
        assert_eq!(rep.z_norm, vec![0.0; 8]);
        assert_eq!(rep.normalize_backward(&[1.0; 8]), vec![0.0; 8]);
    }

    #[test]
    fn swapping_sentences_permutes_blocks() {
        let enc = init_encoder(30, 4, 10, 3).unwrap();
        let cross = init_cross_attn(4, 4, 4).unwrap();
        let a = TokenSeq::new(&[5, 9, 12, 3], 10).unwrap();
        let b = TokenSeq::new(&[7, 5], 10).unwrap();
        let (ab, _) = forward_pair(&a, &b, &enc, &cross).unwrap();
        let (ba, _) = forward_pair(&b, &a, &enc, &cross).unwrap();
        let w = 8;
        assert_eq!(ab.z[..w], ba.z[w..2 * w]);
        assert_eq!(ab.z[w..2 * w], ba.z[..w]);
        for i in 0..w {
            assert_eq!(ab.z[2 * w + i], -ba.z[2 * w + i]);
            assert_eq!(ab.z[3 * w + i], ba.z[3 * w + i]);
        }
        let (aa, _) = forward_pair(&a, &a, &enc, &cross).unwrap();
        assert!(aa.z[2 * w..3 * w].iter().all(|&x| x == 0.0));
    }
}
