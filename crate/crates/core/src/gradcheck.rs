//! Central finite-difference checks of analytic gradients.
//!
//! The relative error of one coordinate is
//! `|analytic − numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`;
//! the floor keeps coordinates whose true gradient is (near) zero from
//! turning round-off noise into huge ratios.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{self, Mat, LAYER_NORM_EPS};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Distance from a ReLU kink or a max tie below which a point is rejected.
pub const KINK_MARGIN: f64 = 1e-4;

/// Model checks reject points where a layer-norm row has a smaller standard
/// deviation: normalization then amplifies curvature by `1/std`, and the
/// O(h²) truncation error of central differences exceeds the tolerance.
pub const MIN_LAYER_NORM_STD: f64 = 0.02;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Numeric gradient of `f` at `x` by central differences with step [`FD_STEP`].
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub n_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl GradReport {
    /// Combines two reports, keeping the worst error. `worst_index` refers
    /// to the side it came from.
    pub fn merge(self, other: GradReport) -> GradReport {
        let tol = self.tol.min(other.tol);
        let n_checked = self.n_checked + other.n_checked;
        let worst = if other.max_rel_err > self.max_rel_err { other } else { self };
        GradReport {
            max_rel_err: worst.max_rel_err,
            worst_index: worst.worst_index,
            n_checked,
            tol,
            passed: worst.max_rel_err < tol,
        }
    }

    pub fn empty(tol: f64) -> GradReport {
        GradReport {
            max_rel_err: 0.0,
            worst_index: None,
            n_checked: 0,
            tol,
            passed: true,
        }
    }
}

pub fn compare(analytic: &[f64], numeric: &[f64], tol: f64) -> GradReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut max_rel_err = 0.0;
    let mut worst_index = None;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n);
        if e > max_rel_err || worst_index.is_none() {
            max_rel_err = e;
            worst_index = Some(i);
        }
    }
    GradReport {
        max_rel_err,
        worst_index,
        n_checked: analytic.len(),
        tol,
        passed: max_rel_err < tol,
    }
}

/// Fixed, non-uniform weights for the scalar probe `Σ wᵢ·outᵢ`.
pub fn probe_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| (1.3 * i as f64 + 0.4).cos()).collect()
}

/// An exported tensor op, laid out so the whole input is one flat point.
#[derive(Debug, Clone, PartialEq)]
pub enum CheckOp {
    Tanh,
    Relu,
    /// Point is the logits.
    Softmax,
    MaskedSoftmax(Vec<bool>),
    /// Point is `[v; gamma; beta]` with equal thirds.
    LayerNorm,
    /// Point is `a (rows×inner)` followed by `b (inner×cols)`, row-major.
    Matmul { rows: usize, inner: usize, cols: usize },
    /// Point is `a` then `b`, equal halves.
    ElemMul,
    Add,
    Sub,
    MeanOverRows { rows: usize, cols: usize },
    MaxOverRows { rows: usize, cols: usize },
    /// Point is `a (rows×left)` then `b (rows×right)`.
    ConcatCols { rows: usize, left: usize, right: usize },
}

fn halves(point: &[f64]) -> Result<(Mat, Mat)> {
    if !point.len().is_multiple_of(2) {
        return Err(Error::Parameter("binary op point must have even length".into()));
    }
    let h = point.len() / 2;
    Ok((
        Mat::row_vector(&point[..h]),
        Mat::row_vector(&point[h..]),
    ))
}

impl CheckOp {
    fn forward(&self, point: &[f64]) -> Result<Vec<f64>> {
        let v = Mat::row_vector(point);
        Ok(match self {
            CheckOp::Tanh => tensor::tanh(&v).into_data(),
            CheckOp::Relu => tensor::relu(&v).into_data(),
            CheckOp::Softmax => tensor::softmax(point, None)?,
            CheckOp::MaskedSoftmax(mask) => tensor::softmax(point, Some(mask))?,
            CheckOp::LayerNorm => {
                let n = point.len() / 3;
                tensor::layer_norm(&point[..n], &point[n..2 * n], &point[2 * n..], LAYER_NORM_EPS)?.0
            }
            CheckOp::Matmul { rows, inner, cols } => {
                let split = rows * inner;
                let a = Mat::from_vec(*rows, *inner, point[..split].to_vec())?;
                let b = Mat::from_vec(*inner, *cols, point[split..].to_vec())?;
                tensor::matmul(&a, &b)?.into_data()
            }
            CheckOp::ElemMul => {
                let (a, b) = halves(point)?;
                tensor::elem_mul(&a, &b)?.into_data()
            }
            CheckOp::Add => {
                let (a, b) = halves(point)?;
                tensor::add(&a, &b)?.into_data()
            }
            CheckOp::Sub => {
                let (a, b) = halves(point)?;
                tensor::sub(&a, &b)?.into_data()
            }
            CheckOp::MeanOverRows { rows, cols } => {
                tensor::mean_over_rows(&Mat::from_vec(*rows, *cols, point.to_vec())?)?
            }
            CheckOp::MaxOverRows { rows, cols } => {
                tensor::max_over_rows(&Mat::from_vec(*rows, *cols, point.to_vec())?)?.0
            }
            CheckOp::ConcatCols { rows, left, right } => {
                let split = rows * left;
                let a = Mat::from_vec(*rows, *left, point[..split].to_vec())?;
                let b = Mat::from_vec(*rows, *right, point[split..].to_vec())?;
                tensor::concat_cols(&[&a, &b])?.into_data()
            }
        })
    }

    /// Gradient of `Σ wᵢ·outᵢ` with respect to the point, via the op's backward rule.
    fn backward(&self, point: &[f64], w: &[f64]) -> Result<Vec<f64>> {
        let v = Mat::row_vector(point);
        let dw = Mat::row_vector(w);
        Ok(match self {
            CheckOp::Tanh => tensor::tanh_backward(&tensor::tanh(&v), &dw)?.into_data(),
            CheckOp::Relu => tensor::relu_backward(&v, &dw)?.into_data(),
            CheckOp::Softmax => tensor::softmax_backward(&tensor::softmax(point, None)?, w),
            CheckOp::MaskedSoftmax(mask) => {
                tensor::softmax_backward(&tensor::softmax(point, Some(mask))?, w)
            }
            CheckOp::LayerNorm => {
                let n = point.len() / 3;
                let gamma = &point[n..2 * n];
                let (_, cache) =
                    tensor::layer_norm(&point[..n], gamma, &point[2 * n..], LAYER_NORM_EPS)?;
                let (dx, dg, db) = tensor::layer_norm_backward(&cache, gamma, w);
                [dx, dg, db].concat()
            }
            CheckOp::Matmul { rows, inner, cols } => {
                let split = rows * inner;
                let a = Mat::from_vec(*rows, *inner, point[..split].to_vec())?;
                let b = Mat::from_vec(*inner, *cols, point[split..].to_vec())?;
                let dc = Mat::from_vec(*rows, *cols, w.to_vec())?;
                let (da, db) = tensor::matmul_backward(&a, &b, &dc)?;
                [da.into_data(), db.into_data()].concat()
            }
            CheckOp::ElemMul => {
                let (a, b) = halves(point)?;
                let da = tensor::elem_mul(&dw, &b)?;
                let db = tensor::elem_mul(&dw, &a)?;
                [da.into_data(), db.into_data()].concat()
            }
            CheckOp::Add => [w.to_vec(), w.to_vec()].concat(),
            CheckOp::Sub => [w.to_vec(), w.iter().map(|g| -g).collect()].concat(),
            CheckOp::MeanOverRows { rows, .. } => {
                tensor::mean_over_rows_backward(*rows, w).into_data()
            }
            CheckOp::MaxOverRows { rows, cols } => {
                let m = Mat::from_vec(*rows, *cols, point.to_vec())?;
                let (_, arg) = tensor::max_over_rows(&m)?;
                tensor::max_over_rows_backward(*rows, &arg, w).into_data()
            }
            CheckOp::ConcatCols { rows, left, right } => {
                let dc = Mat::from_vec(*rows, left + right, w.to_vec())?;
                let parts = tensor::split_cols(&dc, &[*left, *right])?;
                [parts[0].data(), parts[1].data()].concat()
            }
        })
    }

    /// Rejects points where the op is not differentiable within the FD stencil.
    fn kink(&self, point: &[f64]) -> Result<Option<String>> {
        Ok(match self {
            CheckOp::Relu => point
                .iter()
                .position(|x| x.abs() < KINK_MARGIN)
                .map(|i| format!("relu input {i} = {:e}", point[i])),
            CheckOp::MaxOverRows { rows, cols } => {
                let m = Mat::from_vec(*rows, *cols, point.to_vec())?;
                max_tie(&m).map(|j| format!("near-tie in column {j}"))
            }
            _ => None,
        })
    }
}

/// First column whose top two entries are within [`KINK_MARGIN`].
pub fn max_tie(m: &Mat) -> Option<usize> {
    (0..m.cols()).find(|&j| {
        let mut col: Vec<f64> = (0..m.rows()).map(|i| m.get(i, j)).collect();
        col.sort_by(|a, b| b.total_cmp(a));
        col.len() > 1 && col[0] - col[1] < KINK_MARGIN
    })
}

/// Compares an op's analytic backward against central differences at `point`.
pub fn backward_check(op: &CheckOp, point: &[f64], tol: f64) -> Result<GradReport> {
    if let Some(why) = op.kink(point)? {
        return Err(Error::Kink(why));
    }
    let out_len = op.forward(point)?.len();
    let w = probe_weights(out_len);
    let analytic = op.backward(point, &w)?;
    let mut probe = |x: &[f64]| {
        let out = op.forward(x).expect("forward failed inside finite difference");
        tensor::dot(&out, &w)
    };
    let numeric = central_difference(&mut probe, point);
    Ok(compare(&analytic, &numeric, tol))
}


/// Worst error for one named parameter group across all checked points.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub report: GradReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub points: usize,
    pub resampled: usize,
    pub groups: Vec<GroupReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.report.passed)
    }
}

/// Parameter group a tensor belongs to, from its name prefix.
pub fn group_of(param_name: &str) -> &str {
    param_name.split('.').next().unwrap_or(param_name)
}

/// Checks every parameter of `model` against central differences of the
/// batch objective.
///
/// Returns `Error::Kink` when the point is unusable: within [`KINK_MARGIN`]
/// of a ReLU kink or max-pool tie, a layer-norm row below
/// [`MIN_LAYER_NORM_STD`], or any probe of the stencil landing on a
/// different ReLU/argmax pattern than the base point.
pub fn check_model(
    model: &crate::model::Model,
    pairs: &[(&crate::encoder::TokenSeq, &crate::encoder::TokenSeq)],
    labels: &[usize],
    cfg: &crate::objectives::LossConfig,
    tol: f64,
) -> Result<Vec<(String, GradReport)>> {
    let base = model.batch_probe(pairs, labels, cfg)?;
    if base.kink_margin < KINK_MARGIN {
        return Err(Error::Kink(format!("kink margin {:e}", base.kink_margin)));
    }
    if base.max_inv_std > 1.0 / MIN_LAYER_NORM_STD {
        return Err(Error::Kink(format!(
            "layer-norm row std {:e} is ill-conditioned",
            1.0 / base.max_inv_std
        )));
    }
    let mut crossed = false;
    let mut with_grad = model.clone();
    with_grad.zero_grads();
    with_grad.accumulate_batch(pairs, labels, cfg)?;

    let n_params = model.params().len();
    let mut out = Vec::with_capacity(n_params);
    for idx in 0..n_params {
        let analytic = with_grad.params()[idx].grad.data().to_vec();
        let x0 = model.params()[idx].value.data().to_vec();
        let frozen = model.params()[idx].frozen_rows.clone();
        let cols = model.params()[idx].value.cols();
        let mut probe_model = model.clone();
        let mut f = |x: &[f64]| {
            probe_model.params_mut()[idx].value.data_mut().copy_from_slice(x);
            let probe = probe_model
                .batch_probe(pairs, labels, cfg)
                .expect("objective failed inside finite difference");
            crossed |= probe.pattern != base.pattern;
            probe.objectives.l_total
        };
        let numeric = central_difference(&mut f, &x0);
        let keep: Vec<usize> = (0..x0.len()).filter(|i| !frozen.contains(&(i / cols))).collect();
        let a: Vec<f64> = keep.iter().map(|&i| analytic[i]).collect();
        let n: Vec<f64> = keep.iter().map(|&i| numeric[i]).collect();
        out.push((model.params()[idx].name.clone(), compare(&a, &n, tol)));
    }
    if crossed {
        return Err(Error::Kink("a finite-difference probe crossed a kink".into()));
    }
    Ok(out)
}

/// Scalar objective the suite differentiates: both loss terms, with a unit
/// temperature so third derivatives stay small enough for central differences.
pub fn suite_loss() -> crate::objectives::LossConfig {
    crate::objectives::LossConfig {
        tau: 1.0,
        ..Default::default()
    }
}

/// Model dimensions used by the gradient suite: small enough that every
/// entry of every tensor is checked.
pub fn suite_dims(cross_attention: bool) -> crate::model::ModelDims {
    crate::model::ModelDims {
        vocab_size: 12,
        k: 8,
        d: 4,
        max_len: 6,
        n_classes: 3,
        cross_attention,
    }
}

/// Runs [`check_model`] at `points` seeded points (full wiring, plus the
/// concat ablation for the encoder) and reports the worst error per group.
/// Points that land on a kink are resampled.
pub fn run_suite(seed: u64, points: usize, tol: f64) -> Result<SuiteReport> {
    use crate::encoder::TokenSeq;
    use crate::model::{derive_seed, Model};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    let cfg = suite_loss();
    let labels = [0, 0, 1, 1, 2, 2];
    let mut groups: Vec<GroupReport> = Vec::new();
    let mut merge = |name: &str, report: GradReport| {
        let g = group_of(name).to_string();
        match groups.iter_mut().find(|r| r.group == g) {
            Some(existing) => {
                existing.report = existing.report.clone().merge(report);
            }
            None => groups.push(GroupReport { group: g, report }),
        }
    };

    let mut resampled = 0;
    for wiring in [true, false] {
        let dims = suite_dims(wiring);
        let mut done = 0;
        let mut attempt = 0u64;
        while done < points {
            let sub = derive_seed(seed, 1000 * u64::from(wiring) + attempt);
            attempt += 1;
            if attempt > 50 * points as u64 + 50 {
                return Err(Error::Kink("could not find kink-free points".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(sub);
            let model = Model::init(dims, sub)?;
            let seqs: Vec<(TokenSeq, TokenSeq)> = labels
                .iter()
                .map(|_| {
                    let sent = |rng: &mut ChaCha8Rng| {
                        let len = rng.gen_range(1..=dims.max_len);
                        let ids: Vec<u32> =
                            (0..len).map(|_| rng.gen_range(1..dims.vocab_size as u32)).collect();
                        TokenSeq::new(&ids, dims.max_len).expect("length within max_len")
                    };
                    (sent(&mut rng), sent(&mut rng))
                })
                .collect();
            let pairs: Vec<(&TokenSeq, &TokenSeq)> = seqs.iter().map(|(a, b)| (a, b)).collect();
            match check_model(&model, &pairs, &labels, &cfg, tol) {
                Ok(reports) => {
                    for (name, r) in reports {
                        // the concat wiring only contributes encoder coverage
                        if wiring || group_of(&name) == "encoder" {
                            merge(&name, r);
                        }
                    }
                    done += 1;
                }
                Err(Error::Kink(_)) => resampled += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(SuiteReport {
        seed,
        points,
        resampled,
        groups,
    })
}

#[cfg(test)]
mod suite_tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = run_suite(3, 2, 1e-5).unwrap();
        let names: Vec<&str> = report.groups.iter().map(|g| g.group.as_str()).collect();
        assert_eq!(names, ["encoder", "cross", "classifier"]);
        assert!(report.passed(), "{report:#?}");
    }
}
