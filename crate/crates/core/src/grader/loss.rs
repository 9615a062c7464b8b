//! The paired image/text contrastive losses and their analytic gradients.
//!
//! Two reductions of the multi-positive objective are provided:
//!
//! * [`LossForm::MatrixCrossEntropy`] (the operative default): per-row
//!   cross-entropy between the softmax of scaled similarities and the
//!   row-normalized target matrix, computed in both directions (rows for the
//!   image loss, columns for the text loss) and averaged.
//! * [`LossForm::LogSumRatio`]: the alternative reduction that takes a single
//!   log of the ratio between matched and total exponential mass per row.
//!   The two differ on multi-positive rows (Jensen); with one positive per
//!   row they coincide.
//!
//! Both directions stabilize the softmax with max subtraction.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::target::TargetMatrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossForm {
    #[default]
    MatrixCrossEntropy,
    LogSumRatio,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOutput<T> {
    pub loss_image: T,
    pub loss_text: T,
    pub loss_total: T,
}

#[derive(Clone, Debug)]
pub struct LossGrads<T> {
    pub d_image: Array2<T>,
    pub d_text: Array2<T>,
    pub d_logit_scale: T,
}

fn check_inputs<T: Scalar>(
    image: &Array2<T>,
    text: &Array2<T>,
    target: &TargetMatrix<T>,
) -> Result<()> {
    let (b, d) = image.dim();
    if text.dim() != (b, d) {
        return Err(Error::Shape(format!(
            "image {:?} vs text {:?} embeddings",
            image.dim(),
            text.dim()
        )));
    }
    if target.size() != b {
        return Err(Error::Shape(format!(
            "target matrix {} vs batch {b}",
            target.size()
        )));
    }
    if b < 2 {
        return Err(Error::Shape(format!("batch size {b} is below 2")));
    }
    for v in image.iter().chain(text.iter()) {
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite embedding value".into()));
        }
    }
    Ok(())
}

/// Row-wise log-softmax with max subtraction.
fn log_softmax_rows<T: Scalar>(s: &Array2<T>) -> Array2<T> {
    let mut out = s.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let lse = max
            + row
                .iter()
                .map(|&v| (v - max).exp())
                .sum::<T>()
                .ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Compute both losses for scaled cosine similarities.
///
/// `image` and `text` are `|B| x d` embedding matrices (unit-norm rows by
/// contract), `target` the row-normalized match matrix, and `logit_scale`
/// the positive temperature multiplier.
pub fn contrastive_loss<T: Scalar>(
    image: &Array2<T>,
    text: &Array2<T>,
    target: &TargetMatrix<T>,
    logit_scale: T,
    form: LossForm,
) -> Result<LossOutput<T>> {
    let (out, _) = loss_inner(image, text, target, logit_scale, form, false)?;
    Ok(out)
}

/// Loss plus analytic gradients with respect to both embedding matrices and
/// the logit scale.
pub fn contrastive_loss_with_grads<T: Scalar>(
    image: &Array2<T>,
    text: &Array2<T>,
    target: &TargetMatrix<T>,
    logit_scale: T,
    form: LossForm,
) -> Result<(LossOutput<T>, LossGrads<T>)> {
    let (out, grads) = loss_inner(image, text, target, logit_scale, form, true)?;
    Ok((out, grads.expect("gradients requested")))
}

fn loss_inner<T: Scalar>(
    image: &Array2<T>,
    text: &Array2<T>,
    target: &TargetMatrix<T>,
    logit_scale: T,
    form: LossForm,
    with_grads: bool,
) -> Result<(LossOutput<T>, Option<LossGrads<T>>)> {
    check_inputs(image, text, target)?;
    let b = image.nrows();
    let b_t = T::from_f64(b as f64);
    let sims = image.dot(&text.t());
    let s = sims.mapv(|v| v * logit_scale);
    let m = target.values();

    // Image direction works on rows of S, text direction on columns
    // (equivalently rows of S transposed). The target matrix is symmetric,
    // so its transpose serves as the text-side target.
    let log_p = log_softmax_rows(&s);
    let log_q_t = log_softmax_rows(&s.t().to_owned());

    let (loss_image, loss_text) = match form {
        LossForm::MatrixCrossEntropy => {
            let mut li = T::zero();
            let mut lt = T::zero();
            for i in 0..b {
                for j in 0..b {
                    let w = m[(i, j)];
                    if w > T::zero() {
                        li = li - w * log_p[(i, j)];
                        lt = lt - w * log_q_t[(j, i)];
                    }
                }
            }
            (li / b_t, lt / b_t)
        }
        LossForm::LogSumRatio => {
            let mut li = T::zero();
            for i in 0..b {
                let mut matched = T::zero();
                for j in 0..b {
                    if m[(i, j)] > T::zero() {
                        matched = matched + log_p[(i, j)].exp();
                    }
                }
                li = li - matched.ln();
            }
            let mut lt = T::zero();
            for j in 0..b {
                let mut matched = T::zero();
                for i in 0..b {
                    if m[(i, j)] > T::zero() {
                        matched = matched + log_q_t[(j, i)].exp();
                    }
                }
                lt = lt - matched.ln();
            }
            (li / b_t, lt / b_t)
        }
    };

    let two = T::from_f64(2.0);
    let out = LossOutput {
        loss_image,
        loss_text,
        loss_total: (loss_image + loss_text) / two,
    };
    if !out.loss_total.is_finite() {
        return Err(Error::Numeric(format!("loss diverged: {}", out.loss_total)));
    }
    if !with_grads {
        return Ok((out, None));
    }

    let p = log_p.mapv(T::exp);
    let q = log_q_t.mapv(T::exp).t().to_owned(); // column softmax of S

    // dL/dS for the mean of both directions.
    let half_over_b = T::one() / (two * b_t);
    let g = match form {
        LossForm::MatrixCrossEntropy => {
            let mut g = Array2::zeros((b, b));
            for i in 0..b {
                for j in 0..b {
                    g[(i, j)] = half_over_b * (p[(i, j)] - m[(i, j)] + q[(i, j)] - m[(i, j)]);
                }
            }
            g
        }
        LossForm::LogSumRatio => {
            // Softmax restricted to matched entries, per row / per column.
            let mut p_restricted = Array2::zeros((b, b));
            for i in 0..b {
                let mut denom = T::zero();
                for j in 0..b {
                    if m[(i, j)] > T::zero() {
                        denom = denom + p[(i, j)];
                    }
                }
                for j in 0..b {
                    if m[(i, j)] > T::zero() {
                        p_restricted[(i, j)] = p[(i, j)] / denom;
                    }
                }
            }
            let mut q_restricted = Array2::zeros((b, b));
            for j in 0..b {
                let mut denom = T::zero();
                for i in 0..b {
                    if m[(i, j)] > T::zero() {
                        denom = denom + q[(i, j)];
                    }
                }
                for i in 0..b {
                    if m[(i, j)] > T::zero() {
                        q_restricted[(i, j)] = q[(i, j)] / denom;
                    }
                }
            }
            let mut g = Array2::zeros((b, b));
            for i in 0..b {
                for j in 0..b {
                    g[(i, j)] = half_over_b
                        * (p[(i, j)] - p_restricted[(i, j)] + q[(i, j)] - q_restricted[(i, j)]);
                }
            }
            g
        }
    };

    let d_image = g.dot(text).mapv(|v| v * logit_scale);
    let d_text = g.t().dot(image).mapv(|v| v * logit_scale);
    let d_logit_scale = g
        .iter()
        .zip(sims.iter())
        .map(|(&gv, &sv)| gv * sv)
        .sum::<T>();

    Ok((
        out,
        Some(LossGrads {
            d_image,
            d_text,
            d_logit_scale,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grader::target::build_target_matrix;
    use ndarray::array;
    use rand::Rng;

    fn unit_rows(a: Array2<f64>) -> Array2<f64> {
        let mut a = a;
        for mut row in a.axis_iter_mut(Axis(0)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / n);
        }
        a
    }

    fn random_instance(
        rng: &mut rand_chacha::ChaCha8Rng,
        b: usize,
        d: usize,
        k: usize,
    ) -> (Array2<f64>, Array2<f64>, Vec<usize>) {
        let img = unit_rows(Array2::from_shape_fn((b, d), |_| rng.gen::<f64>() - 0.5));
        let txt = unit_rows(Array2::from_shape_fn((b, d), |_| rng.gen::<f64>() - 0.5));
        let idx: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        (img, txt, idx)
    }

    #[test]
    fn all_positive_pair_is_zero_under_ratio_form() {
        // Two samples with the same prompt and identical embeddings: the
        // matched mass equals the total mass, so the ratio reduction is 0.
        let img = unit_rows(array![[1.0, 1.0], [1.0, 1.0]]);
        let txt = img.clone();
        let target = build_target_matrix::<f64>(&[3, 3]);
        let out = contrastive_loss(&img, &txt, &target, 10.0, LossForm::LogSumRatio).unwrap();
        assert!(out.loss_image.abs() < 1e-12);
        assert!(out.loss_text.abs() < 1e-12);
        assert!(out.loss_total.abs() < 1e-12);
    }

    #[test]
    fn all_positive_pair_hits_row_entropy_under_matrix_form() {
        // The matrix cross-entropy bottoms out at the row target's entropy,
        // ln 2 for a uniform two-positive row.
        let img = unit_rows(array![[1.0, 1.0], [1.0, 1.0]]);
        let txt = img.clone();
        let target = build_target_matrix::<f64>(&[3, 3]);
        let out =
            contrastive_loss(&img, &txt, &target, 10.0, LossForm::MatrixCrossEntropy).unwrap();
        assert!((out.loss_total - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn identity_target_constant_similarity_gives_log_k() {
        for k in [2usize, 4, 8] {
            // Identical image rows against identical text rows: softmax is
            // uniform while targets are one-hot.
            let img = unit_rows(Array2::from_elem((k, 3), 1.0));
            let txt = img.clone();
            let indices: Vec<usize> = (0..k).collect();
            let target = build_target_matrix::<f64>(&indices);
            for form in [LossForm::MatrixCrossEntropy, LossForm::LogSumRatio] {
                let out = contrastive_loss(&img, &txt, &target, 5.0, form).unwrap();
                assert!(
                    (out.loss_total - (k as f64).ln()).abs() < 1e-12,
                    "form {form:?} k {k}"
                );
            }
        }
    }

    #[test]
    fn hand_computed_two_sample_value() {
        // Orthonormal embeddings, scale 1, distinct prompts:
        // loss = ln(1 + e^-1) in both directions and both forms.
        let img = array![[1.0, 0.0], [0.0, 1.0]];
        let txt = img.clone();
        let target = build_target_matrix::<f64>(&[0, 1]);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        for form in [LossForm::MatrixCrossEntropy, LossForm::LogSumRatio] {
            let out = contrastive_loss(&img, &txt, &target, 1.0, form).unwrap();
            assert!((out.loss_image - expected).abs() < 1e-12);
            assert!((out.loss_text - expected).abs() < 1e-12);
            assert!((out.loss_total - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        let mut rng = crate::rng::stream(41, &[0]);
        for _ in 0..100 {
            let b = rng.gen_range(2..=10);
            let d = rng.gen_range(2..=16);
            let (img, txt, idx) = random_instance(&mut rng, b, d, 4);
            let target = build_target_matrix::<f64>(&idx);
            for form in [LossForm::MatrixCrossEntropy, LossForm::LogSumRatio] {
                let out = contrastive_loss(&img, &txt, &target, 14.0, form).unwrap();
                assert!(out.loss_total >= -1e-12);
            }
        }
    }

    #[test]
    fn permutation_leaves_loss_unchanged() {
        let mut rng = crate::rng::stream(42, &[0]);
        let (img, txt, idx) = random_instance(&mut rng, 6, 8, 3);
        let target = build_target_matrix::<f64>(&idx);
        let base = contrastive_loss(&img, &txt, &target, 14.0, LossForm::MatrixCrossEntropy)
            .unwrap()
            .loss_total;
        let perm = [3usize, 0, 5, 1, 4, 2];
        let img_p = Array2::from_shape_fn(img.dim(), |(i, j)| img[(perm[i], j)]);
        let txt_p = Array2::from_shape_fn(txt.dim(), |(i, j)| txt[(perm[i], j)]);
        let idx_p: Vec<usize> = perm.iter().map(|&i| idx[i]).collect();
        let target_p = build_target_matrix::<f64>(&idx_p);
        let permuted =
            contrastive_loss(&img_p, &txt_p, &target_p, 14.0, LossForm::MatrixCrossEntropy)
                .unwrap()
                .loss_total;
        assert!((base - permuted).abs() < 1e-6);
    }

    #[test]
    fn non_finite_embeddings_error_before_reduction() {
        let mut img = unit_rows(array![[1.0, 0.0], [0.0, 1.0]]);
        img[(0, 0)] = f64::NAN;
        let txt = unit_rows(array![[1.0, 0.0], [0.0, 1.0]]);
        let target = build_target_matrix::<f64>(&[0, 1]);
        assert!(matches!(
            contrastive_loss(&img, &txt, &target, 1.0, LossForm::MatrixCrossEntropy),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let img = unit_rows(Array2::from_elem((2, 3), 1.0));
        let txt = unit_rows(Array2::from_elem((2, 4), 1.0));
        let target = build_target_matrix::<f64>(&[0, 1]);
        assert!(matches!(
            contrastive_loss(&img, &txt, &target, 1.0, LossForm::MatrixCrossEntropy),
            Err(Error::Shape(_))
        ));
    }

    /// Central finite differences over every input coordinate.
    fn gradcheck(form: LossForm, seed: u64) {
        let mut rng = crate::rng::stream(seed, &[0]);
        let (img, txt, idx) = random_instance(&mut rng, 4, 8, 3);
        let target = build_target_matrix::<f64>(&idx);
        let scale = 12.0;
        let (_, grads) = contrastive_loss_with_grads(&img, &txt, &target, scale, form).unwrap();
        let h = 1e-5;
        let loss_at = |img: &Array2<f64>, txt: &Array2<f64>| {
            contrastive_loss(img, txt, &target, scale, form)
                .unwrap()
                .loss_total
        };
        for (mat, analytic) in [(&img, &grads.d_image), (&txt, &grads.d_text)] {
            for i in 0..4 {
                for j in 0..8 {
                    let mut plus = mat.clone();
                    plus[(i, j)] += h;
                    let mut minus = mat.clone();
                    minus[(i, j)] -= h;
                    let (lp, lm) = if std::ptr::eq(mat, &img) {
                        (loss_at(&plus, &txt), loss_at(&minus, &txt))
                    } else {
                        (loss_at(&img, &plus), loss_at(&img, &minus))
                    };
                    let fd = (lp - lm) / (2.0 * h);
                    let a = analytic[(i, j)];
                    assert!(
                        (a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1.0),
                        "form {form:?} grad mismatch at ({i},{j}): {a} vs {fd}"
                    );
                }
            }
        }
        // Logit-scale gradient.
        let fd = (contrastive_loss(&img, &txt, &target, scale + h, form)
            .unwrap()
            .loss_total
            - contrastive_loss(&img, &txt, &target, scale - h, form)
                .unwrap()
                .loss_total)
            / (2.0 * h);
        let a = grads.d_logit_scale;
        assert!((a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1.0));
    }

    #[test]
    fn gradients_match_finite_differences_matrix_form() {
        gradcheck(LossForm::MatrixCrossEntropy, 51);
    }

    #[test]
    fn gradients_match_finite_differences_ratio_form() {
        gradcheck(LossForm::LogSumRatio, 52);
    }

    #[test]
    fn f32_variant_is_close_to_f64() {
        let mut rng = crate::rng::stream(53, &[0]);
        let (img, txt, idx) = random_instance(&mut rng, 4, 8, 3);
        let target64 = build_target_matrix::<f64>(&idx);
        let out64 = contrastive_loss(&img, &txt, &target64, 14.0, LossForm::MatrixCrossEntropy)
            .unwrap()
            .loss_total;
        let img32 = img.mapv(|v| v as f32);
        let txt32 = txt.mapv(|v| v as f32);
        let target32 = build_target_matrix::<f32>(&idx);
        let out32 = contrastive_loss(&img32, &txt32, &target32, 14.0, LossForm::MatrixCrossEntropy)
            .unwrap()
            .loss_total;
        assert!((out64 - out32 as f64).abs() < 1e-4);
    }
}
