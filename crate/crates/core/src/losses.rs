//! Classification losses: softmax cross-entropy, focal, center, truncated
//! Lq, and the large-margin (m=2) logit modification. Each loss returns its
//! batch-mean value together with the analytic gradient with respect to the
//! logits (and features where applicable); every gradient is checked against
//! central finite differences in the tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// Loss selection plus hyperparameters, as named in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    CrossEntropy,
    Focal {
        gamma: f64,
    },
    Center {
        lambda: f64,
        #[serde(default = "default_center_alpha")]
        alpha_center: f64,
    },
    TruncatedLq {
        q: f64,
        k_thresh: f64,
    },
    LargeMargin {
        margin: usize,
        #[serde(default = "default_lambda_start")]
        lambda_start: f64,
        #[serde(default = "default_lambda_decay")]
        lambda_decay: f64,
        #[serde(default = "default_lambda_floor")]
        lambda_floor: f64,
    },
}

fn default_center_alpha() -> f64 {
    0.5
}

fn default_lambda_start() -> f64 {
    100.0
}

fn default_lambda_decay() -> f64 {
    0.99
}

fn default_lambda_floor() -> f64 {
    0.1
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::CrossEntropy => Ok(()),
            LossKind::Focal { gamma } => {
                if gamma < 0.0 {
                    Err(Error::Config(format!("focal gamma must be >= 0, got {gamma}")))
                } else {
                    Ok(())
                }
            }
            LossKind::Center { lambda, alpha_center } => {
                if lambda < 0.0 {
                    Err(Error::Config(format!("center lambda must be >= 0, got {lambda}")))
                } else if !(0.0..=1.0).contains(&alpha_center) {
                    Err(Error::Config(format!(
                        "center alpha must be in [0, 1], got {alpha_center}"
                    )))
                } else {
                    Ok(())
                }
            }
            LossKind::TruncatedLq { q, k_thresh } => {
                if !(q > 0.0 && q <= 1.0) {
                    Err(Error::Config(format!("truncated-Lq q must be in (0, 1], got {q}")))
                } else if !(0.0..1.0).contains(&k_thresh) {
                    Err(Error::Config(format!(
                        "truncated-Lq threshold must be in [0, 1), got {k_thresh}"
                    )))
                } else {
                    Ok(())
                }
            }
            LossKind::LargeMargin { margin, .. } => {
                if margin != 2 {
                    Err(Error::Config(format!(
                        "large-margin supports margin order 2 only, got {margin}"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}

fn check_labels(labels: &[usize], classes: usize, batch: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Argument(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    for &label in labels {
        if label >= classes {
            return Err(Error::Label {
                label,
                classes,
            });
        }
    }
    Ok(())
}

fn safe_ln(p: f64) -> f64 {
    p.max(f64::MIN_POSITIVE).ln()
}

/// Mean negative log-likelihood. `probs` holds one distribution per column;
/// the gradient is taken with respect to the logits that produced it:
/// (probs - onehot) / batch.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let batch = probs.cols();
    check_labels(labels, probs.rows(), batch)?;
    let scale = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = probs.scale(scale);
    for (i, &label) in labels.iter().enumerate() {
        loss -= safe_ln(probs.get(label, i));
        grad.set(label, i, grad.get(label, i) - scale);
    }
    Ok((loss * scale, grad))
}

/// Focal loss: -(1 - p_t)^gamma * ln(p_t), batch mean. gamma = 0 reduces to
/// cross-entropy exactly.
pub fn focal(probs: &Matrix, labels: &[usize], gamma: f64) -> Result<(f64, Matrix)> {
    if gamma == 0.0 {
        return cross_entropy(probs, labels);
    }
    let batch = probs.cols();
    check_labels(labels, probs.rows(), batch)?;
    let scale = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    for (i, &label) in labels.iter().enumerate() {
        let p = probs.get(label, i);
        let u = 1.0 - p;
        // p -> 1 is the zero-loss, zero-gradient limit; skip before the
        // (1-p)^(gamma-1) factor can overflow.
        if u < 1e-15 {
            continue;
        }
        loss += u.powf(gamma) * (-safe_ln(p));
        // dL/dp_t, then the rank-one softmax Jacobian row.
        let dl_dp = gamma * u.powf(gamma - 1.0) * safe_ln(p) - u.powf(gamma) / p;
        for r in 0..probs.rows() {
            let indicator = if r == label { 1.0 } else { 0.0 };
            let dz = dl_dp * p * (indicator - probs.get(r, i)) * scale;
            grad.set(r, i, dz);
        }
    }
    Ok((loss * scale, grad))
}

/// Truncated Lq loss, thresholded form: (1 - p_y^q)/q while p_y > k_thresh,
/// otherwise the constant (1 - k_thresh^q)/q with zero gradient.
pub fn truncated_lq(
    probs: &Matrix,
    labels: &[usize],
    q: f64,
    k_thresh: f64,
) -> Result<(f64, Matrix)> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Config(format!("truncated-Lq q must be in (0, 1], got {q}")));
    }
    if !(0.0..1.0).contains(&k_thresh) {
        return Err(Error::Config(format!(
            "truncated-Lq threshold must be in [0, 1), got {k_thresh}"
        )));
    }
    let batch = probs.cols();
    check_labels(labels, probs.rows(), batch)?;
    let scale = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    let clamp = (1.0 - k_thresh.powf(q)) / q;
    for (i, &label) in labels.iter().enumerate() {
        let p = probs.get(label, i);
        if p <= k_thresh {
            loss += clamp;
            continue;
        }
        loss += (1.0 - p.powf(q)) / q;
        // dL/dp_y = -p^(q-1); chain through the softmax.
        for r in 0..probs.rows() {
            let indicator = if r == label { 1.0 } else { 0.0 };
            let dz = -p.powf(q) * (indicator - probs.get(r, i)) * scale;
            grad.set(r, i, dz);
        }
    }
    Ok((loss * scale, grad))
}

/// Running per-class feature centers for the center loss.
#[derive(Clone, Debug)]
pub struct ClassCenters {
    centers: Matrix,
    pub alpha: f64,
}

impl ClassCenters {
    pub fn new(feature_dim: usize, classes: usize, alpha: f64) -> Self {
        ClassCenters {
            centers: Matrix::zeros(feature_dim, classes),
            alpha,
        }
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn set_centers(&mut self, centers: Matrix) {
        self.centers = centers;
    }
}

pub struct CenterLossOutput {
    pub loss_term: f64,
    pub grad_features: Matrix,
    /// Replacement centers matrix: each class present in the batch moved
    /// toward its batch mean by rate alpha, absent classes unchanged.
    pub center_update: Matrix,
}

/// Regularization term lambda/2 * mean_i ||f_i - c_{y_i}||^2. The caller
/// combines it with cross-entropy and applies `center_update` after the
/// optimizer step.
pub fn center_loss(
    features: &Matrix,
    labels: &[usize],
    centers: &ClassCenters,
    lambda: f64,
) -> Result<CenterLossOutput> {
    let batch = features.cols();
    let classes = centers.centers.cols();
    check_labels(labels, classes, batch)?;
    if features.rows() != centers.centers.rows() {
        return Err(Error::Shape {
            op: "center_loss",
            left_rows: features.rows(),
            left_cols: features.cols(),
            right_rows: centers.centers.rows(),
            right_cols: classes,
        });
    }
    let scale = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(features.rows(), batch);
    for (i, &label) in labels.iter().enumerate() {
        for r in 0..features.rows() {
            let diff = features.get(r, i) - centers.centers.get(r, label);
            loss += 0.5 * diff * diff;
            grad.set(r, i, lambda * diff * scale);
        }
    }

    // Move each class center toward its batch mean by rate alpha.
    let mut sums = Matrix::zeros(features.rows(), classes);
    let mut counts = vec![0usize; classes];
    for (i, &label) in labels.iter().enumerate() {
        counts[label] += 1;
        for r in 0..features.rows() {
            sums.set(r, label, sums.get(r, label) + features.get(r, i));
        }
    }
    let mut update = centers.centers.clone();
    for class in 0..classes {
        if counts[class] == 0 {
            continue;
        }
        let inv = 1.0 / counts[class] as f64;
        for r in 0..features.rows() {
            let mean = sums.get(r, class) * inv;
            let old = update.get(r, class);
            update.set(r, class, old + centers.alpha * (mean - old));
        }
    }

    Ok(CenterLossOutput {
        loss_term: lambda * loss * scale,
        grad_features: grad,
        center_update: update,
    })
}

/// psi(theta) for margin order 2: 2cos^2(theta) - 1 on [0, pi/2],
/// -2cos^2(theta) - 1 on (pi/2, pi]. Expressed in terms of c = cos(theta).
fn psi_m2(c: f64) -> f64 {
    if c >= 0.0 {
        2.0 * c * c - 1.0
    } else {
        -2.0 * c * c - 1.0
    }
}

/// Large-margin logits (margin order 2): the target-class logit
/// ||w_y|| ||x|| cos(theta) is replaced by ||w_y|| ||x|| psi(theta), blended
/// as (lambda * original + modified) / (1 + lambda). Other logits pass
/// through unchanged. Samples whose feature or target weight column has
/// zero norm are left unmodified.
pub fn large_margin_logits(
    weights: &Matrix,
    features: &Matrix,
    labels: &[usize],
    margin: usize,
    lambda: f64,
) -> Result<Matrix> {
    check_margin(weights, features, labels, margin)?;
    let mut logits = crate::linalg::matmul(&weights.transpose(), features)?;
    for (i, &label) in labels.iter().enumerate() {
        let w = weights.column(label);
        let x = features.column(i);
        let nw = dot(&w, &w).sqrt();
        let nx = dot(&x, &x).sqrt();
        if nw == 0.0 || nx == 0.0 {
            continue;
        }
        let o = logits.get(label, i);
        let c = o / (nw * nx);
        let modified = nw * nx * psi_m2(c);
        logits.set(label, i, (lambda * o + modified) / (1.0 + lambda));
    }
    Ok(logits)
}

/// Gradients of `large_margin_logits` contracted with an upstream gradient
/// on the (modified) logits: returns (dL/dweights, dL/dfeatures).
pub fn large_margin_backward(
    weights: &Matrix,
    features: &Matrix,
    labels: &[usize],
    margin: usize,
    lambda: f64,
    upstream: &Matrix,
) -> Result<(Matrix, Matrix)> {
    check_margin(weights, features, labels, margin)?;
    let d = weights.rows();
    let k = weights.cols();
    let n = features.cols();
    let mut dw = Matrix::zeros(d, k);
    let mut dx = Matrix::zeros(d, n);
    for i in 0..n {
        let x = features.column(i);
        let label = labels[i];
        for j in 0..k {
            let g = upstream.get(j, i);
            if g == 0.0 {
                continue;
            }
            let w = weights.column(j);
            if j != label {
                // Unmodified logit w_j . x.
                for r in 0..d {
                    dw.set(r, j, dw.get(r, j) + g * x[r]);
                    dx.set(r, i, dx.get(r, i) + g * w[r]);
                }
                continue;
            }
            let nw = dot(&w, &w).sqrt();
            let nx = dot(&x, &x).sqrt();
            if nw == 0.0 || nx == 0.0 {
                // Modification skipped in the forward pass: plain logit.
                for r in 0..d {
                    dw.set(r, j, dw.get(r, j) + g * x[r]);
                    dx.set(r, i, dx.get(r, i) + g * w[r]);
                }
                continue;
            }
            let o = dot(&w, &x);
            let c = o / (nw * nx);
            let sign = if c >= 0.0 { 1.0 } else { -1.0 };
            // blended = (lambda*o + sign*2*o^2/(nw*nx) - nw*nx) / (1+lambda)
            let blend = 1.0 / (1.0 + lambda);
            for r in 0..d {
                // d(blended)/dw_r
                let dmod_dw = sign * (4.0 * o * x[r] / (nw * nx) - 2.0 * o * o * w[r] / (nw.powi(3) * nx))
                    - nx * w[r] / nw;
                let dmod_dx = sign * (4.0 * o * w[r] / (nw * nx) - 2.0 * o * o * x[r] / (nw * nx.powi(3)))
                    - nw * x[r] / nx;
                dw.set(r, j, dw.get(r, j) + g * blend * (lambda * x[r] + dmod_dw));
                dx.set(r, i, dx.get(r, i) + g * blend * (lambda * w[r] + dmod_dx));
            }
        }
    }
    Ok((dw, dx))
}

fn check_margin(
    weights: &Matrix,
    features: &Matrix,
    labels: &[usize],
    margin: usize,
) -> Result<()> {
    if margin != 2 {
        return Err(Error::Config(format!(
            "large-margin supports margin order 2 only, got {margin}"
        )));
    }
    if weights.rows() != features.rows() {
        return Err(Error::Shape {
            op: "large_margin_logits",
            left_rows: weights.rows(),
            left_cols: weights.cols(),
            right_rows: features.rows(),
            right_cols: features.cols(),
        });
    }
    check_labels(labels, weights.cols(), features.cols())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_deviation, numeric_gradient, DEFAULT_STEP};
    use crate::linalg::{matmul, softmax};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_labels(rng: &mut ChaCha8Rng, classes: usize, n: usize) -> Vec<usize> {
        (0..n).map(|_| rng.gen_range(0..classes)).collect()
    }

    fn onehot_probs(labels: &[usize], classes: usize) -> Matrix {
        let mut m = Matrix::zeros(classes, labels.len());
        for (i, &l) in labels.iter().enumerate() {
            m.set(l, i, 1.0);
        }
        m
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        let labels = vec![0, 2, 1];
        let probs = onehot_probs(&labels, 3);
        let (loss, _) = cross_entropy(&probs, &labels).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let k = 5;
        let probs = Matrix::from_fn(k, 4, |_, _| 1.0 / k as f64);
        let (loss, _) = cross_entropy(&probs, &[0, 1, 2, 3]).unwrap();
        assert_relative_eq!(loss, (k as f64).ln(), max_relative = 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let probs = Matrix::from_fn(3, 1, |_, _| 1.0 / 3.0);
        assert!(matches!(
            cross_entropy(&probs, &[3]),
            Err(Error::Label { label: 3, classes: 3 })
        ));
    }

    /// Finite-difference check of dL/dlogits for a loss defined on
    /// softmax(logits).
    fn check_logit_gradient(
        loss_fn: impl Fn(&Matrix, &[usize]) -> Result<(f64, Matrix)>,
        seed: u64,
    ) {
        let mut r = rng(seed);
        for _ in 0..20 {
            let k = r.gen_range(3..6);
            let n = r.gen_range(2..5);
            let logits = random_matrix(&mut r, k, n).scale(2.0);
            let labels = random_labels(&mut r, k, n);
            let probs = softmax(&logits);
            let (_, analytic) = loss_fn(&probs, &labels).unwrap();
            let num = numeric_gradient(
                |z| {
                    let p = softmax(&Matrix::from_vec(k, n, z.to_vec()).unwrap());
                    loss_fn(&p, &labels).unwrap().0
                },
                logits.data(),
                DEFAULT_STEP,
            );
            assert!(
                max_rel_deviation(analytic.data(), &num, 1e-4) < 1e-5,
                "gradient mismatch"
            );
        }
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        check_logit_gradient(cross_entropy, 101);
    }

    #[test]
    fn focal_gamma_zero_equals_cross_entropy() {
        let mut r = rng(7);
        for _ in 0..100 {
            let k = r.gen_range(2..7);
            let n = r.gen_range(1..6);
            let probs = softmax(&random_matrix(&mut r, k, n).scale(3.0));
            let labels = random_labels(&mut r, k, n);
            let (ce, gce) = cross_entropy(&probs, &labels).unwrap();
            let (fl, gfl) = focal(&probs, &labels, 0.0).unwrap();
            assert!((ce - fl).abs() < 1e-12);
            for (a, b) in gce.data().iter().zip(gfl.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn focal_scalar_values() {
        // p_t = 1 -> 0
        let probs = onehot_probs(&[1], 3);
        let (loss, grad) = focal(&probs, &[1], 2.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));

        // p_t = 0.5, gamma = 2 -> 0.25 * ln 2
        let half = Matrix::from_vec(2, 1, vec![0.5, 0.5]).unwrap();
        let (loss, _) = focal(&half, &[0], 2.0).unwrap();
        assert_relative_eq!(loss, 0.25 * 2f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        check_logit_gradient(|p, l| focal(p, l, 0.3), 102);
        check_logit_gradient(|p, l| focal(p, l, 2.0), 103);
    }

    #[test]
    fn truncated_lq_scalar_values() {
        let sure = onehot_probs(&[0], 2);
        let (loss, _) = truncated_lq(&sure, &[0], 0.5, 0.1).unwrap();
        assert_eq!(loss, 0.0);

        let quarter = Matrix::from_vec(2, 1, vec![0.25, 0.75]).unwrap();
        let (loss, _) = truncated_lq(&quarter, &[0], 0.5, 0.1).unwrap();
        assert_relative_eq!(loss, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn truncated_lq_clamps_below_threshold() {
        let k_thresh = 0.3;
        let probs = Matrix::from_vec(2, 1, vec![0.2, 0.8]).unwrap();
        let (loss, grad) = truncated_lq(&probs, &[0], 0.5, k_thresh).unwrap();
        assert_relative_eq!(loss, (1.0 - k_thresh.sqrt()) * 2.0, max_relative = 1e-12);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn truncated_lq_gradient_matches_finite_differences() {
        // Away from the truncation threshold: k_thresh = 0 keeps every
        // sample on the smooth branch.
        check_logit_gradient(|p, l| truncated_lq(p, l, 0.5, 0.0), 104);
    }

    #[test]
    fn center_loss_zero_lambda() {
        let mut r = rng(11);
        let features = random_matrix(&mut r, 4, 3);
        let centers = ClassCenters::new(4, 2, 0.5);
        let out = center_loss(&features, &[0, 1, 0], &centers, 0.0).unwrap();
        assert_eq!(out.loss_term, 0.0);
        assert!(out.grad_features.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn center_loss_zero_when_features_equal_centers() {
        let mut centers = ClassCenters::new(3, 2, 0.5);
        let mut c = Matrix::zeros(3, 2);
        c.set(0, 0, 1.0);
        c.set(1, 1, -2.0);
        centers.set_centers(c.clone());
        let labels = [0, 1];
        let features = Matrix::from_fn(3, 2, |r, i| c.get(r, labels[i]));
        let out = center_loss(&features, &labels, &centers, 1.0).unwrap();
        assert_eq!(out.loss_term, 0.0);
        // Batch means equal the centers, so the update is a fixed point.
        assert_eq!(out.center_update.data(), c.data());
    }

    #[test]
    fn center_loss_gradient_matches_finite_differences() {
        let mut r = rng(12);
        let lambda = 1e-10;
        for _ in 0..20 {
            let dim = r.gen_range(2..5);
            let n = r.gen_range(2..5);
            let mut centers = ClassCenters::new(dim, 3, 0.5);
            centers.set_centers(random_matrix(&mut r, dim, 3));
            let features = random_matrix(&mut r, dim, n);
            let labels = random_labels(&mut r, 3, n);
            let out = center_loss(&features, &labels, &centers, lambda).unwrap();
            let num = numeric_gradient(
                |f| {
                    let fm = Matrix::from_vec(dim, n, f.to_vec()).unwrap();
                    center_loss(&fm, &labels, &centers, lambda).unwrap().loss_term
                },
                features.data(),
                DEFAULT_STEP,
            );
            // lambda scales both sides to ~1e-10; compare on the raw scale.
            let analytic: Vec<f64> = out.grad_features.data().to_vec();
            assert!(max_rel_deviation(&analytic, &num, 1e-14) < 1e-4);
        }
    }

    #[test]
    fn center_update_moves_toward_batch_mean() {
        let mut centers = ClassCenters::new(2, 2, 0.5);
        centers.set_centers(Matrix::zeros(2, 2));
        let features = Matrix::from_vec(2, 2, vec![2.0, 4.0, 2.0, 4.0]).unwrap();
        // Both samples class 0: batch mean (3, 3); alpha 0.5 moves 0 -> 1.5.
        let out = center_loss(&features, &[0, 0], &centers, 1.0).unwrap();
        assert_eq!(out.center_update.get(0, 0), 1.5);
        assert_eq!(out.center_update.get(1, 0), 1.5);
        // Class 1 absent: unchanged.
        assert_eq!(out.center_update.get(0, 1), 0.0);
    }

    #[test]
    fn psi_properties() {
        // theta = 0 -> psi = 1 (logit unchanged); cos = 0 -> psi = -1.
        assert_eq!(psi_m2(1.0), 1.0);
        assert_eq!(psi_m2(0.0), -1.0);
        // Margin property: psi(theta) <= cos(theta) on (0, pi].
        for i in 1..=1000 {
            let theta = std::f64::consts::PI * i as f64 / 1000.0;
            let c = theta.cos();
            assert!(psi_m2(c) <= c + 1e-15, "theta={theta}");
        }
    }

    #[test]
    fn large_margin_identity_cases() {
        let mut r = rng(13);
        let d = 4;
        let k = 3;
        let n = 5;
        let weights = random_matrix(&mut r, d, k);
        let features = random_matrix(&mut r, d, n);
        let labels = random_labels(&mut r, k, n);
        let plain = matmul(&weights.transpose(), &features).unwrap();

        // Huge lambda: blend collapses to the originals.
        let blended = large_margin_logits(&weights, &features, &labels, 2, 1e12).unwrap();
        for (a, b) in blended.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-9);
        }

        // Feature parallel to w_y: cos = 1, psi = 1, logit unchanged.
        let w = Matrix::from_vec(2, 2, vec![1.0, 0.0, 2.0, 1.0]).unwrap();
        let x = Matrix::from_vec(2, 1, vec![0.5, 1.0]).unwrap();
        let out = large_margin_logits(&w, &x, &[0], 2, 1.0).unwrap();
        let expect = matmul(&w.transpose(), &x).unwrap();
        assert_relative_eq!(out.get(0, 0), expect.get(0, 0), max_relative = 1e-12);
    }

    #[test]
    fn large_margin_orthogonal_feature_negates_target() {
        // cos(theta) = 0: modified target logit is -||w|| ||x||.
        let w = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let x = Matrix::from_vec(2, 1, vec![0.0, 2.0]).unwrap();
        let out = large_margin_logits(&w, &x, &[0], 2, 0.0).unwrap();
        assert_relative_eq!(out.get(0, 0), -2.0, max_relative = 1e-12);
    }

    #[test]
    fn large_margin_skips_zero_norm_samples() {
        let w = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Matrix::zeros(2, 1);
        let out = large_margin_logits(&w, &x, &[0], 2, 1.0).unwrap();
        assert_eq!(out.get(0, 0), 0.0);
    }

    #[test]
    fn large_margin_gradient_matches_finite_differences() {
        let mut r = rng(14);
        for trial in 0..20 {
            let d = r.gen_range(3..6);
            let k = r.gen_range(2..5);
            let n = r.gen_range(2..4);
            let weights = random_matrix(&mut r, d, k);
            let features = random_matrix(&mut r, d, n);
            let labels = random_labels(&mut r, k, n);
            let lambda = if trial % 2 == 0 { 10.0 } else { 0.5 };

            let objective = |w: &[f64], f: &[f64]| -> f64 {
                let wm = Matrix::from_vec(d, k, w.to_vec()).unwrap();
                let fm = Matrix::from_vec(d, n, f.to_vec()).unwrap();
                let logits = large_margin_logits(&wm, &fm, &labels, 2, lambda).unwrap();
                cross_entropy(&softmax(&logits), &labels).unwrap().0
            };

            let logits = large_margin_logits(&weights, &features, &labels, 2, lambda).unwrap();
            let (_, dlogits) = cross_entropy(&softmax(&logits), &labels).unwrap();
            let (dw, dx) =
                large_margin_backward(&weights, &features, &labels, 2, lambda, &dlogits).unwrap();

            let num_w = numeric_gradient(
                |w| objective(w, features.data()),
                weights.data(),
                DEFAULT_STEP,
            );
            let num_x = numeric_gradient(
                |f| objective(weights.data(), f),
                features.data(),
                DEFAULT_STEP,
            );
            assert!(max_rel_deviation(dw.data(), &num_w, 1e-4) < 1e-5, "dW trial {trial}");
            assert!(max_rel_deviation(dx.data(), &num_x, 1e-4) < 1e-5, "dX trial {trial}");
        }
    }

    #[test]
    fn losses_are_nonnegative() {
        let mut r = rng(15);
        for _ in 0..50 {
            let k = r.gen_range(2..6);
            let n = r.gen_range(1..5);
            let probs = softmax(&random_matrix(&mut r, k, n).scale(4.0));
            let labels = random_labels(&mut r, k, n);
            assert!(cross_entropy(&probs, &labels).unwrap().0 >= 0.0);
            assert!(focal(&probs, &labels, 0.7).unwrap().0 >= 0.0);
            assert!(truncated_lq(&probs, &labels, 0.5, 0.1).unwrap().0 >= 0.0);
        }
    }
}
