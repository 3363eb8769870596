//! Layer forward/backward kernels: dense, the masked orthogonal softmax
//! classification layer, dropout, and dropconnect.
//!
//! Convention used throughout: a batch is a matrix whose columns are
//! samples. A layer with `d_in` inputs and `d_out` outputs stores its
//! weights as `d_in x d_out` and computes `Wᵀx (+ b)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, relu, softmax, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Uniform init in [-1/sqrt(d_in), +1/sqrt(d_in)].
fn init_weights(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let bound = 1.0 / (d_in as f64).sqrt();
    Matrix::from_fn(d_in, d_out, |_, _| rng.gen_range(-bound..bound))
}

// ---------------------------------------------------------------------------
// Mask

/// Fixed block-diagonal 0/1 mask assigning a contiguous block of input
/// neurons to every class. Columns are pairwise orthogonal by construction
/// and the mask never changes after it is built.
#[derive(Clone, Debug)]
pub struct MaskMatrix {
    d: usize,
    k: usize,
    block_sizes: Vec<usize>,
    mask: Matrix,
}

impl MaskMatrix {
    /// Build the d x k mask. The first `d mod k` classes receive
    /// `ceil(d/k)` rows, the rest `floor(d/k)`, assigned contiguously in
    /// class order.
    pub fn build(d: usize, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!(
                "mask needs at least 2 classes, got {k}"
            )));
        }
        if d < k {
            return Err(Error::Config(format!(
                "each class needs at least one hidden neuron: width {d} < classes {k}"
            )));
        }
        let base = d / k;
        let remainder = d % k;
        let block_sizes: Vec<usize> = (0..k)
            .map(|j| if j < remainder { base + 1 } else { base })
            .collect();
        let mut mask = Matrix::zeros(d, k);
        let mut row = 0;
        for (j, &size) in block_sizes.iter().enumerate() {
            for _ in 0..size {
                mask.set(row, j, 1.0);
                row += 1;
            }
        }
        debug_assert_eq!(row, d);
        Ok(MaskMatrix {
            d,
            k,
            block_sizes,
            mask,
        })
    }

    pub fn input_width(&self) -> usize {
        self.d
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn block_sizes(&self) -> &[usize] {
        &self.block_sizes
    }

    /// Row range of the block owned by `class`.
    pub fn block_range(&self, class: usize) -> std::ops::Range<usize> {
        let start: usize = self.block_sizes[..class].iter().sum();
        start..start + self.block_sizes[class]
    }

    pub fn matrix(&self) -> &Matrix {
        &self.mask
    }
}

// ---------------------------------------------------------------------------
// Dense

#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Option<Matrix>,
    pub activation: Activation,
}

/// Gradients of one dense layer plus the gradient passed to its input.
pub struct DenseGrads {
    pub weights: Matrix,
    pub bias: Option<Matrix>,
    pub input: Matrix,
}

impl DenseLayer {
    pub fn init(
        d_in: usize,
        d_out: usize,
        bias: bool,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Small positive bias keeps relu units initially alive; with few
        // neurons per class downstream, a unit that never fires can wedge a
        // whole class.
        let bias_init = match activation {
            Activation::Relu => 0.1,
            _ => 0.0,
        };
        DenseLayer {
            weights: init_weights(d_in, d_out, rng),
            bias: bias.then(|| Matrix::from_fn(d_out, 1, |_, _| bias_init)),
            activation,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weights.cols()
    }

    /// Pre-activation `Wᵀx + b`.
    pub fn linear(&self, x: &Matrix) -> Result<Matrix> {
        let mut pre = matmul(&self.weights.transpose(), x)?;
        if let Some(b) = &self.bias {
            for r in 0..pre.rows() {
                let bv = b.get(r, 0);
                for c in 0..pre.cols() {
                    pre.set(r, c, pre.get(r, c) + bv);
                }
            }
        }
        Ok(pre)
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let pre = self.linear(x)?;
        Ok(match self.activation {
            Activation::Relu => relu(&pre),
            Activation::Identity => pre,
            Activation::Softmax => softmax(&pre),
        })
    }

    /// Backward through the activation: dL/dpre from dL/dout.
    ///
    /// Softmax is not handled here; classification losses differentiate the
    /// softmax jointly with the loss (see `linalg::softmax` callers).
    pub fn activation_backward(&self, upstream: &Matrix, pre: &Matrix) -> Result<Matrix> {
        match self.activation {
            Activation::Identity => Ok(upstream.clone()),
            Activation::Relu => {
                upstream.hadamard(&pre.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
            }
            Activation::Softmax => Err(Error::State(
                "softmax activation gradients are fused into the loss".into(),
            )),
        }
    }

    /// Backward through the linear part given dL/dpre and the cached input.
    pub fn backward_linear(&self, dpre: &Matrix, input: &Matrix) -> Result<DenseGrads> {
        let dweights = matmul(input, &dpre.transpose())?;
        let dbias = if self.bias.is_some() {
            let mut db = Matrix::zeros(dpre.rows(), 1);
            for r in 0..dpre.rows() {
                db.set(r, 0, dpre.row(r).iter().sum());
            }
            Some(db)
        } else {
            None
        };
        let dinput = matmul(&self.weights, dpre)?;
        Ok(DenseGrads {
            weights: dweights,
            bias: dbias,
            input: dinput,
        })
    }
}

// ---------------------------------------------------------------------------
// Orthogonal softmax classification layer

/// Classification layer computing `softmax((M ⊙ W)ᵀ v)` for a fixed
/// block-diagonal mask M. Effective weight columns of distinct classes have
/// disjoint support, so their dot products are exactly zero at every point
/// of training. The layer has no bias.
#[derive(Clone, Debug)]
pub struct OslLayer {
    pub weights: Matrix,
    pub mask: MaskMatrix,
}

impl OslLayer {
    /// Initialize with masked uniform weights in [0, 1/sqrt(d_in));
    /// masked-out positions start (and stay) exactly zero.
    ///
    /// The nonnegative range matters: each class's dedicated neurons are
    /// its positive evidence, and a block whose weights start negative can
    /// settle as an anti-detector that never fires on its own class (the
    /// hidden units then learn to stay silent there and the class is lost
    /// for the rest of the run).
    pub fn init(mask: MaskMatrix, rng: &mut ChaCha8Rng) -> Self {
        let raw = init_weights(mask.input_width(), mask.classes(), rng);
        let weights = raw
            .map(f64::abs)
            .hadamard(mask.matrix())
            .expect("mask shape");
        OslLayer { weights, mask }
    }

    pub fn input_width(&self) -> usize {
        self.mask.input_width()
    }

    pub fn classes(&self) -> usize {
        self.mask.classes()
    }

    /// `M ⊙ W`; what actually multiplies the input.
    pub fn effective_weights(&self) -> Matrix {
        self.weights.hadamard(self.mask.matrix()).expect("mask shape")
    }

    pub fn logits(&self, v: &Matrix) -> Result<Matrix> {
        matmul(&self.effective_weights().transpose(), v)
    }

    /// `softmax((M ⊙ W) v)`: class probabilities per sample column.
    pub fn forward(&self, v: &Matrix) -> Result<Matrix> {
        Ok(softmax(&self.logits(v)?))
    }

    /// Gradient of the forward composition. `upstream` is dL/d(output
    /// probabilities); returns (weight grad, input grad). The weight grad is
    /// exactly zero at masked positions.
    pub fn backward(
        &self,
        upstream: &Matrix,
        cached_input: Option<&Matrix>,
    ) -> Result<(Matrix, Matrix)> {
        let input = cached_input.ok_or_else(|| {
            Error::State("osl backward called without a cached forward input".into())
        })?;
        let probs = self.forward(input)?;
        let dlogits = softmax_backward(&probs, upstream)?;
        self.backward_logits(&dlogits, input)
    }

    /// Backward from dL/dlogits (used when the loss differentiates the
    /// softmax itself).
    pub fn backward_logits(&self, dlogits: &Matrix, input: &Matrix) -> Result<(Matrix, Matrix)> {
        let dweights = matmul(input, &dlogits.transpose())?.hadamard(self.mask.matrix())?;
        let dinput = matmul(&self.effective_weights(), dlogits)?;
        Ok((dweights, dinput))
    }
}

/// Jacobian-vector product of column-wise softmax: given the softmax output
/// `probs` and dL/dprobs, returns dL/dlogits.
pub fn softmax_backward(probs: &Matrix, upstream: &Matrix) -> Result<Matrix> {
    if probs.shape() != upstream.shape() {
        return Err(Error::Shape {
            op: "softmax_backward",
            left_rows: probs.rows(),
            left_cols: probs.cols(),
            right_rows: upstream.rows(),
            right_cols: upstream.cols(),
        });
    }
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for c in 0..probs.cols() {
        let mut weighted = 0.0;
        for r in 0..probs.rows() {
            weighted += upstream.get(r, c) * probs.get(r, c);
        }
        for r in 0..probs.rows() {
            let p = probs.get(r, c);
            out.set(r, c, p * (upstream.get(r, c) - weighted));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Dropout

/// Inverted dropout: in train mode survivors are scaled by 1/(1-p) so the
/// eval path is the identity.
#[derive(Clone, Debug)]
pub struct DropoutLayer {
    pub p: f64,
    pub mode: Mode,
    rng: ChaCha8Rng,
}

impl DropoutLayer {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        Ok(DropoutLayer {
            p,
            mode: Mode::Eval,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn forward(&mut self, x: &Matrix) -> Matrix {
        match self.mode {
            Mode::Eval => x.clone(),
            Mode::Train => self.forward_train(x).0,
        }
    }

    /// Train-mode forward; also returns the scaled keep-mask so callers can
    /// reuse it in the backward pass (dL/dx = upstream ⊙ mask).
    pub fn forward_train(&mut self, x: &Matrix) -> (Matrix, Matrix) {
        if self.p == 0.0 {
            let ones = Matrix::from_fn(x.rows(), x.cols(), |_, _| 1.0);
            return (x.clone(), ones);
        }
        let scale = 1.0 / (1.0 - self.p);
        let mask = Matrix::from_fn(x.rows(), x.cols(), |_, _| {
            if self.rng.gen::<f64>() < self.p {
                0.0
            } else {
                scale
            }
        });
        let out = x.hadamard(&mask).expect("same shape");
        (out, mask)
    }
}

// ---------------------------------------------------------------------------
// DropConnect

/// Bernoulli mask on individual weights, resampled per batch in train mode;
/// eval mode forwards with the expected weights (1-q)·W. Only meaningful as
/// a hidden-layer wrapper: dropping whole connections of a classification
/// output can detach a class from the network.
#[derive(Clone, Debug)]
pub struct DropConnectLayer {
    pub q: f64,
    pub dense: DenseLayer,
    pub mode: Mode,
    rng: ChaCha8Rng,
    last_mask: Option<Matrix>,
}

impl DropConnectLayer {
    pub fn new(dense: DenseLayer, q: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&q) {
            return Err(Error::Config(format!(
                "dropconnect probability must be in [0, 1), got {q}"
            )));
        }
        Ok(DropConnectLayer {
            q,
            dense,
            mode: Mode::Eval,
            rng: ChaCha8Rng::seed_from_u64(seed),
            last_mask: None,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Weights the eval path multiplies by.
    pub fn eval_weights(&self) -> Matrix {
        self.dense.weights.scale(1.0 - self.q)
    }

    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        match self.mode {
            Mode::Eval => {
                let layer = DenseLayer {
                    weights: self.eval_weights(),
                    bias: self.dense.bias.clone(),
                    activation: self.dense.activation,
                };
                layer.forward(x)
            }
            Mode::Train => {
                let mask = Matrix::from_fn(
                    self.dense.weights.rows(),
                    self.dense.weights.cols(),
                    |_, _| if self.rng.gen::<f64>() < self.q { 0.0 } else { 1.0 },
                );
                let layer = DenseLayer {
                    weights: self.dense.weights.hadamard(&mask)?,
                    bias: self.dense.bias.clone(),
                    activation: self.dense.activation,
                };
                let out = layer.forward(x);
                self.last_mask = Some(mask);
                out
            }
        }
    }

    /// Mask sampled by the most recent train-mode forward.
    pub fn last_mask(&self) -> Option<&Matrix> {
        self.last_mask.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{max_rel_deviation, numeric_gradient, DEFAULT_STEP};
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn mask_even_blocks() {
        let m = MaskMatrix::build(8, 4).unwrap();
        assert_eq!(m.block_sizes(), &[2, 2, 2, 2]);
        assert_eq!(m.block_range(0), 0..2);
        assert_eq!(m.block_range(1), 2..4);
        for j in 0..4 {
            let col = m.matrix().column(j);
            assert_eq!(col.iter().filter(|&&v| v == 1.0).count(), 2);
        }
    }

    #[test]
    fn mask_32_8_has_four_per_class() {
        let m = MaskMatrix::build(32, 8).unwrap();
        assert!(m.block_sizes().iter().all(|&s| s == 4));
    }

    #[test]
    fn mask_remainder_goes_to_low_classes() {
        let m = MaskMatrix::build(10, 4).unwrap();
        assert_eq!(m.block_sizes(), &[3, 3, 2, 2]);
    }

    #[test]
    fn mask_rejects_fewer_neurons_than_classes() {
        let err = MaskMatrix::build(3, 4).unwrap_err();
        assert!(err.to_string().contains("at least one hidden neuron"));
    }

    #[test]
    fn mask_columns_partition_rows_and_are_orthogonal() {
        let m = MaskMatrix::build(13, 5).unwrap();
        let mat = m.matrix();
        for r in 0..13 {
            let ones: usize = (0..5).filter(|&c| mat.get(r, c) == 1.0).count();
            assert_eq!(ones, 1, "row {r} must belong to exactly one class");
        }
        for i in 0..5 {
            for j in (i + 1)..5 {
                let d = crate::linalg::dot(&mat.column(i), &mat.column(j));
                assert_eq!(d, 0.0);
            }
        }
    }

    #[test]
    fn osl_zero_weights_give_uniform_output() {
        let mask = MaskMatrix::build(8, 4).unwrap();
        let layer = OslLayer {
            weights: Matrix::zeros(8, 4),
            mask,
        };
        let v = Matrix::column_vector(&[1.0, -2.0, 0.5, 3.0, -1.0, 0.0, 2.0, 1.0]);
        let out = layer.forward(&v).unwrap();
        for r in 0..4 {
            assert_eq!(out.get(r, 0), 0.25);
        }
    }

    #[test]
    fn osl_hand_case() {
        let mask = MaskMatrix::build(4, 2).unwrap();
        let layer = OslLayer {
            weights: Matrix::from_fn(4, 2, |_, _| 1.0).hadamard(mask.matrix()).unwrap(),
            mask,
        };
        let v = Matrix::column_vector(&[1.0, 0.0, 0.0, 0.0]);
        let out = layer.forward(&v).unwrap();
        let e = 1f64.exp();
        assert_relative_eq!(out.get(0, 0), e / (e + 1.0), max_relative = 1e-12);
        assert_relative_eq!(out.get(1, 0), 1.0 / (e + 1.0), max_relative = 1e-12);
    }

    #[test]
    fn osl_masked_entries_have_no_effect() {
        let mut r = rng(4);
        let mask = MaskMatrix::build(9, 3).unwrap();
        let layer = OslLayer::init(mask, &mut r);
        let v = random_matrix(&mut r, 9, 5);
        let base = layer.forward(&v).unwrap();

        let mut perturbed = layer.clone();
        // Bump every masked position by 1e6.
        for row in 0..9 {
            for col in 0..3 {
                if perturbed.mask.matrix().get(row, col) == 0.0 {
                    perturbed.weights.set(row, col, 1e6);
                }
            }
        }
        let out = perturbed.forward(&v).unwrap();
        assert_eq!(base.data(), out.data());
    }

    #[test]
    fn osl_block_forward_is_bit_identical() {
        // Per-class block dot products must equal the masked matmul bit for
        // bit: masked entries contribute exact zeros in the same
        // accumulation order.
        let mut r = rng(9);
        let mask = MaskMatrix::build(10, 4).unwrap();
        let layer = OslLayer::init(mask, &mut r);
        let v = random_matrix(&mut r, 10, 3);
        let logits = layer.logits(&v).unwrap();
        for c in 0..3 {
            for class in 0..4 {
                let range = layer.mask.block_range(class);
                let mut acc = 0.0;
                for row in range {
                    acc += layer.weights.get(row, class) * v.get(row, c);
                }
                assert_eq!(logits.get(class, c), acc);
            }
        }
    }

    #[test]
    fn osl_backward_zero_upstream() {
        let mut r = rng(5);
        let mask = MaskMatrix::build(6, 2).unwrap();
        let layer = OslLayer::init(mask, &mut r);
        let v = random_matrix(&mut r, 6, 4);
        let upstream = Matrix::zeros(2, 4);
        let (dw, dx) = layer.backward(&upstream, Some(&v)).unwrap();
        assert!(dw.data().iter().all(|&g| g == 0.0));
        assert!(dx.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn osl_backward_requires_cached_input() {
        let mut r = rng(5);
        let layer = OslLayer::init(MaskMatrix::build(6, 2).unwrap(), &mut r);
        let upstream = Matrix::zeros(2, 1);
        assert!(matches!(
            layer.backward(&upstream, None),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn osl_masked_gradient_positions_are_exactly_zero() {
        let mut r = rng(17);
        for _ in 0..100 {
            let d = r.gen_range(4..12);
            let k = r.gen_range(2..=d.min(5));
            let mask = MaskMatrix::build(d, k).unwrap();
            let layer = OslLayer::init(mask, &mut r);
            let v = random_matrix(&mut r, d, 3);
            let upstream = random_matrix(&mut r, k, 3);
            let (dw, _) = layer.backward(&upstream, Some(&v)).unwrap();
            for row in 0..d {
                for col in 0..k {
                    if layer.mask.matrix().get(row, col) == 0.0 {
                        assert_eq!(dw.get(row, col), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn osl_backward_matches_finite_differences() {
        let mut r = rng(23);
        let mask = MaskMatrix::build(7, 3).unwrap();
        let layer = OslLayer::init(mask, &mut r);
        let v = random_matrix(&mut r, 7, 2);
        // Scalar objective: fixed random linear functional of the output.
        let g = random_matrix(&mut r, 3, 2);
        let objective = |weights: &[f64], input: &[f64]| -> f64 {
            let w = Matrix::from_vec(7, 3, weights.to_vec()).unwrap();
            let probe = OslLayer {
                weights: w,
                mask: layer.mask.clone(),
            };
            let x = Matrix::from_vec(7, 2, input.to_vec()).unwrap();
            let out = probe.forward(&x).unwrap();
            out.data().iter().zip(g.data()).map(|(o, gi)| o * gi).sum()
        };

        let (dw, dx) = layer.backward(&g, Some(&v)).unwrap();
        let num_w = numeric_gradient(
            |w| objective(w, v.data()),
            layer.weights.data(),
            DEFAULT_STEP,
        );
        let num_x = numeric_gradient(
            |x| objective(layer.weights.data(), x),
            v.data(),
            DEFAULT_STEP,
        );
        assert!(max_rel_deviation(dw.data(), &num_w, 1e-4) < 1e-5);
        assert!(max_rel_deviation(dx.data(), &num_x, 1e-4) < 1e-5);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut r = rng(31);
        for _ in 0..20 {
            let d_in = r.gen_range(2..6);
            let d_out = r.gen_range(2..5);
            let n = r.gen_range(1..4);
            let mut layer = DenseLayer::init(d_in, d_out, true, Activation::Relu, &mut r);
            // Nonzero bias so its gradient is exercised away from the origin.
            if let Some(b) = &mut layer.bias {
                *b = random_matrix(&mut r, d_out, 1);
            }
            let x = random_matrix(&mut r, d_in, n);
            let g = random_matrix(&mut r, d_out, n);

            let objective = |w: &[f64], b: &[f64], input: &[f64]| -> f64 {
                let probe = DenseLayer {
                    weights: Matrix::from_vec(d_in, d_out, w.to_vec()).unwrap(),
                    bias: Some(Matrix::from_vec(d_out, 1, b.to_vec()).unwrap()),
                    activation: Activation::Relu,
                };
                let input = Matrix::from_vec(d_in, n, input.to_vec()).unwrap();
                let out = probe.forward(&input).unwrap();
                out.data().iter().zip(g.data()).map(|(o, gi)| o * gi).sum()
            };

            let pre = layer.linear(&x).unwrap();
            // Keep pre-activations away from the relu kink so the central
            // difference is valid.
            if pre.data().iter().any(|v| v.abs() < 1e-4) {
                continue;
            }
            let dpre = layer.activation_backward(&g, &pre).unwrap();
            let grads = layer.backward_linear(&dpre, &x).unwrap();

            let bias = layer.bias.as_ref().unwrap();
            let num_w = numeric_gradient(
                |w| objective(w, bias.data(), x.data()),
                layer.weights.data(),
                DEFAULT_STEP,
            );
            let num_b = numeric_gradient(
                |b| objective(layer.weights.data(), b, x.data()),
                bias.data(),
                DEFAULT_STEP,
            );
            let num_x = numeric_gradient(
                |input| objective(layer.weights.data(), bias.data(), input),
                x.data(),
                DEFAULT_STEP,
            );
            assert!(max_rel_deviation(grads.weights.data(), &num_w, 1e-4) < 1e-5);
            assert!(max_rel_deviation(grads.bias.unwrap().data(), &num_b, 1e-4) < 1e-5);
            assert!(max_rel_deviation(grads.input.data(), &num_x, 1e-4) < 1e-5);
        }
    }

    #[test]
    fn dropout_identity_cases() {
        let mut layer = DropoutLayer::new(0.0, 1).unwrap();
        let x = Matrix::column_vector(&[1.0, 2.0, 3.0]);
        layer.set_mode(Mode::Train);
        assert_eq!(layer.forward(&x).data(), x.data());
        layer.set_mode(Mode::Eval);
        assert_eq!(layer.forward(&x).data(), x.data());

        let mut half = DropoutLayer::new(0.5, 1).unwrap();
        half.set_mode(Mode::Eval);
        assert_eq!(half.forward(&x).data(), x.data());
    }

    #[test]
    fn dropout_rejects_p_of_one() {
        assert!(DropoutLayer::new(1.0, 1).is_err());
    }

    #[test]
    fn dropout_train_mean_preserved() {
        let mut layer = DropoutLayer::new(0.3, 7).unwrap();
        layer.set_mode(Mode::Train);
        let x = Matrix::from_fn(1, 100_000, |_, _| 2.0);
        let out = layer.forward(&x);
        let mean = out.data().iter().sum::<f64>() / out.data().len() as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.01, "mean {mean}");
    }

    #[test]
    fn dropconnect_zero_q_matches_dense() {
        let mut r = rng(2);
        let dense = DenseLayer::init(3, 4, true, Activation::Identity, &mut r);
        let mut dc = DropConnectLayer::new(dense.clone(), 0.0, 11).unwrap();
        let x = random_matrix(&mut r, 3, 2);
        dc.set_mode(Mode::Train);
        assert_eq!(dc.forward(&x).unwrap().data(), dense.forward(&x).unwrap().data());
        dc.set_mode(Mode::Eval);
        assert_eq!(dc.forward(&x).unwrap().data(), dense.forward(&x).unwrap().data());
    }

    #[test]
    fn dropconnect_eval_scales_towards_zero() {
        let mut r = rng(3);
        let dense = DenseLayer::init(3, 2, false, Activation::Identity, &mut r);
        let mut dc = DropConnectLayer::new(dense, 0.999, 11).unwrap();
        dc.set_mode(Mode::Eval);
        let x = random_matrix(&mut r, 3, 1);
        let out = dc.forward(&x).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn dropconnect_train_mean_matches_eval() {
        let mut r = rng(6);
        // Positive weights and inputs keep the outputs away from zero so a
        // 1% relative check sits well above the Monte-Carlo noise floor.
        let dense = DenseLayer {
            weights: Matrix::from_fn(8, 3, |_, _| r.gen_range(0.5..1.0)),
            bias: None,
            activation: Activation::Identity,
        };
        let mut dc = DropConnectLayer::new(dense, 0.4, 19).unwrap();
        let x = Matrix::from_fn(8, 1, |_, _| r.gen_range(0.5..1.0));

        dc.set_mode(Mode::Eval);
        let expected = dc.forward(&x).unwrap();

        dc.set_mode(Mode::Train);
        let mut acc = Matrix::zeros(3, 1);
        let resamples = 100_000;
        for _ in 0..resamples {
            acc.add_assign(&dc.forward(&x).unwrap()).unwrap();
        }
        let mean = acc.scale(1.0 / resamples as f64);
        for (m, e) in mean.data().iter().zip(expected.data()) {
            assert!((m - e).abs() / e.abs() < 0.01, "{m} vs {e}");
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut r = rng(41);
        let logits = random_matrix(&mut r, 4, 3);
        let g = random_matrix(&mut r, 4, 3);
        let probs = softmax(&logits);
        let analytic = softmax_backward(&probs, &g).unwrap();
        let num = numeric_gradient(
            |z| {
                let p = softmax(&Matrix::from_vec(4, 3, z.to_vec()).unwrap());
                p.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
            },
            logits.data(),
            DEFAULT_STEP,
        );
        assert!(max_rel_deviation(analytic.data(), &num, 1e-4) < 1e-5);
    }
}
