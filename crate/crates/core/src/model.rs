//! Encoder (two tanh layers) and linear softmax classifier with hand-written
//! forward and backward passes.

use crate::error::{Error, Result};
use crate::kernel::{softmax_rows, softmax_rows_backward, Matrix, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub input: usize,
    pub hidden: usize,
    pub latent: usize,
    pub classes: usize,
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("input_dim", self.input),
            ("hidden_dim", self.hidden),
            ("latent_dim", self.latent),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Encoder weights `w1, b1, w2, b2` and classifier weights `wc, bc`.
///
/// The same struct doubles as the gradient buffer for a backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub wc: Matrix,
    pub bc: Matrix,
}

pub const TENSOR_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "wc", "bc"];

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            w1: Matrix::zeros(dims.input, dims.hidden),
            b1: Matrix::zeros(1, dims.hidden),
            w2: Matrix::zeros(dims.hidden, dims.latent),
            b2: Matrix::zeros(1, dims.latent),
            wc: Matrix::zeros(dims.latent, dims.classes),
            bc: Matrix::zeros(1, dims.classes),
        }
    }

    /// Gaussian weights with standard deviation `1/sqrt(fan_in)`, zero biases.
    pub fn init(rng: &mut Rng, dims: Dims) -> Result<Self> {
        dims.validate()?;
        let mut p = Self::zeros(dims);
        p.w1 = rng.gaussian_matrix(dims.input, dims.hidden, (dims.input as f64).sqrt().recip());
        p.w2 = rng.gaussian_matrix(dims.hidden, dims.latent, (dims.hidden as f64).sqrt().recip());
        p.wc = rng.gaussian_matrix(dims.latent, dims.classes, (dims.latent as f64).sqrt().recip());
        Ok(p)
    }

    pub fn dims(&self) -> Dims {
        Dims {
            input: self.w1.rows(),
            hidden: self.w1.cols(),
            latent: self.w2.cols(),
            classes: self.wc.cols(),
        }
    }

    pub fn tensors(&self) -> [&Matrix; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.wc, &self.bc]
    }

    pub fn tensors_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.wc,
            &mut self.bc,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Checks that every tensor agrees with `dims`.
    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        let expected = Self::zeros(dims);
        for ((name, have), want) in TENSOR_NAMES.iter().zip(self.tensors()).zip(expected.tensors()) {
            if have.shape() != want.shape() {
                return Err(Error::shape(
                    "ModelParams",
                    format!("{name} {}x{}", want.rows(), want.cols()),
                    format!("{}x{}", have.rows(), have.cols()),
                ));
            }
        }
        Ok(())
    }
}

/// Intermediates of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Matrix,
    pub hidden_pre: Matrix,
    pub hidden: Matrix,
    pub latent_pre: Matrix,
    /// `H`, one latent row per sample.
    pub latent: Matrix,
    pub logits: Matrix,
    /// `R`, one probability row per sample.
    pub probs: Matrix,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

pub fn forward(params: &ModelParams, x: &Matrix) -> Result<ForwardTrace> {
    if x.cols() != params.w1.rows() {
        return Err(Error::shape(
            "forward",
            format!("Bx{}", params.w1.rows()),
            format!("{}x{}", x.rows(), x.cols()),
        ));
    }
    let hidden_pre = x.matmul(&params.w1)?.add_row_broadcast(&params.b1)?;
    let hidden = hidden_pre.map(f64::tanh);
    let latent_pre = hidden.matmul(&params.w2)?.add_row_broadcast(&params.b2)?;
    let latent = latent_pre.map(f64::tanh);
    let logits = latent.matmul(&params.wc)?.add_row_broadcast(&params.bc)?;
    let probs = softmax_rows(&logits);
    Ok(ForwardTrace {
        input: x.clone(),
        hidden_pre,
        hidden,
        latent_pre,
        latent,
        logits,
        probs,
    })
}

/// Parameter gradients from upstream gradients w.r.t. the logits and the
/// latents. The two signals are summed at the latent layer.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    d_logits: &Matrix,
    d_latent: &Matrix,
) -> Result<ModelParams> {
    trace.logits.same_shape(d_logits, "backward (logits)")?;
    trace.latent.same_shape(d_latent, "backward (latent)")?;

    let wc = trace.latent.t_matmul(d_logits)?;
    let bc = d_logits.column_sums();

    let mut d_h = d_logits.matmul_t(&params.wc)?;
    d_h.axpy(1.0, d_latent)?;
    let d_latent_pre = d_h.zip_map(&trace.latent, |g, h| g * (1.0 - h * h))?;
    let w2 = trace.hidden.t_matmul(&d_latent_pre)?;
    let b2 = d_latent_pre.column_sums();

    let d_hidden = d_latent_pre.matmul_t(&params.w2)?;
    let d_hidden_pre = d_hidden.zip_map(&trace.hidden, |g, h| g * (1.0 - h * h))?;
    let w1 = trace.input.t_matmul(&d_hidden_pre)?;
    let b1 = d_hidden_pre.column_sums();

    Ok(ModelParams { w1, b1, w2, b2, wc, bc })
}

/// [`backward`] for an upstream gradient taken w.r.t. the softmax outputs `R`
/// rather than the logits.
pub fn backward_from_probs(
    params: &ModelParams,
    trace: &ForwardTrace,
    d_probs: &Matrix,
    d_latent: &Matrix,
) -> Result<ModelParams> {
    let d_logits = softmax_rows_backward(&trace.probs, d_probs)?;
    backward(params, trace, &d_logits, d_latent)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{dot, finite_diff_grad, relative_error};

    const DIMS: Dims = Dims {
        input: 3,
        hidden: 4,
        latent: 2,
        classes: 2,
    };

    #[test]
    fn zero_params_give_uniform_predictions() {
        let p = ModelParams::zeros(Dims { classes: 5, ..DIMS });
        let x = Rng::new(1).gaussian_matrix(4, 3, 1.0);
        let t = forward(&p, &x).unwrap();
        assert!(t.probs.as_slice().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn rows_are_processed_independently() {
        let p = ModelParams::init(&mut Rng::new(3), DIMS).unwrap();
        let x1 = Matrix::from_rows(&[[0.3, -1.0, 2.0]]).unwrap();
        let x2 = x1.vstack(&x1).unwrap();
        let (a, b) = (forward(&p, &x1).unwrap(), forward(&p, &x2).unwrap());
        assert_eq!(a.probs.row(0), b.probs.row(0));
        assert_eq!(a.probs.row(0), b.probs.row(1));
        assert_eq!(a.latent.row(0), b.latent.row(1));
    }

    #[test]
    fn prediction_rows_are_distributions() {
        let p = ModelParams::init(&mut Rng::new(4), Dims { classes: 4, ..DIMS }).unwrap();
        let x = Rng::new(5).gaussian_matrix(16, 3, 2.0);
        for s in forward(&p, &x).unwrap().probs.row_sums() {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = ModelParams::zeros(DIMS);
        assert!(matches!(forward(&p, &Matrix::zeros(2, 4)), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = ModelParams::init(&mut Rng::new(6), DIMS).unwrap();
        let t = forward(&p, &Rng::new(7).gaussian_matrix(5, 3, 1.0)).unwrap();
        let g = backward(&p, &t, &Matrix::zeros(5, 2), &Matrix::zeros(5, 2)).unwrap();
        assert_eq!(g, ModelParams::zeros(DIMS));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let p = ModelParams::init(&mut Rng::new(8), DIMS).unwrap();
        let t = forward(&p, &Rng::new(9).gaussian_matrix(5, 3, 1.0)).unwrap();
        let d_r = Rng::new(10).gaussian_matrix(5, 2, 1.0);
        let zero = Matrix::zeros(5, 2);
        let g1 = backward_from_probs(&p, &t, &d_r, &zero).unwrap();
        let g2 = backward_from_probs(&p, &t, &d_r.scale(2.0), &zero).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            assert!(a.scale(2.0).max_abs_diff(b) < 1e-14);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(12);
        let params = ModelParams::init(&mut rng, DIMS).unwrap();
        let x = rng.gaussian_matrix(5, 3, 1.0);
        let w_r = rng.gaussian_matrix(5, 2, 1.0);
        let w_h = rng.gaussian_matrix(5, 2, 1.0);
        // Scalar loss <w_r, R> + <w_h, H>.
        let loss = |p: &ModelParams| {
            let t = forward(p, &x).unwrap();
            dot(t.probs.as_slice(), w_r.as_slice()) + dot(t.latent.as_slice(), w_h.as_slice())
        };
        let trace = forward(&params, &x).unwrap();
        let grads = backward_from_probs(&params, &trace, &w_r, &w_h).unwrap();
        for k in 0..6 {
            let numeric = finite_diff_grad(
                |m| {
                    let mut p = params.clone();
                    *p.tensors_mut()[k] = m.clone();
                    loss(&p)
                },
                params.tensors()[k],
                1e-5,
            );
            let err = relative_error(grads.tensors()[k], &numeric);
            assert!(err < 1e-4, "{}: relative error {err}", TENSOR_NAMES[k]);
        }
    }

    #[test]
    fn init_is_seeded_with_zero_biases() {
        let dims = Dims {
            input: 400,
            hidden: 50,
            latent: 8,
            classes: 3,
        };
        let a = ModelParams::init(&mut Rng::new(21), dims).unwrap();
        assert_eq!(a, ModelParams::init(&mut Rng::new(21), dims).unwrap());
        assert!(a.b1.as_slice().iter().chain(a.b2.as_slice()).chain(a.bc.as_slice()).all(|&v| v == 0.0));
        let w = a.w1.as_slice();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let target = 1.0 / 20.0;
        assert!((sd - target).abs() < 0.2 * target, "sd {sd}");
    }
}
