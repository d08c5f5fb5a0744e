//! Scalar training losses with analytic gradients: cross-entropy, the
//! agreement regularizer `log(1 - <r, t>)`, the prototype clustering term, and
//! their per-method combination.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernel::{dot, Matrix};
use crate::memory::{clustering_backward, clustering_loss};

/// Floor applied to probabilities before taking a log.
pub const PROB_FLOOR: f64 = 1e-12;
/// Floor applied to `1 - <r, t>` in the regularizer.
pub const AGREEMENT_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Plain cross-entropy on the given labels.
    Ce,
    /// Cross-entropy against a soft mix of the label and the prediction.
    Bootstrap,
    /// Cross-entropy plus the regularizer toward per-sample momentum targets.
    Elr,
    /// Cross-entropy plus the regularizer toward memory-refined pseudo labels,
    /// plus the prototype clustering loss.
    Arnet,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ce, Method::Bootstrap, Method::Elr, Method::Arnet];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ce => "ce",
            Method::Bootstrap => "bootstrap",
            Method::Elr => "elr",
            Method::Arnet => "arnet",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}` (expected ce, bootstrap, elr or arnet)")))
    }
}

fn check_labels(probs: &Matrix, labels: &[usize]) -> Result<()> {
    if labels.len() != probs.rows() {
        return Err(Error::shape("labels", probs.rows(), labels.len()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= probs.cols()) {
        return Err(Error::Data(format!("label {y} out of range for {} classes", probs.cols())));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` and its gradient w.r.t. the
/// logits, `(R - onehot(y)) / B`.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    check_labels(probs, labels)?;
    let b = probs.rows() as f64;
    let mut grad = probs.scale(1.0 / b);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[(i, y)].max(PROB_FLOOR).ln();
        grad[(i, y)] -= 1.0 / b;
    }
    Ok((loss / b, grad))
}

/// Soft bootstrapping: cross-entropy against `(1 - w) onehot(y) + w r`,
/// with `r` inside the target kept differentiable. The loss equals
/// `(1 - w) CE + w H(r)`, so its logit gradient is
/// `(1 - w)(r - y) - w r_k (log r_k + H(r))`, averaged over the batch.
pub fn soft_bootstrap(probs: &Matrix, labels: &[usize], weight: f64) -> Result<(f64, Matrix)> {
    check_labels(probs, labels)?;
    let b = probs.rows() as f64;
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let r = probs.row(i);
        let logs: Vec<f64> = r.iter().map(|v| v.max(PROB_FLOOR).ln()).collect();
        let entropy = -r.iter().zip(&logs).map(|(v, l)| v * l).sum::<f64>();
        loss += -(1.0 - weight) * logs[y] + weight * entropy;
        for (k, g) in grad.row_mut(i).iter_mut().enumerate() {
            let onehot = if k == y { 1.0 } else { 0.0 };
            *g = ((1.0 - weight) * (r[k] - onehot) - weight * r[k] * (logs[k] + entropy)) / b;
        }
    }
    Ok((loss / b, grad))
}

#[derive(Clone, Debug)]
pub struct Regularizer {
    /// Batch mean of `log(max(1 - <r_i, t_i>, floor))`.
    pub value: f64,
    pub per_sample: Vec<f64>,
    pub d_logits: Matrix,
}

/// `mean_i log(1 - <r_i, t_i>)` with `T` held constant. Gradient w.r.t. the
/// logits: `-(1/B) r_ik (t_ik - <r_i, t_i>) / (1 - <r_i, t_i>)`.
pub fn elr_regularizer(probs: &Matrix, targets: &Matrix) -> Result<Regularizer> {
    probs.same_shape(targets, "elr_regularizer")?;
    let b = probs.rows() as f64;
    let mut d_logits = Matrix::zeros(probs.rows(), probs.cols());
    let mut per_sample = Vec::with_capacity(probs.rows());
    for i in 0..probs.rows() {
        let (r, t) = (probs.row(i), targets.row(i));
        let agree = dot(r, t);
        let gap = (1.0 - agree).max(AGREEMENT_FLOOR);
        per_sample.push(gap.ln());
        for (g, (&rk, &tk)) in d_logits.row_mut(i).iter_mut().zip(r.iter().zip(t)) {
            *g = -rk * (tk - agree) / gap / b;
        }
    }
    let value = per_sample.iter().sum::<f64>() / b;
    Ok(Regularizer {
        value,
        per_sample,
        d_logits,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub ce: f64,
    /// Unweighted regularizer; `total` includes `alpha * reg`.
    pub reg: f64,
    pub cluster: f64,
    pub per_sample_reg: Vec<f64>,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.ce.is_finite() && self.reg.is_finite() && self.cluster.is_finite()
    }
}

/// Inputs of the clustering term.
#[derive(Clone, Copy, Debug)]
pub struct ClusterInputs<'a> {
    /// Raw latents `H`, `B x d`.
    pub latent: &'a Matrix,
    /// Prototypes `C`, `L x d`.
    pub prototypes: &'a Matrix,
    /// Soft assignments `P`, `B x L`.
    pub attention: &'a Matrix,
    /// Transport targets `Q` for the batch rows, `B x L`.
    pub assignments: &'a Matrix,
    pub temperature: f64,
    /// Whether the clustering gradient reaches the encoder through `H`.
    pub to_encoder: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub probs: &'a Matrix,
    pub labels: &'a [usize],
    /// Regularization targets (`elr`, `arnet`).
    pub targets: Option<&'a Matrix>,
    /// Clustering term inputs (`arnet` with the clustering loss enabled).
    pub cluster: Option<ClusterInputs<'a>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    /// Weight on the prediction in the soft bootstrap target.
    pub bootstrap_weight: f64,
}

#[derive(Clone, Debug)]
pub struct ObjectiveGrads {
    pub d_logits: Matrix,
    /// Gradient w.r.t. raw latents, `B x d`.
    pub d_latent: Matrix,
    /// Gradient w.r.t. prototypes; `None` when the clustering term is off.
    pub d_prototypes: Option<Matrix>,
}

/// Assembles the per-method objective and its gradients for one batch.
pub fn combined_loss(
    method: Method,
    inputs: LossInputs<'_>,
    weights: LossWeights,
) -> Result<(LossReport, ObjectiveGrads)> {
    if !(weights.alpha >= 0.0) {
        return Err(Error::config("alpha", format!("must be non-negative, got {}", weights.alpha)));
    }
    let probs = inputs.probs;
    let (b, k) = probs.shape();
    let latent_dim = inputs.cluster.map_or(1, |c| c.latent.cols());
    let mut report = LossReport {
        total: 0.0,
        ce: 0.0,
        reg: 0.0,
        cluster: 0.0,
        per_sample_reg: vec![0.0; b],
    };

    let (ce, mut d_logits) = match method {
        Method::Bootstrap => soft_bootstrap(probs, inputs.labels, weights.bootstrap_weight)?,
        _ => cross_entropy(probs, inputs.labels)?,
    };
    report.ce = ce;
    report.total = ce;

    if matches!(method, Method::Elr | Method::Arnet) {
        let targets = inputs
            .targets
            .ok_or_else(|| Error::config("method", format!("{method} requires regularization targets")))?;
        let reg = elr_regularizer(probs, targets)?;
        d_logits.axpy(weights.alpha, &reg.d_logits)?;
        report.reg = reg.value;
        report.total += weights.alpha * reg.value;
        report.per_sample_reg = reg.per_sample;
    }

    let mut d_latent = Matrix::zeros(b, latent_dim);
    let mut d_prototypes = None;
    if let (Method::Arnet, Some(c)) = (method, inputs.cluster) {
        if c.latent.rows() != b {
            return Err(Error::shape("combined_loss", b, c.latent.rows()));
        }
        let (loss, d_scores) = clustering_loss(c.attention, c.assignments)?;
        let (dh, dc) = clustering_backward(c.latent, c.prototypes, &d_scores, c.temperature)?;
        if c.to_encoder {
            d_latent = dh;
        }
        d_prototypes = Some(dc);
        report.cluster = loss;
        report.total += loss;
    }
    debug_assert_eq!(d_logits.shape(), (b, k));

    Ok((
        report,
        ObjectiveGrads {
            d_logits,
            d_latent,
            d_prototypes,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{cosine_similarity, finite_diff_grad, relative_error, softmax_rows, Rng};

    const NO_CLUSTER: LossWeights = LossWeights {
        alpha: 3.0,
        bootstrap_weight: 0.2,
    };

    fn onehot(labels: &[usize], k: usize) -> Matrix {
        let mut m = Matrix::zeros(labels.len(), k);
        for (i, &y) in labels.iter().enumerate() {
            m[(i, y)] = 1.0;
        }
        m
    }

    #[test]
    fn method_parsing() {
        assert_eq!("arnet".parse::<Method>().unwrap(), Method::Arnet);
        assert!(matches!("gce".parse::<Method>(), Err(Error::Config { .. })));
    }

    #[test]
    fn cross_entropy_examples() {
        let y = [1, 0, 2];
        let (loss, _) = cross_entropy(&onehot(&y, 3), &y).unwrap();
        assert_eq!(loss, 0.0);
        let (loss, _) = cross_entropy(&Matrix::filled(3, 4, 0.25), &y).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(cross_entropy(&Matrix::filled(3, 2, 0.5), &y), Err(Error::Data(_))));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = Rng::new(1).gaussian_matrix(4, 3, 1.0);
        let y = [0, 2, 1, 1];
        let (_, g) = cross_entropy(&softmax_rows(&logits), &y).unwrap();
        let n = finite_diff_grad(|z| cross_entropy(&softmax_rows(z), &y).unwrap().0, &logits, 1e-6);
        assert!(relative_error(&g, &n) < 1e-4);
    }

    #[test]
    fn regularizer_examples() {
        let reg = elr_regularizer(&Matrix::filled(2, 4, 0.25), &onehot(&[0, 3], 4)).unwrap();
        for v in &reg.per_sample {
            assert!((v - (0.75f64).ln()).abs() < 1e-12);
        }
        let t = onehot(&[1, 0], 2);
        let reg = elr_regularizer(&t, &t).unwrap();
        for v in &reg.per_sample {
            assert!((v - 1e-8f64.ln()).abs() < 1e-9);
        }
        assert!(reg.d_logits.is_finite());
    }

    #[test]
    fn regularizer_gradient_matches_finite_differences() {
        let mut rng = Rng::new(2);
        let logits = rng.gaussian_matrix(5, 3, 1.0);
        let t = softmax_rows(&rng.gaussian_matrix(5, 3, 1.0));
        let reg = elr_regularizer(&softmax_rows(&logits), &t).unwrap();
        let n = finite_diff_grad(|z| elr_regularizer(&softmax_rows(z), &t).unwrap().value, &logits, 1e-6);
        assert!(relative_error(&reg.d_logits, &n) < 1e-4);
        assert!(reg.value <= 0.0);
    }

    #[test]
    fn alpha_zero_reduces_to_cross_entropy() {
        let mut rng = Rng::new(3);
        let r = softmax_rows(&rng.gaussian_matrix(6, 3, 1.0));
        let t = softmax_rows(&rng.gaussian_matrix(6, 3, 1.0));
        let y = [0, 1, 2, 0, 1, 2];
        let inputs = LossInputs {
            probs: &r,
            labels: &y,
            targets: Some(&t),
            cluster: None,
        };
        let w = LossWeights { alpha: 0.0, ..NO_CLUSTER };
        let (rep, grads) = combined_loss(Method::Arnet, inputs, w).unwrap();
        let (ce, d_ce) = cross_entropy(&r, &y).unwrap();
        assert_eq!(rep.total, ce);
        assert_eq!(grads.d_logits, d_ce);
        assert!(grads.d_prototypes.is_none());
    }

    #[test]
    fn matched_targets_decompose() {
        let mut rng = Rng::new(4);
        let r = softmax_rows(&rng.gaussian_matrix(5, 3, 1.0));
        let h = rng.gaussian_matrix(5, 2, 1.0);
        let c = rng.gaussian_matrix(4, 2, 1.0);
        let p = softmax_rows(&cosine_similarity(&h, &c).unwrap());
        let y = [2, 0, 1, 1, 0];
        let inputs = LossInputs {
            probs: &r,
            labels: &y,
            targets: Some(&r),
            cluster: Some(ClusterInputs {
                latent: &h,
                prototypes: &c,
                attention: &p,
                assignments: &p,
                temperature: 1.0,
                to_encoder: true,
            }),
        };
        let (rep, grads) = combined_loss(Method::Arnet, inputs, NO_CLUSTER).unwrap();
        let ce = cross_entropy(&r, &y).unwrap().0;
        let reg: f64 = r.iter_rows().map(|row| (1.0 - dot(row, row)).ln()).sum::<f64>() / 5.0;
        let entropy = -p.as_slice().iter().map(|v| v * v.ln()).sum::<f64>() / 5.0;
        assert!((rep.total - (ce + 3.0 * reg + entropy)).abs() < 1e-12);
        assert!((rep.total - (rep.ce + 3.0 * rep.reg + rep.cluster)).abs() < 1e-12);
        assert!(grads.d_latent.as_slice().iter().all(|&g| g == 0.0));
        assert!(grads.d_prototypes.unwrap().as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bootstrap_uses_mixed_target() {
        let r = Matrix::from_rows(&[[0.6, 0.4]]).unwrap();
        let y = [1];
        let inputs = LossInputs {
            probs: &r,
            labels: &y,
            targets: None,
            cluster: None,
        };
        let (rep, grads) = combined_loss(Method::Bootstrap, inputs, NO_CLUSTER).unwrap();
        // target = 0.8 * [0, 1] + 0.2 * [0.6, 0.4] = [0.12, 0.88]
        let expected = -(0.12 * 0.6f64.ln() + 0.88 * 0.4f64.ln());
        assert!((rep.total - expected).abs() < 1e-12);
        // 0.8 * 0.6 - 0.2 * 0.6 * (ln 0.6 + H), H = 0.673012 nats
        let h = -(0.6 * 0.6f64.ln() + 0.4 * 0.4f64.ln());
        let g0 = 0.48 - 0.12 * (0.6f64.ln() + h);
        assert!((grads.d_logits[(0, 0)] - g0).abs() < 1e-12);
        assert!((grads.d_logits[(0, 0)] - 0.460538).abs() < 1e-6);
    }

    #[test]
    fn bootstrap_gradient_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let logits = rng.gaussian_matrix(6, 4, 1.0);
        let y = [0, 3, 1, 1, 2, 0];
        let (_, a) = soft_bootstrap(&softmax_rows(&logits), &y, 0.2).unwrap();
        let n = finite_diff_grad(|z| soft_bootstrap(&softmax_rows(z), &y, 0.2).unwrap().0, &logits, 1e-6);
        assert!(relative_error(&a, &n) < 1e-6, "{}", relative_error(&a, &n));
    }

    #[test]
    fn regularized_methods_require_targets() {
        let r = Matrix::filled(1, 2, 0.5);
        let inputs = LossInputs {
            probs: &r,
            labels: &[0],
            targets: None,
            cluster: None,
        };
        assert!(combined_loss(Method::Elr, inputs, NO_CLUSTER).is_err());
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let (b, k, l, d) = (5, 3, 4, 2);
        let mut rng = Rng::new(5);
        let logits = rng.gaussian_matrix(b, k, 1.0);
        let h = rng.gaussian_matrix(b, d, 1.0);
        let c = rng.gaussian_matrix(l, d, 1.0);
        let t = softmax_rows(&rng.gaussian_matrix(b, k, 1.0));
        let q = softmax_rows(&rng.gaussian_matrix(b, l, 2.0));
        let y = [0, 1, 2, 2, 1];
        let tau = 0.7;

        let eval = |z: &Matrix, h: &Matrix, c: &Matrix| {
            let r = softmax_rows(z);
            let p = softmax_rows(&cosine_similarity(h, c).unwrap().scale(1.0 / tau));
            let inputs = LossInputs {
                probs: &r,
                labels: &y,
                targets: Some(&t),
                cluster: Some(ClusterInputs {
                    latent: h,
                    prototypes: c,
                    attention: &p,
                    assignments: &q,
                    temperature: tau,
                    to_encoder: true,
                }),
            };
            combined_loss(Method::Arnet, inputs, NO_CLUSTER).unwrap()
        };
        let (_, grads) = eval(&logits, &h, &c);
        let nz = finite_diff_grad(|z| eval(z, &h, &c).0.total, &logits, 1e-6);
        let nh = finite_diff_grad(|x| eval(&logits, x, &c).0.total, &h, 1e-6);
        let nc = finite_diff_grad(|x| eval(&logits, &h, x).0.total, &c, 1e-6);
        assert!(relative_error(&grads.d_logits, &nz) < 1e-4);
        assert!(relative_error(&grads.d_latent, &nh) < 1e-4);
        assert!(relative_error(grads.d_prototypes.as_ref().unwrap(), &nc) < 1e-4);
    }
}
