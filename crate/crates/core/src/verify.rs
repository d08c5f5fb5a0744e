//! Self-checks runnable from the command line: finite-difference gradient
//! checks of the full objective and numerical checks of the Sinkhorn solver.

use crate::error::Result;
use crate::kernel::{cosine_similarity, finite_diff_grad, l2_normalize_rows, relative_error, softmax_rows, Matrix, Rng};
use crate::memory::{sinkhorn, Transport};
use crate::model::{backward, forward, Dims, ModelParams, TENSOR_NAMES};
use crate::objective::{combined_loss, ClusterInputs, LossInputs, LossReport, LossWeights, Method, ObjectiveGrads};

pub const GRAD_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;

/// One randomized gradient-check instance.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub batch: usize,
    pub classes: usize,
    pub slots: usize,
    pub latent: usize,
    /// Relative error per encoder/classifier tensor, then the prototypes.
    pub errors: [f64; 7],
}

impl GradCase {
    pub fn worst(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < GRAD_TOLERANCE
    }

    pub fn describe(&self) -> String {
        let names = TENSOR_NAMES.iter().chain(std::iter::once(&"prototypes"));
        let parts: Vec<String> = names.zip(&self.errors).map(|(n, e)| format!("{n}={e:.2e}")).collect();
        format!(
            "B={} K={} L={} d={}: {}",
            self.batch,
            self.classes,
            self.slots,
            self.latent,
            parts.join(" ")
        )
    }
}

fn random_simplex_rows(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    softmax_rows(&rng.gaussian_matrix(rows, cols, 1.0))
}

struct Instance {
    x: Matrix,
    labels: Vec<usize>,
    targets: Matrix,
    assignments: Matrix,
    temperature: f64,
    weights: LossWeights,
}

impl Instance {
    fn loss(&self, params: &ModelParams, prototypes: &Matrix) -> Result<(LossReport, ObjectiveGrads, crate::model::ForwardTrace)> {
        let trace = forward(params, &self.x)?;
        let sim = cosine_similarity(&trace.latent, prototypes)?;
        let attention = softmax_rows(&sim.scale(1.0 / self.temperature));
        let (report, grads) = combined_loss(
            Method::Arnet,
            LossInputs {
                probs: &trace.probs,
                labels: &self.labels,
                targets: Some(&self.targets),
                cluster: Some(ClusterInputs {
                    latent: &trace.latent,
                    prototypes,
                    attention: &attention,
                    assignments: &self.assignments,
                    temperature: self.temperature,
                    to_encoder: true,
                }),
            },
            self.weights,
        )?;
        Ok((report, grads, trace))
    }

    fn value(&self, params: &ModelParams, prototypes: &Matrix) -> f64 {
        self.loss(params, prototypes).map_or(f64::NAN, |(r, _, _)| r.total)
    }
}

/// Compares the analytic gradient of the full objective (cross-entropy,
/// weighted agreement term and clustering term, end to end through the
/// encoder) with central differences on `n` random instances with
/// `B <= 8`, `K <= 4`, `L <= 6` and `d <= 4`.
pub fn gradient_check(n: usize, seed: u64) -> Result<Vec<GradCase>> {
    (0..n).map(|i| gradient_case(&mut Rng::derived(seed, &[i as u64]))).collect()
}

fn gradient_case(rng: &mut Rng) -> Result<GradCase> {
    let batch = 2 + rng.below(7);
    let classes = 2 + rng.below(3);
    let slots = 2 + rng.below(5);
    let latent = 2 + rng.below(3);
    let dims = Dims {
        input: 2 + rng.below(3),
        hidden: 2 + rng.below(4),
        latent,
        classes,
    };
    let params = ModelParams::init(rng, dims)?;
    let (prototypes, _) = l2_normalize_rows(&rng.gaussian_matrix(slots, latent, 1.0));
    let inst = Instance {
        x: rng.gaussian_matrix(batch, dims.input, 1.0),
        labels: (0..batch).map(|_| rng.below(classes)).collect(),
        targets: random_simplex_rows(rng, batch, classes),
        assignments: random_simplex_rows(rng, batch, slots),
        temperature: 0.5 + rng.uniform(),
        weights: LossWeights {
            alpha: 3.0,
            bootstrap_weight: 0.2,
        },
    };

    let (_, grads, trace) = inst.loss(&params, &prototypes)?;
    let analytic = backward(&params, &trace, &grads.d_logits, &grads.d_latent)?;
    let mut errors = [0.0; 7];
    for t in 0..6 {
        let numeric = finite_diff_grad(
            |probe| {
                let mut p = params.clone();
                *p.tensors_mut()[t] = probe.clone();
                inst.value(&p, &prototypes)
            },
            params.tensors()[t],
            FD_STEP,
        );
        errors[t] = relative_error(analytic.tensors()[t], &numeric);
    }
    let numeric_c = finite_diff_grad(|c| inst.value(&params, c), &prototypes, FD_STEP);
    let d_c = grads.d_prototypes.unwrap_or_else(|| Matrix::zeros(slots, latent));
    errors[6] = relative_error(&d_c, &numeric_c);
    Ok(GradCase {
        batch,
        classes,
        slots,
        latent,
        errors,
    })
}

/// Entropic OT objective `<Q, S> - xi * sum Q log Q`.
pub fn ot_objective(plan: &Matrix, scores: &Matrix, xi: f64) -> f64 {
    plan.as_slice()
        .iter()
        .zip(scores.as_slice())
        .map(|(&q, &s)| q * s - if q > 0.0 { xi * q * q.ln() } else { 0.0 })
        .sum()
}

/// Largest deviation of the row sums from `1/B'` and the column sums from `1/L`.
pub fn marginal_error(plan: &Matrix) -> f64 {
    let (n, l) = plan.shape();
    let rows = plan.row_sums().iter().map(|s| (s - 1.0 / n as f64).abs()).fold(0.0, f64::max);
    let cols = plan
        .column_sums()
        .as_slice()
        .iter()
        .map(|s| (s - 1.0 / l as f64).abs())
        .fold(0.0, f64::max);
    rows.max(cols)
}

/// Distance of `plan` from the closest `diag(u) exp(S / xi) diag(v)`, with
/// `log u`, `log v` fitted by least squares on `log(plan / kernel)`.
pub fn factorization_error(plan: &Matrix, scores: &Matrix, xi: f64) -> f64 {
    let (n, l) = plan.shape();
    let max = scores.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_kernel = scores.map(|s| (s - max) / xi);
    let resid = plan.zip_map(&log_kernel, |q, k| q.ln() - k).expect("same shape");
    if !resid.is_finite() {
        return f64::INFINITY;
    }
    let row_mean: Vec<f64> = resid.row_sums().iter().map(|s| s / l as f64).collect();
    let col_mean: Vec<f64> = resid.column_sums().as_slice().iter().map(|s| s / n as f64).collect();
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..l {
            let fitted = (row_mean[i] + col_mean[j] - grand + log_kernel[(i, j)]).exp();
            worst = worst.max((plan[(i, j)] - fitted).abs());
        }
    }
    worst
}

/// A random point of the transportation polytope: a positive random matrix
/// scaled to the uniform marginals.
pub fn random_feasible_plan(rng: &mut Rng, rows: usize, cols: usize) -> Result<Matrix> {
    let seed = rng.gaussian_matrix(rows, cols, 2.0);
    // exp(s / 1) with plenty of rounds converges to machine precision.
    Ok(sinkhorn(&seed, 1.0, 500)?.plan)
}

#[derive(Clone, Debug)]
pub struct SinkhornCase {
    pub rows: usize,
    pub slots: usize,
    pub marginal_error: f64,
    pub factorization_error: f64,
    pub objective: f64,
    /// Best objective over the random feasible plans, and their worst marginal error.
    pub best_random: f64,
    pub random_marginal_error: f64,
}

impl SinkhornCase {
    pub fn passed(&self, tol: f64) -> bool {
        self.marginal_error < tol && self.factorization_error < tol && self.objective >= self.best_random
    }

    pub fn describe(&self) -> String {
        format!(
            "B'={} L={}: marginals {:.2e}, factorization {:.2e}, objective {:.6} vs best random {:.6}",
            self.rows, self.slots, self.marginal_error, self.factorization_error, self.objective, self.best_random
        )
    }
}

/// Scores `H C^T` for unit rows in `dim` dimensions.
pub fn random_unit_scores(rng: &mut Rng, rows: usize, slots: usize, dim: usize) -> Result<Matrix> {
    let (h, _) = l2_normalize_rows(&rng.gaussian_matrix(rows, dim, 1.0));
    let (c, _) = l2_normalize_rows(&rng.gaussian_matrix(slots, dim, 1.0));
    h.matmul_t(&c)
}

/// Runs the solver for `iters` rounds on `n` random instances (`B' <= 6`,
/// `L <= 4`, scores from unit vectors in `dim` dimensions) and compares the
/// plan with `samples` random feasible plans.
pub fn sinkhorn_check(n: usize, seed: u64, dim: usize, xi: f64, iters: usize, samples: usize) -> Result<Vec<SinkhornCase>> {
    (0..n)
        .map(|i| {
            let mut rng = Rng::derived(seed, &[i as u64]);
            let rows = 2 + rng.below(5);
            let slots = 2 + rng.below(3);
            let scores = random_unit_scores(&mut rng, rows, slots, dim)?;
            let Transport { plan, .. } = sinkhorn(&scores, xi, iters)?;
            let mut best_random = f64::NEG_INFINITY;
            let mut random_marginal_error = 0.0f64;
            for _ in 0..samples {
                let q = random_feasible_plan(&mut rng, rows, slots)?;
                random_marginal_error = random_marginal_error.max(marginal_error(&q));
                best_random = best_random.max(ot_objective(&q, &scores, xi));
            }
            Ok(SinkhornCase {
                rows,
                slots,
                marginal_error: marginal_error(&plan),
                factorization_error: factorization_error(&plan, &scores, xi),
                objective: ot_objective(&plan, &scores, xi),
                best_random,
                random_marginal_error,
            })
        })
        .collect()
}

/// Plain textbook Sinkhorn on `exp(S / xi)` with `u`, `v` scaling vectors,
/// used as an oracle against the production solver.
pub fn reference_sinkhorn(scores: &Matrix, xi: f64, iters: usize) -> Matrix {
    let (n, l) = scores.shape();
    let kernel = scores.map(|s| (s / xi).exp());
    let (mut u, mut v) = (vec![1.0; n], vec![1.0; l]);
    for _ in 0..iters {
        for (j, vj) in v.iter_mut().enumerate() {
            let s: f64 = (0..n).map(|i| kernel[(i, j)] * u[i]).sum();
            *vj = 1.0 / (l as f64 * s);
        }
        for (i, ui) in u.iter_mut().enumerate() {
            let s: f64 = (0..l).map(|j| kernel[(i, j)] * v[j]).sum();
            *ui = 1.0 / (n as f64 * s);
        }
    }
    let mut plan = kernel;
    for i in 0..n {
        for j in 0..l {
            plan[(i, j)] *= u[i] * v[j];
        }
    }
    plan
}

/// Outcome of the full suite, as run by `--verify`.
#[derive(Clone, Debug)]
pub struct VerifyReport {
    pub gradients: Vec<GradCase>,
    pub sinkhorn: Vec<SinkhornCase>,
    /// Max difference between the solver and [`reference_sinkhorn`] on a
    /// diagonal-dominant 3x3 instance after 10,000 rounds.
    pub oracle_gap: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.gradients.iter().all(GradCase::passed)
            && self.sinkhorn.iter().all(|c| c.passed(1e-6))
            && self.oracle_gap < 1e-9
    }

    pub fn lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for g in &self.gradients {
            out.push(format!("{} gradient {}", if g.passed() { "ok  " } else { "FAIL" }, g.describe()));
        }
        for s in &self.sinkhorn {
            out.push(format!("{} sinkhorn {}", if s.passed(1e-6) { "ok  " } else { "FAIL" }, s.describe()));
        }
        out.push(format!(
            "{} sinkhorn reference oracle gap {:.2e}",
            if self.oracle_gap < 1e-9 { "ok  " } else { "FAIL" },
            self.oracle_gap
        ));
        out
    }
}

pub fn run_suite(seed: u64) -> Result<VerifyReport> {
    let scores = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])?;
    let ours = sinkhorn(&scores.scale(0.25), 0.05, 10_000)?.plan;
    let oracle = reference_sinkhorn(&scores.scale(0.25), 0.05, 10_000);
    Ok(VerifyReport {
        gradients: gradient_check(20, seed)?,
        sinkhorn: sinkhorn_check(10, seed, 16, 0.05, 200, 1000)?,
        oracle_gap: ours.max_abs_diff(&oracle),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_suite_passes() {
        for case in gradient_check(20, 0).unwrap() {
            assert!(case.passed(), "{}", case.describe());
        }
    }

    #[test]
    fn factorization_of_exact_scaling_is_zero() {
        let mut rng = Rng::new(1);
        let scores = rng.gaussian_matrix(4, 3, 0.1);
        let plan = reference_sinkhorn(&scores, 0.5, 50);
        assert!(factorization_error(&plan, &scores, 0.5) < 1e-14);
        let mut bent = plan.clone();
        bent[(0, 0)] *= 1.5;
        assert!(factorization_error(&bent, &scores, 0.5) > 1e-3);
    }

    #[test]
    fn reference_oracle_agrees_with_solver() {
        let mut rng = Rng::new(2);
        let scores = rng.gaussian_matrix(5, 3, 0.2);
        let a = sinkhorn(&scores, 0.5, 400).unwrap().plan;
        let b = reference_sinkhorn(&scores, 0.5, 400);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn random_feasible_plans_are_feasible() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let q = random_feasible_plan(&mut rng, 5, 3).unwrap();
            assert!(marginal_error(&q) < 1e-12);
        }
    }

    #[test]
    fn ot_objective_of_uniform_plan() {
        let scores = Matrix::zeros(2, 2);
        let plan = Matrix::filled(2, 2, 0.25);
        assert!((ot_objective(&plan, &scores, 1.0) - 4f64.ln()).abs() < 1e-12);
    }
}
