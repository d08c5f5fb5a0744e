//! The external prototype memory: `L` unit-norm prototype vectors with one
//! soft label each, plus a FIFO cache of recent latents.
//!
//! Reading is softmax attention over sample/prototype cosine similarities.
//! Writing has two halves: prototypes move by gradient descent on the
//! clustering loss against entropic optimal-transport targets, and prototype
//! labels follow a momentum average of the predictions assigned to them.

use std::collections::VecDeque;
use std::io::Write;

use crate::error::{Error, Result};
use crate::kernel::{
    cosine_similarity, cosine_similarity_backward, l2_normalize_rows, orthogonal_init, row_norms,
    softmax_rows, Matrix, Rng, NORM_FLOOR,
};

pub const DEFAULT_CACHE_CAPACITY: usize = 1024;

/// Columns whose assigned mass falls below this keep their label unchanged.
const MIN_COLUMN_MASS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Memory {
    /// `C`, `L x d`, unit rows.
    pub prototypes: Matrix,
    /// `G`, `L x K`, probability rows.
    pub labels: Matrix,
    pub temperature: f64,
    cache: VecDeque<Vec<f64>>,
    cache_capacity: usize,
}

/// Result of reading the memory for a batch.
#[derive(Clone, Debug)]
pub struct MemoryRead {
    /// `S`, cosine similarities `B x L`.
    pub similarity: Matrix,
    /// `P = softmax(S / tau)`.
    pub attention: Matrix,
    /// `V = P G`.
    pub retrieved: Matrix,
    /// `T = (1 - lambda) R + lambda V`, treated as a constant target.
    pub targets: Matrix,
}

/// Output of the Sinkhorn solve over `B'` samples and `L` prototypes.
#[derive(Clone, Debug)]
pub struct Transport {
    /// Scaled plan with row mass `1/B'` and column mass `1/L`.
    pub plan: Matrix,
    /// `plan` with each row rescaled to sum to one.
    pub assignments: Matrix,
}

impl Memory {
    /// Orthogonally initialized prototypes and uniform labels.
    pub fn new(
        rng: &mut Rng,
        slots: usize,
        latent_dim: usize,
        classes: usize,
        cache_capacity: usize,
        temperature: f64,
    ) -> Result<Self> {
        if slots == 0 {
            return Err(Error::config("slots", "must be at least 1"));
        }
        if latent_dim == 0 || classes == 0 {
            return Err(Error::config("latent_dim", "memory dimensions must be positive"));
        }
        check_temperature(temperature)?;
        Ok(Self {
            prototypes: orthogonal_init(rng, slots, latent_dim),
            labels: Matrix::filled(slots, classes, 1.0 / classes as f64),
            temperature,
            cache: VecDeque::new(),
            cache_capacity,
        })
    }

    pub fn from_parts(
        prototypes: Matrix,
        labels: Matrix,
        cache: Vec<Vec<f64>>,
        cache_capacity: usize,
        temperature: f64,
    ) -> Result<Self> {
        if prototypes.rows() != labels.rows() {
            return Err(Error::shape(
                "Memory::from_parts",
                format!("{} label rows", prototypes.rows()),
                labels.rows(),
            ));
        }
        if let Some(bad) = cache.iter().find(|r| r.len() != prototypes.cols()) {
            return Err(Error::shape("Memory::from_parts", prototypes.cols(), bad.len()));
        }
        if cache.len() > cache_capacity {
            return Err(Error::Data(format!(
                "cache holds {} rows but capacity is {cache_capacity}",
                cache.len()
            )));
        }
        check_temperature(temperature)?;
        Ok(Self {
            prototypes,
            labels,
            temperature,
            cache: cache.into(),
            cache_capacity,
        })
    }

    pub fn slots(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn classes(&self) -> usize {
        self.labels.cols()
    }

    pub fn cache_capacity(&self) -> usize {
        self.cache_capacity
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    pub fn cache_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.cache.iter().map(Vec::as_slice)
    }

    /// Attention read: returns `P`, `V` and the pseudo labels `T`.
    pub fn read(&self, latent: &Matrix, probs: &Matrix, lambda: f64) -> Result<MemoryRead> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::config("lambda", format!("must lie in [0, 1], got {lambda}")));
        }
        if probs.cols() != self.classes() || probs.rows() != latent.rows() {
            return Err(Error::shape(
                "Memory::read",
                format!("{}x{}", latent.rows(), self.classes()),
                format!("{}x{}", probs.rows(), probs.cols()),
            ));
        }
        let similarity = cosine_similarity(latent, &self.prototypes)?;
        let attention = softmax_rows(&similarity.scale(1.0 / self.temperature));
        let retrieved = attention.matmul(&self.labels)?;
        let targets = if lambda == 0.0 {
            probs.clone()
        } else {
            probs.zip_map(&retrieved, |r, v| (1.0 - lambda) * r + lambda * v)?
        };
        Ok(MemoryRead {
            similarity,
            attention,
            retrieved,
            targets,
        })
    }

    /// Appends rows to the feature cache, evicting the oldest beyond capacity.
    pub fn cache_push(&mut self, latent: &Matrix) -> Result<()> {
        if latent.cols() != self.latent_dim() {
            return Err(Error::shape(
                "Memory::cache_push",
                format!("Bx{}", self.latent_dim()),
                format!("{}x{}", latent.rows(), latent.cols()),
            ));
        }
        for row in latent.iter_rows() {
            self.cache.push_back(row.to_vec());
        }
        while self.cache.len() > self.cache_capacity {
            self.cache.pop_front();
        }
        Ok(())
    }

    /// The cached rows stacked on top of `batch`.
    pub fn with_cache(&self, batch: &Matrix) -> Result<Matrix> {
        if self.cache.is_empty() {
            return Ok(batch.clone());
        }
        let cached: Vec<&[f64]> = self.cache_rows().collect();
        Matrix::from_rows(&cached)?.vstack(batch)
    }

    /// Entropic OT targets for `latent_all` (rows already L2-normalized)
    /// against the prototypes.
    pub fn sinkhorn_targets(&self, latent_all: &Matrix, xi: f64, iters: usize) -> Result<Transport> {
        let scores = latent_all.matmul_t(&self.prototypes)?;
        sinkhorn(&scores, xi, iters)
    }

    /// Momentum update of the prototype labels from batch predictions.
    ///
    /// Each column of `assignments` is normalized by its mass before
    /// aggregation so every label row stays on the simplex.
    pub fn write_labels(&mut self, assignments: &Matrix, probs: &Matrix, beta: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config("beta", format!("must lie in [0, 1], got {beta}")));
        }
        if assignments.cols() != self.slots() || assignments.rows() != probs.rows() {
            return Err(Error::shape(
                "Memory::write_labels",
                format!("{}x{}", probs.rows(), self.slots()),
                format!("{}x{}", assignments.rows(), assignments.cols()),
            ));
        }
        if probs.cols() != self.classes() {
            return Err(Error::shape("Memory::write_labels", self.classes(), probs.cols()));
        }
        let mass = assignments.column_sums();
        let aggregated = assignments.t_matmul(probs)?;
        for j in 0..self.slots() {
            let m = mass.as_slice()[j];
            if m < MIN_COLUMN_MASS {
                continue;
            }
            let agg = aggregated.row(j);
            let g = self.labels.row_mut(j);
            for (gk, &ak) in g.iter_mut().zip(agg) {
                *gk = beta * *gk + (1.0 - beta) * ak / m;
            }
            let total: f64 = g.iter().sum();
            g.iter_mut().for_each(|v| *v /= total);
        }
        Ok(())
    }

    /// Rescales prototypes to unit norm. Collapsed rows are replaced by a
    /// random unit direction; their indices are returned.
    pub fn renormalize_prototypes(&mut self, rng: &mut Rng) -> Vec<usize> {
        let (mut normed, degenerate) = l2_normalize_rows(&self.prototypes);
        for &r in &degenerate {
            loop {
                let fresh: Vec<f64> = (0..normed.cols()).map(|_| rng.normal()).collect();
                let n = fresh.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > NORM_FLOOR {
                    normed.row_mut(r).iter_mut().zip(&fresh).for_each(|(o, v)| *o = v / n);
                    break;
                }
            }
            log::warn!("prototype slot {r} collapsed; re-seeded with a random direction");
        }
        self.prototypes = normed;
        degenerate
    }

    /// Largest deviation of a label row sum from 1 and of a prototype norm
    /// from 1.
    pub fn conservation_error(&self) -> (f64, f64) {
        let label = self
            .labels
            .row_sums()
            .into_iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max);
        let norm = row_norms(&self.prototypes)
            .into_iter()
            .map(|n| (n - 1.0).abs())
            .fold(0.0, f64::max);
        (label, norm)
    }

    /// CSV snapshot: `slot,dim_0..dim_{d-1},label_0..label_{K-1}`.
    pub fn write_snapshot<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["slot".to_string()];
        header.extend((0..self.latent_dim()).map(|i| format!("dim_{i}")));
        header.extend((0..self.classes()).map(|k| format!("label_{k}")));
        w.write_record(&header).map_err(csv_err)?;
        for j in 0..self.slots() {
            let mut rec = vec![j.to_string()];
            rec.extend(self.prototypes.row(j).iter().map(|v| format!("{v:.6}")));
            rec.extend(self.labels.row(j).iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io("memory snapshot", e))?;
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::config("temperature", format!("must be positive, got {t}")));
    }
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv write failed: {e}"))
}

/// Sinkhorn scaling of `exp(scores / xi)` toward row mass `1/B'` and column
/// mass `1/L`. Each round scales columns first and rows last, so row
/// marginals are exact on return.
pub fn sinkhorn(scores: &Matrix, xi: f64, iters: usize) -> Result<Transport> {
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(Error::config("xi", format!("must be positive, got {xi}")));
    }
    if iters == 0 {
        return Err(Error::config("sinkhorn_iters", "must be at least 1"));
    }
    if !scores.is_finite() {
        return Err(Error::Numeric("non-finite transport scores".into()));
    }
    let (n, l) = scores.shape();
    let max = scores.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // The shift by `max` is a constant factor absorbed by the scalings.
    let mut plan = scores.map(|s| ((s - max) / xi).exp());
    let total: f64 = plan.as_slice().iter().sum();
    plan = plan.scale(1.0 / total);

    let row_mass = 1.0 / n as f64;
    let col_mass = 1.0 / l as f64;
    for _ in 0..iters {
        let cols = plan.column_sums();
        for i in 0..n {
            for (v, &c) in plan.row_mut(i).iter_mut().zip(cols.as_slice()) {
                *v *= col_mass / c;
            }
        }
        for i in 0..n {
            let row = plan.row_mut(i);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v *= row_mass / s);
        }
    }
    if !plan.is_finite() {
        return Err(Error::Numeric(format!(
            "Sinkhorn produced non-finite values (xi = {xi}); scores too extreme"
        )));
    }
    let mut assignments = plan.clone();
    for i in 0..n {
        let row = assignments.row_mut(i);
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(Transport { plan, assignments })
}

/// Cross-entropy of the soft assignments `P` against the targets `Q`,
/// averaged over rows, and its gradient w.r.t. the pre-softmax scores,
/// `(P - Q) / B`.
pub fn clustering_loss(attention: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    attention.same_shape(targets, "clustering_loss")?;
    if let Some(&p) = attention.as_slice().iter().find(|&&p| !(p > 0.0)) {
        return Err(Error::Numeric(format!(
            "assignment probability {p} is not strictly positive"
        )));
    }
    let b = attention.rows() as f64;
    let loss = -attention
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(p, q)| q * p.ln())
        .sum::<f64>()
        / b;
    let grad = attention.zip_map(targets, |p, q| (p - q) / b)?;
    Ok((loss, grad))
}

/// Carries the gradient w.r.t. the assignment scores `S / tau` back to the
/// raw latents and the prototypes.
pub fn clustering_backward(
    latent: &Matrix,
    prototypes: &Matrix,
    d_scores: &Matrix,
    temperature: f64,
) -> Result<(Matrix, Matrix)> {
    let d_sim = d_scores.scale(1.0 / temperature);
    cosine_similarity_backward(latent, prototypes, &d_sim)
}
