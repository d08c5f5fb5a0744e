//! Classification metrics, pseudo-label purity, multi-run aggregation and the
//! benchmark drivers (method x noise grid, memory-slot sweep).

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::datagen::{inject_symmetric, NoisyDataset, Split};
use crate::error::{Error, Result};
use crate::kernel::{derive_seed, Matrix, Rng};
use crate::model::{forward, ModelParams};
use crate::objective::Method;
use crate::trainer::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    /// Precision, recall and F1 are 0 wherever their denominator is 0.
    pub fn from_predictions(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::shape("Metrics::from_predictions", truth.len(), predicted.len()));
        }
        if truth.is_empty() {
            return Err(Error::Data("cannot evaluate an empty set of rows".into()));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= classes || t >= classes {
                return Err(Error::Data(format!("label {} out of range for {classes} classes", p.max(t))));
            }
            confusion[t][p] += 1;
        }
        let diag: usize = (0..classes).map(|k| confusion[k][k]).sum();
        let mut precision = Vec::with_capacity(classes);
        let mut recall = Vec::with_capacity(classes);
        let mut f1 = Vec::with_capacity(classes);
        for k in 0..classes {
            let tp = confusion[k][k];
            let predicted_k: usize = (0..classes).map(|t| confusion[t][k]).sum();
            let actual_k: usize = confusion[k].iter().sum();
            let (p, r) = (ratio(tp, predicted_k), ratio(tp, actual_k));
            precision.push(p);
            recall.push(r);
            f1.push(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 });
        }
        Ok(Self {
            accuracy: ratio(diag, truth.len()),
            macro_f1: f1.iter().sum::<f64>() / classes as f64,
            precision,
            recall,
            f1,
            confusion,
        })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Flat `key = value` report.
    pub fn report(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "rows = {}", self.total());
        let _ = writeln!(out, "accuracy = {:.6}", self.accuracy);
        let _ = writeln!(out, "macro_f1 = {:.6}", self.macro_f1);
        for k in 0..self.f1.len() {
            let _ = writeln!(out, "precision_{k} = {:.6}", self.precision[k]);
            let _ = writeln!(out, "recall_{k} = {:.6}", self.recall[k]);
            let _ = writeln!(out, "f1_{k} = {:.6}", self.f1[k]);
        }
        for (t, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            let _ = writeln!(out, "confusion_{t} = {}", cells.join(","));
        }
        out
    }
}

pub fn predict(params: &ModelParams, x: &Matrix) -> Result<Vec<usize>> {
    Ok(forward(params, x)?.probs.argmax_rows())
}

/// Metrics of the model's argmax predictions against the clean labels of
/// one split.
pub fn evaluate(params: &ModelParams, ds: &NoisyDataset, split: Split) -> Result<Metrics> {
    let rows = ds.rows_in(split);
    if rows.is_empty() {
        return Err(Error::Data(format!("split `{split}` has no rows")));
    }
    let pred = predict(params, &ds.x.select_rows(&rows)?)?;
    let truth: Vec<usize> = rows.iter().map(|&i| ds.y_clean[i]).collect();
    Metrics::from_predictions(&pred, &truth, ds.classes)
}

/// Fraction of rows whose target argmax (lowest index on ties) equals the
/// clean label.
pub fn purity(targets: &Matrix, y_clean: &[usize]) -> Result<f64> {
    if targets.rows() != y_clean.len() {
        return Err(Error::shape("purity", targets.rows(), y_clean.len()));
    }
    let hits = targets.argmax_rows().iter().zip(y_clean).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y_clean.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, sd }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub runs: usize,
    pub accuracy: MeanSd,
    pub macro_f1: MeanSd,
    pub precision: Vec<MeanSd>,
    pub recall: Vec<MeanSd>,
    pub f1: Vec<MeanSd>,
}

pub fn aggregate_runs(runs: &[Metrics]) -> Result<RunSummary> {
    let first = runs.first().ok_or_else(|| Error::Data("no runs to aggregate".into()))?;
    let k = first.f1.len();
    let per_class = |get: fn(&Metrics) -> &Vec<f64>| -> Vec<MeanSd> {
        (0..k)
            .map(|c| MeanSd::of(&runs.iter().map(|m| get(m)[c]).collect::<Vec<_>>()))
            .collect()
    };
    Ok(RunSummary {
        runs: runs.len(),
        accuracy: MeanSd::of(&runs.iter().map(|m| m.accuracy).collect::<Vec<_>>()),
        macro_f1: MeanSd::of(&runs.iter().map(|m| m.macro_f1).collect::<Vec<_>>()),
        precision: per_class(|m| &m.precision),
        recall: per_class(|m| &m.recall),
        f1: per_class(|m| &m.f1),
    })
}

/// Seed of run `run` derived from the base training seed. Shared across
/// methods and slot counts so comparisons are paired.
pub fn run_seed(base: u64, run: usize) -> u64 {
    derive_seed(base, &[0x5eed, run as u64])
}

/// One finished training run inside a benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub test: Metrics,
    /// Final-epoch purity of the method's training targets.
    pub purity: f64,
    /// Agreement of the noisy training labels with the clean ones.
    pub noisy_agreement: f64,
}

fn run_once(cfg: &TrainConfig, ds: &NoisyDataset, seed: u64) -> Result<RunResult> {
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let outcome = train(&cfg, ds)?;
    let purity = outcome.log.records.last().map_or(0.0, |r| r.purity);
    Ok(RunResult {
        seed,
        test: evaluate(&outcome.params, ds, Split::Test)?,
        purity,
        noisy_agreement: ds.noisy_agreement(),
    })
}

#[derive(Clone, Debug)]
pub struct BenchCell {
    pub method: Method,
    pub epsilon: f64,
    /// `Err` holds the first failure message of the cell.
    pub runs: std::result::Result<Vec<RunResult>, String>,
}

impl BenchCell {
    pub fn summary(&self) -> Option<RunSummary> {
        let runs = self.runs.as_ref().ok()?;
        aggregate_runs(&runs.iter().map(|r| r.test.clone()).collect::<Vec<_>>()).ok()
    }

    pub fn purity(&self) -> Option<MeanSd> {
        let runs = self.runs.as_ref().ok()?;
        Some(MeanSd::of(&runs.iter().map(|r| r.purity).collect::<Vec<_>>()))
    }
}

/// Trains every `(method, epsilon)` cell over `n_seeds` runs. `clean` must
/// carry its train/test split; symmetric noise for each epsilon is injected
/// from `noise_seed`, so all methods at one epsilon see the same labels.
pub fn bench_grid(
    cfg: &TrainConfig,
    clean: &NoisyDataset,
    methods: &[Method],
    epsilons: &[f64],
    n_seeds: usize,
    noise_seed: u64,
) -> Result<Vec<BenchCell>> {
    if n_seeds == 0 {
        return Err(Error::config("n_seeds", "must be at least 1"));
    }
    let noisy: Vec<NoisyDataset> = epsilons
        .iter()
        .map(|&eps| inject_symmetric(clean, eps, false, &mut Rng::derived(noise_seed, &[eps.to_bits()])))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize, usize)> = (0..methods.len())
        .flat_map(|m| (0..epsilons.len()).flat_map(move |e| (0..n_seeds).map(move |r| (m, e, r))))
        .collect();
    let results: Vec<Result<RunResult>> = jobs
        .par_iter()
        .map(|&(m, e, r)| {
            let cfg = TrainConfig {
                method: methods[m],
                ..cfg.clone()
            };
            run_once(&cfg, &noisy[e], run_seed(cfg.seed, r))
        })
        .collect();

    let mut cells = Vec::new();
    let mut results = results.into_iter();
    for &method in methods {
        for &epsilon in epsilons {
            let runs: std::result::Result<Vec<RunResult>, String> =
                results.by_ref().take(n_seeds).collect::<Result<Vec<_>>>().map_err(|e| e.to_string());
            if let Err(msg) = &runs {
                log::error!("bench cell {method} @ {epsilon}: {msg}");
            }
            cells.push(BenchCell { method, epsilon, runs });
        }
    }
    Ok(cells)
}

#[derive(Clone, Debug)]
pub struct SlotRow {
    pub slots: usize,
    pub runs: Vec<RunResult>,
    pub summary: RunSummary,
}

/// Trains the configured method once per seed for every slot count.
pub fn slot_sweep(cfg: &TrainConfig, ds: &NoisyDataset, slot_list: &[usize], n_seeds: usize) -> Result<Vec<SlotRow>> {
    if slot_list.is_empty() {
        return Err(Error::config("slot_list", "must name at least one slot count"));
    }
    if n_seeds == 0 {
        return Err(Error::config("n_seeds", "must be at least 1"));
    }
    let jobs: Vec<(usize, usize)> = (0..slot_list.len()).flat_map(|s| (0..n_seeds).map(move |r| (s, r))).collect();
    let results: Vec<Result<RunResult>> = jobs
        .par_iter()
        .map(|&(s, r)| {
            let cfg = TrainConfig {
                slots: slot_list[s],
                ..cfg.clone()
            };
            run_once(&cfg, ds, run_seed(cfg.seed, r))
        })
        .collect();
    let mut results = results.into_iter();
    slot_list
        .iter()
        .map(|&slots| {
            let runs = results.by_ref().take(n_seeds).collect::<Result<Vec<_>>>()?;
            let summary = aggregate_runs(&runs.iter().map(|r| r.test.clone()).collect::<Vec<_>>())?;
            Ok(SlotRow { slots, runs, summary })
        })
        .collect()
}

pub const BENCH_HEADER: &str = "method,epsilon,acc_mean,acc_sd,f1_mean,f1_sd";
pub const SLOT_HEADER: &str = "slots,acc_mean,acc_sd,f1_mean,f1_sd";
pub const RUNS_HEADER: &str = "method,epsilon,slots,seed,accuracy,macro_f1,purity,noisy_agreement";

/// The method x epsilon table; failed cells carry `failed` in every value
/// column.
pub fn bench_table_csv(cells: &[BenchCell]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for cell in cells {
        match cell.summary() {
            Some(s) => {
                let _ = writeln!(
                    out,
                    "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    cell.method, cell.epsilon, s.accuracy.mean, s.accuracy.sd, s.macro_f1.mean, s.macro_f1.sd
                );
            }
            None => {
                let _ = writeln!(out, "{},{:.6},failed,failed,failed,failed", cell.method, cell.epsilon);
            }
        }
    }
    out
}

pub fn slot_table_csv(rows: &[SlotRow]) -> String {
    let mut out = format!("{SLOT_HEADER}\n");
    for row in rows {
        let s = &row.summary;
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6}",
            row.slots, s.accuracy.mean, s.accuracy.sd, s.macro_f1.mean, s.macro_f1.sd
        );
    }
    out
}

/// Per-run detail rows for both benchmark kinds.
pub fn runs_csv(cells: &[BenchCell], slot_rows: &[SlotRow], sweep_method: Method, sweep_epsilon: f64, default_slots: usize) -> String {
    let mut out = format!("{RUNS_HEADER}\n");
    let mut line = |method: Method, eps: f64, slots: usize, r: &RunResult| {
        let _ = writeln!(
            out,
            "{method},{eps:.6},{slots},{},{:.6},{:.6},{:.6},{:.6}",
            r.seed, r.test.accuracy, r.test.macro_f1, r.purity, r.noisy_agreement
        );
    };
    for cell in cells {
        if let Ok(runs) = &cell.runs {
            for r in runs {
                line(cell.method, cell.epsilon, default_slots, r);
            }
        }
    }
    for row in slot_rows {
        for r in &row.runs {
            line(sweep_method, sweep_epsilon, row.slots, r);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 1];
        let m = Metrics::from_predictions(&y, &y, 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.total(), 4);
    }

    #[test]
    fn majority_predictor() {
        let truth: Vec<usize> = (0..100).map(|i| usize::from(i >= 50)).collect();
        let m = Metrics::from_predictions(&[0; 100], &truth, 2).unwrap();
        assert_eq!(m.confusion, vec![vec![50, 0], vec![50, 0]]);
        assert_eq!(m.accuracy, 0.5);
        assert!((m.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.precision[1], 0.0);
    }

    #[test]
    fn random_predictions_near_chance() {
        let mut rng = Rng::new(3);
        let n = 20_000;
        let truth: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
        let m = Metrics::from_predictions(&pred, &truth, 4).unwrap();
        // 99% binomial half-width: 2.576 * sqrt(0.25 * 0.75 / n)
        let half = 2.576 * (0.25f64 * 0.75 / n as f64).sqrt();
        assert!((m.accuracy - 0.25).abs() < half, "{}", m.accuracy);
    }

    #[test]
    fn empty_rows_rejected() {
        assert!(matches!(Metrics::from_predictions(&[], &[], 2), Err(Error::Data(_))));
    }

    #[test]
    fn purity_examples() {
        let y = [0, 2, 1, 1];
        let mut onehot = Matrix::zeros(4, 3);
        for (i, &c) in y.iter().enumerate() {
            onehot[(i, c)] = 1.0;
        }
        assert_eq!(purity(&onehot, &y).unwrap(), 1.0);

        let mut rng = Rng::new(7);
        let n = 30_000;
        let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let jitter = Matrix::filled(n, 3, 1.0 / 3.0).zip_map(&rng.gaussian_matrix(n, 3, 1e-9), |a, b| a + b).unwrap();
        let p = purity(&jitter, &labels).unwrap();
        assert!((p - 1.0 / 3.0).abs() < 0.02, "{p}");
    }

    #[test]
    fn purity_of_noisy_onehots_is_agreement() {
        let clean = [0, 1, 1, 0, 1];
        let noisy = [0, 0, 1, 1, 1];
        let mut t = Matrix::zeros(5, 2);
        for (i, &c) in noisy.iter().enumerate() {
            t[(i, c)] = 1.0;
        }
        assert_eq!(purity(&t, &clean).unwrap(), 0.6);
    }

    #[test]
    fn aggregation() {
        let y = [0, 1];
        let a = Metrics::from_predictions(&[0, 1], &y, 2).unwrap();
        let b = Metrics::from_predictions(&[1, 1], &y, 2).unwrap();
        let single = aggregate_runs(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.accuracy, MeanSd { mean: 1.0, sd: 0.0 });
        let both = aggregate_runs(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(both.accuracy.mean, 0.75);
        assert_eq!(both, aggregate_runs(&[b, a]).unwrap());
        assert!(aggregate_runs(&[]).is_err());
        assert_eq!(MeanSd::of(&[0.4, 0.6]).mean, 0.5);
    }
}
