//! Datasets with clean and noisy labels: synthetic generators, label-noise
//! injection, stratified splitting, minibatching and CSV storage.
//!
//! Noise injectors only ever touch rows tagged [`Split::Train`]; validation
//! and test rows keep their clean labels.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernel::{softmax_rows, Matrix, Rng};
use crate::kvfile;
use crate::memory::csv_err;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> char {
        match self {
            Split::Train => 't',
            Split::Val => 'v',
            Split::Test => 'e',
        }
    }

    fn from_code(c: char) -> Option<Self> {
        match c {
            't' => Some(Split::Train),
            'v' => Some(Split::Val),
            'e' => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config("split", format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKind {
    None,
    Symmetric,
    Agent,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Agent => "agent",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseKind::None),
            "symmetric" => Ok(NoiseKind::Symmetric),
            "agent" => Ok(NoiseKind::Agent),
            _ => Err(Error::config("noise", format!("unknown noise kind `{s}` (expected none, symmetric or agent)"))),
        }
    }
}

/// How the noisy labels were produced.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub epsilon: f64,
    /// Flip exactly `floor(epsilon * n_train)` rows instead of sampling.
    pub exact_count: bool,
    pub agent_clean_fraction: f64,
    pub agent_budget: usize,
    /// Agreement of the agent's relabeling with the clean training labels.
    pub agent_accuracy: Option<f64>,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::None,
            epsilon: 0.0,
            exact_count: false,
            agent_clean_fraction: 0.0,
            agent_budget: 0,
            agent_accuracy: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyDataset {
    pub x: Matrix,
    pub y_clean: Vec<usize>,
    pub y_noisy: Vec<usize>,
    pub classes: usize,
    pub noise: NoiseSpec,
    pub split: Vec<Split>,
    /// Seed of the generator stream, 0 for loaded data.
    pub seed: u64,
}

impl NoisyDataset {
    pub fn new(x: Matrix, y_clean: Vec<usize>, classes: usize, seed: u64) -> Result<Self> {
        if y_clean.len() != x.rows() {
            return Err(Error::shape("NoisyDataset::new", x.rows(), y_clean.len()));
        }
        if let Some(&y) = y_clean.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {y} out of range for {classes} classes")));
        }
        let n = x.rows();
        Ok(Self {
            x,
            y_noisy: y_clean.clone(),
            y_clean,
            classes,
            noise: NoiseSpec::default(),
            split: vec![Split::Train; n],
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn train_rows(&self) -> Vec<usize> {
        self.rows_in(Split::Train)
    }

    /// Fraction of training rows whose noisy label equals the clean one.
    pub fn noisy_agreement(&self) -> f64 {
        let rows = self.train_rows();
        if rows.is_empty() {
            return 0.0;
        }
        let agree = rows.iter().filter(|&&i| self.y_clean[i] == self.y_noisy[i]).count();
        agree as f64 / rows.len() as f64
    }

    pub fn class_counts(&self, rows: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &i in rows {
            counts[self.y_clean[i]] += 1;
        }
        counts
    }
}

fn check_size(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::config("classes", "must be at least 1"));
    }
    if n < k {
        return Err(Error::config("n", format!("need at least one row per class ({n} < {k})")));
    }
    Ok(())
}

/// `K` Gaussian blobs with covariance `I / separation`. Means sit on the
/// unit circle in the first two coordinates (on a line when `d_x = 1`).
/// Row `i` belongs to class `i mod K`.
pub fn gen_blobs(rng: &mut Rng, n: usize, k: usize, d_x: usize, separation: f64) -> Result<NoisyDataset> {
    check_size(n, k)?;
    if d_x == 0 {
        return Err(Error::config("input_dim", "must be at least 1"));
    }
    if !(separation > 0.0) {
        return Err(Error::config("separation", format!("must be positive, got {separation}")));
    }
    let sd = separation.sqrt().recip();
    let mean = |c: usize| -> Vec<f64> {
        let mut m = vec![0.0; d_x];
        if d_x == 1 {
            m[0] = if k == 1 { 0.0 } else { 2.0 * c as f64 / (k - 1) as f64 - 1.0 };
        } else {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
            m[0] = angle.cos();
            m[1] = angle.sin();
        }
        m
    };
    let mut data = Vec::with_capacity(n * d_x);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for mu in mean(c) {
            data.push(mu + sd * rng.normal());
        }
        labels.push(c);
    }
    NoisyDataset::new(Matrix::new(n, d_x, data)?, labels, k, rng.seed())
}

/// `K` concentric rings in the first two coordinates; class `c` has radius
/// `c + 1` plus Gaussian radial jitter with standard deviation `noise_sd`.
/// Coordinates beyond the second are label-independent standard normal
/// nuisance features.
pub fn gen_rings(rng: &mut Rng, n: usize, k: usize, d_x: usize, noise_sd: f64) -> Result<NoisyDataset> {
    check_size(n, k)?;
    if d_x < 2 {
        return Err(Error::config("input_dim", format!("rings need at least 2 dimensions, got {d_x}")));
    }
    if !(noise_sd >= 0.0) {
        return Err(Error::config("ring_noise", format!("must be non-negative, got {noise_sd}")));
    }
    let mut data = Vec::with_capacity(d_x * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        let angle = 2.0 * std::f64::consts::PI * rng.uniform();
        let radius = (c + 1) as f64 + noise_sd * rng.normal();
        data.push(radius * angle.cos());
        data.push(radius * angle.sin());
        for _ in 2..d_x {
            data.push(rng.normal());
        }
        labels.push(c);
    }
    NoisyDataset::new(Matrix::new(n, d_x, data)?, labels, k, rng.seed())
}

fn flip_label(y: usize, k: usize, rng: &mut Rng) -> usize {
    let j = rng.below(k - 1);
    if j >= y {
        j + 1
    } else {
        j
    }
}

/// Symmetric noise: each training row is flipped with probability `epsilon`
/// to a uniformly chosen different class. With `exact_count`, exactly
/// `floor(epsilon * n_train)` rows are flipped.
pub fn inject_symmetric(ds: &NoisyDataset, epsilon: f64, exact_count: bool, rng: &mut Rng) -> Result<NoisyDataset> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::config("epsilon", format!("must lie in [0, 1], got {epsilon}")));
    }
    let mut out = ds.clone();
    out.y_noisy = ds.y_clean.clone();
    let train = ds.train_rows();
    if ds.classes > 1 {
        if exact_count {
            let count = (epsilon * train.len() as f64).floor() as usize;
            let mut order = train.clone();
            rng.shuffle(&mut order);
            for &i in &order[..count] {
                out.y_noisy[i] = flip_label(ds.y_clean[i], ds.classes, rng);
            }
        } else {
            for &i in &train {
                if rng.uniform() < epsilon {
                    out.y_noisy[i] = flip_label(ds.y_clean[i], ds.classes, rng);
                }
            }
        }
    }
    out.noise = NoiseSpec {
        kind: NoiseKind::Symmetric,
        epsilon,
        exact_count,
        seed: rng.seed(),
        ..NoiseSpec::default()
    };
    Ok(out)
}

/// Multinomial logistic regression trained by full-batch gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticRegression {
    /// `(d_x + 1) x K`; the last row is the bias.
    pub weights: Matrix,
}

impl LogisticRegression {
    pub fn fit(x: &Matrix, y: &[usize], classes: usize, epochs: usize, lr: f64) -> Result<Self> {
        let (n, d) = x.shape();
        let xb = with_bias(x)?;
        let mut weights = Matrix::zeros(d + 1, classes);
        for _ in 0..epochs {
            let mut err = softmax_rows(&xb.matmul(&weights)?);
            for (i, &yi) in y.iter().enumerate() {
                err[(i, yi)] -= 1.0;
            }
            let grad = xb.t_matmul(&err)?;
            weights.axpy(-lr / n as f64, &grad)?;
        }
        Ok(Self { weights })
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(with_bias(x)?.matmul(&self.weights)?.argmax_rows())
    }

    pub fn accuracy(&self, x: &Matrix, y: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        Ok(pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64)
    }
}

fn with_bias(x: &Matrix) -> Result<Matrix> {
    let (n, d) = x.shape();
    let mut data = Vec::with_capacity(n * (d + 1));
    for row in x.iter_rows() {
        data.extend_from_slice(row);
        data.push(1.0);
    }
    Matrix::new(n, d + 1, data)
}

pub const AGENT_LEARNING_RATE: f64 = 0.5;
const AGENT_RETRIES: usize = 5;

/// Agent noise: a logistic classifier fit on a `clean_fraction` subsample of
/// the training rows for `budget` epochs relabels every training row with its
/// argmax prediction.
pub fn inject_agent(ds: &NoisyDataset, clean_fraction: f64, budget: usize, rng: &mut Rng) -> Result<NoisyDataset> {
    if !(clean_fraction > 0.0 && clean_fraction < 1.0) {
        return Err(Error::config("agent_clean_fraction", format!("must lie in (0, 1), got {clean_fraction}")));
    }
    if budget == 0 {
        return Err(Error::config("agent_budget", "must be at least 1"));
    }
    let train = ds.train_rows();
    if train.is_empty() {
        return Err(Error::Data("no training rows to relabel".into()));
    }
    let take = ((clean_fraction * train.len() as f64).round() as usize).clamp(1, train.len());
    let base_seed = rng.seed();
    for attempt in 0..=AGENT_RETRIES {
        let mut draw = if attempt == 0 { rng.clone() } else { Rng::derived(base_seed, &[0xa9e7, attempt as u64]) };
        let mut order = train.clone();
        draw.shuffle(&mut order);
        let sample = &order[..take];
        if ds.class_counts(sample).contains(&0) {
            log::warn!("agent subsample (attempt {attempt}) misses a class; redrawing");
            continue;
        }
        let xs = ds.x.select_rows(sample)?;
        let ys: Vec<usize> = sample.iter().map(|&i| ds.y_clean[i]).collect();
        let agent = LogisticRegression::fit(&xs, &ys, ds.classes, budget, AGENT_LEARNING_RATE)?;

        let xt = ds.x.select_rows(&train)?;
        let pred = agent.predict(&xt)?;
        let mut out = ds.clone();
        out.y_noisy = ds.y_clean.clone();
        let mut agree = 0usize;
        for (&i, &p) in train.iter().zip(&pred) {
            out.y_noisy[i] = p;
            agree += usize::from(p == ds.y_clean[i]);
        }
        out.noise = NoiseSpec {
            kind: NoiseKind::Agent,
            agent_clean_fraction: clean_fraction,
            agent_budget: budget,
            agent_accuracy: Some(agree as f64 / train.len() as f64),
            seed: base_seed,
            ..NoiseSpec::default()
        };
        return Ok(out);
    }
    Err(Error::Data(format!(
        "agent subsample of {take} rows missed a class in {} attempts",
        AGENT_RETRIES + 1
    )))
}

/// Stratified split by clean class. Two fractions give train/test, three give
/// train/val/test.
pub fn split(ds: &NoisyDataset, fractions: &[f64], rng: &mut Rng) -> Result<NoisyDataset> {
    let tags: &[Split] = match fractions.len() {
        1 => &[Split::Train],
        2 => &[Split::Train, Split::Test],
        3 => &[Split::Train, Split::Val, Split::Test],
        n => return Err(Error::config("split", format!("expected 1 to 3 fractions, got {n}"))),
    };
    if fractions.iter().any(|&f| !(f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("split", format!("fractions must be positive and sum to 1, got {fractions:?}")));
    }
    let mut out = ds.clone();
    for class in 0..ds.classes {
        let mut rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.y_clean[i] == class).collect();
        if rows.len() < fractions.len() {
            return Err(Error::Data(format!(
                "class {class} has {} row(s), fewer than the {} splits",
                rows.len(),
                fractions.len()
            )));
        }
        rng.shuffle(&mut rows);
        let n = rows.len() as f64;
        let mut start = 0;
        let mut cumulative = 0.0;
        for (s, (&f, &tag)) in fractions.iter().zip(tags).enumerate() {
            cumulative += f;
            let end = if s + 1 == fractions.len() {
                rows.len()
            } else {
                ((cumulative * n).round() as usize).clamp(start, rows.len())
            };
            for &i in &rows[start..end] {
                out.split[i] = tag;
            }
            start = end;
        }
    }
    Ok(out)
}

/// Training-row minibatches for one epoch: a permutation seeded by
/// `(seed, epoch)`, chunked, with the final short batch kept.
pub fn batches(ds: &NoisyDataset, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be at least 1"));
    }
    let mut rows = ds.train_rows();
    Rng::derived(seed, &[0xba7c, epoch as u64]).shuffle(&mut rows);
    Ok(rows.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Path of the metadata sidecar next to a dataset CSV.
pub fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta")
}

fn encode_splits(split: &[Split]) -> String {
    let mut runs: Vec<(char, usize)> = Vec::new();
    for s in split {
        match runs.last_mut() {
            Some((c, n)) if *c == s.code() => *n += 1,
            _ => runs.push((s.code(), 1)),
        }
    }
    runs.iter().map(|(c, n)| format!("{c}{n}")).collect::<Vec<_>>().join(",")
}

fn decode_splits(text: &str) -> Option<Vec<Split>> {
    let mut out = Vec::new();
    for run in text.split(',').map(str::trim).filter(|r| !r.is_empty()) {
        let mut chars = run.chars();
        let tag = Split::from_code(chars.next()?)?;
        let count: usize = chars.as_str().parse().ok()?;
        out.extend(std::iter::repeat_n(tag, count));
    }
    Some(out)
}

/// Writes `f_0..f_{d-1},y_clean,y_noisy` rows and the `.meta` sidecar.
pub fn save_csv(ds: &NoisyDataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header: Vec<String> = (0..ds.input_dim()).map(|j| format!("f_{j}")).collect();
    header.push("y_clean".into());
    header.push("y_noisy".into());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.x.row(i).iter().map(|v| format!("{v:.6}")).collect();
        rec.push(ds.y_clean[i].to_string());
        rec.push(ds.y_noisy[i].to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;

    let n = &ds.noise;
    let accuracy = n.agent_accuracy.map_or_else(|| "none".to_string(), |a| format!("{a:.6}"));
    let meta = format!(
        "n = {}\ninput_dim = {}\nclasses = {}\nseed = {}\nnoise_kind = {}\nnoise_epsilon = {:.6}\n\
         noise_exact_count = {}\nnoise_seed = {}\nagent_clean_fraction = {:.6}\nagent_budget = {}\n\
         agent_accuracy = {accuracy}\nsplit = {}\n",
        ds.len(),
        ds.input_dim(),
        ds.classes,
        ds.seed,
        n.kind,
        n.epsilon,
        n.exact_count,
        n.seed,
        n.agent_clean_fraction,
        n.agent_budget,
        encode_splits(&ds.split),
    );
    let mp = meta_path(path);
    fs::write(&mp, meta).map_err(|e| Error::io(mp, e))
}

/// Reads a dataset CSV and, when present, its `.meta` sidecar. Without a
/// sidecar every row is a training row and `K` is the largest label plus one.
pub fn load_csv(path: &Path) -> Result<NoisyDataset> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(parse_err(1, "empty file (missing header)".into())),
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
    };
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let d = names.iter().take_while(|n| n.starts_with("f_")).count();
    if d == 0 {
        return Err(parse_err(1, "missing column `f_0`".into()));
    }
    for (j, name) in names.iter().take(d).enumerate() {
        if *name != format!("f_{j}") {
            return Err(parse_err(1, format!("expected column `f_{j}`, found `{name}`")));
        }
    }
    for (offset, want) in ["y_clean", "y_noisy"].iter().enumerate() {
        match names.get(d + offset) {
            Some(n) if n == want => {}
            _ => return Err(parse_err(1, format!("missing column `{want}`"))),
        }
    }
    if names.len() != d + 2 {
        return Err(parse_err(1, format!("unexpected column `{}`", names[d + 2])));
    }

    let mut data = Vec::new();
    let (mut y_clean, mut y_noisy) = (Vec::new(), Vec::new());
    for (idx, rec) in records.enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != d + 2 {
            return Err(parse_err(line, format!("expected {} fields, found {}", d + 2, rec.len())));
        }
        for (j, field) in rec.iter().take(d).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("invalid number `{field}` in column `f_{j}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite value in column `f_{j}`")));
            }
            data.push(v);
        }
        for (field, (name, dest)) in rec.iter().skip(d).zip([("y_clean", &mut y_clean), ("y_noisy", &mut y_noisy)]) {
            let y: usize = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("invalid label `{field}` in column `{name}`")))?;
            dest.push(y);
        }
    }
    if y_clean.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }
    let n = y_clean.len();
    let x = Matrix::new(n, d, data)?;

    let mp = meta_path(path);
    let (classes, seed, noise, split) = if mp.exists() {
        read_meta(&mp, n, d)?
    } else {
        let k = y_clean.iter().chain(&y_noisy).max().map_or(1, |m| m + 1);
        (k, 0, NoiseSpec::default(), vec![Split::Train; n])
    };
    if let Some(&y) = y_clean.iter().chain(&y_noisy).find(|&&y| y >= classes) {
        return Err(Error::Data(format!("label {y} out of range for {classes} classes in {}", path.display())));
    }
    Ok(NoisyDataset {
        x,
        y_clean,
        y_noisy,
        classes,
        noise,
        split,
        seed,
    })
}

fn read_meta(path: &Path, n: usize, d: usize) -> Result<(usize, u64, NoiseSpec, Vec<Split>)> {
    let entries = kvfile::read(path)?;
    let f = kvfile::Fields::new(&entries, path);
    let mismatch = |key: &str, want: usize, got: usize| Error::Data(format!("{}: {key} = {got} but the CSV has {want}", path.display()));
    let meta_n: usize = f.require("n")?;
    if meta_n != n {
        return Err(mismatch("n", n, meta_n));
    }
    let meta_d: usize = f.require("input_dim")?;
    if meta_d != d {
        return Err(mismatch("input_dim", d, meta_d));
    }
    let classes: usize = f.require("classes")?;
    let accuracy = match f.raw("agent_accuracy").map(|e| e.value.as_str()) {
        None | Some("none") => None,
        Some(_) => f.get::<f64>("agent_accuracy")?,
    };
    let noise = NoiseSpec {
        kind: f.get("noise_kind")?.unwrap_or(NoiseKind::None),
        epsilon: f.get("noise_epsilon")?.unwrap_or(0.0),
        exact_count: f.get("noise_exact_count")?.unwrap_or(false),
        agent_clean_fraction: f.get("agent_clean_fraction")?.unwrap_or(0.0),
        agent_budget: f.get("agent_budget")?.unwrap_or(0),
        agent_accuracy: accuracy,
        seed: f.get("noise_seed")?.unwrap_or(0),
    };
    let split = match f.raw("split") {
        None => vec![Split::Train; n],
        Some(e) => decode_splits(&e.value)
            .filter(|s| s.len() == n)
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: e.line,
                reason: format!("split runs do not describe {n} rows"),
            })?,
    };
    Ok((classes, f.get("seed")?.unwrap_or(0), noise, split))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rings(n: usize, seed: u64) -> NoisyDataset {
        gen_rings(&mut Rng::new(seed), n, 2, 2, 0.1).unwrap()
    }

    #[test]
    fn blobs_are_balanced_and_seeded() {
        let ds = gen_blobs(&mut Rng::new(1), 100, 2, 3, 4.0).unwrap();
        assert_eq!(ds.class_counts(&(0..100).collect::<Vec<_>>()), vec![50, 50]);
        assert_eq!(ds, gen_blobs(&mut Rng::new(1), 100, 2, 3, 4.0).unwrap());
        let odd = gen_blobs(&mut Rng::new(1), 101, 3, 2, 4.0).unwrap();
        let counts = odd.class_counts(&(0..101).collect::<Vec<_>>());
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }

    #[test]
    fn well_separated_blobs_are_linearly_separable() {
        let ds = gen_blobs(&mut Rng::new(2), 600, 3, 4, 400.0).unwrap();
        let lr = LogisticRegression::fit(&ds.x, &ds.y_clean, 3, 300, 0.5).unwrap();
        assert!(lr.accuracy(&ds.x, &ds.y_clean).unwrap() > 0.99);
    }

    #[test]
    fn rings_without_jitter_sit_on_radius() {
        let ds = gen_rings(&mut Rng::new(3), 90, 3, 2, 0.0).unwrap();
        for i in 0..ds.len() {
            let r = ds.x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((r - (ds.y_clean[i] + 1) as f64).abs() < 1e-12);
        }
        let counts = ds.class_counts(&(0..90).collect::<Vec<_>>());
        assert_eq!(counts, vec![30, 30, 30]);
    }

    #[test]
    fn symmetric_noise_limits() {
        let ds = rings(200, 4);
        let clean = inject_symmetric(&ds, 0.0, false, &mut Rng::new(1)).unwrap();
        assert_eq!(clean.y_noisy, clean.y_clean);
        let all = inject_symmetric(&ds, 1.0, false, &mut Rng::new(1)).unwrap();
        assert!(all.y_noisy.iter().zip(&all.y_clean).all(|(n, c)| n == &(1 - c)));
        assert!(inject_symmetric(&ds, 1.5, false, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn symmetric_noise_exact_count() {
        let ds = split(&rings(1000, 5), &[0.8, 0.2], &mut Rng::new(2)).unwrap();
        let noisy = inject_symmetric(&ds, 0.25, true, &mut Rng::new(3)).unwrap();
        let flipped = (0..ds.len()).filter(|&i| noisy.y_noisy[i] != noisy.y_clean[i]).count();
        assert_eq!(flipped, 200);
    }

    #[test]
    fn noise_never_touches_held_out_rows() {
        let ds = split(&gen_blobs(&mut Rng::new(6), 300, 3, 2, 1.0).unwrap(), &[0.6, 0.2, 0.2], &mut Rng::new(7)).unwrap();
        let sym = inject_symmetric(&ds, 0.9, false, &mut Rng::new(8)).unwrap();
        let agent = inject_agent(&ds, 0.2, 1, &mut Rng::new(9)).unwrap();
        for noisy in [&sym, &agent] {
            for i in 0..ds.len() {
                if ds.split[i] != Split::Train {
                    assert_eq!(noisy.y_noisy[i], noisy.y_clean[i]);
                }
            }
        }
    }

    #[test]
    fn strong_agent_recovers_clean_labels() {
        let ds = gen_blobs(&mut Rng::new(10), 600, 3, 2, 200.0).unwrap();
        let noisy = inject_agent(&ds, 0.3, 500, &mut Rng::new(11)).unwrap();
        assert!(noisy.noise.agent_accuracy.unwrap() > 0.99);
        assert_eq!(noisy, inject_agent(&ds, 0.3, 500, &mut Rng::new(11)).unwrap());
    }

    #[test]
    fn weak_agent_on_rings_makes_structured_errors() {
        let ds = rings(600, 12);
        let noisy = inject_agent(&ds, 0.2, 1, &mut Rng::new(13)).unwrap();
        let acc = noisy.noise.agent_accuracy.unwrap();
        assert!(acc < 0.75, "agent accuracy {acc}");
    }

    #[test]
    fn agent_fails_on_degenerate_subsample() {
        // One row of class 1 in 1000; a 0.1% subsample almost never sees it.
        let x = Matrix::zeros(1000, 1);
        let mut y = vec![0; 1000];
        y[999] = 1;
        let ds = NoisyDataset::new(x, y, 2, 0).unwrap();
        assert!(matches!(inject_agent(&ds, 0.001, 1, &mut Rng::new(1)), Err(Error::Data(_))));
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let ds = gen_blobs(&mut Rng::new(14), 100, 2, 2, 1.0).unwrap();
        let s = split(&ds, &[0.8, 0.2], &mut Rng::new(15)).unwrap();
        assert_eq!(s.train_rows().len(), 80);
        assert_eq!(s.rows_in(Split::Test).len(), 20);
        let per_class = s.class_counts(&s.train_rows());
        assert!(per_class.iter().all(|&c| (c as i64 - 40).abs() <= 1));
        assert_eq!(s, split(&ds, &[0.8, 0.2], &mut Rng::new(15)).unwrap());
        assert!(split(&ds, &[0.8, 0.3], &mut Rng::new(1)).is_err());
        let tiny = gen_blobs(&mut Rng::new(1), 4, 2, 2, 1.0).unwrap();
        assert!(matches!(split(&tiny, &[0.4, 0.3, 0.3], &mut Rng::new(1)), Err(Error::Data(_))));
    }

    #[test]
    fn batches_cover_training_rows() {
        let ds = gen_blobs(&mut Rng::new(16), 10, 2, 2, 1.0).unwrap();
        let b = batches(&ds, 4, 7, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let other = batches(&ds, 4, 7, 1).unwrap().concat();
        assert_ne!(other, b.concat());
        assert_eq!(batches(&ds, 4, 7, 0).unwrap(), b);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let ds = split(&rings(50, 17), &[0.6, 0.2, 0.2], &mut Rng::new(1)).unwrap();
        let ds = inject_symmetric(&ds, 0.3, false, &mut Rng::new(2)).unwrap();
        save_csv(&ds, &path).unwrap();
        let back = load_csv(&path).unwrap();
        assert!(back.x.max_abs_diff(&ds.x) < 1e-6);
        assert_eq!(back.y_clean, ds.y_clean);
        assert_eq!(back.y_noisy, ds.y_noisy);
        assert_eq!(back.split, ds.split);
        assert_eq!(back.noise.kind, NoiseKind::Symmetric);
        assert_eq!(back.classes, 2);
    }

    #[test]
    fn csv_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { line: 1, .. })));

        fs::write(&path, "f_0,f_1,y_clean\n1,2,0\n").unwrap();
        match load_csv(&path) {
            Err(Error::Parse { reason, .. }) => assert!(reason.contains("y_noisy"), "{reason}"),
            other => panic!("{other:?}"),
        }

        fs::write(&path, "f_0,y_clean,y_noisy\n1.0,0,0\nx,1,1\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Parse { line: 3, .. })));

        fs::write(&path, "f_0,y_clean,y_noisy\n1.0,0,0\n2.0,1,5\n").unwrap();
        fs::write(meta_path(&path), "n = 2\ninput_dim = 1\nclasses = 2\n").unwrap();
        assert!(matches!(load_csv(&path), Err(Error::Data(_))));
    }
}
