//! Experiment configuration files: every training, noise and data-generation
//! setting as `key = value` lines, with defaults for omitted keys.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datagen::{gen_blobs, gen_rings, inject_agent, inject_symmetric, load_csv, split, NoiseKind, NoisyDataset};
use crate::error::{Error, Result};
use crate::kernel::Rng;
use crate::kvfile::{self, Fields};
use crate::objective::Method;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    Blobs,
    Rings,
}

impl Generator {
    pub fn as_str(self) -> &'static str {
        match self {
            Generator::Blobs => "blobs",
            Generator::Rings => "rings",
        }
    }
}

impl FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Generator::Blobs),
            "rings" => Ok(Generator::Rings),
            _ => Err(Error::config("generator", format!("unknown generator `{s}` (expected blobs or rings)"))),
        }
    }
}

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("dataset", "", "CSV to load instead of generating data (its sidecar supplies split and noise)"),
    ("generator", "rings", "synthetic generator: blobs | rings"),
    ("n", "4000", "rows to generate"),
    ("classes", "2", "number of classes K"),
    ("input_dim", "2", "input dimension; rings put extra dimensions in standard normal nuisance features"),
    ("separation", "16", "blobs: inverse per-coordinate variance"),
    ("ring_noise", "0.15", "rings: standard deviation of the radial jitter"),
    ("split", "0.75,0.25", "stratified fractions: train[,val],test"),
    ("noise", "symmetric", "label noise on training rows: none | symmetric | agent"),
    ("epsilon", "0.4", "symmetric flip probability"),
    ("exact_count", "false", "flip exactly floor(epsilon * n_train) rows"),
    ("agent_clean_fraction", "0.1", "agent noise: fraction of clean training rows the agent sees"),
    ("agent_budget", "50", "agent noise: gradient-descent epochs of the agent"),
    ("data_seed", "0", "seed for generation, splitting and noise"),
    ("method", "arnet", "training method: ce | bootstrap | elr | arnet"),
    ("lambda", "0.8", "weight of the memory-retrieved label in the pseudo label"),
    ("beta", "0.8", "momentum of the prototype-label update"),
    ("alpha", "3", "weight of the agreement regularizer"),
    ("xi", "0.05", "entropic smoothing of the optimal-transport targets"),
    ("temperature", "1", "softmax temperature of the memory attention"),
    ("slots", "64", "number of memory slots L"),
    ("sinkhorn_iters", "3", "Sinkhorn rounds per iteration"),
    ("cache_capacity", "1024", "latent rows kept for the transport targets"),
    ("lr", "0.0001", "Adam learning rate"),
    ("prototype_lr", "", "Adam learning rate of the prototypes (default: lr)"),
    ("epochs", "50", "training epochs"),
    ("batch_size", "128", "minibatch size"),
    ("seed", "0", "training seed (initialization, batch order)"),
    ("hidden_dim", "32", "encoder hidden width"),
    ("latent_dim", "16", "latent dimension d"),
    ("cluster_loss", "true", "add the clustering term (arnet)"),
    ("cluster_to_encoder", "true", "let the clustering gradient reach the encoder"),
    ("post_update_labels", "false", "write prototype labels from predictions after the update"),
    ("bootstrap_weight", "0.2", "prediction weight of the soft bootstrap target"),
    ("elr_momentum", "0.7", "momentum of the per-sample elr targets"),
    ("log_wall_time", "false", "record epoch wall time in the log (breaks byte-identical logs)"),
    ("methods", "ce,bootstrap,elr,arnet", "bench: methods to compare"),
    ("epsilons", "0.2,0.4", "bench: symmetric noise rates"),
    ("n_seeds", "3", "bench: runs per cell"),
    ("slot_list", "16,32,64,128", "bench: slot counts of the sweep (empty disables it)"),
    ("sweep_epsilon", "0.4", "bench: noise rate of the slot sweep"),
    ("out_dir", "out", "output directory"),
    ("checkpoint", "", "checkpoint path (default: <out_dir>/model.ckpt)"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dataset: Option<PathBuf>,
    pub generator: Generator,
    pub n: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub separation: f64,
    pub ring_noise: f64,
    pub split: Vec<f64>,
    pub noise: NoiseKind,
    pub epsilon: f64,
    pub exact_count: bool,
    pub agent_clean_fraction: f64,
    pub agent_budget: usize,
    pub data_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub epsilons: Vec<f64>,
    pub n_seeds: usize,
    pub slot_list: Vec<usize>,
    pub sweep_epsilon: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
}

fn default_of(key: &str) -> &'static str {
    KEYS.iter().find(|(k, _, _)| *k == key).map(|(_, d, _)| *d).expect("documented key")
}

fn parse_default<T: FromStr>(key: &str) -> T
where
    T::Err: std::fmt::Debug,
{
    default_of(key).parse().expect("documented default parses")
}

fn list_default<T: FromStr>(key: &str) -> Vec<T>
where
    T::Err: std::fmt::Debug,
{
    let d = default_of(key);
    if d.is_empty() {
        return Vec::new();
    }
    d.split(',').map(|s| s.trim().parse().expect("documented default parses")).collect()
}

impl Default for RunConfig {
    fn default() -> Self {
        let text: String = KEYS
            .iter()
            .filter(|(_, d, _)| !d.is_empty())
            .map(|(k, d, _)| format!("{k} = {d}\n"))
            .collect();
        Self::parse(&text, Path::new("<defaults>")).expect("defaults parse")
    }
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let entries = kvfile::parse(text, path)?;
        let f = Fields::new(&entries, path);
        let known: Vec<&str> = KEYS.iter().map(|(k, _, _)| *k).collect();
        f.reject_unknown(&known)?;

        fn get<T: FromStr>(f: &Fields<'_>, key: &str) -> Result<T>
        where
            T::Err: std::fmt::Display + std::fmt::Debug,
        {
            Ok(f.get(key)?.unwrap_or_else(|| parse_default(key)))
        }
        fn list<T: FromStr>(f: &Fields<'_>, key: &str) -> Result<Vec<T>>
        where
            T::Err: std::fmt::Display + std::fmt::Debug,
        {
            match f.raw(key) {
                Some(e) if e.value.is_empty() => Ok(Vec::new()),
                Some(_) => Ok(f.list(key)?.unwrap_or_default()),
                None => Ok(list_default(key)),
            }
        }
        fn opt_path(f: &Fields<'_>, key: &str) -> Option<PathBuf> {
            f.raw(key).filter(|e| !e.value.is_empty()).map(|e| PathBuf::from(&e.value))
        }
        fn method(f: &Fields<'_>, key: &str, raw: &str) -> Result<Method> {
            raw.parse::<Method>().map_err(|e| Error::Parse {
                path: f.path().to_path_buf(),
                line: f.raw(key).map_or(0, |e| e.line),
                reason: e.to_string(),
            })
        }

        let data = DataConfig {
            dataset: opt_path(&f, "dataset"),
            generator: get(&f, "generator")?,
            n: get(&f, "n")?,
            classes: get(&f, "classes")?,
            input_dim: get(&f, "input_dim")?,
            separation: get(&f, "separation")?,
            ring_noise: get(&f, "ring_noise")?,
            split: list(&f, "split")?,
            noise: get(&f, "noise")?,
            epsilon: get(&f, "epsilon")?,
            exact_count: get(&f, "exact_count")?,
            agent_clean_fraction: get(&f, "agent_clean_fraction")?,
            agent_budget: get(&f, "agent_budget")?,
            data_seed: get(&f, "data_seed")?,
        };
        let method_raw = f.raw("method").map_or(default_of("method"), |e| e.value.as_str());
        let train = TrainConfig {
            method: method(&f, "method", method_raw)?,
            lambda: get(&f, "lambda")?,
            beta: get(&f, "beta")?,
            alpha: get(&f, "alpha")?,
            xi: get(&f, "xi")?,
            temperature: get(&f, "temperature")?,
            slots: get(&f, "slots")?,
            sinkhorn_iters: get(&f, "sinkhorn_iters")?,
            cache_capacity: get(&f, "cache_capacity")?,
            lr: get(&f, "lr")?,
            prototype_lr: match f.raw("prototype_lr") {
                Some(e) if !e.value.is_empty() => f.get("prototype_lr")?,
                _ => None,
            },
            epochs: get(&f, "epochs")?,
            batch_size: get(&f, "batch_size")?,
            seed: get(&f, "seed")?,
            hidden_dim: get(&f, "hidden_dim")?,
            latent_dim: get(&f, "latent_dim")?,
            cluster_loss: get(&f, "cluster_loss")?,
            cluster_to_encoder: get(&f, "cluster_to_encoder")?,
            post_update_labels: get(&f, "post_update_labels")?,
            bootstrap_weight: get(&f, "bootstrap_weight")?,
            elr_momentum: get(&f, "elr_momentum")?,
            log_wall_time: get(&f, "log_wall_time")?,
        };
        let methods = match f.raw("methods") {
            Some(e) => e
                .value
                .split(',')
                .map(|m| method(&f, "methods", m.trim()))
                .collect::<Result<Vec<_>>>()?,
            None => list_default("methods"),
        };
        let bench = BenchConfig {
            methods,
            epsilons: list(&f, "epsilons")?,
            n_seeds: get(&f, "n_seeds")?,
            slot_list: list(&f, "slot_list")?,
            sweep_epsilon: get(&f, "sweep_epsilon")?,
        };
        let cfg = Self {
            data,
            train,
            bench,
            out_dir: opt_path(&f, "out_dir").unwrap_or_else(|| PathBuf::from(default_of("out_dir"))),
            checkpoint: opt_path(&f, "checkpoint"),
        };
        cfg.validate().map_err(|e| match (&e, e_key(&e).and_then(|k| f.raw(k))) {
            (Error::Config { reason, key }, Some(entry)) => Error::Parse {
                path: path_of(&f),
                line: entry.line,
                reason: format!("invalid `{key}`: {reason}"),
            },
            _ => e,
        })?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.epsilon) {
            return Err(Error::config("epsilon", format!("must lie in [0, 1], got {}", d.epsilon)));
        }
        if !(d.agent_clean_fraction > 0.0 && d.agent_clean_fraction <= 1.0) {
            return Err(Error::config(
                "agent_clean_fraction",
                format!("must lie in (0, 1], got {}", d.agent_clean_fraction),
            ));
        }
        if d.split.is_empty() {
            return Err(Error::config("split", "needs at least one fraction"));
        }
        if let Some(&e) = self.bench.epsilons.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(Error::config("epsilons", format!("must lie in [0, 1], got {e}")));
        }
        if !(0.0..=1.0).contains(&self.bench.sweep_epsilon) {
            return Err(Error::config("sweep_epsilon", format!("must lie in [0, 1], got {}", self.bench.sweep_epsilon)));
        }
        if self.bench.n_seeds == 0 {
            return Err(Error::config("n_seeds", "must be at least 1"));
        }
        if self.bench.slot_list.contains(&0) {
            return Err(Error::config("slot_list", "slot counts must be at least 1"));
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }

    /// The effective configuration with every default resolved; parsing it
    /// back yields an equal config.
    pub fn to_text(&self) -> String {
        fn join<T: ToString>(v: &[T]) -> String {
            v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
        }
        let d = &self.data;
        let t = &self.train;
        let b = &self.bench;
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values: Vec<(&str, String)> = vec![
            ("dataset", opt_path(&d.dataset)),
            ("generator", d.generator.as_str().into()),
            ("n", d.n.to_string()),
            ("classes", d.classes.to_string()),
            ("input_dim", d.input_dim.to_string()),
            ("separation", d.separation.to_string()),
            ("ring_noise", d.ring_noise.to_string()),
            ("split", join(&d.split)),
            ("noise", d.noise.as_str().into()),
            ("epsilon", d.epsilon.to_string()),
            ("exact_count", d.exact_count.to_string()),
            ("agent_clean_fraction", d.agent_clean_fraction.to_string()),
            ("agent_budget", d.agent_budget.to_string()),
            ("data_seed", d.data_seed.to_string()),
            ("method", t.method.to_string()),
            ("lambda", t.lambda.to_string()),
            ("beta", t.beta.to_string()),
            ("alpha", t.alpha.to_string()),
            ("xi", t.xi.to_string()),
            ("temperature", t.temperature.to_string()),
            ("slots", t.slots.to_string()),
            ("sinkhorn_iters", t.sinkhorn_iters.to_string()),
            ("cache_capacity", t.cache_capacity.to_string()),
            ("lr", t.lr.to_string()),
            ("prototype_lr", t.prototype_lr.map(|v| v.to_string()).unwrap_or_default()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("seed", t.seed.to_string()),
            ("hidden_dim", t.hidden_dim.to_string()),
            ("latent_dim", t.latent_dim.to_string()),
            ("cluster_loss", t.cluster_loss.to_string()),
            ("cluster_to_encoder", t.cluster_to_encoder.to_string()),
            ("post_update_labels", t.post_update_labels.to_string()),
            ("bootstrap_weight", t.bootstrap_weight.to_string()),
            ("elr_momentum", t.elr_momentum.to_string()),
            ("log_wall_time", t.log_wall_time.to_string()),
            ("methods", join(&b.methods)),
            ("epsilons", join(&b.epsilons)),
            ("n_seeds", b.n_seeds.to_string()),
            ("slot_list", join(&b.slot_list)),
            ("sweep_epsilon", b.sweep_epsilon.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("checkpoint", opt_path(&self.checkpoint)),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::new();
        for (k, v) in values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Loads or generates the data and splits it, without label noise.
    pub fn clean_dataset(&self) -> Result<NoisyDataset> {
        let d = &self.data;
        if let Some(p) = &d.dataset {
            let mut ds = load_csv(p)?;
            ds.y_noisy = ds.y_clean.clone();
            ds.noise = Default::default();
            return Ok(ds);
        }
        let mut rng = Rng::derived(d.data_seed, &[1]);
        let raw = match d.generator {
            Generator::Blobs => gen_blobs(&mut rng, d.n, d.classes, d.input_dim, d.separation)?,
            Generator::Rings => gen_rings(&mut rng, d.n, d.classes, d.input_dim, d.ring_noise)?,
        };
        split(&raw, &d.split, &mut Rng::derived(d.data_seed, &[2]))
    }

    /// Seed of the noise injected at rate `epsilon`.
    pub fn noise_seed(&self) -> u64 {
        crate::kernel::derive_seed(self.data.data_seed, &[3])
    }

    /// The training dataset: loaded as stored, or generated with the
    /// configured noise.
    pub fn dataset(&self) -> Result<NoisyDataset> {
        let d = &self.data;
        if let Some(p) = &d.dataset {
            return load_csv(p);
        }
        let clean = self.clean_dataset()?;
        match d.noise {
            NoiseKind::None => Ok(clean),
            NoiseKind::Symmetric => inject_symmetric(
                &clean,
                d.epsilon,
                d.exact_count,
                &mut Rng::derived(self.noise_seed(), &[d.epsilon.to_bits()]),
            ),
            NoiseKind::Agent => inject_agent(
                &clean,
                d.agent_clean_fraction,
                d.agent_budget,
                &mut Rng::derived(self.noise_seed(), &[u64::MAX]),
            ),
        }
    }
}

fn e_key(e: &Error) -> Option<&str> {
    match e {
        Error::Config { key, .. } => Some(key.as_str()),
        _ => None,
    }
}

fn path_of(f: &Fields<'_>) -> PathBuf {
    f.path().to_path_buf()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documentation() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.data.generator, Generator::Rings);
        assert_eq!(cfg.bench.slot_list, vec![16, 32, 64, 128]);
        assert_eq!(cfg.checkpoint_path(), PathBuf::from("out/model.ckpt"));
    }

    #[test]
    fn echo_round_trips() {
        let text = "method = elr\nlr = 0.003\nepsilons = 0.1, 0.3\nslot_list =\nprototype_lr = 0.5\n";
        let cfg = RunConfig::parse(text, Path::new("c")).unwrap();
        assert!(cfg.bench.slot_list.is_empty());
        assert_eq!(cfg.train.prototype_lr, Some(0.5));
        let again = RunConfig::parse(&cfg.to_text(), Path::new("echo")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse("n = 10\n\nlamda = 0.5\n", Path::new("c")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn invalid_value_names_key_and_line() {
        let err = RunConfig::parse("# noise\nepsilon = 1.5\n", Path::new("c")).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(msg.contains("epsilon"), "{msg}");
        let err = RunConfig::parse("method = sgd\n", Path::new("c")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn datasets_are_deterministic() {
        let cfg = RunConfig::parse("n = 200\nepsilon = 0.3\n", Path::new("c")).unwrap();
        let a = cfg.dataset().unwrap();
        assert_eq!(a, cfg.dataset().unwrap());
        assert_eq!(a.y_clean, cfg.clean_dataset().unwrap().y_clean);
        assert!(a.noisy_agreement() < 1.0);
    }
}
