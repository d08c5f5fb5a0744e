//! Binary checkpoint of a [`TrainState`].
//!
//! Layout, all integers `u64` and all reals `f64`, little-endian:
//!
//! ```text
//! magic      8 bytes  "PMEMCKPT"
//! version    u32      (currently 1)
//! method     u8       0 ce, 1 bootstrap, 2 elr, 3 arnet
//! dims       input, hidden, latent, classes
//! tensors    w1, b1, w2, b2, wc, bc       each: rows, cols, rows*cols reals
//! memory     temperature, cache_capacity,
//!            prototypes (tensor), labels (tensor),
//!            cache_len, cache_len*latent reals
//! optimizer  7 entries (6 tensors, then prototypes)
//!            each: beta1, beta2, eps, step, first moment, second moment (tensors)
//! targets    u8 flag, then a tensor when the flag is 1
//! log        count, then per record: epoch, total, ce, reg, cluster,
//!            train_acc, test_acc, test_f1, purity, seconds
//! checksum   32 bytes, SHA-256 of every preceding byte
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernel::{AdamConfig, AdamState, Matrix};
use crate::memory::Memory;
use crate::model::{Dims, ModelParams};
use crate::objective::Method;
use crate::trainer::{EpochRecord, TrainLog, TrainState};

pub const MAGIC: &[u8; 8] = b"PMEMCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

fn method_code(m: Method) -> u8 {
    match m {
        Method::Ce => 0,
        Method::Bootstrap => 1,
        Method::Elr => 2,
        Method::Arnet => 3,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn matrix(&mut self, m: &Matrix) {
        self.usize(m.rows());
        self.usize(m.cols());
        m.as_slice().iter().for_each(|&v| self.f64(v));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Data("checkpoint size field overflows".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Data("checkpoint tensor too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.usize()?;
        let cols = self.usize()?;
        let data = self.reals(rows.checked_mul(cols).ok_or_else(|| Error::Data("checkpoint tensor too large".into()))?)?;
        Matrix::new(rows, cols, data)
    }
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    w.0.push(method_code(state.method));
    let d = state.params.dims();
    for v in [d.input, d.hidden, d.latent, d.classes] {
        w.usize(v);
    }
    for t in state.params.tensors() {
        w.matrix(t);
    }
    let m = &state.memory;
    w.f64(m.temperature);
    w.usize(m.cache_capacity());
    w.matrix(&m.prototypes);
    w.matrix(&m.labels);
    w.usize(m.cache_len());
    for row in m.cache_rows() {
        row.iter().for_each(|&v| w.f64(v));
    }
    for opt in &state.optimizer {
        w.f64(opt.config.beta1);
        w.f64(opt.config.beta2);
        w.f64(opt.config.eps);
        w.u64(opt.step);
        w.matrix(&opt.first_moment);
        w.matrix(&opt.second_moment);
    }
    match &state.elr_targets {
        Some(t) => {
            w.0.push(1);
            w.matrix(t);
        }
        None => w.0.push(0),
    }
    w.usize(state.log.records.len());
    for r in &state.log.records {
        w.usize(r.epoch);
        for v in [r.total, r.ce, r.reg, r.cluster, r.train_acc, r.test_acc, r.test_f1, r.purity, r.seconds] {
            w.f64(v);
        }
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let header = MAGIC.len() + 4;
    if bytes.len() < header + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Data("not a checkpoint file".into()));
    }
    let found = u32::from_le_bytes(bytes[MAGIC.len()..header].try_into().expect("4 bytes"));
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum("stored SHA-256 does not match the file contents".into()));
    }

    let mut r = Reader { bytes: body, pos: header };
    let method = match r.u8()? {
        0 => Method::Ce,
        1 => Method::Bootstrap,
        2 => Method::Elr,
        3 => Method::Arnet,
        other => return Err(Error::Data(format!("unknown method code {other}"))),
    };
    let dims = Dims {
        input: r.usize()?,
        hidden: r.usize()?,
        latent: r.usize()?,
        classes: r.usize()?,
    };
    let mut params = ModelParams::zeros(dims);
    for t in params.tensors_mut() {
        let m = r.matrix()?;
        t.same_shape(&m, "checkpoint tensor")?;
        *t = m;
    }
    let temperature = r.f64()?;
    let cache_capacity = r.usize()?;
    let prototypes = r.matrix()?;
    let labels = r.matrix()?;
    let cache_len = r.usize()?;
    let cache = (0..cache_len)
        .map(|_| r.reals(prototypes.cols()))
        .collect::<Result<Vec<_>>>()?;
    let memory = Memory::from_parts(prototypes, labels, cache, cache_capacity, temperature)?;
    if memory.latent_dim() != dims.latent || memory.classes() != dims.classes {
        return Err(Error::shape(
            "checkpoint memory",
            format!("latent {} / classes {}", dims.latent, dims.classes),
            format!("latent {} / classes {}", memory.latent_dim(), memory.classes()),
        ));
    }
    let mut optimizer = Vec::with_capacity(7);
    for _ in 0..7 {
        let config = AdamConfig {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let step = r.u64()?;
        let first_moment = r.matrix()?;
        let second_moment = r.matrix()?;
        first_moment.same_shape(&second_moment, "checkpoint optimizer")?;
        optimizer.push(AdamState {
            config,
            first_moment,
            second_moment,
            step,
        });
    }
    let elr_targets = match r.u8()? {
        0 => None,
        1 => Some(r.matrix()?),
        other => return Err(Error::Data(format!("bad targets flag {other}"))),
    };
    let count = r.usize()?;
    let mut records = Vec::new();
    for _ in 0..count {
        let epoch = r.usize()?;
        let v = r.reals(9)?;
        records.push(EpochRecord {
            epoch,
            total: v[0],
            ce: v[1],
            reg: v[2],
            cluster: v[3],
            train_acc: v[4],
            test_acc: v[5],
            test_f1: v[6],
            purity: v[7],
            seconds: v[8],
        });
    }
    if r.pos != body.len() {
        return Err(Error::Data(format!("{} trailing bytes in checkpoint", body.len() - r.pos)));
    }
    Ok(TrainState {
        method,
        params,
        memory,
        optimizer,
        elr_targets,
        log: TrainLog { records },
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    std::fs::write(path, encode(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_blobs, inject_symmetric, split};
    use crate::kernel::Rng;
    use crate::trainer::{NoObserver, TrainConfig, Trainer};

    fn trained(method: Method, epochs: usize) -> (TrainConfig, crate::datagen::NoisyDataset, TrainState) {
        let mut rng = Rng::new(11);
        let ds = gen_blobs(&mut rng, 120, 3, 2, 9.0).unwrap();
        let ds = split(&ds, &[0.75, 0.25], &mut rng).unwrap();
        let ds = inject_symmetric(&ds, 0.3, false, &mut rng).unwrap();
        let cfg = TrainConfig {
            method,
            slots: 6,
            epochs,
            batch_size: 25,
            lr: 5e-3,
            cache_capacity: 40,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(&cfg, &ds).unwrap();
        t.run(&mut NoObserver).unwrap();
        let state = t.into_state();
        (cfg, ds, state)
    }

    #[test]
    fn round_trip_is_exact() {
        for method in Method::ALL {
            let (_, _, state) = trained(method, 2);
            let back = decode(&encode(&state)).unwrap();
            assert_eq!(back, state, "{method}");
            assert_eq!(encode(&back), encode(&state));
        }
    }

    #[test]
    fn resume_from_file_equals_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let (cfg, ds, state) = trained(Method::Arnet, 2);
        save_checkpoint(&state, &path).unwrap();
        let cfg3 = TrainConfig { epochs: 3, ..cfg };
        let mut resumed = Trainer::resume(&cfg3, &ds, load_checkpoint(&path).unwrap()).unwrap();
        resumed.run(&mut NoObserver).unwrap();
        let (_, _, full) = trained(Method::Arnet, 3);
        assert_eq!(resumed.into_state(), full);
    }

    #[test]
    fn corruption_is_detected() {
        let (_, _, state) = trained(Method::Ce, 1);
        let mut bytes = encode(&state);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Checksum(_))));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let (_, _, state) = trained(Method::Ce, 1);
        let mut bytes = encode(&state);
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Version { found: 7, expected: 1 })));
        assert!(matches!(decode(b"garbage"), Err(Error::Data(_))));
    }

    #[test]
    fn mismatched_dims_rejected_on_resume() {
        let (cfg, ds, state) = trained(Method::Arnet, 1);
        let wider = TrainConfig { hidden_dim: cfg.hidden_dim + 1, ..cfg };
        assert!(matches!(Trainer::resume(&wider, &ds, state), Err(Error::Shape { .. })));
    }
}
