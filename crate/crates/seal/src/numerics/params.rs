//! Named trainable parameters with persistent gradient and Adam slots, and
//! the checkpoint file format (binary values plus a JSON manifest).

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::scalar::Scalar;
use super::tape::{BoundParams, Tape};
use super::tensor::Tensor;

const CKPT_MAGIC: &[u8; 8] = b"SEALCKPT";
const CKPT_VERSION: u32 = 1;

/// Weight initialization scheme for one parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Scaled uniform on [-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))].
    Glorot { fan_in: usize, fan_out: usize },
    Uniform { limit: f64 },
    Zeros,
    Ones,
}

struct Param<F> {
    name: String,
    value: Tensor<F>,
    grad: Tensor<F>,
    adam_m: Tensor<F>,
    adam_v: Tensor<F>,
}

/// Insertion-ordered map of named parameter tensors.
///
/// Each parameter's initial values are drawn from an RNG seeded by
/// `(store seed, parameter name)`, so two models sharing a seed produce
/// bit-identical values for every parameter name they have in common, no
/// matter what extra parameters either one registers.
pub struct ParameterStore<F: Scalar> {
    seed: u64,
    entries: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new(seed: u64) -> Self {
        ParameterStore { seed, entries: Vec::new(), index: HashMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|p| p.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn value(&self, name: &str) -> &Tensor<F> {
        &self.entries[self.index[name]].value
    }

    pub fn grad(&self, name: &str) -> &Tensor<F> {
        &self.entries[self.index[name]].grad
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Registers a parameter. Names are unique and shapes immutable.
    pub fn create(&mut self, name: &str, shape: &[usize], init: Init) {
        assert!(!self.index.contains_key(name), "duplicate parameter name {name:?}");
        let mut rng = self.rng_for(name);
        let numel: usize = shape.iter().product();
        let data: Vec<F> = match init {
            Init::Glorot { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                (0..numel).map(|_| F::of(dist.sample(&mut rng))).collect()
            }
            Init::Uniform { limit } => {
                let dist = Uniform::new_inclusive(-limit, limit);
                (0..numel).map(|_| F::of(dist.sample(&mut rng))).collect()
            }
            Init::Zeros => vec![F::zero(); numel],
            Init::Ones => vec![F::one(); numel],
        };
        let value = Tensor::new(shape.to_vec(), data);
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            value,
            grad: Tensor::zeros(shape),
            adam_m: Tensor::zeros(shape),
            adam_v: Tensor::zeros(shape),
        });
    }

    fn rng_for(&self, name: &str) -> ChaCha20Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha20Rng::from_seed(key)
    }

    /// Creates one leaf per parameter on `tape`, in store order.
    pub fn bind<'s, 't>(&'s self, tape: &'t Tape<F>) -> BoundParams<'s, 't, F> {
        let vars = self.entries.iter().map(|p| tape.leaf(p.value.clone())).collect();
        BoundParams { store: self, vars }
    }

    /// Adds `scale`-weighted extracted gradients (see
    /// [`BoundParams::extract`]) into the persistent gradient slots.
    pub fn accumulate(&mut self, extracted: &[Option<Tensor<F>>], scale: f64) {
        assert_eq!(extracted.len(), self.entries.len());
        let s = F::of(scale);
        for (param, g) in self.entries.iter_mut().zip(extracted) {
            if let Some(g) = g {
                for (acc, &gv) in param.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += gv * s;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            for g in p.grad.data_mut() {
                *g = F::zero();
            }
        }
    }

    /// One Adam update from the accumulated gradients. `step` is 1-based and
    /// drives bias correction.
    pub fn adam_step(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64, step: u64) {
        let (b1, b2, epsf) = (F::of(beta1), F::of(beta2), F::of(eps));
        let one = F::one();
        let corr1 = F::of(1.0 - beta1.powi(step as i32));
        let corr2 = F::of(1.0 - beta2.powi(step as i32));
        let lrf = F::of(lr);
        for p in &mut self.entries {
            for i in 0..p.value.numel() {
                let g = p.grad.data()[i];
                let m = b1 * p.adam_m.data()[i] + (one - b1) * g;
                let v = b2 * p.adam_v.data()[i] + (one - b2) * g * g;
                p.adam_m.data_mut()[i] = m;
                p.adam_v.data_mut()[i] = v;
                let mhat = m / corr1;
                let vhat = v / corr2;
                let upd = lrf * mhat / (vhat.sqrt() + epsf);
                p.value.data_mut()[i] = p.value.data()[i] - upd;
            }
            p.value.assert_finite(&format!("adam_step({})", p.name));
        }
    }

    /// Overwrites parameter values from `(name, tensor)` pairs. Every store
    /// entry must be covered with a matching shape.
    pub fn restore(&mut self, values: &[(String, Tensor<F>)]) -> Result<(), CheckpointError> {
        let by_name: HashMap<&str, &Tensor<F>> =
            values.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.entries {
            let t = by_name
                .get(p.name.as_str())
                .ok_or_else(|| CheckpointError::MissingParam(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            p.value = (*t).clone();
        }
        Ok(())
    }

    /// Writes `params.bin` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path, manifest: &Checkpoint) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir)?;
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for p in &self.entries {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &d in p.value.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        fs::File::create(dir.join("params.bin"))?.write_all(&buf)?;
        let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// Reads a checkpoint directory back into `(values, manifest)`.
    pub fn load(dir: &Path) -> Result<(Vec<(String, Tensor<F>)>, Checkpoint), CheckpointError> {
        let manifest: Checkpoint =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
                .map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))?;
        let mut bytes = Vec::new();
        fs::File::open(dir.join("params.bin"))?.read_to_end(&mut bytes)?;
        let mut cur = &bytes[..];
        let mut take = |n: usize| -> Result<&[u8], CheckpointError> {
            if cur.len() < n {
                return Err(CheckpointError::Corrupt("truncated params.bin".into()));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        let magic = take(8)?;
        if magic != CKPT_MAGIC {
            return Err(CheckpointError::Corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(CheckpointError::Corrupt(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("non-utf8 name".into()))?;
            let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(F::of(f64::from_le_bytes(take(8)?.try_into().unwrap())));
            }
            out.push((name, Tensor::new(shape, data)));
        }
        Ok((out, manifest))
    }
}

/// Checkpoint manifest stored alongside the binary parameter file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub step: u64,
    pub param_count: usize,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint missing parameter {0:?}")]
    MissingParam(String),
    #[error("checkpoint shape mismatch for {name:?}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_name_init_ignores_registration_order() {
        let mut a = ParameterStore::<f64>::new(42);
        a.create("w1", &[3, 3], Init::Glorot { fan_in: 3, fan_out: 3 });
        a.create("w2", &[2], Init::Uniform { limit: 0.5 });

        let mut b = ParameterStore::<f64>::new(42);
        b.create("extra", &[4], Init::Uniform { limit: 1.0 });
        b.create("w2", &[2], Init::Uniform { limit: 0.5 });
        b.create("w1", &[3, 3], Init::Glorot { fan_in: 3, fan_out: 3 });

        assert_eq!(a.value("w1"), b.value("w1"));
        assert_eq!(a.value("w2"), b.value("w2"));
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn duplicate_name_panics() {
        let mut s = ParameterStore::<f64>::new(0);
        s.create("w", &[1], Init::Zeros);
        s.create("w", &[1], Init::Zeros);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParameterStore::<f64>::new(5);
        s.create("enc.w", &[2, 3], Init::Glorot { fan_in: 2, fan_out: 3 });
        s.create("dec.b", &[4], Init::Uniform { limit: 0.1 });
        let manifest =
            Checkpoint { config_hash: "abc".into(), step: 17, param_count: 2 };
        s.save(dir.path(), &manifest).unwrap();

        let (values, loaded) = ParameterStore::<f64>::load(dir.path()).unwrap();
        assert_eq!(loaded, manifest);
        let mut fresh = ParameterStore::<f64>::new(999);
        fresh.create("enc.w", &[2, 3], Init::Zeros);
        fresh.create("dec.b", &[4], Init::Zeros);
        fresh.restore(&values).unwrap();
        assert_eq!(fresh.value("enc.w"), s.value("enc.w"));
        assert_eq!(fresh.value("dec.b"), s.value("dec.b"));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut s = ParameterStore::<f64>::new(1);
        s.create("w", &[2], Init::Ones);
        for step in 1..=200 {
            let w = s.value("w").clone();
            let g: Vec<Option<Tensor<f64>>> =
                vec![Some(Tensor::new(vec![2], w.data().iter().map(|&x| 2.0 * x).collect()))];
            s.accumulate(&g, 1.0);
            s.adam_step(0.05, 0.9, 0.999, 1e-8, step);
            s.zero_grads();
        }
        assert!(s.value("w").data().iter().all(|x| x.abs() < 0.05));
    }
}
