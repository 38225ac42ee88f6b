//! Named parameter storage, the serialisable model bundle and its checkpoint format.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{self, BackboneConfig};
use crate::dynamics::ChannelStats;
use crate::modulation::{self, NoiseBranchConfig};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CRPSRFT1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model config: {0}")]
    Config(String),
    #[error("parameter `{0}` contains non-finite values")]
    Poisoned(String),
    #[error("model has no noise branch; run retrofit-crps first")]
    MissingNoiseBranch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-b, b)`.
    Uniform(f64),
    /// `U(-b, b)` multiplied by a scale (0 gives exact zeros).
    ScaledUniform(f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    /// Draws the initial tensor; draws are consumed even for zero scales so
    /// later parameters do not depend on the scale.
    pub fn sample(&self, rng: &mut impl Rng) -> Tensor {
        let n: usize = self.shape.iter().product();
        let data = match self.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b)).collect(),
            Init::ScaledUniform(b, s) => (0..n).map(|_| rng.random_range(-b..b) * s).collect(),
        };
        Tensor::new(self.shape.clone(), data).expect("spec shape")
    }
}

/// PyTorch-style fan-in bound for a dense layer.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Ordered name → tensor map. Insertion order is the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: IndexMap<String, Tensor>,
}

impl Params {
    pub fn from_specs(specs: &[ParamSpec], rng: &mut impl Rng) -> Self {
        let mut p = Params::default();
        for s in specs {
            p.insert(s.name.clone(), s.sample(rng));
        }
        p
    }

    pub fn insert(&mut self, name: String, t: Tensor) {
        self.map.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.map.iter().find(|(_, t)| !t.is_finite()) {
            Some((name, _)) => Err(ModelError::Poisoned(name.clone())),
            None => Ok(()),
        }
    }

    /// Records every parameter on `tape`; `trainable` selects which leaves
    /// receive gradients.
    pub fn to_vars(&self, tape: &Tape, trainable: impl Fn(&str) -> bool) -> ParamVars {
        ParamVars {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable(k))))
                .collect(),
        }
    }
}

/// Parameters recorded on a tape, looked up by name during a forward pass.
pub struct ParamVars {
    map: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            map: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Var> {
        self.map
            .get(name)
            .ok_or_else(|| ModelError::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.map.iter()
    }
}

/// Backbone and optional noise branch together with normalisation stats.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub backbone: BackboneConfig,
    pub noise: Option<NoiseBranchConfig>,
    pub params: Params,
    pub stats: ChannelStats,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    backbone: BackboneConfig,
    noise_branch: bool,
    noise: Option<NoiseBranchConfig>,
    stats: ChannelStats,
    config_hash: String,
}

impl ModelBundle {
    /// Freshly initialised deterministic model.
    pub fn init_deterministic(
        backbone: BackboneConfig,
        stats: ChannelStats,
        seed: u64,
        config_hash: String,
    ) -> Result<Self> {
        backbone.validate()?;
        if stats.channels() != backbone.channels {
            return Err(ModelError::Config(format!(
                "stats have {} channels, backbone expects {}",
                stats.channels(),
                backbone.channels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::from_specs(&backbone::param_specs(&backbone), &mut rng);
        Ok(Self {
            backbone,
            noise: None,
            params,
            stats,
            config_hash,
        })
    }

    /// Every parameter the configuration requires, in canonical order.
    pub fn expected_specs(&self) -> Vec<ParamSpec> {
        let mut specs = backbone::param_specs(&self.backbone);
        if let Some(n) = &self.noise {
            specs.extend(modulation::param_specs(&self.backbone, n));
        }
        specs
    }

    pub fn has_noise_branch(&self) -> bool {
        self.noise.is_some()
    }

    /// Checks parameter names, shapes and order against the configuration.
    pub fn validate(&self) -> Result<()> {
        let specs = self.expected_specs();
        if specs.len() != self.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                self.params.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(self.params.iter()) {
            if &spec.name != name {
                return Err(ModelError::Checkpoint(format!(
                    "unexpected parameter `{name}`, expected `{}`",
                    spec.name
                )));
            }
            if spec.shape != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, config requires {:?}",
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            backbone: self.backbone.clone(),
            noise_branch: self.noise.is_some(),
            noise: self.noise.clone(),
            stats: self.stats.clone(),
            config_hash: self.config_hash.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(ModelError::Checkpoint("bad magic, not a CRPSRFT1 checkpoint".into()));
        }
        let len = r.u32()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(len)?)
            .map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
        if header.noise_branch != header.noise.is_some() {
            return Err(ModelError::Checkpoint("noise_branch flag disagrees with noise config".into()));
        }
        let count = r.u32()? as usize;
        let mut params = Params::default();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ModelError::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| ModelError::Checkpoint(format!("`{name}`: shape overflows")))?;
            let bytes = r.take(n.checked_mul(8).ok_or_else(|| ModelError::Checkpoint("size overflow".into()))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let bundle = ModelBundle {
            backbone: header.backbone,
            noise: header.noise,
            params,
            stats: header.stats,
            config_hash: header.config_hash,
        };
        bundle.backbone.validate()?;
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.buf.len()) {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ModelError::Checkpoint(format!("truncated at offset {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
