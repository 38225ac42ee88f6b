use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, SystemSpec};
use crate::util::derive_seed;

pub const DATA_MAGIC: &[u8; 8] = b"CRPSDATA";
pub const DATA_VERSION: u32 = 1;

/// Stream index reserved for the split permutation.
const SPLIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    /// Seeded 80/10/10 partition of `0..n` (floors for train and val,
    /// remainder to test). Each list is sorted.
    pub fn new(n: usize, seed: u64) -> Self {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, SPLIT_STREAM)));
        let n_train = n * 8 / 10;
        let n_val = n / 10;
        let mut train = perm[..n_train].to_vec();
        let mut val = perm[n_train..n_train + n_val].to_vec();
        let mut test = perm[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Self { train, val, test }
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Normalises a `[C, S]` frame in place.
    pub fn normalize(&self, frame: &mut [f64]) {
        let s = frame.len() / self.channels();
        for (c, chunk) in frame.chunks_mut(s).enumerate() {
            chunk.iter_mut().for_each(|v| *v = (*v - self.mean[c]) / self.std[c]);
        }
    }

    pub fn denormalize(&self, frame: &mut [f64]) {
        let s = frame.len() / self.channels();
        for (c, chunk) in frame.chunks_mut(s).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v * self.std[c] + self.mean[c]);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: SystemSpec,
    n: usize,
    t: usize,
    channels: usize,
    spatial: Vec<usize>,
    config_hash: String,
}

/// Trajectories `[N, T, C, spatial...]` stored as f32, with train-split stats.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    spec: SystemSpec,
    n: usize,
    t: usize,
    channels: usize,
    spatial: Vec<usize>,
    states: Vec<f32>,
    stats: ChannelStats,
    splits: SplitIndices,
    config_hash: String,
}

impl TrajectoryDataset {
    /// Wraps raw states, checking finiteness and computing train-split stats.
    pub fn new(
        spec: SystemSpec,
        channels: usize,
        spatial: Vec<usize>,
        n: usize,
        t: usize,
        states: Vec<f32>,
        config_hash: String,
    ) -> Result<Self, DataError> {
        let frame: usize = channels * spatial.iter().product::<usize>();
        if states.len() != n * t * frame || channels == 0 {
            return Err(DataError::Format(format!(
                "payload of {} values does not match [N={n}, T={t}, C={channels}, {spatial:?}]",
                states.len()
            )));
        }
        check_finite(&states, t, frame)?;
        let splits = SplitIndices::new(n, spec.seed);
        let mut ds = Self {
            spec,
            n,
            t,
            channels,
            spatial,
            states,
            stats: ChannelStats {
                mean: vec![0.0; channels],
                std: vec![1.0; channels],
            },
            splits,
            config_hash,
        };
        ds.stats = ds.compute_stats();
        Ok(ds)
    }

    /// Mean and population std per channel over the train split; a zero std
    /// is replaced by 1.
    pub fn compute_stats(&self) -> ChannelStats {
        let s = self.sites();
        let idx = if self.splits.train.is_empty() {
            (0..self.n).collect()
        } else {
            self.splits.train.clone()
        };
        let mut mean = vec![0.0; self.channels];
        let mut std = vec![0.0; self.channels];
        let count = (idx.len() * self.t * s) as f64;
        for c in 0..self.channels {
            let mut sum = 0.0;
            for &i in &idx {
                for t in 0..self.t {
                    sum += self.frame(i, t)[c * s..(c + 1) * s].iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            let m = sum / count;
            let mut ss = 0.0;
            for &i in &idx {
                for t in 0..self.t {
                    ss += self.frame(i, t)[c * s..(c + 1) * s]
                        .iter()
                        .map(|&v| (v as f64 - m).powi(2))
                        .sum::<f64>();
                }
            }
            mean[c] = m;
            let sd = (ss / count).sqrt();
            std[c] = if sd > 0.0 { sd } else { 1.0 };
        }
        ChannelStats { mean, std }
    }

    pub fn spec(&self) -> &SystemSpec {
        &self.spec
    }
    pub fn n_trajectories(&self) -> usize {
        self.n
    }
    pub fn t_steps(&self) -> usize {
        self.t
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }
    pub fn sites(&self) -> usize {
        self.spatial.iter().product()
    }
    pub fn frame_len(&self) -> usize {
        self.channels * self.sites()
    }
    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }
    pub fn splits(&self) -> &SplitIndices {
        &self.splits
    }
    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }
    pub fn states(&self) -> &[f32] {
        &self.states
    }

    /// Raw `[C, spatial...]` frame `t` of trajectory `i`.
    pub fn frame(&self, i: usize, t: usize) -> &[f32] {
        let f = self.frame_len();
        let off = (i * self.t + t) * f;
        &self.states[off..off + f]
    }

    /// Physical-unit frame as f64.
    pub fn frame_f64(&self, i: usize, t: usize) -> Vec<f64> {
        self.frame(i, t).iter().map(|&v| v as f64).collect()
    }

    /// Frame normalised by the train-split stats.
    pub fn normalized_frame(&self, i: usize, t: usize) -> Vec<f64> {
        let mut f = self.frame_f64(i, t);
        self.stats.normalize(&mut f);
        f
    }

    /// Serialises to the on-disk byte layout.
    pub fn to_bytes(&self) -> Result<Vec<u8>, DataError> {
        check_finite(&self.states, self.t, self.frame_len())?;
        let header = Header {
            spec: self.spec.clone(),
            n: self.n,
            t: self.t,
            channels: self.channels,
            spatial: self.spatial.clone(),
            config_hash: self.config_hash.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| DataError::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + 16 * self.channels + 4 * self.states.len());
        out.extend_from_slice(DATA_MAGIC);
        out.extend_from_slice(&DATA_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for c in 0..self.channels {
            out.extend_from_slice(&self.stats.mean[c].to_le_bytes());
            out.extend_from_slice(&self.stats.std[c].to_le_bytes());
        }
        for v in &self.states {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8, "magic")? != DATA_MAGIC {
            return Err(DataError::Format("bad magic, not a CRPSDATA file".into()));
        }
        let version = r.u32("version")?;
        if version != DATA_VERSION {
            return Err(DataError::Format(format!("unsupported version {version}, expected {DATA_VERSION}")));
        }
        let len = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| DataError::Format(format!("header: {e}")))?;
        let mut mean = Vec::with_capacity(header.channels);
        let mut std = Vec::with_capacity(header.channels);
        for _ in 0..header.channels {
            mean.push(r.f64("stats")?);
            std.push(r.f64("stats")?);
        }
        let count = header.n * header.t * header.channels * header.spatial.iter().product::<usize>();
        let payload = r.take(count * 4, "payload")?;
        if r.pos != bytes.len() {
            return Err(DataError::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let states: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
            .collect();
        let mut ds = Self::new(
            header.spec,
            header.channels,
            header.spatial,
            header.n,
            header.t,
            states,
            header.config_hash,
        )?;
        // stored stats are authoritative; recomputation is checked by tests
        ds.stats = ChannelStats { mean, std };
        Ok(ds)
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn check_finite(states: &[f32], t: usize, frame: usize) -> Result<(), DataError> {
    if let Some(pos) = states.iter().position(|v| !v.is_finite()) {
        let f = pos / frame.max(1);
        return Err(DataError::NonFinite {
            trajectory: f / t.max(1),
            step: f % t.max(1),
        });
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(DataError::Format(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
