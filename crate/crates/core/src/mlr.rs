//! Multimodal latent replay: a per-task balanced buffer of post-modulation
//! latent windows with their target actions.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};
use crate::ifa::TaskId;

/// Modality order of every latent window.
pub const MODALITIES: [&str; 4] = ["agent_view", "eye_in_hand", "language", "state"];
pub const AGENT_VIEW: usize = 0;
pub const EYE_IN_HAND: usize = 1;
pub const LANGUAGE: usize = 2;
pub const STATE: usize = 3;

const CHECKPOINT_MAGIC: &[u8; 4] = b"MLRB";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub modalities: usize,
    pub window: usize,
    pub embed: usize,
}

impl LatentShape {
    pub fn len(&self) -> usize {
        self.modalities * self.window * self.embed
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One `M_mod × L × E` window of modulated modality features.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    shape: LatentShape,
    data: Vec<f32>,
    pub task_id: TaskId,
    pub timestep_index: usize,
}

impl LatentSequence {
    pub fn new(shape: LatentShape, data: Vec<f32>, task_id: TaskId, timestep_index: usize) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(domain(format!(
                "latent data has {} values, shape {:?} needs {}",
                data.len(),
                shape,
                shape.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(domain("latent window contains non-finite values"));
        }
        Ok(Self {
            shape,
            data,
            task_id,
            timestep_index,
        })
    }

    pub fn shape(&self) -> LatentShape {
        self.shape
    }

    /// Flattened data, modality-major then time then embedding.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Feature vector of `modality` at window position `step`.
    pub fn row(&self, modality: usize, step: usize) -> &[f32] {
        let e = self.shape.embed;
        let start = (modality * self.shape.window + step) * e;
        &self.data[start..start + e]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub latent: LatentSequence,
    pub action: Vec<f32>,
    pub task_id: TaskId,
}

/// Sizes of the raw observations a latent window stands in for; only used
/// for memory accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawObservationDims {
    pub view: usize,
    pub state_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferConfig {
    pub shape: LatentShape,
    pub action_dim: usize,
    pub per_task_capacity: usize,
    pub store_probability: f64,
    pub raw: RawObservationDims,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryStats {
    pub entries_per_task: BTreeMap<TaskId, usize>,
    pub total_bytes_latent: u64,
    pub equivalent_raw_bytes: u64,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    cfg: BufferConfig,
    partitions: BTreeMap<TaskId, Vec<BufferEntry>>,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(cfg: BufferConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.store_probability) {
            return Err(config(format!(
                "store_probability must lie in [0, 1], got {}",
                cfg.store_probability
            )));
        }
        if cfg.shape.is_empty() || cfg.action_dim == 0 {
            return Err(config("buffer shape and action dimension must be non-zero"));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            partitions: BTreeMap::new(),
            rng,
        })
    }

    pub fn config(&self) -> &BufferConfig {
        &self.cfg
    }

    pub fn len(&self) -> usize {
        self.partitions.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.partitions.iter().filter(|(_, v)| !v.is_empty()).map(|(&t, _)| t)
    }

    pub fn entries(&self, task: TaskId) -> &[BufferEntry] {
        self.partitions.get(&task).map(Vec::as_slice).unwrap_or(&[])
    }

    fn check_entry(&self, entry: &BufferEntry) -> Result<()> {
        if entry.latent.shape() != self.cfg.shape {
            return Err(domain(format!(
                "entry shape {:?} does not match buffer shape {:?}",
                entry.latent.shape(),
                self.cfg.shape
            )));
        }
        if entry.action.len() != self.cfg.action_dim {
            return Err(domain(format!(
                "entry action has {} values, buffer expects {}",
                entry.action.len(),
                self.cfg.action_dim
            )));
        }
        if entry.action.iter().any(|v| !v.is_finite()) {
            return Err(domain("entry action contains non-finite values"));
        }
        if entry.latent.task_id != entry.task_id {
            return Err(domain("entry task id does not match its latent window"));
        }
        Ok(())
    }

    /// Admits `entry` with probability `store_probability`. A full task
    /// partition evicts one uniformly chosen entry of the same task.
    ///
    /// Every call consumes exactly two draws from the buffer's generator.
    pub fn offer(&mut self, entry: BufferEntry) -> Result<bool> {
        self.check_entry(&entry)?;
        let admit: f64 = self.rng.gen();
        let slot: f64 = self.rng.gen();
        if admit >= self.cfg.store_probability {
            return Ok(false);
        }
        let cap = self.cfg.per_task_capacity;
        if cap == 0 {
            return Ok(false);
        }
        let part = self.partitions.entry(entry.task_id).or_default();
        if part.len() < cap {
            part.push(entry);
        } else {
            let idx = ((slot * part.len() as f64) as usize).min(part.len() - 1);
            part[idx] = entry;
        }
        Ok(true)
    }

    /// Draws `n` entries with replacement: a task uniformly among non-empty
    /// partitions, then an entry uniformly within it.
    pub fn sample_replay_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&BufferEntry> {
        let parts: Vec<&Vec<BufferEntry>> = self.partitions.values().filter(|p| !p.is_empty()).collect();
        if parts.is_empty() {
            return Vec::new();
        }
        (0..n)
            .map(|_| {
                let ut: f64 = rng.gen();
                let ue: f64 = rng.gen();
                let part = parts[((ut * parts.len() as f64) as usize).min(parts.len() - 1)];
                &part[((ue * part.len() as f64) as usize).min(part.len() - 1)]
            })
            .collect()
    }

    pub fn bytes_per_entry(&self) -> u64 {
        ((self.cfg.shape.len() + self.cfg.action_dim) * 4) as u64
    }

    /// Bytes one window would take as raw observations: two `V×V` images
    /// plus state and action per step, `L` steps.
    pub fn raw_bytes_per_entry(&self) -> u64 {
        let RawObservationDims { view, state_dim } = self.cfg.raw;
        ((2 * view * view + state_dim + self.cfg.action_dim) * self.cfg.shape.window * 4) as u64
    }

    pub fn memory_stats(&self) -> MemoryStats {
        let entries_per_task: BTreeMap<TaskId, usize> = self
            .partitions
            .iter()
            .filter(|(_, p)| !p.is_empty())
            .map(|(&t, p)| (t, p.len()))
            .collect();
        let n = self.len() as u64;
        MemoryStats {
            entries_per_task,
            total_bytes_latent: n * self.bytes_per_entry(),
            equivalent_raw_bytes: n * self.raw_bytes_per_entry(),
        }
    }

    /// Writes the buffer checkpoint: a little-endian header followed by the
    /// raw float32 payload, entries ordered by task id then position.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let s = self.cfg.shape;
        w.write_all(CHECKPOINT_MAGIC)?;
        for v in [
            CHECKPOINT_VERSION,
            s.modalities as u32,
            s.window as u32,
            s.embed as u32,
            self.cfg.action_dim as u32,
            self.cfg.per_task_capacity as u32,
            self.cfg.raw.view as u32,
            self.cfg.raw.state_dim as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.cfg.store_probability.to_le_bytes())?;
        w.write_all(&self.cfg.seed.to_le_bytes())?;
        w.write_all(&self.rng.get_seed())?;
        w.write_all(&self.rng.get_stream().to_le_bytes())?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes())?;
        let parts: Vec<(&TaskId, &Vec<BufferEntry>)> = self.partitions.iter().filter(|(_, p)| !p.is_empty()).collect();
        w.write_all(&(parts.len() as u32).to_le_bytes())?;
        for (&task, p) in &parts {
            w.write_all(&(task as u32).to_le_bytes())?;
            w.write_all(&(p.len() as u32).to_le_bytes())?;
        }
        for (_, p) in &parts {
            for e in p.iter() {
                w.write_all(&(e.latent.timestep_index as u32).to_le_bytes())?;
            }
        }
        for (_, p) in &parts {
            for e in p.iter() {
                for v in e.latent.data().iter().chain(&e.action) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a replay buffer checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported buffer checkpoint version {version}")));
        }
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = read_u32(&mut r)? as usize;
        }
        let [modalities, window, embed, action_dim, per_task_capacity, view, state_dim] = dims;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let store_probability = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let seed = u64::from_le_bytes(b8);
        let mut rng_seed = [0u8; 32];
        r.read_exact(&mut rng_seed)?;
        r.read_exact(&mut b8)?;
        let stream = u64::from_le_bytes(b8);
        let mut b16 = [0u8; 16];
        r.read_exact(&mut b16)?;
        let word_pos = u128::from_le_bytes(b16);

        let shape = LatentShape {
            modalities,
            window,
            embed,
        };
        let cfg = BufferConfig {
            shape,
            action_dim,
            per_task_capacity,
            store_probability,
            raw: RawObservationDims { view, state_dim },
            seed,
        };
        let mut buffer = Self::new(cfg)?;
        let mut rng = ChaCha8Rng::from_seed(rng_seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        buffer.rng = rng;

        let n_tasks = read_u32(&mut r)? as usize;
        let mut table = Vec::with_capacity(n_tasks);
        for _ in 0..n_tasks {
            let task = read_u32(&mut r)? as TaskId;
            let count = read_u32(&mut r)? as usize;
            table.push((task, count));
        }
        let total: usize = table.iter().map(|&(_, c)| c).sum();
        let mut timesteps = Vec::with_capacity(total);
        for _ in 0..total {
            timesteps.push(read_u32(&mut r)? as usize);
        }
        let mut timesteps = timesteps.into_iter();
        for (task, count) in table {
            let part = buffer.partitions.entry(task).or_default();
            for _ in 0..count {
                let data = read_f32s(&mut r, shape.len())?;
                let action = read_f32s(&mut r, action_dim)?;
                let ts = timesteps.next().ok_or_else(|| Error::Format("truncated timestep table".into()))?;
                part.push(BufferEntry {
                    latent: LatentSequence::new(shape, data, task, ts)?,
                    action,
                    task_id: task,
                });
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after buffer payload", rest.len())));
        }
        Ok(buffer)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

impl PartialEq for ReplayBuffer {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.partitions == other.partitions && self.rng == other.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHAPE: LatentShape = LatentShape {
        modalities: 4,
        window: 8,
        embed: 64,
    };

    fn cfg(p: f64, cap: usize) -> BufferConfig {
        BufferConfig {
            shape: SHAPE,
            action_dim: 4,
            per_task_capacity: cap,
            store_probability: p,
            raw: RawObservationDims { view: 32, state_dim: 8 },
            seed: 11,
        }
    }

    fn entry(task: TaskId, t: usize) -> BufferEntry {
        let data = (0..SHAPE.len()).map(|i| (i + t) as f32 * 1e-3).collect();
        BufferEntry {
            latent: LatentSequence::new(SHAPE, data, task, t).unwrap(),
            action: vec![t as f32; 4],
            task_id: task,
        }
    }

    #[test]
    fn zero_probability_never_admits() {
        let mut b = ReplayBuffer::new(cfg(0.0, 10)).unwrap();
        for t in 0..50 {
            assert!(!b.offer(entry(0, t)).unwrap());
        }
        assert_eq!(b.memory_stats().total_bytes_latent, 0);
    }

    #[test]
    fn certain_admission_under_capacity() {
        let mut b = ReplayBuffer::new(cfg(1.0, 10)).unwrap();
        for t in 0..5 {
            assert!(b.offer(entry(2, t)).unwrap());
        }
        assert_eq!(b.entries(2).len(), 5);
        assert_eq!(b.entries(2).iter().map(|e| e.latent.timestep_index).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn capacity_is_respected_with_eviction() {
        let mut b = ReplayBuffer::new(cfg(1.0, 3)).unwrap();
        for t in 0..20 {
            b.offer(entry(1, t)).unwrap();
        }
        assert_eq!(b.entries(1).len(), 3);
    }

    #[test]
    fn malformed_entries_are_rejected() {
        let mut b = ReplayBuffer::new(cfg(1.0, 3)).unwrap();
        let mut e = entry(0, 0);
        e.action.push(0.0);
        assert!(b.offer(e).is_err());
        let mut e = entry(0, 0);
        e.task_id = 1;
        assert!(b.offer(e).is_err());
        assert!(ReplayBuffer::new(cfg(1.5, 3)).is_err());
    }

    #[test]
    fn empty_and_single_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = ReplayBuffer::new(cfg(1.0, 3)).unwrap();
        assert!(b.sample_replay_batch(10, &mut rng).is_empty());
        let mut b = ReplayBuffer::new(cfg(1.0, 3)).unwrap();
        b.offer(entry(4, 9)).unwrap();
        let got = b.sample_replay_batch(3, &mut rng);
        assert_eq!(got.len(), 3);
        assert!(got.iter().all(|e| **e == b.entries(4)[0]));
    }

    #[test]
    fn memory_accounting() {
        let b = ReplayBuffer::new(cfg(1.0, 3)).unwrap();
        let s = b.memory_stats();
        assert!(s.entries_per_task.is_empty());
        assert_eq!((s.total_bytes_latent, s.equivalent_raw_bytes), (0, 0));
        let mut b = b;
        b.offer(entry(0, 0)).unwrap();
        let s = b.memory_stats();
        assert_eq!(s.total_bytes_latent, 8208);
        assert_eq!(s.equivalent_raw_bytes, 65_920);
    }

    #[test]
    fn checkpoint_size_holds_only_latents() {
        let mut b = ReplayBuffer::new(cfg(1.0, 4)).unwrap();
        for t in 0..6 {
            b.offer(entry(t % 2, t)).unwrap();
        }
        let mut bytes = Vec::new();
        b.write_checkpoint(&mut bytes).unwrap();
        let header = 4 + 8 * 4 + 8 + 8 + 32 + 8 + 16 + 4 + 2 * 8 + 6 * 4;
        assert_eq!(bytes.len() as u64, header as u64 + 6 * b.bytes_per_entry());
        let back = ReplayBuffer::read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(back, b);
        assert!(ReplayBuffer::read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    }
}
