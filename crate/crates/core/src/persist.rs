//! Binary artifacts.
//!
//! Trajectory container (`.trj`), all integers and reals little-endian:
//!
//! ```text
//! magic  "MILITRJ\0"
//! u32    format version
//! u32    observation dim
//! u32    action dim
//! [32]   config hash (raw SHA-256)
//! u64    record count
//! per record:
//!   u64  body length in bytes
//!   u32  object count, then per object: u32 type id, f64 x, f64 y
//!   f64  effector start x, f64 effector start y
//!   u32  step count
//!   f64  observations, step count * observation dim
//!   f64  actions, step count * action dim
//! ```
//!
//! A JSON sidecar (`<file>.index.json`) lists each dataset's task, provenance and
//! record indices, so trajectories shared between datasets are stored once.
//!
//! Checkpoint (`.ckpt`): magic `"MILICKP\0"`, version, config hash, the network
//! config as length-prefixed JSON, observation dim, then named tensors
//! (u16 name length, name, u32 rank, u64 dims, f64 data).

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::expert::{Provenance, TaskDataset, Trajectory};
use crate::policy::{ModelParams, NetworkConfig, PARAM_NAMES};
use crate::world::{Scene, SceneObject, Task, ACTION_DIM};

pub const FORMAT_VERSION: u32 = 1;
const TRJ_MAGIC: &[u8; 8] = b"MILITRJ\0";
const CKPT_MAGIC: &[u8; 8] = b"MILICKP\0";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub task: Option<Task>,
    pub provenance: Provenance,
    pub records: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryIndex {
    pub version: u32,
    pub config_hash: String,
    pub datasets: Vec<IndexEntry>,
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".index.json");
    PathBuf::from(s)
}

fn hash_bytes(hex_hash: &str) -> Result<[u8; 32]> {
    let v = hex::decode(hex_hash).map_err(|e| Error::Serde(format!("config hash: {e}")))?;
    v.try_into().map_err(|_| Error::Serde("config hash must be 32 bytes".into()))
}

struct Writer(Vec<u8>);

impl Writer {
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn len_u32(&mut self, n: usize) -> Result<()> {
        self.u32(u32::try_from(n).map_err(|_| Error::Serde(format!("{n} does not fit in u32")))?);
        Ok(())
    }
}

/// Bounds-checked little-endian reader that reports the offset of any shortfall.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what}")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| self.fail(format!("{what} length overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the container and its sidecar index. Trajectories are deduplicated by
/// pointer identity.
pub fn save_trajectories(path: &Path, datasets: &[TaskDataset], obs_dim: usize, config_hash: &str) -> Result<()> {
    let mut records: Vec<&Arc<Trajectory>> = Vec::new();
    let mut seen: HashMap<*const Trajectory, usize> = HashMap::new();
    let mut entries = Vec::with_capacity(datasets.len());
    for d in datasets {
        let mut ids = Vec::with_capacity(d.demos.len());
        for t in &d.demos {
            if t.obs_dim() != obs_dim {
                return Err(Error::Shape {
                    op: "save_trajectories",
                    lhs: vec![t.obs_dim()],
                    rhs: vec![obs_dim],
                });
            }
            let id = *seen.entry(Arc::as_ptr(t)).or_insert_with(|| {
                records.push(t);
                records.len() - 1
            });
            ids.push(id);
        }
        entries.push(IndexEntry {
            task: d.task,
            provenance: d.provenance,
            records: ids,
        });
    }

    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(TRJ_MAGIC);
    w.u32(FORMAT_VERSION);
    w.len_u32(obs_dim)?;
    w.len_u32(ACTION_DIM)?;
    w.0.extend_from_slice(&hash_bytes(config_hash)?);
    w.u64(records.len() as u64);
    for t in records {
        let mut body = Writer(Vec::new());
        body.len_u32(t.scene.objects.len())?;
        for o in &t.scene.objects {
            body.len_u32(o.type_id)?;
            body.f64s(&o.pos);
        }
        body.f64s(&t.scene.effector_start);
        body.len_u32(t.len())?;
        body.f64s(t.observations());
        body.f64s(t.actions());
        w.u64(body.0.len() as u64);
        w.0.extend_from_slice(&body.0);
    }
    write_file(path, &w.0)?;

    let index = TrajectoryIndex {
        version: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        datasets: entries,
    };
    let json = serde_json::to_vec_pretty(&index).map_err(|e| Error::Serde(e.to_string()))?;
    write_file(&index_path(path), &json)
}

/// Reads a container written by [`save_trajectories`]. The header must match the
/// expected observation dim and, when given, the config hash.
pub fn load_trajectories(path: &Path, obs_dim: usize, config_hash: Option<&str>) -> Result<Vec<TaskDataset>> {
    let buf = read_file(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(8, "magic")? != TRJ_MAGIC {
        r.pos = 0;
        return Err(r.fail("not a trajectory container"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let file_obs = r.u32("observation dim")? as usize;
    if file_obs != obs_dim {
        r.pos -= 4;
        return Err(r.fail(format!("observation dim {file_obs} in header, config expects {obs_dim}")));
    }
    let file_act = r.u32("action dim")? as usize;
    if file_act != ACTION_DIM {
        r.pos -= 4;
        return Err(r.fail(format!("action dim {file_act} in header, expected {ACTION_DIM}")));
    }
    let file_hash = hex::encode(r.take(32, "config hash")?);
    if let Some(expected) = config_hash {
        if file_hash != expected {
            return Err(Error::StaleInput {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                found: file_hash,
            });
        }
    }
    let count = r.u64("record count")?;
    let mut records = Vec::new();
    for i in 0..count {
        let body_len = r.u64("record length")? as usize;
        let start = r.pos;
        let what = |s: &str| format!("record {i} {s}");
        let n_obj = r.u32(&what("object count"))? as usize;
        let mut objects = Vec::with_capacity(n_obj.min(64));
        for _ in 0..n_obj {
            let type_id = r.u32(&what("type id"))? as usize;
            let pos = [r.f64(&what("position"))?, r.f64(&what("position"))?];
            objects.push(SceneObject { type_id, pos });
        }
        let effector_start = [r.f64(&what("effector start"))?, r.f64(&what("effector start"))?];
        let steps = r.u32(&what("step count"))? as usize;
        let obs = r.f64s(steps * obs_dim, &what("observations"))?;
        let actions = r.f64s(steps * ACTION_DIM, &what("actions"))?;
        if r.pos - start != body_len {
            return Err(r.fail(format!("record {i} length {} disagrees with prefix {body_len}", r.pos - start)));
        }
        let scene = Scene {
            objects,
            effector_start,
        };
        records.push(Arc::new(Trajectory::new(scene, obs_dim, obs, actions)?));
    }
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes after last record"));
    }

    let ipath = index_path(path);
    let index: TrajectoryIndex =
        serde_json::from_slice(&read_file(&ipath)?).map_err(|e| Error::Format {
            path: ipath.clone(),
            offset: 0,
            reason: e.to_string(),
        })?;
    if index.config_hash != file_hash || index.version != version {
        return Err(Error::StaleInput {
            path: ipath,
            expected: file_hash,
            found: index.config_hash,
        });
    }
    index
        .datasets
        .into_iter()
        .map(|e| {
            let demos = e
                .records
                .iter()
                .map(|&k| {
                    records.get(k).cloned().ok_or_else(|| Error::Format {
                        path: ipath.clone(),
                        offset: 0,
                        reason: format!("index references record {k} of {}", records.len()),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TaskDataset {
                task: e.task,
                demos,
                provenance: e.provenance,
            })
        })
        .collect()
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, config_hash: &str) -> Result<()> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CKPT_MAGIC);
    w.u32(FORMAT_VERSION);
    w.0.extend_from_slice(&hash_bytes(config_hash)?);
    let cfg = serde_json::to_vec(&params.config).map_err(|e| Error::Serde(e.to_string()))?;
    w.len_u32(cfg.len())?;
    w.0.extend_from_slice(&cfg);
    w.len_u32(params.obs_dim)?;
    w.len_u32(params.tensors.len())?;
    for (t, name) in params.tensors.iter().zip(PARAM_NAMES) {
        w.u16(name.len() as u16);
        w.0.extend_from_slice(name.as_bytes());
        w.len_u32(t.shape().len())?;
        for &d in t.shape() {
            w.u64(d as u64);
        }
        w.f64s(t.data());
    }
    write_file(path, &w.0)
}

pub fn load_checkpoint(path: &Path, config_hash: Option<&str>) -> Result<ModelParams> {
    let buf = read_file(path)?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(8, "magic")? != CKPT_MAGIC {
        r.pos = 0;
        return Err(r.fail("not a checkpoint"));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let file_hash = hex::encode(r.take(32, "config hash")?);
    if let Some(expected) = config_hash {
        if file_hash != expected {
            return Err(Error::StaleInput {
                path: path.to_path_buf(),
                expected: expected.to_string(),
                found: file_hash,
            });
        }
    }
    let n = r.u32("network config length")? as usize;
    let raw = r.take(n, "network config")?;
    let config: NetworkConfig = serde_json::from_slice(raw).map_err(|e| r.fail(format!("network config: {e}")))?;
    let obs_dim = r.u32("observation dim")? as usize;
    let count = r.u32("tensor count")? as usize;
    if count != PARAM_NAMES.len() {
        return Err(r.fail(format!("{count} tensors, expected {}", PARAM_NAMES.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for expected in PARAM_NAMES {
        let len = r.u16("tensor name length")? as usize;
        let name = r.take(len, "tensor name")?;
        if name != expected.as_bytes() {
            return Err(r.fail(format!("tensor {:?}, expected {expected}", String::from_utf8_lossy(name))));
        }
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("tensor dim")? as usize);
        }
        let size = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.fail("tensor size overflows"))?;
        let data = r.f64s(size, expected)?;
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes after last tensor"));
    }
    ModelParams::from_tensors(config, obs_dim, tensors)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(read_file(path)?)))
}
