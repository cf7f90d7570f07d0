//! On-disk formats for network weights and the learner buffer.
//!
//! A network file is the magic line `diffil-net-v1`, one line of JSON listing
//! tensor names and shapes, then every tensor as little-endian f64 in order.
//! Loading writes into an already-constructed network and checks every shape.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use diffil_autodiff::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{Frame, FrameSequence, LearnerBuffer, ProvenanceTag, Transition};
use crate::error::{Error, Result};

const NET_MAGIC: &str = "diffil-net-v1";
const LEARNER_FORMAT: &str = "diffil-learner-v1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn named_tensors<M: Module + ?Sized>(m: &M) -> Vec<(String, &Tensor)> {
    let params = m.params().into_iter().enumerate().map(|(i, t)| (format!("param.{i}"), t));
    let buffers = m.buffers().into_iter().enumerate().map(|(i, t)| (format!("buffer.{i}"), t));
    params.chain(buffers).collect()
}

pub fn save_module<M: Module + ?Sized>(m: &M, path: &Path) -> Result<()> {
    let tensors = named_tensors(m);
    let entries: Vec<TensorEntry> =
        tensors.iter().map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() }).collect();
    let mut out = format!("{NET_MAGIC}\n{}\n", serde_json::to_string(&entries).expect("manifest serializes")).into_bytes();
    for (_, t) in &tensors {
        out.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
    fs::write(path, out).map_err(Error::io(path))
}

pub fn load_module<M: Module + ?Sized>(m: &mut M, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Missing { what: "network checkpoint".into(), path: path.to_path_buf() });
    }
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let field = path.display().to_string();
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    if lines.next() != Some(NET_MAGIC.as_bytes()) {
        return Err(Error::format(field, format!("missing `{NET_MAGIC}` header")));
    }
    let manifest = lines.next().ok_or_else(|| Error::format(&field, "truncated manifest"))?;
    let entries: Vec<TensorEntry> =
        serde_json::from_slice(manifest).map_err(|e| Error::format(&field, format!("bad manifest: {e}")))?;
    let payload = lines.next().unwrap_or_default();
    let expected: Vec<(String, Vec<usize>)> =
        named_tensors(m).into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    if entries.len() != expected.len() {
        return Err(Error::format(field, format!("{} tensors stored, network has {}", entries.len(), expected.len())));
    }
    for (e, (name, shape)) in entries.iter().zip(&expected) {
        if &e.name != name || &e.shape != shape {
            return Err(Error::Shape { expected: shape.clone(), got: e.shape.clone() });
        }
    }
    let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if payload.len() != 8 * total {
        return Err(Error::format(field, format!("payload has {} bytes, expected {}", payload.len(), 8 * total)));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for t in m.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = values.next().expect("length checked"));
    }
    for t in m.buffers_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = values.next().expect("length checked"));
    }
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text).map_err(Error::io(path))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::Missing { what: what.into(), path: path.to_path_buf() });
    }
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

#[derive(Serialize, Deserialize)]
struct LearnerManifest {
    format: String,
    capacity: usize,
    transitions: usize,
    frames: usize,
    height: usize,
    width: usize,
    seq_len: usize,
    state_dim: usize,
    action_dim: usize,
}

/// Write the learner buffer to `dir`. Frames shared between overlapping
/// sequences are stored once.
pub fn save_learner(buffer: &LearnerBuffer, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let first = buffer.get(0).ok_or_else(|| Error::Invalid("cannot save an empty learner buffer".into()))?;
    let f0 = first.obs_seq.last();
    let (state_dim, action_dim, seq_len) = (first.state.len(), first.action.len(), first.obs_seq.len());
    let mut index: HashMap<*const Frame, u32> = HashMap::new();
    let (mut pixels, mut meta, mut seqs, mut numbers, mut dones) = (vec![], vec![], vec![], vec![], vec![]);
    for tr in buffer.iter() {
        if tr.state.len() != state_dim || tr.action.len() != action_dim || tr.obs_seq.len() != seq_len {
            return Err(Error::Invalid("learner transitions must share dimensions".into()));
        }
        for f in tr.obs_seq.frames() {
            let next = index.len() as u32;
            let id = *index.entry(Arc::as_ptr(f)).or_insert_with(|| {
                pixels.extend_from_slice(f.pixels());
                meta.extend((f.t() as u32).to_le_bytes());
                meta.extend((f.episode_len() as u32).to_le_bytes());
                next
            });
            seqs.extend(id.to_le_bytes());
        }
        for v in tr.state.iter().chain(&tr.action).chain(&tr.next_state) {
            numbers.extend(v.to_le_bytes());
        }
        dones.push(tr.done as u8);
    }
    let manifest = LearnerManifest {
        format: LEARNER_FORMAT.into(),
        capacity: buffer.capacity(),
        transitions: buffer.len(),
        frames: index.len(),
        height: f0.height(),
        width: f0.width(),
        seq_len,
        state_dim,
        action_dim,
    };
    for (name, bytes) in [
        ("frames.u8", &pixels),
        ("frames.meta.u32", &meta),
        ("sequences.u32", &seqs),
        ("transitions.f64", &numbers),
        ("done.u8", &dones),
    ] {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(Error::io(&path))?;
    }
    write_json(&manifest, &dir.join("manifest.json"))
}

pub fn load_learner(dir: &Path) -> Result<LearnerBuffer> {
    let m: LearnerManifest = read_json(&dir.join("manifest.json"), "learner buffer manifest")?;
    if m.format != LEARNER_FORMAT {
        return Err(Error::format("format", format!("expected `{LEARNER_FORMAT}`, found `{}`", m.format)));
    }
    if m.capacity == 0 || m.transitions > m.capacity {
        return Err(Error::format("capacity", format!("{} transitions in a buffer of {}", m.transitions, m.capacity)));
    }
    let read = |name: &str, len: usize| -> Result<Vec<u8>> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(Error::io(&path))?;
        if bytes.len() != len {
            return Err(Error::format(name, format!("{} bytes, expected {len}", bytes.len())));
        }
        Ok(bytes)
    };
    let frame_bytes = m.height * m.width * 3;
    let pixels = read("frames.u8", m.frames * frame_bytes)?;
    let meta = u32s(&read("frames.meta.u32", m.frames * 8)?);
    let seqs = u32s(&read("sequences.u32", m.transitions * m.seq_len * 4)?);
    let per = 2 * m.state_dim + m.action_dim;
    let numbers: Vec<f64> = read("transitions.f64", m.transitions * per * 8)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let dones = read("done.u8", m.transitions)?;
    let frames = pixels
        .chunks_exact(frame_bytes.max(1))
        .zip(meta.chunks_exact(2))
        .map(|(px, tm)| {
            Frame::new(px.to_vec(), m.height, m.width, tm[0] as usize, tm[1] as usize, ProvenanceTag::TargetLearner)
                .map(Arc::new)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::format("frames", e.to_string()))?;
    let mut buffer = LearnerBuffer::new(m.capacity);
    for i in 0..m.transitions {
        let field = format!("transitions[{i}]");
        let ids = &seqs[i * m.seq_len..(i + 1) * m.seq_len];
        let seq = ids
            .iter()
            .map(|&id| frames.get(id as usize).cloned().ok_or(Error::Index { index: id as usize, len: frames.len() }))
            .collect::<Result<Vec<_>>>()
            .and_then(FrameSequence::new)
            .map_err(|e| Error::format(&field, e.to_string()))?;
        let row = &numbers[i * per..(i + 1) * per];
        let (state, rest) = row.split_at(m.state_dim);
        let (action, next) = rest.split_at(m.action_dim);
        let tr = Transition::new(state.to_vec(), action.to_vec(), next.to_vec(), seq, dones[i] != 0)
            .map_err(|e| Error::format(&field, e.to_string()))?;
        buffer.push(tr);
    }
    Ok(buffer)
}

fn u32s(b: &[u8]) -> Vec<u32> {
    b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect()
}
