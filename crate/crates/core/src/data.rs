//! Frames, sequences, the four trajectory buffers and their on-disk container.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Visual domain a frame was rendered in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn opposite(self) -> Self {
        match self {
            DomainTag::Source => DomainTag::Target,
            DomainTag::Target => DomainTag::Source,
        }
    }
}

/// Which policy produced a frame. The domain is implied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProvenanceTag {
    SourceExpert,
    SourceRandom,
    TargetRandom,
    TargetLearner,
}

impl ProvenanceTag {
    pub const ALL: [ProvenanceTag; 4] =
        [Self::SourceExpert, Self::SourceRandom, Self::TargetRandom, Self::TargetLearner];

    pub fn domain(self) -> DomainTag {
        match self {
            Self::SourceExpert | Self::SourceRandom => DomainTag::Source,
            Self::TargetRandom | Self::TargetLearner => DomainTag::Target,
        }
    }

    pub fn is_expert(self) -> bool {
        self == Self::SourceExpert
    }

    /// Two-letter buffer name (`SE`, `SR`, `TR`, `TL`).
    pub fn short(self) -> &'static str {
        match self {
            Self::SourceExpert => "SE",
            Self::SourceRandom => "SR",
            Self::TargetRandom => "TR",
            Self::TargetLearner => "TL",
        }
    }
}

const CHANNELS: usize = 3;

/// One `H x W x 3` uint8 observation with its timestep and provenance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pixels: Vec<u8>,
    height: usize,
    width: usize,
    t: usize,
    episode_len: usize,
    provenance: ProvenanceTag,
}

impl Frame {
    pub fn new(
        pixels: Vec<u8>,
        height: usize,
        width: usize,
        t: usize,
        episode_len: usize,
        provenance: ProvenanceTag,
    ) -> Result<Self> {
        if pixels.len() != height * width * CHANNELS {
            return Err(Error::Shape { expected: vec![height, width, CHANNELS], got: vec![pixels.len()] });
        }
        if episode_len == 0 {
            return Err(Error::Invalid("episode length must be at least 1".into()));
        }
        if t > episode_len {
            return Err(Error::Index { index: t, len: episode_len + 1 });
        }
        Ok(Self { pixels, height, width, t, episode_len, provenance })
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn episode_len(&self) -> usize {
        self.episode_len
    }

    pub fn provenance(&self) -> ProvenanceTag {
        self.provenance
    }

    pub fn domain(&self) -> DomainTag {
        self.provenance.domain()
    }

    /// Append the pixels as floats in `[0, 1]`.
    pub fn extend_unit(&self, out: &mut Vec<f64>) {
        out.extend(self.pixels.iter().map(|&p| p as f64 / 255.0));
    }
}

/// `L` consecutive frames of one episode, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Arc<Frame>>,
}

impl FrameSequence {
    /// Checks that frames share provenance, episode and size, and that timesteps
    /// are consecutive apart from a left padding made of repeats of frame 0.
    pub fn new(frames: Vec<Arc<Frame>>) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::Invalid("empty frame sequence".into()))?;
        for (i, pair) in frames.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            if b.provenance != first.provenance
                || b.episode_len != first.episode_len
                || (b.height, b.width) != (first.height, first.width)
            {
                return Err(Error::Invalid(format!("frame {} belongs to a different episode", i + 1)));
            }
            let padding = a.t == 0 && b.t == 0 && (Arc::ptr_eq(a, b) || a == b);
            if b.t != a.t + 1 && !padding {
                return Err(Error::Invalid(format!("timesteps {} -> {} are not consecutive", a.t, b.t)));
            }
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[Arc<Frame>] {
        &self.frames
    }

    pub fn last(&self) -> &Arc<Frame> {
        self.frames.last().expect("sequences are non-empty")
    }

    pub fn provenance(&self) -> ProvenanceTag {
        self.frames[0].provenance
    }
}

/// Frames `t-L+1 ..= t` of an episode; indices before the start repeat frame 0.
pub fn pad_sequence(episode: &[Arc<Frame>], t: usize, len: usize) -> Result<FrameSequence> {
    if t >= episode.len() {
        return Err(Error::Index { index: t, len: episode.len() });
    }
    if len == 0 {
        return Err(Error::Invalid("sequence length must be at least 1".into()));
    }
    let frames = (0..len).map(|i| Arc::clone(&episode[(t + i + 1).saturating_sub(len)])).collect();
    FrameSequence::new(frames)
}

/// One learner interaction. Rewards are not stored: they are recomputed from the
/// current label networks whenever the transition is replayed.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    /// Observation sequence ending at the post-action frame.
    pub obs_seq: FrameSequence,
    pub done: bool,
}

impl Transition {
    pub fn new(
        state: Vec<f64>,
        action: Vec<f64>,
        next_state: Vec<f64>,
        obs_seq: FrameSequence,
        done: bool,
    ) -> Result<Self> {
        if obs_seq.provenance() != ProvenanceTag::TargetLearner {
            return Err(Error::Invalid("learner transitions must carry TARGET_LEARNER frames".into()));
        }
        if state.len() != next_state.len() {
            return Err(Error::Shape { expected: vec![state.len()], got: vec![next_state.len()] });
        }
        if !state.iter().chain(&action).chain(&next_state).all(|v| v.is_finite()) {
            return Err(Error::NonFinite { term: "transition".into() });
        }
        if action.iter().any(|a| a.abs() > 1.0) {
            return Err(Error::Invalid("actions must lie in [-1, 1]".into()));
        }
        Ok(Self { state, action, next_state, obs_seq, done })
    }
}

/// Fixed-capacity FIFO: inserting past capacity evicts the oldest items.
#[derive(Clone, Debug, PartialEq)]
pub struct FifoBuffer<T> {
    items: VecDeque<T>,
    capacity: usize,
}

/// The online learner buffer `B^TL`.
pub type LearnerBuffer = FifoBuffer<Transition>;

impl<T> FifoBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self { items: VecDeque::with_capacity(capacity.min(1 << 16)), capacity }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.items.len() == self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }

    /// Oldest first.
    pub fn iter(&self) -> impl ExactSizeIterator<Item = &T> {
        self.items.iter()
    }

    pub fn push(&mut self, item: T) -> Option<T> {
        let evicted = if self.is_full() { self.items.pop_front() } else { None };
        self.items.push_back(item);
        evicted
    }

    /// Insert a batch, returning the evicted items (oldest first).
    pub fn refresh(&mut self, new: Vec<T>) -> Result<Vec<T>> {
        if new.len() > self.capacity {
            return Err(Error::Invalid(format!(
                "refresh of {} items exceeds buffer capacity {}",
                new.len(),
                self.capacity
            )));
        }
        let overflow = (self.items.len() + new.len()).saturating_sub(self.capacity);
        let evicted = self.items.drain(..overflow).collect();
        self.items.extend(new);
        Ok(evicted)
    }
}

/// One stored episode. `states` is `[frames, state_dim]`; `actions` is
/// `[frames - 1, action_dim]`, action `i` leading from frame `i` to `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub frames: Vec<Arc<Frame>>,
    pub states: Option<Vec<f32>>,
    pub actions: Option<Vec<f32>>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Keep only the first `n` frames (and matching states/actions).
    pub fn truncate(&mut self, n: usize, state_dim: usize, action_dim: usize) {
        self.frames.truncate(n);
        if let Some(s) = &mut self.states {
            s.truncate(n * state_dim);
        }
        if let Some(a) = &mut self.actions {
            a.truncate(n.saturating_sub(1) * action_dim);
        }
    }
}

/// A static corpus (`B^SE`, `B^SR` or `B^TR`) of whole episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryDataset {
    pub provenance: ProvenanceTag,
    pub height: usize,
    pub width: usize,
    pub seq_len: usize,
    pub capacity: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    episodes: Vec<Episode>,
    /// Global index of each episode's first frame.
    offsets: Vec<usize>,
    total: usize,
}

pub const FORMAT_VERSION: &str = "diffil-v1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    provenance: ProvenanceTag,
    height: usize,
    width: usize,
    channels: usize,
    seq_len: usize,
    capacity: usize,
    state_dim: usize,
    action_dim: usize,
    episode_count: usize,
    total_frames: usize,
    episodes: Vec<EpisodeEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeEntry {
    frames: usize,
    horizon: usize,
    pixels: String,
    states: Option<String>,
    actions: Option<String>,
}

impl TrajectoryDataset {
    pub fn new(
        provenance: ProvenanceTag,
        height: usize,
        width: usize,
        seq_len: usize,
        capacity: usize,
        state_dim: usize,
        action_dim: usize,
    ) -> Self {
        Self {
            provenance,
            height,
            width,
            seq_len,
            capacity,
            state_dim,
            action_dim,
            episodes: Vec::new(),
            offsets: Vec::new(),
            total: 0,
        }
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn total_frames(&self) -> usize {
        self.total
    }

    pub fn remaining(&self) -> usize {
        self.capacity - self.total
    }

    pub fn domain(&self) -> DomainTag {
        self.provenance.domain()
    }

    pub fn push_episode(&mut self, ep: Episode) -> Result<()> {
        if ep.frames.is_empty() {
            return Err(Error::Invalid("episode has no frames".into()));
        }
        if self.total + ep.len() > self.capacity {
            return Err(Error::Invalid(format!(
                "episode of {} frames overflows capacity {} ({} used)",
                ep.len(),
                self.capacity,
                self.total
            )));
        }
        let horizon = ep.frames[0].episode_len;
        for (t, f) in ep.frames.iter().enumerate() {
            if f.provenance != self.provenance || f.t != t || f.episode_len != horizon {
                return Err(Error::Invalid(format!("frame {t} does not continue the episode")));
            }
            if (f.height, f.width) != (self.height, self.width) {
                return Err(Error::Shape { expected: vec![self.height, self.width], got: vec![f.height, f.width] });
            }
        }
        if let Some(s) = &ep.states {
            if s.len() != ep.len() * self.state_dim {
                return Err(Error::Shape { expected: vec![ep.len(), self.state_dim], got: vec![s.len()] });
            }
        }
        if let Some(a) = &ep.actions {
            if a.len() != (ep.len() - 1) * self.action_dim {
                return Err(Error::Shape { expected: vec![ep.len() - 1, self.action_dim], got: vec![a.len()] });
            }
        }
        self.offsets.push(self.total);
        self.total += ep.len();
        self.episodes.push(ep);
        Ok(())
    }

    /// `(episode, t)` of the `i`-th frame in storage order.
    pub fn locate(&self, i: usize) -> Result<(usize, usize)> {
        if i >= self.total {
            return Err(Error::Index { index: i, len: self.total });
        }
        let ep = self.offsets.partition_point(|&o| o <= i) - 1;
        Ok((ep, i - self.offsets[ep]))
    }

    pub fn frame(&self, i: usize) -> Result<&Arc<Frame>> {
        let (ep, t) = self.locate(i)?;
        Ok(&self.episodes[ep].frames[t])
    }

    /// The padded observation sequence ending at frame `i`.
    pub fn sequence(&self, i: usize) -> Result<FrameSequence> {
        let (ep, t) = self.locate(i)?;
        pad_sequence(&self.episodes[ep].frames, t, self.seq_len)
    }

    /// State recorded alongside frame `i`, if the corpus stores states.
    pub fn state(&self, i: usize) -> Result<Option<&[f32]>> {
        let (ep, t) = self.locate(i)?;
        let d = self.state_dim;
        Ok(self.episodes[ep].states.as_ref().map(|s| &s[t * d..(t + 1) * d]))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let mut entries = Vec::with_capacity(self.episodes.len());
        for (i, ep) in self.episodes.iter().enumerate() {
            let stem = format!("episode_{i:05}");
            let pixels = format!("{stem}.u8");
            let mut blob = Vec::with_capacity(ep.len() * self.height * self.width * CHANNELS);
            for f in &ep.frames {
                blob.extend_from_slice(&f.pixels);
            }
            write(&dir.join(&pixels), &blob)?;
            let states = ep.states.as_ref().map(|s| -> Result<String> {
                let name = format!("{stem}.states.f32");
                write(&dir.join(&name), &f32_bytes(s))?;
                Ok(name)
            });
            let actions = ep.actions.as_ref().map(|a| -> Result<String> {
                let name = format!("{stem}.actions.f32");
                write(&dir.join(&name), &f32_bytes(a))?;
                Ok(name)
            });
            entries.push(EpisodeEntry {
                frames: ep.len(),
                horizon: ep.frames[0].episode_len,
                pixels,
                states: states.transpose()?,
                actions: actions.transpose()?,
            });
        }
        let manifest = Manifest {
            format: FORMAT_VERSION.to_string(),
            provenance: self.provenance,
            height: self.height,
            width: self.width,
            channels: CHANNELS,
            seq_len: self.seq_len,
            capacity: self.capacity,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            episode_count: self.episodes.len(),
            total_frames: self.total,
            episodes: entries,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write(&dir.join("manifest.json"), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::Missing { what: "dataset manifest".into(), path });
        }
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
        if m.format != FORMAT_VERSION {
            return Err(Error::format("format", format!("expected `{FORMAT_VERSION}`, found `{}`", m.format)));
        }
        if m.channels != CHANNELS {
            return Err(Error::format("channels", format!("expected {CHANNELS}, found {}", m.channels)));
        }
        if m.episode_count != m.episodes.len() {
            // Name the first episode the manifest claims but does not describe.
            let missing = m.episodes.len().min(m.episode_count);
            return Err(Error::format(
                format!("episodes[{missing}]"),
                format!("manifest claims {} episodes but lists {}", m.episode_count, m.episodes.len()),
            ));
        }
        let mut ds =
            Self::new(m.provenance, m.height, m.width, m.seq_len, m.capacity, m.state_dim, m.action_dim);
        let frame_bytes = m.height * m.width * CHANNELS;
        for (i, e) in m.episodes.iter().enumerate() {
            let field = format!("episodes[{i}]");
            let blob = read_payload(dir, &e.pixels, &field, e.frames * frame_bytes)?;
            let frames = blob
                .chunks_exact(frame_bytes)
                .enumerate()
                .map(|(t, px)| {
                    Frame::new(px.to_vec(), m.height, m.width, t, e.horizon, m.provenance)
                        .map(Arc::new)
                        .map_err(|err| Error::format(&field, err.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            let states = match &e.states {
                Some(name) => Some(f32_from(&read_payload(dir, name, &field, 4 * e.frames * m.state_dim)?)),
                None => None,
            };
            let actions = match &e.actions {
                Some(name) => {
                    let n = 4 * e.frames.saturating_sub(1) * m.action_dim;
                    Some(f32_from(&read_payload(dir, name, &field, n)?))
                }
                None => None,
            };
            ds.push_episode(Episode { frames, states, actions }).map_err(|err| Error::format(&field, err.to_string()))?;
        }
        if ds.total != m.total_frames {
            return Err(Error::format("total_frames", format!("manifest says {}, payloads hold {}", m.total_frames, ds.total)));
        }
        Ok(ds)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(Error::io(path))
}

fn read_payload(dir: &Path, name: &str, field: &str, expected: usize) -> Result<Vec<u8>> {
    if name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(Error::format(field, format!("payload name `{name}` must be a plain file name")));
    }
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::format(field, format!("cannot read payload `{name}`: {e}")))?;
    if bytes.len() != expected {
        return Err(Error::format(field, format!("payload `{name}` has {} bytes, expected {expected}", bytes.len())));
    }
    Ok(bytes)
}

pub(crate) fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub(crate) fn f32_from(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn episode(n: usize, prov: ProvenanceTag) -> Vec<Arc<Frame>> {
        (0..n).map(|t| Arc::new(Frame::new(vec![t as u8; 2 * 2 * 3], 2, 2, t, n - 1, prov).unwrap())).collect()
    }

    fn ts(seq: &FrameSequence) -> Vec<usize> {
        seq.frames().iter().map(|f| f.t()).collect()
    }

    #[test]
    fn pad_sequence_examples() {
        let ep = episode(10, ProvenanceTag::SourceExpert);
        assert_eq!(ts(&pad_sequence(&ep, 5, 4).unwrap()), [2, 3, 4, 5]);
        assert_eq!(ts(&pad_sequence(&ep, 0, 4).unwrap()), [0, 0, 0, 0]);
        assert_eq!(ts(&pad_sequence(&ep, 2, 4).unwrap()), [0, 0, 1, 2]);
        assert!(matches!(pad_sequence(&ep, 10, 4), Err(Error::Index { index: 10, len: 10 })));
    }

    #[test]
    fn sequences_reject_gaps_and_mixed_provenance() {
        let ep = episode(6, ProvenanceTag::SourceRandom);
        assert!(FrameSequence::new(vec![ep[1].clone(), ep[3].clone()]).is_err());
        assert!(FrameSequence::new(vec![ep[2].clone(), ep[2].clone()]).is_err());
        let other = episode(6, ProvenanceTag::TargetRandom);
        assert!(FrameSequence::new(vec![ep[1].clone(), other[2].clone()]).is_err());
    }

    #[test]
    fn provenance_implies_domain() {
        for p in ProvenanceTag::ALL {
            let source = matches!(p, ProvenanceTag::SourceExpert | ProvenanceTag::SourceRandom);
            assert_eq!(p.domain() == DomainTag::Source, source);
        }
    }

    #[test]
    fn fifo_refresh_examples() {
        let mut b = FifoBuffer::new(10);
        assert!(b.refresh(vec![1, 2, 3]).unwrap().is_empty());
        assert_eq!(b.len(), 3);
        let mut b = FifoBuffer::new(10);
        b.refresh((0..9).collect()).unwrap();
        assert_eq!(b.refresh(vec![9, 10, 11]).unwrap(), vec![0, 1]);
        assert_eq!(b.len(), 10);
        assert!(b.refresh((0..11).collect()).is_err());
    }

    #[test]
    fn locate_walks_episode_boundaries() {
        let mut ds = TrajectoryDataset::new(ProvenanceTag::SourceExpert, 2, 2, 4, 100, 1, 1);
        for n in [3, 5] {
            ds.push_episode(Episode { frames: episode(n, ProvenanceTag::SourceExpert), states: None, actions: None })
                .unwrap();
        }
        assert_eq!(ds.locate(0).unwrap(), (0, 0));
        assert_eq!(ds.locate(2).unwrap(), (0, 2));
        assert_eq!(ds.locate(3).unwrap(), (1, 0));
        assert_eq!(ds.locate(7).unwrap(), (1, 4));
        assert!(ds.locate(8).is_err());
        assert_eq!(ts(&ds.sequence(4).unwrap()), [0, 0, 0, 1]);
    }
}
