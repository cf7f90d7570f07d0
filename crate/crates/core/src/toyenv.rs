//! Paired source/target pixel environments with scripted experts.
//!
//! Both domains share task semantics (the same state variables and goal) but
//! differ in rendering style and dynamics gain, so a learner must transfer
//! behavior across a genuine visual and physical gap. Ground-truth rewards are
//! reported for evaluation only and never reach the learner.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DomainTag, Episode, Frame, ProvenanceTag, TrajectoryDataset};
use crate::error::{Error, Result};

/// Outcome of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: Vec<f64>,
    pub frame: Vec<u8>,
    /// Ground-truth reward, for the metrics log only.
    pub eval_reward: f64,
    /// The episode is over (time limit reached).
    pub done: bool,
    /// The new state is absorbing; bootstrapping must stop.
    pub terminal: bool,
}

pub trait Environment {
    fn domain(&self) -> DomainTag;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn episode_len(&self) -> usize;
    /// `(height, width)` of rendered frames.
    fn image_size(&self) -> (usize, usize);
    /// Start a new episode and return the initial state.
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn state(&self) -> Vec<f64>;
    /// Teleport to `state` (as returned by [`Environment::state`]) without
    /// touching the clock; used to render matched frames across domains.
    fn set_state(&mut self, state: &[f64]);
    /// Advance one step; components of `action` outside `[-1, 1]` are clamped
    /// and counted in [`Environment::clamp_warnings`].
    fn step(&mut self, action: &[f64]) -> Step;
    fn render(&self) -> Vec<u8>;
    /// The scripted expert's action in the current state.
    fn expert_action(&self) -> Vec<f64>;
    fn clamp_warnings(&self) -> usize;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    DotWorld,
    PoleWorld,
}

pub fn make_env(kind: EnvKind, domain: DomainTag, image_size: usize, episode_len: usize) -> Box<dyn Environment> {
    match kind {
        EnvKind::DotWorld => Box::new(DotWorld::new(domain, image_size).with_episode_len(episode_len)),
        EnvKind::PoleWorld => Box::new(PoleWorld::new(domain, image_size).with_episode_len(episode_len)),
    }
}

fn clamp_action(a: f64, warnings: &mut usize) -> f64 {
    if !(-1.0..=1.0).contains(&a) {
        *warnings += 1;
    }
    a.clamp(-1.0, 1.0)
}

type Rgb = [f64; 3];

const WHITE: Rgb = [1.0, 1.0, 1.0];
const GRAY: Rgb = [0.5, 0.5, 0.5];
const CHECK_DARK: Rgb = [0.16, 0.16, 0.47];
const CHECK_LIGHT: Rgb = [0.86, 0.86, 0.55];

fn background(domain: DomainTag, size: usize, px: usize, py: usize) -> Rgb {
    match domain {
        DomainTag::Source => GRAY,
        DomainTag::Target => {
            let cell = (size / 8).max(1);
            if (px / cell + py / cell).is_multiple_of(2) {
                CHECK_DARK
            } else {
                CHECK_LIGHT
            }
        }
    }
}

/// Blend foreground coverage (`0..=1` per pixel) over the domain background.
fn compose(domain: DomainTag, size: usize, fg: Rgb, coverage: impl Fn(usize, usize) -> f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(size * size * 3);
    for py in 0..size {
        for px in 0..size {
            let c = coverage(px, py).clamp(0.0, 1.0);
            let bg = background(domain, size, px, py);
            for ch in 0..3 {
                let v = bg[ch] * (1.0 - c) + fg[ch] * c;
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    out
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Fraction of pixel `(px, py)` inside `inside`, by 4x4 supersampling.
fn supersample(px: usize, py: usize, inside: impl Fn(f64, f64) -> bool) -> f64 {
    const N: usize = 4;
    let mut hits = 0;
    for sy in 0..N {
        for sx in 0..N {
            let x = px as f64 + (sx as f64 + 0.5) / N as f64;
            let y = py as f64 + (sy as f64 + 0.5) / N as f64;
            hits += inside(x, y) as usize;
        }
    }
    hits as f64 / (N * N) as f64
}

/// A point mass on `[0, 1]` that should be pushed right as fast as possible.
///
/// The source domain draws a white square on gray and moves with gain 0.05;
/// the target draws a white disc on a checkerboard and moves with gain 0.03.
#[derive(Clone, Debug)]
pub struct DotWorld {
    domain: DomainTag,
    size: usize,
    episode_len: usize,
    gain: f64,
    x: f64,
    t: usize,
    warnings: usize,
}

impl DotWorld {
    pub const SOURCE_GAIN: f64 = 0.05;
    pub const TARGET_GAIN: f64 = 0.03;
    pub const EPISODE_LEN: usize = 50;
    /// Initial positions are drawn uniformly from `[0, START_SPREAD]`.
    pub const START_SPREAD: f64 = 0.05;

    pub fn new(domain: DomainTag, size: usize) -> Self {
        assert!(size >= 8, "DotWorld renders at least 8x8 pixels");
        let gain = match domain {
            DomainTag::Source => Self::SOURCE_GAIN,
            DomainTag::Target => Self::TARGET_GAIN,
        };
        Self { domain, size, episode_len: Self::EPISODE_LEN, gain, x: 0.0, t: 0, warnings: 0 }
    }

    pub fn with_episode_len(mut self, episode_len: usize) -> Self {
        assert!(episode_len >= 1);
        self.episode_len = episode_len;
        self
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn set_x(&mut self, x: f64) {
        self.x = x.clamp(0.0, 1.0);
    }

    /// Horizontal pixel coordinate of the object's centre.
    fn centre(&self) -> (f64, f64) {
        let s = self.size as f64;
        let margin = s / 8.0;
        (margin + self.x * (s - 2.0 * margin), s / 2.0)
    }
}

impl Environment for DotWorld {
    fn domain(&self) -> DomainTag {
        self.domain
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn episode_len(&self) -> usize {
        self.episode_len
    }

    fn image_size(&self) -> (usize, usize) {
        (self.size, self.size)
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.x = rng.random_range(0.0..Self::START_SPREAD);
        self.t = 0;
        self.state()
    }

    fn state(&self) -> Vec<f64> {
        vec![self.x]
    }

    fn set_state(&mut self, state: &[f64]) {
        self.set_x(state[0]);
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let a = clamp_action(action[0], &mut self.warnings);
        self.x = (self.x + self.gain * a).clamp(0.0, 1.0);
        self.t += 1;
        Step {
            state: self.state(),
            frame: self.render(),
            eval_reward: self.gain * a,
            done: self.t >= self.episode_len,
            terminal: false,
        }
    }

    fn render(&self) -> Vec<u8> {
        let (cx, cy) = self.centre();
        let half = self.size as f64 / 8.0;
        match self.domain {
            DomainTag::Source => compose(self.domain, self.size, WHITE, |px, py| {
                let (x, y) = (px as f64, py as f64);
                overlap(x, x + 1.0, cx - half, cx + half) * overlap(y, y + 1.0, cy - half, cy + half)
            }),
            DomainTag::Target => {
                let r2 = (1.1 * half).powi(2);
                compose(self.domain, self.size, WHITE, |px, py| {
                    supersample(px, py, |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= r2)
                })
            }
        }
    }

    fn expert_action(&self) -> Vec<f64> {
        vec![1.0]
    }

    fn clamp_warnings(&self) -> usize {
        self.warnings
    }
}

/// A torque-limited pendulum that must be swung up and balanced.
///
/// The angle is measured from upright. The source domain has a longer rendered
/// pole and stronger actuation than the target. The evaluation reward is
/// `(1 + cos θ) / 2`, so 1 when upright and 0 when hanging.
#[derive(Clone, Debug)]
pub struct PoleWorld {
    domain: DomainTag,
    size: usize,
    episode_len: usize,
    gain: f64,
    pole_len: f64,
    theta: f64,
    omega: f64,
    t: usize,
    warnings: usize,
}

impl PoleWorld {
    const GRAVITY: f64 = 15.0;
    const DT: f64 = 0.05;
    const MAX_OMEGA: f64 = 8.0;
    pub const EPISODE_LEN: usize = 100;

    pub fn new(domain: DomainTag, size: usize) -> Self {
        assert!(size >= 8, "PoleWorld renders at least 8x8 pixels");
        let (gain, pole_len) = match domain {
            DomainTag::Source => (6.0, 0.42),
            DomainTag::Target => (4.5, 0.30),
        };
        Self {
            domain,
            size,
            episode_len: Self::EPISODE_LEN,
            gain,
            pole_len,
            theta: PI,
            omega: 0.0,
            t: 0,
            warnings: 0,
        }
    }

    pub fn with_episode_len(mut self, episode_len: usize) -> Self {
        assert!(episode_len >= 1);
        self.episode_len = episode_len;
        self
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn set_state(&mut self, theta: f64, omega: f64) {
        self.theta = wrap_angle(theta);
        self.omega = omega.clamp(-Self::MAX_OMEGA, Self::MAX_OMEGA);
    }

    fn energy(&self) -> f64 {
        0.5 * self.omega * self.omega + Self::GRAVITY * self.theta.cos()
    }
}

/// Map an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl Environment for PoleWorld {
    fn domain(&self) -> DomainTag {
        self.domain
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn episode_len(&self) -> usize {
        self.episode_len
    }

    fn image_size(&self) -> (usize, usize) {
        (self.size, self.size)
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.theta = wrap_angle(PI + rng.random_range(-0.1..0.1));
        self.omega = 0.0;
        self.t = 0;
        self.state()
    }

    fn state(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.omega / Self::MAX_OMEGA]
    }

    fn set_state(&mut self, state: &[f64]) {
        self.set_state(state[1].atan2(state[0]), state[2] * Self::MAX_OMEGA);
    }

    fn step(&mut self, action: &[f64]) -> Step {
        let u = clamp_action(action[0], &mut self.warnings);
        let accel = Self::GRAVITY * self.theta.sin() + self.gain * u;
        self.omega = (self.omega + Self::DT * accel).clamp(-Self::MAX_OMEGA, Self::MAX_OMEGA);
        self.theta = wrap_angle(self.theta + Self::DT * self.omega);
        self.t += 1;
        Step {
            state: self.state(),
            frame: self.render(),
            eval_reward: 0.5 * (1.0 + self.theta.cos()),
            done: self.t >= self.episode_len,
            terminal: false,
        }
    }

    fn render(&self) -> Vec<u8> {
        let s = self.size as f64;
        let (cx, cy) = (s / 2.0, s / 2.0);
        let len = self.pole_len * s;
        let (tx, ty) = (cx + len * self.theta.sin(), cy - len * self.theta.cos());
        let half_width = s / 20.0 + 0.5;
        compose(self.domain, self.size, WHITE, |px, py| {
            supersample(px, py, |x, y| segment_distance(x, y, cx, cy, tx, ty) <= half_width)
        })
    }

    fn expert_action(&self) -> Vec<f64> {
        let upright = Self::GRAVITY;
        let u = if self.theta.cos() > 0.85 {
            -(12.0 * self.theta + 2.5 * self.omega) / self.gain
        } else {
            // Pump energy in the direction of motion until the upright level is reached.
            let deficit = upright - self.energy();
            let dir = if self.omega.abs() < 1e-3 { 1.0 } else { self.omega.signum() };
            if deficit > 0.0 {
                dir
            } else {
                -0.5 * dir
            }
        };
        vec![u.clamp(-1.0, 1.0)]
    }

    fn clamp_warnings(&self) -> usize {
        self.warnings
    }
}

fn segment_distance(x: f64, y: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let h = if len2 == 0.0 { 0.0 } else { (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0) };
    ((x - ax - h * dx).powi(2) + (y - ay - h * dy).powi(2)).sqrt()
}

/// How actions are chosen during a rollout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Behavior {
    Expert,
    /// Uniform over `[-1, 1]^A`.
    Random,
}

/// Roll out one episode and record frames, states and actions.
///
/// At most `max_frames` frames are kept, truncating the episode if needed.
pub fn record_episode(
    env: &mut dyn Environment,
    behavior: Behavior,
    provenance: ProvenanceTag,
    max_frames: usize,
    rng: &mut dyn RngCore,
) -> Result<Episode> {
    let (h, w) = env.image_size();
    let horizon = env.episode_len();
    let keep = max_frames.min(horizon + 1);
    if keep == 0 {
        return Err(Error::Invalid("cannot record an empty episode".into()));
    }
    let mut states: Vec<f32> = env.reset(rng).iter().map(|&v| v as f32).collect();
    let mut frames = vec![Arc::new(Frame::new(env.render(), h, w, 0, horizon, provenance)?)];
    let mut actions = Vec::new();
    for t in 1..keep {
        let action = match behavior {
            Behavior::Expert => env.expert_action(),
            Behavior::Random => (0..env.action_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        };
        let step = env.step(&action);
        actions.extend(action.iter().map(|&v| v as f32));
        states.extend(step.state.iter().map(|&v| v as f32));
        frames.push(Arc::new(Frame::new(step.frame, h, w, t, horizon, provenance)?));
    }
    Ok(Episode { frames, states: Some(states), actions: Some(actions) })
}

/// Ground-truth return of one full episode under `behavior`.
pub fn episode_return(env: &mut dyn Environment, behavior: Behavior, rng: &mut dyn RngCore) -> f64 {
    env.reset(rng);
    let mut total = 0.0;
    loop {
        let action = match behavior {
            Behavior::Expert => env.expert_action(),
            Behavior::Random => (0..env.action_dim()).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        };
        let step = env.step(&action);
        total += step.eval_reward;
        if step.done {
            return total;
        }
    }
}

/// Parameters of the offline corpora.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusSpec {
    pub env: EnvKind,
    pub image_size: usize,
    pub episode_len: usize,
    pub seq_len: usize,
    /// Frames per corpus; every corpus is filled exactly.
    pub capacity: usize,
}

/// The three static corpora `B^SE`, `B^SR`, `B^TR`.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpora {
    pub source_expert: TrajectoryDataset,
    pub source_random: TrajectoryDataset,
    pub target_random: TrajectoryDataset,
}

impl Corpora {
    pub const DIRS: [&'static str; 3] = ["source_expert", "source_random", "target_random"];

    pub fn iter(&self) -> impl Iterator<Item = &TrajectoryDataset> {
        [&self.source_expert, &self.source_random, &self.target_random].into_iter()
    }

    /// Write each corpus to its own subdirectory of `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, ds) in Self::DIRS.iter().zip(self.iter()) {
            ds.save(&dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let load = |i: usize, prov: ProvenanceTag| -> Result<TrajectoryDataset> {
            let ds = TrajectoryDataset::load(&dir.join(Self::DIRS[i]))?;
            if ds.provenance != prov {
                return Err(Error::format(
                    format!("{}/manifest.json", Self::DIRS[i]),
                    format!("expected provenance {prov:?}, found {:?}", ds.provenance),
                ));
            }
            Ok(ds)
        };
        Ok(Self {
            source_expert: load(0, ProvenanceTag::SourceExpert)?,
            source_random: load(1, ProvenanceTag::SourceRandom)?,
            target_random: load(2, ProvenanceTag::TargetRandom)?,
        })
    }
}

/// Fill one corpus to capacity with episodes of `behavior` in `domain`.
pub fn generate_corpus(
    spec: &CorpusSpec,
    domain: DomainTag,
    behavior: Behavior,
    provenance: ProvenanceTag,
    rng: &mut dyn RngCore,
) -> Result<TrajectoryDataset> {
    let mut env = make_env(spec.env, domain, spec.image_size, spec.episode_len);
    let mut ds = TrajectoryDataset::new(
        provenance,
        spec.image_size,
        spec.image_size,
        spec.seq_len,
        spec.capacity,
        env.state_dim(),
        env.action_dim(),
    );
    while ds.remaining() > 0 {
        let ep = record_episode(env.as_mut(), behavior, provenance, ds.remaining(), rng)?;
        ds.push_episode(ep)?;
    }
    Ok(ds)
}

/// Generate all three corpora; each draws from its own RNG stream of `seed`.
pub fn generate_corpora(spec: &CorpusSpec, seed: u64) -> Result<Corpora> {
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k);
        rng
    };
    Ok(Corpora {
        source_expert: generate_corpus(
            spec,
            DomainTag::Source,
            Behavior::Expert,
            ProvenanceTag::SourceExpert,
            &mut stream(1),
        )?,
        source_random: generate_corpus(
            spec,
            DomainTag::Source,
            Behavior::Random,
            ProvenanceTag::SourceRandom,
            &mut stream(2),
        )?,
        target_random: generate_corpus(
            spec,
            DomainTag::Target,
            Behavior::Random,
            ProvenanceTag::TargetRandom,
            &mut stream(3),
        )?,
    })
}
