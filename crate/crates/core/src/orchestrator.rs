//! The outer training loop: model training (critics every step, encoder,
//! decoders and label networks every `n`-th step), SAC on label-derived
//! rewards, then a fresh batch of learner transitions.
//!
//! All randomness inside iteration `i` comes from one ChaCha8 stream derived
//! from the seed and `i`, so a run restored from a checkpoint continues
//! exactly as the uninterrupted run would.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use diffil_autodiff::{Adam, BnMode, Graph, Mlp, Module, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{
    disc_terms, gen_terms, gradient_penalty, unified_disc, unified_gen, Critics, UpdateSchedule, WganWeights,
};
use crate::checkpoint::{load_learner, load_module, read_json, save_learner, save_module, write_json};
use crate::config::{ExperimentConfig, Variant};
use crate::data::{DomainTag, Frame, FrameSequence, LearnerBuffer, ProvenanceTag, Transition};
use crate::error::{ensure_finite, Error, Result};
use crate::labeling::{
    frame_label_loss, reward, seq_label_loss, sequence_only_reward, time_label, LabelNets, LabelWeights,
};
use crate::perception::{enc_dec_loss_from_latents, frames_tensor, sequences_tensor, BoundPerception, Perception};
use crate::sac::{Sac, SacBatch, SacStats};
use crate::toyenv::{make_env, Corpora, Environment};

const INIT_STREAM: u64 = 100;
const PREFILL_STREAM: u64 = 101;
const ITERATION_STREAM: u64 = 1000;
const ENCODE_CHUNK: usize = 256;
const STATE_FORMAT: &str = "diffil-run-v1";

/// One entry of an iteration's event log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    /// Critic update only.
    C,
    /// Critic update followed by the encoder/decoder/label update.
    CG,
    /// One SAC update.
    R,
    /// Learner buffer refresh.
    Collect,
}

/// Source and target sequences of one model step, with what the label losses need.
#[derive(Clone, Debug)]
pub struct DomainBatch {
    pub sequences: Vec<FrameSequence>,
    pub provenance: Vec<ProvenanceTag>,
    /// Time label of each sequence's last frame.
    pub time_labels: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ModelBatch {
    pub source: DomainBatch,
    pub target: DomainBatch,
}

fn push_sequence(b: &mut DomainBatch, seq: FrameSequence) -> Result<()> {
    let last = seq.last();
    b.time_labels.push(time_label(last.t(), last.episode_len(), last.provenance().is_expert())?);
    b.provenance.push(seq.provenance());
    b.sequences.push(seq);
    Ok(())
}

/// Draw `size` source sequences uniformly from `B^SE ∪ B^SR` and `size` target
/// sequences uniformly from `B^TR ∪ B^TL`.
pub fn sample_model_batch<R: Rng + ?Sized>(
    corpora: &Corpora,
    learner: &LearnerBuffer,
    size: usize,
    rng: &mut R,
) -> Result<ModelBatch> {
    let (se, sr, tr) = (&corpora.source_expert, &corpora.source_random, &corpora.target_random);
    if se.total_frames() == 0 || sr.total_frames() == 0 || tr.total_frames() == 0 {
        return Err(Error::Config("static corpora must all be non-empty".into()));
    }
    let empty = || DomainBatch {
        sequences: Vec::with_capacity(size),
        provenance: Vec::with_capacity(size),
        time_labels: Vec::with_capacity(size),
    };
    let (mut source, mut target) = (empty(), empty());
    for _ in 0..size {
        let i = rng.random_range(0..se.total_frames() + sr.total_frames());
        let seq = if i < se.total_frames() { se.sequence(i)? } else { sr.sequence(i - se.total_frames())? };
        push_sequence(&mut source, seq)?;
        let j = rng.random_range(0..tr.total_frames() + learner.len());
        let seq = if j < tr.total_frames() {
            tr.sequence(j)?
        } else {
            learner.get(j - tr.total_frames()).expect("index in range").obs_seq.clone()
        };
        push_sequence(&mut target, seq)?;
    }
    Ok(ModelBatch { source, target })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOptimizers {
    pub encoder: Adam,
    pub decoder_source: Adam,
    pub decoder_target: Adam,
    pub critic_frame: Adam,
    pub critic_seq: Adam,
    pub label_frame: Adam,
    pub label_seq: Adam,
}

/// Perception, critics, label networks and their optimizers.
#[derive(Clone, Debug)]
pub struct Model {
    pub perception: Perception,
    pub critics: Critics,
    pub labels: LabelNets,
    pub opt: ModelOptimizers,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &ExperimentConfig) -> Result<Self> {
        let m = &cfg.model;
        let perception = Perception::new(rng, &cfg.conv_arch())?;
        let critics = Critics::new(rng, m.feature_dim, m.seq_len, &m.critic_hidden, m.leaky_slope);
        let labels = LabelNets::new(rng, m.feature_dim, m.seq_len, &m.label_hidden, m.leaky_slope);
        let adam = || Adam::new(cfg.lr);
        let opt = ModelOptimizers {
            encoder: adam(),
            decoder_source: adam(),
            decoder_target: adam(),
            critic_frame: adam(),
            critic_seq: adam(),
            label_frame: adam(),
            label_seq: adam(),
        };
        Ok(Self { perception, critics, labels, opt })
    }

    fn networks(&self) -> [(&'static str, &dyn Module); 7] {
        [
            ("encoder", &self.perception.encoder),
            ("decoder_source", &self.perception.decoder_source),
            ("decoder_target", &self.perception.decoder_target),
            ("critic_frame", &self.critics.frame),
            ("critic_seq", &self.critics.seq),
            ("label_frame", &self.labels.frame),
            ("label_seq", &self.labels.seq),
        ]
    }

    fn networks_mut(&mut self) -> [(&'static str, &mut dyn Module); 7] {
        [
            ("encoder", &mut self.perception.encoder),
            ("decoder_source", &mut self.perception.decoder_source),
            ("decoder_target", &mut self.perception.decoder_target),
            ("critic_frame", &mut self.critics.frame),
            ("critic_seq", &mut self.critics.seq),
            ("label_frame", &mut self.labels.frame),
            ("label_seq", &mut self.labels.seq),
        ]
    }

    /// Frozen-network label predictions `(F_s, F_f)` for `[N, L·F]` sequence latents.
    pub fn label_predictions(&self, zseq: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (n, width) = (zseq.shape()[0], zseq.shape()[1]);
        let f = self.perception.encoder.feature_dim();
        let z = Tensor::from_fn(&[n, f], |i| zseq.data()[(i / f) * width + width - f + i % f]);
        (predict(&self.labels.seq, zseq), predict(&self.labels.frame, &z))
    }
}

fn predict(net: &Mlp, x: &Tensor) -> Vec<f64> {
    let g = Graph::new();
    let p = net.bind(&g, false);
    net.forward(&p, g.constant(x.clone()), BnMode::Eval).value().data().to_vec()
}

fn stack(a: &Tensor, b: &Tensor) -> Tensor {
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    Tensor::new(&shape, [a.data(), b.data()].concat())
}

/// Mean of each logged quantity over one iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub disc_f: f64,
    pub disc_s: f64,
    pub gp: f64,
    pub unified_disc: f64,
    pub gen_f: f64,
    pub gen_s: f64,
    pub unified_gen: f64,
    pub recon: f64,
    pub fcon: f64,
    pub label_seq_source: f64,
    pub label_seq_target: f64,
    pub label_frame: f64,
    pub sac_critic: f64,
    pub sac_actor: f64,
    pub entropy_coef: f64,
    pub mean_reward: f64,
    pub train_return: f64,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub wall_clock_s: f64,
}

impl MetricsRow {
    /// Equality ignoring wall-clock time.
    pub fn same_values(&self, other: &Self) -> bool {
        Self { wall_clock_s: 0.0, ..self.clone() } == Self { wall_clock_s: 0.0, ..other.clone() }
    }
}

/// What one iteration did.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationReport {
    pub events: Vec<Event>,
    pub metrics: MetricsRow,
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn get(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
}

/// Everything needed to continue a run.
pub struct RunState {
    pub config: ExperimentConfig,
    pub iteration: usize,
    pub env_steps: usize,
    pub model: Model,
    pub sac: Sac,
    pub corpora: Corpora,
    pub learner: LearnerBuffer,
    pub metrics: Vec<MetricsRow>,
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn check_corpora(cfg: &ExperimentConfig, corpora: &Corpora) -> Result<()> {
    let env = make_env(cfg.env.kind, DomainTag::Target, cfg.env.image_size, cfg.env.episode_len);
    for ds in corpora.iter() {
        if ds.total_frames() == 0 {
            return Err(Error::Config(format!("corpus {:?} is empty", ds.provenance)));
        }
        if ds.height != cfg.env.image_size || ds.width != cfg.env.image_size {
            return Err(Error::Config(format!(
                "corpus {:?} has {}x{} frames but the config expects {}x{}",
                ds.provenance, ds.height, ds.width, cfg.env.image_size, cfg.env.image_size
            )));
        }
        if ds.seq_len != cfg.model.seq_len {
            return Err(Error::Config(format!(
                "corpus {:?} was built for sequences of {}, config uses {}",
                ds.provenance, ds.seq_len, cfg.model.seq_len
            )));
        }
        if ds.state_dim != env.state_dim() || ds.action_dim != env.action_dim() {
            return Err(Error::Config(format!("corpus {:?} does not match the configured environment", ds.provenance)));
        }
    }
    Ok(())
}

/// Per-step choice of action during a rollout.
pub enum Actor<'a> {
    Random,
    Policy { sac: &'a Sac, deterministic: bool },
}

impl Actor<'_> {
    fn act<R: Rng + ?Sized>(&self, state: &[f64], action_dim: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Actor::Random => (0..action_dim).map(|_| rng.random_range(-1.0..=1.0)).collect(),
            Actor::Policy { sac, deterministic } => sac.act(state, rng, *deterministic),
        }
    }
}

/// Collect exactly `count` learner transitions, starting a new episode
/// whenever one ends. Returns the transitions and the ground-truth returns of
/// the episodes that finished.
pub fn collect_transitions<R: Rng>(
    env: &mut dyn Environment,
    actor: &Actor<'_>,
    seq_len: usize,
    count: usize,
    rng: &mut R,
) -> Result<(Vec<Transition>, Vec<f64>)> {
    let (h, w) = env.image_size();
    let horizon = env.episode_len();
    let mut out = Vec::with_capacity(count);
    let mut returns = Vec::new();
    while out.len() < count {
        let mut state = env.reset(rng);
        let mut frames = vec![Arc::new(Frame::new(env.render(), h, w, 0, horizon, ProvenanceTag::TargetLearner)?)];
        let mut total = 0.0;
        while out.len() < count {
            let action = actor.act(&state, env.action_dim(), rng);
            let step = env.step(&action);
            total += step.eval_reward;
            let t = frames.len();
            frames.push(Arc::new(Frame::new(step.frame, h, w, t, horizon, ProvenanceTag::TargetLearner)?));
            let seq = crate::data::pad_sequence(&frames, t, seq_len)?;
            let action = action.iter().map(|a| a.clamp(-1.0, 1.0)).collect();
            out.push(Transition::new(state, action, step.state.clone(), seq, step.terminal)?);
            state = step.state;
            if step.done {
                returns.push(total);
                break;
            }
        }
    }
    Ok((out, returns))
}

/// Ground-truth returns of `episodes` deterministic policy rollouts.
pub fn evaluate_policy<R: Rng>(env: &mut dyn Environment, sac: &Sac, episodes: usize, rng: &mut R) -> Vec<f64> {
    (0..episodes)
        .map(|_| {
            let mut state = env.reset(rng);
            let mut total = 0.0;
            loop {
                let step = env.step(&sac.act(&state, rng, true));
                total += step.eval_reward;
                state = step.state;
                if step.done {
                    return total;
                }
            }
        })
        .collect()
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Encoded latents of a model batch, without gradients.
struct Latents {
    zseq_s: Tensor,
    zseq_t: Tensor,
    z_s: Tensor,
    z_t: Tensor,
}

#[derive(Default)]
struct ModelStepLog {
    disc_f: Mean,
    disc_s: Mean,
    gp: Mean,
    unified_disc: Mean,
    gen_f: Mean,
    gen_s: Mean,
    unified_gen: Mean,
    recon: Mean,
    fcon: Mean,
    label_seq_source: Mean,
    label_seq_target: Mean,
    label_frame: Mean,
}

impl RunState {
    /// Fresh networks and a learner buffer pre-filled with random-policy transitions.
    pub fn new(config: ExperimentConfig, corpora: Corpora) -> Result<Self> {
        config.validate()?;
        check_corpora(&config, &corpora)?;
        let mut rng = stream(config.seed, INIT_STREAM);
        let model = Model::new(&mut rng, &config)?;
        let mut env = make_env(config.env.kind, DomainTag::Target, config.env.image_size, config.env.episode_len);
        let sac = Sac::new(&mut rng, env.state_dim(), env.action_dim(), &config.sac)?;
        let s = &config.schedule;
        let mut learner = LearnerBuffer::new(s.learner_capacity);
        let mut rng = stream(config.seed, PREFILL_STREAM);
        let (prefill, _) =
            collect_transitions(env.as_mut(), &Actor::Random, config.model.seq_len, s.learner_prefill, &mut rng)?;
        learner.refresh(prefill)?;
        Ok(Self { config, iteration: 0, env_steps: 0, model, sac, corpora, learner, metrics: Vec::new() })
    }

    fn wgan_weights(&self) -> WganWeights {
        let l = &self.config.losses;
        WganWeights {
            alpha: self.config.effective_alpha(),
            lambda_disc: l.lambda_disc,
            lambda_gen: l.lambda_gen,
            lambda_gp: l.lambda_gp,
        }
    }

    fn full(&self) -> bool {
        self.config.variant == Variant::Full
    }

    fn encode_batch(&self, batch: &ModelBatch) -> Result<Latents> {
        let enc = &self.model.perception.encoder;
        let l = self.config.model.seq_len;
        let encode = |b: &DomainBatch| -> Result<Tensor> {
            let seqs: Vec<&FrameSequence> = b.sequences.iter().collect();
            let z = enc.encode(&sequences_tensor(&seqs)?)?;
            let n = b.sequences.len();
            Ok(z.reshape(&[n, l * enc.feature_dim()]))
        };
        let (zseq_s, zseq_t) = (encode(&batch.source)?, encode(&batch.target)?);
        let last = |zs: &Tensor| {
            let f = enc.feature_dim();
            let w = zs.shape()[1];
            Tensor::from_fn(&[zs.shape()[0], f], |i| zs.data()[(i / f) * w + w - f + i % f])
        };
        Ok(Latents { z_s: last(&zseq_s), z_t: last(&zseq_t), zseq_s, zseq_t })
    }

    fn critic_step(&mut self, batch: &ModelBatch, rng: &mut ChaCha8Rng, log: &mut ModelStepLog) -> Result<()> {
        let lat = self.encode_batch(batch)?;
        let w = self.wgan_weights();
        let delta: Vec<f64> = (0..lat.z_s.shape()[0]).map(|_| rng.random::<f64>()).collect();
        let critics = &self.model.critics;
        let g = Graph::new();
        let pf = critics.frame.bind(&g, true);
        let ps = critics.seq.bind(&g, true);
        let c = |t: &Tensor| g.constant(t.clone());
        let (df, ds) = disc_terms(critics, &pf, &ps, c(&lat.z_s), c(&lat.z_t), c(&lat.zseq_s), c(&lat.zseq_t))?;
        let gp = gradient_penalty(
            &g, critics, &pf, &ps, &lat.z_s, &lat.z_t, &lat.zseq_s, &lat.zseq_t, w.alpha, &delta,
        )?;
        let loss = unified_disc(df, ds, gp, &w);
        log.disc_f.add(ensure_finite("disc_f", df.item())?);
        log.disc_s.add(ensure_finite("disc_s", ds.item())?);
        log.gp.add(ensure_finite("gp", gp.item())?);
        log.unified_disc.add(ensure_finite("unified_disc", loss.item())?);
        let grads = g.grad(loss, &[pf.clone(), ps.clone()].concat(), false);
        let grads: Vec<Tensor> = grads.iter().map(|v| (*v.value()).clone()).collect();
        let (gf, gs) = grads.split_at(pf.len());
        let m = &mut self.model;
        if w.alpha > 0.0 {
            m.opt.critic_frame.update(m.critics.frame.params_mut(), gf);
            m.critics.frame.observe_batch(&stack(&lat.z_s, &lat.z_t));
        }
        m.opt.critic_seq.update(m.critics.seq.params_mut(), gs);
        m.critics.seq.observe_batch(&stack(&lat.zseq_s, &lat.zseq_t));
        Ok(())
    }

    fn generator_step(&mut self, batch: &ModelBatch, log: &mut ModelStepLog) -> Result<()> {
        let cfg = &self.config;
        let (l, full) = (cfg.model.seq_len, self.full());
        let w = self.wgan_weights();
        let lw = LabelWeights {
            seq_source: cfg.losses.lambda_label_seq_source,
            seq_target: cfg.losses.lambda_label_seq_target,
            frame: cfg.losses.lambda_label_frame,
        };
        let m = &self.model;
        let f = m.perception.encoder.feature_dim();
        let g = Graph::new();
        let bp = BoundPerception::bind(&m.perception, &g, true);
        let pf = m.critics.frame.bind(&g, false);
        let ps = m.critics.seq.bind(&g, false);
        let pls = m.labels.seq.bind(&g, true);
        let plf = m.labels.frame.bind(&g, full);

        let pixels = |b: &DomainBatch| sequences_tensor(&b.sequences.iter().collect::<Vec<_>>());
        let last_pixels = |b: &DomainBatch| frames_tensor(&b.sequences.iter().map(|s| s.last().as_ref()).collect::<Vec<_>>());
        let enc = &m.perception.encoder;
        let zseq_s = enc.forward_sequence(&bp.encoder, g.constant(pixels(&batch.source)?), l);
        let zseq_t = enc.forward_sequence(&bp.encoder, g.constant(pixels(&batch.target)?), l);
        let z_s = zseq_s.narrow(1, (l - 1) * f, f);
        let z_t = zseq_t.narrow(1, (l - 1) * f, f);

        let (gf, gs) = gen_terms(&m.critics, &pf, &ps, z_s, z_t, zseq_s, zseq_t)?;
        let ugen = unified_gen(gf, gs, &w);
        let obs_s = g.constant(last_pixels(&batch.source)?);
        let obs_t = g.constant(last_pixels(&batch.target)?);
        let ed = enc_dec_loss_from_latents(
            &m.perception,
            &bp,
            obs_s,
            z_s,
            obs_t,
            z_t,
            cfg.losses.lambda_recon,
            cfg.losses.lambda_fcon,
        );
        let (lss, lst) =
            seq_label_loss(&m.labels.seq, &pls, zseq_s, &batch.source.provenance, zseq_t, &batch.target.provenance, &lw)?;
        let mut total = ugen.add(ed.total).add(lss).add(lst);
        let mut vars = bp.all();
        vars.extend(&pls);
        if full {
            let lf = frame_label_loss(
                &m.labels.frame,
                &plf,
                z_s,
                &batch.source.provenance,
                &batch.source.time_labels,
                lw.frame,
            )?;
            log.label_frame.add(ensure_finite("label_frame", lf.item())?);
            total = total.add(lf);
            vars.extend(&plf);
        }
        log.gen_f.add(ensure_finite("gen_f", gf.item())?);
        log.gen_s.add(ensure_finite("gen_s", gs.item())?);
        log.unified_gen.add(ensure_finite("unified_gen", ugen.item())?);
        log.recon.add(ensure_finite("recon", ed.recon.item())?);
        log.fcon.add(ensure_finite("fcon", ed.fcon.item())?);
        log.label_seq_source.add(ensure_finite("label_seq_source", lss.item())?);
        log.label_seq_target.add(ensure_finite("label_seq_target", lst.item())?);
        ensure_finite("generator_total", total.item())?;

        let grads: Vec<Tensor> = g.grad(total, &vars, false).iter().map(|v| (*v.value()).clone()).collect();
        let zseq_joint = stack(&zseq_s.value(), &zseq_t.value());
        let z_src = (*z_s.value()).clone();
        let counts = [bp.encoder.len(), bp.decoder_source.len(), bp.decoder_target.len(), pls.len(), plf.len()];

        let m = &mut self.model;
        let mut rest = grads.as_slice();
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        m.opt.encoder.update(m.perception.encoder.params_mut(), take(counts[0]));
        m.opt.decoder_source.update(m.perception.decoder_source.params_mut(), take(counts[1]));
        m.opt.decoder_target.update(m.perception.decoder_target.params_mut(), take(counts[2]));
        m.opt.label_seq.update(m.labels.seq.params_mut(), take(counts[3]));
        m.labels.seq.observe_batch(&zseq_joint);
        if full {
            m.opt.label_frame.update(m.labels.frame.params_mut(), take(counts[4]));
            m.labels.frame.observe_batch(&z_src);
        }
        Ok(())
    }

    /// Rewards of every learner transition from the current (frozen) label networks.
    pub fn learner_rewards(&self) -> Result<Vec<f64>> {
        let mut index: HashMap<*const Frame, usize> = HashMap::new();
        let mut unique: Vec<&Frame> = Vec::new();
        let ids: Vec<Vec<usize>> = self
            .learner
            .iter()
            .map(|tr| {
                tr.obs_seq
                    .frames()
                    .iter()
                    .map(|f| {
                        *index.entry(Arc::as_ptr(f)).or_insert_with(|| {
                            unique.push(f.as_ref());
                            unique.len() - 1
                        })
                    })
                    .collect()
            })
            .collect();
        let enc = &self.model.perception.encoder;
        let feats = enc.encode_frames(&unique, ENCODE_CHUNK)?;
        let f = enc.feature_dim();
        let l = self.config.model.seq_len;
        let mut rewards = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(1024) {
            let zseq = Tensor::from_fn(&[chunk.len(), l * f], |i| {
                let (row, col) = (i / (l * f), i % (l * f));
                feats.data()[chunk[row][col / f] * f + col % f]
            });
            let (fs, ff) = self.model.label_predictions(&zseq);
            for (s, fr) in fs.iter().zip(&ff) {
                let r = if self.full() { reward(*s, *fr) } else { sequence_only_reward(*s) };
                rewards.push(ensure_finite("reward", r)?);
            }
        }
        Ok(rewards)
    }

    fn sac_batch<R: Rng>(&self, rewards: &[f64], rng: &mut R) -> SacBatch {
        let n = self.config.sac.batch_size;
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.learner.len())).collect();
        let rows = |f: &dyn Fn(&Transition) -> &[f64]| {
            let v: Vec<&[f64]> = idx.iter().map(|&i| f(self.learner.get(i).expect("index in range"))).collect();
            let w = v[0].len();
            Tensor::stack_rows(&v, &[w])
        };
        SacBatch {
            states: rows(&|t| &t.state),
            actions: rows(&|t| &t.action),
            rewards: idx.iter().map(|&i| rewards[i]).collect(),
            next_states: rows(&|t| &t.next_state),
            dones: idx.iter().map(|&i| self.learner.get(i).expect("index in range").done).collect(),
        }
    }

    /// Run one iteration of the outer loop.
    pub fn run_iteration(&mut self) -> Result<IterationReport> {
        let start = Instant::now();
        let s = self.config.schedule.clone();
        let schedule = UpdateSchedule::new(s.generator_period)?;
        let mut rng = stream(self.config.seed, ITERATION_STREAM + self.iteration as u64);
        let mut events = Vec::with_capacity(s.model_steps + s.rl_steps + 1);
        let mut log = ModelStepLog::default();

        for k in 1..=s.model_steps {
            let batch = sample_model_batch(&self.corpora, &self.learner, s.model_batch, &mut rng)?;
            self.critic_step(&batch, &mut rng, &mut log)?;
            if schedule.is_generator_step(k) {
                self.generator_step(&batch, &mut log)?;
                events.push(Event::CG);
            } else {
                events.push(Event::C);
            }
        }

        let rewards = self.learner_rewards()?;
        let mut sac_log = [Mean::default(), Mean::default()];
        let mut stats = SacStats { entropy_coef: self.sac.entropy_coef(), ..Default::default() };
        for _ in 0..s.rl_steps {
            let batch = self.sac_batch(&rewards, &mut rng);
            stats = self.sac.update(&batch, &mut rng)?;
            sac_log[0].add(stats.critic_loss);
            sac_log[1].add(stats.actor_loss);
            events.push(Event::R);
        }

        let cfg = &self.config;
        let mut env = make_env(cfg.env.kind, DomainTag::Target, cfg.env.image_size, cfg.env.episode_len);
        let actor = Actor::Policy { sac: &self.sac, deterministic: false };
        let (fresh, train_returns) =
            collect_transitions(env.as_mut(), &actor, cfg.model.seq_len, s.refresh_count, &mut rng)?;
        self.learner.refresh(fresh)?;
        self.env_steps += s.refresh_count;
        events.push(Event::Collect);

        let eval = evaluate_policy(env.as_mut(), &self.sac, s.eval_episodes, &mut rng);
        let (eval_mean, eval_std) = mean_std(&eval);
        self.iteration += 1;
        let metrics = MetricsRow {
            iteration: self.iteration,
            env_steps: self.env_steps,
            disc_f: log.disc_f.get(),
            disc_s: log.disc_s.get(),
            gp: log.gp.get(),
            unified_disc: log.unified_disc.get(),
            gen_f: log.gen_f.get(),
            gen_s: log.gen_s.get(),
            unified_gen: log.unified_gen.get(),
            recon: log.recon.get(),
            fcon: log.fcon.get(),
            label_seq_source: log.label_seq_source.get(),
            label_seq_target: log.label_seq_target.get(),
            label_frame: log.label_frame.get(),
            sac_critic: sac_log[0].get(),
            sac_actor: sac_log[1].get(),
            entropy_coef: stats.entropy_coef,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            train_return: mean_std(&train_returns).0,
            eval_return_mean: eval_mean,
            eval_return_std: eval_std,
            wall_clock_s: start.elapsed().as_secs_f64(),
        };
        self.metrics.push(metrics.clone());
        Ok(IterationReport { events, metrics })
    }

    /// Write a complete checkpoint into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let nets = dir.join("networks");
        fs::create_dir_all(&nets).map_err(Error::io(&nets))?;
        for (name, net) in self.model.networks() {
            save_module(net, &nets.join(format!("{name}.net")))?;
        }
        for (name, net) in self.sac.networks() {
            save_module(net, &nets.join(format!("{name}.net")))?;
        }
        let opts = Optimizers { model: self.model.opt.clone(), sac: self.sac.optimizers() };
        write_json(&opts, &dir.join("optimizers.json"))?;
        save_learner(&self.learner, &dir.join("learner"))?;
        let state = SavedState {
            format: STATE_FORMAT.into(),
            config: self.config.clone(),
            iteration: self.iteration,
            env_steps: self.env_steps,
            log_alpha: self.sac.log_alpha,
            metrics: self.metrics.clone(),
        };
        write_json(&state, &dir.join("state.json"))
    }

    /// Restore a checkpoint written by [`RunState::save`].
    pub fn load(dir: &Path, corpora: Corpora) -> Result<Self> {
        let saved: SavedState = read_json(&dir.join("state.json"), "checkpoint state")?;
        if saved.format != STATE_FORMAT {
            return Err(Error::format("format", format!("expected `{STATE_FORMAT}`, found `{}`", saved.format)));
        }
        let config = saved.config;
        config.validate()?;
        check_corpora(&config, &corpora)?;
        let mut rng = stream(config.seed, INIT_STREAM);
        let mut model = Model::new(&mut rng, &config)?;
        let env = make_env(config.env.kind, DomainTag::Target, config.env.image_size, config.env.episode_len);
        let mut sac = Sac::new(&mut rng, env.state_dim(), env.action_dim(), &config.sac)?;
        let nets = dir.join("networks");
        for (name, net) in model.networks_mut() {
            load_module(net, &nets.join(format!("{name}.net")))?;
        }
        for (name, net) in sac.networks_mut() {
            load_module(net, &nets.join(format!("{name}.net")))?;
        }
        let opts: Optimizers = read_json(&dir.join("optimizers.json"), "optimizer state")?;
        model.opt = opts.model;
        sac.set_optimizers(opts.sac);
        sac.log_alpha = saved.log_alpha;
        let learner = load_learner(&dir.join("learner"))?;
        if learner.capacity() != config.schedule.learner_capacity {
            return Err(Error::format("learner", "buffer capacity differs from the config"));
        }
        Ok(Self {
            config,
            iteration: saved.iteration,
            env_steps: saved.env_steps,
            model,
            sac,
            corpora,
            learner,
            metrics: saved.metrics,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Optimizers {
    model: ModelOptimizers,
    sac: [Adam; 4],
}

#[derive(Serialize, Deserialize)]
struct SavedState {
    format: String,
    config: ExperimentConfig,
    iteration: usize,
    env_steps: usize,
    log_alpha: f64,
    metrics: Vec<MetricsRow>,
}

impl Sac {
    fn networks(&self) -> [(&'static str, &dyn Module); 5] {
        [
            ("policy", &self.policy),
            ("q1", &self.q1),
            ("q2", &self.q2),
            ("q1_target", &self.q1_target),
            ("q2_target", &self.q2_target),
        ]
    }

    fn networks_mut(&mut self) -> [(&'static str, &mut dyn Module); 5] {
        [
            ("policy", &mut self.policy),
            ("q1", &mut self.q1),
            ("q2", &mut self.q2),
            ("q1_target", &mut self.q1_target),
            ("q2_target", &mut self.q2_target),
        ]
    }

    fn optimizers(&self) -> [Adam; 4] {
        [self.opt_policy.clone(), self.opt_q1.clone(), self.opt_q2.clone(), self.opt_alpha.clone()]
    }

    fn set_optimizers(&mut self, [p, q1, q2, a]: [Adam; 4]) {
        self.opt_policy = p;
        self.opt_q1 = q1;
        self.opt_q2 = q2;
        self.opt_alpha = a;
    }
}

/// Layout of a run directory.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn checkpoint(&self, iteration: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("iter_{iteration:06}"))
    }

    fn latest_pointer(&self) -> PathBuf {
        self.root.join("checkpoints").join("latest")
    }

    /// The most recent complete checkpoint, if any.
    pub fn latest(&self) -> Result<Option<PathBuf>> {
        let p = self.latest_pointer();
        if !p.exists() {
            return Ok(None);
        }
        let name = fs::read_to_string(&p).map_err(Error::io(&p))?;
        let dir = self.root.join("checkpoints").join(name.trim());
        if !dir.join("state.json").exists() {
            return Err(Error::Missing { what: "checkpoint referenced by `latest`".into(), path: dir });
        }
        Ok(Some(dir))
    }

    fn mark_latest(&self, iteration: usize) -> Result<()> {
        let p = self.latest_pointer();
        fs::write(&p, format!("iter_{iteration:06}\n")).map_err(Error::io(&p))
    }
}

/// Write the metrics log from scratch.
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        w.write_record(metrics_header()).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush().map_err(Error::io(path))
}

fn metrics_header() -> Vec<String> {
    let mut w = csv::Writer::from_writer(vec![]);
    w.serialize(MetricsRow::default()).expect("in-memory write");
    let bytes = w.into_inner().expect("in-memory flush");
    let text = String::from_utf8(bytes).expect("utf-8");
    text.lines().next().unwrap_or_default().split(',').map(str::to_string).collect()
}

fn append_metrics(path: &Path, row: &MetricsRow) -> Result<()> {
    let file = fs::OpenOptions::new().append(true).open(path).map_err(Error::io(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.serialize(row).map_err(|e| Error::Invalid(e.to_string()))?;
    w.flush().map_err(Error::io(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    if !path.exists() {
        return Err(Error::Missing { what: "metrics log".into(), path: path.to_path_buf() });
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path.display().to_string(), e.to_string())))
        .collect()
}

/// Train until `config.schedule.iterations`, resuming from the run directory's
/// latest checkpoint when one exists. `on_iteration` sees every new row.
pub fn train(
    config: ExperimentConfig,
    corpora: Corpora,
    run: &RunDir,
    on_iteration: &mut dyn FnMut(&MetricsRow),
) -> Result<RunState> {
    fs::create_dir_all(&run.root).map_err(Error::io(&run.root))?;
    let mut state = match run.latest()? {
        Some(dir) => {
            let state = RunState::load(&dir, corpora)?;
            if state.config != config {
                return Err(Error::Config(format!(
                    "{} holds a run with a different configuration; use another output directory",
                    run.root.display()
                )));
            }
            state
        }
        None => {
            config.save(&run.config())?;
            RunState::new(config, corpora)?
        }
    };
    // Rows written after the checkpoint belong to iterations that will be redone.
    write_metrics(&run.metrics(), &state.metrics)?;
    let s = state.config.schedule.clone();
    while state.iteration < s.iterations {
        let report = state.run_iteration()?;
        append_metrics(&run.metrics(), &report.metrics)?;
        on_iteration(&report.metrics);
        if state.iteration % s.checkpoint_every == 0 || state.iteration == s.iterations {
            state.save(&run.checkpoint(state.iteration))?;
            run.mark_latest(state.iteration)?;
        }
    }
    Ok(state)
}
