//! Post-hoc analysis of trained runs: cross-domain frame mapping, the
//! domain-confusion probe, learning-curve export and label traces.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use diffil_autodiff::{Activation, Adam, BnMode, Graph, Mlp, Module, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::data::{DomainTag, Frame, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::labeling::{bce, reward, sequence_only_reward, TraceRow};
use crate::orchestrator::{mean_std, MetricsRow, RunState};
use crate::perception::{frames_tensor, Encoder};
use crate::toyenv::{make_env, wrap_angle, EnvKind};

const ENCODE_CHUNK: usize = 256;

/// Scalar ground-truth position used to score mappings: `x` in DotWorld, the
/// pole angle divided by π in PoleWorld.
pub fn position(kind: EnvKind, state: &[f64]) -> f64 {
    match kind {
        EnvKind::DotWorld => state[0],
        EnvKind::PoleWorld => state[1].atan2(state[0]) / std::f64::consts::PI,
    }
}

/// Distance between two positions; angles wrap around.
pub fn position_error(kind: EnvKind, a: f64, b: f64) -> f64 {
    match kind {
        EnvKind::DotWorld => (a - b).abs(),
        EnvKind::PoleWorld => wrap_angle((a - b) * std::f64::consts::PI).abs() / std::f64::consts::PI,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub query: usize,
    /// Index of the nearest reference frame.
    pub nearest: usize,
    pub distance: f64,
    pub position_error: Option<f64>,
}

/// Nearest reference frame, by Euclidean feature distance, for every query frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MappingReport {
    pub entries: Vec<MappingEntry>,
}

impl MappingReport {
    /// Fraction of entries with a known position error of at most `tol`.
    pub fn fraction_within(&self, tol: f64) -> f64 {
        let known: Vec<f64> = self.entries.iter().filter_map(|e| e.position_error).collect();
        if known.is_empty() {
            return 0.0;
        }
        known.iter().filter(|&&e| e <= tol).count() as f64 / known.len() as f64
    }

    pub fn median_position_error(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.entries.iter().filter_map(|e| e.position_error).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(&self.entries, path)
    }
}

/// Match query features `[Q, F]` to reference features `[R, F]`. Ties go to
/// the lowest reference index.
pub fn nearest_neighbors(queries: &Tensor, references: &Tensor) -> Result<Vec<(usize, f64)>> {
    let (qs, rs) = (queries.shape(), references.shape());
    if qs.len() != 2 || rs.len() != 2 || qs[1] != rs[1] {
        return Err(Error::Shape { expected: vec![0, rs.get(1).copied().unwrap_or(0)], got: qs.to_vec() });
    }
    if rs[0] == 0 {
        return Err(Error::Invalid("no reference frames to map onto".into()));
    }
    let f = qs[1];
    let refs = references.data();
    Ok(queries
        .data()
        .chunks_exact(f.max(1))
        .map(|q| {
            let mut best = (0, f64::INFINITY);
            for (j, r) in refs.chunks_exact(f.max(1)).enumerate() {
                let d: f64 = q.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            (best.0, best.1.sqrt())
        })
        .collect())
}

/// Map `queries` onto every frame of `corpus` through `encoder`. When query
/// positions are given and the corpus stores states, each entry carries the
/// ground-truth position error of its match.
pub fn map_frames(
    encoder: &Encoder,
    kind: EnvKind,
    queries: &[&Frame],
    query_positions: Option<&[f64]>,
    corpus: &TrajectoryDataset,
) -> Result<MappingReport> {
    if let Some(p) = query_positions {
        if p.len() != queries.len() {
            return Err(Error::Invalid(format!("{} positions for {} query frames", p.len(), queries.len())));
        }
    }
    let n = corpus.total_frames();
    let refs: Vec<&Frame> = (0..n).map(|i| corpus.frame(i).map(|f| f.as_ref())).collect::<Result<_>>()?;
    let ref_positions: Option<Vec<f64>> = (0..n)
        .map(|i| corpus.state(i).map(|s| s.map(|s| position(kind, &s.iter().map(|&v| v as f64).collect::<Vec<_>>()))))
        .collect::<Result<Option<Vec<_>>>>()?;
    let zq = encoder.encode_frames(queries, ENCODE_CHUNK)?;
    let zr = encoder.encode_frames(&refs, ENCODE_CHUNK)?;
    let entries = nearest_neighbors(&zq, &zr)?
        .into_iter()
        .enumerate()
        .map(|(i, (j, d))| MappingEntry {
            query: i,
            nearest: j,
            distance: d,
            position_error: match (query_positions, &ref_positions) {
                (Some(q), Some(r)) => Some(position_error(kind, q[i], r[j])),
                _ => None,
            },
        })
        .collect();
    Ok(MappingReport { entries })
}

/// Map the `recent` newest learner frames of a run onto its source-expert corpus.
pub fn map_learner_frames(state: &RunState, recent: usize) -> Result<MappingReport> {
    let n = state.learner.len();
    let recent: Vec<_> = state.learner.iter().skip(n.saturating_sub(recent)).collect();
    if recent.is_empty() {
        return Err(Error::Invalid("the learner buffer is empty".into()));
    }
    let frames: Vec<&Frame> = recent.iter().map(|t| t.obs_seq.last().as_ref()).collect();
    let kind = state.config.env.kind;
    let positions: Vec<f64> = recent.iter().map(|t| position(kind, &t.next_state)).collect();
    map_frames(&state.model.perception.encoder, kind, &frames, Some(&positions), &state.corpora.source_expert)
}

/// Settings of the domain-confusion probe classifier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOptions {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub train_fraction: f64,
    /// Permute the labels before splitting (chance-level control).
    pub shuffle_labels: bool,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { hidden: 16, lr: 1e-2, epochs: 200, train_fraction: 0.7, shuffle_labels: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
}

/// Smallest split the probe accepts on either side.
pub const MIN_PROBE_SPLIT: usize = 10;

/// Train a fresh one-hidden-layer classifier to predict `labels` from the rows
/// of `inputs` and report held-out accuracy. Inputs are standardized with
/// training-split statistics; training is full-batch.
pub fn train_probe(inputs: &Tensor, labels: &[bool], opts: &ProbeOptions, rng: &mut dyn RngCore) -> Result<ProbeResult> {
    let s = inputs.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Shape { expected: vec![labels.len(), 0], got: s.to_vec() });
    }
    let (n, d) = (s[0], s[1]);
    let n_train = (n as f64 * opts.train_fraction).round() as usize;
    if n_train < MIN_PROBE_SPLIT || n - n_train < MIN_PROBE_SPLIT {
        return Err(Error::Invalid(format!(
            "{n} samples are too few for a {:.0}/{:.0} split with at least {MIN_PROBE_SPLIT} on each side",
            100.0 * opts.train_fraction,
            100.0 * (1.0 - opts.train_fraction)
        )));
    }
    let mut labels = labels.to_vec();
    if opts.shuffle_labels {
        labels.shuffle(rng);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (train, test) = order.split_at(n_train);

    let mut mean = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for &i in train {
        for (j, v) in inputs.data()[i * d..(i + 1) * d].iter().enumerate() {
            mean[j] += v;
            sq[j] += v * v;
        }
    }
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            mean[j] /= n_train as f64;
            let var = sq[j] / n_train as f64 - mean[j] * mean[j];
            if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 }
        })
        .collect();
    let rows = |idx: &[usize]| {
        Tensor::from_fn(&[idx.len(), d], |k| {
            let (r, j) = (k / d, k % d);
            (inputs.data()[idx[r] * d + j] - mean[j]) * scale[j]
        })
    };
    let targets = |idx: &[usize]| Tensor::new(&[idx.len(), 1], idx.iter().map(|&i| labels[i] as u8 as f64).collect());
    let (x_train, y_train) = (rows(train), targets(train));

    let mut net = Mlp::new(rng, d, &[opts.hidden], 1, Activation::Relu, Activation::Sigmoid, false);
    let mut opt = Adam::new(opts.lr);
    for _ in 0..opts.epochs {
        let g = Graph::new();
        let p = net.bind(&g, true);
        let loss = bce(net.forward(&p, g.constant(x_train.clone()), BnMode::Eval), g.constant(y_train.clone())).mean();
        opt.minimize(&mut net, &g, loss, &p);
    }
    let accuracy = |idx: &[usize]| {
        let g = Graph::new();
        let p = net.bind(&g, false);
        let pred = net.forward(&p, g.constant(rows(idx)), BnMode::Eval).value();
        let hits = pred.data().iter().zip(idx).filter(|(&v, &i)| (v >= 0.5) == labels[i]).count();
        hits as f64 / idx.len() as f64
    };
    Ok(ProbeResult {
        train_accuracy: accuracy(train),
        test_accuracy: accuracy(test),
        train_size: train.len(),
        test_size: test.len(),
    })
}

/// Frames rendered from the same states in both domains.
pub struct PairedFrames {
    pub source: Vec<Frame>,
    pub target: Vec<Frame>,
}

/// Draw `count` states uniformly from the corpora's recorded states and render
/// each in both domains, so the two classes differ in appearance only.
pub fn paired_frames(
    kind: EnvKind,
    image_size: usize,
    corpora: &[&TrajectoryDataset],
    count: usize,
    rng: &mut dyn RngCore,
) -> Result<PairedFrames> {
    let mut states: Vec<Vec<f64>> = Vec::new();
    for ds in corpora {
        for i in 0..ds.total_frames() {
            if let Some(s) = ds.state(i)? {
                states.push(s.iter().map(|&v| v as f64).collect());
            }
        }
    }
    if states.is_empty() {
        return Err(Error::Invalid("the corpora store no states to render".into()));
    }
    let render = |domain: DomainTag, picks: &[usize]| -> Result<Vec<Frame>> {
        let mut env = make_env(kind, domain, image_size, 1);
        picks
            .iter()
            .map(|&i| {
                env.set_state(&states[i]);
                Frame::new(env.render(), image_size, image_size, 0, 1, domain_provenance(domain))
            })
            .collect()
    };
    let picks: Vec<usize> = (0..count).map(|_| rng.random_range(0..states.len())).collect();
    Ok(PairedFrames { source: render(DomainTag::Source, &picks)?, target: render(DomainTag::Target, &picks)? })
}

fn domain_provenance(domain: DomainTag) -> crate::data::ProvenanceTag {
    use crate::data::ProvenanceTag;
    match domain {
        DomainTag::Source => ProvenanceTag::SourceRandom,
        DomainTag::Target => ProvenanceTag::TargetRandom,
    }
}

/// What the probe classifier sees.
#[derive(Clone, Copy)]
pub enum ProbeInput<'a> {
    Pixels,
    Features(&'a Encoder),
}

/// Probe whether domain identity is recoverable from `pairs`; label `true`
/// marks target-domain frames.
pub fn probe_domain(
    pairs: &PairedFrames,
    input: ProbeInput<'_>,
    opts: &ProbeOptions,
    rng: &mut dyn RngCore,
) -> Result<ProbeResult> {
    let frames: Vec<&Frame> = pairs.source.iter().chain(&pairs.target).collect();
    let x = match input {
        ProbeInput::Pixels => {
            let t = frames_tensor(&frames)?;
            let n = frames.len();
            let d = t.len() / n.max(1);
            Tensor::new(&[n, d], t.into_data())
        }
        ProbeInput::Features(enc) => enc.encode_frames(&frames, ENCODE_CHUNK)?,
    };
    let labels: Vec<bool> = frames.iter().map(|f| f.domain() == DomainTag::Target).collect();
    train_probe(&x, &labels, opts, rng)
}

/// One row of an exported learning curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
}

pub fn curve_rows(metrics: &[MetricsRow]) -> Result<Vec<CurveRow>> {
    if metrics.is_empty() {
        return Err(Error::Invalid("the metrics log has no rows".into()));
    }
    Ok(metrics
        .iter()
        .map(|m| CurveRow {
            iteration: m.iteration,
            env_steps: m.env_steps,
            eval_return_mean: m.eval_return_mean,
            eval_return_std: m.eval_return_std,
        })
        .collect())
}

/// Curve averaged over runs: per iteration, the mean and sample standard
/// deviation of the runs' mean eval returns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub iteration: usize,
    pub env_steps: f64,
    pub runs: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
}

/// Aggregate over iterations present in every run.
pub fn aggregate_curves(runs: &[Vec<MetricsRow>]) -> Result<Vec<AggregateRow>> {
    let first = runs.first().ok_or_else(|| Error::Invalid("no runs to aggregate".into()))?;
    if runs.iter().any(|r| r.is_empty()) {
        return Err(Error::Invalid("a run has an empty metrics log".into()));
    }
    let mut out = Vec::new();
    for row in first {
        let matched: Option<Vec<&MetricsRow>> =
            runs.iter().map(|r| r.iter().find(|m| m.iteration == row.iteration)).collect();
        let Some(matched) = matched else { continue };
        let evals: Vec<f64> = matched.iter().map(|m| m.eval_return_mean).collect();
        let steps: Vec<f64> = matched.iter().map(|m| m.env_steps as f64).collect();
        let (mean, std) = mean_std(&evals);
        out.push(AggregateRow {
            iteration: row.iteration,
            env_steps: mean_std(&steps).0,
            runs: runs.len(),
            eval_return_mean: mean,
            eval_return_std: std,
        });
    }
    Ok(out)
}

pub fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(Error::io(path))
}

/// Plain SVG plot of mean eval return against iteration with a ±std band.
pub fn curve_svg(rows: &[AggregateRow], title: &str) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let xs: Vec<f64> = rows.iter().map(|r| r.iteration as f64).collect();
    let lo = rows.iter().map(|r| r.eval_return_mean - r.eval_return_std).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.eval_return_mean + r.eval_return_std).fold(f64::NEG_INFINITY, f64::max);
    let (x0, x1) = (xs.first().copied().unwrap_or(0.0), xs.last().copied().unwrap_or(1.0));
    let (y0, y1) = if hi > lo { (lo, hi) } else { (lo - 1.0, lo + 1.0) };
    let px = |x: f64| m + (x - x0) / (x1 - x0).max(1e-9) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut band = String::new();
    for r in rows {
        let _ = write!(band, "{:.1},{:.1} ", px(r.iteration as f64), py(r.eval_return_mean + r.eval_return_std));
    }
    for r in rows.iter().rev() {
        let _ = write!(band, "{:.1},{:.1} ", px(r.iteration as f64), py(r.eval_return_mean - r.eval_return_std));
    }
    let line: String =
        rows.iter().map(|r| format!("{:.1},{:.1} ", px(r.iteration as f64), py(r.eval_return_mean))).collect();
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{m}\" y=\"30\" font-family=\"sans-serif\" font-size=\"16\">{title}</text>\n\
         <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{m}\" y=\"{lab}\" font-family=\"sans-serif\" font-size=\"12\">iteration {x0} to {x1}; return {y0:.2} to {y1:.2}</text>\n\
         <polygon points=\"{band}\" fill=\"steelblue\" fill-opacity=\"0.25\"/>\n\
         <polyline points=\"{line}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\"/>\n\
         </svg>\n",
        b = h - m,
        r = w - m,
        lab = h - 15.0,
    )
}

pub fn write_svg(rows: &[AggregateRow], title: &str, path: &Path) -> Result<()> {
    fs::write(path, curve_svg(rows, title)).map_err(Error::io(path))
}

/// Roll out the deterministic policy and record label scores and the learned
/// reward at every step.
pub fn label_trace<R: Rng>(state: &RunState, episodes: usize, rng: &mut R) -> Result<(Vec<TraceRow>, Vec<f64>)> {
    use crate::data::{pad_sequence, ProvenanceTag};
    use std::sync::Arc;

    let cfg = &state.config;
    let mut env = make_env(cfg.env.kind, DomainTag::Target, cfg.env.image_size, cfg.env.episode_len);
    let (h, w) = env.image_size();
    let horizon = env.episode_len();
    let enc = &state.model.perception.encoder;
    let full = cfg.effective_alpha() > 0.0;
    let (mut rows, mut returns) = (Vec::new(), Vec::new());
    for episode in 0..episodes {
        let mut s = env.reset(rng);
        let mut frames = vec![Arc::new(Frame::new(env.render(), h, w, 0, horizon, ProvenanceTag::TargetLearner)?)];
        let mut total = 0.0;
        loop {
            let step = env.step(&state.sac.act(&s, rng, true));
            total += step.eval_reward;
            let t = frames.len();
            frames.push(Arc::new(Frame::new(step.frame, h, w, t, horizon, ProvenanceTag::TargetLearner)?));
            let seq = pad_sequence(&frames, t, cfg.model.seq_len)?;
            let refs: Vec<&Frame> = seq.frames().iter().map(|f| f.as_ref()).collect();
            let z = enc.encode_frames(&refs, ENCODE_CHUNK)?;
            let zseq = z.clone().reshape(&[1, z.len()]);
            let (fs, ff) = state.model.label_predictions(&zseq);
            let r = if full { reward(fs[0], ff[0]) } else { sequence_only_reward(fs[0]) };
            rows.push(TraceRow { episode, t, f_frame: ff[0], f_seq: fs[0], reward: r });
            s = step.state;
            if step.done {
                break;
            }
        }
        returns.push(total);
    }
    Ok((rows, returns))
}
