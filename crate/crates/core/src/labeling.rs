//! Expertise labels for latent sequences, time labels for latent frames, and
//! the learner reward built from both.

use diffil_autodiff::{Activation, BnMode, Mlp, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DomainTag, ProvenanceTag};
use crate::error::{Error, Result};

/// Predictions are clipped to `[BCE_CLIP, 1 - BCE_CLIP]` inside the log.
pub const BCE_CLIP: f64 = 1e-7;
/// Keeps the reward finite when the label product reaches 1.
pub const REWARD_EPS: f64 = 1e-12;

/// `BatchNorm → [Dense + LeakyReLU]* → Dense(1, sigmoid)`.
pub fn label_net<R: Rng + ?Sized>(rng: &mut R, inputs: usize, hidden: &[usize], slope: f64) -> Mlp {
    Mlp::new(rng, inputs, hidden, 1, Activation::LeakyRelu(slope), Activation::Sigmoid, true)
}

/// Sequence label network `F_label,s` and frame label network `F_label,f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelNets {
    pub frame: Mlp,
    pub seq: Mlp,
}

impl LabelNets {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, feature_dim: usize, seq_len: usize, hidden: &[usize], slope: f64) -> Self {
        Self {
            frame: label_net(rng, feature_dim, hidden, slope),
            seq: label_net(rng, feature_dim * seq_len, hidden, slope),
        }
    }
}

/// `((t / H) + 1) / 2` for expert frames, 0 otherwise.
pub fn time_label(t: usize, horizon: usize, is_expert: bool) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::Invalid("episode length must be at least 1".into()));
    }
    if t > horizon {
        return Err(Error::Index { index: t, len: horizon + 1 });
    }
    Ok(if is_expert { (t as f64 / horizon as f64 + 1.0) / 2.0 } else { 0.0 })
}

/// Per-sample binary cross-entropy with soft targets, `[B, 1]`.
pub fn bce<'g>(pred: Var<'g>, target: Var<'g>) -> Var<'g> {
    let p = pred.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
    let one_minus_t = target.neg().add_scalar(1.0);
    let one_minus_p = p.neg().add_scalar(1.0);
    target.mul(p.ln()).add(one_minus_t.mul(one_minus_p.ln())).neg()
}

/// Scalar reference for [`bce`].
pub fn bce_value(pred: f64, target: f64) -> f64 {
    let p = pred.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Weights of the label losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelWeights {
    pub seq_source: f64,
    pub seq_target: f64,
    pub frame: f64,
}

/// `(λ^S E_S[BCE], λ^T E_T[BCE])` of the sequence label network, with target 1
/// exactly for source-expert sequences. Source and target sequences share one
/// batch-norm pass. Gradients reach the network and, through the latents, the
/// encoder.
pub fn seq_label_loss<'g>(
    net: &Mlp,
    p: &[Var<'g>],
    zseq_s: Var<'g>,
    prov_s: &[ProvenanceTag],
    zseq_t: Var<'g>,
    prov_t: &[ProvenanceTag],
    w: &LabelWeights,
) -> Result<(Var<'g>, Var<'g>)> {
    let (bs, bt) = (zseq_s.shape()[0], zseq_t.shape()[0]);
    if prov_s.len() != bs || prov_t.len() != bt || bs == 0 || bt == 0 {
        return Err(Error::Invalid("one provenance tag per sequence, in non-empty batches".into()));
    }
    if prov_s.iter().any(|p| p.domain() != DomainTag::Source) || prov_t.iter().any(|p| p.domain() != DomainTag::Target)
    {
        return Err(Error::Invalid("sequence label batches must be split by domain".into()));
    }
    let g = zseq_s.graph();
    let targets = |prov: &[ProvenanceTag]| {
        let v: Vec<f64> = prov.iter().map(|p| if p.is_expert() { 1.0 } else { 0.0 }).collect();
        g.constant(diffil_autodiff::Tensor::new(&[v.len(), 1], v))
    };
    let pred = net.forward(p, g.concat(&[zseq_s, zseq_t], 0), BnMode::Train);
    let loss_s = bce(pred.narrow(0, 0, bs), targets(prov_s)).mean().scale(w.seq_source);
    let loss_t = bce(pred.narrow(0, bs, bt), targets(prov_t)).mean().scale(w.seq_target);
    Ok((loss_s, loss_t))
}

/// `λ_f E[BCE(y, F_label,f(z))]` over source frames. The latents are detached
/// here, so only the frame label network is trained by this loss.
pub fn frame_label_loss<'g>(
    net: &Mlp,
    p: &[Var<'g>],
    z: Var<'g>,
    prov: &[ProvenanceTag],
    labels: &[f64],
    weight: f64,
) -> Result<Var<'g>> {
    let b = z.shape()[0];
    if prov.len() != b || labels.len() != b || b == 0 {
        return Err(Error::Invalid("one provenance tag and time label per frame, in a non-empty batch".into()));
    }
    if prov.iter().any(|p| p.domain() != DomainTag::Source) {
        return Err(Error::Invalid("frame labels are defined for source-domain frames only".into()));
    }
    let g = z.graph();
    let y = g.constant(diffil_autodiff::Tensor::new(&[b, 1], labels.to_vec()));
    let pred = net.forward(p, z.detach(), BnMode::Train);
    Ok(bce(pred, y).mean().scale(weight))
}

/// `−ln(1 − F_s F_f + ε)`.
pub fn reward(f_seq: f64, f_frame: f64) -> f64 {
    -(1.0 - f_seq * f_frame + REWARD_EPS).ln()
}

/// Reward when frame labels are disabled: `−ln(1 − F_s + ε)`.
pub fn sequence_only_reward(f_seq: f64) -> f64 {
    reward(f_seq, 1.0)
}

/// One row of a label/reward trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub episode: usize,
    pub t: usize,
    pub f_frame: f64,
    pub f_seq: f64,
    pub reward: f64,
}

/// Write a trace as CSV with header `episode,t,f_frame,f_seq,reward`.
pub fn write_trace<W: std::io::Write>(rows: &[TraceRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Invalid(format!("trace export failed: {e}")))?;
    }
    w.flush().map_err(|e| Error::Invalid(format!("trace export failed: {e}")))?;
    Ok(())
}
