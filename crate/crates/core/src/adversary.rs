//! WGAN critics on frame and sequence latents, the gradient penalty, and the
//! critic/generator update schedule.
//!
//! Both critics see the source and target batches as one concatenated batch,
//! so batch normalization uses joint statistics and cannot erase the domain gap
//! it is supposed to measure.

use diffil_autodiff::{Activation, BnMode, Graph, Mlp, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `BatchNorm → [Dense + LeakyReLU]* → Dense(1)`.
pub fn critic_net<R: Rng + ?Sized>(rng: &mut R, inputs: usize, hidden: &[usize], slope: f64) -> Mlp {
    Mlp::new(rng, inputs, hidden, 1, Activation::LeakyRelu(slope), Activation::Identity, true)
}

/// Frame critic `D_f` and sequence critic `D_s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critics {
    pub frame: Mlp,
    pub seq: Mlp,
}

impl Critics {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, feature_dim: usize, seq_len: usize, hidden: &[usize], slope: f64) -> Self {
        Self {
            frame: critic_net(rng, feature_dim, hidden, slope),
            seq: critic_net(rng, feature_dim * seq_len, hidden, slope),
        }
    }
}

/// Loss weights of the unified WGAN objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WganWeights {
    /// Share of the frame-level terms; `1 - alpha` goes to the sequence level.
    pub alpha: f64,
    pub lambda_disc: f64,
    pub lambda_gen: f64,
    pub lambda_gp: f64,
}

/// Scalar values of every WGAN term, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WganLossTerms {
    pub disc_f: f64,
    pub disc_s: f64,
    pub gen_f: f64,
    pub gen_s: f64,
    pub gp: f64,
    pub unified_disc: f64,
    pub unified_gen: f64,
}

fn check_batches(zs: &[usize], zt: &[usize], what: &str) -> Result<()> {
    if zs.len() != 2 || zs != zt || zs[0] == 0 {
        return Err(Error::Invalid(format!("{what}: source {zs:?} and target {zt:?} batches must be matching non-empty [B, D]")));
    }
    Ok(())
}

/// `mean D(z_t) − mean D(z_s)` with one joint batch-norm pass.
pub fn critic_gap<'g>(critic: &Mlp, p: &[Var<'g>], z_s: Var<'g>, z_t: Var<'g>) -> Result<Var<'g>> {
    check_batches(&z_s.shape(), &z_t.shape(), "critic batch")?;
    let b = z_s.shape()[0];
    let joint = z_s.graph().concat(&[z_s, z_t], 0);
    let d = critic.forward(p, joint, BnMode::Train);
    Ok(d.narrow(0, b, b).mean().sub(d.narrow(0, 0, b).mean()))
}

/// Critic losses `(disc_f, disc_s)`. Pass detached latents so that only the
/// critics (bound as leaves) receive gradients.
pub fn disc_terms<'g>(
    critics: &Critics,
    pf: &[Var<'g>],
    ps: &[Var<'g>],
    z_s: Var<'g>,
    z_t: Var<'g>,
    zseq_s: Var<'g>,
    zseq_t: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    check_batches(&zseq_s.shape(), &zseq_t.shape(), "sequence batch")?;
    if z_s.shape()[0] != zseq_s.shape()[0] {
        return Err(Error::Invalid("frame and sequence batches must have equal size".into()));
    }
    Ok((critic_gap(&critics.frame, pf, z_s, z_t)?, critic_gap(&critics.seq, ps, zseq_s, zseq_t)?))
}

/// Generator losses `(gen_f, gen_s)`, the sign-flipped critic gaps. Bind the
/// critics as constants so that only the encoder receives gradients.
pub fn gen_terms<'g>(
    critics: &Critics,
    pf: &[Var<'g>],
    ps: &[Var<'g>],
    z_s: Var<'g>,
    z_t: Var<'g>,
    zseq_s: Var<'g>,
    zseq_t: Var<'g>,
) -> Result<(Var<'g>, Var<'g>)> {
    let (f, s) = disc_terms(critics, pf, ps, z_s, z_t, zseq_s, zseq_t)?;
    Ok((f.neg(), s.neg()))
}

/// `E[(‖[α ∇D_f(x_f) ; (1−α) ∇D_s(x_s)]‖ − 1)²]` at the per-sample interpolates
/// `x = δ z_s + (1 − δ) z_t`, one `δ` per sample shared by both critics. The
/// result is differentiable w.r.t. the bound critic parameters.
#[allow(clippy::too_many_arguments)]
pub fn gradient_penalty<'g>(
    g: &'g Graph,
    critics: &Critics,
    pf: &[Var<'g>],
    ps: &[Var<'g>],
    z_s: &Tensor,
    z_t: &Tensor,
    zseq_s: &Tensor,
    zseq_t: &Tensor,
    alpha: f64,
    delta: &[f64],
) -> Result<Var<'g>> {
    check_batches(z_s.shape(), z_t.shape(), "penalty frame batch")?;
    check_batches(zseq_s.shape(), zseq_t.shape(), "penalty sequence batch")?;
    let b = z_s.shape()[0];
    if delta.len() != b || zseq_s.shape()[0] != b {
        return Err(Error::Invalid(format!("need one interpolation factor per sample ({b}), got {}", delta.len())));
    }
    if let Some(d) = delta.iter().find(|d| !(0.0..=1.0).contains(*d)) {
        return Err(Error::Invalid(format!("interpolation factor {d} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let mix = |a: &Tensor, c: &Tensor| {
        let w = a.shape()[1];
        Tensor::from_fn(a.shape(), |i| {
            let d = delta[i / w];
            d * a.data()[i] + (1.0 - d) * c.data()[i]
        })
    };
    let mut parts = Vec::with_capacity(2);
    for (critic, p, a, c, weight) in
        [(&critics.frame, pf, z_s, z_t, alpha), (&critics.seq, ps, zseq_s, zseq_t, 1.0 - alpha)]
    {
        if weight == 0.0 {
            continue;
        }
        let x = g.leaf(mix(a, c));
        let out = critic.forward(p, x, BnMode::Train).sum();
        parts.push(g.grad(out, &[x], true)[0].scale(weight));
    }
    let grads = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1) };
    let norm = grads.square().sum_to(&[b, 1]).sqrt();
    Ok(norm.add_scalar(-1.0).square().mean())
}

/// `λ_disc (α disc_f + (1−α) disc_s) + λ_gp gp`.
pub fn unified_disc<'g>(disc_f: Var<'g>, disc_s: Var<'g>, gp: Var<'g>, w: &WganWeights) -> Var<'g> {
    disc_f
        .scale(w.alpha)
        .add(disc_s.scale(1.0 - w.alpha))
        .scale(w.lambda_disc)
        .add(gp.scale(w.lambda_gp))
}

/// `λ_gen (α gen_f + (1−α) gen_s)`.
pub fn unified_gen<'g>(gen_f: Var<'g>, gen_s: Var<'g>, w: &WganWeights) -> Var<'g> {
    gen_f.scale(w.alpha).add(gen_s.scale(1.0 - w.alpha)).scale(w.lambda_gen)
}

/// Critics update every model step; the encoder, decoders and label networks
/// update on steps `k` (1-based) with `k mod period == 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateSchedule {
    period: usize,
}

impl UpdateSchedule {
    pub fn new(period: usize) -> Result<Self> {
        if period == 0 {
            return Err(Error::Config("generator period n must be at least 1".into()));
        }
        Ok(Self { period })
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn is_generator_step(&self, k: usize) -> bool {
        k.is_multiple_of(self.period)
    }

    /// Generator mask for steps `1..=steps`.
    pub fn mask(&self, steps: usize) -> Vec<bool> {
        (1..=steps).map(|k| self.is_generator_step(k)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_counts() {
        let s = UpdateSchedule::new(5).unwrap();
        let mask = s.mask(100);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 20);
        assert_eq!(UpdateSchedule::new(1).unwrap().mask(7), vec![true; 7]);
        assert!(UpdateSchedule::new(0).is_err());
        let ten: Vec<usize> = s.mask(10).iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i + 1).collect();
        assert_eq!(ten, [5, 10]);
    }
}
