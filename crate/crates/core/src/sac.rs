//! Soft actor-critic with a tanh-squashed Gaussian policy, twin Q-networks,
//! EMA targets and a learned entropy coefficient.

use diffil_autodiff::{Activation, Adam, BnMode, Graph, Mlp, Module, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    /// Defaults to `-action_dim`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_entropy: Option<f64>,
    pub initial_entropy_coef: f64,
}

/// Draw standard normal noise of the given shape.
pub fn normal_noise<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

/// A reparameterized squashed-Gaussian sample: `a = tanh(μ + σ ε)` and its
/// log-density including the tanh change of variables.
pub struct PolicySample<'g> {
    pub action: Var<'g>,
    pub log_prob: Var<'g>,
}

/// Sample actions for `states` using fixed noise `eps` (`[B, A]`).
pub fn sample_policy<'g>(policy: &Mlp, p: &[Var<'g>], states: Var<'g>, eps: &Tensor) -> PolicySample<'g> {
    let g = states.graph();
    let a_dim = eps.shape()[1];
    let b = eps.shape()[0];
    let out = policy.forward(p, states, BnMode::Eval);
    let mean = out.narrow(1, 0, a_dim);
    let log_std = out.narrow(1, a_dim, a_dim).clamp(LOG_STD_MIN, LOG_STD_MAX);
    let noise = g.constant(eps.clone());
    let u = mean.add(log_std.exp().mul(noise));
    let action = u.tanh();
    // log(1 - tanh(u)^2) = 2 (ln 2 - u - softplus(-2u)), stable for large |u|.
    let log_det = u.add(u.scale(-2.0).softplus()).neg().add_scalar(std::f64::consts::LN_2).scale(2.0);
    let gauss = g.constant(eps.map(|e| -0.5 * e * e - HALF_LN_2PI));
    let log_prob = gauss.sub(log_std).sub(log_det).sum_to(&[b, 1]);
    PolicySample { action, log_prob }
}

/// Deterministic action `tanh(μ)` for evaluation.
pub fn mean_action(policy: &Mlp, state: &[f64], action_dim: usize) -> Vec<f64> {
    let g = Graph::new();
    let p = policy.bind(&g, false);
    let out = policy.forward(&p, g.constant(Tensor::new(&[1, state.len()], state.to_vec())), BnMode::Eval);
    out.value().data()[..action_dim].iter().map(|m| m.tanh()).collect()
}

fn q_value<'g>(q: &Mlp, p: &[Var<'g>], states: Var<'g>, actions: Var<'g>) -> Var<'g> {
    q.forward(p, states.graph().concat(&[states, actions], 1), BnMode::Eval)
}

/// Soft Bellman target `r + γ (1 − done) (min Q' − λ log π)`.
pub fn soft_target(reward: f64, done: bool, next_q_min: f64, next_log_prob: f64, gamma: f64, alpha: f64) -> f64 {
    let cont = if done { 0.0 } else { 1.0 };
    reward + gamma * cont * (next_q_min - alpha * next_log_prob)
}

/// `½ E[(Q₁ − y)²] + ½ E[(Q₂ − y)²]` against precomputed (detached) targets `y`.
pub fn critic_loss<'g>(
    q1: &Mlp,
    p1: &[Var<'g>],
    q2: &Mlp,
    p2: &[Var<'g>],
    states: Var<'g>,
    actions: Var<'g>,
    targets: Var<'g>,
) -> Result<Var<'g>> {
    if states.shape()[0] == 0 {
        return Err(Error::Invalid("critic loss needs a non-empty batch".into()));
    }
    let y = targets.detach();
    let l1 = q_value(q1, p1, states, actions).sub(y).square().mean().scale(0.5);
    let l2 = q_value(q2, p2, states, actions).sub(y).square().mean().scale(0.5);
    Ok(l1.add(l2))
}

/// `E[λ log π(a|s) − min(Q₁, Q₂)(s, a)]` with reparameterized actions; bind the
/// critics as constants so that only the policy is trained. Also returns the
/// log-probabilities.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss<'g>(
    policy: &Mlp,
    pp: &[Var<'g>],
    q1: &Mlp,
    p1: &[Var<'g>],
    q2: &Mlp,
    p2: &[Var<'g>],
    states: Var<'g>,
    eps: &Tensor,
    alpha: f64,
) -> (Var<'g>, Var<'g>) {
    let s = sample_policy(policy, pp, states, eps);
    let a = q_value(q1, p1, states, s.action);
    let b = q_value(q2, p2, states, s.action);
    // min(a, b) = b - relu(b - a)
    let q_min = b.sub(b.sub(a).relu());
    (s.log_prob.scale(alpha).sub(q_min).mean(), s.log_prob)
}

/// `E[−exp(log λ) (log π + H̄)]`, differentiable in `log λ`.
pub fn entropy_loss<'g>(log_alpha: Var<'g>, log_probs: &Tensor, target_entropy: f64) -> Var<'g> {
    let shift = log_probs.data().iter().map(|lp| lp + target_entropy).sum::<f64>() / log_probs.len() as f64;
    log_alpha.exp().scale(-shift).sum()
}

/// `target ← (1 − τ) target + τ online`.
pub fn ema_update<M: Module>(online: &M, target: &mut M, tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Invalid(format!("EMA rate {tau} outside (0, 1]")));
    }
    for (t, o) in target.params_mut().into_iter().zip(online.params()) {
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = (1.0 - tau) * *tv + tau * ov;
        }
    }
    Ok(())
}

/// A replay minibatch with rewards filled in.
#[derive(Clone, Debug)]
pub struct SacBatch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub dones: Vec<bool>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SacStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub entropy_coef: f64,
    pub log_prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sac {
    pub policy: Mlp,
    pub q1: Mlp,
    pub q2: Mlp,
    pub q1_target: Mlp,
    pub q2_target: Mlp,
    pub log_alpha: f64,
    pub target_entropy: f64,
    pub gamma: f64,
    pub tau: f64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub opt_policy: Adam,
    pub opt_q1: Adam,
    pub opt_q2: Adam,
    pub opt_alpha: Adam,
}

impl Sac {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, state_dim: usize, action_dim: usize, cfg: &SacConfig) -> Result<Self> {
        if cfg.initial_entropy_coef <= 0.0 {
            return Err(Error::Config("initial entropy coefficient must be positive".into()));
        }
        let net = |rng: &mut R, i, o| Mlp::new(rng, i, &cfg.hidden, o, Activation::Relu, Activation::Identity, false);
        let policy = net(rng, state_dim, 2 * action_dim);
        let q1 = net(rng, state_dim + action_dim, 1);
        let q2 = net(rng, state_dim + action_dim, 1);
        Ok(Self {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
            log_alpha: cfg.initial_entropy_coef.ln(),
            target_entropy: cfg.target_entropy.unwrap_or(-(action_dim as f64)),
            gamma: cfg.gamma,
            tau: cfg.tau,
            state_dim,
            action_dim,
            opt_policy: Adam::new(cfg.lr),
            opt_q1: Adam::new(cfg.lr),
            opt_q2: Adam::new(cfg.lr),
            opt_alpha: Adam::new(cfg.lr),
        })
    }

    pub fn entropy_coef(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// A stochastic action for collection, or `tanh(μ)` when `deterministic`.
    pub fn act<R: Rng + ?Sized>(&self, state: &[f64], rng: &mut R, deterministic: bool) -> Vec<f64> {
        if deterministic {
            return mean_action(&self.policy, state, self.action_dim);
        }
        let g = Graph::new();
        let p = self.policy.bind(&g, false);
        let eps = normal_noise(rng, &[1, self.action_dim]);
        let s = sample_policy(&self.policy, &p, g.constant(Tensor::new(&[1, state.len()], state.to_vec())), &eps);
        let action = s.action.value().data().to_vec();
        action
    }

    /// Soft Bellman targets for a batch, from the EMA critics and fresh next actions.
    pub fn targets<R: Rng + ?Sized>(&self, batch: &SacBatch, rng: &mut R) -> Tensor {
        let b = batch.rewards.len();
        let g = Graph::new();
        let pp = self.policy.bind(&g, false);
        let next = g.constant(batch.next_states.clone());
        let s = sample_policy(&self.policy, &pp, next, &normal_noise(rng, &[b, self.action_dim]));
        let t1 = q_value(&self.q1_target, &self.q1_target.bind(&g, false), next, s.action);
        let t2 = q_value(&self.q2_target, &self.q2_target.bind(&g, false), next, s.action);
        let (t1, t2, lp) = (t1.value(), t2.value(), s.log_prob.value());
        let alpha = self.entropy_coef();
        Tensor::from_fn(&[b, 1], |i| {
            let q = t1.data()[i].min(t2.data()[i]);
            soft_target(batch.rewards[i], batch.dones[i], q, lp.data()[i], self.gamma, alpha)
        })
    }

    /// One critic, actor, entropy-coefficient and EMA update.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &SacBatch, rng: &mut R) -> Result<SacStats> {
        let b = batch.rewards.len();
        if b == 0 || batch.dones.len() != b {
            return Err(Error::Invalid("SAC batch must be non-empty with one done flag per reward".into()));
        }
        let y = self.targets(batch, rng);

        let critic_value = {
            let g = Graph::new();
            let p1 = self.q1.bind(&g, true);
            let p2 = self.q2.bind(&g, true);
            let s = g.constant(batch.states.clone());
            let a = g.constant(batch.actions.clone());
            let loss = critic_loss(&self.q1, &p1, &self.q2, &p2, s, a, g.constant(y))?;
            let value = ensure_finite("sac.critic", loss.item())?;
            let grads = g.grad(loss, &[p1.clone(), p2.clone()].concat(), false);
            let (g1, g2) = grads.split_at(p1.len());
            self.opt_q1.update(self.q1.params_mut(), &values(g1));
            self.opt_q2.update(self.q2.params_mut(), &values(g2));
            value
        };

        let eps = normal_noise(rng, &[b, self.action_dim]);
        let (actor_value, log_probs) = {
            let g = Graph::new();
            let pp = self.policy.bind(&g, true);
            let p1 = self.q1.bind(&g, false);
            let p2 = self.q2.bind(&g, false);
            let s = g.constant(batch.states.clone());
            let (loss, lp) =
                actor_loss(&self.policy, &pp, &self.q1, &p1, &self.q2, &p2, s, &eps, self.entropy_coef());
            let value = ensure_finite("sac.actor", loss.item())?;
            self.opt_policy.minimize(&mut self.policy, &g, loss, &pp);
            (value, (*lp.value()).clone())
        };

        self.entropy_step(&log_probs)?;
        ema_update(&self.q1, &mut self.q1_target, self.tau)?;
        ema_update(&self.q2, &mut self.q2_target, self.tau)?;
        Ok(SacStats {
            critic_loss: critic_value,
            actor_loss: actor_value,
            entropy_coef: self.entropy_coef(),
            log_prob: log_probs.sum() / b as f64,
        })
    }

    /// One Adam step on the entropy loss in log-space.
    pub fn entropy_step(&mut self, log_probs: &Tensor) -> Result<()> {
        let g = Graph::new();
        let la = g.leaf(Tensor::scalar(self.log_alpha));
        let loss = entropy_loss(la, log_probs, self.target_entropy);
        ensure_finite("sac.entropy", loss.item())?;
        let grad = g.grad(loss, &[la], false)[0].value();
        let mut param = Tensor::scalar(self.log_alpha);
        self.opt_alpha.update(vec![&mut param], &[(*grad).clone()]);
        self.log_alpha = param.item();
        Ok(())
    }
}

fn values(vars: &[Var<'_>]) -> Vec<Tensor> {
    vars.iter().map(|v| (*v.value()).clone()).collect()
}
