//! Closed-form values of every loss term, exact to 1e-9.

use diffil_autodiff::{Activation, Graph, Mlp, Module, Tensor, Var};
use diffil_core::adversary::{
    disc_terms, gen_terms, gradient_penalty, unified_disc, unified_gen, Critics, UpdateSchedule, WganWeights,
};
use diffil_core::data::ProvenanceTag;
use diffil_core::labeling::{
    bce, bce_value, frame_label_loss, reward, seq_label_loss, sequence_only_reward, time_label, LabelWeights,
    REWARD_EPS,
};
use diffil_core::sac::{critic_loss, ema_update, entropy_loss, soft_target};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXACT: f64 = 1e-9;

fn close(a: f64, b: f64) {
    assert!((a - b).abs() < EXACT, "{a} vs {b}");
}

/// Single dense layer `x ↦ w·x + b` with the given output activation.
fn linear(w: &[f64], b: f64, out: Activation) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut m = Mlp::new(&mut rng, w.len(), &[], 1, Activation::Identity, out, false);
    let mut p = m.params_mut();
    p[0].data_mut().copy_from_slice(w);
    p[1].data_mut()[0] = b;
    m
}

fn critics(frame: &[f64], seq: &[f64]) -> Critics {
    Critics { frame: linear(frame, 0.0, Activation::Identity), seq: linear(seq, 0.0, Activation::Identity) }
}

fn rows<'g>(g: &'g Graph, width: usize, data: &[f64]) -> Var<'g> {
    g.constant(Tensor::new(&[data.len() / width, width], data.to_vec()))
}

#[test]
pub fn identity_critic_gap_is_difference_of_means() {
    let c = critics(&[1.0], &[1.0, 1.0]);
    let g = Graph::new();
    let (pf, ps) = (c.frame.bind(&g, false), c.seq.bind(&g, false));
    let (df, ds) =
        disc_terms(&c, &pf, &ps, rows(&g, 1, &[2.0]), rows(&g, 1, &[1.0]), rows(&g, 2, &[2.0, 0.0]), rows(&g, 2, &[1.0, 3.0]))
            .unwrap();
    close(df.item(), -1.0);
    close(ds.item(), 2.0);
}

#[test]
pub fn linear_critic_gap_over_a_batch() {
    // D(z) = 2 z0 − z1 + 0.5 ; the bias cancels.
    let c = Critics { frame: linear(&[2.0, -1.0], 0.5, Activation::Identity), seq: linear(&[1.0], 0.0, Activation::Identity) };
    let g = Graph::new();
    let (pf, ps) = (c.frame.bind(&g, false), c.seq.bind(&g, false));
    let zs = rows(&g, 2, &[1.0, 0.0, 3.0, 2.0]); // D: 2.5, 4.5
    let zt = rows(&g, 2, &[0.0, 1.0, -1.0, -1.0]); // D: -0.5, -0.5
    let (df, _) = disc_terms(&c, &pf, &ps, zs, zt, rows(&g, 1, &[0.0, 0.0]), rows(&g, 1, &[0.0, 0.0])).unwrap();
    close(df.item(), -0.5 - 3.5);
    let (gf, gs) = gen_terms(&c, &pf, &ps, zs, zt, rows(&g, 1, &[0.0, 0.0]), rows(&g, 1, &[0.0, 0.0])).unwrap();
    close(gf.item(), 4.0);
    close(gs.item(), 0.0);
}

#[test]
pub fn unified_objectives_mix_levels_by_alpha() {
    let g = Graph::new();
    let w = WganWeights { alpha: 0.25, lambda_disc: 2.0, lambda_gen: 0.5, lambda_gp: 10.0 };
    let d = unified_disc(g.scalar(1.0), g.scalar(-3.0), g.scalar(0.1), &w);
    close(d.item(), 2.0 * (0.25 - 2.25) + 1.0);
    let gen = unified_gen(g.scalar(-1.0), g.scalar(3.0), &w);
    close(gen.item(), 0.5 * (-0.25 + 2.25));
}

fn penalty(c: &Critics, alpha: f64, delta: &[f64]) -> f64 {
    let g = Graph::new();
    let (pf, ps) = (c.frame.bind(&g, true), c.seq.bind(&g, true));
    let b = delta.len();
    let (fw, sw) = (c.frame.inputs(), c.seq.inputs());
    let t = |w: usize, s: f64| Tensor::from_fn(&[b, w], |i| s * (i as f64 + 1.0).sin());
    gradient_penalty(&g, c, &pf, &ps, &t(fw, 1.0), &t(fw, -2.0), &t(sw, 0.5), &t(sw, 3.0), alpha, delta)
        .unwrap()
        .item()
}

#[test]
pub fn penalty_of_linear_critics_is_squared_norm_excess() {
    close(penalty(&critics(&[2.0], &[7.0]), 1.0, &[0.3]), 1.0);
    close(penalty(&critics(&[3.0, 4.0], &[7.0]), 1.0, &[0.3, 0.9]), 16.0);
    close(penalty(&critics(&[0.2], &[7.0]), 1.0, &[0.5]), 0.64);
    close(penalty(&critics(&[7.0], &[0.0, 0.5]), 0.0, &[0.5]), 0.25);
}

#[test]
pub fn penalty_weights_each_critic_gradient_by_its_level_share() {
    // [0.5·(1.2, 0) ; 0.5·(0, 1.6)] has norm 1.
    let c = critics(&[1.2, 0.0], &[0.0, 1.6]);
    close(penalty(&c, 0.5, &[0.0, 0.4, 1.0]), 0.0);
    // [0.25·(4) ; 0.75·(0, 0)] → (1 − 1)² = 0 ; with α = 0.5 → (2 − 1)² = 1.
    let c = critics(&[4.0], &[0.0, 0.0]);
    close(penalty(&c, 0.25, &[0.7]), 0.0);
    close(penalty(&c, 0.5, &[0.7]), 1.0);
}

#[test]
pub fn penalty_of_linear_critics_ignores_the_interpolation_point() {
    let c = critics(&[0.3, -0.4, 1.0], &[2.0, 0.1]);
    let base = penalty(&c, 0.6, &[0.0, 0.0]);
    for delta in [[1.0, 1.0], [0.5, 0.2], [0.99, 0.01]] {
        close(penalty(&c, 0.6, &delta), base);
    }
    let expected = (0.36_f64 * (0.09 + 0.16 + 1.0) + 0.16 * 4.01).sqrt() - 1.0;
    close(base, expected * expected);
}

#[test]
pub fn cross_entropy_at_its_own_target() {
    close(bce_value(0.5, 0.5), std::f64::consts::LN_2);
    let h = |p: f64| -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
    close(h(0.75), 0.562_335_144_618_808_3);
    for p in [0.1, 0.25, 0.75, 0.9, 0.999] {
        close(bce_value(p, p), h(p));
    }
    let g = Graph::new();
    let ps = [0.2, 0.5, 0.75];
    let t = g.constant(Tensor::new(&[3, 1], ps.to_vec()));
    let out = bce(t, t).value();
    for (v, p) in out.data().iter().zip(ps) {
        close(*v, h(p));
    }
}

#[test]
pub fn label_losses_of_an_uninformative_net_are_ln2() {
    // Zero weights: every prediction is sigmoid(0) = 1/2.
    let net = linear(&[0.0, 0.0], 0.0, Activation::Sigmoid);
    let g = Graph::new();
    let p = net.bind(&g, true);
    let w = LabelWeights { seq_source: 1.0, seq_target: 0.5, frame: 3.0 };
    let (ls, lt) = seq_label_loss(
        &net,
        &p,
        rows(&g, 2, &[1.0, 2.0, 3.0, 4.0]),
        &[ProvenanceTag::SourceExpert, ProvenanceTag::SourceRandom],
        rows(&g, 2, &[5.0, 6.0]),
        &[ProvenanceTag::TargetLearner],
        &w,
    )
    .unwrap();
    close(ls.item(), std::f64::consts::LN_2);
    close(lt.item(), 0.5 * std::f64::consts::LN_2);
    let lf = frame_label_loss(
        &net,
        &p,
        rows(&g, 2, &[1.0, 2.0, 3.0, 4.0]),
        &[ProvenanceTag::SourceExpert, ProvenanceTag::SourceRandom],
        &[0.75, 0.0],
        w.frame,
    )
    .unwrap();
    close(lf.item(), 3.0 * std::f64::consts::LN_2);
}

#[test]
pub fn label_losses_reject_wrong_domains() {
    let net = linear(&[0.0], 0.0, Activation::Sigmoid);
    let g = Graph::new();
    let p = net.bind(&g, true);
    let w = LabelWeights { seq_source: 1.0, seq_target: 1.0, frame: 1.0 };
    let z = rows(&g, 1, &[1.0]);
    assert!(seq_label_loss(&net, &p, z, &[ProvenanceTag::TargetRandom], z, &[ProvenanceTag::TargetLearner], &w).is_err());
    assert!(frame_label_loss(&net, &p, z, &[ProvenanceTag::TargetLearner], &[0.0], 1.0).is_err());
}

#[test]
pub fn reward_spans_its_bounds() {
    close(reward(0.0, 0.0), -(1.0 + REWARD_EPS).ln());
    close(reward(0.0, 0.7), -(1.0 + REWARD_EPS).ln());
    close(reward(1.0, 1.0), -REWARD_EPS.ln());
    close(reward(1.0, 1.0), 27.631_021_115_928_547);
    close(reward(0.5, 0.5), -(0.75_f64 + REWARD_EPS).ln());
    close(sequence_only_reward(0.4), reward(0.4, 1.0));
    assert!(reward(0.0, 0.0).abs() < 1e-11);
}

#[test]
pub fn time_label_endpoints() {
    close(time_label(0, 50, true).unwrap(), 0.5);
    close(time_label(50, 50, true).unwrap(), 1.0);
    close(time_label(25, 50, true).unwrap(), 0.75);
    close(time_label(17, 50, false).unwrap(), 0.0);
    assert!(time_label(51, 50, true).is_err());
    assert!(time_label(0, 0, true).is_err());
}

#[test]
pub fn generator_steps_every_nth_model_step() {
    let s = UpdateSchedule::new(5).unwrap();
    let mask = s.mask(100);
    assert_eq!(mask.iter().filter(|m| **m).count(), 20);
    assert_eq!(&mask[..5], &[false, false, false, false, true]);
    assert!(UpdateSchedule::new(1).unwrap().mask(7).iter().all(|m| *m));
    assert!(UpdateSchedule::new(0).is_err());
}

#[test]
pub fn soft_bellman_target_by_hand() {
    // 1 + 0.99 (2 − 0.2 · (−0.5)) = 3.079
    close(soft_target(1.0, false, 2.0, -0.5, 0.99, 0.2), 3.079);
    close(soft_target(1.0, true, 2.0, -0.5, 0.99, 0.2), 1.0);
}

#[test]
pub fn twin_critic_loss_by_hand() {
    // Inputs [s | a] = [1 | 2]; Q1 = s + a = 3, Q2 = a = 2, y = 2.5.
    let (q1, q2) = (linear(&[1.0, 1.0], 0.0, Activation::Identity), linear(&[0.0, 1.0], 0.0, Activation::Identity));
    let g = Graph::new();
    let (p1, p2) = (q1.bind(&g, true), q2.bind(&g, true));
    let l = critic_loss(&q1, &p1, &q2, &p2, rows(&g, 1, &[1.0]), rows(&g, 1, &[2.0]), rows(&g, 1, &[2.5])).unwrap();
    close(l.item(), 0.5 * 0.25 + 0.5 * 0.25);
}

#[test]
pub fn entropy_coefficient_rises_when_entropy_is_below_target() {
    let g = Graph::new();
    let la = g.leaf(Tensor::scalar(0.2_f64.ln()));
    // mean(log π) + H̄ = (0.5 + 1.5)/2 + (−1) = 0 → zero loss.
    close(entropy_loss(la, &Tensor::new(&[2, 1], vec![0.5, 1.5]), -1.0).item(), 0.0);
    // Confident policy: log π = 2 > −H̄ = 1; descent must increase log λ.
    let loss = entropy_loss(la, &Tensor::new(&[1, 1], vec![2.0]), -1.0);
    close(loss.item(), -0.2);
    let grad = g.grad(loss, &[la], false)[0].item();
    close(grad, -0.2);
}

#[test]
pub fn polyak_averaging() {
    let online = linear(&[2.0, -4.0], 6.0, Activation::Identity);
    let mut target = linear(&[0.0, 0.0], 0.0, Activation::Identity);
    ema_update(&online, &mut target, 0.5).unwrap();
    assert_eq!(target.params()[0].data(), &[1.0, -2.0]);
    ema_update(&online, &mut target, 0.25).unwrap();
    close(target.params()[0].data()[0], 1.25);
    close(target.params()[1].data()[0], 3.75);
    ema_update(&online, &mut target, 1.0).unwrap();
    assert_eq!(target, online);
    assert!(ema_update(&online, &mut target, 0.0).is_err());
}
