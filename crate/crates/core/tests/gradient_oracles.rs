//! Every training loss against central finite differences on miniature
//! float64 networks (at most 200 parameters each).

use diffil_autodiff::gradcheck::compare;
use diffil_autodiff::{Activation, Graph, Mlp, Module, Tensor, Var};
use diffil_core::adversary::{disc_terms, gen_terms, gradient_penalty, unified_disc, unified_gen, Critics, WganWeights};
use diffil_core::data::ProvenanceTag;
use diffil_core::labeling::{frame_label_loss, label_net, seq_label_loss, LabelWeights};
use diffil_core::perception::{enc_dec_loss, mean_l2_distance, BoundPerception, ConvArch, Perception};
use diffil_core::sac::{actor_loss, critic_loss, entropy_loss, normal_noise};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

type Build = dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>;

fn hr<F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>>(f: F) -> F {
    f
}

/// Max relative error between the analytic gradient of `library` and central
/// differences of `reference`, both evaluated at `inputs`.
fn max_rel_error(inputs: &[Tensor], library: &Build, reference: &Build) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = library(&g, &vars);
    let analytic: Vec<Tensor> = g.grad(out, &vars, false).iter().map(|v| (*v.value()).clone()).collect();
    let f = |xs: &[Tensor]| {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        reference(&g, &vars).item()
    };
    compare(&analytic, &f, inputs, STEP, FLOOR).max_rel_error
}

fn assert_matches(name: &str, inputs: &[Tensor], library: &Build, reference: &Build) {
    let err = max_rel_error(inputs, library, reference);
    assert!(err < TOL, "{name}: max relative error {err:e}");
}

fn params_of(m: &dyn Module) -> Vec<Tensor> {
    m.params().into_iter().cloned().collect()
}

fn count(ts: &[Tensor]) -> usize {
    ts.iter().map(Tensor::len).sum()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn tiny_arch() -> ConvArch {
    ConvArch { height: 4, width: 4, filters: vec![2, 2], kernel: 3, feature_dim: 3, leaky_slope: 0.2 }
}

fn weights() -> WganWeights {
    WganWeights { alpha: 0.5, lambda_disc: 1.0, lambda_gen: 1.0, lambda_gp: 10.0 }
}

const B: usize = 4;
const F: usize = 3;
const L: usize = 2;

fn critics(rng: &mut ChaCha8Rng) -> Critics {
    let c = Critics::new(rng, F, L, &[8], 0.2);
    assert!(count(&params_of(&c.frame)) <= 200 && count(&params_of(&c.seq)) <= 200);
    c
}

#[test]
pub fn reconstruction_and_feature_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Perception::new(&mut rng, &tiny_arch()).unwrap();
    let nets: [&dyn Module; 3] = [&model.encoder, &model.decoder_source, &model.decoder_target];
    let sizes: Vec<usize> = nets.iter().map(|m| m.params().len()).collect();
    let mut inputs: Vec<Tensor> = Vec::new();
    for m in nets {
        let p = params_of(m);
        assert!(count(&p) <= 200, "network has {} parameters", count(&p));
        inputs.extend(p);
    }
    let obs_s = Tensor::from_fn(&[B, 4, 4, 3], |_| rng.random_range(0.0..1.0));
    let obs_t = Tensor::from_fn(&[B, 4, 4, 3], |_| rng.random_range(0.0..1.0));
    let (ne, nd) = (sizes[0], sizes[1]);
    let (os, ot, lib_model) = (obs_s.clone(), obs_t.clone(), model.clone());
    let library = hr(move |g, v| {
        let (encoder, decoder_source, decoder_target) = split3(v, ne, nd);
        let bound = BoundPerception { encoder, decoder_source, decoder_target };
        enc_dec_loss(&lib_model, &bound, g.constant(os.clone()), g.constant(ot.clone()), 1.0, 0.7).total
    });
    // The consistency target is a stop-gradient copy of the latent, so the
    // reference freezes it at its value for the unperturbed parameters.
    let frozen: Vec<Tensor> = [&obs_s, &obs_t].iter().map(|o| model.encoder.encode(o).unwrap()).collect();
    let reference = hr(move |g, v| {
        let (enc, ds, dt) = split3(v, ne, nd);
        let m = &model;
        let mut total = g.scalar(0.0);
        for (i, (obs, own, other)) in [(&obs_s, &ds, &dt), (&obs_t, &dt, &ds)].into_iter().enumerate() {
            let (own_dec, other_dec) =
                if i == 0 { (&m.decoder_source, &m.decoder_target) } else { (&m.decoder_target, &m.decoder_source) };
            let o = g.constant((*obs).clone());
            let z = m.encoder.forward(&enc, o);
            let recon = mean_l2_distance(o, own_dec.forward(own, z));
            let back = m.encoder.forward(&enc, other_dec.forward(other, z));
            let fcon = mean_l2_distance(g.constant(frozen[i].clone()), back);
            total = total.add(recon).add(fcon.scale(0.7));
        }
        total
    });
    assert_matches("recon + fcon", &inputs, &library, &reference);
}

fn split3<'g>(v: &[Var<'g>], a: usize, b: usize) -> (Vec<Var<'g>>, Vec<Var<'g>>, Vec<Var<'g>>) {
    let (x, rest) = v.split_at(a);
    let (y, z) = rest.split_at(b);
    (x.to_vec(), y.to_vec(), z.to_vec())
}

fn latents(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        random(rng, &[B, F], 1.0),
        random(rng, &[B, F], 1.0).map(|v| v + 0.5),
        random(rng, &[B, F * L], 1.0),
        random(rng, &[B, F * L], 1.0).map(|v| v - 0.3),
    ]
}

#[test]
pub fn critic_losses_and_gradient_penalty() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = critics(&mut rng);
    let z = latents(&mut rng);
    let delta: Vec<f64> = (0..B).map(|_| rng.random_range(0.0..1.0)).collect();
    let nf = c.frame.params().len();
    let mut inputs = params_of(&c.frame);
    inputs.extend(params_of(&c.seq));

    let terms = {
        let (c, z) = (c.clone(), z.clone());
        hr(move |g, v| {
            let zs: Vec<Var> = z.iter().map(|t| g.constant(t.clone())).collect();
            let (f, s) = disc_terms(&c, &v[..nf], &v[nf..], zs[0], zs[1], zs[2], zs[3]).unwrap();
            f.scale(0.3).add(s)
        })
    };
    assert_matches("disc_f + disc_s", &inputs, &terms, &terms);

    let gp = {
        let (c, z, delta) = (c.clone(), z.clone(), delta.clone());
        hr(move |g, v| {
            gradient_penalty(g, &c, &v[..nf], &v[nf..], &z[0], &z[1], &z[2], &z[3], 0.5, &delta).unwrap()
        })
    };
    assert_matches("gradient penalty", &inputs, &gp, &gp);

    let unified = hr(move |g, v| {
        let zs: Vec<Var> = z.iter().map(|t| g.constant(t.clone())).collect();
        let (f, s) = disc_terms(&c, &v[..nf], &v[nf..], zs[0], zs[1], zs[2], zs[3]).unwrap();
        let p = gradient_penalty(g, &c, &v[..nf], &v[nf..], &z[0], &z[1], &z[2], &z[3], 0.5, &delta).unwrap();
        unified_disc(f, s, p, &weights())
    });
    assert_matches("unified critic objective", &inputs, &unified, &unified);
}

#[test]
pub fn gradient_penalty_with_one_level_disabled() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = critics(&mut rng);
    let z = latents(&mut rng);
    let delta: Vec<f64> = (0..B).map(|_| rng.random_range(0.0..1.0)).collect();
    let nf = c.frame.params().len();
    let mut inputs = params_of(&c.frame);
    inputs.extend(params_of(&c.seq));
    for alpha in [0.0, 1.0] {
        let (c, z, delta) = (c.clone(), z.clone(), delta.clone());
        let gp = hr(move |g, v| {
            gradient_penalty(g, &c, &v[..nf], &v[nf..], &z[0], &z[1], &z[2], &z[3], alpha, &delta).unwrap()
        });
        assert_matches(&format!("gradient penalty, alpha {alpha}"), &inputs, &gp, &gp);
    }
}

#[test]
pub fn generator_losses_reach_the_latents() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let c = critics(&mut rng);
    let inputs = latents(&mut rng);
    let build = hr(move |g, v| {
        let pf: Vec<Var> = c.frame.params().into_iter().map(|t| g.constant(t.clone())).collect();
        let ps: Vec<Var> = c.seq.params().into_iter().map(|t| g.constant(t.clone())).collect();
        let (f, s) = gen_terms(&c, &pf, &ps, v[0], v[1], v[2], v[3]).unwrap();
        unified_gen(f, s, &weights())
    });
    assert_matches("unified generator objective", &inputs, &build, &build);
}

#[test]
pub fn sequence_label_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = label_net(&mut rng, F * L, &[8], 0.2);
    let mut inputs = params_of(&net);
    assert!(count(&inputs) <= 200);
    let np = inputs.len();
    inputs.push(random(&mut rng, &[B, F * L], 1.0));
    inputs.push(random(&mut rng, &[B, F * L], 1.0));
    let prov_s = [ProvenanceTag::SourceExpert, ProvenanceTag::SourceRandom, ProvenanceTag::SourceExpert, ProvenanceTag::SourceRandom];
    let prov_t = [ProvenanceTag::TargetRandom, ProvenanceTag::TargetLearner, ProvenanceTag::TargetLearner, ProvenanceTag::TargetRandom];
    let w = LabelWeights { seq_source: 10.0, seq_target: 1e-3, frame: 10.0 };
    let build = hr(move |_, v| {
        let (s, t) = seq_label_loss(&net, &v[..np], v[np], &prov_s, v[np + 1], &prov_t, &w).unwrap();
        s.add(t.scale(1000.0))
    });
    assert_matches("sequence label loss", &inputs, &build, &build);
}

#[test]
pub fn frame_label_loss_trains_the_network_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let net = label_net(&mut rng, F, &[8], 0.2);
    let inputs = params_of(&net);
    assert!(count(&inputs) <= 200);
    let z = random(&mut rng, &[B, F], 1.0);
    let prov = [ProvenanceTag::SourceExpert, ProvenanceTag::SourceExpert, ProvenanceTag::SourceRandom, ProvenanceTag::SourceExpert];
    let labels = [0.5, 0.75, 0.0, 1.0];
    let build = hr(move |g, v| {
        frame_label_loss(&net, v, g.constant(z.clone()), &prov, &labels, 10.0).unwrap()
    });
    assert_matches("frame label loss", &inputs, &build, &build);
}

fn q_net(rng: &mut ChaCha8Rng) -> Mlp {
    Mlp::new(rng, 3, &[8, 8], 1, Activation::Relu, Activation::Identity, false)
}

#[test]
pub fn sac_critic_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (q1, q2) = (q_net(&mut rng), q_net(&mut rng));
    let n1 = q1.params().len();
    let mut inputs = params_of(&q1);
    inputs.extend(params_of(&q2));
    assert!(count(&inputs[..n1]) <= 200);
    let states = random(&mut rng, &[B, 2], 1.0);
    let actions = random(&mut rng, &[B, 1], 1.0);
    let targets = random(&mut rng, &[B, 1], 2.0);
    let build = hr(move |g, v| {
        let (s, a, y) = (g.constant(states.clone()), g.constant(actions.clone()), g.constant(targets.clone()));
        critic_loss(&q1, &v[..n1], &q2, &v[n1..], s, a, y).unwrap()
    });
    assert_matches("soft Q loss", &inputs, &build, &build);
}

#[test]
pub fn sac_actor_and_entropy_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let policy = Mlp::new(&mut rng, 2, &[8, 8], 2, Activation::Relu, Activation::Identity, false);
    let (q1, q2) = (q_net(&mut rng), q_net(&mut rng));
    let inputs = params_of(&policy);
    assert!(count(&inputs) <= 200);
    let states = random(&mut rng, &[B, 2], 1.0);
    let eps = normal_noise(&mut rng, &[B, 1]);
    let e = eps.clone();
    let build = hr(move |g, v| {
        let p1: Vec<Var> = q1.params().into_iter().map(|t| g.constant(t.clone())).collect();
        let p2: Vec<Var> = q2.params().into_iter().map(|t| g.constant(t.clone())).collect();
        actor_loss(&policy, v, &q1, &p1, &q2, &p2, g.constant(states.clone()), &e, 0.2).0
    });
    assert_matches("actor loss", &inputs, &build, &build);

    let log_probs = random(&mut rng, &[B, 1], 2.0);
    let entropy = hr(move |_, v| { entropy_loss(v[0], &log_probs, -1.0) });
    assert_matches("entropy coefficient loss", &[Tensor::new(&[1], vec![-0.7])], &entropy, &entropy);
}
