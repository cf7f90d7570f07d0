mod common;

use diffil_core::data::{DomainTag, ProvenanceTag};
use diffil_core::toyenv::{episode_return, generate_corpora, make_env, Behavior, EnvKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn domains_look_different_at_the_same_state() {
    let size = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for kind in [EnvKind::DotWorld, EnvKind::PoleWorld] {
        let mut src = make_env(kind, DomainTag::Source, size, 50);
        let mut tgt = make_env(kind, DomainTag::Target, size, 50);
        let n = 200;
        let (mut ms, mut mt) = (vec![0.0; size * size * 3], vec![0.0; size * size * 3]);
        for _ in 0..n {
            let s = src.reset(&mut rng);
            let s: Vec<f64> = s.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
            src.set_state(&s);
            tgt.set_state(&src.state());
            for (m, p) in ms.iter_mut().zip(src.render()) {
                *m += p as f64 / 255.0 / n as f64;
            }
            for (m, p) in mt.iter_mut().zip(tgt.render()) {
                *m += p as f64 / 255.0 / n as f64;
            }
        }
        let differing = ms.iter().zip(&mt).filter(|(a, b)| (*a - *b).abs() > 0.1).count();
        assert!(differing * 5 >= ms.len(), "{kind:?}: only {differing} of {} pixels differ", ms.len());
    }
}

#[test]
fn source_and_target_experts_differ_in_return_by_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut src = make_env(EnvKind::DotWorld, DomainTag::Source, 16, 50);
    let mut tgt = make_env(EnvKind::DotWorld, DomainTag::Target, 16, 50);
    let (rs, rt) = (episode_return(src.as_mut(), Behavior::Expert, &mut rng), episode_return(tgt.as_mut(), Behavior::Expert, &mut rng));
    assert!((rt - 1.5).abs() < 1e-9, "target expert return {rt}");
    assert!(rs > rt);
}

#[test]
fn corpora_fill_to_capacity_with_tagged_frames() {
    let cfg = common::tiny_config();
    let c = common::corpora_for(&cfg);
    for (ds, prov) in
        c.iter().zip([ProvenanceTag::SourceExpert, ProvenanceTag::SourceRandom, ProvenanceTag::TargetRandom])
    {
        assert_eq!(ds.total_frames(), cfg.env.corpus_capacity);
        assert_eq!(ds.provenance, prov);
        for i in 0..ds.total_frames() {
            let f = ds.frame(i).unwrap();
            assert_eq!(f.provenance(), prov);
            assert_eq!(f.pixels().len(), 8 * 8 * 3);
            assert!(ds.state(i).unwrap().is_some());
        }
    }
}

#[test]
fn expert_frames_carry_rising_time_labels() {
    let cfg = common::tiny_config();
    let c = common::corpora_for(&cfg);
    for ep in c.source_expert.episodes() {
        let ts: Vec<usize> = ep.frames.iter().map(|f| f.t()).collect();
        assert_eq!(ts, (0..ts.len()).collect::<Vec<_>>());
    }
}

#[test]
fn corpora_are_a_pure_function_of_the_seed() {
    let cfg = common::tiny_config();
    let spec = cfg.corpus_spec();
    assert_eq!(generate_corpora(&spec, 5).unwrap(), generate_corpora(&spec, 5).unwrap());
    assert_ne!(generate_corpora(&spec, 5).unwrap(), generate_corpora(&spec, 6).unwrap());
}

#[test]
fn corpora_survive_a_disk_round_trip() {
    let cfg = common::tiny_config();
    let c = common::corpora_for(&cfg);
    let dir = tempfile::tempdir().unwrap();
    c.save(dir.path()).unwrap();
    assert_eq!(diffil_core::toyenv::Corpora::load(dir.path()).unwrap(), c);
}

#[test]
fn swapped_corpus_directories_are_rejected() {
    let cfg = common::tiny_config();
    let c = common::corpora_for(&cfg);
    let dir = tempfile::tempdir().unwrap();
    c.save(dir.path()).unwrap();
    let p = |n: &str| dir.path().join(n);
    std::fs::rename(p("source_expert"), p("tmp")).unwrap();
    std::fs::rename(p("source_random"), p("source_expert")).unwrap();
    std::fs::rename(p("tmp"), p("source_random")).unwrap();
    assert!(matches!(diffil_core::toyenv::Corpora::load(dir.path()), Err(diffil_core::Error::Format { .. })));
}
