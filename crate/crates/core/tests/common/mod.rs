#![allow(dead_code)]

use diffil_core::config::{ExperimentConfig, Profile};
use diffil_core::toyenv::{generate_corpora, Corpora};

/// A toy config small enough for a full iteration to take milliseconds.
pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::profile(Profile::Toy);
    c.env.image_size = 8;
    c.env.corpus_capacity = 200;
    c.model.feature_dim = 4;
    c.model.encoder_filters = vec![2, 2];
    c.model.critic_hidden = vec![8];
    c.model.label_hidden = vec![8];
    c.sac.hidden = vec![16, 16];
    c.sac.batch_size = 8;
    let s = &mut c.schedule;
    s.iterations = 2;
    s.model_steps = 10;
    s.rl_steps = 3;
    s.generator_period = 5;
    s.model_batch = 4;
    s.learner_capacity = 300;
    s.refresh_count = 50;
    s.learner_prefill = 100;
    s.eval_episodes = 1;
    s.checkpoint_every = 1;
    c.validate().expect("tiny config is valid");
    c
}

pub fn corpora_for(cfg: &ExperimentConfig) -> Corpora {
    generate_corpora(&cfg.corpus_spec(), cfg.seed).expect("corpora generate")
}
