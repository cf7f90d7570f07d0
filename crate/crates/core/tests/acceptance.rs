//! The acceptance suite: nine criteria, one verdict line each.
//!
//! The end-to-end criteria train three seeds of the full method and three of
//! the sequence-only ablation on DotWorld with the toy profile; expect several
//! minutes in release mode.

mod common;
#[path = "gradient_oracles.rs"]
mod gradient_oracles;
#[path = "losses.rs"]
mod losses;

use std::io::Write;
use std::panic::{catch_unwind, UnwindSafe};
use std::time::{Duration, Instant};

use diffil_core::analysis::{map_learner_frames, paired_frames, probe_domain, ProbeInput, ProbeOptions};
use diffil_core::config::{ExperimentConfig, Profile, Variant};
use diffil_core::data::FifoBuffer;
use diffil_core::labeling::reward;
use diffil_core::orchestrator::{mean_std, train, Event, RunDir, RunState};
use diffil_core::toyenv::generate_corpora;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const SEEDS: [u64; 3] = [0, 1, 2];
const ORACLE_EXPERT_RETURN: f64 = 1.5;
const RETURN_FRACTION: f64 = 0.8;
const FEATURE_PROBE_MAX: f64 = 0.65;
const PIXEL_PROBE_MIN: f64 = 0.95;
const PROBE_PAIRS: usize = 1000;
const MAPPED_FRAMES: usize = 500;
const MAPPING_TOLERANCE: f64 = 0.1;
const MAPPING_FRACTION: f64 = 0.8;
const ORACLE_TIME_LIMIT: Duration = Duration::from_secs(120);

/// Verdict lines go straight to stderr so they show without `--nocapture`.
fn report(n: usize, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict}  {detail}");
}

type Check = (&'static str, Box<dyn FnOnce() + UnwindSafe>);

/// Names of the checks that panicked.
fn failures(checks: Vec<Check>) -> Vec<String> {
    checks.into_iter().filter_map(|(name, f)| catch_unwind(f).is_err().then(|| name.to_string())).collect()
}

macro_rules! checks {
    ($($m:ident :: $f:ident),* $(,)?) => {
        vec![$((stringify!($f), Box::new($m::$f) as Box<dyn FnOnce() + UnwindSafe>)),*]
    };
}

fn gradient_oracles() -> (bool, String) {
    let start = Instant::now();
    let failed = failures(checks![
        gradient_oracles::reconstruction_and_feature_consistency,
        gradient_oracles::critic_losses_and_gradient_penalty,
        gradient_oracles::gradient_penalty_with_one_level_disabled,
        gradient_oracles::generator_losses_reach_the_latents,
        gradient_oracles::sequence_label_loss,
        gradient_oracles::frame_label_loss_trains_the_network_only,
        gradient_oracles::sac_critic_loss,
        gradient_oracles::sac_actor_and_entropy_losses,
    ]);
    let took = start.elapsed();
    let pass = failed.is_empty() && took < ORACLE_TIME_LIMIT;
    (pass, format!("8 finite-difference oracles, max rel. error < 1e-4, {:.1}s; failed: {failed:?}", took.as_secs_f64()))
}

fn closed_forms() -> (bool, String) {
    let failed = failures(checks![
        losses::identity_critic_gap_is_difference_of_means,
        losses::linear_critic_gap_over_a_batch,
        losses::unified_objectives_mix_levels_by_alpha,
        losses::penalty_of_linear_critics_is_squared_norm_excess,
        losses::penalty_weights_each_critic_gradient_by_its_level_share,
        losses::penalty_of_linear_critics_ignores_the_interpolation_point,
        losses::cross_entropy_at_its_own_target,
        losses::label_losses_of_an_uninformative_net_are_ln2,
        losses::reward_spans_its_bounds,
        losses::time_label_endpoints,
    ]);
    (failed.is_empty(), format!("10 closed-form loss checks at 1e-9; failed: {failed:?}"))
}

fn schedule() -> (bool, String) {
    let mut cfg = common::tiny_config();
    cfg.schedule.model_steps = 100;
    cfg.schedule.generator_period = 5;
    let mut state = RunState::new(cfg.clone(), common::corpora_for(&cfg)).expect("state");
    let events = state.run_iteration().expect("iteration").events;
    let critic = events.iter().filter(|e| matches!(e, Event::C | Event::CG)).count();
    let generator = events.iter().filter(|e| **e == Event::CG).count();
    (critic == 100 && generator == 20, format!("{critic} critic updates, {generator} generator/label updates"))
}

fn buffer_protocol() -> (bool, String) {
    const CAPACITY: usize = 50_000;
    const REFRESH: usize = 1_000;
    let mut runner = TestRunner::new(PropConfig { cases: 32, ..PropConfig::default() });
    let result = runner.run(&(0usize..=CAPACITY, 1usize..80), |(prefill, refreshes)| {
        let mut buf = FifoBuffer::new(CAPACITY);
        buf.refresh((0..prefill).collect()).expect("prefill fits");
        let mut next = prefill;
        for _ in 0..refreshes {
            let before = buf.len();
            let evicted = buf.refresh((next..next + REFRESH).collect()).expect("refresh fits");
            next += REFRESH;
            let overflow = (before + REFRESH).saturating_sub(CAPACITY);
            let oldest = next - REFRESH - before;
            proptest::prop_assert_eq!(evicted, (oldest..oldest + overflow).collect::<Vec<_>>());
            proptest::prop_assert_eq!(buf.len(), (before + REFRESH).min(CAPACITY));
            proptest::prop_assert_eq!(*buf.get(buf.len() - 1).expect("non-empty"), next - 1);
        }
        Ok(())
    });
    (result.is_ok(), format!("capacity {CAPACITY}, refresh {REFRESH}, 32 random traces: {result:?}"))
}

fn reward_monotone() -> (bool, String) {
    let grid: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
    let mut cells: Vec<(f64, f64)> =
        grid.iter().flat_map(|&fs| grid.iter().map(move |&ff| (fs * ff, reward(fs, ff)))).collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let violations = cells.windows(2).filter(|w| w[1].1 < w[0].1).count();
    (violations == 0, format!("100x100 grid, {violations} violations"))
}

struct Trained {
    final_return: f64,
    state: RunState,
}

fn train_toy(seed: u64, variant: Variant) -> Trained {
    let mut cfg = ExperimentConfig::profile(Profile::Toy);
    cfg.seed = seed;
    cfg.variant = variant;
    let corpora = generate_corpora(&cfg.corpus_spec(), seed).expect("corpora");
    let dir = tempfile::tempdir().expect("tempdir");
    let start = Instant::now();
    let state = train(cfg, corpora, &RunDir::new(dir.path()), &mut |_| {}).expect("training");
    let final_return = state.metrics.last().expect("at least one iteration").eval_return_mean;
    let _ = writeln!(
        std::io::stderr(),
        "  trained {variant:?} seed {seed}: final eval return {final_return:.3} ({:.0}s)",
        start.elapsed().as_secs_f64()
    );
    Trained { final_return, state }
}

#[test]
fn acceptance() {
    let mut verdicts = Vec::new();
    let mut record = |n: usize, (pass, detail): (bool, String)| {
        report(n, pass, &detail);
        verdicts.push((n, pass));
    };
    record(1, gradient_oracles());
    record(2, closed_forms());
    record(3, schedule());
    record(4, buffer_protocol());
    record(9, reward_monotone());

    let full: Vec<Trained> = SEEDS.iter().map(|&s| train_toy(s, Variant::Full)).collect();
    let ablated: Vec<Trained> = SEEDS.iter().map(|&s| train_toy(s, Variant::SequenceOnly)).collect();
    let returns = |runs: &[Trained]| runs.iter().map(|r| r.final_return).collect::<Vec<_>>();
    let (full_mean, full_std) = mean_std(&returns(&full));
    let (ablated_mean, _) = mean_std(&returns(&ablated));

    let threshold = RETURN_FRACTION * ORACLE_EXPERT_RETURN;
    record(
        5,
        (
            full_mean >= threshold,
            format!("final eval return {full_mean:.3} ± {full_std:.3} over seeds {:.3?} (need ≥ {threshold:.2})", returns(&full)),
        ),
    );
    record(
        6,
        (
            ablated_mean < full_mean,
            format!("sequence-only {ablated_mean:.3} {:.3?} vs full {full_mean:.3}", returns(&ablated)),
        ),
    );

    let (mut feature_acc, mut pixel_acc) = (Vec::new(), Vec::new());
    for run in &full {
        let st = &run.state;
        let c = &st.corpora;
        let mut rng = ChaCha8Rng::seed_from_u64(st.config.seed);
        rng.set_stream(3_000_000);
        let pairs = paired_frames(
            st.config.env.kind,
            st.config.env.image_size,
            &[&c.source_expert, &c.source_random, &c.target_random],
            PROBE_PAIRS,
            &mut rng,
        )
        .expect("paired frames");
        let opts = ProbeOptions::default();
        let enc = &st.model.perception.encoder;
        feature_acc.push(probe_domain(&pairs, ProbeInput::Features(enc), &opts, &mut rng).expect("probe").test_accuracy);
        pixel_acc.push(probe_domain(&pairs, ProbeInput::Pixels, &opts, &mut rng).expect("probe").test_accuracy);
    }
    let (f, p) = (mean_std(&feature_acc).0, mean_std(&pixel_acc).0);
    record(
        7,
        (
            f <= FEATURE_PROBE_MAX && p >= PIXEL_PROBE_MIN,
            format!(
                "held-out domain accuracy: features {f:.3} {feature_acc:.3?} (need ≤ {FEATURE_PROBE_MAX}), pixels {p:.3} (need ≥ {PIXEL_PROBE_MIN})"
            ),
        ),
    );

    let mut within = Vec::new();
    for run in &full {
        within.push(map_learner_frames(&run.state, MAPPED_FRAMES).expect("mapping").fraction_within(MAPPING_TOLERANCE));
    }
    let w = mean_std(&within).0;
    record(
        8,
        (
            w >= MAPPING_FRACTION,
            format!("{:.1}% of the last {MAPPED_FRAMES} learner frames within {MAPPING_TOLERANCE} {within:.3?}", 100.0 * w),
        ),
    );

    verdicts.sort();
    let failed: Vec<usize> = verdicts.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
