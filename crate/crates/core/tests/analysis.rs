mod common;

use diffil_autodiff::Tensor;
use diffil_core::analysis::{
    aggregate_curves, curve_rows, curve_svg, label_trace, map_frames, map_learner_frames, nearest_neighbors,
    paired_frames, position_error, probe_domain, train_probe, write_rows, ProbeInput, ProbeOptions,
};
use diffil_core::labeling::REWARD_EPS;
use diffil_core::orchestrator::{MetricsRow, RunState};
use diffil_core::toyenv::EnvKind;
use diffil_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fresh_state() -> RunState {
    let cfg = common::tiny_config();
    RunState::new(cfg.clone(), common::corpora_for(&cfg)).unwrap()
}

#[test]
fn nearest_neighbour_ties_go_to_the_lowest_index() {
    let q = Tensor::new(&[2, 2], vec![0.0, 0.0, 3.0, 4.0]);
    let r = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 3.0, 4.0]);
    let nn = nearest_neighbors(&q, &r).unwrap();
    assert_eq!(nn[0], (0, 1.0));
    assert_eq!(nn[1], (2, 0.0));
    assert!(nearest_neighbors(&q, &Tensor::new(&[1, 3], vec![0.0; 3])).is_err());
}

#[test]
fn corpus_frames_map_onto_themselves() {
    let state = fresh_state();
    let se = &state.corpora.source_expert;
    let queries: Vec<_> = (0..se.total_frames()).step_by(7).map(|i| se.frame(i).unwrap().as_ref()).collect();
    let report = map_frames(&state.model.perception.encoder, EnvKind::DotWorld, &queries, None, se).unwrap();
    for e in &report.entries {
        assert_eq!(e.distance, 0.0);
        assert_eq!(se.frame(e.nearest).unwrap().pixels(), queries[e.query].pixels());
        assert!(e.position_error.is_none());
    }
}

#[test]
fn learner_mapping_reports_position_errors() {
    let state = fresh_state();
    let report = map_learner_frames(&state, 20).unwrap();
    assert_eq!(report.entries.len(), 20);
    assert!(report.entries.iter().all(|e| e.position_error.is_some_and(|p| p >= 0.0)));
    let f = report.fraction_within(0.1);
    assert!((0.0..=1.0).contains(&f));
    assert!(report.median_position_error().is_some());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("map.csv");
    report.write_csv(&path).unwrap();
    assert_eq!(std::fs::read_to_string(path).unwrap().lines().count(), 21);
}

#[test]
fn pole_position_error_wraps_around() {
    assert!((position_error(EnvKind::PoleWorld, 0.95, -0.95) - 0.1).abs() < 1e-12);
    assert!((position_error(EnvKind::DotWorld, 0.95, -0.95) - 1.9).abs() < 1e-12);
}

#[test]
fn probe_needs_enough_samples() {
    let x = Tensor::zeros(&[20, 3]);
    let labels = vec![true; 20];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = train_probe(&x, &labels, &ProbeOptions::default(), &mut rng).unwrap_err();
    assert!(matches!(err, Error::Invalid(_)), "{err}");
}

#[test]
fn probe_separates_separable_data_and_not_shuffled_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 400;
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let x = Tensor::from_fn(&[n, 4], |k| {
        let shift = if labels[k / 4] && k % 4 == 0 { 3.0 } else { 0.0 };
        shift + rng.random_range(-1.0..1.0)
    });
    let real = train_probe(&x, &labels, &ProbeOptions::default(), &mut rng).unwrap();
    assert!(real.test_accuracy >= 0.95, "{real:?}");
    assert_eq!(real.train_size + real.test_size, n);
    let shuffled = train_probe(&x, &labels, &ProbeOptions { shuffle_labels: true, ..Default::default() }, &mut rng).unwrap();
    assert!((shuffled.test_accuracy - 0.5).abs() < 0.12, "{shuffled:?}");
}

#[test]
fn raw_pixels_give_the_domain_away() {
    let state = fresh_state();
    let c = &state.corpora;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pairs =
        paired_frames(EnvKind::DotWorld, 8, &[&c.source_expert, &c.source_random, &c.target_random], 200, &mut rng).unwrap();
    assert_eq!((pairs.source.len(), pairs.target.len()), (200, 200));
    let pixels = probe_domain(&pairs, ProbeInput::Pixels, &ProbeOptions::default(), &mut rng).unwrap();
    assert!(pixels.test_accuracy >= 0.95, "{pixels:?}");
    let feats = probe_domain(&pairs, ProbeInput::Features(&state.model.perception.encoder), &ProbeOptions::default(), &mut rng)
        .unwrap();
    assert!((0.0..=1.0).contains(&feats.test_accuracy));
}

fn fake_log(evals: &[f64]) -> Vec<MetricsRow> {
    evals
        .iter()
        .enumerate()
        .map(|(i, &e)| MetricsRow {
            iteration: i + 1,
            env_steps: 100 * (i + 1),
            eval_return_mean: e,
            eval_return_std: 0.5,
            ..Default::default()
        })
        .collect()
}

#[test]
fn curves_average_over_seeds() {
    let runs = vec![fake_log(&[1.0, 2.0, 3.0]), fake_log(&[2.0, 4.0, 3.0]), fake_log(&[3.0, 6.0, 3.0])];
    let rows = aggregate_curves(&runs).unwrap();
    assert_eq!(rows.len(), 3);
    let expect = [(2.0, 1.0), (4.0, 2.0), (3.0, 0.0)];
    for (r, (m, s)) in rows.iter().zip(expect) {
        assert!((r.eval_return_mean - m).abs() < 1e-12 && (r.eval_return_std - s).abs() < 1e-12, "{r:?}");
        assert_eq!(r.runs, 3);
        assert_eq!(r.env_steps, 100.0 * r.iteration as f64);
    }
    // Only iterations every run reached.
    let short = vec![fake_log(&[1.0, 2.0, 3.0]), fake_log(&[1.0])];
    assert_eq!(aggregate_curves(&short).unwrap().len(), 1);
    assert!(curve_svg(&rows, "t").starts_with("<svg"));
}

#[test]
fn curve_export_has_one_row_per_iteration() {
    let log = fake_log(&[0.1, 0.2, 0.3, 0.4]);
    let rows = curve_rows(&log).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    write_rows(&rows, &path).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "iteration,env_steps,eval_return_mean,eval_return_std");
    assert_eq!(lines.count(), 4);
}

#[test]
fn empty_logs_cannot_be_exported() {
    assert!(curve_rows(&[]).is_err());
    assert!(aggregate_curves(&[]).is_err());
    assert!(aggregate_curves(&[fake_log(&[1.0]), vec![]]).is_err());
}

#[test]
fn label_trace_covers_every_step_with_bounded_rewards() {
    let state = fresh_state();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (rows, returns) = label_trace(&state, 2, &mut rng).unwrap();
    assert_eq!(returns.len(), 2);
    assert_eq!(rows.len(), 2 * state.config.env.episode_len);
    let hi = -REWARD_EPS.ln();
    for r in &rows {
        assert!((0.0..=1.0).contains(&r.f_seq) && (0.0..=1.0).contains(&r.f_frame));
        assert!(r.reward >= -(1.0 + REWARD_EPS).ln() && r.reward <= hi);
    }
}
