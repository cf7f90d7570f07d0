use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffil_core::analysis::{
    aggregate_curves, curve_rows, label_trace, map_learner_frames, paired_frames, probe_domain, write_rows, write_svg,
    ProbeInput, ProbeOptions,
};
use diffil_core::config::{ExperimentConfig, Profile};
use diffil_core::labeling::write_trace;
use diffil_core::orchestrator::{mean_std, read_metrics, train, RunDir, RunState};
use diffil_core::toyenv::{generate_corpora, Corpora};
use diffil_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "diffil", version, about = "Cross-domain imitation from pixels with domain-invariant per-frame features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source-expert, source-random and target-random corpora.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Corpus directory [default: <root>/data].
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train, resuming from the latest checkpoint of the run directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory [default: <root>/run].
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Roll out the trained policy and export per-step label and reward traces.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trained: Trained,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Write the label/reward trace here as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Map recent learner frames to their nearest source-expert frames in feature space.
    MapFeatures {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trained: Trained,
        /// Number of most recent learner frames to map.
        #[arg(long, default_value_t = 500)]
        recent: usize,
        /// Ground-truth position tolerance for the summary.
        #[arg(long, default_value_t = 0.1)]
        tolerance: f64,
        /// Write the per-frame report here as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure how well a fresh classifier recovers the domain from frozen features.
    ProbeDomain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trained: Trained,
        /// State-matched frame pairs to render.
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
    },
    /// Export learning curves, averaged over one or more run directories.
    ExportCurves {
        /// Run directories (one per seed).
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also render an SVG plot.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config; unset keys take the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    profile: Option<Profile>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing output.
    #[arg(long)]
    force: bool,
    /// Output root when the config sets no `output_dir`.
    #[arg(long, env = "DIFFIL_RUN_DIR", default_value = "runs")]
    root: PathBuf,
}

#[derive(Args)]
struct Trained {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    run: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path, self.profile)?,
            None => ExperimentConfig::profile(self.profile.unwrap_or(Profile::Toy)),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn root(&self, cfg: &ExperimentConfig) -> PathBuf {
        cfg.output_dir.clone().unwrap_or_else(|| self.root.clone())
    }
}

fn data_dir(explicit: &Option<PathBuf>, root: &Path) -> PathBuf {
    explicit.clone().unwrap_or_else(|| root.join("data"))
}

fn run_dir(explicit: &Option<PathBuf>, root: &Path) -> RunDir {
    RunDir::new(explicit.clone().unwrap_or_else(|| root.join("run")))
}

/// Clear `dir` if `force` is set, otherwise refuse to touch a non-empty one.
fn prepare_output(dir: &Path, force: bool) -> Result<(), Error> {
    let non_empty = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty {
        if !force {
            return Err(Error::Config(format!("{} is not empty; pass --force to overwrite it", dir.display())));
        }
        fs::remove_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    }
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })
}

/// Restore the latest checkpoint; the run's own config wins over the command line.
fn load_trained(common: &Common, trained: &Trained) -> Result<RunState, Error> {
    let cfg = common.config()?;
    let root = common.root(&cfg);
    let run = run_dir(&trained.run, &root);
    let dir = run
        .latest()?
        .ok_or_else(|| Error::Missing { what: "trained checkpoint".into(), path: run.root.clone() })?;
    let corpora = Corpora::load(&data_dir(&trained.data, &root))?;
    RunState::load(&dir, corpora)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenerateData { common, data } => {
            let cfg = common.config()?;
            let dir = data_dir(&data, &common.root(&cfg));
            prepare_output(&dir, common.force)?;
            let corpora = generate_corpora(&cfg.corpus_spec(), cfg.seed)?;
            corpora.save(&dir)?;
            for (name, ds) in Corpora::DIRS.iter().zip(corpora.iter()) {
                println!("{name}: {} frames in {} episodes", ds.total_frames(), ds.episodes().len());
            }
            println!("wrote {}", dir.display());
        }
        Command::Train { common, data, run } => {
            let cfg = common.config()?;
            let root = common.root(&cfg);
            let run = run_dir(&run, &root);
            if common.force {
                prepare_output(&run.root, true)?;
            }
            let corpora = Corpora::load(&data_dir(&data, &root))?;
            let state = train(cfg, corpora, &run, &mut |m| {
                println!(
                    "iter {:>4}  steps {:>7}  eval {:>8.3} ± {:<6.3}  reward {:>7.3}  disc {:>8.4}  recon {:>8.4}  {:.1}s",
                    m.iteration,
                    m.env_steps,
                    m.eval_return_mean,
                    m.eval_return_std,
                    m.mean_reward,
                    m.unified_disc,
                    m.recon,
                    m.wall_clock_s
                )
            })?;
            println!("finished {} iterations in {}", state.iteration, run.root.display());
        }
        Command::Evaluate { common, trained, episodes, trace } => {
            let state = load_trained(&common, &trained)?;
            let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed);
            rng.set_stream(2_000_000);
            let (rows, returns) = label_trace(&state, episodes, &mut rng)?;
            let (mean, std) = mean_std(&returns);
            println!("iteration {}: eval return {mean:.4} ± {std:.4} over {episodes} episodes", state.iteration);
            if let Some(path) = trace {
                let file = fs::File::create(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
                write_trace(&rows, file)?;
                println!("wrote {}", path.display());
            }
        }
        Command::MapFeatures { common, trained, recent, tolerance, out } => {
            let state = load_trained(&common, &trained)?;
            let report = map_learner_frames(&state, recent)?;
            println!(
                "{} learner frames: {:.1}% within {tolerance} of their match, median position error {:.4}",
                report.entries.len(),
                100.0 * report.fraction_within(tolerance),
                report.median_position_error().unwrap_or(f64::NAN)
            );
            if let Some(path) = out {
                report.write_csv(&path)?;
                println!("wrote {}", path.display());
            }
        }
        Command::ProbeDomain { common, trained, pairs } => {
            let state = load_trained(&common, &trained)?;
            let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed);
            rng.set_stream(3_000_000);
            let c = &state.corpora;
            let env = &state.config.env;
            let frames =
                paired_frames(env.kind, env.image_size, &[&c.source_expert, &c.source_random, &c.target_random], pairs, &mut rng)?;
            let opts = ProbeOptions::default();
            let features = probe_domain(&frames, ProbeInput::Features(&state.model.perception.encoder), &opts, &mut rng)?;
            let pixels = probe_domain(&frames, ProbeInput::Pixels, &opts, &mut rng)?;
            let shuffled =
                probe_domain(&frames, ProbeInput::Pixels, &ProbeOptions { shuffle_labels: true, ..opts }, &mut rng)?;
            println!("held-out domain accuracy ({} test samples)", features.test_size);
            println!("  frozen features : {:.4}", features.test_accuracy);
            println!("  raw pixels      : {:.4}", pixels.test_accuracy);
            println!("  shuffled labels : {:.4}", shuffled.test_accuracy);
        }
        Command::ExportCurves { runs, out, svg } => {
            let logs = runs.iter().map(|r| read_metrics(&RunDir::new(r).metrics())).collect::<Result<Vec<_>, _>>()?;
            if logs.len() == 1 {
                write_rows(&curve_rows(&logs[0])?, &out)?;
            } else {
                write_rows(&aggregate_curves(&logs)?, &out)?;
            }
            println!("wrote {}", out.display());
            if let Some(path) = svg {
                let rows = aggregate_curves(&logs)?;
                write_svg(&rows, &format!("eval return, {} run(s)", logs.len()), &path)?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite { .. } => 4,
        Error::Format { .. }
        | Error::Shape { .. }
        | Error::Index { .. }
        | Error::Invalid(_)
        | Error::Missing { .. }
        | Error::Io { .. } => 3,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
