//! `stsk`: generate synthetic benchmarks, train and run the toy tracker,
//! score results and run the built-in self-checks.
//!
//! Exit codes: 0 success, 1 self-check failure, 2 bad input, 3 model or
//! configuration mismatch.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rayon::prelude::*;

use stsk::eval::annotation::{load_frame, read_results, sequence_dirs, write_result};
use stsk::eval::attributes::{DirFrames, FrameSource};
use stsk::eval::{dataset_stats, evaluate_benchmark, parse_sequence, SequenceAnnotation, TrackResult};
use stsk::model::io::{load_model, save_model};
use stsk::model::{train_toy, Model, ModelConfig, TrainConfig, TrainSequence};
use stsk::synth::{emit, generate, sequence_id, sequence_spec, MotionSpec};
use stsk::tracker::track_sequence;
use stsk::Error;

#[derive(Parser, Debug)]
#[command(name = "stsk", version, about = "Spatial-temporal-semantic tracking toolkit")]
struct Cli {
    /// Default seed for every random choice not fixed by a spec file.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for per-sequence parallelism (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate seeded synthetic sequences.
    Synth(SynthArgs),
    /// Run the tracker over every sequence of a data directory.
    Track(TrackArgs),
    /// Score result files against annotations.
    Eval(EvalArgs),
    /// Dataset statistics as CSV histograms.
    Stats(StatsArgs),
    /// Run the built-in correctness suites.
    Selfcheck,
    /// Train the toy tracker on generated sequences and save it.
    Train(TrainArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// `key=value` motion spec.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Write annotations only.
    #[arg(long)]
    no_frames: bool,
}

#[derive(Args, Debug)]
struct TrackArgs {
    #[arg(long, required_unless_present = "oracle")]
    model: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reset the temporal token on every frame.
    #[arg(long)]
    no_temporal: bool,
    /// Replace the language tokens with zeros.
    #[arg(long)]
    no_semantic: bool,
    /// Write the ground truth as results, without running a model.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Motion spec plus `model.KEY=`, `train.KEY=` and `sequences=N` lines.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.steps`.
    #[arg(long)]
    steps: Option<usize>,
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn input(e: impl std::fmt::Display) -> Self {
        Self {
            code: 2,
            msg: e.to_string(),
        }
    }

    fn mismatch(e: impl std::fmt::Display) -> Self {
        Self {
            code: 3,
            msg: e.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Format(_) | Error::Config(_) | Error::Shape(_) => Failure::mismatch(e),
            _ => Failure::input(e),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn read_text(path: &Path) -> std::result::Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn load_annotations(data: &Path) -> std::result::Result<Vec<(PathBuf, SequenceAnnotation)>, Failure> {
    let dirs = sequence_dirs(data).map_err(Failure::input)?;
    if dirs.is_empty() {
        return Err(Failure::input(format!("{}: no sequence directories", data.display())));
    }
    dirs.into_par_iter()
        .map(|d| parse_sequence(&d).map(|a| (d, a)).map_err(Failure::input))
        .collect()
}

fn cmd_synth(args: &SynthArgs, seed: u64) -> CmdResult {
    let text = read_text(&args.spec)?;
    let mut spec = MotionSpec {
        seed,
        ..MotionSpec::default()
    };
    spec.apply_text(&text).map_err(Failure::input)?;
    fs::create_dir_all(&args.out).map_err(|e| Failure::input(format!("{}: {e}", args.out.display())))?;
    (0..args.count).into_par_iter().try_for_each(|i| {
        let id = sequence_id(i);
        let seq = generate(&sequence_spec(&spec, i), &id).map_err(Failure::input)?;
        emit(&seq, &args.out.join(&id), !args.no_frames).map_err(Failure::input)
    })?;
    info!("wrote {} sequences to {}", args.count, args.out.display());
    Ok(())
}

fn cmd_track(args: &TrackArgs) -> CmdResult {
    let sequences = load_annotations(&args.data)?;
    let model = match (&args.model, args.oracle) {
        (_, true) => None,
        (Some(path), false) => {
            let m = load_model(path).map_err(Failure::mismatch)?;
            Some(m.with_switches(!args.no_temporal, !args.no_semantic))
        }
        (None, false) => return Err(Failure::input("--model is required")),
    };
    sequences.par_iter().try_for_each(|(dir, ann)| {
        let result = match &model {
            None => TrackResult {
                sequence_id: ann.id.clone(),
                boxes: ann.boxes.clone(),
                fps: None,
            },
            Some(m) => {
                let frames = (0..ann.frame_count())
                    .map(|i| load_frame(dir, i))
                    .collect::<stsk::Result<Vec<_>>>()
                    .map_err(Failure::input)?;
                let r = track_sequence(m, &ann.id, &frames, ann.boxes[0], &ann.prompt).map_err(Failure::from)?;
                info!("{}: {} frames at {:.1} fps", ann.id, frames.len(), r.fps.unwrap_or(0.0));
                r
            }
        };
        write_result(&result, &args.out).map_err(Failure::input)
    })
}

fn cmd_eval(args: &EvalArgs) -> CmdResult {
    let anns: Vec<SequenceAnnotation> = load_annotations(&args.data)?.into_iter().map(|(_, a)| a).collect();
    let results = read_results(&args.results).map_err(Failure::input)?;
    let report = evaluate_benchmark(&anns, &results);
    for id in &report.unmatched_results {
        warn!("result {id} has no annotation");
    }
    for id in &report.missing_results {
        warn!("sequence {id} has no result");
    }
    for (id, why) in &report.skipped {
        warn!("sequence {id} skipped: {why}");
    }
    report.write(&args.report).map_err(Failure::input)?;
    if let Some(s) = report.aggregate {
        println!(
            "AUC {:.4}  Pre {:.4}  nPre {:.4}  cAUC {:.4}  mACC {:.4}  ({} sequences)",
            s.auc,
            s.pre,
            s.npre,
            s.cauc,
            s.macc,
            report.sequences.len()
        );
    } else {
        warn!("no sequence could be scored");
    }
    Ok(())
}

fn cmd_stats(args: &StatsArgs) -> CmdResult {
    let sequences = load_annotations(&args.data)?;
    let anns: Vec<SequenceAnnotation> = sequences.iter().map(|(_, a)| a.clone()).collect();
    let sources: Vec<DirFrames> = sequences.iter().map(|(d, _)| DirFrames(d)).collect();
    let with_frames = sequences.iter().all(|(d, _)| d.join(stsk::eval::annotation::FRAMES_DIR).is_dir());
    if !with_frames {
        warn!("frames missing; brightness statistics are skipped");
    }
    let refs: Vec<&dyn FrameSource> = sources.iter().map(|s| s as &dyn FrameSource).collect();
    let stats = dataset_stats(&anns, with_frames.then_some(refs.as_slice())).map_err(Failure::input)?;
    stats.write(&args.report).map_err(Failure::input)?;
    Ok(())
}

fn cmd_selfcheck(seed: u64) -> CmdResult {
    let outcomes = stsk::selfcheck::run_all(seed);
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    for o in &outcomes {
        println!("{o}");
    }
    println!("{} of {} suites passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        return Err(Failure {
            code: 1,
            msg: format!("{failed} suites failed"),
        });
    }
    Ok(())
}

/// Training setup read from a spec file.
struct TrainSetup {
    motion: MotionSpec,
    model: ModelConfig,
    train: TrainConfig,
    sequences: usize,
}

fn parse_train_spec(text: &str, seed: u64) -> stsk::Result<TrainSetup> {
    let mut s = TrainSetup {
        motion: MotionSpec {
            seed,
            ..MotionSpec::default()
        },
        model: ModelConfig {
            seed,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            seed,
            ..TrainConfig::default()
        },
        sequences: 8,
    };
    let mut motion_lines = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let Some((k, v)) = line.split_once('=') else {
            motion_lines.push_str(line);
            motion_lines.push('\n');
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        let at = |e: Error| Error::Config(format!("line {}: {e}", i + 1));
        if let Some(key) = k.strip_prefix("model.") {
            s.model.set(key, v).map_err(at)?;
        } else if let Some(key) = k.strip_prefix("train.") {
            s.train.set(key, v).map_err(at)?;
        } else if k == "sequences" {
            s.sequences = v.parse().map_err(|e| at(Error::Config(format!("sequences={v}: {e}"))))?;
        } else {
            motion_lines.push_str(line);
            motion_lines.push('\n');
        }
    }
    s.motion.apply_text(&motion_lines)?;
    s.model.validate()?;
    s.train.validate()?;
    Ok(s)
}

fn cmd_train(args: &TrainArgs, seed: u64) -> CmdResult {
    let text = read_text(&args.spec)?;
    let mut setup = parse_train_spec(&text, seed).map_err(Failure::input)?;
    if let Some(steps) = args.steps {
        setup.train.steps = steps;
    }
    let data = (0..setup.sequences)
        .into_par_iter()
        .map(|i| {
            let seq = generate(&sequence_spec(&setup.motion, i), &sequence_id(i))?;
            Ok(TrainSequence {
                frames: seq.frames,
                boxes: seq.annotation.boxes,
                absent: seq.annotation.absent,
                prompt: seq.annotation.prompt,
            })
        })
        .collect::<stsk::Result<Vec<_>>>()
        .map_err(Failure::input)?;
    let mut model = Model::new(setup.model).map_err(Failure::input)?;
    let report = train_toy(&mut model, &data, &setup.train).map_err(Failure::input)?;
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        println!("trained {} steps: loss {first:.4} -> {last:.4}", report.losses.len());
    }
    save_model(&model, &args.out).map_err(Failure::input)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STSK_LOG", "info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("could not size the worker pool: {e}");
        }
    }
    let outcome = match &cli.command {
        Command::Synth(a) => cmd_synth(a, cli.seed),
        Command::Track(a) => cmd_track(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Selfcheck => cmd_selfcheck(cli.seed),
        Command::Train(a) => cmd_train(a, cli.seed),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
