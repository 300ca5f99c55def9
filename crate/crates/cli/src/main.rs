//! `conex`: extract, score, report and localize concepts of an image classifier.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conex::modelrt::{serve, EchoRunner, RunnerError, ToyRunner};
use conex::pipeline::{
    generate_report, localize_image, resize_dataset, run_extract, run_score, save_mask_png, synth_dataset,
    ExtractionConfig, ExtractionRecord, RunConfig, RunnerSpec, SynthSpec,
};
use conex::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_RUNNER: u8 = 3;

#[derive(Parser)]
#[command(name = "conex", version, about = "Concept extraction and importance scoring for image classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunnerArgs {
    /// Runner command line speaking concept-runner/1 (overrides CONCEPT_RUNNER_CMD).
    #[arg(long, conflicts_with = "toy_model")]
    runner: Option<String>,
    /// Use the built-in analytic toy model.
    #[arg(long)]
    toy_model: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster pixel descriptors of a dataset into concepts and compute masks.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated layer ids.
        #[arg(long, value_delimiter = ',', required = true)]
        layers: Vec<String>,
        #[arg(long, default_value_t = 20)]
        n_concepts: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.3)]
        lambda: f32,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_standardize: bool,
        /// Required input resolution HxW (default: size of the first image).
        #[arg(long, value_parser = parse_size)]
        resolution: Option<(usize, usize)>,
        #[arg(long, default_value_t = 8)]
        max_examples: usize,
        #[command(flatten)]
        runner: RunnerArgs,
    },
    /// Score extracted concepts with one gradient evaluation per image.
    Score {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        runner: RunnerArgs,
    },
    /// Write concepts.json and example images.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Locate one concept in a new image.
    Localize {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        concept: usize,
        /// Where to write the 1-bit mask PNG (default: OUT/localize/<image>_cJJ.png).
        #[arg(long)]
        mask_out: Option<PathBuf>,
        #[command(flatten)]
        runner: RunnerArgs,
    },
    /// Generate a planted-cue dataset with ground-truth masks.
    Synth {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 40)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Two classes share a cue that differs only in spacing.
        #[arg(long)]
        entangled: bool,
    },
    /// Downsize a dataset by area averaging.
    Resize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target size, N or HxW.
        #[arg(long, value_parser = parse_size)]
        size: (usize, usize),
    },
    /// Serve the toy model over concept-runner/1 on stdin/stdout.
    ServeToy {
        #[arg(long, default_value_t = 3)]
        n_classes: usize,
        /// Serve the echo runner instead, which returns request images unchanged.
        #[arg(long)]
        echo: bool,
        /// Layers advertised by the echo runner.
        #[arg(long, value_delimiter = ',', default_value = "a1,a2")]
        layers: Vec<String>,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|n| (n, n)),
    }
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Usage(_) => EXIT_USAGE,
        Failure::Core(Error::Runner(RunnerError::NotConfigured)) => EXIT_USAGE,
        Failure::Core(e) if e.is_runner_error() => EXIT_RUNNER,
        Failure::Core(_) => EXIT_DATA,
    }
}

fn extraction_classes(out: &Path) -> Result<usize, Failure> {
    let text = std::fs::read_to_string(out.join("extraction.json"))
        .map_err(|e| Failure::Usage(format!("{}: {e}; run extract first", out.display())))?;
    let record: ExtractionRecord =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("extraction.json: {e}")))?;
    Ok(record.classes.len())
}

fn override_runner(args: &RunnerArgs, out: &Path) -> Result<Option<RunnerSpec>, Failure> {
    Ok(match (&args.runner, args.toy_model) {
        (Some(cmd), _) => Some(RunnerSpec::Command { cmd: cmd.clone() }),
        (None, true) => Some(RunnerSpec::Toy { n_k: extraction_classes(out)? }),
        (None, false) => None,
    })
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Extract {
            data,
            out,
            layers,
            n_concepts,
            batch_size,
            lambda,
            epochs,
            seed,
            no_standardize,
            resolution,
            max_examples,
            runner,
        } => {
            let extraction = ExtractionConfig {
                layers,
                n_c: n_concepts,
                batch_size,
                lambda,
                epochs,
                seed,
                standardize: !no_standardize,
                resolution,
                max_examples,
            };
            extraction.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let n_k = if runner.toy_model && runner.runner.is_none() {
                conex::pipeline::ingest_dataset(&data)?.n_k
            } else {
                0
            };
            let spec = RunnerSpec::resolve(runner.runner.as_deref(), runner.toy_model, n_k)?;
            let run = RunConfig { data_dir: data, runner: spec, extraction };
            let outcome = run_extract(&run, &out)?;
            println!(
                "extracted {} concepts from {} images ({} forward evaluations) into {}",
                outcome.model.n_c(),
                outcome.labels.len(),
                outcome.record.counts.forward_count,
                out.display()
            );
        }
        Command::Score { out, runner } => {
            let spec = override_runner(&runner, &out)?;
            let scores = run_score(&out, spec)?;
            let r = &scores.report;
            let mut order: Vec<usize> = (0..r.n_c).collect();
            order.sort_by(|&a, &b| r.importance[b].total_cmp(&r.importance[a]).then(a.cmp(&b)));
            println!("concept  importance  mean_relevance  images");
            for j in order {
                println!("{j:>7}  {:>10.4}  {:>14.6e}  {:>6}", r.importance[j], r.mean_relevance[j], r.presence[j]);
            }
            println!(
                "gradient evaluations: {}, forward evaluations: {}, skipped (g = 0): {}",
                scores.counts.gradient_count, scores.counts.forward_count, r.skipped
            );
        }
        Command::Report { out } => {
            let report = generate_report(&out)?;
            println!("wrote {} ({} concepts)", out.join("concepts.json").display(), report.concepts.len());
        }
        Command::Localize { out, image, concept, mask_out, runner } => {
            let spec = match override_runner(&runner, &out)? {
                Some(s) => s,
                None => {
                    let text = std::fs::read_to_string(out.join("config.json"))
                        .map_err(|e| Failure::Usage(format!("{}: {e}; run extract first", out.display())))?;
                    let run: RunConfig =
                        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config.json: {e}")))?;
                    run.runner
                }
            };
            let mut model = spec.open()?;
            let mask = localize_image(&out, &image, concept, &mut *model)?;
            let (h, w) = mask.resolution();
            let bits: Vec<bool> = mask.mask.data().iter().map(|&v| v > 0.0).collect();
            let path = match mask_out {
                Some(p) => p,
                None => {
                    let stem = image.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
                    let dir = out.join("localize");
                    std::fs::create_dir_all(&dir)
                        .map_err(|e| Error::Dataset { path: dir.clone(), msg: e.to_string() })?;
                    dir.join(format!("{stem}_c{concept:02}.png"))
                }
            };
            save_mask_png(&bits, (h, w), &path)?;
            println!("concept {concept}: {} of {} pixels; mask written to {}", mask.area(), h * w, path.display());
        }
        Command::Synth { classes, count, size, seed, out, entangled } => {
            let spec = SynthSpec { classes, count, size, seed, entangled };
            spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let manifest = synth_dataset(&spec, &out)?;
            println!(
                "wrote {} images in {} classes to {}",
                manifest.images.len(),
                manifest.cues.len(),
                out.join("images").display()
            );
        }
        Command::Resize { data, out, size } => {
            if size.0 == 0 || size.1 == 0 {
                return Err(Failure::Usage("size must be positive".into()));
            }
            let n = resize_dataset(&data, &out, size)?;
            println!("resized {n} images to {}x{} into {}", size.0, size.1, out.display());
        }
        Command::ServeToy { n_classes, echo, layers } => {
            let stdin = std::io::stdin().lock();
            let stdout = std::io::stdout().lock();
            let result = if echo {
                serve(&mut EchoRunner::new(layers, n_classes), stdin, stdout)
            } else {
                let mut toy = ToyRunner::new(n_classes).map_err(|e| Failure::Usage(e.to_string()))?;
                serve(&mut toy, stdin, stdout)
            };
            result.map_err(|e| Error::from(RunnerError::Io(e)))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = exit_code(&f);
            match f {
                Failure::Usage(msg) => eprintln!("error: {msg}"),
                Failure::Core(e) => {
                    eprintln!("error: {e}");
                    let mut source = std::error::Error::source(&e);
                    while let Some(s) = source {
                        eprintln!("  caused by: {s}");
                        source = s.source();
                    }
                }
            }
            ExitCode::from(code)
        }
    }
}
