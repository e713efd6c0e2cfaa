//! `craft` — experiment driver for the derivative-free fine-tuning toolkit.
//!
//! One subcommand per stage of the workflow: `gen-task` writes a synthetic
//! few-shot task, `train` runs the alternating prompt-search/refinement
//! loop against it, `eval` scores saved artifacts, `ablate` sweeps the
//! component and refiner grids, `bench-cmaes` exercises the optimizer on
//! standard test functions, and `serve` exposes a surrogate model over TCP.
//!
//! Training knobs layer as: built-in defaults, then the `CRAFT_SEED`
//! environment variable (seeds only), then the `--config` file, then
//! command-line flags. Metric CSVs are flushed after every row so an
//! interrupted run still leaves a readable prefix.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use craft_core::blackbox::{corruption_matrix, BlackBoxOracle, InProcessOracle, SurrogateParams};
use craft_core::cma::testfn::{rosenbrock, sphere};
use craft_core::cma::SearchState;
use craft_core::numerics::{mix_seed, SeededRng};
use craft_core::refine::{Refiner, RefinerArch};
use craft_core::subspace::PromptSpec;
use craft_core::tasks::{generate, FewShotTask, TaskParams, PROJECTION_STD};
use craft_core::trainer::{self, TrainConfig};
use craft_core::{service, Error, Result};

#[derive(Parser)]
#[command(
    name = "craft",
    version,
    about = "Derivative-free fine-tuning against a black-box prediction API"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic few-shot task file
    GenTask(GenTaskArgs),
    /// Train a prompt latent and refiner on a task
    Train(TrainArgs),
    /// Score a task with saved artifacts (defaults reproduce the zero-shot baseline)
    Eval(EvalArgs),
    /// Run an ablation grid and emit its per-seed accuracy CSV
    Ablate(AblateArgs),
    /// Benchmark the optimizer on standard test functions
    BenchCmaes(BenchArgs),
    /// Serve a seeded surrogate model over newline-delimited JSON
    Serve(ServeArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenTask(args) => cmd_gen_task(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::BenchCmaes(args) => cmd_bench(args),
        Command::Serve(args) => cmd_serve(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// `CRAFT_SEED`, the lowest-precedence seed source after built-in defaults.
fn env_seed() -> Result<Option<u64>> {
    match std::env::var("CRAFT_SEED") {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| {
            Error::Config(format!("CRAFT_SEED must be an unsigned integer, got {s:?}"))
        }),
        Err(_) => Ok(None),
    }
}

/// Prefixes file-shaped errors with the offending path so "No such file or
/// directory" always names the file.
fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Config(format!("{}: {io}", path.display())),
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Shared training-config plumbing

/// Command-line mirror of the [`TrainConfig`] vocabulary: every key accepted
/// in a config file is also a flag (snake_case, with the conventional
/// kebab-case spelling as an alias). Values funnel through
/// [`TrainConfig::set`] so file and flag parsing agree exactly.
#[derive(Args, Debug, Default)]
struct ConfigFlags {
    /// Total fitness-query budget B
    #[arg(long)]
    budget: Option<u64>,
    /// Population size per generation
    #[arg(long)]
    lambda: Option<usize>,
    /// Refinement minibatch size
    #[arg(long = "batch_size", alias = "batch-size")]
    batch_size: Option<usize>,
    /// AdamW learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Fitness-side consistency weight (default 0.1/K)
    #[arg(long = "lambda_i", alias = "lambda-i")]
    lambda_i: Option<f64>,
    /// Refiner-side consistency weight (default 0.1/K)
    #[arg(long = "lambda_o", alias = "lambda-o")]
    lambda_o: Option<f64>,
    /// Prompt length (defaults to the task's)
    #[arg(long)]
    n: Option<usize>,
    /// Prompt embedding dimension (defaults to the task's)
    #[arg(long)]
    d: Option<usize>,
    /// Latent subspace dimension
    #[arg(long)]
    d0: Option<usize>,
    /// Refiner hidden width
    #[arg(long)]
    hidden: Option<usize>,
    /// Initial search step size
    #[arg(long)]
    sigma0: Option<f64>,
    /// Std of the random projection entries
    #[arg(long = "projection_std", alias = "projection-std")]
    projection_std: Option<f64>,
    /// Projection seed (default: the task's, keeping planted offsets reachable)
    #[arg(long = "projection_seed", alias = "projection-seed")]
    projection_seed: Option<u64>,
    #[arg(long = "cma_seed", alias = "cma-seed")]
    cma_seed: Option<u64>,
    #[arg(long = "refiner_seed", alias = "refiner-seed")]
    refiner_seed: Option<u64>,
    /// Seed for generating the default task when no --task file is given
    #[arg(long = "task_seed", alias = "task-seed")]
    task_seed: Option<u64>,
    /// Run the prompt-search half (true/false)
    #[arg(long = "prompt_enabled", alias = "prompt-enabled")]
    prompt_enabled: Option<bool>,
    /// Run the refinement half (true/false)
    #[arg(long = "refine_enabled", alias = "refine-enabled")]
    refine_enabled: Option<bool>,
    /// Keep the mutual consistency losses (true/false)
    #[arg(long = "collaborative_enabled", alias = "collaborative-enabled")]
    collaborative_enabled: Option<bool>,
    /// Add the refiner's output to its input (true/false)
    #[arg(long = "residual_enabled", alias = "residual-enabled")]
    residual_enabled: Option<bool>,
    /// Refiner architecture: mlp | linear
    #[arg(long = "refiner_arch", alias = "refiner-arch")]
    refiner_arch: Option<String>,
}

impl ConfigFlags {
    fn apply(&self, config: &mut TrainConfig) -> Result<()> {
        let entries: [(&str, Option<String>); 21] = [
            ("budget", self.budget.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("lambda_i", self.lambda_i.map(|v| v.to_string())),
            ("lambda_o", self.lambda_o.map(|v| v.to_string())),
            ("n", self.n.map(|v| v.to_string())),
            ("d", self.d.map(|v| v.to_string())),
            ("d0", self.d0.map(|v| v.to_string())),
            ("hidden", self.hidden.map(|v| v.to_string())),
            ("sigma0", self.sigma0.map(|v| v.to_string())),
            ("projection_std", self.projection_std.map(|v| v.to_string())),
            (
                "projection_seed",
                self.projection_seed.map(|v| v.to_string()),
            ),
            ("cma_seed", self.cma_seed.map(|v| v.to_string())),
            ("refiner_seed", self.refiner_seed.map(|v| v.to_string())),
            ("task_seed", self.task_seed.map(|v| v.to_string())),
            ("prompt_enabled", self.prompt_enabled.map(|v| v.to_string())),
            ("refine_enabled", self.refine_enabled.map(|v| v.to_string())),
            (
                "collaborative_enabled",
                self.collaborative_enabled.map(|v| v.to_string()),
            ),
            (
                "residual_enabled",
                self.residual_enabled.map(|v| v.to_string()),
            ),
            ("refiner_arch", self.refiner_arch.clone()),
        ];
        for (key, value) in entries {
            if let Some(v) = value {
                config.set(key, &v)?;
            }
        }
        Ok(())
    }
}

/// Layers the config sources onto `base` in precedence order:
/// base defaults < CRAFT_SEED (seed fields only) < config file < flags.
fn assemble_config(
    mut base: TrainConfig,
    file: Option<&PathBuf>,
    flags: &ConfigFlags,
) -> Result<TrainConfig> {
    if let Some(seed) = env_seed()? {
        base.task_seed = seed;
        base.cma_seed = seed;
        base.refiner_seed = seed;
    }
    if let Some(path) = file {
        base.apply_file(path).map_err(|e| with_path(e, path))?;
    }
    flags.apply(&mut base)?;
    Ok(base)
}

fn load_or_generate_task(path: Option<&PathBuf>, seed: u64) -> Result<FewShotTask> {
    match path {
        Some(p) => FewShotTask::read(p).map_err(|e| with_path(e, p)),
        None => {
            eprintln!(
                "[task] no --task given; generating the default synthetic task (seed {seed})"
            );
            generate(&TaskParams::new(seed))
        }
    }
}

// ---------------------------------------------------------------------------
// gen-task

#[derive(Args, Debug)]
struct GenTaskArgs {
    /// Where to write the task file
    #[arg(long, short = 'o')]
    out: PathBuf,
    /// Generator seed (falls back to CRAFT_SEED, then 1)
    #[arg(long)]
    seed: Option<u64>,
    /// Number of classes K
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Labeled examples per class
    #[arg(long, default_value_t = 16)]
    shots: usize,
    /// Prompt length
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Prompt embedding dimension
    #[arg(long, default_value_t = 16)]
    d: usize,
    /// Image feature dimension
    #[arg(long = "feat_dim", alias = "feat-dim", default_value_t = 64)]
    feat_dim: usize,
    /// Dimension of the planted prompt-offset subspace
    #[arg(long = "plant_dim", alias = "plant-dim", default_value_t = 8)]
    plant_dim: usize,
    /// Std of the hidden latent driving the planted offset
    #[arg(long = "latent_scale", alias = "latent-scale", default_value_t = 4.0)]
    latent_scale: f64,
    /// Feature noise around each class prototype
    #[arg(long = "noise_std", alias = "noise-std", default_value_t = 0.12)]
    noise_std: f64,
    /// Logit corruption strength in [0, 0.5); 0 disables it
    #[arg(long, default_value_t = 0.35)]
    corruption: f64,
    /// Test examples per class
    #[arg(
        long = "test_per_class",
        alias = "test-per-class",
        default_value_t = 50
    )]
    test_per_class: usize,
    /// Plant the offset outside the projected subspace
    #[arg(long)]
    unreachable: bool,
    /// Accept the first candidate without headroom calibration
    #[arg(long = "no_calibrate", alias = "no-calibrate")]
    no_calibrate: bool,
}

fn cmd_gen_task(args: GenTaskArgs) -> Result<()> {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(1),
    };
    let mut params = TaskParams::new(seed);
    params.classes = args.classes;
    params.shots = args.shots;
    params.n = args.n;
    params.d = args.d;
    params.feat_dim = args.feat_dim;
    params.plant_dim = args.plant_dim;
    params.latent_scale = args.latent_scale;
    params.noise_std = args.noise_std;
    params.corruption_strength = args.corruption;
    params.test_per_class = args.test_per_class;
    params.reachable = !args.unreachable;
    params.calibrate = !args.no_calibrate;

    let task = generate(&params)?;
    task.write(&args.out).map_err(|e| with_path(e, &args.out))?;
    let metrics = task.planted_metrics()?;
    println!(
        "wrote {}: {} classes x {} shots (train {}, test {}), prompt {}x{}, features {}",
        args.out.display(),
        task.classes,
        task.shots,
        task.labels_train.len(),
        task.labels_test.len(),
        task.n,
        task.d,
        task.feat_dim
    );
    println!(
        "zero-shot {:.4} | planted prompt {:.4} | oracle-refined zero-shot {:.4}",
        metrics.zero_shot, metrics.planted, metrics.refined_zero_shot
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Args, Debug)]
struct TrainArgs {
    /// Task file from gen-task (omitted: generate one from task_seed)
    #[arg(long)]
    task: Option<PathBuf>,
    /// Flat `key = value` config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
    /// Per-generation metrics CSV, flushed row by row
    #[arg(long, default_value = "metrics.csv")]
    metrics: PathBuf,
    /// Final deployment latent, one coordinate per line
    #[arg(
        long = "latent_out",
        alias = "latent-out",
        default_value = "latent.txt"
    )]
    latent_out: PathBuf,
    /// Trained refiner checkpoint
    #[arg(
        long = "refiner_out",
        alias = "refiner-out",
        default_value = "refiner.bin"
    )]
    refiner_out: PathBuf,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    // First pass only to learn the task seed; the real config is rebuilt on
    // top of the task's geometry once the task exists.
    let pre = assemble_config(TrainConfig::new(), args.config.as_ref(), &args.flags)?;
    let task = load_or_generate_task(args.task.as_ref(), pre.task_seed)?;
    let config = assemble_config(
        TrainConfig::for_task(&task),
        args.config.as_ref(),
        &args.flags,
    )?;

    let mut csv = File::create(&args.metrics).map_err(|e| with_path(e.into(), &args.metrics))?;
    writeln!(csv, "{}", trainer::CSV_HEADER).map_err(|e| with_path(e.into(), &args.metrics))?;
    csv.flush()
        .map_err(|e| with_path(e.into(), &args.metrics))?;

    let model = Arc::new(task.build_model()?);
    let generations = config.budget / config.lambda as u64;
    let train_budget = generations
        * ((config.prompt_enabled as u64) * config.lambda as u64 + config.refine_enabled as u64);
    let train_oracle = InProcessOracle::new(Arc::clone(&model), train_budget);
    let eval_oracle = InProcessOracle::new(model, generations + 8);

    let progress_every = (generations / 10).max(1);
    let mut csv_err: Option<std::io::Error> = None;
    let report = trainer::run(&config, &task, &train_oracle, &eval_oracle, |rec| {
        if csv_err.is_none() {
            if let Err(e) = writeln!(csv, "{}", rec.csv_row()).and_then(|()| csv.flush()) {
                csv_err = Some(e);
            }
        }
        if rec.generation % progress_every == 0 || rec.generation == generations {
            eprintln!(
                "[train] gen {}/{} sigma {:.4} best {:.4} refine-loss {:.4} test {:.4}/{:.4}",
                rec.generation,
                generations,
                rec.sigma,
                rec.fitness_best,
                rec.loss_refine,
                rec.acc_test_blackbox,
                rec.acc_test_refined
            );
        }
    })?;
    if let Some(e) = csv_err {
        return Err(with_path(e.into(), &args.metrics));
    }

    let mut latent = String::new();
    for v in &report.final_latent {
        latent.push_str(&format!("{v}\n"));
    }
    fs::write(&args.latent_out, latent).map_err(|e| with_path(e.into(), &args.latent_out))?;
    report
        .refiner
        .save(&args.refiner_out)
        .map_err(|e| with_path(e, &args.refiner_out))?;

    println!(
        "zero-shot {:.4} -> black-box {:.4} | refined {:.4} ({} training queries over {} generations)",
        report.acc_zero_shot,
        report.acc_final_blackbox,
        report.acc_final_refined,
        report.queries_train,
        report.records.len()
    );
    println!(
        "wrote {}, {}, {}",
        args.metrics.display(),
        args.latent_out.display(),
        args.refiner_out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Test,
    Train,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Task file to score against
    #[arg(long)]
    task: PathBuf,
    /// Prompt latent, one coordinate per line (omitted: z = 0, the zero-shot prompt)
    #[arg(long)]
    latent: Option<PathBuf>,
    /// Refiner checkpoint (omitted: fresh zero-initialized refiner, an identity)
    #[arg(long)]
    refiner: Option<PathBuf>,
    /// Latent dimension; only needed without --latent, must agree with it otherwise
    #[arg(long)]
    d0: Option<usize>,
    #[arg(long = "projection_std", alias = "projection-std", default_value_t = PROJECTION_STD)]
    projection_std: f64,
    /// Projection seed (default: the task's)
    #[arg(long = "projection_seed", alias = "projection-seed")]
    projection_seed: Option<u64>,
    /// Which split to score
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// Also append a `split,acc_blackbox,acc_refined` row to this file
    #[arg(long)]
    append: Option<PathBuf>,
}

fn read_latent(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| with_path(e.into(), path))?;
    let mut z = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        z.push(line.parse().map_err(|_| {
            Error::Config(format!(
                "{}: line {}: expected a float, got {line:?}",
                path.display(),
                lineno + 1
            ))
        })?);
    }
    if z.is_empty() {
        return Err(Error::Config(format!(
            "{}: no latent coordinates",
            path.display()
        )));
    }
    Ok(z)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let task = FewShotTask::read(&args.task).map_err(|e| with_path(e, &args.task))?;
    let z = match &args.latent {
        Some(path) => read_latent(path)?,
        None => vec![0.0; args.d0.unwrap_or(1)],
    };
    if let Some(d0) = args.d0 {
        if d0 != z.len() {
            return Err(Error::Config(format!(
                "--d0 {d0} disagrees with the {} coordinates in the latent file",
                z.len()
            )));
        }
    }
    let projection_seed = args.projection_seed.unwrap_or(task.projection_seed);
    let spec = PromptSpec::new(
        task.p0.clone(),
        task.class_embeddings.clone(),
        projection_seed,
        z.len(),
        args.projection_std,
    )?;
    let refiner = match &args.refiner {
        Some(path) => Refiner::load(path).map_err(|e| with_path(e, path))?,
        None => Refiner::init(
            &mut SeededRng::new(0),
            task.classes,
            1,
            RefinerArch::Mlp,
            true,
        )?,
    };
    if refiner.classes() != task.classes {
        return Err(Error::Config(format!(
            "refiner checkpoint has {} classes but the task has {}",
            refiner.classes(),
            task.classes
        )));
    }

    let (features, labels, split) = match args.split {
        Split::Test => (&task.features_test, &task.labels_test, "test"),
        Split::Train => (&task.features_train, &task.labels_train, "train"),
    };
    let oracle = InProcessOracle::new(Arc::new(task.build_model()?), 2);
    oracle.register_images(split, features)?;
    let (acc_blackbox, acc_refined) =
        trainer::evaluate(&oracle, split, &spec, &z, &refiner, labels)?;

    println!("split={split} acc_blackbox={acc_blackbox:.6} acc_refined={acc_refined:.6}");
    if let Some(path) = &args.append {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| with_path(e.into(), path))?;
        writeln!(f, "{split},{acc_blackbox:.6},{acc_refined:.6}")
            .map_err(|e| with_path(e.into(), path))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Grid {
    /// Prompt search / refinement / collaboration on-off rows
    Components,
    /// Plain-MLP vs residual-linear vs residual-MLP refiners
    Refinement,
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// Task file (omitted: generate one from task_seed)
    #[arg(long)]
    task: Option<PathBuf>,
    /// Base config file for every row; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
    /// Which grid to sweep
    #[arg(long, value_enum, default_value_t = Grid::Components)]
    grid: Grid,
    /// Comma-separated seeds; every row runs once per seed
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    /// Output CSV (omitted: stdout)
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let pre = assemble_config(TrainConfig::new(), args.config.as_ref(), &args.flags)?;
    let task = load_or_generate_task(args.task.as_ref(), pre.task_seed)?;
    let config = assemble_config(
        TrainConfig::for_task(&task),
        args.config.as_ref(),
        &args.flags,
    )?;

    let grid = match args.grid {
        Grid::Components => trainer::component_grid(&config),
        Grid::Refinement => trainer::refinement_grid(&config),
    };
    eprintln!(
        "[ablate] {} configurations x {} seeds at budget {}",
        grid.len(),
        args.seeds.len(),
        config.budget
    );
    let started = Instant::now();
    let rows = trainer::ablate(&grid, &task, &args.seeds)?;
    eprintln!("[ablate] finished in {:.1?}", started.elapsed());

    let csv = trainer::ablation_csv(&rows);
    match &args.out {
        Some(path) => {
            fs::write(path, &csv).map_err(|e| with_path(e.into(), path))?;
            eprintln!("[ablate] wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench-cmaes

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BenchFn {
    Sphere,
    Rosenbrock,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Test function
    #[arg(long = "fn", value_enum)]
    function: BenchFn,
    /// Problem dimension
    #[arg(long, default_value_t = 8)]
    d: usize,
    /// Population size
    #[arg(long, default_value_t = 16)]
    lambda: usize,
    /// Generation cap per repeat (default: 500 sphere, 3000 rosenbrock)
    #[arg(long)]
    generations: Option<usize>,
    /// Declare success and stop early below this fitness
    /// (default: 1e-10 sphere, 1e-6 rosenbrock)
    #[arg(long)]
    target: Option<f64>,
    /// Independent repeats; repeat i seeds its own stream from seed and i
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    /// Base seed (falls back to CRAFT_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Initial step size (default: 1.0 sphere, 0.5 rosenbrock)
    #[arg(long)]
    sigma0: Option<f64>,
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let (name, func): (&str, fn(&[f64]) -> f64) = match args.function {
        BenchFn::Sphere => ("sphere", sphere),
        BenchFn::Rosenbrock => ("rosenbrock", rosenbrock),
    };
    let (default_target, default_cap, default_sigma0) = match args.function {
        BenchFn::Sphere => (1e-10, 500, 1.0),
        BenchFn::Rosenbrock => (1e-6, 3000, 0.5),
    };
    let target = args.target.unwrap_or(default_target);
    let cap = args.generations.unwrap_or(default_cap);
    let sigma0 = args.sigma0.unwrap_or(default_sigma0);
    let base_seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    if args.repeats == 0 {
        return Err(Error::Config("need at least one repeat".into()));
    }

    let started = Instant::now();
    let mut bests = Vec::with_capacity(args.repeats);
    let mut gens_used = Vec::with_capacity(args.repeats);
    let mut successes = 0usize;
    for rep in 0..args.repeats {
        let mut rng = SeededRng::new(mix_seed(base_seed, rep as u64));
        let mut state = SearchState::init(args.d, vec![0.0; args.d], sigma0, args.lambda)?;
        let mut gens = 0usize;
        while gens < cap {
            let solutions = state.ask(&mut rng)?;
            let fitnesses: Vec<f64> = solutions.iter().map(|z| func(z)).collect();
            state.tell(&solutions, &fitnesses)?;
            gens += 1;
            if state.best().is_some_and(|(f, _)| f < target) {
                break;
            }
        }
        let best = state.best().map_or(f64::INFINITY, |(f, _)| f);
        let reached = best < target;
        successes += reached as usize;
        println!(
            "repeat {rep}: best {best:.3e} after {gens} generations{}",
            if reached { " (reached target)" } else { "" }
        );
        bests.push(best);
        gens_used.push(gens);
    }

    bests.sort_by(|a, b| a.total_cmp(b));
    gens_used.sort_unstable();
    println!(
        "{name} d={} lambda={}: median best {:.3e}, {successes}/{} repeats below {target:.0e}, \
         median {} generations, {:.1?} total",
        args.d,
        args.lambda,
        bests[bests.len() / 2],
        args.repeats,
        gens_used[gens_used.len() / 2],
        started.elapsed()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// serve

#[derive(Args, Debug)]
struct ServeArgs {
    /// Model seed (falls back to CRAFT_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Total query budget across all connections
    #[arg(long, default_value_t = 10_000)]
    budget: u64,
    /// Listen address
    #[arg(long, default_value = "127.0.0.1:7878")]
    listen: String,
    /// Model geometry as n,d,feat_dim,classes (prompt rows before the class row)
    #[arg(long, value_delimiter = ',', default_value = "4,16,64,10")]
    dims: Vec<usize>,
    /// Logit corruption strength in [0, 0.5); seeded by the model seed,
    /// matching how tasks derive their corrupted oracle
    #[arg(long, default_value_t = 0.0)]
    corruption: f64,
}

fn cmd_serve(args: ServeArgs) -> Result<()> {
    if args.dims.len() != 4 {
        return Err(Error::Config(format!(
            "--dims wants n,d,feat_dim,classes (got {} values)",
            args.dims.len()
        )));
    }
    let (n, d, feat_dim, classes) = (args.dims[0], args.dims[1], args.dims[2], args.dims[3]);
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let mut params = SurrogateParams::new(seed, n + 1, d, feat_dim, classes);
    if args.corruption > 0.0 {
        params.corruption = Some(corruption_matrix(classes, args.corruption, seed)?);
    }
    service::serve(&params, args.budget, &args.listen)
}
