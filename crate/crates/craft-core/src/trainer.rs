//! The end-to-end training loop: derivative-free prompt search alternating
//! with gradient-descent epochs of the output refiner, coupled through
//! mutual prediction-consistency terms.
//!
//! Each outer generation spends λ oracle queries scoring sampled latents
//! (fitness = CE(Y_I, Y) + λ_I·KL(Y_I‖Y_O), with the refiner frozen), then
//! one extra query at the current distribution mean whose logits feed a full
//! refinement epoch (loss = CE(Y_O, Y) + λ_O·KL(Y_O‖Y_I), with the search
//! distribution frozen). A full run therefore charges the training ledger
//! exactly B + B/λ queries, which [`run`] asserts. Evaluation runs on a
//! separate oracle with its own ledger.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::blackbox::{BlackBoxOracle, InProcessOracle};
use crate::cma::SearchState;
use crate::error::{Error, Result};
use crate::numerics::{accuracy, cross_entropy, kl_divergence, mix_seed, Matrix, SeededRng};
use crate::refine::{refine_loss, AdamW, Refiner, RefinerArch};
use crate::subspace::PromptSpec;
use crate::tasks::FewShotTask;

/// Handle the training split is registered under by [`run`].
pub const TRAIN_HANDLE: &str = "train";
/// Handle the test split is registered under by [`run`].
pub const TEST_HANDLE: &str = "test";

/// Header of the per-generation metrics CSV.
pub const CSV_HEADER: &str =
    "generation,queries_train,sigma,fitness_best,fitness_mean,loss_refine,acc_test_blackbox,acc_test_refined";

/// All knobs of one training run. `new` gives the reference defaults:
/// budget 8000, population 40, batch size 256, AdamW lr 0.001, subspace
/// dimension 512, refiner hidden width 512, and consistency weights
/// λ_I = λ_O = 0.1/K (the `None` state).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Total fitness-query budget B.
    pub budget: u64,
    /// CMA-ES population size λ.
    pub lambda: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Consistency weight on the fitness side; `None` means 0.1/K.
    pub lambda_i: Option<f64>,
    /// Consistency weight on the refiner side; `None` means 0.1/K.
    pub lambda_o: Option<f64>,
    /// Prompt length; must match the task.
    pub n: usize,
    /// Embedding dimension; must match the task.
    pub d: usize,
    /// Latent subspace dimension d0.
    pub d0: usize,
    /// Refiner hidden width.
    pub hidden: usize,
    pub sigma0: f64,
    pub projection_std: f64,
    /// `None` reuses the task's projection seed, which keeps any planted
    /// offset reachable.
    pub projection_seed: Option<u64>,
    pub cma_seed: u64,
    pub refiner_seed: u64,
    /// Seed for generating a default task when none is supplied externally.
    pub task_seed: u64,
    pub prompt_enabled: bool,
    pub refine_enabled: bool,
    /// When false both KL terms are forced to zero; the loop is otherwise
    /// identical, isolating the collaboration factor.
    pub collaborative_enabled: bool,
    pub residual_enabled: bool,
    pub refiner_arch: RefinerArch,
}

impl TrainConfig {
    pub fn new() -> Self {
        Self {
            budget: 8000,
            lambda: 40,
            batch_size: 256,
            lr: 0.001,
            lambda_i: None,
            lambda_o: None,
            n: 4,
            d: 16,
            d0: 512,
            hidden: 512,
            sigma0: 1.0,
            projection_std: 0.02,
            projection_seed: None,
            cma_seed: 0,
            refiner_seed: 0,
            task_seed: 1,
            prompt_enabled: true,
            refine_enabled: true,
            collaborative_enabled: true,
            residual_enabled: true,
            refiner_arch: RefinerArch::Mlp,
        }
    }

    /// Reference defaults with prompt geometry (n, d) taken from a task.
    pub fn for_task(task: &FewShotTask) -> Self {
        let mut c = Self::new();
        c.n = task.n;
        c.d = task.d;
        c
    }

    /// Sets one field from its textual form; the key set is exactly the
    /// config-file/flag vocabulary. Unknown keys and unparsable values are
    /// rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key:?}")))
        }
        match key {
            "budget" => self.budget = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "lambda_i" => self.lambda_i = Some(parse(key, value)?),
            "lambda_o" => self.lambda_o = Some(parse(key, value)?),
            "n" => self.n = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "d0" => self.d0 = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "sigma0" => self.sigma0 = parse(key, value)?,
            "projection_std" => self.projection_std = parse(key, value)?,
            "projection_seed" => self.projection_seed = Some(parse(key, value)?),
            "cma_seed" => self.cma_seed = parse(key, value)?,
            "refiner_seed" => self.refiner_seed = parse(key, value)?,
            "task_seed" => self.task_seed = parse(key, value)?,
            "prompt_enabled" => self.prompt_enabled = parse(key, value)?,
            "refine_enabled" => self.refine_enabled = parse(key, value)?,
            "collaborative_enabled" => self.collaborative_enabled = parse(key, value)?,
            "residual_enabled" => self.residual_enabled = parse(key, value)?,
            "refiner_arch" => self.refiner_arch = RefinerArch::parse(value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` config file. Blank lines and `#` comments
    /// are ignored; unknown keys are errors.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// λ_I with the 0.1/K default resolved.
    pub fn effective_lambda_i(&self, classes: usize) -> f64 {
        if !self.collaborative_enabled {
            return 0.0;
        }
        self.lambda_i.unwrap_or(0.1 / classes as f64)
    }

    /// λ_O with the 0.1/K default resolved.
    pub fn effective_lambda_o(&self, classes: usize) -> f64 {
        if !self.collaborative_enabled {
            return 0.0;
        }
        self.lambda_o.unwrap_or(0.1 / classes as f64)
    }

    /// Outer generations B/λ, truncating (with a warning) when λ ∤ B.
    fn generations(&self) -> u64 {
        let gens = self.budget / self.lambda as u64;
        if !self.budget.is_multiple_of(self.lambda as u64) {
            eprintln!(
                "warning: budget {} is not divisible by population {}; truncating to {} generations ({} queries)",
                self.budget,
                self.lambda,
                gens,
                gens * self.lambda as u64
            );
        }
        gens
    }

    fn validate(&self, task: &FewShotTask) -> Result<()> {
        if self.n != task.n || self.d != task.d {
            return Err(Error::Config(format!(
                "prompt geometry {}x{} disagrees with the task's {}x{}",
                self.n, self.d, task.n, task.d
            )));
        }
        if self.batch_size == 0 || self.d0 == 0 || self.hidden == 0 {
            return Err(Error::Config("all counts must be >= 1".into()));
        }
        if self.prompt_enabled && self.budget < self.lambda as u64 {
            return Err(Error::Config(format!(
                "budget {} cannot cover even one generation of {} queries",
                self.budget, self.lambda
            )));
        }
        if !self.prompt_enabled && !self.refine_enabled {
            return Err(Error::Config(
                "nothing to train: enable the prompt search and/or the refiner".into(),
            ));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new()
    }
}

/// One row of the metrics CSV. When the prompt search is disabled the
/// fitness columns carry the loss of the frozen z = 0 prompt (computed from
/// the refinement-input query, so no extra charge) and `sigma` is 0.
#[derive(Debug, Clone)]
pub struct GenerationRecord {
    pub generation: u64,
    /// Cumulative training-ledger queries after this generation.
    pub queries_train: u64,
    pub sigma: f64,
    /// Best fitness among this generation's λ samples.
    pub fitness_best: f64,
    pub fitness_mean: f64,
    /// Mean refinement loss over this generation's epoch (0 when the
    /// refiner is disabled).
    pub loss_refine: f64,
    pub acc_test_blackbox: f64,
    pub acc_test_refined: f64,
}

impl GenerationRecord {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{}",
            self.generation,
            self.queries_train,
            self.sigma,
            self.fitness_best,
            self.fitness_mean,
            self.loss_refine,
            self.acc_test_blackbox,
            self.acc_test_refined
        )
        .expect("writing to a String cannot fail");
        s
    }
}

/// Writes the full metrics CSV (header + one row per generation).
pub fn write_csv(records: &[GenerationRecord], path: &Path) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Outcome of a full run.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub records: Vec<GenerationRecord>,
    /// Final search-distribution mean — the deployment prompt's latent.
    pub final_latent: Vec<f64>,
    pub refiner: Refiner,
    /// Exact training-ledger charge; equals B + B/λ for a full run (λ per
    /// generation for fitness, 1 per generation for the epoch's input).
    pub queries_train: u64,
    /// Black-box accuracy at z = 0 before any training.
    pub acc_zero_shot: f64,
    pub acc_final_blackbox: f64,
    pub acc_final_refined: f64,
}

/// The prompt-side objective for one latent: one oracle query for Y_I over
/// the whole few-shot set, then CE(Y_I, Y) plus, when training
/// collaboratively, λ_I·KL(Y_I‖Y_O) with the refiner frozen.
#[allow(clippy::too_many_arguments)]
pub fn fitness(
    oracle: &dyn BlackBoxOracle,
    handle: &str,
    spec: &PromptSpec,
    refiner: Option<&Refiner>,
    z: &[f64],
    labels: &[usize],
    lambda_i: f64,
    collaborative: bool,
) -> Result<f64> {
    let prompts = spec.build_prompts(z)?;
    let y_i = oracle.predict(handle, &prompts)?;
    let mut value = cross_entropy(&y_i, labels)?;
    if collaborative && lambda_i != 0.0 {
        if let Some(r) = refiner {
            let (y_o, _) = r.forward(&y_i)?;
            value += lambda_i * kl_divergence(&y_i, &y_o)?;
        }
    }
    if !value.is_finite() {
        return Err(Error::NonFiniteFitness);
    }
    Ok(value)
}

/// Argmax accuracies of the raw black-box logits and of the refined logits
/// on one registered split (one oracle query).
pub fn evaluate(
    oracle: &dyn BlackBoxOracle,
    handle: &str,
    spec: &PromptSpec,
    z: &[f64],
    refiner: &Refiner,
    labels: &[usize],
) -> Result<(f64, f64)> {
    let prompts = spec.build_prompts(z)?;
    let y_i = oracle.predict(handle, &prompts)?;
    let acc_black_box = accuracy(&y_i, labels)?;
    let (y_o, _) = refiner.forward(&y_i)?;
    let acc_refined = accuracy(&y_o, labels)?;
    Ok((acc_black_box, acc_refined))
}

/// One refinement epoch: ⌈N/batch⌉ AdamW steps over a shuffled split of the
/// fixed input logits. Returns the dataset-mean loss.
fn refine_epoch(
    refiner: &mut Refiner,
    opt: &mut AdamW,
    y_i: &Matrix,
    labels: &[usize],
    lambda_o: f64,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<f64> {
    let n = y_i.rows();
    let k = y_i.cols();
    let order = rng.shuffled_indices(n);
    let mut loss_sum = 0.0;
    for chunk in order.chunks(batch_size) {
        let mut batch = Matrix::zeros(chunk.len(), k);
        let mut batch_labels = Vec::with_capacity(chunk.len());
        for (r, &src) in chunk.iter().enumerate() {
            batch.row_mut(r).copy_from_slice(y_i.row(src));
            batch_labels.push(labels[src]);
        }
        let (y_o, cache) = refiner.forward(&batch)?;
        let (loss, grad_y_o) = refine_loss(&y_o, &batch, &batch_labels, lambda_o)?;
        let grad = refiner.backward(&cache, &grad_y_o)?;
        opt.step(refiner.theta_mut(), &grad)?;
        loss_sum += loss * chunk.len() as f64;
    }
    Ok(loss_sum / n as f64)
}

/// Runs the full alternating loop against caller-supplied oracles (the
/// training one is metered; evaluation uses its own ledger). Registers the
/// task's splits under [`TRAIN_HANDLE`] / [`TEST_HANDLE`], so the oracles
/// must be fresh. `on_generation` fires after each outer generation with
/// the row just recorded (the CLI streams these to the CSV).
pub fn run(
    config: &TrainConfig,
    task: &FewShotTask,
    train_oracle: &dyn BlackBoxOracle,
    eval_oracle: &dyn BlackBoxOracle,
    mut on_generation: impl FnMut(&GenerationRecord),
) -> Result<TrainReport> {
    config.validate(task)?;
    let k = task.classes;
    let lambda_i = config.effective_lambda_i(k);
    let lambda_o = config.effective_lambda_o(k);
    let generations = if config.prompt_enabled {
        config.generations()
    } else {
        // No fitness queries to spend; keep the same outer-iteration count
        // so refiner-only runs train for as many epochs as a full run would.
        config.budget / config.lambda as u64
    };

    train_oracle.register_images(TRAIN_HANDLE, &task.features_train)?;
    eval_oracle.register_images(TEST_HANDLE, &task.features_test)?;

    let spec = PromptSpec::new(
        task.p0.clone(),
        task.class_embeddings.clone(),
        config.projection_seed.unwrap_or(task.projection_seed),
        config.d0,
        config.projection_std,
    )?;

    let mut refiner = Refiner::init(
        &mut SeededRng::new(mix_seed(config.refiner_seed, 0x0EF1)),
        k,
        config.hidden,
        config.refiner_arch,
        config.residual_enabled,
    )?;
    let mut opt = AdamW::new(config.lr, refiner.theta().len());
    let mut state = SearchState::init(
        config.d0,
        vec![0.0; config.d0],
        config.sigma0,
        config.lambda,
    )?;
    let mut ask_rng = SeededRng::new(mix_seed(config.cma_seed, 0xA5C));
    let mut epoch_rng = SeededRng::new(mix_seed(config.refiner_seed, 0xE90C));

    let start_used = train_oracle.queries_used();
    let zero = vec![0.0; config.d0];

    // Baseline before any training: z = 0 through the untouched refiner.
    let (acc_zero_shot, _) = evaluate(
        eval_oracle,
        TEST_HANDLE,
        &spec,
        &zero,
        &refiner,
        &task.labels_test,
    )?;

    let mut records = Vec::with_capacity(generations as usize);
    for gen in 1..=generations {
        let (sigma, fitness_best, fitness_mean) = if config.prompt_enabled {
            // Prompt-search half: the refiner is frozen for all λ scores.
            let solutions = state.ask(&mut ask_rng)?;
            let mut fits = Vec::with_capacity(solutions.len());
            for z in &solutions {
                fits.push(fitness(
                    train_oracle,
                    TRAIN_HANDLE,
                    &spec,
                    if config.refine_enabled {
                        Some(&refiner)
                    } else {
                        None
                    },
                    z,
                    &task.labels_train,
                    lambda_i,
                    config.collaborative_enabled,
                )?);
            }
            let best = fits.iter().cloned().fold(f64::INFINITY, f64::min);
            let mean = fits.iter().sum::<f64>() / fits.len() as f64;
            state.tell(&solutions, &fits)?;
            (state.sigma, best, mean)
        } else {
            (0.0, f64::NAN, f64::NAN)
        };

        let mut loss_refine = 0.0;
        let mut mean_fitness_at_rest = None;
        if config.refine_enabled {
            // Refinement half: one query at the deployment prompt (the
            // current mean), then a full epoch on those fixed logits while
            // the search distribution stays frozen.
            let mean_z = if config.prompt_enabled {
                state.mean()
            } else {
                &zero[..]
            };
            let prompts = spec.build_prompts(mean_z)?;
            let y_i = train_oracle.predict(TRAIN_HANDLE, &prompts)?;
            if !config.prompt_enabled {
                mean_fitness_at_rest = Some(cross_entropy(&y_i, &task.labels_train)?);
            }
            loss_refine = refine_epoch(
                &mut refiner,
                &mut opt,
                &y_i,
                &task.labels_train,
                lambda_o,
                config.batch_size,
                &mut epoch_rng,
            )?;
        }

        let eval_z = if config.prompt_enabled {
            state.mean()
        } else {
            &zero[..]
        };
        let (acc_test_blackbox, acc_test_refined) = evaluate(
            eval_oracle,
            TEST_HANDLE,
            &spec,
            eval_z,
            &refiner,
            &task.labels_test,
        )?;

        let rest = mean_fitness_at_rest.unwrap_or(f64::NAN);
        let record = GenerationRecord {
            generation: gen,
            queries_train: train_oracle.queries_used() - start_used,
            sigma,
            fitness_best: if config.prompt_enabled {
                fitness_best
            } else {
                rest
            },
            fitness_mean: if config.prompt_enabled {
                fitness_mean
            } else {
                rest
            },
            loss_refine,
            acc_test_blackbox,
            acc_test_refined,
        };
        on_generation(&record);
        records.push(record);
    }

    let expected = generations * (config.prompt_enabled as u64 * config.lambda as u64)
        + generations * (config.refine_enabled as u64);
    let charged = train_oracle.queries_used() - start_used;
    assert_eq!(
        charged, expected,
        "training charged {charged} queries but the accounting says {expected}"
    );

    let final_latent = if config.prompt_enabled {
        state.mean().to_vec()
    } else {
        zero.clone()
    };
    let (acc_final_blackbox, acc_final_refined) = match records.last() {
        Some(r) => (r.acc_test_blackbox, r.acc_test_refined),
        None => (acc_zero_shot, acc_zero_shot),
    };
    Ok(TrainReport {
        records,
        final_latent,
        refiner,
        queries_train: charged,
        acc_zero_shot,
        acc_final_blackbox,
        acc_final_refined,
    })
}

/// [`run`] against freshly built in-process oracles: a training oracle with
/// exactly the budget the accounting predicts, and an evaluation oracle
/// with its own ledger sized for the per-generation probes.
pub fn run_in_process(config: &TrainConfig, task: &FewShotTask) -> Result<TrainReport> {
    let model = Arc::new(task.build_model()?);
    let generations = config.budget / config.lambda as u64;
    let train_budget = generations * (config.prompt_enabled as u64 * config.lambda as u64)
        + generations * (config.refine_enabled as u64);
    let train_oracle = InProcessOracle::new(Arc::clone(&model), train_budget);
    let eval_oracle = InProcessOracle::new(model, generations + 8);
    run(config, task, &train_oracle, &eval_oracle, |_| {})
}

/// One ablation row: a labeled configuration with its per-seed final
/// accuracies (refined head, which equals the black-box head whenever the
/// refiner is disabled).
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub accs: Vec<f64>,
    pub mean_acc: f64,
}

/// Runs each labeled configuration across all seeds (seed i sets both the
/// CMA and refiner streams) and reports per-row mean final accuracy.
pub fn ablate(
    grid: &[(String, TrainConfig)],
    task: &FewShotTask,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument(
            "ablate needs at least one seed".into(),
        ));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for (label, config) in grid {
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut c = config.clone();
            c.cma_seed = mix_seed(seed, 0xCA);
            c.refiner_seed = mix_seed(seed, 0x0F);
            accs.push(run_in_process(&c, task)?.acc_final_refined);
        }
        let mean_acc = accs.iter().sum::<f64>() / accs.len() as f64;
        rows.push(AblationRow {
            label: label.clone(),
            accs,
            mean_acc,
        });
    }
    Ok(rows)
}

/// The four component-ablation rows: prompt search alone, refiner alone,
/// both without the consistency terms, and the full collaborative loop.
pub fn component_grid(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut prompt_only = base.clone();
    prompt_only.prompt_enabled = true;
    prompt_only.refine_enabled = false;
    prompt_only.collaborative_enabled = false;

    let mut refine_only = base.clone();
    refine_only.prompt_enabled = false;
    refine_only.refine_enabled = true;
    refine_only.collaborative_enabled = false;

    let mut both_plain = base.clone();
    both_plain.prompt_enabled = true;
    both_plain.refine_enabled = true;
    both_plain.collaborative_enabled = false;

    let mut full = base.clone();
    full.prompt_enabled = true;
    full.refine_enabled = true;
    full.collaborative_enabled = true;

    vec![
        ("prompt-only".into(), prompt_only),
        ("refine-only".into(), refine_only),
        ("prompt+refine".into(), both_plain),
        ("collaborative".into(), full),
    ]
}

/// The three refiner-ablation rows: MLP without the shortcut, linear with
/// it, and the full residual MLP.
pub fn refinement_grid(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut no_residual = base.clone();
    no_residual.residual_enabled = false;
    no_residual.refiner_arch = RefinerArch::Mlp;

    let mut linear = base.clone();
    linear.residual_enabled = true;
    linear.refiner_arch = RefinerArch::Linear;

    let mut full = base.clone();
    full.residual_enabled = true;
    full.refiner_arch = RefinerArch::Mlp;

    vec![
        ("mlp".into(), no_residual),
        ("linear+residual".into(), linear),
        ("mlp+residual".into(), full),
    ]
}

/// CSV view of an ablation table: label, per-seed accuracies, mean.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let seeds = rows.first().map_or(0, |r| r.accs.len());
    let mut out = String::from("config");
    for i in 0..seeds {
        let _ = write!(out, ",acc_seed{i}");
    }
    out.push_str(",acc_mean\n");
    for row in rows {
        out.push_str(&row.label);
        for a in &row.accs {
            let _ = write!(out, ",{a}");
        }
        let _ = writeln!(out, ",{}", row.mean_acc);
    }
    out
}
