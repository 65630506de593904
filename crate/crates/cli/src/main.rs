use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mixformer::ablation::{interaction_grid, knob_grid, parse_mode, run_case, AblationCase, Interactions};
use mixformer::block::BlockMode;
use mixformer::checks::{run_scope, Scope, SuiteOptions};
use mixformer::data::{DatasetConfig, SyntheticDataset};
use mixformer::io;
use mixformer::train::{run_toy, ToyConfig};
use mixformer::{model_report, Model, ModelConfig};

const SEED_ENV: &str = "MIXFORMER_SEED";

#[derive(Parser)]
#[command(name = "mixformer", version, about = "Mixing Block backbone: complexity analysis, gradient checks, inference and toy training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and FLOPs report for a variant or a JSON model config.
    Analyze {
        /// b0..b6, micro, or a path to a model config file.
        #[arg(long, default_value = "b1")]
        variant: String,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [224, 224])]
        resolution: Vec<u64>,
        #[arg(long, default_value_t = 1)]
        batch: u64,
        /// Levels of the layer tree shown in the text table.
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference gradient checks. Exits 0 iff every check passes.
    Gradcheck {
        #[arg(long, default_value = "block", value_parser = ["op", "block", "model"])]
        scope: String,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long)]
        seed: Option<u64>,
        /// Entries probed per tensor for block and model scopes.
        #[arg(long, default_value_t = 6)]
        max_entries: usize,
        #[arg(long)]
        json: bool,
    },
    /// Eval-mode logits for an input batch; output uses the weight-file container.
    ///
    /// Without --config or --variant the architecture is inferred from the
    /// weight names and shapes (shifted windows cannot be inferred).
    Forward {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        model: ModelSource,
    },
    /// Trains on the synthetic dataset and prints metrics.
    TrainToy {
        /// JSON file with optional `model`, `train` and `data` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        save_weights: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Print the loss every N steps (0 = never).
        #[arg(long, default_value_t = 25)]
        log_every: usize,
        #[arg(long)]
        json: bool,
    },
    /// Complexity and smoke test over the block design grid.
    Ablate {
        #[arg(long, default_value = "all", value_parser = ["parallel", "successive", "all"])]
        mode: String,
        #[arg(long, default_value = "all", value_parser = ["none", "channel", "spatial", "both", "all"])]
        interactions: String,
        /// Also run the single-knob variations of the default block.
        #[arg(long)]
        knobs: bool,
        /// Gradient-check a small block for each case, batch norms in eval mode.
        #[arg(long)]
        gradcheck: bool,
        /// Variant used for the complexity columns.
        #[arg(long, default_value = "b1")]
        variant: String,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [224, 224])]
        resolution: Vec<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Writes freshly initialised weights.
    Init {
        #[command(flatten)]
        model: ModelSource,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Writes a batch of synthetic images as a single-tensor file.
    SampleInput {
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 56)]
        size: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct ModelSource {
    /// Model config file.
    #[arg(long, conflicts_with = "variant")]
    config: Option<PathBuf>,
    /// b0..b6 or micro.
    #[arg(long)]
    variant: Option<String>,
}

impl ModelSource {
    fn resolve(&self) -> Result<Option<ModelConfig>> {
        match (&self.config, &self.variant) {
            (Some(path), _) => Ok(Some(read_model_config(path)?)),
            (None, Some(name)) => Ok(Some(named_config(name)?)),
            (None, None) => Ok(None),
        }
    }
}

fn named_config(name: &str) -> Result<ModelConfig> {
    if name.eq_ignore_ascii_case("micro") {
        return Ok(ModelConfig::micro());
    }
    Ok(ModelConfig::variant(name)?)
}

fn read_model_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ModelConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// A variant name, or failing that a config file path.
fn config_arg(arg: &str) -> Result<ModelConfig> {
    match named_config(arg) {
        Ok(cfg) => Ok(cfg),
        Err(_) if Path::new(arg).exists() => read_model_config(Path::new(arg)),
        Err(e) => Err(e.context("not a variant name or an existing config file")),
    }
}

fn seed_or_env(seed: Option<u64>) -> Result<u64> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}={v} is not an unsigned integer")),
        Err(_) => Ok(0),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn analyze(variant: &str, resolution: &[u64], batch: u64, depth: usize, json: bool) -> Result<bool> {
    let cfg = config_arg(variant)?;
    let report = model_report(&cfg, batch, resolution[0], resolution[1])?;
    if json {
        println!("{}", report.to_json()?);
    } else {
        println!("{}", report.render_text(depth));
    }
    Ok(true)
}

fn gradcheck(scope: &str, opts: SuiteOptions, json: bool) -> Result<bool> {
    let scope: Scope = scope.parse()?;
    let reports = run_scope(scope, &opts)?;
    let pass = reports.iter().all(|r| r.report.pass);
    if json {
        print_json(&reports)?;
    } else {
        for r in &reports {
            println!("{r}");
        }
        let worst = reports.iter().map(|r| r.report.max_error()).fold(0.0, f64::max);
        println!(
            "{} checks, worst relative error {worst:.3e} (tol {:e}): {}",
            reports.len(),
            opts.tol,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(pass)
}

fn forward(weights: &Path, input: &Path, output: &Path, source: &ModelSource) -> Result<bool> {
    let config = source.resolve()?;
    let mut model = Model::load(weights, config).with_context(|| format!("loading weights {}", weights.display()))?;
    let x = io::read_single(input).with_context(|| format!("reading input {}", input.display()))?;
    let logits = model.predict(&x)?;
    io::write_file(output, &[("logits", &logits)]).with_context(|| format!("writing {}", output.display()))?;
    println!("wrote logits {:?} to {}", logits.shape(), output.display());
    Ok(true)
}

fn train_toy(config: Option<&Path>, save: Option<&Path>, seed: Option<u64>, log_every: usize, json: bool) -> Result<bool> {
    let mut cfg = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<ToyConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ToyConfig::default(),
    };
    if seed.is_some() || std::env::var_os(SEED_ENV).is_some() {
        cfg.train.seed = seed_or_env(seed)?;
    }
    let (model, metrics) = run_toy(&cfg, |r| {
        if !json && log_every > 0 && r.step % log_every == 0 {
            println!("step {:>4}  lr {:.3e}  loss {:.6}", r.step, r.lr, r.loss);
        }
    })?;
    if json {
        print_json(&metrics)?;
    } else {
        for e in &metrics.evaluations {
            println!("eval step {:>4}  loss {:.6}  accuracy {:.4}", e.step, e.loss, e.accuracy);
        }
        println!(
            "initial loss {:.6}, final loss {:.6}, train accuracy {:.4} after {} steps",
            metrics.initial_loss, metrics.final_loss, metrics.train_accuracy, metrics.steps_run
        );
    }
    if let Some(path) = save {
        model.save(path).with_context(|| format!("writing {}", path.display()))?;
        if !json {
            println!("saved weights to {}", path.display());
        }
    }
    Ok(true)
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    mode: &str,
    interactions: &str,
    knobs: bool,
    gradcheck: bool,
    variant: &str,
    resolution: &[u64],
    seed: u64,
    json: bool,
) -> Result<bool> {
    let base = config_arg(variant)?;
    let modes: Vec<BlockMode> = match mode {
        "all" => vec![BlockMode::Parallel, BlockMode::Successive],
        m => vec![parse_mode(m)?],
    };
    let subsets: Vec<Interactions> = match interactions {
        "all" => Interactions::ALL.to_vec(),
        i => vec![i.parse()?],
    };
    let mut cases: Vec<AblationCase> = interaction_grid()
        .into_iter()
        .filter(|c| modes.contains(&c.template.mode))
        .filter(|c| subsets.iter().any(|i| i.flags() == (c.template.channel_interaction, c.template.spatial_interaction)))
        .collect();
    if knobs {
        cases.extend(knob_grid());
    }
    let opts = SuiteOptions {
        seed,
        ..SuiteOptions::default()
    };
    let check = gradcheck.then_some(&opts);
    let mut rows = Vec::with_capacity(cases.len());
    for case in &cases {
        let row = run_case(case, &base, (resolution[0], resolution[1]), check)?;
        if !json {
            println!("{row}");
        }
        rows.push(row);
    }
    let ok = rows.iter().all(|r| r.ok());
    if json {
        print_json(&rows)?;
    } else {
        println!("{} cases on {} at {}x{}: {}", rows.len(), base.name, resolution[0], resolution[1], if ok { "ok" } else { "FAIL" });
    }
    Ok(ok)
}

fn init(source: &ModelSource, seed: Option<u64>, output: &Path) -> Result<bool> {
    let Some(cfg) = source.resolve()? else {
        bail!("init needs --variant or --config");
    };
    let model = Model::build(cfg, seed_or_env(seed)?)?;
    model.save(output).with_context(|| format!("writing {}", output.display()))?;
    println!("wrote {} parameters to {}", model.num_params(), output.display());
    Ok(true)
}

fn sample_input(batch: usize, size: usize, seed: Option<u64>, output: &Path) -> Result<bool> {
    let data = SyntheticDataset::generate(DatasetConfig {
        seed: seed_or_env(seed)?,
        image_size: size,
        samples_per_class: batch.div_ceil(4).max(1),
        ..DatasetConfig::default()
    })?;
    let (x, _) = data.batch(&(0..batch).collect::<Vec<_>>())?;
    io::write_file(output, &[("input", &x)]).with_context(|| format!("writing {}", output.display()))?;
    println!("wrote input {:?} to {}", x.shape(), output.display());
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Analyze {
            variant,
            resolution,
            batch,
            depth,
            json,
        } => analyze(&variant, &resolution, batch, depth, json),
        Command::Gradcheck {
            scope,
            tol,
            epsilon,
            seed,
            max_entries,
            json,
        } => {
            let opts = SuiteOptions {
                tol,
                epsilon,
                seed: seed_or_env(seed)?,
                max_entries,
            };
            gradcheck(&scope, opts, json)
        }
        Command::Forward {
            weights,
            input,
            output,
            model,
        } => forward(&weights, &input, &output, &model),
        Command::TrainToy {
            config,
            save_weights,
            seed,
            log_every,
            json,
        } => train_toy(config.as_deref(), save_weights.as_deref(), seed, log_every, json),
        Command::Ablate {
            mode,
            interactions,
            knobs,
            gradcheck,
            variant,
            resolution,
            seed,
            json,
        } => ablate(&mode, &interactions, knobs, gradcheck, &variant, &resolution, seed_or_env(seed)?, json),
        Command::Init { model, seed, output } => init(&model, seed, &output),
        Command::SampleInput {
            batch,
            size,
            seed,
            output,
        } => sample_input(batch, size, seed, &output),
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
