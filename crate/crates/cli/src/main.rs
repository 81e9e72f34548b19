//! `preload`: train, fine-tune, evaluate and probe extra-class OOD models.
//!
//! Every subcommand takes the same `--config`, `--seed` and `--out-dir`
//! flags. Failures print a single JSON line `{"error":..,"kind":..}` on
//! stderr and exit with status 1 (2 for usage errors).

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use preload_core::harness::probe::{write_grid_csv, write_probe_csv};
use preload_core::harness::{
    base_config, confidence_grid, evaluate, finetune, ood_suites, prepare_data, scaling_probe, train_scratch,
    verify, DataBundle, ExperimentConfig, GridBounds, MetricTable, RunRecord,
};
use preload_core::{MethodKind, ModelParams, RngState, Stream};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "preload",
    version,
    about = "Extra-class OOD rejection for ReLU classifiers"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config as JSON; defaults to the two-moons setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Method for the default config (ignored when --config is given).
    #[arg(long, global = true, value_parser = parse_method)]
    method: Option<MethodKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch. Fine-tune methods first train a Standard base.
    Train,
    /// Fine-tune a trained Standard model.
    Finetune {
        #[arg(long)]
        model: PathBuf,
    },
    /// Accuracy, ECE and far-away FPR-95/AUROC of a saved model.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Predictions along rays `t * u` for random unit directions `u`.
    Probe {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        directions: usize,
        #[arg(long, value_delimiter = ',', default_value = "1,10,100,1000,10000")]
        t: Vec<f64>,
    },
    /// Confidence over a regular 2-D grid.
    Grid {
        #[arg(long)]
        model: PathBuf,
        /// x_min,x_max,y_min,y_max
        #[arg(long, value_delimiter = ',', num_args = 4, default_value = "-3,3,-3,3")]
        bounds: Vec<f64>,
        #[arg(long, default_value_t = 61)]
        resolution: usize,
    },
    /// Invariant, gradient, metric and determinism self-checks.
    Verify,
}

#[derive(Debug)]
enum CliError {
    Core(preload_core::Error),
    /// I/O failure on a named input file.
    Input(PathBuf, std::io::Error),
    Usage(String),
    VerifyFailed(Vec<String>),
}

impl From<preload_core::Error> for CliError {
    fn from(e: preload_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Input(..) => "io",
            CliError::Usage(_) => "usage",
            CliError::VerifyFailed(_) => "verify_failed",
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Core(e) => e.to_string(),
            CliError::Input(path, e) => format!("{}: {e}", path.display()),
            CliError::Usage(m) => m.clone(),
            CliError::VerifyFailed(names) => format!("failed checks: {}", names.join(", ")),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Attaches `path` to bare I/O errors from reading an input file.
fn reading<T>(path: &Path, r: preload_core::Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        preload_core::Error::Io(io) => CliError::Input(path.to_path_buf(), io),
        other => CliError::Core(other),
    })
}

fn parse_method(s: &str) -> std::result::Result<MethodKind, String> {
    MethodKind::ALL
        .into_iter()
        .find(|m| m.name() == s)
        .ok_or_else(|| {
            let names: Vec<_> = MethodKind::ALL.iter().map(|m| m.name()).collect();
            format!("unknown method {s:?}, expected one of {}", names.join("|"))
        })
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => reading(path, ExperimentConfig::load(path))?,
        None => ExperimentConfig::two_moons(common.method.unwrap_or(MethodKind::PreLoad)),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if cfg.seeds.is_empty() {
        return Err(CliError::Usage("config lists no seeds".into()));
    }
    Ok(cfg)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(preload_core::Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn write_metrics(path: &Path, table: &MetricTable) -> Result<()> {
    table.write_csv(BufWriter::new(File::create(path)?))?;
    Ok(())
}

/// Output directory for one seed: the root itself for single-seed runs.
fn seed_dir(root: &Path, seeds: &[u64], seed: u64) -> Result<PathBuf> {
    let dir = if seeds.len() == 1 {
        root.to_path_buf()
    } else {
        root.join(format!("seed-{seed}"))
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

struct SeedOutcome {
    record: RunRecord,
    metrics: MetricTable,
}

fn eval_suites(
    params: &ModelParams,
    cfg: &ExperimentConfig,
    data: &DataBundle,
    seed: u64,
) -> Result<MetricTable> {
    let suites = ood_suites(&cfg.eval, cfg.arch.input_dim, seed, Some(&data.train))?;
    Ok(evaluate(
        params,
        cfg.method,
        cfg.score_rule(),
        &data.test,
        &suites,
    )?)
}

/// Runs `job` for every seed on its own thread and writes the per-seed and
/// aggregated artifacts.
fn run_seeds<F>(command: &str, cfg: &ExperimentConfig, out: &Path, job: F) -> Result<()>
where
    F: Fn(u64) -> Result<(Option<ModelParams>, SeedOutcome)> + Sync,
{
    let start = Instant::now();
    let results: Vec<Result<_>> = std::thread::scope(|s| {
        let job = &job;
        let handles: Vec<_> = cfg.seeds.iter().map(|&seed| s.spawn(move || job(seed))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("seed thread panicked"))
            .collect()
    });

    let mut records = Vec::new();
    let mut tables = Vec::new();
    for (&seed, result) in cfg.seeds.iter().zip(results) {
        let (params, outcome) = result?;
        let dir = seed_dir(out, &cfg.seeds, seed)?;
        if let Some(p) = &params {
            p.save(dir.join("model.bin"))?;
        }
        write_metrics(&dir.join("metrics.csv"), &outcome.metrics)?;
        if cfg.seeds.len() > 1 {
            let rec = serde_json::to_value(&outcome.record).map_err(preload_core::Error::from)?;
            write_json(&dir.join("run.json"), &rec)?;
        }
        records.push(outcome.record);
        tables.push(outcome.metrics);
    }

    let table = if tables.len() == 1 {
        tables.pop().expect("one table")
    } else {
        MetricTable::aggregate(&tables)
    };
    write_metrics(&out.join("metrics.csv"), &table)?;
    write_json(
        &out.join("run.json"),
        &json!({
            "command": command,
            "config": cfg,
            "seeds": cfg.seeds,
            "runs": records,
            "metrics": table.rows,
            "wall_clock_secs": start.elapsed().as_secs_f64(),
        }),
    )?;
    print!("{}", table.to_csv_string());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    run_seeds("train", cfg, out, |seed| {
        let data = prepare_data(cfg, seed)?;
        let (params, mut record) = if cfg.method.is_finetune() {
            let (base, base_rec) = train_scratch(&base_config(cfg), &data, seed)?;
            let (params, mut rec) = finetune(&base, cfg, &data, seed)?;
            let mut epochs = base_rec.epochs;
            epochs.append(&mut rec.epochs);
            rec.epochs = epochs;
            rec.wall_clock_secs += base_rec.wall_clock_secs;
            (params, rec)
        } else {
            train_scratch(cfg, &data, seed)?
        };
        let metrics = eval_suites(&params, cfg, &data, seed)?;
        record.metrics = metrics.rows.clone();
        Ok((Some(params), SeedOutcome { record, metrics }))
    })
}

fn cmd_finetune(cfg: &ExperimentConfig, model: &Path, out: &Path) -> Result<()> {
    if !cfg.method.is_finetune() {
        return Err(CliError::Usage(format!(
            "finetune needs a fine-tune method, config has {}",
            cfg.method
        )));
    }
    let base = reading(model, ModelParams::load(model))?;
    run_seeds("finetune", cfg, out, |seed| {
        let data = prepare_data(cfg, seed)?;
        let (params, mut record) = finetune(&base, cfg, &data, seed)?;
        let metrics = eval_suites(&params, cfg, &data, seed)?;
        record.metrics = metrics.rows.clone();
        Ok((Some(params), SeedOutcome { record, metrics }))
    })
}

fn cmd_eval(cfg: &ExperimentConfig, model: &Path, out: &Path) -> Result<()> {
    let params = reading(model, ModelParams::load(model))?;
    if params.extra_head != cfg.method.extra_head() {
        return Err(CliError::Core(preload_core::Error::MethodMismatch {
            method: cfg.method.to_string(),
            detail: format!("a model with a {:?} extra head", params.extra_head),
        }));
    }
    run_seeds("eval", cfg, out, |seed| {
        let start = Instant::now();
        let data = prepare_data(cfg, seed)?;
        let metrics = eval_suites(&params, cfg, &data, seed)?;
        let record = RunRecord {
            method: cfg.method,
            seed,
            epochs: Vec::new(),
            train_accuracy: preload_core::harness::accuracy(&params, &data.train)?,
            metrics: metrics.rows.clone(),
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        Ok((None, SeedOutcome { record, metrics }))
    })
}

fn cmd_probe(cfg: &ExperimentConfig, model: &Path, out: &Path, directions: usize, t: &[f64]) -> Result<()> {
    if t.is_empty() || t.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
        return Err(CliError::Usage("--t needs finite nonnegative values".into()));
    }
    if t.windows(2).any(|w| w[0] > w[1]) {
        return Err(CliError::Usage("--t must be sorted ascending".into()));
    }
    let params = reading(model, ModelParams::load(model))?;
    let seed = cfg.seeds[0];
    let mut rng = RngState::stream(seed, Stream::Probe);
    let k = params.arch.num_classes;
    let mut rows = Vec::with_capacity(directions * t.len());
    let mut rejected = 0;
    for d in 0..directions {
        let u = rng.unit_vector(params.arch.input_dim);
        let probe = scaling_probe(&params, &u, t)?;
        if probe.last().is_some_and(|r| r.predicted_class == k) {
            rejected += 1;
        }
        rows.extend(probe.into_iter().map(|r| (d, r)));
    }
    write_probe_csv(&rows, BufWriter::new(File::create(out.join("probe.csv"))?))?;
    let t_max = t[t.len() - 1];
    write_json(
        &out.join("run.json"),
        &json!({
            "command": "probe",
            "config": cfg,
            "seeds": [seed],
            "directions": directions,
            "t": t,
            "extra_class_at_t_max": rejected,
        }),
    )?;
    println!("{rejected}/{directions} directions predict the extra class at t={t_max}");
    Ok(())
}

fn cmd_grid(
    cfg: &ExperimentConfig,
    model: &Path,
    out: &Path,
    bounds: &[f64],
    resolution: usize,
) -> Result<()> {
    let params = reading(model, ModelParams::load(model))?;
    let b = GridBounds {
        x_min: bounds[0],
        x_max: bounds[1],
        y_min: bounds[2],
        y_max: bounds[3],
    };
    if !(b.x_min < b.x_max && b.y_min < b.y_max) {
        return Err(CliError::Usage(
            "--bounds needs x_min < x_max and y_min < y_max".into(),
        ));
    }
    let rows = confidence_grid(&params, b, (resolution, resolution))?;
    write_grid_csv(&rows, BufWriter::new(File::create(out.join("grid.csv"))?))?;
    write_json(
        &out.join("run.json"),
        &json!({
            "command": "grid",
            "config": cfg,
            "bounds": b,
            "resolution": [resolution, resolution],
            "rows": rows.len(),
        }),
    )?;
    println!("{} grid points", rows.len());
    Ok(())
}

fn cmd_verify(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let seed = cfg.seeds[0];
    let checks = verify::run_all(seed)?;
    for c in &checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!("{verdict} {}: {}", c.name, c.detail);
    }
    write_json(
        &out.join("run.json"),
        &json!({ "command": "verify", "seeds": [seed], "checks": checks }),
    )?;
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.clone())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::VerifyFailed(failed))
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out_dir;
    fs::create_dir_all(out)?;
    match cli.command {
        Command::Train => cmd_train(&cfg, out),
        Command::Finetune { model } => cmd_finetune(&cfg, &model, out),
        Command::Eval { model } => cmd_eval(&cfg, &model, out),
        Command::Probe { model, directions, t } => cmd_probe(&cfg, &model, out, directions, &t),
        Command::Grid {
            model,
            bounds,
            resolution,
        } => cmd_grid(&cfg, &model, out, &bounds, resolution),
        Command::Verify => cmd_verify(&cfg, out),
    }
}

fn fail(kind: &str, message: &str) {
    let line = json!({ "error": message.lines().next().unwrap_or(""), "kind": kind });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.trim_start_matches("error: ");
            fail("usage", first);
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            fail(e.kind(), &e.message());
            ExitCode::from(1)
        }
    }
}
